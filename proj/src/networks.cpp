#include "xr2vol/networks.hpp"

#include <cmath>
#include <stdexcept>

namespace xr2vol {

int norm_groups(int c) {
    for (int g : {8, 4, 2, 1})
        if (c % g == 0) return g;
    return 1;
}

static void check_pow2_divisible(int res, int stages, const char* who) {
    int div = 1 << (stages - 1);
    if (res % div != 0)
        throw std::invalid_argument(std::string(who) + ": resolution not divisible by 2^(stages-1)");
}

void AutoencoderConfig::validate() const {
    if (channel_multipliers.empty()) throw std::invalid_argument("ae: empty multipliers");
    if (base_channels < 1 || latent_channels < 1 || io_channels < 1)
        throw std::invalid_argument("ae: nonpositive channel count");
    check_pow2_divisible(input_resolution, stages(), "ae");
}

void CondEncoderConfig::validate() const {
    if (channel_multipliers.empty()) throw std::invalid_argument("e2: empty multipliers");
    check_pow2_divisible(input_resolution, stages(), "e2");
}

bool UNetConfig::attention_at(int stage) const {
    int factor = 1 << stage;
    for (int f : attention_factors)
        if (f == factor) return true;
    return false;
}

void UNetConfig::validate() const {
    if (channel_multipliers.empty()) throw std::invalid_argument("unet: empty multipliers");
    if (in_channels != 2 * out_channels)
        throw std::invalid_argument("unet: in_channels must be twice out_channels");
    check_pow2_divisible(latent_resolution, stages(), "unet");
    for (int s = 0; s < stages(); ++s) {
        int c = base_channels * channel_multipliers[static_cast<size_t>(s)];
        if (attention_at(s) && attention_heads > 0 && c % attention_heads != 0)
            throw std::invalid_argument("unet: heads must divide attention channels");
    }
    if (base_channels % 2 != 0) throw std::invalid_argument("unet: base_channels must be even");
}

// ---- shared layer builders ----

static void reg_conv(ParamStore& s, RngHandle& rng, const std::string& name, int co, int ci, int k,
                     bool zero = false) {
    s.add(name + ".w", zero ? init_zeros({co, ci, k, k}) : init_conv_weight(co, ci, k, k, rng));
    s.add(name + ".b", init_zeros({co}));
}

static Var fwd_conv(Tape& t, TapeParams& tp, const std::string& name, Var x, int stride, int pad) {
    return t.conv2d(x, tp[name + ".w"], tp[name + ".b"], stride, pad);
}

static void reg_linear(ParamStore& s, RngHandle& rng, const std::string& name, int m, int n,
                       bool zero = false) {
    s.add(name + ".w", zero ? init_zeros({m, n}) : init_linear_weight(m, n, rng));
    s.add(name + ".b", init_zeros({m}));
}

static Var fwd_linear(Tape& t, TapeParams& tp, const std::string& name, Var x) {
    return t.affine(tp[name + ".w"], x, tp[name + ".b"]);
}

// Row-wise linear for token matrices {r, n} with weight {m, n}.
static Var fwd_linear_rows(Tape& t, TapeParams& tp, const std::string& name, Var x) {
    return t.add_row_vec(t.matmul(x, t.transpose(tp[name + ".w"])), tp[name + ".b"]);
}

static void reg_gn(ParamStore& s, const std::string& name, int c) {
    s.add(name + ".g", init_ones({c}));
    s.add(name + ".b", init_zeros({c}));
}

static Var fwd_gn(Tape& t, TapeParams& tp, const std::string& name, Var x) {
    int c = t.val(x).dim(0);
    return t.group_norm(x, tp[name + ".g"], tp[name + ".b"], norm_groups(c), 1e-5);
}

static void reg_resblock(ParamStore& s, RngHandle& rng, const std::string& prefix, int cin,
                         int cout, int emb_dim) {
    reg_gn(s, prefix + ".gn1", cin);
    reg_conv(s, rng, prefix + ".conv1", cout, cin, 3);
    if (emb_dim > 0) reg_linear(s, rng, prefix + ".emb", cout, emb_dim);
    reg_gn(s, prefix + ".gn2", cout);
    reg_conv(s, rng, prefix + ".conv2", cout, cout, 3, /*zero=*/true);
    if (cin != cout) reg_conv(s, rng, prefix + ".skip", cout, cin, 1);
}

// emb holds the already-activated embedding vector, or id < 0 for none.
static Var fwd_resblock(Tape& t, TapeParams& tp, const std::string& prefix, Var x, int cin,
                        int cout, Var emb) {
    Var h = fwd_conv(t, tp, prefix + ".conv1", t.swish(fwd_gn(t, tp, prefix + ".gn1", x)), 1, 1);
    if (emb.id >= 0) h = t.add_channel_bias(h, fwd_linear(t, tp, prefix + ".emb", emb));
    h = fwd_conv(t, tp, prefix + ".conv2", t.swish(fwd_gn(t, tp, prefix + ".gn2", h)), 1, 1);
    Var skip = cin == cout ? x : fwd_conv(t, tp, prefix + ".skip", x, 1, 0);
    return t.add(h, skip);
}

static void reg_attention(ParamStore& s, RngHandle& rng, const std::string& prefix, int c,
                          int ctx_dim) {
    reg_gn(s, prefix + ".norm", c);
    s.add(prefix + ".wq", init_linear_weight(c, c, rng));
    s.add(prefix + ".wk", init_linear_weight(c, c, rng));
    s.add(prefix + ".wv", init_linear_weight(c, c, rng));
    reg_linear(s, rng, prefix + ".proj", c, c, /*zero=*/true);
    s.add(prefix + ".wq2", init_linear_weight(c, c, rng));
    s.add(prefix + ".wk2", init_linear_weight(ctx_dim, c, rng));
    s.add(prefix + ".wv2", init_linear_weight(ctx_dim, c, rng));
    reg_linear(s, rng, prefix + ".proj2", c, c, /*zero=*/true);
    int f = 2 * c;
    reg_linear(s, rng, prefix + ".ffn1", f, c);
    reg_linear(s, rng, prefix + ".ffn2", c, f, /*zero=*/true);
}

// Single-token context cross-attention collapses to a broadcast of the
// projected context; kept in attention form so the shapes stay uniform.
static Var fwd_attention(Tape& t, TapeParams& tp, const std::string& prefix, Var x, Var context,
                         int heads) {
    const Tensor& xv = t.val(x);
    int c = xv.dim(0), h = xv.dim(1), w = xv.dim(2);
    int tok = h * w;
    Var xn = fwd_gn(t, tp, prefix + ".norm", x);
    Var xt = t.transpose(t.reshape(xn, {c, tok}));  // {tok, c}

    Var q = t.matmul(xt, tp[prefix + ".wq"]);
    Var k = t.matmul(xt, tp[prefix + ".wk"]);
    Var v = t.matmul(xt, tp[prefix + ".wv"]);
    Var att{-1};
    if (heads <= 1) {
        Var scores = t.scale(t.matmul(q, t.transpose(k)), 1.0 / std::sqrt(double(c)));
        att = t.matmul(t.softmax_rows(scores), v);
    } else {
        int dh = c / heads;
        Var qt = t.transpose(q), kt = t.transpose(k), vt = t.transpose(v);  // {c, tok}
        std::vector<Var> parts;
        for (int hd = 0; hd < heads; ++hd) {
            Var qh = t.transpose(t.slice_ch(qt, hd * dh, dh));  // {tok, dh}
            Var kh = t.slice_ch(kt, hd * dh, dh);               // {dh, tok}
            Var vh = t.transpose(t.slice_ch(vt, hd * dh, dh));  // {tok, dh}
            Var sc = t.scale(t.matmul(qh, kh), 1.0 / std::sqrt(double(dh)));
            parts.push_back(t.transpose(t.matmul(t.softmax_rows(sc), vh)));  // {dh, tok}
        }
        att = t.transpose(t.concat_ch(parts));  // {tok, c}
    }
    Var x1 = t.add(xt, fwd_linear_rows(t, tp, prefix + ".proj", att));

    const Tensor& ctxv = t.val(context);
    Var ctx_row = t.reshape(context, {1, ctxv.dim(0)});
    Var q2 = t.matmul(x1, tp[prefix + ".wq2"]);
    Var k2 = t.matmul(ctx_row, tp[prefix + ".wk2"]);  // {1, c}
    Var v2 = t.matmul(ctx_row, tp[prefix + ".wv2"]);  // {1, c}
    Var sc2 = t.scale(t.matmul(q2, t.transpose(k2)), 1.0 / std::sqrt(double(c)));
    Var att2 = t.matmul(t.softmax_rows(sc2), v2);  // {tok, c}
    Var x2 = t.add(x1, fwd_linear_rows(t, tp, prefix + ".proj2", att2));

    Var f = t.swish(fwd_linear_rows(t, tp, prefix + ".ffn1", x2));
    Var x3 = t.add(x2, fwd_linear_rows(t, tp, prefix + ".ffn2", f));
    return t.reshape(t.transpose(x3), {c, h, w});
}

static std::vector<int> stage_channels(int base, const std::vector<int>& mults) {
    std::vector<int> ch;
    ch.reserve(mults.size());
    for (int m : mults) ch.push_back(base * m);
    return ch;
}

// ---- autoencoder ----

void register_autoencoder(ParamStore& s, const AutoencoderConfig& cfg, RngHandle& rng) {
    cfg.validate();
    auto ch = stage_channels(cfg.base_channels, cfg.channel_multipliers);
    int S = cfg.stages();
    reg_conv(s, rng, "ae.enc.in", ch[0], cfg.io_channels, 3);
    for (int st = 0; st < S; ++st) {
        int cin = st == 0 ? ch[0] : ch[static_cast<size_t>(st) - 1];
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b) {
            reg_resblock(s, rng, "ae.enc.s" + std::to_string(st) + ".b" + std::to_string(b),
                         b == 0 ? cin : ch[static_cast<size_t>(st)], ch[static_cast<size_t>(st)],
                         0);
        }
        if (st < S - 1)
            reg_conv(s, rng, "ae.enc.s" + std::to_string(st) + ".ds", ch[static_cast<size_t>(st)],
                     ch[static_cast<size_t>(st)], 3);
    }
    reg_gn(s, "ae.enc.out.gn", ch.back());
    reg_conv(s, rng, "ae.enc.out.conv", 2 * cfg.latent_channels, ch.back(), 3, /*zero=*/true);

    reg_conv(s, rng, "ae.dec.in", ch.back(), cfg.latent_channels, 3);
    for (int st = S - 1; st >= 0; --st) {
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            reg_resblock(s, rng, "ae.dec.s" + std::to_string(st) + ".b" + std::to_string(b),
                         ch[static_cast<size_t>(st)], ch[static_cast<size_t>(st)], 0);
        if (st > 0)
            reg_conv(s, rng, "ae.dec.s" + std::to_string(st) + ".us",
                     ch[static_cast<size_t>(st) - 1], ch[static_cast<size_t>(st)], 3);
    }
    reg_gn(s, "ae.dec.out.gn", ch[0]);
    reg_conv(s, rng, "ae.dec.out.conv", cfg.io_channels, ch[0], 3, /*zero=*/true);
}

Var ae_encode_tape(Tape& t, TapeParams& tp, Var x, const AutoencoderConfig& cfg) {
    const Tensor& xv = t.val(x);
    if (xv.rank() != 3 || xv.dim(0) != cfg.io_channels || xv.dim(1) != cfg.input_resolution ||
        xv.dim(2) != cfg.input_resolution)
        throw std::invalid_argument("ae_encode: input resolution mismatch");
    auto ch = stage_channels(cfg.base_channels, cfg.channel_multipliers);
    int S = cfg.stages();
    Var h = fwd_conv(t, tp, "ae.enc.in", x, 1, 1);
    for (int st = 0; st < S; ++st) {
        int cin = st == 0 ? ch[0] : ch[static_cast<size_t>(st) - 1];
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            h = fwd_resblock(t, tp, "ae.enc.s" + std::to_string(st) + ".b" + std::to_string(b), h,
                             b == 0 ? cin : ch[static_cast<size_t>(st)],
                             ch[static_cast<size_t>(st)], Var{-1});
        if (st < S - 1) h = fwd_conv(t, tp, "ae.enc.s" + std::to_string(st) + ".ds", h, 2, 1);
    }
    h = t.swish(fwd_gn(t, tp, "ae.enc.out.gn", h));
    return fwd_conv(t, tp, "ae.enc.out.conv", h, 1, 1);
}

std::pair<Var, Var> split_posterior_tape(Tape& t, Var enc_out, int latent_channels) {
    Var mean = t.slice_ch(enc_out, 0, latent_channels);
    Var logvar = t.clamp(t.slice_ch(enc_out, latent_channels, latent_channels), -30.0, 20.0);
    return {mean, logvar};
}

Var ae_decode_tape(Tape& t, TapeParams& tp, Var z, const AutoencoderConfig& cfg) {
    const Tensor& zv = t.val(z);
    if (zv.rank() != 3 || zv.dim(0) != cfg.latent_channels ||
        zv.dim(1) != cfg.latent_resolution() || zv.dim(2) != cfg.latent_resolution())
        throw std::invalid_argument("ae_decode: latent resolution mismatch");
    auto ch = stage_channels(cfg.base_channels, cfg.channel_multipliers);
    int S = cfg.stages();
    Var h = fwd_conv(t, tp, "ae.dec.in", z, 1, 1);
    for (int st = S - 1; st >= 0; --st) {
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            h = fwd_resblock(t, tp, "ae.dec.s" + std::to_string(st) + ".b" + std::to_string(b), h,
                             ch[static_cast<size_t>(st)], ch[static_cast<size_t>(st)], Var{-1});
        if (st > 0)
            h = fwd_conv(t, tp, "ae.dec.s" + std::to_string(st) + ".us", t.upsample2x(h), 1, 1);
    }
    h = t.swish(fwd_gn(t, tp, "ae.dec.out.gn", h));
    return fwd_conv(t, tp, "ae.dec.out.conv", h, 1, 1);
}

// ---- condition encoder ----

void register_cond_encoder(ParamStore& s, const CondEncoderConfig& cfg, RngHandle& rng) {
    cfg.validate();
    auto ch = stage_channels(cfg.base_channels, cfg.channel_multipliers);
    int S = cfg.stages();
    reg_conv(s, rng, "e2.in", ch[0], cfg.io_channels, 3);
    for (int st = 0; st < S; ++st) {
        int cin = st == 0 ? ch[0] : ch[static_cast<size_t>(st) - 1];
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            reg_resblock(s, rng, "e2.s" + std::to_string(st) + ".b" + std::to_string(b),
                         b == 0 ? cin : ch[static_cast<size_t>(st)], ch[static_cast<size_t>(st)],
                         0);
        if (st < S - 1)
            reg_conv(s, rng, "e2.s" + std::to_string(st) + ".ds", ch[static_cast<size_t>(st)],
                     ch[static_cast<size_t>(st)], 3);
    }
    reg_gn(s, "e2.lat.gn", ch.back());
    reg_conv(s, rng, "e2.lat.conv", cfg.latent_channels, ch.back(), 3);
    reg_linear(s, rng, "e2.ctx", cfg.context_dim, ch.back());
}

std::pair<Var, Var> e2_encode_tape(Tape& t, TapeParams& tp, Var x, const CondEncoderConfig& cfg) {
    const Tensor& xv = t.val(x);
    if (xv.rank() != 3 || xv.dim(0) != cfg.io_channels || xv.dim(1) != cfg.input_resolution)
        throw std::invalid_argument("e2_encode: input resolution mismatch");
    auto ch = stage_channels(cfg.base_channels, cfg.channel_multipliers);
    int S = cfg.stages();
    Var h = fwd_conv(t, tp, "e2.in", x, 1, 1);
    for (int st = 0; st < S; ++st) {
        int cin = st == 0 ? ch[0] : ch[static_cast<size_t>(st) - 1];
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            h = fwd_resblock(t, tp, "e2.s" + std::to_string(st) + ".b" + std::to_string(b), h,
                             b == 0 ? cin : ch[static_cast<size_t>(st)],
                             ch[static_cast<size_t>(st)], Var{-1});
        if (st < S - 1) h = fwd_conv(t, tp, "e2.s" + std::to_string(st) + ".ds", h, 2, 1);
    }
    Var lat = fwd_conv(t, tp, "e2.lat.conv", t.swish(fwd_gn(t, tp, "e2.lat.gn", h)), 1, 1);
    Var ctx = fwd_linear(t, tp, "e2.ctx", t.global_avg_pool(h));
    return {lat, ctx};
}

// ---- U-Net ----

void register_unet(ParamStore& s, const UNetConfig& cfg, RngHandle& rng) {
    cfg.validate();
    auto ch = stage_channels(cfg.base_channels, cfg.channel_multipliers);
    int S = cfg.stages();
    int ed = cfg.emb_dim();
    reg_linear(s, rng, "unet.temb.l1", ed, cfg.base_channels);
    reg_linear(s, rng, "unet.temb.l2", ed, ed);
    reg_linear(s, rng, "unet.demb.l1", ed, cfg.base_channels);
    reg_linear(s, rng, "unet.demb.l2", ed, ed);
    reg_conv(s, rng, "unet.in", ch[0], cfg.in_channels, 3);
    for (int st = 0; st < S; ++st) {
        int cin = st == 0 ? ch[0] : ch[static_cast<size_t>(st) - 1];
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            reg_resblock(s, rng, "unet.down" + std::to_string(st) + ".b" + std::to_string(b),
                         b == 0 ? cin : ch[static_cast<size_t>(st)], ch[static_cast<size_t>(st)],
                         ed);
        if (cfg.attention_at(st))
            reg_attention(s, rng, "unet.down" + std::to_string(st) + ".attn",
                          ch[static_cast<size_t>(st)], cfg.context_dim);
        if (st < S - 1)
            reg_conv(s, rng, "unet.down" + std::to_string(st) + ".ds", ch[static_cast<size_t>(st)],
                     ch[static_cast<size_t>(st)], 3);
    }
    reg_resblock(s, rng, "unet.mid.b0", ch.back(), ch.back(), ed);
    reg_attention(s, rng, "unet.mid.attn", ch.back(), cfg.context_dim);
    reg_resblock(s, rng, "unet.mid.b1", ch.back(), ch.back(), ed);
    for (int st = S - 1; st >= 0; --st) {
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            reg_resblock(s, rng, "unet.up" + std::to_string(st) + ".b" + std::to_string(b),
                         b == 0 ? 2 * ch[static_cast<size_t>(st)] : ch[static_cast<size_t>(st)],
                         ch[static_cast<size_t>(st)], 0);
        reg_conv(s, rng, "unet.up" + std::to_string(st) + ".gproj", ch[static_cast<size_t>(st)], 1,
                 1);
        if (cfg.attention_at(st))
            reg_attention(s, rng, "unet.up" + std::to_string(st) + ".attn",
                          ch[static_cast<size_t>(st)], cfg.context_dim);
        if (st > 0)
            reg_conv(s, rng, "unet.up" + std::to_string(st) + ".us",
                     ch[static_cast<size_t>(st) - 1], ch[static_cast<size_t>(st)], 3);
    }
    reg_gn(s, "unet.out.gn", ch[0]);
    reg_conv(s, rng, "unet.out.conv", cfg.out_channels, ch[0], 3, /*zero=*/true);
}

Var unet_tape(Tape& t, TapeParams& tp, Var z_concat, int timestep, int total_steps, double depth,
              Var y_combined, Var context, const UNetConfig& cfg) {
    const Tensor& zv = t.val(z_concat);
    if (zv.rank() != 3 || zv.dim(0) != cfg.in_channels || zv.dim(1) != cfg.latent_resolution ||
        zv.dim(2) != cfg.latent_resolution)
        throw std::invalid_argument("unet: input shape mismatch");
    // copy dims now; val() references go stale once later ops grow the tape
    const Tensor& yv = t.val(y_combined);
    if (yv.rank() != 2) throw std::invalid_argument("unet: guidance plane must be {h,w}");
    int yh = yv.dim(0), yw = yv.dim(1);
    auto ch = stage_channels(cfg.base_channels, cfg.channel_multipliers);
    int S = cfg.stages();

    Var traw = t.leaf(embed_timestep(timestep, total_steps, cfg.base_channels));
    Var draw = t.leaf(embed_depth(depth, cfg.base_channels));
    Var temb = fwd_linear(t, tp, "unet.temb.l2",
                          t.swish(fwd_linear(t, tp, "unet.temb.l1", traw)));
    Var demb = fwd_linear(t, tp, "unet.demb.l2",
                          t.swish(fwd_linear(t, tp, "unet.demb.l1", draw)));
    Var emb = t.swish(t.add(temb, demb));

    Var h = fwd_conv(t, tp, "unet.in", z_concat, 1, 1);
    std::vector<Var> skips;
    for (int st = 0; st < S; ++st) {
        int cin = st == 0 ? ch[0] : ch[static_cast<size_t>(st) - 1];
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            h = fwd_resblock(t, tp, "unet.down" + std::to_string(st) + ".b" + std::to_string(b), h,
                             b == 0 ? cin : ch[static_cast<size_t>(st)],
                             ch[static_cast<size_t>(st)], emb);
        if (cfg.attention_at(st))
            h = fwd_attention(t, tp, "unet.down" + std::to_string(st) + ".attn", h, context,
                              cfg.attention_heads);
        skips.push_back(h);
        if (st < S - 1) h = fwd_conv(t, tp, "unet.down" + std::to_string(st) + ".ds", h, 2, 1);
    }
    h = fwd_resblock(t, tp, "unet.mid.b0", h, ch.back(), ch.back(), emb);
    h = fwd_attention(t, tp, "unet.mid.attn", h, context, cfg.attention_heads);
    h = fwd_resblock(t, tp, "unet.mid.b1", h, ch.back(), ch.back(), emb);

    // guidance plane pooled to each stage resolution, channel-lifted, added
    Var yplane = t.reshape(y_combined, {1, yh, yw});
    for (int st = S - 1; st >= 0; --st) {
        h = t.concat_ch({h, skips[static_cast<size_t>(st)]});
        for (int b = 0; b < cfg.res_blocks_per_stage; ++b)
            h = fwd_resblock(t, tp, "unet.up" + std::to_string(st) + ".b" + std::to_string(b), h,
                             b == 0 ? 2 * ch[static_cast<size_t>(st)] : ch[static_cast<size_t>(st)],
                             ch[static_cast<size_t>(st)], Var{-1});
        int stage_res = cfg.latent_resolution >> st;
        Var yp = yplane;
        while (t.val(yp).dim(1) > stage_res) yp = t.avgpool2x(yp);
        if (t.val(yp).dim(1) != stage_res)
            throw std::invalid_argument("unet: guidance plane does not pool to stage resolution");
        h = t.add(h, fwd_conv(t, tp, "unet.up" + std::to_string(st) + ".gproj", yp, 1, 0));
        if (cfg.attention_at(st))
            h = fwd_attention(t, tp, "unet.up" + std::to_string(st) + ".attn", h, context,
                              cfg.attention_heads);
        if (st > 0)
            h = fwd_conv(t, tp, "unet.up" + std::to_string(st) + ".us", t.upsample2x(h), 1, 1);
    }
    h = t.swish(fwd_gn(t, tp, "unet.out.gn", h));
    return fwd_conv(t, tp, "unet.out.conv", h, 1, 1);
}

// ---- classifier stub ----

void register_classifier(ParamStore& s, const ClassifierConfig& cfg, RngHandle& rng) {
    int b = cfg.base_channels;
    reg_conv(s, rng, "cls.c0", b, cfg.io_channels, 3);
    reg_conv(s, rng, "cls.c1", 2 * b, b, 3);
    reg_conv(s, rng, "cls.c2", 4 * b, 2 * b, 3);
    reg_linear(s, rng, "cls.fc", 5, 4 * b);
}

Var classifier_tape(Tape& t, TapeParams& tp, Var x, const ClassifierConfig& cfg) {
    (void)cfg;
    Var h = t.swish(fwd_conv(t, tp, "cls.c0", x, 2, 1));
    h = t.swish(fwd_conv(t, tp, "cls.c1", h, 2, 1));
    h = t.swish(fwd_conv(t, tp, "cls.c2", h, 2, 1));
    return fwd_linear(t, tp, "cls.fc", t.global_avg_pool(h));
}

// ---- gradient-free wrappers ----

GaussianPosterior encode_kl(const Tensor& x, const ParamStore& params,
                            const AutoencoderConfig& cfg) {
    Tape t(false);
    TapeParams tp(t, const_cast<ParamStore&>(params));
    Var out = ae_encode_tape(t, tp, t.leaf(x), cfg);
    const Tensor& o = t.val(out);
    int lc = cfg.latent_channels;
    int lr = cfg.latent_resolution();
    GaussianPosterior post;
    post.mean = Tensor({lc, lr, lr});
    post.logvar = Tensor({lc, lr, lr});
    size_t plane = static_cast<size_t>(lr) * lr;
    for (int c = 0; c < lc; ++c)
        for (size_t i = 0; i < plane; ++i) {
            post.mean.v[static_cast<size_t>(c) * plane + i] =
                o.v[static_cast<size_t>(c) * plane + i];
            double lv = o.v[static_cast<size_t>(lc + c) * plane + i];
            post.logvar.v[static_cast<size_t>(c) * plane + i] =
                lv < -30.0 ? -30.0 : (lv > 20.0 ? 20.0 : lv);
        }
    return post;
}

Tensor sample_posterior(const GaussianPosterior& post, RngHandle& rng) {
    require_same_shape(post.mean, post.logvar, "sample_posterior");
    Tensor z(post.mean.shape);
    for (size_t i = 0; i < z.v.size(); ++i)
        z.v[i] = post.mean.v[i] + std::exp(0.5 * post.logvar.v[i]) * rng.normal();
    return z;
}

Tensor decode(const Tensor& z, const ParamStore& params, const AutoencoderConfig& cfg) {
    Tape t(false);
    TapeParams tp(t, const_cast<ParamStore&>(params));
    Var out = ae_decode_tape(t, tp, t.leaf(z), cfg);
    Tensor img = t.val(out);
    for (auto& x : img.v) x = x < -1.0 ? -1.0 : (x > 1.0 ? 1.0 : x);
    return img;
}

std::pair<Tensor, Tensor> encode_condition(const Tensor& x, const ParamStore& params,
                                           const CondEncoderConfig& cfg) {
    Tape t(false);
    TapeParams tp(t, const_cast<ParamStore&>(params));
    auto [lat, ctx] = e2_encode_tape(t, tp, t.leaf(x), cfg);
    return {t.val(lat), t.val(ctx)};
}

Tensor unet_denoise(const Tensor& z_concat, int timestep, int total_steps, double depth,
                    const Tensor& y_combined, const Tensor& context, const ParamStore& params,
                    const UNetConfig& cfg) {
    Tape t(false);
    TapeParams tp(t, const_cast<ParamStore&>(params));
    Var out = unet_tape(t, tp, t.leaf(z_concat), timestep, total_steps, depth, t.leaf(y_combined),
                        t.leaf(context), cfg);
    return t.val(out);
}

KoaDistribution koa_classify_stub(const Tensor& x, const ParamStore& params,
                                  const ClassifierConfig& cfg, int bypass_grade) {
    if (cfg.bypass) {
        if (bypass_grade < 0 || bypass_grade > 4)
            throw std::invalid_argument("classifier bypass needs a grade label 0..4");
        return smoothed_one_hot(bypass_grade, cfg.smoothing);
    }
    Tape t(false);
    TapeParams tp(t, const_cast<ParamStore&>(params));
    Var logits = classifier_tape(t, tp, t.leaf(x), cfg);
    const Tensor& lv = t.val(logits);
    KoaDistribution p;
    p.probs = Tensor({5});
    double mx = lv.v[0];
    for (double q : lv.v) mx = std::max(mx, q);
    double denom = 0.0;
    for (int g = 0; g < 5; ++g) {
        double e = std::exp(lv.v[static_cast<size_t>(g)] - mx);
        p.probs.v[static_cast<size_t>(g)] = e;
        denom += e;
    }
    for (auto& q : p.probs.v) q /= denom;
    return p;
}

double recon_kl_loss(const Tensor& x, const Tensor& x_hat, const GaussianPosterior& post,
                     double kl_weight) {
    require_same_shape(x, x_hat, "recon_kl_loss");
    double mse = 0.0;
    for (size_t i = 0; i < x.v.size(); ++i) {
        double d = x.v[i] - x_hat.v[i];
        mse += d * d;
    }
    mse /= static_cast<double>(x.v.size());
    double kl = 0.0;
    for (size_t i = 0; i < post.mean.v.size(); ++i) {
        double mu = post.mean.v[i], lv = post.logvar.v[i];
        kl += 0.5 * (mu * mu + std::exp(lv) - 1.0 - lv);
    }
    kl /= static_cast<double>(post.mean.v.size());
    return mse + kl_weight * kl;
}

Tensor embed_timestep(int timestep, int total_steps, int dim) {
    if (timestep < 0 || timestep > total_steps)
        throw std::out_of_range("embed_timestep: step out of range");
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("embed_timestep: dim must be even");
    double u = static_cast<double>(timestep) / static_cast<double>(total_steps);
    int half = dim / 2;
    Tensor out({dim});
    for (int k = 0; k < half; ++k) {
        double omega = half == 1 ? 1.0
                                 : std::pow(1000.0, static_cast<double>(k) /
                                                        static_cast<double>(half - 1));
        out.v[static_cast<size_t>(k)] = std::sin(u * omega);
        out.v[static_cast<size_t>(half + k)] = std::cos(u * omega);
    }
    return out;
}

// ---- bundle ----

std::vector<std::string> params_with_prefix(const ParamStore& store, const std::string& prefix) {
    std::vector<std::string> out;
    for (const auto& n : store.names())
        if (n.rfind(prefix, 0) == 0) out.push_back(n);
    return out;
}

std::vector<std::string> ModelBundle::stage1_names() const {
    return params_with_prefix(params, "ae.");
}

std::vector<std::string> ModelBundle::stage2_names() const {
    std::vector<std::string> out;
    for (const auto& n : params.names())
        if (n.rfind("unet.", 0) == 0 || n.rfind("e2.", 0) == 0 || n.rfind("aw.", 0) == 0)
            out.push_back(n);
    return out;
}

ModelBundle make_bundle(const AutoencoderConfig& ae, const CondEncoderConfig& e2,
                        const UNetConfig& unet, const ClassifierConfig& cls,
                        const GuidanceConfig& aw, std::uint64_t init_seed) {
    if (e2.latent_resolution() != ae.latent_resolution() ||
        e2.latent_channels != ae.latent_channels)
        throw std::invalid_argument("bundle: condition encoder latent must match autoencoder");
    if (unet.latent_resolution != ae.latent_resolution() ||
        unet.out_channels != ae.latent_channels)
        throw std::invalid_argument("bundle: denoiser latent must match autoencoder");
    if (unet.context_dim != e2.context_dim)
        throw std::invalid_argument("bundle: context dims must match");
    ModelBundle b;
    b.ae = ae;
    b.e2 = e2;
    b.unet = unet;
    b.cls = cls;
    b.aw = aw;
    RngHandle rng(init_seed);
    register_autoencoder(b.params, ae, rng);
    register_cond_encoder(b.params, e2, rng);
    register_unet(b.params, unet, rng);
    register_classifier(b.params, cls, rng);
    register_guidance_params(b.params, aw, rng);
    return b;
}

}  // namespace xr2vol
