#include "xr2vol/guidance.hpp"

#include <cmath>
#include <stdexcept>

namespace xr2vol {

KoaDistribution smoothed_one_hot(int grade, double smoothing) {
    if (grade < 0 || grade > 4) throw std::invalid_argument("koa: grade must be 0..4");
    KoaDistribution p;
    p.probs = Tensor({5});
    for (int g = 0; g < 5; ++g) p.probs.v[static_cast<size_t>(g)] = smoothing / 5.0;
    p.probs.v[static_cast<size_t>(grade)] += 1.0 - smoothing;
    return p;
}

void validate_koa(const KoaDistribution& p) {
    if (p.probs.rank() != 1 || p.probs.dim(0) != 5)
        throw std::invalid_argument("koa: needs 5 probabilities");
    double s = 0.0;
    for (double x : p.probs.v) {
        if (x < 0.0 || x > 1.0) throw std::invalid_argument("koa: probability out of [0,1]");
        s += x;
    }
    if (std::fabs(s - 1.0) > 1e-6) throw std::invalid_argument("koa: probabilities must sum to 1");
}

void register_guidance_params(ParamStore& store, const GuidanceConfig& cfg, RngHandle& rng,
                              const std::string& prefix) {
    int n = cfg.map_elems();
    store.add(prefix + "mu_p", init_ones({1}));
    store.add(prefix + "mu_i", init_ones({1}));
    store.add(prefix + "nu_p", init_ones({1}));
    store.add(prefix + "nu_i", init_ones({1}));
    store.add(prefix + "o_p", init_zeros({1}));
    store.add(prefix + "o_i", init_zeros({1}));
    store.add(prefix + "W_p", init_normal({cfg.proj_dim, n}, 1.0 / std::sqrt(double(n)), rng));
    store.add(prefix + "W_i", init_normal({cfg.proj_dim, n}, 1.0 / std::sqrt(double(n)), rng));
    store.add(prefix + "proj", init_normal({5, n}, 0.5, rng));
}

std::vector<std::string> guidance_param_names(const std::string& prefix) {
    return {prefix + "mu_p", prefix + "mu_i", prefix + "nu_p", prefix + "nu_i", prefix + "o_p",
            prefix + "o_i",  prefix + "W_p",  prefix + "W_i",  prefix + "proj"};
}

double gain(const Tensor& map, double mu, double kappa) {
    if (kappa <= 0.0) throw std::invalid_argument("gain: kappa must be positive");
    double acc = 0.0;
    for (double x : map.v) acc += x * x;
    return mu * std::sqrt(acc + kappa);
}

std::pair<double, double> normalize_gains(double g_p, double g_i, double eps_stab) {
    if (eps_stab <= 0.0) throw std::invalid_argument("normalize_gains: eps must be positive");
    double denom = g_p + g_i + eps_stab;
    return {g_p / denom, g_i / denom};
}

Tensor modulate(const Tensor& map, double g_hat, double nu, double o) {
    double mult = 1.0 + 1.0 / (1.0 + std::exp(-(nu * g_hat + o)));
    Tensor out(map.shape);
    for (size_t i = 0; i < map.v.size(); ++i) out.v[i] = map.v[i] * mult;
    return out;
}

static Tensor matvec(const Tensor& w, const Tensor& x) {
    int m = w.dim(0), n = w.dim(1);
    if (static_cast<std::int64_t>(n) != x.numel())
        throw std::invalid_argument("guidance: projection size mismatch");
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
        double acc = 0.0;
        const double* row = &w.v[static_cast<size_t>(i) * n];
        for (int j = 0; j < n; ++j) acc += row[j] * x.v[static_cast<size_t>(j)];
        out.v[static_cast<size_t>(i)] = acc;
    }
    return out;
}

Tensor joint_weight(const Tensor& p_map, const Tensor& i_map, const Tensor& w_p,
                    const Tensor& w_i, int proj_dim) {
    if (w_p.rank() != 2 || w_i.rank() != 2 || w_p.dim(0) != proj_dim || w_i.dim(0) != proj_dim)
        throw std::invalid_argument("joint_weight: projection shape mismatch");
    Tensor a = matvec(w_p, p_map);
    Tensor b = matvec(w_i, i_map);
    double inv = 1.0 / std::sqrt(static_cast<double>(proj_dim));
    int k = proj_dim;
    Tensor lambda({k, k});
    for (int u = 0; u < k; ++u) {
        double mx = -1e300;
        for (int v2 = 0; v2 < k; ++v2) {
            double l = a.v[static_cast<size_t>(u)] * b.v[static_cast<size_t>(v2)] * inv;
            lambda.at2(u, v2) = l;
            if (l > mx) mx = l;
        }
        double denom = 0.0;
        for (int v2 = 0; v2 < k; ++v2) {
            double e = std::exp(lambda.at2(u, v2) - mx);
            lambda.at2(u, v2) = e;
            denom += e;
        }
        for (int v2 = 0; v2 < k; ++v2) lambda.at2(u, v2) /= denom;
    }
    return lambda;
}

Tensor broadcast_attention(const Tensor& lambda, const Tensor& i_map, const Tensor& w_p,
                           const Tensor& w_i, int h, int w) {
    Tensor b = matvec(w_i, i_map);
    int k = lambda.dim(0);
    Tensor o({k});
    for (int u = 0; u < k; ++u) {
        double acc = 0.0;
        for (int v2 = 0; v2 < k; ++v2) acc += lambda.at2(u, v2) * b.v[static_cast<size_t>(v2)];
        o.v[static_cast<size_t>(u)] = acc;
    }
    int n = w_p.dim(1);
    if (n != h * w) throw std::invalid_argument("broadcast_attention: plane size mismatch");
    Tensor plane({h, w});
    for (int j = 0; j < n; ++j) {
        double acc = 0.0;
        for (int u = 0; u < k; ++u) acc += w_p.v[static_cast<size_t>(u) * n + j] * o.v[static_cast<size_t>(u)];
        plane.v[static_cast<size_t>(j)] = acc;
    }
    return plane;
}

Tensor combine(const Tensor& weight_plane, const Tensor& p_tilde, const Tensor& i_tilde) {
    require_same_shape(p_tilde, i_tilde, "combine");
    require_same_shape(weight_plane, p_tilde, "combine");
    Tensor out(p_tilde.shape);
    for (size_t i = 0; i < out.v.size(); ++i)
        out.v[i] = weight_plane.v[i] * (p_tilde.v[i] + i_tilde.v[i]);
    return out;
}

Tensor project_koa_to_map(const KoaDistribution& p, int h, int w, const Tensor& proj) {
    validate_koa(p);
    if (proj.rank() != 2 || proj.dim(0) != 5 || proj.dim(1) != h * w)
        throw std::invalid_argument("project_koa_to_map: projection shape mismatch");
    Tensor out({h, w});
    for (int g = 0; g < 5; ++g) {
        double pg = p.probs.v[static_cast<size_t>(g)];
        if (pg == 0.0) continue;
        const double* row = &proj.v[static_cast<size_t>(g) * h * w];
        for (int j = 0; j < h * w; ++j) out.v[static_cast<size_t>(j)] += pg * row[j];
    }
    return out;
}

Tensor downsample_area(const Tensor& img, int oh, int ow) {
    if (img.rank() != 2) throw std::invalid_argument("downsample_area: needs {h,w}");
    int h = img.dim(0), w = img.dim(1);
    if (oh < 1 || ow < 1 || h % oh != 0 || w % ow != 0)
        throw std::invalid_argument("downsample_area: target must divide source dims");
    int fy = h / oh, fx = w / ow;
    Tensor out({oh, ow});
    for (int y = 0; y < oh; ++y)
        for (int x = 0; x < ow; ++x) {
            double acc = 0.0;
            for (int dy = 0; dy < fy; ++dy)
                for (int dx = 0; dx < fx; ++dx) acc += img.at2(y * fy + dy, x * fx + dx);
            out.at2(y, x) = acc / static_cast<double>(fy * fx);
        }
    return out;
}

GuidanceBundle adaptive_weight_module(const KoaDistribution& p, const Tensor& i_map,
                                      const ParamStore& params, const GuidanceConfig& cfg,
                                      const std::string& prefix) {
    if (i_map.rank() != 2 || i_map.dim(0) != cfg.h || i_map.dim(1) != cfg.w)
        throw std::invalid_argument("adaptive_weight_module: i_map resolution mismatch");
    GuidanceBundle b;
    b.p_map = project_koa_to_map(p, cfg.h, cfg.w, params.get(prefix + "proj"));
    b.i_map = i_map;
    double g_p = gain(b.p_map, params.get(prefix + "mu_p").v[0], cfg.kappa);
    double g_i = gain(b.i_map, params.get(prefix + "mu_i").v[0], cfg.kappa);
    auto [gp_hat, gi_hat] = normalize_gains(g_p, g_i, cfg.eps_stab);
    Tensor p_t = modulate(b.p_map, gp_hat, params.get(prefix + "nu_p").v[0],
                          params.get(prefix + "o_p").v[0]);
    Tensor i_t = modulate(b.i_map, gi_hat, params.get(prefix + "nu_i").v[0],
                          params.get(prefix + "o_i").v[0]);
    Tensor lambda = joint_weight(b.p_map, b.i_map, params.get(prefix + "W_p"),
                                 params.get(prefix + "W_i"), cfg.proj_dim);
    Tensor plane = broadcast_attention(lambda, b.i_map, params.get(prefix + "W_p"),
                                       params.get(prefix + "W_i"), cfg.h, cfg.w);
    b.y_combined = combine(plane, p_t, i_t);
    return b;
}

Var adaptive_weight_tape(Tape& tape, TapeParams& tp, Var probs, Var i_map,
                         const GuidanceConfig& cfg, const std::string& prefix) {
    int n = cfg.map_elems();
    int k = cfg.proj_dim;
    // projected severity map as a column vector {n,1}
    Var p_col = tape.matmul(tape.transpose(tp[prefix + "proj"]), tape.reshape(probs, {5, 1}));
    Var i_col = tape.reshape(i_map, {n, 1});

    auto gain_of = [&](Var col, const std::string& mu_name) {
        Var ss = tape.sum(tape.mul(col, col));
        return tape.mul(tp[mu_name], tape.sqrt_op(tape.add_const(ss, cfg.kappa)));
    };
    Var g_p = gain_of(p_col, prefix + "mu_p");
    Var g_i = gain_of(i_col, prefix + "mu_i");
    Var denom = tape.add_const(tape.add(g_p, g_i), cfg.eps_stab);
    Var gp_hat = tape.div(g_p, denom);
    Var gi_hat = tape.div(g_i, denom);

    auto modulated = [&](Var col, Var g_hat, const std::string& nu_name,
                         const std::string& o_name) {
        Var z = tape.add(tape.mul(tp[nu_name], g_hat), tp[o_name]);
        Var mult = tape.add_const(tape.sigmoid(z), 1.0);
        return tape.mul_by_scalar(col, mult);
    };
    Var p_t = modulated(p_col, gp_hat, prefix + "nu_p", prefix + "o_p");
    Var i_t = modulated(i_col, gi_hat, prefix + "nu_i", prefix + "o_i");

    Var a = tape.matmul(tp[prefix + "W_p"], p_col);   // {k,1}
    Var bb = tape.matmul(tp[prefix + "W_i"], i_col);  // {k,1}
    Var logits = tape.scale(tape.matmul(a, tape.transpose(bb)), 1.0 / std::sqrt(double(k)));
    Var lambda = tape.softmax_rows(logits);           // {k,k}
    Var att = tape.matmul(lambda, bb);                // {k,1}
    Var plane = tape.matmul(tape.transpose(tp[prefix + "W_p"]), att);  // {n,1}

    Var y = tape.mul(plane, tape.add(p_t, i_t));
    return tape.reshape(y, {cfg.h, cfg.w});
}

Tensor embed_depth(double depth, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw std::invalid_argument("embed_depth: dim must be even");
    int half = dim / 2;
    Tensor out({dim});
    for (int k = 0; k < half; ++k) {
        double omega =
            half == 1 ? 1.0 : std::pow(100.0, static_cast<double>(k) / static_cast<double>(half - 1));
        out.v[static_cast<size_t>(k)] = std::sin(depth * omega);
        out.v[static_cast<size_t>(half + k)] = std::cos(depth * omega);
    }
    return out;
}

}  // namespace xr2vol
