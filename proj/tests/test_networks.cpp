#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <stdexcept>
#include <vector>

#include "xr2vol/networks.hpp"

using namespace xr2vol;

namespace {

AutoencoderConfig small_ae() {
    AutoencoderConfig c;
    c.io_channels = 1;
    c.input_resolution = 16;
    c.base_channels = 8;
    c.channel_multipliers = {1, 2};
    c.res_blocks_per_stage = 1;
    c.latent_channels = 2;
    return c;
}

CondEncoderConfig small_e2() {
    CondEncoderConfig c;
    c.io_channels = 1;
    c.input_resolution = 16;
    c.base_channels = 8;
    c.channel_multipliers = {1, 2};
    c.res_blocks_per_stage = 1;
    c.latent_channels = 2;
    c.context_dim = 8;
    return c;
}

UNetConfig small_unet() {
    UNetConfig c;
    c.in_channels = 4;
    c.out_channels = 2;
    c.base_channels = 8;
    c.channel_multipliers = {1, 2};
    c.res_blocks_per_stage = 1;
    c.attention_factors = {2};
    c.attention_heads = 1;
    c.context_dim = 8;
    c.latent_resolution = 8;
    return c;
}

Tensor rand_image(int ch, int res, RngHandle& rng) {
    Tensor x({ch, res, res});
    for (auto& v : x.v) v = rng.uniform(-1.0, 1.0);
    return x;
}

}  // namespace

TEST_CASE("norm group count is the largest small power of two divisor") {
    CHECK(norm_groups(1) == 1);
    CHECK(norm_groups(2) == 2);
    CHECK(norm_groups(4) == 4);
    CHECK(norm_groups(6) == 2);
    CHECK(norm_groups(7) == 1);
    CHECK(norm_groups(8) == 8);
    CHECK(norm_groups(12) == 4);
    CHECK(norm_groups(16) == 8);
    CHECK(norm_groups(24) == 8);
}

TEST_CASE("config validation rejects malformed settings") {
    AutoencoderConfig ae = small_ae();
    ae.channel_multipliers.clear();
    CHECK_THROWS_AS(ae.validate(), std::invalid_argument);

    ae = small_ae();
    ae.base_channels = 0;
    CHECK_THROWS_AS(ae.validate(), std::invalid_argument);

    ae = small_ae();
    ae.channel_multipliers = {1, 2, 4};
    ae.input_resolution = 10;  // not divisible by 2^(stages-1)
    CHECK_THROWS_AS(ae.validate(), std::invalid_argument);

    UNetConfig un = small_unet();
    un.in_channels = 5;
    CHECK_THROWS_AS(un.validate(), std::invalid_argument);

    un = small_unet();
    un.base_channels = 7;
    CHECK_THROWS_AS(un.validate(), std::invalid_argument);

    CHECK(small_ae().latent_resolution() == 8);
    AutoencoderConfig deep = small_ae();
    deep.input_resolution = 64;
    deep.channel_multipliers = {1, 2, 4};
    CHECK(deep.latent_resolution() == 16);
}

TEST_CASE("fresh autoencoder heads start at the identity free point") {
    ParamStore ps;
    RngHandle rng(21);
    AutoencoderConfig cfg = small_ae();
    register_autoencoder(ps, cfg, rng);

    Tensor x = rand_image(1, 16, rng);
    GaussianPosterior post = encode_kl(x, ps, cfg);
    CHECK(post.mean.shape == std::vector<int>{2, 8, 8});
    CHECK(post.logvar.shape == std::vector<int>{2, 8, 8});
    for (double v : post.mean.v) CHECK(v == 0.0);
    for (double v : post.logvar.v) CHECK(v == 0.0);

    Tensor z({2, 8, 8});
    RngHandle zr(22);
    for (auto& v : z.v) v = zr.normal();
    Tensor img = decode(z, ps, cfg);
    CHECK(img.shape == std::vector<int>{1, 16, 16});
    for (double v : img.v) CHECK(v == 0.0);

    // same input, same output: evaluation is deterministic
    GaussianPosterior again = encode_kl(x, ps, cfg);
    CHECK(again.mean.v == post.mean.v);

    Tensor bad({1, 8, 8});
    CHECK_THROWS_AS(encode_kl(bad, ps, cfg), std::invalid_argument);
    Tensor badz({2, 4, 4});
    CHECK_THROWS_AS(decode(badz, ps, cfg), std::invalid_argument);
}

TEST_CASE("trained style autoencoder round trip changes with parameters") {
    ParamStore ps;
    RngHandle rng(23);
    AutoencoderConfig cfg = small_ae();
    register_autoencoder(ps, cfg, rng);
    // knock the encoder head off zero so latents respond to the input
    for (auto& v : ps.get("ae.enc.out.conv.w").v) v = 0.01 * rng.normal();
    for (auto& v : ps.get("ae.dec.out.conv.w").v) v = 0.01 * rng.normal();

    Tensor x1 = rand_image(1, 16, rng);
    Tensor x2 = rand_image(1, 16, rng);
    GaussianPosterior p1 = encode_kl(x1, ps, cfg);
    GaussianPosterior p2 = encode_kl(x2, ps, cfg);
    double diff = 0.0;
    for (size_t i = 0; i < p1.mean.v.size(); ++i)
        diff += std::fabs(p1.mean.v[i] - p2.mean.v[i]);
    CHECK(diff > 0.0);
    CHECK(all_finite(p1.mean));
    CHECK(all_finite(p1.logvar));
}

TEST_CASE("posterior sampling matches its mean and spread") {
    GaussianPosterior post;
    post.mean = Tensor({2, 2, 2});
    post.logvar = Tensor({2, 2, 2});
    for (auto& v : post.mean.v) v = 2.0;
    for (auto& v : post.logvar.v) v = std::log(0.25);

    RngHandle rng(24);
    double sum = 0.0, sum2 = 0.0;
    const int draws = 20000;
    for (int i = 0; i < draws; ++i) {
        Tensor z = sample_posterior(post, rng);
        for (double v : z.v) {
            sum += v;
            sum2 += v * v;
        }
    }
    double n = static_cast<double>(draws) * 8.0;
    double mean = sum / n;
    double var = sum2 / n - mean * mean;
    CHECK(mean == doctest::Approx(2.0).epsilon(0.01));
    CHECK(var == doctest::Approx(0.25).epsilon(0.05));

    RngHandle a(7), b(7);
    Tensor za = sample_posterior(post, a);
    Tensor zb = sample_posterior(post, b);
    CHECK(za.v == zb.v);

    GaussianPosterior bad;
    bad.mean = Tensor({2});
    bad.logvar = Tensor({3});
    CHECK_THROWS_AS(sample_posterior(bad, rng), std::invalid_argument);
}

TEST_CASE("reconstruction loss decomposes into mse and weighted kl") {
    Tensor x({4}, {0.2, -0.4, 1.1, 0.0});
    GaussianPosterior flat;
    flat.mean = Tensor({4});
    flat.logvar = Tensor({4});
    CHECK(recon_kl_loss(x, x, flat, 1.0) == 0.0);

    Tensor y({4}, {0.25, -0.1, 1.0, -0.3});
    Tensor x5({5}, {0.2, -0.4, 1.1, 0.0, -2.2});
    Tensor y5({5}, {0.25, -0.1, 1.0, -0.3, -2.0});
    CHECK(recon_kl_loss(x5, y5, flat, 0.0) ==
          doctest::Approx(0.04650000000000003).epsilon(1e-15));

    // unit mean, unit variance: kl is exactly one half per element
    GaussianPosterior unit;
    unit.mean = Tensor({1}, {1.0});
    unit.logvar = Tensor({1});
    CHECK(recon_kl_loss(x, x, unit, 0.3) == doctest::Approx(0.15).epsilon(1e-15));

    Tensor wrong({3});
    CHECK_THROWS_AS(recon_kl_loss(x, wrong, flat, 1.0), std::invalid_argument);
}

TEST_CASE("condition encoder yields latent plus context and separates inputs") {
    ParamStore ps;
    RngHandle rng(25);
    CondEncoderConfig cfg = small_e2();
    register_cond_encoder(ps, cfg, rng);

    Tensor x = rand_image(1, 16, rng);
    auto [z, ctx] = encode_condition(x, ps, cfg);
    CHECK(z.shape == std::vector<int>{2, 8, 8});
    CHECK(ctx.shape == std::vector<int>{8});
    CHECK(all_finite(z));
    CHECK(all_finite(ctx));

    auto [z2, ctx2] = encode_condition(x, ps, cfg);
    CHECK(z.v == z2.v);
    CHECK(ctx.v == ctx2.v);

    // distinct radiographs should produce distinct conditions
    int collisions = 0;
    Tensor prev = ctx;
    for (int i = 0; i < 10; ++i) {
        auto [zi, ci] = encode_condition(rand_image(1, 16, rng), ps, cfg);
        double d = 0.0;
        for (size_t j = 0; j < ci.v.size(); ++j) d += std::fabs(ci.v[j] - prev.v[j]);
        if (d < 1e-12) ++collisions;
        prev = ci;
    }
    CHECK(collisions == 0);

    Tensor bad({1, 8, 8});
    CHECK_THROWS_AS(encode_condition(bad, ps, cfg), std::invalid_argument);
}

TEST_CASE("fresh denoiser predicts zero noise and validates its inputs") {
    ParamStore ps;
    RngHandle rng(26);
    UNetConfig cfg = small_unet();
    register_unet(ps, cfg, rng);

    RngHandle xr(27);
    Tensor zc({4, 8, 8});
    for (auto& v : zc.v) v = xr.normal();
    Tensor y({8, 8});
    for (auto& v : y.v) v = 0.1 * xr.normal();
    Tensor ctx({8});
    for (auto& v : ctx.v) v = xr.normal();

    Tensor eps = unet_denoise(zc, 500, 1000, 0.5, y, ctx, ps, cfg);
    CHECK(eps.shape == std::vector<int>{2, 8, 8});
    for (double v : eps.v) CHECK(v == 0.0);

    // same inputs give the same prediction after the head moves off zero
    for (auto& v : ps.get("unet.out.conv.w").v) v = 0.01 * xr.normal();
    Tensor e1 = unet_denoise(zc, 500, 1000, 0.5, y, ctx, ps, cfg);
    Tensor e2 = unet_denoise(zc, 500, 1000, 0.5, y, ctx, ps, cfg);
    CHECK(e1.v == e2.v);
    CHECK(all_finite(e1));

    Tensor badz({3, 8, 8});
    CHECK_THROWS_AS(unet_denoise(badz, 500, 1000, 0.5, y, ctx, ps, cfg),
                    std::invalid_argument);
    Tensor bady({8});
    CHECK_THROWS_AS(unet_denoise(zc, 500, 1000, 0.5, bady, ctx, ps, cfg),
                    std::invalid_argument);
}

TEST_CASE("denoiser output responds to timestep depth and guidance") {
    ParamStore ps;
    RngHandle rng(28);
    UNetConfig cfg = small_unet();
    register_unet(ps, cfg, rng);
    // residual branches and heads start at zero, so nudge every weight to
    // make the embedding pathways observable
    for (const auto& name : ps.names())
        if (name.size() > 2 && name.compare(name.size() - 2, 2, ".w") == 0)
            for (auto& v : ps.get(name).v) v += 0.05 * rng.normal();

    RngHandle xr(29);
    Tensor zc({4, 8, 8});
    for (auto& v : zc.v) v = xr.normal();
    Tensor y({8, 8});
    for (auto& v : y.v) v = 0.1 * xr.normal();
    Tensor ctx({8});
    for (auto& v : ctx.v) v = xr.normal();

    Tensor base = unet_denoise(zc, 500, 1000, 0.5, y, ctx, ps, cfg);
    auto l1 = [&](const Tensor& other) {
        double d = 0.0;
        for (size_t i = 0; i < base.v.size(); ++i) d += std::fabs(base.v[i] - other.v[i]);
        return d;
    };
    CHECK(l1(unet_denoise(zc, 900, 1000, 0.5, y, ctx, ps, cfg)) > 0.0);
    CHECK(l1(unet_denoise(zc, 500, 1000, 0.9, y, ctx, ps, cfg)) > 0.0);
    Tensor y2 = y;
    for (auto& v : y2.v) v += 0.5;
    CHECK(l1(unet_denoise(zc, 500, 1000, 0.5, y2, ctx, ps, cfg)) > 0.0);
}

TEST_CASE("classifier bypass returns the smoothed label and the net path sums to one") {
    ClassifierConfig cfg;
    cfg.input_resolution = 16;
    cfg.base_channels = 4;
    ParamStore ps;
    RngHandle rng(30);
    register_classifier(ps, cfg, rng);

    Tensor x = rand_image(1, 16, rng);
    KoaDistribution p = koa_classify_stub(x, ps, cfg, 3);
    CHECK(p.probs.v[3] == doctest::Approx(1.0 - cfg.smoothing + cfg.smoothing / 5.0));
    CHECK_THROWS_AS(koa_classify_stub(x, ps, cfg, -1), std::invalid_argument);
    CHECK_THROWS_AS(koa_classify_stub(x, ps, cfg, 5), std::invalid_argument);

    cfg.bypass = false;
    KoaDistribution q = koa_classify_stub(x, ps, cfg, -1);
    double s = 0.0;
    for (double v : q.probs.v) {
        CHECK(v >= 0.0);
        s += v;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-9));
    validate_koa(q);
}

TEST_CASE("timestep embedding anchors endpoints and rejects bad input") {
    Tensor e0 = embed_timestep(0, 1000, 8);
    for (int j = 0; j < 4; ++j) {
        CHECK(e0.v[static_cast<size_t>(j)] == 0.0);
        CHECK(e0.v[static_cast<size_t>(4 + j)] == 1.0);
    }
    Tensor e1 = embed_timestep(1000, 1000, 2);
    CHECK(e1.v[0] == doctest::Approx(std::sin(1.0)).epsilon(1e-15));
    CHECK(e1.v[1] == doctest::Approx(std::cos(1.0)).epsilon(1e-15));

    CHECK_THROWS_AS(embed_timestep(-1, 1000, 8), std::out_of_range);
    CHECK_THROWS_AS(embed_timestep(1001, 1000, 8), std::out_of_range);
    CHECK_THROWS_AS(embed_timestep(5, 1000, 7), std::invalid_argument);
}

TEST_CASE("bundle wires submodels together and tracks both training stages") {
    AutoencoderConfig ae = small_ae();
    CondEncoderConfig e2 = small_e2();
    UNetConfig un = small_unet();
    ClassifierConfig cls;
    cls.input_resolution = 16;
    cls.base_channels = 4;
    GuidanceConfig aw;
    aw.h = 8;
    aw.w = 8;
    aw.proj_dim = 4;

    ModelBundle mb = make_bundle(ae, e2, un, cls, aw, 99);
    CHECK_FALSE(mb.ae_trained);
    CHECK_FALSE(mb.diff_trained);
    CHECK(mb.params.total_elements() > 0);

    auto s1 = mb.stage1_names();
    auto s2 = mb.stage2_names();
    CHECK(!s1.empty());
    CHECK(!s2.empty());
    for (const auto& n : s1) CHECK(n.rfind("ae.", 0) == 0);
    for (const auto& n : s2) {
        CHECK(n.rfind("ae.", 0) != 0);
        CHECK(mb.params.has(n));
    }
    // identical seed reproduces identical initialization
    ModelBundle mb2 = make_bundle(ae, e2, un, cls, aw, 99);
    CHECK(mb.params.content_hash() == mb2.params.content_hash());
    ModelBundle mb3 = make_bundle(ae, e2, un, cls, aw, 100);
    CHECK(mb.params.content_hash() != mb3.params.content_hash());

    // latent channel mismatch between the two encoders is rejected
    CondEncoderConfig badE2 = e2;
    badE2.latent_channels = 3;
    CHECK_THROWS_AS(make_bundle(ae, badE2, un, cls, aw, 99), std::invalid_argument);

    UNetConfig badUn = un;
    badUn.latent_resolution = 4;
    CHECK_THROWS_AS(make_bundle(ae, e2, badUn, cls, aw, 99), std::invalid_argument);
}

TEST_CASE("group widths inside the networks stay compatible with their norms") {
    // every registered group norm has gamma length divisible by its group count
    ParamStore ps;
    RngHandle rng(41);
    register_unet(ps, small_unet(), rng);
    for (const auto& name : ps.names()) {
        if (name.size() > 2 && name.rfind(".g", name.size() - 2) == name.size() - 2) {
            int c = ps.get(name).dim(0);
            CHECK(c % norm_groups(c) == 0);
        }
    }
}
