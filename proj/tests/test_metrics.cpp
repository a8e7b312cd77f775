#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <stdexcept>
#include <vector>

#include "xr2vol/data.hpp"
#include "xr2vol/io.hpp"
#include "xr2vol/metrics.hpp"
#include "xr2vol/rng.hpp"

using namespace xr2vol;

namespace {

Tensor noise_plane(int h, int w, RngHandle& rng, double amp = 1.0) {
    Tensor t({h, w});
    for (auto& v : t.v) v = amp * rng.uniform(-1.0, 1.0);
    return t;
}

// smooth structured scene so edge detection has something to latch onto
Tensor scene(int n) {
    Tensor t({n, n});
    for (int y = 0; y < n; ++y)
        for (int x = 0; x < n; ++x) {
            double cy = (y - n / 2.0) / n, cx = (x - n / 2.0) / n;
            double ring = std::exp(-40.0 * std::fabs(cy * cy + cx * cx - 0.08));
            t.at2(y, x) = 0.8 * ring + 0.2 * std::sin(6.0 * cx) - 0.1;
        }
    return t;
}

}  // namespace

TEST_CASE("psnr golden value, identity and symmetry") {
    Tensor a({8, 8});
    Tensor b({8, 8});
    for (auto& v : a.v) v = 0.25;
    // uniform offset of peak/25.5 gives 20*log10(25.5) dB
    for (auto& v : b.v) v = 0.25 + 2.0 / 25.5;
    CHECK(psnr(a, b, 2.0) == doctest::Approx(28.130803608679106).epsilon(1e-12));
    CHECK(psnr(a, b, 2.0) == psnr(b, a, 2.0));
    CHECK(std::isinf(psnr(a, a, 2.0)));
    CHECK(psnr(a, a, 2.0) > 0.0);

    CHECK_THROWS_AS(psnr(a, b, 0.0), std::invalid_argument);
    Tensor c({4, 4});
    CHECK_THROWS_AS(psnr(a, c, 2.0), std::invalid_argument);
}

TEST_CASE("ssim identity, anticorrelation and pure scale invariance") {
    RngHandle rng(61);
    Tensor a = scene(16);
    CHECK(ssim(a, a, 2.0) == doctest::Approx(1.0).epsilon(1e-9));

    Tensor neg = a;
    for (auto& v : neg.v) v = -v;
    CHECK(ssim(a, neg, 2.0) < 0.5);

    Tensor b = a;
    for (auto& v : b.v) v += 0.05 * rng.uniform(-1.0, 1.0);
    double base = ssim(a, b, 2.0);
    CHECK(base > 0.0);
    CHECK(base < 1.0);
    for (double s : {0.5, 2.0, 10.0}) {
        Tensor sa = a, sb = b;
        for (auto& v : sa.v) v *= s;
        for (auto& v : sb.v) v *= s;
        CHECK(ssim(sa, sb, 2.0 * s) == doctest::Approx(base).epsilon(1e-9));
    }

    CHECK_THROWS_AS(ssim(a, b, 4, 0.01, 0.03, 2.0), std::invalid_argument);  // even window
    Tensor tiny({4, 4});
    CHECK_THROWS_AS(ssim(tiny, tiny, 11, 0.01, 0.03, 2.0), std::invalid_argument);
}

TEST_CASE("ssim decays as the corruption grows") {
    RngHandle rng(62);
    Tensor a = scene(24);
    double prev = 1.0;
    for (double amp : {0.05, 0.2, 0.8}) {
        RngHandle nr(63);
        Tensor b = a;
        for (auto& v : b.v) v += amp * nr.uniform(-1.0, 1.0);
        double s = ssim(a, b, 2.0);
        CHECK(s < prev);
        prev = s;
    }
}

TEST_CASE("canny output is binary, silent on constants and localized on a step") {
    Tensor flat({16, 16});
    for (auto& v : flat.v) v = 0.3;
    Tensor ef = canny_edges(flat, 1.0);
    for (double v : ef.v) CHECK(v == 0.0);

    Tensor step({16, 16});
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) step.at2(y, x) = x < 8 ? -0.5 : 0.5;
    Tensor es = canny_edges(step, 1.0);
    double total = 0.0;
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
            double v = es.at2(y, x);
            CHECK((v == 0.0 || v == 1.0));
            if (v == 1.0) {
                CHECK(x >= 5);
                CHECK(x <= 10);
            }
            total += v;
        }
    CHECK(total > 0.0);
}

TEST_CASE("region ssim scores identity and resents in-region corruption more") {
    Tensor a = scene(32);
    RegionSpec region{10, 22, 0, 32};
    CHECK(rssim(a, a, 1.0, region) == 1.0);

    RngHandle rng(64);
    Tensor inside = a, outside = a;
    for (int y = 12; y < 20; ++y)
        for (int x = 4; x < 28; ++x) inside.at2(y, x) += 0.6 * rng.uniform(-1.0, 1.0);
    RngHandle rng2(64);
    for (int y = 0; y < 8; ++y)
        for (int x = 4; x < 28; ++x) outside.at2(y, x) += 0.6 * rng2.uniform(-1.0, 1.0);

    double r_in = rssim(a, inside, 1.0, region);
    double r_out = rssim(a, outside, 1.0, region);
    CHECK(r_in < 1.0);
    CHECK(r_in < r_out);

    RegionSpec bad{30, 40, 0, 32};
    CHECK_THROWS_AS(rssim(a, a, 1.0, bad), std::invalid_argument);
    RegionSpec degenerate{5, 5, 0, 32};
    CHECK_THROWS_AS(rssim(a, a, 1.0, degenerate), std::invalid_argument);
}

TEST_CASE("adjacent slice correlation identities") {
    Volume same;
    same.provenance = "generated";
    Tensor s = scene(16);
    Tensor plane({1, 16, 16}, s.v);
    for (int k = 0; k < 3; ++k) {
        same.slices.push_back(plane);
        same.depths.push_back(k / 2.0);
    }
    CHECK(adjacent_slice_correlation(same) == doctest::Approx(1.0).epsilon(1e-12));

    // frozen three-slice instance
    Volume tri;
    tri.provenance = "generated";
    tri.slices.push_back(Tensor({1, 2, 2}, {0.1, 0.4, -0.2, 0.9}));
    tri.slices.push_back(Tensor({1, 2, 2}, {0.0, 0.5, -0.1, 0.7}));
    tri.slices.push_back(Tensor({1, 2, 2}, {0.8, -0.3, 0.2, 0.1}));
    tri.depths = {0.0, 0.5, 1.0};
    CHECK(adjacent_slice_correlation(tri) ==
          doctest::Approx(0.17465715442851643).epsilon(1e-12));

    // independent noise decorrelates
    RngHandle rng(65);
    Volume noise;
    noise.provenance = "generated";
    for (int k = 0; k < 4; ++k) {
        Tensor p({1, 64, 64});
        for (auto& v : p.v) v = rng.uniform(-1.0, 1.0);
        noise.slices.push_back(p);
        noise.depths.push_back(k / 3.0);
    }
    CHECK(std::fabs(adjacent_slice_correlation(noise)) < 0.05);

    // constant slice conventions
    Volume mixed = same;
    for (auto& v : mixed.slices[2].v) v = 0.7;
    double r = adjacent_slice_correlation(mixed);
    CHECK(r == doctest::Approx((1.0 + 0.0) / 2.0).epsilon(1e-12));

    Volume constants;
    constants.provenance = "generated";
    Tensor c({1, 4, 4});
    for (auto& v : c.v) v = 0.7;
    constants.slices = {c, c};
    constants.depths = {0.0, 1.0};
    CHECK(adjacent_slice_correlation(constants) == 1.0);

    Volume single;
    single.provenance = "generated";
    single.slices = {plane};
    single.depths = {0.0};
    CHECK_THROWS_AS(adjacent_slice_correlation(single), std::invalid_argument);
}

TEST_CASE("sobel magnitude matches a hand computed grid") {
    Tensor img({5, 5}, {0.0, 0.1, 0.2, 0.1, 0.0, 0.3, 0.5, 0.6, 0.4, 0.2,
                        0.1, 0.9, 1.0, 0.8, 0.1, 0.0, 0.4, 0.5, 0.3, 0.0,
                        0.2, 0.1, 0.0, 0.1, 0.2});
    const double expect[25] = {
        1.3928388277184118, 1.7492855684535902, 1.5033296378372907, 1.5620499351813306,
        1.0295630140987,    1.7029386365926402, 3.023243291566195,  3.1144823004794877,
        2.9832867780352594, 1.562049935181331,  2.416609194718914,  2.6683328128252666,
        0.5656854249492381, 2.7459060435491964, 2.0248456731316584, 1.58113883008419,
        3.023243291566195,  3.5128336140500593, 2.8600699292150185, 1.2649110640673518,
        0.31622776601683794, 0.9055385138137417, 1.503329637837291, 0.7071067811865476,
        0.39999999999999997};
    Tensor mag = sobel_magnitude(img);
    REQUIRE(mag.shape == img.shape);
    for (int j = 0; j < 25; ++j)
        CHECK(mag.v[static_cast<size_t>(j)] == doctest::Approx(expect[j]).epsilon(1e-12));
}

TEST_CASE("sobel difference map is zero on identity and unit peaked otherwise") {
    Tensor a = scene(16);
    Tensor zero = sobel_difference_map(a, a);
    for (double v : zero.v) CHECK(v == 0.0);

    Tensor b = a;
    for (int y = 6; y < 10; ++y)
        for (int x = 6; x < 10; ++x) b.at2(y, x) += 0.8;
    Tensor d = sobel_difference_map(a, b);
    double mx = 0.0;
    for (double v : d.v) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
        mx = std::max(mx, v);
    }
    CHECK(mx == 1.0);

    // the disturbance is confined to the altered block's neighborhood
    for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x)
            if (y < 4 || y > 11 || x < 4 || x > 11) CHECK(d.at2(y, x) == 0.0);
}

TEST_CASE("median handles both parities and rejects empties") {
    CHECK(median_of({3.0, 1.0, 2.0}) == 2.0);
    CHECK(median_of({4.0, 1.0, 3.0, 2.0}) == 2.5);
    CHECK(median_of({7.0}) == 7.0);
    CHECK_THROWS_AS(median_of({}), std::invalid_argument);
}

TEST_CASE("volume evaluation report is coherent for phantom data") {
    PhantomConfig cfg;
    cfg.resolution = 32;
    cfg.slice_count = 4;
    PairedSample s = generate_phantom("m", 2, 314, cfg);
    RegionSpec region = region_from_geometry(s.geom, cfg.resolution);
    CHECK(region.col_lo == 0);
    CHECK(region.col_hi == 32);
    CHECK(region.row_lo == s.geom.joint_row_lo);
    CHECK(region.row_hi == s.geom.joint_row_hi);
    CHECK_FALSE(region.empty());

    EvalReport perfect = evaluate_volumes(s.volume, s.volume, region);
    REQUIRE(perfect.slice_psnr.size() == 4);
    for (int k = 0; k < 4; ++k) {
        CHECK(std::isinf(perfect.slice_psnr[static_cast<size_t>(k)]));
        CHECK(perfect.slice_ssim[static_cast<size_t>(k)] == doctest::Approx(1.0).epsilon(1e-9));
        CHECK(perfect.slice_rssim[static_cast<size_t>(k)] == 1.0);
    }
    CHECK(perfect.corr_pred == perfect.corr_gt);
    CHECK(perfect.mean_ssim == doctest::Approx(1.0).epsilon(1e-9));

    // corrupt one slice: that slice's scores drop and the medians move less
    Volume noisy = s.volume;
    RngHandle rng(66);
    for (auto& v : noisy.slices[1].v)
        v = std::min(1.0, std::max(-1.0, v + 0.4 * rng.uniform(-1.0, 1.0)));
    EvalReport rep = evaluate_volumes(noisy, s.volume, region);
    CHECK(std::isfinite(rep.slice_psnr[1]));
    CHECK(rep.slice_ssim[1] < 0.999);
    CHECK(rep.median_psnr == median_of(rep.slice_psnr));
    CHECK(rep.median_ssim == median_of(rep.slice_ssim));

    Volume shrunk = s.volume;
    shrunk.slices.pop_back();
    shrunk.depths.pop_back();
    CHECK_THROWS_AS(evaluate_volumes(shrunk, s.volume, region), std::invalid_argument);
}

TEST_CASE("evaluation csv parses back with one row per slice plus aggregates") {
    EvalReport rep;
    rep.slice_psnr = {30.0, std::numeric_limits<double>::infinity()};
    rep.slice_ssim = {0.9, 1.0};
    rep.slice_rssim = {0.8, 1.0};
    rep.mean_psnr = 31.0;
    rep.median_psnr = 31.0;
    rep.mean_ssim = 0.95;
    rep.median_ssim = 0.95;
    rep.mean_rssim = 0.9;
    rep.median_rssim = 0.9;
    rep.corr_pred = 0.31;
    rep.corr_gt = 0.44;

    auto rows = parse_csv(eval_report_csv(rep));
    REQUIRE(rows.size() == 1 + 2 + 4);  // header, slices, aggregates
    CHECK(rows[0][0] == "slice");
    CHECK(rows[1][0] == "0");
    CHECK(std::stod(rows[1][1]) == 30.0);
    CHECK(rows[2][1] == "inf");
    CHECK(rows[3][0] == "mean");
    CHECK(rows[4][0] == "median");
    CHECK(rows[5][0] == "corr_pred");
    CHECK(std::stod(rows[5][1]) == 0.31);
    CHECK(rows[6][0] == "corr_gt");
}
