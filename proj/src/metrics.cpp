#include "xr2vol/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <limits>
#include <stdexcept>

#include "xr2vol/io.hpp"

namespace xr2vol {

RegionSpec region_from_geometry(const SampleGeometry& geom, int resolution) {
    RegionSpec r;
    r.row_lo = geom.joint_row_lo;
    r.row_hi = geom.joint_row_hi;
    r.col_lo = 0;
    r.col_hi = resolution;
    return r;
}

static void require_plane(const Tensor& t, const char* who) {
    bool ok = (t.rank() == 2) || (t.rank() == 3 && t.dim(0) == 1);
    if (!ok) throw std::invalid_argument(std::string(who) + ": expected a single-channel image");
}

static int rows_of(const Tensor& t) { return t.rank() == 2 ? t.dim(0) : t.dim(1); }
static int cols_of(const Tensor& t) { return t.rank() == 2 ? t.dim(1) : t.dim(2); }

double psnr(const Tensor& a, const Tensor& b, double peak) {
    require_same_shape(a, b, "psnr");
    if (!(peak > 0.0)) throw std::invalid_argument("psnr: peak must be positive");
    double mse = 0.0;
    for (size_t i = 0; i < a.v.size(); ++i) {
        double d = a.v[i] - b.v[i];
        mse += d * d;
    }
    mse /= static_cast<double>(a.v.size());
    if (mse == 0.0) return std::numeric_limits<double>::infinity();
    return 10.0 * std::log10(peak * peak / mse);
}

static std::vector<double> gaussian_window(int w, double sigma) {
    std::vector<double> g1(static_cast<size_t>(w));
    int c = w / 2;
    double sum = 0.0;
    for (int i = 0; i < w; ++i) {
        double d = i - c;
        g1[static_cast<size_t>(i)] = std::exp(-d * d / (2.0 * sigma * sigma));
        sum += g1[static_cast<size_t>(i)];
    }
    for (auto& v : g1) v /= sum;
    std::vector<double> g2(static_cast<size_t>(w) * w);
    for (int i = 0; i < w; ++i)
        for (int j = 0; j < w; ++j)
            g2[static_cast<size_t>(i * w + j)] =
                g1[static_cast<size_t>(i)] * g1[static_cast<size_t>(j)];
    return g2;
}

double ssim(const Tensor& a, const Tensor& b, int window, double k1, double k2, double peak) {
    require_same_shape(a, b, "ssim");
    require_plane(a, "ssim");
    if (window < 1 || window % 2 == 0) throw std::invalid_argument("ssim: window must be odd");
    int h = rows_of(a), w = cols_of(a);
    if (window > h || window > w) throw std::invalid_argument("ssim: window exceeds image");
    double c1 = (k1 * peak) * (k1 * peak);
    double c2 = (k2 * peak) * (k2 * peak);
    std::vector<double> g = gaussian_window(window, 1.5);
    auto px = [&](const Tensor& t, int y, int x) {
        return t.v[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)];
    };
    double acc = 0.0;
    int count = 0;
    for (int y = 0; y + window <= h; ++y)
        for (int x = 0; x + window <= w; ++x) {
            double ma = 0.0, mb = 0.0;
            for (int i = 0; i < window; ++i)
                for (int j = 0; j < window; ++j) {
                    double wt = g[static_cast<size_t>(i * window + j)];
                    ma += wt * px(a, y + i, x + j);
                    mb += wt * px(b, y + i, x + j);
                }
            double va = 0.0, vb = 0.0, cov = 0.0;
            for (int i = 0; i < window; ++i)
                for (int j = 0; j < window; ++j) {
                    double wt = g[static_cast<size_t>(i * window + j)];
                    double da = px(a, y + i, x + j) - ma;
                    double db = px(b, y + i, x + j) - mb;
                    va += wt * da * da;
                    vb += wt * db * db;
                    cov += wt * da * db;
                }
            double s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) /
                       ((ma * ma + mb * mb + c1) * (va + vb + c2));
            acc += s;
            ++count;
        }
    return acc / static_cast<double>(count);
}

double ssim(const Tensor& a, const Tensor& b, double peak) {
    return ssim(a, b, 11, 0.01, 0.03, peak);
}

// replicate-padded pixel fetch
static double pad_px(const Tensor& t, int h, int w, int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return t.v[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)];
}

static Tensor gaussian_blur(const Tensor& img, double sigma) {
    int h = rows_of(img), w = cols_of(img);
    int rad = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(static_cast<size_t>(2 * rad + 1));
    double sum = 0.0;
    for (int i = -rad; i <= rad; ++i) {
        k[static_cast<size_t>(i + rad)] = std::exp(-0.5 * i * i / (sigma * sigma));
        sum += k[static_cast<size_t>(i + rad)];
    }
    for (auto& v : k) v /= sum;
    Tensor tmp(img.shape), out(img.shape);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -rad; i <= rad; ++i)
                acc += k[static_cast<size_t>(i + rad)] * pad_px(img, h, w, y, x + i);
            tmp.v[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)] = acc;
        }
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double acc = 0.0;
            for (int i = -rad; i <= rad; ++i)
                acc += k[static_cast<size_t>(i + rad)] * pad_px(tmp, h, w, y + i, x);
            out.v[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)] = acc;
        }
    return out;
}

static void sobel_xy(const Tensor& img, Tensor& gx, Tensor& gy) {
    int h = rows_of(img), w = cols_of(img);
    gx = Tensor(img.shape);
    gy = Tensor(img.shape);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            double p00 = pad_px(img, h, w, y - 1, x - 1), p01 = pad_px(img, h, w, y - 1, x);
            double p02 = pad_px(img, h, w, y - 1, x + 1), p10 = pad_px(img, h, w, y, x - 1);
            double p12 = pad_px(img, h, w, y, x + 1), p20 = pad_px(img, h, w, y + 1, x - 1);
            double p21 = pad_px(img, h, w, y + 1, x), p22 = pad_px(img, h, w, y + 1, x + 1);
            size_t i = static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x);
            gx.v[i] = (p02 + 2.0 * p12 + p22) - (p00 + 2.0 * p10 + p20);
            gy.v[i] = (p20 + 2.0 * p21 + p22) - (p00 + 2.0 * p01 + p02);
        }
}

Tensor canny_edges(const Tensor& img, double sigma, double lo_frac, double hi_frac) {
    require_plane(img, "canny");
    int h = rows_of(img), w = cols_of(img);
    Tensor smooth = gaussian_blur(img, sigma);
    Tensor gx, gy;
    sobel_xy(smooth, gx, gy);
    Tensor mag(img.shape);
    double gmax = 0.0;
    for (size_t i = 0; i < mag.v.size(); ++i) {
        mag.v[i] = std::sqrt(gx.v[i] * gx.v[i] + gy.v[i] * gy.v[i]);
        gmax = std::max(gmax, mag.v[i]);
    }
    Tensor edges(img.shape);
    if (gmax == 0.0) return edges;

    // non-maximum suppression along the quantized gradient direction
    Tensor nms(img.shape);
    auto at = [&](const Tensor& t, int y, int x) -> double {
        if (y < 0 || y >= h || x < 0 || x >= w) return 0.0;
        return t.v[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)];
    };
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x);
            double ang = std::atan2(gy.v[i], gx.v[i]);
            double deg = ang * 180.0 / 3.141592653589793;
            if (deg < 0.0) deg += 180.0;
            double n1, n2;
            if (deg < 22.5 || deg >= 157.5) {
                n1 = at(mag, y, x - 1);
                n2 = at(mag, y, x + 1);
            } else if (deg < 67.5) {
                n1 = at(mag, y - 1, x + 1);
                n2 = at(mag, y + 1, x - 1);
            } else if (deg < 112.5) {
                n1 = at(mag, y - 1, x);
                n2 = at(mag, y + 1, x);
            } else {
                n1 = at(mag, y - 1, x - 1);
                n2 = at(mag, y + 1, x + 1);
            }
            nms.v[i] = (mag.v[i] >= n1 && mag.v[i] >= n2) ? mag.v[i] : 0.0;
        }

    double lo = lo_frac * gmax, hi = hi_frac * gmax;
    std::deque<std::pair<int, int>> frontier;
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            size_t i = static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x);
            if (nms.v[i] >= hi) {
                edges.v[i] = 1.0;
                frontier.emplace_back(y, x);
            }
        }
    while (!frontier.empty()) {
        auto [y, x] = frontier.front();
        frontier.pop_front();
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                int ny = y + dy, nx = x + dx;
                if (ny < 0 || ny >= h || nx < 0 || nx >= w) continue;
                size_t i =
                    static_cast<size_t>(ny) * static_cast<size_t>(w) + static_cast<size_t>(nx);
                if (edges.v[i] == 0.0 && nms.v[i] >= lo) {
                    edges.v[i] = 1.0;
                    frontier.emplace_back(ny, nx);
                }
            }
    }
    return edges;
}

static Tensor crop_plane(const Tensor& t, const RegionSpec& r) {
    int h = rows_of(t), w = cols_of(t);
    if (r.empty() || r.row_lo < 0 || r.col_lo < 0 || r.row_hi > h || r.col_hi > w)
        throw std::invalid_argument("region: empty or out of bounds");
    Tensor out({r.row_hi - r.row_lo, r.col_hi - r.col_lo});
    for (int y = r.row_lo; y < r.row_hi; ++y)
        for (int x = r.col_lo; x < r.col_hi; ++x)
            out.v[static_cast<size_t>(y - r.row_lo) * static_cast<size_t>(r.col_hi - r.col_lo) +
                  static_cast<size_t>(x - r.col_lo)] =
                t.v[static_cast<size_t>(y) * static_cast<size_t>(w) + static_cast<size_t>(x)];
    return out;
}

double rssim(const Tensor& a, const Tensor& b, double canny_sigma, const RegionSpec& region) {
    require_same_shape(a, b, "rssim");
    Tensor ea = crop_plane(canny_edges(a, canny_sigma), region);
    Tensor eb = crop_plane(canny_edges(b, canny_sigma), region);
    int mindim = std::min(ea.dim(0), ea.dim(1));
    int win = std::min(11, mindim);
    if (win % 2 == 0) --win;
    return ssim(ea, eb, win, 0.01, 0.03, 1.0);
}

static double pearson(const Tensor& a, const Tensor& b) {
    double ma = 0.0, mb = 0.0;
    size_t n = a.v.size();
    for (size_t i = 0; i < n; ++i) {
        ma += a.v[i];
        mb += b.v[i];
    }
    ma /= static_cast<double>(n);
    mb /= static_cast<double>(n);
    double va = 0.0, vb = 0.0, cov = 0.0;
    for (size_t i = 0; i < n; ++i) {
        double da = a.v[i] - ma, db = b.v[i] - mb;
        va += da * da;
        vb += db * db;
        cov += da * db;
    }
    if (va == 0.0 || vb == 0.0) {
        // constant-slice convention: equal constants count as perfectly continuous
        if (va == 0.0 && vb == 0.0 && a.v[0] == b.v[0]) return 1.0;
        return 0.0;
    }
    return cov / std::sqrt(va * vb);
}

double adjacent_slice_correlation(const Volume& vol) {
    if (vol.slice_count() < 2)
        throw std::invalid_argument("correlation: need at least 2 slices");
    double acc = 0.0;
    for (int k = 0; k + 1 < vol.slice_count(); ++k)
        acc += pearson(vol.slices[static_cast<size_t>(k)], vol.slices[static_cast<size_t>(k + 1)]);
    return acc / static_cast<double>(vol.slice_count() - 1);
}

Tensor sobel_magnitude(const Tensor& img) {
    require_plane(img, "sobel");
    Tensor gx, gy;
    sobel_xy(img, gx, gy);
    Tensor mag(img.shape);
    for (size_t i = 0; i < mag.v.size(); ++i)
        mag.v[i] = std::sqrt(gx.v[i] * gx.v[i] + gy.v[i] * gy.v[i]);
    return mag;
}

Tensor sobel_difference_map(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sobel_difference_map");
    Tensor ma = sobel_magnitude(a), mb = sobel_magnitude(b);
    Tensor d(a.shape);
    double mx = 0.0;
    for (size_t i = 0; i < d.v.size(); ++i) {
        d.v[i] = std::fabs(ma.v[i] - mb.v[i]);
        mx = std::max(mx, d.v[i]);
    }
    if (mx > 0.0)
        for (auto& v : d.v) v /= mx;
    return d;
}

double median_of(std::vector<double> xs) {
    if (xs.empty()) throw std::invalid_argument("median: empty");
    std::sort(xs.begin(), xs.end());
    size_t n = xs.size();
    if (n % 2 == 1) return xs[n / 2];
    return 0.5 * (xs[n / 2 - 1] + xs[n / 2]);
}

static double mean_of(const std::vector<double>& xs) {
    double acc = 0.0;
    for (double x : xs) acc += x;
    return acc / static_cast<double>(xs.size());
}

EvalReport evaluate_volumes(const Volume& pred, const Volume& gt, const RegionSpec& region) {
    pred.validate();
    gt.validate();
    if (pred.slice_count() != gt.slice_count() || pred.resolution() != gt.resolution())
        throw std::invalid_argument("evaluate: volume shape mismatch");
    EvalReport rep;
    const double peak = 2.0;
    for (int k = 0; k < pred.slice_count(); ++k) {
        const Tensor& p = pred.slices[static_cast<size_t>(k)];
        const Tensor& g = gt.slices[static_cast<size_t>(k)];
        rep.slice_psnr.push_back(psnr(p, g, peak));
        rep.slice_ssim.push_back(ssim(p, g, peak));
        rep.slice_rssim.push_back(rssim(p, g, 3.0, region));
    }
    rep.mean_psnr = mean_of(rep.slice_psnr);
    rep.median_psnr = median_of(rep.slice_psnr);
    rep.mean_ssim = mean_of(rep.slice_ssim);
    rep.median_ssim = median_of(rep.slice_ssim);
    rep.mean_rssim = mean_of(rep.slice_rssim);
    rep.median_rssim = median_of(rep.slice_rssim);
    rep.corr_pred = adjacent_slice_correlation(pred);
    rep.corr_gt = adjacent_slice_correlation(gt);
    return rep;
}

std::string eval_report_csv(const EvalReport& rep) {
    std::vector<std::vector<std::string>> rows;
    for (size_t k = 0; k < rep.slice_psnr.size(); ++k)
        rows.push_back({std::to_string(k), format_double(rep.slice_psnr[k]),
                        format_double(rep.slice_ssim[k]), format_double(rep.slice_rssim[k])});
    rows.push_back({"mean", format_double(rep.mean_psnr), format_double(rep.mean_ssim),
                    format_double(rep.mean_rssim)});
    rows.push_back({"median", format_double(rep.median_psnr), format_double(rep.median_ssim),
                    format_double(rep.median_rssim)});
    rows.push_back({"corr_pred", format_double(rep.corr_pred), "", ""});
    rows.push_back({"corr_gt", format_double(rep.corr_gt), "", ""});
    return csv_document({"slice", "psnr_db", "ssim", "rssim"}, rows);
}

}  // namespace xr2vol
