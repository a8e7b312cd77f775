#ifndef XR2VOL_METRICS_HPP
#define XR2VOL_METRICS_HPP

#include <string>
#include <vector>

#include "xr2vol/data.hpp"
#include "xr2vol/tensor.hpp"

namespace xr2vol {

// Half-open pixel rectangle; rows and cols in image coordinates.
struct RegionSpec {
    int row_lo = 0;
    int row_hi = 0;
    int col_lo = 0;
    int col_hi = 0;

    bool empty() const { return row_hi <= row_lo || col_hi <= col_lo; }
};

// Joint-centered horizontal band recorded by the phantom generator, full width.
RegionSpec region_from_geometry(const SampleGeometry& geom, int resolution);

// 10*log10(peak^2 / mse); identical images return +infinity.
double psnr(const Tensor& a, const Tensor& b, double peak);

// Mean of the local similarity map over all fully-contained Gaussian windows
// (window w, sigma 1.5, C1=(k1*peak)^2, C2=(k2*peak)^2).
double ssim(const Tensor& a, const Tensor& b, int window, double k1, double k2, double peak);
double ssim(const Tensor& a, const Tensor& b, double peak);  // window 11, k1 .01, k2 .03

// Binary edge map (0/1 values): Gaussian smooth, Sobel gradients, non-maximum
// suppression, hysteresis at lo/hi fractions of the magnitude maximum.
Tensor canny_edges(const Tensor& img, double sigma, double lo_frac = 0.1, double hi_frac = 0.2);

// SSIM of the two Canny edge maps cropped to the region. Equal all-zero edge
// maps score 1 by the SSIM identity.
double rssim(const Tensor& a, const Tensor& b, double canny_sigma, const RegionSpec& region);

// Mean Pearson correlation over consecutive slice pairs. A pair with at least
// one constant slice contributes 1 when both are constant and equal, else 0.
double adjacent_slice_correlation(const Volume& vol);

// Gradient-magnitude image under the 3x3 Sobel operator, replicate padding.
Tensor sobel_magnitude(const Tensor& img);

// |sobel_magnitude(a) - sobel_magnitude(b)|, scaled by its own maximum into
// [0,1]; all zeros when the inputs match.
Tensor sobel_difference_map(const Tensor& a, const Tensor& b);

struct EvalReport {
    std::string model_id;
    std::string dataset_id;
    int steps = 0;
    std::vector<double> slice_psnr;
    std::vector<double> slice_ssim;
    std::vector<double> slice_rssim;
    double mean_psnr = 0.0, median_psnr = 0.0;
    double mean_ssim = 0.0, median_ssim = 0.0;
    double mean_rssim = 0.0, median_rssim = 0.0;
    double corr_pred = 0.0;
    double corr_gt = 0.0;
};

double median_of(std::vector<double> xs);

// Per-slice metrics against ground truth plus volume-level aggregates.
// Intensities are in [-1,1], so peak is fixed at 2.
EvalReport evaluate_volumes(const Volume& pred, const Volume& gt, const RegionSpec& region);

// CSV with one row per slice plus aggregate rows.
std::string eval_report_csv(const EvalReport& rep);

}  // namespace xr2vol

#endif
