#ifndef XR2VOL_GUIDANCE_HPP
#define XR2VOL_GUIDANCE_HPP

#include <utility>

#include "xr2vol/autograd.hpp"
#include "xr2vol/nn.hpp"
#include "xr2vol/tensor.hpp"

namespace xr2vol {

// Severity distribution over the five grades.
struct KoaDistribution {
    Tensor probs;  // {5}, entries in [0,1], sum 1
};

KoaDistribution smoothed_one_hot(int grade, double smoothing = 0.1);
void validate_koa(const KoaDistribution& p);

struct GuidanceConfig {
    int h = 16;               // guidance plane resolution (defaults to latent)
    int w = 16;
    int proj_dim = 8;         // rows of the attention projections; also the
                              // scaling dimension under the square root
    double kappa = 1e-5;      // gain stabilizer inside the square root
    double eps_stab = 1e-8;   // gain normalization stabilizer
    int map_elems() const { return h * w; }
};

// Everything the denoiser consumes per slice: the projected severity map,
// the intensity map, the normalized target depth, and the combined plane.
struct GuidanceBundle {
    Tensor p_map;       // {h,w}
    Tensor i_map;       // {h,w}
    double depth = 0.0;  // in [0,1]
    Tensor y_combined;  // {h,w}
};

// Parameter names under a prefix (default "aw."):
//   mu_p, mu_i, nu_p, nu_i, o_p, o_i : {1}
//   W_p, W_i                          : {proj_dim, h*w}
//   proj                              : {5, h*w}
void register_guidance_params(ParamStore& store, const GuidanceConfig& cfg, RngHandle& rng,
                              const std::string& prefix = "aw.");
std::vector<std::string> guidance_param_names(const std::string& prefix = "aw.");

// ---- plain evaluation path (pure functions, mirrored by the tape path) ----

// mu * sqrt(sum(map^2) + kappa)
double gain(const Tensor& map, double mu, double kappa);

// (G_p, G_i) -> (G_p/(G_p+G_i+eps), G_i/(G_p+G_i+eps))
std::pair<double, double> normalize_gains(double g_p, double g_i, double eps_stab);

// map * (1 + sigmoid(nu*G_hat + o)), a single scalar multiplier
Tensor modulate(const Tensor& map, double g_hat, double nu, double o);

// softmax_rows( (W_p p)(W_i i)^T / sqrt(proj_dim) ), shape {k,k}
Tensor joint_weight(const Tensor& p_map, const Tensor& i_map, const Tensor& w_p,
                    const Tensor& w_i, int proj_dim);

// Maps the attention weights back to the plane: W_p^T (lambda * (W_i i)),
// reshaped to {h,w}.
Tensor broadcast_attention(const Tensor& lambda, const Tensor& i_map, const Tensor& w_p,
                           const Tensor& w_i, int h, int w);

// weight_plane (elementwise) * (p_tilde + i_tilde)
Tensor combine(const Tensor& weight_plane, const Tensor& p_tilde, const Tensor& i_tilde);

// probs^T proj reshaped to {h,w}
Tensor project_koa_to_map(const KoaDistribution& p, int h, int w, const Tensor& proj);

// Box average of a {h,w} plane to {oh,ow}; source dims must be multiples of
// the target dims.
Tensor downsample_area(const Tensor& img, int oh, int ow);

// Full module: project, gain, normalize, modulate, attend, combine.
GuidanceBundle adaptive_weight_module(const KoaDistribution& p, const Tensor& i_map,
                                      const ParamStore& params, const GuidanceConfig& cfg,
                                      const std::string& prefix = "aw.");

// Tape path used in training; identical math to adaptive_weight_module.
Var adaptive_weight_tape(Tape& tape, TapeParams& tp, Var probs, Var i_map,
                         const GuidanceConfig& cfg, const std::string& prefix = "aw.");

// Sinusoidal features of a scalar depth in [0,1]; dim must be even.
// Frequencies grow geometrically from 1 to 100, lowest pair keeps the map
// injective on [0,1].
Tensor embed_depth(double depth, int dim);

}  // namespace xr2vol

#endif
