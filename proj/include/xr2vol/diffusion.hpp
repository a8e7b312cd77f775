#ifndef XR2VOL_DIFFUSION_HPP
#define XR2VOL_DIFFUSION_HPP

#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "xr2vol/schedule.hpp"
#include "xr2vol/tensor.hpp"

namespace xr2vol {

// Closed-form jump to step t: z_t = sqrt(ab)*z0 + sqrt(1-ab)*eps.
// Templated on the scalar so the sampler algebra can be exercised in float as
// well as double.
template <class S>
void forward_noise_into(const std::vector<S>& z0, const std::vector<S>& eps, S alpha_bar_t,
                        std::vector<S>& out) {
    if (z0.size() != eps.size()) throw std::invalid_argument("forward_noise: size mismatch");
    out.resize(z0.size());
    S sa = std::sqrt(alpha_bar_t);
    S sb = std::sqrt(S(1) - alpha_bar_t);
    for (size_t i = 0; i < z0.size(); ++i) out[i] = sa * z0[i] + sb * eps[i];
}

// Recovers the clean-signal estimate implied by a noise prediction.
template <class S>
void predict_x0_into(const std::vector<S>& z_t, const std::vector<S>& eps_hat, S alpha_bar_t,
                     std::vector<S>& out) {
    if (z_t.size() != eps_hat.size()) throw std::invalid_argument("predict_x0: size mismatch");
    out.resize(z_t.size());
    S sa = std::sqrt(alpha_bar_t);
    S sb = std::sqrt(S(1) - alpha_bar_t);
    for (size_t i = 0; i < z_t.size(); ++i) out[i] = (z_t[i] - sb * eps_hat[i]) / sa;
}

// Deterministic (eta = 0) update from step t to step t_prev:
//   z_prev = sqrt(ab_prev) * x0_hat + sqrt(1 - ab_prev) * eps_hat
template <class S>
void ddim_step_into(const std::vector<S>& z_t, const std::vector<S>& eps_hat, S alpha_bar_t,
                    S alpha_bar_prev, std::vector<S>& out) {
    if (z_t.size() != eps_hat.size()) throw std::invalid_argument("ddim_step: size mismatch");
    out.resize(z_t.size());
    S sa = std::sqrt(alpha_bar_t);
    S sb = std::sqrt(S(1) - alpha_bar_t);
    S pa = std::sqrt(alpha_bar_prev);
    S pb = std::sqrt(S(1) - alpha_bar_prev);
    for (size_t i = 0; i < z_t.size(); ++i) {
        S x0 = (z_t[i] - sb * eps_hat[i]) / sa;
        out[i] = pa * x0 + pb * eps_hat[i];
    }
}

// Runs the deterministic sampler over a strictly decreasing timestep list.
// The list must start below or at T; if its last entry is not 0 a final step
// to 0 is taken. The model receives (z, t) and writes its noise prediction.
template <class S>
using DenoiseFn = std::function<void(const std::vector<S>&, int, std::vector<S>&)>;

template <class S>
std::vector<S> ddim_sample(const NoiseSchedule& ns, const std::vector<int>& timesteps,
                           const std::vector<S>& z_T, const DenoiseFn<S>& model) {
    if (timesteps.empty()) throw std::invalid_argument("ddim_sample: empty timestep list");
    for (size_t j = 0; j + 1 < timesteps.size(); ++j)
        if (timesteps[j] <= timesteps[j + 1])
            throw std::invalid_argument("ddim_sample: timesteps must strictly decrease");
    if (timesteps.front() > ns.T || timesteps.back() < 0)
        throw std::invalid_argument("ddim_sample: timesteps out of range");

    std::vector<int> ts = timesteps;
    if (ts.back() != 0) ts.push_back(0);

    std::vector<S> z = z_T;
    std::vector<S> eps_hat, next;
    for (size_t j = 0; j + 1 < ts.size(); ++j) {
        int t = ts[j];
        int t_prev = ts[j + 1];
        model(z, t, eps_hat);
        if (eps_hat.size() != z.size()) throw std::runtime_error("ddim_sample: bad model output");
        ddim_step_into<S>(z, eps_hat, static_cast<S>(ns.alpha_bar(t)),
                          static_cast<S>(ns.alpha_bar(t_prev)), next);
        z.swap(next);
    }
    return z;
}

// Tensor-level wrappers around the double kernels.
Tensor forward_noise(const Tensor& z0, const Tensor& eps, const NoiseSchedule& ns, int t);
Tensor predict_x0(const Tensor& z_t, const Tensor& eps_hat, const NoiseSchedule& ns, int t);
Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, const NoiseSchedule& ns, int t,
                 int t_prev);

// Mean squared error between predicted and true noise.
double diffusion_loss(const Tensor& eps_hat, const Tensor& eps);

// shadow = decay * shadow + (1 - decay) * value
void ema_update(Tensor& shadow, const Tensor& value, double decay);

}  // namespace xr2vol

#endif
