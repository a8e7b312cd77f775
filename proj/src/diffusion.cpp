#include "xr2vol/diffusion.hpp"

namespace xr2vol {

static void require_live_step(int t, int T, const char* where) {
    if (t < 1 || t > T) throw std::out_of_range(std::string(where) + ": timestep out of range");
}

Tensor forward_noise(const Tensor& z0, const Tensor& eps, const NoiseSchedule& ns, int t) {
    require_same_shape(z0, eps, "forward_noise");
    require_live_step(t, ns.T, "forward_noise");
    Tensor out(z0.shape);
    forward_noise_into<double>(z0.v, eps.v, ns.alpha_bar(t), out.v);
    return out;
}

Tensor predict_x0(const Tensor& z_t, const Tensor& eps_hat, const NoiseSchedule& ns, int t) {
    require_same_shape(z_t, eps_hat, "predict_x0");
    require_live_step(t, ns.T, "predict_x0");
    Tensor out(z_t.shape);
    predict_x0_into<double>(z_t.v, eps_hat.v, ns.alpha_bar(t), out.v);
    return out;
}

Tensor ddim_step(const Tensor& z_t, const Tensor& eps_hat, const NoiseSchedule& ns, int t,
                 int t_prev) {
    require_same_shape(z_t, eps_hat, "ddim_step");
    if (t_prev >= t) throw std::invalid_argument("ddim_step: t_prev must be below t");
    Tensor out(z_t.shape);
    ddim_step_into<double>(z_t.v, eps_hat.v, ns.alpha_bar(t), ns.alpha_bar(t_prev), out.v);
    return out;
}

double diffusion_loss(const Tensor& eps_hat, const Tensor& eps) {
    require_same_shape(eps_hat, eps, "diffusion_loss");
    double acc = 0.0;
    for (size_t i = 0; i < eps.v.size(); ++i) {
        double d = eps_hat.v[i] - eps.v[i];
        acc += d * d;
    }
    return acc / static_cast<double>(eps.v.size());
}

void ema_update(Tensor& shadow, const Tensor& value, double decay) {
    require_same_shape(shadow, value, "ema_update");
    for (size_t i = 0; i < shadow.v.size(); ++i)
        shadow.v[i] = decay * shadow.v[i] + (1.0 - decay) * value.v[i];
}

}  // namespace xr2vol
