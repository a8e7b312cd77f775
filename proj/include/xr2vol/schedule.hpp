#ifndef XR2VOL_SCHEDULE_HPP
#define XR2VOL_SCHEDULE_HPP

#include <vector>

namespace xr2vol {

// Variance schedule tables, index 1..T stored at [t-1].
// alpha_bar(0) is defined as 1 so every sampler formula can treat step 0 as
// the clean-signal endpoint.
struct NoiseSchedule {
    int T = 0;
    std::vector<double> betas;       // beta_t,      size T
    std::vector<double> alphas;      // 1 - beta_t,  size T
    std::vector<double> alpha_bars;  // prod alphas, size T

    double beta(int t) const;
    double alpha(int t) const;
    double alpha_bar(int t) const;  // accepts t in [0, T]
};

// Linearly spaced betas from beta_start to beta_end over T steps.
// T == 1 uses beta_start alone.
NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

// Strictly decreasing timestep list for a sampler with the given step count:
// t_j = T - floor(j*T/steps), j = 0..steps-1. Always starts at T; 0 is the
// implied endpoint and is not stored.
std::vector<int> uniform_timesteps(int T, int steps);

}  // namespace xr2vol

#endif
