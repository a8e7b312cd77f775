#include "xr2vol/schedule.hpp"

#include <cstdint>
#include <stdexcept>

namespace xr2vol {

static void check_t(int t, int T, int lo) {
    if (t < lo || t > T) throw std::out_of_range("schedule: timestep out of range");
}

double NoiseSchedule::beta(int t) const {
    check_t(t, T, 1);
    return betas[static_cast<size_t>(t) - 1];
}

double NoiseSchedule::alpha(int t) const {
    check_t(t, T, 1);
    return alphas[static_cast<size_t>(t) - 1];
}

double NoiseSchedule::alpha_bar(int t) const {
    check_t(t, T, 0);
    if (t == 0) return 1.0;
    return alpha_bars[static_cast<size_t>(t) - 1];
}

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
    if (T < 1) throw std::invalid_argument("schedule: T must be >= 1");
    if (beta_start <= 0.0 || beta_end >= 1.0 || beta_start > beta_end)
        throw std::invalid_argument("schedule: need 0 < beta_start <= beta_end < 1");
    NoiseSchedule s;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));
    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double prod = 1.0;
    for (int t = 0; t < T; ++t) {
        double b = T == 1 ? beta_start
                          : beta_start + (beta_end - beta_start) * static_cast<double>(t) /
                                             static_cast<double>(T - 1);
        s.betas[static_cast<size_t>(t)] = b;
        s.alphas[static_cast<size_t>(t)] = 1.0 - b;
        prod *= 1.0 - b;
        s.alpha_bars[static_cast<size_t>(t)] = prod;
    }
    return s;
}

std::vector<int> uniform_timesteps(int T, int steps) {
    if (steps < 1 || steps > T) throw std::invalid_argument("schedule: bad sampler step count");
    std::vector<int> ts(static_cast<size_t>(steps));
    for (int j = 0; j < steps; ++j)
        ts[static_cast<size_t>(j)] =
            T - static_cast<int>((static_cast<std::int64_t>(j) * T) / steps);
    return ts;
}

}  // namespace xr2vol
