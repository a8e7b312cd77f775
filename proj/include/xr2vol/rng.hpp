#ifndef XR2VOL_RNG_HPP
#define XR2VOL_RNG_HPP

#include <cmath>
#include <cstdint>
#include <limits>
#include <random>
#include <sstream>
#include <string>

namespace xr2vol {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Mixes a run seed with a stream index (slice id, sample id) so parallel and
// serial generation draw identical values.
inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
    return splitmix64(seed ^ splitmix64(stream + 0x51a5c3f0d7ULL));
}

// Explicit generator handle passed through every stochastic operation.
// Distributions are hand-rolled on top of mt19937_64 so the produced sequences
// are identical across standard libraries.
class RngHandle {
public:
    explicit RngHandle(std::uint64_t seed = 0) : eng_(seed) {}

    std::uint64_t raw() { return eng_(); }

    // uniform in [0,1)
    double uniform() {
        return static_cast<double>(eng_() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [lo, hi] inclusive
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1ULL;
        return lo + static_cast<std::int64_t>(eng_() % span);
    }

    // standard normal via Box-Muller, one cached value
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    std::string state_string() const {
        std::ostringstream os;
        os.precision(std::numeric_limits<double>::max_digits10);
        os << eng_ << " " << (have_spare_ ? 1 : 0) << " " << spare_;
        return os.str();
    }

    void restore_state(const std::string& s) {
        std::istringstream is(s);
        int flag = 0;
        is >> eng_ >> flag >> spare_;
        if (is.fail()) throw std::runtime_error("rng: bad state string");
        have_spare_ = flag != 0;
    }

private:
    std::mt19937_64 eng_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace xr2vol

#endif
