#ifndef XR2VOL_NN_HPP
#define XR2VOL_NN_HPP

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "xr2vol/autograd.hpp"
#include "xr2vol/rng.hpp"
#include "xr2vol/tensor.hpp"

namespace xr2vol {

// Named parameter container with deterministic iteration order (insertion
// order). Names are hierarchical, e.g. "ae.enc.s0.b0.conv1.w".
class ParamStore {
public:
    Tensor& add(const std::string& name, Tensor init);
    Tensor& get(const std::string& name);
    const Tensor& get(const std::string& name) const;
    bool has(const std::string& name) const { return map_.count(name) != 0; }
    const std::vector<std::string>& names() const { return order_; }
    std::int64_t total_elements() const;

    // Hash over names, shapes and raw values; used for freeze assertions.
    std::uint64_t content_hash() const;
    std::uint64_t content_hash(const std::vector<std::string>& subset) const;

private:
    std::vector<std::string> order_;
    std::unordered_map<std::string, Tensor> map_;
};

// Places parameters on a tape on first use and remembers the Var, so one
// forward pass binds each parameter exactly once.
class TapeParams {
public:
    TapeParams(Tape& tape, ParamStore& store) : tape_(&tape), store_(&store) {}
    Var operator[](const std::string& name);
    // Copies accumulated parameter gradients out of the tape, keyed by name.
    void export_grads(std::unordered_map<std::string, Tensor>& grads) const;
    const std::vector<std::string>& bound_names() const { return bound_order_; }

private:
    Tape* tape_;
    ParamStore* store_;
    std::vector<std::string> bound_order_;
    std::unordered_map<std::string, Var> vars_;
};

// Initializers. Weight draws use the fan-in scaled normal that keeps layer
// output variance of order 1.
Tensor init_conv_weight(int co, int ci, int kh, int kw, RngHandle& rng);
Tensor init_linear_weight(int m, int n, RngHandle& rng);
Tensor init_zeros(std::vector<int> shape);
Tensor init_ones(std::vector<int> shape);
Tensor init_normal(std::vector<int> shape, double stddev, RngHandle& rng);

struct AdamWConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
    int warmup_steps = 100;  // linear ramp from 0 to lr
};

// Decoupled-weight-decay Adam. Moment tensors are created lazily per
// parameter name and serialize with the checkpoint for exact resume.
class AdamW {
public:
    AdamWConfig cfg;
    std::int64_t step_count = 0;
    std::unordered_map<std::string, Tensor> m, v;

    double current_lr() const;
    void step(ParamStore& params, const std::vector<std::string>& names,
              const std::unordered_map<std::string, Tensor>& grads);
};

// EMA shadow over a subset of parameters.
struct EmaState {
    double decay = 0.99;
    std::vector<std::string> names;
    std::unordered_map<std::string, Tensor> shadow;

    void init(const ParamStore& params, const std::vector<std::string>& tracked, double d);
    void update(const ParamStore& params);
    // Writes shadow values over the live parameters (used for sampling).
    void apply_to(ParamStore& params) const;
};

}  // namespace xr2vol

#endif
