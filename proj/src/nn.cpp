#include "xr2vol/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace xr2vol {

Tensor& ParamStore::add(const std::string& name, Tensor init) {
    if (map_.count(name)) throw std::invalid_argument("params: duplicate name " + name);
    order_.push_back(name);
    auto [it, ok] = map_.emplace(name, std::move(init));
    (void)ok;
    return it->second;
}

Tensor& ParamStore::get(const std::string& name) {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("params: unknown name " + name);
    return it->second;
}

const Tensor& ParamStore::get(const std::string& name) const {
    auto it = map_.find(name);
    if (it == map_.end()) throw std::out_of_range("params: unknown name " + name);
    return it->second;
}

std::int64_t ParamStore::total_elements() const {
    std::int64_t n = 0;
    for (const auto& name : order_) n += map_.at(name).numel();
    return n;
}

static void hash_one(std::uint64_t& h, const std::string& name, const Tensor& t) {
    auto mix = [&h](const void* p, size_t len) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (size_t i = 0; i < len; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    mix(name.data(), name.size());
    mix(t.shape.data(), t.shape.size() * sizeof(int));
    mix(t.v.data(), t.v.size() * sizeof(double));
}

std::uint64_t ParamStore::content_hash() const { return content_hash(order_); }

std::uint64_t ParamStore::content_hash(const std::vector<std::string>& subset) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& name : subset) hash_one(h, name, map_.at(name));
    return h;
}

Var TapeParams::operator[](const std::string& name) {
    auto it = vars_.find(name);
    if (it != vars_.end()) return it->second;
    Var v = tape_->leaf(store_->get(name));
    vars_.emplace(name, v);
    bound_order_.push_back(name);
    return v;
}

void TapeParams::export_grads(std::unordered_map<std::string, Tensor>& grads) const {
    for (const auto& name : bound_order_) {
        const Tensor& g = tape_->grad(vars_.at(name));
        auto it = grads.find(name);
        if (it == grads.end()) {
            grads.emplace(name, g);
        } else {
            require_same_shape(it->second, g, "export_grads");
            for (size_t i = 0; i < g.v.size(); ++i) it->second.v[i] += g.v[i];
        }
    }
}

Tensor init_conv_weight(int co, int ci, int kh, int kw, RngHandle& rng) {
    Tensor w({co, ci, kh, kw});
    double std = std::sqrt(2.0 / (static_cast<double>(ci) * kh * kw));
    for (auto& x : w.v) x = std * rng.normal();
    return w;
}

Tensor init_linear_weight(int m, int n, RngHandle& rng) {
    Tensor w({m, n});
    double std = std::sqrt(2.0 / static_cast<double>(n));
    for (auto& x : w.v) x = std * rng.normal();
    return w;
}

Tensor init_zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor init_ones(std::vector<int> shape) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = 1.0;
    return t;
}

Tensor init_normal(std::vector<int> shape, double stddev, RngHandle& rng) {
    Tensor t(std::move(shape));
    for (auto& x : t.v) x = stddev * rng.normal();
    return t;
}

double AdamW::current_lr() const {
    if (cfg.warmup_steps <= 0) return cfg.lr;
    double ramp = static_cast<double>(step_count) / static_cast<double>(cfg.warmup_steps);
    return cfg.lr * (ramp < 1.0 ? ramp : 1.0);
}

void AdamW::step(ParamStore& params, const std::vector<std::string>& names,
                 const std::unordered_map<std::string, Tensor>& grads) {
    ++step_count;
    double lr = current_lr();
    double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step_count));
    double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step_count));
    for (const auto& name : names) {
        auto git = grads.find(name);
        if (git == grads.end()) continue;  // parameter unused this step
        Tensor& p = params.get(name);
        const Tensor& g = git->second;
        Tensor& mm = m.try_emplace(name, Tensor(p.shape)).first->second;
        Tensor& vv = v.try_emplace(name, Tensor(p.shape)).first->second;
        for (size_t i = 0; i < p.v.size(); ++i) {
            mm.v[i] = cfg.beta1 * mm.v[i] + (1.0 - cfg.beta1) * g.v[i];
            vv.v[i] = cfg.beta2 * vv.v[i] + (1.0 - cfg.beta2) * g.v[i] * g.v[i];
            double mhat = mm.v[i] / bc1;
            double vhat = vv.v[i] / bc2;
            p.v[i] -= lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.v[i]);
        }
    }
}

void EmaState::init(const ParamStore& params, const std::vector<std::string>& tracked, double d) {
    decay = d;
    names = tracked;
    shadow.clear();
    for (const auto& name : names) shadow.emplace(name, params.get(name));
}

void EmaState::update(const ParamStore& params) {
    for (const auto& name : names) {
        Tensor& s = shadow.at(name);
        const Tensor& p = params.get(name);
        for (size_t i = 0; i < s.v.size(); ++i)
            s.v[i] = decay * s.v[i] + (1.0 - decay) * p.v[i];
    }
}

void EmaState::apply_to(ParamStore& params) const {
    for (const auto& name : names) params.get(name) = shadow.at(name);
}

}  // namespace xr2vol
