#ifndef XR2VOL_AUTOGRAD_HPP
#define XR2VOL_AUTOGRAD_HPP

#include <functional>
#include <vector>

#include "xr2vol/tensor.hpp"

namespace xr2vol {

struct Var {
    int id = -1;
};

// Reverse-mode tape. One tape per forward pass; nodes are created in
// topological order, so backward() is a reverse sweep from the loss node.
// Constructing with grads = false records values only, for inference.
class Tape {
public:
    explicit Tape(bool grads = true) : grads_(grads) {}

    bool grads_enabled() const { return grads_; }
    size_t node_count() const { return nodes_.size(); }

    Var leaf(Tensor t);

    const Tensor& val(Var v) const { return nodes_.at(static_cast<size_t>(v.id)).val; }
    const Tensor& grad(Var v) const;

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape backwards. loss must be
    // a single-element tensor.
    void backward(Var loss);

    // elementwise
    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var div(Var a, Var b);
    Var scale(Var a, double c);
    Var add_const(Var a, double c);
    Var sigmoid(Var a);
    Var swish(Var a);
    Var exp_op(Var a);
    Var log_op(Var a);
    Var sqrt_op(Var a);
    Var clamp(Var a, double lo, double hi);  // zero gradient outside (lo, hi)

    // reductions to a {1} tensor
    Var sum(Var a);
    Var mean(Var a);
    Var mse(Var a, Var b);

    // linear algebra on {r, c} matrices and {n} vectors
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var softmax_rows(Var a);
    Var affine(Var w, Var x, Var b);  // {m,n} x {n} + {m} -> {m}
    Var add_row_vec(Var x, Var b);    // {r,c} + {c} broadcast over rows
    Var mul_by_scalar(Var x, Var s);  // x * s where s is a {1} tensor

    // shape
    Var reshape(Var a, std::vector<int> shape);
    Var concat_ch(const std::vector<Var>& xs);  // along dim 0, trailing dims equal
    Var slice_ch(Var a, int start, int count);  // dim-0 block [start, start+count)

    // image ops on {c, h, w}
    Var conv2d(Var x, Var w, Var b, int stride, int pad);
    Var group_norm(Var x, Var gamma, Var beta, int groups, double eps);
    Var upsample2x(Var x);       // nearest neighbour
    Var avgpool2x(Var x);        // h, w must be even
    Var global_avg_pool(Var x);  // -> {c}
    Var add_channel_bias(Var x, Var b);

private:
    struct Node {
        Tensor val;
        Tensor grad;
        std::function<void(Tape&)> back;
    };

    std::vector<Node> nodes_;
    bool grads_ = true;

    Var push(Tensor val, std::function<void(Tape&)> back);
    Tensor& g(int id) { return nodes_[static_cast<size_t>(id)].grad; }
    const Tensor& v(int id) const { return nodes_[static_cast<size_t>(id)].val; }
};

}  // namespace xr2vol

#endif
