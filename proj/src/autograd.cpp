#include "xr2vol/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace xr2vol {

// Each op captures the ids of its inputs and of its own output node (known
// before push because nodes are appended). Closures read tensors through the
// tape, never through references that a vector growth could invalidate.

Var Tape::push(Tensor val, std::function<void(Tape&)> back) {
    Node n;
    n.val = std::move(val);
    if (grads_) {
        n.grad = Tensor(n.val.shape);
        n.back = std::move(back);
    }
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
}

Var Tape::leaf(Tensor t) { return push(std::move(t), nullptr); }

const Tensor& Tape::grad(Var v) const {
    if (!grads_) throw std::logic_error("tape: gradients disabled");
    return nodes_.at(static_cast<size_t>(v.id)).grad;
}

void Tape::backward(Var loss) {
    if (!grads_) throw std::logic_error("tape: gradients disabled");
    Node& ln = nodes_.at(static_cast<size_t>(loss.id));
    if (ln.val.numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
    ln.grad.v[0] = 1.0;
    for (int i = loss.id; i >= 0; --i) {
        auto& fn = nodes_[static_cast<size_t>(i)].back;
        if (fn) fn(*this);
    }
}

// ---- elementwise ----

Var Tape::add(Var a, Var b) {
    require_same_shape(v(a.id), v(b.id), "add");
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    const auto& bv = v(b.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] + bv[i];
    const int ai = a.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, bi, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        auto& gb = t.g(bi).v;
        for (size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i];
            gb[i] += go[i];
        }
    });
}

Var Tape::sub(Var a, Var b) {
    require_same_shape(v(a.id), v(b.id), "sub");
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    const auto& bv = v(b.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] - bv[i];
    const int ai = a.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, bi, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        auto& gb = t.g(bi).v;
        for (size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i];
            gb[i] -= go[i];
        }
    });
}

Var Tape::mul(Var a, Var b) {
    require_same_shape(v(a.id), v(b.id), "mul");
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    const auto& bv = v(b.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] * bv[i];
    const int ai = a.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, bi, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& av = t.v(ai).v;
        const auto& bv = t.v(bi).v;
        auto& ga = t.g(ai).v;
        auto& gb = t.g(bi).v;
        for (size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i] * bv[i];
            gb[i] += go[i] * av[i];
        }
    });
}

Var Tape::div(Var a, Var b) {
    require_same_shape(v(a.id), v(b.id), "div");
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    const auto& bv = v(b.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] / bv[i];
    const int ai = a.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, bi, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& ov = t.v(oi).v;
        const auto& bv = t.v(bi).v;
        auto& ga = t.g(ai).v;
        auto& gb = t.g(bi).v;
        for (size_t i = 0; i < go.size(); ++i) {
            ga[i] += go[i] / bv[i];
            gb[i] -= go[i] * ov[i] / bv[i];
        }
    });
}

Var Tape::scale(Var a, double c) {
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] * c;
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi, c](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * c;
    });
}

Var Tape::add_const(Var a, double c) {
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = av[i] + c;
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
}

Var Tape::sigmoid(Var a) {
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = 1.0 / (1.0 + std::exp(-av[i]));
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& ov = t.v(oi).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * ov[i] * (1.0 - ov[i]);
    });
}

Var Tape::swish(Var a) {
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) {
        double s = 1.0 / (1.0 + std::exp(-av[i]));
        out.v[i] = av[i] * s;
    }
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& av = t.v(ai).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) {
            double s = 1.0 / (1.0 + std::exp(-av[i]));
            ga[i] += go[i] * s * (1.0 + av[i] * (1.0 - s));
        }
    });
}

Var Tape::exp_op(Var a) {
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::exp(av[i]);
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& ov = t.v(oi).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * ov[i];
    });
}

Var Tape::log_op(Var a) {
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::log(av[i]);
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& av = t.v(ai).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] / av[i];
    });
}

Var Tape::sqrt_op(Var a) {
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::sqrt(av[i]);
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& ov = t.v(oi).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * 0.5 / ov[i];
    });
}

Var Tape::clamp(Var a, double lo, double hi) {
    Tensor out(v(a.id).shape);
    const auto& av = v(a.id).v;
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = std::min(std::max(av[i], lo), hi);
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi, lo, hi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& av = t.v(ai).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i)
            if (av[i] > lo && av[i] < hi) ga[i] += go[i];
    });
}

// ---- reductions ----

Var Tape::sum(Var a) {
    double acc = 0.0;
    for (double x : v(a.id).v) acc += x;
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(scalar_tensor(acc), [ai, oi](Tape& t) {
        double go = t.g(oi).v[0];
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += go;
    });
}

Var Tape::mean(Var a) {
    double acc = 0.0;
    for (double x : v(a.id).v) acc += x;
    double n = static_cast<double>(v(a.id).numel());
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(scalar_tensor(acc / n), [ai, oi, n](Tape& t) {
        double go = t.g(oi).v[0] / n;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < ga.size(); ++i) ga[i] += go;
    });
}

Var Tape::mse(Var a, Var b) {
    require_same_shape(v(a.id), v(b.id), "mse");
    const auto& av = v(a.id).v;
    const auto& bv = v(b.id).v;
    double acc = 0.0;
    for (size_t i = 0; i < av.size(); ++i) {
        double d = av[i] - bv[i];
        acc += d * d;
    }
    double n = static_cast<double>(av.size());
    const int ai = a.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(scalar_tensor(acc / n), [ai, bi, oi, n](Tape& t) {
        double go = t.g(oi).v[0] * 2.0 / n;
        const auto& av = t.v(ai).v;
        const auto& bv = t.v(bi).v;
        auto& ga = t.g(ai).v;
        auto& gb = t.g(bi).v;
        for (size_t i = 0; i < av.size(); ++i) {
            double d = go * (av[i] - bv[i]);
            ga[i] += d;
            gb[i] -= d;
        }
    });
}

// ---- linear algebra ----

Var Tape::matmul(Var a, Var b) {
    const Tensor& A = v(a.id);
    const Tensor& B = v(b.id);
    if (A.rank() != 2 || B.rank() != 2 || A.dim(1) != B.dim(0))
        throw std::invalid_argument("matmul: incompatible shapes");
    int m = A.dim(0), k = A.dim(1), n = B.dim(1);
    Tensor out({m, n});
    for (int i = 0; i < m; ++i)
        for (int l = 0; l < k; ++l) {
            double av = A.v[static_cast<size_t>(i) * k + l];
            if (av == 0.0) continue;
            const double* brow = &B.v[static_cast<size_t>(l) * n];
            double* orow = &out.v[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
        }
    const int ai = a.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, bi, oi, m, k, n](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& A = t.v(ai).v;
        const auto& B = t.v(bi).v;
        auto& ga = t.g(ai).v;
        auto& gb = t.g(bi).v;
        // dA = dC * B^T
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                double gv = go[static_cast<size_t>(i) * n + j];
                if (gv == 0.0) continue;
                const double* brow = &B[static_cast<size_t>(0) * n + j];
                double* garow = &ga[static_cast<size_t>(i) * k];
                for (int l = 0; l < k; ++l) garow[l] += gv * brow[static_cast<size_t>(l) * n];
            }
        // dB = A^T * dC
        for (int i = 0; i < m; ++i)
            for (int l = 0; l < k; ++l) {
                double av = A[static_cast<size_t>(i) * k + l];
                if (av == 0.0) continue;
                const double* gorow = &go[static_cast<size_t>(i) * n];
                double* gbrow = &gb[static_cast<size_t>(l) * n];
                for (int j = 0; j < n; ++j) gbrow[j] += av * gorow[j];
            }
    });
}

Var Tape::transpose(Var a) {
    const Tensor& A = v(a.id);
    if (A.rank() != 2) throw std::invalid_argument("transpose: needs rank 2");
    int r = A.dim(0), c = A.dim(1);
    Tensor out({c, r});
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) out.at2(j, i) = A.at2(i, j);
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi, r, c](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j)
                ga[static_cast<size_t>(i) * c + j] += go[static_cast<size_t>(j) * r + i];
    });
}

Var Tape::softmax_rows(Var a) {
    const Tensor& A = v(a.id);
    if (A.rank() != 2) throw std::invalid_argument("softmax_rows: needs rank 2");
    int r = A.dim(0), c = A.dim(1);
    Tensor out(A.shape);
    for (int i = 0; i < r; ++i) {
        double mx = A.at2(i, 0);
        for (int j = 1; j < c; ++j) mx = std::max(mx, A.at2(i, j));
        double denom = 0.0;
        for (int j = 0; j < c; ++j) {
            double e = std::exp(A.at2(i, j) - mx);
            out.at2(i, j) = e;
            denom += e;
        }
        for (int j = 0; j < c; ++j) out.at2(i, j) /= denom;
    }
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi, r, c](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& ov = t.v(oi).v;
        auto& ga = t.g(ai).v;
        for (int i = 0; i < r; ++i) {
            size_t off = static_cast<size_t>(i) * c;
            double s = 0.0;
            for (int j = 0; j < c; ++j) s += go[off + j] * ov[off + j];
            for (int j = 0; j < c; ++j) ga[off + j] += ov[off + j] * (go[off + j] - s);
        }
    });
}

Var Tape::affine(Var w, Var x, Var b) {
    const Tensor& W = v(w.id);
    const Tensor& X = v(x.id);
    const Tensor& B = v(b.id);
    if (W.rank() != 2 || X.rank() != 1 || B.rank() != 1 || W.dim(1) != X.dim(0) ||
        W.dim(0) != B.dim(0))
        throw std::invalid_argument("affine: incompatible shapes");
    int m = W.dim(0), n = W.dim(1);
    Tensor out({m});
    for (int i = 0; i < m; ++i) {
        double acc = B.v[static_cast<size_t>(i)];
        const double* wrow = &W.v[static_cast<size_t>(i) * n];
        for (int j = 0; j < n; ++j) acc += wrow[j] * X.v[static_cast<size_t>(j)];
        out.v[static_cast<size_t>(i)] = acc;
    }
    const int wi = w.id, xi = x.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [wi, xi, bi, oi, m, n](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& W = t.v(wi).v;
        const auto& X = t.v(xi).v;
        auto& gw = t.g(wi).v;
        auto& gx = t.g(xi).v;
        auto& gb = t.g(bi).v;
        for (int i = 0; i < m; ++i) {
            double gv = go[static_cast<size_t>(i)];
            gb[static_cast<size_t>(i)] += gv;
            if (gv == 0.0) continue;
            const double* wrow = &W[static_cast<size_t>(i) * n];
            double* gwrow = &gw[static_cast<size_t>(i) * n];
            for (int j = 0; j < n; ++j) {
                gwrow[j] += gv * X[static_cast<size_t>(j)];
                gx[static_cast<size_t>(j)] += gv * wrow[j];
            }
        }
    });
}

Var Tape::add_row_vec(Var x, Var b) {
    const Tensor& X = v(x.id);
    const Tensor& B = v(b.id);
    if (X.rank() != 2 || B.rank() != 1 || B.dim(0) != X.dim(1))
        throw std::invalid_argument("add_row_vec: shape mismatch");
    int r = X.dim(0), c = X.dim(1);
    Tensor out(X.shape);
    for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
            out.at2(i, j) = X.at2(i, j) + B.v[static_cast<size_t>(j)];
    const int xi = x.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [xi, bi, oi, r, c](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& gx = t.g(xi).v;
        auto& gb = t.g(bi).v;
        for (int i = 0; i < r; ++i)
            for (int j = 0; j < c; ++j) {
                double gv = go[static_cast<size_t>(i) * c + j];
                gx[static_cast<size_t>(i) * c + j] += gv;
                gb[static_cast<size_t>(j)] += gv;
            }
    });
}

Var Tape::mul_by_scalar(Var x, Var s) {
    const Tensor& X = v(x.id);
    const Tensor& S = v(s.id);
    if (S.numel() != 1) throw std::invalid_argument("mul_by_scalar: scalar must have one element");
    Tensor out(X.shape);
    double sv = S.v[0];
    for (size_t i = 0; i < out.v.size(); ++i) out.v[i] = X.v[i] * sv;
    const int xi = x.id, si = s.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [xi, si, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& xv = t.v(xi).v;
        double sv = t.v(si).v[0];
        auto& gx = t.g(xi).v;
        double acc = 0.0;
        for (size_t i = 0; i < go.size(); ++i) {
            gx[i] += go[i] * sv;
            acc += go[i] * xv[i];
        }
        t.g(si).v[0] += acc;
    });
}

// ---- shape ----

Var Tape::reshape(Var a, std::vector<int> shape) {
    const Tensor& A = v(a.id);
    if (Tensor::count(shape) != A.numel()) throw std::invalid_argument("reshape: numel mismatch");
    Tensor out(shape, A.v);
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
}

Var Tape::concat_ch(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_ch: empty input");
    const Tensor& first = v(xs[0].id);
    std::vector<int> shape = first.shape;
    std::int64_t inner = first.numel() / first.dim(0);
    int ctot = 0;
    for (Var x : xs) {
        const Tensor& X = v(x.id);
        if (X.rank() != first.rank()) throw std::invalid_argument("concat_ch: rank mismatch");
        for (int d = 1; d < X.rank(); ++d)
            if (X.dim(d) != first.dim(d))
                throw std::invalid_argument("concat_ch: trailing dims differ");
        ctot += X.dim(0);
    }
    shape[0] = ctot;
    Tensor out(shape);
    size_t off = 0;
    for (Var x : xs) {
        const auto& xv = v(x.id).v;
        std::copy(xv.begin(), xv.end(), out.v.begin() + static_cast<std::ptrdiff_t>(off));
        off += xv.size();
    }
    std::vector<int> ids;
    std::vector<size_t> sizes;
    for (Var x : xs) {
        ids.push_back(x.id);
        sizes.push_back(v(x.id).v.size());
    }
    (void)inner;
    const int oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ids, sizes, oi](Tape& t) {
        const auto& go = t.g(oi).v;
        size_t off = 0;
        for (size_t k = 0; k < ids.size(); ++k) {
            auto& ga = t.g(ids[k]).v;
            for (size_t i = 0; i < sizes[k]; ++i) ga[i] += go[off + i];
            off += sizes[k];
        }
    });
}

Var Tape::slice_ch(Var a, int start, int count) {
    const Tensor& A = v(a.id);
    if (start < 0 || count <= 0 || start + count > A.dim(0))
        throw std::invalid_argument("slice_ch: range out of bounds");
    size_t inner = static_cast<size_t>(A.numel() / A.dim(0));
    std::vector<int> shape = A.shape;
    shape[0] = count;
    Tensor out(shape);
    size_t off = static_cast<size_t>(start) * inner;
    std::copy(A.v.begin() + static_cast<std::ptrdiff_t>(off),
              A.v.begin() + static_cast<std::ptrdiff_t>(off + out.v.size()), out.v.begin());
    const int ai = a.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi, off](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        for (size_t i = 0; i < go.size(); ++i) ga[off + i] += go[i];
    });
}

// ---- image ops ----

Var Tape::conv2d(Var x, Var w, Var b, int stride, int pad) {
    const Tensor& X = v(x.id);
    const Tensor& W = v(w.id);
    const Tensor& B = v(b.id);
    if (X.rank() != 3 || W.rank() != 4 || B.rank() != 1)
        throw std::invalid_argument("conv2d: bad ranks");
    int ci = X.dim(0), h = X.dim(1), wdt = X.dim(2);
    int co = W.dim(0), kh = W.dim(2), kw = W.dim(3);
    if (W.dim(1) != ci || B.dim(0) != co) throw std::invalid_argument("conv2d: channel mismatch");
    if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
    int ho = (h + 2 * pad - kh) / stride + 1;
    int wo = (wdt + 2 * pad - kw) / stride + 1;
    if (ho < 1 || wo < 1) throw std::invalid_argument("conv2d: output collapses");

    // valid output span for one kernel tap, so the hot loops run branch free
    auto tap_span = [stride, pad](int k, int in_len, int out_len, int& lo, int& hi) {
        int shift = pad - k;
        lo = shift <= 0 ? 0 : (shift + stride - 1) / stride;
        int top = in_len - 1 + shift;
        hi = top < 0 ? 0 : std::min(out_len, top / stride + 1);
    };

    Tensor out({co, ho, wo});
    for (int o = 0; o < co; ++o) {
        double bias = B.v[static_cast<size_t>(o)];
        double* oplane = &out.v[static_cast<size_t>(o) * ho * wo];
        for (int i = 0; i < ho * wo; ++i) oplane[i] = bias;
        for (int c = 0; c < ci; ++c) {
            const double* xplane = &X.v[static_cast<size_t>(c) * h * wdt];
            for (int ky = 0; ky < kh; ++ky)
                for (int kx = 0; kx < kw; ++kx) {
                    double wv = W.v[((static_cast<size_t>(o) * ci + c) * kh + ky) * kw + kx];
                    if (wv == 0.0) continue;
                    int y0, y1, x0, x1;
                    tap_span(ky, h, ho, y0, y1);
                    tap_span(kx, wdt, wo, x0, x1);
                    for (int y = y0; y < y1; ++y) {
                        const double* xrow =
                            &xplane[static_cast<size_t>(y * stride - pad + ky) * wdt];
                        double* orow = &oplane[static_cast<size_t>(y) * wo];
                        if (stride == 1) {
                            const double* xr = xrow + (x0 - pad + kx);
                            for (int i = 0; i < x1 - x0; ++i) orow[x0 + i] += wv * xr[i];
                        } else {
                            for (int xo2 = x0; xo2 < x1; ++xo2)
                                orow[xo2] += wv * xrow[xo2 * stride - pad + kx];
                        }
                    }
                }
        }
    }
    const int xi = x.id, wi = w.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [xi, wi, bi, oi, ci, h, wdt, co, kh, kw, ho, wo, stride,
                                 pad](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& X = t.v(xi).v;
        const auto& W = t.v(wi).v;
        auto& gx = t.g(xi).v;
        auto& gw = t.g(wi).v;
        auto& gb = t.g(bi).v;
        for (int o = 0; o < co; ++o) {
            const double* goplane = &go[static_cast<size_t>(o) * ho * wo];
            double gbacc = 0.0;
            for (int i = 0; i < ho * wo; ++i) gbacc += goplane[i];
            gb[static_cast<size_t>(o)] += gbacc;
            for (int c = 0; c < ci; ++c) {
                const double* xplane = &X[static_cast<size_t>(c) * h * wdt];
                double* gxplane = &gx[static_cast<size_t>(c) * h * wdt];
                for (int ky = 0; ky < kh; ++ky)
                    for (int kx = 0; kx < kw; ++kx) {
                        size_t widx = ((static_cast<size_t>(o) * ci + c) * kh + ky) * kw + kx;
                        double wv = W[widx];
                        double gwacc = 0.0;
                        int shift_y = pad - ky, shift_x = pad - kx;
                        int y0 = shift_y <= 0 ? 0 : (shift_y + stride - 1) / stride;
                        int ty = h - 1 + shift_y;
                        int y1 = ty < 0 ? 0 : std::min(ho, ty / stride + 1);
                        int x0 = shift_x <= 0 ? 0 : (shift_x + stride - 1) / stride;
                        int tx = wdt - 1 + shift_x;
                        int x1 = tx < 0 ? 0 : std::min(wo, tx / stride + 1);
                        for (int y = y0; y < y1; ++y) {
                            int iy = y * stride - shift_y;
                            const double* xrow = &xplane[static_cast<size_t>(iy) * wdt];
                            double* gxrow = &gxplane[static_cast<size_t>(iy) * wdt];
                            const double* gorow = &goplane[static_cast<size_t>(y) * wo];
                            if (stride == 1) {
                                const double* xr = xrow - shift_x;
                                double* gxr = gxrow - shift_x;
                                for (int xo2 = x0; xo2 < x1; ++xo2)
                                    gwacc += gorow[xo2] * xr[xo2];
                                for (int xo2 = x0; xo2 < x1; ++xo2)
                                    gxr[xo2] += gorow[xo2] * wv;
                            } else {
                                for (int xo2 = x0; xo2 < x1; ++xo2) {
                                    double gv = gorow[xo2];
                                    int ix = xo2 * stride - shift_x;
                                    gwacc += gv * xrow[ix];
                                    gxrow[ix] += gv * wv;
                                }
                            }
                        }
                        gw[widx] += gwacc;
                    }
            }
        }
    });
}

Var Tape::group_norm(Var x, Var gamma, Var beta, int groups, double eps) {
    const Tensor& X = v(x.id);
    const Tensor& G = v(gamma.id);
    const Tensor& Bt = v(beta.id);
    if (X.rank() != 3) throw std::invalid_argument("group_norm: needs {c,h,w}");
    int c = X.dim(0), h = X.dim(1), w = X.dim(2);
    if (groups < 1 || c % groups != 0) throw std::invalid_argument("group_norm: bad group count");
    if (G.rank() != 1 || G.dim(0) != c || Bt.rank() != 1 || Bt.dim(0) != c)
        throw std::invalid_argument("group_norm: bad affine shapes");
    int cpg = c / groups;
    size_t plane = static_cast<size_t>(h) * w;
    size_t gsize = static_cast<size_t>(cpg) * plane;

    Tensor out(X.shape);
    std::vector<double> xhat(X.v.size());
    std::vector<double> inv_std(static_cast<size_t>(groups));
    for (int g = 0; g < groups; ++g) {
        size_t off = static_cast<size_t>(g) * gsize;
        double mean = 0.0;
        for (size_t i = 0; i < gsize; ++i) mean += X.v[off + i];
        mean /= static_cast<double>(gsize);
        double var = 0.0;
        for (size_t i = 0; i < gsize; ++i) {
            double d = X.v[off + i] - mean;
            var += d * d;
        }
        var /= static_cast<double>(gsize);
        double is = 1.0 / std::sqrt(var + eps);
        inv_std[static_cast<size_t>(g)] = is;
        for (size_t i = 0; i < gsize; ++i) xhat[off + i] = (X.v[off + i] - mean) * is;
    }
    for (int ch = 0; ch < c; ++ch) {
        double gm = G.v[static_cast<size_t>(ch)];
        double bt = Bt.v[static_cast<size_t>(ch)];
        size_t off = static_cast<size_t>(ch) * plane;
        for (size_t i = 0; i < plane; ++i) out.v[off + i] = gm * xhat[off + i] + bt;
    }
    const int xi = x.id, gi = gamma.id, bi = beta.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [xi, gi, bi, oi, c, groups, cpg, plane, gsize, xhat,
                                 inv_std](Tape& t) {
        const auto& go = t.g(oi).v;
        const auto& G = t.v(gi).v;
        auto& gx = t.g(xi).v;
        auto& gg = t.g(gi).v;
        auto& gb = t.g(bi).v;
        for (int ch = 0; ch < c; ++ch) {
            size_t off = static_cast<size_t>(ch) * plane;
            double dgm = 0.0, dbt = 0.0;
            for (size_t i = 0; i < plane; ++i) {
                dgm += go[off + i] * xhat[off + i];
                dbt += go[off + i];
            }
            gg[static_cast<size_t>(ch)] += dgm;
            gb[static_cast<size_t>(ch)] += dbt;
        }
        std::vector<double> dxhat(go.size());
        for (int ch = 0; ch < c; ++ch) {
            size_t off = static_cast<size_t>(ch) * plane;
            double gm = G[static_cast<size_t>(ch)];
            for (size_t i = 0; i < plane; ++i) dxhat[off + i] = go[off + i] * gm;
        }
        for (int g2 = 0; g2 < groups; ++g2) {
            size_t off = static_cast<size_t>(g2) * gsize;
            double m1 = 0.0, m2 = 0.0;
            for (size_t i = 0; i < gsize; ++i) {
                m1 += dxhat[off + i];
                m2 += dxhat[off + i] * xhat[off + i];
            }
            m1 /= static_cast<double>(gsize);
            m2 /= static_cast<double>(gsize);
            double is = inv_std[static_cast<size_t>(g2)];
            for (size_t i = 0; i < gsize; ++i)
                gx[off + i] += is * (dxhat[off + i] - m1 - xhat[off + i] * m2);
        }
    });
}

Var Tape::upsample2x(Var x) {
    const Tensor& X = v(x.id);
    if (X.rank() != 3) throw std::invalid_argument("upsample2x: needs {c,h,w}");
    int c = X.dim(0), h = X.dim(1), w = X.dim(2);
    Tensor out({c, 2 * h, 2 * w});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < 2 * h; ++y)
            for (int xph = 0; xph < 2 * w; ++xph)
                out.at3(ch, y, xph) = X.at3(ch, y / 2, xph / 2);
    const int ai = x.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi, c, h, w](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < 2 * h; ++y)
                for (int xph = 0; xph < 2 * w; ++xph)
                    ga[(static_cast<size_t>(ch) * h + y / 2) * w + xph / 2] +=
                        go[(static_cast<size_t>(ch) * 2 * h + y) * 2 * w + xph];
    });
}

Var Tape::avgpool2x(Var x) {
    const Tensor& X = v(x.id);
    if (X.rank() != 3) throw std::invalid_argument("avgpool2x: needs {c,h,w}");
    int c = X.dim(0), h = X.dim(1), w = X.dim(2);
    if (h % 2 != 0 || w % 2 != 0) throw std::invalid_argument("avgpool2x: odd spatial size");
    Tensor out({c, h / 2, w / 2});
    for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h / 2; ++y)
            for (int xph = 0; xph < w / 2; ++xph)
                out.at3(ch, y, xph) =
                    0.25 * (X.at3(ch, 2 * y, 2 * xph) + X.at3(ch, 2 * y, 2 * xph + 1) +
                            X.at3(ch, 2 * y + 1, 2 * xph) + X.at3(ch, 2 * y + 1, 2 * xph + 1));
    const int ai = x.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi, c, h, w](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        int ho = h / 2, wo = w / 2;
        for (int ch = 0; ch < c; ++ch)
            for (int y = 0; y < ho; ++y)
                for (int xph = 0; xph < wo; ++xph) {
                    double gv = 0.25 * go[(static_cast<size_t>(ch) * ho + y) * wo + xph];
                    ga[(static_cast<size_t>(ch) * h + 2 * y) * w + 2 * xph] += gv;
                    ga[(static_cast<size_t>(ch) * h + 2 * y) * w + 2 * xph + 1] += gv;
                    ga[(static_cast<size_t>(ch) * h + 2 * y + 1) * w + 2 * xph] += gv;
                    ga[(static_cast<size_t>(ch) * h + 2 * y + 1) * w + 2 * xph + 1] += gv;
                }
    });
}

Var Tape::global_avg_pool(Var x) {
    const Tensor& X = v(x.id);
    if (X.rank() != 3) throw std::invalid_argument("global_avg_pool: needs {c,h,w}");
    int c = X.dim(0);
    size_t plane = static_cast<size_t>(X.dim(1)) * X.dim(2);
    Tensor out({c});
    for (int ch = 0; ch < c; ++ch) {
        double acc = 0.0;
        for (size_t i = 0; i < plane; ++i) acc += X.v[static_cast<size_t>(ch) * plane + i];
        out.v[static_cast<size_t>(ch)] = acc / static_cast<double>(plane);
    }
    const int ai = x.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [ai, oi, c, plane](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& ga = t.g(ai).v;
        for (int ch = 0; ch < c; ++ch) {
            double gv = go[static_cast<size_t>(ch)] / static_cast<double>(plane);
            for (size_t i = 0; i < plane; ++i) ga[static_cast<size_t>(ch) * plane + i] += gv;
        }
    });
}

Var Tape::add_channel_bias(Var x, Var b) {
    const Tensor& X = v(x.id);
    const Tensor& B = v(b.id);
    if (X.rank() != 3 || B.rank() != 1 || B.dim(0) != X.dim(0))
        throw std::invalid_argument("add_channel_bias: shape mismatch");
    int c = X.dim(0);
    size_t plane = static_cast<size_t>(X.dim(1)) * X.dim(2);
    Tensor out(X.shape);
    for (int ch = 0; ch < c; ++ch) {
        double bv = B.v[static_cast<size_t>(ch)];
        for (size_t i = 0; i < plane; ++i)
            out.v[static_cast<size_t>(ch) * plane + i] =
                X.v[static_cast<size_t>(ch) * plane + i] + bv;
    }
    const int xi = x.id, bi = b.id, oi = static_cast<int>(nodes_.size());
    return push(std::move(out), [xi, bi, oi, c, plane](Tape& t) {
        const auto& go = t.g(oi).v;
        auto& gx = t.g(xi).v;
        auto& gb = t.g(bi).v;
        for (int ch = 0; ch < c; ++ch) {
            double acc = 0.0;
            for (size_t i = 0; i < plane; ++i) {
                double gv = go[static_cast<size_t>(ch) * plane + i];
                gx[static_cast<size_t>(ch) * plane + i] += gv;
                acc += gv;
            }
            gb[static_cast<size_t>(ch)] += acc;
        }
    });
}

}  // namespace xr2vol
