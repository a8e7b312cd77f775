#ifndef XR2VOL_TENSOR_HPP
#define XR2VOL_TENSOR_HPP

#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

namespace xr2vol {

// Dense row-major tensor. Shape conventions used throughout:
//   {n}        vectors / scalars (n == 1)
//   {r, c}     matrices
//   {c, h, w}  image planes and latent grids
//   {o, c, kh, kw}  conv kernels
template <class T>
struct TensorT {
    std::vector<int> shape;
    std::vector<T> v;

    TensorT() = default;
    explicit TensorT(std::vector<int> s) : shape(std::move(s)), v(count(shape), T(0)) {}
    TensorT(std::vector<int> s, std::vector<T> data) : shape(std::move(s)), v(std::move(data)) {
        if (static_cast<std::int64_t>(v.size()) != count(shape))
            throw std::invalid_argument("tensor: data size does not match shape");
    }

    static std::int64_t count(const std::vector<int>& s) {
        std::int64_t n = 1;
        for (int d : s) {
            if (d <= 0) throw std::invalid_argument("tensor: nonpositive dimension");
            n *= d;
        }
        return n;
    }

    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }
    int dim(int i) const { return shape.at(static_cast<size_t>(i)); }
    int rank() const { return static_cast<int>(shape.size()); }

    // {c,h,w} accessors
    T& at3(int c, int y, int x) {
        return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    T at3(int c, int y, int x) const {
        return v[(static_cast<size_t>(c) * shape[1] + y) * shape[2] + x];
    }
    // {r,c} accessors
    T& at2(int r, int c) { return v[static_cast<size_t>(r) * shape[1] + c]; }
    T at2(int r, int c) const { return v[static_cast<size_t>(r) * shape[1] + c]; }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }
};

using Tensor = TensorT<double>;
using TensorF = TensorT<float>;

inline Tensor tensor1(int n) { return Tensor({n}); }
inline Tensor tensor2(int r, int c) { return Tensor({r, c}); }
inline Tensor tensor3(int c, int h, int w) { return Tensor({c, h, w}); }
inline Tensor scalar_tensor(double x) { return Tensor({1}, {x}); }

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* where) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch");
}

std::string shape_str(const std::vector<int>& s);
bool all_finite(const Tensor& t);

// FNV-1a 64-bit, used for file checksums and parameter-freeze assertions.
std::uint64_t fnv1a64(const void* data, std::size_t len);
std::string fnv1a64_hex(const void* data, std::size_t len);

}  // namespace xr2vol

#endif
