#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "cyto/common.hpp"
#include "cyto/rng.hpp"

namespace cyto {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

// Dense row-major tensor with owned storage.
template <class S>
struct Tensor {
    Shape shape;
    std::vector<S> v;

    Tensor() = default;
    explicit Tensor(Shape sh) : shape(std::move(sh)), v(shape_numel(shape), S(0)) {}
    Tensor(Shape sh, std::vector<S> data) : shape(std::move(sh)), v(std::move(data)) {
        if (int64_t(v.size()) != shape_numel(shape))
            throw InvalidInput("tensor data size does not match shape " + shape_str(shape));
    }

    int64_t numel() const { return int64_t(v.size()); }
    int64_t dim(size_t i) const { return shape[i]; }
    size_t ndim() const { return shape.size(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    S* data() { return v.data(); }
    const S* data() const { return v.data(); }

    S& operator[](int64_t i) { return v[size_t(i)]; }
    const S& operator[](int64_t i) const { return v[size_t(i)]; }

    // 2-D / 3-D / 4-D element access.
    S& at(int64_t i, int64_t j) { return v[size_t(i * shape[1] + j)]; }
    const S& at(int64_t i, int64_t j) const { return v[size_t(i * shape[1] + j)]; }
    S& at(int64_t c, int64_t y, int64_t x) {
        return v[size_t((c * shape[1] + y) * shape[2] + x)];
    }
    const S& at(int64_t c, int64_t y, int64_t x) const {
        return v[size_t((c * shape[1] + y) * shape[2] + x)];
    }
    S& at(int64_t a, int64_t b, int64_t y, int64_t x) {
        return v[size_t(((a * shape[1] + b) * shape[2] + y) * shape[3] + x)];
    }

    static Tensor zeros(Shape sh) { return Tensor(std::move(sh)); }

    static Tensor full(Shape sh, S value) {
        Tensor t(std::move(sh));
        std::fill(t.v.begin(), t.v.end(), value);
        return t;
    }

    static Tensor randn(Shape sh, Rng& rng, S stddev = S(1)) {
        Tensor t(std::move(sh));
        for (auto& x : t.v) x = S(rng.normal()) * stddev;
        return t;
    }

    static Tensor uniform(Shape sh, Rng& rng, S lo, S hi) {
        Tensor t(std::move(sh));
        for (auto& x : t.v) x = S(rng.uniform(double(lo), double(hi)));
        return t;
    }

    template <class T2>
    Tensor<T2> cast() const {
        Tensor<T2> out;
        out.shape = shape;
        out.v.resize(v.size());
        for (size_t i = 0; i < v.size(); ++i) out.v[i] = T2(v[i]);
        return out;
    }

    Tensor reshaped(Shape sh) const {
        if (shape_numel(sh) != numel())
            throw InvalidInput("reshape " + shape_str(shape) + " -> " + shape_str(sh) +
                               " changes element count");
        Tensor out = *this;
        out.shape = std::move(sh);
        return out;
    }

    bool all_finite() const {
        for (S x : v)
            if (!std::isfinite(double(x))) return false;
        return true;
    }

    S min() const { return *std::min_element(v.begin(), v.end()); }
    S max() const { return *std::max_element(v.begin(), v.end()); }

    double sum() const {
        double s = 0;
        for (S x : v) s += double(x);
        return s;
    }
    double mean() const { return numel() ? sum() / double(numel()) : 0.0; }
};

template <class S>
using EigenMat = Eigen::Matrix<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class S>
using MatMap = Eigen::Map<EigenMat<S>>;
template <class S>
using ConstMatMap = Eigen::Map<const EigenMat<S>>;

// C[m,n] = A[m,k] * B[k,n]
template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[0])
        throw InvalidInput("matmul shape mismatch " + shape_str(a.shape) + " x " +
                           shape_str(b.shape));
    Tensor<S> c({a.shape[0], b.shape[1]});
    MatMap<S>(c.data(), c.shape[0], c.shape[1]).noalias() =
        ConstMatMap<S>(a.data(), a.shape[0], a.shape[1]) *
        ConstMatMap<S>(b.data(), b.shape[0], b.shape[1]);
    return c;
}

// C[m,n] = A[m,k] * B[n,k]^T
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape[1] != b.shape[1])
        throw InvalidInput("matmul_nt shape mismatch " + shape_str(a.shape) + " x " +
                           shape_str(b.shape));
    Tensor<S> c({a.shape[0], b.shape[0]});
    MatMap<S>(c.data(), c.shape[0], c.shape[1]).noalias() =
        ConstMatMap<S>(a.data(), a.shape[0], a.shape[1]) *
        ConstMatMap<S>(b.data(), b.shape[0], b.shape[1]).transpose();
    return c;
}

// C[k,n] = A[m,k]^T * B[m,n]
template <class S>
Tensor<S> matmul_tn(const Tensor<S>& a, const Tensor<S>& b) {
    if (a.ndim() != 2 || b.ndim() != 2 || a.shape[0] != b.shape[0])
        throw InvalidInput("matmul_tn shape mismatch " + shape_str(a.shape) + " x " +
                           shape_str(b.shape));
    Tensor<S> c({a.shape[1], b.shape[1]});
    MatMap<S>(c.data(), c.shape[0], c.shape[1]).noalias() =
        ConstMatMap<S>(a.data(), a.shape[0], a.shape[1]).transpose() *
        ConstMatMap<S>(b.data(), b.shape[0], b.shape[1]);
    return c;
}

template <class S>
void accumulate(Tensor<S>& dst, const Tensor<S>& src) {
    if (!dst.same_shape(src)) throw InvalidInput("accumulate shape mismatch");
    for (int64_t i = 0; i < dst.numel(); ++i) dst.v[i] += src.v[i];
}

template <class S>
double max_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw InvalidInput("max_abs_diff shape mismatch");
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i)
        m = std::max(m, std::abs(double(a.v[i]) - double(b.v[i])));
    return m;
}

template <class S>
double mean_abs_diff(const Tensor<S>& a, const Tensor<S>& b) {
    if (!a.same_shape(b)) throw InvalidInput("mean_abs_diff shape mismatch");
    double m = 0;
    for (int64_t i = 0; i < a.numel(); ++i) m += std::abs(double(a.v[i]) - double(b.v[i]));
    return a.numel() ? m / double(a.numel()) : 0.0;
}

using TensorF = Tensor<real>;
using TensorD = Tensor<double>;

}  // namespace cyto
