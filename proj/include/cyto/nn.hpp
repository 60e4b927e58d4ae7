#pragma once

// Small neural-net layer library over the autodiff engine: a named parameter
// registry, the layers the denoiser and heads are assembled from, and Adam.

#include <map>
#include <string>
#include <unordered_map>

#include "cyto/autodiff.hpp"
#include "cyto/rng.hpp"

namespace cyto {

// Named parameter registry. Names are hierarchical ("down0.attn.wq.w") and
// define both the serialization layout and the optimizer state keys.
template <class S>
struct ParamStore {
    std::vector<std::pair<std::string, Var<S>>> items;
    std::unordered_map<std::string, size_t> index;

    Var<S> add(const std::string& name, Tensor<S> t, bool trainable = true) {
        if (index.count(name)) throw InvalidInput("duplicate parameter: " + name);
        Var<S> p = leaf<S>(std::move(t), false);
        p->requires_grad = trainable;  // params outlive NoGrad scopes
        index[name] = items.size();
        items.emplace_back(name, p);
        return p;
    }
    bool has(const std::string& name) const { return index.count(name) != 0; }
    Var<S> get(const std::string& name) const {
        auto it = index.find(name);
        if (it == index.end()) throw InvalidInput("unknown parameter: " + name);
        return items[it->second].second;
    }
    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [_, p] : items) n += p->val.numel();
        return n;
    }
    int64_t trainable_params() const {
        int64_t n = 0;
        for (const auto& [_, p] : items)
            if (p->requires_grad) n += p->val.numel();
        return n;
    }
    void zero_grad() {
        for (auto& [_, p] : items) p->zero_grad();
    }
    void freeze_all() {
        for (auto& [_, p] : items) p->requires_grad = false;
    }
    void set_trainable(const std::string& name, bool trainable) {
        get(name)->requires_grad = trainable;
    }
};

// ---------------------------------------------------------------------------
// Initializers
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> gaussian_init(Rng& rng, const Shape& sh, double stddev) {
    Tensor<S> t(sh);
    for (auto& x : t.v) x = S(rng.normal() * stddev);
    return t;
}

// Kaiming-style fan-in scaling for linear/conv weights.
template <class S>
Tensor<S> fanin_init(Rng& rng, const Shape& sh) {
    int64_t fan_in = 1;
    for (size_t i = 1; i < sh.size(); ++i) fan_in *= sh[i];
    return gaussian_init<S>(rng, sh, std::sqrt(1.0 / double(fan_in)));
}

// Rows made mutually orthonormal by Gram-Schmidt on Gaussian draws.
template <class S>
Tensor<S> orthogonal_rows_init(Rng& rng, int64_t rows, int64_t cols) {
    if (rows > cols) throw InvalidInput("orthogonal_rows_init needs rows <= cols");
    Tensor<double> m({rows, cols});
    for (auto& x : m.v) x = rng.normal();
    for (int64_t i = 0; i < rows; ++i) {
        double* ri = m.data() + i * cols;
        for (int64_t j = 0; j < i; ++j) {
            const double* rj = m.data() + j * cols;
            double dot = 0;
            for (int64_t k = 0; k < cols; ++k) dot += ri[k] * rj[k];
            for (int64_t k = 0; k < cols; ++k) ri[k] -= dot * rj[k];
        }
        double norm = 0;
        for (int64_t k = 0; k < cols; ++k) norm += ri[k] * ri[k];
        norm = std::sqrt(norm);
        if (norm < 1e-9) throw InvalidInput("orthogonal_rows_init degenerate draw");
        for (int64_t k = 0; k < cols; ++k) ri[k] /= norm;
    }
    return m.template cast<S>();
}

// ---------------------------------------------------------------------------
// Layers
// ---------------------------------------------------------------------------

template <class S>
struct LinearLayer {
    Var<S> w;  // [out, in]
    Var<S> b;  // [out] or null

    LinearLayer() = default;
    LinearLayer(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t out, Rng& rng,
                bool bias = true) {
        w = ps.add(name + ".w", fanin_init<S>(rng, {out, in}));
        if (bias) b = ps.add(name + ".b", Tensor<S>::zeros({out}));
    }
    Var<S> forward(const Var<S>& x) const { return linear(x, w, b); }
    int64_t in_features() const { return w->val.shape[1]; }
    int64_t out_features() const { return w->val.shape[0]; }
};

template <class S>
struct Conv2dLayer {
    Var<S> w;  // [out, in, k, k]
    Var<S> b;  // [out]
    int64_t stride = 1, pad = 1;

    Conv2dLayer() = default;
    Conv2dLayer(ParamStore<S>& ps, const std::string& name, int64_t in, int64_t out, int64_t k,
                Rng& rng, int64_t stride_ = 1, int64_t pad_ = 1)
        : stride(stride_), pad(pad_) {
        w = ps.add(name + ".w", fanin_init<S>(rng, {out, in, k, k}));
        b = ps.add(name + ".b", Tensor<S>::zeros({out}));
    }
    Var<S> forward(const Var<S>& x) const { return conv2d(x, w, b, stride, pad); }
};

template <class S>
struct GroupNormLayer {
    Var<S> gamma, beta;
    int64_t groups = 8;

    GroupNormLayer() = default;
    GroupNormLayer(ParamStore<S>& ps, const std::string& name, int64_t channels,
                   int64_t groups_ = 8)
        : groups(groups_) {
        gamma = ps.add(name + ".g", Tensor<S>::full({channels}, S(1)));
        beta = ps.add(name + ".b", Tensor<S>::zeros({channels}));
    }
    Var<S> forward(const Var<S>& x) const { return group_norm(x, groups, gamma, beta); }
};

template <class S>
struct LayerNormLayer {
    Var<S> gamma, beta;

    LayerNormLayer() = default;
    LayerNormLayer(ParamStore<S>& ps, const std::string& name, int64_t dim) {
        gamma = ps.add(name + ".g", Tensor<S>::full({dim}, S(1)));
        beta = ps.add(name + ".b", Tensor<S>::zeros({dim}));
    }
    Var<S> forward(const Var<S>& x) const { return layer_norm(x, gamma, beta); }
};

// Single-head scaled dot-product attention between row-major token matrices.
template <class S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v) {
    int64_t d = q->val.shape[1];
    Var<S> scores = scale(vmatmul_nt(q, k), S(1.0 / std::sqrt(double(d))));
    return vmatmul(softmax_rows(scores), v);
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

template <class S>
struct Adam {
    double lr = 1e-4, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    int64_t step_count = 0;
    std::map<std::string, std::pair<Tensor<S>, Tensor<S>>> state;  // name -> (m, v)

    explicit Adam(double lr_ = 1e-4) : lr(lr_) {}

    void step(ParamStore<S>& ps) {
        ++step_count;
        double bc1 = 1.0 - std::pow(beta1, double(step_count));
        double bc2 = 1.0 - std::pow(beta2, double(step_count));
        for (auto& [name, p] : ps.items) {
            if (!p->requires_grad || p->grad.numel() != p->val.numel()) continue;
            auto it = state.find(name);
            if (it == state.end())
                it = state.emplace(name, std::make_pair(Tensor<S>::zeros(p->val.shape),
                                                        Tensor<S>::zeros(p->val.shape)))
                         .first;
            Tensor<S>& m = it->second.first;
            Tensor<S>& v = it->second.second;
            for (int64_t i = 0; i < p->val.numel(); ++i) {
                double g = double(p->grad.v[i]);
                double mi = beta1 * double(m.v[i]) + (1.0 - beta1) * g;
                double vi = beta2 * double(v.v[i]) + (1.0 - beta2) * g * g;
                m.v[i] = S(mi);
                v.v[i] = S(vi);
                p->val.v[i] -= S(lr * (mi / bc1) / (std::sqrt(vi / bc2) + eps));
            }
        }
    }
};

}  // namespace cyto
