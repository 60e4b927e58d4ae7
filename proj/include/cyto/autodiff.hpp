#pragma once

// Reverse-mode automatic differentiation over Tensor<S>. Define-by-run:
// every op builds a Node holding the result, links to parent nodes, and
// registers a closure that accumulates into parents' gradients. Gradient
// tracking follows requires_grad; wrap inference in NoGradGuard to skip
// graph construction entirely.

#include <functional>
#include <memory>
#include <unordered_set>
#include <vector>

#include "cyto/tensor.hpp"

namespace cyto {

namespace detail {
inline int64_t next_node_id() {
    static thread_local int64_t counter = 0;
    return ++counter;
}
inline bool& grad_mode() {
    static thread_local bool enabled = true;
    return enabled;
}
}  // namespace detail

struct NoGradGuard {
    bool prev;
    NoGradGuard() : prev(detail::grad_mode()) { detail::grad_mode() = false; }
    ~NoGradGuard() { detail::grad_mode() = prev; }
};

template <class S>
struct Node {
    Tensor<S> val;
    Tensor<S> grad;  // allocated on first accumulation
    bool requires_grad = false;
    int64_t id = 0;
    std::vector<std::shared_ptr<Node<S>>> parents;
    std::function<void(Node<S>&)> backward_fn;

    void ensure_grad() {
        if (grad.numel() != val.numel()) grad = Tensor<S>::zeros(val.shape);
    }
    void zero_grad() {
        if (grad.numel()) std::fill(grad.v.begin(), grad.v.end(), S(0));
    }
};

template <class S>
using Var = std::shared_ptr<Node<S>>;

template <class S>
Var<S> constant(Tensor<S> t) {
    auto n = std::make_shared<Node<S>>();
    n->val = std::move(t);
    n->id = detail::next_node_id();
    return n;
}

template <class S>
Var<S> leaf(Tensor<S> t, bool requires_grad = true) {
    auto n = std::make_shared<Node<S>>();
    n->val = std::move(t);
    n->requires_grad = requires_grad && detail::grad_mode();
    n->id = detail::next_node_id();
    return n;
}

// Builds a result node. Parent links and the backward closure are recorded
// only when some parent needs gradients and grad mode is on.
template <class S>
Var<S> make_op(Tensor<S> val, std::vector<Var<S>> parents,
               std::function<void(Node<S>&)> backward_fn) {
    auto n = std::make_shared<Node<S>>();
    n->val = std::move(val);
    n->id = detail::next_node_id();
    if (detail::grad_mode()) {
        for (const auto& p : parents)
            if (p->requires_grad) {
                n->requires_grad = true;
                break;
            }
        if (n->requires_grad) {
            n->parents = std::move(parents);
            n->backward_fn = std::move(backward_fn);
        }
    }
    return n;
}

template <class S>
void add_into_grad(const Var<S>& p, const Tensor<S>& g) {
    if (!p->requires_grad) return;
    p->ensure_grad();
    accumulate(p->grad, g);
}

// Runs backpropagation from a scalar root. Nodes are visited in reverse
// creation order, which is a valid topological order for define-by-run graphs.
template <class S>
void backward(const Var<S>& root) {
    if (root->val.numel() != 1) throw InvalidInput("backward root must be scalar");
    if (!root->requires_grad) return;
    root->ensure_grad();
    root->grad.v[0] = S(1);

    std::vector<Node<S>*> order;
    std::unordered_set<Node<S>*> seen;
    std::vector<Node<S>*> stack{root.get()};
    seen.insert(root.get());
    while (!stack.empty()) {
        Node<S>* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents)
            if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
    std::sort(order.begin(), order.end(),
              [](const Node<S>* a, const Node<S>* b) { return a->id > b->id; });
    for (Node<S>* n : order)
        if (n->backward_fn) n->backward_fn(*n);
}

// ---------------------------------------------------------------------------
// Elementwise and scalar ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
    if (!a->val.same_shape(b->val)) throw InvalidInput("add shape mismatch");
    Tensor<S> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] += b->val.v[i];
    return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& self) {
        add_into_grad(a, self.grad);
        add_into_grad(b, self.grad);
    });
}

template <class S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
    if (!a->val.same_shape(b->val)) throw InvalidInput("sub shape mismatch");
    Tensor<S> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] -= b->val.v[i];
    return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& self) {
        add_into_grad(a, self.grad);
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i) b->grad.v[i] -= self.grad.v[i];
        }
    });
}

template <class S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
    if (!a->val.same_shape(b->val)) throw InvalidInput("mul shape mismatch");
    Tensor<S> out = a->val;
    for (int64_t i = 0; i < out.numel(); ++i) out.v[i] *= b->val.v[i];
    return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                a->grad.v[i] += self.grad.v[i] * b->val.v[i];
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                b->grad.v[i] += self.grad.v[i] * a->val.v[i];
        }
    });
}

template <class S>
Var<S> scale(const Var<S>& a, S s) {
    Tensor<S> out = a->val;
    for (auto& x : out.v) x *= s;
    return make_op<S>(std::move(out), {a}, [a, s](Node<S>& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) a->grad.v[i] += self.grad.v[i] * s;
    });
}

// y = x * g where g is a single-element Var (learnable scalar gate).
template <class S>
Var<S> scale_by(const Var<S>& x, const Var<S>& g) {
    if (g->val.numel() != 1) throw InvalidInput("scale_by expects scalar gate");
    S s = g->val.v[0];
    Tensor<S> out = x->val;
    for (auto& e : out.v) e *= s;
    return make_op<S>(std::move(out), {x, g}, [x, g, s](Node<S>& self) {
        if (x->requires_grad) {
            x->ensure_grad();
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                x->grad.v[i] += self.grad.v[i] * s;
        }
        if (g->requires_grad) {
            g->ensure_grad();
            double acc = 0;
            for (int64_t i = 0; i < self.grad.numel(); ++i)
                acc += double(self.grad.v[i]) * double(x->val.v[i]);
            g->grad.v[0] += S(acc);
        }
    });
}

template <class S, class Fwd, class Dfn>
Var<S> unary_op(const Var<S>& a, Fwd f, Dfn df) {
    Tensor<S> out = a->val;
    for (auto& x : out.v) x = f(x);
    return make_op<S>(std::move(out), {a}, [a, df](Node<S>& self) {
        if (!a->requires_grad) return;
        a->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            a->grad.v[i] += self.grad.v[i] * df(a->val.v[i]);
    });
}

template <class S>
Var<S> silu(const Var<S>& a) {
    auto sig = [](S x) { return S(1) / (S(1) + std::exp(-x)); };
    return unary_op<S>(
        a, [sig](S x) { return x * sig(x); },
        [sig](S x) {
            S s = sig(x);
            return s * (S(1) + x * (S(1) - s));
        });
}

template <class S>
Var<S> gelu(const Var<S>& a) {
    const S c = S(std::sqrt(2.0 / M_PI));
    const S k = S(0.044715);
    return unary_op<S>(
        a,
        [c, k](S x) { return S(0.5) * x * (S(1) + std::tanh(c * (x + k * x * x * x))); },
        [c, k](S x) {
            S u = c * (x + k * x * x * x);
            S t = std::tanh(u);
            S du = c * (S(1) + S(3) * k * x * x);
            return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * du;
        });
}

template <class S>
Var<S> tanh_op(const Var<S>& a) {
    return unary_op<S>(
        a, [](S x) { return std::tanh(x); },
        [](S x) {
            S t = std::tanh(x);
            return S(1) - t * t;
        });
}

template <class S>
Var<S> sigmoid(const Var<S>& a) {
    return unary_op<S>(
        a, [](S x) { return S(1) / (S(1) + std::exp(-x)); },
        [](S x) {
            S s = S(1) / (S(1) + std::exp(-x));
            return s * (S(1) - s);
        });
}

// ---------------------------------------------------------------------------
// Matrix ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> vmatmul(const Var<S>& a, const Var<S>& b) {
    Tensor<S> out = matmul(a->val, b->val);
    return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            accumulate(a->grad, matmul_nt(self.grad, b->val));
        }
        if (b->requires_grad) {
            b->ensure_grad();
            accumulate(b->grad, matmul_tn(a->val, self.grad));
        }
    });
}

// y[m,n] = a[m,k] * b[n,k]^T
template <class S>
Var<S> vmatmul_nt(const Var<S>& a, const Var<S>& b) {
    Tensor<S> out = matmul_nt(a->val, b->val);
    return make_op<S>(std::move(out), {a, b}, [a, b](Node<S>& self) {
        if (a->requires_grad) {
            a->ensure_grad();
            accumulate(a->grad, matmul(self.grad, b->val));
        }
        if (b->requires_grad) {
            b->ensure_grad();
            accumulate(b->grad, matmul_tn(self.grad, a->val));
        }
    });
}

// y[t,j] = x[t,j] + bias[j]
template <class S>
Var<S> add_row_bias(const Var<S>& x, const Var<S>& bias) {
    if (x->val.ndim() != 2 || bias->val.ndim() != 1 || x->val.shape[1] != bias->val.shape[0])
        throw InvalidInput("add_row_bias shape mismatch");
    Tensor<S> out = x->val;
    int64_t t = out.shape[0], d = out.shape[1];
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j) out.v[i * d + j] += bias->val.v[j];
    return make_op<S>(std::move(out), {x, bias}, [x, bias, t, d](Node<S>& self) {
        add_into_grad(x, self.grad);
        if (bias->requires_grad) {
            bias->ensure_grad();
            for (int64_t i = 0; i < t; ++i)
                for (int64_t j = 0; j < d; ++j) bias->grad.v[j] += self.grad.v[i * d + j];
        }
    });
}

// Fully connected layer: y[t,out] = x[t,in] * W[out,in]^T (+ bias).
template <class S>
Var<S> linear(const Var<S>& x, const Var<S>& w, const Var<S>& bias = nullptr) {
    Var<S> y = vmatmul_nt(x, w);
    if (bias) y = add_row_bias(y, bias);
    return y;
}

template <class S>
Var<S> softmax_rows(const Var<S>& x) {
    if (x->val.ndim() != 2) throw InvalidInput("softmax_rows expects 2-D input");
    int64_t t = x->val.shape[0], d = x->val.shape[1];
    Tensor<S> out = x->val;
    for (int64_t i = 0; i < t; ++i) {
        S* row = out.data() + i * d;
        S mx = row[0];
        for (int64_t j = 1; j < d; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int64_t j = 0; j < d; ++j) {
            row[j] = std::exp(row[j] - mx);
            sum += double(row[j]);
        }
        S inv = S(1.0 / sum);
        for (int64_t j = 0; j < d; ++j) row[j] *= inv;
    }
    Tensor<S> saved = out;
    return make_op<S>(std::move(out), {x}, [x, saved, t, d](Node<S>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < t; ++i) {
            const S* y = saved.data() + i * d;
            const S* g = self.grad.data() + i * d;
            double dot = 0;
            for (int64_t j = 0; j < d; ++j) dot += double(g[j]) * double(y[j]);
            S* gx = x->grad.data() + i * d;
            for (int64_t j = 0; j < d; ++j) gx[j] += (g[j] - S(dot)) * y[j];
        }
    });
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class S>
Var<S> reshape(const Var<S>& x, Shape sh) {
    Tensor<S> out = x->val.reshaped(sh);
    return make_op<S>(std::move(out), {x}, [x](Node<S>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i) x->grad.v[i] += self.grad.v[i];
    });
}

template <class S>
Var<S> transpose2d(const Var<S>& x) {
    if (x->val.ndim() != 2) throw InvalidInput("transpose2d expects 2-D input");
    int64_t r = x->val.shape[0], c = x->val.shape[1];
    Tensor<S> out({c, r});
    for (int64_t i = 0; i < r; ++i)
        for (int64_t j = 0; j < c; ++j) out.v[j * r + i] = x->val.v[i * c + j];
    return make_op<S>(std::move(out), {x}, [x, r, c](Node<S>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < r; ++i)
            for (int64_t j = 0; j < c; ++j) x->grad.v[i * c + j] += self.grad.v[j * r + i];
    });
}

// Concatenation along dim 0 (contiguous blocks).
template <class S>
Var<S> concat_dim0(const std::vector<Var<S>>& xs) {
    if (xs.empty()) throw InvalidInput("concat_dim0 of nothing");
    Shape sh = xs[0]->val.shape;
    int64_t total = 0;
    for (const auto& x : xs) {
        if (x->val.ndim() != sh.size()) throw InvalidInput("concat_dim0 rank mismatch");
        for (size_t i = 1; i < sh.size(); ++i)
            if (x->val.shape[i] != sh[i]) throw InvalidInput("concat_dim0 inner-shape mismatch");
        total += x->val.shape[0];
    }
    sh[0] = total;
    Tensor<S> out(sh);
    int64_t offset = 0;
    for (const auto& x : xs) {
        std::copy(x->val.v.begin(), x->val.v.end(), out.v.begin() + offset);
        offset += x->val.numel();
    }
    return make_op<S>(std::move(out), xs, [xs](Node<S>& self) {
        int64_t offset = 0;
        for (const auto& x : xs) {
            if (x->requires_grad) {
                x->ensure_grad();
                for (int64_t i = 0; i < x->val.numel(); ++i)
                    x->grad.v[i] += self.grad.v[offset + i];
            }
            offset += x->val.numel();
        }
    });
}

template <class S>
Var<S> slice_dim0(const Var<S>& x, int64_t start, int64_t len) {
    if (start < 0 || len < 0 || start + len > x->val.shape[0])
        throw InvalidInput("slice_dim0 out of range");
    Shape sh = x->val.shape;
    sh[0] = len;
    int64_t inner = x->val.numel() / x->val.shape[0];
    Tensor<S> out(sh);
    std::copy(x->val.v.begin() + start * inner, x->val.v.begin() + (start + len) * inner,
              out.v.begin());
    return make_op<S>(std::move(out), {x}, [x, start, inner](Node<S>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t i = 0; i < self.grad.numel(); ++i)
            x->grad.v[start * inner + i] += self.grad.v[i];
    });
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

// GroupNorm over [C,H,W]: statistics per group of channels, affine per channel.
template <class S>
Var<S> group_norm(const Var<S>& x, int64_t groups, const Var<S>& gamma, const Var<S>& beta,
                  S eps = S(1e-5)) {
    if (x->val.ndim() != 3) throw InvalidInput("group_norm expects [C,H,W]");
    int64_t C = x->val.shape[0], H = x->val.shape[1], W = x->val.shape[2];
    if (C % groups != 0) throw InvalidInput("group_norm channels not divisible by groups");
    int64_t per = C / groups, hw = H * W, gn = per * hw;

    Tensor<S> xhat(x->val.shape);
    std::vector<S> inv_std(groups);
    for (int64_t g = 0; g < groups; ++g) {
        const S* src = x->val.data() + g * gn;
        double mean = 0;
        for (int64_t i = 0; i < gn; ++i) mean += double(src[i]);
        mean /= double(gn);
        double var = 0;
        for (int64_t i = 0; i < gn; ++i) {
            double d = double(src[i]) - mean;
            var += d * d;
        }
        var /= double(gn);
        S is = S(1.0 / std::sqrt(var + double(eps)));
        inv_std[g] = is;
        S* dst = xhat.data() + g * gn;
        for (int64_t i = 0; i < gn; ++i) dst[i] = (src[i] - S(mean)) * is;
    }
    Tensor<S> out(x->val.shape);
    for (int64_t c = 0; c < C; ++c) {
        S gm = gamma->val.v[c], bt = beta->val.v[c];
        const S* src = xhat.data() + c * hw;
        S* dst = out.data() + c * hw;
        for (int64_t i = 0; i < hw; ++i) dst[i] = gm * src[i] + bt;
    }
    return make_op<S>(
        std::move(out), {x, gamma, beta},
        [x, gamma, beta, xhat, inv_std, groups, per, hw, gn, C](Node<S>& self) {
            if (gamma->requires_grad) {
                gamma->ensure_grad();
                beta->ensure_grad();
                for (int64_t c = 0; c < C; ++c) {
                    const S* g = self.grad.data() + c * hw;
                    const S* xh = xhat.data() + c * hw;
                    double dg = 0, db = 0;
                    for (int64_t i = 0; i < hw; ++i) {
                        dg += double(g[i]) * double(xh[i]);
                        db += double(g[i]);
                    }
                    gamma->grad.v[c] += S(dg);
                    beta->grad.v[c] += S(db);
                }
            }
            if (!x->requires_grad) return;
            x->ensure_grad();
            for (int64_t grp = 0; grp < groups; ++grp) {
                double m_dxhat = 0, m_dxhat_xhat = 0;
                // dxhat = upstream * gamma(channel)
                for (int64_t pc = 0; pc < per; ++pc) {
                    int64_t c = grp * per + pc;
                    const S* g = self.grad.data() + c * hw;
                    const S* xh = xhat.data() + c * hw;
                    S gm = gamma->val.v[c];
                    for (int64_t i = 0; i < hw; ++i) {
                        double dxh = double(g[i]) * double(gm);
                        m_dxhat += dxh;
                        m_dxhat_xhat += dxh * double(xh[i]);
                    }
                }
                m_dxhat /= double(gn);
                m_dxhat_xhat /= double(gn);
                for (int64_t pc = 0; pc < per; ++pc) {
                    int64_t c = grp * per + pc;
                    const S* g = self.grad.data() + c * hw;
                    const S* xh = xhat.data() + c * hw;
                    S* gx = x->grad.data() + c * hw;
                    S gm = gamma->val.v[c];
                    for (int64_t i = 0; i < hw; ++i) {
                        double dxh = double(g[i]) * double(gm);
                        gx[i] += inv_std[grp] *
                                 S(dxh - m_dxhat - double(xh[i]) * m_dxhat_xhat);
                    }
                }
            }
        });
}

// LayerNorm over the last dim of [T,d].
template <class S>
Var<S> layer_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, S eps = S(1e-5)) {
    if (x->val.ndim() != 2) throw InvalidInput("layer_norm expects [T,d]");
    int64_t t = x->val.shape[0], d = x->val.shape[1];
    Tensor<S> xhat(x->val.shape);
    std::vector<S> inv_std(t);
    for (int64_t i = 0; i < t; ++i) {
        const S* src = x->val.data() + i * d;
        double mean = 0;
        for (int64_t j = 0; j < d; ++j) mean += double(src[j]);
        mean /= double(d);
        double var = 0;
        for (int64_t j = 0; j < d; ++j) {
            double dv = double(src[j]) - mean;
            var += dv * dv;
        }
        var /= double(d);
        S is = S(1.0 / std::sqrt(var + double(eps)));
        inv_std[i] = is;
        S* dst = xhat.data() + i * d;
        for (int64_t j = 0; j < d; ++j) dst[j] = (src[j] - S(mean)) * is;
    }
    Tensor<S> out(x->val.shape);
    for (int64_t i = 0; i < t; ++i)
        for (int64_t j = 0; j < d; ++j)
            out.v[i * d + j] = gamma->val.v[j] * xhat.v[i * d + j] + beta->val.v[j];
    return make_op<S>(std::move(out), {x, gamma, beta},
                      [x, gamma, beta, xhat, inv_std, t, d](Node<S>& self) {
                          if (gamma->requires_grad) {
                              gamma->ensure_grad();
                              beta->ensure_grad();
                              for (int64_t i = 0; i < t; ++i)
                                  for (int64_t j = 0; j < d; ++j) {
                                      gamma->grad.v[j] +=
                                          self.grad.v[i * d + j] * xhat.v[i * d + j];
                                      beta->grad.v[j] += self.grad.v[i * d + j];
                                  }
                          }
                          if (!x->requires_grad) return;
                          x->ensure_grad();
                          for (int64_t i = 0; i < t; ++i) {
                              const S* g = self.grad.data() + i * d;
                              const S* xh = xhat.data() + i * d;
                              double m1 = 0, m2 = 0;
                              for (int64_t j = 0; j < d; ++j) {
                                  double dxh = double(g[j]) * double(gamma->val.v[j]);
                                  m1 += dxh;
                                  m2 += dxh * double(xh[j]);
                              }
                              m1 /= double(d);
                              m2 /= double(d);
                              S* gx = x->grad.data() + i * d;
                              for (int64_t j = 0; j < d; ++j) {
                                  double dxh = double(g[j]) * double(gamma->val.v[j]);
                                  gx[j] += inv_std[i] * S(dxh - m1 - double(xh[j]) * m2);
                              }
                          }
                      });
}

// ---------------------------------------------------------------------------
// Convolution and spatial ops
// ---------------------------------------------------------------------------

namespace detail {

template <class S>
Tensor<S> im2col(const Tensor<S>& x, int64_t kh, int64_t kw, int64_t stride, int64_t pad,
                 int64_t oh, int64_t ow) {
    int64_t C = x.shape[0], H = x.shape[1], W = x.shape[2];
    Tensor<S> cols({C * kh * kw, oh * ow});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                S* dst = cols.data() + ((c * kh + ky) * kw + kx) * oh * ow;
                for (int64_t y = 0; y < oh; ++y) {
                    int64_t sy = y * stride + ky - pad;
                    if (sy < 0 || sy >= H) {
                        std::fill(dst + y * ow, dst + (y + 1) * ow, S(0));
                        continue;
                    }
                    const S* src = x.data() + (c * H + sy) * W;
                    for (int64_t xo = 0; xo < ow; ++xo) {
                        int64_t sx = xo * stride + kx - pad;
                        dst[y * ow + xo] = (sx >= 0 && sx < W) ? src[sx] : S(0);
                    }
                }
            }
    return cols;
}

template <class S>
void col2im_accum(const Tensor<S>& cols, Tensor<S>& dx, int64_t kh, int64_t kw, int64_t stride,
                  int64_t pad, int64_t oh, int64_t ow) {
    int64_t C = dx.shape[0], H = dx.shape[1], W = dx.shape[2];
    for (int64_t c = 0; c < C; ++c)
        for (int64_t ky = 0; ky < kh; ++ky)
            for (int64_t kx = 0; kx < kw; ++kx) {
                const S* src = cols.data() + ((c * kh + ky) * kw + kx) * oh * ow;
                for (int64_t y = 0; y < oh; ++y) {
                    int64_t sy = y * stride + ky - pad;
                    if (sy < 0 || sy >= H) continue;
                    S* dst = dx.data() + (c * H + sy) * W;
                    for (int64_t xo = 0; xo < ow; ++xo) {
                        int64_t sx = xo * stride + kx - pad;
                        if (sx >= 0 && sx < W) dst[sx] += src[y * ow + xo];
                    }
                }
            }
}

}  // namespace detail

// conv2d: x[Cin,H,W], w[Cout,Cin,kh,kw], bias[Cout] -> [Cout,oh,ow]
template <class S>
Var<S> conv2d(const Var<S>& x, const Var<S>& w, const Var<S>& bias, int64_t stride = 1,
              int64_t pad = 1) {
    if (x->val.ndim() != 3 || w->val.ndim() != 4) throw InvalidInput("conv2d rank mismatch");
    int64_t Cin = x->val.shape[0], H = x->val.shape[1], W = x->val.shape[2];
    int64_t Cout = w->val.shape[0], kh = w->val.shape[2], kw = w->val.shape[3];
    if (w->val.shape[1] != Cin) throw InvalidInput("conv2d channel mismatch");
    int64_t oh = (H + 2 * pad - kh) / stride + 1;
    int64_t ow = (W + 2 * pad - kw) / stride + 1;

    Tensor<S> cols = detail::im2col(x->val, kh, kw, stride, pad, oh, ow);
    Tensor<S> wmat = w->val.reshaped({Cout, Cin * kh * kw});
    Tensor<S> y2 = matmul(wmat, cols);  // [Cout, oh*ow]
    if (bias)
        for (int64_t c = 0; c < Cout; ++c) {
            S b = bias->val.v[c];
            S* row = y2.data() + c * oh * ow;
            for (int64_t i = 0; i < oh * ow; ++i) row[i] += b;
        }
    Tensor<S> out = y2.reshaped({Cout, oh, ow});

    return make_op<S>(
        std::move(out), bias ? std::vector<Var<S>>{x, w, bias} : std::vector<Var<S>>{x, w},
        [x, w, bias, cols, stride, pad, Cin, Cout, kh, kw, oh, ow](Node<S>& self) {
            Tensor<S> g2 = self.grad.reshaped({Cout, oh * ow});
            if (w->requires_grad) {
                w->ensure_grad();
                Tensor<S> dw = matmul_nt(g2, cols);  // [Cout, Cin*kh*kw]
                for (int64_t i = 0; i < dw.numel(); ++i) w->grad.v[i] += dw.v[i];
            }
            if (bias && bias->requires_grad) {
                bias->ensure_grad();
                for (int64_t c = 0; c < Cout; ++c) {
                    double acc = 0;
                    const S* row = g2.data() + c * oh * ow;
                    for (int64_t i = 0; i < oh * ow; ++i) acc += double(row[i]);
                    bias->grad.v[c] += S(acc);
                }
            }
            if (x->requires_grad) {
                x->ensure_grad();
                Tensor<S> wmat = w->val.reshaped({Cout, Cin * kh * kw});
                Tensor<S> dcols = matmul_tn(wmat, g2);  // [Cin*kh*kw, oh*ow]
                detail::col2im_accum(dcols, x->grad, kh, kw, stride, pad, oh, ow);
            }
        });
}

template <class S>
Var<S> upsample_nearest2x(const Var<S>& x) {
    if (x->val.ndim() != 3) throw InvalidInput("upsample expects [C,H,W]");
    int64_t C = x->val.shape[0], H = x->val.shape[1], W = x->val.shape[2];
    Tensor<S> out({C, H * 2, W * 2});
    for (int64_t c = 0; c < C; ++c)
        for (int64_t y = 0; y < H; ++y) {
            const S* src = x->val.data() + (c * H + y) * W;
            S* d0 = out.data() + (c * 2 * H + 2 * y) * 2 * W;
            S* d1 = d0 + 2 * W;
            for (int64_t xo = 0; xo < W; ++xo) {
                d0[2 * xo] = d0[2 * xo + 1] = src[xo];
                d1[2 * xo] = d1[2 * xo + 1] = src[xo];
            }
        }
    return make_op<S>(std::move(out), {x}, [x, C, H, W](Node<S>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        for (int64_t c = 0; c < C; ++c)
            for (int64_t y = 0; y < H; ++y) {
                S* dst = x->grad.data() + (c * H + y) * W;
                const S* g0 = self.grad.data() + (c * 2 * H + 2 * y) * 2 * W;
                const S* g1 = g0 + 2 * W;
                for (int64_t xo = 0; xo < W; ++xo)
                    dst[xo] += g0[2 * xo] + g0[2 * xo + 1] + g1[2 * xo] + g1[2 * xo + 1];
            }
    });
}

// y[c,h,w] = x[c,h,w] + bias[c]
template <class S>
Var<S> add_channel_bias(const Var<S>& x, const Var<S>& bias) {
    if (x->val.ndim() != 3 || bias->val.numel() != x->val.shape[0])
        throw InvalidInput("add_channel_bias shape mismatch");
    int64_t C = x->val.shape[0], hw = x->val.shape[1] * x->val.shape[2];
    Tensor<S> out = x->val;
    for (int64_t c = 0; c < C; ++c) {
        S b = bias->val.v[c];
        S* row = out.data() + c * hw;
        for (int64_t i = 0; i < hw; ++i) row[i] += b;
    }
    return make_op<S>(std::move(out), {x, bias}, [x, bias, C, hw](Node<S>& self) {
        add_into_grad(x, self.grad);
        if (bias->requires_grad) {
            bias->ensure_grad();
            for (int64_t c = 0; c < C; ++c) {
                double acc = 0;
                const S* row = self.grad.data() + c * hw;
                for (int64_t i = 0; i < hw; ++i) acc += double(row[i]);
                bias->grad.v[c] += S(acc);
            }
        }
    });
}

// ---------------------------------------------------------------------------
// Embedding and losses
// ---------------------------------------------------------------------------

template <class S>
Var<S> embedding(const Var<S>& table, const std::vector<int>& ids) {
    if (table->val.ndim() != 2) throw InvalidInput("embedding table must be [V,d]");
    int64_t V = table->val.shape[0], d = table->val.shape[1];
    Tensor<S> out({int64_t(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || ids[i] >= V) throw InvalidInput("embedding id out of range");
        std::copy(table->val.data() + ids[i] * d, table->val.data() + (ids[i] + 1) * d,
                  out.data() + i * d);
    }
    return make_op<S>(std::move(out), {table}, [table, ids, d](Node<S>& self) {
        if (!table->requires_grad) return;
        table->ensure_grad();
        for (size_t i = 0; i < ids.size(); ++i) {
            const S* g = self.grad.data() + i * d;
            S* dst = table->grad.data() + ids[i] * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += g[j];
        }
    });
}

template <class S>
Var<S> mean_all(const Var<S>& x) {
    Tensor<S> out({1});
    out.v[0] = S(x->val.mean());
    int64_t n = x->val.numel();
    return make_op<S>(std::move(out), {x}, [x, n](Node<S>& self) {
        if (!x->requires_grad) return;
        x->ensure_grad();
        S g = self.grad.v[0] / S(n);
        for (int64_t i = 0; i < n; ++i) x->grad.v[i] += g;
    });
}

template <class S>
Var<S> mse_loss(const Var<S>& a, const Var<S>& b) {
    if (!a->val.same_shape(b->val)) throw InvalidInput("mse_loss shape mismatch");
    int64_t n = a->val.numel();
    double acc = 0;
    for (int64_t i = 0; i < n; ++i) {
        double d = double(a->val.v[i]) - double(b->val.v[i]);
        acc += d * d;
    }
    Tensor<S> out({1});
    out.v[0] = S(acc / double(n));
    return make_op<S>(std::move(out), {a, b}, [a, b, n](Node<S>& self) {
        S g = self.grad.v[0] * S(2) / S(n);
        if (a->requires_grad) {
            a->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                a->grad.v[i] += g * (a->val.v[i] - b->val.v[i]);
        }
        if (b->requires_grad) {
            b->ensure_grad();
            for (int64_t i = 0; i < n; ++i)
                b->grad.v[i] -= g * (a->val.v[i] - b->val.v[i]);
        }
    });
}

// Mean cross-entropy of logits[N,K] against integer labels.
template <class S>
Var<S> cross_entropy(const Var<S>& logits, const std::vector<int>& labels) {
    if (logits->val.ndim() != 2 || int64_t(labels.size()) != logits->val.shape[0])
        throw InvalidInput("cross_entropy shape mismatch");
    int64_t n = logits->val.shape[0], k = logits->val.shape[1];
    Tensor<S> probs(logits->val.shape);
    double loss = 0;
    for (int64_t i = 0; i < n; ++i) {
        const S* row = logits->val.data() + i * k;
        S mx = row[0];
        for (int64_t j = 1; j < k; ++j) mx = std::max(mx, row[j]);
        double sum = 0;
        for (int64_t j = 0; j < k; ++j) sum += std::exp(double(row[j]) - double(mx));
        double lse = std::log(sum) + double(mx);
        loss += lse - double(row[labels[i]]);
        S* p = probs.data() + i * k;
        for (int64_t j = 0; j < k; ++j) p[j] = S(std::exp(double(row[j]) - lse));
    }
    Tensor<S> out({1});
    out.v[0] = S(loss / double(n));
    return make_op<S>(std::move(out), {logits}, [logits, probs, labels, n, k](Node<S>& self) {
        if (!logits->requires_grad) return;
        logits->ensure_grad();
        S g = self.grad.v[0] / S(n);
        for (int64_t i = 0; i < n; ++i) {
            const S* p = probs.data() + i * k;
            S* dst = logits->grad.data() + i * k;
            for (int64_t j = 0; j < k; ++j) dst[j] += g * (p[j] - S(labels[i] == j ? 1 : 0));
        }
    });
}

}  // namespace cyto
