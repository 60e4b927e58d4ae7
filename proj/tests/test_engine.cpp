#include <doctest.h>

#include "cyto/nn.hpp"
#include "gradcheck.hpp"

using namespace cyto;
using gradcheck::expect_grads_match;
using gradcheck::leaf_randn;

using VarD = Var<double>;
using TD = Tensor<double>;

TEST_CASE("elementwise ops: values and gradients") {
    Rng rng(1);
    VarD a = leaf_randn(rng, {3, 4});
    VarD b = leaf_randn(rng, {3, 4});

    SUBCASE("add") {
        expect_grads_match({a, b}, [&] { return mean_all(mul(add(a, b), add(a, b))); });
    }
    SUBCASE("sub") {
        expect_grads_match({a, b}, [&] { return mean_all(mul(sub(a, b), sub(a, b))); });
    }
    SUBCASE("mul") {
        expect_grads_match({a, b}, [&] { return mean_all(mul(a, b)); });
    }
    SUBCASE("scale") {
        Tensor<double> expected = a->val;
        for (auto& x : expected.v) x *= -2.5;
        CHECK(max_abs_diff(scale(a, -2.5)->val, expected) == 0.0);
        expect_grads_match({a}, [&] { return mean_all(mul(scale(a, -2.5), a)); });
    }
    SUBCASE("scale_by learnable scalar") {
        VarD g = leaf<double>(TD::full({1}, 0.7), true);
        expect_grads_match({a, g}, [&] { return mean_all(mul(scale_by(a, g), a)); });
    }
}

TEST_CASE("activations match closed forms and gradcheck") {
    Rng rng(2);
    VarD x = leaf_randn(rng, {5, 3});

    SUBCASE("silu value") {
        VarD y = silu(x);
        for (int64_t i = 0; i < x->val.numel(); ++i) {
            double v = x->val.v[i];
            CHECK(y->val.v[i] == doctest::Approx(v / (1.0 + std::exp(-v))).epsilon(1e-12));
        }
    }
    SUBCASE("silu grad") {
        expect_grads_match({x}, [&] { return mean_all(silu(x)); });
    }
    SUBCASE("gelu grad") {
        expect_grads_match({x}, [&] { return mean_all(gelu(x)); });
    }
    SUBCASE("tanh grad") {
        expect_grads_match({x}, [&] { return mean_all(mul(tanh_op(x), x)); });
    }
    SUBCASE("sigmoid grad") {
        expect_grads_match({x}, [&] { return mean_all(mul(sigmoid(x), x)); });
    }
}

TEST_CASE("matmul family") {
    Rng rng(3);
    VarD a = leaf_randn(rng, {4, 6});
    VarD b = leaf_randn(rng, {6, 5});
    VarD w = leaf_randn(rng, {5, 6});   // [out,in]
    VarD bias = leaf_randn(rng, {5});

    SUBCASE("vmatmul forward against scalar loops") {
        VarD y = vmatmul(a, b);
        for (int64_t i = 0; i < 4; ++i)
            for (int64_t j = 0; j < 5; ++j) {
                double acc = 0;
                for (int64_t k = 0; k < 6; ++k) acc += a->val.v[i * 6 + k] * b->val.v[k * 5 + j];
                CHECK(y->val.v[i * 5 + j] == doctest::Approx(acc).epsilon(1e-12));
            }
    }
    SUBCASE("vmatmul grad") {
        expect_grads_match({a, b}, [&] { return mean_all(mul(vmatmul(a, b), vmatmul(a, b))); });
    }
    SUBCASE("vmatmul_nt equals vmatmul of transpose") {
        VarD y1 = vmatmul_nt(a, w);
        VarD y2 = vmatmul(a, transpose2d(w));
        CHECK(max_abs_diff(y1->val, y2->val) < 1e-14);
    }
    SUBCASE("linear grad incl bias") {
        expect_grads_match({a, w, bias},
                           [&] { return mean_all(mul(linear(a, w, bias), linear(a, w, bias))); });
    }
}

TEST_CASE("softmax rows: simplex output and gradient") {
    Rng rng(4);
    VarD x = leaf_randn(rng, {6, 9}, 3.0);
    VarD y = softmax_rows(x);
    for (int64_t i = 0; i < 6; ++i) {
        double s = 0;
        for (int64_t j = 0; j < 9; ++j) {
            CHECK(y->val.v[i * 9 + j] > 0);
            s += y->val.v[i * 9 + j];
        }
        CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
    VarD t = leaf_randn(rng, {6, 9});
    expect_grads_match({x}, [&] { return mse_loss(softmax_rows(x), t); }, 1e-4);
}

TEST_CASE("shape ops") {
    Rng rng(5);
    VarD x = leaf_randn(rng, {3, 8});

    SUBCASE("transpose2d is an involution with exact gradient") {
        CHECK(max_abs_diff(transpose2d(transpose2d(x))->val, x->val) == 0.0);
        VarD t = leaf_randn(rng, {8, 3});
        expect_grads_match({x}, [&] { return mse_loss(transpose2d(x), t); });
    }
    SUBCASE("reshape grad") {
        VarD t = leaf_randn(rng, {6, 4});
        expect_grads_match({x}, [&] { return mse_loss(reshape(x, {6, 4}), t); });
    }
    SUBCASE("concat_dim0 + slice_dim0 round trip") {
        VarD y = leaf_randn(rng, {2, 8});
        VarD cat = concat_dim0<double>({x, y});
        CHECK(cat->val.shape == Shape{5, 8});
        CHECK(max_abs_diff(slice_dim0(cat, 0, 3)->val, x->val) == 0.0);
        CHECK(max_abs_diff(slice_dim0(cat, 3, 2)->val, y->val) == 0.0);
        VarD t = leaf_randn(rng, {5, 8});
        expect_grads_match({x, y},
                           [&] { return mse_loss(concat_dim0<double>({x, y}), t); });
    }
    SUBCASE("slice_dim0 grad routes only into its window") {
        VarD t = leaf_randn(rng, {2, 8});
        expect_grads_match({x}, [&] { return mse_loss(slice_dim0(x, 1, 2), t); });
        // row 0 untouched by the loss
        Var<double> loss = mse_loss(slice_dim0(x, 1, 2), t);
        backward(loss);
    }
}

TEST_CASE("normalization layers") {
    Rng rng(6);

    SUBCASE("group_norm: per-group statistics and gradients") {
        VarD x = leaf_randn(rng, {4, 3, 3}, 2.0);
        VarD gamma = leaf<double>(TD::full({4}, 1.0), true);
        VarD beta = leaf<double>(TD::zeros({4}), true);
        VarD y = group_norm(x, 2, gamma, beta);
        // each group of 2 channels is standardized
        for (int64_t g = 0; g < 2; ++g) {
            double m = 0, v = 0;
            for (int64_t i = 0; i < 18; ++i) m += y->val.v[g * 18 + i];
            m /= 18;
            for (int64_t i = 0; i < 18; ++i) {
                double d = y->val.v[g * 18 + i] - m;
                v += d * d;
            }
            v /= 18;
            CHECK(m == doctest::Approx(0.0).epsilon(1e-10));
            CHECK(v == doctest::Approx(1.0).epsilon(1e-4));
        }
        VarD t = leaf_randn(rng, {4, 3, 3});
        expect_grads_match({x, gamma, beta},
                           [&] { return mse_loss(group_norm(x, 2, gamma, beta), t); },
                           1e-4);
    }
    SUBCASE("layer_norm gradients") {
        VarD x = leaf_randn(rng, {5, 8}, 1.5);
        VarD gamma = leaf_randn(rng, {8});
        VarD beta = leaf_randn(rng, {8});
        VarD t = leaf_randn(rng, {5, 8});
        expect_grads_match({x, gamma, beta},
                           [&] { return mse_loss(layer_norm(x, gamma, beta), t); }, 1e-4);
    }
}

namespace {
// Direct convolution for cross-checking the im2col path.
TD conv2d_naive(const TD& x, const TD& w, const TD& b, int64_t stride, int64_t pad) {
    int64_t Cin = x.shape[0], H = x.shape[1], W = x.shape[2];
    int64_t Cout = w.shape[0], kh = w.shape[2], kw = w.shape[3];
    int64_t oh = (H + 2 * pad - kh) / stride + 1, ow = (W + 2 * pad - kw) / stride + 1;
    TD y({Cout, oh, ow});
    for (int64_t co = 0; co < Cout; ++co)
        for (int64_t yo = 0; yo < oh; ++yo)
            for (int64_t xo = 0; xo < ow; ++xo) {
                double acc = b.numel() ? b.v[co] : 0.0;
                for (int64_t ci = 0; ci < Cin; ++ci)
                    for (int64_t ky = 0; ky < kh; ++ky)
                        for (int64_t kx = 0; kx < kw; ++kx) {
                            int64_t sy = yo * stride + ky - pad, sx = xo * stride + kx - pad;
                            if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                            acc += x.v[(ci * H + sy) * W + sx] *
                                   w.v[((co * Cin + ci) * kh + ky) * kw + kx];
                        }
                y.v[(co * oh + yo) * ow + xo] = acc;
            }
    return y;
}
}  // namespace

TEST_CASE("conv2d matches direct convolution and gradchecks") {
    Rng rng(7);
    for (auto [stride, pad] : std::vector<std::pair<int64_t, int64_t>>{{1, 1}, {2, 1}, {1, 0}}) {
        VarD x = leaf_randn(rng, {3, 6, 5});
        VarD w = leaf_randn(rng, {4, 3, 3, 3}, 0.5);
        VarD b = leaf_randn(rng, {4});
        VarD y = conv2d(x, w, b, stride, pad);
        TD ref = conv2d_naive(x->val, w->val, b->val, stride, pad);
        REQUIRE(y->val.shape == ref.shape);
        CHECK(max_abs_diff(y->val, ref) < 1e-12);
        VarD t = leaf<double>(TD::randn(ref.shape, rng), false);
        expect_grads_match({x, w, b},
                           [&, s = stride, p = pad] { return mse_loss(conv2d(x, w, b, s, p), t); },
                           1e-4);
    }
}

TEST_CASE("upsample_nearest2x: exact duplication and summed gradient") {
    Rng rng(8);
    VarD x = leaf_randn(rng, {2, 3, 4});
    VarD y = upsample_nearest2x(x);
    REQUIRE(y->val.shape == Shape{2, 6, 8});
    for (int64_t c = 0; c < 2; ++c)
        for (int64_t i = 0; i < 6; ++i)
            for (int64_t j = 0; j < 8; ++j)
                CHECK(y->val.at(c, i, j) == x->val.at(c, i / 2, j / 2));
    VarD t = leaf_randn(rng, {2, 6, 8});
    expect_grads_match({x}, [&] { return mse_loss(upsample_nearest2x(x), t); });
}

TEST_CASE("add_channel_bias gradients") {
    Rng rng(9);
    VarD x = leaf_randn(rng, {4, 3, 3});
    VarD b = leaf_randn(rng, {4});
    VarD t = leaf_randn(rng, {4, 3, 3});
    expect_grads_match({x, b}, [&] { return mse_loss(add_channel_bias(x, b), t); });
}

TEST_CASE("embedding: repeated ids accumulate gradient") {
    Rng rng(10);
    VarD table = leaf_randn(rng, {6, 4});
    std::vector<int> ids{2, 5, 2, 0};
    VarD y = embedding(table, ids);
    REQUIRE(y->val.shape == Shape{4, 4});
    for (int64_t j = 0; j < 4; ++j) CHECK(y->val.v[0 * 4 + j] == table->val.v[2 * 4 + j]);
    VarD t = leaf_randn(rng, {4, 4});
    expect_grads_match({table}, [&] { return mse_loss(embedding(table, ids), t); });

    // analytic scatter-add: row 2 receives two contributions
    table->grad = TD({0});
    Var<double> loss = mse_loss(embedding(table, ids), t);
    backward(loss);
    TD manual = TD::zeros({6, 4});
    for (size_t i = 0; i < ids.size(); ++i)
        for (int64_t j = 0; j < 4; ++j)
            manual.v[ids[i] * 4 + j] +=
                2.0 / 16.0 * (y->val.v[i * 4 + j] - t->val.v[i * 4 + j]);
    CHECK(max_abs_diff(table->grad, manual) < 1e-12);
}

TEST_CASE("losses") {
    Rng rng(11);

    SUBCASE("mse value and gradient") {
        VarD a = leaf_randn(rng, {3, 3});
        VarD b = leaf_randn(rng, {3, 3});
        double acc = 0;
        for (int64_t i = 0; i < 9; ++i) {
            double d = a->val.v[i] - b->val.v[i];
            acc += d * d;
        }
        CHECK(mse_loss(a, b)->val.v[0] == doctest::Approx(acc / 9).epsilon(1e-12));
        expect_grads_match({a, b}, [&] { return mse_loss(a, b); });
    }
    SUBCASE("cross_entropy matches log-sum-exp form") {
        VarD logits = leaf_randn(rng, {4, 5}, 2.0);
        std::vector<int> labels{0, 3, 2, 4};
        double want = 0;
        for (int64_t i = 0; i < 4; ++i) {
            double mx = -1e30;
            for (int64_t j = 0; j < 5; ++j) mx = std::max(mx, logits->val.v[i * 5 + j]);
            double s = 0;
            for (int64_t j = 0; j < 5; ++j) s += std::exp(logits->val.v[i * 5 + j] - mx);
            want += std::log(s) + mx - logits->val.v[i * 5 + labels[i]];
        }
        want /= 4;
        CHECK(cross_entropy(logits, labels)->val.v[0] == doctest::Approx(want).epsilon(1e-12));
        expect_grads_match({logits}, [&] { return cross_entropy(logits, labels); });
    }
    SUBCASE("mean_all grad") {
        VarD a = leaf_randn(rng, {7});
        expect_grads_match({a}, [&] { return mean_all(mul(a, a)); });
    }
}

TEST_CASE("attention block gradchecks end to end") {
    Rng rng(12);
    VarD q = leaf_randn(rng, {5, 8});
    VarD k = leaf_randn(rng, {3, 8});
    VarD v = leaf_randn(rng, {3, 8});
    VarD t = leaf_randn(rng, {5, 8});
    expect_grads_match({q, k, v}, [&] { return mse_loss(attention(q, k, v), t); }, 1e-4);
}

TEST_CASE("graph mechanics") {
    Rng rng(13);

    SUBCASE("diamond reuse accumulates both paths") {
        VarD x = leaf_randn(rng, {4});
        VarD y = mul(x, x);                       // x^2
        Var<double> loss = mean_all(add(y, y));   // 2 x^2 / 4
        backward(loss);
        for (int64_t i = 0; i < 4; ++i)
            CHECK(x->grad.v[i] == doctest::Approx(x->val.v[i]).epsilon(1e-12));
    }
    SUBCASE("NoGradGuard builds no graph") {
        VarD x = leaf_randn(rng, {4});
        {
            NoGradGuard ng;
            VarD y = mul(x, x);
            CHECK_FALSE(y->requires_grad);
            CHECK(y->parents.empty());
        }
        VarD y2 = mul(x, x);
        CHECK(y2->requires_grad);
    }
    SUBCASE("frozen leaves receive no gradient") {
        VarD x = leaf_randn(rng, {4});
        x->requires_grad = false;
        VarD w = leaf_randn(rng, {4});
        Var<double> loss = mean_all(mul(x, w));
        backward(loss);
        CHECK(x->grad.numel() == 0);
        CHECK(w->grad.numel() == 4);
    }
}

TEST_CASE("adam optimizer") {
    SUBCASE("first step has magnitude ~lr in the gradient direction") {
        ParamStore<double> ps;
        Var<double> p = ps.add("p", TD::full({3}, 5.0));
        Var<double> target = leaf<double>(TD::zeros({3}), false);
        Adam<double> opt(0.01);
        Var<double> loss = mse_loss(p, target);
        backward(loss);
        opt.step(ps);
        for (int64_t i = 0; i < 3; ++i)
            CHECK(p->val.v[i] == doctest::Approx(5.0 - 0.01).epsilon(1e-4));
    }
    SUBCASE("drives a quadratic toward its minimum") {
        ParamStore<double> ps;
        Rng rng(14);
        Var<double> p = ps.add("p", TD::randn({6}, rng, 3.0));
        Var<double> target = leaf<double>(TD::full({6}, 1.5), false);
        Adam<double> opt(0.05);
        double first = 0, last = 0;
        for (int i = 0; i < 1200; ++i) {
            ps.zero_grad();
            Var<double> loss = mse_loss(p, target);
            backward(loss);
            if (i == 0) first = loss->val.v[0];
            last = loss->val.v[0];
            opt.step(ps);
        }
        CHECK(last < 1e-3);
        CHECK(last < first);
    }
    SUBCASE("frozen parameters do not move") {
        ParamStore<double> ps;
        Var<double> p = ps.add("p", TD::full({2}, 1.0), false);
        Var<double> q = ps.add("q", TD::full({2}, 1.0));
        Adam<double> opt(0.1);
        Var<double> loss = mse_loss(add(p, q), leaf<double>(TD::zeros({2}), false));
        backward(loss);
        opt.step(ps);
        CHECK(p->val.v[0] == 1.0);
        CHECK(q->val.v[0] != 1.0);
    }
}

TEST_CASE("parameter store bookkeeping") {
    ParamStore<double> ps;
    Rng rng(15);
    ps.add("a", TD::randn({3, 4}, rng));
    ps.add("b", TD::randn({5}, rng), false);
    CHECK(ps.total_params() == 17);
    CHECK(ps.trainable_params() == 12);
    CHECK(ps.has("a"));
    CHECK_FALSE(ps.has("c"));
    CHECK_THROWS_AS(ps.add("a", TD::zeros({1})), InvalidInput);
    CHECK_THROWS_AS(ps.get("missing"), InvalidInput);
    ps.freeze_all();
    CHECK(ps.trainable_params() == 0);
}
