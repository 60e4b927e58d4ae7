#pragma once

// Grounding tokens: each annotated box becomes one context-sized token fusing
// a learned per-class feature with a fixed Fourier embedding of the box
// corners. Tokens feed the gated self-attention blocks of the editor model.

#include "cyto/nn.hpp"
#include "cyto/types.hpp"

namespace cyto {

// [sin(2^k pi u), cos(2^k pi u)] for u in (x0, y0, x1, y1), coordinate-major
// with frequencies innermost. Length 8 * num_freqs.
template <class S>
Tensor<S> fourier_embed(const BoundingBox& box, int64_t num_freqs = 8) {
    if (num_freqs < 1) throw InvalidInput("fourier_embed: num_freqs must be >= 1");
    const double u[4] = {box.x0, box.y0, box.x1, box.y1};
    Tensor<S> out({8 * num_freqs});
    int64_t i = 0;
    for (int c = 0; c < 4; ++c)
        for (int64_t k = 0; k < num_freqs; ++k) {
            double w = std::ldexp(3.14159265358979323846, int(k)) * u[c];
            out.v[i++] = S(std::sin(w));
            out.v[i++] = S(std::cos(w));
        }
    return out;
}

// Token = MLP([class feature ; box embedding]); the first layer is realized as
// a split pair of linears, which is the same matrix acting on the
// concatenation. Class features start as orthogonal rows so categories are
// born distinguishable.
template <class S>
struct GroundingEncoder {
    int64_t ctx_dim = 0, num_freqs = 0;
    Var<S> class_table;  // [5, ctx_dim]
    LinearLayer<S> f1t;  // ctx_dim -> ctx_dim, carries the layer bias
    LinearLayer<S> f1b;  // 8*num_freqs -> ctx_dim, biasless half
    LinearLayer<S> f2;   // ctx_dim -> ctx_dim

    GroundingEncoder() = default;
    GroundingEncoder(ParamStore<S>& ps, const std::string& prefix, int64_t ctx,
                     int64_t nf, Rng& rng)
        : ctx_dim(ctx), num_freqs(nf) {
        class_table =
            ps.add(prefix + ".table", orthogonal_rows_init<S>(rng, kNumCellTypes, ctx));
        f1t = LinearLayer<S>(ps, prefix + ".f1t", ctx, ctx, rng);
        f1b = LinearLayer<S>(ps, prefix + ".f1b", 8 * nf, ctx, rng, false);
        f2 = LinearLayer<S>(ps, prefix + ".f2", ctx, ctx, rng);
    }

    Var<S> encode_var(const std::vector<Annotation>& anns) const {
        if (anns.empty()) return constant(Tensor<S>({0, ctx_dim}));
        std::vector<int> ids;
        Tensor<S> boxes({int64_t(anns.size()), 8 * num_freqs});
        for (size_t i = 0; i < anns.size(); ++i) {
            if (!anns[i].box.valid() || anns[i].box.area() <= 0)
                throw InvalidInput("grounding box must be a valid positive-area box");
            ids.push_back(int(anns[i].cls));
            Tensor<S> row = fourier_embed<S>(anns[i].box, num_freqs);
            std::copy(row.v.begin(), row.v.end(), boxes.data() + int64_t(i) * row.numel());
        }
        Var<S> h = gelu(add(f1t.forward(embedding(class_table, ids)),
                            f1b.forward(constant(boxes))));
        return f2.forward(h);
    }

    Tensor<S> encode(const std::vector<Annotation>& anns) const {
        NoGradGuard ng;
        return encode_var(anns)->val;
    }
};

}  // namespace cyto
