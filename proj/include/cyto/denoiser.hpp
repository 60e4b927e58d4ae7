#pragma once

// Noise-prediction U-Net: residual conv blocks with timestep conditioning,
// one transformer block (cross-attention over text tokens) per resolution on
// the way down and at the bottleneck. Cross-attention projections are square
// per level so low-rank adapters target d x d matrices; grounding tokens
// enter through gated self-attention blocks inserted ahead of each
// cross-attention when attached.

#include <optional>

#include "cyto/diffusion.hpp"
#include "cyto/nn.hpp"
#include "cyto/types.hpp"
#include "cyto/weights.hpp"

namespace cyto {

// ---------------------------------------------------------------------------
// Text side: closed lowercase vocabulary with a learned embedding table.
// ---------------------------------------------------------------------------

struct TextVocab {
    static constexpr int null_id = 0;

    static const std::vector<std::string>& words() {
        static const std::vector<std::string> w{
            "<null>", "a",    "normal", "cervical", "cytopathological", "image", "with",
            "cell",   "nilm", "asc-us", "lsil",     "asc-h",            "hsil"};
        return w;
    }
    static int64_t size() { return int64_t(words().size()); }

    static int id(const std::string& word) {
        const auto& w = words();
        for (size_t i = 0; i < w.size(); ++i)
            if (w[i] == word) return int(i);
        throw InvalidInput("word not in vocabulary: " + word);
    }

    // Lowercases and splits on whitespace; every word must be in-vocabulary.
    static std::vector<int> tokenize(const std::string& prompt) {
        std::vector<int> ids;
        std::string cur;
        auto flush = [&] {
            if (!cur.empty()) {
                ids.push_back(id(cur));
                cur.clear();
            }
        };
        for (char c : prompt) {
            if (std::isspace(static_cast<unsigned char>(c)))
                flush();
            else
                cur.push_back(char(std::tolower(static_cast<unsigned char>(c))));
        }
        flush();
        if (ids.empty()) throw InvalidInput("empty prompt");
        return ids;
    }
};

inline std::string normal_prompt() { return "A normal cervical cytopathological image"; }

inline std::string class_prompt(CellType cls) {
    return std::string("A cervical cytopathological image with ") + cell_type_name(cls) +
           " cell";
}

inline std::vector<int> null_text_ids() { return {TextVocab::null_id}; }

// ---------------------------------------------------------------------------
// Building blocks
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> timestep_embedding(int64_t t, int64_t dim) {
    int64_t half = dim / 2;
    Tensor<S> e({1, dim});
    for (int64_t k = 0; k < half; ++k) {
        double f = std::exp(-std::log(10000.0) * double(k) / double(half - 1));
        e.v[k] = S(std::sin(double(t) * f));
        e.v[half + k] = S(std::cos(double(t) * f));
    }
    return e;
}

template <class S>
struct LoraAdapter {
    Var<S> a;  // [r, d]
    Var<S> b;  // [d, r]
    S mult = S(1);

    Var<S> delta(const Var<S>& x) const {
        return scale(vmatmul_nt(vmatmul_nt(x, a), b), mult);
    }
    int64_t rank() const { return a->val.shape[0]; }
    int64_t dim() const { return a->val.shape[1]; }
};

// h = x·W0^T + scale · (x·A^T)·B^T on plain tensors; x is [d] or [T,d].
template <class S>
Tensor<S> lora_forward(const Tensor<S>& x, const Tensor<S>& w0, const Tensor<S>& a,
                       const Tensor<S>& b, S mult) {
    Tensor<S> x2 = x.ndim() == 1 ? x.reshaped({1, x.shape[0]}) : x;
    if (w0.ndim() != 2 || x2.shape[1] != w0.shape[1])
        throw InvalidInput("lora_forward: x/W0 dimension mismatch");
    if (a.shape[1] != w0.shape[1] || b.shape[0] != w0.shape[0] || b.shape[1] != a.shape[0])
        throw InvalidInput("lora_forward: adapter dimension mismatch");
    Tensor<S> h = matmul_nt(x2, w0);
    Tensor<S> d = matmul_nt(matmul_nt(x2, a), b);
    for (int64_t i = 0; i < h.numel(); ++i) h.v[i] += mult * d.v[i];
    return x.ndim() == 1 ? h.reshaped({h.shape[1]}) : h;
}

// W0 + scale·B·A, accumulated in double so the result carries one rounding.
template <class S>
Tensor<S> merge_lora(const Tensor<S>& w0, const Tensor<S>& a, const Tensor<S>& b, S mult) {
    if (a.shape[1] != w0.shape[1] || b.shape[0] != w0.shape[0] || b.shape[1] != a.shape[0])
        throw InvalidInput("merge_lora: dimension mismatch");
    Tensor<double> ba = matmul(b.template cast<double>(), a.template cast<double>());
    Tensor<S> out = w0;
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[i] = S(double(w0.v[i]) + double(mult) * ba.v[i]);
    return out;
}

template <class S>
struct ResBlock {
    GroupNormLayer<S> n1, n2;
    Conv2dLayer<S> c1, c2, cskip;
    LinearLayer<S> tproj;
    bool need_skip = false;

    ResBlock() = default;
    ResBlock(ParamStore<S>& ps, const std::string& name, int64_t cin, int64_t cout,
             int64_t time_dim, int64_t groups, Rng& rng) {
        n1 = GroupNormLayer<S>(ps, name + ".n1", cin, groups);
        c1 = Conv2dLayer<S>(ps, name + ".c1", cin, cout, 3, rng, 1, 1);
        tproj = LinearLayer<S>(ps, name + ".t", time_dim, cout, rng);
        n2 = GroupNormLayer<S>(ps, name + ".n2", cout, groups);
        c2 = Conv2dLayer<S>(ps, name + ".c2", cout, cout, 3, rng, 1, 1);
        need_skip = cin != cout;
        if (need_skip) cskip = Conv2dLayer<S>(ps, name + ".cs", cin, cout, 1, rng, 1, 0);
    }

    // The timestep bias lands after the second normalization: a per-channel
    // shift added ahead of a GroupNorm would be cancelled by it.
    Var<S> forward(const Var<S>& x, const Var<S>& temb) const {
        Var<S> h = c1.forward(silu(n1.forward(x)));
        Var<S> tb = reshape(tproj.forward(silu(temb)), {h->val.shape[0]});
        h = add_channel_bias(n2.forward(h), tb);
        h = c2.forward(silu(h));
        return add(need_skip ? cskip.forward(x) : x, h);
    }
};

// Gated self-attention over [image tokens ; projected grounding tokens].
// Residual contributions are scaled by tanh of scalars initialized to zero,
// so a freshly attached block is an exact no-op.
template <class S>
struct GatedBlock {
    LinearLayer<S> proj;  // ctx_dim -> d
    LayerNormLayer<S> ln1, ln2;
    LinearLayer<S> wq, wk, wv, wo;  // d -> d, biasless
    LinearLayer<S> ff1, ff2;
    Var<S> alpha_attn, alpha_mlp;

    GatedBlock() = default;
    GatedBlock(ParamStore<S>& ps, const std::string& name, int64_t d, int64_t ctx_dim,
               Rng& rng) {
        proj = LinearLayer<S>(ps, name + ".proj", ctx_dim, d, rng);
        ln1 = LayerNormLayer<S>(ps, name + ".ln1", d);
        wq = LinearLayer<S>(ps, name + ".wq", d, d, rng, false);
        wk = LinearLayer<S>(ps, name + ".wk", d, d, rng, false);
        wv = LinearLayer<S>(ps, name + ".wv", d, d, rng, false);
        wo = LinearLayer<S>(ps, name + ".wo", d, d, rng, false);
        ln2 = LayerNormLayer<S>(ps, name + ".ln2", d);
        ff1 = LinearLayer<S>(ps, name + ".ff1", d, 4 * d, rng);
        ff2 = LinearLayer<S>(ps, name + ".ff2", 4 * d, d, rng);
        alpha_attn = ps.add(name + ".alpha_attn", Tensor<S>::zeros({1}));
        alpha_mlp = ps.add(name + ".alpha_mlp", Tensor<S>::zeros({1}));
    }

    // grounding: [K, ctx_dim], K >= 0. Output length always equals input length.
    Var<S> forward(const Var<S>& img_tokens, const Var<S>& grounding) const {
        int64_t n_img = img_tokens->val.shape[0];
        Var<S> cat = grounding->val.shape[0] > 0
                         ? concat_dim0<S>({img_tokens, proj.forward(grounding)})
                         : img_tokens;
        Var<S> n = ln1.forward(cat);
        Var<S> att = wo.forward(attention(wq.forward(n), wk.forward(n), wv.forward(n)));
        Var<S> v =
            add(img_tokens, scale_by(slice_dim0(att, 0, n_img), tanh_op(alpha_attn)));
        Var<S> m = ff2.forward(gelu(ff1.forward(ln2.forward(v))));
        return add(v, scale_by(m, tanh_op(alpha_mlp)));
    }
};

// Transformer block: optional gated self-attention, then cross-attention over
// the per-level projection of the text context, then feed-forward.
template <class S>
struct CrossAttnBlock {
    int64_t d = 0;
    LayerNormLayer<S> ln1, ln2;
    LinearLayer<S> wq, wk, wv, wo;  // square, biasless: the adapter targets
    LinearLayer<S> ctx_proj;        // ctx_dim -> d
    LinearLayer<S> ff1, ff2;
    std::optional<LoraAdapter<S>> aq, ak, av, ao;
    std::shared_ptr<GatedBlock<S>> gated;

    CrossAttnBlock() = default;
    CrossAttnBlock(ParamStore<S>& ps, const std::string& name, int64_t d_, int64_t ctx_dim,
                   Rng& rng)
        : d(d_) {
        ln1 = LayerNormLayer<S>(ps, name + ".ln1", d);
        wq = LinearLayer<S>(ps, name + ".wq", d, d, rng, false);
        wk = LinearLayer<S>(ps, name + ".wk", d, d, rng, false);
        wv = LinearLayer<S>(ps, name + ".wv", d, d, rng, false);
        wo = LinearLayer<S>(ps, name + ".wo", d, d, rng, false);
        ctx_proj = LinearLayer<S>(ps, name + ".cp", ctx_dim, d, rng);
        ln2 = LayerNormLayer<S>(ps, name + ".ln2", d);
        ff1 = LinearLayer<S>(ps, name + ".ff1", d, 4 * d, rng);
        ff2 = LinearLayer<S>(ps, name + ".ff2", 4 * d, d, rng);
    }

    Var<S> apply(const LinearLayer<S>& base, const std::optional<LoraAdapter<S>>& ad,
                 const Var<S>& x) const {
        Var<S> y = vmatmul_nt(x, base.w);
        if (ad) y = add(y, ad->delta(x));
        return y;
    }

    Var<S> forward(const Var<S>& x_chw, const Var<S>& ctx_raw, const Var<S>& grounding) const {
        int64_t C = x_chw->val.shape[0], H = x_chw->val.shape[1], W = x_chw->val.shape[2];
        Var<S> t = transpose2d(reshape(x_chw, {C, H * W}));
        if (gated) t = gated->forward(t, grounding);
        Var<S> ctx = ctx_proj.forward(ctx_raw);
        Var<S> n = ln1.forward(t);
        Var<S> att = attention(apply(wq, aq, n), apply(wk, ak, ctx), apply(wv, av, ctx));
        t = add(t, apply(wo, ao, att));
        t = add(t, ff2.forward(gelu(ff1.forward(ln2.forward(t)))));
        return reshape(transpose2d(t), {C, H, W});
    }
};

// ---------------------------------------------------------------------------
// The model
// ---------------------------------------------------------------------------

struct DenoiserConfig {
    int64_t latent_channels = 4;
    int64_t ext_channels = 0;  // nonzero once the input layer is extended
    std::vector<int64_t> widths{32, 64, 128};
    int64_t ctx_dim = 64;
    int64_t time_base = 64;
    int64_t time_dim = 128;
    int64_t groups = 8;
};

template <class S>
struct Denoiser {
    DenoiserConfig cfg;
    uint64_t init_seed = 0;
    ParamStore<S> ps;         // base parameters
    ParamStore<S> lora_ps;    // adapter parameters after attach_lora
    ParamStore<S> editor_ps;  // gated layers + input extension (+ grounding encoder)

    Var<S> text_table;
    LinearLayer<S> t1, t2;
    Conv2dLayer<S> conv_in, conv_in_ext;
    Conv2dLayer<S> down0, down1, up1, up0;
    ResBlock<S> res_d0, res_d1, res_m1, res_m2, res_u1, res_u0;
    CrossAttnBlock<S> attn0, attn1, attnm;
    GroupNormLayer<S> n_out;
    Conv2dLayer<S> conv_out;

    bool has_lora = false, has_gated = false, has_ext = false;
    int64_t lora_rank = 0;
    double lora_scale = 1.0;

    explicit Denoiser(DenoiserConfig c = {}, uint64_t seed = 1) : cfg(std::move(c)),
                                                                  init_seed(seed) {
        if (cfg.widths.size() != 3) throw ConfigError("denoiser expects 3 level widths");
        Rng rng = derive_rng(seed, "denoiser-init");
        int64_t w0 = cfg.widths[0], w1 = cfg.widths[1], w2 = cfg.widths[2];

        text_table = ps.add("text.table",
                            gaussian_init<S>(rng, {TextVocab::size(), cfg.ctx_dim}, 0.02));
        t1 = LinearLayer<S>(ps, "unet.time.l1", cfg.time_base, cfg.time_dim, rng);
        t2 = LinearLayer<S>(ps, "unet.time.l2", cfg.time_dim, cfg.time_dim, rng);

        conv_in = Conv2dLayer<S>(ps, "unet.conv_in", cfg.latent_channels, w0, 3, rng, 1, 1);
        res_d0 = ResBlock<S>(ps, "unet.d0.res", w0, w0, cfg.time_dim, cfg.groups, rng);
        attn0 = CrossAttnBlock<S>(ps, "unet.d0.attn", w0, cfg.ctx_dim, rng);
        down0 = Conv2dLayer<S>(ps, "unet.d0.down", w0, w1, 3, rng, 2, 1);
        res_d1 = ResBlock<S>(ps, "unet.d1.res", w1, w1, cfg.time_dim, cfg.groups, rng);
        attn1 = CrossAttnBlock<S>(ps, "unet.d1.attn", w1, cfg.ctx_dim, rng);
        down1 = Conv2dLayer<S>(ps, "unet.d1.down", w1, w2, 3, rng, 2, 1);
        res_m1 = ResBlock<S>(ps, "unet.mid.res1", w2, w2, cfg.time_dim, cfg.groups, rng);
        attnm = CrossAttnBlock<S>(ps, "unet.mid.attn", w2, cfg.ctx_dim, rng);
        res_m2 = ResBlock<S>(ps, "unet.mid.res2", w2, w2, cfg.time_dim, cfg.groups, rng);
        up1 = Conv2dLayer<S>(ps, "unet.u1.up", w2, w1, 3, rng, 1, 1);
        res_u1 = ResBlock<S>(ps, "unet.u1.res", 2 * w1, w1, cfg.time_dim, cfg.groups, rng);
        up0 = Conv2dLayer<S>(ps, "unet.u0.up", w1, w0, 3, rng, 1, 1);
        res_u0 = ResBlock<S>(ps, "unet.u0.res", 2 * w0, w0, cfg.time_dim, cfg.groups, rng);
        n_out = GroupNormLayer<S>(ps, "unet.out.n", w0, cfg.groups);
        conv_out = Conv2dLayer<S>(ps, "unet.out.c", w0, cfg.latent_channels, 3, rng, 1, 1);
        // zero-init output head: untrained model predicts zero noise
        std::fill(conv_out.w->val.v.begin(), conv_out.w->val.v.end(), S(0));
    }

    int64_t in_channels() const { return cfg.latent_channels + (has_ext ? cfg.ext_channels : 0); }

    std::vector<CrossAttnBlock<S>*> attn_blocks() { return {&attn0, &attn1, &attnm}; }

    Var<S> forward(const Tensor<S>& input, int64_t t, const Conditioning<S>& cond) const {
        return forward_core(input, t, cond.text_ids, constant(cond.grounding));
    }

    // grounding enters as a graph node so a token encoder can train through
    // the model; pass a [0,*] constant for no tokens.
    Var<S> forward_core(const Tensor<S>& input, int64_t t, const std::vector<int>& text_ids,
                        const Var<S>& grounding) const {
        if (input.ndim() != 3 || input.shape[0] != in_channels())
            throw InvalidInput("denoiser input must be [" + std::to_string(in_channels()) +
                               ",h,w], got " + shape_str(input.shape));
        if (input.shape[1] % 4 || input.shape[2] % 4)
            throw InvalidInput("denoiser latent dims must be divisible by 4");
        if (text_ids.empty()) throw InvalidInput("conditioning needs text ids");
        if (!has_gated && grounding->val.shape[0] > 0)
            throw ConfigError("grounding tokens supplied but no gated layers attached");
        if (grounding->val.shape[0] > 0 && grounding->val.shape[1] != cfg.ctx_dim)
            throw InvalidInput("grounding token dim mismatch");

        Var<S> z = constant(input);
        Var<S> temb =
            t2.forward(silu(t1.forward(constant(timestep_embedding<S>(t, cfg.time_base)))));
        Var<S> ctx = embedding(text_table, text_ids);
        const Var<S>& g = grounding;

        Var<S> x = conv_in.forward(has_ext ? slice_dim0(z, 0, cfg.latent_channels) : z);
        if (has_ext)
            x = add(x, conv_in_ext.forward(slice_dim0(z, cfg.latent_channels,
                                                      cfg.ext_channels)));

        Var<S> h0 = attn0.forward(res_d0.forward(x, temb), ctx, g);
        Var<S> h1 = attn1.forward(res_d1.forward(down0.forward(h0), temb), ctx, g);
        Var<S> m = res_m2.forward(attnm.forward(res_m1.forward(down1.forward(h1), temb),
                                                ctx, g),
                                  temb);
        Var<S> y1 = res_u1.forward(
            concat_dim0<S>({up1.forward(upsample_nearest2x(m)), h1}), temb);
        Var<S> y0 = res_u0.forward(
            concat_dim0<S>({up0.forward(upsample_nearest2x(y1)), h0}), temb);
        return conv_out.forward(silu(n_out.forward(y0)));
    }

    Tensor<S> predict_tensor(const Tensor<S>& input, int64_t t,
                             const Conditioning<S>& cond) const {
        NoGradGuard ng;
        return forward(input, t, cond)->val;
    }
};

// Exposes a denoiser (with whatever is attached) to the samplers. `extra`
// conditioning planes, when present, are appended to z_t ahead of the model.
template <class S>
struct DenoiserPredictor : NoisePredictor<S> {
    const Denoiser<S>& model;
    explicit DenoiserPredictor(const Denoiser<S>& m) : model(m) {}

    Tensor<S> predict(const Tensor<S>& z_t, int64_t t, const Conditioning<S>& cond) override {
        if (cond.extra_channels.ndim() == 3) {
            Tensor<S> in({z_t.shape[0] + cond.extra_channels.shape[0], z_t.shape[1],
                          z_t.shape[2]});
            std::copy(z_t.v.begin(), z_t.v.end(), in.v.begin());
            std::copy(cond.extra_channels.v.begin(), cond.extra_channels.v.end(),
                      in.v.begin() + z_t.numel());
            return model.predict_tensor(in, t, cond);
        }
        return model.predict_tensor(z_t, t, cond);
    }
};

// ---------------------------------------------------------------------------
// Attachment / merge
// ---------------------------------------------------------------------------

template <class S>
void attach_lora(Denoiser<S>& m, int64_t rank, double scale, Rng& rng) {
    if (m.has_lora) throw ConfigError("lora adapters already attached");
    const char* names[3] = {"l0", "l1", "lm"};
    auto blocks = m.attn_blocks();
    for (size_t i = 0; i < blocks.size(); ++i) {
        int64_t d = blocks[i]->d;
        if (rank < 1 || rank > d / 2)
            throw ConfigError("lora rank " + std::to_string(rank) +
                              " out of range for dim " + std::to_string(d));
        auto mk = [&](const char* proj) {
            LoraAdapter<S> ad;
            std::string base = std::string("lora.") + names[i] + "." + proj;
            ad.a = m.lora_ps.add(base + ".a",
                                 gaussian_init<S>(rng, {rank, d}, 1.0 / std::sqrt(double(d))));
            ad.b = m.lora_ps.add(base + ".b", Tensor<S>::zeros({d, rank}));
            ad.mult = S(scale);
            return ad;
        };
        blocks[i]->aq = mk("q");
        blocks[i]->ak = mk("k");
        blocks[i]->av = mk("v");
        blocks[i]->ao = mk("o");
    }
    m.ps.freeze_all();
    m.has_lora = true;
    m.lora_rank = rank;
    m.lora_scale = scale;
}

// Folds scale·B·A into every adapted base matrix and removes the adapters;
// the merged model computes the same function as the adapter model.
template <class S>
void merge_lora_into_base(Denoiser<S>& m) {
    if (!m.has_lora) throw ConfigError("no lora adapters to merge");
    for (auto* blk : m.attn_blocks()) {
        auto fold = [&](LinearLayer<S>& base, std::optional<LoraAdapter<S>>& ad) {
            base.w->val = merge_lora(base.w->val, ad->a->val, ad->b->val, ad->mult);
            ad.reset();
        };
        fold(blk->wq, blk->aq);
        fold(blk->wk, blk->ak);
        fold(blk->wv, blk->av);
        fold(blk->wo, blk->ao);
    }
    m.lora_ps = ParamStore<S>{};
    m.has_lora = false;
}

template <class S>
void attach_gated_layers(Denoiser<S>& m, Rng& rng) {
    if (m.has_gated) throw ConfigError("gated layers already attached");
    m.ps.freeze_all();
    m.lora_ps.freeze_all();
    const char* names[3] = {"l0", "l1", "lm"};
    auto blocks = m.attn_blocks();
    for (size_t i = 0; i < blocks.size(); ++i)
        blocks[i]->gated = std::make_shared<GatedBlock<S>>(
            m.editor_ps, std::string("gated.") + names[i], blocks[i]->d, m.cfg.ctx_dim, rng);
    m.has_gated = true;
}

// Widens the first convolution by a zero-initialized block for `extra`
// conditioning channels; the original 4-channel slice stays frozen.
template <class S>
void extend_input_channels(Denoiser<S>& m, int64_t extra, Rng& rng) {
    if (m.has_ext) throw ConfigError("input channels already extended");
    if (extra < 1) throw ConfigError("extension channel count must be >= 1");
    m.conv_in_ext =
        Conv2dLayer<S>(m.editor_ps, "unet.conv_in_ext", extra, m.cfg.widths[0], 3, rng, 1, 1);
    std::fill(m.conv_in_ext.w->val.v.begin(), m.conv_in_ext.w->val.v.end(), S(0));
    m.cfg.ext_channels = extra;
    m.has_ext = true;
}

// ---------------------------------------------------------------------------
// Training objective
// ---------------------------------------------------------------------------

// Noise-prediction MSE at a uniformly drawn timestep. model_fwd must map
// (z_t, t, cond) to the predicted-noise Var.
template <class S, class Fwd>
Var<S> ldm_loss(Fwd&& model_fwd, const NoiseSchedule& ns, const Tensor<S>& z0,
                const Conditioning<S>& cond, Rng& rng) {
    int64_t t = rng.uniform_int(1, ns.steps);
    Tensor<S> eps = Tensor<S>::randn(z0.shape, rng);
    Tensor<S> zt = forward_diffuse(ns, z0, t, eps);
    return mse_loss(model_fwd(zt, t, cond), constant(eps));
}

// ---------------------------------------------------------------------------
// Serialization (float models only)
// ---------------------------------------------------------------------------

inline std::string join_widths(const std::vector<int64_t>& w) {
    std::string s;
    for (size_t i = 0; i < w.size(); ++i) s += (i ? "," : "") + std::to_string(w[i]);
    return s;
}

inline std::map<std::string, std::string> denoiser_manifest(const Denoiser<real>& m,
                                                            const NoiseSchedule& ns) {
    return {
        {"kind", "denoiser-base"},
        {"widths", join_widths(m.cfg.widths)},
        {"ctx_dim", std::to_string(m.cfg.ctx_dim)},
        {"time_base", std::to_string(m.cfg.time_base)},
        {"time_dim", std::to_string(m.cfg.time_dim)},
        {"groups", std::to_string(m.cfg.groups)},
        {"in_channels", std::to_string(m.cfg.latent_channels)},
        {"seed", std::to_string(m.init_seed)},
        {"T", std::to_string(ns.steps)},
        {"beta_start", num_str(ns.betas.empty() ? 0.0 : ns.betas.front())},
        {"beta_end", num_str(ns.betas.empty() ? 0.0 : ns.betas.back())},
    };
}

inline void save_denoiser_base(const Denoiser<real>& m, const NoiseSchedule& ns,
                               const std::string& path) {
    save_weights(path, pack_store(m.ps, denoiser_manifest(m, ns)));
}

inline Denoiser<real> load_denoiser_base(const std::string& path, NoiseSchedule* ns_out = nullptr) {
    WeightFile w = load_weights(path);
    if (!w.manifest.count("kind") || w.manifest.at("kind") != "denoiser-base")
        throw IoError("not a denoiser-base weight file: " + path);
    DenoiserConfig cfg;
    cfg.widths.clear();
    {
        std::string ws = w.manifest.at("widths");
        size_t pos = 0;
        while (pos < ws.size()) {
            size_t c = ws.find(',', pos);
            cfg.widths.push_back(std::stoll(ws.substr(pos, c - pos)));
            pos = c == std::string::npos ? ws.size() : c + 1;
        }
    }
    cfg.ctx_dim = std::stoll(w.manifest.at("ctx_dim"));
    cfg.time_base = std::stoll(w.manifest.at("time_base"));
    cfg.time_dim = std::stoll(w.manifest.at("time_dim"));
    cfg.groups = std::stoll(w.manifest.at("groups"));
    Denoiser<real> m(cfg, std::stoull(w.manifest.at("seed")));
    unpack_into_store(w, m.ps);
    if (ns_out)
        *ns_out = NoiseSchedule::linear(std::stoll(w.manifest.at("T")),
                                        std::stod(w.manifest.at("beta_start")),
                                        std::stod(w.manifest.at("beta_end")));
    return m;
}

inline void save_lora(const Denoiser<real>& m, const std::string& path, uint64_t seed) {
    if (!m.has_lora) throw ConfigError("no lora adapters to save");
    std::map<std::string, std::string> mf{
        {"kind", "lora"},
        {"rank", std::to_string(m.lora_rank)},
        {"scale", num_str(m.lora_scale)},
        {"base_fingerprint", hex64(store_fingerprint(m.ps))},
        {"seed", std::to_string(seed)},
    };
    save_weights(path, pack_store(m.lora_ps, mf));
}

// Attaches adapters and loads their weights. Refuses a base-fingerprint
// mismatch unless forced.
inline void load_lora(Denoiser<real>& m, const std::string& path, bool force = false) {
    WeightFile w = load_weights(path);
    if (!w.manifest.count("kind") || w.manifest.at("kind") != "lora")
        throw IoError("not a lora weight file: " + path);
    std::string want = hex64(store_fingerprint(m.ps));
    std::string got = w.manifest.count("base_fingerprint") ? w.manifest.at("base_fingerprint")
                                                           : "?";
    if (got != want && !force)
        throw ConfigError("lora base fingerprint mismatch: adapters trained on " + got +
                          ", model is " + want + " (use force to override)");
    int64_t rank = std::stoll(w.manifest.at("rank"));
    double scale = std::stod(w.manifest.at("scale"));
    Rng rng = derive_rng(std::stoull(w.manifest.at("seed")), "lora-init");
    attach_lora(m, rank, scale, rng);
    unpack_into_store(w, m.lora_ps);
}

}  // namespace cyto
