#pragma once

// Region editor: a copy of the generator widened to accept [z_t | background
// latent | mask] and fitted with gated self-attention over grounding tokens.
// Editing re-noises a source patch and denoises it conditioned on what must
// stay (mask 1) and what to synthesize (mask 0, plus a grounded class token).

#include <algorithm>
#include <functional>

#include "cyto/codec.hpp"
#include "cyto/denoiser.hpp"
#include "cyto/grounding.hpp"

namespace cyto {

// Latent-resolution keep mask: 1 outside the box, 0 where cell centers fall
// inside it (half-open on the far edges). A positive-area box too small to
// catch any center still claims the cell under its center.
template <class S>
Tensor<S> box_to_mask(const BoundingBox& box, int64_t h, int64_t w) {
    if (h < 1 || w < 1) throw InvalidInput("box_to_mask: empty grid");
    if (!box.valid() || box.area() <= 0)
        throw InvalidInput("box_to_mask: box must be valid with positive area");
    Tensor<S> mask = Tensor<S>::full({1, h, w}, S(1));
    bool any = false;
    for (int64_t r = 0; r < h; ++r)
        for (int64_t c = 0; c < w; ++c) {
            double cx = double(c) + 0.5, cy = double(r) + 0.5;
            if (cx >= box.x0 * double(w) && cx < box.x1 * double(w) &&
                cy >= box.y0 * double(h) && cy < box.y1 * double(h)) {
                mask.v[r * w + c] = S(0);
                any = true;
            }
        }
    if (!any) {
        int64_t c = std::clamp<int64_t>(int64_t(box.cx() * double(w)), 0, w - 1);
        int64_t r = std::clamp<int64_t>(int64_t(box.cy() * double(h)), 0, h - 1);
        mask.v[r * w + c] = S(0);
    }
    return mask;
}

// z with every channel multiplied by the [1,h,w] mask.
template <class S>
Tensor<S> mask_latent(const Tensor<S>& z, const Tensor<S>& mask) {
    if (z.ndim() != 3 || mask.ndim() != 3 || mask.shape[0] != 1 ||
        mask.shape[1] != z.shape[1] || mask.shape[2] != z.shape[2])
        throw InvalidInput("mask_latent: shape mismatch");
    Tensor<S> out = z;
    int64_t hw = z.shape[1] * z.shape[2];
    for (int64_t c = 0; c < z.shape[0]; ++c)
        for (int64_t i = 0; i < hw; ++i) out.v[c * hw + i] *= mask.v[i];
    return out;
}

// [z_t(4) | z0_bg(4) | mask(1)] stacked along channels.
template <class S>
Tensor<S> build_inpaint_input(const Tensor<S>& z_t, const Tensor<S>& z0_bg,
                              const Tensor<S>& mask) {
    if (z_t.ndim() != 3 || z_t.shape[0] != 4) throw InvalidInput("z_t must be [4,h,w]");
    if (z0_bg.shape != z_t.shape) throw InvalidInput("background latent shape mismatch");
    if (mask.ndim() != 3 || mask.shape[0] != 1 || mask.shape[1] != z_t.shape[1] ||
        mask.shape[2] != z_t.shape[2])
        throw InvalidInput("mask must be [1,h,w] matching the latent");
    Tensor<S> nine({9, z_t.shape[1], z_t.shape[2]});
    std::copy(z_t.v.begin(), z_t.v.end(), nine.v.begin());
    std::copy(z0_bg.v.begin(), z0_bg.v.end(), nine.v.begin() + z_t.numel());
    std::copy(mask.v.begin(), mask.v.end(), nine.v.begin() + 2 * z_t.numel());
    return nine;
}

// One reverse-process update: full nine-channel view in, next latent out.
// The whole per-step computation sits behind this signature so a stub can
// replace it wholesale in tests.
template <class S>
using EditStep = std::function<Tensor<S>(const Tensor<S>& nine, int64_t t, int64_t t_prev)>;

// Re-noises the source latent to the terminal step, then walks the sampling
// grid; every step sees the background latent and mask rebuilt around the
// current z. Returns the final latent.
template <class S>
Tensor<S> run_edit_loop(const NoiseSchedule& ns, const Tensor<S>& z0_src,
                        const Tensor<S>& mask, int64_t num_steps, const EditStep<S>& step,
                        Rng& rng) {
    Tensor<S> z0_bg = mask_latent(z0_src, mask);
    auto grid = ns.ddim_grid(num_steps);
    Tensor<S> eps = Tensor<S>::randn(z0_src.shape, rng);
    Tensor<S> z = forward_diffuse(ns, z0_src, ns.steps, eps);
    for (size_t k = 0; k + 1 < grid.size(); ++k)
        z = step(build_inpaint_input(z, z0_bg, mask), grid[k], grid[k + 1]);
    return z;
}

// Test stub: "denoises" by echoing the background channels. Exact background
// preservation by construction.
template <class S>
EditStep<S> echo_edit_step() {
    return [](const Tensor<S>& nine, int64_t, int64_t) {
        Tensor<S> z({4, nine.shape[1], nine.shape[2]});
        int64_t n = z.numel();
        std::copy(nine.v.begin() + n, nine.v.begin() + 2 * n, z.v.begin());
        return z;
    };
}

// ---------------------------------------------------------------------------
// Editor bundle
// ---------------------------------------------------------------------------

struct EditorTrainConfig {
    int64_t iterations = 4000;
    double lr = 1e-3;
    int64_t batch = 2;
    double null_dropout = 0.1;  // drops text AND grounding together
};

struct EditSample {
    TensorF patch;  // [3,P,P], P divisible by 32
    BoundingBox box;
    CellType cls = CellType::NILM;
};

struct EditorModel {
    Denoiser<real> model;  // merged base + gated layers + widened input
    GroundingEncoder<real> ground;
    NoiseSchedule ns;
    uint64_t attach_seed = 0;
    uint64_t base_fp = 0;  // fingerprint of the frozen base at attach time
    int64_t trained_iterations = 0;
    double final_loss = 0;
};

// Takes the stage-1 model (adapters already merged) and bolts on the editor
// parts. num_freqs fixes the grounding box embedding width.
inline EditorModel make_editor(Denoiser<real> base, const NoiseSchedule& ns,
                               int64_t num_freqs, uint64_t seed) {
    if (base.has_lora)
        throw ConfigError("merge adapters into the base before building an editor");
    EditorModel em{std::move(base), {}, ns, seed, 0};
    em.base_fp = store_fingerprint(em.model.ps);
    Rng rng = derive_rng(seed, "editor-init");
    attach_gated_layers(em.model, rng);
    extend_input_channels(em.model, 5, rng);
    em.ground = GroundingEncoder<real>(em.model.editor_ps, "ground", em.model.cfg.ctx_dim,
                                       num_freqs, rng);
    return em;
}

// Classifier-free-guided model step over the nine-channel view.
inline EditStep<real> model_edit_step(const EditorModel& em, const std::vector<int>& text_ids,
                                      const TensorF& grounding, double cfg_scale) {
    return [&em, text_ids, grounding, cfg_scale](const TensorF& nine, int64_t t,
                                                 int64_t t_prev) {
        NoGradGuard ng;
        TensorF z_t({4, nine.shape[1], nine.shape[2]});
        std::copy(nine.v.begin(), nine.v.begin() + z_t.numel(), z_t.v.begin());
        TensorF eps_c = em.model.forward_core(nine, t, text_ids, constant(grounding))->val;
        if (cfg_scale == 1.0) return ddim_step(em.ns, z_t, eps_c, t, t_prev);
        TensorF eps_u = em.model
                            .forward_core(nine, t, null_text_ids(),
                                          constant(TensorF({0, em.model.cfg.ctx_dim})))
                            ->val;
        return ddim_step(em.ns, z_t, cfg_combine(eps_u, eps_c, cfg_scale), t, t_prev);
    };
}

// Noise-prediction training of the editor parameters only (gated layers,
// input extension, grounding encoder). Latents are precomputed once.
inline void train_editor(EditorModel& em, const LatentCodec& codec,
                         const std::vector<EditSample>& samples,
                         const EditorTrainConfig& cfg, uint64_t seed) {
    if (samples.empty()) throw ConfigError("train_editor: no samples");
    std::vector<TensorF> lats;
    std::vector<TensorF> masks;
    for (const auto& s : samples) {
        TensorF z = codec.encode_norm(s.patch);
        if (z.shape[1] % 4 || z.shape[2] % 4)
            throw InvalidInput("train_editor: patch latent dims must be divisible by 4");
        masks.push_back(box_to_mask<real>(s.box, z.shape[1], z.shape[2]));
        lats.push_back(std::move(z));
    }

    Rng rng = derive_rng(seed, "editor-train");
    Adam<real> opt(cfg.lr);
    for (int64_t it = 0; it < cfg.iterations; ++it) {
        em.model.editor_ps.zero_grad();
        Var<real> loss;
        for (int64_t b = 0; b < cfg.batch; ++b) {
            size_t idx = size_t(rng.uniform_int(0, int64_t(samples.size()) - 1));
            const TensorF& z0 = lats[idx];
            const TensorF& mask = masks[idx];
            int64_t t = rng.uniform_int(1, em.ns.steps);
            TensorF eps = Tensor<real>::randn(z0.shape, rng);
            TensorF nine =
                build_inpaint_input(forward_diffuse(em.ns, z0, t, eps), mask_latent(z0, mask),
                                    mask);
            bool drop = rng.uniform() < cfg.null_dropout;
            Var<real> pred;
            if (drop) {
                pred = em.model.forward_core(nine, t, null_text_ids(),
                                             constant(TensorF({0, em.model.cfg.ctx_dim})));
            } else {
                Var<real> g = em.ground.encode_var({{samples[idx].box, samples[idx].cls}});
                pred = em.model.forward_core(
                    nine, t, TextVocab::tokenize(class_prompt(samples[idx].cls)), g);
            }
            Var<real> l = mse_loss(pred, constant(eps));
            loss = loss ? add(loss, l) : l;
        }
        loss = scale(loss, real(1.0 / double(cfg.batch)));
        backward(loss);
        opt.step(em.model.editor_ps);
        em.final_loss = double(loss->val.v[0]);
    }
    em.trained_iterations += cfg.iterations;
}

// Edits one patch: encode, re-noise, grounded denoise, decode. The box is in
// patch-normalized coordinates; the returned patch has the source's shape.
inline TensorF edit_patch(const EditorModel& em, const LatentCodec& codec,
                          const TensorF& src_patch, const BoundingBox& box, CellType target,
                          int64_t num_steps, double cfg_scale, Rng& rng) {
    TensorF z0 = codec.encode_norm(src_patch);
    TensorF mask = box_to_mask<real>(box, z0.shape[1], z0.shape[2]);
    TensorF tokens = em.ground.encode({{box, target}});
    auto step = model_edit_step(em, TextVocab::tokenize(class_prompt(target)), tokens,
                                cfg_scale);
    TensorF z = run_edit_loop(em.ns, z0, mask, num_steps, step, rng);
    return codec.decode_norm(z);
}

inline void save_editor(const EditorModel& em, const std::string& path, uint64_t seed) {
    std::map<std::string, std::string> mf{
        {"kind", "editor"},
        {"base_fingerprint", hex64(em.base_fp)},
        {"num_freqs", std::to_string(em.ground.num_freqs)},
        {"attach_seed", std::to_string(em.attach_seed)},
        {"seed", std::to_string(seed)},
        {"iterations", std::to_string(em.trained_iterations)},
        {"final_loss", num_str(em.final_loss)},
        {"T", std::to_string(em.ns.steps)},
        {"beta_start", num_str(em.ns.betas.empty() ? 0.0 : em.ns.betas.front())},
        {"beta_end", num_str(em.ns.betas.empty() ? 0.0 : em.ns.betas.back())},
    };
    save_weights(path, pack_store(em.model.editor_ps, mf));
}

// Rebuilds the editor around the given merged base. Refuses a fingerprint
// mismatch unless forced.
inline EditorModel load_editor(Denoiser<real> base, const std::string& path,
                               bool force = false) {
    WeightFile w = load_weights(path);
    if (!w.manifest.count("kind") || w.manifest.at("kind") != "editor")
        throw IoError("not an editor weight file: " + path);
    uint64_t want_fp = store_fingerprint(base.ps);
    std::string got = w.manifest.count("base_fingerprint") ? w.manifest.at("base_fingerprint")
                                                           : "?";
    if (got != hex64(want_fp) && !force)
        throw ConfigError("editor base fingerprint mismatch: trained on " + got +
                          ", model is " + hex64(want_fp) + " (use force to override)");
    NoiseSchedule ns = NoiseSchedule::linear(std::stoll(w.manifest.at("T")),
                                             std::stod(w.manifest.at("beta_start")),
                                             std::stod(w.manifest.at("beta_end")));
    EditorModel em = make_editor(std::move(base), ns,
                                 std::stoll(w.manifest.at("num_freqs")),
                                 std::stoull(w.manifest.at("attach_seed")));
    unpack_into_store(w, em.model.editor_ps);
    em.trained_iterations = std::stoll(w.manifest.at("iterations"));
    em.final_loss = std::stod(w.manifest.at("final_loss"));
    return em;
}

}  // namespace cyto
