#pragma once

// Forward noising, the deterministic DDIM update, classifier-free guidance,
// and the sampling loop. Everything here works on plain tensors; training
// losses are assembled from autodiff ops by the model owners.

#include "cyto/rng.hpp"
#include "cyto/schedule.hpp"
#include "cyto/tensor.hpp"

namespace cyto {

// z_t = sqrt(abar_t)*z0 + sqrt(1-abar_t)*eps. t=0 returns z0 unchanged.
template <class S>
Tensor<S> forward_diffuse(const NoiseSchedule& ns, const Tensor<S>& z0, int64_t t,
                          const Tensor<S>& eps) {
    if (!z0.same_shape(eps)) throw InvalidInput("forward_diffuse shape mismatch");
    S a = S(ns.sqrt_alpha_bar(t));
    S b = S(ns.sqrt_one_minus_alpha_bar(t));
    Tensor<S> out(z0.shape);
    for (int64_t i = 0; i < z0.numel(); ++i) out.v[i] = a * z0.v[i] + b * eps.v[i];
    return out;
}

// Deterministic (eta=0) update from t to t_prev given the predicted noise:
// recover z0_hat, then re-noise it to the earlier level with the same eps_hat.
template <class S>
Tensor<S> ddim_step(const NoiseSchedule& ns, const Tensor<S>& z_t, const Tensor<S>& eps_hat,
                    int64_t t, int64_t t_prev) {
    if (!z_t.same_shape(eps_hat)) throw InvalidInput("ddim_step shape mismatch");
    if (t_prev >= t) throw InvalidInput("ddim_step requires t_prev < t");
    double sa = ns.sqrt_alpha_bar(t);
    double sb = ns.sqrt_one_minus_alpha_bar(t);
    double sa_prev = ns.sqrt_alpha_bar(t_prev);
    double sb_prev = ns.sqrt_one_minus_alpha_bar(t_prev);
    Tensor<S> out(z_t.shape);
    for (int64_t i = 0; i < z_t.numel(); ++i) {
        double z0_hat = (double(z_t.v[i]) - sb * double(eps_hat.v[i])) / sa;
        out.v[i] = S(sa_prev * z0_hat + sb_prev * double(eps_hat.v[i]));
    }
    return out;
}

// eps = eps_uncond + scale * (eps_cond - eps_uncond)
template <class S>
Tensor<S> cfg_combine(const Tensor<S>& eps_uncond, const Tensor<S>& eps_cond, double scale) {
    if (!eps_uncond.same_shape(eps_cond)) throw InvalidInput("cfg_combine shape mismatch");
    Tensor<S> out(eps_cond.shape);
    for (int64_t i = 0; i < out.numel(); ++i)
        out.v[i] = S(double(eps_uncond.v[i]) +
                     scale * (double(eps_cond.v[i]) - double(eps_uncond.v[i])));
    return out;
}

template <class S>
struct Conditioning {
    std::vector<int> text_ids;
    Tensor<S> grounding;       // [K, ctx_dim]; zero rows means no grounding tokens
    Tensor<S> extra_channels;  // extra model input planes; empty when unused

    Conditioning() : grounding({0, 0}), extra_channels({0}) {}
};

template <class S>
struct NoisePredictor {
    virtual ~NoisePredictor() = default;
    virtual Tensor<S> predict(const Tensor<S>& z_t, int64_t t, const Conditioning<S>& cond) = 0;
};

// Guided prediction used by every sampler: two forward passes blended by CFG.
// scale == 1 short-circuits to the conditional pass alone.
template <class S>
Tensor<S> guided_predict(NoisePredictor<S>& model, const Tensor<S>& z_t, int64_t t,
                         const Conditioning<S>& cond, const Conditioning<S>& uncond,
                         double cfg_scale) {
    Tensor<S> eps_c = model.predict(z_t, t, cond);
    if (cfg_scale == 1.0) return eps_c;
    Tensor<S> eps_u = model.predict(z_t, t, uncond);
    return cfg_combine(eps_u, eps_c, cfg_scale);
}

template <class S>
Tensor<S> ddim_sample_from(NoisePredictor<S>& model, const NoiseSchedule& ns, Tensor<S> z,
                           int64_t num_steps, double cfg_scale, const Conditioning<S>& cond,
                           const Conditioning<S>& uncond) {
    const std::vector<int64_t> grid = ns.ddim_grid(num_steps);
    for (size_t k = 0; k + 1 < grid.size(); ++k) {
        Tensor<S> eps = guided_predict(model, z, grid[k], cond, uncond, cfg_scale);
        z = ddim_step(ns, z, eps, grid[k], grid[k + 1]);
    }
    return z;
}

template <class S>
Tensor<S> ddim_sample(NoisePredictor<S>& model, const NoiseSchedule& ns, const Shape& latent_shape,
                      int64_t num_steps, double cfg_scale, const Conditioning<S>& cond,
                      const Conditioning<S>& uncond, Rng& rng) {
    Tensor<S> z = Tensor<S>::randn(latent_shape, rng);
    return ddim_sample_from(model, ns, std::move(z), num_steps, cfg_scale, cond, uncond);
}

}  // namespace cyto
