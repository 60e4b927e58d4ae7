#pragma once

// Image <-> latent codec: a small convolutional autoencoder with spatial
// factor 8 and 4 latent channels. Trained once on the procedural corpus with
// pixel MSE, then frozen; diffusion runs on latents standardized by the
// mean/std recorded here at training time.

#include "cyto/nn.hpp"
#include "cyto/weights.hpp"

namespace cyto {

struct CodecTrainConfig {
    int64_t iterations = 3000;
    double lr = 1e-3;
    int64_t batch = 4;
};

struct LatentCodec {
    static constexpr int64_t factor = 8;
    static constexpr int64_t latent_channels = 4;

    ParamStore<real> ps;
    Conv2dLayer<real> e0, e1, e2, e3;
    GroupNormLayer<real> en0, en1, en2;
    Conv2dLayer<real> d0, d1, d2, d3, d4;
    GroupNormLayer<real> dn0, dn1, dn2, dn3;

    real lat_mean = 0.f, lat_std = 1.f;
    uint64_t init_seed = 0;
    int64_t trained_iterations = 0;
    double final_loss = 0.0, holdout_mae = -1.0;

    explicit LatentCodec(uint64_t seed = 1) : init_seed(seed) {
        Rng rng = derive_rng(seed, "codec-init");
        e0 = Conv2dLayer<real>(ps, "enc.c0", 3, 16, 3, rng, 2, 1);
        en0 = GroupNormLayer<real>(ps, "enc.n0", 16);
        e1 = Conv2dLayer<real>(ps, "enc.c1", 16, 32, 3, rng, 2, 1);
        en1 = GroupNormLayer<real>(ps, "enc.n1", 32);
        e2 = Conv2dLayer<real>(ps, "enc.c2", 32, 32, 3, rng, 2, 1);
        en2 = GroupNormLayer<real>(ps, "enc.n2", 32);
        e3 = Conv2dLayer<real>(ps, "enc.c3", 32, latent_channels, 3, rng, 1, 1);

        d0 = Conv2dLayer<real>(ps, "dec.c0", latent_channels, 32, 3, rng, 1, 1);
        dn0 = GroupNormLayer<real>(ps, "dec.n0", 32);
        d1 = Conv2dLayer<real>(ps, "dec.c1", 32, 32, 3, rng, 1, 1);
        dn1 = GroupNormLayer<real>(ps, "dec.n1", 32);
        d2 = Conv2dLayer<real>(ps, "dec.c2", 32, 32, 3, rng, 1, 1);
        dn2 = GroupNormLayer<real>(ps, "dec.n2", 32);
        d3 = Conv2dLayer<real>(ps, "dec.c3", 32, 32, 3, rng, 1, 1);
        dn3 = GroupNormLayer<real>(ps, "dec.n3", 32);
        d4 = Conv2dLayer<real>(ps, "dec.c4", 32, 3, 3, rng, 1, 1);
    }

    Var<real> encode_var(const Var<real>& img) const {
        Var<real> h = silu(en0.forward(e0.forward(img)));
        h = silu(en1.forward(e1.forward(h)));
        h = silu(en2.forward(e2.forward(h)));
        return e3.forward(h);
    }

    // Raw decoder output; clamping to [0,1] happens in decode().
    Var<real> decode_var(const Var<real>& z) const {
        Var<real> h = silu(dn0.forward(d0.forward(z)));
        h = silu(dn1.forward(d1.forward(upsample_nearest2x(h))));
        h = silu(dn2.forward(d2.forward(upsample_nearest2x(h))));
        h = silu(dn3.forward(d3.forward(upsample_nearest2x(h))));
        return d4.forward(h);
    }

    TensorF encode(const TensorF& img) const {
        if (img.ndim() != 3 || img.shape[0] != 3)
            throw InvalidInput("encode expects a [3,H,W] image");
        if (img.shape[1] % factor != 0 || img.shape[2] % factor != 0)
            throw InvalidInput("encode: image dims must be divisible by " +
                               std::to_string(factor));
        NoGradGuard ng;
        return encode_var(constant(img))->val;
    }

    TensorF decode(const TensorF& z) const {
        if (z.ndim() != 3 || z.shape[0] != latent_channels)
            throw InvalidInput("decode expects a [4,h,w] latent");
        NoGradGuard ng;
        TensorF img = decode_var(constant(z))->val;
        for (auto& x : img.v) x = std::min(1.f, std::max(0.f, x));
        return img;
    }

    TensorF normalize_latent(const TensorF& z) const {
        TensorF out(z.shape);
        for (int64_t i = 0; i < z.numel(); ++i) out.v[i] = (z.v[i] - lat_mean) / lat_std;
        return out;
    }
    TensorF denormalize_latent(const TensorF& z) const {
        TensorF out(z.shape);
        for (int64_t i = 0; i < z.numel(); ++i) out.v[i] = z.v[i] * lat_std + lat_mean;
        return out;
    }

    // Encode to the standardized space diffusion operates in / back from it.
    TensorF encode_norm(const TensorF& img) const { return normalize_latent(encode(img)); }
    TensorF decode_norm(const TensorF& z) const { return decode(denormalize_latent(z)); }

    uint64_t fingerprint() const { return store_fingerprint(ps); }

    void save(const std::string& path) const {
        std::map<std::string, std::string> m{
            {"kind", "codec"},
            {"lat_mean", num_str(lat_mean)},
            {"lat_std", num_str(lat_std)},
            {"seed", std::to_string(init_seed)},
            {"iterations", std::to_string(trained_iterations)},
            {"final_loss", num_str(final_loss)},
            {"holdout_mae", num_str(holdout_mae)},
        };
        save_weights(path, pack_store(ps, m));
    }

    static LatentCodec load(const std::string& path) {
        WeightFile w = load_weights(path);
        if (w.manifest.count("kind") && w.manifest.at("kind") != "codec")
            throw IoError("not a codec weight file: " + path);
        LatentCodec c;
        unpack_into_store(w, c.ps);
        auto num = [&](const char* k, double d) {
            return w.manifest.count(k) ? std::stod(w.manifest.at(k)) : d;
        };
        c.lat_mean = real(num("lat_mean", 0));
        c.lat_std = real(num("lat_std", 1));
        c.init_seed = uint64_t(num("seed", 0));
        c.trained_iterations = int64_t(num("iterations", 0));
        c.final_loss = num("final_loss", 0);
        c.holdout_mae = num("holdout_mae", -1);
        return c;
    }
};

// Pixel-MSE training with a held-out split for the reported roundtrip MAE.
// Deterministic for a fixed seed.
inline LatentCodec train_codec(const std::vector<TensorF>& corpus, const CodecTrainConfig& cfg,
                               uint64_t seed) {
    if (corpus.empty()) throw ConfigError("train_codec: empty corpus");
    for (const auto& img : corpus)
        if (img.ndim() != 3 || img.shape[0] != 3 || img.shape[1] % 8 || img.shape[2] % 8)
            throw InvalidInput("train_codec: images must be [3,8k,8k]");

    LatentCodec codec(seed);
    Rng order = derive_rng(seed, "codec-order");

    int64_t n = int64_t(corpus.size());
    int64_t holdout = n >= 10 ? std::min<int64_t>(64, n / 10) : 0;
    int64_t train_n = n - holdout;  // held-out images are the tail

    Adam<real> opt(cfg.lr);
    for (int64_t it = 0; it < cfg.iterations; ++it) {
        codec.ps.zero_grad();
        Var<real> loss;
        for (int64_t b = 0; b < cfg.batch; ++b) {
            const TensorF& img = corpus[size_t(order.uniform_int(0, train_n - 1))];
            Var<real> x = constant(img);
            Var<real> l = mse_loss(codec.decode_var(codec.encode_var(x)), x);
            loss = loss ? add(loss, l) : l;
        }
        loss = scale(loss, real(1.0 / double(cfg.batch)));
        backward(loss);
        opt.step(codec.ps);
        codec.final_loss = double(loss->val.v[0]);
    }
    codec.trained_iterations = cfg.iterations;

    // Latent standardization over the training split.
    {
        double s = 0, s2 = 0;
        int64_t cnt = 0;
        for (int64_t i = 0; i < train_n; ++i) {
            TensorF z = codec.encode(corpus[size_t(i)]);
            for (auto v : z.v) {
                s += v;
                s2 += double(v) * double(v);
            }
            cnt += z.numel();
        }
        double mean = s / double(cnt);
        double var = s2 / double(cnt) - mean * mean;
        codec.lat_mean = real(mean);
        codec.lat_std = real(std::sqrt(std::max(var, 1e-12)));
    }

    {
        double mae = 0;
        int64_t lo = holdout ? train_n : 0, hi = holdout ? n : train_n;
        int64_t cnt = 0;
        for (int64_t i = lo; i < hi; ++i) {
            const TensorF& img = corpus[size_t(i)];
            mae += mean_abs_diff(codec.decode(codec.encode(img)), img) * double(img.numel());
            cnt += img.numel();
        }
        codec.holdout_mae = mae / double(cnt);
    }
    return codec;
}

}  // namespace cyto
