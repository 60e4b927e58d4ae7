#include <doctest.h>

#include <cstdio>

#include "cyto/codec.hpp"

using namespace cyto;

namespace {

// Smooth periodic images: easy to compress, hard to memorize pixel noise.
std::vector<TensorF> smooth_corpus(int64_t n, int64_t side, uint64_t seed) {
    Rng rng(seed);
    std::vector<TensorF> out;
    for (int64_t i = 0; i < n; ++i) {
        TensorF img({3, side, side});
        double ax = rng.uniform(0.5, 2.0), ay = rng.uniform(0.5, 2.0);
        double ph[3] = {rng.uniform(0, 6.28), rng.uniform(0, 6.28), rng.uniform(0, 6.28)};
        for (int64_t c = 0; c < 3; ++c)
            for (int64_t y = 0; y < side; ++y)
                for (int64_t x = 0; x < side; ++x)
                    img.at(c, y, x) = real(
                        0.5 + 0.35 * std::sin(6.283 * (ax * x + ay * y) / double(side) +
                                              ph[c]));
        out.push_back(std::move(img));
    }
    return out;
}

double roundtrip_mae(const LatentCodec& c, const std::vector<TensorF>& imgs, size_t lo,
                     size_t hi) {
    double s = 0;
    int64_t n = 0;
    for (size_t i = lo; i < hi; ++i) {
        s += mean_abs_diff(c.decode(c.encode(imgs[i])), imgs[i]) * double(imgs[i].numel());
        n += imgs[i].numel();
    }
    return s / double(n);
}

}  // namespace

TEST_CASE("encode and decode shapes follow the factor-8 contract") {
    LatentCodec c(1);
    Rng rng(3);
    TensorF img = Tensor<real>::uniform({3, 64, 64}, rng, 0, 1);
    TensorF z = c.encode(img);
    CHECK(z.shape == Shape{4, 8, 8});
    TensorF back = c.decode(z);
    CHECK(back.shape == Shape{3, 64, 64});
    for (real v : back.v) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }

    CHECK(c.encode(Tensor<real>::zeros({3, 24, 40})).shape == Shape{4, 3, 5});

    CHECK_THROWS_AS(c.encode(Tensor<real>::zeros({1, 64, 64})), InvalidInput);
    CHECK_THROWS_AS(c.encode(Tensor<real>::zeros({3, 60, 64})), InvalidInput);
    CHECK_THROWS_AS(c.decode(Tensor<real>::zeros({3, 8, 8})), InvalidInput);
}

TEST_CASE("same seed gives the same codec") {
    LatentCodec a(9), b(9), d(10);
    CHECK(a.fingerprint() == b.fingerprint());
    CHECK(a.fingerprint() != d.fingerprint());
    Rng rng(4);
    TensorF img = Tensor<real>::uniform({3, 16, 16}, rng, 0, 1);
    CHECK(max_abs_diff(a.encode(img), b.encode(img)) == 0.0f);
}

TEST_CASE("latent standardization round-trips") {
    LatentCodec c(1);
    c.lat_mean = 0.37f;
    c.lat_std = 2.5f;
    Rng rng(5);
    TensorF z = Tensor<real>::randn({4, 3, 3}, rng);
    TensorF back = c.denormalize_latent(c.normalize_latent(z));
    CHECK(max_abs_diff(back, z) < 1e-6f);
    TensorF nz = c.normalize_latent(z);
    CHECK(std::abs(nz.v[0] - (z.v[0] - 0.37f) / 2.5f) < 1e-6f);
}

TEST_CASE("training reduces reconstruction error and standardizes latents") {
    auto corpus = smooth_corpus(20, 24, 77);
    LatentCodec untrained(55);
    double before = roundtrip_mae(untrained, corpus, 18, 20);

    CodecTrainConfig cfg;
    cfg.iterations = 100;
    cfg.lr = 2e-3;
    cfg.batch = 4;
    LatentCodec trained = train_codec(corpus, cfg, 55);

    CHECK(trained.holdout_mae >= 0.0);
    CHECK(trained.holdout_mae == doctest::Approx(roundtrip_mae(trained, corpus, 18, 20))
                                     .epsilon(1e-6));
    CHECK(trained.holdout_mae < 0.9 * before);
    CHECK(trained.trained_iterations == 100);

    // standardized training latents have roughly zero mean, unit spread
    double s = 0, s2 = 0;
    int64_t n = 0;
    for (size_t i = 0; i < 18; ++i) {
        TensorF z = trained.encode_norm(corpus[i]);
        for (real v : z.v) {
            s += v;
            s2 += double(v) * double(v);
        }
        n += z.numel();
    }
    double mean = s / double(n), var = s2 / double(n) - mean * mean;
    CHECK(std::abs(mean) < 1e-3);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-2));

    SUBCASE("training is deterministic in the seed") {
        CodecTrainConfig tiny;
        tiny.iterations = 25;
        LatentCodec t1 = train_codec(corpus, tiny, 8);
        LatentCodec t2 = train_codec(corpus, tiny, 8);
        CHECK(t1.fingerprint() == t2.fingerprint());
        CHECK(t1.lat_mean == t2.lat_mean);
        CHECK(t1.lat_std == t2.lat_std);
    }

    SUBCASE("weights round-trip through disk") {
        std::string path = "/tmp/cyto_test_codec.bin";
        trained.save(path);
        LatentCodec loaded = LatentCodec::load(path);
        CHECK(loaded.fingerprint() == trained.fingerprint());
        CHECK(loaded.lat_mean == trained.lat_mean);
        CHECK(loaded.lat_std == trained.lat_std);
        CHECK(loaded.holdout_mae == doctest::Approx(trained.holdout_mae));
        TensorF z = trained.encode(corpus[0]);
        CHECK(max_abs_diff(loaded.encode(corpus[0]), z) == 0.0f);
        CHECK(max_abs_diff(loaded.decode(z), trained.decode(z)) == 0.0f);
        std::remove(path.c_str());
    }
}

TEST_CASE("training rejects bad corpora") {
    CodecTrainConfig cfg;
    cfg.iterations = 1;
    CHECK_THROWS_AS(train_codec({}, cfg, 1), ConfigError);
    std::vector<TensorF> bad{Tensor<real>::zeros({3, 20, 24})};
    CHECK_THROWS_AS(train_codec(bad, cfg, 1), InvalidInput);
}
