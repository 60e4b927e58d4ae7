#include <doctest.h>

#include <cstdio>

#include "cyto/editor.hpp"

using namespace cyto;

namespace {

DenoiserConfig small_cfg() {
    DenoiserConfig c;
    c.widths = {16, 32, 64};
    c.ctx_dim = 16;
    c.time_base = 16;
    c.time_dim = 32;
    return c;
}

EditorModel small_editor(uint64_t seed) {
    Denoiser<real> base(small_cfg(), seed);
    Rng r(seed + 1);
    for (auto& x : base.conv_out.w->val.v) x = real(r.normal() * 0.05);
    return make_editor(std::move(base), NoiseSchedule::linear(40, 1e-4, 0.02), 4, seed + 2);
}

TensorF checker_patch(int64_t side, uint64_t seed) {
    Rng rng(seed);
    TensorF img({3, side, side});
    double ph = rng.uniform(0, 3.0);
    for (int64_t c = 0; c < 3; ++c)
        for (int64_t y = 0; y < side; ++y)
            for (int64_t x = 0; x < side; ++x)
                img.at(c, y, x) =
                    real(0.5 + 0.3 * std::sin(0.7 * double(x) + ph) *
                                   std::cos(0.5 * double(y) + 0.3 * double(c)));
    return img;
}

}  // namespace

TEST_CASE("keep mask follows center inclusion with half-open far edges") {
    SUBCASE("full box blanks the whole grid") {
        auto m = box_to_mask<real>({0, 0, 1, 1}, 4, 4);
        CHECK(m.shape == Shape{1, 4, 4});
        for (real v : m.v) CHECK(v == 0.0f);
    }

    SUBCASE("left half on an 8-wide grid: columns 0..3 edited") {
        auto m = box_to_mask<real>({0, 0, 0.5, 1}, 2, 8);
        for (int64_t r = 0; r < 2; ++r)
            for (int64_t c = 0; c < 8; ++c)
                CHECK(m.at(0, r, c) == (c < 4 ? 0.0f : 1.0f));
    }

    SUBCASE("half-open: a center on the far edge stays background") {
        // x in [0.25, 0.5) on w=4: pixel window [1,2) holds only center 1.5
        auto m = box_to_mask<real>({0.25, 0, 0.5, 1}, 1, 4);
        CHECK(m.at(0, 0, 0) == 1.0f);
        CHECK(m.at(0, 0, 1) == 0.0f);
        CHECK(m.at(0, 0, 2) == 1.0f);
        CHECK(m.at(0, 0, 3) == 1.0f);
    }

    SUBCASE("sub-cell box still claims the cell under its center") {
        auto m = box_to_mask<real>({0.69, 0.29, 0.71, 0.31}, 8, 8);
        int64_t zeros = 0;
        for (real v : m.v) zeros += (v == 0.0f);
        CHECK(zeros == 1);
        CHECK(m.at(0, 2, 5) == 0.0f);  // center (0.7, 0.3) -> col 5, row 2
    }

    SUBCASE("degenerate boxes are rejected") {
        CHECK_THROWS_AS((box_to_mask<real>({0.5, 0.2, 0.5, 0.8}, 8, 8)), InvalidInput);
        CHECK_THROWS_AS((box_to_mask<real>({0.3, 0.2, 0.2, 0.8}, 8, 8)), InvalidInput);
        CHECK_THROWS_AS((box_to_mask<real>({0, 0, 1, 1}, 0, 8)), InvalidInput);
    }

    SUBCASE("random boxes against direct center inclusion") {
        Rng rng(17);
        for (int trial = 0; trial < 50; ++trial) {
            double x0 = rng.uniform(0, 0.8), y0 = rng.uniform(0, 0.8);
            BoundingBox b{x0, y0, x0 + rng.uniform(0.05, 0.2) ,
                          y0 + rng.uniform(0.05, 0.2)};
            b.x1 = std::min(b.x1, 1.0);
            b.y1 = std::min(b.y1, 1.0);
            auto m = box_to_mask<real>(b, 16, 16);
            bool any = false;
            for (int64_t r = 0; r < 16; ++r)
                for (int64_t c = 0; c < 16; ++c) {
                    bool in = (c + 0.5) >= b.x0 * 16 && (c + 0.5) < b.x1 * 16 &&
                              (r + 0.5) >= b.y0 * 16 && (r + 0.5) < b.y1 * 16;
                    any = any || in;
                    if (in) CHECK(m.at(0, r, c) == 0.0f);
                }
            if (any) {
                // no forced cell: mask must match inclusion everywhere
                for (int64_t r = 0; r < 16; ++r)
                    for (int64_t c = 0; c < 16; ++c) {
                        bool in = (c + 0.5) >= b.x0 * 16 && (c + 0.5) < b.x1 * 16 &&
                                  (r + 0.5) >= b.y0 * 16 && (r + 0.5) < b.y1 * 16;
                        CHECK(m.at(0, r, c) == (in ? 0.0f : 1.0f));
                    }
            }
        }
    }
}

TEST_CASE("nine-channel assembly slices are bit-exact") {
    Rng rng(23);
    TensorF z_t = Tensor<real>::randn({4, 8, 8}, rng);
    TensorF z0 = Tensor<real>::randn({4, 8, 8}, rng);
    TensorF mask = box_to_mask<real>({0.2, 0.2, 0.7, 0.7}, 8, 8);
    TensorF z_bg = mask_latent(z0, mask);

    TensorF nine = build_inpaint_input(z_t, z_bg, mask);
    CHECK(nine.shape == Shape{9, 8, 8});
    for (int64_t i = 0; i < z_t.numel(); ++i) {
        CHECK(nine.v[i] == z_t.v[i]);
        CHECK(nine.v[z_t.numel() + i] == z_bg.v[i]);
    }
    for (int64_t i = 0; i < mask.numel(); ++i) CHECK(nine.v[2 * z_t.numel() + i] == mask.v[i]);

    CHECK_THROWS_AS(build_inpaint_input(Tensor<real>::zeros({3, 8, 8}), z_bg, mask),
                    InvalidInput);
    CHECK_THROWS_AS(build_inpaint_input(z_t, Tensor<real>::zeros({4, 4, 8}), mask),
                    InvalidInput);
    CHECK_THROWS_AS(build_inpaint_input(z_t, z_bg, Tensor<real>::zeros({1, 8, 4})),
                    InvalidInput);

    SUBCASE("background masking zeroes exactly the edit cells") {
        int64_t hw = 64;
        for (int64_t c = 0; c < 4; ++c)
            for (int64_t i = 0; i < hw; ++i) {
                if (mask.v[i] == 0.0f)
                    CHECK(z_bg.v[c * hw + i] == 0.0f);
                else
                    CHECK(z_bg.v[c * hw + i] == z0.v[c * hw + i]);
            }
    }
}

TEST_CASE("echo stub preserves the background latent exactly") {
    NoiseSchedule ns = NoiseSchedule::linear(100, 1e-4, 0.02);
    Rng rng(31);
    TensorF z0 = Tensor<real>::randn({4, 8, 8}, rng);
    TensorF mask = box_to_mask<real>({0.3, 0.3, 0.8, 0.8}, 8, 8);

    for (int64_t steps : {1, 5, 25}) {
        Rng loop_rng(40 + steps);
        TensorF z = run_edit_loop(ns, z0, mask, steps, echo_edit_step<real>(), loop_rng);
        CHECK(z.shape == z0.shape);
        int64_t hw = 64;
        for (int64_t c = 0; c < 4; ++c)
            for (int64_t i = 0; i < hw; ++i) {
                if (mask.v[i] == 1.0f)
                    CHECK(z.v[c * hw + i] == z0.v[c * hw + i]);  // bitwise
                else
                    CHECK(z.v[c * hw + i] == 0.0f);
            }
    }
}

TEST_CASE("editor assembly wires gated layers, wide input, and token encoder") {
    EditorModel em = small_editor(71);
    CHECK(em.model.has_gated);
    CHECK(em.model.has_ext);
    CHECK(em.model.in_channels() == 9);
    CHECK(em.model.ps.trainable_params() == 0);
    CHECK(em.model.editor_ps.trainable_params() > 0);
    CHECK(em.ground.ctx_dim == 16);

    Denoiser<real> lora_base(small_cfg(), 3);
    Rng r(4);
    attach_lora(lora_base, 2, 1.0, r);
    CHECK_THROWS_AS(make_editor(std::move(lora_base), em.ns, 4, 5), ConfigError);
}

TEST_CASE("model-driven edit produces a clean patch deterministically") {
    EditorModel em = small_editor(83);
    LatentCodec codec(5);
    TensorF patch = checker_patch(32, 9);
    BoundingBox box{0.25, 0.25, 0.75, 0.75};

    Rng r1(101), r2(101), r3(102);
    TensorF e1 = edit_patch(em, codec, patch, box, CellType::HSIL, 5, 3.0, r1);
    CHECK(e1.shape == Shape{3, 32, 32});
    CHECK(e1.all_finite());
    for (real v : e1.v) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
    }
    TensorF e2 = edit_patch(em, codec, patch, box, CellType::HSIL, 5, 3.0, r2);
    CHECK(max_abs_diff(e1, e2) == 0.0f);
    TensorF e3 = edit_patch(em, codec, patch, box, CellType::HSIL, 5, 3.0, r3);
    CHECK(max_abs_diff(e1, e3) > 0.0f);  // different noise draw
}

TEST_CASE("editor training moves only editor parameters, including the token encoder") {
    EditorModel em = small_editor(91);
    LatentCodec codec(7);

    std::vector<EditSample> samples;
    for (int i = 0; i < 4; ++i)
        samples.push_back({checker_patch(32, 200 + i),
                           {0.25, 0.25, 0.75, 0.75},
                           kAbnormalTypes[i % 4]});

    uint64_t base_before = store_fingerprint(em.model.ps);
    TensorF table_before = em.ground.class_table->val;
    TensorF gate_before;
    for (auto& [name, v] : em.model.editor_ps.items)
        if (name == "gated.l0.wq.w") gate_before = v->val;
    TensorF ext_before = em.model.conv_in_ext.w->val;

    EditorTrainConfig cfg;
    cfg.iterations = 12;
    cfg.batch = 1;
    cfg.lr = 1e-3;
    train_editor(em, codec, samples, cfg, 13);

    CHECK(std::isfinite(em.final_loss));
    CHECK(em.trained_iterations == 12);
    CHECK(store_fingerprint(em.model.ps) == base_before);  // base untouched
    CHECK(max_abs_diff(em.ground.class_table->val, table_before) > 0.0f);
    CHECK(max_abs_diff(em.model.conv_in_ext.w->val, ext_before) > 0.0f);
    for (auto& [name, v] : em.model.editor_ps.items)
        if (name == "gated.l0.wq.w") CHECK(max_abs_diff(v->val, gate_before) > 0.0f);

    CHECK_THROWS_AS(train_editor(em, codec, {}, cfg, 1), ConfigError);
}

TEST_CASE("editor weights reload onto the same base only") {
    EditorModel em = small_editor(97);
    LatentCodec codec(11);
    std::vector<EditSample> samples{
        {checker_patch(32, 300), {0.3, 0.3, 0.7, 0.7}, CellType::LSIL}};
    EditorTrainConfig cfg;
    cfg.iterations = 4;
    cfg.batch = 1;
    train_editor(em, codec, samples, cfg, 19);

    std::string path = "/tmp/cyto_test_editor.bin";
    save_editor(em, path, 19);

    TensorF patch = checker_patch(32, 301);
    Rng r1(55), r2(55);
    TensorF want = edit_patch(em, codec, patch, {0.3, 0.3, 0.7, 0.7}, CellType::LSIL, 3,
                              2.0, r1);

    SUBCASE("same base reproduces edits exactly") {
        Denoiser<real> base(small_cfg(), 97);
        Rng r(98);
        for (auto& x : base.conv_out.w->val.v) x = real(r.normal() * 0.05);
        EditorModel loaded = load_editor(std::move(base), path);
        CHECK(loaded.trained_iterations == 4);
        CHECK(loaded.ns.steps == em.ns.steps);
        TensorF got = edit_patch(loaded, codec, patch, {0.3, 0.3, 0.7, 0.7},
                                 CellType::LSIL, 3, 2.0, r2);
        CHECK(max_abs_diff(got, want) == 0.0f);
    }

    SUBCASE("different base is refused without force") {
        Denoiser<real> other(small_cfg(), 96);
        CHECK_THROWS_AS(load_editor(std::move(other), path), ConfigError);
        Denoiser<real> other2(small_cfg(), 96);
        EditorModel forced = load_editor(std::move(other2), path, true);
        CHECK(forced.model.has_gated);
    }

    std::remove(path.c_str());
}
