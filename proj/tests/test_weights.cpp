#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "cyto/weights.hpp"

using namespace cyto;
namespace fs = std::filesystem;

namespace {
fs::path temp_file(const char* stem) {
    return fs::temp_directory_path() / (std::string(stem) + "-" + std::to_string(::getpid()));
}
}  // namespace

TEST_CASE("weight file round trip is exact") {
    Rng rng(21);
    WeightFile w;
    w.tensors.emplace("layer.w", TensorF::randn({4, 7}, rng));
    w.tensors.emplace("layer.b", TensorF::randn({4}, rng));
    w.tensors.emplace("a.scale", TensorF::full({1}, 0.18215f));
    w.manifest["seed"] = "1234";
    w.manifest["widths"] = "32,64,128";

    auto path = temp_file("cyto-weights");
    save_weights(path.string(), w);
    WeightFile r = load_weights(path.string());

    REQUIRE(r.tensors.size() == 3);
    CHECK(r.manifest == w.manifest);
    for (const auto& [name, t] : w.tensors) {
        REQUIRE(r.tensors.count(name));
        CHECK(r.tensors.at(name).shape == t.shape);
        CHECK(r.tensors.at(name).v == t.v);  // bit-exact
    }
    CHECK(weights_fingerprint(r) == weights_fingerprint(w));
    fs::remove(path);
}

TEST_CASE("fingerprint reacts to any content change") {
    Rng rng(22);
    WeightFile w;
    w.tensors.emplace("t", TensorF::randn({3, 3}, rng));
    uint64_t base = weights_fingerprint(w);

    WeightFile w2 = w;
    w2.tensors.at("t").v[4] += 1e-6f;
    CHECK(weights_fingerprint(w2) != base);

    WeightFile w3 = w;
    w3.tensors.emplace("u", TensorF::zeros({1}));
    CHECK(weights_fingerprint(w3) != base);

    // same payload, different logical shape
    WeightFile w4;
    w4.tensors.emplace("t", w.tensors.at("t").reshaped({9}));
    CHECK(weights_fingerprint(w4) != base);

    CHECK(hex64(base).size() == 16);
}

TEST_CASE("store fingerprint equals packed-file fingerprint") {
    Rng rng(23);
    ParamStore<real> ps;
    ps.add("z.late", TensorF::randn({2, 2}, rng));
    ps.add("a.early", TensorF::randn({5}, rng));
    CHECK(store_fingerprint(ps) == weights_fingerprint(pack_store(ps)));
}

TEST_CASE("unpack into store") {
    Rng rng(24);
    ParamStore<real> ps;
    auto a = ps.add("a", TensorF::zeros({2, 3}));
    auto b = ps.add("b", TensorF::zeros({4}));

    WeightFile w;
    w.tensors.emplace("a", TensorF::randn({2, 3}, rng));
    w.tensors.emplace("b", TensorF::randn({4}, rng));

    SUBCASE("copies values by name") {
        unpack_into_store(w, ps);
        CHECK(a->val.v == w.tensors.at("a").v);
        CHECK(b->val.v == w.tensors.at("b").v);
    }
    SUBCASE("missing tensor rejected in strict mode") {
        w.tensors.erase("b");
        CHECK_THROWS_AS(unpack_into_store(w, ps), IoError);
        unpack_into_store(w, ps, false);  // lenient leaves b untouched
        CHECK(b->val.v == std::vector<real>(4, 0.f));
    }
    SUBCASE("unknown tensor rejected in strict mode") {
        w.tensors.emplace("ghost", TensorF::zeros({1}));
        CHECK_THROWS_AS(unpack_into_store(w, ps), IoError);
    }
    SUBCASE("shape mismatch always rejected") {
        w.tensors.at("a") = TensorF::zeros({3, 2});
        CHECK_THROWS_AS(unpack_into_store(w, ps), IoError);
        CHECK_THROWS_AS(unpack_into_store(w, ps, false), IoError);
    }
}

TEST_CASE("corrupt files raise io errors") {
    CHECK_THROWS_AS(load_weights("/nonexistent/nope.w"), MissingArtifact);

    auto path = temp_file("cyto-corrupt");
    {
        std::ofstream f(path, std::ios::binary);
        uint64_t hlen = 9999;
        f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
        f << "{ not json";
    }
    CHECK_THROWS_AS(load_weights(path.string()), IoError);

    Rng rng(25);
    WeightFile w;
    w.tensors.emplace("t", TensorF::randn({64}, rng));
    save_weights(path.string(), w);
    fs::resize_file(path, fs::file_size(path) - 32);  // drop payload tail
    CHECK_THROWS_AS(load_weights(path.string()), IoError);
    fs::remove(path);
}
