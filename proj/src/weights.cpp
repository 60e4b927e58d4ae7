#include "cyto/weights.hpp"

#include <fstream>

#include <json.hpp>

#include "cyto/rng.hpp"

namespace cyto {

using nlohmann::json;

void save_weights(const std::string& path, const WeightFile& w) {
    json header;
    header["manifest"] = w.manifest;
    json tensors = json::object();
    uint64_t offset = 0;
    for (const auto& [name, t] : w.tensors) {
        json entry;
        entry["dtype"] = "f32";
        entry["shape"] = t.shape;
        entry["offset"] = offset;
        tensors[name] = entry;
        offset += uint64_t(t.numel()) * sizeof(float);
    }
    header["tensors"] = tensors;
    std::string hs = header.dump();

    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot open for writing: " + path);
    uint64_t hlen = hs.size();
    f.write(reinterpret_cast<const char*>(&hlen), sizeof(hlen));
    f.write(hs.data(), std::streamsize(hs.size()));
    for (const auto& [name, t] : w.tensors)
        f.write(reinterpret_cast<const char*>(t.v.data()),
                std::streamsize(size_t(t.numel()) * sizeof(float)));
    if (!f) throw IoError("short write: " + path);
}

WeightFile load_weights(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingArtifact("weight file not found: " + path);
    uint64_t hlen = 0;
    f.read(reinterpret_cast<char*>(&hlen), sizeof(hlen));
    if (!f || hlen == 0 || hlen > (64u << 20)) throw IoError("corrupt weight header: " + path);
    std::string hs(hlen, '\0');
    f.read(hs.data(), std::streamsize(hlen));
    if (!f) throw IoError("truncated weight header: " + path);

    json header;
    try {
        header = json::parse(hs);
    } catch (const json::exception& e) {
        throw IoError("invalid weight header in " + path + ": " + e.what());
    }

    WeightFile w;
    if (header.contains("manifest"))
        for (auto& [k, v] : header["manifest"].items()) w.manifest[k] = v.get<std::string>();

    // Offsets are validated against the order implied by name sorting, which
    // is how save_weights lays the payload out.
    uint64_t expect_offset = 0;
    std::map<std::string, json> entries;
    for (auto& [name, entry] : header["tensors"].items()) entries[name] = entry;
    for (auto& [name, entry] : entries) {
        if (entry["dtype"].get<std::string>() != "f32")
            throw IoError("unsupported dtype for tensor " + name);
        Shape sh = entry["shape"].get<Shape>();
        if (entry["offset"].get<uint64_t>() != expect_offset)
            throw IoError("non-contiguous tensor layout for " + name);
        TensorF t(sh);
        f.read(reinterpret_cast<char*>(t.v.data()),
               std::streamsize(size_t(t.numel()) * sizeof(float)));
        if (!f) throw IoError("truncated payload at tensor " + name + " in " + path);
        expect_offset += uint64_t(t.numel()) * sizeof(float);
        w.tensors.emplace(name, std::move(t));
    }
    return w;
}

uint64_t weights_fingerprint(const WeightFile& w) {
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : w.tensors) {
        h = fnv1a64(name, h);
        h = fnv1a64(t.shape.data(), t.shape.size() * sizeof(int64_t), h);
        h = fnv1a64(t.v.data(), size_t(t.numel()) * sizeof(float), h);
    }
    return h;
}

uint64_t store_fingerprint(const ParamStore<real>& ps) {
    std::map<std::string, const TensorF*> sorted;
    for (const auto& [name, p] : ps.items) sorted[name] = &p->val;
    uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, t] : sorted) {
        h = fnv1a64(name, h);
        h = fnv1a64(t->shape.data(), t->shape.size() * sizeof(int64_t), h);
        h = fnv1a64(t->v.data(), size_t(t->numel()) * sizeof(float), h);
    }
    return h;
}

std::string hex64(uint64_t v) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

std::string num_str(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

WeightFile pack_store(const ParamStore<real>& ps, std::map<std::string, std::string> manifest) {
    WeightFile w;
    w.manifest = std::move(manifest);
    for (const auto& [name, p] : ps.items) w.tensors.emplace(name, p->val);
    return w;
}

void unpack_into_store(const WeightFile& w, ParamStore<real>& ps, bool strict) {
    size_t used = 0;
    for (auto& [name, p] : ps.items) {
        auto it = w.tensors.find(name);
        if (it == w.tensors.end()) {
            if (strict) throw IoError("weight file missing tensor: " + name);
            continue;
        }
        if (it->second.shape != p->val.shape)
            throw IoError("shape mismatch for " + name + ": file " +
                          shape_str(it->second.shape) + " vs model " + shape_str(p->val.shape));
        p->val.v = it->second.v;
        ++used;
    }
    if (strict && used != w.tensors.size())
        for (const auto& [name, _] : w.tensors)
            if (!ps.has(name)) throw IoError("weight file has unknown tensor: " + name);
}

}  // namespace cyto
