#pragma once

// Weight container: named float32 arrays plus a string manifest, stored as
// [u64 header length][JSON header][raw payload]. Fingerprints cover tensor
// names, shapes, and bytes, and gate adapter-onto-base loading.

#include <map>
#include <string>

#include "cyto/nn.hpp"
#include "cyto/tensor.hpp"

namespace cyto {

struct WeightFile {
    std::map<std::string, TensorF> tensors;
    std::map<std::string, std::string> manifest;
};

void save_weights(const std::string& path, const WeightFile& w);
WeightFile load_weights(const std::string& path);

uint64_t weights_fingerprint(const WeightFile& w);
uint64_t store_fingerprint(const ParamStore<real>& ps);
std::string hex64(uint64_t v);

// Round-trip-exact decimal form for manifest values.
std::string num_str(double v);

WeightFile pack_store(const ParamStore<real>& ps,
                      std::map<std::string, std::string> manifest = {});

// Copies every tensor of `w` into same-named parameters of `ps`.
// strict: every store parameter must be present and every file tensor used.
void unpack_into_store(const WeightFile& w, ParamStore<real>& ps, bool strict = true);

}  // namespace cyto
