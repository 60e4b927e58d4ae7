#pragma once

#include <string>

#include "cyto/tensor.hpp"

namespace cyto {

// Reads a PNG into [3,H,W] float in [0,1]. Grayscale and alpha inputs are
// expanded/dropped to plain RGB; 16-bit depth is narrowed to 8.
TensorF read_png(const std::string& path);

// Writes [3,H,W] float as 8-bit RGB; values are clamped to [0,1] first.
void write_png(const std::string& path, const TensorF& img);

}  // namespace cyto
