#pragma once

#include <string>
#include <vector>

#include "cyto/tensor.hpp"

namespace cyto {

// Bethesda categories. Order is load-bearing: embedding-table rows and class
// ids follow it.
enum class CellType : int { NILM = 0, ASC_US = 1, LSIL = 2, ASC_H = 3, HSIL = 4 };

inline constexpr int kNumCellTypes = 5;
inline constexpr CellType kAbnormalTypes[4] = {CellType::ASC_US, CellType::LSIL,
                                               CellType::ASC_H, CellType::HSIL};

inline const char* cell_type_name(CellType c) {
    switch (c) {
        case CellType::NILM: return "nilm";
        case CellType::ASC_US: return "asc-us";
        case CellType::LSIL: return "lsil";
        case CellType::ASC_H: return "asc-h";
        case CellType::HSIL: return "hsil";
    }
    throw InvalidInput("unknown cell type");
}

inline CellType cell_type_from_name(const std::string& s) {
    for (int i = 0; i < kNumCellTypes; ++i)
        if (s == cell_type_name(CellType(i))) return CellType(i);
    throw InvalidInput("unknown cell type name: " + s);
}

// Axis-aligned box in normalized [0,1] coordinates (x right, y down).
struct BoundingBox {
    double x0 = 0, y0 = 0, x1 = 0, y1 = 0;

    bool valid() const {
        return 0 <= x0 && x0 <= x1 && x1 <= 1 && 0 <= y0 && y0 <= y1 && y1 <= 1;
    }
    double area() const { return (x1 - x0) * (y1 - y0); }
    double cx() const { return 0.5 * (x0 + x1); }
    double cy() const { return 0.5 * (y0 + y1); }
};

struct Annotation {
    BoundingBox box;
    CellType cls = CellType::NILM;
};

struct AnnotatedImage {
    TensorF image;  // [3,H,W] in [0,1]
    std::vector<Annotation> anns;
    uint64_t seed = 0;

    AnnotatedImage() : image({3, 0, 0}) {}
    int64_t height() const { return image.shape[1]; }
    int64_t width() const { return image.shape[2]; }
};

struct Detection {
    int64_t image_id = 0;
    BoundingBox box;  // normalized to the image
    CellType cls = CellType::NILM;
    double score = 0;
};

}  // namespace cyto
