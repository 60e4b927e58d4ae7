#pragma once

#include <array>
#include <string>
#include <vector>

#include "cyto/rng.hpp"
#include "cyto/types.hpp"

namespace cyto {

// Per-class appearance distributions. Radii are in pixels; nc_* parameterize
// the nucleus/cytoplasm area ratio.
struct CellStyle {
    double nc_mean = 0.12, nc_sd = 0.02;
    double dark_mean = 0.35, dark_sd = 0.05;  // nucleus darkness in [0,1]
    double radius_lo = 14, radius_hi = 20;    // cytoplasm major semi-axis
    bool halo = false;                        // perinuclear clearing
    bool speckle = false;                     // coarse chromatin texture
    int cluster_lo = 1, cluster_hi = 1;       // cells drawn per placement
};

struct CorpusStyle {
    std::array<CellStyle, 5> cls;  // indexed by CellType
    std::array<double, 3> bg_color = {0.88, 0.94, 0.96};
    double bg_noise_amp = 0.05;
    int bg_noise_px = 24;  // lattice spacing of the background noise

    // Defaults sized so a full cell fits a patch_px crop with margin.
    static CorpusStyle defaults(int patch_px = 64);
    void validate() const;
};

// Smooth lattice noise in [-1,1], deterministic in rng.
TensorF value_noise(int64_t h, int64_t w, int cell_px, int octaves, Rng& rng);

void paint_background(TensorF& canvas, const CorpusStyle& style, Rng& rng);

// Draws one anti-aliased cell (a small crowded cluster for classes with
// cluster_hi > 1) centered near (cx,cy) in pixels and returns the tight
// normalized bounding box of everything painted.
BoundingBox render_cell(TensorF& canvas, CellType cls, const CorpusStyle& style, double cx,
                        double cy, Rng& rng);

// One cell centered (with jitter) on a fresh background patch.
AnnotatedImage render_patch(CellType cls, const CorpusStyle& style, int patch_px, Rng& rng);

// Background plus rejection-placed cells with the given classes, in order;
// annotations cover every cell including NILM. Throws when placement cannot
// fit them all, reporting how many did fit.
AnnotatedImage render_slide(const std::vector<CellType>& cells, int slide_px,
                            const CorpusStyle& style, Rng& rng);

// Same, with each cell's class drawn independently from class_mix.
AnnotatedImage render_slide(int n_cells, const std::array<double, 5>& class_mix, int slide_px,
                            const CorpusStyle& style, Rng& rng);

struct CorpusConfig {
    int slide_px = 256;
    int patch_px = 64;
    int n_slides = 2000;       // stage-1 normal training slides
    int n_holdout = 200;       // held-out normals for FID reference
    int n_abnormal = 300;      // annotated abnormal slides (train + eval)
    int n_abnormal_eval = 100;
    int nilm_lo = 4, nilm_hi = 9;  // cells per normal slide
    int abn_lo = 1, abn_hi = 3;    // abnormal cells per abnormal slide
    int patches_per_class = 400;
    int test_patches_per_class = 80;
    CorpusStyle style = CorpusStyle::defaults();
};

// Renders the full corpus under root/{slides_train,slides_holdout,
// slides_abnormal,slides_abnormal_eval,patches_train,patches_test}, each in
// the shared dataset layout. Returns per-directory image counts as a
// summary document.
std::string build_corpus(const std::string& root, const CorpusConfig& cfg, uint64_t seed);

}  // namespace cyto
