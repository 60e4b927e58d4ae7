#include "cyto/corpus.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "cyto/common.hpp"
#include "cyto/dataset.hpp"

namespace fs = std::filesystem;

namespace cyto {

CorpusStyle CorpusStyle::defaults(int patch_px) {
    if (patch_px < 16) throw ConfigError("patch_px too small: " + std::to_string(patch_px));
    const double s = double(patch_px);
    CorpusStyle st;
    auto& c = st.cls;
    c[int(CellType::NILM)] = {0.12, 0.02, 0.35, 0.05, 0.22 * s, 0.30 * s, false, false, 1, 1};
    c[int(CellType::ASC_US)] = {0.22, 0.03, 0.45, 0.05, 0.21 * s, 0.28 * s, false, false, 1, 1};
    c[int(CellType::LSIL)] = {0.35, 0.04, 0.52, 0.05, 0.20 * s, 0.27 * s, true, false, 1, 1};
    c[int(CellType::ASC_H)] = {0.50, 0.05, 0.62, 0.05, 0.17 * s, 0.23 * s, false, true, 1, 1};
    c[int(CellType::HSIL)] = {0.65, 0.05, 0.72, 0.05, 0.13 * s, 0.17 * s, false, true, 2, 4};
    st.bg_noise_px = std::max(8, patch_px * 3 / 8);
    return st;
}

void CorpusStyle::validate() const {
    for (int i = 1; i < kNumCellTypes; ++i)
        if (!(cls[i].nc_mean > cls[i - 1].nc_mean))
            throw ConfigError("nucleus/cytoplasm ratio means must increase with severity");
    for (int i = 0; i < kNumCellTypes; ++i) {
        const CellStyle& c = cls[i];
        if (c.nc_sd <= 0 || c.dark_sd <= 0) throw ConfigError("style spreads must be positive");
        if (c.nc_mean <= 0 || c.nc_mean >= 1) throw ConfigError("ratio mean out of (0,1)");
        if (c.dark_mean <= 0 || c.dark_mean >= 1) throw ConfigError("darkness mean out of (0,1)");
        if (c.radius_lo < 2.5 || c.radius_lo > c.radius_hi)
            throw ConfigError("bad cell radius range");
        if (c.cluster_lo < 1 || c.cluster_lo > c.cluster_hi)
            throw ConfigError("bad cluster range");
    }
    if (bg_noise_amp < 0 || bg_noise_amp > 0.5) throw ConfigError("bad background noise amplitude");
    if (bg_noise_px < 2) throw ConfigError("background noise lattice too fine");
}

TensorF value_noise(int64_t h, int64_t w, int cell_px, int octaves, Rng& rng) {
    if (h < 1 || w < 1 || cell_px < 2 || octaves < 1) throw InvalidInput("bad noise parameters");
    TensorF out = TensorF::zeros({h, w});
    double amp = 1.0, amp_sum = 0.0;
    for (int o = 0; o < octaves; ++o) {
        const int spacing = std::max<int>(2, cell_px >> o);
        const int64_t nx = w / spacing + 2, ny = h / spacing + 2;
        std::vector<float> lattice(size_t(nx * ny));
        for (float& v : lattice) v = float(rng.uniform(-1.0, 1.0));
        for (int64_t y = 0; y < h; ++y) {
            const double gy = double(y) / spacing;
            const int64_t iy = int64_t(gy);
            const double fy = gy - double(iy);
            const double sy = fy * fy * (3.0 - 2.0 * fy);
            for (int64_t x = 0; x < w; ++x) {
                const double gx = double(x) / spacing;
                const int64_t ix = int64_t(gx);
                const double fx = gx - double(ix);
                const double sx = fx * fx * (3.0 - 2.0 * fx);
                const float* row = lattice.data() + iy * nx + ix;
                const double top = row[0] + (row[1] - row[0]) * sx;
                const double bot = row[nx] + (row[nx + 1] - row[nx]) * sx;
                out.v[y * w + x] += float(amp * (top + (bot - top) * sy));
            }
        }
        amp_sum += amp;
        amp *= 0.5;
    }
    for (float& v : out.v) v = float(v / amp_sum);
    return out;
}

void paint_background(TensorF& canvas, const CorpusStyle& style, Rng& rng) {
    if (canvas.shape.size() != 3 || canvas.shape[0] != 3)
        throw InvalidInput("canvas must be [3,H,W]");
    const int64_t h = canvas.shape[1], w = canvas.shape[2], plane = h * w;
    TensorF shared = value_noise(h, w, style.bg_noise_px, 3, rng);
    for (int c = 0; c < 3; ++c) {
        TensorF own = value_noise(h, w, style.bg_noise_px, 2, rng);
        for (int64_t i = 0; i < plane; ++i) {
            double v = style.bg_color[size_t(c)] + style.bg_noise_amp * (0.8 * shared.v[i] + 0.3 * own.v[i]);
            canvas.v[c * plane + i] = float(std::clamp(v, 0.0, 1.0));
        }
    }
}

namespace {

struct Extent {
    int64_t x0 = INT64_MAX, y0 = INT64_MAX, x1 = -1, y1 = -1;
    void add(int64_t x, int64_t y) {
        x0 = std::min(x0, x);
        y0 = std::min(y0, y);
        x1 = std::max(x1, x);
        y1 = std::max(y1, y);
    }
    bool empty() const { return x1 < 0; }
};

// Anti-aliased filled ellipse with ~1px soft edge; optional multiplicative
// texture tile. Painted pixels are reported into ext.
void draw_ellipse(TensorF& canvas, double cx, double cy, double a, double b, double theta,
                  const std::array<double, 3>& rgb, double alpha, Extent* ext,
                  const TensorF* tex = nullptr, double tex_amp = 0.0) {
    const int64_t h = canvas.shape[1], w = canvas.shape[2], plane = h * w;
    const double ct = std::cos(theta), st = std::sin(theta);
    const double ex = std::sqrt(a * a * ct * ct + b * b * st * st) + 1.5;
    const double ey = std::sqrt(a * a * st * st + b * b * ct * ct) + 1.5;
    const int64_t px0 = std::max<int64_t>(0, int64_t(std::floor(cx - ex)));
    const int64_t px1 = std::min<int64_t>(w - 1, int64_t(std::ceil(cx + ex)));
    const int64_t py0 = std::max<int64_t>(0, int64_t(std::floor(cy - ey)));
    const int64_t py1 = std::min<int64_t>(h - 1, int64_t(std::ceil(cy + ey)));
    const double m = std::min(a, b);
    const int64_t tw = tex ? tex->shape[1] : 1, th = tex ? tex->shape[0] : 1;

    for (int64_t y = py0; y <= py1; ++y)
        for (int64_t x = px0; x <= px1; ++x) {
            const double dx = (double(x) + 0.5) - cx, dy = (double(y) + 0.5) - cy;
            const double u = (dx * ct + dy * st) / a, v = (-dx * st + dy * ct) / b;
            const double q = u * u + v * v;
            const double cov = std::clamp(0.5 + (1.0 - std::sqrt(q)) * m, 0.0, 1.0);
            const double av = alpha * cov;
            if (av <= 1.0 / 255.0) continue;
            double scale = 1.0;
            if (tex) scale = 1.0 + tex_amp * double(tex->v[(y % th) * tw + (x % tw)]);
            for (int c = 0; c < 3; ++c) {
                float& px = canvas.v[c * plane + y * w + x];
                const double col = std::clamp(rgb[size_t(c)] * scale, 0.0, 1.0);
                px = float(double(px) * (1.0 - av) + col * av);
            }
            if (ext) ext->add(x, y);
        }
}

std::array<double, 3> mix_color(const std::array<double, 3>& a, const std::array<double, 3>& b,
                                double t) {
    return {a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t};
}

// One cell body: cytoplasm, optional perinuclear halo, nucleus. The tight
// extent accumulates every painted cytoplasm pixel; halo and nucleus stay
// strictly inside it.
void draw_one_cell(TensorF& canvas, const CellStyle& st, double cx, double cy, Rng& rng,
                   Extent& ext) {
    const double a_c = rng.uniform(st.radius_lo, st.radius_hi);
    const double b_c = a_c * rng.uniform(0.70, 0.95);
    const double th_c = rng.uniform(0.0, 3.14159265358979323846);

    const double nc = std::clamp(st.nc_mean + st.nc_sd * rng.normal(), 0.02, 0.92);
    const double e_n = rng.uniform(0.75, 1.0);
    const double a_n = std::sqrt(nc * a_c * b_c / e_n);
    const double b_n = a_n * e_n;
    const double th_n = rng.uniform(0.0, 3.14159265358979323846);
    const double dark = std::clamp(st.dark_mean + st.dark_sd * rng.normal(), 0.05, 0.98);

    const double max_off = std::max(0.0, b_c - a_n - 1.0) * 0.45;
    const double off_r = rng.uniform(0.0, max_off), off_a = rng.uniform(0.0, 6.2831853);
    const double nx = cx + off_r * std::cos(off_a), ny = cy + off_r * std::sin(off_a);

    std::array<double, 3> cyto = {0.62 + rng.uniform(-0.05, 0.05), 0.78 + rng.uniform(-0.04, 0.04),
                                  0.86 + rng.uniform(-0.03, 0.03)};
    draw_ellipse(canvas, cx, cy, a_c, b_c, th_c, cyto, 0.80, &ext);

    if (st.halo) {
        const double a_h = std::min(a_n * 1.9, 0.85 * b_c);
        if (a_h > a_n * 1.15)
            draw_ellipse(canvas, nx, ny, a_h, a_h * e_n, th_n, {0.90, 0.95, 0.97}, 0.85, nullptr);
    }

    const std::array<double, 3> nuc = mix_color({0.46, 0.38, 0.66}, {0.15, 0.09, 0.33}, dark);
    if (st.speckle) {
        const int64_t side = std::max<int64_t>(4, int64_t(std::ceil(a_n * 2)) + 2);
        TensorF tex = value_noise(side, side, 3, 2, rng);
        draw_ellipse(canvas, nx, ny, a_n, b_n, th_n, nuc, 0.95, nullptr, &tex, 0.35);
    } else {
        draw_ellipse(canvas, nx, ny, a_n, b_n, th_n, nuc, 0.95, nullptr);
    }
}

// Conservative half-extent of whatever render_cell will paint for a class,
// used for placement margins and spacing.
double class_extent(const CellStyle& st) {
    double ext = st.radius_hi + 3.0;
    if (st.cluster_hi > 1) ext = st.radius_hi * 2.6 + 3.0;
    return ext;
}

}  // namespace

BoundingBox render_cell(TensorF& canvas, CellType cls, const CorpusStyle& style, double cx,
                        double cy, Rng& rng) {
    if (canvas.shape.size() != 3 || canvas.shape[0] != 3)
        throw InvalidInput("canvas must be [3,H,W]");
    const int64_t h = canvas.shape[1], w = canvas.shape[2];
    if (cx < 0 || cx >= double(w) || cy < 0 || cy >= double(h))
        throw InvalidInput("cell position outside canvas");
    const CellStyle& st = style.cls[size_t(cls)];

    Extent ext;
    const int members = int(rng.uniform_int(st.cluster_lo, st.cluster_hi));
    double px = cx, py = cy;
    for (int j = 0; j < members; ++j) {
        if (j > 0) {
            const double ang = rng.uniform(0.0, 6.2831853);
            const double dist = rng.uniform(1.1, 1.5) * st.radius_hi;
            px = cx + dist * std::cos(ang);
            py = cy + dist * std::sin(ang);
            px = std::clamp(px, 1.0, double(w) - 2.0);
            py = std::clamp(py, 1.0, double(h) - 2.0);
        }
        draw_one_cell(canvas, st, px, py, rng, ext);
    }
    if (ext.empty()) throw InvalidInput("cell painted nothing");
    return {double(ext.x0) / double(w), double(ext.y0) / double(h), double(ext.x1 + 1) / double(w),
            double(ext.y1 + 1) / double(h)};
}

AnnotatedImage render_patch(CellType cls, const CorpusStyle& style, int patch_px, Rng& rng) {
    style.validate();
    if (patch_px < 16) throw InvalidInput("patch too small");
    AnnotatedImage out;
    out.image = TensorF({3, patch_px, patch_px});
    paint_background(out.image, style, rng);
    const double jitter = patch_px * 0.05;
    const double cx = patch_px / 2.0 + rng.uniform(-jitter, jitter);
    const double cy = patch_px / 2.0 + rng.uniform(-jitter, jitter);
    Annotation a;
    a.cls = cls;
    a.box = render_cell(out.image, cls, style, cx, cy, rng);
    out.anns.push_back(a);
    return out;
}

AnnotatedImage render_slide(const std::vector<CellType>& cells, int slide_px,
                            const CorpusStyle& style, Rng& rng) {
    style.validate();
    if (slide_px < 32) throw InvalidInput("slide too small");
    AnnotatedImage out;
    out.image = TensorF({3, slide_px, slide_px});
    paint_background(out.image, style, rng);

    struct Placed {
        double cx, cy, ext;
    };
    std::vector<Placed> placed;
    for (size_t i = 0; i < cells.size(); ++i) {
        const CellStyle& st = style.cls[size_t(cells[i])];
        const double ext = class_extent(st);
        const double lo = ext, hi = double(slide_px) - ext;
        bool ok = false;
        for (int attempt = 0; attempt < 80 && !ok; ++attempt) {
            if (lo >= hi) break;
            const double cx = rng.uniform(lo, hi), cy = rng.uniform(lo, hi);
            ok = true;
            for (const Placed& p : placed) {
                const double dx = cx - p.cx, dy = cy - p.cy;
                if (std::sqrt(dx * dx + dy * dy) <= 0.8 * (ext + p.ext)) {
                    ok = false;
                    break;
                }
            }
            if (ok) placed.push_back({cx, cy, ext});
        }
        if (!ok)
            throw InvalidInput("placed " + std::to_string(i) + " of " + std::to_string(cells.size()) +
                               " cells before exceeding the overlap budget");
        Annotation a;
        a.cls = cells[i];
        a.box = render_cell(out.image, cells[i], style, placed.back().cx, placed.back().cy, rng);
        out.anns.push_back(a);
    }
    return out;
}

AnnotatedImage render_slide(int n_cells, const std::array<double, 5>& class_mix, int slide_px,
                            const CorpusStyle& style, Rng& rng) {
    if (n_cells < 0) throw InvalidInput("negative cell count");
    double total = 0;
    for (double p : class_mix) {
        if (p < 0) throw InvalidInput("negative class weight");
        total += p;
    }
    if (n_cells > 0 && total <= 0) throw InvalidInput("class mix sums to zero");
    std::vector<CellType> cells;
    for (int i = 0; i < n_cells; ++i) {
        double u = rng.uniform() * total, acc = 0;
        int pick = kNumCellTypes - 1;
        for (int c = 0; c < kNumCellTypes; ++c) {
            acc += class_mix[size_t(c)];
            if (u < acc) {
                pick = c;
                break;
            }
        }
        cells.push_back(CellType(pick));
    }
    return render_slide(cells, slide_px, style, rng);
}

namespace {

// Exact class counts: n_abn abnormal cells (uniform over the four abnormal
// classes) shuffled among NILM cells.
std::vector<CellType> abnormal_cell_list(int n_total, int n_abn, Rng& rng) {
    std::vector<CellType> cells(size_t(n_total), CellType::NILM);
    for (int i = 0; i < n_abn; ++i) cells[size_t(i)] = kAbnormalTypes[rng.uniform_int(0, 3)];
    for (size_t i = cells.size(); i > 1; --i) std::swap(cells[i - 1], cells[size_t(rng.uniform_int(0, int(i) - 1))]);
    return cells;
}

}  // namespace

std::string build_corpus(const std::string& root, const CorpusConfig& cfg, uint64_t seed) {
    cfg.style.validate();
    if (cfg.patch_px > cfg.slide_px) throw ConfigError("patch larger than slide");
    if (cfg.n_slides < 1 || cfg.n_holdout < 1 || cfg.n_abnormal < 1 || cfg.n_abnormal_eval < 0 ||
        cfg.n_abnormal_eval >= cfg.n_abnormal)
        throw ConfigError("bad corpus counts");
    if (cfg.nilm_lo < 0 || cfg.nilm_lo > cfg.nilm_hi || cfg.abn_lo < 1 || cfg.abn_lo > cfg.abn_hi)
        throw ConfigError("bad per-slide cell count ranges");
    if (cfg.patches_per_class < 1 || cfg.test_patches_per_class < 1)
        throw ConfigError("bad patch counts");

    const std::array<double, 5> all_nilm = {1, 0, 0, 0, 0};
    auto render_normals = [&](const std::string& dir, const char* tag, int n) {
        DatasetWriter wtr((fs::path(root) / dir).string(), true);
        for (int i = 0; i < n; ++i) {
            Rng rng = derive_rng(seed, tag, uint64_t(i));
            AnnotatedImage im = render_slide(int(rng.uniform_int(cfg.nilm_lo, cfg.nilm_hi)), all_nilm,
                                             cfg.slide_px, cfg.style, rng);
            im.seed = rng.seed_state();
            wtr.add(im);
        }
        wtr.finish();
    };
    auto render_abnormals = [&](const std::string& dir, const char* tag, int n) {
        DatasetWriter wtr((fs::path(root) / dir).string(), true);
        for (int i = 0; i < n; ++i) {
            Rng rng = derive_rng(seed, tag, uint64_t(i));
            const int n_abn = int(rng.uniform_int(cfg.abn_lo, cfg.abn_hi));
            const int total = std::max(int(rng.uniform_int(cfg.nilm_lo, cfg.nilm_hi)), n_abn);
            AnnotatedImage im =
                render_slide(abnormal_cell_list(total, n_abn, rng), cfg.slide_px, cfg.style, rng);
            im.seed = rng.seed_state();
            wtr.add(im);
        }
        wtr.finish();
    };
    auto render_patches = [&](const std::string& dir, const char* tag, int per_class) {
        DatasetWriter wtr((fs::path(root) / dir).string(), true);
        for (int c = 0; c < kNumCellTypes; ++c)
            for (int i = 0; i < per_class; ++i) {
                Rng rng = derive_rng(seed, tag, uint64_t(c) * 1000003ull + uint64_t(i));
                AnnotatedImage im = render_patch(CellType(c), cfg.style, cfg.patch_px, rng);
                im.seed = rng.seed_state();
                wtr.add(im);
            }
        wtr.finish();
    };

    render_normals("slides_train", "corpus-slide", cfg.n_slides);
    render_normals("slides_holdout", "corpus-holdout", cfg.n_holdout);
    render_abnormals("slides_abnormal", "corpus-abn", cfg.n_abnormal - cfg.n_abnormal_eval);
    if (cfg.n_abnormal_eval > 0)
        render_abnormals("slides_abnormal_eval", "corpus-abn-eval", cfg.n_abnormal_eval);
    render_patches("patches_train", "corpus-patch", cfg.patches_per_class);
    render_patches("patches_test", "corpus-patch-test", cfg.test_patches_per_class);

    nlohmann::json summary = {
        {"slide_px", cfg.slide_px},
        {"patch_px", cfg.patch_px},
        {"slides_train", cfg.n_slides},
        {"slides_holdout", cfg.n_holdout},
        {"slides_abnormal", cfg.n_abnormal - cfg.n_abnormal_eval},
        {"slides_abnormal_eval", cfg.n_abnormal_eval},
        {"patches_train_per_class", cfg.patches_per_class},
        {"patches_test_per_class", cfg.test_patches_per_class},
        {"seed", seed},
    };
    const std::string path = (fs::path(root) / "corpus_summary.json").string();
    write_json(path, summary);
    return path;
}

}  // namespace cyto
