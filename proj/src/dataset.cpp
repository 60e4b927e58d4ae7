#include "cyto/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>

#include "cyto/common.hpp"
#include "cyto/image_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace cyto {

int category_id_for(CellType cls) {
    switch (cls) {
        case CellType::ASC_US: return 1;
        case CellType::ASC_H: return 2;
        case CellType::LSIL: return 3;
        case CellType::HSIL: return 4;
        case CellType::NILM: return 5;
    }
    throw InvalidInput("unknown cell type");
}

CellType cell_type_for_category(int id) {
    switch (id) {
        case 1: return CellType::ASC_US;
        case 2: return CellType::ASC_H;
        case 3: return CellType::LSIL;
        case 4: return CellType::HSIL;
        case 5: return CellType::NILM;
    }
    throw InvalidInput("unknown category id: " + std::to_string(id));
}

namespace {

const char* category_display_name(CellType cls) {
    switch (cls) {
        case CellType::ASC_US: return "ASC-US";
        case CellType::ASC_H: return "ASC-H";
        case CellType::LSIL: return "LSIL";
        case CellType::HSIL: return "HSIL";
        case CellType::NILM: return "NILM";
    }
    throw InvalidInput("unknown cell type");
}

json categories_doc(bool include_nilm) {
    json cats = json::array();
    const CellType order[5] = {CellType::ASC_US, CellType::ASC_H, CellType::LSIL,
                               CellType::HSIL, CellType::NILM};
    for (int i = 0; i < (include_nilm ? 5 : 4); ++i)
        cats.push_back({{"id", category_id_for(order[i])}, {"name", category_display_name(order[i])}});
    return cats;
}

}  // namespace

DatasetWriter::DatasetWriter(const std::string& dir, bool include_nilm)
    : dir_(dir), include_nilm_(include_nilm), img_docs_(json::array()), ann_docs_(json::array()) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "images", ec);
    if (ec) throw IoError("cannot create dataset directory: " + dir);
}

int64_t DatasetWriter::add(const AnnotatedImage& im) {
    if (finished_) throw InvalidInput("DatasetWriter already finished");
    const int64_t id = next_image_id_++;
    char name[64];
    std::snprintf(name, sizeof name, "images/img_%05lld.png", (long long)id);
    write_png((fs::path(dir_) / name).string(), im.image);
    img_docs_.push_back({{"id", id},
                         {"file_name", name},
                         {"width", im.width()},
                         {"height", im.height()},
                         {"seed", im.seed}});
    for (const Annotation& a : im.anns) {
        if (a.cls == CellType::NILM && !include_nilm_)
            throw InvalidInput("NILM annotation in an export-only dataset");
        if (!a.box.valid())
            throw InvalidInput("annotation box out of bounds in image " + std::to_string(id));
        const double W = double(im.width()), H = double(im.height());
        ann_docs_.push_back({{"id", next_ann_id_++},
                             {"image_id", id},
                             {"category_id", category_id_for(a.cls)},
                             {"bbox", {a.box.x0 * W, a.box.y0 * H, (a.box.x1 - a.box.x0) * W,
                                       (a.box.y1 - a.box.y0) * H}},
                             {"area", (a.box.x1 - a.box.x0) * W * (a.box.y1 - a.box.y0) * H},
                             {"iscrowd", 0}});
    }
    return id;
}

std::string DatasetWriter::finish() {
    if (finished_) throw InvalidInput("DatasetWriter already finished");
    if (next_image_id_ == 1) throw InvalidInput("empty dataset");
    finished_ = true;
    json doc = {{"images", std::move(img_docs_)},
                {"annotations", std::move(ann_docs_)},
                {"categories", categories_doc(include_nilm_)}};
    const std::string path = (fs::path(dir_) / "annotations.json").string();
    write_json(path, doc);
    return path;
}

std::string write_dataset(const std::string& dir, const std::vector<AnnotatedImage>& images,
                          bool include_nilm) {
    if (images.empty()) throw InvalidInput("write_dataset: empty dataset");
    DatasetWriter w(dir, include_nilm);
    for (const AnnotatedImage& im : images) w.add(im);
    return w.finish();
}

LoadedDataset load_dataset(const std::string& dir, bool with_pixels) {
    const fs::path ann_path = fs::path(dir) / "annotations.json";
    if (!fs::exists(ann_path)) throw MissingArtifact("no annotations.json under " + dir);
    json doc = read_json(ann_path.string());

    LoadedDataset out;
    std::map<int64_t, size_t> index;
    for (const json& im : doc.at("images")) {
        AnnotatedImage ai;
        const int64_t id = im.at("id").get<int64_t>();
        const std::string file = im.at("file_name").get<std::string>();
        if (im.contains("seed")) ai.seed = im.at("seed").get<uint64_t>();
        int64_t w = im.at("width").get<int64_t>(), h = im.at("height").get<int64_t>();
        if (with_pixels) {
            ai.image = read_png((fs::path(dir) / file).string());
            if (ai.width() != w || ai.height() != h)
                throw InvalidInput("image size mismatch vs document: " + file);
        } else {
            ai.image = TensorF({3, h, w});
        }
        index[id] = out.images.size();
        out.images.push_back(std::move(ai));
        out.ids.push_back(id);
        out.files.push_back(file);
    }
    for (const json& an : doc.at("annotations")) {
        const int64_t id = an.at("image_id").get<int64_t>();
        auto it = index.find(id);
        if (it == index.end())
            throw InvalidInput("annotation references unknown image id " + std::to_string(id));
        AnnotatedImage& ai = out.images[it->second];
        const auto& bb = an.at("bbox");
        const double W = double(ai.width()), H = double(ai.height());
        Annotation a;
        a.cls = cell_type_for_category(an.at("category_id").get<int>());
        a.box = {bb.at(0).get<double>() / W, bb.at(1).get<double>() / H,
                 (bb.at(0).get<double>() + bb.at(2).get<double>()) / W,
                 (bb.at(1).get<double>() + bb.at(3).get<double>()) / H};
        ai.anns.push_back(a);
    }
    return out;
}

void write_detections(const std::string& path, const std::vector<DetectionRecord>& dets) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    for (const DetectionRecord& d : dets) {
        json row = {{"image_id", d.image_id},
                    {"bbox", {d.x, d.y, d.w, d.h}},
                    {"category_id", category_id_for(d.cls)},
                    {"score", d.score}};
        out << row.dump() << "\n";
    }
    if (!out) throw IoError("write failed: " + path);
}

namespace {

std::vector<DetectionRecord> read_records(const std::string& path, bool score_required) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("cannot open: " + path);
    std::vector<DetectionRecord> out;
    std::string line;
    int64_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json row;
        try {
            row = json::parse(line);
        } catch (const json::exception& e) {
            throw InvalidInput(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        DetectionRecord d;
        d.image_id = row.at("image_id").get<int64_t>();
        const auto& bb = row.at("bbox");
        d.x = bb.at(0).get<double>();
        d.y = bb.at(1).get<double>();
        d.w = bb.at(2).get<double>();
        d.h = bb.at(3).get<double>();
        d.cls = cell_type_for_category(row.at("category_id").get<int>());
        if (score_required || row.contains("score")) d.score = row.at("score").get<double>();
        else d.score = 1.0;
        if (!std::isfinite(d.score))
            throw InvalidInput(path + ":" + std::to_string(lineno) + ": non-finite score");
        out.push_back(d);
    }
    return out;
}

}  // namespace

std::vector<DetectionRecord> read_detections(const std::string& path) {
    return read_records(path, true);
}

std::vector<DetectionRecord> read_box_file(const std::string& path) {
    return read_records(path, false);
}

void write_json(const std::string& path, const json& doc) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot open for writing: " + path);
    out << doc.dump(2) << "\n";
    if (!out) throw IoError("write failed: " + path);
}

json read_json(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingArtifact("cannot open: " + path);
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw InvalidInput(path + ": " + e.what());
    }
}

}  // namespace cyto
