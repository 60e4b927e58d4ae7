#pragma once

#include <string>
#include <vector>

#include "cyto/types.hpp"

#include "json.hpp"

namespace cyto {

// Category ids in annotation documents. Abnormal classes are dense from 1;
// NILM gets id 5 and appears only in corpus-internal documents, never in
// exported datasets.
int category_id_for(CellType cls);
CellType cell_type_for_category(int id);

// Pixel-space detection used at the evaluation boundary and in detections
// files; internal Detection boxes stay normalized.
struct DetectionRecord {
    int64_t image_id = 0;
    double x = 0, y = 0, w = 0, h = 0;  // pixels, [x,y,width,height]
    CellType cls = CellType::ASC_US;
    double score = 0;
};

// Streams a dataset to dir/images/*.png plus dir/annotations.json with
// "images", "annotations" (bbox [x,y,w,h] in pixels) and "categories"
// collections; ids dense from 1. With include_nilm=false, NILM annotations
// are rejected. Images are written as they are added, so only one needs to
// be resident at a time.
class DatasetWriter {
  public:
    DatasetWriter(const std::string& dir, bool include_nilm);
    int64_t add(const AnnotatedImage& image);  // returns the document image id
    std::string finish();                      // writes annotations.json
    int64_t count() const { return next_image_id_ - 1; }

  private:
    std::string dir_;
    bool include_nilm_;
    bool finished_ = false;
    int64_t next_image_id_ = 1, next_ann_id_ = 1;
    nlohmann::json img_docs_, ann_docs_;
};

std::string write_dataset(const std::string& dir, const std::vector<AnnotatedImage>& images,
                          bool include_nilm);

struct LoadedDataset {
    std::vector<AnnotatedImage> images;   // images empty tensors unless with_pixels
    std::vector<int64_t> ids;             // document image ids, parallel to images
    std::vector<std::string> files;       // file names relative to the dataset dir
};

LoadedDataset load_dataset(const std::string& dir, bool with_pixels);

// JSON-lines detections: one {"image_id","bbox":[x,y,w,h],"category_id","score"}
// object per line.
void write_detections(const std::string& path, const std::vector<DetectionRecord>& dets);
std::vector<DetectionRecord> read_detections(const std::string& path);

// External box files for plugging in an outside detector: same record shape
// as detections, score optional (defaults to 1).
std::vector<DetectionRecord> read_box_file(const std::string& path);

void write_json(const std::string& path, const nlohmann::json& doc);
nlohmann::json read_json(const std::string& path);

}  // namespace cyto
