#pragma once

// OOD-aware pseudo-label fusion. Confident teacher predictions become ID
// pseudo-labels, OOD proposals become "unknown" labels, and ID labels that
// overlap an OOD label beyond the IoU threshold are dropped.

#include <filesystem>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "owssd/error.hpp"
#include "owssd/geometry.hpp"
#include "owssd/io.hpp"
#include "owssd/metrics.hpp"

namespace owssd {

inline constexpr const char* kTeacherSource = "teacher";
inline constexpr const char* kOodExplorerSource = "ood-explorer";
inline constexpr const char* kGroundTruthSource = "gt";

struct FusionConfig {
  double conf_threshold = 0.9;
  double overlap_iou = 0.5;
  double ood_nms_iou = 0.5;
  bool filtering_enabled = true;

  void validate() const {
    auto in_unit = [](double v) { return v >= 0.0 && v <= 1.0; };
    if (!in_unit(conf_threshold)) throw InputError("confidence threshold must lie in [0, 1]");
    if (!in_unit(overlap_iou)) throw InputError("overlap IoU must lie in [0, 1]");
    if (!in_unit(ood_nms_iou)) throw InputError("OOD NMS IoU must lie in [0, 1]");
  }
};

/// Fused labels of one unlabeled image. id_labels come from the teacher,
/// ood_labels from the OOD explorer.
struct PseudoLabelSet {
  std::string image_id;
  std::vector<ScoredBox> id_labels;
  std::vector<ScoredBox> ood_labels;

  bool operator==(const PseudoLabelSet&) const = default;
};

/// Teacher predictions with score >= conf_threshold, order preserved.
inline std::vector<ScoredBox> select_teacher_pseudolabels(std::span<const ScoredBox> detections,
                                                          const ClassCatalog& catalog, double conf_threshold) {
  if (!(conf_threshold >= 0.0 && conf_threshold <= 1.0)) throw InputError("confidence threshold must lie in [0, 1]");
  std::vector<ScoredBox> out;
  for (const auto& d : detections) {
    if (!d.class_label || !catalog.contains(*d.class_label)) {
      throw InputError("teacher detection label '" + d.class_label.value_or("<none>") + "' is not an ID class");
    }
    if (d.score >= conf_threshold) out.push_back(d);
  }
  return out;
}

inline PseudoLabelSet fuse(const ImageDetections& id_labels, const ImageDetections& ood_labels,
                           const FusionConfig& cfg) {
  cfg.validate();
  if (id_labels.image_id != ood_labels.image_id) {
    throw InputError("cannot fuse labels of different images ('" + id_labels.image_id + "' vs '" +
                     ood_labels.image_id + "')");
  }
  for (const auto& b : id_labels.boxes) {
    if (!b.class_label || *b.class_label == kUnknownClass) throw InputError("ID pseudo-labels need an ID class label");
  }
  PseudoLabelSet out{id_labels.image_id, {}, {}};
  std::vector<ScoredBox> unknown;
  for (auto b : ood_labels.boxes) {
    b.class_label = kUnknownClass;
    unknown.push_back(std::move(b));
  }
  out.ood_labels = nms(unknown, cfg.ood_nms_iou);
  for (const auto& b : id_labels.boxes) {
    const bool conflict = cfg.filtering_enabled &&
                          std::any_of(out.ood_labels.begin(), out.ood_labels.end(),
                                      [&](const ScoredBox& o) { return iou(b.box, o.box) > cfg.overlap_iou; });
    if (!conflict) out.id_labels.push_back(b);
  }
  return out;
}

inline PseudoLabelSet fuse(const std::string& image_id, std::span<const ScoredBox> id_labels,
                           std::span<const ScoredBox> ood_labels, const FusionConfig& cfg) {
  return fuse(ImageDetections{image_id, {id_labels.begin(), id_labels.end()}},
              ImageDetections{image_id, {ood_labels.begin(), ood_labels.end()}}, cfg);
}

/// Per-image fusion over whole files: teacher detections are thresholded and
/// matched with the OOD labels of the same image. Output follows `images`.
inline std::vector<PseudoLabelSet> fuse_dataset(std::span<const std::string> images,
                                                std::span<const ImageDetections> teacher,
                                                std::span<const ImageDetections> ood, const ClassCatalog& catalog,
                                                const FusionConfig& cfg) {
  cfg.validate();
  std::unordered_map<std::string, const ImageDetections*> by_teacher, by_ood;
  for (const auto& t : teacher) by_teacher[t.image_id] = &t;
  for (const auto& o : ood) by_ood[o.image_id] = &o;
  const std::unordered_set<std::string> known(images.begin(), images.end());
  for (const auto& [id, _] : by_teacher) {
    if (!known.contains(id)) throw InputError("teacher detections for undeclared image '" + id + "'");
  }
  for (const auto& [id, _] : by_ood) {
    if (!known.contains(id)) throw InputError("OOD labels for undeclared image '" + id + "'");
  }
  std::vector<PseudoLabelSet> out;
  for (const auto& id : images) {
    ImageDetections selected{id, {}};
    if (auto it = by_teacher.find(id); it != by_teacher.end()) {
      selected.boxes = select_teacher_pseudolabels(it->second->boxes, catalog, cfg.conf_threshold);
    }
    ImageDetections unknown{id, {}};
    if (auto it = by_ood.find(id); it != by_ood.end()) unknown.boxes = it->second->boxes;
    out.push_back(fuse(selected, unknown, cfg));
  }
  return out;
}

/// Pseudo-labels as a detection list (ID labels then unknown labels per image).
inline std::vector<ImageDetections> as_detections(std::span<const PseudoLabelSet> fused) {
  std::vector<ImageDetections> out;
  for (const auto& f : fused) {
    ImageDetections img{f.image_id, f.id_labels};
    img.boxes.insert(img.boxes.end(), f.ood_labels.begin(), f.ood_labels.end());
    out.push_back(std::move(img));
  }
  return out;
}

struct TrainingSet {
  std::vector<std::string> id_classes;
  std::vector<GroundTruthScene> labeled;
  std::vector<PseudoLabelSet> fused;
};

/// Builds the owssd.annotations.v1 document a student would be trained on:
/// labeled GT plus fused pseudo-labels, with "unknown" appended to C_id.
/// Image sizes of the fused images come from `image_sizes`. A fused image
/// that shares its id with a labeled scene is dropped in favour of the GT.
inline AnnotationFile build_training_set(const ClassCatalog& catalog, std::span<const GroundTruthScene> labeled,
                                         std::span<const PseudoLabelSet> fused,
                                         std::span<const ImageInfo> image_sizes) {
  AnnotationFile file;
  file.classes = catalog.with_unknown();
  std::unordered_set<std::string> labeled_ids;
  for (const auto& scene : labeled) {
    if (!labeled_ids.insert(scene.image_id).second) throw InputError("duplicate labeled image '" + scene.image_id + "'");
    file.images.push_back({scene.image_id, scene.width, scene.height});
    for (const auto& b : scene.boxes) {
      if (!catalog.contains(b.class_name)) {
        throw InputError("labeled box of class '" + b.class_name + "' is not an ID class");
      }
      file.boxes.push_back({scene.image_id, b.box, b.class_name, std::nullopt, std::string(kGroundTruthSource)});
    }
  }
  std::unordered_map<std::string, const ImageInfo*> sizes;
  for (const auto& s : image_sizes) sizes[s.id] = &s;
  std::unordered_set<std::string> fused_ids;
  nlohmann::json pseudo_ids = nlohmann::json::array();
  for (const auto& f : fused) {
    if (labeled_ids.contains(f.image_id)) continue;
    if (!fused_ids.insert(f.image_id).second) throw InputError("duplicate fused image '" + f.image_id + "'");
    pseudo_ids.push_back(f.image_id);
    auto it = sizes.find(f.image_id);
    if (it == sizes.end()) throw InputError("no image size known for fused image '" + f.image_id + "'");
    file.images.push_back(*it->second);
    for (const auto& b : f.id_labels) {
      file.boxes.push_back({f.image_id, b.box, b.class_label.value_or(""), b.score, std::string(kTeacherSource)});
    }
    for (const auto& b : f.ood_labels) {
      file.boxes.push_back({f.image_id, b.box, kUnknownClass, b.score, std::string(kOodExplorerSource)});
    }
  }
  // Lets a reader tell fused images without any label from labeled ones.
  file.meta["pseudo_labeled_images"] = std::move(pseudo_ids);
  validate_annotations(file);
  return file;
}

inline void emit_training_set(const std::filesystem::path& path, const ClassCatalog& catalog,
                              std::span<const GroundTruthScene> labeled, std::span<const PseudoLabelSet> fused,
                              std::span<const ImageInfo> image_sizes, const nlohmann::json& meta = {}) {
  AnnotationFile file = build_training_set(catalog, labeled, fused, image_sizes);
  if (meta.is_object()) file.meta.update(meta);
  save_annotations(path, file);
}

/// Inverse of build_training_set: splits a training-set document back into
/// labeled scenes and pseudo-label sets by provenance tag.
inline TrainingSet read_training_set(const AnnotationFile& file) {
  TrainingSet out;
  for (const auto& c : file.classes) {
    if (c != kUnknownClass) out.id_classes.push_back(c);
  }
  std::unordered_map<std::string, std::string> kind;  // image -> "gt" | "pseudo"
  if (file.meta.contains("pseudo_labeled_images")) {
    for (const auto& id : file.meta.at("pseudo_labeled_images")) kind.emplace(id.get<std::string>(), "pseudo");
  }
  for (const auto& b : file.boxes) {
    const bool gt = !b.source || *b.source == kGroundTruthSource;
    const std::string k = gt ? "gt" : "pseudo";
    auto [it, inserted] = kind.emplace(b.image_id, k);
    if (!inserted && it->second != k) throw SchemaError("image '" + b.image_id + "' mixes GT and pseudo-labels");
  }
  std::unordered_map<std::string, std::size_t> scene_slot, fused_slot;
  for (const auto& img : file.images) {
    auto it = kind.find(img.id);
    if (it != kind.end() && it->second == "pseudo") {
      fused_slot[img.id] = out.fused.size();
      out.fused.push_back({img.id, {}, {}});
    } else {
      scene_slot[img.id] = out.labeled.size();
      out.labeled.push_back({img.id, img.width, img.height, {}});
    }
  }
  for (const auto& b : file.boxes) {
    if (auto it = scene_slot.find(b.image_id); it != scene_slot.end()) {
      out.labeled[it->second].boxes.push_back({b.box, b.class_name});
      continue;
    }
    auto& set = out.fused[fused_slot.at(b.image_id)];
    ScoredBox sb(b.box, b.score.value_or(1.0), b.class_name);
    if (*b.source == kOodExplorerSource) {
      set.ood_labels.push_back(std::move(sb));
    } else {
      set.id_labels.push_back(std::move(sb));
    }
  }
  return out;
}

inline TrainingSet load_training_set(const std::filesystem::path& path) { return read_training_set(load_annotations(path)); }

}  // namespace owssd
