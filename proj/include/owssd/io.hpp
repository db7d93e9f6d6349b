#pragma once

// owssd.* file schemas. Features, proposals and detections are line records
// (a header line followed by one JSON object per line); annotations are a
// single JSON document. Loaders validate every record and report the line.

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include <json.hpp>

#include "owssd/error.hpp"
#include "owssd/geometry.hpp"
#include "owssd/metrics.hpp"
#include "owssd/nnet.hpp"

namespace owssd {

inline constexpr const char* kFeaturesSchema = "owssd.features.v1";
inline constexpr const char* kProposalsSchema = "owssd.proposals.v1";
inline constexpr const char* kDetectionsSchema = "owssd.detections.v1";
inline constexpr const char* kAnnotationsSchema = "owssd.annotations.v1";

enum class RecordSource { Gt, Proposal, Teacher };

inline const char* to_string(RecordSource s) {
  switch (s) {
    case RecordSource::Gt: return "gt";
    case RecordSource::Proposal: return "proposal";
    case RecordSource::Teacher: return "teacher";
  }
  return "gt";
}

struct FeatureRecord {
  std::string image_id;
  BoundingBox box;
  std::optional<std::string> class_name;
  std::optional<double> score;
  RecordSource source = RecordSource::Gt;
  Feature feature;

  bool operator==(const FeatureRecord&) const = default;
};

struct FeatureFile {
  int dim = 0;
  std::vector<FeatureRecord> records;
  nlohmann::json meta = nlohmann::json::object();
};

struct ProposalRecord {
  std::string image_id;
  ScoredBox box;  // class_label empty, or "unknown" after classification

  bool operator==(const ProposalRecord&) const = default;
};

struct ProposalFile {
  std::vector<ProposalRecord> records;
  nlohmann::json meta = nlohmann::json::object();
};

struct DetectionFile {
  std::vector<ProposalRecord> records;  // class_label always set
  nlohmann::json meta = nlohmann::json::object();
};

struct ImageInfo {
  std::string id;
  double width = 0.0;
  double height = 0.0;

  bool operator==(const ImageInfo&) const = default;
};

struct AnnotationBox {
  std::string image_id;
  BoundingBox box;
  std::string class_name;
  std::optional<double> score;        // pseudo-labels only
  std::optional<std::string> source;  // "gt", "teacher" or "ood-explorer"

  bool operator==(const AnnotationBox&) const = default;
};

struct AnnotationFile {
  std::vector<std::string> classes;
  std::vector<ImageInfo> images;
  std::vector<AnnotationBox> boxes;
  nlohmann::json meta = nlohmann::json::object();
};

// --- helpers -----------------------------------------------------------------

namespace detail {

inline std::string located(const std::filesystem::path& path, std::size_t line, const std::string& msg) {
  return path.string() + ":" + std::to_string(line) + ": " + msg;
}

inline std::ifstream open_input(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingFileError("file not found: " + path.string());
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

inline std::ofstream open_output(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

inline void finish_output(std::ofstream& out, const std::filesystem::path& path) {
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

inline nlohmann::json box_json(const BoundingBox& b) { return {b.x1(), b.y1(), b.x2(), b.y2()}; }

inline BoundingBox box_from_json(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw SchemaError("box must be an array [x1, y1, x2, y2]");
  return BoundingBox(j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>());
}

struct ParsedLines {
  nlohmann::json header;
  std::vector<std::pair<std::size_t, nlohmann::json>> records;  // (line number, record)
};

inline ParsedLines read_lines(const std::filesystem::path& path, const char* schema) {
  auto in = open_input(path);
  ParsedLines out;
  std::string line;
  std::size_t line_no = 0;
  bool have_header = false;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line.find_first_not_of(" \t\r") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::parse_error& e) {
      throw SchemaError(located(path, line_no, std::string("unparseable record: ") + e.what()));
    }
    if (!j.is_object()) throw SchemaError(located(path, line_no, "record must be an object"));
    if (!have_header) {
      const auto tag = j.value("schema", std::string{});
      if (tag != schema) {
        throw SchemaError(located(path, line_no, "expected schema '" + std::string(schema) + "', found '" + tag + "'"));
      }
      out.header = std::move(j);
      have_header = true;
      continue;
    }
    out.records.emplace_back(line_no, std::move(j));
  }
  if (!have_header) throw SchemaError(path.string() + ": missing header line");
  return out;
}

inline void write_lines(const std::filesystem::path& path, const nlohmann::json& header,
                        const std::vector<nlohmann::json>& records) {
  auto out = open_output(path);
  out << header.dump() << '\n';
  for (const auto& r : records) out << r.dump() << '\n';
  finish_output(out, path);
}

/// Wraps per-record parsing so every failure names its line, while keeping
/// the error kind (dimension, box, schema) distinct.
template <typename Fn>
auto parse_record(const std::filesystem::path& path, std::size_t line, Fn&& fn) {
  try {
    return fn();
  } catch (const DimensionError& e) {
    throw DimensionError(located(path, line, e.what()));
  } catch (const InputError& e) {
    throw InputError(located(path, line, e.what()));
  } catch (const SchemaError& e) {
    throw SchemaError(located(path, line, e.what()));
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(located(path, line, e.what()));
  }
}

inline std::optional<std::string> optional_string(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<std::string>();
}

inline std::optional<double> optional_double(const nlohmann::json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

inline void check_score(double s) {
  if (!(s >= 0.0 && s <= 1.0)) throw InputError("score must lie in [0, 1]");
}

inline nlohmann::json header_with_meta(const char* schema, const nlohmann::json& meta) {
  nlohmann::json h{{"schema", schema}};
  if (!meta.empty()) h["meta"] = meta;
  return h;
}

}  // namespace detail

// --- features ----------------------------------------------------------------

inline RecordSource source_from_string(const std::string& s) {
  if (s == "gt") return RecordSource::Gt;
  if (s == "proposal") return RecordSource::Proposal;
  if (s == "teacher") return RecordSource::Teacher;
  throw SchemaError("unknown record source '" + s + "'");
}

inline nlohmann::json feature_record_json(const FeatureRecord& r) {
  return {{"image_id", r.image_id},
          {"box", detail::box_json(r.box)},
          {"class", r.class_name ? nlohmann::json(*r.class_name) : nlohmann::json(nullptr)},
          {"score", r.score ? nlohmann::json(*r.score) : nlohmann::json(nullptr)},
          {"source", to_string(r.source)},
          {"feature", r.feature}};
}

inline void save_features(const std::filesystem::path& path, const FeatureFile& file) {
  nlohmann::json header = detail::header_with_meta(kFeaturesSchema, file.meta);
  header["dim"] = file.dim;
  std::vector<nlohmann::json> records;
  records.reserve(file.records.size());
  for (const auto& r : file.records) {
    if (r.feature.size() != static_cast<std::size_t>(file.dim)) {
      throw DimensionError("feature record for image '" + r.image_id + "' does not match file dimension");
    }
    records.push_back(feature_record_json(r));
  }
  detail::write_lines(path, header, records);
}

inline FeatureFile load_features(const std::filesystem::path& path) {
  auto parsed = detail::read_lines(path, kFeaturesSchema);
  FeatureFile file;
  file.meta = parsed.header.value("meta", nlohmann::json::object());
  if (!parsed.header.contains("dim") || !parsed.header.at("dim").is_number_integer() ||
      parsed.header.at("dim").get<int>() < 1) {
    throw SchemaError(detail::located(path, 1, "header must carry a positive integer 'dim'"));
  }
  file.dim = parsed.header.at("dim").get<int>();
  for (const auto& [line, j] : parsed.records) {
    file.records.push_back(detail::parse_record(path, line, [&, &j = j] {
      auto feature = j.at("feature").get<Feature>();
      if (feature.size() != static_cast<std::size_t>(file.dim)) {
        throw DimensionError("feature length " + std::to_string(feature.size()) + " does not match header dim " +
                             std::to_string(file.dim));
      }
      for (double v : feature) {
        if (!std::isfinite(v)) throw InputError("feature values must be finite");
      }
      auto score = detail::optional_double(j, "score");
      if (score) detail::check_score(*score);
      return FeatureRecord{j.at("image_id").get<std::string>(), detail::box_from_json(j.at("box")),
                           detail::optional_string(j, "class"), score,
                           source_from_string(j.at("source").get<std::string>()), std::move(feature)};
    }));
  }
  return file;
}

/// Groups GT feature records by class name (records without a class are skipped).
inline std::map<std::string, std::vector<Feature>> features_by_class(std::span<const FeatureRecord> records) {
  std::map<std::string, std::vector<Feature>> out;
  for (const auto& r : records) {
    if (r.class_name) out[*r.class_name].push_back(r.feature);
  }
  return out;
}

// --- proposals / detections ---------------------------------------------------

inline nlohmann::json proposal_record_json(const ProposalRecord& r) {
  nlohmann::json j{{"image_id", r.image_id}, {"box", detail::box_json(r.box.box)}, {"score", r.box.score}};
  if (r.box.class_label) j["class"] = *r.box.class_label;
  return j;
}

inline void save_proposals(const std::filesystem::path& path, const ProposalFile& file) {
  std::vector<nlohmann::json> records;
  for (const auto& r : file.records) records.push_back(proposal_record_json(r));
  detail::write_lines(path, detail::header_with_meta(kProposalsSchema, file.meta), records);
}

inline ProposalFile load_proposals(const std::filesystem::path& path) {
  auto parsed = detail::read_lines(path, kProposalsSchema);
  ProposalFile file;
  file.meta = parsed.header.value("meta", nlohmann::json::object());
  for (const auto& [line, j] : parsed.records) {
    file.records.push_back(detail::parse_record(path, line, [&j = j] {
      auto label = detail::optional_string(j, "class");
      if (label && *label != kUnknownClass) throw SchemaError("proposal class must be absent or 'unknown'");
      return ProposalRecord{j.at("image_id").get<std::string>(),
                            ScoredBox(detail::box_from_json(j.at("box")), j.at("score").get<double>(), label)};
    }));
  }
  return file;
}

inline void save_detections(const std::filesystem::path& path, const DetectionFile& file) {
  std::vector<nlohmann::json> records;
  for (const auto& r : file.records) {
    if (!r.box.class_label) throw InputError("detection record for image '" + r.image_id + "' has no class");
    records.push_back(proposal_record_json(r));
  }
  detail::write_lines(path, detail::header_with_meta(kDetectionsSchema, file.meta), records);
}

inline DetectionFile load_detections(const std::filesystem::path& path) {
  auto parsed = detail::read_lines(path, kDetectionsSchema);
  DetectionFile file;
  file.meta = parsed.header.value("meta", nlohmann::json::object());
  for (const auto& [line, j] : parsed.records) {
    file.records.push_back(detail::parse_record(path, line, [&j = j] {
      return ProposalRecord{j.at("image_id").get<std::string>(),
                            ScoredBox(detail::box_from_json(j.at("box")), j.at("score").get<double>(),
                                      j.at("class").get<std::string>())};
    }));
  }
  return file;
}

/// Groups records per image in order of first appearance.
inline std::vector<ImageDetections> group_by_image(std::span<const ProposalRecord> records) {
  std::vector<ImageDetections> out;
  std::unordered_map<std::string, std::size_t> slot;
  for (const auto& r : records) {
    auto [it, inserted] = slot.try_emplace(r.image_id, out.size());
    if (inserted) out.push_back({r.image_id, {}});
    out[it->second].boxes.push_back(r.box);
  }
  return out;
}

inline std::vector<ProposalRecord> flatten(std::span<const ImageDetections> images) {
  std::vector<ProposalRecord> out;
  for (const auto& img : images) {
    for (const auto& b : img.boxes) out.push_back({img.image_id, b});
  }
  return out;
}

// --- annotations ----------------------------------------------------------------

inline void validate_annotations(const AnnotationFile& file) {
  std::unordered_set<std::string> classes;
  for (const auto& c : file.classes) {
    if (c.empty()) throw SchemaError("class names must be non-empty");
    if (!classes.insert(c).second) throw SchemaError("duplicate class '" + c + "'");
  }
  std::unordered_map<std::string, const ImageInfo*> images;
  for (const auto& img : file.images) {
    if (!(img.width > 0.0 && img.height > 0.0)) throw SchemaError("image '" + img.id + "' must have positive size");
    if (!images.emplace(img.id, &img).second) throw SchemaError("duplicate image id '" + img.id + "'");
  }
  for (std::size_t i = 0; i < file.boxes.size(); ++i) {
    const auto& b = file.boxes[i];
    const std::string where = "box " + std::to_string(i) + ": ";
    if (!classes.contains(b.class_name)) throw SchemaError(where + "class '" + b.class_name + "' is not declared");
    auto it = images.find(b.image_id);
    if (it == images.end()) throw SchemaError(where + "image '" + b.image_id + "' is not declared");
    if (b.box.x2() > it->second->width || b.box.y2() > it->second->height) {
      throw SchemaError(where + "box exceeds the bounds of image '" + b.image_id + "'");
    }
    if (b.score) detail::check_score(*b.score);
  }
}

inline nlohmann::json annotations_to_json(const AnnotationFile& file) {
  nlohmann::json images = nlohmann::json::array();
  for (const auto& img : file.images) images.push_back({{"id", img.id}, {"width", img.width}, {"height", img.height}});
  nlohmann::json boxes = nlohmann::json::array();
  for (const auto& b : file.boxes) {
    nlohmann::json j{{"image_id", b.image_id}, {"box", detail::box_json(b.box)}, {"class", b.class_name}};
    if (b.score) j["score"] = *b.score;
    if (b.source) j["source"] = *b.source;
    boxes.push_back(std::move(j));
  }
  nlohmann::json doc{{"schema", kAnnotationsSchema}, {"classes", file.classes}, {"images", images}, {"boxes", boxes}};
  if (!file.meta.empty()) doc["meta"] = file.meta;
  return doc;
}

inline void save_annotations(const std::filesystem::path& path, const AnnotationFile& file) {
  validate_annotations(file);
  auto out = detail::open_output(path);
  out << annotations_to_json(file).dump(1) << '\n';
  detail::finish_output(out, path);
}

inline AnnotationFile load_annotations(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  nlohmann::json doc;
  try {
    doc = nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": unparseable annotation document: " + e.what());
  }
  if (!doc.is_object() || doc.value("schema", std::string{}) != kAnnotationsSchema) {
    throw SchemaError(path.string() + ": expected schema '" + std::string(kAnnotationsSchema) + "'");
  }
  AnnotationFile file;
  nlohmann::json boxes;
  try {
    boxes = doc.at("boxes");
    if (!boxes.is_array()) throw SchemaError("'boxes' must be an array");
    file.classes = doc.at("classes").get<std::vector<std::string>>();
    file.meta = doc.value("meta", nlohmann::json::object());
    for (const auto& img : doc.at("images")) {
      file.images.push_back({img.at("id").get<std::string>(), img.at("width").get<double>(), img.at("height").get<double>()});
    }
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    const auto& b = boxes[i];
    try {
      file.boxes.push_back({b.at("image_id").get<std::string>(), detail::box_from_json(b.at("box")),
                            b.at("class").get<std::string>(), detail::optional_double(b, "score"),
                            detail::optional_string(b, "source")});
    } catch (const InputError& e) {
      throw InputError(path.string() + ": box " + std::to_string(i) + ": " + e.what());
    } catch (const nlohmann::json::exception& e) {
      throw SchemaError(path.string() + ": box " + std::to_string(i) + ": " + e.what());
    }
  }
  try {
    validate_annotations(file);
  } catch (const SchemaError& e) {
    throw SchemaError(path.string() + ": " + e.what());
  }
  return file;
}

inline std::vector<GroundTruthScene> to_scenes(const AnnotationFile& file) {
  std::vector<GroundTruthScene> scenes;
  std::unordered_map<std::string, std::size_t> slot;
  for (const auto& img : file.images) {
    slot[img.id] = scenes.size();
    scenes.push_back({img.id, img.width, img.height, {}});
  }
  for (const auto& b : file.boxes) scenes[slot.at(b.image_id)].boxes.push_back({b.box, b.class_name});
  return scenes;
}

// --- proposal utilities ----------------------------------------------------------

inline constexpr double kDefaultMinProposalScore = 0.5;

/// Keeps proposals with score >= min_score, order preserved. Feature records
/// without a score count as 1.0.
template <typename Record>
std::vector<Record> filter_proposals(std::span<const Record> proposals, double min_score = kDefaultMinProposalScore) {
  if (!(min_score >= 0.0 && min_score <= 1.0)) throw InputError("minimum proposal score must lie in [0, 1]");
  std::vector<Record> out;
  for (const auto& p : proposals) {
    double score;
    if constexpr (std::is_same_v<Record, ScoredBox>) {
      score = p.score;
    } else if constexpr (std::is_same_v<Record, ProposalRecord>) {
      score = p.box.score;
    } else {
      score = p.score.value_or(1.0);  // GT boxes carry no score
    }
    if (score >= min_score) out.push_back(p);
  }
  return out;
}

/// Perfect OOD proposals: every GT box whose class is OOD, score 1.0, no class.
inline std::vector<ProposalRecord> oracle_proposals(std::span<const GroundTruthScene> gt,
                                                    const std::set<std::string>& ood_classes) {
  std::vector<ProposalRecord> out;
  for (const auto& scene : gt) {
    for (const auto& b : scene.boxes) {
      if (ood_classes.contains(b.class_name)) out.push_back({scene.image_id, ScoredBox(b.box, 1.0)});
    }
  }
  return out;
}

/// OOD classes of a scene set relative to a catalog: names not in C_id.
inline std::set<std::string> ood_classes_of(std::span<const GroundTruthScene> gt, const ClassCatalog& catalog) {
  std::set<std::string> out;
  for (const auto& scene : gt) {
    for (const auto& b : scene.boxes) {
      if (!catalog.contains(b.class_name)) out.insert(b.class_name);
    }
  }
  return out;
}

// --- generic JSON documents (models, reports) ---------------------------------------

inline void save_json(const std::filesystem::path& path, const nlohmann::json& doc, int indent = 1) {
  auto out = detail::open_output(path);
  out << doc.dump(indent) << '\n';
  detail::finish_output(out, path);
}

inline nlohmann::json load_json(const std::filesystem::path& path) {
  auto in = detail::open_input(path);
  try {
    return nlohmann::json::parse(in);
  } catch (const nlohmann::json::parse_error& e) {
    throw SchemaError(path.string() + ": unparseable document: " + e.what());
  }
}

inline void save_model(const std::filesystem::path& path, const MlpAutoencoder& model) {
  save_json(path, model_to_json(model));
}

inline MlpAutoencoder load_model(const std::filesystem::path& path) { return model_from_json(load_json(path)); }

}  // namespace owssd
