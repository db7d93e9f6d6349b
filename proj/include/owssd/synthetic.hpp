#pragma once

// Synthetic open-world dataset: Gaussian feature clusters per class, images
// with non-overlapping object layouts, a noisy teacher that mislabels some
// OOD objects as ID classes, and noisy class-agnostic proposals.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <limits>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "owssd/error.hpp"
#include "owssd/geometry.hpp"
#include "owssd/io.hpp"
#include "owssd/random.hpp"

namespace owssd {

struct SyntheticConfig {
  int n_id_classes = 15;
  int n_ood_classes = 5;
  int dim = 32;
  int samples_per_class = 100;  // objects per class in each split
  double center_scale = 0.2;    // per-dimension std of class centers
  double noise_sigma = 0.2;     // per-dimension within-cluster std
  double min_separation = 5.0;  // minimum center distance, in units of noise_sigma
  int boxes_per_image = 4;
  double image_width = 640.0;
  double image_height = 480.0;

  // Teacher (ID detector) noise.
  double teacher_jitter = 2.0;  // box corner std in pixels
  double teacher_miss_rate = 0.1;
  double teacher_tp_score_min = 0.6;
  double ood_confusion_rate = 0.5;  // OOD object detected as a random ID class
  double confused_score_min = 0.7;
  int teacher_fp_per_image = 1;
  double teacher_fp_score_max = 0.95;

  // Class-agnostic proposal noise.
  double proposal_recall = 0.95;
  double proposal_jitter = 3.0;
  double proposal_score_min = 0.5;
  int background_proposals = 2;
  double background_score_max = 0.7;

  std::uint64_t seed = 0;


  void validate() const {
    if (n_id_classes < 1 || n_ood_classes < 0) throw InputError("need >= 1 ID class and >= 0 OOD classes");
    if (dim < 1 || samples_per_class < 1) throw InputError("dim and samples per class must be >= 1");
    if (boxes_per_image < 1 || boxes_per_image > kGridCols * kGridRows) {
      throw InputError("boxes per image must lie in [1, " + std::to_string(kGridCols * kGridRows) + "]");
    }
    if (!(min_separation >= 0.0)) throw InputError("minimum separation must be >= 0");
    if (center_scale < 0.0 || noise_sigma < 0.0 || teacher_jitter < 0.0 || proposal_jitter < 0.0) {
      throw InputError("scales and sigmas must be >= 0");
    }
    if (!(image_width >= 64.0 && image_height >= 64.0)) throw InputError("images must be at least 64x64");
    auto prob = [](double p) { return p >= 0.0 && p <= 1.0; };
    if (!prob(teacher_miss_rate) || !prob(ood_confusion_rate) || !prob(proposal_recall) ||
        !prob(teacher_tp_score_min) || !prob(confused_score_min) || !prob(teacher_fp_score_max) ||
        !prob(proposal_score_min) || !prob(background_score_max)) {
      throw InputError("rates and score bounds must lie in [0, 1]");
    }
    if (teacher_fp_per_image < 0 || background_proposals < 0) throw InputError("per-image counts must be >= 0");
  }

  /// Teacher without jitter, misses, false positives or OOD confusion.
  SyntheticConfig with_perfect_teacher() const {
    SyntheticConfig c = *this;
    c.teacher_jitter = 0.0;
    c.teacher_miss_rate = 0.0;
    c.ood_confusion_rate = 0.0;
    c.teacher_fp_per_image = 0;
    return c;
  }

  static constexpr int kGridCols = 4;
  static constexpr int kGridRows = 3;
};

struct SyntheticDataset {
  std::vector<std::string> id_classes;
  std::vector<std::string> ood_classes;
  std::vector<Feature> centers;   // ID classes first, then OOD classes
  AnnotationFile labeled;         // ID-only GT of the labeled split
  AnnotationFile unlabeled;       // full GT (ID + OOD) of the unlabeled split, for evaluation
  FeatureFile labeled_features;   // GT box features of the labeled split
  FeatureFile test_features;      // GT box features of the unlabeled split, with true classes
  FeatureFile proposal_features;  // class-agnostic proposals with features
  ProposalFile proposals;         // same proposals without features
  DetectionFile teacher;          // teacher predictions on the unlabeled split
};

inline nlohmann::json synthetic_config_to_json(const SyntheticConfig& c) {
  return {{"n_id_classes", c.n_id_classes},
          {"n_ood_classes", c.n_ood_classes},
          {"dim", c.dim},
          {"samples_per_class", c.samples_per_class},
          {"center_scale", c.center_scale},
          {"noise_sigma", c.noise_sigma},
          {"min_separation", c.min_separation},
          {"boxes_per_image", c.boxes_per_image},
          {"image_width", c.image_width},
          {"image_height", c.image_height},
          {"teacher_jitter", c.teacher_jitter},
          {"teacher_miss_rate", c.teacher_miss_rate},
          {"teacher_tp_score_min", c.teacher_tp_score_min},
          {"ood_confusion_rate", c.ood_confusion_rate},
          {"confused_score_min", c.confused_score_min},
          {"teacher_fp_per_image", c.teacher_fp_per_image},
          {"teacher_fp_score_max", c.teacher_fp_score_max},
          {"proposal_recall", c.proposal_recall},
          {"proposal_jitter", c.proposal_jitter},
          {"proposal_score_min", c.proposal_score_min},
          {"background_proposals", c.background_proposals},
          {"background_score_max", c.background_score_max},
          {"seed", c.seed}};
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j, SyntheticConfig c = {}) {
#define OWSSD_FIELD(name) c.name = j.value(#name, c.name)
  OWSSD_FIELD(n_id_classes);
  OWSSD_FIELD(n_ood_classes);
  OWSSD_FIELD(dim);
  OWSSD_FIELD(samples_per_class);
  OWSSD_FIELD(center_scale);
  OWSSD_FIELD(noise_sigma);
  OWSSD_FIELD(min_separation);
  OWSSD_FIELD(boxes_per_image);
  OWSSD_FIELD(image_width);
  OWSSD_FIELD(image_height);
  OWSSD_FIELD(teacher_jitter);
  OWSSD_FIELD(teacher_miss_rate);
  OWSSD_FIELD(teacher_tp_score_min);
  OWSSD_FIELD(ood_confusion_rate);
  OWSSD_FIELD(confused_score_min);
  OWSSD_FIELD(teacher_fp_per_image);
  OWSSD_FIELD(teacher_fp_score_max);
  OWSSD_FIELD(proposal_recall);
  OWSSD_FIELD(proposal_jitter);
  OWSSD_FIELD(proposal_score_min);
  OWSSD_FIELD(background_proposals);
  OWSSD_FIELD(background_score_max);
  OWSSD_FIELD(seed);
#undef OWSSD_FIELD
  return c;
}

inline double center_distance(const Feature& a, const Feature& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}

/// Smallest pairwise center distance divided by noise_sigma.
inline double min_center_separation(const SyntheticDataset& ds, double noise_sigma) {
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < ds.centers.size(); ++i) {
    for (std::size_t j = i + 1; j < ds.centers.size(); ++j) best = std::min(best, center_distance(ds.centers[i], ds.centers[j]));
  }
  return best / noise_sigma;
}

namespace detail {

inline std::string numbered(const char* prefix, int i, int width) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s%0*d", prefix, width, i);
  return buf;
}

struct Layout {
  double width, height;
  int cols = SyntheticConfig::kGridCols;
  int rows = SyntheticConfig::kGridRows;

  /// Random box inside grid cell `cell`, covering 50-90% of each side.
  BoundingBox object_box(int cell, Rng& rng) const {
    const double cw = width / cols, ch = height / rows;
    const double x0 = (cell % cols) * cw, y0 = (cell / cols) * ch;
    const double w = cw * uniform(rng, 0.5, 0.9), h = ch * uniform(rng, 0.5, 0.9);
    const double x = x0 + uniform(rng, 0.0, cw - w), y = y0 + uniform(rng, 0.0, ch - h);
    return BoundingBox(x, y, x + w, y + h);
  }

  BoundingBox jitter(const BoundingBox& b, double sigma, Rng& rng) const {
    if (sigma == 0.0) return b;
    const double x1 = std::clamp(b.x1() + normal(rng, 0.0, sigma), 0.0, width - 2.0);
    const double y1 = std::clamp(b.y1() + normal(rng, 0.0, sigma), 0.0, height - 2.0);
    const double x2 = std::clamp(b.x2() + normal(rng, 0.0, sigma), x1 + 1.0, width);
    const double y2 = std::clamp(b.y2() + normal(rng, 0.0, sigma), y1 + 1.0, height);
    return BoundingBox(x1, y1, x2, y2);
  }

  BoundingBox random_box(Rng& rng) const {
    const double w = uniform(rng, 0.05, 0.3) * width, h = uniform(rng, 0.05, 0.3) * height;
    const double x = uniform(rng, 0.0, width - w), y = uniform(rng, 0.0, height - h);
    return BoundingBox(x, y, x + w, y + h);
  }
};

}  // namespace detail

/// Pure function of cfg. All randomness flows from cfg.seed through
/// independent derived streams.
inline SyntheticDataset generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  SyntheticDataset ds;
  for (int i = 0; i < cfg.n_id_classes; ++i) ds.id_classes.push_back(detail::numbered("id", i, 2));
  for (int i = 0; i < cfg.n_ood_classes; ++i) ds.ood_classes.push_back(detail::numbered("ood", i, 2));
  const int n_classes = cfg.n_id_classes + cfg.n_ood_classes;
  auto class_name = [&](int c) { return c < cfg.n_id_classes ? ds.id_classes[c] : ds.ood_classes[c - cfg.n_id_classes]; };

  // Centers are redrawn until they keep min_separation * noise_sigma from
  // every earlier center.
  Rng center_rng(derive_seed(cfg.seed, 1));
  const double min_dist = cfg.min_separation * cfg.noise_sigma;
  auto& centers = ds.centers;
  for (int c = 0; c < n_classes; ++c) {
    Feature center(static_cast<std::size_t>(cfg.dim));
    for (int attempt = 0;; ++attempt) {
      if (attempt == 10000) throw InputError("cannot place class centers at the requested minimum separation");
      for (auto& v : center) v = normal(center_rng, 0.0, cfg.center_scale);
      const bool far = std::all_of(centers.begin(), centers.end(), [&](const Feature& other) {
        return center_distance(center, other) >= min_dist;
      });
      if (far) break;
    }
    centers.push_back(center);
  }
  Rng feature_rng(derive_seed(cfg.seed, 2));
  auto sample_feature = [&](int cls) {
    Feature f(static_cast<std::size_t>(cfg.dim));
    for (std::size_t d = 0; d < f.size(); ++d) f[d] = centers[static_cast<std::size_t>(cls)][d] + normal(feature_rng, 0.0, cfg.noise_sigma);
    return f;
  };

  const detail::Layout layout{cfg.image_width, cfg.image_height};
  Rng layout_rng(derive_seed(cfg.seed, 3));
  Rng teacher_rng(derive_seed(cfg.seed, 4));
  Rng proposal_rng(derive_seed(cfg.seed, 5));

  nlohmann::json meta{{"generator", "owssd.synthetic"}, {"config", synthetic_config_to_json(cfg)}};
  ds.labeled.classes = ds.id_classes;
  ds.unlabeled.classes = ds.id_classes;
  ds.unlabeled.classes.insert(ds.unlabeled.classes.end(), ds.ood_classes.begin(), ds.ood_classes.end());
  ds.labeled.meta = ds.unlabeled.meta = meta;
  ds.labeled_features = {cfg.dim, {}, meta};
  ds.test_features = {cfg.dim, {}, meta};
  ds.proposal_features = {cfg.dim, {}, meta};
  ds.proposals.meta = ds.teacher.meta = meta;

  // Places class ids onto images, boxes_per_image objects each, in random cells.
  auto build_split = [&](int n_split_classes, const char* prefix, AnnotationFile& ann, FeatureFile& feats,
                         bool unlabeled) {
    std::vector<int> objects;
    for (int c = 0; c < n_split_classes; ++c) objects.insert(objects.end(), static_cast<std::size_t>(cfg.samples_per_class), c);
    shuffle(std::span<int>(objects), layout_rng);
    const int n_images = static_cast<int>((objects.size() + cfg.boxes_per_image - 1) / cfg.boxes_per_image);
    std::vector<int> cells(SyntheticConfig::kGridCols * SyntheticConfig::kGridRows);
    for (int img = 0; img < n_images; ++img) {
      const std::string id = detail::numbered(prefix, img, 5);
      ann.images.push_back({id, cfg.image_width, cfg.image_height});
      for (std::size_t i = 0; i < cells.size(); ++i) cells[i] = static_cast<int>(i);
      shuffle(std::span<int>(cells), layout_rng);
      const std::size_t begin = static_cast<std::size_t>(img) * cfg.boxes_per_image;
      const std::size_t end = std::min(objects.size(), begin + static_cast<std::size_t>(cfg.boxes_per_image));
      for (std::size_t o = begin; o < end; ++o) {
        const int cls = objects[o];
        const BoundingBox box = layout.object_box(cells[o - begin], layout_rng);
        ann.boxes.push_back({id, box, class_name(cls), std::nullopt, std::nullopt});
        feats.records.push_back({id, box, class_name(cls), std::nullopt, RecordSource::Gt, sample_feature(cls)});
        if (!unlabeled) continue;

        // Teacher sees ID objects (maybe missed) and may mislabel OOD objects.
        if (cls < cfg.n_id_classes) {
          if (uniform01(teacher_rng) >= cfg.teacher_miss_rate) {
            ds.teacher.records.push_back({id, ScoredBox(layout.jitter(box, cfg.teacher_jitter, teacher_rng),
                                                        uniform(teacher_rng, cfg.teacher_tp_score_min, 1.0),
                                                        class_name(cls))});
          }
        } else if (uniform01(teacher_rng) < cfg.ood_confusion_rate) {
          const int wrong = static_cast<int>(uniform_index(teacher_rng, static_cast<std::uint64_t>(cfg.n_id_classes)));
          ds.teacher.records.push_back({id, ScoredBox(layout.jitter(box, cfg.teacher_jitter, teacher_rng),
                                                      uniform(teacher_rng, cfg.confused_score_min, 1.0),
                                                      class_name(wrong))});
        }
        if (uniform01(proposal_rng) < cfg.proposal_recall) {
          const BoundingBox pbox = layout.jitter(box, cfg.proposal_jitter, proposal_rng);
          const double score = uniform(proposal_rng, cfg.proposal_score_min, 1.0);
          ds.proposals.records.push_back({id, ScoredBox(pbox, score)});
          ds.proposal_features.records.push_back(
              {id, pbox, std::nullopt, score, RecordSource::Proposal, sample_feature(cls)});
        }
      }
      if (!unlabeled) continue;
      for (int k = 0; k < cfg.teacher_fp_per_image; ++k) {
        const int wrong = static_cast<int>(uniform_index(teacher_rng, static_cast<std::uint64_t>(cfg.n_id_classes)));
        ds.teacher.records.push_back({id, ScoredBox(layout.random_box(teacher_rng),
                                                    uniform(teacher_rng, 0.0, cfg.teacher_fp_score_max),
                                                    class_name(wrong))});
      }
      for (int k = 0; k < cfg.background_proposals; ++k) {
        const BoundingBox pbox = layout.random_box(proposal_rng);
        const double score = uniform(proposal_rng, 0.0, cfg.background_score_max);
        Feature f(static_cast<std::size_t>(cfg.dim));
        for (auto& v : f) v = normal(proposal_rng, 0.0, cfg.center_scale);
        ds.proposals.records.push_back({id, ScoredBox(pbox, score)});
        ds.proposal_features.records.push_back({id, pbox, std::nullopt, score, RecordSource::Proposal, std::move(f)});
      }
    }
  };

  build_split(cfg.n_id_classes, "L", ds.labeled, ds.labeled_features, false);
  build_split(n_classes, "U", ds.unlabeled, ds.test_features, true);
  return ds;
}

/// File names written by write_synthetic, relative to the output directory.
struct SyntheticFiles {
  static constexpr const char* labeled_annotations = "labeled.annotations.json";
  static constexpr const char* unlabeled_annotations = "unlabeled.annotations.json";
  static constexpr const char* labeled_features = "labeled.features.jsonl";
  static constexpr const char* test_features = "test.features.jsonl";
  static constexpr const char* proposal_features = "proposals.features.jsonl";
  static constexpr const char* proposals = "proposals.jsonl";
  static constexpr const char* oracle_proposals = "oracle.proposals.jsonl";
  static constexpr const char* teacher = "teacher.detections.jsonl";
};

inline void write_synthetic(const std::filesystem::path& dir, const SyntheticDataset& ds) {
  save_annotations(dir / SyntheticFiles::labeled_annotations, ds.labeled);
  save_annotations(dir / SyntheticFiles::unlabeled_annotations, ds.unlabeled);
  save_features(dir / SyntheticFiles::labeled_features, ds.labeled_features);
  save_features(dir / SyntheticFiles::test_features, ds.test_features);
  save_features(dir / SyntheticFiles::proposal_features, ds.proposal_features);
  save_proposals(dir / SyntheticFiles::proposals, ds.proposals);
  save_detections(dir / SyntheticFiles::teacher, ds.teacher);

  const auto scenes = to_scenes(ds.unlabeled);
  ProposalFile oracle{oracle_proposals(scenes, std::set<std::string>(ds.ood_classes.begin(), ds.ood_classes.end())),
                      ds.proposals.meta};
  oracle.meta["oracle"] = true;
  save_proposals(dir / SyntheticFiles::oracle_proposals, oracle);
}

}  // namespace owssd
