#pragma once

// Open-world evaluation: VOC-style AP50 / AR per class and for the All/ID/OOD
// groups, plus binary OOD metrics (F1, FPR, AUROC) with OOD as positive.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "owssd/error.hpp"
#include "owssd/geometry.hpp"

namespace owssd {

// --- binary OOD classification ----------------------------------------------

struct ConfusionCounts {
  std::size_t tp = 0;  // OOD predicted OOD
  std::size_t fp = 0;  // ID predicted OOD
  std::size_t tn = 0;  // ID predicted ID
  std::size_t fn = 0;  // OOD predicted ID

  std::size_t total() const { return tp + fp + tn + fn; }
};

struct BinaryOodEval {
  double f1 = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double fpr = 0.0;
  std::optional<double> auroc;
  ConfusionCounts counts;
  // Ratios with a zero denominator are reported as 0 and flagged here.
  bool precision_undefined = false;
  bool recall_undefined = false;
  bool fpr_undefined = false;
};

inline BinaryOodEval evaluate_counts(const ConfusionCounts& c) {
  BinaryOodEval e;
  e.counts = c;
  auto ratio = [](std::size_t num, std::size_t den, bool& undefined) {
    undefined = den == 0;
    return undefined ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
  };
  e.precision = ratio(c.tp, c.tp + c.fp, e.precision_undefined);
  e.recall = ratio(c.tp, c.tp + c.fn, e.recall_undefined);
  e.fpr = ratio(c.fp, c.fp + c.tn, e.fpr_undefined);
  const double s = e.precision + e.recall;
  e.f1 = s > 0.0 ? 2.0 * e.precision * e.recall / s : 0.0;
  return e;
}

struct OodDecision {
  bool predicted_ood;
  bool true_ood;
};

inline BinaryOodEval binary_ood_eval(std::span<const OodDecision> decisions) {
  if (decisions.empty()) throw InputError("binary OOD evaluation needs at least one decision");
  ConfusionCounts c;
  for (const auto& d : decisions) {
    if (d.true_ood) {
      d.predicted_ood ? ++c.tp : ++c.fn;
    } else {
      d.predicted_ood ? ++c.fp : ++c.tn;
    }
  }
  return evaluate_counts(c);
}

struct OodScore {
  double score;  // larger = more OOD
  bool true_ood;
};

/// Probability that a random OOD sample outscores a random ID sample, ties
/// counting one half. Computed from mid-ranks in O(n log n).
inline double auroc(std::span<const OodScore> scores) {
  std::vector<OodScore> sorted(scores.begin(), scores.end());
  std::size_t n_pos = 0;
  for (const auto& s : sorted) {
    if (std::isnan(s.score)) throw InputError("AUROC scores must not be NaN");
    n_pos += s.true_ood ? 1 : 0;
  }
  const std::size_t n_neg = sorted.size() - n_pos;
  if (n_pos == 0 || n_neg == 0) throw InputError("AUROC needs at least one OOD and one ID sample");
  std::sort(sorted.begin(), sorted.end(), [](const OodScore& a, const OodScore& b) { return a.score < b.score; });

  // Sum over OOD samples of (#ID strictly below + 0.5 * #ID tied).
  double wins = 0.0;
  std::size_t neg_below = 0;
  for (std::size_t i = 0; i < sorted.size();) {
    std::size_t j = i;
    std::size_t pos_tied = 0, neg_tied = 0;
    while (j < sorted.size() && sorted[j].score == sorted[i].score) {
      (sorted[j].true_ood ? pos_tied : neg_tied)++;
      ++j;
    }
    wins += static_cast<double>(pos_tied) * (static_cast<double>(neg_below) + 0.5 * static_cast<double>(neg_tied));
    neg_below += neg_tied;
    i = j;
  }
  return wins / (static_cast<double>(n_pos) * static_cast<double>(n_neg));
}

/// Confusion-derived metrics for each threshold t, predicting OOD iff score >= t.
inline std::vector<BinaryOodEval> threshold_sweep(std::span<const OodScore> scores, std::span<const double> thresholds) {
  std::vector<double> pos, neg;
  for (const auto& s : scores) (s.true_ood ? pos : neg).push_back(s.score);
  std::sort(pos.begin(), pos.end());
  std::sort(neg.begin(), neg.end());
  auto at_or_above = [](const std::vector<double>& v, double t) {
    return static_cast<std::size_t>(v.end() - std::lower_bound(v.begin(), v.end(), t));
  };
  std::vector<BinaryOodEval> out;
  out.reserve(thresholds.size());
  for (double t : thresholds) {
    ConfusionCounts c;
    c.tp = at_or_above(pos, t);
    c.fn = pos.size() - c.tp;
    c.fp = at_or_above(neg, t);
    c.tn = neg.size() - c.fp;
    out.push_back(evaluate_counts(c));
  }
  return out;
}

// --- detection metrics ------------------------------------------------------

struct ImageDetections {
  std::string image_id;
  std::vector<ScoredBox> boxes;  // ID class labels or "unknown"
};

struct DetectionEvalConfig {
  double iou_threshold = 0.5;
  int max_dets = 100;
};

struct PrPoint {
  double recall;
  double precision;
};

struct ClassEval {
  std::string name;
  bool is_ood = false;
  std::size_t n_gt = 0;
  std::size_t n_det = 0;
  std::optional<double> ap;  // absent when n_gt == 0
  std::optional<double> ar;
  std::vector<PrPoint> pr_curve;
};

struct EvalReport {
  std::vector<ClassEval> classes;  // catalog order, then "unknown"
  std::optional<double> ap_all, ap_id, ap_ood;
  std::optional<double> ar_all, ar_id, ar_ood;
  std::size_t n_gt = 0;
  std::size_t n_det = 0;
  DetectionEvalConfig config;
  std::vector<std::string> warnings;
};

namespace detail {

struct GtIndex {
  // image_id -> class -> boxes
  std::unordered_map<std::string, std::map<std::string, std::vector<BoundingBox>>> boxes;
};

/// Maps a GT class onto the evaluation label set: ID names stay, anything
/// else becomes "unknown".
inline std::string eval_label(const ClassCatalog& catalog, const std::string& name) {
  return catalog.contains(name) ? name : std::string(kUnknownClass);
}

inline GtIndex index_ground_truth(std::span<const GroundTruthScene> gt, const ClassCatalog& catalog) {
  GtIndex idx;
  for (const auto& scene : gt) {
    if (idx.boxes.contains(scene.image_id)) throw InputError("duplicate ground-truth image id '" + scene.image_id + "'");
    auto& per_class = idx.boxes[scene.image_id];
    for (const auto& b : scene.boxes) per_class[eval_label(catalog, b.class_name)].push_back(b.box);
  }
  return idx;
}

inline void check_detections(std::span<const ImageDetections> dets, const ClassCatalog& catalog, const GtIndex& gt) {
  std::unordered_map<std::string, bool> seen;
  for (const auto& img : dets) {
    if (!gt.boxes.contains(img.image_id)) throw InputError("detections for unknown image '" + img.image_id + "'");
    if (seen[img.image_id]) throw InputError("detections for image '" + img.image_id + "' given twice");
    seen[img.image_id] = true;
    for (const auto& d : img.boxes) {
      if (!d.class_label) throw InputError("detection in image '" + img.image_id + "' has no class label");
      if (*d.class_label != kUnknownClass && !catalog.contains(*d.class_label)) {
        throw InputError("detection label '" + *d.class_label + "' is not in the class catalog");
      }
    }
  }
}

/// Greedy matching of score-ordered detections against one image's GT of one
/// class: each detection takes the highest-IoU unmatched GT with IoU >= thr.
inline std::vector<bool> match_greedy(std::span<const BoundingBox> dets_in_order, std::span<const BoundingBox> gts,
                                      double thr) {
  std::vector<bool> used(gts.size(), false);
  std::vector<bool> tp(dets_in_order.size(), false);
  for (std::size_t d = 0; d < dets_in_order.size(); ++d) {
    double best = -1.0;
    std::size_t best_g = gts.size();
    for (std::size_t g = 0; g < gts.size(); ++g) {
      if (used[g]) continue;
      const double o = iou(dets_in_order[d], gts[g]);
      if (o >= thr && o > best) {
        best = o;
        best_g = g;
      }
    }
    if (best_g < gts.size()) {
      used[best_g] = true;
      tp[d] = true;
    }
  }
  return tp;
}

inline std::optional<double> mean_of(const std::vector<double>& v) {
  if (v.empty()) return std::nullopt;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

struct RankedDet {
  double score;
  const std::string* image_id;
  std::size_t index;
  BoundingBox box;
};

inline bool ranked_before(const RankedDet& a, const RankedDet& b) {
  if (a.score != b.score) return a.score > b.score;
  if (*a.image_id != *b.image_id) return *a.image_id < *b.image_id;
  return a.index < b.index;
}

inline void fill_groups(EvalReport& r) {
  std::vector<double> ap_all, ap_id, ap_ood, ar_all, ar_id, ar_ood;
  for (const auto& c : r.classes) {
    if (c.n_gt == 0) {
      r.warnings.push_back("class '" + c.name + "' has no ground truth; excluded from group means");
      continue;
    }
    if (c.ap) {
      ap_all.push_back(*c.ap);
      (c.is_ood ? ap_ood : ap_id).push_back(*c.ap);
    }
    if (c.ar) {
      ar_all.push_back(*c.ar);
      (c.is_ood ? ar_ood : ar_id).push_back(*c.ar);
    }
  }
  r.ap_all = mean_of(ap_all);
  r.ap_id = mean_of(ap_id);
  r.ap_ood = mean_of(ap_ood);
  r.ar_all = mean_of(ar_all);
  r.ar_id = mean_of(ar_id);
  r.ar_ood = mean_of(ar_ood);
}

inline EvalReport empty_report(const ClassCatalog& catalog, const GtIndex& gt, std::span<const ImageDetections> dets,
                               const DetectionEvalConfig& cfg) {
  EvalReport r;
  r.config = cfg;
  for (const auto& name : catalog.with_unknown()) {
    ClassEval c;
    c.name = name;
    c.is_ood = name == kUnknownClass;
    r.classes.push_back(std::move(c));
  }
  for (const auto& [img, per_class] : gt.boxes) {
    for (auto& c : r.classes) {
      auto it = per_class.find(c.name);
      if (it != per_class.end()) c.n_gt += it->second.size();
    }
  }
  for (const auto& img : dets) {
    for (const auto& d : img.boxes) {
      for (auto& c : r.classes) c.n_det += (c.name == *d.class_label) ? 1 : 0;
    }
  }
  for (const auto& c : r.classes) {
    r.n_gt += c.n_gt;
    r.n_det += c.n_det;
  }
  return r;
}

}  // namespace detail

/// All-point interpolated area under the PR curve of a ranked TP/FP sequence.
inline double average_precision(const std::vector<bool>& tp_in_rank_order, std::size_t n_gt,
                                std::vector<PrPoint>* curve = nullptr) {
  if (n_gt == 0) return 0.0;
  std::vector<double> rec, prec;
  std::size_t tp = 0;
  for (std::size_t k = 0; k < tp_in_rank_order.size(); ++k) {
    tp += tp_in_rank_order[k] ? 1 : 0;
    rec.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
    prec.push_back(static_cast<double>(tp) / static_cast<double>(k + 1));
  }
  if (curve) {
    curve->clear();
    for (std::size_t k = 0; k < rec.size(); ++k) curve->push_back({rec[k], prec[k]});
  }
  // Precision envelope, then sum rectangle areas at each recall step.
  for (std::size_t k = prec.size(); k-- > 1;) prec[k - 1] = std::max(prec[k - 1], prec[k]);
  double ap = 0.0, prev_rec = 0.0;
  for (std::size_t k = 0; k < rec.size(); ++k) {
    ap += (rec[k] - prev_rec) * prec[k];
    prev_rec = rec[k];
  }
  return ap;
}

/// VOC AP at IoU 0.5 (configurable) per class and for All/ID/OOD groups.
inline EvalReport voc_ap50(std::span<const ImageDetections> detections, std::span<const GroundTruthScene> gt,
                           const ClassCatalog& catalog, const DetectionEvalConfig& cfg = {}) {
  const auto index = detail::index_ground_truth(gt, catalog);
  detail::check_detections(detections, catalog, index);
  EvalReport report = detail::empty_report(catalog, index, detections, cfg);

  for (auto& cls : report.classes) {
    if (cls.n_gt == 0) continue;
    std::vector<detail::RankedDet> ranked;
    for (const auto& img : detections) {
      for (std::size_t i = 0; i < img.boxes.size(); ++i) {
        if (*img.boxes[i].class_label == cls.name) ranked.push_back({img.boxes[i].score, &img.image_id, i, img.boxes[i].box});
      }
    }
    std::sort(ranked.begin(), ranked.end(), detail::ranked_before);

    // Greedy matching per image follows global rank order restricted to that image.
    std::unordered_map<std::string, std::vector<std::size_t>> by_image;
    for (std::size_t k = 0; k < ranked.size(); ++k) by_image[*ranked[k].image_id].push_back(k);
    std::vector<bool> tp(ranked.size(), false);
    for (const auto& [img, ks] : by_image) {
      const auto& per_class = index.boxes.at(img);
      auto it = per_class.find(cls.name);
      if (it == per_class.end()) continue;
      std::vector<BoundingBox> boxes;
      for (auto k : ks) boxes.push_back(ranked[k].box);
      const auto hits = detail::match_greedy(boxes, it->second, cfg.iou_threshold);
      for (std::size_t m = 0; m < ks.size(); ++m) tp[ks[m]] = hits[m];
    }
    cls.ap = average_precision(tp, cls.n_gt, &cls.pr_curve);
  }
  detail::fill_groups(report);
  return report;
}

/// Recall at IoU 0.5 using the top `max_dets` detections per image and class.
inline EvalReport average_recall(std::span<const ImageDetections> detections, std::span<const GroundTruthScene> gt,
                                 const ClassCatalog& catalog, const DetectionEvalConfig& cfg = {}) {
  if (cfg.max_dets < 1) throw InputError("max detections must be >= 1");
  const auto index = detail::index_ground_truth(gt, catalog);
  detail::check_detections(detections, catalog, index);
  EvalReport report = detail::empty_report(catalog, index, detections, cfg);

  std::map<std::string, std::size_t> matched;
  for (const auto& img : detections) {
    const auto& per_class = index.boxes.at(img.image_id);
    for (const auto& cls : report.classes) {
      auto it = per_class.find(cls.name);
      if (it == per_class.end()) continue;
      std::vector<std::size_t> order;
      for (std::size_t i = 0; i < img.boxes.size(); ++i) {
        if (*img.boxes[i].class_label == cls.name) order.push_back(i);
      }
      std::stable_sort(order.begin(), order.end(),
                       [&](std::size_t a, std::size_t b) { return img.boxes[a].score > img.boxes[b].score; });
      if (order.size() > static_cast<std::size_t>(cfg.max_dets)) order.resize(static_cast<std::size_t>(cfg.max_dets));
      std::vector<BoundingBox> boxes;
      for (auto i : order) boxes.push_back(img.boxes[i].box);
      const auto hits = detail::match_greedy(boxes, it->second, cfg.iou_threshold);
      matched[cls.name] += static_cast<std::size_t>(std::count(hits.begin(), hits.end(), true));
    }
  }
  for (auto& cls : report.classes) {
    if (cls.n_gt > 0) cls.ar = static_cast<double>(matched[cls.name]) / static_cast<double>(cls.n_gt);
  }
  detail::fill_groups(report);
  return report;
}

/// AP and AR in one report.
inline EvalReport evaluate_detections(std::span<const ImageDetections> detections,
                                      std::span<const GroundTruthScene> gt, const ClassCatalog& catalog,
                                      const DetectionEvalConfig& cfg = {}) {
  EvalReport report = voc_ap50(detections, gt, catalog, cfg);
  const EvalReport ar = average_recall(detections, gt, catalog, cfg);
  for (std::size_t i = 0; i < report.classes.size(); ++i) report.classes[i].ar = ar.classes[i].ar;
  report.ar_all = ar.ar_all;
  report.ar_id = ar.ar_id;
  report.ar_ood = ar.ar_ood;
  return report;
}

// --- serialization ----------------------------------------------------------

inline nlohmann::json optional_json(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

inline nlohmann::json binary_eval_to_json(const BinaryOodEval& e) {
  return {{"f1", e.f1},
          {"precision", e.precision},
          {"recall", e.recall},
          {"fpr", e.fpr},
          {"auroc", optional_json(e.auroc)},
          {"counts", {{"tp", e.counts.tp}, {"fp", e.counts.fp}, {"tn", e.counts.tn}, {"fn", e.counts.fn}}},
          {"undefined", {{"precision", e.precision_undefined}, {"recall", e.recall_undefined}, {"fpr", e.fpr_undefined}}}};
}

inline nlohmann::json eval_report_to_json(const EvalReport& r, bool include_pr_curves = false) {
  nlohmann::json classes = nlohmann::json::array();
  for (const auto& c : r.classes) {
    nlohmann::json cj{{"class", c.name}, {"ood", c.is_ood}, {"n_gt", c.n_gt}, {"n_det", c.n_det},
                      {"ap50", optional_json(c.ap)}, {"ar", optional_json(c.ar)}};
    if (include_pr_curves) {
      nlohmann::json pts = nlohmann::json::array();
      for (const auto& p : c.pr_curve) pts.push_back({p.recall, p.precision});
      cj["pr_curve"] = std::move(pts);
    }
    classes.push_back(std::move(cj));
  }
  return {{"ap50", {{"all", optional_json(r.ap_all)}, {"id", optional_json(r.ap_id)}, {"ood", optional_json(r.ap_ood)}}},
          {"ar", {{"all", optional_json(r.ar_all)}, {"id", optional_json(r.ar_id)}, {"ood", optional_json(r.ar_ood)}}},
          {"n_gt", r.n_gt},
          {"n_det", r.n_det},
          {"config", {{"iou_threshold", r.config.iou_threshold}, {"max_dets", r.config.max_dets}}},
          {"warnings", r.warnings},
          {"classes", std::move(classes)}};
}

}  // namespace owssd
