#pragma once

// Box geometry, class catalog and label records shared by the pipeline.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <vector>

#include "owssd/error.hpp"

namespace owssd {

inline constexpr const char* kUnknownClass = "unknown";

/// Axis-aligned box in corner format (x1, y1, x2, y2), pixel units.
/// Construction validates: finite, non-negative, x2 > x1, y2 > y1.
class BoundingBox {
 public:
  BoundingBox(double x1, double y1, double x2, double y2) : x1_(x1), y1_(y1), x2_(x2), y2_(y2) {
    if (!(std::isfinite(x1) && std::isfinite(y1) && std::isfinite(x2) && std::isfinite(y2))) {
      throw InputError("box coordinates must be finite");
    }
    if (x1 < 0.0 || y1 < 0.0) {
      throw InputError(describe("box coordinates must be non-negative"));
    }
    if (!(x2 > x1) || !(y2 > y1)) {
      throw InputError(describe("degenerate box (requires x2 > x1 and y2 > y1)"));
    }
  }

  /// COCO-style (x, y, width, height).
  static BoundingBox from_xywh(double x, double y, double w, double h) {
    return BoundingBox(x, y, x + w, y + h);
  }

  double x1() const noexcept { return x1_; }
  double y1() const noexcept { return y1_; }
  double x2() const noexcept { return x2_; }
  double y2() const noexcept { return y2_; }
  double width() const noexcept { return x2_ - x1_; }
  double height() const noexcept { return y2_ - y1_; }
  double area() const noexcept { return width() * height(); }

  bool operator==(const BoundingBox&) const = default;

 private:
  std::string describe(const char* msg) const {
    std::ostringstream os;
    os << msg << ": [" << x1_ << ", " << y1_ << ", " << x2_ << ", " << y2_ << "]";
    return os.str();
  }

  double x1_, y1_, x2_, y2_;
};

/// A box with a confidence in [0, 1] and an optional class label.
struct ScoredBox {
  ScoredBox(BoundingBox box, double score, std::optional<std::string> class_label = std::nullopt)
      : box(box), score(score), class_label(std::move(class_label)) {
    if (!(score >= 0.0 && score <= 1.0)) {
      std::ostringstream os;
      os << "score must lie in [0, 1], got " << score;
      throw InputError(os.str());
    }
  }

  BoundingBox box;
  double score;
  std::optional<std::string> class_label;

  bool operator==(const ScoredBox&) const = default;
};

/// Ordered in-distribution class list plus the reserved OOD label.
class ClassCatalog {
 public:
  explicit ClassCatalog(std::vector<std::string> id_classes) : id_classes_(std::move(id_classes)) {
    if (id_classes_.empty()) throw InputError("class catalog must list at least one ID class");
    std::unordered_set<std::string> seen;
    for (const auto& name : id_classes_) {
      if (name.empty()) throw InputError("class names must be non-empty");
      if (name == kUnknownClass) throw InputError("'unknown' is reserved and cannot be an ID class");
      if (!seen.insert(name).second) throw InputError("duplicate class name '" + name + "'");
    }
  }

  const std::vector<std::string>& id_classes() const noexcept { return id_classes_; }
  std::size_t size() const noexcept { return id_classes_.size(); }
  static const char* ood_label() noexcept { return kUnknownClass; }

  bool contains(const std::string& name) const {
    return std::find(id_classes_.begin(), id_classes_.end(), name) != id_classes_.end();
  }

  std::optional<std::size_t> index_of(const std::string& name) const {
    auto it = std::find(id_classes_.begin(), id_classes_.end(), name);
    if (it == id_classes_.end()) return std::nullopt;
    return static_cast<std::size_t>(it - id_classes_.begin());
  }

  /// C_id followed by "unknown".
  std::vector<std::string> with_unknown() const {
    auto all = id_classes_;
    all.emplace_back(kUnknownClass);
    return all;
  }

  bool operator==(const ClassCatalog&) const = default;

 private:
  std::vector<std::string> id_classes_;
};

struct LabeledBox {
  BoundingBox box;
  std::string class_name;

  bool operator==(const LabeledBox&) const = default;
};

/// Ground-truth annotation of one image. Class names may be ID or OOD.
struct GroundTruthScene {
  std::string image_id;
  double width = 0.0;
  double height = 0.0;
  std::vector<LabeledBox> boxes;

  bool operator==(const GroundTruthScene&) const = default;
};

// ---------------------------------------------------------------------------

/// Intersection over union of two valid boxes.
inline double iou(const BoundingBox& a, const BoundingBox& b) noexcept {
  const double iw = std::min(a.x2(), b.x2()) - std::max(a.x1(), b.x1());
  const double ih = std::min(a.y2(), b.y2()) - std::max(a.y1(), b.y1());
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.area() + b.area() - inter);
}

/// Greedy NMS. Returns indices into `boxes` in keep order (score descending,
/// ties by input index ascending). A box is kept iff its IoU with every
/// already-kept box is <= iou_threshold.
inline std::vector<std::size_t> nms_indices(std::span<const ScoredBox> boxes, double iou_threshold) {
  if (!(iou_threshold >= 0.0 && iou_threshold <= 1.0)) {
    throw InputError("NMS IoU threshold must lie in [0, 1]");
  }
  std::vector<std::size_t> order(boxes.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return boxes[a].score > boxes[b].score; });

  std::vector<std::size_t> kept;
  for (std::size_t idx : order) {
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](std::size_t k) {
      return iou(boxes[idx].box, boxes[k].box) > iou_threshold;
    });
    if (!suppressed) kept.push_back(idx);
  }
  return kept;
}

inline std::vector<ScoredBox> nms(std::span<const ScoredBox> boxes, double iou_threshold) {
  std::vector<ScoredBox> out;
  for (std::size_t idx : nms_indices(boxes, iou_threshold)) out.push_back(boxes[idx]);
  return out;
}

}  // namespace owssd
