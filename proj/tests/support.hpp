#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <random>
#include <string>
#include <vector>
#include <system_error>
#include <unistd.h>

#include "owssd/geometry.hpp"
#include "owssd/metrics.hpp"
#include "owssd/random.hpp"

namespace owssd::fixtures {

/// Scratch directory removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag = "owssd") {
    static std::uint64_t counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            (tag + "-" + std::to_string(::getpid()) + "-" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

inline std::string read_bytes(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_text(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  out << text;
}

/// Box with integer corners inside [0, extent]^2.
inline BoundingBox random_int_box(Rng& rng, int extent) {
  const auto a = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(extent)));
  const auto b = static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(extent)));
  const int w = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(extent - a)));
  const int h = 1 + static_cast<int>(uniform_index(rng, static_cast<std::uint64_t>(extent - b)));
  return BoundingBox(a, b, a + w, b + h);
}

inline BoundingBox random_box(Rng& rng, double extent) {
  const double x = uniform(rng, 0.0, extent * 0.8), y = uniform(rng, 0.0, extent * 0.8);
  const double w = uniform(rng, 1.0, extent - x), h = uniform(rng, 1.0, extent - y);
  return BoundingBox(x, y, std::min(extent, x + w), std::min(extent, y + h));
}

/// Isotropic Gaussian blobs named "c0", "c1", ... with centers drawn from
/// N(0, center_scale^2) per dimension.
inline std::map<std::string, std::vector<std::vector<double>>> gaussian_clusters(Rng& rng, int classes, int dim,
                                                                               int per_class, double center_scale,
                                                                               double sigma) {
  std::map<std::string, std::vector<std::vector<double>>> out;
  for (int c = 0; c < classes; ++c) {
    std::vector<double> center(static_cast<std::size_t>(dim));
    for (auto& v : center) v = normal(rng, 0.0, center_scale);
    auto& samples = out["c" + std::to_string(c)];
    for (int i = 0; i < per_class; ++i) {
      std::vector<double> x = center;
      for (auto& v : x) v += normal(rng, 0.0, sigma);
      samples.push_back(std::move(x));
    }
  }
  return out;
}

inline std::vector<std::string> class_names(int classes) {
  std::vector<std::string> out;
  for (int c = 0; c < classes; ++c) out.push_back("c" + std::to_string(c));
  return out;
}

/// Random teacher labels and OOD labels for one image. Some OOD boxes are
/// jittered copies of ID boxes so that conflicts actually occur.
struct RandomLabels {
  ImageDetections id;
  ImageDetections ood;
};

inline RandomLabels random_labels(Rng& rng, const ClassCatalog& catalog, const std::string& image_id) {
  RandomLabels out{{image_id, {}}, {image_id, {}}};
  const auto n_id = uniform_index(rng, 8), n_ood = uniform_index(rng, 6);
  for (std::uint64_t i = 0; i < n_id; ++i) {
    const auto& cls = catalog.id_classes()[uniform_index(rng, catalog.size())];
    out.id.boxes.push_back(ScoredBox(random_box(rng, 100.0), uniform01(rng), cls));
  }
  for (std::uint64_t i = 0; i < n_ood; ++i) {
    BoundingBox b = random_box(rng, 100.0);
    if (!out.id.boxes.empty() && uniform01(rng) < 0.5) {
      const auto& src = out.id.boxes[uniform_index(rng, out.id.boxes.size())].box;
      const double dx = uniform(rng, -3.0, 3.0), dy = uniform(rng, -3.0, 3.0);
      b = BoundingBox(std::max(0.0, src.x1() + dx), std::max(0.0, src.y1() + dy), src.x2() + dx + 4.0,
                      src.y2() + dy + 4.0);
    }
    std::optional<std::string> label;
    if (uniform01(rng) < 0.5) label = kUnknownClass;
    out.ood.boxes.push_back(ScoredBox(b, uniform01(rng), label));
  }
  return out;
}

// Up to 3 images, each with at most 4 GT boxes over 3 classes (c2 is OOD) and
// detections that are jittered copies or clutter.
struct MicroScenes {
  ClassCatalog catalog{std::vector<std::string>{"c0", "c1"}};
  std::vector<GroundTruthScene> gt;
  std::vector<ImageDetections> dets;
};

inline MicroScenes micro_scenes(Rng& rng) {
  MicroScenes m;
  const std::vector<std::string> names{"c0", "c1", "c2"};  // c2 is OOD
  const auto n_images = 1 + uniform_index(rng, 3);
  for (std::uint64_t i = 0; i < n_images; ++i) {
    GroundTruthScene s{"img" + std::to_string(i), 64, 64, {}};
    ImageDetections d{s.image_id, {}};
    const auto n_gt = uniform_index(rng, 5);
    for (std::uint64_t g = 0; g < n_gt; ++g) {
      const auto b = random_int_box(rng, 16);
      const auto& cls = names[uniform_index(rng, 3)];
      s.boxes.push_back({b, cls});
      if (uniform01(rng) < 0.7) {
        const double dx = std::floor(uniform(rng, -2, 3));
        const double x1 = std::max(0.0, b.x1() + dx);
        const std::string label = cls == "c2" ? "unknown" : cls;
        d.boxes.push_back(ScoredBox(BoundingBox(x1, b.y1(), std::max(x1 + 1, b.x2() + dx), b.y2()),
                                    std::floor(uniform01(rng) * 5) / 5, label));
      }
    }
    const auto n_clutter = uniform_index(rng, 4);
    for (std::uint64_t c = 0; c < n_clutter; ++c) {
      const std::vector<std::string> labels{"c0", "c1", "unknown"};
      d.boxes.push_back(ScoredBox(random_int_box(rng, 16), std::floor(uniform01(rng) * 5) / 5,
                                  labels[uniform_index(rng, 3)]));
    }
    m.gt.push_back(std::move(s));
    m.dets.push_back(std::move(d));
  }
  return m;
}

}  // namespace owssd::fixtures
