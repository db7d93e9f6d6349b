#pragma once

// Comparison OOD scorers behind one contract: score(x) >= 0, larger means
// more OOD, and x is flagged OOD iff score(x) >= threshold.

#include <algorithm>
#include <cmath>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "owssd/ensemble.hpp"
#include "owssd/error.hpp"
#include "owssd/metrics.hpp"
#include "owssd/nnet.hpp"
#include "owssd/parallel.hpp"

namespace owssd {

inline constexpr const char* kKnnSchema = "owssd.knn.v1";

class OodScorer {
 public:
  virtual ~OodScorer() = default;

  virtual double score(std::span<const double> x) const = 0;
  virtual std::string descriptor() const = 0;

  double threshold() const { return threshold_; }
  void set_threshold(double t) { threshold_ = t; }
  bool is_ood(std::span<const double> x) const { return score(x) >= threshold_; }

 private:
  double threshold_ = 0.0;
};

// --- KNN ---------------------------------------------------------------------

class KnnScorer final : public OodScorer {
 public:
  KnnScorer(std::vector<Feature> reference, int k) : reference_(std::move(reference)), k_(k) {}

  /// Mean Euclidean distance to the k nearest reference vectors.
  double score(std::span<const double> x) const override {
    if (x.size() != static_cast<std::size_t>(dim())) {
      throw DimensionError("KNN query dimension " + std::to_string(x.size()) + " does not match reference dimension " +
                           std::to_string(dim()));
    }
    std::vector<double> dist;
    dist.reserve(reference_.size());
    for (const auto& r : reference_) {
      double s = 0.0;
      for (std::size_t i = 0; i < x.size(); ++i) {
        const double d = x[i] - r[i];
        s += d * d;
      }
      dist.push_back(std::sqrt(s));
    }
    const auto k = static_cast<std::size_t>(k_);
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    double sum = 0.0;
    for (std::size_t i = 0; i < k; ++i) sum += dist[i];
    return sum / static_cast<double>(k);
  }

  std::string descriptor() const override { return "knn(k=" + std::to_string(k_) + ", euclidean, mean)"; }

  int k() const { return k_; }
  int dim() const { return static_cast<int>(reference_.front().size()); }
  const std::vector<Feature>& reference() const { return reference_; }

 private:
  std::vector<Feature> reference_;
  int k_;
};

inline KnnScorer fit_knn(std::vector<Feature> features, int k) {
  if (features.empty()) throw InputError("KNN reference set is empty");
  if (k < 1 || static_cast<std::size_t>(k) > features.size()) {
    throw InputError("KNN k must lie in [1, " + std::to_string(features.size()) + "], got " + std::to_string(k));
  }
  const auto dim = features.front().size();
  for (std::size_t i = 0; i < features.size(); ++i) {
    if (features[i].size() != dim) throw DimensionError("KNN reference vector " + std::to_string(i) + " has wrong dimension");
  }
  return KnnScorer(std::move(features), k);
}

inline double knn_score(const KnnScorer& s, std::span<const double> x) { return s.score(x); }

// --- common autoencoder ------------------------------------------------------

class CommonAeScorer final : public OodScorer {
 public:
  CommonAeScorer(MlpAutoencoder model, std::vector<double> loss_history = {})
      : model_(std::move(model)), loss_history_(std::move(loss_history)) {}

  double score(std::span<const double> x) const override { return reconstruction_error(model_, x); }
  std::string descriptor() const override { return "common-ae"; }

  const MlpAutoencoder& model() const { return model_; }
  const std::vector<double>& loss_history() const { return loss_history_; }

 private:
  MlpAutoencoder model_;
  std::vector<double> loss_history_;
};

/// One autoencoder on the pooled ID features (init and shuffle seeded by cfg.seed).
inline CommonAeScorer fit_common_ae(std::span<const Feature> all_id_features, const AeArchitecture& arch,
                                    const TrainConfig& cfg) {
  auto result = train(init_autoencoder(arch, cfg.seed), all_id_features, cfg);
  return CommonAeScorer(std::move(result.model), std::move(result.loss_history));
}

/// Ensemble through the scorer contract: score = smallest member error.
class EnsembleScorer final : public OodScorer {
 public:
  explicit EnsembleScorer(EnsembleModel model) : model_(std::move(model)) { set_threshold(model_.mu); }

  double score(std::span<const double> x) const override { return ood_score(model_, x); }
  std::string descriptor() const override { return "ensemble(" + std::to_string(model_.members.size()) + " members)"; }
  const EnsembleModel& model() const { return model_; }

 private:
  EnsembleModel model_;
};

// --- calibration -------------------------------------------------------------

inline std::vector<Feature> pool_features(const FeaturesByClass& features, const std::string* exclude = nullptr) {
  std::vector<Feature> out;
  for (const auto& [name, feats] : features) {
    if (exclude && name == *exclude) continue;
    out.insert(out.end(), feats.begin(), feats.end());
  }
  return out;
}

/// Score-valued thresholds: every distinct score, so that each possible
/// split of the sorted scores is evaluated.
inline std::vector<double> exhaustive_thresholds(std::span<const OodScore> scores) {
  std::vector<double> t;
  for (const auto& s : scores) t.push_back(s.score);
  std::sort(t.begin(), t.end());
  t.erase(std::unique(t.begin(), t.end()), t.end());
  return t;
}

using ScorerFactory = std::function<std::unique_ptr<OodScorer>(const std::vector<Feature>&)>;

/// Leave-one-class-out pseudo-OOD calibration for single scorers: for each
/// class c a scorer is fitted on the training features of all other classes;
/// held-out samples of c are pseudo-OOD and held-out samples of the other
/// classes are ID. Decisions are pooled over c. Empty `candidates` selects
/// exhaustive score-valued thresholds.
inline CalibrationReport calibrate_leave_one_class_out(const ClassCatalog& catalog, const FeaturesByClass& train,
                                                       const FeaturesByClass& heldout, const ScorerFactory& fit,
                                                       std::span<const double> candidates, unsigned threads = 1) {
  if (catalog.size() < 2) throw CalibrationError("leave-one-class-out calibration needs at least two ID classes");
  const auto& names = catalog.id_classes();
  std::vector<std::vector<OodScore>> per_class(names.size());
  parallel_for(names.size(), threads, [&](std::size_t c) {
    const auto scorer = fit(pool_features(train, &names[c]));
    for (const auto& [name, feats] : heldout) {
      for (const auto& x : feats) per_class[c].push_back({scorer->score(x), name == names[c]});
    }
  });
  std::vector<OodScore> pooled;
  for (auto& v : per_class) pooled.insert(pooled.end(), v.begin(), v.end());
  if (pooled.empty()) throw CalibrationError("no held-out features available for calibration");

  std::vector<double> thresholds;
  if (candidates.empty()) {
    thresholds = exhaustive_thresholds(pooled);
  } else {
    thresholds.assign(candidates.begin(), candidates.end());
    std::sort(thresholds.begin(), thresholds.end());
    thresholds.erase(std::unique(thresholds.begin(), thresholds.end()), thresholds.end());
  }
  CalibrationReport report;
  const auto evals = threshold_sweep(pooled, thresholds);
  for (std::size_t i = 0; i < thresholds.size(); ++i) report.rows.push_back({thresholds[i], evals[i]});
  choose_best_row(report);
  return report;
}

inline CalibrationReport calibrate_knn(const ClassCatalog& catalog, const FeaturesByClass& train,
                                       const FeaturesByClass& heldout, int k, std::span<const double> candidates = {},
                                       unsigned threads = 1) {
  return calibrate_leave_one_class_out(
      catalog, train, heldout,
      [k](const std::vector<Feature>& feats) { return std::make_unique<KnnScorer>(fit_knn(feats, k)); }, candidates,
      threads);
}

inline CalibrationReport calibrate_common_ae(const ClassCatalog& catalog, const FeaturesByClass& train,
                                             const FeaturesByClass& heldout, const AeArchitecture& arch,
                                             const TrainConfig& cfg, std::span<const double> candidates = {},
                                             unsigned threads = 1) {
  return calibrate_leave_one_class_out(
      catalog, train, heldout,
      [&](const std::vector<Feature>& feats) { return std::make_unique<CommonAeScorer>(fit_common_ae(feats, arch, cfg)); },
      candidates, threads);
}

// --- files -------------------------------------------------------------------

inline nlohmann::json knn_to_json(const KnnScorer& s) {
  return {{"schema", kKnnSchema}, {"k", s.k()}, {"dim", s.dim()}, {"threshold", s.threshold()},
          {"reference", s.reference()}};
}

inline KnnScorer knn_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("schema", "") != kKnnSchema) {
      throw SchemaError(std::string("expected schema '") + kKnnSchema + "'");
    }
    auto ref = j.at("reference").get<std::vector<Feature>>();
    const int dim = j.at("dim").get<int>();
    for (const auto& r : ref) {
      if (r.size() != static_cast<std::size_t>(dim)) throw DimensionError("KNN reference vector does not match 'dim'");
    }
    KnnScorer s = fit_knn(std::move(ref), j.at("k").get<int>());
    s.set_threshold(j.value("threshold", 0.0));
    return s;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed KNN document: ") + e.what());
  } catch (const InputError& e) {
    throw SchemaError(std::string("invalid KNN document: ") + e.what());
  }
}

/// owssd.model.v1 layout plus a "scorer" block holding the decision threshold.
inline nlohmann::json common_ae_to_json(const CommonAeScorer& s, const TrainConfig& cfg) {
  nlohmann::json j = model_to_json(s.model());
  j["scorer"] = {{"kind", "common-ae"},
                 {"threshold", s.threshold()},
                 {"train_config", train_config_to_json(cfg)},
                 {"loss_history", s.loss_history()}};
  return j;
}

inline CommonAeScorer common_ae_from_json(const nlohmann::json& j) {
  CommonAeScorer s(model_from_json(j), j.contains("scorer") ? j["scorer"].value("loss_history", std::vector<double>{})
                                                            : std::vector<double>{});
  if (j.contains("scorer")) s.set_threshold(j["scorer"].value("threshold", 0.0));
  return s;
}

}  // namespace owssd
