#pragma once

// Ensemble OOD explorer: one autoencoder per ID class, a shared
// reconstruction-error threshold mu, and claim-based voting. A sample is ID
// if any member reconstructs it with error strictly below mu.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "owssd/error.hpp"
#include "owssd/geometry.hpp"
#include "owssd/metrics.hpp"
#include "owssd/nnet.hpp"
#include "owssd/parallel.hpp"
#include "owssd/random.hpp"

namespace owssd {

inline constexpr const char* kEnsembleSchema = "owssd.ensemble.v1";
inline constexpr double kDefaultMu = 0.1;

using FeaturesByClass = std::map<std::string, std::vector<Feature>>;

struct EnsembleModel {
  ClassCatalog catalog;
  std::vector<MlpAutoencoder> members;              // aligned with catalog.id_classes()
  std::vector<std::vector<double>> loss_histories;  // per member, may be empty after load
  double mu = kDefaultMu;
  std::map<std::string, double> mu_overrides;
  TrainConfig train_config;
  nlohmann::json meta = nlohmann::json::object();   // free-form provenance, written verbatim

  int dim() const { return members.front().dim(); }

  double threshold_for(std::size_t member) const {
    auto it = mu_overrides.find(catalog.id_classes()[member]);
    return it == mu_overrides.end() ? mu : it->second;
  }

  const MlpAutoencoder& member(const std::string& name) const {
    auto idx = catalog.index_of(name);
    if (!idx) throw InputError("no ensemble member for class '" + name + "'");
    return members[*idx];
  }

  void validate() const {
    if (members.size() != catalog.size()) throw InputError("ensemble members must cover exactly the ID classes");
    if (!(mu > 0.0)) throw InputError("mu must be > 0");
    for (const auto& [name, value] : mu_overrides) {
      if (!catalog.contains(name)) throw InputError("mu override for unknown class '" + name + "'");
      if (!(value > 0.0)) throw InputError("mu override for '" + name + "' must be > 0");
    }
    for (const auto& m : members) {
      validate_model(m);
      if (m.dim() != members.front().dim()) throw InputError("ensemble members disagree on feature dimension");
    }
  }
};

struct OodVerdict {
  bool is_ood = true;
  std::vector<std::string> claims;       // classes with R < mu, catalog order
  std::map<std::string, double> errors;  // class -> R
};

struct CalibrationRow {
  double mu;
  BinaryOodEval eval;  // OOD is the positive class
};

struct CalibrationReport {
  std::vector<CalibrationRow> rows;  // ascending mu
  double chosen_mu = kDefaultMu;
  double chosen_f1 = 0.0;
};

/// Seed of the member at `class_index` (used for its init and shuffling).
inline std::uint64_t member_seed(std::uint64_t seed, std::size_t class_index) {
  return derive_seed(seed, class_index);
}

struct HoldoutSplit {
  FeaturesByClass train;
  FeaturesByClass heldout;
};

/// Seeded per-class split. floor(n * fraction) samples are held out, and at
/// least one sample per class always stays in the training part.
inline HoldoutSplit split_holdout(const ClassCatalog& catalog, const FeaturesByClass& features, double fraction,
                                  std::uint64_t seed) {
  if (!(fraction >= 0.0 && fraction < 1.0)) throw InputError("holdout fraction must lie in [0, 1)");
  HoldoutSplit split;
  for (std::size_t c = 0; c < catalog.size(); ++c) {
    const auto& name = catalog.id_classes()[c];
    auto it = features.find(name);
    if (it == features.end() || it->second.empty()) throw InputError("no features for ID class '" + name + "'");
    const auto& samples = it->second;
    std::vector<std::size_t> order(samples.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    Rng rng(derive_seed(seed ^ 0x5bd1e995ULL, c));
    shuffle(std::span<std::size_t>(order), rng);
    auto n_held = static_cast<std::size_t>(std::floor(static_cast<double>(samples.size()) * fraction));
    n_held = std::min(n_held, samples.size() - 1);
    // Keep original relative order inside each part.
    std::vector<std::size_t> held(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(n_held));
    std::sort(held.begin(), held.end());
    std::vector<bool> is_held(samples.size(), false);
    for (auto i : held) is_held[i] = true;
    auto& tr = split.train[name];
    auto& ho = split.heldout[name];
    for (std::size_t i = 0; i < samples.size(); ++i) (is_held[i] ? ho : tr).push_back(samples[i]);
  }
  return split;
}

/// Trains one autoencoder per ID class on that class's features only.
inline EnsembleModel train_ensemble(const ClassCatalog& catalog, const FeaturesByClass& features_by_class,
                                    const AeArchitecture& arch, const TrainConfig& cfg, unsigned threads = 1) {
  arch.validate();
  cfg.validate();
  for (const auto& [name, samples] : features_by_class) {
    if (!catalog.contains(name)) throw InputError("features given for class '" + name + "' which is not in the catalog");
  }
  std::vector<const std::vector<Feature>*> data;
  for (const auto& name : catalog.id_classes()) {
    auto it = features_by_class.find(name);
    if (it == features_by_class.end() || it->second.empty()) {
      throw InputError("ID class '" + name + "' has no training features");
    }
    data.push_back(&it->second);
  }

  const std::size_t n = catalog.size();
  std::vector<std::optional<TrainResult>> results(n);
  parallel_for(n, threads, [&](std::size_t c) {
    TrainConfig member_cfg = cfg;
    member_cfg.seed = member_seed(cfg.seed, c);
    try {
      results[c] = train(init_autoencoder(arch, member_cfg.seed), *data[c], member_cfg);
    } catch (const TrainingError& e) {
      throw TrainingError("class '" + catalog.id_classes()[c] + "': " + e.what(), e.epoch, e.batch);
    } catch (const DimensionError& e) {
      throw DimensionError("class '" + catalog.id_classes()[c] + "': " + e.what());
    }
  });

  EnsembleModel model{catalog, {}, {}, kDefaultMu, {}, cfg, nlohmann::json::object()};
  for (auto& r : results) {
    model.members.push_back(std::move(r->model));
    model.loss_histories.push_back(std::move(r->loss_history));
  }
  return model;
}

inline OodVerdict classify_feature(const EnsembleModel& model, std::span<const double> x) {
  if (x.size() != static_cast<std::size_t>(model.dim())) {
    throw DimensionError("feature dimension " + std::to_string(x.size()) + " does not match ensemble dimension " +
                         std::to_string(model.dim()));
  }
  OodVerdict v;
  for (std::size_t c = 0; c < model.members.size(); ++c) {
    const auto& name = model.catalog.id_classes()[c];
    const double r = reconstruction_error(model.members[c], x);
    v.errors[name] = r;
    if (r < model.threshold_for(c)) v.claims.push_back(name);
  }
  v.is_ood = v.claims.empty();
  return v;
}

/// Continuous OOD score: min over members of R_c * (mu / mu_c). With a shared
/// mu this is the smallest reconstruction error, and is_ood <=> score >= mu.
inline double ood_score(const EnsembleModel& model, std::span<const double> x) {
  const auto v = classify_feature(model, x);
  double best = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < model.members.size(); ++c) {
    best = std::min(best, v.errors.at(model.catalog.id_classes()[c]) * model.mu / model.threshold_for(c));
  }
  return best;
}

/// {0.05, 0.1, 0.2} plus `fill` log-spaced values in [1e-3, 10].
inline std::vector<double> default_mu_candidates(int fill = 25) {
  std::vector<double> c{0.05, 0.1, 0.2};
  for (int i = 0; i < fill; ++i) c.push_back(std::pow(10.0, -3.0 + 4.0 * i / std::max(1, fill - 1)));
  std::sort(c.begin(), c.end());
  c.erase(std::unique(c.begin(), c.end()), c.end());
  return c;
}

/// Picks the highest-F1 threshold (OOD positive, ties toward smaller mu).
inline void choose_best_row(CalibrationReport& report) {
  bool first = true;
  for (const auto& row : report.rows) {
    if (first || row.eval.f1 > report.chosen_f1) {
      report.chosen_mu = row.mu;
      report.chosen_f1 = row.eval.f1;
      first = false;
    }
  }
}

inline std::vector<double> validated_candidates(std::span<const double> candidates) {
  if (candidates.empty()) throw InputError("threshold candidate list is empty");
  std::vector<double> mus(candidates.begin(), candidates.end());
  for (double m : mus) {
    if (!(m > 0.0) || !std::isfinite(m)) throw InputError("threshold candidates must be finite and > 0");
  }
  std::sort(mus.begin(), mus.end());
  mus.erase(std::unique(mus.begin(), mus.end()), mus.end());
  return mus;
}

/// Pseudo-OOD calibration: for member c, held-out samples of c are ID and
/// held-out samples of every other class are pseudo-OOD. Confusion counts are
/// pooled over members for each candidate mu.
inline CalibrationReport calibrate_threshold(const EnsembleModel& model, const FeaturesByClass& heldout,
                                             std::span<const double> candidates) {
  if (model.catalog.size() < 2) {
    throw CalibrationError("pseudo-OOD calibration needs at least two ID classes; set mu manually");
  }
  const auto mus = validated_candidates(candidates);

  // Every (member, held-out sample) pair is one decision: the member's own
  // class counts as ID, every other class as pseudo-OOD.
  std::vector<OodScore> pairs;
  for (const auto& [name, feats] : heldout) {
    auto idx = model.catalog.index_of(name);
    if (!idx) throw InputError("held-out features for class '" + name + "' which is not in the ensemble");
    for (const auto& x : feats) {
      for (std::size_t c = 0; c < model.members.size(); ++c) {
        pairs.push_back({reconstruction_error(model.members[c], x), c != *idx});
      }
    }
  }
  if (pairs.empty()) throw CalibrationError("no held-out features available for calibration");

  CalibrationReport report;
  const auto evals = threshold_sweep(pairs, mus);
  for (std::size_t i = 0; i < mus.size(); ++i) report.rows.push_back({mus[i], evals[i]});
  choose_best_row(report);
  return report;
}

struct Proposal {
  ScoredBox box;
  Feature feature;
};

/// Proposals that no member claims, in input order, relabeled "unknown".
inline std::vector<ScoredBox> classify_proposals(const EnsembleModel& model, std::span<const Proposal> proposals) {
  std::vector<ScoredBox> ood;
  for (std::size_t i = 0; i < proposals.size(); ++i) {
    const auto& p = proposals[i];
    if (p.feature.size() != static_cast<std::size_t>(model.dim())) {
      throw DimensionError("proposal " + std::to_string(i) + ": feature dimension " + std::to_string(p.feature.size()) +
                           " does not match ensemble dimension " + std::to_string(model.dim()));
    }
    if (classify_feature(model, p.feature).is_ood) {
      ScoredBox out = p.box;
      out.class_label = kUnknownClass;
      ood.push_back(std::move(out));
    }
  }
  return ood;
}

struct MuSweepRow {
  double mu;
  BinaryOodEval eval;  // eval.auroc: AUROC of the binary decisions
};

struct MuSweep {
  std::vector<MuSweepRow> rows;
  std::optional<double> score_auroc;  // AUROC of ood_score, independent of mu
};

/// Ensemble decisions at each shared mu (per-class overrides stay in force).
/// Member errors are computed once per sample.
inline MuSweep sweep_mu(const EnsembleModel& model, std::span<const Feature> features, const std::vector<bool>& true_ood,
                        std::span<const double> mus) {
  if (features.size() != true_ood.size()) throw InputError("one OOD flag per feature is required");
  if (features.empty()) throw InputError("mu sweep needs at least one labeled feature");
  const auto grid = validated_candidates(mus);
  std::vector<std::vector<double>> errors;
  std::size_t n_ood = 0;
  for (std::size_t i = 0; i < features.size(); ++i) {
    const auto v = classify_feature(model, features[i]);
    auto& row = errors.emplace_back();
    for (const auto& name : model.catalog.id_classes()) row.push_back(v.errors.at(name));
    n_ood += true_ood[i] ? 1 : 0;
  }
  const bool both = n_ood > 0 && n_ood < features.size();

  MuSweep out;
  EnsembleModel probe = model;
  for (double mu : grid) {
    probe.mu = mu;
    std::vector<OodDecision> decisions;
    std::vector<OodScore> binary;
    for (std::size_t i = 0; i < features.size(); ++i) {
      bool claimed = false;
      for (std::size_t c = 0; c < errors[i].size() && !claimed; ++c) claimed = errors[i][c] < probe.threshold_for(c);
      decisions.push_back({!claimed, true_ood[i]});
      binary.push_back({claimed ? 0.0 : 1.0, true_ood[i]});
    }
    MuSweepRow row{mu, binary_ood_eval(decisions)};
    if (both) row.eval.auroc = auroc(binary);
    out.rows.push_back(row);
  }
  if (both) {
    std::vector<OodScore> scores;
    for (std::size_t i = 0; i < features.size(); ++i) {
      double best = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < errors[i].size(); ++c) best = std::min(best, errors[i][c] * model.mu / model.threshold_for(c));
      scores.push_back({best, true_ood[i]});
    }
    out.score_auroc = auroc(scores);
  }
  return out;
}

inline nlohmann::json calibration_report_to_json(const CalibrationReport& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) rows.push_back({{"mu", row.mu}, {"eval", binary_eval_to_json(row.eval)}});
  return {{"chosen_mu", r.chosen_mu}, {"chosen_f1", r.chosen_f1}, {"rows", std::move(rows)}};
}

inline nlohmann::json mu_sweep_to_json(const MuSweep& s) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : s.rows) {
    rows.push_back({{"mu", row.mu},
                    {"f1", row.eval.f1},
                    {"precision", row.eval.precision},
                    {"recall", row.eval.recall},
                    {"fpr", row.eval.fpr},
                    {"auroc", optional_json(row.eval.auroc)},
                    {"counts", binary_eval_to_json(row.eval)["counts"]}});
  }
  return {{"rows", std::move(rows)}, {"score_auroc", optional_json(s.score_auroc)}};
}

// --- owssd.ensemble.v1 -------------------------------------------------------

inline nlohmann::json ensemble_to_json(const EnsembleModel& model) {
  nlohmann::json members = nlohmann::json::array();
  for (std::size_t c = 0; c < model.members.size(); ++c) {
    nlohmann::json m{{"class", model.catalog.id_classes()[c]}, {"model", model_to_json(model.members[c])}};
    m["loss_history"] = c < model.loss_histories.size() ? nlohmann::json(model.loss_histories[c]) : nlohmann::json::array();
    members.push_back(std::move(m));
  }
  return {{"schema", kEnsembleSchema},
          {"classes", model.catalog.id_classes()},
          {"dim", model.dim()},
          {"mu", model.mu},
          {"mu_overrides", model.mu_overrides},
          {"normalization", model.train_config.standardize},
          {"architecture", model.members.front().architecture.layer_dims},
          {"train_config", train_config_to_json(model.train_config)},
          {"meta", model.meta},
          {"members", std::move(members)}};
}

inline EnsembleModel ensemble_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("schema", "") != kEnsembleSchema) {
      throw SchemaError(std::string("expected schema '") + kEnsembleSchema + "'");
    }
    EnsembleModel model{ClassCatalog(j.at("classes").get<std::vector<std::string>>()), {}, {}, j.at("mu").get<double>(),
                        j.value("mu_overrides", std::map<std::string, double>{}),
                        train_config_from_json(j.value("train_config", nlohmann::json::object())),
                        j.value("meta", nlohmann::json::object())};
    const int dim = j.at("dim").get<int>();
    const auto& members = j.at("members");
    if (members.size() != model.catalog.size()) throw SchemaError("member count does not match class list");
    for (std::size_t c = 0; c < members.size(); ++c) {
      if (members[c].at("class").get<std::string>() != model.catalog.id_classes()[c]) {
        throw SchemaError("member " + std::to_string(c) + " is out of catalog order");
      }
      model.members.push_back(model_from_json(members[c].at("model")));
      model.loss_histories.push_back(members[c].value("loss_history", std::vector<double>{}));
      if (model.members.back().dim() != dim) throw SchemaError("member dimension does not match manifest");
    }
    model.validate();
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed ensemble document: ") + e.what());
  } catch (const InputError& e) {
    throw SchemaError(std::string("invalid ensemble document: ") + e.what());
  }
}

}  // namespace owssd
