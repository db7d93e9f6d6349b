// owssd: command-line pipeline over the header library.
//
//   synth | train-ood | calibrate | classify | fuse | eval-det | eval-ood | sweep-mu
//
// Configuration comes from a JSON file (--config or OWSSD_CONFIG); command
// flags override file values. Machine-readable results go to --out, a short
// human-readable summary to stdout, and logs to stderr.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "owssd/owssd.hpp"

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace owssd;

namespace {

// --- configuration -------------------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 0;
  unsigned threads = default_thread_count();
  std::vector<std::string> classes;  // empty: taken from the inputs
  SyntheticConfig synthetic;
  std::vector<int> architecture;     // empty: scaled from the feature dimension
  TrainConfig train;
  FusionConfig fusion;
  DetectionEvalConfig eval;
  std::string method = "ensemble";
  std::optional<double> mu;          // threshold override
  double holdout_fraction = 0.2;
  int k = 5;
  std::vector<double> mu_candidates;  // empty: default grid
  int mu_fill = 97;
  std::vector<double> sweep_grid{0.05, 0.1, 0.2};
  double min_proposal_score = kDefaultMinProposalScore;
};

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.contains(key)) throw ConfigError("unknown config key '" + where + "." + key + "'");
  }
}

void apply_config_file(RunConfig& c, const json& j) {
  check_keys(j, {"seed", "threads", "classes", "synthetic", "architecture", "train", "fusion", "eval", "ood"}, "config");
  c.seed = j.value("seed", c.seed);
  c.threads = j.value("threads", c.threads);
  c.classes = j.value("classes", c.classes);
  if (j.contains("synthetic")) {
    const auto& s = j["synthetic"];
    check_keys(s, {"n_id_classes", "n_ood_classes", "dim", "samples_per_class", "center_scale", "noise_sigma",
                   "min_separation", "boxes_per_image", "image_width", "image_height", "teacher_jitter",
                   "teacher_miss_rate", "teacher_tp_score_min", "ood_confusion_rate", "confused_score_min",
                   "teacher_fp_per_image", "teacher_fp_score_max", "proposal_recall", "proposal_jitter",
                   "proposal_score_min", "background_proposals", "background_score_max"},
               "synthetic");
    c.synthetic = synthetic_config_from_json(s, c.synthetic);
  }
  c.architecture = j.value("architecture", c.architecture);
  if (j.contains("train")) {
    const auto& t = j["train"];
    check_keys(t, {"epochs", "learning_rate", "batch_size", "optimizer", "beta1", "beta2", "adam_epsilon", "shuffle",
                   "standardize"},
               "train");
    c.train = train_config_from_json(t, c.train);
  }
  if (j.contains("fusion")) {
    const auto& f = j["fusion"];
    check_keys(f, {"conf_threshold", "overlap_iou", "ood_nms_iou", "filtering_enabled"}, "fusion");
    c.fusion.conf_threshold = f.value("conf_threshold", c.fusion.conf_threshold);
    c.fusion.overlap_iou = f.value("overlap_iou", c.fusion.overlap_iou);
    c.fusion.ood_nms_iou = f.value("ood_nms_iou", c.fusion.ood_nms_iou);
    c.fusion.filtering_enabled = f.value("filtering_enabled", c.fusion.filtering_enabled);
  }
  if (j.contains("eval")) {
    const auto& e = j["eval"];
    check_keys(e, {"iou_threshold", "max_dets"}, "eval");
    c.eval.iou_threshold = e.value("iou_threshold", c.eval.iou_threshold);
    c.eval.max_dets = e.value("max_dets", c.eval.max_dets);
  }
  if (j.contains("ood")) {
    const auto& o = j["ood"];
    check_keys(o, {"method", "mu", "holdout_fraction", "k", "mu_candidates", "mu_fill", "sweep_grid",
                   "min_proposal_score"},
               "ood");
    c.method = o.value("method", c.method);
    if (o.contains("mu") && !o["mu"].is_null()) c.mu = o["mu"].get<double>();
    c.holdout_fraction = o.value("holdout_fraction", c.holdout_fraction);
    c.k = o.value("k", c.k);
    c.mu_candidates = o.value("mu_candidates", c.mu_candidates);
    c.mu_fill = o.value("mu_fill", c.mu_fill);
    c.sweep_grid = o.value("sweep_grid", c.sweep_grid);
    c.min_proposal_score = o.value("min_proposal_score", c.min_proposal_score);
  }
}

void validate(const RunConfig& c) {
  try {
    c.synthetic.validate();
    c.train.validate();
    c.fusion.validate();
    if (!c.architecture.empty()) AeArchitecture{c.architecture}.validate();
    if (!c.classes.empty()) ClassCatalog{c.classes};
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (c.threads < 1) throw ConfigError("threads must be >= 1");
  if (c.method != "ensemble" && c.method != "knn" && c.method != "common-ae") {
    throw ConfigError("unknown OOD method '" + c.method + "' (expected ensemble, knn or common-ae)");
  }
  if (c.mu && !(*c.mu > 0.0)) throw ConfigError("mu must be > 0");
  if (!(c.holdout_fraction > 0.0 && c.holdout_fraction < 1.0)) throw ConfigError("holdout fraction must lie in (0, 1)");
  if (c.k < 1) throw ConfigError("k must be >= 1");
  if (c.mu_fill < 0) throw ConfigError("mu_fill must be >= 0");
  for (double m : c.mu_candidates) {
    if (!(m > 0.0)) throw ConfigError("mu candidates must be > 0");
  }
  if (c.sweep_grid.empty()) throw ConfigError("sweep grid is empty");
  for (double m : c.sweep_grid) {
    if (!(m > 0.0)) throw ConfigError("sweep grid values must be > 0");
  }
  if (!(c.min_proposal_score >= 0.0 && c.min_proposal_score <= 1.0)) {
    throw ConfigError("minimum proposal score must lie in [0, 1]");
  }
  if (!(c.eval.iou_threshold > 0.0 && c.eval.iou_threshold <= 1.0)) throw ConfigError("eval IoU must lie in (0, 1]");
  if (c.eval.max_dets < 1) throw ConfigError("eval max_dets must be >= 1");
}

/// Effective configuration as recorded in outputs. The worker count is left
/// out: results do not depend on it.
json config_json(const RunConfig& c) {
  json syn = synthetic_config_to_json(c.synthetic);
  syn.erase("seed");
  json train = train_config_to_json(c.train);
  train.erase("seed");
  return {{"seed", c.seed},
          {"classes", c.classes},
          {"synthetic", syn},
          {"architecture", c.architecture},
          {"train", train},
          {"fusion",
           {{"conf_threshold", c.fusion.conf_threshold},
            {"overlap_iou", c.fusion.overlap_iou},
            {"ood_nms_iou", c.fusion.ood_nms_iou},
            {"filtering_enabled", c.fusion.filtering_enabled}}},
          {"eval", {{"iou_threshold", c.eval.iou_threshold}, {"max_dets", c.eval.max_dets}}},
          {"ood",
           {{"method", c.method},
            {"mu", c.mu ? json(*c.mu) : json(nullptr)},
            {"holdout_fraction", c.holdout_fraction},
            {"k", c.k},
            {"mu_candidates", c.mu_candidates},
            {"mu_fill", c.mu_fill},
            {"sweep_grid", c.sweep_grid},
            {"min_proposal_score", c.min_proposal_score}}}};
}

std::vector<double> mu_candidates(const RunConfig& c) {
  return c.mu_candidates.empty() ? default_mu_candidates(c.mu_fill) : c.mu_candidates;
}

AeArchitecture architecture_for(const RunConfig& c, int dim) {
  if (!c.architecture.empty()) {
    AeArchitecture a{c.architecture};
    if (a.input_dim() != dim) {
      throw ConfigError("architecture input width " + std::to_string(a.input_dim()) + " does not match feature dimension " +
                        std::to_string(dim));
    }
    return a;
  }
  return AeArchitecture::three_layer(dim, std::max(1, dim / 4), std::max(1, dim / 16));
}

// --- shared command plumbing -------------------------------------------------------

struct Paths {
  std::string features, model, proposals, teacher, ood, images, labeled, gt, detections, report, detections_out, out;
};

json command_meta(const std::string& command, const RunConfig& cfg, const std::map<std::string, std::string>& inputs) {
  json in = json::object();
  for (const auto& [k, v] : inputs) {
    if (!v.empty()) in[k] = v;
  }
  return {{"command", command}, {"config", config_json(cfg)}, {"inputs", in}};
}

void require(const std::string& value, const char* flag) {
  if (value.empty()) throw ConfigError(std::string("missing required option ") + flag);
}

void require_distinct(const std::string& out, const std::string& in) {
  if (!out.empty() && !in.empty() && fs::weakly_canonical(out) == fs::weakly_canonical(in)) {
    throw ConfigError("output path '" + out + "' would overwrite input '" + in + "'");
  }
}

ClassCatalog catalog_from(const RunConfig& cfg, const std::string& labeled_annotations) {
  if (!cfg.classes.empty()) return ClassCatalog(cfg.classes);
  if (!labeled_annotations.empty()) {
    std::vector<std::string> names;
    for (const auto& c : load_annotations(labeled_annotations).classes) {
      if (c != kUnknownClass) names.push_back(c);
    }
    return ClassCatalog(names);
  }
  throw ConfigError("no ID class list: set 'classes' in the config or pass --labeled");
}

FeaturesByClass labeled_features(const FeatureFile& file) {
  for (std::size_t i = 0; i < file.records.size(); ++i) {
    if (!file.records[i].class_name) {
      throw InputError("feature record " + std::to_string(i) + " has no class label");
    }
  }
  return features_by_class(file.records);
}

/// Model documents of any of the three methods, behind the scorer contract.
struct LoadedScorer {
  std::string method;
  json doc;
  std::optional<EnsembleModel> ensemble;
  std::unique_ptr<OodScorer> scorer;
  ClassCatalog catalog{std::vector<std::string>{"_"}};
};

LoadedScorer load_scorer(const std::string& path) {
  LoadedScorer s;
  s.doc = load_json(path);
  const std::string schema = s.doc.value("schema", "");
  if (schema == kEnsembleSchema) {
    s.method = "ensemble";
    s.ensemble = ensemble_from_json(s.doc);
    s.catalog = s.ensemble->catalog;
    s.scorer = std::make_unique<EnsembleScorer>(*s.ensemble);
  } else if (schema == kKnnSchema) {
    s.method = "knn";
    s.scorer = std::make_unique<KnnScorer>(knn_from_json(s.doc));
  } else if (schema == kModelSchema && s.doc.contains("scorer")) {
    s.method = "common-ae";
    s.scorer = std::make_unique<CommonAeScorer>(common_ae_from_json(s.doc));
  } else {
    throw SchemaError(path + ": not an OOD model (expected " + kEnsembleSchema + ", " + kKnnSchema + " or a common-ae " +
                      kModelSchema + ")");
  }
  if (s.method != "ensemble") {
    try {
      s.catalog = ClassCatalog(s.doc.at("meta").at("classes").get<std::vector<std::string>>());
    } catch (const json::exception& e) {
      throw SchemaError(path + ": baseline model without meta.classes: " + e.what());
    }
  }
  return s;
}

void apply_mu_override(LoadedScorer& s, const RunConfig& cfg) {
  if (!cfg.mu) return;
  if (s.ensemble) {
    s.ensemble->mu = *cfg.mu;
    s.scorer = std::make_unique<EnsembleScorer>(*s.ensemble);
  } else {
    s.scorer->set_threshold(*cfg.mu);
  }
}

bool is_calibrated(const LoadedScorer& s) {
  const json* meta = s.ensemble ? &s.ensemble->meta : (s.doc.contains("meta") ? &s.doc["meta"] : nullptr);
  return meta && meta->value("calibrated", false);
}

std::uint64_t split_seed(const json& meta, const RunConfig& cfg) { return meta.value("split_seed", cfg.seed); }
double split_fraction(const json& meta, const RunConfig& cfg) {
  return meta.value("holdout_fraction", cfg.holdout_fraction);
}

void print_eval(const char* label, const BinaryOodEval& e) {
  std::printf("%-10s F1 %.4f  precision %.4f  recall %.4f  FPR %.4f", label, e.f1, e.precision, e.recall, e.fpr);
  if (e.auroc) std::printf("  AUROC %.4f", *e.auroc);
  std::printf("\n");
}

// --- commands --------------------------------------------------------------------

void cmd_synth(const RunConfig& cfg, const Paths& p) {
  require(p.out, "--out");
  SyntheticConfig sc = cfg.synthetic;
  sc.seed = cfg.seed;
  auto ds = generate_synthetic(sc);
  const json meta = command_meta("synth", cfg, {});
  for (auto* m : {&ds.labeled.meta, &ds.unlabeled.meta, &ds.labeled_features.meta, &ds.test_features.meta,
                  &ds.proposal_features.meta, &ds.proposals.meta, &ds.teacher.meta}) {
    (*m)["run"] = meta;
  }
  write_synthetic(p.out, ds);
  std::printf("synthetic data in %s: %zu ID + %zu OOD classes, %zu labeled / %zu unlabeled images, "
              "min center separation %.2f sigma\n",
              p.out.c_str(), ds.id_classes.size(), ds.ood_classes.size(), ds.labeled.images.size(),
              ds.unlabeled.images.size(), min_center_separation(ds, sc.noise_sigma));
}

void cmd_train_ood(const RunConfig& cfg, const Paths& p) {
  require(p.features, "--features");
  require(p.out, "--out");
  require_distinct(p.out, p.features);
  const FeatureFile file = load_features(p.features);
  const FeaturesByClass by_class = labeled_features(file);
  std::vector<std::string> names = cfg.classes;
  if (names.empty()) {
    for (const auto& [name, _] : by_class) names.push_back(name);
  }
  const ClassCatalog catalog(names);
  const auto split = split_holdout(catalog, by_class, cfg.holdout_fraction, cfg.seed);
  const auto arch = architecture_for(cfg, file.dim);
  TrainConfig tc = cfg.train;
  tc.seed = cfg.seed;

  json meta = command_meta("train-ood", cfg, {{"features", p.features}});
  meta["holdout_fraction"] = cfg.holdout_fraction;
  meta["split_seed"] = cfg.seed;
  meta["calibrated"] = false;
  meta["classes"] = catalog.id_classes();

  if (cfg.method == "ensemble") {
    EnsembleModel model = train_ensemble(catalog, split.train, arch, tc, cfg.threads);
    if (cfg.mu) model.mu = *cfg.mu;
    model.meta = meta;
    save_json(p.out, ensemble_to_json(model));
    std::printf("ensemble: %zu members, architecture", model.members.size());
    for (int d : arch.layer_dims) std::printf(" %d", d);
    std::printf(", mu %.6g\n", model.mu);
    for (std::size_t c = 0; c < model.members.size(); ++c) {
      const auto& h = model.loss_histories[c];
      std::printf("  %-12s final training error %.6g\n", catalog.id_classes()[c].c_str(), h.empty() ? 0.0 : h.back());
    }
  } else if (cfg.method == "knn") {
    KnnScorer s = fit_knn(pool_features(split.train), cfg.k);
    if (cfg.mu) s.set_threshold(*cfg.mu);
    json j = knn_to_json(s);
    j["meta"] = meta;
    save_json(p.out, j);
    std::printf("knn: %zu reference vectors, k %d\n", s.reference().size(), s.k());
  } else {
    const auto pooled = pool_features(split.train);
    CommonAeScorer s = fit_common_ae(pooled, arch, tc);
    if (cfg.mu) s.set_threshold(*cfg.mu);
    json j = common_ae_to_json(s, tc);
    j["meta"] = meta;
    save_json(p.out, j);
    std::printf("common-ae: %zu training vectors, final training error %.6g\n", pooled.size(),
                s.loss_history().empty() ? 0.0 : s.loss_history().back());
  }
  spdlog::info("wrote {}", p.out);
}

void cmd_calibrate(const RunConfig& cfg, const Paths& p) {
  require(p.model, "--model");
  require(p.features, "--features");
  require(p.out, "--out");
  require_distinct(p.out, p.model);
  require_distinct(p.out, p.features);
  LoadedScorer s = load_scorer(p.model);
  const FeaturesByClass by_class = labeled_features(load_features(p.features));
  json model_meta = s.ensemble ? s.ensemble->meta : s.doc.value("meta", json::object());
  const auto split = split_holdout(s.catalog, by_class, split_fraction(model_meta, cfg), split_seed(model_meta, cfg));

  CalibrationReport report;
  json out_doc;
  if (s.ensemble) {
    const auto candidates = mu_candidates(cfg);
    report = calibrate_threshold(*s.ensemble, split.heldout, candidates);
    s.ensemble->mu = report.chosen_mu;
    s.ensemble->meta["calibrated"] = true;
    s.ensemble->meta["calibration"] = command_meta("calibrate", cfg, {{"model", p.model}, {"features", p.features}});
    out_doc = ensemble_to_json(*s.ensemble);
  } else {
    const std::vector<double> candidates = cfg.mu_candidates;  // empty: all observed scores
    if (s.method == "knn") {
      const auto& knn = dynamic_cast<const KnnScorer&>(*s.scorer);
      report = calibrate_knn(s.catalog, split.train, split.heldout, knn.k(), candidates, cfg.threads);
    } else {
      const auto& ae = dynamic_cast<const CommonAeScorer&>(*s.scorer);
      const TrainConfig tc = train_config_from_json(s.doc.at("scorer").value("train_config", json::object()));
      report = calibrate_common_ae(s.catalog, split.train, split.heldout, ae.model().architecture, tc, candidates,
                                   cfg.threads);
    }
    out_doc = s.doc;
    if (s.method == "knn") {
      out_doc["threshold"] = report.chosen_mu;
    } else {
      out_doc["scorer"]["threshold"] = report.chosen_mu;
    }
    out_doc["meta"]["calibrated"] = true;
    out_doc["meta"]["calibration"] = command_meta("calibrate", cfg, {{"model", p.model}, {"features", p.features}});
  }
  save_json(p.out, out_doc);

  const std::string report_path = p.report.empty() ? fs::path(p.out).replace_extension(".calibration.json").string() : p.report;
  require_distinct(report_path, p.model);
  json rj = command_meta("calibrate", cfg, {{"model", p.model}, {"features", p.features}});
  rj["method"] = s.method;
  rj["report"] = calibration_report_to_json(report);
  save_json(report_path, rj);
  std::printf("%s: calibrated threshold %.6g (pseudo-OOD F1 %.4f over %zu candidates)\n", s.method.c_str(),
              report.chosen_mu, report.chosen_f1, report.rows.size());
  spdlog::info("wrote {} and {}", p.out, report_path);
}

void cmd_classify(const RunConfig& cfg, const Paths& p) {
  require(p.model, "--model");
  require(p.features, "--features");
  require(p.out, "--out");
  require_distinct(p.out, p.features);
  LoadedScorer s = load_scorer(p.model);
  apply_mu_override(s, cfg);
  if (!is_calibrated(s) && !cfg.mu) spdlog::warn("model {} has not been calibrated", p.model);
  const FeatureFile file = load_features(p.features);
  const auto kept = filter_proposals<FeatureRecord>(file.records, cfg.min_proposal_score);

  ProposalFile out;
  out.meta = command_meta("classify", cfg, {{"model", p.model}, {"features", p.features}});
  out.meta["method"] = s.method;
  out.meta["threshold"] = s.ensemble ? s.ensemble->mu : s.scorer->threshold();

  // Per-image batches keep the output in input order.
  for (std::size_t i = 0; i < kept.size();) {
    std::size_t j = i;
    std::vector<Proposal> batch;
    while (j < kept.size() && kept[j].image_id == kept[i].image_id) {
      batch.push_back({ScoredBox(kept[j].box, kept[j].score.value_or(1.0)), kept[j].feature});
      ++j;
    }
    std::vector<ScoredBox> ood;
    if (s.ensemble) {
      ood = classify_proposals(*s.ensemble, batch);
    } else {
      for (const auto& prop : batch) {
        if (s.scorer->is_ood(prop.feature)) ood.push_back(ScoredBox(prop.box.box, prop.box.score, kUnknownClass));
      }
    }
    for (auto& b : ood) out.records.push_back({kept[i].image_id, std::move(b)});
    i = j;
  }
  save_proposals(p.out, out);
  std::printf("%s: %zu of %zu proposals (score >= %.3g) flagged OOD\n", s.method.c_str(), out.records.size(),
              kept.size(), cfg.min_proposal_score);
}

void cmd_fuse(const RunConfig& cfg, const Paths& p) {
  require(p.teacher, "--teacher");
  require(p.ood, "--ood");
  require(p.images, "--images");
  require(p.out, "--out");
  for (const auto* in : {&p.teacher, &p.ood, &p.images, &p.labeled}) require_distinct(p.out, *in);
  const ClassCatalog catalog = catalog_from(cfg, p.labeled);
  const AnnotationFile images = load_annotations(p.images);
  const DetectionFile teacher = load_detections(p.teacher);
  const ProposalFile ood = load_proposals(p.ood);

  std::vector<std::string> ids;
  for (const auto& img : images.images) ids.push_back(img.id);
  const auto fused = fuse_dataset(ids, group_by_image(teacher.records), group_by_image(ood.records), catalog, cfg.fusion);

  std::vector<GroundTruthScene> labeled;
  if (!p.labeled.empty()) labeled = to_scenes(load_annotations(p.labeled));
  const json meta = command_meta("fuse", cfg, {{"teacher", p.teacher}, {"ood", p.ood}, {"images", p.images},
                                               {"labeled", p.labeled}});
  emit_training_set(p.out, catalog, labeled, fused, images.images, meta);

  if (!p.detections_out.empty()) {
    for (const auto* in : {&p.teacher, &p.ood, &p.images, &p.labeled}) require_distinct(p.detections_out, *in);
    DetectionFile dets{flatten(as_detections(fused)), meta};
    save_detections(p.detections_out, dets);
  }
  std::size_t n_id = 0, n_ood = 0;
  for (const auto& f : fused) {
    n_id += f.id_labels.size();
    n_ood += f.ood_labels.size();
  }
  std::printf("fused %zu images: %zu ID pseudo-labels, %zu unknown pseudo-labels (filtering %s)\n", fused.size(), n_id,
              n_ood, cfg.fusion.filtering_enabled ? "on" : "off");
}

void cmd_eval_det(const RunConfig& cfg, const Paths& p) {
  require(p.detections, "--detections");
  require(p.gt, "--gt");
  require(p.out, "--out");
  require_distinct(p.out, p.detections);
  require_distinct(p.out, p.gt);
  const ClassCatalog catalog = catalog_from(cfg, p.labeled);
  const auto gt = to_scenes(load_annotations(p.gt));
  const auto dets = group_by_image(load_detections(p.detections).records);
  const EvalReport r = evaluate_detections(dets, gt, catalog, cfg.eval);
  for (const auto& w : r.warnings) spdlog::warn("{}", w);
  json j = command_meta("eval-det", cfg, {{"detections", p.detections}, {"gt", p.gt}, {"labeled", p.labeled}});
  j["report"] = eval_report_to_json(r);
  save_json(p.out, j);
  auto fmt = [](const std::optional<double>& v) { return v ? *v : std::nan(""); };
  std::printf("%-8s %8s %8s\n", "group", "AP50", "AR");
  std::printf("%-8s %8.4f %8.4f\n", "All", fmt(r.ap_all), fmt(r.ar_all));
  std::printf("%-8s %8.4f %8.4f\n", "ID", fmt(r.ap_id), fmt(r.ar_id));
  std::printf("%-8s %8.4f %8.4f\n", "OOD", fmt(r.ap_ood), fmt(r.ar_ood));
}

struct LabeledSamples {
  std::vector<Feature> features;
  std::vector<bool> true_ood;
};

LabeledSamples labeled_samples(const FeatureFile& file, const ClassCatalog& catalog) {
  LabeledSamples out;
  for (std::size_t i = 0; i < file.records.size(); ++i) {
    const auto& r = file.records[i];
    if (!r.class_name) throw InputError("feature record " + std::to_string(i) + " has no class label");
    out.features.push_back(r.feature);
    out.true_ood.push_back(!catalog.contains(*r.class_name));
  }
  return out;
}

void cmd_eval_ood(const RunConfig& cfg, const Paths& p) {
  require(p.model, "--model");
  require(p.features, "--features");
  require(p.out, "--out");
  require_distinct(p.out, p.features);
  LoadedScorer s = load_scorer(p.model);
  apply_mu_override(s, cfg);
  const auto samples = labeled_samples(load_features(p.features), s.catalog);
  std::vector<OodDecision> decisions;
  std::vector<OodScore> scores;
  for (std::size_t i = 0; i < samples.features.size(); ++i) {
    const bool ood = s.ensemble ? classify_feature(*s.ensemble, samples.features[i]).is_ood
                                : s.scorer->is_ood(samples.features[i]);
    decisions.push_back({ood, samples.true_ood[i]});
    scores.push_back({s.scorer->score(samples.features[i]), samples.true_ood[i]});
  }
  BinaryOodEval e = binary_ood_eval(decisions);
  const bool both = std::any_of(samples.true_ood.begin(), samples.true_ood.end(), [](bool b) { return b; }) &&
                    std::any_of(samples.true_ood.begin(), samples.true_ood.end(), [](bool b) { return !b; });
  if (both) {
    e.auroc = auroc(scores);
  } else {
    spdlog::warn("evaluation set has a single class; AUROC is undefined");
  }
  json j = command_meta("eval-ood", cfg, {{"model", p.model}, {"features", p.features}});
  j["method"] = s.method;
  j["threshold"] = s.ensemble ? s.ensemble->mu : s.scorer->threshold();
  j["eval"] = binary_eval_to_json(e);
  save_json(p.out, j);
  print_eval(s.method.c_str(), e);
}

void cmd_sweep_mu(const RunConfig& cfg, const Paths& p) {
  require(p.model, "--model");
  require(p.features, "--features");
  require(p.out, "--out");
  require_distinct(p.out, p.features);
  LoadedScorer s = load_scorer(p.model);
  if (!s.ensemble) throw InputError("sweep-mu needs an ensemble model (" + std::string(kEnsembleSchema) + ")");
  const auto samples = labeled_samples(load_features(p.features), s.catalog);
  const MuSweep sweep = sweep_mu(*s.ensemble, samples.features, samples.true_ood, cfg.sweep_grid);
  json j = command_meta("sweep-mu", cfg, {{"model", p.model}, {"features", p.features}});
  j["sweep"] = mu_sweep_to_json(sweep);
  save_json(p.out, j);
  std::printf("%-10s %8s %8s %8s %8s %8s\n", "mu", "F1", "prec", "recall", "FPR", "AUROC");
  for (const auto& row : sweep.rows) {
    std::printf("%-10.4g %8.4f %8.4f %8.4f %8.4f %8.4f\n", row.mu, row.eval.f1, row.eval.precision, row.eval.recall,
                row.eval.fpr, row.eval.auroc.value_or(std::nan("")));
  }
  if (sweep.score_auroc) std::printf("score AUROC %.4f\n", *sweep.score_auroc);
}

int exit_code(ErrorKind k) {
  switch (k) {
    case ErrorKind::Config: return 2;
    case ErrorKind::MissingFile:
    case ErrorKind::Io: return 3;
    case ErrorKind::Schema: return 4;
    case ErrorKind::Dimension: return 5;
    case ErrorKind::Input: return 6;
    case ErrorKind::Training: return 7;
    case ErrorKind::Calibration: return 8;
  }
  return 1;
}

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("owssd");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  const char* level = std::getenv("OWSSD_LOG_LEVEL");
  spdlog::set_level(level ? spdlog::level::from_str(level) : spdlog::level::info);
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"Ensemble-autoencoder OOD explorer and OOD-aware pseudo-label fusion"};
  app.require_subcommand(1);

  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> mu, conf, overlap, min_score;
  std::optional<int> k;
  std::optional<unsigned> threads;
  std::string method;
  std::string sweep_grid;
  Paths p;

  app.add_option("--config", config_path, "JSON config file (default: $OWSSD_CONFIG)");
  app.add_option("--seed", seed, "Seed for data generation, splits and training");
  app.add_option("--mu", mu, "Reconstruction-error threshold (or baseline decision threshold)");
  app.add_option("--conf-thresh", conf, "Teacher confidence cutoff for ID pseudo-labels");
  app.add_option("--overlap-iou", overlap, "IoU above which an ID pseudo-label conflicts with an unknown label");
  app.add_option("--min-proposal-score", min_score, "Drop proposals scoring below this before classification");
  app.add_option("--k", k, "Neighbours for the KNN baseline");
  app.add_option("--threads", threads, "Worker threads (default: available processors)");
  app.add_option("--out", p.out, "Output file (output directory for synth)");

  auto* synth = app.add_subcommand("synth", "Generate a synthetic open-world dataset");
  auto* train = app.add_subcommand("train-ood", "Train an OOD model on labeled ID features");
  train->add_option("--features", p.features, "Labeled feature file");
  train->add_option("--method", method, "ensemble | knn | common-ae");
  auto* calibrate = app.add_subcommand("calibrate", "Choose the threshold on held-out pseudo-OOD data");
  calibrate->add_option("--model", p.model, "OOD model");
  calibrate->add_option("--features", p.features, "Labeled feature file used for training");
  calibrate->add_option("--report", p.report, "Calibration report (default: <out>.calibration.json)");
  auto* classify = app.add_subcommand("classify", "Flag OOD proposals");
  classify->add_option("--model", p.model, "OOD model");
  classify->add_option("--features", p.features, "Proposal feature file");
  auto* fuse = app.add_subcommand("fuse", "Fuse teacher pseudo-labels with OOD labels");
  fuse->add_option("--teacher", p.teacher, "Teacher detection file");
  fuse->add_option("--ood", p.ood, "OOD proposal file from classify");
  fuse->add_option("--images", p.images, "Annotation file listing the unlabeled images");
  fuse->add_option("--labeled", p.labeled, "Labeled annotations (ID classes and GT boxes)");
  fuse->add_option("--detections-out", p.detections_out, "Also write the pseudo-labels as a detection file");
  auto* eval_det = app.add_subcommand("eval-det", "AP50 / AR of detections against ground truth");
  eval_det->add_option("--detections", p.detections, "Detection file");
  eval_det->add_option("--gt", p.gt, "Ground-truth annotations");
  eval_det->add_option("--labeled", p.labeled, "Annotations defining the ID classes");
  auto* eval_ood = app.add_subcommand("eval-ood", "Binary OOD metrics on labeled features");
  eval_ood->add_option("--model", p.model, "OOD model");
  eval_ood->add_option("--features", p.features, "Feature file with true classes");
  auto* sweep = app.add_subcommand("sweep-mu", "Ensemble metrics over a grid of thresholds");
  sweep->add_option("--model", p.model, "Ensemble model");
  sweep->add_option("--features", p.features, "Feature file with true classes");
  sweep->add_option("--grid", sweep_grid, "Comma-separated mu values (default 0.05,0.1,0.2)");
  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : 2;
  }

  try {
    RunConfig cfg;
    if (config_path.empty()) {
      if (const char* env = std::getenv("OWSSD_CONFIG")) config_path = env;
    }
    if (!config_path.empty()) {
      try {
        apply_config_file(cfg, load_json(config_path));
      } catch (const json::exception& e) {
        throw ConfigError(config_path + ": " + e.what());
      } catch (const SchemaError& e) {
        throw ConfigError(e.what());
      } catch (const MissingFileError& e) {
        throw ConfigError(std::string("config file: ") + e.what());
      }
    }
    if (seed) cfg.seed = *seed;
    if (mu) cfg.mu = *mu;
    if (conf) cfg.fusion.conf_threshold = *conf;
    if (overlap) cfg.fusion.overlap_iou = *overlap;
    if (min_score) cfg.min_proposal_score = *min_score;
    if (k) cfg.k = *k;
    if (threads) cfg.threads = *threads;
    if (!method.empty()) cfg.method = method;
    if (!sweep_grid.empty()) {
      cfg.sweep_grid.clear();
      std::stringstream ss(sweep_grid);
      for (std::string item; std::getline(ss, item, ',');) {
        try {
          cfg.sweep_grid.push_back(std::stod(item));
        } catch (const std::exception&) {
          throw ConfigError("bad --grid value '" + item + "'");
        }
      }
    }
    validate(cfg);
    spdlog::debug("effective config: {}", config_json(cfg).dump());

    if (synth->parsed()) cmd_synth(cfg, p);
    else if (train->parsed()) cmd_train_ood(cfg, p);
    else if (calibrate->parsed()) cmd_calibrate(cfg, p);
    else if (classify->parsed()) cmd_classify(cfg, p);
    else if (fuse->parsed()) cmd_fuse(cfg, p);
    else if (eval_det->parsed()) cmd_eval_det(cfg, p);
    else if (eval_ood->parsed()) cmd_eval_ood(cfg, p);
    else if (sweep->parsed()) cmd_sweep_mu(cfg, p);
    return 0;
  } catch (const Error& e) {
    spdlog::error("{} error: {}", to_string(e.kind()), e.what());
    return exit_code(e.kind());
  } catch (const std::exception& e) {
    spdlog::error("internal error: {}", e.what());
    return 1;
  }
}
