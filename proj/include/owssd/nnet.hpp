#pragma once

// Fully-connected autoencoder: ReLU hidden layers, identity output, MSE
// reconstruction loss, mini-batch backpropagation with SGD or Adam.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "owssd/error.hpp"
#include "owssd/random.hpp"

namespace owssd {

using Feature = std::vector<double>;

inline constexpr const char* kModelSchema = "owssd.model.v1";

/// Layer widths, symmetric around the bottleneck, e.g. [1024, 256, 64, 256, 1024].
struct AeArchitecture {
  std::vector<int> layer_dims{1024, 256, 64, 256, 1024};

  /// input -> hidden -> bottleneck -> hidden -> input
  static AeArchitecture three_layer(int dim, int hidden, int bottleneck) {
    return AeArchitecture{{dim, hidden, bottleneck, hidden, dim}};
  }

  int input_dim() const { return layer_dims.front(); }
  std::size_t num_layers() const { return layer_dims.size() - 1; }
  std::size_t bottleneck_index() const { return layer_dims.size() / 2; }

  void validate() const {
    if (layer_dims.size() < 3 || layer_dims.size() % 2 == 0) {
      throw InputError("architecture must list an odd number (>= 3) of layer widths");
    }
    for (int d : layer_dims) {
      if (d < 1) throw InputError("architecture layer widths must be >= 1");
    }
    for (std::size_t i = 0, j = layer_dims.size() - 1; i < j; ++i, --j) {
      if (layer_dims[i] != layer_dims[j]) {
        throw InputError("architecture must be symmetric around the bottleneck");
      }
    }
  }

  bool operator==(const AeArchitecture&) const = default;
};

enum class Optimizer { GradientDescent, Adam };

struct TrainConfig {
  int epochs = 30;
  double learning_rate = 0.001;
  int batch_size = 64;
  Optimizer optimizer = Optimizer::Adam;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_epsilon = 1e-8;
  std::uint64_t seed = 0;
  bool shuffle = true;
  /// Per-dimension standardization fitted on the training data.
  bool standardize = false;

  void validate() const {
    if (epochs < 1) throw InputError("epochs must be >= 1");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw InputError("learning rate must be > 0");
    if (batch_size < 1) throw InputError("batch size must be >= 1");
    if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
      throw InputError("Adam decay rates must lie in [0, 1)");
    }
    if (!(adam_epsilon > 0.0)) throw InputError("Adam epsilon must be > 0");
  }
};

struct DenseLayer {
  Eigen::MatrixXd weight;  // out x in
  Eigen::VectorXd bias;    // out
};

struct Normalization {
  Eigen::VectorXd mean;
  Eigen::VectorXd stddev;
};

/// Autoencoder parameters. Layers before the bottleneck form the encoder,
/// the remaining ones the decoder.
struct MlpAutoencoder {
  AeArchitecture architecture;
  std::vector<DenseLayer> layers;
  std::optional<Normalization> normalization;

  int dim() const { return architecture.input_dim(); }
  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& l : layers) n += static_cast<std::size_t>(l.weight.size() + l.bias.size());
    return n;
  }
};

struct TrainResult {
  MlpAutoencoder model;
  std::vector<double> loss_history;  // mean reconstruction error after each epoch
};

namespace detail {

inline void check_dim(const MlpAutoencoder& model, std::span<const double> x) {
  if (x.size() != static_cast<std::size_t>(model.dim())) {
    std::ostringstream os;
    os << "feature dimension " << x.size() << " does not match model dimension " << model.dim();
    throw DimensionError(os.str());
  }
}

inline Eigen::VectorXd to_model_space(const MlpAutoencoder& model, std::span<const double> x) {
  Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(x.data(), static_cast<Eigen::Index>(x.size()));
  if (model.normalization) {
    v = ((v - model.normalization->mean).array() / model.normalization->stddev.array()).matrix();
  }
  return v;
}

inline Eigen::VectorXd forward_model_space(const MlpAutoencoder& model, Eigen::VectorXd a) {
  const std::size_t last = model.layers.size() - 1;
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    Eigen::VectorXd z = model.layers[l].weight * a + model.layers[l].bias;
    a = (l == last) ? std::move(z) : Eigen::VectorXd(z.cwiseMax(0.0));
  }
  return a;
}

inline double mean_squared(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
  double sum = 0.0;
  for (Eigen::Index i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    sum += d * d;
  }
  return sum / static_cast<double>(a.size());
}

}  // namespace detail

inline void validate_model(const MlpAutoencoder& model) {
  model.architecture.validate();
  const auto& dims = model.architecture.layer_dims;
  if (model.layers.size() != model.architecture.num_layers()) {
    throw InputError("layer count does not match architecture");
  }
  for (std::size_t l = 0; l < model.layers.size(); ++l) {
    const auto& layer = model.layers[l];
    if (layer.weight.rows() != dims[l + 1] || layer.weight.cols() != dims[l] || layer.bias.size() != dims[l + 1]) {
      throw InputError("layer " + std::to_string(l) + " shape does not match architecture");
    }
    if (!layer.weight.allFinite() || !layer.bias.allFinite()) {
      throw InputError("layer " + std::to_string(l) + " has non-finite parameters");
    }
  }
  if (model.normalization) {
    const auto& n = *model.normalization;
    if (n.mean.size() != dims.front() || n.stddev.size() != dims.front()) {
      throw InputError("normalization vectors do not match feature dimension");
    }
    if (!n.mean.allFinite() || !(n.stddev.array() > 0.0).all()) {
      throw InputError("normalization must have finite means and positive deviations");
    }
  }
}

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
inline MlpAutoencoder init_autoencoder(const AeArchitecture& arch, std::uint64_t seed) {
  arch.validate();
  Rng rng(seed);
  MlpAutoencoder model{arch, {}, std::nullopt};
  for (std::size_t l = 0; l < arch.num_layers(); ++l) {
    const int in = arch.layer_dims[l];
    const int out = arch.layer_dims[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(in));
    DenseLayer layer{Eigen::MatrixXd(out, in), Eigen::VectorXd::Zero(out)};
    // Row-major fill order so the parameter stream does not depend on storage order.
    for (int r = 0; r < out; ++r) {
      for (int c = 0; c < in; ++c) layer.weight(r, c) = uniform(rng, -bound, bound);
    }
    model.layers.push_back(std::move(layer));
  }
  return model;
}

/// Bottleneck code z = E(x).
inline Feature encode(const MlpAutoencoder& model, std::span<const double> x) {
  detail::check_dim(model, x);
  Eigen::VectorXd a = detail::to_model_space(model, x);
  for (std::size_t l = 0; l < model.architecture.bottleneck_index(); ++l) {
    a = (model.layers[l].weight * a + model.layers[l].bias).cwiseMax(0.0);
  }
  return Feature(a.data(), a.data() + a.size());
}

/// x_hat = D(E(x)), in the original feature space.
inline Feature reconstruct(const MlpAutoencoder& model, std::span<const double> x) {
  detail::check_dim(model, x);
  Eigen::VectorXd out = detail::forward_model_space(model, detail::to_model_space(model, x));
  if (model.normalization) {
    out = (out.array() * model.normalization->stddev.array()).matrix() + model.normalization->mean;
  }
  return Feature(out.data(), out.data() + out.size());
}

/// R = (1/D) * sum_i (x_i - x_hat_i)^2. With standardization enabled the
/// difference is taken in standardized coordinates.
inline double reconstruction_error(const MlpAutoencoder& model, std::span<const double> x) {
  detail::check_dim(model, x);
  const Eigen::VectorXd in = detail::to_model_space(model, x);
  return detail::mean_squared(detail::forward_model_space(model, in), in);
}

inline double mean_reconstruction_error(const MlpAutoencoder& model, std::span<const Feature> data) {
  if (data.empty()) return 0.0;
  double sum = 0.0;
  for (const auto& x : data) sum += reconstruction_error(model, x);
  return sum / static_cast<double>(data.size());
}

/// Smallest |pre-activation| over hidden units for input x. Finite-difference
/// checks are only meaningful when this exceeds the perturbation effect.
inline double min_preactivation_margin(const MlpAutoencoder& model, std::span<const double> x) {
  detail::check_dim(model, x);
  Eigen::VectorXd a = detail::to_model_space(model, x);
  double margin = std::numeric_limits<double>::infinity();
  for (std::size_t l = 0; l + 1 < model.layers.size(); ++l) {
    Eigen::VectorXd z = model.layers[l].weight * a + model.layers[l].bias;
    margin = std::min(margin, z.cwiseAbs().minCoeff());
    a = z.cwiseMax(0.0);
  }
  return margin;
}

/// Parameter gradients, laid out like MlpAutoencoder::layers.
struct Gradients {
  std::vector<DenseLayer> layers;
};

namespace detail {

/// Forward + backward on a batch (columns are samples). Returns the mean
/// per-sample reconstruction error and fills `grads`.
inline double backprop(const MlpAutoencoder& model, const Eigen::MatrixXd& input, Gradients& grads) {
  const std::size_t n_layers = model.layers.size();
  const auto batch = static_cast<double>(input.cols());
  const auto dim = static_cast<double>(input.rows());

  std::vector<Eigen::MatrixXd> activations;  // a_0 .. a_{L-1}
  std::vector<Eigen::MatrixXd> pre;          // z_1 .. z_L
  activations.reserve(n_layers);
  pre.reserve(n_layers);
  activations.push_back(input);
  for (std::size_t l = 0; l < n_layers; ++l) {
    Eigen::MatrixXd z = model.layers[l].weight * activations.back();
    z.colwise() += model.layers[l].bias;
    pre.push_back(z);
    if (l + 1 < n_layers) activations.push_back(z.cwiseMax(0.0));
  }

  const Eigen::MatrixXd diff = pre.back() - input;
  const double loss = diff.squaredNorm() / (dim * batch);

  grads.layers.resize(n_layers);
  Eigen::MatrixXd delta = diff * (2.0 / (dim * batch));
  for (std::size_t l = n_layers; l-- > 0;) {
    grads.layers[l].weight = delta * activations[l].transpose();
    grads.layers[l].bias = delta.rowwise().sum();
    if (l > 0) {
      Eigen::MatrixXd back = model.layers[l].weight.transpose() * delta;
      delta = back.cwiseProduct((pre[l - 1].array() > 0.0).cast<double>().matrix());
    }
  }
  return loss;
}

inline Normalization fit_normalization(std::span<const Feature> data, int dim) {
  Normalization n{Eigen::VectorXd::Zero(dim), Eigen::VectorXd::Zero(dim)};
  for (const auto& x : data) n.mean += Eigen::Map<const Eigen::VectorXd>(x.data(), dim);
  n.mean /= static_cast<double>(data.size());
  for (const auto& x : data) {
    n.stddev += (Eigen::Map<const Eigen::VectorXd>(x.data(), dim) - n.mean).cwiseAbs2();
  }
  n.stddev = (n.stddev / static_cast<double>(data.size())).cwiseSqrt();
  for (int i = 0; i < dim; ++i) {
    if (!(n.stddev[i] > 1e-12)) n.stddev[i] = 1.0;
  }
  return n;
}

}  // namespace detail

/// Analytic gradient of reconstruction_error(model, x) w.r.t. all parameters.
inline Gradients loss_gradients(const MlpAutoencoder& model, std::span<const double> x) {
  detail::check_dim(model, x);
  Gradients g;
  detail::backprop(model, detail::to_model_space(model, x), g);
  return g;
}

/// Mini-batch training on the mean reconstruction error.
inline TrainResult train(MlpAutoencoder model, std::span<const Feature> data, const TrainConfig& cfg) {
  cfg.validate();
  validate_model(model);
  if (data.empty()) throw InputError("training data is empty");
  const int dim = model.dim();
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].size() != static_cast<std::size_t>(dim)) {
      throw DimensionError("training sample " + std::to_string(i) + " has dimension " +
                           std::to_string(data[i].size()) + ", expected " + std::to_string(dim));
    }
  }
  if (cfg.standardize) model.normalization = detail::fit_normalization(data, dim);

  // Standardized copy of the data, one column per sample.
  Eigen::MatrixXd samples(dim, static_cast<Eigen::Index>(data.size()));
  for (std::size_t i = 0; i < data.size(); ++i) {
    samples.col(static_cast<Eigen::Index>(i)) = detail::to_model_space(model, data[i]);
  }

  std::vector<DenseLayer> m1, m2;
  for (const auto& l : model.layers) {
    m1.push_back({Eigen::MatrixXd::Zero(l.weight.rows(), l.weight.cols()), Eigen::VectorXd::Zero(l.bias.size())});
  }
  m2 = m1;

  Rng rng(cfg.seed);
  std::vector<Eigen::Index> order(data.size());
  std::iota(order.begin(), order.end(), Eigen::Index{0});
  const auto n = static_cast<Eigen::Index>(data.size());
  long step = 0;
  Gradients grads;
  TrainResult result{std::move(model), {}};
  MlpAutoencoder& net = result.model;

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    if (cfg.shuffle) shuffle(std::span<Eigen::Index>(order), rng);
    int batch_no = 0;
    for (Eigen::Index start = 0; start < n; start += cfg.batch_size, ++batch_no) {
      const Eigen::Index count = std::min<Eigen::Index>(cfg.batch_size, n - start);
      Eigen::MatrixXd batch(dim, count);
      for (Eigen::Index j = 0; j < count; ++j) batch.col(j) = samples.col(order[static_cast<std::size_t>(start + j)]);

      const double loss = detail::backprop(net, batch, grads);
      if (!std::isfinite(loss)) {
        throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                std::to_string(batch_no),
                            epoch, batch_no);
      }
      ++step;
      for (std::size_t l = 0; l < net.layers.size(); ++l) {
        auto& p = net.layers[l];
        const auto& g = grads.layers[l];
        if (cfg.optimizer == Optimizer::GradientDescent) {
          p.weight -= cfg.learning_rate * g.weight;
          p.bias -= cfg.learning_rate * g.bias;
          continue;
        }
        const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
        const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
        m1[l].weight = cfg.beta1 * m1[l].weight + (1.0 - cfg.beta1) * g.weight;
        m2[l].weight = cfg.beta2 * m2[l].weight + (1.0 - cfg.beta2) * g.weight.cwiseAbs2();
        m1[l].bias = cfg.beta1 * m1[l].bias + (1.0 - cfg.beta1) * g.bias;
        m2[l].bias = cfg.beta2 * m2[l].bias + (1.0 - cfg.beta2) * g.bias.cwiseAbs2();
        p.weight.array() -= cfg.learning_rate * (m1[l].weight.array() / c1) /
                            ((m2[l].weight.array() / c2).sqrt() + cfg.adam_epsilon);
        p.bias.array() -= cfg.learning_rate * (m1[l].bias.array() / c1) /
                          ((m2[l].bias.array() / c2).sqrt() + cfg.adam_epsilon);
      }
    }
    const double epoch_loss = mean_reconstruction_error(net, data);
    if (!std::isfinite(epoch_loss)) {
      throw TrainingError("non-finite loss after epoch " + std::to_string(epoch), epoch, -1);
    }
    result.loss_history.push_back(epoch_loss);
  }
  return result;
}

/// Max over all parameters of |g_a - g_n| / max(1e-8, |g_a| + |g_n|), with g_n
/// the central finite difference of reconstruction_error at step epsilon.
inline double gradient_check(const MlpAutoencoder& model, std::span<const double> x, double epsilon = 1e-5) {
  if (!(epsilon > 0.0)) throw InputError("gradient check epsilon must be > 0");
  const Gradients analytic = loss_gradients(model, x);
  MlpAutoencoder probe = model;
  double worst = 0.0;
  auto check = [&](double& param, double g_analytic) {
    const double saved = param;
    param = saved + epsilon;
    const double up = reconstruction_error(probe, x);
    param = saved - epsilon;
    const double down = reconstruction_error(probe, x);
    param = saved;
    const double g_numeric = (up - down) / (2.0 * epsilon);
    const double rel = std::abs(g_analytic - g_numeric) / std::max(1e-8, std::abs(g_analytic) + std::abs(g_numeric));
    worst = std::max(worst, rel);
  };
  for (std::size_t l = 0; l < probe.layers.size(); ++l) {
    auto& layer = probe.layers[l];
    for (Eigen::Index r = 0; r < layer.weight.rows(); ++r) {
      for (Eigen::Index c = 0; c < layer.weight.cols(); ++c) check(layer.weight(r, c), analytic.layers[l].weight(r, c));
    }
    for (Eigen::Index r = 0; r < layer.bias.size(); ++r) check(layer.bias[r], analytic.layers[l].bias[r]);
  }
  return worst;
}

// --- owssd.model.v1 ----------------------------------------------------------

namespace detail {

inline nlohmann::json vector_json(const Eigen::VectorXd& v) {
  return nlohmann::json(std::vector<double>(v.data(), v.data() + v.size()));
}

inline Eigen::VectorXd vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Eigen::VectorXd>(v.data(), static_cast<Eigen::Index>(v.size()));
}

}  // namespace detail

inline nlohmann::json model_to_json(const MlpAutoencoder& model) {
  nlohmann::json layers = nlohmann::json::array();
  for (const auto& l : model.layers) {
    nlohmann::json rows = nlohmann::json::array();
    for (Eigen::Index r = 0; r < l.weight.rows(); ++r) {
      rows.push_back(detail::vector_json(l.weight.row(r).transpose()));
    }
    layers.push_back({{"weight", std::move(rows)}, {"bias", detail::vector_json(l.bias)}});
  }
  nlohmann::json norm = nullptr;
  if (model.normalization) {
    norm = {{"mean", detail::vector_json(model.normalization->mean)},
            {"std", detail::vector_json(model.normalization->stddev)}};
  }
  return {{"schema", kModelSchema},
          {"dims", model.architecture.layer_dims},
          {"activation", "relu"},
          {"output_activation", "identity"},
          {"normalization", std::move(norm)},
          {"layers", std::move(layers)}};
}

inline MlpAutoencoder model_from_json(const nlohmann::json& j) {
  try {
    if (!j.is_object() || j.value("schema", "") != kModelSchema) {
      throw SchemaError(std::string("expected schema '") + kModelSchema + "'");
    }
    MlpAutoencoder model;
    model.architecture.layer_dims = j.at("dims").get<std::vector<int>>();
    model.architecture.validate();
    for (const auto& lj : j.at("layers")) {
      const auto& rows = lj.at("weight");
      DenseLayer layer{Eigen::MatrixXd(static_cast<Eigen::Index>(rows.size()),
                                       rows.empty() ? 0 : static_cast<Eigen::Index>(rows.at(0).size())),
                       detail::vector_from_json(lj.at("bias"))};
      for (std::size_t r = 0; r < rows.size(); ++r) {
        const auto row = rows[r].get<std::vector<double>>();
        if (static_cast<Eigen::Index>(row.size()) != layer.weight.cols()) throw SchemaError("ragged weight matrix");
        for (std::size_t c = 0; c < row.size(); ++c) {
          layer.weight(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = row[c];
        }
      }
      model.layers.push_back(std::move(layer));
    }
    const auto& norm = j.at("normalization");
    if (!norm.is_null()) {
      model.normalization = Normalization{detail::vector_from_json(norm.at("mean")), detail::vector_from_json(norm.at("std"))};
    }
    validate_model(model);
    return model;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError(std::string("malformed model document: ") + e.what());
  } catch (const InputError& e) {
    throw SchemaError(std::string("invalid model document: ") + e.what());
  }
}

inline std::string to_string(Optimizer o) { return o == Optimizer::Adam ? "adam" : "gd"; }

inline Optimizer optimizer_from_string(const std::string& s) {
  if (s == "adam") return Optimizer::Adam;
  if (s == "gd" || s == "sgd") return Optimizer::GradientDescent;
  throw ConfigError("unknown optimizer '" + s + "' (expected adam or gd)");
}

inline nlohmann::json train_config_to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},   {"learning_rate", c.learning_rate},
          {"batch_size", c.batch_size}, {"optimizer", to_string(c.optimizer)},
          {"beta1", c.beta1},     {"beta2", c.beta2},
          {"adam_epsilon", c.adam_epsilon}, {"seed", c.seed},
          {"shuffle", c.shuffle}, {"standardize", c.standardize}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j, TrainConfig c = {}) {
  c.epochs = j.value("epochs", c.epochs);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.batch_size = j.value("batch_size", c.batch_size);
  if (j.contains("optimizer")) c.optimizer = optimizer_from_string(j.at("optimizer").get<std::string>());
  c.beta1 = j.value("beta1", c.beta1);
  c.beta2 = j.value("beta2", c.beta2);
  c.adam_epsilon = j.value("adam_epsilon", c.adam_epsilon);
  c.seed = j.value("seed", c.seed);
  c.shuffle = j.value("shuffle", c.shuffle);
  c.standardize = j.value("standardize", c.standardize);
  return c;
}

}  // namespace owssd
