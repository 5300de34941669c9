// Float MLP training (sigmoid hidden layers, softmax cross-entropy output)
// and retraining through quantized weights with high-precision shadow weights.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <utility>
#include <vector>

#include "fxdnn/fxp.hpp"
#include "fxdnn/model.hpp"
#include "fxdnn/quant.hpp"

namespace fxdnn {

struct TrainConfig {
  int minibatch = 100;
  double learning_rate = 0.1;
  double momentum = 0.9;
  int epochs = 100;
  std::vector<double> dropout_keep{0.8};  // one entry per hidden layer, or one for all
  std::uint64_t rng_seed = 1;

  double keep_for(std::size_t hidden_layer) const {
    if (dropout_keep.empty()) return 1.0;
    return dropout_keep.size() == 1 ? dropout_keep.front() : dropout_keep.at(hidden_layer);
  }

  void validate(std::size_t n_hidden) const {
    if (minibatch < 1) throw std::invalid_argument("minibatch must be positive");
    if (learning_rate < 0.0) throw std::invalid_argument("learning rate must be nonnegative");
    if (momentum < 0.0 || momentum >= 1.0) throw std::invalid_argument("momentum must be in [0, 1)");
    if (epochs < 0) throw std::invalid_argument("epochs must be nonnegative");
    if (dropout_keep.size() > 1 && dropout_keep.size() != n_hidden)
      throw std::invalid_argument("dropout_keep needs one entry per hidden layer");
    for (double k : dropout_keep)
      if (!(k > 0.0 && k <= 1.0)) throw std::invalid_argument("dropout keep probability must be in (0, 1]");
  }
};

// One sample per column; values in [0, 1].
struct Dataset {
  Matrix inputs;
  std::vector<int> labels;
  int n_classes = 0;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t dim() const noexcept { return static_cast<std::size_t>(inputs.rows()); }

  void validate() const {
    if (static_cast<std::size_t>(inputs.cols()) != labels.size())
      throw std::invalid_argument("Dataset: inputs/labels count mismatch");
    if (n_classes < 1) throw std::invalid_argument("Dataset: n_classes must be positive");
    for (int y : labels)
      if (y < 0 || y >= n_classes) throw std::invalid_argument("Dataset: label out of range");
  }

  // Signal codes as the datapath sees them: round(v * 256), saturated to 255.
  std::vector<Sample8> sample_codes(std::size_t i) const {
    std::vector<Sample8> out(dim());
    for (std::size_t r = 0; r < out.size(); ++r) {
      const double v = round_half_even(inputs(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(i)) * 256.0);
      out[r] = Sample8{static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0))};
    }
    return out;
  }

  Dataset head(std::size_t n) const {
    n = std::min(n, size());
    Dataset d;
    d.inputs = inputs.leftCols(static_cast<Eigen::Index>(n));
    d.labels.assign(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n));
    d.n_classes = n_classes;
    return d;
  }
};

namespace detail {

inline Matrix sigmoid(const Matrix& z) { return (1.0 / (1.0 + (-z.array()).exp())).matrix(); }

inline void check_input_dim(const FloatModel& fm, Eigen::Index rows) {
  if (static_cast<std::size_t>(rows) != fm.layer_dims.front())
    throw std::invalid_argument("input dimension does not match model");
}

}  // namespace detail

inline std::size_t argmax_first(std::span<const double> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i] > scores[best]) best = i;
  return best;
}

// Per-layer outputs for one input: sigmoid activations for hidden layers,
// raw scores (pre-activation) for the output layer.
inline std::vector<Vector> forward_float(const FloatModel& fm, const Vector& x) {
  detail::check_input_dim(fm, x.size());
  std::vector<Vector> outs;
  Vector y = x;
  for (std::size_t l = 0; l < fm.num_layers(); ++l) {
    Vector z = fm.weights[l] * y + fm.biases[l];
    if (l + 1 < fm.num_layers()) z = detail::sigmoid(z);
    outs.push_back(z);
    y = outs.back();
  }
  return outs;
}

// Output scores for a batch (one column per sample).
inline Matrix forward_scores(const FloatModel& fm, const Matrix& x) {
  detail::check_input_dim(fm, x.rows());
  Matrix y = x;
  for (std::size_t l = 0; l < fm.num_layers(); ++l) {
    Matrix z = fm.weights[l] * y;
    z.colwise() += fm.biases[l];
    y = l + 1 < fm.num_layers() ? detail::sigmoid(z) : z;
  }
  return y;
}

struct Gradients {
  std::vector<Matrix> weights;
  std::vector<Vector> biases;
  double loss = 0.0;  // mean cross-entropy over the batch
};

// Backprop of mean softmax cross-entropy. `masks` holds inverted-dropout
// multipliers for each hidden layer (empty for no dropout).
inline Gradients compute_gradients(std::span<const Matrix> weights, std::span<const Vector> biases, const Matrix& x,
                                   std::span<const int> labels, std::span<const Matrix> masks = {}) {
  const std::size_t n_layers = weights.size();
  const auto batch = x.cols();
  if (static_cast<std::size_t>(batch) != labels.size()) throw std::invalid_argument("batch/labels size mismatch");
  if (batch == 0) throw std::invalid_argument("empty batch");

  // acts[0] = input, acts[l + 1] = output of layer l (post-dropout for hidden)
  std::vector<Matrix> acts(n_layers + 1);
  std::vector<Matrix> raw(n_layers);  // pre-dropout sigmoid outputs
  acts[0] = x;
  for (std::size_t l = 0; l < n_layers; ++l) {
    Matrix z = weights[l] * acts[l];
    z.colwise() += biases[l];
    if (l + 1 < n_layers) {
      raw[l] = detail::sigmoid(z);
      acts[l + 1] = masks.empty() ? raw[l] : Matrix(raw[l].cwiseProduct(masks[l]));
    } else {
      acts[l + 1] = std::move(z);
    }
  }

  Matrix delta = acts[n_layers];
  double loss = 0.0;
  for (Eigen::Index j = 0; j < batch; ++j) {
    auto col = delta.col(j);
    const double m = col.maxCoeff();
    col = (col.array() - m).exp().matrix();
    const double s = col.sum();
    col /= s;
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(j)]);
    loss -= std::log(std::max(col(y), 1e-300));
    col(y) -= 1.0;
  }
  const double inv_batch = 1.0 / static_cast<double>(batch);
  delta *= inv_batch;

  Gradients g;
  g.loss = loss * inv_batch;
  g.weights.resize(n_layers);
  g.biases.resize(n_layers);
  for (std::size_t l = n_layers; l-- > 0;) {
    g.weights[l] = delta * acts[l].transpose();
    g.biases[l] = delta.rowwise().sum();
    if (l == 0) break;
    Matrix back = weights[l].transpose() * delta;
    if (!masks.empty()) back = back.cwiseProduct(masks[l - 1]);
    delta = back.cwiseProduct((raw[l - 1].array() * (1.0 - raw[l - 1].array())).matrix());
  }
  return g;
}

inline double mean_loss(const FloatModel& fm, const Dataset& ds) {
  return compute_gradients(fm.weights, fm.biases, ds.inputs, ds.labels).loss;
}

struct TrainLog {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

namespace detail {

inline void check_training_inputs(const FloatModel& fm, const Dataset& ds, const TrainConfig& cfg) {
  fm.validate();
  if (ds.size() == 0) throw std::invalid_argument("empty dataset");
  ds.validate();
  if (ds.dim() != fm.layer_dims.front()) throw std::invalid_argument("dataset dimension does not match model");
  if (static_cast<std::size_t>(ds.n_classes) > fm.layer_dims.back())
    throw std::invalid_argument("model has fewer outputs than dataset classes");
  cfg.validate(fm.num_layers() - 1);
}

// Momentum SGD over shuffled minibatches. `effective` maps the trainable
// weights to the ones used in the forward pass (identity for float training,
// the quantizer for retraining); gradients w.r.t. the effective weights are
// applied to the trainable ones.
template <typename EpochStart, typename Effective>
void sgd_epochs(FloatModel& model, const Dataset& ds, const TrainConfig& cfg, std::mt19937_64& rng,
                EpochStart&& on_epoch_start, Effective&& effective, TrainLog* log) {
  const std::size_t n_layers = model.num_layers();
  std::vector<Matrix> vel_w;
  std::vector<Vector> vel_b;
  for (std::size_t l = 0; l < n_layers; ++l) {
    vel_w.push_back(Matrix::Zero(model.weights[l].rows(), model.weights[l].cols()));
    vel_b.push_back(Vector::Zero(model.biases[l].size()));
  }
  std::vector<std::size_t> order(ds.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    on_epoch_start(model);
    std::shuffle(order.begin(), order.end(), rng);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.minibatch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.minibatch));
      const auto b = static_cast<Eigen::Index>(end - start);
      Matrix x(ds.inputs.rows(), b);
      std::vector<int> labels(end - start);
      for (std::size_t k = start; k < end; ++k) {
        x.col(static_cast<Eigen::Index>(k - start)) = ds.inputs.col(static_cast<Eigen::Index>(order[k]));
        labels[k - start] = ds.labels[order[k]];
      }
      std::vector<Matrix> masks;
      for (std::size_t h = 0; h + 1 < n_layers; ++h) {
        const double keep = cfg.keep_for(h);
        Matrix m(model.weights[h].rows(), b);
        for (Eigen::Index j = 0; j < b; ++j)
          for (Eigen::Index i = 0; i < m.rows(); ++i) m(i, j) = keep >= 1.0 || unit(rng) < keep ? 1.0 / keep : 0.0;
        masks.push_back(std::move(m));
      }
      const std::vector<Matrix> used = effective(model);
      const Gradients g = compute_gradients(used, model.biases, x, labels, masks);
      for (std::size_t l = 0; l < n_layers; ++l) {
        vel_w[l] = cfg.momentum * vel_w[l] - cfg.learning_rate * g.weights[l];
        vel_b[l] = cfg.momentum * vel_b[l] - cfg.learning_rate * g.biases[l];
        model.weights[l] += vel_w[l];
        model.biases[l] += vel_b[l];
      }
      loss_sum += g.loss;
      ++n_batches;
    }
    if (log) log->epoch_loss.push_back(loss_sum / static_cast<double>(n_batches));
  }
}

}  // namespace detail

inline FloatModel train_sgd(const FloatModel& fm, const Dataset& ds, const TrainConfig& cfg,
                            TrainLog* log = nullptr) {
  detail::check_training_inputs(fm, ds, cfg);
  FloatModel model = fm;
  std::mt19937_64 rng(cfg.rng_seed);
  detail::sgd_epochs(
      model, ds, cfg, rng, [](const FloatModel&) {}, [](const FloatModel& m) { return m.weights; }, log);
  return model;
}

// Retraining with fixed-point weights. Each forward pass uses the shadow
// weights quantized with the current per-layer deltas (straight-through
// gradient onto the shadow); deltas are re-estimated at every epoch start.
inline std::pair<QuantizedModel, FloatModel> retrain_quantized(const FloatModel& fm, const QuantConfig& cfg_q,
                                                               const Dataset& ds, const TrainConfig& cfg_t,
                                                               TrainLog* log = nullptr) {
  cfg_q.validate();
  if (cfg_t.epochs == 0) {
    fm.validate();
    return {quantize_network(fm, cfg_q), fm};
  }
  detail::check_training_inputs(fm, ds, cfg_t);
  FloatModel shadow = fm;
  const std::size_t n_layers = shadow.num_layers();
  auto max_code = [&](std::size_t l) { return l + 1 == n_layers ? cfg_q.output_max_code : cfg_q.hidden_max_code; };
  std::vector<double> deltas(n_layers, 0.0);

  auto reestimate = [&](const FloatModel& m) {
    for (std::size_t l = 0; l < n_layers; ++l) {
      const Matrix& w = m.weights[l];
      deltas[l] = optimal_uniform_step(std::span<const double>(w.data(), static_cast<std::size_t>(w.size())),
                                       max_code(l), cfg_q)
                      .delta;
    }
  };
  auto quantized = [&](const FloatModel& m) {
    std::vector<Matrix> out;
    out.reserve(n_layers);
    for (std::size_t l = 0; l < n_layers; ++l) {
      const double d = deltas[l];
      const int mc = max_code(l);
      out.push_back(m.weights[l].unaryExpr([d, mc](double w) { return quantize_real_to_code(w, d, mc) * d; }));
    }
    return out;
  };

  std::mt19937_64 rng(cfg_t.rng_seed);
  detail::sgd_epochs(shadow, ds, cfg_t, rng, reestimate, quantized, log);
  return {quantize_network(shadow, cfg_q), shadow};
}

inline int predict_class(const Matrix& scores, Eigen::Index col) {
  const auto c = scores.col(col);
  Eigen::Index best = 0;
  for (Eigen::Index i = 1; i < c.size(); ++i)
    if (c(i) > c(best)) best = i;
  return static_cast<int>(best);
}

// Fraction of rows whose argmax (ties to the lowest index) differs from the label.
inline double evaluate_mcr(const FloatModel& fm, const Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  constexpr Eigen::Index kChunk = 1000;
  std::size_t wrong = 0;
  for (Eigen::Index start = 0; start < ds.inputs.cols(); start += kChunk) {
    const Eigen::Index n = std::min(kChunk, ds.inputs.cols() - start);
    const Matrix scores = forward_scores(fm, ds.inputs.middleCols(start, n));
    for (Eigen::Index j = 0; j < n; ++j)
      if (predict_class(scores, j) != ds.labels[static_cast<std::size_t>(start + j)]) ++wrong;
  }
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

}  // namespace fxdnn
