// Optimal uniform L2 quantization of trained weights.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <vector>

#include "fxdnn/fxp.hpp"
#include "fxdnn/model.hpp"

namespace fxdnn {

struct UniformStep {
  double delta = 0.0;
  double sse = 0.0;
  int iterations = 0;
};

inline double quantization_sse(std::span<const double> weights, double delta, int max_code) {
  double sse = 0.0;
  for (double w : weights) {
    const double e = w - delta * quantize_real_to_code(w, delta, max_code);
    sse += e * e;
  }
  return sse;
}

namespace detail {

// Alternating minimization of sum (w - delta * clip(round(w / delta)))^2:
// fix delta and assign codes, then fix codes and solve delta = sum(wq) / sum(q^2).
inline double alternate(std::span<const double> weights, int max_code, double delta, const QuantConfig& cfg,
                        std::vector<double>* trace, int& iterations) {
  for (int it = 0; it < cfg.lloyd_iters; ++it) {
    double wq = 0.0;
    double qq = 0.0;
    double sse = 0.0;
    for (double w : weights) {
      const double q = quantize_real_to_code(w, delta, max_code);
      wq += w * q;
      qq += q * q;
      const double e = w - delta * q;
      sse += e * e;
    }
    if (trace) trace->push_back(sse);
    ++iterations;
    if (qq == 0.0) break;
    const double next = wq / qq;
    const double change = std::abs(next - delta) / delta;
    delta = next;
    if (change < cfg.lloyd_tol) break;
  }
  return delta;
}

// The objective is a quadratic in delta between the points |w| / (k + 1/2)
// where some code changes. Sweep them from large to small delta, keeping
// A = sum |w||q| and B = sum q^2, and take the best clamped vertex.
inline double sweep_breakpoints(std::span<const double> weights, int max_code) {
  struct Crossing {
    double at;
    double mag;
    int from;
  };
  std::vector<Crossing> xs;
  double s = 0.0;
  for (double w : weights) {
    s += w * w;
    const double m = std::abs(w);
    if (m == 0.0) continue;
    for (int k = 0; k < max_code; ++k) xs.push_back({m / (k + 0.5), m, k});
  }
  std::sort(xs.begin(), xs.end(), [](const Crossing& a, const Crossing& b) { return a.at > b.at; });
  double a = 0.0;
  double b = 0.0;
  double best = xs.front().at;
  double best_sse = s;
  for (std::size_t i = 0; i < xs.size(); ++i) {
    a += xs[i].mag;
    b += 2.0 * xs[i].from + 1.0;
    const double hi = xs[i].at;
    const double lo = i + 1 < xs.size() ? xs[i + 1].at : 0.0;
    const double d = std::clamp(a / b, lo, hi);
    const double sse = s - 2.0 * d * a + d * d * b;
    if (d > 0.0 && sse < best_sse) {
      best_sse = sse;
      best = d;
    }
  }
  return best;
}

}  // namespace detail

// Alternating iteration from max|w| / max_code (nothing clips initially).
// That iteration only finds a local minimum, so the exact breakpoint sweep
// seeds a second run whenever it lands in a better basin. If `trace` is
// given, it receives the objective after every assignment step.
inline UniformStep optimal_uniform_step(std::span<const double> weights, int max_code, const QuantConfig& cfg,
                                        std::vector<double>* trace = nullptr) {
  if (max_code < 1) throw std::invalid_argument("optimal_uniform_step: max_code must be >= 1");
  if (weights.empty()) throw DegenerateInputError("optimal_uniform_step: empty weight set");
  double max_abs = 0.0;
  for (double w : weights) {
    if (!std::isfinite(w)) throw std::invalid_argument("optimal_uniform_step: non-finite weight");
    max_abs = std::max(max_abs, std::abs(w));
  }
  if (max_abs == 0.0) throw DegenerateInputError("optimal_uniform_step: all weights are zero");

  UniformStep result;
  result.delta = detail::alternate(weights, max_code, max_abs / max_code, cfg, trace, result.iterations);
  result.sse = quantization_sse(weights, result.delta, max_code);
  const double seed = detail::sweep_breakpoints(weights, max_code);
  if (quantization_sse(weights, seed, max_code) < result.sse) {
    const double delta = detail::alternate(weights, max_code, seed, cfg, trace, result.iterations);
    const double sse = quantization_sse(weights, delta, max_code);
    if (sse <= result.sse) {
      result.delta = delta;
      result.sse = sse;
    }
  }
  if (trace) trace->push_back(result.sse);
  return result;
}

struct LayerQuantization {
  std::vector<std::int8_t> codes;  // row-major
  double delta = 0.0;
  double sse = 0.0;
};

inline LayerQuantization quantize_layer(const Matrix& weights, int max_code, const QuantConfig& cfg) {
  const auto rows = static_cast<std::size_t>(weights.rows());
  const auto cols = static_cast<std::size_t>(weights.cols());
  std::vector<double> flat(rows * cols);
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      flat[r * cols + c] = weights(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));

  const UniformStep step = optimal_uniform_step(flat, max_code, cfg);
  LayerQuantization out;
  out.delta = step.delta;
  out.sse = step.sse;
  out.codes.resize(flat.size());
  for (std::size_t i = 0; i < flat.size(); ++i)
    out.codes[i] = static_cast<std::int8_t>(quantize_real_to_code(flat[i], step.delta, max_code));
  return out;
}

inline Matrix dequantize(std::span<const std::int8_t> codes, std::size_t rows, std::size_t cols, double delta) {
  if (!(delta > 0.0)) throw std::invalid_argument("dequantize: delta must be positive");
  if (codes.size() != rows * cols) throw std::invalid_argument("dequantize: shape mismatch");
  Matrix m(static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t c = 0; c < cols; ++c)
      m(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = codes[r * cols + c] * delta;
  return m;
}

inline Matrix dequantize(const QuantizedLayer& layer) {
  return dequantize(layer.codes, layer.n_out, layer.n_in, layer.delta);
}

inline QuantizedLayer make_quantized_layer(const Matrix& weights, const Vector& biases, int max_code,
                                           const QuantConfig& cfg, bool output_layer = false) {
  const LayerQuantization lq = quantize_layer(weights, max_code, cfg);
  QuantizedLayer q;
  q.n_in = static_cast<std::size_t>(weights.cols());
  q.n_out = static_cast<std::size_t>(weights.rows());
  q.bits = code_width_bits(max_code);
  q.codes = lq.codes;
  q.delta = lq.delta;
  q.scale = DeltaScale::from_delta(lq.delta, output_layer ? kScoreFracBits : kActInFracBits);
  q.biases.resize(q.n_out);
  for (std::size_t i = 0; i < q.n_out; ++i)
    q.biases[i] = bias_to_acc16(biases(static_cast<Eigen::Index>(i)), lq.delta).value;
  return q;
}

// Hidden/input layers use hidden_max_code, the final layer output_max_code.
inline QuantizedModel quantize_network(const FloatModel& fm, const QuantConfig& cfg) {
  fm.validate();
  cfg.validate();
  QuantizedModel qm;
  qm.layer_dims = fm.layer_dims;
  for (std::size_t l = 0; l < fm.num_layers(); ++l) {
    const bool last = l + 1 == fm.num_layers();
    qm.layers.push_back(
        make_quantized_layer(fm.weights[l], fm.biases[l], last ? cfg.output_max_code : cfg.hidden_max_code, cfg, last));
  }
  return qm;
}

// Weights as code * delta; biases recovered from Bias16 units.
inline FloatModel dequantize_network(const QuantizedModel& qm) {
  FloatModel fm;
  fm.layer_dims = qm.layer_dims;
  for (const auto& q : qm.layers) {
    fm.weights.push_back(dequantize(q));
    Vector b(static_cast<Eigen::Index>(q.n_out));
    for (std::size_t i = 0; i < q.n_out; ++i) b(static_cast<Eigen::Index>(i)) = q.biases[i] * (q.delta / 256.0);
    fm.biases.push_back(b);
  }
  return fm;
}

}  // namespace fxdnn
