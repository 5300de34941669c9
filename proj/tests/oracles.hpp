// Independent reference computations used only by tests.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <functional>
#include <random>
#include <span>
#include <vector>

#include "fxdnn/model.hpp"
#include "fxdnn/quant.hpp"

namespace fxdnn::testing {

// Dense grid search over delta in (0, max|w|] for the uniform quantizer
// objective, followed by successively finer grids around the best point.
// Each delta is scored in O(max_code log n) from prefix sums over sorted |w|:
// the level k collects |w| in [(k - 1/2) delta, (k + 1/2) delta), the top level
// everything above, so sse = sum w^2 - 2 delta sum|w|k + delta^2 sum k^2.
class GridSearchQuantizer {
 public:
  GridSearchQuantizer(std::span<const double> weights, int max_code) : max_code_(max_code) {
    for (double w : weights) abs_.push_back(std::abs(w));
    std::sort(abs_.begin(), abs_.end());
    prefix_.assign(abs_.size() + 1, 0.0);
    for (std::size_t i = 0; i < abs_.size(); ++i) {
      prefix_[i + 1] = prefix_[i] + abs_[i];
      total_sq_ += abs_[i] * abs_[i];
    }
  }

  double sse(double delta) const {
    double wk = 0.0;
    double kk = 0.0;
    std::size_t lo = 0;
    for (int k = 0; k <= max_code_; ++k) {
      std::size_t hi = abs_.size();
      if (k < max_code_) {
        const double edge = (k + 0.5) * delta;
        hi = static_cast<std::size_t>(std::lower_bound(abs_.begin(), abs_.end(), edge) - abs_.begin());
      }
      hi = std::max(hi, lo);
      wk += k * (prefix_[hi] - prefix_[lo]);
      kk += static_cast<double>(k) * k * static_cast<double>(hi - lo);
      lo = hi;
    }
    return std::max(0.0, total_sq_ - 2.0 * delta * wk + delta * delta * kk);
  }

  // Direct summation in long double; the prefix-sum form above cancels when
  // sse is many orders below sum w^2.
  double exact_sse(double delta) const {
    long double total = 0.0L;
    for (double a : abs_) {
      const long double k = std::min<long double>(max_code_, std::nearbyint(static_cast<long double>(a) / delta));
      const long double e = a - k * delta;
      total += e * e;
    }
    return static_cast<double>(total);
  }

  struct Best {
    double delta;
    double sse;
  };

  Best search(int points = 100000, int refinements = 4, int refine_points = 20000) const {
    const double top = abs_.empty() ? 0.0 : abs_.back();
    double lo = 0.0;
    double hi = top;
    Best best{top, sse(top)};
    int n = points;
    for (int round = 0; round <= refinements; ++round) {
      const double step = (hi - lo) / n;
      for (int i = 1; i <= n; ++i) {
        const double d = lo + step * i;
        if (d <= 0.0) continue;
        const double s = sse(d);
        if (s < best.sse) best = {d, s};
      }
      lo = std::max(0.0, best.delta - step);
      hi = best.delta + step;
      n = refine_points;
    }
    best.sse = exact_sse(best.delta);
    return best;
  }

 private:
  int max_code_;
  std::vector<double> abs_;
  std::vector<double> prefix_;
  double total_sq_ = 0.0;
};

// Plain triple-loop forward pass with the logistic sigmoid on hidden layers.
template <typename Real = double>
std::vector<Real> naive_forward_scores(const FloatModel& fm, const std::vector<Real>& x) {
  std::vector<Real> y = x;
  for (std::size_t l = 0; l < fm.weights.size(); ++l) {
    const Matrix& w = fm.weights[l];
    std::vector<Real> z(static_cast<std::size_t>(w.rows()));
    for (Eigen::Index i = 0; i < w.rows(); ++i) {
      Real s = fm.biases[l](i);
      for (Eigen::Index j = 0; j < w.cols(); ++j) s += Real(w(i, j)) * y[static_cast<std::size_t>(j)];
      const bool hidden = l + 1 < fm.weights.size();
      z[static_cast<std::size_t>(i)] = hidden ? Real(1) / (Real(1) + std::exp(-s)) : s;
    }
    y = std::move(z);
  }
  return y;
}

// Mean softmax cross-entropy from the naive forward pass, accumulated in long
// double so central differences are not limited by double rounding.
inline long double naive_loss(const FloatModel& fm, const Matrix& x, std::span<const int> labels) {
  long double loss = 0.0L;
  for (Eigen::Index j = 0; j < x.cols(); ++j) {
    std::vector<long double> col(static_cast<std::size_t>(x.rows()));
    for (Eigen::Index i = 0; i < x.rows(); ++i) col[static_cast<std::size_t>(i)] = x(i, j);
    const auto s = naive_forward_scores(fm, col);
    const long double m = *std::max_element(s.begin(), s.end());
    long double z = 0.0L;
    for (long double v : s) z += std::exp(v - m);
    loss -= s[static_cast<std::size_t>(labels[static_cast<std::size_t>(j)])] - m - std::log(z);
  }
  return loss / static_cast<long double>(x.cols());
}

// Central-difference derivative of naive_loss with respect to one parameter.
inline double central_difference(FloatModel& fm, double& param, const Matrix& x, std::span<const int> labels,
                                 double eps = 1e-5) {
  const double saved = param;
  const double up = saved + eps;
  const double down = saved - eps;
  param = up;
  const long double l_up = naive_loss(fm, x, labels);
  param = down;
  const long double l_down = naive_loss(fm, x, labels);
  param = saved;
  return static_cast<double>((l_up - l_down) / (static_cast<long double>(up) - down));
}

inline FloatModel random_float_model(const std::vector<std::size_t>& dims, std::mt19937_64& rng, double scale = 1.0) {
  FloatModel fm = make_zero_model(dims);
  std::normal_distribution<double> n(0.0, scale);
  for (std::size_t l = 0; l < fm.num_layers(); ++l) {
    fm.weights[l] = fm.weights[l].unaryExpr([&](double) { return n(rng); });
    fm.biases[l] = fm.biases[l].unaryExpr([&](double) { return n(rng); });
  }
  return fm;
}

// Random quantized model built directly in the code domain, so every code
// and bias value (including saturating ones) is exercised.
inline QuantizedModel random_quantized_model(const std::vector<std::size_t>& dims, std::mt19937_64& rng,
                                             int hidden_bits = 3, int output_bits = 8) {
  QuantizedModel qm;
  qm.layer_dims.assign(dims.begin(), dims.end());
  std::uniform_real_distribution<double> log_delta(std::log(1e-3), std::log(4.0));
  std::uniform_int_distribution<int> bias(-6000, 6000);
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    QuantizedLayer q;
    q.n_in = dims[l];
    q.n_out = dims[l + 1];
    q.bits = l + 2 == dims.size() ? output_bits : hidden_bits;
    std::uniform_int_distribution<int> code(-q.max_code(), q.max_code());
    for (std::size_t i = 0; i < q.n_in * q.n_out; ++i) q.codes.push_back(static_cast<std::int8_t>(code(rng)));
    q.delta = std::exp(log_delta(rng));
    q.scale = DeltaScale::from_delta(q.delta, l + 2 == dims.size() ? kScoreFracBits : kActInFracBits);
    for (std::size_t i = 0; i < q.n_out; ++i) q.biases.push_back(static_cast<std::int16_t>(bias(rng)));
    qm.layers.push_back(std::move(q));
  }
  return qm;
}

inline std::vector<std::size_t> random_dims(std::mt19937_64& rng, std::size_t max_dim, std::size_t max_layers = 4) {
  std::uniform_int_distribution<std::size_t> dim(1, max_dim);
  std::uniform_int_distribution<std::size_t> layers(2, max_layers + 1);
  std::vector<std::size_t> dims(layers(rng));
  for (auto& d : dims) d = dim(rng);
  return dims;
}

inline std::vector<Sample8> random_image(std::size_t n, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> px(0, 255);
  std::vector<Sample8> out(n);
  for (auto& s : out) s = Sample8{static_cast<std::uint8_t>(px(rng))};
  return out;
}

inline std::filesystem::path mnist_dir() {
  if (const char* env = std::getenv("FXDNN_MNIST_DIR")) return env;
  return "/root/data/mnist";
}

inline bool mnist_available() {
  const auto d = mnist_dir();
  return std::filesystem::exists(d / "train-images-idx3-ubyte") && std::filesystem::exists(d / "t10k-images-idx3-ubyte");
}

}  // namespace fxdnn::testing
