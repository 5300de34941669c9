#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "fxdnn/fxp.hpp"

namespace fxdnn {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct CorruptionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct UnsupportedVersionError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DegenerateInputError : std::domain_error {
  using std::domain_error::domain_error;
};

inline void check_layer_dims(std::span<const std::size_t> dims) {
  if (dims.size() < 2) throw std::invalid_argument("topology needs at least two layers");
  for (auto d : dims)
    if (d == 0) throw std::invalid_argument("layer sizes must be positive");
}

// Parses "784-1022-10" or "784,1022,10".
inline std::vector<std::size_t> parse_topology(const std::string& text) {
  std::vector<std::size_t> dims;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto end = text.find_first_of("-,x", pos);
    const auto token = text.substr(pos, end == std::string::npos ? std::string::npos : end - pos);
    if (token.empty() || token.find_first_not_of("0123456789") != std::string::npos)
      throw std::invalid_argument("bad topology: " + text);
    dims.push_back(std::stoul(token));
    if (end == std::string::npos) break;
    pos = end + 1;
  }
  check_layer_dims(dims);
  return dims;
}

inline std::string format_topology(std::span<const std::size_t> dims) {
  std::string out;
  for (std::size_t i = 0; i < dims.size(); ++i) {
    if (i) out += '-';
    out += std::to_string(dims[i]);
  }
  return out;
}

struct FloatModel {
  std::vector<std::size_t> layer_dims;
  std::vector<Matrix> weights;  // n_out x n_in
  std::vector<Vector> biases;

  std::size_t num_layers() const noexcept { return weights.size(); }

  void validate() const {
    check_layer_dims(layer_dims);
    if (weights.size() != layer_dims.size() - 1 || biases.size() != weights.size())
      throw std::invalid_argument("FloatModel layer count mismatch");
    for (std::size_t l = 0; l < weights.size(); ++l) {
      if (static_cast<std::size_t>(weights[l].rows()) != layer_dims[l + 1] ||
          static_cast<std::size_t>(weights[l].cols()) != layer_dims[l] ||
          static_cast<std::size_t>(biases[l].size()) != layer_dims[l + 1])
        throw std::invalid_argument("FloatModel shape mismatch at layer " + std::to_string(l));
      if (!weights[l].allFinite() || !biases[l].allFinite())
        throw std::invalid_argument("FloatModel has non-finite entries");
    }
  }

  friend bool operator==(const FloatModel& a, const FloatModel& b) {
    if (a.layer_dims != b.layer_dims || a.weights.size() != b.weights.size()) return false;
    for (std::size_t l = 0; l < a.weights.size(); ++l)
      if (a.weights[l] != b.weights[l] || a.biases[l] != b.biases[l]) return false;
    return true;
  }
};

// Zero-initialized model of the given topology.
inline FloatModel make_zero_model(std::span<const std::size_t> dims) {
  check_layer_dims(dims);
  FloatModel fm;
  fm.layer_dims.assign(dims.begin(), dims.end());
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    fm.weights.push_back(Matrix::Zero(static_cast<Eigen::Index>(dims[l + 1]), static_cast<Eigen::Index>(dims[l])));
    fm.biases.push_back(Vector::Zero(static_cast<Eigen::Index>(dims[l + 1])));
  }
  return fm;
}

// Uniform in +-sqrt(6 / (n_in + n_out)), zero biases.
inline FloatModel init_float_model(std::span<const std::size_t> dims, std::uint64_t seed) {
  FloatModel fm = make_zero_model(dims);
  std::mt19937_64 rng(seed);
  for (std::size_t l = 0; l < fm.num_layers(); ++l) {
    const double r = std::sqrt(6.0 / static_cast<double>(dims[l] + dims[l + 1]));
    std::uniform_real_distribution<double> u(-r, r);
    for (Eigen::Index j = 0; j < fm.weights[l].cols(); ++j)
      for (Eigen::Index i = 0; i < fm.weights[l].rows(); ++i) fm.weights[l](i, j) = u(rng);
  }
  return fm;
}

struct QuantConfig {
  int hidden_max_code = 3;
  int output_max_code = 127;
  int lloyd_iters = 100;
  double lloyd_tol = 1e-8;

  void validate() const {
    if (hidden_max_code < 1 || output_max_code < 1)
      throw std::invalid_argument("max codes must be >= 1");
    if (output_max_code > 127 || hidden_max_code > 127)
      throw std::invalid_argument("max codes must fit an 8-bit field");
    if (lloyd_iters < 1 || !(lloyd_tol > 0.0)) throw std::invalid_argument("bad quantizer iteration settings");
  }

  static QuantConfig from_bits(int hidden_bits, int output_bits) {
    if (hidden_bits < 2 || hidden_bits > 8 || output_bits < 2 || output_bits > 8)
      throw std::invalid_argument("weight bit widths must be in [2, 8]");
    QuantConfig cfg;
    cfg.hidden_max_code = max_code_for_bits(hidden_bits);
    cfg.output_max_code = max_code_for_bits(output_bits);
    return cfg;
  }
};

struct QuantizedLayer {
  std::size_t n_in = 0;
  std::size_t n_out = 0;
  int bits = 3;
  std::vector<std::int8_t> codes;  // row-major, n_out x n_in
  double delta = 0.0;
  DeltaScale scale;
  std::vector<std::int16_t> biases;  // Bias16, accumulator units

  int max_code() const noexcept { return max_code_for_bits(bits); }
  int code(std::size_t row, std::size_t col) const noexcept { return codes[row * n_in + col]; }
  std::span<const std::int8_t> row(std::size_t r) const noexcept { return {codes.data() + r * n_in, n_in}; }

  friend bool operator==(const QuantizedLayer&, const QuantizedLayer&) = default;
};

struct QuantizedModel {
  std::vector<std::size_t> layer_dims;
  std::vector<QuantizedLayer> layers;

  std::size_t num_layers() const noexcept { return layers.size(); }

  void validate() const {
    check_layer_dims(layer_dims);
    if (layers.size() != layer_dims.size() - 1) throw std::invalid_argument("QuantizedModel layer count mismatch");
    for (std::size_t l = 0; l < layers.size(); ++l) {
      const auto& q = layers[l];
      if (q.n_in != layer_dims[l] || q.n_out != layer_dims[l + 1] || q.codes.size() != q.n_in * q.n_out ||
          q.biases.size() != q.n_out)
        throw std::invalid_argument("QuantizedModel shape mismatch at layer " + std::to_string(l));
      if (q.bits < 2 || q.bits > 8) throw std::invalid_argument("QuantizedModel bit width out of range");
      if (!(q.delta > 0.0)) throw std::invalid_argument("QuantizedModel delta must be positive");
      for (auto c : q.codes)
        if (c < -q.max_code() || c > q.max_code()) throw std::invalid_argument("weight code exceeds bit width");
    }
  }

  friend bool operator==(const QuantizedModel&, const QuantizedModel&) = default;
};

}  // namespace fxdnn
