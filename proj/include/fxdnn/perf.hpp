// Analytic storage / throughput / bandwidth / energy model.
#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <vector>

#include "fxdnn/model.hpp"

namespace fxdnn {

inline constexpr int kBiasBits = 16;

inline std::uint64_t weight_count(std::span<const std::size_t> layer_dims) {
  check_layer_dims(layer_dims);
  std::uint64_t n = 0;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) n += std::uint64_t{layer_dims[l]} * layer_dims[l + 1];
  return n;
}

// Weight bits only; biases are a separate line item (bias_bits).
inline std::uint64_t storage_bits(std::span<const std::size_t> layer_dims, int hidden_bits = 3, int output_bits = 8) {
  check_layer_dims(layer_dims);
  if (hidden_bits < 1 || output_bits < 1) throw std::invalid_argument("bit widths must be positive");
  const std::size_t last = layer_dims.size() - 2;
  std::uint64_t bits = 0;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l)
    bits += std::uint64_t{layer_dims[l]} * layer_dims[l + 1] *
            static_cast<std::uint64_t>(l == last ? output_bits : hidden_bits);
  return bits;
}

inline std::uint64_t bias_bits(std::span<const std::size_t> layer_dims) {
  check_layer_dims(layer_dims);
  std::uint64_t nodes = 0;
  for (std::size_t l = 1; l < layer_dims.size(); ++l) nodes += layer_dims[l];
  return nodes * kBiasBits;
}

inline double throughput(std::uint64_t cycles_per_input, double clock_hz) {
  if (cycles_per_input == 0) throw std::invalid_argument("throughput: cycles per input must be positive");
  if (!(clock_hz > 0.0)) throw std::invalid_argument("throughput: clock must be positive");
  return clock_hz / static_cast<double>(cycles_per_input);
}

// Bits per second needed if every inference streamed all weights from DRAM.
inline double dram_bandwidth_if_offchip(double weight_bits_per_inference, double throughput_per_sec) {
  if (weight_bits_per_inference < 0.0 || throughput_per_sec < 0.0)
    throw std::invalid_argument("bandwidth inputs must be nonnegative");
  return weight_bits_per_inference * throughput_per_sec;
}

inline double energy_per_inference(double power_w, double throughput_per_sec) {
  if (!(throughput_per_sec > 0.0)) throw std::invalid_argument("energy_per_inference: throughput must be positive");
  if (power_w < 0.0) throw std::invalid_argument("energy_per_inference: power must be nonnegative");
  return power_w / throughput_per_sec;
}

struct PerfReport {
  std::vector<std::size_t> layer_dims;
  std::uint64_t n_weights = 0;
  std::uint64_t storage_bits = 0;
  std::uint64_t bias_bits = 0;
  std::uint64_t cycles_per_input = 0;
  double clock_hz = 0.0;
  double throughput_per_sec = 0.0;
  // Bandwidth and energy use the measured rate when one is given, else the model's.
  double rate_basis_per_sec = 0.0;
  double dram_bandwidth_bps_if_offchip = 0.0;
  double power_w = 0.0;
  double energy_per_inference_j = 0.0;
};

// Hidden tiles dominate: nodes_per_pu * widest input of any tile + overhead,
// with the output tile costing one cycle per input.
inline std::uint64_t analytic_cycles_per_input(std::span<const std::size_t> layer_dims, std::size_t nodes_per_pu,
                                               int overhead_cycles) {
  check_layer_dims(layer_dims);
  std::uint64_t worst = 0;
  for (std::size_t l = 0; l + 1 < layer_dims.size(); ++l) {
    const bool output = l + 2 == layer_dims.size();
    worst = std::max<std::uint64_t>(worst, (output ? 1 : nodes_per_pu) * std::uint64_t{layer_dims[l]});
  }
  return worst + static_cast<std::uint64_t>(overhead_cycles);
}

struct PerfInputs {
  std::vector<std::size_t> layer_dims;
  int hidden_bits = 3;
  int output_bits = 8;
  std::size_t nodes_per_pu = 2;
  int overhead_cycles = 19;
  double clock_hz = 100e6;
  double power_w = 0.0;
  double measured_throughput = 0.0;  // 0: use the model's throughput
};

inline PerfReport make_perf_report(const PerfInputs& in) {
  PerfReport r;
  r.layer_dims = in.layer_dims;
  r.n_weights = weight_count(in.layer_dims);
  r.storage_bits = storage_bits(in.layer_dims, in.hidden_bits, in.output_bits);
  r.bias_bits = bias_bits(in.layer_dims);
  r.cycles_per_input = analytic_cycles_per_input(in.layer_dims, in.nodes_per_pu, in.overhead_cycles);
  r.clock_hz = in.clock_hz;
  r.throughput_per_sec = throughput(r.cycles_per_input, in.clock_hz);
  r.rate_basis_per_sec = in.measured_throughput > 0.0 ? in.measured_throughput : r.throughput_per_sec;
  r.dram_bandwidth_bps_if_offchip = dram_bandwidth_if_offchip(static_cast<double>(r.storage_bits), r.rate_basis_per_sec);
  r.power_w = in.power_w;
  r.energy_per_inference_j = energy_per_inference(in.power_w, r.rate_basis_per_sec);
  return r;
}

}  // namespace fxdnn
