// Cycle-accounted simulation of the tile/PU datapath and a scheduling-free
// fixed-point reference forward used as its oracle.
//
// A tile implements one layer. Each of its PUs serves `nodes_per_pu` nodes:
// for phase s (the selnet value) every PU is reset to the bias of its node
// p * nodes_per_pu + s, then all layer inputs stream past, one per clock.
// After the last phase each node's sum is rescaled by delta and, on hidden
// tiles, passed through the 8-bit sigmoid. The output tile has one node per
// PU, skips the sigmoid and its S5.2 scores are compared to pick the class.
#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fxdnn/fxp.hpp"
#include "fxdnn/model.hpp"
#include "fxdnn/train.hpp"

namespace fxdnn {

inline constexpr int kDefaultOverheadCycles = 19;
inline constexpr std::size_t kDefaultBatchSize = 100;

struct TileConfig {
  std::size_t n_nodes = 0;
  std::size_t n_pus = 0;
  std::size_t nodes_per_pu = 1;
  std::size_t n_inputs = 0;

  std::uint64_t accumulation_cycles() const noexcept { return nodes_per_pu * n_inputs; }
};

struct Tile {
  TileConfig config;
  bool output_tile = false;
  bool select_datapath = true;  // seven-way select PU with Acc16 (3-bit codes); otherwise multiplier PU with Acc32
  DeltaScale scale;
  std::vector<std::int16_t> biases;  // per node
  // Weight words as read from tile BRAM: [phase][input][pu]. Dummy node slots hold 0.
  std::vector<std::int8_t> weight_words;

  std::int8_t weight(std::size_t phase, std::size_t input, std::size_t pu) const noexcept {
    return weight_words[(phase * config.n_inputs + input) * config.n_pus + pu];
  }
};

struct TilePipeline {
  std::vector<Tile> tiles;
  int overhead_cycles = kDefaultOverheadCycles;
};

// Clipping events observed along the datapath.
struct SaturationCounters {
  std::uint64_t accumulator = 0;
  std::uint64_t rescale = 0;

  SaturationCounters& operator+=(const SaturationCounters& o) noexcept {
    accumulator += o.accumulator;
    rescale += o.rescale;
    return *this;
  }
  friend bool operator==(const SaturationCounters&, const SaturationCounters&) = default;
};

struct CycleReport {
  std::uint64_t cycles_per_input = 0;
  std::uint64_t total_cycles = 0;
  std::vector<std::uint64_t> per_tile_cycles;               // accumulation + overhead
  std::vector<std::uint64_t> per_tile_accumulation_cycles;  // nodes_per_pu * n_inputs
  std::uint64_t overhead_cycles = 0;
  std::size_t batch_size = 0;
  std::size_t n_images = 0;
  std::size_t n_batches = 0;
  std::size_t fin_events = 0;
};

inline Tile make_tile(const QuantizedLayer& layer, std::size_t nodes_per_pu, bool output_tile) {
  if (nodes_per_pu == 0) throw std::invalid_argument("nodes_per_pu must be positive");
  Tile t;
  t.output_tile = output_tile;
  t.select_datapath = layer.bits <= 3;
  t.config.n_nodes = layer.n_out;
  t.config.n_inputs = layer.n_in;
  t.config.nodes_per_pu = output_tile ? 1 : nodes_per_pu;
  t.config.n_pus = (layer.n_out + t.config.nodes_per_pu - 1) / t.config.nodes_per_pu;
  t.scale = layer.scale;
  t.biases = layer.biases;
  const auto& c = t.config;
  t.weight_words.assign(c.nodes_per_pu * c.n_inputs * c.n_pus, 0);
  for (std::size_t s = 0; s < c.nodes_per_pu; ++s)
    for (std::size_t p = 0; p < c.n_pus; ++p) {
      const std::size_t node = p * c.nodes_per_pu + s;
      if (node >= c.n_nodes) continue;
      for (std::size_t i = 0; i < c.n_inputs; ++i)
        t.weight_words[(s * c.n_inputs + i) * c.n_pus + p] = layer.code(node, i);
    }
  return t;
}

// One tile per layer; hidden tiles get ceil(n / nodes_per_pu) PUs, the output
// tile one PU per node.
inline TilePipeline build_pipeline(const QuantizedModel& qm, std::size_t nodes_per_pu,
                                   int overhead_cycles = kDefaultOverheadCycles) {
  qm.validate();
  if (overhead_cycles < 0) throw std::invalid_argument("overhead cycles must be nonnegative");
  TilePipeline pl;
  pl.overhead_cycles = overhead_cycles;
  for (std::size_t l = 0; l < qm.num_layers(); ++l)
    pl.tiles.push_back(make_tile(qm.layers[l], nodes_per_pu, l + 1 == qm.num_layers()));
  return pl;
}

inline std::uint64_t tile_cycles(const Tile& t, int overhead_cycles) noexcept {
  return t.config.accumulation_cycles() + static_cast<std::uint64_t>(overhead_cycles);
}

// Slowest tile's serial cost plus the fixed per-input overhead.
inline std::uint64_t cycles_per_input(const TilePipeline& pl) noexcept {
  std::uint64_t worst = 0;
  for (const auto& t : pl.tiles) worst = std::max(worst, tile_cycles(t, pl.overhead_cycles));
  return worst;
}

struct TileOutput {
  std::vector<Sample8> activations;  // hidden tiles
  std::vector<Score8> scores;        // output tile
  std::uint64_t accumulation_cycles = 0;
  std::uint64_t cycles = 0;
};

struct SimOptions {
  int overhead_cycles = kDefaultOverheadCycles;
  // Visit PUs in a shuffled order each cycle; results must not change.
  std::optional<std::uint64_t> pu_shuffle_seed;
};

inline TileOutput simulate_tile(const Tile& tile, std::span<const Sample8> inputs, const SimOptions& opt = {},
                                SaturationCounters* sat = nullptr) {
  const auto& c = tile.config;
  if (inputs.size() != c.n_inputs) throw std::invalid_argument("simulate_tile: input dimension mismatch");

  std::vector<std::size_t> pu_order(c.n_pus);
  std::iota(pu_order.begin(), pu_order.end(), std::size_t{0});
  std::optional<std::mt19937_64> shuffle_rng;
  if (opt.pu_shuffle_seed) shuffle_rng.emplace(*opt.pu_shuffle_seed);

  const long long acc_min = tile.select_datapath ? kAccMin : kAcc32Min;
  const long long acc_max = tile.select_datapath ? kAccMax : kAcc32Max;
  std::vector<long long> acc(c.n_pus);
  std::vector<long long> out_regs(c.n_pus * c.nodes_per_pu);
  SaturationCounters local;
  std::uint64_t cycle = 0;

  for (std::size_t phase = 0; phase < c.nodes_per_pu; ++phase) {
    // rstnet: preload Bias<phase>; padded dummy nodes start from zero
    for (std::size_t p = 0; p < c.n_pus; ++p) {
      const std::size_t node = p * c.nodes_per_pu + phase;
      acc[p] = node < c.n_nodes ? tile.biases[node] : 0;
    }
    for (std::size_t i = 0; i < c.n_inputs; ++i, ++cycle) {
      const Sample8 din = inputs[i];
      // Din is broadcast; each PU picks its term by weight code.
      std::array<long long, 256> term{};
      if (tile.select_datapath) {
        for (int w = -3; w <= 3; ++w) term[static_cast<std::uint8_t>(w)] = select_multiple(din, WeightCode3(w));
      } else {
        for (int w = -127; w <= 127; ++w) term[static_cast<std::uint8_t>(w)] = static_cast<long long>(w) * din.code;
      }
      const std::int8_t* words = &tile.weight_words[(phase * c.n_inputs + i) * c.n_pus];
      auto step = [&](std::size_t p) {
        const long long sum = acc[p] + term[static_cast<std::uint8_t>(words[p])];
        const bool clipped = sum < acc_min || sum > acc_max;
        acc[p] = std::clamp(sum, acc_min, acc_max);
        local.accumulator += clipped;
      };
      if (shuffle_rng) {
        std::shuffle(pu_order.begin(), pu_order.end(), *shuffle_rng);
        for (std::size_t p : pu_order) step(p);
      } else {
        for (std::size_t p = 0; p < c.n_pus; ++p) step(p);
      }
    }
    for (std::size_t p = 0; p < c.n_pus; ++p) out_regs[p * c.nodes_per_pu + phase] = acc[p];
  }

  TileOutput out;
  out.accumulation_cycles = cycle;
  out.cycles = cycle + static_cast<std::uint64_t>(opt.overhead_cycles);
  const auto& sigmoid = build_sigmoid_table();
  for (std::size_t node = 0; node < c.n_nodes; ++node) {
    bool clipped = false;
    const std::int8_t x = rescale_code(out_regs[node], tile.scale, clipped);
    local.rescale += clipped;
    if (tile.output_tile)
      out.scores.push_back(Score8{x});
    else
      out.activations.push_back(sigmoid(ActIn8{x}));
  }
  if (sat) *sat += local;
  return out;
}

struct ForwardTrace {
  std::vector<std::vector<Sample8>> hidden;  // one vector per hidden layer
  std::vector<Score8> scores;
  int predicted = 0;

  friend bool operator==(const ForwardTrace&, const ForwardTrace&) = default;
};

inline int argmax_scores(std::span<const Score8> scores) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < scores.size(); ++i)
    if (scores[i].code > scores[best].code) best = i;
  return static_cast<int>(best);
}

// Same arithmetic as the tile chain, written as plain per-node loops.
inline ForwardTrace reference_forward(const QuantizedModel& qm, std::span<const Sample8> x,
                                      SaturationCounters* sat = nullptr) {
  if (qm.layers.empty() || x.size() != qm.layers.front().n_in)
    throw std::invalid_argument("reference_forward: input dimension mismatch");
  const auto& sigmoid = build_sigmoid_table();
  ForwardTrace trace;
  std::vector<Sample8> y(x.begin(), x.end());
  SaturationCounters local;
  for (std::size_t l = 0; l < qm.num_layers(); ++l) {
    const auto& layer = qm.layers[l];
    if (y.size() != layer.n_in) throw std::invalid_argument("reference_forward: layer dimension mismatch");
    const bool last = l + 1 == qm.num_layers();
    std::vector<Sample8> next;
    for (std::size_t n = 0; n < layer.n_out; ++n) {
      bool clipped = false;
      std::int8_t z;
      if (layer.bits <= 3) {
        Acc16 acc{layer.biases[n]};
        for (std::size_t i = 0; i < layer.n_in; ++i) {
          acc = sat_add16(acc, static_cast<long long>(layer.code(n, i)) * y[i].code, clipped);
          local.accumulator += clipped;
        }
        z = rescale_code(acc.value, layer.scale, clipped);
      } else {
        Acc32 acc{layer.biases[n]};
        for (std::size_t i = 0; i < layer.n_in; ++i) {
          acc = sat_add32(acc, static_cast<long long>(layer.code(n, i)) * y[i].code, clipped);
          local.accumulator += clipped;
        }
        z = rescale_code(acc.value, layer.scale, clipped);
      }
      local.rescale += clipped;
      if (last)
        trace.scores.push_back(Score8{z});
      else
        next.push_back(sigmoid(ActIn8{z}));
    }
    if (!last) {
      trace.hidden.push_back(next);
      y = std::move(next);
    }
  }
  trace.predicted = argmax_scores(trace.scores);
  if (sat) *sat += local;
  return trace;
}

// Two host-visible buffer slots used alternately: the host fills one while
// the datapath consumes the other. Illegal transitions throw.
class BatchBuffers {
 public:
  enum class State { Empty, Filled, Running, Done };

  void host_fill(std::size_t slot, std::vector<std::vector<Sample8>> images) {
    Slot& s = at(slot);
    if (slot != next_fill_) throw std::logic_error("host filled slots out of order");
    if (s.state != State::Empty) throw std::logic_error("host overwrote a slot still in use");
    s.images = std::move(images);
    s.results.clear();
    s.state = State::Filled;
    s.start = true;
    s.done = false;
    next_fill_ ^= 1;
  }

  const std::vector<std::vector<Sample8>>& pl_take(std::size_t slot) {
    Slot& s = at(slot);
    if (slot != next_run_) throw std::logic_error("datapath consumed slots out of order");
    if (!s.start || s.state != State::Filled) throw std::logic_error("datapath started without a start signal");
    s.start = false;
    s.state = State::Running;
    return s.images;
  }

  void pl_finish(std::size_t slot, std::vector<int> results) {
    Slot& s = at(slot);
    if (s.state != State::Running) throw std::logic_error("datapath finished a slot it was not running");
    s.results = std::move(results);
    s.state = State::Done;
    s.done = true;
    next_run_ ^= 1;
  }

  std::vector<int> host_collect(std::size_t slot) {
    Slot& s = at(slot);
    if (!s.done || s.state != State::Done) throw std::logic_error("host read a slot whose done flag is unset");
    s.done = false;
    s.state = State::Empty;
    s.images.clear();
    return std::move(s.results);
  }

  State state(std::size_t slot) const { return at(slot).state; }
  bool done(std::size_t slot) const { return at(slot).done; }

 private:
  struct Slot {
    std::vector<std::vector<Sample8>> images;
    std::vector<int> results;
    State state = State::Empty;
    bool start = false;
    bool done = false;
  };

  Slot& at(std::size_t slot) {
    if (slot > 1) throw std::out_of_range("buffer slot");
    return slots_[slot];
  }
  const Slot& at(std::size_t slot) const {
    if (slot > 1) throw std::out_of_range("buffer slot");
    return slots_[slot];
  }

  std::array<Slot, 2> slots_{};
  std::size_t next_fill_ = 0;
  std::size_t next_run_ = 0;
};

struct BatchResult {
  std::vector<int> classes;
  CycleReport report;
  SaturationCounters saturation;
  std::vector<ForwardTrace> traces;  // filled when requested
};

struct RunOptions {
  SimOptions sim;
  bool keep_traces = false;
};

// Runs one image through every tile; returns the class and the image's cycle cost.
inline ForwardTrace run_image(const TilePipeline& pl, std::span<const Sample8> image, const SimOptions& opt,
                              SaturationCounters* sat, std::uint64_t& cycles) {
  ForwardTrace trace;
  std::vector<Sample8> signal(image.begin(), image.end());
  cycles = 0;
  for (const auto& tile : pl.tiles) {
    TileOutput out = simulate_tile(tile, signal, opt, sat);
    cycles = std::max(cycles, out.cycles);
    if (tile.output_tile) {
      trace.scores = std::move(out.scores);
    } else {
      trace.hidden.push_back(out.activations);
      signal = std::move(out.activations);
    }
  }
  trace.predicted = argmax_scores(trace.scores);
  return trace;
}

inline BatchResult run_batch(const TilePipeline& pl, const std::vector<std::vector<Sample8>>& images,
                             std::size_t batch_size = kDefaultBatchSize, RunOptions options = {}) {
  if (images.empty()) throw std::invalid_argument("run_batch: empty batch");
  if (batch_size == 0) throw std::invalid_argument("run_batch: batch size must be positive");
  if (pl.tiles.empty() || !pl.tiles.back().output_tile) throw std::invalid_argument("run_batch: malformed pipeline");
  for (const auto& img : images)
    if (img.size() != pl.tiles.front().config.n_inputs) throw std::invalid_argument("run_batch: image dimension mismatch");
  options.sim.overhead_cycles = pl.overhead_cycles;

  BatchResult result;
  CycleReport& rep = result.report;
  rep.overhead_cycles = static_cast<std::uint64_t>(pl.overhead_cycles);
  rep.batch_size = batch_size;
  rep.n_images = images.size();
  rep.cycles_per_input = cycles_per_input(pl);
  for (const auto& t : pl.tiles) {
    rep.per_tile_accumulation_cycles.push_back(t.config.accumulation_cycles());
    rep.per_tile_cycles.push_back(tile_cycles(t, pl.overhead_cycles));
  }

  auto batch_of = [&](std::size_t b) {
    const std::size_t start = b * batch_size;
    const std::size_t end = std::min(images.size(), start + batch_size);
    return std::vector<std::vector<Sample8>>(images.begin() + static_cast<std::ptrdiff_t>(start),
                                             images.begin() + static_cast<std::ptrdiff_t>(end));
  };
  const std::size_t n_batches = (images.size() + batch_size - 1) / batch_size;
  rep.n_batches = n_batches;

  BatchBuffers buffers;
  buffers.host_fill(0, batch_of(0));
  for (std::size_t b = 0; b < n_batches; ++b) {
    const std::size_t slot = b % 2;
    const auto& batch = buffers.pl_take(slot);
    if (b + 1 < n_batches) buffers.host_fill(slot ^ 1, batch_of(b + 1));

    std::vector<int> classes;
    std::size_t cnt_digit = 0;
    for (const auto& img : batch) {
      std::uint64_t cycles = 0;
      ForwardTrace trace = run_image(pl, img, options.sim, &result.saturation, cycles);
      rep.total_cycles += cycles;
      classes.push_back(trace.predicted);
      if (options.keep_traces) result.traces.push_back(std::move(trace));
      ++cnt_digit;
    }
    if (cnt_digit == batch.size()) ++rep.fin_events;
    buffers.pl_finish(slot, std::move(classes));
    const auto done = buffers.host_collect(slot);
    result.classes.insert(result.classes.end(), done.begin(), done.end());
  }
  if (rep.total_cycles != rep.cycles_per_input * rep.n_images)
    throw std::logic_error("cycle accounting disagrees with the analytic cycle count");
  return result;
}

inline std::vector<std::vector<Sample8>> dataset_codes(const Dataset& ds) {
  std::vector<std::vector<Sample8>> out;
  out.reserve(ds.size());
  for (std::size_t i = 0; i < ds.size(); ++i) out.push_back(ds.sample_codes(i));
  return out;
}

// MCR of the fixed-point network through the reference forward.
inline double evaluate_mcr(const QuantizedModel& qm, const Dataset& ds) {
  if (ds.size() == 0) return 0.0;
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < ds.size(); ++i)
    if (reference_forward(qm, ds.sample_codes(i)).predicted != ds.labels[i]) ++wrong;
  return static_cast<double>(wrong) / static_cast<double>(ds.size());
}

}  // namespace fxdnn
