// Command-line front end: train -> quantize -> retrain -> simulate / verify,
// plus the analytic estimate. Kept in a header so tests can drive it in-process.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fxdnn/fxp.hpp"
#include "fxdnn/hwsim.hpp"
#include "fxdnn/idx.hpp"
#include "fxdnn/model.hpp"
#include "fxdnn/model_io.hpp"
#include "fxdnn/perf.hpp"
#include "fxdnn/quant.hpp"
#include "fxdnn/train.hpp"

namespace fxdnn::cli {

enum ExitCode : int {
  kOk = 0,
  kFailure = 1,
  kUsage = 2,
  kFormat = 3,
  kCorruption = 4,
  kUnsupportedVersion = 5,
  kDegenerate = 6,
  kMismatch = 7,
};

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// "key = value" lines, '#' comments. Keys are option names without dashes.
inline std::vector<std::string> read_config_args(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw UsageError("cannot open config file " + path);
  std::vector<std::string> args;
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    const auto e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string{} : s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line.substr(0, line.find('#')));
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty()) throw UsageError(path + ":" + std::to_string(lineno) + ": empty key");
    args.push_back("--" + key);
    args.push_back(value);
  }
  return args;
}

struct TrainFlags {
  std::string topology = "784-128-128-10";
  int minibatch = 100;
  double lr = 0.1;
  double momentum = 0.9;
  int epochs = 20;
  double keep = 0.8;
  std::size_t limit = 0;
};

inline void add_train_flags(CLI::App* cmd, TrainFlags& f, bool with_topology) {
  if (with_topology) cmd->add_option("--topology", f.topology, "layer sizes, e.g. 784-128-128-10");
  cmd->add_option("--minibatch", f.minibatch, "minibatch size")->check(CLI::PositiveNumber);
  cmd->add_option("--lr", f.lr, "learning rate")->check(CLI::NonNegativeNumber);
  cmd->add_option("--momentum", f.momentum, "momentum in [0, 1)");
  cmd->add_option("--epochs", f.epochs, "training epochs")->check(CLI::NonNegativeNumber);
  cmd->add_option("--keep", f.keep, "dropout keep probability for hidden layers");
  cmd->add_option("--limit", f.limit, "use only the first N training items (0 = all)");
}

inline TrainConfig to_train_config(const TrainFlags& f, std::uint64_t seed) {
  TrainConfig cfg;
  cfg.minibatch = f.minibatch;
  cfg.learning_rate = f.lr;
  cfg.momentum = f.momentum;
  cfg.epochs = f.epochs;
  cfg.dropout_keep = {f.keep};
  cfg.rng_seed = seed;
  return cfg;
}

inline Dataset load_dataset(const std::string& images, const std::string& labels, std::size_t limit) {
  Dataset ds = labels.empty() ? load_idx_images(images) : load_idx(images, labels);
  return limit > 0 ? ds.head(limit) : ds;
}

inline void check_topology(const std::vector<std::size_t>& model_dims, const std::string& topology) {
  if (topology.empty()) return;
  if (parse_topology(topology) != model_dims)
    throw UsageError("topology " + topology + " does not match model " + format_topology(model_dims));
}

inline void check_dataset_dim(const std::vector<std::size_t>& model_dims, const Dataset& ds) {
  if (ds.dim() != model_dims.front())
    throw UsageError("dataset items have " + std::to_string(ds.dim()) + " values, model expects " +
                     std::to_string(model_dims.front()));
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::ostringstream os;
  for (std::size_t i = 0; i < v.size(); ++i) os << (i ? "," : "") << v[i];
  return os.str();
}

inline void print_cycle_report(std::ostream& out, const CycleReport& r) {
  out << "cycles_per_input: " << r.cycles_per_input << '\n'
      << "total_cycles: " << r.total_cycles << '\n'
      << "per_tile_cycles: " << join(r.per_tile_cycles) << '\n'
      << "per_tile_accumulation_cycles: " << join(r.per_tile_accumulation_cycles) << '\n'
      << "overhead_cycles: " << r.overhead_cycles << '\n'
      << "batch_size: " << r.batch_size << '\n'
      << "batches: " << r.n_batches << '\n'
      << "fin_events: " << r.fin_events << '\n';
}

inline void print_perf_report(std::ostream& out, const PerfReport& r) {
  out << std::setprecision(10) << "topology: " << format_topology(r.layer_dims) << '\n'
      << "weights: " << r.n_weights << '\n'
      << "weight_storage_bits: " << r.storage_bits << '\n'
      << "weight_storage_mbytes: " << static_cast<double>(r.storage_bits) / 8e6 << '\n'
      << "bias_storage_bits: " << r.bias_bits << '\n'
      << "cycles_per_input: " << r.cycles_per_input << '\n'
      << "clock_hz: " << r.clock_hz << '\n'
      << "throughput_per_sec: " << std::fixed << std::setprecision(1) << r.throughput_per_sec << '\n'
      << "throughput_k_per_sec: " << std::setprecision(1) << r.throughput_per_sec / 1e3 << '\n'
      << "rate_basis_per_sec: " << std::setprecision(1) << r.rate_basis_per_sec << '\n'
      << std::defaultfloat << std::setprecision(10)
      << "dram_bandwidth_bps_if_offchip: " << r.dram_bandwidth_bps_if_offchip << '\n'
      << "power_w: " << r.power_w << '\n'
      << "energy_per_inference_j: " << r.energy_per_inference_j << '\n'
      << std::fixed << std::setprecision(2) << "energy_per_inference_uj: " << r.energy_per_inference_j * 1e6 << '\n'
      << std::defaultfloat;
}

struct SimFlags {
  std::string model;
  std::string images;
  std::string labels;
  std::string topology;
  std::size_t batch = kDefaultBatchSize;
  std::size_t nodes_per_pu = 2;
  int overhead = kDefaultOverheadCycles;
  double clock_hz = 172e6;
  std::size_t limit = 0;
  std::string predictions;
};

inline void add_sim_flags(CLI::App* cmd, SimFlags& f) {
  cmd->add_option("--model", f.model, "quantized model file")->required();
  cmd->add_option("--images", f.images, "IDX image file")->required();
  cmd->add_option("--labels", f.labels, "IDX label file");
  cmd->add_option("--topology", f.topology, "expected topology (checked against the model)");
  cmd->add_option("--nodes-per-pu", f.nodes_per_pu, "network nodes served by one PU")->check(CLI::PositiveNumber);
  cmd->add_option("--overhead", f.overhead, "fixed overhead cycles per input")->check(CLI::NonNegativeNumber);
  cmd->add_option("--limit", f.limit, "use only the first N items (0 = all)");
}

inline int run(const std::vector<std::string>& raw_args, std::ostream& out, std::ostream& err) {
  // Config-file values go first so explicit flags (parsed later) win.
  std::vector<std::string> args;
  std::vector<std::string> file_args;
  try {
    for (std::size_t i = 0; i < raw_args.size(); ++i) {
      const std::string& a = raw_args[i];
      if (a == "--config") {
        if (i + 1 >= raw_args.size()) throw UsageError("--config needs a path");
        file_args = read_config_args(raw_args[++i]);
      } else if (a.rfind("--config=", 0) == 0) {
        file_args = read_config_args(a.substr(9));
      } else {
        args.push_back(a);
      }
    }
  } catch (const UsageError& e) {
    err << "error: usage: " << e.what() << '\n';
    return kUsage;
  }
  if (!file_args.empty()) {
    static const std::vector<std::string> kCommands{"train", "quantize", "retrain", "simulate", "estimate", "verify"};
    auto at = std::find_first_of(args.begin(), args.end(), kCommands.begin(), kCommands.end());
    args.insert(at == args.end() ? args.begin() : at + 1, file_args.begin(), file_args.end());
  }

  CLI::App app{"Fixed-point DNN quantization toolkit and accelerator simulator", "fxdnn"};
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.require_subcommand(1);
  std::uint64_t seed = 1;
  app.add_option("--seed", seed, "seed for every random choice");

  TrainFlags tf;
  std::string train_images, train_labels, test_images, test_labels, train_out;
  auto* train = app.add_subcommand("train", "train a float MLP");
  train->add_option("--images", train_images, "IDX training images")->required();
  train->add_option("--labels", train_labels, "IDX training labels")->required();
  train->add_option("--test-images", test_images, "IDX test images");
  train->add_option("--test-labels", test_labels, "IDX test labels");
  train->add_option("--out", train_out, "float model output")->required();
  train->add_option("--seed", seed, "seed for every random choice");
  add_train_flags(train, tf, true);

  std::string q_in, q_out;
  int hidden_bits = 3, output_bits = 8, lloyd_iters = 100;
  double lloyd_tol = 1e-8;
  auto add_quant_flags = [&](CLI::App* cmd) {
    cmd->add_option("--hidden-bits", hidden_bits, "weight bits for input/hidden layers");
    cmd->add_option("--output-bits", output_bits, "weight bits for the output layer");
    cmd->add_option("--lloyd-iters", lloyd_iters, "quantizer iteration cap");
    cmd->add_option("--lloyd-tol", lloyd_tol, "quantizer relative step tolerance");
  };
  auto* quantize = app.add_subcommand("quantize", "quantize a float model");
  quantize->add_option("--in", q_in, "float model")->required();
  quantize->add_option("--out", q_out, "quantized model output")->required();
  add_quant_flags(quantize);

  TrainFlags rf;
  rf.epochs = 5;
  std::string r_in, r_images, r_labels, r_out, r_shadow, r_topology;
  auto* retrain = app.add_subcommand("retrain", "retrain with quantized weights");
  retrain->add_option("--in", r_in, "pre-trained float model")->required();
  retrain->add_option("--images", r_images, "IDX training images")->required();
  retrain->add_option("--labels", r_labels, "IDX training labels")->required();
  retrain->add_option("--out", r_out, "quantized model output")->required();
  retrain->add_option("--shadow-out", r_shadow, "final shadow (float) model output");
  retrain->add_option("--topology", r_topology, "expected topology (checked against the model)");
  retrain->add_option("--seed", seed, "seed for every random choice");
  add_train_flags(retrain, rf, false);
  add_quant_flags(retrain);

  SimFlags sf;
  auto* simulate = app.add_subcommand("simulate", "run the cycle-accounted datapath simulation");
  add_sim_flags(simulate, sf);
  simulate->add_option("--batch", sf.batch, "images per batch")->check(CLI::PositiveNumber);
  simulate->add_option("--clock-hz", sf.clock_hz, "clock frequency")->check(CLI::PositiveNumber);
  simulate->add_option("--predictions", sf.predictions, "write one predicted class per line");

  PerfInputs pi;
  pi.layer_dims.clear();
  std::string e_topology = "784-1022-1022-1022-10";
  auto* estimate = app.add_subcommand("estimate", "analytic storage/throughput/bandwidth/energy");
  estimate->add_option("--topology", e_topology, "layer sizes");
  estimate->add_option("--hidden-bits", pi.hidden_bits, "weight bits for input/hidden layers");
  estimate->add_option("--output-bits", pi.output_bits, "weight bits for the output layer");
  estimate->add_option("--clock-hz", pi.clock_hz, "clock frequency")->check(CLI::PositiveNumber);
  estimate->add_option("--power-w", pi.power_w, "datapath power in watts")->check(CLI::NonNegativeNumber);
  estimate->add_option("--measured-throughput", pi.measured_throughput,
                       "measured inferences/s used for bandwidth and energy");
  estimate->add_option("--nodes-per-pu", pi.nodes_per_pu, "network nodes served by one PU")
      ->check(CLI::PositiveNumber);
  estimate->add_option("--overhead", pi.overhead_cycles, "fixed overhead cycles per input");

  SimFlags vf;
  auto* verify = app.add_subcommand("verify", "check simulator against the reference forward");
  add_sim_flags(verify, vf);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& e) {
    std::string msg = e.what();
    for (auto& c : msg)
      if (c == '\n') c = ' ';
    err << "error: usage: " << msg << '\n';
    return kUsage;
  }

  try {
    if (*train) {
      const auto dims = parse_topology(tf.topology);
      const Dataset ds = load_dataset(train_images, train_labels, tf.limit);
      check_dataset_dim(dims, ds);
      TrainLog log;
      const FloatModel fm = train_sgd(init_float_model(dims, seed), ds, to_train_config(tf, seed + 1), &log);
      save_model(train_out, fm);
      out << std::setprecision(6) << "topology: " << format_topology(dims) << '\n'
          << "train_items: " << ds.size() << '\n'
          << "epochs: " << tf.epochs << '\n';
      if (!log.epoch_loss.empty()) out << "final_epoch_loss: " << log.epoch_loss.back() << '\n';
      out << "train_mcr: " << evaluate_mcr(fm, ds) << '\n';
      if (!test_images.empty()) {
        const Dataset test = load_dataset(test_images, test_labels, 0);
        check_dataset_dim(dims, test);
        out << "test_mcr: " << evaluate_mcr(fm, test) << '\n';
      }
      out << "model: " << train_out << '\n';
    } else if (*quantize) {
      const FloatModel fm = load_float_model(q_in);
      QuantConfig qc = QuantConfig::from_bits(hidden_bits, output_bits);
      qc.lloyd_iters = lloyd_iters;
      qc.lloyd_tol = lloyd_tol;
      const QuantizedModel qm = quantize_network(fm, qc);
      save_model(q_out, qm);
      out << "topology: " << format_topology(qm.layer_dims) << '\n';
      for (std::size_t l = 0; l < qm.num_layers(); ++l)
        out << std::setprecision(10) << "layer " << l << ": bits=" << qm.layers[l].bits
            << " delta=" << qm.layers[l].delta << " mantissa=" << qm.layers[l].scale.mantissa()
            << " shift=" << qm.layers[l].scale.shift() << '\n';
      out << "model: " << q_out << '\n';
    } else if (*retrain) {
      const FloatModel fm = load_float_model(r_in);
      check_topology(fm.layer_dims, r_topology);
      const Dataset ds = load_dataset(r_images, r_labels, rf.limit);
      check_dataset_dim(fm.layer_dims, ds);
      QuantConfig qc = QuantConfig::from_bits(hidden_bits, output_bits);
      qc.lloyd_iters = lloyd_iters;
      qc.lloyd_tol = lloyd_tol;
      const auto [qm, shadow] = retrain_quantized(fm, qc, ds, to_train_config(rf, seed), nullptr);
      save_model(r_out, qm);
      if (!r_shadow.empty()) save_model(r_shadow, shadow);
      out << std::setprecision(6) << "topology: " << format_topology(qm.layer_dims) << '\n'
          << "train_items: " << ds.size() << '\n'
          << "epochs: " << rf.epochs << '\n'
          << "train_mcr_fixed_point: " << evaluate_mcr(qm, ds) << '\n'
          << "model: " << r_out << '\n';
    } else if (*simulate || *verify) {
      const SimFlags& f = *simulate ? sf : vf;
      const QuantizedModel qm = load_quantized_model(f.model);
      check_topology(qm.layer_dims, f.topology);
      const Dataset ds = load_dataset(f.images, f.labels, f.limit);
      check_dataset_dim(qm.layer_dims, ds);
      const TilePipeline pl = build_pipeline(qm, f.nodes_per_pu, f.overhead);
      const auto images = dataset_codes(ds);
      RunOptions ro;
      ro.keep_traces = verify->parsed();
      const BatchResult res = run_batch(pl, images, *simulate ? f.batch : kDefaultBatchSize, ro);

      if (*simulate) {
        std::size_t wrong = 0;
        for (std::size_t i = 0; i < ds.size(); ++i) wrong += res.classes[i] != ds.labels[i];
        if (!f.predictions.empty()) {
          std::ofstream pred(f.predictions, std::ios::trunc);
          if (!pred) throw std::runtime_error("cannot write " + f.predictions);
          for (int c : res.classes) pred << c << '\n';
        }
        out << "images: " << ds.size() << '\n';
        if (!f.labels.empty())
          out << std::setprecision(10) << "mcr: " << static_cast<double>(wrong) / static_cast<double>(ds.size())
              << '\n';
        print_cycle_report(out, res.report);
        out << std::setprecision(10) << "clock_hz: " << f.clock_hz << '\n'
            << "throughput_per_sec: " << throughput(res.report.cycles_per_input, f.clock_hz) << '\n'
            << "datapath_seconds: " << static_cast<double>(res.report.total_cycles) / f.clock_hz << '\n'
            << "accumulator_saturations: " << res.saturation.accumulator << '\n'
            << "rescale_clips: " << res.saturation.rescale << '\n';
      } else {
        std::size_t mismatches = 0;
        SaturationCounters ref_sat;
        for (std::size_t i = 0; i < images.size(); ++i) {
          const ForwardTrace ref = reference_forward(qm, images[i], &ref_sat);
          if (!(ref == res.traces[i]) || ref.predicted != res.classes[i]) ++mismatches;
        }
        if (!(ref_sat == res.saturation)) ++mismatches;
        out << "verify: " << images.size() << " images, " << mismatches << " mismatches\n";
        if (mismatches != 0) {
          err << "error: mismatch: simulator disagrees with reference on " << mismatches << " items\n";
          return kMismatch;
        }
      }
    } else if (*estimate) {
      pi.layer_dims = parse_topology(e_topology);
      print_perf_report(out, make_perf_report(pi));
    }
  } catch (const UsageError& e) {
    err << "error: usage: " << e.what() << '\n';
    return kUsage;
  } catch (const FormatError& e) {
    err << "error: format: " << e.what() << '\n';
    return kFormat;
  } catch (const CorruptionError& e) {
    err << "error: corruption: " << e.what() << '\n';
    return kCorruption;
  } catch (const UnsupportedVersionError& e) {
    err << "error: unsupported-version: " << e.what() << '\n';
    return kUnsupportedVersion;
  } catch (const DegenerateInputError& e) {
    err << "error: degenerate-input: " << e.what() << '\n';
    return kDegenerate;
  } catch (const std::invalid_argument& e) {
    err << "error: usage: " << e.what() << '\n';
    return kUsage;
  } catch (const std::exception& e) {
    err << "error: failure: " << e.what() << '\n';
    return kFailure;
  }
  return kOk;
}

}  // namespace fxdnn::cli
