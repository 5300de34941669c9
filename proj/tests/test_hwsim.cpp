#include <gtest/gtest.h>

#include <random>
#include <vector>

#include "fxdnn/hwsim.hpp"
#include "fxdnn/perf.hpp"
#include "oracles.hpp"

using namespace fxdnn;
using fxdnn::testing::random_image;
using fxdnn::testing::random_quantized_model;

namespace {

const std::vector<std::size_t> kMnistDims{784, 1022, 1022, 1022, 10};

QuantizedModel zero_model(const std::vector<std::size_t>& dims) {
  std::mt19937_64 rng(0);
  QuantizedModel qm = random_quantized_model(dims, rng);
  for (auto& l : qm.layers) {
    std::fill(l.codes.begin(), l.codes.end(), 0);
    std::fill(l.biases.begin(), l.biases.end(), 0);
  }
  return qm;
}

}  // namespace

TEST(BuildPipeline, MnistTopologyHalvesPus) {
  std::mt19937_64 rng(1);
  const TilePipeline pl = build_pipeline(random_quantized_model(kMnistDims, rng), 2);
  ASSERT_EQ(pl.tiles.size(), 4u);
  for (int t = 0; t < 3; ++t) {
    EXPECT_EQ(pl.tiles[t].config.n_pus, 511u);
    EXPECT_EQ(pl.tiles[t].config.nodes_per_pu, 2u);
    EXPECT_FALSE(pl.tiles[t].output_tile);
  }
  EXPECT_EQ(pl.tiles[3].config.n_pus, 10u);
  EXPECT_EQ(pl.tiles[3].config.nodes_per_pu, 1u);
  EXPECT_TRUE(pl.tiles[3].output_tile);
}

TEST(BuildPipeline, ToyAndUnhalved) {
  std::mt19937_64 rng(2);
  const std::vector<std::size_t> toy{4, 2, 2};
  const TilePipeline pl = build_pipeline(random_quantized_model(toy, rng), 2);
  EXPECT_EQ(pl.tiles[0].config.n_pus, 1u);
  EXPECT_EQ(pl.tiles[0].config.n_nodes, 2u);
  const TilePipeline full = build_pipeline(random_quantized_model(kMnistDims, rng), 1);
  for (int t = 0; t < 3; ++t) EXPECT_EQ(full.tiles[t].config.n_pus, 1022u);
}

TEST(SimulateTile, ZeroModelOutputsSigmoidOfZero) {
  const TilePipeline pl = build_pipeline(zero_model({6, 5, 3}), 2);
  const auto out = simulate_tile(pl.tiles[0], std::vector<Sample8>(6, Sample8{200}));
  ASSERT_EQ(out.activations.size(), 5u);
  for (auto s : out.activations) EXPECT_EQ(s.code, 128);
}

TEST(SimulateTile, HandTracedSingleNode) {
  QuantizedModel qm = zero_model({1, 1, 1});
  auto& l = qm.layers[0];
  l.codes = {3};
  l.delta = 1.0 / 16.0;  // factor 2^-8
  l.scale = DeltaScale::from_delta(l.delta);
  const TilePipeline pl = build_pipeline(qm, 2);
  SaturationCounters sat;
  const auto out = simulate_tile(pl.tiles[0], std::vector<Sample8>{Sample8{100}}, {}, &sat);
  // acc = 300, 300 / 256 = 1.17 -> code 1, sigma(1/16) * 256 = 131.998 -> 132
  ASSERT_EQ(out.activations.size(), 1u);
  EXPECT_EQ(out.activations[0].code, 132);
  EXPECT_EQ(out.activations[0], build_sigmoid_table().entry(1));
  // one PU, two phases (second is a padded dummy node)
  EXPECT_EQ(out.accumulation_cycles, 2u);
  EXPECT_EQ(sat.accumulator, 0u);
}

TEST(SimulateTile, WideHiddenTileAccumulationCycles) {
  std::mt19937_64 rng(3);
  const TilePipeline pl = build_pipeline(random_quantized_model({1022, 1022, 10}, rng), 2);
  const auto out = simulate_tile(pl.tiles[0], random_image(1022, rng));
  EXPECT_EQ(out.accumulation_cycles, 2044u);
  EXPECT_EQ(out.cycles, 2044u + kDefaultOverheadCycles);
  EXPECT_THROW(simulate_tile(pl.tiles[0], random_image(1021, rng)), std::invalid_argument);
}

TEST(SimulateTile, OddNodeCountPadsWithDummy) {
  std::mt19937_64 rng(4);
  const QuantizedModel qm = random_quantized_model({9, 7, 3}, rng);
  const TilePipeline pl = build_pipeline(qm, 2);
  EXPECT_EQ(pl.tiles[0].config.n_pus, 4u);
  const auto img = random_image(9, rng);
  const auto out = simulate_tile(pl.tiles[0], img);
  EXPECT_EQ(out.accumulation_cycles, 18u);
  EXPECT_EQ(out.activations, reference_forward(qm, img).hidden[0]);
}

TEST(SimulateTile, PuVisitOrderDoesNotMatter) {
  std::mt19937_64 rng(5);
  const QuantizedModel qm = random_quantized_model({30, 17, 5}, rng);
  const TilePipeline pl = build_pipeline(qm, 2);
  for (int t = 0; t < 20; ++t) {
    const auto img = random_image(30, rng);
    SimOptions shuffled;
    shuffled.pu_shuffle_seed = static_cast<std::uint64_t>(t);
    SaturationCounters a, b;
    const auto x = simulate_tile(pl.tiles[0], img, {}, &a);
    const auto y = simulate_tile(pl.tiles[0], img, shuffled, &b);
    EXPECT_EQ(x.activations, y.activations);
    EXPECT_EQ(a, b);
  }
}

TEST(ReferenceForward, ZeroModelPicksClassZero) {
  const QuantizedModel qm = zero_model({4, 3, 5});
  const auto t = reference_forward(qm, std::vector<Sample8>(4, Sample8{9}));
  EXPECT_EQ(t.predicted, 0);
  for (auto s : t.scores) EXPECT_EQ(s.code, 0);
  EXPECT_THROW(reference_forward(qm, std::vector<Sample8>(3)), std::invalid_argument);
}

TEST(ReferenceForward, PositiveWeightScoreMonotoneInPixel) {
  // single layer, positive 8-bit weights: raising any pixel can only raise the score
  std::mt19937_64 rng(6);
  QuantizedModel qm = random_quantized_model({12, 1}, rng);
  std::uniform_int_distribution<int> pos(0, 127);
  for (auto& c : qm.layers[0].codes) c = static_cast<std::int8_t>(pos(rng));
  for (int t = 0; t < 500; ++t) {
    auto img = random_image(12, rng);
    const int before = reference_forward(qm, img).scores[0].code;
    const std::size_t p = static_cast<std::size_t>(t) % 12;
    img[p].code = static_cast<std::uint8_t>(std::min(255, img[p].code + 1 + t % 50));
    EXPECT_GE(reference_forward(qm, img).scores[0].code, before);
  }
}

TEST(RunBatch, MatchesReferenceOnRandomModels) {
  std::mt19937_64 rng(7);
  for (int t = 0; t < 150; ++t) {
    const auto dims = fxdnn::testing::random_dims(rng, 32);
    const QuantizedModel qm = random_quantized_model(dims, rng);
    const TilePipeline pl = build_pipeline(qm, 1 + t % 3);
    std::vector<std::vector<Sample8>> imgs;
    for (int i = 0; i < 3; ++i) imgs.push_back(random_image(dims.front(), rng));
    RunOptions opt;
    opt.keep_traces = true;
    const BatchResult res = run_batch(pl, imgs, 2, opt);
    SaturationCounters ref_sat;
    for (std::size_t i = 0; i < imgs.size(); ++i) {
      const ForwardTrace ref = reference_forward(qm, imgs[i], &ref_sat);
      ASSERT_EQ(ref, res.traces[i]);
      ASSERT_EQ(ref.predicted, res.classes[i]);
    }
    EXPECT_EQ(ref_sat, res.saturation);
  }
}

TEST(RunBatch, MnistCycleCounts) {
  std::mt19937_64 rng(8);
  const TilePipeline pl = build_pipeline(random_quantized_model(kMnistDims, rng), 2);
  const auto one = run_batch(pl, {random_image(784, rng)});
  EXPECT_EQ(one.report.cycles_per_input, 2063u);
  EXPECT_EQ(one.report.total_cycles, 2063u);
  EXPECT_EQ(one.report.per_tile_accumulation_cycles, (std::vector<std::uint64_t>{1568, 2044, 2044, 1022}));
  EXPECT_EQ(cycles_per_input(pl), analytic_cycles_per_input(kMnistDims, 2, kDefaultOverheadCycles));
}

TEST(RunBatch, CycleFormulaAcrossConfigurations) {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 100; ++t) {
    const auto dims = fxdnn::testing::random_dims(rng, 50, 5);
    const std::size_t npp = 1 + static_cast<std::size_t>(t % 4);
    const int overhead = t % 25;
    const TilePipeline pl = build_pipeline(random_quantized_model(dims, rng), npp, overhead);
    const auto res = run_batch(pl, {random_image(dims.front(), rng), random_image(dims.front(), rng)}, 1);
    EXPECT_EQ(res.report.cycles_per_input, analytic_cycles_per_input(dims, npp, overhead));
    EXPECT_EQ(res.report.total_cycles, 2 * res.report.cycles_per_input);
    EXPECT_EQ(res.report.n_batches, 2u);
    EXPECT_EQ(res.report.fin_events, 2u);
  }
}

TEST(RunBatch, PartialLastBatchAndDeterminism) {
  std::mt19937_64 rng(10);
  const QuantizedModel qm = random_quantized_model({16, 8, 4}, rng);
  const TilePipeline pl = build_pipeline(qm, 2);
  const auto img = random_image(16, rng);
  const std::vector<std::vector<Sample8>> same(250, img);
  const auto res = run_batch(pl, same, 100);
  EXPECT_EQ(res.report.n_batches, 3u);
  EXPECT_EQ(res.report.fin_events, 3u);
  EXPECT_EQ(res.classes.size(), 250u);
  for (int c : res.classes) EXPECT_EQ(c, res.classes.front());
  EXPECT_THROW(run_batch(pl, {}), std::invalid_argument);
  EXPECT_THROW(run_batch(pl, {random_image(15, rng)}), std::invalid_argument);
}

TEST(RunBatch, SaturationIsCountedNotHidden) {
  QuantizedModel qm = zero_model({200, 2, 2});
  auto& l0 = qm.layers[0];
  std::fill(l0.codes.begin(), l0.codes.end(), 3);
  l0.delta = 1.0;
  l0.scale = DeltaScale::from_delta(1.0);
  const TilePipeline pl = build_pipeline(qm, 2);
  const std::vector<std::vector<Sample8>> imgs{std::vector<Sample8>(200, Sample8{255})};
  const auto res = run_batch(pl, imgs);
  SaturationCounters ref;
  reference_forward(qm, imgs[0], &ref);
  EXPECT_GT(res.saturation.accumulator, 0u);
  EXPECT_GT(res.saturation.rescale, 0u);
  EXPECT_EQ(res.saturation, ref);
}

TEST(RunBatch, OutputTileHasWideAccumulator) {
  // 8-bit codes over 128 saturated inputs sum to 4.1M units, far past int16
  QuantizedModel qm = zero_model({128, 2});
  auto& out = qm.layers[0];
  out.bits = 8;
  std::fill(out.codes.begin(), out.codes.end(), 127);
  std::fill(out.codes.begin() + 128, out.codes.end(), 60);
  out.delta = 1e-4;
  out.scale = DeltaScale::from_delta(out.delta, kScoreFracBits);
  const TilePipeline pl = build_pipeline(qm, 2);
  EXPECT_FALSE(pl.tiles[0].select_datapath);
  const std::vector<std::vector<Sample8>> imgs{std::vector<Sample8>(128, Sample8{255})};
  RunOptions opt;
  opt.keep_traces = true;
  const auto res = run_batch(pl, imgs, 1, opt);
  SaturationCounters ref;
  EXPECT_EQ(reference_forward(qm, imgs[0], &ref), res.traces[0]);
  EXPECT_EQ(res.saturation.accumulator, 0u);
  EXPECT_EQ(res.saturation, ref);
  // S5.2 code = units * delta / 64: 4145280 -> 6.48, 1958400 -> 3.06
  EXPECT_EQ(res.traces[0].scores[0].code, 6);
  EXPECT_EQ(res.traces[0].scores[1].code, 3);
  EXPECT_EQ(res.classes[0], 0);
}

TEST(BatchBuffers, ProtocolViolationsThrow) {
  BatchBuffers b;
  EXPECT_THROW(b.pl_take(0), std::logic_error);  // no start signal
  b.host_fill(0, {});
  EXPECT_THROW(b.host_fill(0, {}), std::logic_error);  // slots alternate
  EXPECT_THROW(b.host_collect(0), std::logic_error);   // done not set
  b.pl_take(0);
  b.host_fill(1, {});
  EXPECT_THROW(b.host_collect(0), std::logic_error);  // still running
  EXPECT_THROW(b.pl_take(1), std::logic_error);       // slot 0 not finished
  b.pl_finish(0, {1, 2});
  EXPECT_TRUE(b.done(0));
  EXPECT_EQ(b.host_collect(0), (std::vector<int>{1, 2}));
  EXPECT_FALSE(b.done(0));
  EXPECT_THROW(b.host_collect(0), std::logic_error);
  b.pl_take(1);
  EXPECT_THROW(b.host_fill(1, {}), std::logic_error);  // slot 1 in use
  b.host_fill(0, {});
}
