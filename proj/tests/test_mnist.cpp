#include <gtest/gtest.h>

#include "fxdnn/hwsim.hpp"
#include "fxdnn/idx.hpp"
#include "fxdnn/quant.hpp"
#include "fxdnn/train.hpp"
#include "oracles.hpp"

using namespace fxdnn;

TEST(Mnist, RetrainingBeatsDirectQuantization) {
  if (!fxdnn::testing::mnist_available()) GTEST_SKIP() << "MNIST files not found";
  const auto dir = fxdnn::testing::mnist_dir();
  const Dataset train = load_idx(dir / "train-images-idx3-ubyte", dir / "train-labels-idx1-ubyte").head(10000);
  const Dataset test = load_idx(dir / "t10k-images-idx3-ubyte", dir / "t10k-labels-idx1-ubyte");

  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.rng_seed = 2;
  const FloatModel fm = train_sgd(init_float_model(std::vector<std::size_t>{784, 64, 64, 10}, 1), train, cfg);
  cfg.epochs = 3;
  cfg.rng_seed = 3;
  const QuantizedModel direct = quantize_network(fm, QuantConfig{});
  const QuantizedModel retrained = retrain_quantized(fm, QuantConfig{}, train, cfg).first;

  const double f = evaluate_mcr(fm, test);
  const double d = evaluate_mcr(direct, test);
  const double r = evaluate_mcr(retrained, test);
  RecordProperty("float_mcr", std::to_string(f));
  RecordProperty("direct_mcr", std::to_string(d));
  RecordProperty("retrained_mcr", std::to_string(r));
  EXPECT_LT(f, 0.08);
  EXPECT_LT(r, d) << "float " << f << " direct " << d << " retrained " << r;
}
