#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <numbers>

#include "layer_cases.hpp"
#include "pccnn/checkpoint.hpp"
#include "pccnn/training.hpp"
#include "test_util.hpp"

namespace pccnn {
namespace {

using testing::random_image;
using testing::TempDir;
using testing::tiny_architecture;

struct Terms {
  double total, joint, aux;
};

// Loss terms straight from hand-set logits, bypassing the networks.
Terms terms_from_logits(const Image& img, const Mask& mask, const Tensor<double>& combined, const Tensor<double>& cond,
                        double alpha) {
  const Image* ip = &img;
  const Mask* mp = &mask;
  const auto b = make_loss_batch<double>(std::span<const Image* const>(&ip, 1), std::span<const Mask* const>(&mp, 1),
                                         1, false);
  Tape<double> tape(false);
  const auto v = loss_terms(tape.leaf(combined), tape.leaf(cond), b, img.levels(), alpha);
  return {v.total.value()[0], v.joint.value()[0], v.aux.value()[0]};
}

// 2x2 binary image [[1, 0], [0, 1]]; (0,1) and (1,0) hidden, both level 0.
struct TwoByTwo {
  Image img{Signature{2, 2, 1, 2}};
  Mask mask{2, 2, std::vector<std::uint8_t>{1, 0, 0, 1}};
  // Layout [1, K, H, W]: plane k=0 then k=1.
  Tensor<double> combined{{1, 2, 2, 2}, std::vector<double>{5, 0, 2, -1, 0, 1, 0, 4}};
  Tensor<double> cond{{1, 2, 2, 2}, std::vector<double>{0, 1, 0, 0, 0, 1, 3, 0}};
  TwoByTwo() {
    img.set(0, 0, 0, 1);
    img.set(1, 1, 0, 1);
  }
};

TEST(Loss, HandComputedTwoByTwo) {
  const TwoByTwo c;
  // Hidden (0,1): combined (0, 1) -> log(1 + e); cond (1, 1) -> ln 2.
  // Hidden (1,0): combined (2, 0) -> log(1 + e^-2); cond (0, 3) -> log(1 + e^3).
  const double joint = (1.3132616875182228 + 0.1269280110429726) / 2;
  const double aux = (0.6931471805599453 + 3.048587351573742) / 2;
  const auto t = terms_from_logits(c.img, c.mask, c.combined, c.cond, 0.5);
  EXPECT_NEAR(t.joint, joint, 1e-12);
  EXPECT_NEAR(t.aux, aux, 1e-12);
  EXPECT_NEAR(t.total, 1.6555284823140197, 1e-12);
}

TEST(Loss, AlphaZeroIsExactlyJoint) {
  const TwoByTwo c;
  const auto t = terms_from_logits(c.img, c.mask, c.combined, c.cond, 0.0);
  EXPECT_EQ(t.total, t.joint);
  const Model<float> model(ArchitectureConfig::mnist_small(), 3);
  Rng rng(3);
  const Image img = random_image(Signature::mnist(), rng);
  const auto v = loss(model, img, generate_mask(28, 28, {}, 3), 0.0);
  EXPECT_EQ(v.total, v.joint);
}

TEST(Loss, MonotoneInAlpha) {
  const TwoByTwo c;
  double prev = -1;
  for (double alpha : {0.0, 0.1, 0.5, 1.0, 2.0, 10.0}) {
    const auto t = terms_from_logits(c.img, c.mask, c.combined, c.cond, alpha);
    ASSERT_GT(t.aux, 0);
    EXPECT_GT(t.total, prev);
    prev = t.total;
  }
}

TEST(Loss, SaturatedCorrectLogitsGiveZero) {
  Rng rng(4);
  const Signature sig{6, 5, 2, 3};
  const Image img = random_image(sig, rng);
  Tensor<double> logits({1, 6, 6, 5});
  for (int c = 0; c < 2; ++c)
    for (int y = 0; y < 6; ++y)
      for (int x = 0; x < 5; ++x)
        for (int k = 0; k < 3; ++k) logits.at(0, c * 3 + k, y, x) = img.at(y, x, c) == k ? 20.0 : -20.0;
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto t = terms_from_logits(img, generate_mask(6, 5, {}, seed), logits, logits, 1.0);
    EXPECT_LT(t.joint, 1e-15);
    EXPECT_GE(t.joint, 0);
  }
}

TEST(Loss, AllVisibleMaskIsZeroWithZeroGradients) {
  const auto cfg = tiny_architecture(4, 4, 1, 2);
  const auto params = init_params<double>(cfg, 5, 1.0);
  Rng rng(5);
  const Image img = random_image(cfg.signature, rng);
  const Mask all(4, 4, 1);
  const Image* ip = &img;
  const Mask* mp = &all;
  const auto b = make_loss_batch<double>(std::span<const Image* const>(&ip, 1), std::span<const Mask* const>(&mp, 1),
                                         1, false);
  Tape<double> tape;
  BoundParams<double> p(tape, params, true);
  const auto v = model_loss(tape, cfg, p, b, 1.0);
  EXPECT_EQ(v.total.value()[0], 0.0);
  EXPECT_EQ(v.joint.value()[0], 0.0);
  EXPECT_EQ(v.aux.value()[0], 0.0);
  for (const auto& g : tape.gradients(v.total, p.vars()))
    for (double x : g.data()) ASSERT_EQ(x, 0.0);
}

TEST(Loss, NonNegativeAndSignatureChecked) {
  const Model<float> model(ArchitectureConfig::mnist_small(), 6);
  Rng rng(6);
  for (int i = 0; i < 3; ++i) {
    const auto v = loss(model, random_image(Signature::mnist(), rng), generate_mask(28, 28, {}, i), 1.0);
    EXPECT_GE(v.joint, 0);
    EXPECT_GE(v.aux, 0);
    EXPECT_NEAR(v.total, v.joint + v.aux, 1e-6);
  }
  EXPECT_THROW(loss(model, Image(Signature{28, 28, 1, 4}), Mask(28, 28), 1.0), ValidationError);
}

TEST(Loss, AuxOverAllPixelsDiffersFromHiddenOnly) {
  const TwoByTwo c;
  const Image* ip = &c.img;
  const Mask* mp = &c.mask;
  const auto all = make_loss_batch<double>(std::span<const Image* const>(&ip, 1), std::span<const Mask* const>(&mp, 1),
                                           1, true);
  Tape<double> tape(false);
  const auto v = loss_terms(tape.leaf(c.combined), tape.leaf(c.cond), all, 2, 1.0);
  // Visible (0,0): cond (0, 0) at level 1 -> ln 2; visible (1,1): cond (0, 0) at level 1 -> ln 2.
  const double expected = (0.6931471805599453 + 3.048587351573742 + 2 * std::numbers::ln2) / 4;
  EXPECT_NEAR(v.aux.value()[0], expected, 1e-12);
}

TEST(Loss, BatchReductionAveragesImages) {
  // Two images with different hole sizes: batch loss is the mean of the
  // per-image means; an all-visible image counts as zero.
  const auto cfg = tiny_architecture(4, 4, 1, 2);
  const Model<double> model(cfg, init_params<double>(cfg, 7, 1.0));
  Rng rng(7);
  const Image a = random_image(cfg.signature, rng), b = random_image(cfg.signature, rng);
  const Mask ma = generate_mask(4, 4, {}, 1);
  Mask mb(4, 4, 1);
  mb.set(0, 0, 0);
  const Mask mc(4, 4, 1);
  const double la = loss(model, a, ma, 1.0).total, lb = loss(model, b, mb, 1.0).total;
  const std::vector<const Image*> imgs{&a, &b, &a};
  const std::vector<const Mask*> masks{&ma, &mb, &mc};
  const auto batch = make_loss_batch<double>(imgs, masks, 3, false);
  Tape<double> tape(false);
  BoundParams<double> p(tape, model.params(), false);
  EXPECT_NEAR(model_loss(tape, cfg, p, batch, 1.0).total.value()[0], (la + lb) / 3, 1e-12);
}

// ---------------------------------------------------------------------------
// Training loop.

Dataset tiny_dataset(const Signature& sig, int n, std::uint64_t seed) {
  Rng rng(seed);
  Dataset ds;
  for (int i = 0; i < n; ++i) ds.push_back(random_image(sig, rng));
  return ds;
}

TEST(Train, DeterministicUnderSeed) {
  const auto cfg = tiny_architecture(6, 6, 1, 2);
  const auto data = tiny_dataset(cfg.signature, 10, 8);
  const auto masks = make_mask_dataset(20, 6, 6, {}, 8);
  TrainConfig tc;
  tc.epochs = 1;
  tc.batch_size = 4;
  tc.micro_batch = 2;
  tc.seed = 99;
  Model<float> a(cfg, 1), b(cfg, 1);
  const auto ra = train(a, data, masks, tc);
  const auto rb = train(b, data, masks, tc);
  EXPECT_EQ(a.params(), b.params());
  EXPECT_FALSE(a.params() == Model<float>(cfg, 1).params());
  EXPECT_EQ(ra[0].joint, rb[0].joint);
  tc.seed = 100;
  Model<float> c(cfg, 1);
  train(c, data, masks, tc);
  EXPECT_FALSE(a.params() == c.params());
}

TEST(Train, MicroBatchesAccumulateExactGradients) {
  const auto cfg = tiny_architecture(5, 5, 1, 2);
  const auto data = tiny_dataset(cfg.signature, 12, 9);
  const auto masks = make_mask_dataset(10, 5, 5, {}, 9);
  TrainConfig tc;
  tc.epochs = 2;
  tc.batch_size = 6;
  tc.seed = 3;
  tc.micro_batch = 6;
  Model<double> whole(cfg, init_params<double>(cfg, 2));
  train(whole, data, masks, tc);
  tc.micro_batch = 4;
  Model<double> split(cfg, init_params<double>(cfg, 2));
  train(split, data, masks, tc);
  for (std::size_t i = 0; i < whole.params().size(); ++i) {
    const auto& x = whole.params().entries()[i].value;
    const auto& y = split.params().entries()[i].value;
    for (std::size_t j = 0; j < x.size(); ++j) ASSERT_NEAR(x[j], y[j], 1e-10);
  }
}

TEST(Train, RecordsReportBitsAndDecreaseOnRepeatedData) {
  const auto cfg = tiny_architecture(6, 6, 1, 2);
  const auto data = tiny_dataset(cfg.signature, 8, 10);
  const auto masks = make_mask_dataset(1, 6, 6, {}, 10);
  TrainConfig tc;
  tc.epochs = 4;
  tc.batch_size = 8;
  tc.learning_rate = 1e-2;
  Model<float> m(cfg, 4);
  int calls = 0;
  const auto recs = train(m, data, masks, tc, [&](const TrainRecord& r) { EXPECT_EQ(r.epoch, ++calls); });
  ASSERT_EQ(recs.size(), 4u);
  EXPECT_EQ(calls, 4);
  for (const auto& r : recs) {
    EXPECT_TRUE(std::isfinite(r.joint));
    EXPECT_NEAR(r.bits_per_dim, r.joint / std::numbers::ln2, 1e-12);
  }
  EXPECT_LT(recs.back().joint, recs.front().joint);
  const nlohmann::json j = recs[0];
  EXPECT_TRUE(j.contains("bits_per_dim"));
}

TEST(Train, NonFiniteLossNamesTheBatch) {
  const auto cfg = tiny_architecture(4, 4, 1, 2);
  Model<float> m(cfg, 1);
  for (auto& e : m.params().entries()) {
    if (e.name.find("cond.head") != std::string::npos) e.value.fill(std::numeric_limits<float>::quiet_NaN());
  }
  TrainConfig tc;
  tc.epochs = 1;
  try {
    train(m, tiny_dataset(cfg.signature, 3, 1), MaskDataset{4, 4, {Mask(4, 4)}}, tc);
    FAIL() << "expected a fault";
  } catch (const RuntimeFault& e) {
    EXPECT_NE(std::string(e.what()).find("epoch 1, batch 0"), std::string::npos) << e.what();
  }
}

TEST(Train, RejectsBadConfigAndMismatchedInputs) {
  const auto cfg = tiny_architecture(4, 4, 1, 2);
  Model<float> m(cfg, 1);
  const auto data = tiny_dataset(cfg.signature, 2, 1);
  const auto masks = make_mask_dataset(2, 4, 4, {}, 1);
  TrainConfig tc;
  tc.epochs = 0;
  EXPECT_THROW(train(m, data, masks, tc), ValidationError);
  tc = {};
  tc.alpha = -1;
  EXPECT_THROW(train(m, data, masks, tc), ValidationError);
  tc = {};
  EXPECT_THROW(train(m, data, make_mask_dataset(2, 5, 4, {}, 1), tc), ValidationError);
  EXPECT_THROW(train(m, tiny_dataset(Signature{4, 4, 1, 4}, 2, 1), masks, tc), ValidationError);
  EXPECT_THROW(train(m, Dataset{}, masks, tc), ValidationError);
}

TEST(Train, PublishedConfigurationAccepted) {
  TrainConfig tc;
  EXPECT_EQ(tc.epochs, 50);
  EXPECT_DOUBLE_EQ(tc.learning_rate, 4e-4);
  EXPECT_EQ(tc.alpha, 1.0);
  EXPECT_NO_THROW(tc.validate());
  const nlohmann::json j = tc;
  EXPECT_EQ(j.get<TrainConfig>().learning_rate, tc.learning_rate);
}

TEST(Train, WritesCheckpointsAtCadence) {
  TempDir dir;
  const auto cfg = tiny_architecture(4, 4, 1, 2);
  Model<float> m(cfg, 1);
  TrainConfig tc;
  tc.epochs = 4;
  tc.checkpoint_every = 2;
  tc.checkpoint_dir = (dir / "ck").string();
  train(m, tiny_dataset(cfg.signature, 3, 1), make_mask_dataset(2, 4, 4, {}, 1), tc);
  EXPECT_FALSE(std::filesystem::exists(dir / "ck/epoch-1.pccn"));
  EXPECT_TRUE(std::filesystem::exists(dir / "ck/epoch-2.pccn"));
  const auto last = load_checkpoint(dir / "ck/epoch-4.pccn");
  EXPECT_EQ(last.params, m.params());
  EXPECT_EQ(last.train_config.at("checkpoint_every"), 2);
}

// ---------------------------------------------------------------------------
// Checkpoints.

TEST(Checkpoint, RoundTripIsBitExact) {
  TempDir dir;
  const auto cfg = ArchitectureConfig::mnist();
  const auto params = init_params<float>(cfg, 12);
  save_checkpoint(dir / "m.pccn", cfg, params, TrainConfig{});
  const auto ck = load_checkpoint(dir / "m.pccn");
  EXPECT_EQ(ck.config, cfg);
  ASSERT_EQ(ck.params.size(), params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    EXPECT_EQ(ck.params.entries()[i].name, params.entries()[i].name);
    EXPECT_EQ(std::memcmp(ck.params.entries()[i].value.ptr(), params.entries()[i].value.ptr(),
                          params.entries()[i].value.size() * sizeof(float)),
              0);
  }
  EXPECT_EQ(encode_checkpoint(ck.config, ck.params, ck.train_config), detail::read_file(dir / "m.pccn"));
}

TEST(Checkpoint, ReloadReproducesLogits) {
  const auto cfg = ArchitectureConfig::mnist_small();
  const Model<float> model(cfg, 13);
  const auto ck = decode_checkpoint(encode_checkpoint(cfg, model.params()));
  const Model<float> again(ck.config, ck.params);
  Rng rng(13);
  const Image img = random_image(Signature::mnist(), rng);
  const Mask mask = generate_mask(28, 28, {}, 13);
  EXPECT_EQ(model.forward(img, img, mask).logits, again.forward(img, img, mask).logits);
}

std::string decode_error(const std::vector<std::uint8_t>& bytes) {
  try {
    decode_checkpoint(bytes, "ck");
  } catch (const FormatError& e) {
    return e.what();
  } catch (const ValidationError& e) {
    return e.what();
  }
  return "";
}

TEST(Checkpoint, CorruptionIsDiagnosed) {
  const auto cfg = tiny_architecture(4, 4, 1, 2);
  const auto good = encode_checkpoint(cfg, init_params<float>(cfg, 1));

  auto truncated = good;
  truncated.resize(good.size() - 10);
  EXPECT_NE(decode_error(truncated).find("missing 10 bytes"), std::string::npos) << decode_error(truncated);

  auto magic = good;
  magic[0] = 'X';
  EXPECT_NE(decode_error(magic).find("bad magic"), std::string::npos);

  auto version = good;
  version[4] = 2;
  EXPECT_NE(decode_error(version).find("unsupported checkpoint version 2"), std::string::npos);

  auto extra = good;
  extra.push_back(0);
  EXPECT_NE(decode_error(extra).find("manifest covers"), std::string::npos);

  EXPECT_NE(decode_error({'P', 'C'}).find("missing 10 bytes"), std::string::npos);

  auto header = good;
  header[12] = '!';
  EXPECT_NE(decode_error(header).find("malformed JSON header"), std::string::npos);
}

TEST(Checkpoint, ShapeMismatchRejected) {
  const auto cfg = tiny_architecture(4, 4, 1, 2);
  auto params = init_params<float>(cfg, 1);
  params.entries()[0].value = Tensor<float>({2});
  EXPECT_FALSE(decode_error(encode_checkpoint(cfg, params)).empty());
}

TEST(Checkpoint, DigestsAreStable) {
  EXPECT_EQ(sha256_hex(std::vector<std::uint8_t>{'a', 'b', 'c'}),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
  const Mask m = generate_mask(28, 28, {}, 1);
  EXPECT_EQ(mask_digest(m), mask_digest(generate_mask(28, 28, {}, 1)));
  EXPECT_NE(mask_digest(m), mask_digest(generate_mask(28, 28, {}, 2)));
}

}  // namespace
}  // namespace pccnn
