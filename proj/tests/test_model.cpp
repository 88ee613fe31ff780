#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "layer_cases.hpp"
#include "pccnn/model.hpp"
#include "test_util.hpp"

namespace pccnn {
namespace {

using testing::random_image;
using testing::random_tensor;
using testing::tiny_architecture;

// Independent count: per gated block a (k/2+1) x k vertical conv, a
// 1 x (k/2+1) horizontal conv, a 2F -> 2F link and an F -> F output, each
// with biases; per residual block two k x k convs plus a 1x1 projection when
// the channel count changes.
std::size_t hand_count(const ArchitectureConfig& a) {
  const std::size_t c = a.signature.channels, f = a.prior.filters, k = a.prior.kernel;
  const std::size_t kh = k / 2 + 1, logits = c * a.signature.levels;
  auto gated = [&](std::size_t in) {
    return (2 * f * in * kh * k + 2 * f) + (2 * f * in * kh + 2 * f) + (4 * f * f + 2 * f) + (f * f + f);
  };
  std::size_t prior = gated(c) + a.prior.gated_blocks * gated(f);
  const std::size_t h = a.prior.head_hidden;
  prior += h ? (h * f + h) + (logits * h + logits) : (logits * f + logits);
  const std::size_t g = a.conditioning.filters, kc = a.conditioning.kernel;
  auto residual = [&](std::size_t in) {
    return (g * in * kc * kc + g) + (g * g * kc * kc + g) + (in != g ? g * in + g : 0);
  };
  std::size_t cond = residual(c + 1) + (a.conditioning.residual_blocks - 1) * residual(g) + (logits * g + logits);
  return prior + cond;
}

TEST(Parameters, CountsMatchHandFormulaAndFrozenValues) {
  for (const auto& cfg : {ArchitectureConfig::mnist(), ArchitectureConfig::mnist_small(), ArchitectureConfig::celeba()}) {
    EXPECT_EQ(parameter_count(cfg), hand_count(cfg)) << cfg.name;
  }
  EXPECT_EQ(parameter_count(ArchitectureConfig::mnist()), 1342596u);
  EXPECT_EQ(parameter_count(ArchitectureConfig::mnist_small()), 501348u);
  EXPECT_EQ(parameter_count(ArchitectureConfig::celeba()), hand_count(ArchitectureConfig::celeba()));
  EXPECT_EQ(init_params<float>(ArchitectureConfig::mnist(), 1).scalar_count(), 1342596u);
}

TEST(Parameters, PresetsMatchLayerTables) {
  const auto m = ArchitectureConfig::mnist();
  EXPECT_EQ(m.total_gated_blocks(), 15);
  EXPECT_EQ(m.prior.filters, 32);
  EXPECT_EQ(m.prior.kernel, 5);
  EXPECT_EQ(m.conditioning.residual_blocks, 15);
  EXPECT_EQ(m.logits_per_pixel(), 2);
  const auto c = ArchitectureConfig::celeba();
  EXPECT_EQ(c.total_gated_blocks(), 17);
  EXPECT_EQ(c.prior.filters, 66);
  EXPECT_EQ(c.prior.head_hidden, 1023);
  EXPECT_EQ(c.conditioning.residual_blocks, 17);
  EXPECT_EQ(c.logits_per_pixel(), 96);
  const auto s = ArchitectureConfig::mnist_small();
  EXPECT_EQ(s.total_gated_blocks(), 6);
  EXPECT_EQ(s.conditioning.residual_blocks, 6);
  EXPECT_EQ(ArchitectureConfig::from_preset("mnist-small"), s);
  EXPECT_THROW(ArchitectureConfig::from_preset("imagenet"), ValidationError);
}

TEST(Parameters, InitIsDeterministicAndConfigRoundTripsThroughJson) {
  const auto cfg = ArchitectureConfig::mnist_small();
  EXPECT_EQ(init_params<float>(cfg, 4), init_params<float>(cfg, 4));
  EXPECT_FALSE(init_params<float>(cfg, 4) == init_params<float>(cfg, 5));
  const nlohmann::json j = ArchitectureConfig::celeba();
  EXPECT_EQ(j.get<ArchitectureConfig>(), ArchitectureConfig::celeba());
}

TEST(Parameters, ModelRejectsMismatchedTensors) {
  const auto cfg = tiny_architecture(4, 4, 1, 2);
  auto params = init_params<float>(cfg, 1);
  params.entries()[0].value = Tensor<float>({1});
  EXPECT_THROW(Model<float>(cfg, params), ValidationError);
  EXPECT_THROW(Model<float>(cfg, init_params<float>(tiny_architecture(4, 4, 3, 2), 1)), ValidationError);
}

// ---------------------------------------------------------------------------
// Masked convolution.

Tensor<double> masked_value(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b, MaskType t) {
  Tape<double> tape(false);
  return ad::masked_conv(tape.leaf(x), tape.leaf(w), tape.leaf(b), t).value();
}

TEST(MaskedConv, TypeAOriginSeesNothing) {
  Rng rng(1);
  const auto x = random_tensor<double>({2, 3, 5, 5}, rng);
  const auto w = random_tensor<double>({4, 3, 5, 5}, rng);
  const auto y = masked_value(x, w, Tensor<double>({4}), MaskType::A);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o) EXPECT_EQ(y.at(n, o, 0, 0), 0.0);
}

TEST(MaskedConv, TypeBPointwiseIsPlainConv) {
  Rng rng(2);
  const auto x = random_tensor<double>({1, 3, 4, 4}, rng);
  const auto w = random_tensor<double>({2, 3, 1, 1}, rng);
  const auto b = random_tensor<double>({2}, rng);
  Tape<double> tape(false);
  const auto plain = ad::conv2d(tape.leaf(x), tape.leaf(w), tape.leaf(b), Padding{}).value();
  EXPECT_EQ(masked_value(x, w, b, MaskType::B), plain);
}

TEST(MaskedConv, EvenOrNonSquareKernelRejected) {
  Tape<double> tape(false);
  auto x = tape.leaf(Tensor<double>({1, 1, 4, 4}));
  auto b = tape.leaf(Tensor<double>({1}));
  EXPECT_THROW(ad::masked_conv(x, tape.leaf(Tensor<double>({1, 1, 4, 4})), b, MaskType::A), ValidationError);
  EXPECT_THROW(ad::masked_conv(x, tape.leaf(Tensor<double>({1, 1, 3, 5})), b, MaskType::B), ValidationError);
}

TEST(MaskedConv, ReceptiveFieldProbe) {
  Rng rng(3);
  for (MaskType type : {MaskType::A, MaskType::B}) {
    const auto w = random_tensor<double>({2, 2, 5, 5}, rng);
    const auto b = random_tensor<double>({2}, rng);
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = random_tensor<double>({1, 2, 6, 7}, rng);
      const int j = rng.uniform_int(0, 41);
      auto xp = x;
      for (int c = 0; c < 2; ++c) xp.at(0, c, j / 7, j % 7) += 1.5;
      const auto y0 = masked_value(x, w, b, type), y1 = masked_value(xp, w, b, type);
      for (int i = 0; i < 42; ++i) {
        const bool must_match = type == MaskType::A ? i <= j : i < j;
        if (!must_match) continue;
        for (int o = 0; o < 2; ++o) ASSERT_EQ(y0.at(0, o, i / 7, i % 7), y1.at(0, o, i / 7, i % 7)) << i << " " << j;
      }
    }
  }
}

// ---------------------------------------------------------------------------
// Prior network.

Tensor<float> prior_of(const Model<float>& m, const Image& img) { return m.prior_forward(img).logits; }

TEST(Prior, FirstPixelIsBiasOnly) {
  const Model<float> model(ArchitectureConfig::mnist_small(), 7);
  Rng rng(7);
  const auto ref = prior_of(model, random_image(Signature::mnist(), rng));
  for (int t = 0; t < 5; ++t) {
    const auto l = prior_of(model, random_image(Signature::mnist(), rng));
    for (int k = 0; k < 2; ++k) EXPECT_EQ(l.at(0, k, 0, 0), ref.at(0, k, 0, 0));
  }
}

TEST(Prior, PairedInputProbeMnistPreset) {
  Rng rng(8);
  for (int trial = 0; trial < 4; ++trial) {
    const Model<float> model(ArchitectureConfig::mnist(), 100 + trial);
    const Image a = random_image(Signature::mnist(), rng);
    const int i = rng.uniform_int(0, 28 * 28 - 1);
    Image b = a;
    for (int j = i; j < 28 * 28; ++j) b.set(j / 28, j % 28, 0, static_cast<std::uint8_t>(rng.uniform_int(0, 1)));
    b.set(i / 28, i % 28, 0, 1 - a.at(i / 28, i % 28));
    const auto la = prior_of(model, a), lb = prior_of(model, b);
    for (int p = 0; p <= i; ++p)
      for (int k = 0; k < 2; ++k) ASSERT_NEAR(la.at(0, k, p / 28, p % 28), lb.at(0, k, p / 28, p % 28), 1e-6) << p;
  }
}

TEST(Prior, NoBlindSpotAboveRight) {
  const Model<float> model(ArchitectureConfig::mnist(), 11);
  Rng rng(11);
  const Image base = random_image(Signature::mnist(), rng);
  const auto l0 = prior_of(model, base);
  // Pixels in earlier rows to the right of the probe column, plus the left
  // neighbour on the same row.
  for (auto [y, x] : {std::pair{13, 15}, std::pair{13, 17}, std::pair{12, 19}, std::pair{10, 22}, std::pair{14, 13}}) {
    Image moved = base;
    moved.set(y, x, 0, 1 - base.at(y, x));
    const auto l1 = prior_of(model, moved);
    EXPECT_GT(std::abs(l1.at(0, 0, 14, 14) - l0.at(0, 0, 14, 14)), 1e-6) << y << "," << x;
  }
}

TEST(Prior, WindowedRowsReproduceFullImageLogits) {
  const Model<float> model(ArchitectureConfig::mnist_small(), 12);
  Rng rng(12);
  const Image img = random_image(Signature::mnist(), rng);
  const auto full = model.prior_logits(img.to_tensor<float>());
  const int reach = model.config().prior_reach_rows();
  for (int y : {0, 5, 13, 14, 27}) {
    const int r0 = std::max(0, y - reach);
    Tensor<float> window({1, 1, y - r0 + 1, 28});
    for (int r = r0; r <= y; ++r)
      for (int x = 0; x < 28; ++x) window.at(0, 0, r - r0, x) = full.empty() ? 0 : img.to_tensor<float>().at(0, 0, r, x);
    const auto part = model.prior_logits(window);
    for (int x = 0; x < 28; ++x)
      for (int k = 0; k < 2; ++k) ASSERT_NEAR(part.at(0, k, y - r0, x), full.at(0, k, y, x), 1e-5) << y << "," << x;
  }
}

TEST(Prior, ChannelsOfOnePixelAreIndependent) {
  auto cfg = tiny_architecture(5, 5, 3, 4);
  cfg.prior.gated_blocks = 2;
  const Model<double> model(cfg, init_params<double>(cfg, 13, 1.5));
  Rng rng(13);
  const Image a = random_image(cfg.signature, rng);
  for (int i = 0; i < 25; ++i) {
    Image b = a;
    for (int c = 0; c < 3; ++c) b.set(i / 5, i % 5, c, static_cast<std::uint8_t>((a.at(i / 5, i % 5, c) + 1) % 4));
    const auto la = model.prior_forward(a).logits, lb = model.prior_forward(b).logits;
    for (int ch = 0; ch < 12; ++ch) ASSERT_EQ(la.at(0, ch, i / 5, i % 5), lb.at(0, ch, i / 5, i % 5));
  }
}

TEST(Prior, SignatureMismatchRejected) {
  const Model<float> model(ArchitectureConfig::mnist_small(), 1);
  EXPECT_THROW(model.prior_forward(Image(Signature{28, 28, 1, 256})), ValidationError);
  EXPECT_THROW(model.prior_forward(Image(Signature{27, 28, 1, 2})), ValidationError);
  EXPECT_THROW(model.cond_logits(Tensor<float>({1, 1, 28, 28})), ValidationError);
}

// ---------------------------------------------------------------------------
// Conditioning network and fusion.

TEST(Conditioning, DeterministicOnZeroInput) {
  const Model<float> model(ArchitectureConfig::mnist_small(), 14);
  const Image zero(Signature::mnist());
  const Mask none(28, 28);
  EXPECT_EQ(model.cond_forward(zero, none).logits, model.cond_forward(zero, none).logits);
}

TEST(Conditioning, FarVisiblePixelReachesOppositeCorner) {
  const Model<float> model(ArchitectureConfig::mnist(), 15);
  Mask mask(28, 28);
  mask.set(0, 0, 1);
  Image a(Signature::mnist());
  Image b = a;
  b.set(0, 0, 0, 1);
  const auto la = model.cond_forward(a, mask).logits, lb = model.cond_forward(b, mask).logits;
  EXPECT_GT(std::abs(la.at(0, 0, 27, 27) - lb.at(0, 0, 27, 27)), 0.0);
  // Hiding a pixel differs from showing it as 0.
  const auto hidden = model.cond_forward(a, Mask(28, 28)).logits;
  EXPECT_FALSE(hidden == la);
}

TEST(Conditioning, OutputShapesForBothPresets) {
  const Model<float> mnist(ArchitectureConfig::mnist(), 16);
  EXPECT_EQ(mnist.cond_forward(Image(Signature::mnist()), Mask(28, 28)).logits.shape(), (Shape{1, 2, 28, 28}));
  const Model<float> celeba(ArchitectureConfig::celeba(), 16);
  const Image face(Signature::celeba());
  EXPECT_EQ(celeba.cond_forward(face, Mask(32, 32, 1)).logits.shape(), (Shape{1, 96, 32, 32}));
  EXPECT_EQ(celeba.prior_forward(face).logits.shape(), (Shape{1, 96, 32, 32}));
}

TEST(Combine, ElementwiseSum) {
  LogitGrid<double> prior{Tensor<double>({1, 2, 1, 1}, std::vector<double>{1, 2}), LogitFlavor::prior, 1, 2};
  LogitGrid<double> cond{Tensor<double>({1, 2, 1, 1}, std::vector<double>{3, -1}), LogitFlavor::conditional, 1, 2};
  const auto c = combine(prior, cond);
  EXPECT_EQ(c.flavor, LogitFlavor::combined);
  EXPECT_EQ(c.at(0, 0, 0, 0), 4.0);
  EXPECT_EQ(c.at(0, 1, 0, 0), 1.0);

  LogitGrid<double> zero{Tensor<double>({1, 2, 1, 1}), LogitFlavor::conditional, 1, 2};
  EXPECT_EQ(combine(prior, zero).logits, prior.logits);
  const auto uniform = combine(zero, zero).probabilities(0, 0, 0);
  EXPECT_DOUBLE_EQ(uniform[0], 0.5);
  EXPECT_DOUBLE_EQ(uniform[1], 0.5);

  LogitGrid<double> wrong{Tensor<double>({1, 4, 1, 1}), LogitFlavor::conditional, 1, 4};
  EXPECT_THROW(combine(prior, wrong), ValidationError);
}

TEST(Combine, SoftmaxOfModelOutputSumsToOne) {
  const Model<float> model(ArchitectureConfig::celeba(), 17);
  Rng rng(17);
  const Image img = random_image(Signature::celeba(), rng);
  const auto grid = model.forward(img, img, generate_mask(32, 32, {}, 17));
  for (int y = 0; y < 32; y += 5)
    for (int x = 0; x < 32; x += 3)
      for (int c = 0; c < 3; ++c) {
        double s = 0;
        for (double p : grid.probabilities(c, y, x)) s += p;
        ASSERT_NEAR(s, 1.0, 1e-5);
      }
}

}  // namespace
}  // namespace pccnn
