#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <queue>

#include "pccnn/mask.hpp"
#include "test_util.hpp"

namespace pccnn {
namespace {

using testing::TempDir;

// Reference statistics from tools/mask_oracle.py (independent NumPy
// implementation, 20000 masks at 32x32, default parameters).
constexpr double kOracleMeanVisible = 0.047480859375;
constexpr double kOracleStdVisible = 0.032071805739646915;

bool four_connected(const Mask& m) {
  int sy = -1, sx = -1;
  for (int y = 0; y < m.height() && sy < 0; ++y)
    for (int x = 0; x < m.width(); ++x)
      if (m.visible(y, x)) {
        sy = y;
        sx = x;
        break;
      }
  if (sy < 0) return false;
  Mask seen(m.height(), m.width());
  std::queue<std::pair<int, int>> q;
  q.emplace(sy, sx);
  seen.set(sy, sx, 1);
  std::size_t reached = 1;
  while (!q.empty()) {
    auto [y, x] = q.front();
    q.pop();
    for (auto [dy, dx] : std::array<std::pair<int, int>, 4>{{{-1, 0}, {1, 0}, {0, -1}, {0, 1}}}) {
      const int ny = y + dy, nx = x + dx;
      if (ny < 0 || nx < 0 || ny >= m.height() || nx >= m.width()) continue;
      if (m.visible(ny, nx) && !seen.visible(ny, nx)) {
        seen.set(ny, nx, 1);
        ++reached;
        q.emplace(ny, nx);
      }
    }
  }
  return reached == m.visible_count();
}

TEST(BlobMask, SinglePixelGrid) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const Mask m = generate_mask(1, 1, {}, seed);
    EXPECT_EQ(m.bits(), std::vector<std::uint8_t>{1});
  }
}

TEST(BlobMask, DeterministicUnderSeed) {
  EXPECT_EQ(generate_mask(32, 32, {}, 77), generate_mask(32, 32, {}, 77));
  EXPECT_NE(generate_mask(32, 32, {}, 77), generate_mask(32, 32, {}, 78));
}

TEST(BlobMask, BlobCountInRangeAndAtLeastOneVisible) {
  std::array<int, 5> hist{};
  for (std::uint64_t i = 0; i < 2000; ++i) {
    const auto b = generate_blob_mask(32, 32, {}, split_seed(5, i));
    ASSERT_GE(b.num_blobs, 1);
    ASSERT_LE(b.num_blobs, 4);
    ++hist[static_cast<std::size_t>(b.num_blobs)];
    ASSERT_GE(b.mask.visible_count(), 1u);
  }
  for (int k = 1; k <= 4; ++k) EXPECT_GT(hist[static_cast<std::size_t>(k)], 400) << k;
}

TEST(BlobMask, SingleBlobIsFourConnected) {
  const MaskGenParams one{1, 2, 7};
  for (std::uint64_t i = 0; i < 500; ++i) ASSERT_TRUE(four_connected(generate_mask(20, 24, one, i))) << i;
}

TEST(BlobMask, ExpansionBoundedByIterations) {
  // A blob grown for at most iter_max rounds stays within that Manhattan
  // distance of its centre.
  const MaskGenParams p{1, 3, 3};
  for (std::uint64_t i = 0; i < 200; ++i) {
    const Mask m = generate_mask(31, 31, p, i);
    int ymin = 99, ymax = -1, xmin = 99, xmax = -1;
    for (int y = 0; y < 31; ++y)
      for (int x = 0; x < 31; ++x)
        if (m.visible(y, x)) {
          ymin = std::min(ymin, y);
          ymax = std::max(ymax, y);
          xmin = std::min(xmin, x);
          xmax = std::max(xmax, x);
        }
    EXPECT_LE(ymax - ymin, 6);
    EXPECT_LE(xmax - xmin, 6);
  }
}

TEST(BlobMask, VisibleFractionMatchesIndependentSimulation) {
  const int n = 10000;
  double sum = 0;
  for (int i = 0; i < n; ++i) sum += generate_mask(32, 32, {}, split_seed(11, i)).visible_count() / 1024.0;
  const double mean = sum / n;
  const double se = kOracleStdVisible * std::sqrt(1.0 / n + 1.0 / 20000);
  EXPECT_NEAR(mean, kOracleMeanVisible, 4 * se);
}

TEST(BlobMask, InvalidParamsRejected) {
  EXPECT_THROW(generate_mask(8, 8, {0, 2, 7}, 1), ValidationError);
  EXPECT_THROW(generate_mask(8, 8, {4, 0, 7}, 1), ValidationError);
  EXPECT_THROW(generate_mask(8, 8, {4, 5, 3}, 1), ValidationError);
}

TEST(RegularMask, HidesNamedHalf) {
  const Mask top = regular_mask(4, 6, RegularMask::top);
  EXPECT_FALSE(top.visible(0, 0));
  EXPECT_FALSE(top.visible(1, 5));
  EXPECT_TRUE(top.visible(2, 0));
  EXPECT_EQ(top.hidden_count(), 12u);
  const Mask right = regular_mask(4, 6, RegularMask::right);
  EXPECT_TRUE(right.visible(3, 2));
  EXPECT_FALSE(right.visible(0, 3));
  EXPECT_EQ(regular_mask(4, 6, RegularMask::bottom).inverted(), top);
  EXPECT_EQ(regular_mask(4, 6, RegularMask::left).inverted(), right);
}

TEST(MaskFile, RoundTripAndDeterminism) {
  TempDir dir;
  generate_mask_dataset(1, 28, 28, {}, 3, dir / "one.pcmk");
  const auto one = load_mask_dataset(dir / "one.pcmk");
  ASSERT_EQ(one.size(), 1u);
  EXPECT_EQ(one.masks[0], generate_mask(28, 28, {}, split_seed(3, 0)));

  generate_mask_dataset(200, 28, 28, {}, 9, dir / "a.pcmk");
  generate_mask_dataset(200, 28, 28, {}, 9, dir / "b.pcmk");
  EXPECT_EQ(detail::read_file(dir / "a.pcmk"), detail::read_file(dir / "b.pcmk"));
  const auto a = load_mask_dataset(dir / "a.pcmk");
  EXPECT_EQ(a.masks, make_mask_dataset(200, 28, 28, {}, 9).masks);
  EXPECT_EQ(encode_mask_dataset(a), detail::read_file(dir / "a.pcmk"));
}

TEST(MaskFile, InvertFlipsPolarity) {
  const auto plain = make_mask_dataset(5, 8, 8, {}, 4);
  const auto inv = make_mask_dataset(5, 8, 8, {}, 4, true);
  for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(inv.masks[i], plain.masks[i].inverted());
}

TEST(MaskFile, CorruptionDiagnosed) {
  auto bytes = encode_mask_dataset(make_mask_dataset(3, 4, 4, {}, 1));
  auto truncated = bytes;
  truncated.resize(bytes.size() - 5);
  try {
    decode_mask_dataset(truncated);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("missing 5"), std::string::npos) << e.what();
  }
  auto magic = bytes;
  magic[0] = 'X';
  EXPECT_THROW(decode_mask_dataset(magic), FormatError);
  auto version = bytes;
  version[4] = 2;
  EXPECT_THROW(decode_mask_dataset(version), FormatError);
  auto value = bytes;
  value[20] = 7;
  try {
    decode_mask_dataset(value);
    FAIL();
  } catch (const FormatError& e) {
    EXPECT_NE(std::string(e.what()).find("offset 20"), std::string::npos) << e.what();
  }
  EXPECT_THROW(decode_mask_dataset(std::vector<std::uint8_t>(bytes.begin(), bytes.begin() + 10)), FormatError);
  EXPECT_THROW(make_mask_dataset(0, 4, 4, {}, 1), ValidationError);
}

TEST(ApplyMask, Layout) {
  const Image img(Signature{2, 3, 1, 2}, {1, 0, 1, 0, 1, 1});
  const auto all = apply_mask<double>(img, Mask(2, 3, 1));
  ASSERT_EQ(all.shape(), (Shape{1, 2, 2, 3}));
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x) {
      EXPECT_EQ(all.at(0, 0, y, x), img.at(y, x));
      EXPECT_EQ(all.at(0, 1, y, x), 1.0);
    }
  const auto none = apply_mask<double>(img, Mask(2, 3, 0));
  for (double v : none.data()) EXPECT_EQ(v, 0.0);

  Mask one(2, 3);
  one.set(1, 2, 1);
  const auto single = apply_mask<double>(img, one);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 3; ++x) {
      const double want = (y == 1 && x == 2) ? 1.0 : 0.0;
      EXPECT_EQ(single.at(0, 0, y, x), want);
      EXPECT_EQ(single.at(0, 1, y, x), want);
    }
}

TEST(ApplyMask, HiddenDiffersFromVisibleZero) {
  const Image zero(Signature{1, 1, 1, 2}, {0});
  const auto hidden = apply_mask<float>(zero, Mask(1, 1, 0));
  const auto visible = apply_mask<float>(zero, Mask(1, 1, 1));
  EXPECT_EQ(hidden.at(0, 0, 0, 0), visible.at(0, 0, 0, 0));
  EXPECT_NE(hidden.at(0, 1, 0, 0), visible.at(0, 1, 0, 0));
}

TEST(ApplyMask, ScalesMultiLevelIntensities) {
  const Image img(Signature{1, 1, 3, 32}, {31, 0, 10});
  const auto t = apply_mask<double>(img, Mask(1, 1, 1));
  EXPECT_DOUBLE_EQ(t.at(0, 0, 0, 0), 1.0);
  EXPECT_DOUBLE_EQ(t.at(0, 2, 0, 0), 10.0 / 31.0);
  EXPECT_EQ(t.at(0, 3, 0, 0), 1.0);
  EXPECT_THROW(apply_mask<double>(img, Mask(2, 1, 1)), ValidationError);
}

}  // namespace
}  // namespace pccnn
