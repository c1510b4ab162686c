#include <cmath>

#include <gtest/gtest.h>

#include "multipod/filters.hpp"

using namespace multipod;

namespace {

ImageBuffer random_image(int h, int w, int ch, std::uint64_t seed) {
  Rng rng = make_rng({seed});
  ImageBuffer img(h, w, ch);
  for (float& v : img.data) v = static_cast<float>(uniform(rng, 0.0, 255.0));
  return img;
}

// Direct same-size correlation with zero padding, one channel, one kernel.
double direct_response(const ImageBuffer& img, int ch, const DirectionalFilterBank& bank, int k,
                       int r, int c) {
  double s = 0.0;
  for (int i = 0; i < kKernelSize; ++i)
    for (int j = 0; j < kKernelSize; ++j) {
      const int rr = r + i - kKernelSize / 2, cc = c + j - kKernelSize / 2;
      if (rr < 0 || rr >= img.height || cc < 0 || cc >= img.width) continue;
      s += bank.at(k, i, j) * img.at(rr, cc, ch);
    }
  return s;
}

}  // namespace

TEST(BuildBank, ZeroSumUnitNorm) {
  for (double sigma : {0.5, 1.0, 1.5, 2.5, 4.0}) {
    const DirectionalFilterBank bank = build_bank(sigma, true);
    ASSERT_EQ(bank.kernels.size(), 8u);
    for (const auto& k : bank.kernels) {
      ASSERT_EQ(k.size(), 49u);
      double sum = 0.0, sq = 0.0;
      for (double v : k) {
        sum += v;
        sq += v * v;
      }
      EXPECT_LT(std::abs(sum), 1e-10);
      EXPECT_NEAR(sq, 1.0, 1e-12);
    }
  }
  EXPECT_THROW(build_bank(0.0, true), Error);
  EXPECT_THROW(build_bank(-1.0, true), Error);
}

TEST(BuildBank, HorizontalKernelIsOdd) {
  const DirectionalFilterBank bank = build_bank(1.5, true);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 7; ++c) EXPECT_NEAR(bank.at(0, r, 6 - c), -bank.at(0, r, c), 1e-14);
}

TEST(BuildBank, NinetyDegreesIsTranspose) {
  const DirectionalFilterBank bank = build_bank(1.5, true);
  for (int r = 0; r < 7; ++r)
    for (int c = 0; c < 7; ++c) EXPECT_NEAR(bank.at(4, r, c), bank.at(0, c, r), 1e-10);
}

TEST(BuildBank, DeterministicAndOrientationLabels) {
  const auto a = build_bank(1.5, false), b = build_bank(1.5, true);
  EXPECT_EQ(a.kernels, b.kernels);
  EXPECT_FALSE(a.trainable);
  for (int k = 0; k < 8; ++k) EXPECT_DOUBLE_EQ(DirectionalFilterBank::orientation_deg(k), 22.5 * k);
}

TEST(ApplyBank, Shapes) {
  const DirectionalFilterBank bank = build_bank();
  const ImageBuffer one = apply_bank(ImageBuffer(35, 35, 1, 3.0f), bank);
  EXPECT_EQ(one.height, 35);
  EXPECT_EQ(one.width, 35);
  EXPECT_EQ(one.channels, 8);
  EXPECT_EQ(apply_bank(ImageBuffer(35, 35, 3), bank).channels, 24);
  EXPECT_THROW(apply_bank(ImageBuffer(6, 35, 1), bank), Error);
}

TEST(ApplyBank, MatchesDirectCorrelationAndChannelOrder) {
  const DirectionalFilterBank bank = build_bank();
  const ImageBuffer img = random_image(12, 10, 2, 4);
  const ImageBuffer out = apply_bank(img, bank);
  for (int ch = 0; ch < 2; ++ch)
    for (int k = 0; k < 8; ++k)
      for (int r = 0; r < 12; ++r)
        for (int c = 0; c < 10; ++c)
          ASSERT_NEAR(out.at(r, c, ch * 8 + k), direct_response(img, ch, bank, k, r, c), 1e-2);
}

TEST(ApplyBank, ConstantImageGivesZero) {
  const DirectionalFilterBank bank = build_bank();
  const ImageBuffer out = apply_bank(ImageBuffer(35, 35, 1, 200.0f), bank);
  // the padded border sees a step against the zero fill; the interior must vanish
  for (int k = 0; k < 8; ++k)
    for (int r = 3; r < 32; ++r)
      for (int c = 3; c < 32; ++c) EXPECT_LT(std::abs(out.at(r, c, k)), 1e-3f);
  for (float v : apply_bank(ImageBuffer(35, 35, 1, 0.0f), bank).data) EXPECT_EQ(v, 0.0f);
}

TEST(ApplyBank, Linearity) {
  const DirectionalFilterBank bank = build_bank();
  const ImageBuffer x = random_image(35, 35, 1, 1), y = random_image(35, 35, 1, 2);
  const float a = 0.3f, b = -1.7f;
  ImageBuffer mix = x;
  for (std::size_t i = 0; i < mix.data.size(); ++i) mix.data[i] = a * x.data[i] + b * y.data[i];
  const ImageBuffer fx = apply_bank(x, bank), fy = apply_bank(y, bank), fm = apply_bank(mix, bank);
  for (std::size_t i = 0; i < fm.data.size(); ++i) {
    EXPECT_NEAR(fm.data[i], a * fx.data[i] + b * fy.data[i], 1e-2);
  }
}

TEST(DominantOrientation, Examples) {
  const DirectionalFilterBank bank = build_bank();
  EXPECT_EQ(dominant_orientation(bank, make_step_edge(35, 0.0)), 0);
  EXPECT_EQ(dominant_orientation(bank, make_step_edge(35, 90.0)), 4);
  EXPECT_EQ(dominant_orientation(bank, make_step_edge(35, 22.5)), 1);
}

TEST(DominantOrientation, SelectiveUnderJitter) {
  const DirectionalFilterBank bank = build_bank();
  for (double jitter : {-5.0, -2.5, 0.0, 2.5, 5.0}) {
    int correct = 0;
    for (int k = 0; k < 8; ++k) {
      correct += dominant_orientation(bank, make_step_edge(35, 22.5 * k + jitter)) == k ? 1 : 0;
      // reversed polarity has the same orientation
      correct += dominant_orientation(bank, make_step_edge(35, 22.5 * k + jitter + 180.0)) == k ? 1 : 0;
    }
    EXPECT_EQ(correct, 16) << "jitter " << jitter;
  }
}

TEST(DominantOrientation, BruteForceAgreement) {
  // oracle: argmax of the interior mean |response| computed by direct correlation
  const DirectionalFilterBank bank = build_bank();
  for (double deg : {10.0, 37.0, 61.0, 100.0, 145.0}) {
    const ImageBuffer edge = make_step_edge(21, deg);
    int best = 0;
    double best_score = -1.0;
    for (int k = 0; k < 8; ++k) {
      double s = 0.0;
      for (int r = 3; r < 18; ++r)
        for (int c = 3; c < 18; ++c) s += std::abs(direct_response(edge, 0, bank, k, r, c));
      if (s > best_score) {
        best_score = s;
        best = k;
      }
    }
    EXPECT_EQ(dominant_orientation(bank, edge), best) << deg;
  }
}
