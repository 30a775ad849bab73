#include <algorithm>
#include <cmath>
#include <random>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "sncn/data/shapes.hpp"
#include "sncn/eval/corruption.hpp"
#include "sncn/eval/metrics.hpp"

using namespace sncn;

namespace {

LabeledImage constant(float v, std::size_t side = 32) {
  return {Tensor<float>(Shape{3, side, side}, v), 2};
}

ErrorTable random_table(std::uint64_t seed, double lo = 0.0, double hi = 1.0) {
  Rng rng(seed);
  ErrorTable t = ErrorTable::over(all_corruption_kinds());
  for (CorruptionKind k : all_corruption_kinds())
    for (int s = 1; s <= 5; ++s) t.set(k, s, rng.uniform(lo, hi));
  t.clean_error = rng.uniform();
  return t;
}

// Spreadsheet-style oracle: flatten to a row-major grid and sum left to right.
std::vector<std::vector<double>> as_grid(const ErrorTable &t) {
  std::vector<std::vector<double>> g;
  for (CorruptionKind k : t.kinds) {
    std::vector<double> row;
    for (int s = 1; s <= 5; ++s) row.push_back(t.at(k, s));
    g.push_back(row);
  }
  return g;
}

long double oracle_unnormalized(const ErrorTable &t) {
  long double total = 0;
  std::size_t n = 0;
  for (const auto &row : as_grid(t))
    for (double v : row) {
      total += v;
      ++n;
    }
  return total / n;
}

long double oracle_normalized(const ErrorTable &t, const ErrorTable &ref) {
  const auto a = as_grid(t), b = as_grid(ref);
  long double acc = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    long double num = 0, den = 0;
    for (std::size_t s = 0; s < 5; ++s) {
      num += a[i][s];
      den += b[i][s];
    }
    acc += num / den;
  }
  return acc / a.size();
}

double pixel_mse(const Tensor<float> &a, const Tensor<float> &b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return s / a.size();
}

} // namespace

// --------------------------------------------------------------- corruptions

TEST(CorruptionTest, SeverityMonotone) {
  const Dataset d = gen_shapes(25, 4, train_palette());
  for (CorruptionKind k : all_corruption_kinds()) {
    double prev = -1;
    for (int s = 1; s <= 5; ++s) {
      double mse = 0;
      for (std::size_t i = 0; i < d.size(); ++i) {
        Rng rng = corruption_rng(1, k, s, i);
        mse += pixel_mse(corrupt(d.images[i], {k, s}, rng).pixels, d.images[i].pixels);
      }
      mse /= d.size();
      EXPECT_GE(mse, prev) << to_string(k) << " severity " << s;
      prev = mse;
    }
  }
}

TEST(CorruptionTest, GaussianNoiseStd) {
  Rng rng(3);
  const auto out = corrupt_unclamped(constant(0.5f).pixels, {CorruptionKind::gaussian_noise, 5}, rng);
  double s = 0, sq = 0;
  for (float v : out.storage()) s += v;
  const double m = s / out.size();
  for (float v : out.storage()) sq += (v - m) * (v - m);
  EXPECT_NEAR(std::sqrt(sq / out.size()), 0.30, 0.02);
}

TEST(CorruptionTest, BrightnessAndContrast) {
  Rng rng(0);
  const auto b = corrupt(constant(0.5f), {CorruptionKind::brightness, 1}, rng);
  for (float v : b.pixels.storage()) EXPECT_NEAR(v, 0.6f, 1e-6f);
  EXPECT_EQ(b.label, 2);
  LabeledImage two{Tensor<float>(Shape{1, 1, 2}, {0.2f, 0.8f}), 0};
  const auto c = corrupt(two, {CorruptionKind::contrast, 2}, rng);
  EXPECT_NEAR(c.pixels[0], 0.5f - 0.3f * 0.7f, 1e-6f);
  EXPECT_NEAR(c.pixels[1], 0.5f + 0.3f * 0.7f, 1e-6f);
}

TEST(CorruptionTest, PixelateBlocks) {
  LabeledImage img{Tensor<float>(Shape{1, 4, 4}), 0};
  for (std::size_t i = 0; i < 16; ++i) img.pixels[i] = static_cast<float>(i) / 16.0f;
  Rng rng(0);
  const auto out = corrupt(img, {CorruptionKind::pixelate, 1}, rng); // 2×2 blocks
  EXPECT_FLOAT_EQ(out.pixels[0], (0 + 1 + 4 + 5) / 64.0f);
  EXPECT_FLOAT_EQ(out.pixels[5], out.pixels[0]);
  EXPECT_FLOAT_EQ(out.pixels[15], (10 + 11 + 14 + 15) / 64.0f);
}

TEST(CorruptionTest, ImpulseFractionAndShotMean) {
  Rng rng(9);
  const auto img = constant(0.5f, 64);
  const auto imp = corrupt(img, {CorruptionKind::impulse_noise, 5}, rng);
  std::size_t hit = 0;
  for (float v : imp.pixels.storage()) hit += v != 0.5f;
  EXPECT_NEAR(static_cast<double>(hit) / imp.pixels.size(), 0.10, 0.01);
  const auto shot = corrupt_unclamped(img.pixels, {CorruptionKind::shot_noise, 3}, rng);
  double s = 0;
  for (float v : shot.storage()) s += v;
  EXPECT_NEAR(s / shot.size(), 0.5, 0.01);
}

TEST(CorruptionTest, DeterministicAndRangeChecked) {
  const auto img = gen_shapes(1, 0, train_palette()).images[0];
  for (CorruptionKind k : all_corruption_kinds()) {
    Rng a = corruption_rng(5, k, 3, 0), b = corruption_rng(5, k, 3, 0);
    const auto x = corrupt(img, {k, 3}, a), y = corrupt(img, {k, 3}, b);
    EXPECT_TRUE(x.pixels == y.pixels);
    EXPECT_EQ(x.label, img.label);
    for (float v : x.pixels.storage()) ASSERT_TRUE(v >= 0.0f && v <= 1.0f);
  }
  Rng rng(0);
  EXPECT_THROW(corrupt(img, {CorruptionKind::contrast, 0}, rng), std::invalid_argument);
  EXPECT_THROW(corrupt(img, {CorruptionKind::contrast, 6}, rng), std::invalid_argument);
  EXPECT_THROW(parse_corruption_kind("fog"), std::invalid_argument);
  EXPECT_EQ(parse_corruption_kind("pixelate"), CorruptionKind::pixelate);
}

// -------------------------------------------------------------------- suite

TEST(SuiteTest, OracleStubIsPerfect) {
  const Dataset d = gen_shapes(5, 1, train_palette());
  // Images are interleaved by class, so batch position reveals the label.
  std::size_t offset = 0;
  auto oracle = [&](const Tensor<float> &b) {
    std::vector<int> out;
    for (std::size_t i = 0; i < b.dim(0); ++i) out.push_back(d.images[offset + i].label);
    offset = (offset + b.dim(0)) % d.size();
    return out;
  };
  const ErrorTable t = evaluate_suite(oracle, d, all_corruption_kinds(), 0, 7);
  EXPECT_EQ(t.clean_error, 0.0);
  EXPECT_EQ(mce_unnormalized(t), 0.0);
}

TEST(SuiteTest, ConstantClassIsExactlyThreeQuarters) {
  const Dataset d = gen_shapes(10, 1, train_palette());
  auto constant_stub = [](const Tensor<float> &b) { return std::vector<int>(b.dim(0), 1); };
  const ErrorTable t = evaluate_suite(constant_stub, d, all_corruption_kinds(), 0);
  EXPECT_EQ(t.clean_error, 0.75);
  for (CorruptionKind k : all_corruption_kinds())
    for (int s = 1; s <= 5; ++s) EXPECT_EQ(t.at(k, s), 0.75);
}

TEST(SuiteTest, UniformRandomStub) {
  Dataset d;
  d.class_names = shape_class_names();
  for (int i = 0; i < 10000; ++i) d.images.push_back({Tensor<float>(Shape{3, 2, 2}, 0.5f), i % 4});
  Rng rng(77);
  auto random_stub = [&](const Tensor<float> &b) {
    std::vector<int> out;
    for (std::size_t i = 0; i < b.dim(0); ++i) out.push_back(static_cast<int>(rng.below(4)));
    return out;
  };
  const std::vector<CorruptionKind> kinds{CorruptionKind::brightness, CorruptionKind::contrast};
  const ErrorTable t = evaluate_suite(random_stub, d, kinds, 0, 1000);
  for (CorruptionKind k : kinds)
    for (int s = 1; s <= 5; ++s) EXPECT_NEAR(t.at(k, s), 0.75, 0.02);
}

TEST(SuiteTest, EmptyDatasetRejected) {
  auto stub = [](const Tensor<float> &b) { return std::vector<int>(b.dim(0), 0); };
  EXPECT_THROW(evaluate_suite(stub, Dataset{}, all_corruption_kinds(), 0), std::invalid_argument);
}

// ------------------------------------------------------------------ metrics

TEST(MetricsTest, UnnormalizedExamples) {
  ErrorTable half = ErrorTable::over(all_corruption_kinds());
  ErrorTable ramp = half;
  for (CorruptionKind k : all_corruption_kinds())
    for (int s = 1; s <= 5; ++s) {
      half.set(k, s, 0.5);
      ramp.set(k, s, 0.1 * s);
    }
  EXPECT_DOUBLE_EQ(mce_unnormalized(half), 0.5);
  EXPECT_NEAR(mce_unnormalized(ramp), 0.3, 1e-15);
}

TEST(MetricsTest, MatchesOraclesOnRandomTables) {
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const ErrorTable t = random_table(seed), ref = random_table(seed + 1000, 0.05, 1.0);
    EXPECT_NEAR(mce_unnormalized(t), static_cast<double>(oracle_unnormalized(t)), 1e-9);
    EXPECT_NEAR(mce_normalized(t, ref), static_cast<double>(oracle_normalized(t, ref)), 1e-9);
    EXPECT_EQ(mce_normalized(t, t), 1.0);
  }
}

TEST(MetricsTest, NormalizedHalfReference) {
  const ErrorTable ref = random_table(5, 0.1, 0.9);
  ErrorTable half = ref;
  for (CorruptionKind k : ref.kinds)
    for (int s = 1; s <= 5; ++s) half.set(k, s, ref.at(k, s) / 2);
  EXPECT_NEAR(mce_normalized(half, ref), 0.5, 1e-15);
}

TEST(MetricsTest, EnumerationOrderInvariant) {
  const ErrorTable t = random_table(8);
  std::vector<CorruptionKind> order = t.kinds;
  std::mt19937 gen(1);
  for (int trial = 0; trial < 20; ++trial) {
    std::shuffle(order.begin(), order.end(), gen);
    ErrorTable p = ErrorTable::over(order);
    std::vector<int> sev{1, 2, 3, 4, 5};
    std::shuffle(sev.begin(), sev.end(), gen);
    for (CorruptionKind k : order)
      for (int s : sev) p.set(k, s, t.at(k, s));
    EXPECT_EQ(mce_unnormalized(p), mce_unnormalized(t));
  }
}

TEST(MetricsTest, Errors) {
  ErrorTable partial = ErrorTable::over(all_corruption_kinds());
  partial.set(CorruptionKind::pixelate, 1, 0.2);
  EXPECT_THROW(mce_unnormalized(partial), std::invalid_argument);
  ErrorTable zero = random_table(1);
  for (int s = 1; s <= 5; ++s) zero.set(CorruptionKind::contrast, s, 0.0);
  EXPECT_THROW(mce_normalized(random_table(2), zero), std::invalid_argument);
}

TEST(MetricsTest, CsvRoundTrip) {
  const ErrorTable t = random_table(4);
  std::stringstream buf;
  write_error_table_csv(buf, t);
  const std::string text = buf.str();
  EXPECT_EQ(text.rfind("corruption,severity,error\ngaussian_noise,1,", 0), 0u);
  EXPECT_NE(text.find("\nclean,-,"), std::string::npos);
  EXPECT_EQ(read_error_table_csv(buf), t);
  std::stringstream bad("corruption,severity,error\nfog,1,0.5\nclean,-,0.1\n");
  EXPECT_THROW(read_error_table_csv(bad), FormatError);
}
