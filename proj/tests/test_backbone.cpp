#include <cmath>
#include <sstream>
#include <vector>

#include <gtest/gtest.h>

#include "sncn/core/grad_check.hpp"
#include "sncn/nn/model.hpp"

using namespace sncn;

namespace {

template <typename T> Tensor<T> random_tensor(Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0) {
  Rng rng(seed);
  Tensor<T> t(std::move(shape));
  for (auto &v : t.storage()) v = static_cast<T>(rng.uniform(lo, hi));
  return t;
}

ModelSpec small_spec() {
  ModelSpec s;
  s.widths = {4, 8, 8};
  s.cells_per_block = 2;
  s.num_classes = 4;
  return s;
}

ModelSpec plain(ModelSpec s) {
  s.sn_enabled = false;
  s.cn_enabled = false;
  return s;
}

template <typename T> Model<T> make(const ModelSpec &spec, std::uint64_t seed = 7) {
  Rng rng(seed);
  return build_model<T>(spec, rng);
}

double max_diff(const Tensor<float> &a, const Tensor<float> &b) { return max_abs_diff(a, b); }

} // namespace

TEST(BackboneTest, DefaultUnitCounts) {
  Model<float> m = make<float>(ModelSpec{});
  EXPECT_EQ(m.sn_count(), 6u);
  EXPECT_EQ(m.cn_count, 6u);
  EXPECT_FALSE(m.image_site.has_value());
}

TEST(BackboneTest, ImagePlacementHasOneUnitPair) {
  ModelSpec s = small_spec();
  s.placement = Placement::image;
  Model<float> m = make<float>(s);
  EXPECT_EQ(m.sn_count(), 1u);
  EXPECT_EQ(m.cn_count, 1u);
  ASSERT_TRUE(m.image_site.has_value());
  EXPECT_EQ(m.sn[0].channels(), 3u);
  for (const auto &c : m.cells) EXPECT_FALSE(c.site.has_value());
}

TEST(BackboneTest, SelectedBlocksOnly) {
  ModelSpec s = small_spec();
  s.blocks = {2};
  s.image_units = true;
  Model<float> m = make<float>(s);
  EXPECT_EQ(m.sn_count(), 3u);
  EXPECT_EQ(m.cn_count, 3u);
  EXPECT_FALSE(m.cells[0].site.has_value());
  EXPECT_TRUE(m.cells[2].site.has_value());
  EXPECT_FALSE(m.cells[4].site.has_value());
}

TEST(BackboneTest, UnitChannelsFollowPlacement) {
  ModelSpec s = small_spec();
  s.placement = Placement::pre_residual;
  Model<float> pre = make<float>(s);
  // Cell 2 is the first of block 2: input 4 channels, output 8.
  EXPECT_EQ(pre.sn[2].channels(), 4u);
  s.placement = Placement::post_residual;
  EXPECT_EQ(make<float>(s).sn[2].channels(), 8u);
}

TEST(BackboneTest, ValidationErrors) {
  ModelSpec s = small_spec();
  s.cn.active_count = 7;
  EXPECT_THROW(make<float>(s), std::invalid_argument);
  s = small_spec();
  s.blocks = {4};
  EXPECT_THROW(make<float>(s), std::invalid_argument);
  s = small_spec();
  s.blocks = {};
  EXPECT_THROW(make<float>(s), std::invalid_argument);
  s.sn_enabled = s.cn_enabled = false;
  EXPECT_NO_THROW(make<float>(s));
  s = small_spec();
  s.widths = {};
  EXPECT_THROW(make<float>(s), std::invalid_argument);
}

TEST(BackboneTest, OutputShapeAndEvalDeterminism) {
  Model<float> m = make<float>(small_spec());
  const auto x = random_tensor<float>(Shape{3, 3, 16, 16}, 1);
  Rng a(1), b(999);
  const auto y1 = model_forward(m, x, Mode::eval, a);
  const auto y2 = model_forward(m, x, Mode::eval, b);
  EXPECT_EQ(y1.shape(), (Shape{3, 4}));
  EXPECT_TRUE(y1 == y2);
}

TEST(BackboneTest, BackboneInitIndependentOfUnits) {
  Model<float> with = make<float>(small_spec());
  Model<float> without = make<float>(plain(small_spec()));
  EXPECT_TRUE(with.stem == without.stem);
  EXPECT_TRUE(with.fc_weight == without.fc_weight);
  for (std::size_t i = 0; i < with.cells.size(); ++i) EXPECT_TRUE(with.cells[i].conv2 == without.cells[i].conv2);
}

TEST(BackboneTest, ZeroProbabilityMatchesCnFreeModel) {
  ModelSpec s = small_spec();
  s.cn.probability = 0.0;
  ModelSpec no_cn = s;
  no_cn.cn_enabled = false;
  Model<float> a = make<float>(s);
  Model<float> b = make<float>(no_cn);
  const auto x = random_tensor<float>(Shape{4, 3, 16, 16}, 2);
  Rng ra(5), rb(5);
  EXPECT_TRUE(model_forward(a, x, Mode::train, ra) == model_forward(b, x, Mode::train, rb));
}

TEST(BackboneTest, IdentityGatesMatchPlainModelEveryPlacement) {
  for (Placement p : {Placement::identity, Placement::pre_residual, Placement::post_residual,
                      Placement::post_addition, Placement::image}) {
    ModelSpec s = small_spec();
    s.placement = p;
    s.cn.probability = 0.0;
    Model<float> units = make<float>(s);
    Model<float> base = make<float>(plain(s));
    const auto x = random_tensor<float>(Shape{4, 3, 16, 16}, 3);
    ForwardOptions<float> opt;
    opt.forced_gates = std::array<double, 2>{1.0, 1.0};
    for (Mode mode : {Mode::train, Mode::eval}) {
      Rng ra(1), rb(1);
      const auto y = model_forward(units, x, mode, ra, opt);
      const auto z = model_forward(base, x, mode, rb);
      EXPECT_LE(max_diff(y, z), 1e-3) << to_string(p);
    }
  }
}

TEST(BackboneTest, DisabledSnMatchesPlainInEval) {
  ModelSpec s = small_spec();
  Model<float> units = make<float>(s);
  Model<float> base = make<float>(plain(s));
  const auto x = random_tensor<float>(Shape{2, 3, 16, 16}, 4);
  ForwardOptions<float> opt;
  opt.disable_all_sn = true;
  Rng r(1);
  EXPECT_TRUE(model_forward(units, x, Mode::eval, r, opt) == model_forward(base, x, Mode::eval, r));
  opt.disable_all_sn = false;
  EXPECT_GT(max_diff(model_forward(units, x, Mode::eval, r, opt), model_forward(base, x, Mode::eval, r)), 1e-4);
}

TEST(BackboneTest, UnitOrderProbes) {
  const auto x = random_tensor<double>(Shape{4, 3, 12, 12}, 5, -2.0, 3.0);
  ModelSpec s = small_spec();
  s.placement = Placement::image;
  s.cn.probability = 1.0;
  s.cn.crop = CropChoice::neither;

  auto expected_cn = [&](const Tensor<double> &in, std::uint64_t seed) {
    Rng r(seed);
    (void)sample_active_units(1, 1, 1.0, r);
    Tape<double> tape;
    return ops::crossnorm(tape.leaf(in), sample_cn_plan(in.shape(), s.cn, r)).value();
  };
  auto capture = [&](Model<double> &m, const std::string &where, std::uint64_t seed) {
    Tape<double> tape;
    Rng r(seed);
    ForwardOptions<double> opt;
    opt.stop_at = where;
    auto pass = model_forward(m, tape, tape.leaf(x), Mode::train, r, opt);
    EXPECT_TRUE(pass.stopped);
    return pass.output.value();
  };

  s.order = UnitOrder::cn_then_sn;
  Model<double> cn_first = make<double>(s);
  const auto after_cn = capture(cn_first, "cn0", 11);
  EXPECT_LE(max_abs_diff(after_cn, expected_cn(x, 11)), 1e-12);
  SnParams<double> p = cn_first.sn[0];
  EXPECT_LE(max_abs_diff(capture(cn_first, "sn0", 11), selfnorm_forward(after_cn, p, Mode::train)), 1e-12);

  s.order = UnitOrder::sn_then_cn;
  Model<double> sn_first = make<double>(s);
  SnParams<double> q = sn_first.sn[0];
  const auto after_sn = selfnorm_forward(x, q, Mode::train);
  EXPECT_LE(max_abs_diff(capture(sn_first, "sn0", 11), after_sn), 1e-12);
  EXPECT_LE(max_abs_diff(capture(sn_first, "cn0", 11), expected_cn(after_sn, 11)), 1e-12);
}

TEST(BackboneTest, PostAdditionUnitSeesCellOutput) {
  ModelSpec s = small_spec();
  s.blocks = {1};
  s.cn_enabled = false;
  Model<double> m = make<double>(s);
  const auto x = random_tensor<double>(Shape{2, 3, 12, 12}, 6);
  ModelSpec bare = plain(s);
  Model<double> b = make<double>(bare);
  Rng r(1);
  ForwardOptions<double> stem;
  stem.stop_at = "cell0";
  const auto cell_out = model_forward(b, x, Mode::eval, r, stem);
  SnParams<double> p = m.sn[0];
  ForwardOptions<double> at_sn;
  at_sn.stop_at = "sn0";
  EXPECT_LE(max_abs_diff(model_forward(m, x, Mode::eval, r, at_sn), selfnorm_forward(cell_out, p, Mode::eval)), 1e-12);
}

TEST(BackboneTest, ActiveUnitsOnlyInTrain) {
  ModelSpec s = small_spec();
  s.cn.probability = 1.0;
  s.cn.active_count = 2;
  Model<float> m = make<float>(s);
  const auto x = random_tensor<float>(Shape{2, 3, 16, 16}, 7);
  Rng r(3);
  Tape<float> tape;
  auto pass = model_forward(m, tape, tape.leaf(x), Mode::train, r);
  std::size_t active = 0;
  for (bool a : pass.active_cn) active += a;
  EXPECT_EQ(active, 2u);
  Tape<float> t2;
  auto eval = model_forward(m, t2, t2.leaf(x), Mode::eval, r);
  for (bool a : eval.active_cn) EXPECT_FALSE(a);
}

TEST(BackboneTest, UnknownLocationRejected) {
  Model<float> m = make<float>(small_spec());
  ForwardOptions<float> opt;
  opt.stop_at = "nowhere";
  Rng r(1);
  EXPECT_THROW(model_forward(m, random_tensor<float>(Shape{2, 3, 16, 16}, 1), Mode::eval, r, opt),
               std::invalid_argument);
}

TEST(BackboneTest, RejectsBadInput) {
  Model<float> m = make<float>(small_spec());
  Rng r(1);
  EXPECT_THROW(model_forward(m, Tensor<float>(Shape{2, 1, 16, 16}), Mode::eval, r), ShapeError);
}

TEST(BackboneTest, CheckpointRoundTrip) {
  Model<float> a = make<float>(small_spec(), 1);
  Model<float> b = make<float>(small_spec(), 2);
  const auto x = random_tensor<float>(Shape{2, 3, 16, 16}, 8);
  Rng r(1);
  a.sn[1].gate_bias[0] = 0.75f;
  std::stringstream buf;
  write_checkpoint(buf, a.to_checkpoint());
  b.load(read_checkpoint(buf));
  EXPECT_TRUE(model_forward(a, x, Mode::eval, r) == model_forward(b, x, Mode::eval, r));

  Model<float> other = make<float>(plain(small_spec()));
  EXPECT_THROW(other.load(a.to_checkpoint()), FormatError);
  Checkpoint renamed = a.to_checkpoint();
  renamed[0].name = "bogus";
  EXPECT_THROW(b.load(renamed), FormatError);
}

TEST(BackboneTest, ParameterNamesUnique) {
  Model<float> m = make<float>(ModelSpec{});
  std::set<std::string> names;
  for (const auto &p : m.parameters()) EXPECT_TRUE(names.insert(p.name).second) << p.name;
  EXPECT_GT(m.parameter_count(), 100000u);
}

TEST(BackboneTest, CellCompositeGradient) {
  ModelSpec s;
  s.widths = {3, 4};
  s.blocks = {1, 2};
  s.cells_per_block = 1;
  s.num_classes = 3;
  s.cn.probability = 1.0;
  s.cn.active_count = 2;
  s.cn.crop = CropChoice::both;
  s.cn.threshold = 0.3;
  for (Placement p : {Placement::post_addition, Placement::pre_residual, Placement::identity}) {
    s.placement = p;
    Model<double> m = make<double>(s, 3);
    for (auto &sn : m.sn) {
      const std::size_t c = sn.channels();
      sn.gate_weight = random_tensor<double>(Shape{c, 2, 2}, 40, -1.0, 1.0);
      sn.gate_bias = random_tensor<double>(Shape{c, 2}, 41, -0.5, 0.5);
    }
    std::vector<Tensor<double>> points{random_tensor<double>(Shape{3, 3, 8, 8}, 9, -1.0, 2.0)};
    for (auto &ref : m.parameters())
      if (ref.trainable) points.push_back(*ref.tensor);
    const std::vector<int> labels{0, 2, 1};
    auto build = [&](Tape<double> &tape, const std::vector<Var<double>> &v) {
      Rng rng(17); // same plan on every evaluation
      ForwardOptions<double> opt;
      std::vector<Var<double>> bound(v.begin() + 1, v.end());
      opt.bound_params = &bound;
      auto pass = model_forward(m, tape, v[0], Mode::train, rng, opt);
      return ops::softmax_cross_entropy(pass.output, std::span<const int>(labels));
    };
    const auto report = grad_check_report(build, points);
    EXPECT_LE(report.max_rel_error, 1e-3) << to_string(p) << " input " << report.worst_input << " index "
                                          << report.worst_index;
  }
}
