#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace bsc;
using testutil::dense_conv;

namespace {

double sigmoid_ref(double a) { return 1.0 / (1.0 + std::exp(-a)); }

// 3x3x3 sub-cube of a 5x5x5 kernel centered at s, enumerated independently.
Matrix<double> window_of(const Matrix<double>& fused, ShiftDirection s) {
  const std::size_t cin = fused.rows() / 125;
  Matrix<double> out(27 * cin, fused.cols());
  std::size_t k = 0;
  for (int dz = -1; dz <= 1; ++dz)
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx, ++k) {
        const std::size_t p = static_cast<std::size_t>(((dz + s.z + 2) * 5 + (dy + s.y + 2)) * 5 + (dx + s.x + 2));
        for (std::size_t a = 0; a < cin; ++a)
          for (std::size_t c = 0; c < fused.cols(); ++c) out(k * cin + a, c) = fused(p * cin + a, c);
      }
  return out;
}

Matrix<double> binarized(const Matrix<double>& w) {
  double s = 0;
  for (double v : w.flat()) s += std::abs(v);
  s /= static_cast<double>(w.size());
  Matrix<double> out(w.rows(), w.cols());
  for (std::size_t i = 0; i < w.size(); ++i) out[i] = w[i] >= 0 ? s : -s;
  return out;
}

struct SupernetCase {
  std::mt19937_64 rng;
  SparseTensor<double> x;
  Geometry geom;
  SupernetConv<double> conv;

  SupernetCase(std::uint64_t seed, std::size_t cin, std::size_t cout, std::size_t groups)
      : rng(seed), x(testutil::random_tensor<double>(rng, 8, 0.15, cin)), geom(x.coords), conv(make(seed, cin, cout, groups)) {}

  static SupernetConv<double> make(std::uint64_t seed, std::size_t cin, std::size_t cout, std::size_t groups) {
    Rng r(seed + 1000);
    return SupernetConv<double>("s", cin, cout, groups, SearchSpace::cube_vertices(), Relaxation::Sigmoid, r);
  }

  Matrix<double> forward(bool binary, const Matrix<double>* input = nullptr) {
    Tape<double> t;
    ForwardContext<double> ctx{t, geom};
    ctx.binary = binary;
    return t.value(conv.forward(ctx, t.input(input ? *input : x.features), 0));
  }

  // Explicit sum over directions of pi-weighted shifted 3x3x3 convolutions.
  Matrix<double> explicit_sum(bool binary, const Matrix<double>& input) {
    const std::size_t cg = conv.out_channels() / conv.groups();
    SparseTensor<double> in{x.coords, input};
    Matrix<double> out(x.num_sites(), conv.out_channels());
    const auto& space = conv.space();
    for (std::size_t g = 0; g < conv.groups(); ++g) {
      const Matrix<double> v = binary ? binarized(conv.fused(g).value) : conv.fused(g).value;
      for (std::size_t j = 0; j < space.size(); ++j) {
        const double pi = sigmoid_ref(conv.alpha().value(g, j));
        auto y = dense_conv(in, window_of(v, space.directions[j]), 3, space.directions[j], x.coords->coords());
        for (std::size_t i = 0; i < y.rows(); ++i)
          for (std::size_t c = 0; c < cg; ++c) out(i, g * cg + c) += pi * y(i, c);
      }
    }
    return out;
  }
};

}  // namespace

// ---------------------------------------------------------------------------
// Relaxation and confidence loss

TEST(Relax, Examples) {
  auto s = relax(Matrix<double>(2, 9, 0.0), Relaxation::Sigmoid);
  for (double v : s.flat()) EXPECT_EQ(v, 0.5);
  auto m = relax(Matrix<double>(3, 9, 1.7), Relaxation::Softmax);
  for (double v : m.flat()) EXPECT_NEAR(v, 1.0 / 9, 1e-15);
}

TEST(Relax, SigmoidElementwiseMonotone) {
  std::mt19937_64 rng(1);
  Matrix<double> a = testutil::random_matrix<double>(rng, 4, 9);
  auto before = relax(a, Relaxation::Sigmoid);
  a(2, 3) += 0.5;
  auto after = relax(a, Relaxation::Sigmoid);
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (i == 2 * 9 + 3) EXPECT_GT(after[i], before[i]);
    else EXPECT_EQ(after[i], before[i]);
  }
}

TEST(Relax, SoftmaxRowsSumToOne) {
  std::mt19937_64 rng(2);
  auto p = relax(testutil::random_matrix<double>(rng, 50, 9, 5.0), Relaxation::Softmax);
  for (std::size_t r = 0; r < 50; ++r) {
    double s = 0;
    for (double v : p.row(r)) s += v;
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Confidence, SigmoidExamples) {
  EXPECT_EQ(confidence_loss(Matrix<double>(3, 9, 0.5), Relaxation::Sigmoid), 0.0);
  Matrix<double> ends(2, 4);
  for (std::size_t i = 0; i < ends.size(); ++i) ends[i] = static_cast<double>(i % 2);
  EXPECT_EQ(confidence_loss(ends, Relaxation::Sigmoid), -0.5);
  EXPECT_NEAR(confidence_loss(Matrix<double>{{0.9, 0.1}}, Relaxation::Sigmoid), -0.4, 1e-15);
}

TEST(Confidence, SigmoidBounds) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 10000; ++i) {
    Matrix<double> p(1 + rng() % 4, 1 + rng() % 9);
    for (auto& v : p.flat()) v = u(rng);
    const double l = confidence_loss(p, Relaxation::Sigmoid);
    EXPECT_GE(l, -0.5);
    EXPECT_LE(l, 0.0);
  }
}

TEST(Confidence, SoftmaxIsLogOfRowMax) {
  Matrix<double> p{{0.2, 0.5, 0.3}, {0.7, 0.2, 0.1}};
  EXPECT_NEAR(confidence_loss(p, Relaxation::Softmax), -std::log(0.5) - std::log(0.7), 1e-14);
  EXPECT_EQ(confidence_loss(Matrix<double>{{1.0, 0.0}}, Relaxation::Softmax), 0.0);
}

TEST(Confidence, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(4);
  for (Relaxation mode : {Relaxation::Sigmoid, Relaxation::Softmax}) {
    Matrix<double> a = testutil::random_matrix<double>(rng, 3, 9);
    auto loss = [&]() {
      Tape<double> t;
      return t.value(confidence_loss(t, relax(t, t.input(a), mode), mode))[0];
    };
    Tape<double> t;
    Var va = t.input(a);
    t.backward(confidence_loss(t, relax(t, va, mode), mode));
    EXPECT_LT(testutil::max_rel_err(t.grad(va), testutil::numeric_grad(a, loss)), 1e-5) << to_string(mode);
  }
}

// ---------------------------------------------------------------------------
// Fused supernet layer

TEST(Supernet, FusedEqualsExplicitSum) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const std::size_t cin = 1 + seed % 3, groups = 1 + seed % 2;
    SupernetCase c(seed, cin, 2 * groups, groups);
    std::normal_distribution<double> n(0.0, 2.0);
    for (auto& v : c.conv.alpha().value.flat()) v = n(c.rng);
    const bool binary = seed % 2 == 1;
    Matrix<double> in = c.x.features;
    if (binary)
      for (auto& v : in.flat()) v = v >= 0 ? 1.0 : -1.0;
    EXPECT_LT(testutil::scaled_err(c.forward(binary, &in), c.explicit_sum(binary, in)), 1e-10) << seed;
  }
}

TEST(Supernet, OneHotCollapsesToShiftedLayer) {
  SupernetCase c(7, 3, 8, 4);
  const auto& space = c.conv.space();
  const std::vector<std::size_t> pick{0, 3, 8, 3};
  for (std::size_t g = 0; g < 4; ++g)
    for (std::size_t j = 0; j < space.size(); ++j) c.conv.alpha().value(g, j) = j == pick[g] ? 60.0 : -60.0;
  const Matrix<double> y = c.forward(false);

  Rng r(1);
  std::vector<ShiftDirection> dirs;
  for (auto j : pick) dirs.push_back(space.directions[j]);
  SfscConv<double> discrete("d", 3, 8, 4, dirs, 3, r);
  for (std::size_t g = 0; g < 4; ++g) discrete.weight(g).value = extract_subwindow(c.conv.fused(g).value, dirs[g]);
  Tape<double> t;
  ForwardContext<double> ctx{t, c.geom};
  const Matrix<double> ref = t.value(discrete.forward(ctx, t.input(c.x.features), 0));
  EXPECT_LT(testutil::scaled_err(y, ref), 1e-12);
}

TEST(Supernet, ZeroSelectorGivesZeroOutput) {
  SupernetCase c(8, 2, 4, 2);
  c.conv.alpha().value.fill(-1000.0);
  const Matrix<double> y = c.forward(false);
  for (double v : y.flat()) EXPECT_EQ(v, 0.0);
}

TEST(Supernet, SubwindowExtractionMatchesIndependentIndexing) {
  std::mt19937_64 rng(9);
  Matrix<double> v = testutil::random_matrix<double>(rng, 125 * 2, 3);
  for (const auto& s : SearchSpace::cube_vertices().directions) EXPECT_TRUE(extract_subwindow(v, s) == window_of(v, s));
}

TEST(Supernet, SpaceTooLarge) {
  SearchSpace s;
  s.directions = {{0, 0, 0}, {2, 0, 0}};
  Rng r(1);
  try {
    SupernetConv<double> conv("s", 1, 1, 1, s, Relaxation::Sigmoid, r);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::SpaceTooLarge);
  }
}

TEST(Supernet, SelectorGradientMatchesFiniteDifferences) {
  for (bool binary : {false, true}) {
    SupernetCase c(10, 2, 4, 2);
    std::normal_distribution<double> n(0.0, 1.0);
    for (auto& v : c.conv.alpha().value.flat()) v = n(c.rng);
    const Matrix<double> p = testutil::probe(c.x.num_sites(), 4, 77);
    auto build = [&](Tape<double>& t) {
      ForwardContext<double> ctx{t, c.geom};
      ctx.binary = binary;
      return testutil::project(t, c.conv.forward(ctx, t.constant(c.x.features), 0), p);
    };
    auto loss = [&]() {
      Tape<double> t;
      return t.value(build(t))[0];
    };
    c.conv.alpha().zero_grad();
    c.conv.fused(0).zero_grad();
    Tape<double> t;
    t.backward(build(t));
    EXPECT_LT(testutil::max_rel_err(c.conv.alpha().grad, testutil::numeric_grad(c.conv.alpha().value, loss)), 1e-3);
    if (!binary) {
      EXPECT_LT(testutil::max_rel_err(c.conv.fused(0).grad, testutil::numeric_grad(c.conv.fused(0).value, loss)),
                1e-5);
    }
  }
}

// ---------------------------------------------------------------------------
// Derivation

TEST(Derive, ArgmaxExamplesAndInvariance) {
  Matrix<double> a{{2.0, -1.0, 0.5, 0.0, 1.9, -3.0, 0.0, 0.0, 0.0}, {0.3, 0.3, 0.1, 0.3, 0, 0, 0, 0, 0}};
  EXPECT_EQ(argmax_rows(a), (std::vector<std::size_t>{0, 0}));
  std::mt19937_64 rng(11);
  for (int k = 0; k < 100; ++k) {
    Matrix<double> r = testutil::random_matrix<double>(rng, 4, 9);
    const auto base = argmax_rows(r);
    Matrix<double> shifted = r, mapped = r;
    for (std::size_t i = 0; i < r.rows(); ++i) {
      const double c = testutil::random_matrix<double>(rng, 1, 1, 10.0)[0];
      for (auto& v : shifted.row(i)) v += c;
      for (auto& v : mapped.row(i)) v = std::exp(0.5 * v) + c;
    }
    EXPECT_EQ(argmax_rows(shifted), base);
    EXPECT_EQ(argmax_rows(mapped), base);
  }
}

class DeriveNetwork : public ::testing::Test {
 protected:
  NetworkSpec spec = [] {
    auto s = testutil::tiny_spec(Family::Unet, 4);
    s.search_mode = true;
    return s;
  }();
  Network<double> supernet{spec, 3};
  std::mt19937_64 rng{5};

  void randomize_state() {
    std::normal_distribution<double> n(0.0, 0.3);
    supernet.visit_buffers([&](const std::string& name, Matrix<double>& m) {
      for (auto& v : m.flat()) v = name.find("var") != std::string::npos ? 0.5 + std::abs(n(rng)) : n(rng);
    });
  }
};

TEST_F(DeriveNetwork, SaturatedSupernetEqualsDerivedNetwork) {
  randomize_state();
  ShiftConfig expected;
  for (auto* b : supernet.blocks()) {
    auto& sup = std::get<SupernetConv<double>>(b->conv());
    auto& layer = expected.layers.emplace_back();
    for (std::size_t g = 0; g < sup.groups(); ++g) {
      const std::size_t j = rng() % sup.space().size();
      layer.push_back(sup.space().directions[j]);
      for (std::size_t k = 0; k < sup.space().size(); ++k) sup.alpha().value(g, k) = k == j ? 60.0 : -60.0;
    }
  }
  Network<double> derived = derive_architecture(supernet);
  EXPECT_EQ(derived.shift_config(), expected);
  EXPECT_FALSE(derived.spec().search_mode);

  auto scene = testutil::small_scenes(1, 4, 2000);
  VoxelConfig vox;
  vox.resolution = 0.1;
  auto batch = make_batch<double>({&scene[0]}, vox);
  EXPECT_LT(testutil::scaled_err(derived.infer(batch.input), supernet.infer(batch.input)), 1e-9);
}

TEST_F(DeriveNetwork, NonSearchableStateCopiedVerbatim) {
  randomize_state();
  Network<double> derived = derive_architecture(supernet);
  std::map<std::string, Matrix<double>> src;
  supernet.visit_parameters([&](Parameter<double>& p) { src[p.name] = p.value; });
  supernet.visit_buffers([&](const std::string& n, Matrix<double>& m) { src[n] = m; });
  std::size_t shared = 0;
  derived.visit_parameters([&](Parameter<double>& p) {
    auto it = src.find(p.name);
    if (it == src.end()) {
      EXPECT_NE(p.name.find(".conv.g"), std::string::npos) << p.name;
      return;
    }
    EXPECT_TRUE(it->second == p.value) << p.name;
    ++shared;
  });
  derived.visit_buffers([&](const std::string& n, Matrix<double>& m) { EXPECT_TRUE(src.at(n) == m) << n; });
  EXPECT_GT(shared, 10u);
}

TEST_F(DeriveNetwork, DefaultSelectorsPickNoShift) {
  Network<double> derived = derive_architecture(supernet);
  EXPECT_EQ(derived.shift_config(), ShiftConfig::uniform(spec.num_searchable_layers(), 4));
}

TEST_F(DeriveNetwork, ScaleByPiMultipliesSubwindow) {
  auto* b = supernet.blocks()[0];
  auto& sup = std::get<SupernetConv<double>>(b->conv());
  sup.alpha().value(0, 5) = 1.5;
  Network<double> plain = derive_architecture(supernet);
  Network<double> scaled = derive_architecture(supernet, true);
  auto& wp = std::get<SfscConv<double>>(plain.blocks()[0]->conv()).weight(0).value;
  auto& ws = std::get<SfscConv<double>>(scaled.blocks()[0]->conv()).weight(0).value;
  EXPECT_TRUE(wp == window_of(sup.fused(0).value, sup.space().directions[5]));
  for (std::size_t i = 0; i < wp.size(); ++i) EXPECT_NEAR(ws[i], wp[i] * sigmoid_ref(1.5), 1e-15);
}

// ---------------------------------------------------------------------------
// Design space and shift configurations

TEST(DesignSpace, PaperCount) {
  EXPECT_EQ(to_scientific(design_space_size(8, 4, 13)), "9.1e46");
  EXPECT_EQ(design_space_size(8, 4, 13), BigInt(1) << 156);
  EXPECT_EQ(design_space_size(1, 8, 40), BigInt(1));
}

TEST(DesignSpace, RepeatedMultiplication) {
  BigInt v = 1;
  for (int i = 0; i < 104; ++i) v *= 9;
  EXPECT_EQ(design_space_size(9, 8, 13), v);
  EXPECT_EQ(v.str().size(), 100u);  // 9^104 has 100 digits
}

TEST(DesignSpace, ScientificRounding) {
  EXPECT_EQ(to_scientific(BigInt(12)), "12");
  EXPECT_EQ(to_scientific(BigInt(996)), "1.0e3");
  EXPECT_EQ(to_scientific(BigInt(123456), 3), "1.23e5");
}

TEST(ManualShift, Presets) {
  auto sc = manual_shift_config(ManualPreset::Scannet, 8, 5);
  ASSERT_EQ(sc.layers.size(), 5u);
  const std::vector<ShiftDirection> scannet{{0, 0, 0}, {0, 0, 0}, {0, 0, 0}, {0, 0, 0},
                                            {1, 1, 1}, {1, 1, 1}, {-1, -1, -1}, {-1, -1, -1}};
  for (const auto& l : sc.layers) EXPECT_EQ(l, scannet);
  auto nyu = manual_shift_config(ManualPreset::Nyu, 4, 1);
  EXPECT_EQ(nyu.layers[0], (std::vector<ShiftDirection>{{0, 0, 0}, {0, 0, 0}, {1, 1, 0}, {-1, -1, 0}}));
  try {
    manual_shift_config(ManualPreset::Scannet, 6, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::IndivisibleGroups);
  }
  EXPECT_EQ(parse_manual_preset("nyu"), ManualPreset::Nyu);
  EXPECT_THROW(parse_manual_preset("kitti"), Error);
}

TEST(RandomShift, SingletonSpaceAndSeed) {
  SearchSpace one;
  one.directions = {{0, 0, 0}};
  EXPECT_EQ(random_shift_config(one, 8, 4, 3), ShiftConfig::uniform(4, 8));
  auto space = SearchSpace::cube_vertices();
  EXPECT_EQ(random_shift_config(space, 8, 4, 3), random_shift_config(space, 8, 4, 3));
  EXPECT_NE(random_shift_config(space, 8, 4, 3), random_shift_config(space, 8, 4, 4));
}

TEST(RandomShift, FrequenciesNearUniform) {
  auto space = SearchSpace::cube_vertices();
  auto cfg = random_shift_config(space, 10, 1000, 42);
  std::vector<int> count(space.size(), 0);
  for (const auto& l : cfg.layers)
    for (const auto& d : l) ++count[static_cast<std::size_t>(space.index_of(d))];
  const double n = 10000, p = 1.0 / 9;
  const double sigma = std::sqrt(n * p * (1 - p));
  double chi2 = 0;
  for (int c : count) {
    EXPECT_LT(std::abs(c - n * p), 3 * sigma);
    chi2 += (c - n * p) * (c - n * p) / (n * p);
  }
  EXPECT_LT(chi2, 26.1);  // chi-square(8) at 0.999
}

TEST(ShiftConfigText, RoundTripAndErrors) {
  auto cfg = random_shift_config(SearchSpace::cube_vertices(), 8, 6, 1);
  const std::string text = format_shift_config(cfg);
  EXPECT_EQ(parse_shift_config(text), cfg);
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 6);
  try {
    parse_shift_config("0,0,0 1,1\n");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::ParseError);
  }
}

TEST(SearchSpaceTest, DefaultOrderingAndValidation) {
  auto s = SearchSpace::cube_vertices();
  ASSERT_EQ(s.size(), 9u);
  EXPECT_EQ(s.directions[0], (ShiftDirection{0, 0, 0}));
  EXPECT_EQ(s.directions[1], (ShiftDirection{-1, -1, -1}));
  EXPECT_EQ(s.directions[8], (ShiftDirection{1, 1, 1}));
  SearchSpace dup;
  dup.directions = {{0, 0, 0}, {1, 1, 1}, {1, 1, 1}};
  EXPECT_THROW(dup.validate(), Error);
  SearchSpace nozero;
  nozero.directions = {{1, 1, 1}};
  EXPECT_THROW(nozero.validate(), Error);
}

// A strongly weighted confidence term drives the selectors to the ends.
TEST(SearchStage, LargeConfidenceWeightSaturatesSelectors) {
  Dataset data;
  data.train = testutil::small_scenes(2, 31, 1500);
  data.val = data.train;
  TrainOptions opt;
  opt.batch_size = 1;
  opt.voxel.resolution = 0.1;
  auto spec = testutil::tiny_spec(Family::Unet, 4);
  spec.search_mode = true;
  Network<float> net(spec, 2);
  StageConfig st = default_stages(Pipeline::Search, Family::Unet, 20)[0];
  st.confidence_weight = 10.0;
  st.arch_lr = 0.3;
  run_stage(net, data, st, opt);
  double dev = 0;
  std::size_t n = 0;
  for (auto* b : net.blocks()) {
    auto& sup = std::get<SupernetConv<float>>(b->conv());
    const auto pi = relax(sup.alpha().value, Relaxation::Sigmoid);
    for (float p : pi.flat()) dev += std::abs(p - 0.5), ++n;
  }
  EXPECT_GE(dev / static_cast<double>(n), 0.4);
}
