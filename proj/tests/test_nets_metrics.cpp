#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace bsc;

namespace {

std::map<std::string, std::vector<std::size_t>> shapes(Network<float>& net) {
  std::map<std::string, std::vector<std::size_t>> out;
  net.visit_parameters([&](Parameter<float>& p) { out[p.name] = p.shape; });
  return out;
}

SparseTensor<float> sample_input(std::uint64_t seed, std::size_t channels = 1) {
  std::mt19937_64 rng(seed);
  auto x = testutil::random_tensor<float>(rng, 12, 0.1, channels);
  for (auto& v : x.features.flat()) v = 1.0f;
  return x;
}

}  // namespace

// ---------------------------------------------------------------------------
// Channel plans and shapes

TEST(ChannelPlan, UnetSmallEncoder) {
  auto spec = network_preset("unet-s");
  std::vector<std::size_t> widths;
  for (std::size_t k = 0; k < spec.levels; ++k) widths.push_back(spec.channels(k));
  EXPECT_EQ(widths, (std::vector<std::size_t>{16, 32, 48, 64, 80, 96}));
  Network<float> net(spec);
  auto s = shapes(net);
  EXPECT_EQ(s.at("input.conv.w"), (std::vector<std::size_t>{27, 1, 16}));
  EXPECT_EQ(s.at("enc5.block0.conv.g0.w"), (std::vector<std::size_t>{27, 96, 12}));
  EXPECT_EQ(s.at("down4.conv.w"), (std::vector<std::size_t>{8, 80, 96}));
  // Decoder mirrors the encoder; its first block sees the concatenated skip.
  EXPECT_EQ(s.at("up4.conv.w"), (std::vector<std::size_t>{8, 96, 80}));
  EXPECT_EQ(s.at("dec4.block0.conv.g0.w"), (std::vector<std::size_t>{27, 160, 10}));
  EXPECT_EQ(s.at("dec0.block0.proj.w"), (std::vector<std::size_t>{1, 32, 16}));
  EXPECT_EQ(s.count("enc6.block0.conv.g0.w"), 0u);
  EXPECT_EQ(spec.num_searchable_layers(), 11u);
}

TEST(ChannelPlan, FcnHuge) {
  auto spec = network_preset("fcn-h");
  EXPECT_EQ(spec.channels(0), 24u);
  EXPECT_EQ(spec.blocks_per_level, 2u);
  Network<float> net(spec);
  auto s = shapes(net);
  EXPECT_EQ(s.at("input.conv.w"), (std::vector<std::size_t>{27, 1, 24}));
  EXPECT_EQ(s.count("enc0.block1.conv.g0.w"), 1u);
  EXPECT_EQ(s.count("enc0.block2.conv.g0.w"), 0u);
  EXPECT_EQ(s.at("enc7.block0.conv.g0.w"), (std::vector<std::size_t>{27, 192, 24}));
  EXPECT_EQ(s.at("score7.w"), (std::vector<std::size_t>{1, 192, 24}));
  EXPECT_EQ(s.count("up0.conv.w"), 0u);
  EXPECT_EQ(spec.num_searchable_layers(), 16u);
}

TEST(ChannelPlan, OtherPresets) {
  EXPECT_EQ(network_preset("fcn-s").channels(7), 128u);
  EXPECT_EQ(network_preset("unet-h").channels(5), 192u);
  EXPECT_THROW(network_preset("unet-xl"), Error);
}

TEST(NetworkSpecTest, ValidationErrors) {
  auto spec = testutil::tiny_spec();
  spec.groups = 3;
  try {
    Network<float> net(spec);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::InvalidSpec);
  }
  spec = testutil::tiny_spec();
  spec.shift_config = ShiftConfig::uniform(2, 8);
  EXPECT_THROW(spec.validate(), Error);
  spec = testutil::tiny_spec();
  spec.kernel_size = 4;
  EXPECT_THROW(spec.validate(), Error);
}

TEST(NetworkSpecTest, JsonRoundTrip) {
  auto spec = testutil::tiny_spec(Family::Fcn, 4);
  spec.binary = true;
  spec.relaxation = Relaxation::Softmax;
  spec.shift_config = random_shift_config(spec.space, 4, spec.num_searchable_layers(), 9);
  auto back = network_spec_from_json(nlohmann::json::parse(to_json(spec).dump()));
  EXPECT_EQ(to_json(back), to_json(spec));
  EXPECT_EQ(back.shift_config, spec.shift_config);
  EXPECT_THROW(network_spec_from_json(nlohmann::json{{"family", "unet"}}), Error);
}

TEST(NetworkShapes, LogitsPerSiteForEveryVariant) {
  auto x = sample_input(3);
  for (Family f : {Family::Fcn, Family::Unet})
    for (bool binary : {false, true})
      for (bool search : {false, true}) {
        auto spec = testutil::tiny_spec(f);
        spec.binary = binary;
        spec.search_mode = search;
        Network<float> net(spec, 1);
        const Matrix<float> y = net.infer(x);
        EXPECT_EQ(y.rows(), x.num_sites());
        EXPECT_EQ(y.cols(), 3u);
        for (float v : y.flat()) EXPECT_TRUE(std::isfinite(v));
      }
}

TEST(NetworkShapes, ManualShiftConfigApplied) {
  auto spec = testutil::tiny_spec();
  spec.shift_config = manual_shift_config(ManualPreset::Nyu, 8, spec.num_searchable_layers());
  Network<float> net(spec, 1);
  EXPECT_EQ(net.shift_config(), *spec.shift_config);
  auto other = random_shift_config(spec.space, 8, spec.num_searchable_layers(), 4);
  net.apply_shift_config(other);
  EXPECT_EQ(net.shift_config(), other);
  EXPECT_THROW(net.apply_shift_config(ShiftConfig::uniform(1, 8)), Error);
}

// ---------------------------------------------------------------------------
// Metrics

TEST(MetricsTest, PerfectPrediction) {
  std::vector<std::int32_t> y{0, 1, 2, 2, 1};
  auto m = compute_metrics(y, y, 3);
  EXPECT_EQ(m.miou, 1.0);
  EXPECT_EQ(m.macc, 1.0);
  EXPECT_EQ(m.acc, 1.0);
}

TEST(MetricsTest, HandConfusionMatrix) {
  std::vector<std::int32_t> pred{0, 0, 0, 0}, truth{0, 0, 1, 1};
  auto m = compute_metrics(pred, truth, 2);
  EXPECT_DOUBLE_EQ(m.acc, 0.5);
  EXPECT_DOUBLE_EQ(m.per_class_iou[0], 0.5);
  EXPECT_DOUBLE_EQ(m.per_class_iou[1], 0.0);
  EXPECT_DOUBLE_EQ(m.miou, 0.25);
  EXPECT_DOUBLE_EQ(m.macc, 0.5);
}

TEST(MetricsTest, AbsentClassesAndIgnore) {
  std::vector<std::int32_t> pred{0, 1, 1, 2}, truth{0, 1, -1, -1};
  auto m = compute_metrics(pred, truth, 4);
  EXPECT_EQ(m.miou, 1.0);
  EXPECT_TRUE(std::isnan(m.per_class_iou[2]));
  EXPECT_TRUE(std::isnan(m.per_class_iou[3]));
  auto j = to_json(m);
  EXPECT_TRUE(j["per_class_iou"][3].is_null());
}

TEST(MetricsTest, Errors) {
  std::vector<std::int32_t> a{0, 1}, b{0};
  try {
    compute_metrics(a, b, 2);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LengthMismatch);
  }
  std::vector<std::int32_t> bad{5};
  EXPECT_THROW(compute_metrics(bad, bad, 2), Error);
}

// Independent per-class set intersections.
TEST(MetricsTest, SetArithmeticOracle) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t C = 2 + rng() % 5, n = 1 + rng() % 300;
    std::vector<std::int32_t> pred(n), truth(n);
    for (std::size_t i = 0; i < n; ++i) {
      pred[i] = static_cast<std::int32_t>(rng() % C);
      truth[i] = rng() % 10 == 0 ? -1 : static_cast<std::int32_t>(rng() % C);
    }
    auto m = compute_metrics(pred, truth, C);
    double iou = 0, accs = 0;
    int iou_n = 0, acc_n = 0;
    std::size_t correct = 0, valid = 0;
    for (std::size_t c = 0; c < C; ++c) {
      std::set<std::size_t> P, G;
      for (std::size_t i = 0; i < n; ++i) {
        if (truth[i] < 0) continue;
        if (pred[i] == static_cast<std::int32_t>(c)) P.insert(i);
        if (truth[i] == static_cast<std::int32_t>(c)) G.insert(i);
      }
      std::vector<std::size_t> inter, uni;
      std::set_intersection(P.begin(), P.end(), G.begin(), G.end(), std::back_inserter(inter));
      std::set_union(P.begin(), P.end(), G.begin(), G.end(), std::back_inserter(uni));
      if (!uni.empty()) iou += static_cast<double>(inter.size()) / uni.size(), ++iou_n;
      if (!G.empty()) accs += static_cast<double>(inter.size()) / G.size(), ++acc_n;
      correct += inter.size();
      valid += G.size();
    }
    EXPECT_NEAR(m.miou, iou_n ? iou / iou_n : 0.0, 1e-12);
    EXPECT_NEAR(m.macc, acc_n ? accs / acc_n : 0.0, 1e-12);
    EXPECT_NEAR(m.acc, valid ? static_cast<double>(correct) / valid : 0.0, 1e-12);
    for (double v : {m.miou, m.macc, m.acc}) {
      EXPECT_GE(v, 0.0);
      EXPECT_LE(v, 1.0);
    }
  }
}

TEST(MetricsTest, PredictLabelsTiesLowest) {
  Matrix<float> logits{{0.1f, 0.5f, 0.5f}, {2.0f, -1.0f, 0.0f}};
  EXPECT_EQ(predict_labels(logits), (std::vector<std::int32_t>{1, 0}));
}

// ---------------------------------------------------------------------------
// Sign correspondence

TEST(SignCorrespondence, SelfIsOne) {
  auto x = sample_input(5);
  for (bool binary : {false, true}) {
    auto spec = testutil::tiny_spec();
    spec.binary = binary;
    Network<float> net(spec, 2);
    EXPECT_EQ(sign_correspondence(net, net, x), 1.0);
  }
}

TEST(SignCorrespondence, LayerNotFound) {
  auto x = sample_input(5);
  Network<float> net(testutil::tiny_spec(), 2);
  try {
    sign_correspondence(net, net, x, "enc9.block0.conv");
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::LayerNotFound);
  }
}

// With +-1 weights and +-1 inputs the real and binary paths coincide.
TEST(SignCorrespondence, UnitWeightsAndInputsAgree) {
  std::mt19937_64 rng(6);
  auto x = testutil::random_tensor<double>(rng, 9, 0.2, 4);
  for (auto& v : x.features.flat()) v = v >= 0 ? 1.0 : -1.0;
  Geometry geo(x.coords);
  Rng init(1);
  SfscConv<double> conv("c", 4, 8, 2, {{0, 0, 0}, {1, 1, -1}}, 3, init);
  for (std::size_t g = 0; g < 2; ++g)
    for (auto& v : conv.weight(g).value.flat()) v = v >= 0 ? 1.0 : -1.0;
  auto run = [&](bool binary) {
    Tape<double> t;
    ForwardContext<double> ctx{t, geo};
    ctx.binary = binary;
    Var in = t.input(x.features);
    return t.value(conv.forward(ctx, binary ? sign_activation(t, in) : in, 0));
  };
  const Matrix<double> real = run(false), bin = run(true);
  EXPECT_TRUE(real == bin);
  EXPECT_EQ(sign_agreement(real, bin), 1.0);
}

// Negating the first binary layer flips every sign: with a 1x1 kernel and an
// odd input width the binary outputs are never zero.
TEST(SignCorrespondence, NegationComplements) {
  NetworkSpec spec;
  spec.family = Family::Unet;
  spec.levels = 2;
  spec.base_filters = 5;
  spec.filters_step = 5;
  spec.groups = 1;
  spec.kernel_size = 1;
  spec.num_classes = 3;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto x = sample_input(10 + seed);
    std::mt19937_64 rng(seed);
    for (auto& v : x.features.flat()) v = static_cast<float>(testutil::random_matrix<double>(rng, 1, 1)[0]);
    Network<float> real(spec, seed);
    auto bspec = spec;
    bspec.binary = true;
    Network<float> bin(bspec, seed), neg(bspec, seed);
    copy_matching_state(real, bin);
    copy_matching_state(real, neg);
    auto& w = std::get<SfscConv<float>>(neg.blocks()[0]->conv()).weight(0).value;
    for (auto& v : w.flat()) v = -v;
    const double a = sign_correspondence(real, bin, x);
    const double b = sign_correspondence(real, neg, x);
    EXPECT_NEAR(a + b, 1.0, 1e-12) << seed;
  }
}

// ---------------------------------------------------------------------------
// Cost

TEST(Cost, FormulaArithmetic) {
  EXPECT_DOUBLE_EQ(combine_ops(6.4e9, 1.0e7), 1.1e8);
  EXPECT_DOUBLE_EQ(storage_millions(100000, 3200000), 0.2);
}

// Two-level FCN (widths 4, 8; 4 groups) on three collinear sites
// (0,0,0), (1,0,0), (2,0,0). Level-0 3x3x3 map: 7 pairs. Level 1 holds
// parents (0,0,0) and (2,0,0): 3 down pairs, 4 same-level pairs.
//
//   layer            kind    count
//   input conv       flop    2*7*1*4        = 56
//   input bn/prelu   flop    2*12 + 12      = 36
//   enc0 groups      bop     4 * 2*7*4*1    = 224
//   enc0 bn/prelu    flop    36
//   down0 conv       bop     2*3*4*8        = 192
//   down0 bn/prelu   flop    2*16 + 16      = 48
//   down0 skip 1x1   flop    2*2*4*8        = 128
//   enc1 groups      bop     4 * 2*4*8*2    = 512
//   enc1 bn/prelu    flop    48
//   score1 / score0  flop    2*2*8*4 + 2*3*4*4 = 224
//   classifier       flop    2*3*4*3        = 72
//
//   parameters (binary net)
//   input   108 + 8 + 4               real 120
//   enc0    4*108 bits, 4 scales + 12  real 16, bits 432
//   down0   256 bits, 1 scale + 24, skip 32   real 57, bits 256
//   enc1    4*432 bits, 4 scales + 24  real 28, bits 1728
//   scores  16 + 32, classifier 15     real 63
TEST(Cost, HandCountFixture) {
  NetworkSpec spec;
  spec.family = Family::Fcn;
  spec.levels = 2;
  spec.base_filters = 4;
  spec.filters_step = 4;
  spec.groups = 4;
  spec.num_classes = 3;
  spec.binary = true;
  Network<float> net(spec, 1);
  auto x = build_sparse_tensor<float>({{0, 0, 0, 0}, {0, 1, 0, 0}, {0, 2, 0, 0}}, Matrix<float>(3, 1, 1.0f), 1);
  auto c = count_cost(net, x);
  EXPECT_EQ(c.bops, 928.0);
  EXPECT_EQ(c.flops, 648.0);
  EXPECT_EQ(c.ops, 928.0 / 64 + 648.0);
  EXPECT_EQ(c.ops - c.bops / 64 - c.flops, 0.0);
  EXPECT_EQ(c.params_real, 284u);
  EXPECT_EQ(c.params_binary, 2416u);
  EXPECT_DOUBLE_EQ(c.storage_m, (284 + 2416 / 32.0) / 1e6);
  EXPECT_EQ(c.sites, 3u);

  net.set_binary(false);
  auto r = count_cost(net, x);
  EXPECT_EQ(r.bops, 0.0);
  EXPECT_EQ(r.flops, 928.0 + 648.0);
  EXPECT_EQ(r.params_binary, 0u);
  EXPECT_EQ(r.params_real, 284u - 9u + 2416u);
}

TEST(Cost, RealLayersStayRealInBinaryNetwork) {
  auto spec = testutil::tiny_spec();
  spec.binary = true;
  Network<float> net(spec, 1);
  std::uint64_t exempt = 0;
  net.visit_parameters([&](Parameter<float>& p) {
    if (p.name.rfind("input.", 0) == 0 || p.name.rfind("cls.", 0) == 0) {
      EXPECT_EQ(p.kind, ParamKind::Real) << p.name;
      exempt += p.value.size();
    }
  });
  auto c = count_cost(net, sample_input(2));
  EXPECT_GE(c.params_real, exempt);
  EXPECT_EQ(c.ops - c.bops / 64 - c.flops, 0.0);
  EXPECT_GT(c.bops, 0.0);
}

TEST(Cost, SelectorLogitsExcluded) {
  auto spec = testutil::tiny_spec();
  spec.search_mode = true;
  Network<float> net(spec, 1);
  std::uint64_t total = 0, arch = 0;
  net.visit_parameters([&](Parameter<float>& p) {
    total += p.value.size();
    if (p.kind == ParamKind::Arch) arch += p.value.size();
  });
  CostReport r;
  count_parameters(net, r);
  EXPECT_GT(arch, 0u);
  EXPECT_EQ(r.params_real, total - arch);
}
