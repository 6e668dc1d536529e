#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>

#include "test_util.hpp"

using namespace bsc;

namespace {

SparseTensor<float> occupancy_input(std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto x = testutil::random_tensor<float>(rng, 12, 0.1, 1);
  for (auto& v : x.features.flat()) v = 1.0f;
  return x;
}

// Random parameters and buffers so nothing is left at its initial value.
void scramble(Network<float>& net, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<float> n(0.0f, 0.5f);
  net.visit_parameters([&](Parameter<float>& p) {
    for (auto& v : p.value.flat()) v = n(rng);
  });
  net.visit_buffers([&](const std::string& name, Matrix<float>& m) {
    const bool variance = name.find("var") != std::string::npos;
    for (auto& v : m.flat()) v = variance ? 0.5f + std::abs(n(rng)) : n(rng);
  });
}

std::string with_crc(std::string body) {
  body.resize(body.size() - 4);
  const auto crc = detail::crc32_of(std::span<const char>(body.data(), body.size()));
  detail::put_le<std::uint32_t>(body, crc);
  return body;
}

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::InvalidConfig;
}

std::filesystem::path temp_path(const std::string& name) {
  return std::filesystem::temp_directory_path() / ("bsc_test_" + name);
}

}  // namespace

TEST(Checkpoint, RoundTripGivesBitwiseIdenticalOutputs) {
  const auto x = occupancy_input(5);
  for (Family f : {Family::Fcn, Family::Unet})
    for (bool binary : {false, true})
      for (bool search : {false, true}) {
        auto spec = testutil::tiny_spec(f);
        spec.binary = binary;
        spec.search_mode = search;
        if (!search) {
          spec.shift_config = random_shift_config(spec.space, spec.groups, spec.num_searchable_layers(), 9);
        }
        Network<float> net(spec, 3);
        scramble(net, 17);
        const auto path = temp_path("roundtrip.bsc");
        save_checkpoint(path, net, {{"note", "x"}});
        nlohmann::json extra;
        Network<float> back = load_checkpoint<float>(path, &extra);
        EXPECT_EQ(extra.at("note"), "x");
        EXPECT_EQ(back.binary(), binary);
        if (!search) {
          EXPECT_EQ(back.shift_config(), net.shift_config());
        }
        const auto a = net.infer(x), b = back.infer(x);
        ASSERT_EQ(a.size(), b.size());
        EXPECT_EQ(0, std::memcmp(a.flat().data(), b.flat().data(), a.size() * sizeof(float)));
        std::filesystem::remove(path);
      }
}

TEST(Checkpoint, LoadIntoMatchingSpec) {
  auto spec = testutil::tiny_spec();
  spec.binary = true;
  Network<float> net(spec, 2);
  scramble(net, 4);
  const auto path = temp_path("spec.bsc");
  save_checkpoint(path, net);
  auto requested = testutil::tiny_spec();  // real mode: precision comes from the file
  Network<float> back = load_checkpoint<float>(path, requested);
  EXPECT_TRUE(back.binary());
  const auto x = occupancy_input(6);
  const auto a = net.infer(x), b = back.infer(x);
  EXPECT_EQ(0, std::memcmp(a.flat().data(), b.flat().data(), a.size() * sizeof(float)));
  std::filesystem::remove(path);
}

TEST(Checkpoint, TruncationAndCorruptionDetected) {
  Network<float> net(testutil::tiny_spec(), 1);
  const std::string good = serialize_checkpoint(net);
  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{11}, good.size() / 2, good.size() - 1}) {
    EXPECT_EQ(code_of([&] { parse_checkpoint(good.substr(0, cut)); }), ErrorCode::ChecksumMismatch) << cut;
  }
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<std::size_t> pos(0, good.size() - 1);
  for (int trial = 0; trial < 20; ++trial) {
    std::string bad = good;
    bad[pos(rng)] ^= 0x10;
    EXPECT_EQ(code_of([&] { parse_checkpoint(bad); }), ErrorCode::ChecksumMismatch);
  }
}

TEST(Checkpoint, VersionBumpRejected) {
  Network<float> net(testutil::tiny_spec(), 1);
  std::string data = serialize_checkpoint(net);
  const std::uint32_t next = kCheckpointVersion + 1;
  std::memcpy(data.data() + 4, &next, 4);
  EXPECT_EQ(code_of([&] { parse_checkpoint(with_crc(data)); }), ErrorCode::UnknownVersion);
}

TEST(Checkpoint, StructureMismatchRejected) {
  Network<float> net(testutil::tiny_spec(Family::Fcn), 1);
  const auto contents = parse_checkpoint(serialize_checkpoint(net));
  Network<float> unet(testutil::tiny_spec(Family::Unet), 1);
  EXPECT_EQ(code_of([&] { restore_state(unet, contents); }), ErrorCode::IncompatibleSpec);
  auto wider = testutil::tiny_spec(Family::Fcn);
  wider.base_filters = 16;
  Network<float> w(wider, 1);
  EXPECT_EQ(code_of([&] { restore_state(w, contents); }), ErrorCode::IncompatibleSpec);
}

TEST(Checkpoint, MissingTensorReported) {
  Network<float> net(testutil::tiny_spec(), 1);
  auto contents = parse_checkpoint(serialize_checkpoint(net));
  ASSERT_FALSE(contents.tensors.empty());
  contents.tensors.erase(contents.tensors.begin());
  Network<float> fresh(testutil::tiny_spec(), 1);
  EXPECT_EQ(code_of([&] { restore_state(fresh, contents); }), ErrorCode::MissingTensor);
}

TEST(Checkpoint, PackedSignsMustAgreeWithLatentWeights) {
  auto spec = testutil::tiny_spec();
  spec.binary = true;
  Network<float> net(spec, 1);
  auto contents = parse_checkpoint(serialize_checkpoint(net));
  bool flipped = false;
  for (auto& [name, t] : contents.tensors) {
    if (t.dtype == TensorDType::BitPacked) {
      t.payload[0] = static_cast<char>(t.payload[0] ^ 1);
      flipped = true;
      break;
    }
  }
  ASSERT_TRUE(flipped);
  Network<float> fresh(spec, 1);
  EXPECT_EQ(code_of([&] { restore_state(fresh, contents); }), ErrorCode::ChecksumMismatch);
}

TEST(Checkpoint, MissingFileIsIoError) {
  EXPECT_EQ(code_of([] { load_checkpoint<float>("/nonexistent/dir/x.bsc"); }), ErrorCode::IoError);
}
