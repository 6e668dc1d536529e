#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <zlib.h>

#include "json.hpp"

#include "network.hpp"
#include "point_io.hpp"

namespace bsc {

inline constexpr char kCheckpointMagic[4] = {'B', 'S', 'C', '1'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class TensorDType : std::uint8_t { F32 = 0, BitPacked = 1 };

namespace detail {

inline std::uint32_t crc32_of(std::span<const char> bytes) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  std::size_t off = 0;
  while (off < bytes.size()) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(bytes.size() - off, 1u << 30));
    crc = ::crc32(crc, reinterpret_cast<const Bytef*>(bytes.data() + off), chunk);
    off += chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

inline void put_tensor_header(std::string& buf, const std::string& name, TensorDType dtype,
                              const std::vector<std::size_t>& dims) {
  if (name.size() > 0xFFFF) throw Error(ErrorCode::IoError, "tensor name too long");
  put_le<std::uint16_t>(buf, static_cast<std::uint16_t>(name.size()));
  buf.append(name);
  put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(dtype));
  put_le<std::uint8_t>(buf, static_cast<std::uint8_t>(dims.size()));
  for (auto d : dims) put_le<std::uint64_t>(buf, d);
}

struct RawTensor {
  TensorDType dtype;
  std::vector<std::size_t> dims;
  std::string payload;
  std::size_t count() const {
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
  }
};

}  // namespace detail

// Container: magic, version, length-prefixed JSON config, tensor count, named
// tensor sections, CRC32 of everything before it. Parameters and buffers are
// stored as f32; the 1-bit weights of a binary network are additionally
// stored bit-packed under "<name>.bits" (bit i = weight i is non-negative).
template <typename T>
std::string serialize_checkpoint(Network<T>& net, const nlohmann::json& extra = nlohmann::json::object()) {
  nlohmann::json config = {{"network", to_json(net.spec())}, {"extra", extra}};
  const std::string blob = config.dump();
  std::string buf(kCheckpointMagic, 4);
  detail::put_le<std::uint32_t>(buf, kCheckpointVersion);
  detail::put_le<std::uint64_t>(buf, blob.size());
  buf.append(blob);

  std::string sections;
  std::uint32_t count = 0;
  auto write_f32 = [&](const std::string& name, const std::vector<std::size_t>& dims, const Matrix<T>& m) {
    detail::put_tensor_header(sections, name, TensorDType::F32, dims);
    for (T v : m.flat()) detail::put_le<float>(sections, static_cast<float>(v));
    ++count;
  };
  net.visit_parameters([&](Parameter<T>& p) {
    write_f32(p.name, p.shape, p.value);
    if (p.kind == ParamKind::Binary && net.binary()) {
      const std::size_t n = p.value.size();
      detail::put_tensor_header(sections, p.name + ".bits", TensorDType::BitPacked, {n});
      std::string bytes((n + 7) / 8, '\0');
      for (std::size_t i = 0; i < n; ++i)
        if (sign_of(p.value.flat()[i]) > 0) bytes[i / 8] = static_cast<char>(bytes[i / 8] | (1 << (i % 8)));
      sections.append(bytes);
      ++count;
    }
  });
  net.visit_buffers([&](const std::string& name, Matrix<T>& m) { write_f32(name, {m.size()}, m); });
  detail::put_le<std::uint32_t>(buf, count);
  buf.append(sections);
  detail::put_le<std::uint32_t>(buf, detail::crc32_of(buf));
  return buf;
}

struct CheckpointContents {
  NetworkSpec spec;
  nlohmann::json extra;
  std::map<std::string, detail::RawTensor> tensors;
};

inline CheckpointContents parse_checkpoint(const std::string& data) {
  CheckpointContents out;
  if (data.size() < 4 + 4 + 4 || data.compare(0, 4, kCheckpointMagic, 4) != 0) {
    // A short or foreign file cannot carry a valid trailer either.
    throw Error(ErrorCode::ChecksumMismatch, "not a checkpoint or truncated");
  }
  const std::span<const char> all(data.data(), data.size());
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, data.data() + data.size() - 4, 4);
  if (detail::crc32_of(all.first(data.size() - 4)) != stored_crc) {
    throw Error(ErrorCode::ChecksumMismatch, "checkpoint CRC32 does not match");
  }
  detail::ByteReader rd(all.first(data.size() - 4));
  rd.take(4, ErrorCode::ChecksumMismatch, "magic");
  const auto version = rd.get<std::uint32_t>(ErrorCode::ChecksumMismatch, "version");
  if (version != kCheckpointVersion) {
    throw Error(ErrorCode::UnknownVersion, "checkpoint version " + std::to_string(version) + " is not supported");
  }
  const auto len = rd.get<std::uint64_t>(ErrorCode::ChecksumMismatch, "config length");
  if (len > rd.remaining()) throw Error(ErrorCode::ChecksumMismatch, "config length exceeds file");
  const auto blob = rd.take(len, ErrorCode::ChecksumMismatch, "config");
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(blob.begin(), blob.end());
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::IncompatibleSpec, std::string("bad checkpoint config: ") + e.what());
  }
  if (!config.contains("network")) throw Error(ErrorCode::IncompatibleSpec, "checkpoint config lacks a network spec");
  out.spec = network_spec_from_json(config.at("network"));
  out.extra = config.value("extra", nlohmann::json::object());
  const auto count = rd.get<std::uint32_t>(ErrorCode::ChecksumMismatch, "tensor count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto nlen = rd.get<std::uint16_t>(ErrorCode::ChecksumMismatch, "tensor name length");
    const auto name_bytes = rd.take(nlen, ErrorCode::ChecksumMismatch, "tensor name");
    detail::RawTensor t;
    const auto dtype = rd.get<std::uint8_t>(ErrorCode::ChecksumMismatch, "dtype");
    if (dtype > 1) throw Error(ErrorCode::UnknownVersion, "unknown tensor dtype " + std::to_string(dtype));
    t.dtype = static_cast<TensorDType>(dtype);
    const auto rank = rd.get<std::uint8_t>(ErrorCode::ChecksumMismatch, "rank");
    for (int r = 0; r < rank; ++r) {
      t.dims.push_back(static_cast<std::size_t>(rd.get<std::uint64_t>(ErrorCode::ChecksumMismatch, "dims")));
    }
    const std::size_t n = t.count();
    const std::size_t payload = t.dtype == TensorDType::F32 ? n * 4 : (n + 7) / 8;
    if (payload > rd.remaining()) throw Error(ErrorCode::ChecksumMismatch, "tensor payload exceeds file");
    const auto bytes = rd.take(payload, ErrorCode::ChecksumMismatch, "payload");
    t.payload.assign(bytes.begin(), bytes.end());
    out.tensors.emplace(std::string(name_bytes.begin(), name_bytes.end()), t);
  }
  if (rd.remaining() != 0) throw Error(ErrorCode::ChecksumMismatch, "trailing bytes after tensor sections");
  return out;
}

// Structural equality: the fields that decide parameter names and shapes.
inline bool same_structure(const NetworkSpec& a, const NetworkSpec& b) {
  return a.family == b.family && a.levels == b.levels && a.base_filters == b.base_filters &&
         a.filters_step == b.filters_step && a.blocks_per_level == b.blocks_per_level &&
         a.num_classes == b.num_classes && a.in_channels == b.in_channels && a.search_mode == b.search_mode &&
         a.groups == b.groups && a.kernel_size == b.kernel_size && a.space.directions == b.space.directions;
}

// Fills every parameter and buffer of `net` from `contents`.
template <typename T>
void restore_state(Network<T>& net, const CheckpointContents& contents) {
  if (!same_structure(net.spec(), contents.spec)) {
    throw Error(ErrorCode::IncompatibleSpec, "checkpoint holds a " + to_string(contents.spec.family) +
                                                 " network that does not match the requested " +
                                                 to_string(net.spec().family) + " spec");
  }
  auto fill = [&](const std::string& name, Matrix<T>& m) {
    auto it = contents.tensors.find(name);
    if (it == contents.tensors.end()) throw Error(ErrorCode::MissingTensor, "checkpoint lacks tensor '" + name + "'");
    const auto& t = it->second;
    if (t.dtype != TensorDType::F32 || t.count() != m.size()) {
      throw Error(ErrorCode::IncompatibleSpec, "tensor '" + name + "' has an unexpected layout");
    }
    for (std::size_t i = 0; i < m.size(); ++i) {
      float v;
      std::memcpy(&v, t.payload.data() + 4 * i, 4);
      m.flat()[i] = static_cast<T>(v);
    }
  };
  net.visit_parameters([&](Parameter<T>& p) {
    fill(p.name, p.value);
    auto bits = contents.tensors.find(p.name + ".bits");
    if (bits == contents.tensors.end()) return;
    for (std::size_t i = 0; i < p.value.size(); ++i) {
      const bool pos = (static_cast<unsigned char>(bits->second.payload[i / 8]) >> (i % 8)) & 1u;
      if (pos != (sign_of(p.value.flat()[i]) > 0)) {
        throw Error(ErrorCode::ChecksumMismatch, "packed signs of '" + p.name + "' disagree with latent weights");
      }
    }
  });
  net.visit_buffers(fill);
}

template <typename T>
void save_checkpoint(const std::filesystem::path& path, Network<T>& net,
                     const nlohmann::json& extra = nlohmann::json::object()) {
  detail::write_file(path, serialize_checkpoint(net, extra));
}

// Rebuilds the stored network, precision and shift config included.
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path, nlohmann::json* extra = nullptr) {
  const CheckpointContents c = parse_checkpoint(detail::read_file(path));
  Network<T> net(c.spec);
  restore_state(net, c);
  if (extra) *extra = c.extra;
  return net;
}

// Loads into a network built from `spec`; IncompatibleSpec if structures differ.
template <typename T>
Network<T> load_checkpoint(const std::filesystem::path& path, const NetworkSpec& spec,
                           nlohmann::json* extra = nullptr) {
  const CheckpointContents c = parse_checkpoint(detail::read_file(path));
  NetworkSpec merged = spec;
  merged.binary = c.spec.binary;
  if (c.spec.shift_config && !merged.shift_config) merged.shift_config = c.spec.shift_config;
  Network<T> net(merged);
  restore_state(net, c);
  if (extra) *extra = c.extra;
  return net;
}

}  // namespace bsc
