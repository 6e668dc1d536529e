#pragma once

#include <array>
#include <bit>
#include <charconv>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "voxelize.hpp"

namespace bsc {

enum class PointFormat { Text, Binary };

namespace detail {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

template <typename U>
void put_le(std::string& buf, U v) {
  char bytes[sizeof(U)];
  std::memcpy(bytes, &v, sizeof(U));
  buf.append(bytes, sizeof(U));
}

class ByteReader {
 public:
  explicit ByteReader(std::span<const char> data) : data_(data) {}

  template <typename U>
  U get(ErrorCode on_short, const char* what) {
    if (pos_ + sizeof(U) > data_.size()) throw Error(on_short, std::string("truncated while reading ") + what);
    U v;
    std::memcpy(&v, data_.data() + pos_, sizeof(U));
    pos_ += sizeof(U);
    return v;
  }

  std::span<const char> take(std::size_t n, ErrorCode on_short, const char* what) {
    if (pos_ + n > data_.size()) throw Error(on_short, std::string("truncated while reading ") + what);
    auto s = data_.subspan(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }

 private:
  std::span<const char> data_;
  std::size_t pos_ = 0;
};

inline std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open " + path.string() + " for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::IoError, "short write to " + path.string());
}

inline void append_number(std::string& s, double v) {
  char buf[64];
  auto [end, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  s.append(buf, end);
}

}  // namespace detail

inline constexpr std::array<char, 4> kPointMagic{'B', 'V', 'P', 'C'};
inline constexpr std::uint32_t kPointVersion = 1;

// Text lines are "x y z label"; '#' starts a comment.
inline std::vector<Point> parse_points_text(const std::string& text) {
  std::vector<Point> points;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    std::istringstream ls(line);
    std::string tok[5];
    int n = 0;
    while (n < 5 && ls >> tok[n]) ++n;
    if (n == 0) continue;
    if (n != 4) throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": expected 4 fields");
    Point p;
    double* xyz[3] = {&p.x, &p.y, &p.z};
    for (int i = 0; i < 3; ++i) {
      const auto& t = tok[i];
      auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), *xyz[i]);
      if (ec != std::errc{} || ptr != t.data() + t.size()) {
        throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": bad number '" + t + "'");
      }
    }
    auto [ptr, ec] = std::from_chars(tok[3].data(), tok[3].data() + tok[3].size(), p.label);
    if (ec != std::errc{} || ptr != tok[3].data() + tok[3].size()) {
      throw Error(ErrorCode::ParseError, "line " + std::to_string(line_no) + ": bad label '" + tok[3] + "'");
    }
    points.push_back(p);
  }
  return points;
}

inline std::vector<Point> parse_points_binary(std::span<const char> bytes) {
  detail::ByteReader r(bytes);
  auto magic = r.take(4, ErrorCode::ParseError, "magic");
  if (!std::equal(magic.begin(), magic.end(), kPointMagic.begin())) {
    throw Error(ErrorCode::ParseError, "bad point file magic");
  }
  const auto version = r.get<std::uint32_t>(ErrorCode::ParseError, "version");
  if (version != kPointVersion) throw Error(ErrorCode::UnknownVersion, "point file version " + std::to_string(version));
  const auto count = r.get<std::uint64_t>(ErrorCode::ParseError, "count");
  if (r.remaining() != count * 16) throw Error(ErrorCode::ParseError, "record payload size does not match count");
  std::vector<Point> points(count);
  for (auto& p : points) {
    p.x = r.get<float>(ErrorCode::ParseError, "x");
    p.y = r.get<float>(ErrorCode::ParseError, "y");
    p.z = r.get<float>(ErrorCode::ParseError, "z");
    p.label = static_cast<std::int32_t>(r.get<std::uint32_t>(ErrorCode::ParseError, "label"));
  }
  return points;
}

inline std::string format_points_text(std::span<const Point> points) {
  std::string s;
  for (const Point& p : points) {
    detail::append_number(s, p.x);
    s += ' ';
    detail::append_number(s, p.y);
    s += ' ';
    detail::append_number(s, p.z);
    s += ' ';
    s += std::to_string(p.label);
    s += '\n';
  }
  return s;
}

// Coordinates are narrowed to f32.
inline std::string format_points_binary(std::span<const Point> points) {
  std::string s(kPointMagic.begin(), kPointMagic.end());
  detail::put_le<std::uint32_t>(s, kPointVersion);
  detail::put_le<std::uint64_t>(s, points.size());
  for (const Point& p : points) {
    detail::put_le<float>(s, static_cast<float>(p.x));
    detail::put_le<float>(s, static_cast<float>(p.y));
    detail::put_le<float>(s, static_cast<float>(p.z));
    detail::put_le<std::uint32_t>(s, static_cast<std::uint32_t>(p.label));
  }
  return s;
}

inline std::vector<Point> load_points(const std::filesystem::path& path, PointFormat format) {
  const std::string bytes = detail::read_file(path);
  return format == PointFormat::Text ? parse_points_text(bytes) : parse_points_binary(bytes);
}

inline void save_points(const std::filesystem::path& path, std::span<const Point> points, PointFormat format) {
  detail::write_file(path, format == PointFormat::Text ? format_points_text(points) : format_points_binary(points));
}

// Format from extension: ".bvpc" is binary, anything else text.
inline PointFormat guess_point_format(const std::filesystem::path& path) {
  return path.extension() == ".bvpc" ? PointFormat::Binary : PointFormat::Text;
}

}  // namespace bsc
