#pragma once

#include <Eigen/Core>

#include <algorithm>
#include <bit>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

#include "crgkd/error.hpp"

namespace crgkd {

using Index = Eigen::Index;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Precision { Float32, Float64 };

struct MapShape {
  Index channels = 0;
  Index height = 0;
  Index width = 0;

  Index size() const noexcept { return channels * height * width; }
  friend bool operator==(const MapShape&, const MapShape&) = default;
};

inline std::string to_string(const MapShape& s) {
  std::ostringstream os;
  os << "(" << s.channels << ", " << s.height << ", " << s.width << ")";
  return os.str();
}

// Activations of one layer for one sample, stored row-major as (C, H, W).
// Values are always held in double; `precision` records the on-disk type.
class FeatureMap {
 public:
  FeatureMap() = default;

  FeatureMap(MapShape shape, std::vector<double> data, Precision precision = Precision::Float64)
      : shape_(shape), data_(std::move(data)), precision_(precision) {
    if (shape_.channels < 1 || shape_.height < 1 || shape_.width < 1) {
      throw Error(ErrorCode::ShapeMismatch, "feature map dimensions must be >= 1, got " + to_string(shape_));
    }
    if (static_cast<Index>(data_.size()) != shape_.size()) {
      throw Error(ErrorCode::ShapeMismatch, "data length " + std::to_string(data_.size()) +
                                                " does not match shape " + to_string(shape_));
    }
  }

  FeatureMap(Index channels, Index height, Index width, std::vector<double> data,
             Precision precision = Precision::Float64)
      : FeatureMap(MapShape{channels, height, width}, std::move(data), precision) {}

  static FeatureMap zeros(MapShape shape, Precision precision = Precision::Float64) {
    return FeatureMap(shape, std::vector<double>(static_cast<std::size_t>(shape.size()), 0.0), precision);
  }

  const MapShape& shape() const noexcept { return shape_; }
  Index channels() const noexcept { return shape_.channels; }
  Index height() const noexcept { return shape_.height; }
  Index width() const noexcept { return shape_.width; }
  Index size() const noexcept { return shape_.size(); }
  Index spatial_size() const noexcept { return shape_.height * shape_.width; }
  Precision precision() const noexcept { return precision_; }
  void set_precision(Precision p) noexcept { precision_ = p; }

  double operator()(Index k, Index i, Index j) const { return data_[flat(k, i, j)]; }
  double& operator()(Index k, Index i, Index j) { return data_[flat(k, i, j)]; }

  std::span<const double> values() const noexcept { return data_; }
  std::span<double> values() noexcept { return data_; }

  // C x (H*W) view; row k is vec(F_k) in height-major order.
  Eigen::Map<const RowMatrix> channel_matrix() const {
    return {data_.data(), shape_.channels, spatial_size()};
  }
  Eigen::Map<RowMatrix> channel_matrix() { return {data_.data(), shape_.channels, spatial_size()}; }

  friend bool operator==(const FeatureMap& a, const FeatureMap& b) {
    return a.shape_ == b.shape_ && a.precision_ == b.precision_ && a.data_ == b.data_;
  }

 private:
  std::size_t flat(Index k, Index i, Index j) const noexcept {
    return static_cast<std::size_t>((k * shape_.height + i) * shape_.width + j);
  }

  MapShape shape_{};
  std::vector<double> data_;
  Precision precision_ = Precision::Float64;
};

// Non-empty, shape-homogeneous list of maps sharing one precision.
class FeatureMapBatch {
 public:
  explicit FeatureMapBatch(std::vector<FeatureMap> samples) : samples_(std::move(samples)) {
    if (samples_.empty()) throw Error(ErrorCode::ShapeMismatch, "feature map batch must be non-empty");
    for (const auto& m : samples_) {
      if (m.shape() != samples_.front().shape()) {
        throw Error(ErrorCode::ShapeMismatch, "batch mixes shapes " + to_string(samples_.front().shape()) +
                                                  " and " + to_string(m.shape()));
      }
      if (m.precision() != samples_.front().precision()) {
        throw Error(ErrorCode::ShapeMismatch, "batch mixes precisions");
      }
    }
  }

  std::size_t size() const noexcept { return samples_.size(); }
  const FeatureMap& operator[](std::size_t b) const { return samples_.at(b); }
  const MapShape& shape() const noexcept { return samples_.front().shape(); }
  Precision precision() const noexcept { return samples_.front().precision(); }
  auto begin() const noexcept { return samples_.begin(); }
  auto end() const noexcept { return samples_.end(); }
  const std::vector<FeatureMap>& samples() const noexcept { return samples_; }

  friend bool operator==(const FeatureMapBatch&, const FeatureMapBatch&) = default;

 private:
  std::vector<FeatureMap> samples_;
};

// ---------------------------------------------------------------------------
// NPY v1.0 / v2.0 (little-endian <f4 / <f8, C order only)

struct NpyArray {
  std::vector<std::size_t> shape;
  Precision dtype = Precision::Float64;
  std::vector<double> data;

  std::size_t element_count() const {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
  }
};

namespace npy_detail {

inline constexpr std::string_view kMagic = "\x93NUMPY";

using Tuple = std::vector<long long>;
using Value = std::variant<std::string, bool, Tuple>;

// Parser for the Python-literal header dict, e.g.
// {'descr': '<f8', 'fortran_order': False, 'shape': (3, 2), }
class HeaderParser {
 public:
  explicit HeaderParser(std::string_view text) : s_(text) {}

  std::map<std::string, Value> parse() {
    std::map<std::string, Value> out;
    expect('{');
    skip_ws();
    while (peek() != '}') {
      std::string key = parse_string();
      expect(':');
      out[key] = parse_value();
      skip_ws();
      if (peek() == ',') {
        ++pos_;
        skip_ws();
      } else if (peek() != '}') {
        fail("expected ',' or '}'");
      }
    }
    ++pos_;
    skip_ws();
    if (pos_ != s_.size()) fail("trailing characters after header dict");
    return out;
  }

 private:
  [[noreturn]] void fail(const std::string& what) const {
    throw Error(ErrorCode::MalformedHeader, what + " at header offset " + std::to_string(pos_));
  }
  void skip_ws() {
    while (pos_ < s_.size() && std::isspace(static_cast<unsigned char>(s_[pos_]))) ++pos_;
  }
  char peek() {
    skip_ws();
    if (pos_ >= s_.size()) fail("unexpected end of header");
    return s_[pos_];
  }
  void expect(char c) {
    if (peek() != c) fail(std::string("expected '") + c + "'");
    ++pos_;
  }
  std::string parse_string() {
    const char quote = peek();
    if (quote != '\'' && quote != '"') fail("expected quoted string");
    ++pos_;
    const auto end = s_.find(quote, pos_);
    if (end == std::string_view::npos) fail("unterminated string");
    std::string out(s_.substr(pos_, end - pos_));
    pos_ = end + 1;
    return out;
  }
  long long parse_int() {
    skip_ws();
    const auto start = pos_;
    while (pos_ < s_.size() && std::isdigit(static_cast<unsigned char>(s_[pos_]))) ++pos_;
    if (pos_ < s_.size() && s_[pos_] == 'L') ++pos_;
    if (start == pos_) fail("expected integer");
    return std::stoll(std::string(s_.substr(start, pos_ - start)));
  }
  Value parse_value() {
    const char c = peek();
    if (c == '\'' || c == '"') return parse_string();
    if (c == '(') {
      ++pos_;
      Tuple t;
      while (peek() != ')') {
        t.push_back(parse_int());
        if (peek() == ',') ++pos_;
        else if (peek() != ')') fail("expected ',' or ')' in shape tuple");
      }
      ++pos_;
      return t;
    }
    if (s_.substr(pos_, 4) == "True") {
      pos_ += 4;
      return true;
    }
    if (s_.substr(pos_, 5) == "False") {
      pos_ += 5;
      return false;
    }
    fail("unsupported header value");
  }

  std::string_view s_;
  std::size_t pos_ = 0;
};

template <typename T>
T load_le(const char* p) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void store_le(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(buf, buf + sizeof(T));
  out.append(buf, sizeof(T));
}

}  // namespace npy_detail

inline NpyArray decode_npy(std::string_view bytes) {
  using namespace npy_detail;
  if (bytes.size() < 10 || bytes.substr(0, 6) != kMagic) {
    throw Error(ErrorCode::MalformedHeader, "missing \\x93NUMPY magic");
  }
  const auto major = static_cast<unsigned char>(bytes[6]);
  std::size_t header_len = 0;
  std::size_t offset = 0;
  if (major == 1) {
    header_len = load_le<std::uint16_t>(bytes.data() + 8);
    offset = 10;
  } else if (major == 2) {
    if (bytes.size() < 12) throw Error(ErrorCode::MalformedHeader, "truncated v2 preamble");
    header_len = load_le<std::uint32_t>(bytes.data() + 8);
    offset = 12;
  } else {
    throw Error(ErrorCode::MalformedHeader, "unsupported NPY version " + std::to_string(major));
  }
  if (bytes.size() < offset + header_len) throw Error(ErrorCode::MalformedHeader, "truncated header");

  auto dict = HeaderParser(bytes.substr(offset, header_len)).parse();
  auto get = [&](const char* key) -> const Value& {
    auto it = dict.find(key);
    if (it == dict.end()) throw Error(ErrorCode::MalformedHeader, std::string("header lacks '") + key + "'");
    return it->second;
  };
  const auto* descr = std::get_if<std::string>(&get("descr"));
  const auto* fortran = std::get_if<bool>(&get("fortran_order"));
  const auto* shape = std::get_if<Tuple>(&get("shape"));
  if (!descr || !fortran || !shape) throw Error(ErrorCode::MalformedHeader, "header field has wrong type");

  NpyArray arr;
  std::size_t item = 0;
  if (*descr == "<f4") {
    arr.dtype = Precision::Float32;
    item = 4;
  } else if (*descr == "<f8") {
    arr.dtype = Precision::Float64;
    item = 8;
  } else {
    throw Error(ErrorCode::UnsupportedDtype, "dtype '" + *descr + "' (expected '<f4' or '<f8')");
  }
  if (*fortran) throw Error(ErrorCode::MalformedHeader, "fortran_order arrays are not accepted");
  for (auto d : *shape) arr.shape.push_back(static_cast<std::size_t>(d));

  const auto count = arr.element_count();
  const auto payload = bytes.size() - offset - header_len;
  if (payload != count * item) {
    throw Error(ErrorCode::MalformedHeader, "declared " + std::to_string(count) + " elements but payload holds " +
                                                std::to_string(payload) + " bytes");
  }
  arr.data.resize(count);
  const char* p = bytes.data() + offset + header_len;
  for (std::size_t n = 0; n < count; ++n) {
    arr.data[n] = item == 4 ? static_cast<double>(load_le<float>(p + 4 * n)) : load_le<double>(p + 8 * n);
  }
  return arr;
}

inline std::string encode_npy(const NpyArray& arr) {
  using namespace npy_detail;
  if (arr.data.size() != arr.element_count()) {
    throw Error(ErrorCode::ShapeMismatch, "array data does not match its shape");
  }
  std::string dict = std::string("{'descr': '") + (arr.dtype == Precision::Float32 ? "<f4" : "<f8") +
                     "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < arr.shape.size(); ++i) {
    dict += std::to_string(arr.shape[i]);
    if (arr.shape.size() == 1 || i + 1 < arr.shape.size()) dict += ",";
    if (i + 1 < arr.shape.size()) dict += " ";
  }
  dict += "), }";

  // Preamble + header is padded with spaces to a multiple of 64, ending in '\n'.
  const bool v1 = dict.size() + 1 + 64 <= 65535;
  const std::size_t preamble = v1 ? 10 : 12;
  std::size_t total = preamble + dict.size() + 1;
  total = (total + 63) / 64 * 64;
  dict.append(total - preamble - dict.size() - 1, ' ');
  dict += '\n';

  std::string out(kMagic);
  out += static_cast<char>(v1 ? 1 : 2);
  out += '\0';
  if (v1) store_le<std::uint16_t>(out, static_cast<std::uint16_t>(dict.size()));
  else store_le<std::uint32_t>(out, static_cast<std::uint32_t>(dict.size()));
  out += dict;
  out.reserve(out.size() + arr.data.size() * 8);
  for (double v : arr.data) {
    if (arr.dtype == Precision::Float32) store_le<float>(out, static_cast<float>(v));
    else store_le<double>(out, v);
  }
  return out;
}

inline NpyArray read_npy(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "'");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw Error(ErrorCode::IoError, "read failed for '" + path.string() + "'");
  return decode_npy(bytes);
}

inline void write_npy(const std::filesystem::path& path, const NpyArray& arr) {
  const auto bytes = encode_npy(arr);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::IoError, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  out.flush();
  if (!out) throw Error(ErrorCode::IoError, "write failed for '" + path.string() + "'");
}

inline void require_finite(std::span<const double> values) {
  for (std::size_t n = 0; n < values.size(); ++n) {
    if (!std::isfinite(values[n])) {
      throw Error(ErrorCode::NonFiniteData, "non-finite value at flat index " + std::to_string(n), n);
    }
  }
}

// Rank 3 (C,H,W) becomes a batch of one; rank 4 is (B,C,H,W).
inline FeatureMapBatch to_batch(const NpyArray& arr) {
  if (arr.shape.size() != 3 && arr.shape.size() != 4) {
    throw Error(ErrorCode::RankError, "expected rank 3 or 4, got rank " + std::to_string(arr.shape.size()));
  }
  for (auto d : arr.shape) {
    if (d == 0) throw Error(ErrorCode::RankError, "zero-length axis in feature map array");
  }
  require_finite(arr.data);
  const bool batched = arr.shape.size() == 4;
  const std::size_t b = batched ? arr.shape[0] : 1;
  const std::size_t base = batched ? 1 : 0;
  const MapShape shape{static_cast<Index>(arr.shape[base]), static_cast<Index>(arr.shape[base + 1]),
                       static_cast<Index>(arr.shape[base + 2])};
  const auto per = static_cast<std::size_t>(shape.size());
  std::vector<FeatureMap> maps;
  maps.reserve(b);
  for (std::size_t s = 0; s < b; ++s) {
    auto first = arr.data.begin() + static_cast<std::ptrdiff_t>(s * per);
    maps.emplace_back(shape, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(per)), arr.dtype);
  }
  return FeatureMapBatch(std::move(maps));
}

inline NpyArray to_npy(const FeatureMapBatch& batch, bool squeeze_single = false) {
  NpyArray arr;
  arr.dtype = batch.precision();
  const auto& s = batch.shape();
  if (!(squeeze_single && batch.size() == 1)) arr.shape.push_back(batch.size());
  arr.shape.insert(arr.shape.end(), {static_cast<std::size_t>(s.channels), static_cast<std::size_t>(s.height),
                                     static_cast<std::size_t>(s.width)});
  arr.data.reserve(batch.size() * static_cast<std::size_t>(s.size()));
  for (const auto& m : batch) arr.data.insert(arr.data.end(), m.values().begin(), m.values().end());
  return arr;
}

inline FeatureMapBatch load_feature_maps(const std::filesystem::path& path) { return to_batch(read_npy(path)); }

// Writes rank 4 (B,C,H,W); with `squeeze_single` a batch of one is written as rank 3.
inline void save_feature_maps(const FeatureMapBatch& batch, const std::filesystem::path& path,
                              bool squeeze_single = false) {
  write_npy(path, to_npy(batch, squeeze_single));
}

// Rank-2 (rows, cols) array, e.g. adapter weights.
inline Matrix load_matrix(const std::filesystem::path& path) {
  const auto arr = read_npy(path);
  if (arr.shape.size() != 2) {
    throw Error(ErrorCode::RankError, "expected a rank-2 matrix, got rank " + std::to_string(arr.shape.size()));
  }
  require_finite(arr.data);
  const RowMatrix m = Eigen::Map<const RowMatrix>(arr.data.data(), static_cast<Index>(arr.shape[0]),
                                                  static_cast<Index>(arr.shape[1]));
  return m;
}

inline void save_matrix(const Eigen::Ref<const Matrix>& m, const std::filesystem::path& path,
                        Precision dtype = Precision::Float64) {
  NpyArray arr;
  arr.dtype = dtype;
  arr.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  const RowMatrix rm = m;
  arr.data.assign(rm.data(), rm.data() + rm.size());
  write_npy(path, arr);
}

}  // namespace crgkd
