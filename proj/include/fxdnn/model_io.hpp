// Binary model files.
//
// Quantized model ("FXDN"), all integers little-endian:
//   magic "FXDN" | u16 version | u16 n_layers | u32 dims[n_layers + 1]
//   per layer: u8 bit_width | f64 delta | u16 mantissa | i16 shift
//              | packed codes, row-major, each row byte-padded
//              | i16 biases[n_out]
//   u32 CRC-32 of every preceding byte
// Codes are bit_width-bit two's-complement fields packed LSB first.
//
// Float model ("FXDF"): same header, then per layer f64 weights (row-major)
// and f64 biases, then the CRC.
#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <zlib.h>

#include "fxdnn/idx.hpp"
#include "fxdnn/model.hpp"

namespace fxdnn {

inline constexpr std::uint16_t kModelFileVersion = 1;
inline constexpr char kQuantizedMagic[4] = {'F', 'X', 'D', 'N'};
inline constexpr char kFloatMagic[4] = {'F', 'X', 'D', 'F'};

inline std::uint32_t crc32_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  return static_cast<std::uint32_t>(crc32(crc, bytes.data(), static_cast<uInt>(bytes.size())));
}

namespace detail {

class ByteWriter {
 public:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes_.insert(bytes_.end(), b, b + n);
  }
  template <typename T>
  void le(T v) {
    using U = std::make_unsigned_t<T>;
    const auto u = static_cast<U>(v);
    for (std::size_t i = 0; i < sizeof(T); ++i) bytes_.push_back(static_cast<std::uint8_t>(u >> (8 * i)));
  }
  void f64(double v) { le(std::bit_cast<std::uint64_t>(v)); }
  std::vector<std::uint8_t>& bytes() { return bytes_; }

 private:
  std::vector<std::uint8_t> bytes_;
};

class ByteReader {
 public:
  explicit ByteReader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  std::span<const std::uint8_t> take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw FormatError("model file: truncated");
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  template <typename T>
  T le() {
    using U = std::make_unsigned_t<T>;
    const auto s = take(sizeof(T));
    U u = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) u |= static_cast<U>(U{s[i]} << (8 * i));
    return static_cast<T>(u);
  }
  double f64() { return std::bit_cast<double>(le<std::uint64_t>()); }
  std::size_t remaining() const noexcept { return bytes_.size() - pos_; }

 private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

inline std::size_t packed_row_bytes(std::size_t n_in, int bits) { return (n_in * static_cast<std::size_t>(bits) + 7) / 8; }

inline void pack_row(std::span<const std::int8_t> codes, int bits, std::vector<std::uint8_t>& out) {
  std::vector<std::uint8_t> row(packed_row_bytes(codes.size(), bits), 0);
  const unsigned mask = (1u << bits) - 1;
  std::size_t bit = 0;
  for (auto c : codes) {
    const unsigned field = static_cast<unsigned>(c) & mask;
    for (int k = 0; k < bits; ++k, ++bit)
      if ((field >> k) & 1u) row[bit / 8] |= static_cast<std::uint8_t>(1u << (bit % 8));
  }
  out.insert(out.end(), row.begin(), row.end());
}

inline std::vector<std::int8_t> unpack_row(std::span<const std::uint8_t> row, std::size_t n_in, int bits) {
  std::vector<std::int8_t> codes(n_in);
  std::size_t bit = 0;
  for (std::size_t i = 0; i < n_in; ++i) {
    unsigned field = 0;
    for (int k = 0; k < bits; ++k, ++bit) field |= ((row[bit / 8] >> (bit % 8)) & 1u) << k;
    int v = static_cast<int>(field);
    if (field & (1u << (bits - 1))) v -= 1 << bits;
    codes[i] = static_cast<std::int8_t>(v);
  }
  // padding bits must be zero
  for (; bit < row.size() * 8; ++bit)
    if ((row[bit / 8] >> (bit % 8)) & 1u) throw FormatError("model file: nonzero row padding");
  return codes;
}

inline void write_header(ByteWriter& w, const char (&magic)[4], std::span<const std::size_t> dims) {
  w.raw(magic, 4);
  w.le<std::uint16_t>(kModelFileVersion);
  w.le<std::uint16_t>(static_cast<std::uint16_t>(dims.size() - 1));
  for (auto d : dims) w.le<std::uint32_t>(static_cast<std::uint32_t>(d));
}

inline void finish(ByteWriter& w) {
  const std::uint32_t crc = crc32_of(w.bytes());
  w.le<std::uint32_t>(crc);
}

// Checks magic, CRC and version; returns a reader positioned after the version.
inline ByteReader open_checked(std::span<const std::uint8_t> bytes, const char (&magic)[4],
                               std::size_t (*expected_size)(std::span<const std::uint8_t>)) {
  if (bytes.size() < 4 + 2 + 2 + 4) throw FormatError("model file: too short");
  if (std::memcmp(bytes.data(), magic, 4) != 0) throw FormatError("model file: bad magic");
  const auto body = bytes.first(bytes.size() - 4);
  ByteReader tail(bytes.last(4));
  if (crc32_of(body) != tail.le<std::uint32_t>()) {
    // a length mismatch means truncation or a damaged header, not a bit flip
    if (expected_size(bytes) != bytes.size()) throw FormatError("model file: truncated or malformed");
    throw CorruptionError("model file: CRC mismatch");
  }
  ByteReader r(body);
  r.take(4);
  const auto version = r.le<std::uint16_t>();
  if (version != kModelFileVersion)
    throw UnsupportedVersionError("model file: unsupported version " + std::to_string(version));
  return r;
}

inline std::vector<std::size_t> read_dims(ByteReader& r) {
  const auto n_layers = r.le<std::uint16_t>();
  if (n_layers == 0) throw FormatError("model file: no layers");
  std::vector<std::size_t> dims;
  for (std::size_t i = 0; i <= n_layers; ++i) {
    dims.push_back(r.le<std::uint32_t>());
    if (dims.back() == 0) throw FormatError("model file: zero layer size");
  }
  return dims;
}

inline std::size_t quantized_expected_size(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.take(6);
  const auto dims = read_dims(r);
  std::size_t size = 4 + 2 + 2 + 4 * dims.size();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) {
    const int bits = r.le<std::uint8_t>();
    if (bits < 2 || bits > 8) return bytes.size();  // damaged field, length unknown
    const std::size_t row = packed_row_bytes(dims[l], bits);
    const std::size_t layer = 1 + 8 + 2 + 2 + row * dims[l + 1] + 2 * dims[l + 1];
    size += layer;
    if (size > bytes.size()) return size;
    r.take(layer - 1);
  }
  return size + 4;
}

inline std::size_t float_expected_size(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  r.take(6);
  const auto dims = read_dims(r);
  std::size_t size = 4 + 2 + 2 + 4 * dims.size();
  for (std::size_t l = 0; l + 1 < dims.size(); ++l) size += 8 * (dims[l] * dims[l + 1] + dims[l + 1]);
  return size + 4;
}

}  // namespace detail

inline std::vector<std::uint8_t> serialize_model(const QuantizedModel& qm) {
  qm.validate();
  detail::ByteWriter w;
  detail::write_header(w, kQuantizedMagic, qm.layer_dims);
  for (const auto& q : qm.layers) {
    w.le<std::uint8_t>(static_cast<std::uint8_t>(q.bits));
    w.f64(q.delta);
    w.le<std::uint16_t>(q.scale.mantissa());
    w.le<std::int16_t>(static_cast<std::int16_t>(q.scale.shift()));
    for (std::size_t r = 0; r < q.n_out; ++r) detail::pack_row(q.row(r), q.bits, w.bytes());
    for (auto b : q.biases) w.le<std::int16_t>(b);
  }
  detail::finish(w);
  return std::move(w.bytes());
}

inline QuantizedModel parse_quantized_model(std::span<const std::uint8_t> bytes) {
  auto r = detail::open_checked(bytes, kQuantizedMagic, detail::quantized_expected_size);
  QuantizedModel qm;
  qm.layer_dims = detail::read_dims(r);
  for (std::size_t l = 0; l + 1 < qm.layer_dims.size(); ++l) {
    QuantizedLayer q;
    q.n_in = qm.layer_dims[l];
    q.n_out = qm.layer_dims[l + 1];
    q.bits = r.le<std::uint8_t>();
    if (q.bits < 2 || q.bits > 8) throw FormatError("model file: bad bit width");
    q.delta = r.f64();
    const auto mantissa = r.le<std::uint16_t>();
    const auto shift = r.le<std::int16_t>();
    try {
      q.scale = DeltaScale::from_fields(q.delta, mantissa, shift);
    } catch (const std::invalid_argument& e) {
      throw FormatError(std::string("model file: ") + e.what());
    }
    const std::size_t row_bytes = detail::packed_row_bytes(q.n_in, q.bits);
    q.codes.reserve(q.n_in * q.n_out);
    for (std::size_t row = 0; row < q.n_out; ++row) {
      const auto codes = detail::unpack_row(r.take(row_bytes), q.n_in, q.bits);
      q.codes.insert(q.codes.end(), codes.begin(), codes.end());
    }
    for (std::size_t i = 0; i < q.n_out; ++i) q.biases.push_back(r.le<std::int16_t>());
    qm.layers.push_back(std::move(q));
  }
  if (r.remaining() != 0) throw FormatError("model file: trailing bytes");
  try {
    qm.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(std::string("model file: ") + e.what());
  }
  return qm;
}

inline std::vector<std::uint8_t> serialize_model(const FloatModel& fm) {
  fm.validate();
  detail::ByteWriter w;
  detail::write_header(w, kFloatMagic, fm.layer_dims);
  for (std::size_t l = 0; l < fm.num_layers(); ++l) {
    const Matrix& m = fm.weights[l];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) w.f64(m(i, j));
    for (Eigen::Index i = 0; i < fm.biases[l].size(); ++i) w.f64(fm.biases[l](i));
  }
  detail::finish(w);
  return std::move(w.bytes());
}

inline FloatModel parse_float_model(std::span<const std::uint8_t> bytes) {
  auto r = detail::open_checked(bytes, kFloatMagic, detail::float_expected_size);
  const auto dims = detail::read_dims(r);
  FloatModel fm = make_zero_model(dims);
  for (std::size_t l = 0; l < fm.num_layers(); ++l) {
    Matrix& m = fm.weights[l];
    for (Eigen::Index i = 0; i < m.rows(); ++i)
      for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = r.f64();
    for (Eigen::Index i = 0; i < fm.biases[l].size(); ++i) fm.biases[l](i) = r.f64();
  }
  if (r.remaining() != 0) throw FormatError("model file: trailing bytes");
  return fm;
}

inline void save_model(const std::filesystem::path& path, const QuantizedModel& qm) {
  write_file_bytes(path, serialize_model(qm));
}
inline void save_model(const std::filesystem::path& path, const FloatModel& fm) {
  write_file_bytes(path, serialize_model(fm));
}
inline QuantizedModel load_quantized_model(const std::filesystem::path& path) {
  return parse_quantized_model(read_file_bytes(path));
}
inline FloatModel load_float_model(const std::filesystem::path& path) { return parse_float_model(read_file_bytes(path)); }

}  // namespace fxdnn
