// MNIST IDX container (big-endian header, unsigned byte payload).
#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "fxdnn/model.hpp"
#include "fxdnn/train.hpp"

namespace fxdnn {

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

struct IdxTensor {
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> data;
};

inline std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("short write to " + path.string());
}

inline IdxTensor parse_idx(const std::vector<std::uint8_t>& bytes) {
  auto be32 = [&](std::size_t off) {
    return (std::uint32_t{bytes[off]} << 24) | (std::uint32_t{bytes[off + 1]} << 16) |
           (std::uint32_t{bytes[off + 2]} << 8) | std::uint32_t{bytes[off + 3]};
  };
  if (bytes.size() < 4) throw FormatError("idx: file too short for a header");
  const std::uint32_t magic = be32(0);
  if (magic != kIdxImagesMagic && magic != kIdxLabelsMagic)
    throw FormatError("idx: unsupported magic number");
  const std::size_t ndims = magic & 0xff;
  if (bytes.size() < 4 + 4 * ndims) throw FormatError("idx: truncated dimension header");
  IdxTensor t;
  std::uint64_t count = 1;
  for (std::size_t d = 0; d < ndims; ++d) {
    t.dims.push_back(be32(4 + 4 * d));
    count *= t.dims.back();
  }
  const std::size_t header = 4 + 4 * ndims;
  if (bytes.size() - header != count) throw FormatError("idx: payload length does not match dimensions");
  t.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(header), bytes.end());
  return t;
}

inline IdxTensor read_idx(const std::filesystem::path& path) { return parse_idx(read_file_bytes(path)); }

inline std::vector<std::uint8_t> serialize_idx(const IdxTensor& t) {
  if (t.dims.size() != 1 && t.dims.size() != 3) throw std::invalid_argument("idx: only 1-d labels or 3-d images");
  std::vector<std::uint8_t> out;
  const std::uint32_t magic = t.dims.size() == 1 ? kIdxLabelsMagic : kIdxImagesMagic;
  auto put32 = [&](std::uint32_t v) {
    for (int s = 24; s >= 0; s -= 8) out.push_back(static_cast<std::uint8_t>(v >> s));
  };
  put32(magic);
  for (auto d : t.dims) put32(d);
  out.insert(out.end(), t.data.begin(), t.data.end());
  return out;
}

inline void write_idx(const std::filesystem::path& path, const IdxTensor& t) { write_file_bytes(path, serialize_idx(t)); }

// Images flattened row-major to pixel / 256 so pixel bytes are the signal
// codes; labels paired by index.
inline Dataset dataset_from_idx(const IdxTensor& images, const IdxTensor& labels, int n_classes = 10) {
  if (images.dims.size() != 3) throw FormatError("idx: image file must be 3-dimensional");
  if (labels.dims.size() != 1) throw FormatError("idx: label file must be 1-dimensional");
  const std::size_t n = images.dims[0];
  if (labels.dims[0] != n) throw FormatError("idx: image and label counts differ");
  const std::size_t dim = std::size_t{images.dims[1]} * images.dims[2];
  Dataset ds;
  ds.n_classes = n_classes;
  ds.inputs.resize(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < dim; ++p)
      ds.inputs(static_cast<Eigen::Index>(p), static_cast<Eigen::Index>(i)) = images.data[i * dim + p] / 256.0;
  ds.labels.reserve(n);
  for (auto y : labels.data) {
    if (y >= n_classes) throw FormatError("idx: label exceeds class count");
    ds.labels.push_back(y);
  }
  return ds;
}

inline Dataset load_idx(const std::filesystem::path& images_path, const std::filesystem::path& labels_path,
                        int n_classes = 10) {
  return dataset_from_idx(read_idx(images_path), read_idx(labels_path), n_classes);
}

// Images only (labels unknown): every label is 0.
inline Dataset load_idx_images(const std::filesystem::path& images_path) {
  const IdxTensor images = read_idx(images_path);
  IdxTensor labels;
  labels.dims = {images.dims.empty() ? 0u : images.dims[0]};
  labels.data.assign(labels.dims[0], 0);
  return dataset_from_idx(images, labels, 1);
}

}  // namespace fxdnn
