#pragma once

#include <cstddef>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include "latentflow/core/error.hpp"
#include "latentflow/data/dataset.hpp"

// IDX: big-endian u32 magic (0x00000803 for N×H×W unsigned-byte images,
// 0x00000801 for N unsigned-byte labels), one big-endian u32 per dimension,
// then the raw bytes in row-major order.

namespace latentflow {

inline constexpr std::uint32_t idx_images_magic = 0x00000803;
inline constexpr std::uint32_t idx_labels_magic = 0x00000801;

namespace detail {

inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off) {
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline std::string hex32(std::uint32_t v) {
  char buf[11];
  std::snprintf(buf, sizeof buf, "0x%08x", v);
  return buf;
}

/// Validates magic and length; returns the dimension extents.
inline std::vector<std::size_t> idx_header(const std::vector<unsigned char>& b, std::uint32_t magic,
                                           const std::string& path) {
  if (b.size() < 4) {
    throw FormatError("'" + path + "': truncated IDX header, expected at least 4 bytes, got " +
                      std::to_string(b.size()));
  }
  const std::uint32_t got = be32(b, 0);
  if (got != magic) {
    throw FormatError("'" + path + "': bad IDX magic " + hex32(got) + " at offset 0, expected " + hex32(magic));
  }
  const std::size_t ndim = magic & 0xff;
  const std::size_t header = 4 + 4 * ndim;
  if (b.size() < header) {
    throw FormatError("'" + path + "': truncated IDX header, expected " + std::to_string(header) + " bytes, got " +
                      std::to_string(b.size()));
  }
  std::vector<std::size_t> dims(ndim);
  std::size_t payload = 1;
  for (std::size_t i = 0; i < ndim; ++i) {
    dims[i] = be32(b, 4 + 4 * i);
    if (dims[i] == 0) throw FormatError("'" + path + "': zero extent in dimension " + std::to_string(i));
    payload *= dims[i];
  }
  if (b.size() != header + payload) {
    throw FormatError("'" + path + "': IDX length mismatch, expected " + std::to_string(header + payload) +
                      " bytes, got " + std::to_string(b.size()));
  }
  return dims;
}

}  // namespace detail

/// Reads an image/label IDX pair; pixels are divided by 255 and each image
/// becomes one row of H·W features.
template <class T>
Dataset<T> load_idx(const std::string& images_path, const std::string& labels_path, std::size_t classes,
                    Split split) {
  const auto ib = detail::read_file(images_path);
  const auto lb = detail::read_file(labels_path);
  const auto idims = detail::idx_header(ib, idx_images_magic, images_path);
  const auto ldims = detail::idx_header(lb, idx_labels_magic, labels_path);
  if (idims[0] != ldims[0]) {
    throw DataError("'" + images_path + "' has " + std::to_string(idims[0]) + " images but '" + labels_path +
                    "' has " + std::to_string(ldims[0]) + " labels");
  }
  const std::size_t n = idims[0], width = idims[1] * idims[2];
  Dataset<T> d{Tensor<T>({n, width}), std::vector<std::size_t>(n), classes, split,
               images_path + " + " + labels_path};
  const std::size_t ioff = 16, loff = 8;
  for (std::size_t i = 0; i < n * width; ++i) d.x[i] = static_cast<T>(ib[ioff + i]) / T(255);
  for (std::size_t i = 0; i < n; ++i) {
    d.labels[i] = lb[loff + i];
    if (d.labels[i] >= classes) {
      throw DataError("'" + labels_path + "': label " + std::to_string(d.labels[i]) + " at index " +
                      std::to_string(i) + " out of range for " + std::to_string(classes) + " classes");
    }
  }
  return d;
}

/// Writes raw IDX bytes; used to build fixtures and export subsets.
inline void write_idx(const std::string& path, std::uint32_t magic, const std::vector<std::uint32_t>& dims,
                      const std::vector<unsigned char>& payload) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  auto put = [&](std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                                static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<const char*>(b), 4);
  };
  put(magic);
  for (auto d : dims) put(d);
  out.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
}

}  // namespace latentflow
