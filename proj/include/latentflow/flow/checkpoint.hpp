#pragma once

// Binary flow checkpoints. Layout (all integers little-endian):
//
//   magic "LFLOWCKP" (8) | u32 major | u32 minor | u8 precision (4|8) |
//   3 zero bytes | u32 C | u32 label_width | u32 layer_count |
//   layer descriptors | parameter blobs | u32 CRC-32 of all prior bytes
//
// docs/checkpoint_format.md spells out the descriptors and blobs.

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include <zlib.h>

#include "latentflow/core/error.hpp"
#include "latentflow/flow/model.hpp"

namespace latentflow {

inline constexpr char kCheckpointMagic[8] = {'L', 'F', 'L', 'O', 'W', 'C', 'K', 'P'};
inline constexpr std::uint32_t kCheckpointMajor = 1;
inline constexpr std::uint32_t kCheckpointMinor = 0;

/// Structural description of one layer, as stored in the header.
struct LayerDescriptor {
  LayerKind kind{};
  std::uint32_t split = 0;         // coupling
  std::uint32_t hidden = 0;        // coupling
  double scale_clamp = 0;          // coupling
  bool initialized = false;        // actnorm

  friend bool operator==(const LayerDescriptor&, const LayerDescriptor&) = default;
};

inline std::string describe(const LayerDescriptor& d) {
  std::string s = layer_kind_name(d.kind);
  if (d.kind == LayerKind::coupling) {
    s += "(split=" + std::to_string(d.split) + ", hidden=" + std::to_string(d.hidden) + ")";
  }
  return s;
}

template <class T>
std::vector<LayerDescriptor> layer_descriptors(const FlowModel<T>& model) {
  std::vector<LayerDescriptor> out;
  for (const auto& l : model.layers()) {
    LayerDescriptor d;
    d.kind = kind_of(l);
    if (auto* c = std::get_if<CouplingLayer<T>>(&l)) {
      d.split = static_cast<std::uint32_t>(c->split());
      d.hidden = static_cast<std::uint32_t>(c->hidden());
      d.scale_clamp = c->scale_clamp();
    } else if (auto* a = std::get_if<ActNormLayer<T>>(&l)) {
      d.initialized = a->initialized();
    }
    out.push_back(d);
  }
  return out;
}

namespace detail {

class ByteWriter {
 public:
  template <class U>
  void put(U v) {
    static_assert(std::is_trivially_copyable_v<U>);
    unsigned char b[sizeof(U)];
    std::memcpy(b, &v, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    bytes_.insert(bytes_.end(), b, b + sizeof(U));
  }
  void raw(const void* p, std::size_t n) {
    const auto* c = static_cast<const unsigned char*>(p);
    bytes_.insert(bytes_.end(), c, c + n);
  }
  std::vector<unsigned char>& bytes() { return bytes_; }

 private:
  std::vector<unsigned char> bytes_;
};

class ByteReader {
 public:
  ByteReader(const std::vector<unsigned char>& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <class U>
  U get() {
    if (pos_ + sizeof(U) > end_) {
      throw FormatError("checkpoint: unexpected end of data at offset " + std::to_string(pos_));
    }
    unsigned char b[sizeof(U)];
    std::memcpy(b, bytes_.data() + pos_, sizeof(U));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b, b + sizeof(U));
    pos_ += sizeof(U);
    U v;
    std::memcpy(&v, b, sizeof(U));
    return v;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::vector<unsigned char>& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

template <class T>
void write_blob(ByteWriter& w, const Tensor<T>& t, std::uint8_t precision) {
  w.put<std::uint64_t>(t.size());
  for (T v : t.storage()) {
    if (precision == 4) w.put<float>(static_cast<float>(v));
    else w.put<double>(static_cast<double>(v));
  }
}

template <class T>
void read_blob(ByteReader& r, Tensor<T>& t, std::uint8_t precision, const std::string& what) {
  const auto n = r.get<std::uint64_t>();
  if (n != t.size()) {
    throw FormatError("checkpoint: blob '" + what + "' holds " + std::to_string(n) + " values, expected " +
                      std::to_string(t.size()));
  }
  for (auto& v : t.storage()) v = precision == 4 ? static_cast<T>(r.get<float>()) : static_cast<T>(r.get<double>());
}

inline void write_indices(ByteWriter& w, const std::vector<std::size_t>& idx) {
  w.put<std::uint64_t>(idx.size());
  for (auto i : idx) w.put<std::uint32_t>(static_cast<std::uint32_t>(i));
}

inline std::vector<std::size_t> read_indices(ByteReader& r, std::size_t expected) {
  const auto n = r.get<std::uint64_t>();
  if (n != expected) throw FormatError("checkpoint: index blob length mismatch");
  std::vector<std::size_t> out(n);
  for (auto& i : out) i = r.get<std::uint32_t>();
  return out;
}

inline std::uint32_t crc32_of(const unsigned char* data, std::size_t n) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  while (n > 0) {
    const auto chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = ::crc32(crc, data, chunk);
    data += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace detail

/// Serializes `model` in the precision of T.
template <class T>
std::vector<unsigned char> serialize_checkpoint(FlowModel<T>& model) {
  constexpr std::uint8_t precision = sizeof(T);
  detail::ByteWriter w;
  w.raw(kCheckpointMagic, 8);
  w.put<std::uint32_t>(kCheckpointMajor);
  w.put<std::uint32_t>(kCheckpointMinor);
  w.put<std::uint8_t>(precision);
  for (int i = 0; i < 3; ++i) w.put<std::uint8_t>(0);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.label_width()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(model.layers().size()));
  for (const auto& d : layer_descriptors(model)) {
    w.put<std::uint8_t>(static_cast<std::uint8_t>(d.kind));
    if (d.kind == LayerKind::coupling) {
      w.put<std::uint32_t>(d.split);
      w.put<std::uint32_t>(d.hidden);
      w.put<double>(d.scale_clamp);
    } else if (d.kind == LayerKind::actnorm) {
      w.put<std::uint8_t>(d.initialized ? 1 : 0);
    }
  }
  for (auto& l : model.layers()) {
    if (auto* p = std::get_if<PermutationLayer<T>>(&l)) {
      detail::write_indices(w, p->permutation());
    } else if (auto* inv = std::get_if<InvLinearLayer<T>>(&l)) {
      detail::write_indices(w, inv->row_permutation());
      detail::write_blob(w, Tensor<T>::vector(inv->diag_sign()), precision);
      std::vector<Parameter<T>*> ps;
      inv->collect(ps);
      for (auto* prm : ps) detail::write_blob(w, prm->value, precision);
    } else {
      std::vector<Parameter<T>*> ps;
      std::visit([&](auto& layer) { layer.collect(ps); }, l);
      for (auto* prm : ps) detail::write_blob(w, prm->value, precision);
    }
  }
  auto& bytes = w.bytes();
  w.put<std::uint32_t>(detail::crc32_of(bytes.data(), bytes.size()));
  return std::move(w.bytes());
}

template <class T>
void save_checkpoint(FlowModel<T>& model, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open checkpoint for writing: " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error("failed writing checkpoint: " + path.string());
}

/// Parses a checkpoint. Parameters are converted to T; they are
/// bit-identical when T matches the stored precision.
template <class T>
FlowModel<T> deserialize_checkpoint(const std::vector<unsigned char>& bytes) {
  constexpr std::size_t header = 32;
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw FormatError("checkpoint: bad magic at offset 0");
  }
  if (bytes.size() >= 16) {
    detail::ByteReader vr(bytes, 16);
    vr.get<std::uint64_t>();
    const auto major = vr.get<std::uint32_t>();
    if (major != kCheckpointMajor) {
      throw FormatError("checkpoint: format version " + std::to_string(major) + " does not match supported version " +
                        std::to_string(kCheckpointMajor));
    }
  }
  if (bytes.size() < header + 4) throw FormatError("checkpoint: checksum error (file truncated)");
  const std::size_t body = bytes.size() - 4;
  std::uint32_t stored = 0;
  std::memcpy(&stored, bytes.data() + body, 4);
  if constexpr (std::endian::native == std::endian::big) stored = __builtin_bswap32(stored);
  if (stored != detail::crc32_of(bytes.data(), body)) throw FormatError("checkpoint: checksum error");

  detail::ByteReader r(bytes, body);
  r.get<std::uint64_t>();
  r.get<std::uint32_t>();
  r.get<std::uint32_t>();
  const auto precision = r.get<std::uint8_t>();
  if (precision != 4 && precision != 8) throw FormatError("checkpoint: unknown precision " + std::to_string(precision));
  for (int i = 0; i < 3; ++i) r.get<std::uint8_t>();
  const auto dim = r.get<std::uint32_t>();
  const auto label_width = r.get<std::uint32_t>();
  const auto count = r.get<std::uint32_t>();

  std::vector<LayerDescriptor> descs(count);
  for (auto& d : descs) {
    const auto k = r.get<std::uint8_t>();
    if (k < 1 || k > 4) throw FormatError("checkpoint: unknown layer kind " + std::to_string(k));
    d.kind = static_cast<LayerKind>(k);
    if (d.kind == LayerKind::coupling) {
      d.split = r.get<std::uint32_t>();
      d.hidden = r.get<std::uint32_t>();
      d.scale_clamp = r.get<double>();
    } else if (d.kind == LayerKind::actnorm) {
      d.initialized = r.get<std::uint8_t>() != 0;
    }
  }

  FlowModel<T> model(dim, label_width);
  for (std::size_t i = 0; i < descs.size(); ++i) {
    const auto& d = descs[i];
    const std::string name = "layer" + std::to_string(i);
    switch (d.kind) {
      case LayerKind::coupling: {
        auto& c = model.add(CouplingLayer<T>(dim, d.split, d.hidden, label_width, d.scale_clamp, name));
        std::vector<Parameter<T>*> ps;
        c.collect(ps);
        for (auto* p : ps) detail::read_blob(r, p->value, precision, p->name);
        break;
      }
      case LayerKind::permutation:
        model.add(PermutationLayer<T>(detail::read_indices(r, dim)));
        break;
      case LayerKind::actnorm: {
        auto& a = model.add(ActNormLayer<T>(dim, name));
        detail::read_blob(r, a.log_scale().value, precision, name + ".log_scale");
        detail::read_blob(r, a.bias().value, precision, name + ".bias");
        a.set_initialized(d.initialized);
        break;
      }
      case LayerKind::invlinear: {
        auto& inv = model.add(InvLinearLayer<T>(dim, name));
        auto perm = detail::read_indices(r, dim);
        Tensor<T> sign({dim});
        detail::read_blob(r, sign, precision, name + ".sign");
        inv.set_structure(std::move(perm), sign.storage());
        std::vector<Parameter<T>*> ps;
        inv.collect(ps);
        for (auto* p : ps) detail::read_blob(r, p->value, precision, p->name);
        break;
      }
    }
  }
  if (r.pos() != body) throw FormatError("checkpoint: trailing bytes after parameter blobs");
  return model;
}

template <class T>
FlowModel<T> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint: " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint<T>(bytes);
}

/// Loads a checkpoint whose structure must match `expected` (for example a
/// model freshly built from a configuration).
template <class T>
FlowModel<T> load_checkpoint_matching(const std::filesystem::path& path, const FlowModel<T>& expected) {
  auto model = load_checkpoint<T>(path);
  if (model.dim() != expected.dim() || model.label_width() != expected.label_width()) {
    throw FormatError("checkpoint descriptor mismatch: dimension " + std::to_string(model.dim()) + "/" +
                      std::to_string(model.label_width()) + " vs expected " + std::to_string(expected.dim()) + "/" +
                      std::to_string(expected.label_width()));
  }
  auto got = layer_descriptors(model);
  auto want = layer_descriptors(expected);
  if (got.size() != want.size()) {
    throw FormatError("checkpoint descriptor mismatch: " + std::to_string(got.size()) + " layers stored, " +
                      std::to_string(want.size()) + " expected");
  }
  for (std::size_t i = 0; i < got.size(); ++i) {
    auto g = got[i], w = want[i];
    g.initialized = w.initialized = false;
    if (!(g == w)) {
      throw FormatError("checkpoint descriptor mismatch at layer " + std::to_string(i) + ": stored " + describe(got[i]) +
                        ", expected " + describe(want[i]));
    }
  }
  return model;
}

}  // namespace latentflow
