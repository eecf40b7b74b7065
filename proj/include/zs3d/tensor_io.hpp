#pragma once

// Dense tensors, the MCLE binary interchange format and the embedding
// provider boundary.
//
// MCLE layout (all integers little-endian):
//   "MCLE" | u32 version (1) | u32 dtype | u32 ndim | ndim x u64 dims | payload
// dtype codes: 0 = f32, 1 = f64, 2 = i64 (index maps only).

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <istream>
#include <limits>
#include <numeric>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <string_view>
#include <type_traits>
#include <utility>
#include <variant>
#include <vector>

#include "zs3d/error.hpp"
#include "zs3d/files.hpp"

namespace zs3d {

enum class Dtype : std::uint32_t { f32 = 0, f64 = 1, i64 = 2 };

inline std::size_t dtype_size(Dtype d) { return d == Dtype::f32 ? 4 : 8; }

enum class McleErrc {
  bad_magic,
  unsupported_version,
  bad_dtype,
  bad_shape,
  truncated_payload,
  dim_overflow,
  io_failure,
};

class McleError : public InputError {
 public:
  McleError(McleErrc code, const std::string& what) : InputError(what), code_(code) {}
  McleErrc code() const noexcept { return code_; }

 private:
  McleErrc code_;
};

namespace detail {

/// Product of dims; false when it (or its byte size) is not addressable.
inline bool checked_extent(std::span<const std::uint64_t> dims, std::size_t elem_size,
                           std::uint64_t& count) {
  std::uint64_t n = 1;
  for (auto d : dims) {
    if (d != 0 && n > std::numeric_limits<std::uint64_t>::max() / d) return false;
    n *= d;
  }
  const std::uint64_t max_elems =
      static_cast<std::uint64_t>(std::numeric_limits<std::ptrdiff_t>::max()) / elem_size;
  if (n > max_elems) return false;
  count = n;
  return true;
}

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) {
    out.push_back(static_cast<char>((value >> (8 * i)) & 0xFFu));
  }
}

template <typename U>
U get_le(const unsigned char* p) {
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(p[i]) << (8 * i);
  return v;
}

template <typename U, typename T>
void decode_le(const unsigned char* src, T* dst, std::size_t n) {
  static_assert(sizeof(U) == sizeof(T));
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(dst, src, n * sizeof(T));
  } else {
    for (std::size_t i = 0; i < n; ++i) dst[i] = std::bit_cast<T>(get_le<U>(src + sizeof(U) * i));
  }
}

}  // namespace detail

/// Immutable row-major tensor. Payload element type follows the dtype.
class EmbeddingTensor {
 public:
  using Payload =
      std::variant<std::vector<float>, std::vector<double>, std::vector<std::int64_t>>;

  EmbeddingTensor(std::vector<std::uint64_t> dims, Payload data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (dims_.empty()) throw McleError(McleErrc::bad_shape, "tensor needs ndim >= 1");
    for (auto d : dims_) {
      if (d == 0) throw McleError(McleErrc::bad_shape, "tensor dims must be >= 1");
    }
    std::uint64_t n = 0;
    if (!detail::checked_extent(dims_, dtype_size(dtype()), n)) {
      throw McleError(McleErrc::dim_overflow, "tensor dims overflow");
    }
    const std::size_t len = std::visit([](const auto& v) { return v.size(); }, data_);
    if (len != n) {
      throw McleError(McleErrc::bad_shape, "payload length " + std::to_string(len) +
                                               " does not match dims product " +
                                               std::to_string(n));
    }
  }

  /// Builds an f32 tensor from double values (rounded to nearest float).
  static EmbeddingTensor f32(std::vector<std::uint64_t> dims, std::span<const double> values) {
    std::vector<float> v(values.begin(), values.end());
    return {std::move(dims), std::move(v)};
  }

  static EmbeddingTensor f64(std::vector<std::uint64_t> dims, std::vector<double> values) {
    return {std::move(dims), std::move(values)};
  }

  static EmbeddingTensor i64(std::vector<std::uint64_t> dims, std::vector<std::int64_t> values) {
    return {std::move(dims), std::move(values)};
  }

  const std::vector<std::uint64_t>& dims() const noexcept { return dims_; }
  std::size_t ndim() const noexcept { return dims_.size(); }
  std::uint64_t dim(std::size_t i) const { return dims_.at(i); }
  Dtype dtype() const noexcept { return static_cast<Dtype>(data_.index()); }
  const Payload& payload() const noexcept { return data_; }

  std::size_t size() const {
    return std::visit([](const auto& v) { return v.size(); }, data_);
  }

  std::vector<double> to_f64() const {
    return std::visit(
        [](const auto& v) {
          return std::vector<double>(v.begin(), v.end());
        },
        data_);
  }

  std::vector<std::int64_t> to_i64() const {
    if (const auto* p = std::get_if<std::vector<std::int64_t>>(&data_)) return *p;
    throw InputError("tensor is not i64");
  }

  bool operator==(const EmbeddingTensor&) const = default;

 private:
  std::vector<std::uint64_t> dims_;
  Payload data_;
};

inline std::string encode_mcle(const EmbeddingTensor& t) {
  std::string out;
  out.reserve(16 + 8 * t.ndim() + t.size() * dtype_size(t.dtype()));
  out.append("MCLE", 4);
  detail::put_le<std::uint32_t>(out, 1);
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.dtype()));
  detail::put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.ndim()));
  for (auto d : t.dims()) detail::put_le<std::uint64_t>(out, d);
  std::visit(
      [&out](const auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        for (T x : v) {
          if constexpr (std::is_same_v<T, float>) {
            detail::put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(x));
          } else {
            detail::put_le<std::uint64_t>(out, std::bit_cast<std::uint64_t>(x));
          }
        }
      },
      t.payload());
  return out;
}

/// Serializes `t` to `sink`; returns the number of bytes written.
inline std::uint64_t write_mcle(const EmbeddingTensor& t, std::ostream& sink) {
  const std::string bytes = encode_mcle(t);
  sink.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!sink) throw McleError(McleErrc::io_failure, "MCLE write failed");
  return bytes.size();
}

inline EmbeddingTensor read_mcle(std::istream& source) {
  auto read_exact = [&source](unsigned char* dst, std::size_t n) {
    source.read(reinterpret_cast<char*>(dst), static_cast<std::streamsize>(n));
    return static_cast<std::size_t>(source.gcount()) == n;
  };

  unsigned char head[16];
  if (!read_exact(head, 4)) throw McleError(McleErrc::truncated_payload, "MCLE: truncated magic");
  if (std::string_view(reinterpret_cast<const char*>(head), 4) != "MCLE") {
    throw McleError(McleErrc::bad_magic, "MCLE: bad magic");
  }
  if (!read_exact(head + 4, 12)) throw McleError(McleErrc::truncated_payload, "MCLE: truncated header");
  const auto version = detail::get_le<std::uint32_t>(head + 4);
  const auto dtype_code = detail::get_le<std::uint32_t>(head + 8);
  const auto ndim = detail::get_le<std::uint32_t>(head + 12);
  if (version != 1) {
    throw McleError(McleErrc::unsupported_version,
                    "MCLE: unsupported version " + std::to_string(version));
  }
  if (dtype_code > 2) {
    throw McleError(McleErrc::bad_dtype, "MCLE: unknown dtype code " + std::to_string(dtype_code));
  }
  if (ndim == 0) throw McleError(McleErrc::bad_shape, "MCLE: ndim must be >= 1");
  const auto dtype = static_cast<Dtype>(dtype_code);

  std::vector<std::uint64_t> dims;
  dims.reserve(std::min<std::uint32_t>(ndim, 16));
  for (std::uint32_t i = 0; i < ndim; ++i) {
    unsigned char b[8];
    if (!read_exact(b, 8)) throw McleError(McleErrc::truncated_payload, "MCLE: truncated dims");
    const auto d = detail::get_le<std::uint64_t>(b);
    if (d == 0) throw McleError(McleErrc::bad_shape, "MCLE: zero extent");
    dims.push_back(d);
  }
  std::uint64_t count = 0;
  if (!detail::checked_extent(dims, dtype_size(dtype), count)) {
    throw McleError(McleErrc::dim_overflow, "MCLE: product of dims exceeds addressable size");
  }

  // Read in bounded chunks so a lying header cannot force a huge allocation.
  const std::size_t elem = dtype_size(dtype);
  const std::uint64_t total = count * elem;
  std::vector<unsigned char> raw;
  raw.reserve(static_cast<std::size_t>(std::min<std::uint64_t>(total, 1u << 20)));
  constexpr std::size_t chunk = 1u << 16;
  unsigned char buf[chunk];
  std::uint64_t remaining = total;
  while (remaining > 0) {
    const std::size_t want = static_cast<std::size_t>(std::min<std::uint64_t>(remaining, chunk));
    source.read(reinterpret_cast<char*>(buf), static_cast<std::streamsize>(want));
    const auto got = static_cast<std::size_t>(source.gcount());
    raw.insert(raw.end(), buf, buf + got);
    if (got != want) {
      throw McleError(McleErrc::truncated_payload,
                      "MCLE: payload needs " + std::to_string(total) + " bytes, got " +
                          std::to_string(raw.size()));
    }
    remaining -= want;
  }

  const auto n = static_cast<std::size_t>(count);
  switch (dtype) {
    case Dtype::f32: {
      std::vector<float> v(n);
      detail::decode_le<std::uint32_t>(raw.data(), v.data(), n);
      return {std::move(dims), std::move(v)};
    }
    case Dtype::f64: {
      std::vector<double> v(n);
      detail::decode_le<std::uint64_t>(raw.data(), v.data(), n);
      return {std::move(dims), std::move(v)};
    }
    case Dtype::i64: {
      std::vector<std::int64_t> v(n);
      detail::decode_le<std::uint64_t>(raw.data(), v.data(), n);
      return {std::move(dims), std::move(v)};
    }
  }
  throw McleError(McleErrc::bad_dtype, "MCLE: unknown dtype");
}

inline EmbeddingTensor decode_mcle(std::string_view bytes) {
  std::istringstream in{std::string(bytes)};
  return read_mcle(in);
}

inline void save_mcle(const fs::path& path, const EmbeddingTensor& t) {
  write_file_atomic(path, encode_mcle(t));
}

inline EmbeddingTensor load_mcle(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open: " + path.string());
  try {
    return read_mcle(in);
  } catch (const McleError& e) {
    throw McleError(e.code(), path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Embedding bundles and providers

/// One global [D] embedding plus per-key-layer patch embeddings [n_patches, D].
struct EmbeddingBundle {
  EmbeddingTensor global;
  std::vector<EmbeddingTensor> locals;
  std::string source_id;

  std::uint64_t dim() const { return global.dims().back(); }

  void validate(std::size_t expected_layers) const {
    if (global.ndim() != 1) throw InputError(source_id + ": global embedding must be 1-D");
    if (locals.size() != expected_layers) {
      throw InputError(source_id + ": expected " + std::to_string(expected_layers) +
                       " local layers, found " + std::to_string(locals.size()));
    }
    for (std::size_t m = 0; m < locals.size(); ++m) {
      const auto& l = locals[m];
      if (l.ndim() != 2 || l.dim(1) != global.dim(0)) {
        throw InputError(source_id + ": local layer " + std::to_string(m) +
                         " embedding width does not match global D=" +
                         std::to_string(global.dim(0)));
      }
    }
  }

  bool operator==(const EmbeddingBundle&) const = default;
};

/// Branch tag for the k-th rendered view.
inline std::string view_branch(std::size_t k) { return "view" + std::to_string(k); }

/// Number of key layers stored per branch.
struct NamingConvention {
  std::size_t rgb_layers = 4;
  std::size_t view_layers = 1;

  std::size_t layers_for(std::string_view branch) const {
    if (branch == "rgb") return rgb_layers;
    if (branch.starts_with("view") && branch.size() > 4 &&
        std::all_of(branch.begin() + 4, branch.end(), [](char c) { return c >= '0' && c <= '9'; })) {
      return view_layers;
    }
    throw InputError("unknown branch tag '" + std::string(branch) + "'");
  }

  static std::string global_file(std::string_view sample, std::string_view branch) {
    return std::string(sample) + "/" + std::string(branch) + ".global.mcle";
  }
  static std::string local_file(std::string_view sample, std::string_view branch, std::size_t m) {
    return std::string(sample) + "/" + std::string(branch) + ".local" + std::to_string(m) + ".mcle";
  }
};

class MissingEmbedding : public InputError {
 public:
  explicit MissingEmbedding(std::string file)
      : InputError("missing embedding file: " + file), file_(std::move(file)) {}
  const std::string& file() const noexcept { return file_; }

 private:
  std::string file_;
};

/// Deterministic source of embedding bundles. Implementations must be safe
/// for concurrent calls.
class EmbeddingProvider {
 public:
  virtual ~EmbeddingProvider() = default;
  virtual EmbeddingBundle fetch(std::string_view sample, std::string_view branch) const = 0;
};

/// Reads `<root>/<sample>/<branch>.global.mcle` and `.local<m>.mcle` files.
class FileProvider final : public EmbeddingProvider {
 public:
  explicit FileProvider(fs::path root, NamingConvention naming = {})
      : root_(std::move(root)), naming_(naming) {
    if (!fs::is_directory(root_)) throw InputError("embedding root is not a directory: " + root_.string());
  }

  EmbeddingBundle fetch(std::string_view sample, std::string_view branch) const override {
    const std::size_t layers = naming_.layers_for(branch);
    auto load = [this](const std::string& rel) {
      const fs::path p = root_ / rel;
      if (!fs::exists(p)) throw MissingEmbedding(rel);
      return load_mcle(p);
    };
    EmbeddingBundle b{load(NamingConvention::global_file(sample, branch)), {},
                      std::string(sample) + "/" + std::string(branch)};
    b.locals.reserve(layers);
    for (std::size_t m = 0; m < layers; ++m) {
      b.locals.push_back(load(NamingConvention::local_file(sample, branch, m)));
    }
    b.validate(layers);
    return b;
  }

  const fs::path& root() const noexcept { return root_; }

 private:
  fs::path root_;
  NamingConvention naming_;
};

/// Writes a bundle under the FileProvider naming convention.
inline void save_bundle(const fs::path& root, std::string_view sample, std::string_view branch,
                        const EmbeddingBundle& b) {
  save_mcle(root / NamingConvention::global_file(sample, branch), b.global);
  for (std::size_t m = 0; m < b.locals.size(); ++m) {
    save_mcle(root / NamingConvention::local_file(sample, branch, m), b.locals[m]);
  }
}

}  // namespace zs3d
