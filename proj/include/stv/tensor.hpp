#pragma once

// Dense row-major tensor of 64-bit floats, shared error types, seed mixing,
// and the raw TENSOR v1 container format.

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace stv {

struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct DomainError : Error {
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
  explicit IoError(const std::string& msg) : Error(msg) {}
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

/// Dense n-dimensional array, row-major, with an optional gradient slot.
/// Shapes for rank-4 data are ordered [batch, channels, rows, cols].
struct Tensor {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  std::optional<std::vector<double>> grad;

  Tensor() = default;
  explicit Tensor(Shape s, double fill = 0.0)
      : shape(std::move(s)), data(shape_numel(shape), fill) {
    check_shape();
  }

  static Tensor from(Shape s, std::vector<double> d) {
    Tensor t;
    t.shape = std::move(s);
    t.data = std::move(d);
    t.check_shape();
    if (shape_numel(t.shape) != t.data.size())
      throw ShapeError("Tensor: shape " + shape_str(t.shape) + " expects " +
                       std::to_string(shape_numel(t.shape)) + " values, got " +
                       std::to_string(t.data.size()));
    return t;
  }

  static Tensor scalar(double v) { return from({1}, {v}); }

  std::size_t numel() const { return data.size(); }
  std::size_t rank() const { return shape.size(); }
  bool is_scalar() const { return data.size() == 1; }

  double& operator[](std::size_t i) { return data[i]; }
  double operator[](std::size_t i) const { return data[i]; }

  // rank-2 accessors
  double& at2(std::size_t r, std::size_t c) { return data[r * shape[1] + c]; }
  double at2(std::size_t r, std::size_t c) const { return data[r * shape[1] + c]; }

  void check_shape() const {
    for (std::size_t d : shape)
      if (d < 1) throw ShapeError("Tensor: zero extent in shape " + shape_str(shape));
  }

  void check_invariants() const {
    check_shape();
    if (shape_numel(shape) != data.size())
      throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                       " does not match shape " + shape_str(shape));
    if (grad && grad->size() != data.size())
      throw ShapeError("Tensor: grad length " + std::to_string(grad->size()) +
                       " does not match data length " + std::to_string(data.size()));
  }
};

inline bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

// --- deterministic seed derivation -----------------------------------------

/// splitmix64 finalizer; used to derive independent per-item seeds.
inline std::uint64_t mix_seed(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a) {
  return mix_seed(seed ^ mix_seed(a));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  return mix_seed(mix_seed(seed ^ mix_seed(a)) ^ mix_seed(b));
}

/// FNV-1a, used for spec hashes in checkpoint manifests.
inline std::uint64_t fnv1a64(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

// --- TENSOR v1 container ----------------------------------------------------
// One ASCII header line `TENSOR v1 <rank> <d0> <d1> ...` followed by the data
// as little-endian 64-bit floats.

inline void write_tensor(std::ostream& os, const Tensor& t) {
  os << "TENSOR v1 " << t.rank();
  for (std::size_t d : t.shape) os << ' ' << d;
  os << '\n';
  static_assert(sizeof(double) == 8);
  for (double v : t.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    char buf[8];
    std::memcpy(buf, &bits, 8);
    os.write(buf, 8);
  }
  if (!os) throw IoError("write_tensor: stream failure");
}

inline Tensor read_tensor(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw IoError("read_tensor: missing header");
  std::istringstream hs(line);
  std::string magic, version;
  std::size_t rank = 0;
  hs >> magic >> version >> rank;
  if (!hs || magic != "TENSOR") throw IoError("read_tensor: bad magic in '" + line + "'");
  if (version != "v1") throw IoError("read_tensor: unsupported version '" + version + "'");
  Shape shape(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (!(hs >> shape[i])) throw IoError("read_tensor: truncated header '" + line + "'");
  }
  Tensor t(shape);
  for (double& v : t.data) {
    char buf[8];
    is.read(buf, 8);
    if (!is) throw IoError("read_tensor: truncated payload");
    std::uint64_t bits;
    std::memcpy(&bits, buf, 8);
    if constexpr (std::endian::native == std::endian::big) {
      bits = __builtin_bswap64(bits);
    }
    std::memcpy(&v, &bits, 8);
  }
  return t;
}

inline void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("save_tensor: cannot open " + path);
  write_tensor(f, t);
}

inline Tensor load_tensor(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("load_tensor: cannot open " + path);
  return read_tensor(f);
}

}  // namespace stv
