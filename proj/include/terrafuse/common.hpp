#pragma once

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

static_assert(std::endian::native == std::endian::little,
              "terrafuse file formats assume a little-endian host");

namespace terrafuse {

// ---------------------------------------------------------------- errors

/// Base class of everything terrafuse throws on purpose.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Malformed or unreadable input data (files, masks, manifests). CLI exit code 2.
struct DataError : Error {
  using Error::Error;
};

struct BadMagicError : DataError {
  using DataError::DataError;
};

struct TruncatedError : DataError {
  using DataError::DataError;
};

struct InvalidClassError : DataError {
  using DataError::DataError;
};

/// Tensor/shape contract violations.
struct ShapeError : Error {
  using Error::Error;
};

/// Non-finite values where finite ones are required. CLI exit code 3.
struct NumericError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------- rng

inline uint64_t splitmix64(uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

/// Derives an independent stream seed from (seed, index), so per-patch /
/// per-purpose streams are order-independent.
inline uint64_t derive_seed(uint64_t seed, uint64_t index) {
  return splitmix64(splitmix64(seed) ^ splitmix64(index + 0x51ed270b7a53c9c5ull));
}

/// Deterministic RNG with hand-rolled distributions. std::*_distribution is
/// implementation-defined; this keeps draws identical across standard libraries.
class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(splitmix64(seed ^ 0xd1b54a32d192ed03ull)) {
    if (state_ == 0) state_ = 0x9e3779b97f4a7c15ull;
  }

  uint64_t next_u64() {
    // xorshift64* — small, fast, fully specified here.
    uint64_t x = state_;
    x ^= x >> 12;
    x ^= x << 25;
    x ^= x >> 27;
    state_ = x;
    return x * 0x2545f4914f6cdd1dull;
  }

  /// Uniform in [0,1).
  double uniform() { return double(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) { return n ? next_u64() % n : 0; }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box–Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = 0.0;
    while (u1 <= 1e-300) u1 = uniform();
    double u2 = uniform();
    double r = std::sqrt(-2.0 * std::log(u1));
    spare_ = r * std::sin(2.0 * M_PI * u2);
    has_spare_ = true;
    return r * std::cos(2.0 * M_PI * u2);
  }

 private:
  uint64_t state_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------- threads

/// Worker cap from TERRAFUSE_THREADS; defaults to 1 for reproducibility.
inline int thread_cap() {
  static int cap = [] {
    const char* env = std::getenv("TERRAFUSE_THREADS");
    if (!env) return 1;
    int v = std::atoi(env);
    return v >= 1 ? v : 1;
  }();
  return cap;
}

// ---------------------------------------------------------------- binary io

namespace detail {

inline void write_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), std::streamsize(n));
  if (!os) throw DataError("write failed");
}

inline void read_bytes(std::istream& is, void* p, size_t n, const std::string& what) {
  is.read(static_cast<char*>(p), std::streamsize(n));
  if (size_t(is.gcount()) != n) {
    std::ostringstream msg;
    msg << "truncated " << what << ": expected " << n << " bytes, got " << is.gcount();
    throw TruncatedError(msg.str());
  }
}

}  // namespace detail

inline void write_u16(std::ostream& os, uint16_t v) { detail::write_bytes(os, &v, 2); }
inline void write_u32(std::ostream& os, uint32_t v) { detail::write_bytes(os, &v, 4); }
inline void write_f32(std::ostream& os, float v) { detail::write_bytes(os, &v, 4); }

inline uint16_t read_u16(std::istream& is, const std::string& what = "u16") {
  uint16_t v;
  detail::read_bytes(is, &v, 2, what);
  return v;
}
inline uint32_t read_u32(std::istream& is, const std::string& what = "u32") {
  uint32_t v;
  detail::read_bytes(is, &v, 4, what);
  return v;
}

inline void write_f32_array(std::ostream& os, const float* p, size_t n) {
  detail::write_bytes(os, p, n * 4);
}
inline void read_f32_array(std::istream& is, float* p, size_t n, const std::string& what) {
  detail::read_bytes(is, p, n * 4, what);
}

/// Guards file readers against forged size fields before any allocation.
inline size_t checked_plane(uint32_t h, uint32_t w, const std::string& what) {
  if (h == 0 || w == 0 || h > (1u << 20) || w > (1u << 20) ||
      uint64_t(h) * uint64_t(w) > (1ull << 26))
    throw DataError(what + ": implausible dimensions " + std::to_string(h) + "x" +
                    std::to_string(w));
  return size_t(h) * size_t(w);
}

}  // namespace terrafuse
