// Shared plumbing: error types, seeded RNG, byte-level IO, bounded parallel map.
#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <mutex>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace mgvit {

// ---------------------------------------------------------------------------
// Errors. Input/usage problems exit the CLI with code 1, internal ones with 2.
// ---------------------------------------------------------------------------

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

struct InputError : std::runtime_error {
  explicit InputError(const std::string& msg) : std::runtime_error("input error: " + msg) {}
};

struct UsageError : std::runtime_error {
  explicit UsageError(const std::string& msg) : std::runtime_error("usage error: " + msg) {}
};

struct FormatError : std::runtime_error {
  FormatError(const std::string& msg, std::uint64_t byte_offset)
      : std::runtime_error("format error at byte " + std::to_string(byte_offset) + ": " + msg),
        offset(byte_offset) {}
  std::uint64_t offset;
};

struct InternalError : std::runtime_error {
  explicit InternalError(const std::string& msg) : std::runtime_error("internal error: " + msg) {}
};

// ---------------------------------------------------------------------------
// Deterministic RNG. All distributions are implemented here (not via the
// std <random> distribution classes, whose output is implementation-defined),
// so identical seeds give identical streams on every platform.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed plus tags.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return splitmix64(splitmix64(seed ^ 0x6a09e667f3bcc909ULL) ^ splitmix64(a) ^ (b * 0x9e3779b97f4a7c15ULL));
}

inline std::uint64_t tag_hash(std::string_view tag) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : tag) h = (h ^ static_cast<unsigned char>(c)) * 0x100000001b3ULL;
  return h;
}

class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform double in [0, 1).
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n). Rejection sampling, no modulo bias.
  std::uint64_t uniform_int(std::uint64_t n) {
    if (n == 0) throw InternalError("uniform_int(0)");
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
    std::uint64_t v = engine_();
    while (v >= limit) v = engine_();
    return v % n;
  }

  // Standard normal via Box-Muller. Stateless across calls (no cached spare),
  // which keeps serialization down to the engine state alone.
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  double normal(double mean, double sigma) { return mean + sigma * normal(); }

  // Normal clipped to two sigma by redraw, the usual ViT init.
  double truncated_normal(double sigma) {
    for (;;) {
      const double v = normal();
      if (std::fabs(v) <= 2.0) return v * sigma;
    }
  }

  // Deterministic Fisher-Yates.
  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::swap(v[i - 1], v[static_cast<std::size_t>(uniform_int(i))]);
    }
  }

  std::string save_state() const {
    std::ostringstream os;
    os << engine_;
    return os.str();
  }

  void load_state(const std::string& s) {
    std::istringstream is(s);
    is >> engine_;
    if (is.fail()) throw FormatError("bad rng state string", 0);
  }

 private:
  std::mt19937_64 engine_;
};

// ---------------------------------------------------------------------------
// Finite-value guard. Committed tensor ops call this in debug builds; the
// trainer also calls it unconditionally on every loss.
// ---------------------------------------------------------------------------

inline void check_finite(const std::vector<double>& data, const char* context) {
  for (double v : data) {
    if (!std::isfinite(v)) throw InternalError(std::string("non-finite value in ") + context);
  }
}

#ifdef NDEBUG
inline constexpr bool kDebugFiniteChecks = false;
#else
inline constexpr bool kDebugFiniteChecks = true;
#endif

// ---------------------------------------------------------------------------
// Little-endian binary IO.
// ---------------------------------------------------------------------------

static_assert(std::endian::native == std::endian::little, "serialization assumes a little-endian host");

class ByteWriter {
 public:
  void u16(std::uint16_t v) { raw(&v, 2); }
  void u32(std::uint32_t v) { raw(&v, 4); }
  void u64(std::uint64_t v) { raw(&v, 8); }
  void f32(float v) { raw(&v, 4); }
  void f64(double v) { raw(&v, 8); }
  void bytes(const void* p, std::size_t n) { raw(p, n); }
  void str(const std::string& s) {
    u32(static_cast<std::uint32_t>(s.size()));
    raw(s.data(), s.size());
  }
  const std::vector<std::uint8_t>& buffer() const { return buf_; }

  void write_file(const std::string& path) const {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw InputError("cannot open for write: " + path);
    os.write(reinterpret_cast<const char*>(buf_.data()), static_cast<std::streamsize>(buf_.size()));
    if (!os) throw InputError("write failed: " + path);
  }

 private:
  void raw(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  std::vector<std::uint8_t> buf_;
};

class ByteReader {
 public:
  explicit ByteReader(std::vector<std::uint8_t> data) : buf_(std::move(data)) {}

  static ByteReader from_file(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw InputError("cannot open for read: " + path);
    std::vector<std::uint8_t> data((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return ByteReader(std::move(data));
  }

  std::uint16_t u16() { return read_plain<std::uint16_t>(); }
  std::uint32_t u32() { return read_plain<std::uint32_t>(); }
  std::uint64_t u64() { return read_plain<std::uint64_t>(); }
  float f32() { return read_plain<float>(); }
  double f64() { return read_plain<double>(); }

  void bytes(void* out, std::size_t n) {
    need(n);
    std::memcpy(out, buf_.data() + pos_, n);
    pos_ += n;
  }

  std::string str() {
    const std::uint32_t n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  void expect_magic(const char* magic, std::size_t n) {
    const std::uint64_t at = pos_;
    std::vector<char> got(n);
    bytes(got.data(), n);
    if (std::memcmp(got.data(), magic, n) != 0) {
      throw FormatError(std::string("bad magic, expected \"") + std::string(magic, n) + "\"", at);
    }
  }

  std::uint64_t offset() const { return pos_; }
  bool at_end() const { return pos_ == buf_.size(); }

 private:
  template <typename T>
  T read_plain() {
    T v;
    need(sizeof(T));
    std::memcpy(&v, buf_.data() + pos_, sizeof(T));
    pos_ += sizeof(T);
    return v;
  }
  void need(std::size_t n) {
    if (pos_ + n > buf_.size()) throw FormatError("unexpected end of data", pos_);
  }
  std::vector<std::uint8_t> buf_;
  std::uint64_t pos_ = 0;
};

// ---------------------------------------------------------------------------
// Bounded parallel map. Worker i handles indices i, i+T, i+2T, ... so results
// land at fixed slots and any later reduction is done in index order.
// MGVIT_THREADS caps the worker count (default: hardware concurrency).
// ---------------------------------------------------------------------------

inline std::size_t eval_thread_cap() {
  if (const char* env = std::getenv("MGVIT_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  const unsigned hc = std::thread::hardware_concurrency();
  return hc == 0 ? 1 : hc;
}

inline void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn,
                         std::size_t max_threads = 0) {
  std::size_t threads = max_threads == 0 ? eval_thread_cap() : max_threads;
  threads = std::min(threads, n == 0 ? std::size_t{1} : n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::exception_ptr first_error;
  std::mutex error_mu;
  pool.reserve(threads);
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        std::lock_guard<std::mutex> lock(error_mu);
        if (!first_error) first_error = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace mgvit
