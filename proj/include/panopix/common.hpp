#pragma once

#include <charconv>
#include <cstdint>
#include <cstdlib>
#include <cmath>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace panopix {

// Error taxonomy mirrored by the CLI exit codes: usage 1, data 2, numeric 3.
struct Error : std::runtime_error {
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : Error {
  using Error::Error;
};

// Bad files, manifests, configs, shape mismatches between stored artifacts.
struct DataError : Error {
  using Error::Error;
};

// Shape/dimension violations between in-memory tensors.
struct ShapeError : DataError {
  using DataError::DataError;
};

// Non-finite values or other numeric breakdown. Raised at the op that produced it.
struct NumericError : Error {
  using Error::Error;
};

// A view pair without a single positive cell pair. Callers resample the crops.
struct NoOverlapError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Deterministic RNG. splitmix64 stream; the distributions below are hand
// rolled so results do not depend on the standard library implementation.
// ---------------------------------------------------------------------------

inline uint64_t splitmix64(uint64_t& state) {
  state += 0x9e3779b97f4a7c15ull;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

// Collapses an arbitrary seed tuple into one stream seed.
inline uint64_t hash_seed(std::initializer_list<uint64_t> parts) {
  uint64_t s = 0x243f6a8885a308d3ull;
  for (uint64_t p : parts) {
    s ^= p + 0x9e3779b97f4a7c15ull + (s << 6) + (s >> 2);
    uint64_t tmp = s;
    s = splitmix64(tmp);
  }
  return s;
}

class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : state_(seed) {
    // Warm up so nearby seeds decorrelate.
    splitmix64(state_);
    splitmix64(state_);
  }

  uint64_t next_u64() { return splitmix64(state_); }

  // Uniform in [0, 1).
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [lo, hi] inclusive.
  int64_t uniform_int(int64_t lo, int64_t hi) {
    if (hi < lo) throw Error("Rng::uniform_int: empty range");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    return lo + static_cast<int64_t>(next_u64() % span);
  }

  bool bernoulli(double p) { return uniform() < p; }

  // Box-Muller; one value per call, cached pair discarded for simplicity.
  double normal(double mean = 0.0, double stddev = 1.0) {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    double r = std::sqrt(-2.0 * std::log(u1));
    return mean + stddev * r * std::cos(2.0 * 3.14159265358979323846 * u2);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(uniform_int(0, static_cast<int64_t>(i) - 1));
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
};

namespace detail {

// Shortest decimal form that parses back to the same double.
inline std::string fmt_double(double v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc{}) throw Error("fmt_double: buffer too small");
  return std::string(buf, p);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Dense boolean matrix used for positive-pair masks.
// ---------------------------------------------------------------------------

struct BoolMatrix {
  int64_t rows = 0;
  int64_t cols = 0;
  std::vector<uint8_t> data;

  BoolMatrix() = default;
  BoolMatrix(int64_t r, int64_t c, bool fill = false)
      : rows(r), cols(c), data(static_cast<size_t>(r * c), fill ? 1 : 0) {}

  bool at(int64_t r, int64_t c) const { return data[static_cast<size_t>(r * cols + c)] != 0; }
  void set(int64_t r, int64_t c, bool v) { data[static_cast<size_t>(r * cols + c)] = v ? 1 : 0; }

  int64_t count() const {
    int64_t n = 0;
    for (uint8_t b : data) n += b;
    return n;
  }

  BoolMatrix transposed() const {
    BoolMatrix t(cols, rows);
    for (int64_t r = 0; r < rows; ++r)
      for (int64_t c = 0; c < cols; ++c) t.set(c, r, at(r, c));
    return t;
  }

  bool operator==(const BoolMatrix& o) const {
    return rows == o.rows && cols == o.cols && data == o.data;
  }
};

// ---------------------------------------------------------------------------
// Thread configuration. PANOPIX_THREADS overrides; default is one thread,
// which is also the configuration under which bit determinism is promised.
// ---------------------------------------------------------------------------

inline int thread_count() {
  static int cached = [] {
    const char* env = std::getenv("PANOPIX_THREADS");
    if (env == nullptr) return 1;
    int n = std::atoi(env);
    return n >= 1 ? n : 1;
  }();
  return cached;
}

// Splits [0, n) into contiguous chunks, one per worker. Each index is touched
// by exactly one worker so results do not depend on the split.
template <typename Fn>
void parallel_for(int64_t n, Fn&& fn) {
  if (n <= 0) return;
  int workers = thread_count();
  if (workers <= 1 || n < 2) {
    fn(int64_t{0}, n);
    return;
  }
  if (workers > n) workers = static_cast<int>(n);
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  int64_t chunk = (n + workers - 1) / workers;
  for (int w = 0; w < workers; ++w) {
    int64_t lo = w * chunk;
    int64_t hi = std::min(n, lo + chunk);
    if (lo >= hi) break;
    pool.emplace_back([&fn, lo, hi] { fn(lo, hi); });
  }
  for (auto& t : pool) t.join();
}

inline std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace panopix
