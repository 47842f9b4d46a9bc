#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdlib>
#include <exception>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace metanet {

/// Integer extent along x and y (elements, cells, pixels).
struct Dims {
  int x = 0;
  int y = 0;

  [[nodiscard]] constexpr long long count() const { return static_cast<long long>(x) * y; }
  [[nodiscard]] constexpr int longest() const { return x > y ? x : y; }
  friend constexpr bool operator==(const Dims&, const Dims&) = default;
};

struct Vec2 {
  double x = 0.0;
  double y = 0.0;
  friend constexpr bool operator==(const Vec2&, const Vec2&) = default;
};

/// Invalid input shapes, ranges or configuration values.
class InvalidArgument : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Configuration / schema problems (CLI exit code 2).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Linear solve or factorization failure (CLI exit code 3).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Full-scale system could not be solved because the structure falls apart.
class DisconnectedStructure : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

inline void require(bool cond, const std::string& what) {
  if (!cond) throw InvalidArgument(what);
}

/// Worker count used by the per-cell loops: METANET_THREADS if set, else the hardware count.
/// Results never depend on it.
inline unsigned worker_count() {
  if (const char* env = std::getenv("METANET_THREADS")) {
    const long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<unsigned>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1u : hw;
}

/// Static-partition parallel loop. `fn(worker, begin, end)` handles the half-open
/// index range; each worker id is used by exactly one thread.
inline void parallel_ranges(std::size_t n, const std::function<void(unsigned, std::size_t, std::size_t)>& fn,
                            unsigned workers = worker_count()) {
  workers = static_cast<unsigned>(std::min<std::size_t>(std::max(1u, workers), std::max<std::size_t>(n, 1)));
  if (workers <= 1) {
    fn(0, 0, n);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (unsigned w = 0; w < workers; ++w) {
      const std::size_t b = w * chunk;
      const std::size_t e = std::min(n, b + chunk);
      if (b >= e) break;
      pool.emplace_back([&fn, &errors, w, b, e] {
        try {
          fn(w, b, e);
        } catch (...) {
          errors[w] = std::current_exception();
        }
      });
    }
  }
  for (auto& err : errors)
    if (err) std::rethrow_exception(err);
}

}  // namespace metanet
