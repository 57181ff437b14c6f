#pragma once

#include <atomic>
#include <cstdint>
#include <cstdio>
#include <exception>
#include <functional>
#include <mutex>
#include <stdexcept>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

namespace diffsel {

// Error taxonomy. The kind maps to the CLI exit code: Validation -> 2,
// Solver -> 3, Internal -> 4.
enum class ErrorKind { Validation, Solver, Internal };

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& msg) : std::runtime_error(msg), kind_(kind) {}
  ErrorKind kind() const { return kind_; }

 private:
  ErrorKind kind_;
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& m) : Error(ErrorKind::Validation, m) {}
};
struct ParseError : ValidationError {
  explicit ParseError(const std::string& m) : ValidationError(m) {}
};
struct ZeroVectorError : ValidationError {
  explicit ZeroVectorError(const std::string& m) : ValidationError(m) {}
};
struct EmptyGraphError : ValidationError {
  explicit EmptyGraphError(const std::string& m) : ValidationError(m) {}
};
struct MissingTuplesError : ValidationError {
  explicit MissingTuplesError(const std::string& m) : ValidationError(m) {}
};
struct UnlabeledFactError : ValidationError {
  explicit UnlabeledFactError(const std::string& m) : ValidationError(m) {}
};
struct InfeasibleCardinalityError : ValidationError {
  explicit InfeasibleCardinalityError(const std::string& m) : ValidationError(m) {}
};
struct TooLargeError : ValidationError {
  explicit TooLargeError(const std::string& m) : ValidationError(m) {}
};
struct SolverError : Error {
  explicit SolverError(const std::string& m) : Error(ErrorKind::Solver, m) {}
};
struct SingularKktError : SolverError {
  explicit SingularKktError(const std::string& m) : SolverError(m) {}
};
struct InternalError : Error {
  explicit InternalError(const std::string& m) : Error(ErrorKind::Internal, m) {}
};

// FNV-1a, 64 bit. Stable across platforms; used for hashed embeddings and
// config fingerprints.
inline std::uint64_t fnv1a64(std::string_view s) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : s) {
    h ^= static_cast<std::uint64_t>(c);
    h *= 1099511628211ull;
  }
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return std::string(buf);
}

// Index-parallel loop. Work item i writes only to slot i of the caller's
// output, so reductions stay in index order no matter how many workers run.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lk(err_mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace diffsel
