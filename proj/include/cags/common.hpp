#pragma once

#include <Eigen/Core>
#include <omp.h>

#include <algorithm>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cags {

using Index = std::int32_t;

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Points3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;
using Quats = Eigen::Matrix<double, Eigen::Dynamic, 4, Eigen::RowMajor>;

inline constexpr const char* kVersion = "0.3.0";

// ---------------------------------------------------------------------------
// Errors

class InvalidArgument : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

class PreconditionError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Raised when an operation needs state that a previous call should have produced.
class StateError : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

/// Malformed input bytes. `offset()` is the byte position where parsing failed.
class ParseError : public std::runtime_error {
public:
    ParseError(const std::string& what, std::uint64_t offset)
        : std::runtime_error(what + " (at byte " + std::to_string(offset) + ")"), offset_(offset) {}
    std::uint64_t offset() const noexcept { return offset_; }

private:
    std::uint64_t offset_;
};

/// Well-formed input that does not carry the fields we need.
class SchemaError : public std::runtime_error {
public:
    explicit SchemaError(const std::string& what) : std::runtime_error(what) {}
    SchemaError(const std::string& what, std::vector<std::string> issues)
        : std::runtime_error(join(what, issues)), issues_(std::move(issues)) {}
    const std::vector<std::string>& issues() const noexcept { return issues_; }

private:
    static std::string join(const std::string& head, const std::vector<std::string>& issues) {
        std::string out = head;
        for (const auto& s : issues) out += "\n  - " + s;
        return out;
    }
    std::vector<std::string> issues_;
};

// ---------------------------------------------------------------------------
// Threading

inline void set_num_threads(int n) {
    if (n > 0) omp_set_num_threads(n);
}

inline int num_threads() { return omp_get_max_threads(); }

/// Sums `body(chunk_begin, chunk_end)` partials over fixed-size chunks of [0, n).
/// Chunk boundaries do not depend on the thread count, so the result is
/// bitwise identical for any number of threads.
template <typename T, typename Body>
T chunked_reduce(std::int64_t n, std::int64_t chunk, T zero, Body body) {
    if (n <= 0) return zero;
    const std::int64_t chunks = (n + chunk - 1) / chunk;
    std::vector<T> partial(static_cast<std::size_t>(chunks), zero);
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < chunks; ++c) {
        const std::int64_t b = c * chunk;
        const std::int64_t e = std::min(n, b + chunk);
        partial[static_cast<std::size_t>(c)] = body(b, e);
    }
    T total = zero;
    for (auto& p : partial) total += p;
    return total;
}

inline bool all_finite(const RowMatrix& m) { return m.allFinite(); }

}  // namespace cags
