#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "semicir/error.hpp"

namespace semicir {

/// Row-major dense matrix. Constructors reject non-finite payloads; element
/// writes through operator() are the caller's responsibility.
template <typename T>
class DenseMatrix {
public:
    using value_type = T;

    DenseMatrix() = default;
    DenseMatrix(std::size_t rows, std::size_t cols) : rows_{rows}, cols_{cols}, data_(rows * cols) {}
    DenseMatrix(std::size_t rows, std::size_t cols, std::vector<T> data)
        : rows_{rows}, cols_{cols}, data_{std::move(data)} {
        if (data_.size() != rows_ * cols_) {
            throw Error(ErrorKind::DimensionMismatch,
                        "matrix payload has " + std::to_string(data_.size()) + " values, expected " +
                            std::to_string(rows_ * cols_));
        }
        for (const T& v : data_) {
            if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "matrix payload contains NaN/Inf");
        }
    }

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    std::size_t size() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) noexcept { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const noexcept { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) noexcept { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const noexcept { return {data_.data() + r * cols_, cols_}; }

    std::span<T> values() noexcept { return data_; }
    std::span<const T> values() const noexcept { return data_; }
    const std::vector<T>& storage() const noexcept { return data_; }

    bool operator==(const DenseMatrix&) const = default;

private:
    std::size_t rows_{0};
    std::size_t cols_{0};
    std::vector<T> data_;
};

using Matrix = DenseMatrix<double>;
using MatrixF32 = DenseMatrix<float>;

/// Counter-based generator: the n-th draw is a pure function of (seed, n), so
/// streams are reproducible across platforms and can be split without
/// coupling the order in which consumers draw.
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t counter = 0) : seed_{seed}, counter_{counter} {}

    std::uint64_t seed() const noexcept { return seed_; }
    std::uint64_t counter() const noexcept { return counter_; }

    std::uint64_t next_u64() noexcept;
    /// Uniform in [0, 1) with 53 random bits.
    double uniform() noexcept;
    /// Standard normal via Box-Muller (consumes two draws).
    double normal() noexcept;
    /// Uniform integer in [0, n); n must be > 0.
    std::uint64_t uniform_index(std::uint64_t n) noexcept;
    /// Independent child stream keyed by `stream`.
    Rng split(std::uint64_t stream) const noexcept;

    template <typename It>
    void shuffle(It first, It last) noexcept {
        const auto n = static_cast<std::uint64_t>(last - first);
        for (std::uint64_t i = n; i > 1; --i) {
            const std::uint64_t j = uniform_index(i);
            std::swap(first[static_cast<std::ptrdiff_t>(i - 1)], first[static_cast<std::ptrdiff_t>(j)]);
        }
    }

private:
    std::uint64_t seed_;
    std::uint64_t counter_;
};

std::uint64_t mix64(std::uint64_t x) noexcept;

double dot(std::span<const double> u, std::span<const double> v);
double norm(std::span<const double> v) noexcept;

/// Returns v / ||v||. Throws ZeroVector when ||v|| < 1e-30.
std::vector<double> l2_normalize(std::span<const double> v);

/// Cosine of two unit vectors, i.e. their dot product. Symmetric bit-for-bit.
double cosine(std::span<const double> u, std::span<const double> v);

double sigmoid(double x) noexcept;

/// log(exp(a) + exp(b)) without overflow; handles -inf operands.
double log_add_exp(double a, double b) noexcept;

// Dense kernels used by the model. All shapes are checked.
/// out = a * b
Matrix matmul(const Matrix& a, const Matrix& b);
/// out = a * b^T
Matrix matmul_nt(const Matrix& a, const Matrix& b);
/// out = a^T * b
Matrix matmul_tn(const Matrix& a, const Matrix& b);
Matrix transpose(const Matrix& a);

struct GradCheckResult {
    double max_rel_error{0.0};
    std::size_t worst_index{0};
    double analytic_at_worst{0.0};
    double numeric_at_worst{0.0};
};

using ScalarFn = std::function<double(std::span<const double>)>;

/// Compares `analytic` against central differences of `loss` at `params`.
/// Error per coordinate is |analytic - numeric| / max(1, |analytic|).
GradCheckResult grad_check(const ScalarFn& loss, std::span<const double> params,
                           std::span<const double> analytic, double h = 1e-5);

}  // namespace semicir
