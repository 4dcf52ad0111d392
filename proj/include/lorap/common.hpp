// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace lorap {

// Error taxonomy shared by every module. Each maps to one failure class of the
// public contracts: bad caller input, misuse of stateful objects, numerical
// breakdown, kernel planning, configuration, and training divergence.
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};
struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct PlanError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ParseError : std::runtime_error {
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line(line) {}
  std::size_t line;
};
struct TrainingError : std::runtime_error {
  TrainingError(const std::string& what, int epoch)
      : std::runtime_error("epoch " + std::to_string(epoch) + ": " + what), epoch(epoch) {}
  int epoch;
};

/// Row-major dense matrix of doubles. Used for features, weights, gradients
/// and the small dense operators of the theory checks.
class DenseMatrix {
 public:
  DenseMatrix() = default;
  DenseMatrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  static DenseMatrix identity(std::size_t n);
  static DenseMatrix from_rows(std::initializer_list<std::initializer_list<double>> rows);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double& operator()(std::size_t i, std::size_t j) { return data_[i * cols_ + j]; }
  double operator()(std::size_t i, std::size_t j) const { return data_[i * cols_ + j]; }

  std::span<double> row(std::size_t i) { return {data_.data() + i * cols_, cols_}; }
  std::span<const double> row(std::size_t i) const { return {data_.data() + i * cols_, cols_}; }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  DenseMatrix transpose() const;
  bool all_finite() const;
  void fill(double v);

  bool operator==(const DenseMatrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b);
/// aᵀ·b without materializing the transpose.
DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b);
/// a·bᵀ without materializing the transpose.
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix operator+(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix operator-(const DenseMatrix& a, const DenseMatrix& b);
DenseMatrix operator*(double s, const DenseMatrix& a);
DenseMatrix& operator+=(DenseMatrix& a, const DenseMatrix& b);
double frobenius_sq(const DenseMatrix& a);
double frobenius(const DenseMatrix& a);
double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b);
/// max_ij |a-b| / max(1, max|b|), the relative error of the gradient gates.
double rel_error(const DenseMatrix& a, const DenseMatrix& b);
std::vector<double> column_sums(const DenseMatrix& a);

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, std::string_view what);

/// Seeded generator with named sub-streams: each module draws from
/// `Rng::stream(seed, "name")` so adding a consumer never shifts another
/// consumer's sequence.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  static Rng stream(std::uint64_t seed, std::string_view name);

  double uniform(double lo = 0.0, double hi = 1.0);
  double normal(double mean = 0.0, double stddev = 1.0);
  bool bernoulli(double p);
  std::uint64_t below(std::uint64_t n);
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::string_view name);

/// Thread cap for row-parallel kernels (env LORAP_THREADS, default 1).
unsigned kernel_threads();

/// Runs body(begin, end) over [0, n) split into contiguous chunks on up to
/// kernel_threads() threads. Chunks never share output rows.
template <typename Body>
void parallel_rows(std::size_t n, Body&& body);

// Little-endian binary helpers for the on-disk formats.
namespace io {
void write_bytes(std::ostream& os, const void* p, std::size_t n);
void read_bytes(std::istream& is, void* p, std::size_t n);
template <typename T>
void put(std::ostream& os, T v) {
  write_bytes(os, &v, sizeof(T));
}
template <typename T>
T get(std::istream& is) {
  T v{};
  read_bytes(is, &v, sizeof(T));
  return v;
}
void expect_magic(std::istream& is, std::string_view magic);
}  // namespace io

}  // namespace lorap

#include "lorap/detail/parallel.hpp"
