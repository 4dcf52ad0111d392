// SPDX-License-Identifier: Apache-2.0
#include "lorap/common.hpp"

#include <bit>
#include <cmath>
#include <cstdlib>
#include <istream>
#include <ostream>

namespace lorap {

static_assert(std::endian::native == std::endian::little,
              "binary formats are written in host order and require a little-endian host");

DenseMatrix::DenseMatrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows_ * cols_) {
    throw InputError("DenseMatrix: data length " + std::to_string(data_.size()) +
                     " does not match " + std::to_string(rows_) + "x" + std::to_string(cols_));
  }
}

DenseMatrix DenseMatrix::identity(std::size_t n) {
  DenseMatrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

DenseMatrix DenseMatrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw InputError("DenseMatrix::from_rows: ragged rows");
    data.insert(data.end(), row.begin(), row.end());
  }
  return DenseMatrix(r, c, std::move(data));
}

DenseMatrix DenseMatrix::transpose() const {
  DenseMatrix t(cols_, rows_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < cols_; ++j) t(j, i) = (*this)(i, j);
  return t;
}

bool DenseMatrix::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

void DenseMatrix::fill(double v) { std::fill(data_.begin(), data_.end(), v); }

void require_same_shape(const DenseMatrix& a, const DenseMatrix& b, std::string_view what) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw InputError(std::string(what) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                     std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                     std::to_string(b.cols()));
  }
}

// i-k-j ordering; zero entries of `a` are skipped, which matters for the
// sparse bag-of-words inputs of the citation datasets.
DenseMatrix matmul(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.rows()) throw InputError("matmul: inner dimensions differ");
  DenseMatrix c(a.rows(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double s = a(i, k);
      if (s == 0.0) continue;
      const double* in = b.row(k).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += s * in[j];
    }
  }
  return c;
}

DenseMatrix matmul_tn(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.rows() != b.rows()) throw InputError("matmul_tn: row counts differ");
  DenseMatrix c(a.cols(), b.cols());
  const std::size_t n = b.cols();
  for (std::size_t k = 0; k < a.rows(); ++k) {
    const double* in = b.row(k).data();
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double s = a(k, i);
      if (s == 0.0) continue;
      double* out = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += s * in[j];
    }
  }
  return c;
}

// Row updates against bᵀ instead of short dot products: each output still sums
// its terms in k order, but the j loop vectorizes.
DenseMatrix matmul_nt(const DenseMatrix& a, const DenseMatrix& b) {
  if (a.cols() != b.cols()) throw InputError("matmul_nt: column counts differ");
  const DenseMatrix bt = b.transpose();
  DenseMatrix c(a.rows(), b.rows());
  const std::size_t n = b.rows();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* out = c.row(i).data();
    for (std::size_t k = 0; k < a.cols(); ++k) {
      const double s = a(i, k);
      const double* in = bt.row(k).data();
      for (std::size_t j = 0; j < n; ++j) out[j] += s * in[j];
    }
  }
  return c;
}

DenseMatrix operator+(const DenseMatrix& a, const DenseMatrix& b) {
  DenseMatrix c = a;
  c += b;
  return c;
}

DenseMatrix operator-(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "operator-");
  DenseMatrix c = a;
  for (std::size_t i = 0; i < c.size(); ++i) c.storage()[i] -= b.storage()[i];
  return c;
}

DenseMatrix operator*(double s, const DenseMatrix& a) {
  DenseMatrix c = a;
  for (double& v : c.storage()) v *= s;
  return c;
}

DenseMatrix& operator+=(DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "operator+=");
  for (std::size_t i = 0; i < a.size(); ++i) a.storage()[i] += b.storage()[i];
  return a;
}

double frobenius_sq(const DenseMatrix& a) {
  double s = 0.0;
  for (double v : a.storage()) s += v * v;
  return s;
}

double frobenius(const DenseMatrix& a) { return std::sqrt(frobenius_sq(a)); }

double max_abs_diff(const DenseMatrix& a, const DenseMatrix& b) {
  require_same_shape(a, b, "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(a.storage()[i] - b.storage()[i]));
  return m;
}

double rel_error(const DenseMatrix& a, const DenseMatrix& b) {
  double scale = 1.0;
  for (double v : b.storage()) scale = std::max(scale, std::abs(v));
  return max_abs_diff(a, b) / scale;
}

std::vector<double> column_sums(const DenseMatrix& a) {
  std::vector<double> s(a.cols(), 0.0);
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) s[j] += a(i, j);
  return s;
}

std::uint64_t mix_seed(std::uint64_t seed, std::string_view name) {
  // FNV-1a over the stream name, folded into the seed with a splitmix64 finalizer.
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (h | 1ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Rng Rng::stream(std::uint64_t seed, std::string_view name) { return Rng(mix_seed(seed, name)); }

double Rng::uniform(double lo, double hi) {
  return std::uniform_real_distribution<double>(lo, hi)(engine_);
}

double Rng::normal(double mean, double stddev) {
  return std::normal_distribution<double>(mean, stddev)(engine_);
}

bool Rng::bernoulli(double p) { return uniform() < p; }

std::uint64_t Rng::below(std::uint64_t n) {
  return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
}

unsigned kernel_threads() {
  static const unsigned cap = [] {
    if (const char* env = std::getenv("LORAP_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v > 0) return static_cast<unsigned>(v);
    }
    return 1u;
  }();
  return cap;
}

namespace io {

void write_bytes(std::ostream& os, const void* p, std::size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
  if (!os) throw std::runtime_error("write failed");
}

void read_bytes(std::istream& is, void* p, std::size_t n) {
  is.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
  if (!is) throw InputError("unexpected end of binary stream");
}

void expect_magic(std::istream& is, std::string_view magic) {
  std::string got(magic.size(), '\0');
  read_bytes(is, got.data(), got.size());
  if (got != magic) throw InputError("bad magic: expected " + std::string(magic));
}

}  // namespace io

}  // namespace lorap
