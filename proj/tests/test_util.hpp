// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include "lorap/common.hpp"
#include "lorap/graph.hpp"

namespace lorap::testing {

inline DenseMatrix random_matrix(Rng& rng, std::size_t r, std::size_t c, double lo = -1.0,
                                 double hi = 1.0) {
  DenseMatrix m(r, c);
  for (double& v : m.storage()) v = rng.uniform(lo, hi);
  return m;
}

inline std::vector<double> random_vector(Rng& rng, std::size_t n, double lo = -1.0,
                                         double hi = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = rng.uniform(lo, hi);
  return v;
}

/// Erdős–Rényi edge list on n nodes.
inline std::vector<Edge> random_edges(Rng& rng, std::size_t n, double p, bool self_loops = false) {
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if ((self_loops || i != j) && rng.uniform() < p)
        edges.emplace_back(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j));
  return edges;
}

/// Same structure with random positive edge weights.
inline Graph with_random_weights(const Graph& g, Rng& rng) {
  std::vector<double> w(g.num_edges());
  for (double& x : w) x = rng.uniform(0.2, 1.5);
  return Graph(g.num_nodes(), {g.row_ptr().begin(), g.row_ptr().end()},
               {g.col_idx().begin(), g.col_idx().end()}, std::move(w));
}

/// ‖a − b‖_F / max(‖b‖_F, floor).
inline double grad_error(const DenseMatrix& a, const DenseMatrix& b, double floor = 1e-6) {
  return frobenius(a - b) / std::max(frobenius(b), floor);
}

inline DenseMatrix as_column(const std::vector<double>& v) {
  return DenseMatrix(v.size(), 1, v);
}

/// Central differences of f over the entries of a std::vector parameter.
inline std::vector<double> fd_vector(const std::function<double()>& f, std::vector<double>& param,
                                     double h = 1e-5) {
  std::vector<double> g(param.size());
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double orig = param[i];
    param[i] = orig + h;
    const double fp = f();
    param[i] = orig - h;
    const double fm = f();
    param[i] = orig;
    g[i] = (fp - fm) / (2.0 * h);
  }
  return g;
}

/// Central differences of f over the entries of a matrix parameter, which f
/// reads in place.
inline DenseMatrix fd_matrix(const std::function<double()>& f, DenseMatrix& param,
                             double h = 1e-5) {
  DenseMatrix g(param.rows(), param.cols());
  g.storage() = fd_vector(f, param.storage(), h);
  return g;
}

inline double fd_scalar(const std::function<double()>& f, double& param, double h = 1e-5) {
  const double orig = param;
  param = orig + h;
  const double fp = f();
  param = orig - h;
  const double fm = f();
  param = orig;
  return (fp - fm) / (2.0 * h);
}

/// Σ G ⊙ Y: a linear probe whose gradient w.r.t. Y is G.
inline double probe(const DenseMatrix& y, const DenseMatrix& g) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y.storage()[i] * g.storage()[i];
  return s;
}

}  // namespace lorap::testing
