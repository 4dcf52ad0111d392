// SPDX-License-Identifier: Apache-2.0
#include "lorap/theory.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "lorap/quantizer.hpp"

namespace lorap::theory {

namespace {

void check_shapes(const TheoremInstance& t) {
  const std::size_t n = t.a.rows();
  if (t.a.cols() != n) throw InputError("theorem instance: A must be square");
  if (t.eps.rows() != n || t.p.rows() != n || t.eps.cols() != t.p.cols())
    throw InputError("theorem instance: eps/P shapes do not match A");
}

DenseMatrix fake(const DenseMatrix& m, const QuantParams& p) {
  DenseMatrix out = m;
  for (double& v : out.storage()) v = p.fake(v);
  return out;
}

std::string num(double v) {
  std::ostringstream os;
  os.precision(6);
  os << v;
  return os.str();
}

}  // namespace

double post_loss(const TheoremInstance& t) {
  check_shapes(t);
  return frobenius_sq(matmul(t.a, t.eps) + t.p);
}

double pre_loss(const TheoremInstance& t) {
  check_shapes(t);
  return frobenius_sq(matmul(t.a, t.eps + t.p));
}

DenseMatrix post_grad(const TheoremInstance& t) {
  check_shapes(t);
  return 2.0 * (matmul(t.a, t.eps) + t.p);
}

DenseMatrix pre_grad(const TheoremInstance& t) {
  check_shapes(t);
  return 2.0 * matmul_tn(t.a, matmul(t.a, t.eps + t.p));
}

Residual targeted_residual(const TheoremInstance& t, std::size_t node) {
  check_shapes(t);
  if (node >= t.a.rows()) throw InputError("targeted_residual: node out of range");
  const DenseMatrix ae = matmul(t.a, t.eps);
  const DenseMatrix ap = matmul(t.a, t.p);
  Residual r;
  for (std::size_t c = 0; c < t.p.cols(); ++c) {
    r.post.push_back(ae(node, c) + t.p(node, c));
    r.pre.push_back(ae(node, c) + ap(node, c));
  }
  return r;
}

Svd jacobi_svd(const DenseMatrix& a, int max_sweeps) {
  if (a.rows() < a.cols()) {
    Svd t = jacobi_svd(a.transpose(), max_sweeps);
    return {std::move(t.v), std::move(t.s), std::move(t.u)};
  }
  if (!a.all_finite()) throw NumericalError("jacobi_svd: non-finite input");
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  DenseMatrix u = a;
  DenseMatrix v = DenseMatrix::identity(n);
  constexpr double tol = 1e-15;
  bool converged = n < 2;
  for (int sweep = 0; sweep < max_sweeps && !converged; ++sweep) {
    converged = true;
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        double alpha = 0.0, beta = 0.0, gamma = 0.0;
        for (std::size_t i = 0; i < m; ++i) {
          alpha += u(i, p) * u(i, p);
          beta += u(i, q) * u(i, q);
          gamma += u(i, p) * u(i, q);
        }
        if (gamma == 0.0 || std::abs(gamma) <= tol * std::sqrt(alpha * beta)) continue;
        converged = false;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < m; ++i) {
          const double up = u(i, p), uq = u(i, q);
          u(i, p) = c * up - s * uq;
          u(i, q) = s * up + c * uq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double vp = v(i, p), vq = v(i, q);
          v(i, p) = c * vp - s * vq;
          v(i, q) = s * vp + c * vq;
        }
      }
    }
  }
  if (!converged) throw NumericalError("jacobi_svd: no convergence");

  std::vector<double> sigma(n);
  for (std::size_t j = 0; j < n; ++j) {
    double ss = 0.0;
    for (std::size_t i = 0; i < m; ++i) ss += u(i, j) * u(i, j);
    sigma[j] = std::sqrt(ss);
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });
  Svd out{DenseMatrix(m, n), std::vector<double>(n), DenseMatrix(n, n)};
  for (std::size_t jj = 0; jj < n; ++jj) {
    const std::size_t j = order[jj];
    out.s[jj] = sigma[j];
    for (std::size_t i = 0; i < m; ++i) out.u(i, jj) = sigma[j] > 0.0 ? u(i, j) / sigma[j] : 0.0;
    for (std::size_t i = 0; i < n; ++i) out.v(i, jj) = v(i, j);
  }
  return out;
}

Svd power_svd(const DenseMatrix& a, std::size_t count, std::uint64_t seed, int max_iters) {
  const std::size_t m = a.rows();
  const std::size_t n = a.cols();
  count = std::min(count, std::min(m, n));
  Rng rng = Rng::stream(seed, "theory.power");
  DenseMatrix b = a;
  Svd out{DenseMatrix(m, count), std::vector<double>(count, 0.0), DenseMatrix(n, count)};
  for (std::size_t j = 0; j < count; ++j) {
    DenseMatrix v(n, 1);
    for (double& x : v.storage()) x = rng.normal();
    double norm = frobenius(v);
    for (double& x : v.storage()) x /= norm;
    for (int it = 0; it < max_iters; ++it) {
      DenseMatrix w = matmul_tn(b, matmul(b, v));
      norm = frobenius(w);
      if (norm == 0.0) break;
      for (double& x : w.storage()) x /= norm;
      const double delta = max_abs_diff(w, v);
      v = std::move(w);
      if (delta < 1e-15) break;
    }
    DenseMatrix bv = matmul(b, v);
    const double sigma = frobenius(bv);
    out.s[j] = sigma;
    for (std::size_t i = 0; i < n; ++i) out.v(i, j) = v(i, 0);
    if (sigma == 0.0) continue;
    for (std::size_t i = 0; i < m; ++i) out.u(i, j) = bv(i, 0) / sigma;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t c = 0; c < n; ++c) b(i, c) -= sigma * out.u(i, j) * v(c, 0);
  }
  return out;
}

DenseMatrix truncate(const Svd& svd, std::size_t k) {
  const std::size_t m = svd.u.rows();
  const std::size_t n = svd.v.rows();
  k = std::min(k, svd.s.size());
  DenseMatrix out(m, n);
  for (std::size_t j = 0; j < k; ++j)
    for (std::size_t i = 0; i < m; ++i) {
      const double us = svd.u(i, j) * svd.s[j];
      for (std::size_t c = 0; c < n; ++c) out(i, c) += us * svd.v(c, j);
    }
  return out;
}

DenseMatrix pseudo_inverse(const DenseMatrix& a, double rcond) {
  const Svd svd = jacobi_svd(a);
  const double cutoff = rcond * (svd.s.empty() ? 0.0 : svd.s.front());
  DenseMatrix out(a.cols(), a.rows());
  for (std::size_t j = 0; j < svd.s.size(); ++j) {
    if (svd.s[j] <= cutoff) continue;
    for (std::size_t i = 0; i < a.cols(); ++i) {
      const double vs = svd.v(i, j) / svd.s[j];
      for (std::size_t c = 0; c < a.rows(); ++c) out(i, c) += vs * svd.u(c, j);
    }
  }
  return out;
}

DenseMatrix output_error(const TheoremInstance& t) {
  if (t.w_q.cols() != t.a.rows() || t.w_fp.cols() != t.a.rows() || t.w_q.rows() != t.w_fp.rows())
    throw InputError("output_error: weight shapes do not match A");
  if (t.x.rows() != t.a.rows() || t.eps.rows() != t.x.rows() || t.eps.cols() != t.x.cols())
    throw InputError("output_error: X/eps shapes do not match A");
  return matmul(t.w_q, matmul(t.a, t.x_q())) - matmul(t.w_fp, matmul(t.a, t.x));
}

SvdBound svd_bound(const TheoremInstance& t) {
  const DenseMatrix e = output_error(t);
  const std::size_t p = std::min(e.rows(), e.cols());
  if (t.rank_budget > p) throw InputError("svd_bound: rank budget exceeds min(dims)");
  const Svd svd = jacobi_svd(e);
  SvdBound out;
  double tail = 0.0;
  for (std::size_t j = t.rank_budget; j < svd.s.size(); ++j) tail += svd.s[j] * svd.s[j];
  out.bound = std::sqrt(tail);
  out.correction = truncate(svd, t.rank_budget);
  out.achieved = frobenius(e - out.correction);

  const DenseMatrix& w = t.w_q;
  if (w.rows() <= w.cols()) {
    const Svd ws = jacobi_svd(w);
    const bool full_row_rank = !ws.s.empty() && ws.s.back() > 1e-10 * ws.s.front();
    if (full_row_rank) {
      DenseMatrix prompt = -1.0 * matmul(pseudo_inverse(w), out.correction);
      out.prompt_loss = frobenius(e + matmul(w, prompt));
      out.prompt = std::move(prompt);
    }
  }
  return out;
}

double achieved_by_power_iteration(const DenseMatrix& e, std::size_t k, std::uint64_t seed) {
  return frobenius(e - truncate(power_svd(e, k, seed), k));
}

SvdQuantParts svdquant_decompose(const DenseMatrix& w, std::size_t r) {
  if (r > std::min(w.rows(), w.cols())) throw InputError("svdquant_decompose: rank out of range");
  const Svd svd = jacobi_svd(w);
  SvdQuantParts parts{DenseMatrix(w.rows(), r), DenseMatrix(r, w.cols()), DenseMatrix()};
  for (std::size_t j = 0; j < r; ++j) {
    for (std::size_t i = 0; i < w.rows(); ++i) parts.l1(i, j) = svd.u(i, j) * svd.s[j];
    for (std::size_t c = 0; c < w.cols(); ++c) parts.l2(j, c) = svd.v(c, j);
  }
  parts.r = w - matmul(parts.l1, parts.l2);
  return parts;
}

SvdQuantIdentity svdquant_identity(const DenseMatrix& x_hat, const DenseMatrix& w,
                                   const SvdQuantParts& parts, int bits) {
  const DenseMatrix xq = fake(x_hat, calibrate(x_hat.storage(), bits, false));
  const DenseMatrix rq = fake(parts.r, calibrate_symmetric(parts.r.storage(), bits));
  const DenseMatrix qq = matmul(xq, rq);
  const DenseMatrix branch = matmul(matmul(x_hat, parts.l1), parts.l2);
  SvdQuantIdentity out;
  out.lhs = frobenius(matmul(x_hat, w) - (branch + qq));
  out.rhs = frobenius(matmul(x_hat, parts.r) - qq);
  return out;
}

DenseMatrix finite_diff(const std::function<double(const DenseMatrix&)>& f, const DenseMatrix& x0,
                        double h) {
  if (!(h > 0.0)) throw InputError("finite_diff: h must be positive");
  DenseMatrix grad(x0.rows(), x0.cols());
  DenseMatrix x = x0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double orig = x.storage()[i];
    x.storage()[i] = orig + h;
    const double fp = f(x);
    x.storage()[i] = orig - h;
    const double fm = f(x);
    x.storage()[i] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw NumericalError("finite_diff: non-finite function value");
    grad.storage()[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

StarMonteCarlo star_monte_carlo(std::size_t leaves, double step, double bias, std::size_t samples,
                                std::uint64_t seed) {
  if (leaves == 0 || samples < 2) throw InputError("star_monte_carlo: need leaves and >= 2 samples");
  const std::size_t n = leaves + 1;
  DenseMatrix a = DenseMatrix::identity(n);
  for (std::size_t j = 1; j < n; ++j) a(0, j) = a(j, 0) = 1.0;
  // P_i = −b_i with b_i = E[(Aε)_i] = bias·Σ_j A_ij.
  TheoremInstance t;
  t.a = a;
  t.p = DenseMatrix(n, 1);
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < n; ++j) row += a(i, j);
    t.p(i, 0) = -bias * row;
  }
  Rng rng = Rng::stream(seed, "theory.star");
  std::vector<double> post(samples), pre(samples);
  t.eps = DenseMatrix(n, 1);
  for (std::size_t s = 0; s < samples; ++s) {
    for (double& e : t.eps.storage()) e = rng.uniform(-step / 2.0, step / 2.0) + bias;
    const Residual r = targeted_residual(t, 0);
    post[s] = r.post[0];
    pre[s] = r.pre[0];
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& se) {
    const double cnt = static_cast<double>(v.size());
    mean = std::accumulate(v.begin(), v.end(), 0.0) / cnt;
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    se = std::sqrt(ss / (cnt - 1.0)) / std::sqrt(cnt);
  };
  StarMonteCarlo out;
  stats(post, out.post_mean, out.post_se);
  stats(pre, out.pre_mean, out.pre_se);
  return out;
}

TheoremInstance random_instance(Rng& rng, std::size_t max_n, std::size_t max_d, std::size_t max_m) {
  const std::size_t n = 2 + rng.below(max_n - 1);
  const std::size_t d = 1 + rng.below(max_d);
  const std::size_t m = 1 + rng.below(max_m);
  TheoremInstance t;
  t.a = DenseMatrix(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      if (i == j || rng.bernoulli(0.5)) t.a(i, j) = rng.uniform(0.1, 1.0);
  t.x = DenseMatrix(n, d);
  t.eps = DenseMatrix(n, d);
  t.p = DenseMatrix(n, d);
  for (double& v : t.x.storage()) v = rng.normal();
  for (double& v : t.eps.storage()) v = rng.uniform(-0.05, 0.05);
  for (double& v : t.p.storage()) v = rng.normal(0.0, 0.1);
  t.w_fp = DenseMatrix(m, n);
  for (double& v : t.w_fp.storage()) v = rng.normal();
  t.w_q = t.w_fp;
  for (double& v : t.w_q.storage()) v += rng.uniform(-0.05, 0.05);
  t.rank_budget = rng.below(std::min(m, d) + 1);
  return t;
}

CheckResult check_decoupling(std::size_t instances, std::uint64_t seed) {
  CheckResult r{"decoupling", true, 0.0, 1e-8, ""};
  Rng rng = Rng::stream(seed, "theory.decoupling");
  double worst_loss = 0.0;
  for (std::size_t k = 0; k < instances; ++k) {
    TheoremInstance t = random_instance(rng, 8, 4, 4);
    TheoremInstance opt = t;
    opt.p = -1.0 * matmul(t.a, t.eps);
    worst_loss = std::max(worst_loss, post_loss(opt));
    auto post_f = [&](const DenseMatrix& p) {
      TheoremInstance u = t;
      u.p = p;
      return post_loss(u);
    };
    auto pre_f = [&](const DenseMatrix& p) {
      TheoremInstance u = t;
      u.p = p;
      return pre_loss(u);
    };
    r.achieved = std::max(r.achieved, rel_error(finite_diff(post_f, t.p, 1e-6), post_grad(t)));
    r.achieved = std::max(r.achieved, rel_error(finite_diff(pre_f, t.p, 1e-6), pre_grad(t)));
  }
  r.pass = worst_loss <= 1e-20 && r.achieved <= r.bound;
  r.detail = "max post_loss(P*)=" + num(worst_loss) + " max grad rel err=" + num(r.achieved);
  return r;
}

CheckResult check_targeted_bias(std::uint64_t seed) {
  const StarMonteCarlo mc = star_monte_carlo(8, 1.0, 0.1, 1000, seed);
  CheckResult r{"targeted_bias", false, std::abs(mc.post_mean), 3.0 * mc.post_se, ""};
  const bool post_ok = std::abs(mc.post_mean) <= 3.0 * mc.post_se;
  const bool pre_biased = std::abs(mc.pre_mean) > 5.0 * mc.pre_se;
  r.pass = post_ok && pre_biased;
  r.detail = "post mean=" + num(mc.post_mean) + " (se " + num(mc.post_se) + "), pre mean=" +
             num(mc.pre_mean) + " (se " + num(mc.pre_se) + ")";
  return r;
}

CheckResult check_svd_bound(std::size_t instances, std::uint64_t seed) {
  CheckResult r{"svd_bound", true, 0.0, 0.0, ""};
  Rng rng = Rng::stream(seed, "theory.svd");
  double worst_gap = -1e300;
  std::size_t cases = 0;
  for (std::size_t k = 0; k < instances; ++k) {
    TheoremInstance t = random_instance(rng, 8, 6, 8);
    const std::size_t p = std::min(t.w_q.rows(), t.x.cols());
    for (std::size_t kr = 0; kr <= p; ++kr) {
      t.rank_budget = kr;
      const SvdBound b = svd_bound(t);
      ++cases;
      const double gap = b.achieved - b.bound;
      if (gap > worst_gap) {
        worst_gap = gap;
        r.achieved = b.achieved;
        r.bound = b.bound;
      }
      if (gap > 1e-9) r.pass = false;
      if (b.prompt && b.prompt_loss > b.achieved + 1e-6) r.pass = false;
      if (b.prompt && t.w_q.rows() == t.w_q.cols() && std::abs(gap) > 1e-6) r.pass = false;
    }
  }
  TheoremInstance diag;
  diag.a = DenseMatrix::identity(3);
  diag.x = DenseMatrix(3, 3);
  diag.eps = DenseMatrix::from_rows({{3, 0, 0}, {0, 2, 0}, {0, 0, 1}});
  diag.p = DenseMatrix(3, 3);
  diag.w_fp = DenseMatrix::identity(3);
  diag.w_q = DenseMatrix::identity(3);
  diag.rank_budget = 1;
  const SvdBound d = svd_bound(diag);
  const bool diag_ok = std::abs(d.achieved - std::sqrt(5.0)) <= 1e-12 &&
                       std::abs(d.bound - std::sqrt(5.0)) <= 1e-12;
  r.pass = r.pass && diag_ok;
  r.detail = std::to_string(cases) + " cases, worst achieved-bound=" + num(worst_gap) +
             ", diag(3,2,1) k=1 achieved=" + num(d.achieved);
  return r;
}

CheckResult check_svdquant(std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "theory.svdquant");
  DenseMatrix w(8, 8), x(16, 8);
  for (double& v : w.storage()) v = rng.normal();
  for (double& v : x.storage()) v = rng.normal();
  const SvdQuantParts parts = svdquant_decompose(w, 2);
  const SvdQuantIdentity id = svdquant_identity(x, w, parts, 8);
  CheckResult r{"svdquant", std::abs(id.lhs - id.rhs) <= 1e-9, id.lhs, id.rhs, ""};
  r.detail = "|lhs-rhs|=" + num(std::abs(id.lhs - id.rhs));
  return r;
}

std::vector<CheckResult> run_verify_suite(std::uint64_t seed) {
  return {check_decoupling(200, seed), check_targeted_bias(seed), check_svd_bound(100, seed),
          check_svdquant(seed)};
}

}  // namespace lorap::theory
