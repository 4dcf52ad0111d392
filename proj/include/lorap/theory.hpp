// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "lorap/common.hpp"

namespace lorap::theory {

/// Dense operands of the error-propagation analysis. X_q = X + eps.
struct TheoremInstance {
  DenseMatrix a;     // N x N aggregation operator
  DenseMatrix x;     // N x D
  DenseMatrix eps;   // N x D quantization error of X
  DenseMatrix p;     // N x D prompt
  DenseMatrix w_fp;  // M x N
  DenseMatrix w_q;   // M x N
  std::size_t rank_budget = 0;

  DenseMatrix x_q() const { return x + eps; }
};

/// ‖Aε + P‖²_F (prompt added after aggregation).
double post_loss(const TheoremInstance& t);
/// ‖A(ε + P)‖²_F (prompt added before aggregation).
double pre_loss(const TheoremInstance& t);
/// 2(Aε + P).
DenseMatrix post_grad(const TheoremInstance& t);
/// 2AᵀA(ε + P).
DenseMatrix pre_grad(const TheoremInstance& t);

struct Residual {
  std::vector<double> post;  // (Aε)_i + P_i
  std::vector<double> pre;   // (Aε)_i + (AP)_i
};
Residual targeted_residual(const TheoremInstance& t, std::size_t node);

/// Thin SVD a = u·diag(s)·vᵀ with s descending; u is m×p, v is n×p, p=min(m,n).
struct Svd {
  DenseMatrix u;
  std::vector<double> s;
  DenseMatrix v;
};

/// One-sided Jacobi SVD. Throws NumericalError if it fails to converge.
Svd jacobi_svd(const DenseMatrix& a, int max_sweeps = 80);
/// Leading `count` singular triplets by power iteration with deflation.
Svd power_svd(const DenseMatrix& a, std::size_t count, std::uint64_t seed = 0,
              int max_iters = 20000);
/// Σ_{j<k} s_j u_j v_jᵀ.
DenseMatrix truncate(const Svd& svd, std::size_t k);
DenseMatrix pseudo_inverse(const DenseMatrix& a, double rcond = 1e-12);

/// ℰ = W_q·A·X_q − W_fp·A·X.
DenseMatrix output_error(const TheoremInstance& t);

struct SvdBound {
  double achieved = 0.0;        // ‖ℰ − Q*‖_F with Q* the rank-k truncation of ℰ
  double bound = 0.0;           // sqrt of the tail singular-value energy
  DenseMatrix correction;       // Q*
  std::optional<DenseMatrix> prompt;  // P = −pinv(W_q)·Q* when W_q has full row rank
  double prompt_loss = 0.0;     // ‖ℰ + W_q·P‖_F for that prompt
};
SvdBound svd_bound(const TheoremInstance& t);
/// Same achieved value computed from power-iteration singular triplets.
double achieved_by_power_iteration(const DenseMatrix& e, std::size_t k, std::uint64_t seed = 0);

/// W = L1·L2 + R with L1·L2 the best rank-r approximation.
struct SvdQuantParts {
  DenseMatrix l1;  // m x r
  DenseMatrix l2;  // r x n
  DenseMatrix r;   // residual
};
SvdQuantParts svdquant_decompose(const DenseMatrix& w, std::size_t r);

/// Both sides of the low-rank-branch error identity:
/// lhs = ‖X̂W − (X̂L1L2 + Q(X̂)Q(R))‖_F, rhs = ‖X̂R − Q(X̂)Q(R)‖_F.
struct SvdQuantIdentity {
  double lhs = 0.0;
  double rhs = 0.0;
};
SvdQuantIdentity svdquant_identity(const DenseMatrix& x_hat, const DenseMatrix& w,
                                   const SvdQuantParts& parts, int bits);

/// Central differences (f(X+hE_ij) − f(X−hE_ij)) / 2h.
DenseMatrix finite_diff(const std::function<double(const DenseMatrix&)>& f, const DenseMatrix& x0,
                        double h);

/// Star graph with self-loops: hub 0 plus `leaves` leaves. Errors are
/// uniform(−step/2, step/2) + bias. Every node gets P_i = −E[(Aε)_i]; the
/// hub's residual is sampled in both insertion modes.
struct StarMonteCarlo {
  double post_mean = 0.0, post_se = 0.0;
  double pre_mean = 0.0, pre_se = 0.0;
};
StarMonteCarlo star_monte_carlo(std::size_t leaves, double step, double bias, std::size_t samples,
                                std::uint64_t seed);

/// Random instance with N in [2, max_n], D in [1, max_d], M in [1, max_m].
TheoremInstance random_instance(Rng& rng, std::size_t max_n, std::size_t max_d, std::size_t max_m);

struct CheckResult {
  std::string name;
  bool pass = false;
  double achieved = 0.0;
  double bound = 0.0;
  std::string detail;
};

CheckResult check_decoupling(std::size_t instances, std::uint64_t seed);
CheckResult check_targeted_bias(std::uint64_t seed);
CheckResult check_svd_bound(std::size_t instances, std::uint64_t seed);
CheckResult check_svdquant(std::uint64_t seed);
std::vector<CheckResult> run_verify_suite(std::uint64_t seed);

}  // namespace lorap::theory
