#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "lgas/constants.hpp"
#include "lgas/parallel.hpp"
#include "lgas/rng.hpp"
#include "lgas/vec.hpp"

namespace lgas {

// Smooth test function with analytic first and second derivatives and
// declared sup norms over the probe region (||w|| <= 3 for unbounded
// derivatives).
struct TestFunction {
  std::string id;
  int d = 0;
  std::function<double(const Vec&)> h;
  std::function<Vec(const Vec&)> grad;
  std::function<void(const Vec&, double*)> hess;  // d x d row-major
  double sup_dh = 0.0;
  double sup_d2h = 0.0;
};

struct QuadSpec {
  int n_theta = 64;    // Gauss-Legendre nodes for the semigroup integral
  int n_hermite = 32;  // Gauss-Hermite nodes per dimension (d <= 3)
  int n_mc_z = 100000; // Monte-Carlo Z draws for d > 3
};

// Solution of Delta f - w . grad f = h - E h(Z) via the Ornstein-Uhlenbeck
// semigroup representation. The u-integral is mapped by e^-u = sin(theta),
// which removes the endpoint singularity and leaves a smooth integrand on
// [0, pi/2]; the Gaussian expectation uses tensorized Gauss-Hermite nodes.
class SteinSolution {
 public:
  SteinSolution(const TestFunction& h, const QuadSpec& spec);

  double value(const Vec& w) const;
  Vec gradient(const Vec& w) const;
  void hessian(const Vec& w, double* out) const;  // d x d row-major
  void eval_all(const Vec& w, double* f, Vec* g, double* H) const;

  double e_h_z() const { return e_h_z_; }
  // Delta f(w) - w . grad f(w) - (h(w) - E h(Z)); zero for the exact solution.
  double stein_residual(const Vec& w) const;
  const TestFunction& test_function() const { return *h_; }

 private:
  const TestFunction* h_;
  int d_;
  std::vector<double> sin_t_, cos_t_, wt_;  // theta nodes
  std::vector<Vec> z_;                      // Gaussian nodes
  std::vector<double> wz_;                  // normalized weights (sum 1)
  double e_h_z_ = 0.0;
};

// Builds the solution and verifies the Stein-equation residual at fixed
// probe points; throws QuadratureError beyond 1e-3.
SteinSolution solve_stein(const TestFunction& h, const QuadSpec& spec = {});

struct BoundsReport {
  std::string fn_id;
  double sup_df = 0.0, bound_df = 0.0;      // sqrt(pi/2) sup||Dh||
  double sup_hess_hs = 0.0, bound_hess = 0.0;  // sup||Dh||
  double sup_d3 = 0.0, bound_d3 = 0.0;      // sqrt(2 pi)/4 sup||D^2 h||
  bool ok = false;
};

inline constexpr double kBoundSlack = 0.05;  // quadrature slack on the bounds

BoundsReport check_derivative_bounds(const TestFunction& h, const SteinSolution& sol,
                                     std::span<const Vec> probes);

// Probe points: standard normal draws plus a shell at radius 3.
std::vector<Vec> bound_probes(int d, int count, uint64_t seed);

// The fixed 12-function battery (coordinates, squares, trig, Gaussian
// bumps, smoothed indicators).
std::vector<TestFunction> test_battery(int d, uint64_t seed);
// Random mixture of Gaussian bumps with numerically estimated sup norms.
TestFunction make_bump_mixture(int d, int terms, uint64_t seed);

// ---- exchangeable pair ----

// Per-replica path data consumed by the pair machinery. Generators
// regenerate replicas from counter-based streams, so batches never have to
// be held in memory.
struct ReplicaPath {
  std::vector<double> xi_tilde;  // centered truncated free paths
  std::vector<Vec> V;            // V_{i-1} for flight i = 1..n
  std::vector<double> cond_var;  // E(xi_tilde^2 | eta) per index
  std::vector<int32_t> bin;      // conditioning tag (empirical backend only)
};
using ReplicaGenerator = std::function<void(int64_t replica, ReplicaPath& out)>;
// Conditionally independent copy of xi_tilde at index i (same law given eta).
using TildeResampler = std::function<double(size_t i, const ReplicaPath&, Pcg32&)>;

struct PairBatch {
  int d = 0;
  int64_t n = 0;
  int64_t replicas = 0;
  std::vector<double> W, Wp;  // replicas x d
  std::vector<int64_t> I;     // resampled index, 1-based
  std::vector<double> xi_old, xi_new;
  std::vector<double> S;  // replicas x d x d: sum_i V V^t (cond_var_i + xi_tilde_i^2)
};

PairBatch build_pair(const ReplicaGenerator& gen, const TildeResampler& resample, int d,
                     int64_t n, int64_t replicas, const ModelConstants& constants,
                     uint64_t seed, Exec exec = Exec::openmp);

struct PairIdentityReport {
  int64_t n = 0, replicas = 0;
  int inner = 0;
  // (a) regression of the conditional increment on W recovers slope -1/n
  double slope = 0.0, slope_target = 0.0, slope_stderr = 0.0;
  // (b) quadratic identity, componentwise z-scores of mean(lhs - rhs)
  double quad_max_abs_z = 0.0;
  // antisymmetry check with the closed-form f_h of h(w) = w1^2
  double antisym_mean = 0.0, antisym_stderr = 0.0;
  // antisymmetry with a quadrature-solved f_h (optional)
  double antisym_q_mean = 0.0, antisym_q_stderr = 0.0;
  bool has_quadrature_fh = false;
};

PairIdentityReport verify_pair_identities(const ReplicaGenerator& gen,
                                          const TildeResampler& resample, int d, int64_t n,
                                          int64_t replicas, int inner_samples,
                                          const ModelConstants& constants, uint64_t seed,
                                          const SteinSolution* fh = nullptr,
                                          Exec exec = Exec::openmp);

struct LeadingErrorRecord {
  std::string fn_id;
  int64_t n = 0;
  double estimate = 0.0;     // E < Id - (2 sigma^2 n log n)^-1 S, Hess f_h(W) >
  double est_stderr = 0.0;
  double direct_gap = 0.0;   // |E h(W) - E h(Z)|
  double gap_stderr = 0.0;
};

LeadingErrorRecord leading_error_term(const ReplicaGenerator& gen, int d, int64_t n,
                                      int64_t replicas, const ModelConstants& constants,
                                      const SteinSolution& fh, uint64_t seed,
                                      Exec exec = Exec::openmp);

// Quadrature node builders (exposed for tests).
void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w);  // on [-1, 1]
void gauss_hermite(int n, std::vector<double>& x, std::vector<double>& w);   // weight e^{-x^2}

}  // namespace lgas
