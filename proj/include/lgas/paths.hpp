#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "lgas/constants.hpp"
#include "lgas/limit_chain.hpp"
#include "lgas/vec.hpp"

namespace lgas {

// One flight: distance xi traveled with (unit) velocity v. For a chain,
// flight j carries V_{j-1}; for billiard events, v_in.
struct Flight {
  double xi = 0.0;
  Vec v;
};

// Replicated displacements Q_n, row-major replicas x d.
struct TrajectoryBatch {
  int d = 0;
  int64_t n = 0;
  int64_t replicas = 0;
  std::vector<double> Q;

  double* row(int64_t r) { return Q.data() + r * d; }
  const double* row(int64_t r) const { return Q.data() + r * d; }
};

// Q = sum xi_j v_j with compensated summation. Throws on empty input.
Vec displacement(std::span<const Flight> flights);

// Cumulative collision times tau_0 = 0, ..., tau_n; strictly increasing.
// Throws on nonpositive xi.
std::vector<double> flight_times(std::span<const double> xi);

// Largest n with tau_n <= t. Throws NeedMoreFlights when t > tau.back().
int64_t collisions_before(double t, std::span<const double> tau);

// X_t = Q_{nu_t} + (t - tau_{nu_t}) V_{nu_t}.
Vec continuous_position(double t, std::span<const Flight> flights, std::span<const double> tau);

struct TruncationParams {
  double gamma = 0.5;
  int64_t n = 0;
  double r_n = 0.0;  // sqrt(n (log n)^gamma)

  static TruncationParams make(int64_t n, double gamma);
};

// Hard threshold: xi' = xi 1{xi^2 <= r_n^2}.
std::vector<double> truncate(std::span<const double> xi, const TruncationParams& params);

struct Decomposition {
  std::vector<double> xi_trunc;
  std::vector<double> m;         // conditional mean of xi' given the deflection
  std::vector<double> xi_tilde;  // xi' - m
};

// Surrogate backend: m is the closed-form truncated mean, broadcast.
// Empirical backend: m is a binned regression of xi' on the deflection
// angle with equal-count bins; throws WidenBinsError when the sample cannot
// fill the bins.
Decomposition decompose(std::span<const double> xi_trunc, std::span<const double> deflection,
                        const KernelBackend& backend, const TruncationParams& params);

// Scale factors of the superdiffusive normalizations.
double discrete_scale(int64_t n, const ModelConstants& c);   // 1/(sigma_d sqrt(n log n)), n >= 2
double continuous_scale(double t, const ModelConstants& c);  // 1/(Sigma_d sqrt(t log t)), t > 1

TrajectoryBatch normalize_discrete(const TrajectoryBatch& batch, const ModelConstants& c);
Vec normalize_continuous(const Vec& x_t, double t, const ModelConstants& c);

struct RenewalRecord {
  int64_t nu_t = 0;
  int64_t n_t = 0;
  double deviation = 0.0;
};

RenewalRecord renewal_compare(double t, std::span<const double> tau, const ModelConstants& c);

}  // namespace lgas
