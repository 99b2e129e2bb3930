#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "lgas/constants.hpp"
#include "lgas/rng.hpp"
#include "lgas/vec.hpp"

namespace lgas {

// Free-path surrogate law: flat plateau of height c0 on (0, b], zero on
// (b, x0), and the exact tail theta * x^-3 on [x0, inf). Calibrated so that
//   (1) total mass is 1,
//   (2) the mean is xi_bar,
//   (3) the truncated second moment satisfies
//         E[xi^2 1{xi <= L}] = theta * ln L   exactly for every L >= x0,
// i.e. the second moment carries the paper's d*sigma_d^2*log n leading term
// with zero constant offset. Constraint (3) is dropped (x0 = b, plain
// plateau + tail) for dimensions where its root exceeds kTailStartCap.
struct SurrogateKernel {
  int d = 0;
  double theta = 0.0;
  double xi_bar = 0.0;
  double c0 = 0.0;  // plateau density
  double b = 0.0;   // plateau edge
  double x0 = 0.0;  // tail start (= b when constraint (3) is inactive)
  bool moment_matched = false;

  double pdf(double x) const;
  double cdf(double x) const;
  double inv_cdf(double u) const;
  double survival(double x) const { return 1.0 - cdf(x); }
  // Closed-form truncated moments: integral of x^k pdf(x) over (0, L],
  // k in {0,...,4}.
  double truncated_moment(int k, double L) const;
};

inline constexpr double kTailStartCap = 1e6;

SurrogateKernel calibrate_surrogate(const ModelConstants& constants);

// Paired (free path, deflection angle) rows harvested from billiard output.
struct EmpiricalTable {
  std::vector<double> xi;
  std::vector<double> deflection;
};

struct KernelBackend {
  enum class Kind { surrogate_iid, empirical };
  Kind kind = Kind::surrogate_iid;
  int d = 0;
  SurrogateKernel surrogate;
  EmpiricalTable table;  // non-empty in empirical mode
  int m_bins = 32;       // equal-count deflection bins for conditional means

  static KernelBackend make_surrogate(const ModelConstants& constants);
  static KernelBackend make_empirical(int d, EmpiricalTable table, int m_bins = 32);
  void validate() const;
};

double sample_free_path(const KernelBackend& backend, Pcg32& rng);

// One step of the limiting flight chain. xi and V refer to the state after
// the step's collision; flight n travels with the *previous* V.
struct ChainState {
  double xi = 0.0;
  double deflection = 0.0;  // angle(V_prev, V), the eta-proxy descriptor
  Vec V;
};

ChainState initial_chain_state(int d);
ChainState step_chain(const ChainState& state, const KernelBackend& backend, Pcg32& rng);

// Lagged covariance of f over consecutive chain states, lags 0..max_lag.
// Requires run length >= 10 * max_lag.
std::vector<double> mixing_series(std::span<const ChainState> run,
                                  const std::function<double(const ChainState&, const ChainState&)>& f,
                                  int max_lag);

// Lagged autocovariance of a plain series (helper used by mixing_series).
std::vector<double> lagged_covariance(std::span<const double> y, int max_lag);

}  // namespace lgas
