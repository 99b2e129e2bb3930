#pragma once

namespace lgas {

// Closed-form constants of the superdiffusive limit, all derived from the
// dimension alone. Immutable after construction; shared freely across
// threads.
struct ModelConstants {
  int d = 0;
  double zeta_d = 0.0;    // Riemann zeta(d)
  double theta_d = 0.0;   // 2^{2-d} / (d (d+1) zeta(d)), free-path tail amplitude
  double sigma2_d = 0.0;  // theta_d / (2d), discrete-time variance constant
  double Sigma2_d = 0.0;  // sigma2_d / xi_bar, continuous-time variance constant
  double xi_bar = 0.0;    // Gamma((d+1)/2) / pi^{(d-1)/2}, mean free path
};

// Direct series with Euler-Maclaurin tail correction; accurate to ~1e-15
// relative for integer s >= 2.
double riemann_zeta(int s);

// Throws std::invalid_argument for d < 2.
ModelConstants make_constants(int d);

}  // namespace lgas
