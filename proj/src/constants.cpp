#include "lgas/constants.hpp"

#include <cmath>
#include <stdexcept>

namespace lgas {

double riemann_zeta(int s) {
  if (s < 2) throw std::invalid_argument("riemann_zeta: s must be >= 2");
  const int N = 64;
  double sum = 0.0;
  for (int k = N - 1; k >= 1; --k) sum += std::pow(static_cast<double>(k), -s);
  // Tail sum_{k>=N} k^-s by Euler-Maclaurin.
  const double Nd = static_cast<double>(N);
  const double Ns = std::pow(Nd, -s);
  const double sd = static_cast<double>(s);
  double tail = Nd * Ns / (sd - 1.0) + 0.5 * Ns + sd * Ns / (12.0 * Nd) -
                sd * (sd + 1.0) * (sd + 2.0) * Ns / (720.0 * Nd * Nd * Nd) +
                sd * (sd + 1.0) * (sd + 2.0) * (sd + 3.0) * (sd + 4.0) * Ns /
                    (30240.0 * Nd * Nd * Nd * Nd * Nd);
  return sum + tail;
}

ModelConstants make_constants(int d) {
  if (d < 2) throw std::invalid_argument("make_constants: dimension must be >= 2");
  const double pi = 3.14159265358979323846264338328;
  ModelConstants m;
  m.d = d;
  m.zeta_d = riemann_zeta(d);
  m.theta_d = std::pow(2.0, 2 - d) / (static_cast<double>(d) * (d + 1) * m.zeta_d);
  m.sigma2_d = m.theta_d / (2.0 * d);
  m.xi_bar = std::tgamma((d + 1) / 2.0) / std::pow(pi, (d - 1) / 2.0);
  m.Sigma2_d = m.sigma2_d / m.xi_bar;
  return m;
}

}  // namespace lgas
