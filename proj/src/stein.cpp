#include "lgas/stein.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <stdexcept>
#include <tuple>

#include "lgas/errors.hpp"
#include "lgas/paths.hpp"

namespace lgas {

namespace {
constexpr double kPi = 3.14159265358979323846264338328;
}

void gauss_legendre(int n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(static_cast<size_t>(n), 0.0);
  w.assign(static_cast<size_t>(n), 0.0);
  int m = (n + 1) / 2;
  for (int i = 0; i < m; ++i) {
    double z = std::cos(kPi * (i + 0.75) / (n + 0.5));
    double pp = 0.0;
    for (int it = 0; it < 100; ++it) {
      double p1 = 1.0, p2 = 0.0;
      for (int j = 0; j < n; ++j) {
        double p3 = p2;
        p2 = p1;
        p1 = ((2.0 * j + 1.0) * z * p2 - j * p3) / (j + 1.0);
      }
      pp = n * (z * p1 - p2) / (z * z - 1.0);
      double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) < 1e-15) break;
    }
    x[static_cast<size_t>(i)] = -z;
    x[static_cast<size_t>(n - 1 - i)] = z;
    w[static_cast<size_t>(i)] = 2.0 / ((1.0 - z * z) * pp * pp);
    w[static_cast<size_t>(n - 1 - i)] = w[static_cast<size_t>(i)];
  }
}

void gauss_hermite(int n, std::vector<double>& x, std::vector<double>& w) {
  x.assign(static_cast<size_t>(n), 0.0);
  w.assign(static_cast<size_t>(n), 0.0);
  const double pim4 = 0.75112554446494248286;  // pi^{-1/4}
  int m = (n + 1) / 2;
  double z = 0.0, pp = 0.0;
  for (int i = 0; i < m; ++i) {
    if (i == 0)
      z = std::sqrt(2.0 * n + 1.0) - 1.85575 * std::pow(2.0 * n + 1.0, -1.0 / 6.0);
    else if (i == 1)
      z -= 1.14 * std::pow(static_cast<double>(n), 0.426) / z;
    else if (i == 2)
      z = 1.86 * z - 0.86 * x[0];
    else if (i == 3)
      z = 1.91 * z - 0.91 * x[1];
    else
      z = 2.0 * z - x[static_cast<size_t>(i - 2)];
    for (int it = 0; it < 100; ++it) {
      double p1 = pim4, p2 = 0.0;
      for (int j = 0; j < n; ++j) {
        double p3 = p2;
        p2 = p1;
        p1 = z * std::sqrt(2.0 / (j + 1.0)) * p2 - std::sqrt(static_cast<double>(j) / (j + 1.0)) * p3;
      }
      pp = std::sqrt(2.0 * n) * p2;
      double z1 = z;
      z = z1 - p1 / pp;
      if (std::abs(z - z1) < 1e-14) break;
    }
    x[static_cast<size_t>(i)] = z;
    x[static_cast<size_t>(n - 1 - i)] = -z;
    w[static_cast<size_t>(i)] = 2.0 / (pp * pp);
    w[static_cast<size_t>(n - 1 - i)] = w[static_cast<size_t>(i)];
  }
}

SteinSolution::SteinSolution(const TestFunction& h, const QuadSpec& spec) : h_(&h), d_(h.d) {
  // theta nodes on (0, pi/2)
  std::vector<double> gx, gw;
  gauss_legendre(spec.n_theta, gx, gw);
  sin_t_.resize(gx.size());
  cos_t_.resize(gx.size());
  wt_.resize(gx.size());
  for (size_t i = 0; i < gx.size(); ++i) {
    double th = (gx[i] + 1.0) * kPi / 4.0;
    sin_t_[i] = std::sin(th);
    cos_t_[i] = std::cos(th);
    wt_[i] = gw[i] * kPi / 4.0;
  }

  // Gaussian nodes: tensor Gauss-Hermite for d <= 3, seeded Monte-Carlo
  // draws beyond (tensor grids explode with dimension).
  if (d_ <= 3) {
    std::vector<double> hx, hw;
    gauss_hermite(spec.n_hermite, hx, hw);
    const double sqrt_pi = std::sqrt(kPi);
    const double sqrt2 = std::sqrt(2.0);
    size_t total = 1;
    for (int k = 0; k < d_; ++k) total *= hx.size();
    z_.reserve(total);
    wz_.reserve(total);
    std::array<size_t, kMaxDim> idx{};
    for (size_t flat = 0; flat < total; ++flat) {
      Vec zv(d_);
      double wv = 1.0;
      for (int k = 0; k < d_; ++k) {
        zv[k] = sqrt2 * hx[idx[static_cast<size_t>(k)]];
        wv *= hw[idx[static_cast<size_t>(k)]] / sqrt_pi;
      }
      z_.push_back(zv);
      wz_.push_back(wv);
      for (int k = 0; k < d_; ++k) {
        if (++idx[static_cast<size_t>(k)] < hx.size()) break;
        idx[static_cast<size_t>(k)] = 0;
      }
    }
  } else {
    Pcg32 rng = derive_stream(0x5E1Full, Stage::misc, static_cast<uint64_t>(d_));
    z_.reserve(static_cast<size_t>(spec.n_mc_z));
    wz_.assign(static_cast<size_t>(spec.n_mc_z), 1.0 / spec.n_mc_z);
    for (int i = 0; i < spec.n_mc_z; ++i) {
      Vec zv(d_);
      for (int k = 0; k < d_; ++k) zv[k] = rng.normal();
      z_.push_back(zv);
    }
  }

  Kahan acc;
  for (size_t j = 0; j < z_.size(); ++j) acc.add(wz_[j] * h_->h(z_[j]));
  e_h_z_ = acc.sum;
}

double SteinSolution::value(const Vec& w) const {
  Kahan outer;
  Vec arg(d_);
  for (size_t t = 0; t < sin_t_.size(); ++t) {
    double s = sin_t_[t], c = cos_t_[t];
    Kahan inner;
    for (size_t j = 0; j < z_.size(); ++j) {
      for (int k = 0; k < d_; ++k) arg[k] = s * w[k] + c * z_[j][k];
      inner.add(wz_[j] * h_->h(arg));
    }
    outer.add(wt_[t] * (c / s) * (inner.sum - e_h_z_));
  }
  return -outer.sum;
}

Vec SteinSolution::gradient(const Vec& w) const {
  std::array<Kahan, kMaxDim> acc{};
  Vec arg(d_);
  for (size_t t = 0; t < sin_t_.size(); ++t) {
    double s = sin_t_[t], c = cos_t_[t];
    std::array<Kahan, kMaxDim> inner{};
    for (size_t j = 0; j < z_.size(); ++j) {
      for (int k = 0; k < d_; ++k) arg[k] = s * w[k] + c * z_[j][k];
      Vec g = h_->grad(arg);
      for (int k = 0; k < d_; ++k) inner[static_cast<size_t>(k)].add(wz_[j] * g[k]);
    }
    for (int k = 0; k < d_; ++k) acc[static_cast<size_t>(k)].add(wt_[t] * c * inner[static_cast<size_t>(k)].sum);
  }
  Vec out(d_);
  for (int k = 0; k < d_; ++k) out[k] = -acc[static_cast<size_t>(k)].sum;
  return out;
}

void SteinSolution::hessian(const Vec& w, double* out) const {
  const int dd = d_ * d_;
  std::vector<Kahan> acc(static_cast<size_t>(dd));
  std::vector<double> hh(static_cast<size_t>(dd));
  Vec arg(d_);
  for (size_t t = 0; t < sin_t_.size(); ++t) {
    double s = sin_t_[t], c = cos_t_[t];
    std::vector<Kahan> inner(static_cast<size_t>(dd));
    for (size_t j = 0; j < z_.size(); ++j) {
      for (int k = 0; k < d_; ++k) arg[k] = s * w[k] + c * z_[j][k];
      h_->hess(arg, hh.data());
      for (int e = 0; e < dd; ++e) inner[static_cast<size_t>(e)].add(wz_[j] * hh[static_cast<size_t>(e)]);
    }
    for (int e = 0; e < dd; ++e) acc[static_cast<size_t>(e)].add(wt_[t] * s * c * inner[static_cast<size_t>(e)].sum);
  }
  for (int e = 0; e < dd; ++e) out[e] = -acc[static_cast<size_t>(e)].sum;
}

void SteinSolution::eval_all(const Vec& w, double* f, Vec* g, double* H) const {
  if (f) *f = value(w);
  if (g) *g = gradient(w);
  if (H) hessian(w, H);
}

double SteinSolution::stein_residual(const Vec& w) const {
  std::vector<double> H(static_cast<size_t>(d_ * d_));
  hessian(w, H.data());
  double lap = 0.0;
  for (int k = 0; k < d_; ++k) lap += H[static_cast<size_t>(k * d_ + k)];
  Vec g = gradient(w);
  return lap - dot(w, g) - (h_->h(w) - e_h_z_);
}

SteinSolution solve_stein(const TestFunction& h, const QuadSpec& spec) {
  SteinSolution sol(h, spec);
  Pcg32 rng = derive_stream(0x57E1Dull, Stage::probe, 0);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    Vec w(h.d);
    for (int k = 0; k < h.d; ++k) w[k] = rng.normal();
    worst = std::max(worst, std::abs(sol.stein_residual(w)));
  }
  if (worst > 1e-3)
    throw QuadratureError("solve_stein: residual " + std::to_string(worst) + " for " + h.id);
  return sol;
}

std::vector<Vec> bound_probes(int d, int count, uint64_t seed) {
  std::vector<Vec> probes;
  probes.reserve(static_cast<size_t>(count));
  Pcg32 rng = derive_stream(seed, Stage::probe, 1);
  for (int i = 0; i < count; ++i) {
    Vec w(d);
    if (i % 4 == 3) {
      // shell at radius 3, where quadratic test functions stress the bounds
      w = 3.0 * uniform_on_sphere(d, rng);
    } else {
      for (int k = 0; k < d; ++k) w[k] = rng.normal();
      if (norm(w) > 3.0) w = 3.0 * normalized(w);
    }
    probes.push_back(w);
  }
  return probes;
}

namespace {

// Operator norm of a symmetric k-linear form restricted to the diagonal
// (which attains it): max over unit u of |T[u,u,u]|.
double d3_operator_norm(const std::vector<double>& T, int d) {
  auto apply = [&](const Vec& u) {
    double s = 0.0;
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        for (int l = 0; l < d; ++l)
          s += T[static_cast<size_t>((j * d + k) * d + l)] * u[j] * u[k] * u[l];
    return std::abs(s);
  };
  double best = 0.0;
  if (d == 1) {
    Vec u(1);
    u[0] = 1.0;
    return apply(u);
  }
  if (d == 2) {
    for (int i = 0; i < 720; ++i) {
      double a = kPi * i / 720.0;
      Vec u(2);
      u[0] = std::cos(a);
      u[1] = std::sin(a);
      best = std::max(best, apply(u));
    }
    return best;
  }
  Pcg32 rng = derive_stream(0xD3u, Stage::probe, static_cast<uint64_t>(d));
  for (int i = 0; i < 4096; ++i) best = std::max(best, apply(uniform_on_sphere(d, rng)));
  return best;
}

double hessian_hs_norm(const std::vector<double>& H) {
  double s = 0.0;
  for (double v : H) s += v * v;
  return std::sqrt(s);
}

}  // namespace

BoundsReport check_derivative_bounds(const TestFunction& h, const SteinSolution& sol,
                                     std::span<const Vec> probes) {
  if (probes.size() < 100)
    throw std::invalid_argument("check_derivative_bounds: need at least 100 probes");
  const int d = h.d;
  BoundsReport rep;
  rep.fn_id = h.id;
  const double delta = 1e-3;
  std::vector<double> Hp(static_cast<size_t>(d * d)), Hm(static_cast<size_t>(d * d));
  std::vector<double> T(static_cast<size_t>(d * d * d));
  for (const Vec& w : probes) {
    rep.sup_df = std::max(rep.sup_df, norm(sol.gradient(w)));
    std::vector<double> H(static_cast<size_t>(d * d));
    sol.hessian(w, H.data());
    rep.sup_hess_hs = std::max(rep.sup_hess_hs, hessian_hs_norm(H));
    // third derivative by central differences of the hessian
    for (int l = 0; l < d; ++l) {
      Vec wp = w, wm = w;
      wp[l] += delta;
      wm[l] -= delta;
      sol.hessian(wp, Hp.data());
      sol.hessian(wm, Hm.data());
      for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k)
          T[static_cast<size_t>((j * d + k) * d + l)] =
              (Hp[static_cast<size_t>(j * d + k)] - Hm[static_cast<size_t>(j * d + k)]) / (2.0 * delta);
    }
    rep.sup_d3 = std::max(rep.sup_d3, d3_operator_norm(T, d));
  }
  rep.bound_df = std::sqrt(kPi / 2.0) * h.sup_dh;
  rep.bound_hess = h.sup_dh;
  rep.bound_d3 = std::sqrt(2.0 * kPi) / 4.0 * h.sup_d2h;
  const double slack = 1.0 + kBoundSlack;
  rep.ok = rep.sup_df <= rep.bound_df * slack && rep.sup_hess_hs <= rep.bound_hess * slack &&
           (h.sup_d2h == 0.0 ? rep.sup_d3 <= 1e-6 : rep.sup_d3 <= rep.bound_d3 * slack);
  return rep;
}

namespace {

TestFunction coordinate_fn(int d, int axis) {
  TestFunction f;
  f.id = "coord_" + std::to_string(axis + 1);
  f.d = d;
  f.h = [axis](const Vec& w) { return w[axis]; };
  f.grad = [d, axis](const Vec&) { return Vec::axis(d, axis); };
  f.hess = [d](const Vec&, double* H) { std::fill(H, H + d * d, 0.0); };
  f.sup_dh = 1.0;
  f.sup_d2h = 0.0;
  return f;
}

TestFunction square_fn(int d, int axis) {
  TestFunction f;
  f.id = "square_" + std::to_string(axis + 1);
  f.d = d;
  f.h = [axis](const Vec& w) { return w[axis] * w[axis]; };
  f.grad = [d, axis](const Vec& w) {
    Vec g(d);
    g[axis] = 2.0 * w[axis];
    return g;
  };
  f.hess = [d, axis](const Vec&, double* H) {
    std::fill(H, H + d * d, 0.0);
    H[axis * d + axis] = 2.0;
  };
  f.sup_dh = 6.0;  // over ||w|| <= 3
  f.sup_d2h = 2.0;
  return f;
}

TestFunction cross_fn(int d) {
  TestFunction f;
  f.id = "cross_12";
  f.d = d;
  f.h = [](const Vec& w) { return w[0] * w[1]; };
  f.grad = [d](const Vec& w) {
    Vec g(d);
    g[0] = w[1];
    g[1] = w[0];
    return g;
  };
  f.hess = [d](const Vec&, double* H) {
    std::fill(H, H + d * d, 0.0);
    H[1] = 1.0;
    H[d] = 1.0;
  };
  f.sup_dh = 3.0;  // over ||w|| <= 3
  f.sup_d2h = 1.0;
  return f;
}

TestFunction sin_fn(int d) {
  TestFunction f;
  f.id = "sin_1";
  f.d = d;
  f.h = [](const Vec& w) { return std::sin(w[0]); };
  f.grad = [d](const Vec& w) {
    Vec g(d);
    g[0] = std::cos(w[0]);
    return g;
  };
  f.hess = [d](const Vec& w, double* H) {
    std::fill(H, H + d * d, 0.0);
    H[0] = -std::sin(w[0]);
  };
  f.sup_dh = 1.0;
  f.sup_d2h = 1.0;
  return f;
}

TestFunction cos_sum_fn(int d) {
  TestFunction f;
  f.id = "cos_sum";
  f.d = d;
  f.h = [](const Vec& w) { return std::cos(w[0] + w[1]); };
  f.grad = [d](const Vec& w) {
    double s = -std::sin(w[0] + w[1]);
    Vec g(d);
    g[0] = s;
    g[1] = s;
    return g;
  };
  f.hess = [d](const Vec& w, double* H) {
    std::fill(H, H + d * d, 0.0);
    double c = -std::cos(w[0] + w[1]);
    H[0] = c;
    H[1] = c;
    H[d] = c;
    H[d + 1] = c;
  };
  f.sup_dh = std::sqrt(2.0);
  f.sup_d2h = 2.0;
  return f;
}

TestFunction bump_fn(int d, const Vec& center, double s, int tag) {
  TestFunction f;
  f.id = "bump_" + std::to_string(tag);
  f.d = d;
  const double inv_s2 = 1.0 / (s * s);
  f.h = [center, inv_s2](const Vec& w) { return std::exp(-0.5 * norm2(w - center) * inv_s2); };
  f.grad = [center, inv_s2](const Vec& w) {
    Vec r = w - center;
    double v = std::exp(-0.5 * norm2(r) * inv_s2);
    return (-v * inv_s2) * r;
  };
  f.hess = [d, center, inv_s2](const Vec& w, double* H) {
    Vec r = w - center;
    double v = std::exp(-0.5 * norm2(r) * inv_s2);
    for (int j = 0; j < d; ++j)
      for (int k = 0; k < d; ++k)
        H[j * d + k] = v * (inv_s2 * inv_s2 * r[j] * r[k] - (j == k ? inv_s2 : 0.0));
  };
  f.sup_dh = std::exp(-0.5) / s;
  f.sup_d2h = inv_s2;  // attained at the center
  return f;
}

TestFunction smooth_step_fn(int d, double a, double lambda, int tag) {
  TestFunction f;
  f.id = "step_" + std::to_string(tag);
  f.d = d;
  f.h = [a, lambda](const Vec& w) { return 0.5 * (1.0 + std::tanh((a - w[0]) / lambda)); };
  f.grad = [d, a, lambda](const Vec& w) {
    double t = std::tanh((a - w[0]) / lambda);
    Vec g(d);
    g[0] = -0.5 * (1.0 - t * t) / lambda;
    return g;
  };
  f.hess = [d, a, lambda](const Vec& w, double* H) {
    std::fill(H, H + d * d, 0.0);
    double t = std::tanh((a - w[0]) / lambda);
    H[0] = (1.0 - t * t) * t / (lambda * lambda);
  };
  f.sup_dh = 0.5 / lambda;
  f.sup_d2h = 2.0 / (3.0 * std::sqrt(3.0)) / (lambda * lambda);
  return f;
}

}  // namespace

std::vector<TestFunction> test_battery(int d, uint64_t seed) {
  std::vector<TestFunction> fns;
  fns.push_back(coordinate_fn(d, 0));
  fns.push_back(coordinate_fn(d, std::min(1, d - 1)));
  fns.push_back(square_fn(d, 0));
  fns.push_back(d >= 2 ? cross_fn(d) : square_fn(d, 0));
  fns.push_back(sin_fn(d));
  fns.push_back(d >= 2 ? cos_sum_fn(d) : sin_fn(d));
  Pcg32 rng = derive_stream(seed, Stage::battery, 0);
  for (int i = 0; i < 4; ++i) {
    Vec c(d);
    for (int k = 0; k < d; ++k) c[k] = 4.0 * rng.next_double() - 2.0;
    double s = 0.8 + 0.7 * rng.next_double();
    fns.push_back(bump_fn(d, c, s, i + 1));
  }
  fns.push_back(smooth_step_fn(d, -0.5, 0.5, 1));
  fns.push_back(smooth_step_fn(d, 1.0, 0.5, 2));
  return fns;
}

TestFunction make_bump_mixture(int d, int terms, uint64_t seed) {
  Pcg32 rng = derive_stream(seed, Stage::battery, 1000);
  struct Term {
    Vec c;
    double s;
    double a;
  };
  auto terms_vec = std::make_shared<std::vector<Term>>();
  for (int i = 0; i < terms; ++i) {
    Term t;
    t.c = Vec(d);
    for (int k = 0; k < d; ++k) t.c[k] = 4.0 * rng.next_double() - 2.0;
    t.s = 0.7 + 0.8 * rng.next_double();
    t.a = 2.0 * rng.next_double() - 1.0;
    terms_vec->push_back(t);
  }
  TestFunction f;
  f.id = "bump_mixture";
  f.d = d;
  f.h = [terms_vec](const Vec& w) {
    double s = 0.0;
    for (const auto& t : *terms_vec) s += t.a * std::exp(-0.5 * norm2(w - t.c) / (t.s * t.s));
    return s;
  };
  f.grad = [d, terms_vec](const Vec& w) {
    Vec g(d);
    for (const auto& t : *terms_vec) {
      Vec r = w - t.c;
      double v = t.a * std::exp(-0.5 * norm2(r) / (t.s * t.s)) / (t.s * t.s);
      for (int k = 0; k < d; ++k) g[k] -= v * r[k];
    }
    return g;
  };
  f.hess = [d, terms_vec](const Vec& w, double* H) {
    std::fill(H, H + d * d, 0.0);
    for (const auto& t : *terms_vec) {
      Vec r = w - t.c;
      double inv = 1.0 / (t.s * t.s);
      double v = t.a * std::exp(-0.5 * norm2(r) * inv);
      for (int j = 0; j < d; ++j)
        for (int k = 0; k < d; ++k)
          H[j * d + k] += v * (inv * inv * r[j] * r[k] - (j == k ? inv : 0.0));
    }
  };
  // Numeric sup of the derivative norms over a dense sample of the probe
  // region (mixture sups have no convenient closed form).
  Pcg32 gr = derive_stream(seed, Stage::battery, 2000);
  double sup_dh = 0.0, sup_d2h = 0.0;
  std::vector<double> H(static_cast<size_t>(d * d));
  for (int i = 0; i < 20000; ++i) {
    Vec w(d);
    double rad = 4.5 * std::pow(gr.next_double(), 1.0 / d);
    w = rad * uniform_on_sphere(d, gr);
    sup_dh = std::max(sup_dh, norm(f.grad(w)));
    f.hess(w, H.data());
    // spectral norm by power iteration on H^2 (H symmetric)
    Vec u = uniform_on_sphere(d, gr);
    for (int it = 0; it < 40; ++it) {
      Vec hu(d);
      for (int j = 0; j < d; ++j) {
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += H[static_cast<size_t>(j * d + k)] * u[k];
        hu[j] = s;
      }
      Vec hhu(d);
      for (int j = 0; j < d; ++j) {
        double s = 0.0;
        for (int k = 0; k < d; ++k) s += H[static_cast<size_t>(j * d + k)] * hu[k];
        hhu[j] = s;
      }
      double nn = norm(hhu);
      if (nn < 1e-300) break;
      u = (1.0 / nn) * hhu;
    }
    Vec hu(d);
    for (int j = 0; j < d; ++j) {
      double s = 0.0;
      for (int k = 0; k < d; ++k) s += H[static_cast<size_t>(j * d + k)] * u[k];
      hu[j] = s;
    }
    sup_d2h = std::max(sup_d2h, std::abs(dot(u, hu)));
  }
  f.sup_dh = sup_dh;
  f.sup_d2h = sup_d2h;
  return f;
}

// ---- exchangeable pair ----

namespace {

void assemble_w(const ReplicaPath& path, double scale, int d, double* w_out) {
  std::array<Kahan, kMaxDim> acc{};
  for (size_t i = 0; i < path.xi_tilde.size(); ++i)
    for (int k = 0; k < d; ++k) acc[static_cast<size_t>(k)].add(path.xi_tilde[i] * path.V[i][k]);
  for (int k = 0; k < d; ++k) w_out[k] = scale * acc[static_cast<size_t>(k)].sum;
}

}  // namespace

PairBatch build_pair(const ReplicaGenerator& gen, const TildeResampler& resample, int d,
                     int64_t n, int64_t replicas, const ModelConstants& constants,
                     uint64_t seed, Exec exec) {
  if (n < 2) throw std::invalid_argument("build_pair: n must be >= 2 (log n must be positive)");
  if (replicas < 1) throw std::invalid_argument("build_pair: need replicas");
  const double scale = discrete_scale(n, constants);

  PairBatch out;
  out.d = d;
  out.n = n;
  out.replicas = replicas;
  out.W.assign(static_cast<size_t>(replicas * d), 0.0);
  out.Wp.assign(static_cast<size_t>(replicas * d), 0.0);
  out.I.assign(static_cast<size_t>(replicas), 0);
  out.xi_old.assign(static_cast<size_t>(replicas), 0.0);
  out.xi_new.assign(static_cast<size_t>(replicas), 0.0);
  out.S.assign(static_cast<size_t>(replicas * d * d), 0.0);

  parallel_for(exec, replicas, [&](int64_t r) {
    ReplicaPath path;
    gen(r, path);
    Pcg32 rng = derive_stream(seed, Stage::pair, static_cast<uint64_t>(r));
    double* w = out.W.data() + r * d;
    double* wp = out.Wp.data() + r * d;
    assemble_w(path, scale, d, w);
    size_t i = static_cast<size_t>(rng.next_below(static_cast<uint64_t>(n)));
    double old_v = path.xi_tilde[i];
    double new_v = resample(i, path, rng);
    out.I[static_cast<size_t>(r)] = static_cast<int64_t>(i) + 1;
    out.xi_old[static_cast<size_t>(r)] = old_v;
    out.xi_new[static_cast<size_t>(r)] = new_v;
    for (int k = 0; k < d; ++k) wp[k] = w[k] + scale * path.V[i][k] * (new_v - old_v);
    double* S = out.S.data() + r * d * d;
    for (size_t j = 0; j < path.xi_tilde.size(); ++j) {
      double wgt = path.cond_var[j] + path.xi_tilde[j] * path.xi_tilde[j];
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) S[a * d + b] += path.V[j][a] * path.V[j][b] * wgt;
    }
  });
  return out;
}

PairIdentityReport verify_pair_identities(const ReplicaGenerator& gen,
                                          const TildeResampler& resample, int d, int64_t n,
                                          int64_t replicas, int inner_samples,
                                          const ModelConstants& constants, uint64_t seed,
                                          const SteinSolution* fh, Exec exec) {
  if (replicas < 1000) throw std::invalid_argument("verify_pair_identities: need >= 1e3 replicas");
  const double scale = discrete_scale(n, constants);
  const double scale2 = scale * scale;
  const int dd = d * d;

  struct Slot {
    std::array<double, kMaxDim> W;
    std::array<double, kMaxDim> D;                      // mean conditional increment
    std::array<double, kMaxDim * kMaxDim> quad_diff;    // mean (dW dW^t) - rhs
    double antisym;                                     // closed-form f_h term
    double antisym_q;                                   // quadrature f_h term
  };
  std::vector<Slot> slots(static_cast<size_t>(replicas));

  parallel_for(exec, replicas, [&](int64_t r) {
    ReplicaPath path;
    gen(r, path);
    Pcg32 rng = derive_stream(seed, Stage::pair, static_cast<uint64_t>(r));
    Slot& sl = slots[static_cast<size_t>(r)];
    std::array<double, kMaxDim> w{};
    assemble_w(path, scale, d, w.data());
    sl.W = w;

    std::array<Kahan, kMaxDim> dacc{};
    std::array<Kahan, kMaxDim * kMaxDim> qacc{};
    double antisym = 0.0, antisym_q = 0.0;
    Vec wv(d), wpv(d);
    for (int k = 0; k < d; ++k) wv[k] = w[static_cast<size_t>(k)];
    for (int s = 0; s < inner_samples; ++s) {
      size_t i = static_cast<size_t>(rng.next_below(static_cast<uint64_t>(n)));
      double diff = resample(i, path, rng) - path.xi_tilde[i];
      std::array<double, kMaxDim> dw{};
      for (int k = 0; k < d; ++k) dw[static_cast<size_t>(k)] = scale * path.V[i][k] * diff;
      for (int k = 0; k < d; ++k) dacc[static_cast<size_t>(k)].add(dw[static_cast<size_t>(k)]);
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b)
          qacc[static_cast<size_t>(a * d + b)].add(dw[static_cast<size_t>(a)] * dw[static_cast<size_t>(b)]);
      if (s == 0) {
        for (int k = 0; k < d; ++k) wpv[k] = wv[k] + dw[static_cast<size_t>(k)];
        // antisymmetry with the closed-form solution for h(w) = w1^2:
        // f_h(w) = (1 - w1^2)/2, grad f_h = (-w1, 0, ...)
        antisym = dw[0] * (-(wpv[0] + wv[0]));
        if (fh) {
          Vec g0 = fh->gradient(wv);
          Vec g1 = fh->gradient(wpv);
          double t = 0.0;
          for (int k = 0; k < d; ++k) t += dw[static_cast<size_t>(k)] * (g0[k] + g1[k]);
          antisym_q = t;
        }
      }
    }
    for (int k = 0; k < d; ++k) sl.D[static_cast<size_t>(k)] = dacc[static_cast<size_t>(k)].sum / inner_samples;

    // exact conditional quadratic identity for this replica's data
    std::array<double, kMaxDim * kMaxDim> rhs{};
    for (size_t j = 0; j < path.xi_tilde.size(); ++j) {
      double wgt = path.cond_var[j] + path.xi_tilde[j] * path.xi_tilde[j];
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b)
          rhs[static_cast<size_t>(a * d + b)] += path.V[j][a] * path.V[j][b] * wgt;
    }
    for (int e = 0; e < dd; ++e)
      sl.quad_diff[static_cast<size_t>(e)] =
          qacc[static_cast<size_t>(e)].sum / inner_samples -
          scale2 / static_cast<double>(n) * rhs[static_cast<size_t>(e)];
    sl.antisym = antisym;
    sl.antisym_q = antisym_q;
  });

  PairIdentityReport rep;
  rep.n = n;
  rep.replicas = replicas;
  rep.inner = inner_samples;
  rep.slope_target = -1.0 / static_cast<double>(n);

  // (a) regression through the origin of D on W, pooled over coordinates
  Kahan sxy, sxx;
  for (const Slot& sl : slots)
    for (int k = 0; k < d; ++k) {
      sxy.add(sl.D[static_cast<size_t>(k)] * sl.W[static_cast<size_t>(k)]);
      sxx.add(sl.W[static_cast<size_t>(k)] * sl.W[static_cast<size_t>(k)]);
    }
  rep.slope = sxy.sum / sxx.sum;
  Kahan se2;
  for (const Slot& sl : slots)
    for (int k = 0; k < d; ++k) {
      double e = sl.D[static_cast<size_t>(k)] - rep.slope * sl.W[static_cast<size_t>(k)];
      se2.add(e * e * sl.W[static_cast<size_t>(k)] * sl.W[static_cast<size_t>(k)]);
    }
  rep.slope_stderr = std::sqrt(se2.sum) / sxx.sum;

  // (b) componentwise z-scores of mean(lhs - rhs)
  rep.quad_max_abs_z = 0.0;
  for (int e = 0; e < dd; ++e) {
    Kahan mean_acc;
    for (const Slot& sl : slots) mean_acc.add(sl.quad_diff[static_cast<size_t>(e)]);
    double mean = mean_acc.sum / static_cast<double>(replicas);
    Kahan var_acc;
    for (const Slot& sl : slots) {
      double dv = sl.quad_diff[static_cast<size_t>(e)] - mean;
      var_acc.add(dv * dv);
    }
    double se = std::sqrt(var_acc.sum / (static_cast<double>(replicas) - 1.0) /
                          static_cast<double>(replicas));
    if (se > 0.0) rep.quad_max_abs_z = std::max(rep.quad_max_abs_z, std::abs(mean) / se);
  }

  auto mean_stderr = [&](auto proj) {
    Kahan m;
    for (const Slot& sl : slots) m.add(proj(sl));
    double mean = m.sum / static_cast<double>(replicas);
    Kahan v;
    for (const Slot& sl : slots) {
      double dv = proj(sl) - mean;
      v.add(dv * dv);
    }
    double se = std::sqrt(v.sum / (static_cast<double>(replicas) - 1.0) /
                          static_cast<double>(replicas));
    return std::make_pair(mean, se);
  };
  std::tie(rep.antisym_mean, rep.antisym_stderr) = mean_stderr([](const Slot& s) { return s.antisym; });
  if (fh) {
    std::tie(rep.antisym_q_mean, rep.antisym_q_stderr) =
        mean_stderr([](const Slot& s) { return s.antisym_q; });
    rep.has_quadrature_fh = true;
  }
  return rep;
}

LeadingErrorRecord leading_error_term(const ReplicaGenerator& gen, int d, int64_t n,
                                      int64_t replicas, const ModelConstants& constants,
                                      const SteinSolution& fh, uint64_t seed, Exec exec) {
  (void)seed;
  const double scale2 = discrete_scale(n, constants);
  const double factor = 0.5 * scale2 * scale2;  // 1 / (2 sigma^2 n log n)
  std::vector<double> est(static_cast<size_t>(replicas), 0.0);
  std::vector<double> hval(static_cast<size_t>(replicas), 0.0);

  parallel_for(exec, replicas, [&](int64_t r) {
    ReplicaPath path;
    gen(r, path);
    std::array<double, kMaxDim> w{};
    assemble_w(path, scale2, d, w.data());
    Vec wv(d);
    for (int k = 0; k < d; ++k) wv[k] = w[static_cast<size_t>(k)];
    std::vector<double> M(static_cast<size_t>(d * d), 0.0);
    for (size_t j = 0; j < path.xi_tilde.size(); ++j) {
      double wgt = path.cond_var[j] + path.xi_tilde[j] * path.xi_tilde[j];
      for (int a = 0; a < d; ++a)
        for (int b = 0; b < d; ++b) M[static_cast<size_t>(a * d + b)] += path.V[j][a] * path.V[j][b] * wgt;
    }
    for (int e = 0; e < d * d; ++e) M[static_cast<size_t>(e)] *= -factor;
    for (int k = 0; k < d; ++k) M[static_cast<size_t>(k * d + k)] += 1.0;
    std::vector<double> H(static_cast<size_t>(d * d));
    fh.hessian(wv, H.data());
    double s = 0.0;
    for (int e = 0; e < d * d; ++e) s += M[static_cast<size_t>(e)] * H[static_cast<size_t>(e)];
    est[static_cast<size_t>(r)] = s;
    hval[static_cast<size_t>(r)] = fh.test_function().h(wv);
  });

  auto mean_se = [&](const std::vector<double>& v) {
    Kahan m;
    for (double x : v) m.add(x);
    double mean = m.sum / static_cast<double>(v.size());
    Kahan var;
    for (double x : v) var.add((x - mean) * (x - mean));
    double se = std::sqrt(var.sum / (static_cast<double>(v.size()) - 1.0) /
                          static_cast<double>(v.size()));
    return std::make_pair(mean, se);
  };

  LeadingErrorRecord rec;
  rec.fn_id = fh.test_function().id;
  rec.n = n;
  auto [em, es] = mean_se(est);
  rec.estimate = em;
  rec.est_stderr = es;
  auto [hm, hs] = mean_se(hval);
  rec.direct_gap = std::abs(hm - fh.e_h_z());
  rec.gap_stderr = hs;
  return rec;
}

}  // namespace lgas
