#pragma once

#include <array>
#include <cassert>
#include <cmath>

namespace lgas {

inline constexpr int kMaxDim = 8;

// Small fixed-capacity vector with runtime dimension. Dimensions in this
// project stay tiny (d <= 8), so everything lives on the stack.
struct Vec {
  std::array<double, kMaxDim> c{};
  int d = 0;

  Vec() = default;
  explicit Vec(int dim) : d(dim) { assert(dim >= 1 && dim <= kMaxDim); }

  static Vec zero(int dim) { return Vec(dim); }
  static Vec axis(int dim, int k) {
    Vec v(dim);
    v.c[static_cast<size_t>(k)] = 1.0;
    return v;
  }

  double& operator[](int i) { return c[static_cast<size_t>(i)]; }
  double operator[](int i) const { return c[static_cast<size_t>(i)]; }
};

inline double dot(const Vec& a, const Vec& b) {
  double s = 0.0;
  for (int i = 0; i < a.d; ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(const Vec& a) { return dot(a, a); }
inline double norm(const Vec& a) { return std::sqrt(norm2(a)); }

inline Vec operator+(const Vec& a, const Vec& b) {
  Vec r(a.d);
  for (int i = 0; i < a.d; ++i) r[i] = a[i] + b[i];
  return r;
}

inline Vec operator-(const Vec& a, const Vec& b) {
  Vec r(a.d);
  for (int i = 0; i < a.d; ++i) r[i] = a[i] - b[i];
  return r;
}

inline Vec operator*(double s, const Vec& a) {
  Vec r(a.d);
  for (int i = 0; i < a.d; ++i) r[i] = s * a[i];
  return r;
}

inline Vec normalized(const Vec& a) {
  double n = norm(a);
  Vec r(a.d);
  for (int i = 0; i < a.d; ++i) r[i] = a[i] / n;
  return r;
}

// Angle between two unit vectors, in [0, pi].
inline double angle_between(const Vec& a, const Vec& b) {
  double c = dot(a, b);
  if (c > 1.0) c = 1.0;
  if (c < -1.0) c = -1.0;
  return std::acos(c);
}

// Compensated accumulator for long heavy-tailed sums.
struct Kahan {
  double sum = 0.0;
  double comp = 0.0;
  void add(double x) {
    double y = x - comp;
    double t = sum + y;
    comp = (t - sum) - y;
    sum = t;
  }
};

}  // namespace lgas
