#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <utility>

#include "poselift/tensor.hpp"

namespace poselift::numerics {

using Mat3 = std::array<std::array<double, 3>, 3>;
using Vec3 = std::array<double, 3>;

struct Svd3 {
  Mat3 u{};
  Vec3 s{};
  Mat3 v{};
};

inline Mat3 mat3_identity() {
  Mat3 m{};
  for (int i = 0; i < 3; ++i) m[i][i] = 1.0;
  return m;
}

inline Mat3 mat3_mul(const Mat3& a, const Mat3& b) {
  Mat3 c{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j)
      for (int k = 0; k < 3; ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

inline Mat3 mat3_transpose(const Mat3& a) {
  Mat3 t{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) t[i][j] = a[j][i];
  return t;
}

inline double mat3_det(const Mat3& a) {
  return a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) -
         a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0]) +
         a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0]);
}

namespace detail {

inline double col_dot(const Mat3& m, int p, int q) {
  return m[0][p] * m[0][q] + m[1][p] * m[1][q] + m[2][p] * m[2][q];
}

inline void rotate_cols(Mat3& m, int p, int q, double c, double s) {
  for (int i = 0; i < 3; ++i) {
    const double mp = m[i][p];
    const double mq = m[i][q];
    m[i][p] = c * mp - s * mq;
    m[i][q] = s * mp + c * mq;
  }
}

// Fills column `col` of u with a unit vector orthogonal to the columns in
// `known` (Gram-Schmidt against the canonical basis).
inline void complete_column(Mat3& u, int col, const int* known, int n_known) {
  double best_norm = -1.0;
  Vec3 best{};
  for (int e = 0; e < 3; ++e) {
    Vec3 cand{};
    cand[e] = 1.0;
    for (int k = 0; k < n_known; ++k) {
      const int j = known[k];
      const double d = cand[0] * u[0][j] + cand[1] * u[1][j] + cand[2] * u[2][j];
      for (int i = 0; i < 3; ++i) cand[i] -= d * u[i][j];
    }
    const double nrm = std::sqrt(cand[0] * cand[0] + cand[1] * cand[1] + cand[2] * cand[2]);
    if (nrm > best_norm) {
      best_norm = nrm;
      best = cand;
    }
  }
  for (int i = 0; i < 3; ++i) u[i][col] = best[i] / best_norm;
}

}  // namespace detail

// One-sided Jacobi SVD of a 3x3 matrix: m = u * diag(s) * v^T with s
// non-negative and descending, u and v orthogonal.
inline Svd3 svd3(const Mat3& m) {
  Mat3 w = m;
  Mat3 v = mat3_identity();
  constexpr int kMaxSweeps = 30;
  constexpr double kTol = 1e-12;
  for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
    double off = 0.0;
    for (int p = 0; p < 2; ++p) {
      for (int q = p + 1; q < 3; ++q) {
        const double alpha = detail::col_dot(w, p, p);
        const double beta = detail::col_dot(w, q, q);
        const double gamma = detail::col_dot(w, p, q);
        if (gamma == 0.0) continue;
        const double scale = std::sqrt(alpha * beta);
        if (scale > 0.0) off = std::max(off, std::abs(gamma) / scale);
        if (std::abs(gamma) <= kTol * scale) continue;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) /
                         (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        detail::rotate_cols(w, p, q, c, s);
        detail::rotate_cols(v, p, q, c, s);
      }
    }
    if (off < kTol) break;
  }

  Vec3 norms{};
  for (int j = 0; j < 3; ++j) norms[j] = std::sqrt(detail::col_dot(w, j, j));
  int order[3] = {0, 1, 2};
  std::sort(order, order + 3, [&](int a, int b) { return norms[a] > norms[b]; });

  Svd3 out;
  const double tiny = std::max(norms[order[0]], 1.0) * 1e-14;
  int known[3];
  int n_known = 0;
  for (int k = 0; k < 3; ++k) {
    const int j = order[k];
    out.s[k] = norms[j];
    for (int i = 0; i < 3; ++i) out.v[i][k] = v[i][j];
    if (norms[j] > tiny) {
      for (int i = 0; i < 3; ++i) out.u[i][k] = w[i][j] / norms[j];
      known[n_known++] = k;
    }
  }
  for (int k = 0; k < 3; ++k) {
    if (norms[order[k]] > tiny) continue;
    detail::complete_column(out.u, k, known, n_known);
    known[n_known++] = k;
  }
  return out;
}

inline Mat3 to_mat3(const Tensor<double>& m) {
  if (m.shape() != Shape{3, 3}) throw DimensionError("svd3 expects a 3x3 tensor");
  Mat3 out{};
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out[i][j] = m.at(i, j);
  return out;
}

inline Tensor<double> to_tensor(const Mat3& m) {
  Tensor<double> out({3, 3});
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) out.at(i, j) = m[i][j];
  return out;
}

}  // namespace poselift::numerics
