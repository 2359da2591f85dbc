// SPDX-License-Identifier: Apache-2.0
#include "fedsim/linalg.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <string>

#include "fedsim/errors.hpp"
#include "fedsim/kernels.hpp"

namespace fedsim {
namespace {

constexpr double kEps = std::numeric_limits<double>::epsilon();

void require_matrix(const Tensor& m, std::string_view label) {
  if (m.rank() != 2) {
    throw DimensionError("svd of " + std::string(label) + ": expected a matrix, got " +
                         shape_string(m.shape()));
  }
}

// Flips U columns (and matching V rows) so the largest-magnitude entry of each
// U column is non-negative.
void apply_sign_convention(SvdTriple& t) {
  const std::size_t m = t.u.dim(0), k = t.u.dim(1), n = t.v.dim(1);
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < m; ++i)
      if (std::abs(t.u.at(i, j)) > std::abs(t.u.at(best, j))) best = i;
    if (t.u.at(best, j) >= 0.0) continue;
    for (std::size_t i = 0; i < m; ++i) t.u.at(i, j) = -t.u.at(i, j);
    for (std::size_t c = 0; c < n; ++c) t.v.at(j, c) = -t.v.at(j, c);
  }
}

// One-sided Jacobi on a tall matrix (rows >= cols). `cols_major` holds the
// columns of the matrix as contiguous rows: [cols x rows].
SvdTriple jacobi_tall(std::vector<double> a, std::size_t rows, std::size_t cols,
                      std::string_view label, const SvdOptions& options) {
  std::vector<double> vt(cols * cols, 0.0);
  for (std::size_t j = 0; j < cols; ++j) vt[j * cols + j] = 1.0;

  bool converged = cols < 2;
  for (int sweep = 0; sweep < options.max_sweeps && !converged; ++sweep) {
    bool rotated = false;
    for (std::size_t p = 0; p + 1 < cols; ++p) {
      double* ap = a.data() + p * rows;
      for (std::size_t q = p + 1; q < cols; ++q) {
        double* aq = a.data() + q * rows;
        const double alpha = kernels::dot(rows, ap, ap);
        const double beta = kernels::dot(rows, aq, aq);
        const double gamma = kernels::dot(rows, ap, aq);
        if (std::abs(gamma) <= options.tolerance * std::sqrt(alpha * beta) || gamma == 0.0) continue;
        rotated = true;
        const double zeta = (beta - alpha) / (2.0 * gamma);
        const double t = std::copysign(1.0, zeta) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
        const double c = 1.0 / std::sqrt(1.0 + t * t);
        const double s = c * t;
        for (std::size_t i = 0; i < rows; ++i) {
          const double x = ap[i], y = aq[i];
          ap[i] = c * x - s * y;
          aq[i] = s * x + c * y;
        }
        double* vp = vt.data() + p * cols;
        double* vq = vt.data() + q * cols;
        for (std::size_t i = 0; i < cols; ++i) {
          const double x = vp[i], y = vq[i];
          vp[i] = c * x - s * y;
          vq[i] = s * x + c * y;
        }
      }
    }
    converged = !rotated;
  }
  if (!converged) {
    throw NumericError("svd of " + std::string(label) + " did not converge within " +
                       std::to_string(options.max_sweeps) + " sweeps");
  }

  std::vector<double> sigma(cols);
  for (std::size_t j = 0; j < cols; ++j) {
    const double* aj = a.data() + j * rows;
    sigma[j] = std::sqrt(kernels::dot(rows, aj, aj));
  }
  std::vector<std::size_t> order(cols);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t x, std::size_t y) { return sigma[x] > sigma[y]; });

  SvdTriple out{Tensor({rows, cols}), std::vector<double>(cols), Tensor({cols, cols})};
  const double top = cols ? sigma[order[0]] : 0.0;
  const double null_level = top * static_cast<double>(std::max(rows, cols)) * kEps;
  std::vector<std::size_t> null_columns;
  for (std::size_t k = 0; k < cols; ++k) {
    const std::size_t j = order[k];
    out.s[k] = sigma[j];
    for (std::size_t c = 0; c < cols; ++c) out.v.at(k, c) = vt[j * cols + c];
    if (sigma[j] <= null_level || sigma[j] == 0.0) {
      null_columns.push_back(k);
      continue;
    }
    const double* aj = a.data() + j * rows;
    for (std::size_t i = 0; i < rows; ++i) out.u.at(i, k) = aj[i] / sigma[j];
  }

  // Columns of U for (numerically) zero singular values: complete the basis
  // from the standard unit vectors.
  std::vector<double> cand(rows);
  for (std::size_t k : null_columns) {
    bool placed = false;
    for (std::size_t e = 0; e < rows && !placed; ++e) {
      std::fill(cand.begin(), cand.end(), 0.0);
      cand[e] = 1.0;
      for (int pass = 0; pass < 2; ++pass) {
        for (std::size_t o = 0; o < cols; ++o) {
          if (o == k || (std::find(null_columns.begin(), null_columns.end(), o) != null_columns.end() &&
                         o > k))
            continue;
          double r = 0.0;
          for (std::size_t i = 0; i < rows; ++i) r += out.u.at(i, o) * cand[i];
          for (std::size_t i = 0; i < rows; ++i) cand[i] -= r * out.u.at(i, o);
        }
      }
      const double n = std::sqrt(kernels::dot(rows, cand.data(), cand.data()));
      if (n > 0.5) {
        for (std::size_t i = 0; i < rows; ++i) out.u.at(i, k) = cand[i] / n;
        placed = true;
      }
    }
    if (!placed) throw NumericError("svd of " + std::string(label) + ": basis completion failed");
  }
  return out;
}

// Transposes a triple computed for M^T into one for M.
SvdTriple transpose_triple(SvdTriple t) {
  return SvdTriple{t.v.transposed(), std::move(t.s), t.u.transposed()};
}

// Packs the columns of a row-major [rows x cols] matrix contiguously.
std::vector<double> columns_of(const Tensor& m) {
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  std::vector<double> out(rows * cols);
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) out[j * rows + i] = m.at(i, j);
  return out;
}

// Householder reduction of a symmetric matrix to tridiagonal form.
struct Tridiagonal {
  std::size_t n = 0;
  std::vector<double> diag, off;              // off[i] couples i and i+1
  std::vector<std::vector<double>> reflector;  // v_k acting on indices k+1..n-1
  std::vector<double> beta;
};

Tridiagonal tridiagonalize(std::vector<double> a, std::size_t n) {
  Tridiagonal t;
  t.n = n;
  t.diag.assign(n, 0.0);
  t.off.assign(n > 0 ? n - 1 : 0, 0.0);
  std::vector<double> p(n), w(n);
  for (std::size_t k = 0; k + 2 < n; ++k) {
    const std::size_t len = n - k - 1;
    std::vector<double> v(a.begin() + k * n + k + 1, a.begin() + k * n + n);
    const double xnorm = std::sqrt(kernels::dot(len, v.data(), v.data()));
    double b = 0.0;
    double alpha = 0.0;
    if (xnorm > 0.0) {
      alpha = v[0] > 0.0 ? -xnorm : xnorm;
      v[0] -= alpha;
      const double vv = kernels::dot(len, v.data(), v.data());
      b = vv > 0.0 ? 2.0 / vv : 0.0;
    }
    t.diag[k] = a[k * n + k];
    t.off[k] = xnorm > 0.0 ? alpha : 0.0;
    if (b != 0.0) {
      // p = b * A_sub * v ; w = p - (b * p.v / 2) v ; A_sub -= v w^T + w v^T
      for (std::size_t i = 0; i < len; ++i)
        p[i] = b * kernels::dot(len, a.data() + (k + 1 + i) * n + k + 1, v.data());
      const double pv = kernels::dot(len, p.data(), v.data());
      for (std::size_t i = 0; i < len; ++i) w[i] = p[i] - 0.5 * b * pv * v[i];
      for (std::size_t i = 0; i < len; ++i) {
        double* row = a.data() + (k + 1 + i) * n + k + 1;
        const double vi = v[i], wi = w[i];
        for (std::size_t j = 0; j < len; ++j) row[j] -= vi * w[j] + wi * v[j];
      }
    }
    t.reflector.push_back(std::move(v));
    t.beta.push_back(b);
  }
  if (n >= 2) {
    t.diag[n - 2] = a[(n - 2) * n + n - 2];
    t.diag[n - 1] = a[(n - 1) * n + n - 1];
    t.off[n - 2] = a[(n - 1) * n + n - 2];
  } else if (n == 1) {
    t.diag[0] = a[0];
  }
  return t;
}

// Number of eigenvalues of the tridiagonal matrix strictly below x.
std::size_t sturm_count(const Tridiagonal& t, double x) {
  std::size_t count = 0;
  double q = 1.0;
  for (std::size_t i = 0; i < t.n; ++i) {
    const double e2 = i ? t.off[i - 1] * t.off[i - 1] : 0.0;
    q = t.diag[i] - x - (i ? e2 / q : 0.0);
    if (q == 0.0) q = -kEps * (std::abs(x) + 1.0);
    if (q < 0.0) ++count;
  }
  return count;
}

double eigenvalue_by_bisection(const Tridiagonal& t, std::size_t index, double lo, double hi) {
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    if (mid <= lo || mid >= hi) break;
    if (sturm_count(t, mid) > index) hi = mid;
    else lo = mid;
  }
  return 0.5 * (lo + hi);
}

// Solves (T - mu I) x = b by Gaussian elimination with partial pivoting.
void shifted_solve(const Tridiagonal& t, double mu, double floor, std::vector<double>& b) {
  const std::size_t n = t.n;
  std::vector<double> d(n), u1(n, 0.0), u2(n, 0.0), mult(n, 0.0);
  std::vector<char> swapped(n, 0);
  for (std::size_t i = 0; i < n; ++i) d[i] = t.diag[i] - mu;
  for (std::size_t i = 0; i + 1 < n; ++i) u1[i] = t.off[i];
  for (std::size_t i = 0; i + 1 < n; ++i) {
    const double sub = t.off[i];
    if (std::abs(sub) > std::abs(d[i])) {
      const double m = d[i] / sub;
      const double next_u1 = i + 2 < n ? u1[i + 1] : 0.0;
      const double old_d = d[i + 1];
      const double old_u1 = u1[i];
      d[i] = sub;
      u1[i] = old_d;
      u2[i] = next_u1;
      d[i + 1] = old_u1 - m * old_d;
      if (i + 2 < n) u1[i + 1] = -m * next_u1;
      mult[i] = m;
      swapped[i] = 1;
    } else {
      if (d[i] == 0.0) d[i] = floor;
      const double m = sub / d[i];
      d[i + 1] -= m * u1[i];
      mult[i] = m;
    }
  }
  for (std::size_t i = 0; i < n; ++i)
    if (std::abs(d[i]) < floor) d[i] = std::copysign(floor, d[i] == 0.0 ? 1.0 : d[i]);
  for (std::size_t i = 0; i + 1 < n; ++i) {
    if (swapped[i]) std::swap(b[i], b[i + 1]);
    b[i + 1] -= mult[i] * b[i];
  }
  for (std::size_t i = n; i-- > 0;) {
    double s = b[i];
    if (i + 1 < n) s -= u1[i] * b[i + 1];
    if (i + 2 < n) s -= u2[i] * b[i + 2];
    b[i] = s / d[i];
  }
}

void orthonormalize_against(std::vector<double>& x, const std::vector<std::vector<double>>& basis) {
  for (int pass = 0; pass < 2; ++pass)
    for (const auto& q : basis) {
      const double r = kernels::dot(x.size(), q.data(), x.data());
      for (std::size_t i = 0; i < x.size(); ++i) x[i] -= r * q[i];
    }
  const double n = std::sqrt(kernels::dot(x.size(), x.data(), x.data()));
  if (n > 0.0)
    for (double& v : x) v /= n;
}

// Leading k eigenvectors of a symmetric [n x n] matrix, as rows [k x n].
std::vector<std::vector<double>> leading_eigenvectors(const std::vector<double>& sym, std::size_t n,
                                                      std::size_t k) {
  const Tridiagonal t = tridiagonalize(sym, n);
  double lo = std::numeric_limits<double>::max(), hi = -lo;
  for (std::size_t i = 0; i < n; ++i) {
    const double r = (i ? std::abs(t.off[i - 1]) : 0.0) + (i + 1 < n ? std::abs(t.off[i]) : 0.0);
    lo = std::min(lo, t.diag[i] - r);
    hi = std::max(hi, t.diag[i] + r);
  }
  const double scale = std::max(std::abs(lo), std::abs(hi));
  lo -= kEps * scale + std::numeric_limits<double>::min();
  hi += kEps * scale + std::numeric_limits<double>::min();
  const double floor = std::max(scale * kEps, std::numeric_limits<double>::min());

  std::vector<std::vector<double>> vecs;
  for (std::size_t j = 0; j < k; ++j) {
    const double lambda = eigenvalue_by_bisection(t, n - 1 - j, lo, hi);
    std::vector<double> x(n);
    for (std::size_t i = 0; i < n; ++i) x[i] = 1.0 + 0.5 * std::sin(static_cast<double>(i * 7 + j));
    orthonormalize_against(x, vecs);
    for (int it = 0; it < 3; ++it) {
      shifted_solve(t, lambda, floor, x);
      orthonormalize_against(x, vecs);
    }
    vecs.push_back(std::move(x));
  }
  // Back to the original basis: x <- H_0 H_1 ... H_{n-3} x.
  for (auto& x : vecs) {
    for (std::size_t r = t.reflector.size(); r-- > 0;) {
      const auto& v = t.reflector[r];
      if (t.beta[r] == 0.0) continue;
      double* seg = x.data() + r + 1;
      const double s = t.beta[r] * kernels::dot(v.size(), v.data(), seg);
      for (std::size_t i = 0; i < v.size(); ++i) seg[i] -= s * v[i];
    }
  }
  return vecs;
}

}  // namespace

SvdTriple SvdTriple::truncated(std::size_t k) const {
  k = std::min(k, s.size());
  const std::size_t m = u.dim(0), n = v.dim(1);
  SvdTriple out{Tensor({m, k}), std::vector<double>(s.begin(), s.begin() + k), Tensor({k, n})};
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) out.u.at(i, j) = u.at(i, j);
  std::copy(v.data(), v.data() + k * n, out.v.data());
  return out;
}

Tensor SvdTriple::reconstruct() const {
  const std::size_t m = u.dim(0), k = s.size(), n = v.dim(1);
  Tensor us({m, k});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < k; ++j) us.at(i, j) = u.at(i, j) * s[j];
  Tensor out({m, n});
  kernels::gemm_nn(m, k, n, us.data(), v.data(), out.data());
  return out;
}

SvdTriple svd(const Tensor& m, std::string_view label, const SvdOptions& options) {
  require_matrix(m, label);
  m.require_finite("svd input");
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  if (rows >= cols) {
    SvdTriple t = jacobi_tall(columns_of(m), rows, cols, label, options);
    apply_sign_convention(t);
    return t;
  }
  const Tensor mt = m.transposed();
  SvdTriple t = transpose_triple(jacobi_tall(columns_of(mt), cols, rows, label, options));
  apply_sign_convention(t);
  return t;
}

namespace detail {

SvdTriple svd_leading_gram(const Tensor& m, std::size_t k, std::string_view label) {
  require_matrix(m, label);
  m.require_finite("svd input");
  if (m.dim(0) < m.dim(1)) {
    SvdTriple t = transpose_triple(svd_leading_gram(m.transposed(), k, label));
    apply_sign_convention(t);
    return t;
  }
  const std::size_t rows = m.dim(0), cols = m.dim(1);
  k = std::clamp<std::size_t>(k, 1, cols);

  std::vector<double> gram(cols * cols, 0.0);
  kernels::gemm_tn(cols, rows, cols, m.data(), m.data(), gram.data());
  std::vector<std::vector<double>> basis = leading_eigenvectors(gram, cols, k);

  // One subspace-iteration step on the Gram matrix sharpens the basis.
  std::vector<std::vector<double>> refined;
  for (const auto& x : basis) {
    std::vector<double> y(cols, 0.0);
    for (std::size_t i = 0; i < cols; ++i) y[i] = kernels::dot(cols, gram.data() + i * cols, x.data());
    orthonormalize_against(y, refined);
    refined.push_back(std::move(y));
  }

  // Rayleigh-Ritz: SVD of M * Vk gives the triplets within span(Vk).
  Tensor vk({k, cols});
  for (std::size_t j = 0; j < k; ++j) std::copy(refined[j].begin(), refined[j].end(), vk.data() + j * cols);
  Tensor projected({rows, k});
  kernels::gemm_nt(rows, cols, k, m.data(), vk.data(), projected.data());
  SvdTriple small = jacobi_tall(columns_of(projected), rows, k, label, SvdOptions{});
  SvdTriple out{std::move(small.u), std::move(small.s), Tensor({k, cols})};
  kernels::gemm_nn(k, k, cols, small.v.data(), vk.data(), out.v.data());
  apply_sign_convention(out);
  return out;
}

}  // namespace detail

SvdTriple svd_leading(const Tensor& m, std::size_t k, std::string_view label) {
  require_matrix(m, label);
  const std::size_t short_side = std::min(m.dim(0), m.dim(1));
  if (short_side > 48 && 4 * k <= short_side) return detail::svd_leading_gram(m, k, label);
  return svd(m, label).truncated(k);
}

}  // namespace fedsim
