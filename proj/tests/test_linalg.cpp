// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>

#include "fedsim/errors.hpp"
#include "fedsim/linalg.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

void check_triple(const Tensor& m, const SvdTriple& t, double tol) {
  const std::size_t k = t.size();
  const Tensor utu = oracle::naive_matmul(oracle::naive_transpose(t.u), t.u);
  const Tensor vvt = oracle::naive_matmul(t.v, oracle::naive_transpose(t.v));
  CHECK(max_abs_diff(utu, Tensor::identity(k)) < 1e-8);
  CHECK(max_abs_diff(vvt, Tensor::identity(k)) < 1e-8);
  for (std::size_t i = 0; i < k; ++i) {
    CHECK(t.s[i] >= 0.0);
    if (i) CHECK(t.s[i] <= t.s[i - 1]);
  }
  for (std::size_t j = 0; j < k; ++j) {
    std::size_t arg = 0;
    for (std::size_t i = 1; i < t.u.dim(0); ++i) {
      if (std::abs(t.u.at(i, j)) > std::abs(t.u.at(arg, j))) arg = i;
    }
    CHECK(t.u.at(arg, j) >= 0.0);
  }
  CHECK(oracle::frobenius(oracle::difference(m, t.reconstruct())) <= tol * std::max(1.0, oracle::frobenius(m)));
}

}  // namespace

TEST_CASE("svd of the identity") {
  const SvdTriple t = svd(Tensor::identity(3));
  CHECK(t.s == std::vector<double>{1.0, 1.0, 1.0});
  CHECK(max_abs_diff(t.reconstruct(), Tensor::identity(3)) < 1e-15);
}

TEST_CASE("svd of an outer product") {
  // |u| = 2, |v| = 3.
  const Tensor u({3, 1}, {0.0, 2.0, 0.0}), v({1, 4}, {1.0, 2.0, 2.0, 0.0});
  const Tensor m = oracle::naive_matmul(u, v);
  const SvdTriple t = svd(m);
  REQUIRE(t.size() == 3);
  CHECK(std::abs(t.s[0] - 6.0) < 1e-12);
  CHECK(std::abs(t.s[1]) < 1e-12);
  CHECK(std::abs(t.s[2]) < 1e-12);
  check_triple(m, t, 1e-12);
}

TEST_CASE("singular values against the Gram eigen-oracle") {
  std::mt19937_64 rng(11);
  for (auto [m, n] : {std::pair<std::size_t, std::size_t>{6, 4}, {4, 6}, {9, 9}, {12, 3}, {1, 5}, {5, 1}}) {
    const Tensor a = oracle::random_tensor({m, n}, rng);
    const SvdTriple t = svd(a);
    const Tensor gram = m >= n ? oracle::naive_matmul(oracle::naive_transpose(a), a)
                               : oracle::naive_matmul(a, oracle::naive_transpose(a));
    const std::vector<double> ev = oracle::symmetric_eigenvalues(gram);
    REQUIRE(ev.size() == t.size());
    for (std::size_t i = 0; i < ev.size(); ++i) CHECK(std::abs(t.s[i] * t.s[i] - ev[i]) < 1e-9);
    check_triple(a, t, 1e-8);
  }
}

TEST_CASE("svd handles rank deficiency and zero matrices") {
  std::mt19937_64 rng(12);
  const Tensor low = oracle::naive_matmul(oracle::random_tensor({10, 2}, rng), oracle::random_tensor({2, 7}, rng));
  const SvdTriple t = svd(low);
  check_triple(low, t, 1e-8);
  for (std::size_t i = 2; i < t.size(); ++i) CHECK(t.s[i] < 1e-10);
  const SvdTriple z = svd(Tensor({4, 3}));
  for (double s : z.s) CHECK(s == 0.0);
  check_triple(Tensor({4, 3}), z, 1e-15);
}

TEST_CASE("svd is deterministic") {
  std::mt19937_64 rng(13);
  const Tensor a = oracle::random_tensor({8, 5}, rng);
  const SvdTriple x = svd(a), y = svd(a);
  CHECK(x.u == y.u);
  CHECK(x.s == y.s);
  CHECK(x.v == y.v);
}

TEST_CASE("truncated keeps the leading triplets") {
  std::mt19937_64 rng(14);
  const SvdTriple t = svd(oracle::random_tensor({6, 5}, rng));
  const SvdTriple k = t.truncated(2);
  CHECK(k.u.shape() == Shape{6, 2});
  CHECK(k.v.shape() == Shape{2, 5});
  CHECK(k.s == std::vector<double>{t.s[0], t.s[1]});
}

TEST_CASE("leading svd: Gram route agrees with the full Jacobi svd") {
  std::mt19937_64 rng(15);
  for (auto [m, n, k] : {std::array<std::size_t, 3>{120, 80, 3}, {70, 200, 5}, {300, 60, 1}, {64, 64, 10}}) {
    // Decaying spectrum so the leading subspace is well separated.
    Tensor a({m, n});
    for (std::size_t r = 0; r < 12; ++r) {
      const Tensor u = oracle::random_tensor({m, 1}, rng), v = oracle::random_tensor({1, n}, rng);
      const Tensor uv = oracle::naive_matmul(u, v);
      const double w = std::pow(0.6, static_cast<double>(r));
      for (std::size_t i = 0; i < a.size(); ++i) a[i] += w * uv[i];
    }
    const SvdTriple full = svd(a).truncated(k);
    const SvdTriple gram = detail::svd_leading_gram(a, k, "test");
    REQUIRE(gram.size() == k);
    for (std::size_t i = 0; i < k; ++i) CHECK(std::abs(gram.s[i] - full.s[i]) < 1e-9 * full.s[0]);
    CHECK(max_abs_diff(gram.reconstruct(), full.reconstruct()) < 1e-8 * full.s[0]);
    const SvdTriple lead = svd_leading(a, k);
    CHECK(max_abs_diff(lead.reconstruct(), full.reconstruct()) < 1e-8 * full.s[0]);
  }
}

TEST_CASE("svd rejects non-matrices") {
  CHECK_THROWS_AS(svd(Tensor({2, 2, 2})), DimensionError);
}
