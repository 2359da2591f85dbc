// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <string_view>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

// M ~= U * diag(S) * V with U [m x K] (orthonormal columns), S descending and
// non-negative, V [K x n] (orthonormal rows). Each column of U has its
// largest-magnitude entry non-negative.
struct SvdTriple {
  Tensor u;
  std::vector<double> s;
  Tensor v;

  std::size_t size() const noexcept { return s.size(); }
  // Keeps the leading k triplets.
  SvdTriple truncated(std::size_t k) const;
  Tensor reconstruct() const;
};

struct SvdOptions {
  int max_sweeps = 60;
  double tolerance = 1e-12;  // relative off-diagonal mass per column pair
};

// Full thin SVD (K = min(m, n)) by one-sided Jacobi rotations. `label` names
// the tensor in the error raised on non-convergence.
SvdTriple svd(const Tensor& m, std::string_view label = "matrix", const SvdOptions& options = {});

// Leading k singular triplets. Small or narrow problems use the full Jacobi
// SVD; large ones go through the Gram matrix of the short side followed by a
// Rayleigh-Ritz refinement.
SvdTriple svd_leading(const Tensor& m, std::size_t k, std::string_view label = "matrix");

namespace detail {
// Gram-route leading SVD, exposed for testing against the Jacobi path.
SvdTriple svd_leading_gram(const Tensor& m, std::size_t k, std::string_view label);
}  // namespace detail

}  // namespace fedsim
