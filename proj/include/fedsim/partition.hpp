// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "fedsim/dataset.hpp"

namespace fedsim {

struct ClientShard {
  std::vector<std::size_t> indices;  // into the source dataset
  std::vector<std::size_t> train;
  std::vector<std::size_t> test;
  std::vector<std::size_t> val;
};

struct Partition {
  std::vector<ClientShard> clients;
};

inline constexpr std::size_t kPartitionRedraws = 100;

// Label skew across clients: for every class, client proportions are drawn
// from a symmetric Dirichlet with concentration `lambda` per client and the
// class's (shuffled) samples are handed out by largest-remainder rounding.
// Draws leaving any client below min_per_client are repeated, at most
// kPartitionRedraws times in total.
Partition dirichlet_partition(const Dataset& data, std::size_t n_clients, double lambda,
                              std::uint64_t seed, std::size_t min_per_client = 10);

// Integer counts proportional to `weights` summing to `total`; remainders go
// to the largest fractional parts, ties to the lower index.
std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total);

using SplitRatios = std::array<double, 3>;  // train, test, val
inline constexpr SplitRatios kDefaultSplit{0.7, 0.2, 0.1};

// Per client: seeded shuffle, then test and val take floor(ratio * n) and train
// takes the rest. Applied per class when every class on the client has at
// least 3 samples.
void split_tvt(Partition& partition, const Dataset& data, std::uint64_t seed,
               const SplitRatios& ratios = kDefaultSplit);

std::vector<std::size_t> label_histogram(const Dataset& data, std::span<const std::size_t> indices);

}  // namespace fedsim
