// SPDX-License-Identifier: Apache-2.0
#include "fedsim/partition.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>
#include <string>

#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

std::vector<std::size_t> largest_remainder(std::span<const double> weights, std::size_t total) {
  const double sum = std::accumulate(weights.begin(), weights.end(), 0.0);
  if (weights.empty() || !(sum > 0.0)) throw ContractError("largest_remainder needs a positive weight sum");
  std::vector<std::size_t> counts(weights.size());
  std::vector<double> frac(weights.size());
  std::size_t assigned = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double exact = weights[i] / sum * static_cast<double>(total);
    counts[i] = static_cast<std::size_t>(std::floor(exact));
    frac[i] = exact - static_cast<double>(counts[i]);
    assigned += counts[i];
  }
  // Rounding in the floors can overshoot by one in pathological cases.
  while (assigned > total) {
    const auto it = std::max_element(counts.begin(), counts.end());
    --*it;
    --assigned;
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&frac](std::size_t a, std::size_t b) { return frac[a] > frac[b]; });
  for (std::size_t i = 0; assigned < total; i = (i + 1) % order.size(), ++assigned) ++counts[order[i]];
  return counts;
}

Partition dirichlet_partition(const Dataset& data, std::size_t n_clients, double lambda,
                              std::uint64_t seed, std::size_t min_per_client) {
  if (n_clients < 2) throw ConfigError("partition needs at least 2 clients");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("Dirichlet lambda must be positive");
  if (n_clients * min_per_client > data.size()) {
    throw ConfigError(std::to_string(data.size()) + " samples cannot give " + std::to_string(n_clients) +
                      " clients " + std::to_string(min_per_client) + " samples each");
  }
  std::vector<std::vector<std::size_t>> by_class(data.n_classes);
  for (std::size_t i = 0; i < data.size(); ++i) by_class[data.labels[i]].push_back(i);

  std::gamma_distribution<double> gamma(lambda, 1.0);
  std::vector<double> props(n_clients);
  for (std::size_t attempt = 0; attempt < kPartitionRedraws; ++attempt) {
    Rng rng = make_rng(seed, {tag(Stream::partition), attempt});
    Partition part;
    part.clients.resize(n_clients);
    for (std::vector<std::size_t> members : by_class) {
      if (members.empty()) continue;
      std::shuffle(members.begin(), members.end(), rng);
      double total = 0.0;
      do {
        total = 0.0;
        for (double& p : props) total += (p = gamma(rng));
      } while (!(total > 0.0));
      const std::vector<std::size_t> counts = largest_remainder(props, members.size());
      std::size_t pos = 0;
      for (std::size_t k = 0; k < n_clients; ++k) {
        auto& dst = part.clients[k].indices;
        dst.insert(dst.end(), members.begin() + pos, members.begin() + pos + counts[k]);
        pos += counts[k];
      }
    }
    const bool ok = std::all_of(part.clients.begin(), part.clients.end(),
                                [&](const ClientShard& c) { return c.indices.size() >= min_per_client; });
    if (!ok) continue;
    for (ClientShard& c : part.clients) std::sort(c.indices.begin(), c.indices.end());
    return part;
  }
  throw ConfigError("no Dirichlet draw gave every client " + std::to_string(min_per_client) +
                    " samples in " + std::to_string(kPartitionRedraws) +
                    " attempts; use a larger lambda or fewer clients");
}

namespace {

void cut(std::span<const std::size_t> shuffled, const SplitRatios& ratios, ClientShard& out) {
  const auto n = static_cast<double>(shuffled.size());
  const auto n_test = static_cast<std::size_t>(std::floor(ratios[1] * n + 1e-9));
  const auto n_val = static_cast<std::size_t>(std::floor(ratios[2] * n + 1e-9));
  const std::size_t n_train = shuffled.size() - n_test - n_val;
  out.train.insert(out.train.end(), shuffled.begin(), shuffled.begin() + n_train);
  out.test.insert(out.test.end(), shuffled.begin() + n_train, shuffled.begin() + n_train + n_test);
  out.val.insert(out.val.end(), shuffled.begin() + n_train + n_test, shuffled.end());
}

}  // namespace

void split_tvt(Partition& partition, const Dataset& data, std::uint64_t seed, const SplitRatios& ratios) {
  for (double r : ratios) {
    if (!(r > 0.0)) throw ConfigError("split ratios must be positive");
  }
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw ConfigError("split ratios must sum to 1");
  for (std::size_t k = 0; k < partition.clients.size(); ++k) {
    ClientShard& c = partition.clients[k];
    if (c.indices.size() < 3) {
      throw ConfigError("client " + std::to_string(k) + " has " + std::to_string(c.indices.size()) +
                        " samples; a train/test/val split needs at least 3");
    }
    c.train.clear();
    c.test.clear();
    c.val.clear();
    Rng rng = make_rng(seed, {tag(Stream::split), k});
    std::vector<std::vector<std::size_t>> by_class(data.n_classes);
    for (std::size_t i : c.indices) by_class[data.labels.at(i)].push_back(i);
    const bool stratified = std::all_of(by_class.begin(), by_class.end(),
                                        [](const auto& v) { return v.empty() || v.size() >= 3; });
    if (stratified) {
      for (auto& members : by_class) {
        if (members.empty()) continue;
        std::shuffle(members.begin(), members.end(), rng);
        cut(members, ratios, c);
      }
    }
    // Many small classes can floor every test or val share to zero.
    if (!stratified || c.test.empty() || c.val.empty()) {
      c.train.clear();
      c.test.clear();
      c.val.clear();
      std::vector<std::size_t> all = c.indices;
      std::shuffle(all.begin(), all.end(), rng);
      cut(all, ratios, c);
    }
  }
}

std::vector<std::size_t> label_histogram(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<std::size_t> h(data.n_classes, 0);
  for (std::size_t i : indices) ++h.at(data.labels.at(i));
  return h;
}

}  // namespace fedsim
