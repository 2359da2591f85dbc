// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fedsim/dataset.hpp"
#include "fedsim/distill.hpp"
#include "fedsim/gpd.hpp"
#include "fedsim/models.hpp"
#include "fedsim/partition.hpp"

namespace fedsim {

enum class Mode { fedmic, fedavg, local, fedmic_a, fedmic_b, fedmic_c };

std::string to_string(Mode mode);
Mode parse_mode(std::string_view text);  // ConfigError on unknown names

// Which model a client is scored with at the end of a round.
//   personal: the student as it left the client's most recent local update
//             (the current student for clients that never trained yet);
//   current:  whatever the client holds after the broadcast;
//   automatic: current for fedavg, whose deliverable is the global model,
//             personal for every other mode.
enum class EvalPoint { automatic, personal, current };
std::string to_string(EvalPoint point);
EvalPoint parse_eval_point(std::string_view text);

struct RunConfig {
  Mode mode = Mode::fedmic;
  std::size_t n_clients = 20;
  double ratio = 0.1;
  std::size_t rounds = 50;
  std::size_t epochs = 5;
  std::size_t batch = 32;
  double lr = 1e-3;
  double momentum = 0.0;
  double alpha = 0.98;
  double tau = 0.0;
  double lambda = 0.1;
  std::vector<std::uint64_t> seeds{0};
  ModelKind model = ModelKind::mlp;
  std::vector<std::size_t> hidden{512};
  std::size_t rep_dim = 256;
  std::size_t raw_threshold = 4096;
  std::size_t min_per_client = 10;
  std::string data = "synth:classes=8,per_class=400,shape=1x28x28";
  std::string out = "fedsim-out";
  EvalPoint eval = EvalPoint::automatic;
  bool train_aux = true;
  bool swap_kl = false;
  double clip_norm = 0.0;
  std::size_t threads = 1;
  std::vector<std::size_t> faulty_clients;  // fail whenever sampled
  std::string dump_packets;                 // directory; empty = off

  void validate() const;  // ConfigError naming the field
  bool operator==(const RunConfig&) const = default;
  std::size_t sampled_per_round() const noexcept;
  LocalUpdateConfig local_config() const;
  CodecOptions codec() const;
  EvalPoint eval_point() const noexcept;  // resolves automatic
  ModelConfig model_config(const Dataset& data, std::uint64_t seed) const;
};

// Loads `path.fmic` or generates `synth:<spec>`.
Dataset load_data(const std::string& source);

struct ClientRoundMetrics {
  std::size_t client = 0;
  bool sampled = false;
  bool failed = false;
  LossBundle loss;  // batch mean of this round's local update
  double test_acc = 0.0;
  std::size_t samples = 0;  // training split size, the aggregation weight
  std::size_t upload_bytes = 0;
  std::size_t download_bytes = 0;
  std::size_t transmitted = 0;  // scalars sent and received
  std::size_t full = 0;         // the same scalars uncompressed
  double comm_ratio = 0.0;
};

struct RoundMetrics {
  std::size_t round = 0;
  std::vector<std::size_t> sampled;
  std::vector<ClientRoundMetrics> clients;  // every client, by id
  LossBundle loss;                          // mean over clients that trained
  double mean_acc = 0.0;
  double weighted_acc = 0.0;
  std::size_t upload_bytes = 0;
  std::size_t download_bytes = 0;
  std::size_t transmitted = 0;
  std::size_t full = 0;
  double comm_ratio = 0.0;
};

// Uniform draw without replacement of max(1, round(ratio * n)) ids, sorted.
std::vector<std::size_t> sample_clients(std::size_t n_clients, double ratio, Rng& rng);

// Adds N(0, tau^2) to every payload scalar; singular values are clamped at 0.
void add_dp_noise(GpdPacket& packet, double tau, Rng& rng);

// Decodes every packet and returns the n_k-weighted mean.
std::vector<Tensor> aggregate(std::span<const GpdPacket> packets, std::span<const Shape> shapes);

// Argmax accuracy (ties to the lowest class) of a network on some samples.
double evaluate(const ModelConfig& config, const Network& net, const Dataset& data,
                std::span<const std::size_t> indices);

// One seeded simulation: partition, clients and the round loop.
class Federation {
 public:
  Federation(const RunConfig& cfg, const Dataset& data, std::uint64_t seed);

  RoundMetrics run_round(std::size_t round);

  const RunConfig& config() const noexcept { return cfg_; }
  const ModelConfig& model() const noexcept { return model_; }
  const Partition& partition() const noexcept { return partition_; }
  const std::vector<ClientModels>& clients() const noexcept { return clients_; }
  std::span<const Shape> shapes() const noexcept { return shapes_; }

 private:
  struct Upload {
    std::optional<GpdPacket> packet;  // as received by the server
    std::size_t bytes = 0;
    LossBundle loss;
    bool failed = false;
  };
  Upload train_client(std::size_t client, std::size_t round);
  void broadcast(const std::vector<Tensor>& global, std::size_t round, RoundMetrics& metrics);
  std::filesystem::path dump_path(std::size_t round, const std::string& who) const;

  RunConfig cfg_;
  const Dataset& data_;
  std::uint64_t seed_;
  ModelConfig model_;
  Partition partition_;
  std::vector<Shape> shapes_;
  std::vector<ClientModels> clients_;
  std::vector<Network> personal_;
};

// Full history of one seeded run.
std::vector<RoundMetrics> run_experiment(const RunConfig& cfg, const Dataset& data, std::uint64_t seed);

}  // namespace fedsim
