// SPDX-License-Identifier: Apache-2.0
#include "fedsim/runtime.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <iostream>
#include <numeric>
#include <random>
#include <thread>

#include "fedsim/binary_io.hpp"
#include "fedsim/errors.hpp"

namespace fedsim {

namespace {

constexpr std::uint32_t kServerId = 0xFFFFFFFFu;

// Runs fn(0..count-1) on up to `threads` workers. The first exception (by
// index) is rethrown after all workers finish.
template <typename Fn>
void parallel_for(std::size_t count, std::size_t threads, Fn&& fn) {
  std::vector<std::exception_ptr> errors(count);
  auto guarded = [&](std::size_t i) {
    try {
      fn(i);
    } catch (...) {
      errors[i] = std::current_exception();
    }
  };
  const std::size_t workers = std::min(threads, count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) guarded(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < count; i = next++) guarded(i);
      });
    }
    for (std::thread& t : pool) t.join();
  }
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

double ratio_of(std::size_t transmitted, std::size_t full) {
  return full ? static_cast<double>(transmitted) / static_cast<double>(full) : 0.0;
}

}  // namespace

std::string to_string(Mode mode) {
  switch (mode) {
    case Mode::fedmic: return "fedmic";
    case Mode::fedavg: return "fedavg";
    case Mode::local: return "local";
    case Mode::fedmic_a: return "fedmic_a";
    case Mode::fedmic_b: return "fedmic_b";
    case Mode::fedmic_c: return "fedmic_c";
  }
  return "?";
}

Mode parse_mode(std::string_view text) {
  for (Mode m : {Mode::fedmic, Mode::fedavg, Mode::local, Mode::fedmic_a, Mode::fedmic_b, Mode::fedmic_c}) {
    if (text == to_string(m)) return m;
  }
  throw ConfigError("unknown mode '" + std::string(text) +
                    "' (expected fedmic, fedavg, local, fedmic_a, fedmic_b or fedmic_c)");
}

std::string to_string(EvalPoint point) {
  switch (point) {
    case EvalPoint::automatic: return "auto";
    case EvalPoint::personal: return "personal";
    case EvalPoint::current: return "current";
  }
  return "?";
}

EvalPoint parse_eval_point(std::string_view text) {
  if (text == "auto") return EvalPoint::automatic;
  if (text == "personal") return EvalPoint::personal;
  if (text == "current") return EvalPoint::current;
  throw ConfigError("unknown eval point '" + std::string(text) + "' (expected auto, personal or current)");
}

void RunConfig::validate() const {
  if (n_clients < 2) throw ConfigError("n_clients must be >= 2");
  if (!(ratio > 0.0 && ratio <= 1.0)) throw ConfigError("ratio must lie in (0, 1]");
  if (std::llround(ratio * static_cast<double>(n_clients)) < 1) {
    throw ConfigError("ratio * n_clients rounds to 0 participants");
  }
  if (rounds < 1) throw ConfigError("rounds must be >= 1");
  if (epochs < 1) throw ConfigError("epochs must be >= 1");
  if (batch < 1) throw ConfigError("batch must be >= 1");
  if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("lr must be finite and >= 0");
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(alpha > 0.0 && alpha <= 1.0)) throw ConfigError("alpha must lie in (0, 1]");
  if (!(tau >= 0.0) || !std::isfinite(tau)) throw ConfigError("tau must be finite and >= 0");
  if (!(lambda > 0.0) || !std::isfinite(lambda)) throw ConfigError("lambda must be finite and > 0");
  if (seeds.empty()) throw ConfigError("seeds must list at least one seed");
  if (std::any_of(hidden.begin(), hidden.end(), [](std::size_t h) { return h == 0; })) {
    throw ConfigError("hidden widths must be >= 1");
  }
  if (rep_dim < 1) throw ConfigError("rep_dim must be >= 1");
  if (min_per_client < 3) throw ConfigError("min_per_client must be >= 3");
  if (threads < 1) throw ConfigError("threads must be >= 1");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
  for (std::size_t k : faulty_clients) {
    if (k >= n_clients) throw ConfigError("faulty client " + std::to_string(k) + " is not below n_clients");
  }
}

std::size_t RunConfig::sampled_per_round() const noexcept {
  const auto k = static_cast<std::size_t>(std::max<long long>(1, std::llround(ratio * static_cast<double>(n_clients))));
  return std::min(k, n_clients);
}

LocalUpdateConfig RunConfig::local_config() const {
  LocalUpdateConfig c;
  c.epochs = epochs;
  c.batch = batch;
  c.learning_rate = lr;
  c.momentum = momentum;
  c.train_aux = train_aux;
  c.swap_kl = swap_kl;
  c.clip_norm = clip_norm;
  switch (mode) {
    case Mode::fedmic:
    case Mode::fedmic_c: c.scheme = LocalScheme::dual; break;
    case Mode::fedmic_a: c.scheme = LocalScheme::dual_identity; break;
    case Mode::fedmic_b: c.scheme = LocalScheme::dual_no_rep; break;
    case Mode::fedavg:
    case Mode::local: c.scheme = LocalScheme::single; break;
  }
  return c;
}

CodecOptions RunConfig::codec() const {
  CodecOptions c;
  c.alpha = alpha;
  c.raw_threshold = raw_threshold;
  c.force_raw = mode == Mode::fedavg || mode == Mode::fedmic_c;
  return c;
}

EvalPoint RunConfig::eval_point() const noexcept {
  if (eval != EvalPoint::automatic) return eval;
  return mode == Mode::fedavg ? EvalPoint::current : EvalPoint::personal;
}

ModelConfig RunConfig::model_config(const Dataset& data, std::uint64_t seed) const {
  ModelConfig m;
  m.kind = model;
  m.channels = data.channels;
  m.height = data.height;
  m.width = data.width;
  m.hidden = hidden;
  m.rep_dim = rep_dim;
  m.classes = data.n_classes;
  m.seed = seed;
  m.validate();
  return m;
}

Dataset load_data(const std::string& source) {
  constexpr std::string_view prefix = "synth:";
  if (source.starts_with(prefix)) return synth_generate(parse_synth_spec(std::string_view(source).substr(prefix.size())));
  return read_fmic(source);
}

std::vector<std::size_t> sample_clients(std::size_t n_clients, double ratio, Rng& rng) {
  const auto want = std::max<long long>(1, std::llround(ratio * static_cast<double>(n_clients)));
  const std::size_t k = std::min<std::size_t>(static_cast<std::size_t>(want), n_clients);
  std::vector<std::size_t> ids(n_clients);
  std::iota(ids.begin(), ids.end(), 0);
  for (std::size_t i = 0; i < k; ++i) {
    std::uniform_int_distribution<std::size_t> pick(i, n_clients - 1);
    std::swap(ids[i], ids[pick(rng)]);
  }
  ids.resize(k);
  std::sort(ids.begin(), ids.end());
  return ids;
}

void add_dp_noise(GpdPacket& packet, double tau, Rng& rng) {
  if (tau < 0.0) throw ContractError("noise scale must be >= 0");
  if (tau == 0.0) return;
  std::normal_distribution<double> noise(0.0, tau);
  auto perturb = [&](std::span<double> xs) {
    for (double& x : xs) x += noise(rng);
  };
  auto perturb_triple = [&](SvdTriple& t) {
    perturb(t.u.values());
    perturb(t.s);
    for (double& s : t.s) s = std::max(s, 0.0);
    perturb(t.v.values());
  };
  for (TensorRecord& r : packet.records) {
    if (r.mode == RecordMode::raw) {
      perturb(r.payload);
    } else {
      perturb_triple(r.left);
      perturb_triple(r.right);
    }
  }
}

std::vector<Tensor> aggregate(std::span<const GpdPacket> packets, std::span<const Shape> shapes) {
  if (packets.empty()) throw ContractError("aggregate needs at least one packet");
  // Sender order makes the floating-point sum independent of arrival order.
  std::vector<std::size_t> order(packets.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return packets[a].header.sender < packets[b].header.sender;
  });
  double total = 0.0;
  for (const GpdPacket& p : packets) total += static_cast<double>(p.header.samples);
  if (!(total > 0.0)) throw ProtocolError("aggregate: all packets report zero samples");

  std::vector<Tensor> out;
  out.reserve(shapes.size());
  for (const Shape& s : shapes) out.emplace_back(s);
  for (std::size_t i : order) {
    const std::vector<Tensor> params = decode_model(packets[i], shapes);
    const double w = static_cast<double>(packets[i].header.samples) / total;
    for (std::size_t t = 0; t < params.size(); ++t) {
      double* dst = out[t].data();
      const double* src = params[t].data();
      for (std::size_t j = 0; j < params[t].size(); ++j) dst[j] += w * src[j];
    }
  }
  return out;
}

double evaluate(const ModelConfig& config, const Network& net, const Dataset& data,
                std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("evaluation on an empty split");
  constexpr std::size_t kChunk = 256;
  std::size_t correct = 0;
  for (std::size_t start = 0; start < indices.size(); start += kChunk) {
    const auto idx = indices.subspan(start, std::min(kChunk, indices.size() - start));
    const Tensor logits = predict_logits(config, net, batch_images(data, idx));
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < c; ++j) {
        if (logits.at(i, j) > logits.at(i, best)) best = j;
      }
      correct += best == data.labels[idx[i]];
    }
  }
  return static_cast<double>(correct) / static_cast<double>(indices.size());
}

Federation::Federation(const RunConfig& cfg, const Dataset& data, std::uint64_t seed)
    : cfg_(cfg), data_(data), seed_(seed) {
  cfg_.validate();
  data_.validate();
  model_ = cfg_.model_config(data_, seed_);
  partition_ = dirichlet_partition(data_, cfg_.n_clients, cfg_.lambda, derive_seed(seed_, {tag(Stream::partition)}),
                                   cfg_.min_per_client);
  split_tvt(partition_, data_, derive_seed(seed_, {tag(Stream::split)}));
  shapes_ = parameter_shapes(model_);
  clients_.reserve(cfg_.n_clients);
  // Students start from one shared model, as a server-side initialization
  // would give them; averaging independently initialized networks is useless.
  Rng global_rng = make_rng(seed_, {tag(Stream::global_init)});
  const Network global = init_network(model_, global_rng);
  for (std::size_t k = 0; k < cfg_.n_clients; ++k) {
    clients_.push_back(init_models(model_, derive_seed(seed_, {k}), cfg_.lr, cfg_.momentum));
    clients_.back().student = global;
  }
  for (const ClientModels& c : clients_) personal_.push_back(c.student);
  if (!cfg_.dump_packets.empty()) std::filesystem::create_directories(cfg_.dump_packets);
}

std::filesystem::path Federation::dump_path(std::size_t round, const std::string& who) const {
  char name[64];
  std::snprintf(name, sizeof name, "r%04zu_%s.gpd", round, who.c_str());
  return std::filesystem::path(cfg_.dump_packets) / name;
}

Federation::Upload Federation::train_client(std::size_t k, std::size_t round) {
  Upload up;
  if (std::find(cfg_.faulty_clients.begin(), cfg_.faulty_clients.end(), k) != cfg_.faulty_clients.end()) {
    up.failed = true;
    return up;
  }
  ClientModels& models = clients_[k];
  const ClientShard& shard = partition_.clients[k];
  Rng rng = make_rng(seed_, {tag(Stream::local_update), k, round});
  const std::vector<LossBundle> history = local_update(model_, models, data_, shard.train, cfg_.local_config(), rng);
  up.loss = mean_bundle(history);
  personal_[k] = models.student;
  if (cfg_.mode == Mode::local) return up;

  GpdPacket packet = encode_model(models.student.params, cfg_.codec(),
                                  {static_cast<std::uint32_t>(k), static_cast<std::uint32_t>(round), shard.train.size()});
  if (cfg_.tau > 0.0) {
    Rng noise = make_rng(seed_, {tag(Stream::dp_noise), k, round});
    add_dp_noise(packet, cfg_.tau, noise);
  }
  const std::vector<std::uint8_t> wire = serialize(packet);
  if (!cfg_.dump_packets.empty()) io::write_file(dump_path(round, "client" + std::to_string(k)), wire);
  up.bytes = wire.size();
  up.packet = deserialize(wire);
  return up;
}

void Federation::broadcast(const std::vector<Tensor>& global, std::size_t round, RoundMetrics& m) {
  std::uint64_t total = 0;
  for (const ClientShard& c : partition_.clients) total += c.train.size();
  const GpdPacket packet = encode_model(global, cfg_.codec(), {kServerId, static_cast<std::uint32_t>(round), total});
  const std::vector<std::uint8_t> wire = serialize(packet);
  if (!cfg_.dump_packets.empty()) io::write_file(dump_path(round, "server"), wire);
  const GpdPacket received = deserialize(wire);
  const std::vector<Tensor> params = decode_model(received, shapes_);
  for (std::size_t k = 0; k < clients_.size(); ++k) {
    clients_[k].student.params = params;
    ClientRoundMetrics& c = m.clients[k];
    c.download_bytes = wire.size();
    c.transmitted += received.transmitted;
    c.full += received.full;
  }
}

RoundMetrics Federation::run_round(std::size_t round) {
  RoundMetrics m;
  m.round = round;
  Rng sampler = make_rng(seed_, {tag(Stream::client_sampling), round});
  m.sampled = sample_clients(cfg_.n_clients, cfg_.ratio, sampler);
  m.clients.resize(cfg_.n_clients);
  for (std::size_t k = 0; k < cfg_.n_clients; ++k) {
    m.clients[k].client = k;
    m.clients[k].samples = partition_.clients[k].train.size();
  }

  std::vector<Upload> uploads(m.sampled.size());
  parallel_for(uploads.size(), cfg_.threads, [&](std::size_t i) { uploads[i] = train_client(m.sampled[i], round); });

  std::vector<GpdPacket> packets;
  std::size_t trained = 0;
  for (std::size_t i = 0; i < uploads.size(); ++i) {
    ClientRoundMetrics& c = m.clients[m.sampled[i]];
    c.sampled = true;
    if (uploads[i].failed) {
      c.failed = true;
      std::cerr << "round " << round << ": client " << c.client << " failed, skipped\n";
      continue;
    }
    ++trained;
    c.loss = uploads[i].loss;
    for (double LossBundle::*f : {&LossBundle::task_t, &LossBundle::task_s, &LossBundle::rep, &LossBundle::dec_r,
                                  &LossBundle::dec_d_t, &LossBundle::dec_d_s, &LossBundle::total_t,
                                  &LossBundle::total_s}) {
      m.loss.*f += c.loss.*f;
    }
    if (uploads[i].packet) {
      c.upload_bytes = uploads[i].bytes;
      c.transmitted += uploads[i].packet->transmitted;
      c.full += uploads[i].packet->full;
      packets.push_back(std::move(*uploads[i].packet));
    }
  }
  if (trained > 0) {
    for (double LossBundle::*f : {&LossBundle::task_t, &LossBundle::task_s, &LossBundle::rep, &LossBundle::dec_r,
                                  &LossBundle::dec_d_t, &LossBundle::dec_d_s, &LossBundle::total_t,
                                  &LossBundle::total_s}) {
      m.loss.*f /= static_cast<double>(trained);
    }
  }
  if (!packets.empty()) broadcast(aggregate(packets, shapes_), round, m);

  std::vector<double> acc(cfg_.n_clients);
  parallel_for(cfg_.n_clients, cfg_.threads, [&](std::size_t k) {
    const Network& net = cfg_.eval_point() == EvalPoint::personal ? personal_[k] : clients_[k].student;
    acc[k] = evaluate(model_, net, data_, partition_.clients[k].test);
  });

  double weight = 0.0;
  for (ClientRoundMetrics& c : m.clients) {
    c.test_acc = acc[c.client];
    c.comm_ratio = ratio_of(c.transmitted, c.full);
    m.mean_acc += c.test_acc;
    m.weighted_acc += static_cast<double>(c.samples) * c.test_acc;
    weight += static_cast<double>(c.samples);
    m.upload_bytes += c.upload_bytes;
    m.download_bytes += c.download_bytes;
    m.transmitted += c.transmitted;
    m.full += c.full;
  }
  m.mean_acc /= static_cast<double>(m.clients.size());
  m.weighted_acc /= weight;
  m.comm_ratio = ratio_of(m.transmitted, m.full);
  return m;
}

std::vector<RoundMetrics> run_experiment(const RunConfig& cfg, const Dataset& data, std::uint64_t seed) {
  Federation fed(cfg, data, seed);
  std::vector<RoundMetrics> history;
  history.reserve(cfg.rounds);
  for (std::size_t r = 0; r < cfg.rounds; ++r) history.push_back(fed.run_round(r));
  return history;
}

}  // namespace fedsim
