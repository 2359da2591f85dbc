// SPDX-License-Identifier: Apache-2.0
#include "fedsim/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>

#include "fedsim/binary_io.hpp"
#include "fedsim/config.hpp"
#include "fedsim/dataset.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/gpd.hpp"
#include "fedsim/metrics.hpp"
#include "fedsim/partition.hpp"
#include "fedsim/runtime.hpp"

namespace fedsim {

namespace {

namespace fs = std::filesystem;

void run_command(const std::string& config_path, const std::vector<std::string>& overrides, std::ostream& out) {
  const RunConfig cfg = load_config(config_path, overrides);
  const Dataset data = load_data(cfg.data);
  fs::create_directories(cfg.out);
  std::vector<RunRecord> runs;
  for (std::uint64_t seed : cfg.seeds) {
    RunRecord rec;
    rec.run_id = to_string(cfg.mode) + "_seed" + std::to_string(seed);
    rec.mode = cfg.mode;
    rec.seed = seed;
    rec.history = run_experiment(cfg, data, seed);
    const RoundMetrics& last = rec.history.back();
    out << rec.run_id << ": final weighted_acc " << format_real(last.weighted_acc) << ", comm_ratio "
        << format_real(last.comm_ratio) << '\n';
    runs.push_back(std::move(rec));
  }
  emit_metrics(fs::path(cfg.out) / "metrics.csv", runs);
  if (runs.size() > 1) emit_summary(fs::path(cfg.out) / "summary.csv", runs);
  out << "wrote " << (fs::path(cfg.out) / "metrics.csv").string() << '\n';
}

void synth_command(const std::string& spec_text, const std::string& path, std::ostream& out) {
  const SynthSpec spec = parse_synth_spec(spec_text);
  write_fmic(synth_generate(spec), path);
  out << "wrote " << path << " (" << to_string(spec) << ")\n";
}

void partition_command(const std::string& in, double lambda, std::size_t n_clients, const std::string& dir,
                       std::uint64_t seed, std::size_t min_per_client, std::ostream& out) {
  const Dataset data = read_fmic(in);
  Partition part = dirichlet_partition(data, n_clients, lambda, derive_seed(seed, {tag(Stream::partition)}), min_per_client);
  split_tvt(part, data, derive_seed(seed, {tag(Stream::split)}));
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["source"] = in;
  manifest["lambda"] = lambda;
  manifest["n_clients"] = n_clients;
  manifest["seed"] = seed;
  manifest["clients"] = nlohmann::json::array();
  for (std::size_t k = 0; k < part.clients.size(); ++k) {
    const ClientShard& c = part.clients[k];
    char name[32];
    std::snprintf(name, sizeof name, "client_%03zu.fmic", k);
    write_fmic(subset(data, c.indices), fs::path(dir) / name);
    manifest["clients"].push_back({{"file", name},
                                   {"labels", label_histogram(data, c.indices)},
                                   {"indices", c.indices},
                                   {"train", c.train},
                                   {"test", c.test},
                                   {"val", c.val}});
  }
  const std::string text = manifest.dump(2) + "\n";
  io::write_file(fs::path(dir) / "manifest.json",
                 std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
  out << "wrote " << part.clients.size() << " shards and manifest.json to " << dir << '\n';
}

void inspect_command(const std::string& path, std::ostream& out) {
  const std::vector<std::uint8_t> bytes = io::read_file(path);
  const auto starts = [&bytes](const char* magic) {
    return bytes.size() >= 4 && std::equal(bytes.begin(), bytes.begin() + 4, magic);
  };
  if (starts("FMIC")) {
    const FmicHeader h = read_fmic_header(bytes);
    out << "format: FMIC\nversion: " << int{h.version} << "\nsamples: " << h.count << "\nchannels: " << h.channels
        << "\nheight: " << h.height << "\nwidth: " << h.width << "\nclasses: " << h.n_classes << '\n';
    return;
  }
  if (starts("GPD1")) {
    const GpdPacket p = deserialize(bytes);
    const PacketStats st = packet_stats(p);
    out << "format: GPD1\nsender: " << p.header.sender << "\nround: " << p.header.round
        << "\nsamples: " << p.header.samples << "\nrecords: " << p.records.size() << '\n';
    for (const TensorRecord& r : p.records) {
      out << "  tensor " << r.id << ' ' << shape_string(r.shape) << ' '
          << (r.mode == RecordMode::raw ? "raw" : "gpd");
      if (r.mode == RecordMode::gpd) out << " r=" << r.rank << " Kp=" << r.left.size() << " Kn=" << r.right.size();
      out << " scalars=" << r.scalar_count() << '/' << r.full_count() << '\n';
    }
    out << "transmitted: " << st.transmitted << "\nfull: " << st.full << "\nratio: " << format_real(st.ratio)
        << "\nbytes: " << st.bytes << '\n';
    return;
  }
  throw FormatError(path + ": neither an FMIC nor a GPD1 file", 0);
}

}  // namespace

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Federated learning simulator", "fedsim"};
  app.require_subcommand(1);

  std::string config_path;
  auto* run = app.add_subcommand("run", "Run an experiment from a key=value config; --key=value overrides");
  run->add_option("config", config_path, "Config file")->required();
  run->allow_extras();

  std::string spec, synth_out;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic FMIC dataset");
  synth->add_option("spec", spec, "e.g. classes=8,per_class=400,shape=1x28x28,noise=32,seed=0")->required();
  synth->add_option("out", synth_out, "Output .fmic path")->required();

  std::string part_in, part_dir;
  double lambda = 0.0;
  std::size_t n_clients = 0, min_per_client = 10;
  std::uint64_t seed = 0;
  auto* partition = app.add_subcommand("partition", "Split an FMIC dataset into Dirichlet non-IID client shards");
  partition->add_option("input", part_in, "Source .fmic")->required();
  partition->add_option("lambda", lambda, "Dirichlet concentration")->required();
  partition->add_option("n_clients", n_clients, "Number of clients")->required();
  partition->add_option("out_dir", part_dir, "Output directory")->required();
  partition->add_option("--seed", seed, "Partition seed");
  partition->add_option("--min-per-client", min_per_client, "Minimum samples per client");

  std::string inspect_path;
  auto* inspect = app.add_subcommand("inspect", "Print an FMIC header or a GPD packet summary");
  inspect->add_option("file", inspect_path, "File to inspect")->required();

  std::vector<std::string> argv_rev(args.rbegin(), args.rend());
  try {
    app.parse(argv_rev);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n\n" << app.help();
    return 1;
  }

  try {
    if (*run) {
      run_command(config_path, run->remaining(), out);
    } else if (*synth) {
      synth_command(spec, synth_out, out);
    } else if (*partition) {
      partition_command(part_in, lambda, n_clients, part_dir, seed, min_per_client, out);
    } else if (*inspect) {
      inspect_command(inspect_path, out);
    }
  } catch (const UserError& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

}  // namespace fedsim
