// SPDX-License-Identifier: Apache-2.0
#include "fedsim/metrics.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "fedsim/config.hpp"
#include "fedsim/errors.hpp"

namespace fedsim {

namespace {

void loss_columns(std::ostream& out, const LossBundle& b) {
  out << format_real(b.task_t) << ',' << format_real(b.task_s) << ',' << format_real(b.rep) << ','
      << format_real(b.dec_r) << ',' << format_real(b.dec_d_t) << ',' << format_real(b.dec_d_s) << ',';
}

template <typename Writer>
void write_file(const std::filesystem::path& path, Writer&& writer) {
  std::ostringstream buf;
  writer(buf);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out << buf.str();
  if (!out) throw IoError("write failed for " + path.string());
}

double sample_std(const std::vector<double>& xs, double mean) {
  if (xs.size() < 2) return 0.0;
  double s = 0.0;
  for (double x : xs) s += (x - mean) * (x - mean);
  return std::sqrt(s / static_cast<double>(xs.size() - 1));
}

}  // namespace

void write_metrics(std::ostream& out, std::span<const RunRecord> runs) {
  out << kMetricsHeader << '\n';
  for (const RunRecord& run : runs) {
    const std::string prefix = run.run_id + ',' + to_string(run.mode) + ',';
    for (const RoundMetrics& m : run.history) {
      for (const ClientRoundMetrics& c : m.clients) {
        out << prefix << m.round << ',' << c.client << ',';
        if (c.sampled && !c.failed) {
          loss_columns(out, c.loss);
        } else {
          out << ",,,,,,";
        }
        out << format_real(c.test_acc) << ",," << c.upload_bytes << ',' << c.download_bytes << ','
            << format_real(c.comm_ratio) << '\n';
      }
      out << prefix << m.round << ",-1,";
      loss_columns(out, m.loss);
      out << format_real(m.mean_acc) << ',' << format_real(m.weighted_acc) << ',' << m.upload_bytes << ','
          << m.download_bytes << ',' << format_real(m.comm_ratio) << '\n';
    }
  }
}

void emit_metrics(const std::filesystem::path& path, std::span<const RunRecord> runs) {
  if (runs.empty()) throw ContractError("no runs to emit");
  write_file(path, [&](std::ostream& o) { write_metrics(o, runs); });
}

void write_summary(std::ostream& out, std::span<const RunRecord> runs) {
  out << kSummaryHeader << '\n';
  std::vector<Mode> order;
  std::map<Mode, std::vector<const RunRecord*>> by_mode;
  for (const RunRecord& r : runs) {
    if (r.history.empty()) continue;
    if (!by_mode.contains(r.mode)) order.push_back(r.mode);
    by_mode[r.mode].push_back(&r);
  }
  for (Mode mode : order) {
    std::vector<double> weighted, plain;
    double ratio = 0.0;
    std::size_t rounds = 0;
    for (const RunRecord* r : by_mode[mode]) {
      weighted.push_back(r->history.back().weighted_acc);
      plain.push_back(r->history.back().mean_acc);
      for (const RoundMetrics& m : r->history) {
        ratio += m.comm_ratio;
        ++rounds;
      }
    }
    const double n = static_cast<double>(weighted.size());
    double wm = 0.0, pm = 0.0;
    for (std::size_t i = 0; i < weighted.size(); ++i) {
      wm += weighted[i];
      pm += plain[i];
    }
    wm /= n;
    pm /= n;
    out << to_string(mode) << ',' << weighted.size() << ',' << format_real(wm) << ','
        << format_real(sample_std(weighted, wm)) << ',' << format_real(pm) << ',' << format_real(sample_std(plain, pm))
        << ',' << format_real(ratio / static_cast<double>(rounds)) << '\n';
  }
}

void emit_summary(const std::filesystem::path& path, std::span<const RunRecord> runs) {
  write_file(path, [&](std::ostream& o) { write_summary(o, runs); });
}

}  // namespace fedsim
