// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <ostream>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/runtime.hpp"

namespace fedsim {

inline constexpr std::string_view kMetricsHeader =
    "run_id,mode,round,client_id,task_loss_t,task_loss_s,rep_loss,ddl_rep,ddl_dec_t,ddl_dec_s,"
    "test_acc,weighted_acc,upload_bytes,download_bytes,comm_ratio";

struct RunRecord {
  std::string run_id;
  Mode mode = Mode::fedmic;
  std::uint64_t seed = 0;
  std::vector<RoundMetrics> history;
};

// Per round: one row per client (loss columns empty for clients that did not
// train, weighted_acc empty) followed by the aggregate row with client_id -1.
void write_metrics(std::ostream& out, std::span<const RunRecord> runs);
void emit_metrics(const std::filesystem::path& path, std::span<const RunRecord> runs);

inline constexpr std::string_view kSummaryHeader =
    "mode,runs,final_weighted_acc_mean,final_weighted_acc_std,final_mean_acc_mean,final_mean_acc_std,"
    "comm_ratio_mean";

// One row per mode over its runs: final-round accuracy mean and sample std,
// and the comm_ratio averaged over all rounds of all runs.
void write_summary(std::ostream& out, std::span<const RunRecord> runs);
void emit_summary(const std::filesystem::path& path, std::span<const RunRecord> runs);

}  // namespace fedsim
