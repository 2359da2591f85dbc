// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace fedsim {

// Subcommands: run, synth, partition, inspect. Returns 0 on success, 1 on
// user errors (bad arguments, config, input files) and 2 on internal errors.
int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace fedsim
