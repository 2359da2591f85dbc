// SPDX-License-Identifier: Apache-2.0
#pragma once

// Flat `key=value` run configuration, one entry per line, `#` starts a
// comment. Missing keys keep the RunConfig defaults.

#include <filesystem>
#include <span>
#include <string>
#include <string_view>

#include "fedsim/runtime.hpp"

namespace fedsim {

// `overrides` are `--key=value` arguments and win over the document.
// Throws ParseError naming the key (and line, for document entries).
RunConfig parse_config(std::string_view text, std::span<const std::string> overrides = {});
RunConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides = {});

// Every key with its value; parse_config(serialize_config(c)) == c.
std::string serialize_config(const RunConfig& config);

// Shortest decimal form that reads back to the same double.
std::string format_real(double value);

}  // namespace fedsim
