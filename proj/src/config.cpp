// SPDX-License-Identifier: Apache-2.0
#include "fedsim/config.hpp"

#include <charconv>
#include <functional>
#include <map>
#include <sstream>

#include "fedsim/binary_io.hpp"
#include "fedsim/errors.hpp"

namespace fedsim {

std::string format_real(double value) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, value);
  return std::string(buf, res.ptr);
}

namespace {

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

template <typename T>
T number(std::string_view text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size() || text.empty()) {
    throw ConfigError("cannot parse '" + std::string(text) + "' as a number");
  }
  return v;
}

std::size_t count(std::string_view text) { return number<std::size_t>(text); }

template <typename T>
std::vector<T> list(std::string_view text) {
  std::vector<T> out;
  while (!text.empty()) {
    const std::size_t comma = text.find(',');
    out.push_back(number<T>(trim(text.substr(0, comma))));
    if (comma == std::string_view::npos) break;
    text = text.substr(comma + 1);
  }
  return out;
}

bool boolean(std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("expected true or false, got '" + std::string(text) + "'");
}

void in_range(bool ok, const char* what) {
  if (!ok) throw ConfigError(what);
}

template <typename T>
std::string join(const std::vector<T>& xs) {
  std::string s;
  for (std::size_t i = 0; i < xs.size(); ++i) s += (i ? "," : "") + std::to_string(xs[i]);
  return s;
}

using Setter = std::function<void(RunConfig&, std::string_view)>;

const std::map<std::string, Setter, std::less<>>& setters() {
  static const std::map<std::string, Setter, std::less<>> table = {
      {"mode", [](RunConfig& c, std::string_view v) { c.mode = parse_mode(v); }},
      {"n_clients", [](RunConfig& c, std::string_view v) { c.n_clients = count(v); in_range(c.n_clients >= 2, "must be >= 2"); }},
      {"ratio", [](RunConfig& c, std::string_view v) { c.ratio = number<double>(v); in_range(c.ratio > 0.0 && c.ratio <= 1.0, "must lie in (0, 1]"); }},
      {"rounds", [](RunConfig& c, std::string_view v) { c.rounds = count(v); in_range(c.rounds >= 1, "must be >= 1"); }},
      {"epochs", [](RunConfig& c, std::string_view v) { c.epochs = count(v); in_range(c.epochs >= 1, "must be >= 1"); }},
      {"batch", [](RunConfig& c, std::string_view v) { c.batch = count(v); in_range(c.batch >= 1, "must be >= 1"); }},
      {"lr", [](RunConfig& c, std::string_view v) { c.lr = number<double>(v); in_range(c.lr >= 0.0, "must be >= 0"); }},
      {"momentum", [](RunConfig& c, std::string_view v) { c.momentum = number<double>(v); in_range(c.momentum >= 0.0 && c.momentum < 1.0, "must lie in [0, 1)"); }},
      {"alpha", [](RunConfig& c, std::string_view v) { c.alpha = number<double>(v); in_range(c.alpha > 0.0 && c.alpha <= 1.0, "must lie in (0, 1]"); }},
      {"tau", [](RunConfig& c, std::string_view v) { c.tau = number<double>(v); in_range(c.tau >= 0.0, "must be >= 0"); }},
      {"lambda", [](RunConfig& c, std::string_view v) { c.lambda = number<double>(v); in_range(c.lambda > 0.0, "must be > 0"); }},
      {"seed", [](RunConfig& c, std::string_view v) { c.seeds = {number<std::uint64_t>(v)}; }},
      {"seeds", [](RunConfig& c, std::string_view v) { c.seeds = list<std::uint64_t>(v); in_range(!c.seeds.empty(), "must list at least one seed"); }},
      {"model", [](RunConfig& c, std::string_view v) {
         if (v == "mlp") c.model = ModelKind::mlp;
         else if (v == "cnn") c.model = ModelKind::cnn;
         else throw ConfigError("expected mlp or cnn");
       }},
      {"hidden", [](RunConfig& c, std::string_view v) { c.hidden = list<std::size_t>(v); }},
      {"rep_dim", [](RunConfig& c, std::string_view v) { c.rep_dim = count(v); in_range(c.rep_dim >= 1, "must be >= 1"); }},
      {"raw_threshold", [](RunConfig& c, std::string_view v) { c.raw_threshold = count(v); }},
      {"min_per_client", [](RunConfig& c, std::string_view v) { c.min_per_client = count(v); }},
      {"data", [](RunConfig& c, std::string_view v) { c.data = std::string(v); }},
      {"out", [](RunConfig& c, std::string_view v) { c.out = std::string(v); }},
      {"eval", [](RunConfig& c, std::string_view v) { c.eval = parse_eval_point(v); }},
      {"train_aux", [](RunConfig& c, std::string_view v) { c.train_aux = boolean(v); }},
      {"swap_kl", [](RunConfig& c, std::string_view v) { c.swap_kl = boolean(v); }},
      {"clip_norm", [](RunConfig& c, std::string_view v) { c.clip_norm = number<double>(v); in_range(c.clip_norm >= 0.0, "must be >= 0"); }},
      {"threads", [](RunConfig& c, std::string_view v) { c.threads = count(v); in_range(c.threads >= 1, "must be >= 1"); }},
      {"faulty_clients", [](RunConfig& c, std::string_view v) { c.faulty_clients = list<std::size_t>(v); }},
      {"dump_packets", [](RunConfig& c, std::string_view v) { c.dump_packets = std::string(v); }},
  };
  return table;
}

void apply(RunConfig& c, std::string_view key, std::string_view value, const std::string& where) {
  const auto& table = setters();
  const auto it = table.find(key);
  if (it == table.end()) throw ParseError(where + ": unknown key '" + std::string(key) + "'");
  try {
    it->second(c, value);
  } catch (const ConfigError& e) {
    throw ParseError(where + ": " + std::string(key) + ": " + e.what());
  }
}

}  // namespace

RunConfig parse_config(std::string_view text, std::span<const std::string> overrides) {
  RunConfig c;
  std::size_t line_no = 0;
  while (!text.empty()) {
    const std::size_t nl = text.find('\n');
    std::string_view line = text.substr(0, nl);
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    line = trim(line);
    if (line.empty()) continue;
    const std::string where = "line " + std::to_string(line_no);
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) throw ParseError(where + ": expected key=value, got '" + std::string(line) + "'");
    apply(c, trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where);
  }
  for (const std::string& arg : overrides) {
    std::string_view a = arg;
    const auto eq = a.find('=');
    if (!a.starts_with("--") || eq == std::string_view::npos) {
      throw ParseError("override '" + arg + "' is not of the form --key=value");
    }
    apply(c, a.substr(2, eq - 2), a.substr(eq + 1), "override");
  }
  try {
    c.validate();
  } catch (const ConfigError& e) {
    throw ParseError(std::string("config: ") + e.what());
  }
  return c;
}

RunConfig load_config(const std::filesystem::path& path, std::span<const std::string> overrides) {
  const std::vector<std::uint8_t> bytes = io::read_file(path);
  return parse_config(std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()), overrides);
}

std::string serialize_config(const RunConfig& c) {
  std::ostringstream o;
  o << "mode=" << to_string(c.mode) << '\n'
    << "n_clients=" << c.n_clients << '\n'
    << "ratio=" << format_real(c.ratio) << '\n'
    << "rounds=" << c.rounds << '\n'
    << "epochs=" << c.epochs << '\n'
    << "batch=" << c.batch << '\n'
    << "lr=" << format_real(c.lr) << '\n'
    << "momentum=" << format_real(c.momentum) << '\n'
    << "alpha=" << format_real(c.alpha) << '\n'
    << "tau=" << format_real(c.tau) << '\n'
    << "lambda=" << format_real(c.lambda) << '\n'
    << "seeds=" << join(c.seeds) << '\n'
    << "model=" << to_string(c.model) << '\n'
    << "hidden=" << join(c.hidden) << '\n'
    << "rep_dim=" << c.rep_dim << '\n'
    << "raw_threshold=" << c.raw_threshold << '\n'
    << "min_per_client=" << c.min_per_client << '\n'
    << "data=" << c.data << '\n'
    << "out=" << c.out << '\n'
    << "eval=" << to_string(c.eval) << '\n'
    << "train_aux=" << (c.train_aux ? "true" : "false") << '\n'
    << "swap_kl=" << (c.swap_kl ? "true" : "false") << '\n'
    << "clip_norm=" << format_real(c.clip_norm) << '\n'
    << "threads=" << c.threads << '\n';
  if (!c.faulty_clients.empty()) o << "faulty_clients=" << join(c.faulty_clients) << '\n';
  if (!c.dump_packets.empty()) o << "dump_packets=" << c.dump_packets << '\n';
  return o.str();
}

}  // namespace fedsim
