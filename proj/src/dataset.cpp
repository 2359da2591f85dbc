// SPDX-License-Identifier: Apache-2.0
#include "fedsim/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <random>

#include "fedsim/binary_io.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

void Dataset::validate() const {
  if (labels.empty()) throw ValidationError("dataset has no samples");
  if (channels == 0 || height == 0 || width == 0) throw ValidationError("dataset has a zero image extent");
  if (n_classes < 2 || n_classes > 256) throw ValidationError("n_classes must lie in [2, 256]");
  if (pixels.size() != labels.size() * sample_size()) {
    throw ValidationError("pixel buffer holds " + std::to_string(pixels.size()) + " bytes, expected " +
                          std::to_string(labels.size() * sample_size()));
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] >= n_classes) {
      throw ValidationError("label " + std::to_string(labels[i]) + " of sample " + std::to_string(i) +
                            " is not below n_classes = " + std::to_string(n_classes));
    }
  }
}

std::vector<std::uint8_t> encode_fmic(const Dataset& data) {
  data.validate();
  io::ByteWriter w;
  w.bytes("FMIC", 4);
  w.u8(1);
  for (std::size_t v : {data.size(), data.channels, data.height, data.width, data.n_classes}) {
    w.u32(static_cast<std::uint32_t>(v));
  }
  w.bytes(data.labels.data(), data.labels.size());
  w.bytes(data.pixels.data(), data.pixels.size());
  return std::move(w.buffer());
}

FmicHeader read_fmic_header(std::span<const std::uint8_t> bytes) {
  io::ByteReader in(bytes, "FMIC file");
  const auto magic = in.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), "FMIC")) in.fail("bad magic", 0);
  FmicHeader h;
  h.version = in.u8();
  if (h.version != 1) in.fail("unsupported version " + std::to_string(h.version), 4);
  h.count = in.u32();
  h.channels = in.u32();
  h.height = in.u32();
  h.width = in.u32();
  h.n_classes = in.u32();
  return h;
}

Dataset decode_fmic(std::span<const std::uint8_t> bytes) {
  const FmicHeader h = read_fmic_header(bytes);
  if (h.count == 0) throw ValidationError("FMIC header declares N = 0");
  if (h.channels == 0 || h.height == 0 || h.width == 0) {
    throw ValidationError("FMIC header declares a zero image extent");
  }
  io::ByteReader in(bytes, "FMIC file");
  in.bytes(kFmicHeaderBytes);
  Dataset d;
  d.channels = h.channels;
  d.height = h.height;
  d.width = h.width;
  d.n_classes = h.n_classes;
  const auto labels = in.bytes(h.count);
  d.labels.assign(labels.begin(), labels.end());
  const auto pixels = in.bytes(h.count * d.sample_size());
  d.pixels.assign(pixels.begin(), pixels.end());
  if (in.remaining() != 0) in.fail("trailing bytes after pixel data", in.offset());
  d.validate();
  return d;
}

void write_fmic(const Dataset& data, const std::filesystem::path& path) {
  io::write_file(path, encode_fmic(data));
}

Dataset read_fmic(const std::filesystem::path& path) { return decode_fmic(io::read_file(path)); }

Tensor batch_images(const Dataset& data, std::span<const std::size_t> indices) {
  if (indices.empty()) throw ContractError("empty batch");
  const std::size_t m = data.sample_size();
  Tensor out({indices.size(), data.channels, data.height, data.width});
  double* dst = out.data();
  for (std::size_t i : indices) {
    if (i >= data.size()) throw ContractError("sample index " + std::to_string(i) + " out of range");
    const std::uint8_t* src = data.pixels.data() + i * m;
    for (std::size_t j = 0; j < m; ++j) *dst++ = src[j] / 255.0;
  }
  return out;
}

std::vector<std::size_t> batch_labels(const Dataset& data, std::span<const std::size_t> indices) {
  std::vector<std::size_t> out;
  out.reserve(indices.size());
  for (std::size_t i : indices) out.push_back(data.labels.at(i));
  return out;
}

Dataset subset(const Dataset& data, std::span<const std::size_t> indices) {
  Dataset d;
  d.channels = data.channels;
  d.height = data.height;
  d.width = data.width;
  d.n_classes = data.n_classes;
  const std::size_t m = data.sample_size();
  d.labels.reserve(indices.size());
  d.pixels.reserve(indices.size() * m);
  for (std::size_t i : indices) {
    d.labels.push_back(data.labels.at(i));
    const auto* src = data.pixels.data() + i * m;
    d.pixels.insert(d.pixels.end(), src, src + m);
  }
  return d;
}

namespace {

template <typename T>
T parse_number(std::string_view key, std::string_view text) {
  T v{};
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc{} || ptr != text.data() + text.size()) {
    throw ParseError("synth spec: bad value '" + std::string(text) + "' for " + std::string(key));
  }
  return v;
}

}  // namespace

SynthSpec parse_synth_spec(std::string_view text) {
  SynthSpec spec;
  while (!text.empty()) {
    const std::size_t comma = text.find(',');
    const std::string_view item = text.substr(0, comma);
    text = comma == std::string_view::npos ? std::string_view{} : text.substr(comma + 1);
    if (item.empty()) continue;
    const std::size_t eq = item.find('=');
    if (eq == std::string_view::npos) throw ParseError("synth spec: expected key=value, got '" + std::string(item) + "'");
    const std::string_view key = item.substr(0, eq), value = item.substr(eq + 1);
    if (key == "classes") {
      spec.n_classes = parse_number<std::size_t>(key, value);
    } else if (key == "per_class") {
      spec.per_class = parse_number<std::size_t>(key, value);
    } else if (key == "noise") {
      spec.noise = parse_number<double>(key, value);
    } else if (key == "seed") {
      spec.seed = parse_number<std::uint64_t>(key, value);
    } else if (key == "shape") {
      std::size_t dims[3];
      std::string_view rest = value;
      for (int i = 0; i < 3; ++i) {
        const std::size_t x = rest.find('x');
        if ((i < 2) == (x == std::string_view::npos)) throw ParseError("synth spec: shape must be CxHxW");
        dims[i] = parse_number<std::size_t>(key, rest.substr(0, x));
        rest = x == std::string_view::npos ? std::string_view{} : rest.substr(x + 1);
      }
      spec.channels = dims[0];
      spec.height = dims[1];
      spec.width = dims[2];
    } else {
      throw ParseError("synth spec: unknown field '" + std::string(key) + "'");
    }
  }
  if (spec.n_classes < 2 || spec.n_classes > 256) throw ParseError("synth spec: classes must lie in [2, 256]");
  if (spec.per_class < 1) throw ParseError("synth spec: per_class must be >= 1");
  if (spec.channels == 0 || spec.height == 0 || spec.width == 0) throw ParseError("synth spec: zero extent in shape");
  if (!(spec.noise >= 0.0) || !std::isfinite(spec.noise)) throw ParseError("synth spec: noise must be finite and >= 0");
  return spec;
}

std::string to_string(const SynthSpec& spec) {
  char noise[32];
  const auto res = std::to_chars(noise, noise + sizeof noise, spec.noise);
  return "classes=" + std::to_string(spec.n_classes) + ",per_class=" + std::to_string(spec.per_class) +
         ",shape=" + std::to_string(spec.channels) + "x" + std::to_string(spec.height) + "x" +
         std::to_string(spec.width) + ",noise=" + std::string(noise, res.ptr) +
         ",seed=" + std::to_string(spec.seed);
}

Tensor synth_templates(const SynthSpec& spec) {
  if (spec.n_classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  const std::size_t c = spec.channels, h = spec.height, w = spec.width;
  Tensor out({spec.n_classes, c * h * w});
  constexpr int kBumps = 6;
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    Rng rng = make_rng(spec.seed, {tag(Stream::synth), 0, k});
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (std::size_t ch = 0; ch < c; ++ch) {
      std::vector<double> field(h * w, 0.0);
      for (int b = 0; b < kBumps; ++b) {
        const double cy = unit(rng) * static_cast<double>(h), cx = unit(rng) * static_cast<double>(w);
        const double radius = (0.08 + 0.17 * unit(rng)) * static_cast<double>(std::max(h, w));
        const double amp = unit(rng) < 0.5 ? -1.0 : 1.0;
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            const double dy = static_cast<double>(y) + 0.5 - cy, dx = static_cast<double>(x) + 0.5 - cx;
            field[y * w + x] += amp * std::exp(-(dy * dy + dx * dx) / (2.0 * radius * radius));
          }
        }
      }
      const auto [lo, hi] = std::minmax_element(field.begin(), field.end());
      const double span = *hi - *lo;
      for (std::size_t i = 0; i < h * w; ++i) {
        const double unitval = span > 0.0 ? (field[i] - *lo) / span : 0.5;
        out.at(k, ch * h * w + i) = 32.0 + 192.0 * unitval;
      }
    }
  }
  return out;
}

Dataset synth_generate(const SynthSpec& spec) {
  const Tensor templates = synth_templates(spec);
  Dataset d;
  d.channels = spec.channels;
  d.height = spec.height;
  d.width = spec.width;
  d.n_classes = spec.n_classes;
  const std::size_t m = d.sample_size();
  d.labels.reserve(spec.n_classes * spec.per_class);
  d.pixels.reserve(spec.n_classes * spec.per_class * m);
  for (std::size_t k = 0; k < spec.n_classes; ++k) {
    Rng rng = make_rng(spec.seed, {tag(Stream::synth), 1, k});
    std::normal_distribution<double> noise(0.0, 1.0);
    for (std::size_t i = 0; i < spec.per_class; ++i) {
      d.labels.push_back(static_cast<std::uint8_t>(k));
      for (std::size_t j = 0; j < m; ++j) {
        const double v = templates.at(k, j) + (spec.noise > 0.0 ? spec.noise * noise(rng) : 0.0);
        d.pixels.push_back(static_cast<std::uint8_t>(std::clamp(std::round(v), 0.0, 255.0)));
      }
    }
  }
  return d;
}

}  // namespace fedsim
