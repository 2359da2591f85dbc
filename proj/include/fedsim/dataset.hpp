// SPDX-License-Identifier: Apache-2.0
#pragma once

// Labeled u8 image sets and the FMIC container.
//
// FMIC layout (little-endian):
//   "FMIC" | u8 version (1) | u32 N | u32 C | u32 H | u32 W | u32 n_classes |
//   u8 labels x N | u8 pixels x (N*C*H*W), row-major per sample

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fedsim/tensor.hpp"

namespace fedsim {

struct Dataset {
  std::size_t channels = 1;
  std::size_t height = 1;
  std::size_t width = 1;
  std::size_t n_classes = 2;
  std::vector<std::uint8_t> labels;
  std::vector<std::uint8_t> pixels;

  std::size_t size() const noexcept { return labels.size(); }
  std::size_t sample_size() const noexcept { return channels * height * width; }
  // Throws ValidationError on an empty set, bad geometry or labels out of range.
  void validate() const;

  bool operator==(const Dataset&) const = default;
};

inline constexpr std::size_t kFmicHeaderBytes = 25;

std::vector<std::uint8_t> encode_fmic(const Dataset& data);
Dataset decode_fmic(std::span<const std::uint8_t> bytes);
void write_fmic(const Dataset& data, const std::filesystem::path& path);
Dataset read_fmic(const std::filesystem::path& path);

// Header fields only; used by `inspect`.
struct FmicHeader {
  std::uint8_t version = 1;
  std::size_t count = 0, channels = 0, height = 0, width = 0, n_classes = 0;
};
FmicHeader read_fmic_header(std::span<const std::uint8_t> bytes);

// Pixels of the selected samples scaled to [0, 1], shape [n x C x H x W].
Tensor batch_images(const Dataset& data, std::span<const std::size_t> indices);
std::vector<std::size_t> batch_labels(const Dataset& data, std::span<const std::size_t> indices);

// Subset in the given index order.
Dataset subset(const Dataset& data, std::span<const std::size_t> indices);

struct SynthSpec {
  std::size_t n_classes = 8;
  std::size_t per_class = 400;
  std::size_t channels = 1;
  std::size_t height = 28;
  std::size_t width = 28;
  double noise = 32.0;  // pixel noise std on the 0..255 scale
  std::uint64_t seed = 0;
};

// Parses "classes=8,per_class=400,shape=1x28x28,noise=32,seed=7"; omitted
// fields keep their defaults. Throws ParseError naming the offending field.
SynthSpec parse_synth_spec(std::string_view text);
std::string to_string(const SynthSpec& spec);

// Each class gets a smooth random template (sum of a few random Gaussian
// bumps); samples add i.i.d. Gaussian pixel noise and are rounded and clipped
// to u8. Samples are class-major: class 0 first.
Dataset synth_generate(const SynthSpec& spec);
// The noiseless class templates on the 0..255 scale, [n_classes x C*H*W].
Tensor synth_templates(const SynthSpec& spec);

}  // namespace fedsim
