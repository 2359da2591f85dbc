// SPDX-License-Identifier: Apache-2.0
#pragma once

// Global parameter decomposition codec.
//
// Each parameter matrix g [P x Q] is split into a rank-r factor pair
// g ~= g_p * g_n (g_p [P x r], g_n [r x Q], r = clamp(max(P,Q) / min(P,Q), 1,
// min(P,Q))). Each factor is then SVD'd and truncated to the smallest K whose
// leading squared singular values explain more than alpha of the total. The
// three SVD parts of both factors are what goes on the wire. Vectors, small
// tensors, and tensors that would not shrink are sent raw.
//
// Wire format (little-endian):
//   "GPD1" | u32 sender | u32 round | u64 samples | u32 record count | records
//   record: u32 id | u8 mode (0 raw, 1 gpd) | u8 ndim | u32 x ndim shape |
//     raw: f32 x count
//     gpd: u32 r | u32 Kp | f32 Up (P*Kp) | f32 Sp (Kp) | f32 Vp (Kp*r) |
//          u32 Kn | f32 Un (r*Kn) | f32 Sn (Kn) | f32 Vn (Kn*Q)

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

#include "fedsim/linalg.hpp"
#include "fedsim/tensor.hpp"

namespace fedsim {

enum class RecordMode : std::uint8_t { raw = 0, gpd = 1 };

struct TensorRecord {
  std::uint32_t id = 0;
  Shape shape;
  RecordMode mode = RecordMode::raw;
  std::vector<double> payload;  // raw mode
  std::uint32_t rank = 0;       // gpd mode: rank r of the factor split
  SvdTriple left;               // truncated SVD of g_p [P x r]
  SvdTriple right;              // truncated SVD of g_n [r x Q]

  std::size_t scalar_count() const noexcept;
  std::size_t full_count() const noexcept { return shape_size(shape); }
};

struct PacketHeader {
  std::uint32_t sender = 0;
  std::uint32_t round = 0;
  std::uint64_t samples = 0;  // n_k, the sender's aggregation weight
};

struct GpdPacket {
  PacketHeader header;
  std::vector<TensorRecord> records;
  std::size_t transmitted = 0;  // scalars on the wire
  std::size_t full = 0;         // scalars of the uncompressed model

  void recount() noexcept;
};

struct CodecOptions {
  double alpha = 0.98;
  std::size_t raw_threshold = 4096;
  bool force_raw = false;
};

struct PacketStats {
  std::size_t transmitted = 0;
  std::size_t full = 0;
  double ratio = 1.0;
  std::size_t bytes = 0;
};

// 2-D view used by the codec: first axis against the product of the rest.
std::pair<std::size_t, std::size_t> matrix_view(const Shape& shape);

std::size_t split_rank_for(std::size_t rows, std::size_t cols) noexcept;

struct RankSplit {
  Tensor left;   // [P x r] = U_r sqrt(S_r)
  Tensor right;  // [r x Q] = sqrt(S_r) V_r
  std::size_t rank = 0;
};

// Best rank-r factor pair of g (any tensor of rank >= 2, viewed as P x Q).
RankSplit split_rank(const Tensor& g, std::string_view label = "tensor");

// Smallest K with (sum_{i<=K} s_i^2) / (sum s_i^2) > alpha. An all-zero
// spectrum gives 1; if no prefix passes (alpha = 1) the count of non-zero
// values is returned.
std::size_t choose_k(std::span<const double> s, double alpha);

// Scalar count of a gpd record: P*Kp + Kp + Kp*r + r*Kn + Kn + Kn*Q.
std::size_t gpd_scalar_count(std::size_t p, std::size_t q, std::size_t r, std::size_t kp,
                             std::size_t kn) noexcept;

TensorRecord encode_tensor(std::uint32_t id, const Tensor& t, const CodecOptions& options);
Tensor decode_tensor(const TensorRecord& record);

GpdPacket encode_model(std::span<const Tensor> params, const CodecOptions& options,
                       const PacketHeader& header);
std::vector<Tensor> decode_model(const GpdPacket& packet, std::span<const Shape> shapes);

PacketStats packet_stats(const GpdPacket& packet);

std::vector<std::uint8_t> serialize(const GpdPacket& packet);
GpdPacket deserialize(std::span<const std::uint8_t> bytes);

void write_packet(const std::filesystem::path& path, const GpdPacket& packet);
GpdPacket read_packet(const std::filesystem::path& path);

}  // namespace fedsim
