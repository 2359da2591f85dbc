// SPDX-License-Identifier: Apache-2.0
#include "fedsim/gpd.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>
#include <string>

#include "fedsim/binary_io.hpp"
#include "fedsim/errors.hpp"
#include "fedsim/kernels.hpp"

namespace fedsim {

namespace io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string() + " for reading");
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), {});
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace io

namespace {

constexpr char kMagic[4] = {'G', 'P', 'D', '1'};
constexpr std::size_t kPacketHeaderBytes = 4 + 4 + 4 + 8 + 4;

std::size_t record_header_bytes(const TensorRecord& r) {
  return 4 + 1 + 1 + 4 * r.shape.size() + (r.mode == RecordMode::gpd ? 12 : 0);
}

std::string tensor_name(std::uint32_t id) { return "tensor " + std::to_string(id); }

}  // namespace

std::size_t TensorRecord::scalar_count() const noexcept {
  if (mode == RecordMode::raw) return payload.size();
  return left.u.size() + left.s.size() + left.v.size() + right.u.size() + right.s.size() +
         right.v.size();
}

void GpdPacket::recount() noexcept {
  transmitted = 0;
  full = 0;
  for (const TensorRecord& r : records) {
    transmitted += r.scalar_count();
    full += r.full_count();
  }
}

std::pair<std::size_t, std::size_t> matrix_view(const Shape& shape) {
  if (shape.size() < 2) throw DimensionError("matrix view needs rank >= 2, got " + shape_string(shape));
  return {shape[0], shape_size(shape) / shape[0]};
}

std::size_t split_rank_for(std::size_t rows, std::size_t cols) noexcept {
  const std::size_t lo = std::min(rows, cols), hi = std::max(rows, cols);
  if (lo == 0) return 0;
  return std::clamp<std::size_t>(hi / lo, 1, lo);
}

RankSplit split_rank(const Tensor& g, std::string_view label) {
  const auto [p, q] = matrix_view(g.shape());
  const std::size_t r = split_rank_for(p, q);
  const SvdTriple t = svd_leading(g.reshaped({p, q}), r, label);
  RankSplit out{Tensor({p, r}), Tensor({r, q}), r};
  for (std::size_t j = 0; j < r; ++j) {
    const double root = std::sqrt(t.s[j]);
    for (std::size_t i = 0; i < p; ++i) out.left.at(i, j) = t.u.at(i, j) * root;
    for (std::size_t c = 0; c < q; ++c) out.right.at(j, c) = root * t.v.at(j, c);
  }
  return out;
}

std::size_t choose_k(std::span<const double> s, double alpha) {
  if (s.empty()) return 0;
  double total = 0.0;
  for (double v : s) total += v * v;
  if (total == 0.0) return 1;
  double prefix = 0.0;
  for (std::size_t k = 0; k < s.size(); ++k) {
    prefix += s[k] * s[k];
    if (prefix / total > alpha) return k + 1;
  }
  const auto nonzero = static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [](double v) { return v != 0.0; }));
  return std::max<std::size_t>(nonzero, 1);
}

std::size_t gpd_scalar_count(std::size_t p, std::size_t q, std::size_t r, std::size_t kp,
                             std::size_t kn) noexcept {
  return p * kp + kp + kp * r + r * kn + kn + kn * q;
}

TensorRecord encode_tensor(std::uint32_t id, const Tensor& t, const CodecOptions& options) {
  if (!(options.alpha > 0.0 && options.alpha <= 1.0)) {
    throw ContractError("codec alpha must lie in (0, 1]");
  }
  TensorRecord rec;
  rec.id = id;
  rec.shape = t.shape();
  auto make_raw = [&rec, &t] {
    rec.mode = RecordMode::raw;
    rec.payload.assign(t.values().begin(), t.values().end());
    rec.rank = 0;
    rec.left = {};
    rec.right = {};
  };
  if (options.force_raw || t.rank() < 2 || t.size() <= options.raw_threshold) {
    make_raw();
    return rec;
  }
  const std::string label = tensor_name(id);
  const RankSplit split = split_rank(t, label);
  const SvdTriple left = svd(split.left, label);
  const SvdTriple right = svd(split.right, label);
  rec.mode = RecordMode::gpd;
  rec.rank = static_cast<std::uint32_t>(split.rank);
  rec.left = left.truncated(choose_k(left.s, options.alpha));
  rec.right = right.truncated(choose_k(right.s, options.alpha));
  if (rec.scalar_count() >= t.size()) make_raw();
  return rec;
}

Tensor decode_tensor(const TensorRecord& rec) {
  if (rec.mode == RecordMode::raw) {
    if (rec.payload.size() != shape_size(rec.shape)) {
      throw ProtocolError(tensor_name(rec.id) + ": raw payload has " + std::to_string(rec.payload.size()) +
                          " values for shape " + shape_string(rec.shape));
    }
    return Tensor(rec.shape, rec.payload);
  }
  const auto [p, q] = matrix_view(rec.shape);
  const std::size_t r = rec.rank;
  if (rec.left.u.dim(0) != p || rec.left.v.dim(1) != r || rec.right.u.dim(0) != r ||
      rec.right.v.dim(1) != q) {
    throw ProtocolError(tensor_name(rec.id) + ": factor shapes do not match " + shape_string(rec.shape));
  }
  const Tensor left = rec.left.reconstruct();
  const Tensor right = rec.right.reconstruct();
  Tensor out({p, q});
  kernels::gemm_nn(p, r, q, left.data(), right.data(), out.data());
  return out.reshaped(rec.shape);
}

GpdPacket encode_model(std::span<const Tensor> params, const CodecOptions& options,
                       const PacketHeader& header) {
  GpdPacket packet;
  packet.header = header;
  packet.records.reserve(params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    packet.records.push_back(encode_tensor(static_cast<std::uint32_t>(i), params[i], options));
  }
  packet.recount();
  return packet;
}

std::vector<Tensor> decode_model(const GpdPacket& packet, std::span<const Shape> shapes) {
  const std::string sender = "packet from sender " + std::to_string(packet.header.sender);
  if (packet.records.size() != shapes.size()) {
    throw ProtocolError(sender + " carries " + std::to_string(packet.records.size()) +
                        " tensors, expected " + std::to_string(shapes.size()));
  }
  std::vector<Tensor> out;
  out.reserve(shapes.size());
  for (std::size_t i = 0; i < shapes.size(); ++i) {
    const TensorRecord& rec = packet.records[i];
    if (rec.id != i) {
      throw ProtocolError(sender + ": record " + std::to_string(i) + " has " + tensor_name(rec.id));
    }
    if (rec.shape != shapes[i]) {
      throw ProtocolError(sender + ": " + tensor_name(rec.id) + " has shape " + shape_string(rec.shape) +
                          ", expected " + shape_string(shapes[i]));
    }
    out.push_back(decode_tensor(rec));
  }
  return out;
}

PacketStats packet_stats(const GpdPacket& packet) {
  PacketStats st;
  st.bytes = kPacketHeaderBytes;
  for (const TensorRecord& r : packet.records) {
    st.transmitted += r.scalar_count();
    st.full += r.full_count();
    st.bytes += record_header_bytes(r);
  }
  st.bytes += 4 * st.transmitted;
  st.ratio = st.full ? static_cast<double>(st.transmitted) / static_cast<double>(st.full) : 1.0;
  return st;
}

std::vector<std::uint8_t> serialize(const GpdPacket& packet) {
  io::ByteWriter w;
  w.bytes(kMagic, 4);
  w.u32(packet.header.sender);
  w.u32(packet.header.round);
  w.u64(packet.header.samples);
  w.u32(static_cast<std::uint32_t>(packet.records.size()));
  auto put_all = [&w](std::span<const double> xs) {
    for (double x : xs) w.f32(x);
  };
  for (const TensorRecord& r : packet.records) {
    w.u32(r.id);
    w.u8(static_cast<std::uint8_t>(r.mode));
    w.u8(static_cast<std::uint8_t>(r.shape.size()));
    for (std::size_t d : r.shape) w.u32(static_cast<std::uint32_t>(d));
    if (r.mode == RecordMode::raw) {
      put_all(r.payload);
      continue;
    }
    w.u32(r.rank);
    w.u32(static_cast<std::uint32_t>(r.left.size()));
    put_all(r.left.u.values());
    put_all(r.left.s);
    put_all(r.left.v.values());
    w.u32(static_cast<std::uint32_t>(r.right.size()));
    put_all(r.right.u.values());
    put_all(r.right.s);
    put_all(r.right.v.values());
  }
  return std::move(w.buffer());
}

GpdPacket deserialize(std::span<const std::uint8_t> bytes) {
  io::ByteReader in(bytes, "GPD packet");
  const auto magic = in.bytes(4);
  if (!std::equal(magic.begin(), magic.end(), kMagic)) in.fail("bad magic", 0);
  GpdPacket packet;
  packet.header.sender = in.u32();
  packet.header.round = in.u32();
  packet.header.samples = in.u64();
  const std::uint32_t count = in.u32();

  auto read_values = [&in](std::size_t n) {
    in.need(4 * n);
    std::vector<double> v(n);
    for (double& x : v) x = in.f32();
    return v;
  };
  auto read_matrix = [&](std::size_t rows, std::size_t cols) {
    return Tensor({rows, cols}, read_values(rows * cols));
  };

  for (std::uint32_t i = 0; i < count; ++i) {
    const std::size_t start = in.offset();
    TensorRecord r;
    r.id = in.u32();
    const std::uint8_t mode = in.u8();
    if (mode > 1) in.fail("unknown record mode " + std::to_string(mode), start + 4);
    r.mode = static_cast<RecordMode>(mode);
    const std::uint8_t ndim = in.u8();
    for (std::uint8_t d = 0; d < ndim; ++d) {
      const std::size_t at = in.offset();
      const std::uint32_t extent = in.u32();
      if (extent == 0) in.fail("zero extent in " + tensor_name(r.id), at);
      r.shape.push_back(extent);
    }
    if (r.mode == RecordMode::raw) {
      r.payload = read_values(shape_size(r.shape));
    } else {
      if (ndim < 2) in.fail(tensor_name(r.id) + ": gpd record needs rank >= 2", start);
      const auto [p, q] = matrix_view(r.shape);
      const std::size_t at = in.offset();
      r.rank = in.u32();
      if (r.rank == 0 || r.rank > std::min(p, q)) in.fail(tensor_name(r.id) + ": bad rank", at);
      const std::size_t kp_at = in.offset();
      const std::uint32_t kp = in.u32();
      if (kp == 0 || kp > r.rank) in.fail(tensor_name(r.id) + ": bad Kp", kp_at);
      r.left.u = read_matrix(p, kp);
      r.left.s = read_values(kp);
      r.left.v = read_matrix(kp, r.rank);
      const std::size_t kn_at = in.offset();
      const std::uint32_t kn = in.u32();
      if (kn == 0 || kn > r.rank) in.fail(tensor_name(r.id) + ": bad Kn", kn_at);
      r.right.u = read_matrix(r.rank, kn);
      r.right.s = read_values(kn);
      r.right.v = read_matrix(kn, q);
    }
    packet.records.push_back(std::move(r));
  }
  if (in.remaining() != 0) in.fail("trailing bytes after last record", in.offset());
  packet.recount();
  return packet;
}

void write_packet(const std::filesystem::path& path, const GpdPacket& packet) {
  io::write_file(path, serialize(packet));
}

GpdPacket read_packet(const std::filesystem::path& path) { return deserialize(io::read_file(path)); }

}  // namespace fedsim
