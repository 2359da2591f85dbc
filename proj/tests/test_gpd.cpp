// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "fedsim/errors.hpp"
#include "fedsim/gpd.hpp"
#include "fedsim/models.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

Tensor rank_r(std::size_t p, std::size_t q, std::size_t r, std::mt19937_64& rng) {
  return oracle::naive_matmul(oracle::random_tensor({p, r}, rng), oracle::random_tensor({r, q}, rng));
}

// Singular values by the independent eigen-oracle on the smaller Gram matrix.
std::vector<double> spectrum(const Tensor& a) {
  const bool tall = a.dim(0) >= a.dim(1);
  const Tensor gram = tall ? oracle::naive_matmul(oracle::naive_transpose(a), a)
                           : oracle::naive_matmul(a, oracle::naive_transpose(a));
  std::vector<double> ev = oracle::symmetric_eigenvalues(gram);
  for (double& e : ev) e = std::sqrt(std::max(e, 0.0));
  return ev;
}

}  // namespace

TEST_CASE("rank rule") {
  CHECK(split_rank_for(256, 128) == 2);
  CHECK(split_rank_for(256, 10) == 10);
  CHECK(split_rank_for(3072, 512) == 6);
  CHECK(split_rank_for(512, 3072) == 6);
  CHECK(split_rank_for(784, 512) == 1);
  CHECK(split_rank_for(8, 8) == 1);
}

TEST_CASE("split_rank is exact for matrices of rank <= r") {
  std::mt19937_64 rng(1);
  const Tensor g = rank_r(8, 8, 1, rng);
  const RankSplit s = split_rank(g);
  CHECK(s.rank == 1);
  CHECK(oracle::frobenius(oracle::difference(g, oracle::naive_matmul(s.left, s.right))) < 1e-9);
  const Tensor h = rank_r(40, 12, 3, rng);  // r = 3
  const RankSplit t = split_rank(h);
  CHECK(oracle::frobenius(oracle::difference(h, oracle::naive_matmul(t.left, t.right))) < 1e-9);
}

TEST_CASE("split_rank is the best rank-r approximation") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    std::uniform_int_distribution<std::size_t> dim(2, 24);
    const std::size_t p = dim(rng), q = dim(rng);
    const Tensor g = oracle::random_tensor({p, q}, rng);
    const RankSplit s = split_rank(g);
    const double err = oracle::frobenius(oracle::difference(g, oracle::naive_matmul(s.left, s.right)));
    // Eckart-Young value from the oracle spectrum.
    const std::vector<double> sv = spectrum(g);
    double tail = 0.0;
    for (std::size_t i = s.rank; i < sv.size(); ++i) tail += sv[i] * sv[i];
    CHECK(std::abs(err - std::sqrt(tail)) < 1e-9);
    for (int k = 0; k < 5; ++k) {
      const Tensor other = rank_r(p, q, s.rank, rng);
      CHECK(err <= oracle::frobenius(oracle::difference(g, other)) + 1e-9);
    }
  }
}

TEST_CASE("choose_k") {
  const std::vector<double> flat{1, 1, 1, 1};
  CHECK(choose_k(flat, 0.98) == 4);
  CHECK(choose_k(flat, 0.5) == 3);  // 2/4 is not > 0.5
  const std::vector<double> steep{10, 1e-6};
  CHECK(choose_k(steep, 0.98) == 1);
  const std::vector<double> zero{0, 0, 0};
  CHECK(choose_k(zero, 0.98) == 1);
  const std::vector<double> some{3, 2, 1, 0, 0};
  CHECK(choose_k(some, 1.0 - 1e-15) == 3);
  CHECK(choose_k(some, 1.0) == 3);

  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<double> s(1 + trial % 12);
    for (double& v : s) v = u(rng) * u(rng);
    std::sort(s.begin(), s.end(), std::greater<>());
    const double alpha = std::clamp(u(rng), 0.05, 0.999);
    const std::size_t k = choose_k(s, alpha);
    double total = 0.0, prefix = 0.0, before = 0.0;
    for (double v : s) total += v * v;
    for (std::size_t i = 0; i < k; ++i) prefix += s[i] * s[i];
    for (std::size_t i = 0; i + 1 < k; ++i) before += s[i] * s[i];
    CHECK(prefix / total > alpha);
    if (k > 1) CHECK_FALSE(before / total > alpha);
  }
}

TEST_CASE("encode_tensor modes and counts") {
  std::mt19937_64 rng(4);
  CodecOptions opt;

  const Tensor bias = oracle::random_tensor({5000}, rng);
  CHECK(encode_tensor(0, bias, opt).mode == RecordMode::raw);

  const Tensor small = oracle::random_tensor({64, 64}, rng);  // 4096 = threshold
  CHECK(encode_tensor(0, small, opt).mode == RecordMode::raw);

  // Head 256 x 10: r = 10, best case count exceeds raw.
  const Tensor head = oracle::random_tensor({256, 10}, rng);
  CodecOptions low = opt;
  low.raw_threshold = 100;
  const TensorRecord hr = encode_tensor(0, head, low);
  CHECK(hr.mode == RecordMode::raw);
  CHECK(oracle::gpd_count(256, 10, 10, 10, 10) == 2880);

  // Zero matrix: one zero triple per factor, decodes to zero.
  const TensorRecord zr = encode_tensor(0, Tensor({300, 40}), opt);
  REQUIRE(zr.mode == RecordMode::gpd);
  CHECK(zr.left.size() == 1);
  CHECK(zr.right.size() == 1);
  const Tensor zd = decode_tensor(zr);
  for (double v : zd.values()) CHECK(v == 0.0);

  const Tensor big = oracle::random_tensor({600, 40}, rng);
  const TensorRecord br = encode_tensor(3, big, opt);
  REQUIRE(br.mode == RecordMode::gpd);
  CHECK(br.rank == 15);
  CHECK(br.scalar_count() == oracle::gpd_count(600, 40, 15, br.left.size(), br.right.size()));
  CHECK(br.scalar_count() < big.size());

  // The first stage already diagonalizes g_p's columns, so its second-stage
  // spectrum equals the leading singular values of g.
  const std::vector<double> sv = spectrum(big);
  const SvdTriple gp = svd(split_rank(big).left);
  for (std::size_t i = 0; i < 15; ++i) CHECK(std::abs(gp.s[i] - std::sqrt(sv[i])) < 1e-9 * std::sqrt(sv[0]));
}

TEST_CASE("conv kernels are viewed as F x C*kh*kw") {
  std::mt19937_64 rng(5);
  const Tensor k = oracle::random_tensor({64, 64, 3, 3}, rng);
  CHECK(matrix_view(k.shape()) == std::pair<std::size_t, std::size_t>{64, 576});
  const TensorRecord r = encode_tensor(0, k, CodecOptions{});
  REQUIRE(r.mode == RecordMode::gpd);
  CHECK(r.rank == 9);
  CHECK(decode_tensor(r).shape() == k.shape());
  // Few filters over many inputs: r = min(P, Q), nothing to gain, sent raw.
  const Tensor wide = oracle::random_tensor({8, 64, 3, 3}, rng);
  CHECK(encode_tensor(0, wide, CodecOptions{}).mode == RecordMode::raw);
}

TEST_CASE("never-inflate on every tensor of the default model") {
  ModelConfig c;
  c.classes = 8;
  ClientModels m = init_models(c, 1);
  const GpdPacket p = encode_model(m.student.params, CodecOptions{}, {});
  CHECK(p.transmitted <= p.full);
  for (const TensorRecord& r : p.records) CHECK(r.scalar_count() <= r.full_count());
}

TEST_CASE("lossless and exact decode paths") {
  std::mt19937_64 rng(6);
  const std::vector<Tensor> params{oracle::random_tensor({100, 60}, rng), oracle::random_tensor({60}, rng)};
  const std::vector<Shape> shapes{{100, 60}, {60}};
  CodecOptions raw;
  raw.alpha = 1.0;
  raw.force_raw = true;
  CHECK(decode_model(encode_model(params, raw, {}), shapes) == params);

  CodecOptions huge;
  huge.raw_threshold = 1u << 30;
  CHECK(decode_model(encode_model(params, huge, {}), shapes) == params);

  // True rank <= r: alpha = 1 reconstructs up to rounding.
  const Tensor low = rank_r(120, 40, 2, rng);  // r = 3
  CodecOptions full;
  full.alpha = 1.0;
  const TensorRecord rec = encode_tensor(0, low, full);
  REQUIRE(rec.mode == RecordMode::gpd);
  CHECK(oracle::frobenius(oracle::difference(low, decode_tensor(rec))) < 1e-8);
}

TEST_CASE("staged error bound and monotonicity in alpha") {
  std::mt19937_64 rng(7);
  for (int trial = 0; trial < 10; ++trial) {
    // Slowly decaying spectrum so truncation is active at every alpha.
    Tensor g({180, 30});
    for (std::size_t r = 0; r < 10; ++r) {
      const Tensor uv = rank_r(180, 30, 1, rng);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += std::pow(0.8, static_cast<double>(r)) * uv[i];
    }
    const Tensor noise = oracle::random_tensor({180, 30}, rng, -0.01, 0.01);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += noise[i];

    const std::vector<double> sv = spectrum(g);
    double prev = INFINITY;
    for (double alpha : {0.5, 0.9, 0.98, 1.0}) {
      CodecOptions opt;
      opt.alpha = alpha;
      const TensorRecord rec = encode_tensor(0, g, opt);
      REQUIRE(rec.mode == RecordMode::gpd);
      const double err = oracle::frobenius(oracle::difference(g, decode_tensor(rec)));
      const std::size_t r = rec.rank, kept = std::min(rec.left.size(), rec.right.size());
      double stage1 = 0.0, stage2 = 0.0;
      for (std::size_t i = r; i < sv.size(); ++i) stage1 += sv[i] * sv[i];
      for (std::size_t i = kept; i < r; ++i) stage2 += sv[i] * sv[i];
      CHECK(err <= std::sqrt(stage1) + std::sqrt(stage2) + 1e-8);
      CHECK(err <= prev + 1e-12);
      prev = err;
    }
  }
}

TEST_CASE("packet stats") {
  const GpdPacket empty = encode_model({}, CodecOptions{}, {});
  const PacketStats es = packet_stats(empty);
  CHECK(es.transmitted == 0);
  CHECK(es.full == 0);
  CHECK(es.ratio == 1.0);
  CHECK(es.bytes == serialize(empty).size());

  std::mt19937_64 rng(8);
  const std::vector<Tensor> params{oracle::random_tensor({10, 3}, rng), oracle::random_tensor({3}, rng)};
  CodecOptions raw;
  raw.force_raw = true;
  const GpdPacket rp = encode_model(params, raw, {});
  CHECK(packet_stats(rp).ratio == 1.0);
  CHECK(packet_stats(rp).bytes == serialize(rp).size());

  ModelConfig c;
  c.classes = 8;
  const ClientModels m = init_models(c, 2);
  const GpdPacket p = encode_model(m.student.params, CodecOptions{}, {1, 2, 3});
  const PacketStats st = packet_stats(p);
  std::size_t transmitted = 0, full = 0;
  for (const TensorRecord& r : p.records) {
    full += shape_size(r.shape);
    if (r.mode == RecordMode::raw) {
      transmitted += shape_size(r.shape);
    } else {
      const auto [rows, cols] = matrix_view(r.shape);
      transmitted += oracle::gpd_count(rows, cols, r.rank, r.left.size(), r.right.size());
    }
  }
  CHECK(st.transmitted == transmitted);
  CHECK(st.full == full);
  CHECK(st.ratio == static_cast<double>(transmitted) / static_cast<double>(full));
  CHECK(st.ratio < 0.15);
  CHECK(st.bytes == serialize(p).size());
}

TEST_CASE("wire format") {
  std::mt19937_64 rng(9);
  const std::vector<Tensor> params{oracle::random_tensor({300, 40}, rng), oracle::random_tensor({40}, rng)};
  const GpdPacket p = encode_model(params, CodecOptions{}, {7, 3, 123});
  const std::vector<std::uint8_t> bytes = serialize(p);
  CHECK(bytes == serialize(p));
  REQUIRE(bytes.size() > 24);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "GPD1");
  CHECK(bytes[4] == 7);
  CHECK(bytes[8] == 3);
  CHECK(bytes[12] == 123);
  CHECK(bytes[20] == 2);

  const GpdPacket back = deserialize(bytes);
  CHECK(back.header.sender == 7);
  CHECK(back.header.samples == 123);
  CHECK(back.transmitted == p.transmitted);
  CHECK(serialize(back) == bytes);
  const std::vector<Shape> shapes{{300, 40}, {40}};
  const auto a = decode_model(p, shapes), b = decode_model(back, shapes);
  CHECK(max_abs_diff(a[0], b[0]) < 1e-5);

  for (std::size_t cut : {std::size_t{0}, std::size_t{3}, std::size_t{23}, bytes.size() / 2, bytes.size() - 1}) {
    const std::vector<std::uint8_t> truncated(bytes.begin(), bytes.begin() + static_cast<long>(cut));
    CHECK_THROWS_AS(deserialize(truncated), FormatError);
  }
  std::vector<std::uint8_t> bad = bytes;
  bad[0] = 'X';
  try {
    deserialize(bad);
    FAIL("expected a format error");
  } catch (const FormatError& e) {
    CHECK(e.offset() == 0);
  }
  std::vector<std::uint8_t> trailing = bytes;
  trailing.push_back(0);
  CHECK_THROWS_AS(deserialize(trailing), FormatError);
}

TEST_CASE("decode_model rejects mismatched layouts") {
  std::mt19937_64 rng(10);
  const std::vector<Tensor> params{oracle::random_tensor({10, 3}, rng)};
  const GpdPacket p = encode_model(params, CodecOptions{}, {4, 0, 1});
  const std::vector<Shape> wrong{{3, 10}};
  try {
    decode_model(p, wrong);
    FAIL("expected a protocol error");
  } catch (const ProtocolError& e) {
    CHECK(std::string(e.what()).find("tensor 0") != std::string::npos);
    CHECK(std::string(e.what()).find("sender 4") != std::string::npos);
  }
  const std::vector<Shape> more{{10, 3}, {3}};
  CHECK_THROWS_AS(decode_model(p, more), ProtocolError);
}

TEST_CASE("codec determinism") {
  std::mt19937_64 rng(11);
  const std::vector<Tensor> params{oracle::random_tensor({500, 20}, rng)};
  CHECK(serialize(encode_model(params, CodecOptions{}, {})) == serialize(encode_model(params, CodecOptions{}, {})));
}
