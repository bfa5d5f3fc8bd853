#include "doctest.h"
#include "test_util.hpp"

#include "onrep/compression.hpp"

#include <cmath>
#include <random>

using namespace onrep;
using namespace onrep::test;

namespace {

ModelConfig tiny_config() {
  ModelConfig cfg;
  cfg.frames = 4;
  cfg.height = 16;
  cfg.width = 16;
  cfg.factors = {2, 2};
  cfg.c0 = 8;
  cfg.channel_floor = 4;
  cfg.mlp_hidden = 16;
  cfg.pe_levels = 8;
  return cfg;
}

/// Cheapest total weighted length over every length vector obeying Kraft's inequality.
std::uint64_t brute_force_optimum(const std::vector<std::uint64_t>& freq) {
  const std::size_t n = freq.size();
  const int max_len = static_cast<int>(n);
  std::vector<int> len(n, 1);
  std::uint64_t best = UINT64_MAX;
  while (true) {
    double kraft = 0;
    std::uint64_t cost = 0;
    for (std::size_t i = 0; i < n; ++i) {
      kraft += std::ldexp(1.0, -len[i]);
      cost += freq[i] * len[i];
    }
    if (kraft <= 1.0) best = std::min(best, cost);
    std::size_t i = 0;
    while (i < n && len[i] == max_len) len[i++] = 1;
    if (i == n) break;
    ++len[i];
  }
  return best;
}

}  // namespace

TEST_CASE("prune zeroes the two smallest magnitudes") {
  TensorF w({4, 1, 1, 1});
  w[0] = 0.1f;
  w[1] = -0.2f;
  w[2] = 0.3f;
  w[3] = -0.05f;
  std::vector<TensorF*> ps = {&w};
  const ParamMask mask = prune(ps, {true}, 0.5);
  CHECK(w[0] == 0.0f);
  CHECK(w[1] == -0.2f);
  CHECK(w[2] == 0.3f);
  CHECK(w[3] == 0.0f);
  CHECK(mask[0][0] == 0.0f);
  CHECK(mask[0][1] == 1.0f);
  CHECK(mask[0][3] == 0.0f);
}

TEST_CASE("prune with sparsity zero is the identity") {
  std::mt19937_64 rng(3);
  TensorF a = random_tensor<float>({3, 2, 3, 3}, rng, -1, 1);
  const TensorF before = a;
  std::vector<TensorF*> ps = {&a};
  const ParamMask mask = prune(ps, {true}, 0.0);
  CHECK(a.data() == before.data());
  CHECK(mask[0].data().minCoeff() == 1.0f);
  CHECK_THROWS(prune(ps, {true}, 1.0));
  CHECK_THROWS(prune(ps, {true}, -0.1));
}

TEST_CASE("prune agrees with a rank-counting oracle, ties included") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<TensorF> tensors;
    std::vector<bool> flags;
    const int count = 2 + rand_int(rng, 0, 3);
    for (int t = 0; t < count; ++t) {
      TensorF v({rand_int(rng, 1, 40), 1, 1, 1});
      // coarse values force many magnitude ties
      for (Index i = 0; i < v.size(); ++i) v[i] = static_cast<float>(rand_int(rng, -6, 6)) / 4.0f;
      tensors.push_back(v);
      flags.push_back(rand_int(rng, 0, 3) != 0);
    }
    const std::vector<TensorF> original = tensors;
    std::vector<TensorF*> ps;
    for (auto& t : tensors) ps.push_back(&t);
    const double sparsity = std::uniform_real_distribution<double>(0, 0.95)(rng);
    const ParamMask mask = prune(ps, flags, sparsity);

    struct E {
      float m;
      std::size_t t;
      Index i;
    };
    std::vector<E> all;
    for (std::size_t t = 0; t < original.size(); ++t)
      if (flags[t])
        for (Index i = 0; i < original[t].size(); ++i) all.push_back({std::abs(original[t][i]), t, i});
    const auto k = static_cast<std::size_t>(std::floor(sparsity * all.size() + 1e-9));
    std::size_t pruned = 0;
    for (const E& e : all) {
      std::size_t rank = 0;
      for (const E& o : all)
        if (o.m < e.m || (o.m == e.m && (o.t < e.t || (o.t == e.t && o.i < e.i)))) ++rank;
      const bool expect_pruned = rank < k;
      CHECK((mask[e.t][e.i] == 0.0f) == expect_pruned);
      CHECK(tensors[e.t][e.i] == (expect_pruned ? 0.0f : original[e.t][e.i]));
      pruned += expect_pruned;
    }
    CHECK(pruned == k);
    for (std::size_t t = 0; t < original.size(); ++t)
      if (!flags[t]) CHECK(tensors[t].data() == original[t].data());
  }
}

TEST_CASE("prune on a model exempts biases and needs deploy form") {
  Model branched = Model::create(tiny_config(), 1);
  CHECK_THROWS(prune(branched, 0.1));
  Model m = branched.structural_fuse();
  const ParamMask mask = prune(m, 0.3);
  const auto info = m.parameter_info();
  Index prunable = 0, zeros = 0;
  for (std::size_t t = 0; t < info.size(); ++t) {
    if (info[t].is_bias) {
      CHECK(mask[t].data().minCoeff() == 1.0f);
    } else {
      prunable += mask[t].size();
      zeros += (mask[t].data().array() == 0.0f).count();
    }
  }
  CHECK(zeros == static_cast<Index>(std::floor(0.3 * prunable + 1e-9)));
}

TEST_CASE("quantize literal examples") {
  const std::vector<float> unit = {0.0f, 0.25f, 1.0f};
  const Quantized q = quantize(unit, 8);
  CHECK(q.q[0] == 0);
  CHECK(q.q[2] == 255);
  CHECK(q.q[1] == 64);
  CHECK(dequantize(0, q.min, q.scale) == q.min);

  const std::vector<float> flat(7, 0.375f);
  const Quantized c = quantize(flat, 4);
  CHECK(c.scale == 0.0f);
  for (auto v : c.q) CHECK(v == 0);
  for (float v : dequantize(c)) CHECK(v == 0.375f);

  CHECK_THROWS(quantize(unit, 1));
  CHECK_THROWS(quantize(unit, 17));
}

TEST_CASE("quantization error stays within half a step and codes are idempotent") {
  std::mt19937_64 rng(5);
  for (int bits = 2; bits <= 16; ++bits) {
    for (int trial = 0; trial < 5; ++trial) {
      const TensorF x = random_tensor<float>({rand_int(rng, 1, 300), 1, 1, 1}, rng, -1, 1);
      const std::vector<float> v(x.data().begin(), x.data().end());
      const Quantized q = quantize(v, bits);
      const std::vector<float> back = dequantize(q);
      for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::abs(back[i] - v[i]) <= q.scale / 2 + 1e-7);
      const Index top = (Index{1} << bits) - 1;
      for (auto code : q.q) CHECK(static_cast<Index>(code) <= top);
      if (v.size() > 1) CHECK(std::abs(dequantize(static_cast<std::uint32_t>(top), q.min, q.scale) - x.data().maxCoeff()) <= 1e-6);
      CHECK(quantize(back, bits).q == q.q);
    }
  }
}

TEST_CASE("huffman lengths for a, a, b, c") {
  const std::map<std::uint32_t, std::uint64_t> freq = {{7, 2}, {8, 1}, {9, 1}};
  const auto lengths = HuffmanCode::code_lengths(freq);
  CHECK(lengths.at(7) == 1);
  CHECK(lengths.at(8) == 2);
  CHECK(lengths.at(9) == 2);
  const HuffmanCode code = HuffmanCode::from_lengths(lengths);
  const std::vector<std::uint32_t> s = {7, 7, 8, 9};
  std::vector<std::uint8_t> bytes;
  std::uint64_t bits = 0;
  code.encode(s, bytes, bits);
  CHECK(bits == 6);
  CHECK(code.decode(bytes, bits, s.size()) == s);
}

TEST_CASE("huffman is optimal against exhaustive length search") {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 60; ++trial) {
    const int n = rand_int(rng, 2, 6);
    std::map<std::uint32_t, std::uint64_t> freq;
    std::vector<std::uint64_t> f;
    for (int i = 0; i < n; ++i) {
      f.push_back(static_cast<std::uint64_t>(rand_int(rng, 1, 30)));
      freq[static_cast<std::uint32_t>(i * 3)] = f.back();
    }
    const auto lengths = HuffmanCode::code_lengths(freq);
    std::uint64_t cost = 0;
    for (const auto& [sym, c] : freq) cost += c * lengths.at(sym);
    CHECK(cost == brute_force_optimum(f));
  }
}

TEST_CASE("single-symbol alphabets use one bit per symbol") {
  const std::vector<std::vector<std::uint32_t>> streams = {{4, 4, 4}, {4}};
  const EntropyCoded coded = entropy_encode(streams);
  CHECK(coded.payload_bits == 4);
  CHECK(entropy_decode(coded, {3, 1}) == streams);
}

TEST_CASE("uniform symbols cost about b bits each") {
  std::vector<std::uint32_t> s;
  for (int rep = 0; rep < 4; ++rep)
    for (std::uint32_t v = 0; v < 64; ++v) s.push_back(v);
  const EntropyCoded coded = entropy_encode({s});
  CHECK(coded.payload_bits == 6 * s.size());
}

TEST_CASE("entropy round trip on 1000 random quantized tensors") {
  std::mt19937_64 rng(21);
  std::vector<std::vector<std::uint32_t>> streams;
  std::vector<std::size_t> lengths;
  std::uint64_t naive_bits = 0;
  const int bits = 6;
  for (int t = 0; t < 1000; ++t) {
    const TensorF x = random_tensor<float>({rand_int(rng, 0, 50), 1, 1, 1}, rng, -2, 2);
    const Quantized q = quantize(std::vector<float>(x.data().begin(), x.data().end()), bits);
    streams.push_back(q.q);
    lengths.push_back(q.q.size());
    naive_bits += bits * q.q.size();
  }
  const EntropyCoded coded = entropy_encode(streams);
  CHECK(entropy_decode(coded, lengths) == streams);
  CHECK(coded.payload_bits <= naive_bits + 3 * 8 * coded.table.size());
}

TEST_CASE("compressed model round trip and size accounting") {
  Model m = Model::create(tiny_config(), 4).structural_fuse();
  const std::vector<TensorF> original = [&] {
    std::vector<TensorF> v;
    for (const TensorF* t : m.parameters()) v.push_back(*t);
    return v;
  }();
  const ParamMask mask = prune(m, 0.2);
  for (int bits : {2, 8, 16}) {
    const CompressedModel c = compress(m, mask, bits);
    const SizeReport& s = c.sizes;
    CHECK(s.total_bits == 8 * c.bytes.size());
    CHECK(s.total_bits == s.header_bits + s.manifest_bits + s.mask_bits + s.table_bits + s.payload_bits);
    SizeReport again;
    const Model d = decompress(c.bytes, &again);
    CHECK(again.total_bits == s.total_bits);
    const auto params = d.parameters();
    REQUIRE(params.size() == original.size());
    for (std::size_t t = 0; t < params.size(); ++t) {
      CHECK(params[t]->data() == c.decoded[t].data());
      std::vector<float> kept;
      for (Index i = 0; i < original[t].size(); ++i)
        if (mask[t][i] != 0.0f) kept.push_back(original[t][i]);
      const Quantized q = quantize(kept, bits);
      std::size_t at = 0;
      for (Index i = 0; i < original[t].size(); ++i) {
        if (mask[t][i] == 0.0f) {
          CHECK((*params[t])[i] == 0.0f);
        } else {
          CHECK((*params[t])[i] == dequantize(q.q[at++], q.min, q.scale));
          CHECK(std::abs((*params[t])[i] - original[t][i]) <= q.scale / 2 + 1e-6);
        }
      }
    }
    CHECK(d.decode({0, 3}).data() == m.with_parameters(c.decoded).decode({0, 3}).data());
  }
  std::vector<char> bad = compress(m, mask, 8).bytes;
  bad[0] = 'X';
  CHECK_THROWS(decompress(bad));
  bad = compress(m, mask, 8).bytes;
  bad.pop_back();
  CHECK_THROWS(decompress(bad));
}

TEST_CASE("compress needs a deploy-form model") {
  const Model branched = Model::create(tiny_config(), 4);
  CHECK_THROWS(compress(branched, full_mask(branched), 8));
}

TEST_CASE("bpp examples") {
  CHECK(bpp(1e6, 10, 100, 100) == doctest::Approx(10.0));
  CHECK(bpp(1e6, 20, 100, 100) == doctest::Approx(5.0));
  CHECK_THROWS(bpp(1e6, 0, 100, 100));
}

TEST_CASE("masked fine-tuning keeps pruned entries at zero") {
  const ModelConfig cfg = tiny_config();
  Model m = Model::create(cfg, 2).structural_fuse();
  const Video video = synth_video(SynthKind::MovingGradient, cfg.frames, cfg.height, cfg.width, 1);
  const ParamMask mask = prune(m, 0.4);
  TrainConfig tc;
  tc.budget = Budget::steps(6);
  tc.log_epochs = false;
  train(m, video, tc, &mask);
  const auto params = m.parameters();
  for (std::size_t t = 0; t < params.size(); ++t)
    for (Index i = 0; i < params[t]->size(); ++i)
      if (mask[t][i] == 0.0f) CHECK((*params[t])[i] == 0.0f);

  const PipelineResult r = compress_pipeline(m, video, 0.1, 8, 0, tc);
  CHECK(r.point.bpp == doctest::Approx(static_cast<double>(r.compressed.sizes.total_bits) / (4 * 16 * 16)));
  CHECK(std::isfinite(r.point.psnr));
  CHECK(rd_sweep(m, video, {}, {8}, 0, tc).empty());
  CHECK(rd_sweep(m, video, {0.1}, {}, 0, tc).empty());
  CHECK(rd_csv({}).rfind("sparsity,bits", 0) == 0);
}
