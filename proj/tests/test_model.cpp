// SPDX-License-Identifier: Apache-2.0

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <fstream>
#include <random>

#include "oracles.hpp"
#include "ssmlens/checkpoint.hpp"
#include "ssmlens/model.hpp"

using namespace ssmlens;

namespace {

ModelConfig tiny_config() {
  ModelConfig c = ModelConfig::with_dims(/*d_model=*/16, /*n_layers=*/3, /*d_state=*/4,
                                         /*d_conv=*/4, /*vocab_size=*/24, /*max_seq_len=*/16);
  return c;
}

std::vector<int> tiny_tokens() { return {3, 11, 7, 0, 19, 5}; }

bool bitwise_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (size_t i = 0; i < a.numel(); ++i) {
    if (a[i] != b[i]) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("init is deterministic and decay is strictly negative") {
  auto m1 = init_params(tiny_config(), 42);
  auto m2 = init_params(tiny_config(), 42);
  for (size_t k = 0; k < m1.blocks.size(); ++k) {
    CHECK(bitwise_equal(m1.blocks[k].w_a, m2.blocks[k].w_a));
    CHECK(bitwise_equal(m1.blocks[k].dt_bias, m2.blocks[k].dt_bias));
  }
  CHECK(bitwise_equal(m1.embedding, m2.embedding));

  for (const auto& b : m1.blocks) {
    for (size_t i = 0; i < b.a_log.numel(); ++i) CHECK(-std::exp(b.a_log[i]) < 0.f);
  }
}

TEST_CASE("different seeds give different random parameters") {
  auto m1 = init_params(tiny_config(), 1);
  auto m2 = init_params(tiny_config(), 2);
  size_t total = 0, differ = 0;
  auto count = [&](const Tensor& a, const Tensor& b) {
    for (size_t i = 0; i < a.numel(); ++i) {
      ++total;
      if (a[i] != b[i]) ++differ;
    }
  };
  count(m1.embedding, m2.embedding);
  for (size_t k = 0; k < m1.blocks.size(); ++k) {
    count(m1.blocks[k].w_a, m2.blocks[k].w_a);
    count(m1.blocks[k].w_g, m2.blocks[k].w_g);
    count(m1.blocks[k].w_o, m2.blocks[k].w_o);
    count(m1.blocks[k].conv_w, m2.blocks[k].conv_w);
    count(m1.blocks[k].w_b, m2.blocks[k].w_b);
    count(m1.blocks[k].w_c, m2.blocks[k].w_c);
    count(m1.blocks[k].w_dt1, m2.blocks[k].w_dt1);
    count(m1.blocks[k].w_dt2, m2.blocks[k].w_dt2);
    count(m1.blocks[k].dt_bias, m2.blocks[k].dt_bias);
    // a_log, d_skip and the norm gains are seed-independent constants
    CHECK(bitwise_equal(m1.blocks[k].a_log, m2.blocks[k].a_log));
    CHECK(bitwise_equal(m1.blocks[k].d_skip, m2.blocks[k].d_skip));
  }
  CHECK(double(differ) / double(total) >= 0.99);
}

TEST_CASE("selective_ssm with step size forced to ~0 reduces to the skip path") {
  auto m = init_params(tiny_config(), 7);
  BlockParams blk = m.blocks[0];
  for (auto& v : blk.w_dt1.vec()) v = 0.f;
  for (auto& v : blk.w_dt2.vec()) v = 0.f;
  for (auto& v : blk.dt_bias.vec()) v = -40.f;  // softplus(-40) ~ 4e-18

  std::mt19937_64 gen(5);
  Tensor c({6, tiny_config().d_inner()});
  oracles::fill_uniform(c, gen);
  auto s = selective_ssm(c, blk);
  for (int t = 0; t < 6; ++t)
    for (int e = 0; e < c.dim(1); ++e)
      CHECK(s(t, e) == doctest::Approx(blk.d_skip[e] * c(t, e)).epsilon(1e-6));
}

TEST_CASE("selective_ssm single token has no history term") {
  auto m = init_params(tiny_config(), 9);
  const BlockParams& blk = m.blocks[1];
  std::mt19937_64 gen(6);
  Tensor c({1, tiny_config().d_inner()});
  oracles::fill_uniform(c, gen);
  auto s = selective_ssm(c, blk);
  auto ref = oracles::naive_selective_ssm(c, blk);
  for (int e = 0; e < c.dim(1); ++e) CHECK(s(0, e) == doctest::Approx(ref(0, e)).epsilon(1e-5));
}

TEST_CASE("selective_ssm matches the 64-bit unrolled oracle") {
  auto m = init_params(tiny_config(), 11);
  const BlockParams& blk = m.blocks[2];
  std::mt19937_64 gen(8);
  Tensor c({8, tiny_config().d_inner()});
  oracles::fill_uniform(c, gen);
  auto s = selective_ssm(c, blk);
  auto ref = oracles::naive_selective_ssm(c, blk);
  for (size_t i = 0; i < s.numel(); ++i) {
    CHECK(double(s[i]) == doctest::Approx(ref[i]).epsilon(1e-5));
  }
}

TEST_CASE("block_forward on zero input zeroes the gated output") {
  auto m = init_params(tiny_config(), 13);
  Tensor x({4, tiny_config().d_model});
  auto out = block_forward(x, m.blocks[0]);
  for (size_t i = 0; i < out.a.numel(); ++i) CHECK(out.a[i] == 0.f);
  for (size_t i = 0; i < out.g.numel(); ++i) CHECK(out.g[i] == 0.f);
  for (size_t i = 0; i < out.o.numel(); ++i) CHECK(out.o[i] == 0.f);
}

TEST_CASE("gate forced to ones turns the output into W_o s") {
  auto m = init_params(tiny_config(), 15);
  const auto tokens = tiny_tokens();
  const int layer = 2;
  Intervention force_g = Intervention::replace_at(
      StateKind::g, layer, 0, Tensor::full({tiny_config().d_inner()}, 1.f));
  std::vector<Intervention> ivs;
  for (size_t t = 0; t < tokens.size(); ++t) {
    force_g.token = static_cast<int>(t);
    ivs.push_back(force_g);
  }
  auto run = forward(m, tokens, ivs);
  const Tensor& s = run.cache.state(StateKind::s, layer);
  const Tensor& o = run.cache.state(StateKind::o, layer);
  Tensor expect = ops::matmul_nt(s, m.blocks[layer - 1].w_o);
  for (size_t i = 0; i < o.numel(); ++i)
    CHECK(o[i] == doctest::Approx(expect[i]).epsilon(1e-6));
}

TEST_CASE("cached internals recompose: o = W_o(s*g), h = h_prev + o") {
  auto m = init_params(tiny_config(), 17);
  const auto tokens = tiny_tokens();
  auto run = forward(m, tokens);
  for (int l = 1; l <= m.config.n_layers; ++l) {
    const Tensor& s = run.cache.state(StateKind::s, l);
    const Tensor& g = run.cache.state(StateKind::g, l);
    const Tensor& o = run.cache.state(StateKind::o, l);
    Tensor expect = ops::matmul_nt(ops::mul(s, g), m.blocks[l - 1].w_o);
    for (size_t i = 0; i < o.numel(); ++i)
      CHECK(std::abs(o[i] - expect[i]) <= 1e-5f);

    const Tensor& h_prev = l == 1 ? run.cache.h0 : run.cache.state(StateKind::h, l - 1);
    const Tensor& h = run.cache.state(StateKind::h, l);
    for (size_t i = 0; i < h.numel(); ++i) CHECK(h[i] == h_prev[i] + o[i]);
  }
}

TEST_CASE("forward is deterministic and causal") {
  auto m = init_params(tiny_config(), 19);
  auto tokens = tiny_tokens();
  auto r1 = forward(m, tokens);
  auto r2 = forward(m, tokens);
  CHECK(bitwise_equal(r1.logits, r2.logits));

  // changing a future token leaves earlier logits bitwise unchanged
  auto mutated = tokens;
  mutated[4] = (mutated[4] + 9) % m.config.vocab_size;
  auto r3 = forward(m, mutated);
  for (int t = 0; t < 4; ++t)
    for (int v = 0; v < m.config.vocab_size; ++v) CHECK(r1.logits(t, v) == r3.logits(t, v));
}

TEST_CASE("tied head: logits equal rmsnorm(h_L) E^T recomputed from cache") {
  auto m = init_params(tiny_config(), 21);
  auto run = forward(m, tiny_tokens());
  const Tensor& h_last = run.cache.state(StateKind::h, m.config.n_layers);
  Tensor logits = ops::matmul_nt(ops::rmsnorm_rows(h_last, m.final_norm_gain), m.embedding);
  CHECK(bitwise_equal(run.logits, logits));
}

TEST_CASE("replacing final h at the last token with its clean value is exact") {
  auto m = init_params(tiny_config(), 23);
  const auto tokens = tiny_tokens();
  auto clean = forward(m, tokens);
  const int last = static_cast<int>(tokens.size()) - 1;
  const int top = m.config.n_layers;

  auto mutated = tokens;
  mutated[1] = (mutated[1] + 3) % m.config.vocab_size;
  std::vector<Intervention> ivs{Intervention::replace_at(
      StateKind::h, top, last, clean.cache.state_row(StateKind::h, top, last))};
  auto patched = forward(m, mutated, ivs);
  for (int v = 0; v < m.config.vocab_size; ++v)
    CHECK(patched.logits(last, v) == clean.logits(last, v));
}

TEST_CASE("self-patching any state is a bitwise no-op") {
  auto m = init_params(tiny_config(), 25);
  const auto tokens = tiny_tokens();
  auto clean = forward(m, tokens);
  for (StateKind k : {StateKind::h, StateKind::a, StateKind::c, StateKind::s, StateKind::g,
                      StateKind::o}) {
    std::vector<Intervention> ivs{Intervention::replace_at(
        k, 2, 3, clean.cache.state_row(k, 2, 3))};
    auto patched = forward(m, tokens, ivs);
    CHECK(bitwise_equal(patched.logits, clean.logits));
    for (int l = 1; l <= m.config.n_layers; ++l) {
      CHECK(bitwise_equal(patched.cache.state(StateKind::h, l),
                          clean.cache.state(StateKind::h, l)));
    }
  }
}

TEST_CASE("interventions layer on the same site in list order, later replace wins") {
  auto m = init_params(tiny_config(), 27);
  const auto tokens = tiny_tokens();
  Tensor v1 = Tensor::full({m.config.d_model}, 0.25f);
  Tensor v2 = Tensor::full({m.config.d_model}, -1.f);
  std::vector<Intervention> ivs{
      Intervention::replace_at(StateKind::h, 1, 2, v1),
      Intervention::replace_at(StateKind::h, 1, 2, v2),
  };
  auto run = forward(m, tokens, ivs);
  for (int i = 0; i < m.config.d_model; ++i)
    CHECK(run.cache.state(StateKind::h, 1)(2, i) == -1.f);
}

TEST_CASE("forward rejects bad tokens and bad intervention addresses") {
  auto m = init_params(tiny_config(), 29);
  CHECK_THROWS_AS(forward(m, {0, 99}), ContractError);
  std::vector<Intervention> bad_layer{
      Intervention::replace_at(StateKind::h, 9, 0, Tensor({m.config.d_model}))};
  CHECK_THROWS_AS(forward(m, tiny_tokens(), bad_layer), ContractError);
  std::vector<Intervention> bad_token{
      Intervention::replace_at(StateKind::h, 1, 40, Tensor({m.config.d_model}))};
  CHECK_THROWS_AS(forward(m, tiny_tokens(), bad_token), ContractError);
  std::vector<Intervention> bad_shape{
      Intervention::replace_at(StateKind::s, 1, 0, Tensor({3}))};
  CHECK_THROWS_AS(forward(m, tiny_tokens(), bad_shape), ContractError);
}

TEST_CASE("retention matrix") {
  auto m = init_params(tiny_config(), 31);
  const auto tokens = tiny_tokens();
  const int layer = 2;
  auto run = forward(m, tokens);
  const Tensor& c_seq = run.cache.state(StateKind::c, layer);
  const Tensor& s_seq = run.cache.state(StateKind::s, layer);
  auto alpha = retention_matrix(m, tokens, layer);
  const int e_dim = m.config.d_inner();

  SUBCASE("decomposition recovers the ssm output") {
    const BlockParams& blk = m.blocks[layer - 1];
    for (int k = 0; k < alpha.seq; ++k) {
      for (int e = 0; e < e_dim; ++e) {
        double acc = 0.0;
        for (int q = 0; q <= k; ++q) acc += alpha.at(k, q, e);
        acc += double(blk.d_skip[e]) * double(c_seq(k, e));
        CHECK(std::abs(acc - double(s_seq(k, e))) <= 1e-5);
      }
    }
  }

  SUBCASE("strictly upper entries are zero") {
    for (int k = 0; k < alpha.seq; ++k)
      for (int q = k + 1; q < alpha.seq; ++q)
        for (int e = 0; e < e_dim; ++e) CHECK(alpha.at(k, q, e) == 0.f);
  }

  SUBCASE("huge step sizes kill history") {
    BlockParams blk = m.blocks[layer - 1];
    for (auto& v : blk.dt_bias.vec()) v = 60.f;  // softplus(60) = 60, Abar ~ exp(-60)
    auto fast = retention_from_conv(c_seq, blk);
    for (int k = 1; k < fast.seq; ++k)
      for (int q = 0; q < k; ++q)
        for (int e = 0; e < e_dim; ++e) CHECK(std::abs(fast.at(k, q, e)) <= 1e-6f);
  }

  SUBCASE("layer out of range") {
    CHECK_THROWS_AS(retention_matrix(m, tokens, 0), ContractError);
    CHECK_THROWS_AS(retention_matrix(m, tokens, 99), ContractError);
  }
}

TEST_CASE("checkpoint round trip") {
  auto m = init_params(tiny_config(), 33);
  const std::string p1 = "ckpt_test_a.ssml", p2 = "ckpt_test_b.ssml";
  save_checkpoint(m, p1);
  auto loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);

  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string b1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string b2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(b1 == b2);

  auto before = forward(m, tiny_tokens());
  auto after = forward(loaded, tiny_tokens());
  CHECK(bitwise_equal(before.logits, after.logits));

  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("checkpoint error taxonomy") {
  auto m = init_params(tiny_config(), 35);
  const std::string path = "ckpt_test_err.ssml";
  save_checkpoint(m, path);

  SUBCASE("bad magic") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('X');
    f.close();
    try {
      load_checkpoint(path);
      FAIL("expected bad magic");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::bad_magic);
    }
  }

  SUBCASE("bad version") {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(4);
    const uint32_t v = 77;
    f.write(reinterpret_cast<const char*>(&v), 4);
    f.close();
    try {
      load_checkpoint(path);
      FAIL("expected version error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::bad_version);
    }
  }

  SUBCASE("truncated") {
    std::ifstream in(path, std::ios::binary);
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    in.close();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    out.close();
    try {
      load_checkpoint(path);
      FAIL("expected truncation error");
    } catch (const CheckpointError& e) {
      CHECK(e.kind() == CheckpointError::Kind::truncated);
    }
  }

  std::remove(path.c_str());
}

TEST_CASE("full block loss gradients match finite differences") {
  // Composite check through norm, both projections, conv, scan, gate and
  // output: the weighted sum of one block's output against FD in double.
  auto cfg = ModelConfig::with_dims(8, 1, 4, 4, 12, 8);
  auto m64 = init_params<double>(cfg, 37);
  std::vector<int> tokens{1, 5, 3, 7};

  std::mt19937_64 gen(99);
  TensorT<double> w({static_cast<int>(tokens.size()), cfg.vocab_size});
  oracles::fill_uniform(w, gen);

  auto loss_value = [&]() {
    Tape<double> tp(false);
    auto fv = build_forward(tp, m64, tokens);
    return tp.value(tp.sum(tp.mul(fv.logits, tp.constant(w))))[0];
  };

  Tape<double> tp(true);
  auto fv = build_forward(tp, m64, tokens);
  Var loss = tp.sum(tp.mul(fv.logits, tp.constant(w)));
  tp.backward(loss);

  size_t checked = 0, ok = 0;
  for (auto& [name, param] : m64.named_tensors()) {
    const TensorT<double>* g = tp.grad_of(param);
    REQUIRE(g != nullptr);
    auto res = oracles::gradcheck(param, *g, loss_value, 1e-5, 1e-4);
    checked += res.checked;
    ok += res.ok;
  }
  CHECK(checked > 0);
  CHECK(double(ok) / double(checked) >= 0.999);
}
