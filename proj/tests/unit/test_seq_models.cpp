#include <cmath>
#include <cstring>

#include "doctest.h"
#include "flowsynth/error.hpp"
#include "flowsynth/models.hpp"
#include "flowsynth/ops.hpp"
#include "oracles.hpp"

using namespace flowsynth;

namespace {

constexpr Arch kArchs[] = {Arch::kWaveNet, Arch::kRnn, Arch::kTransformer};

TokenBatch random_batch(std::size_t batch, std::size_t steps, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  TokenBatch b{batch, steps, std::vector<std::int32_t>(batch * steps)};
  for (auto& id : b.ids) id = static_cast<std::int32_t>(rng.below(vocab));
  return b;
}

std::vector<std::int32_t> next_targets(const TokenBatch& b, std::size_t vocab, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<std::int32_t> t(b.ids.size());
  for (auto& id : t) id = static_cast<std::int32_t>(rng.below(vocab));
  return t;
}

Tensor flat_logits(const Tensor& logits) { return reshape(logits, {logits.numel() / logits.shape().back(), logits.shape().back()}); }

}  // namespace

TEST_CASE("architecture defaults") {
  const auto t = ModelConfig::defaults(Arch::kTransformer, 50, 9);
  CHECK(t.n_blocks == 4);
  CHECK(t.n_heads == 4);
  CHECK(t.embed_dim == 64);
  CHECK(t.hidden_dim == 256);
  CHECK(ModelConfig::defaults(Arch::kRnn, 50, 9).hidden_dim == 128);
  const auto w = ModelConfig::defaults(Arch::kWaveNet, 50, 9);
  CHECK(w.hidden_dim == 64);
  CHECK(w.conv_kernel == 2);
  CHECK(w.dilation_schedule() == std::vector<std::size_t>{1, 2, 4, 8});
  CHECK(w.receptive_field() >= 9);
  CHECK(parse_arch("rnn") == Arch::kRnn);
  CHECK_THROWS_AS(parse_arch("lstm"), UsageError);
}

TEST_CASE("config validation") {
  auto c = ModelConfig::defaults(Arch::kTransformer, 50, 9);
  c.n_heads = 5;
  CHECK_THROWS_AS(c.validate(), UsageError);
  auto w = ModelConfig::defaults(Arch::kWaveNet, 50, 9);
  w.dilations = {1, 2};
  CHECK_THROWS_AS(w.validate(), UsageError);
}

TEST_CASE("step-0 cross-entropy is close to ln V for every architecture") {
  for (Arch arch : kArchs) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Model model = Model::create(ModelConfig::defaults(arch, 50, 9), seed);
      const auto ids = random_batch(64, 9, 50, seed + 10);
      NoGradGuard guard;
      const double loss = cross_entropy(flat_logits(model.forward(ids, NormMode::kTrain)), next_targets(ids, 50, seed),
                                        64.0 * 9.0)
                              .item();
      INFO(to_string(arch) << " seed " << seed << " loss " << loss);
      CHECK(loss >= 0.95 * std::log(50.0));
      CHECK(loss <= 1.05 * std::log(50.0));
    }
  }
}

TEST_CASE("zero output init gives exactly uniform next-symbol probabilities") {
  for (Arch arch : kArchs) {
    auto config = ModelConfig::defaults(arch, 50, 9);
    config.eps_init = 0.0;
    Model model = Model::create(config, 3);
    NoGradGuard guard;
    const auto p = softmax_rows(flat_logits(model.forward(random_batch(8, 9, 50, 4), NormMode::kEval)));
    double worst = 0.0;
    for (float v : p.data()) worst = std::max(worst, std::fabs(static_cast<double>(v) - 1.0 / 50.0));
    CHECK(worst < 1e-7);
  }
}

TEST_CASE("tanh-gain init keeps pre-activation scale near 5/3") {
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    const Tensor w = init_weight({256, 256}, 256, InitKind::kTanh, rng);
    std::vector<float> x(64 * 256);
    for (auto& v : x) v = static_cast<float>(rng.normal());
    const Tensor pre = matmul(Tensor({64, 256}, x), w);
    double sq = 0.0;
    for (float v : pre.data()) sq += static_cast<double>(v) * v;
    const double sd = std::sqrt(sq / static_cast<double>(pre.numel()));
    CHECK(sd >= 0.8 * 5.0 / 3.0);
    CHECK(sd <= 1.2 * 5.0 / 3.0);
    total += sd;
  }
  CHECK(total / 50 == doctest::Approx(5.0 / 3.0).epsilon(0.03));
}

TEST_CASE("all three forwards are causal at every position") {
  for (Arch arch : kArchs) {
    for (std::size_t steps : {1u, 5u, 12u}) {
      const auto r = oracle::check_causality(arch, 50, steps, 17 + steps);
      INFO(r.detail);
      CHECK(r.ok);
      CHECK(r.positions_checked == steps);
    }
  }
}

TEST_CASE("two dilated conv layers see exactly four positions") {
  // Kernel 2 with dilations 1 then 2: field 1 + 1 + 2 = 4.
  Rng rng(5);
  const std::size_t steps = 6, ch = 3;
  auto rand_t = [&](Shape s) {
    std::vector<float> v(shape_numel(s));
    for (auto& x : v) x = static_cast<float>(rng.normal());
    return Tensor(std::move(s), std::move(v));
  };
  const Tensor embed = rand_t({10, ch}), f1 = rand_t({2, ch, ch}), f2 = rand_t({2, ch, ch});
  auto run = [&](std::vector<std::int32_t> ids) {
    Tensor x = reshape(embedding_lookup(embed, ids), {1, steps, ch});
    x = tanh_act(causal_conv1d(x, f1, 1));
    return tanh_act(causal_conv1d(x, f2, 2));
  };
  const std::vector<std::int32_t> base{1, 2, 3, 4, 5, 6};
  const Tensor ref = run(base);
  auto at4 = [&](const Tensor& y) { return std::vector<float>(y.data().begin() + 4 * ch, y.data().begin() + 5 * ch); };
  auto changed0 = base;
  changed0[0] = 9;
  auto changed1 = base;
  changed1[1] = 9;
  CHECK(at4(run(changed0)) == at4(ref));
  CHECK(at4(run(changed1)) != at4(ref));
}

TEST_CASE("rnn without recurrence is memoryless") {
  Model model = Model::create(ModelConfig::defaults(Arch::kRnn, 20, 6), 1);
  for (auto& t : model.params.tensors)
    if (&t == &model.params.get("rnn.wh")) std::fill(t.data().begin(), t.data().end(), 0.0f);
  const auto base = random_batch(1, 6, 20, 2);
  NoGradGuard guard;
  const Tensor ref = model.forward(base, NormMode::kEval);
  for (std::size_t t = 0; t < 6; ++t) {
    auto changed = base;
    for (std::size_t s = 0; s < 6; ++s)
      if (s != t) changed.ids[s] = (changed.ids[s] + 1) % 20;
    const Tensor out = model.forward(changed, NormMode::kEval);
    CHECK(std::memcmp(ref.data().data() + t * 20, out.data().data() + t * 20, 20 * sizeof(float)) == 0);
  }
}

TEST_CASE("zero weights leave h_t = tanh(b)") {
  const Tensor x({1, 3, 2}, std::vector<float>{1, 2, 3, 4, 5, 6});
  const Tensor h = rnn_tanh(x, Tensor({2, 2}), Tensor({2, 2}), Tensor({2}, std::vector<float>{0.3f, -0.7f}));
  for (std::size_t t = 0; t < 3; ++t) {
    CHECK(h.data()[t * 2] == doctest::Approx(std::tanh(0.3)).epsilon(1e-7));
    CHECK(h.data()[t * 2 + 1] == doctest::Approx(std::tanh(-0.7)).epsilon(1e-7));
  }
}

TEST_CASE("rnn forward matches a hand-rolled recurrence") {
  ModelConfig c = ModelConfig::defaults(Arch::kRnn, 3, 3);
  c.embed_dim = 2;
  c.hidden_dim = 2;
  c.eps_init = 0.5;
  Model model = Model::create(c, 9);
  const TokenBatch ids{1, 3, {2, 0, 1}};
  const auto& E = model.params.get("embed");
  const auto& Wx = model.params.get("rnn.wx");
  const auto& Wh = model.params.get("rnn.wh");
  const auto& b = model.params.get("rnn.b");
  const auto& Wo = model.params.get("out.weight");
  const auto& bo = model.params.get("out.bias");
  double h[2] = {0, 0};
  std::vector<double> expected;
  for (std::size_t t = 0; t < 3; ++t) {
    const auto id = static_cast<std::size_t>(ids.ids[t]);
    double next[2];
    for (std::size_t j = 0; j < 2; ++j) {
      double s = b.data()[j];
      for (std::size_t i = 0; i < 2; ++i) s += E.data()[id * 2 + i] * Wx.data()[i * 2 + j] + h[i] * Wh.data()[i * 2 + j];
      next[j] = std::tanh(s);
    }
    h[0] = next[0];
    h[1] = next[1];
    for (std::size_t v = 0; v < 3; ++v) expected.push_back(h[0] * Wo.data()[v] + h[1] * Wo.data()[3 + v] + bo.data()[v]);
  }
  NoGradGuard guard;
  const Tensor logits = model.forward(ids, NormMode::kEval);
  REQUIRE(logits.shape() == Shape{1, 3, 3});
  for (std::size_t i = 0; i < expected.size(); ++i) CHECK(std::fabs(logits.data()[i] - expected[i]) < 1e-6);
}

TEST_CASE("single-head attention matches hand computation") {
  const std::vector<float> q{1.0f, 0.5f, -0.3f, 2.0f}, k{0.2f, -1.0f, 1.5f, 0.4f}, v{3.0f, -1.0f, 0.5f, 2.0f};
  const Tensor out = causal_self_attention(Tensor({1, 2, 2}, q), Tensor({1, 2, 2}, k), Tensor({1, 2, 2}, v), 1);
  // Position 0 sees only itself.
  CHECK(out.data()[0] == doctest::Approx(3.0).epsilon(1e-6));
  CHECK(out.data()[1] == doctest::Approx(-1.0).epsilon(1e-6));
  const double s0 = (-0.3 * 0.2 + 2.0 * -1.0) / std::sqrt(2.0);
  const double s1 = (-0.3 * 1.5 + 2.0 * 0.4) / std::sqrt(2.0);
  const double a0 = std::exp(s0) / (std::exp(s0) + std::exp(s1));
  const double a1 = 1.0 - a0;
  CHECK(std::fabs(out.data()[2] - (a0 * 3.0 + a1 * 0.5)) < 1e-5);
  CHECK(std::fabs(out.data()[3] - (a0 * -1.0 + a1 * 2.0)) < 1e-5);
}

TEST_CASE("transformer over a single position") {
  Model model = Model::create(ModelConfig::defaults(Arch::kTransformer, 50, 9), 4);
  NoGradGuard guard;
  const Tensor logits = model.forward(random_batch(2, 1, 50, 5), NormMode::kEval);
  CHECK(logits.shape() == Shape{2, 1, 50});
  CHECK_THROWS(model.forward(random_batch(1, 10, 50, 6), NormMode::kEval));
}

TEST_CASE("parameter counts") {
  for (Arch arch : kArchs) {
    const auto c = ModelConfig::defaults(arch, 50, 9);
    Rng rng(1);
    CHECK(count_params(c) == init_params(c, rng).numel());
  }
  auto c = ModelConfig::defaults(Arch::kTransformer, 50, 9);
  Rng rng(2);
  CHECK(init_params(c, rng).get("embed").numel() == 3200);
  auto c8 = c;
  c8.n_blocks = 8;
  auto c1 = c;
  c1.n_blocks = 1;
  const std::size_t per_block = count_params(c) - count_params(c1);
  REQUIRE(per_block % 3 == 0);
  const std::size_t base = count_params(c1) - per_block / 3;
  CHECK(count_params(c8) - base == 2 * (count_params(c) - base));
  CHECK(count_params(ModelConfig::defaults(Arch::kWaveNet, 50, 11)) == 39986);
  CHECK(count_params(ModelConfig::defaults(Arch::kRnn, 50, 11)) == 34354);
}

TEST_CASE("every parameter receives gradient") {
  for (Arch arch : kArchs) {
    Model model = Model::create(ModelConfig::defaults(arch, 50, 9), 6);
    const auto ids = random_batch(16, 9, 50, 7);
    Tensor loss = cross_entropy(flat_logits(model.forward(ids, NormMode::kTrain)), next_targets(ids, 50, 8), 16.0);
    loss.backward();
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      double norm = 0.0;
      for (float g : model.params.tensors[i].grad()) norm += static_cast<double>(g) * g;
      INFO(to_string(arch) << " " << model.params.names[i]);
      CHECK(norm > 0.0);
      CHECK(std::isfinite(norm));
    }
    const auto& embed = model.params.get("embed");
    for (std::int32_t id : ids.ids) {
      double row = 0.0;
      for (std::size_t j = 0; j < 64; ++j) row += std::fabs(embed.grad()[static_cast<std::size_t>(id) * 64 + j]);
      CHECK(row > 0.0);
    }
  }
}

TEST_CASE("logits stay finite for extreme parameters") {
  for (Arch arch : kArchs) {
    Model model = Model::create(ModelConfig::defaults(arch, 50, 9), 1);
    for (auto& t : model.params.tensors)
      for (auto& v : t.data()) v *= 30.0f;
    NoGradGuard guard;
    const Tensor logits = model.forward(random_batch(4, 9, 50, 2), NormMode::kTrain);
    for (float v : logits.data()) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("creation is deterministic in the seed") {
  for (Arch arch : kArchs) {
    const auto c = ModelConfig::defaults(arch, 50, 9);
    Model a = Model::create(c, 3), b = Model::create(c, 3), d = Model::create(c, 4);
    bool differs = false;
    for (std::size_t i = 0; i < a.params.size(); ++i) {
      CHECK(std::memcmp(a.params.tensors[i].data().data(), b.params.tensors[i].data().data(),
                        a.params.tensors[i].numel() * sizeof(float)) == 0);
      differs |= std::memcmp(a.params.tensors[i].data().data(), d.params.tensors[i].data().data(),
                             a.params.tensors[i].numel() * sizeof(float)) != 0;
    }
    CHECK(differs);
  }
}

TEST_CASE("clone shares no buffers") {
  Model model = Model::create(ModelConfig::defaults(Arch::kRnn, 20, 5), 1);
  auto copy = model.params.clone();
  copy.tensors[0].data()[0] += 1.0f;
  CHECK(copy.tensors[0].data()[0] != model.params.tensors[0].data()[0]);
}
