#include <unistd.h>
#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <numeric>
#include <set>
#include <sstream>
#include <string>

#include "doctest.h"
#include "flowsynth/error.hpp"
#include "flowsynth/trainer.hpp"

using namespace flowsynth;
namespace fsys = std::filesystem;

namespace {

constexpr int kK = 49;

// Every sequence starts with the start symbol; the rest follows a simple
// pattern with some noise so there is something to learn.
SymbolDataset pattern_data(std::size_t n, std::size_t length, std::uint64_t seed) {
  Rng rng(seed);
  SymbolDataset d{kK + 1, length, {}};
  for (std::size_t i = 0; i < n; ++i) {
    const auto base = static_cast<SymbolId>(rng.below(kK));
    d.ids.push_back(kK);
    for (std::size_t p = 1; p < length; ++p) {
      const bool noise = rng.uniform() < 0.1;
      d.ids.push_back(noise ? static_cast<SymbolId>(rng.below(kK)) : static_cast<SymbolId>((base + p) % kK));
    }
  }
  return d;
}

struct TempDir {
  fsys::path path;
  explicit TempDir(const std::string& tag) {
    path = fsys::temp_directory_path() / ("flowsynth_trainer_" + tag + "_" + std::to_string(::getpid()));
    fsys::remove_all(path);
    fsys::create_directories(path);
  }
  ~TempDir() { fsys::remove_all(path); }
};

std::string slurp(const fsys::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void spit(const fsys::path& p, const std::string& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

std::uint32_t read_u32(const std::string& s, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 3; i >= 0; --i) v = (v << 8) | static_cast<unsigned char>(s[at + static_cast<std::size_t>(i)]);
  return v;
}

void write_u32(std::string& s, std::size_t at, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) s[at + static_cast<std::size_t>(i)] = static_cast<char>((v >> (8 * i)) & 0xFF);
}

void refresh_crc(std::string& s) {
  const auto crc = ::crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size() - 4));
  write_u32(s, s.size() - 4, static_cast<std::uint32_t>(crc));
}

TokenBatch probe_batch(std::size_t steps) {
  Rng rng(99);
  TokenBatch b{4, steps, std::vector<std::int32_t>(4 * steps)};
  for (auto& id : b.ids) id = static_cast<std::int32_t>(rng.below(kK + 1));
  return b;
}

}  // namespace

TEST_CASE("holdout split is deterministic and keyed by sequence index") {
  const auto a = split_dataset(1000, 0.1, 7);
  const auto b = split_dataset(1000, 0.1, 7);
  CHECK(a.train == b.train);
  CHECK(a.holdout == b.holdout);
  CHECK(a.train.size() + a.holdout.size() == 1000);
  CHECK(a.holdout.size() > 60);
  CHECK(a.holdout.size() < 140);

  std::set<std::size_t> seen(a.train.begin(), a.train.end());
  for (auto i : a.holdout) CHECK(seen.insert(i).second);

  // Membership of index i does not depend on how many rows follow it.
  const auto shorter = split_dataset(400, 0.1, 7);
  for (auto i : shorter.holdout) CHECK(std::binary_search(a.holdout.begin(), a.holdout.end(), i));
  for (auto i : shorter.train) CHECK(std::binary_search(a.train.begin(), a.train.end(), i));

  const auto other = split_dataset(1000, 0.1, 8);
  CHECK(other.holdout != a.holdout);
}

TEST_CASE("teacher forcing shifts by one position") {
  SymbolDataset d{kK + 1, 3, {kK, 4, 7, kK, 1, 2}};
  const std::size_t pick[] = {0, 1};
  const auto b = make_batch(d, pick);
  CHECK(b.inputs.batch == 2);
  CHECK(b.inputs.steps == 2);
  CHECK(b.inputs.ids == std::vector<std::int32_t>{kK, 4, kK, 1});
  CHECK(b.targets == std::vector<std::int32_t>{4, 7, 1, 2});

  const auto big = pattern_data(100, 10, 1);
  BatchSampler sampler(big, split_dataset(100, 0.1, 0).train, 64, 3);
  const auto full = sampler.next();
  CHECK(full.inputs.batch == 64);
  CHECK(full.inputs.steps == 9);
  CHECK(full.targets.size() == 64u * 9u);

  SymbolDataset tiny{kK + 1, 1, {kK, kK}};
  CHECK_THROWS_AS(make_batch(tiny, pick), DataError);
}

TEST_CASE("batch sampler stream is reproducible and stays in the pool") {
  const auto d = pattern_data(200, 10, 2);
  const auto split = split_dataset(200, 0.2, 1);
  BatchSampler a(d, split.train, 16, 5);
  BatchSampler b(d, split.train, 16, 5);
  for (int i = 0; i < 20; ++i) {
    const auto ia = a.next_indices();
    CHECK(ia == b.next_indices());
    for (auto s : ia) CHECK(std::binary_search(split.train.begin(), split.train.end(), s));
  }
}

TEST_CASE("SGD on a scalar quadratic") {
  Tensor w(Shape{1}, std::vector<float>{0.0f}, true);
  std::vector<Tensor> params{w};
  w.grad()[0] = 2.0f * (w.data()[0] - 3.0f);
  sgd_step(params, 0.1);
  CHECK(w.data()[0] == doctest::Approx(0.6).epsilon(1e-6));

  Tensor z(Shape{3}, std::vector<float>{1.0f, -2.0f, 0.5f}, true);
  std::vector<Tensor> zp{z};
  z.zero_grad();
  sgd_step(zp, 0.1);
  CHECK(z.data()[0] == 1.0f);
  CHECK(z.data()[1] == -2.0f);
  CHECK(z.data()[2] == 0.5f);
}

TEST_CASE("Adam with zero gradient only advances its state") {
  Tensor w(Shape{2}, std::vector<float>{1.5f, -0.25f}, true);
  std::vector<Tensor> params{w};
  AdamState st;
  w.zero_grad();
  adam_step(params, st, 0.01);
  CHECK(st.t == 1);
  CHECK(w.data()[0] == 1.5f);
  CHECK(w.data()[1] == -0.25f);
}

TEST_CASE("Adam matches a scalar reference and converges on the quadratic") {
  Tensor w(Shape{1}, std::vector<float>{0.0f}, true);
  std::vector<Tensor> params{w};
  AdamState st;
  double ref = 0.0, m = 0.0, v = 0.0;
  const double lr = 0.05;
  for (int t = 1; t <= 2000; ++t) {
    w.zero_grad();
    w.grad()[0] = 2.0f * (w.data()[0] - 3.0f);
    adam_step(params, st, lr);

    const double g = 2.0 * (ref - 3.0);
    m = 0.9 * m + 0.1 * g;
    v = 0.999 * v + 0.001 * g * g;
    const double mh = m / (1.0 - std::pow(0.9, t));
    const double vh = v / (1.0 - std::pow(0.999, t));
    ref -= lr * mh / (std::sqrt(vh) + 1e-8);
    if (t <= 50) CHECK(w.data()[0] == doctest::Approx(ref).epsilon(1e-4));
  }
  CHECK(std::abs(w.data()[0] - 3.0f) < 1e-3);
}

TEST_CASE("gradient clipping caps the global norm") {
  Rng rng(4);
  for (double max_norm : {0.5, 1.0, 5.0}) {
    Tensor a(Shape{5, 3}, true), b(Shape{7}, true);
    for (auto& g : a.grad()) g = static_cast<float>(rng.normal() * 3.0);
    for (auto& g : b.grad()) g = static_cast<float>(rng.normal() * 3.0);
    std::vector<Tensor> ps{a, b};
    const double before = clip_grad_norm(ps, max_norm);
    CHECK(before > max_norm);
    double sq = 0.0;
    for (auto& p : ps)
      for (float g : p.grad()) sq += static_cast<double>(g) * g;
    CHECK(std::sqrt(sq) <= max_norm + 1e-6);
    CHECK(std::sqrt(sq) == doctest::Approx(max_norm).epsilon(1e-5));
  }
  Tensor small(Shape{2}, true);
  small.grad()[0] = 0.1f;
  std::vector<Tensor> sp{small};
  CHECK(clip_grad_norm(sp, 5.0) == doctest::Approx(0.1));
  CHECK(small.grad()[0] == 0.1f);
}

TEST_CASE("learning rate defaults and decay") {
  TrainConfig c;
  c.max_steps = 300;
  CHECK(c.base_learning_rate() == doctest::Approx(3e-4));
  c.optimizer = Optimizer::kSgd;
  CHECK(c.base_learning_rate() == doctest::Approx(0.1));
  CHECK(c.learning_rate_at(199) == doctest::Approx(0.1));
  CHECK(c.learning_rate_at(200) == doctest::Approx(0.01));
  c.decay = false;
  CHECK(c.learning_rate_at(299) == doctest::Approx(0.1));
  CHECK(parse_optimizer("adam") == Optimizer::kAdam);
  CHECK_THROWS_AS(parse_optimizer("lbfgs"), UsageError);

  TrainConfig bad;
  bad.holdout_fraction = 0.5;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = TrainConfig{};
  bad.learning_rate = -1.0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
  bad = TrainConfig{};
  bad.batch_size = 0;
  CHECK_THROWS_AS(bad.validate(), UsageError);
}

TEST_CASE("training lowers the loss and holdout starts near train") {
  const auto data = pattern_data(400, 10, 11);
  for (Arch arch : {Arch::kWaveNet, Arch::kRnn, Arch::kTransformer}) {
    CAPTURE(to_string(arch));
    auto model = Model::create(ModelConfig::defaults(arch, kK + 1, 9), 1);
    TrainConfig tc;
    tc.max_steps = arch == Arch::kTransformer ? 60 : 150;
    tc.learning_rate = 1e-3;
    tc.batch_size = 32;
    tc.eval_every = 1000;
    Trainer trainer(model, data, tc);
    const double h0 = trainer.holdout_loss();
    const auto report = trainer.finish();
    CHECK(report.initial_loss == doctest::Approx(std::log(50.0)).epsilon(0.05));
    CHECK(std::abs(h0 - report.initial_loss) / report.initial_loss < 0.02);
    const std::size_t tenth = report.train_loss.size() / 10;
    const double first = std::accumulate(report.train_loss.begin(), report.train_loss.begin() + tenth, 0.0) / tenth;
    const double last = std::accumulate(report.train_loss.end() - tenth, report.train_loss.end(), 0.0) / tenth;
    CHECK(last < first);
    REQUIRE(!report.holdout_loss.empty());
    CHECK(report.holdout_loss.back().first == tc.max_steps);
  }
}

TEST_CASE("training is reproducible for a fixed seed") {
  const auto data = pattern_data(200, 10, 3);
  TrainConfig tc;
  tc.max_steps = 30;
  tc.batch_size = 16;
  auto run = [&] {
    auto model = Model::create(ModelConfig::defaults(Arch::kWaveNet, kK + 1, 9), 5);
    const auto report = train(model, data, tc);
    return std::make_pair(model.params.clone(), report.train_loss);
  };
  const auto [pa, la] = run();
  const auto [pb, lb] = run();
  CHECK(la == lb);
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto x = pa.tensors[i].data();
    const auto y = pb.tensors[i].data();
    CHECK(std::memcmp(x.data(), y.data(), x.size_bytes()) == 0);
  }
}

TEST_CASE("holdout loss does not depend on the order of the evaluated sequences") {
  const auto data = pattern_data(120, 10, 4);
  auto model = Model::create(ModelConfig::defaults(Arch::kRnn, kK + 1, 9), 2);
  std::vector<std::size_t> idx(120);
  std::iota(idx.begin(), idx.end(), 0);
  const double a = evaluate_loss(model, data, idx, 32);
  std::reverse(idx.begin(), idx.end());
  const double b = evaluate_loss(model, data, idx, 32);
  CHECK(a == doctest::Approx(b).epsilon(1e-6));
}

TEST_CASE("divergence guard") {
  const auto data = pattern_data(100, 10, 5);
  auto model = Model::create(ModelConfig::defaults(Arch::kRnn, kK + 1, 9), 3);
  TrainConfig tc;
  tc.optimizer = Optimizer::kSgd;
  tc.learning_rate = 1e4;
  tc.grad_clip_norm = 1e9;
  tc.max_steps = 20;
  tc.batch_size = 16;
  CHECK_THROWS_AS(train(model, data, tc), DivergenceError);

  auto other = Model::create(ModelConfig::defaults(Arch::kRnn, 30, 9), 3);
  CHECK_THROWS_AS(Trainer(other, data, TrainConfig{}), UsageError);
}

TEST_CASE("loss log format") {
  TempDir dir("losslog");
  TrainReport r;
  r.train_loss = {3.9, 3.5};
  write_loss_csv(r, dir.path / "loss.csv");
  CHECK(slurp(dir.path / "loss.csv") == "step,loss\n0,3.9\n1,3.5\n");
}

TEST_CASE("checkpoint round trip reproduces the forward pass bit for bit") {
  TempDir dir("roundtrip");
  const auto data = pattern_data(100, 10, 6);
  for (Arch arch : {Arch::kWaveNet, Arch::kRnn, Arch::kTransformer}) {
    CAPTURE(to_string(arch));
    auto model = Model::create(ModelConfig::defaults(arch, kK + 1, 9), 4);
    TrainConfig tc;
    tc.max_steps = 5;
    tc.batch_size = 8;
    train(model, data, tc);
    const auto path = dir.path / "m.ckpt";
    save_checkpoint(model, path, {{"seed", "4"}});
    std::map<std::string, std::string> extra;
    auto loaded = load_checkpoint(path, &extra);
    CHECK(extra.at("seed") == "4");
    CHECK(loaded.params.names == model.params.names);
    const auto probe = probe_batch(9);
    const auto a = model.forward(probe, NormMode::kEval);
    const auto b = loaded.forward(probe, NormMode::kEval);
    CHECK(std::memcmp(a.data().data(), b.data().data(), a.data().size_bytes()) == 0);

    // Header plus metadata plus tensor records plus trailer.
    const auto bytes = slurp(path);
    const std::size_t meta_len = read_u32(bytes, 12);
    std::size_t expected = 16 + meta_len + 4;
    std::size_t numel = 0;
    for (std::size_t i = 0; i < model.params.size(); ++i) {
      const auto& t = model.params.tensors[i];
      expected += 2 + model.params.names[i].size() + 1 + 4 * t.rank() + 4 * t.numel();
      numel += t.numel();
    }
    CHECK(bytes.size() == expected);
    CHECK(read_u32(bytes, 8) == model.params.size());
    CHECK(numel == count_params(model.config));
  }
}

TEST_CASE("checkpoint corruption is detected") {
  TempDir dir("corrupt");
  auto model = Model::create(ModelConfig::defaults(Arch::kRnn, kK + 1, 9), 8);
  const auto path = dir.path / "m.ckpt";
  save_checkpoint(model, path);
  const auto good = slurp(path);

  auto expect_error = [&](const std::string& bytes, const std::string& needle) {
    spit(path, bytes);
    try {
      load_checkpoint(path);
      FAIL("expected a DataError containing: " << needle);
    } catch (const DataError& e) {
      CHECK_MESSAGE(std::string(e.what()).find(needle) != std::string::npos, e.what());
    }
  };

  auto magic = good;
  magic[0] = 'X';
  expect_error(magic, "not a flowsynth checkpoint");

  auto flipped = good;
  flipped[flipped.size() / 2] ^= 0x10;
  expect_error(flipped, "CRC");

  expect_error(good.substr(0, good.size() - 7), "");
  expect_error(good.substr(0, 10), "truncated");

  auto version = good;
  version[4] = 9;
  refresh_crc(version);
  expect_error(version, "version");

  auto count = good;
  write_u32(count, 8, read_u32(good, 8) + 1);
  refresh_crc(count);
  expect_error(count, "shape table");

  CHECK_THROWS_AS(load_checkpoint(dir.path / "missing.ckpt"), DataError);
  CHECK_THROWS_AS(save_checkpoint(model, path, {{"bad=key", "v"}}), UsageError);
}
