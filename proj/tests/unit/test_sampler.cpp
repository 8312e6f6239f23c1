#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <map>

#include "doctest.h"
#include "flowsynth/error.hpp"
#include "flowsynth/sampler.hpp"
#include "flowsynth/trainer.hpp"

using namespace flowsynth;
namespace fsys = std::filesystem;

namespace {

constexpr int kK = 49;

// Eight equal-width numeric features on [0, 1] and one categorical feature.
Codebook test_codebook() {
  std::vector<double> edges(kK + 1);
  for (int i = 0; i <= kK; ++i) edges[static_cast<std::size_t>(i)] = static_cast<double>(i) / kK;
  std::vector<FeatureCodec> features;
  for (int f = 0; f < 8; ++f) features.push_back({"f" + std::to_string(f), NumericBins{edges}});
  features.push_back({"Protocol", CategoryMap{{"TCP", "UDP", "ICMP"}}});
  return Codebook(kK, BinningMode::kEqualWidth, features);
}

Model uniform_model(Arch arch) {
  auto c = ModelConfig::defaults(arch, kK + 1, 9);
  c.eps_init = 0.0;
  return Model::create(c, 1);
}

double entropy(const std::vector<double>& p) {
  double h = 0.0;
  for (double x : p)
    if (x > 0) h -= x * std::log(x);
  return h;
}

std::string slurp(const fsys::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("next-symbol distribution") {
  const std::vector<float> logits{1.0f, 3.0f, 2.0f, 50.0f};
  const auto p = next_symbol_distribution(logits, 3, 1.0);
  REQUIRE(p.size() == 3);
  const double z = std::exp(1.0) + std::exp(3.0) + std::exp(2.0);
  CHECK(p[0] == doctest::Approx(std::exp(1.0) / z));
  CHECK(p[1] == doctest::Approx(std::exp(3.0) / z));

  const auto g = next_symbol_distribution(logits, 3, 1e-9);
  CHECK(g == std::vector<double>{0.0, 1.0, 0.0});

  Rng rng(3);
  std::vector<float> random(kK + 1);
  for (auto& x : random) x = static_cast<float>(rng.normal() * 2.0);
  double prev = -1.0;
  for (double temp : {0.25, 0.5, 1.0, 2.0, 4.0}) {
    const double h = entropy(next_symbol_distribution(random, kK, temp));
    CHECK(h > prev);
    prev = h;
  }
  CHECK(prev < std::log(static_cast<double>(kK)));

  const std::vector<float> bad{0.0f, std::nanf("")};
  CHECK_THROWS_AS(next_symbol_distribution(bad, 2, 1.0), std::invalid_argument);
  CHECK_THROWS_AS(next_symbol_distribution(bad, 3, 1.0), std::invalid_argument);
}

TEST_CASE("an untrained zero-output model samples every symbol uniformly") {
  const auto cb = test_codebook();
  auto model = uniform_model(Arch::kRnn);
  const std::size_t n = 12500;  // 100k value symbols
  const auto data = sample_sequences(model, cb, n, 1.0, 42, 4);
  std::vector<double> counts(kK, 0.0);
  for (std::size_t s = 0; s < n; ++s) {
    const auto seq = data.sequence(s);
    CHECK(seq[0] == kK);
    for (std::size_t p = 1; p < seq.size(); ++p) {
      REQUIRE(seq[p] >= 0);
      REQUIRE(seq[p] < kK);
      counts[static_cast<std::size_t>(seq[p])] += 1.0;
    }
  }
  const double draws = static_cast<double>(n) * 9.0;
  const double p = 1.0 / kK;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int s = 0; s < kK; ++s) {
    CAPTURE(s);
    CHECK(std::abs(counts[static_cast<std::size_t>(s)] - draws * p) <= 3.0 * sigma);
  }
}

TEST_CASE("greedy decoding is deterministic regardless of seed") {
  const auto cb = test_codebook();
  auto model = Model::create(ModelConfig::defaults(Arch::kTransformer, kK + 1, 9), 5);
  const auto a = sample_sequences(model, cb, 20, 1e-9, 1);
  const auto b = sample_sequences(model, cb, 20, 1e-9, 2);
  CHECK(a == b);
  for (std::size_t s = 1; s < 20; ++s) CHECK(std::equal(a.sequence(0).begin(), a.sequence(0).end(), a.sequence(s).begin()));
}

TEST_CASE("output is reproducible and independent of thread count") {
  const auto cb = test_codebook();
  for (Arch arch : {Arch::kWaveNet, Arch::kRnn, Arch::kTransformer}) {
    CAPTURE(to_string(arch));
    auto model = Model::create(ModelConfig::defaults(arch, kK + 1, 9), 9);
    const auto one = sample_sequences(model, cb, 2 * kSampleChunk + 17, 1.0, 7, 1);
    const auto three = sample_sequences(model, cb, 2 * kSampleChunk + 17, 1.0, 7, 3);
    const auto again = sample_sequences(model, cb, 2 * kSampleChunk + 17, 1.0, 7, 8);
    CHECK(one == three);
    CHECK(one == again);
    const auto other = sample_sequences(model, cb, 2 * kSampleChunk + 17, 1.0, 8, 1);
    CHECK(!(one == other));
    // A prefix of a larger request equals the smaller request.
    const auto small = sample_sequences(model, cb, 40, 1.0, 7, 1);
    CHECK(std::equal(small.ids.begin(), small.ids.end(), one.ids.begin()));
  }
}

TEST_CASE("a model trained on one sequence reproduces it") {
  const auto cb = test_codebook();
  const std::vector<SymbolId> target{kK, 3, 17, 17, 40, 0, 48, 22, 9, 1};
  SymbolDataset data{kK + 1, target.size(), {}};
  for (int i = 0; i < 64; ++i) data.ids.insert(data.ids.end(), target.begin(), target.end());
  auto model = Model::create(ModelConfig::defaults(Arch::kRnn, kK + 1, 9), 2);
  TrainConfig tc;
  tc.max_steps = 300;
  tc.learning_rate = 1e-2;
  tc.batch_size = 16;
  tc.holdout_fraction = 0.05;
  train(model, data, tc);
  const std::size_t n = 1000;
  const auto out = sample_sequences(model, cb, n, 1.0, 3);
  std::size_t exact = 0;
  for (std::size_t s = 0; s < n; ++s) {
    const auto seq = out.sequence(s);
    exact += std::equal(seq.begin(), seq.end(), target.begin());
  }
  CHECK(static_cast<double>(exact) / n > 0.99);
}

TEST_CASE("generated flows decode inside the codebook range") {
  const auto cb = test_codebook();
  auto model = Model::create(ModelConfig::defaults(Arch::kWaveNet, kK + 1, 9), 6);
  const auto dir = fsys::temp_directory_path() / ("flowsynth_sampler_" + std::to_string(::getpid()));
  fsys::create_directories(dir);

  const auto table = generate_flows(model, cb, 300, 1.0, 1, dir / "synth.csv", 2);
  CHECK(table.rows() == 300);
  for (int f = 0; f < 8; ++f) {
    for (double v : table.numeric_column("f" + std::to_string(f))) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  for (const auto& c : table.categorical_column("Protocol")) {
    CHECK((c == "TCP" || c == "UDP" || c == "ICMP" || c == std::string(kOverflowCategory)));
  }

  generate_flows(model, cb, 0, 1.0, 1, dir / "empty.csv");
  const auto empty = slurp(dir / "empty.csv");
  CHECK(std::count(empty.begin(), empty.end(), '\n') == 1);
  CHECK(empty.rfind("f0,", 0) == 0);

  generate_flows(model, cb, 50, 1.0, 4, dir / "a.csv", 1);
  generate_flows(model, cb, 50, 1.0, 4, dir / "b.csv", 4);
  CHECK(slurp(dir / "a.csv") == slurp(dir / "b.csv"));
  fsys::remove_all(dir);
}

TEST_CASE("sampling preconditions") {
  const auto cb = test_codebook();
  auto model = Model::create(ModelConfig::defaults(Arch::kRnn, kK + 1, 9), 1);
  CHECK_THROWS_AS(sample_sequences(model, cb, 5, 0.0, 1), UsageError);
  CHECK_THROWS_AS(sample_sequences(model, cb, 5, -1.0, 1), UsageError);
  auto narrow = Model::create(ModelConfig::defaults(Arch::kRnn, 20, 9), 1);
  CHECK_THROWS_AS(sample_sequences(narrow, cb, 5, 1.0, 1), UsageError);
  auto short_ctx = Model::create(ModelConfig::defaults(Arch::kTransformer, kK + 1, 4), 1);
  CHECK_THROWS_AS(sample_sequences(short_ctx, cb, 5, 1.0, 1), UsageError);
}
