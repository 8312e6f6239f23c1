#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "flowsynth/benchmark.hpp"
#include "flowsynth/codec.hpp"
#include "flowsynth/error.hpp"
#include "flowsynth/evaluator.hpp"
#include "flowsynth/flow_table.hpp"
#include "flowsynth/models.hpp"
#include "flowsynth/pca.hpp"
#include "flowsynth/sampler.hpp"
#include "flowsynth/trainer.hpp"

namespace py = pybind11;
namespace fs = flowsynth;
using Path = std::filesystem::path;

namespace {

py::dict report_dict(const fs::EvalReport& r) {
  py::dict d;
  d["nu"] = r.nu;
  d["inlier_pct"] = r.inlier_pct;
  d["real_holdout_inlier_pct"] = r.real_holdout_inlier_pct;
  d["training_outlier_fraction"] = r.training_outlier_fraction;
  d["discriminative_accuracy"] = r.discriminative_accuracy;
  d["features"] = r.features;
  d["tv_distances"] = r.tv_distances;
  d["mean_tv_distance"] = r.mean_tv();
  d["pca_real"] = r.pca_real;
  d["pca_synth"] = r.pca_synth;
  d["max_pca_drift"] = r.max_pca_drift();
  d["real_train_rows"] = r.real_train_rows;
  d["real_holdout_rows"] = r.real_holdout_rows;
  d["synth_rows"] = r.synth_rows;
  d["dropped_features"] = r.dropped_features;
  return d;
}

py::dict encode_csv(const Path& input, const Path& codebook_path, const Path& data_path,
                    std::optional<std::vector<std::string>> features, int k, const std::string& mode) {
  if (k < 2) throw fs::UsageError("k must be at least 2");
  fs::Codebook codebook;
  fs::SymbolDataset data;
  std::vector<std::string> chosen;
  std::size_t rows_read = 0;
  {
    py::gil_scoped_release release;
    const auto binning = fs::parse_binning_mode(mode);
    const auto loaded = fs::load_csv(input);
    const auto cleaned = fs::clean(loaded.table);
    rows_read = loaded.stats.rows_read;
    if (features) {
      chosen = *features;
    } else {
      for (const auto& spec : cleaned.table.schema())
        if (!spec.constant) chosen.push_back(spec.name);
    }
    codebook = fs::fit_codebook(cleaned.table, chosen, k, binning);
    data = fs::encode(cleaned.table, codebook);
    fs::save_codebook(codebook, codebook_path);
    fs::save_symbols(data, codebook.alphabet_size(), data_path);
  }
  py::dict d;
  d["rows_read"] = rows_read;
  d["sequences"] = data.size();
  d["sequence_length"] = data.length;
  d["vocab_size"] = data.vocab_size;
  d["features"] = chosen;
  return d;
}

py::dict train(const Path& data_path, const Path& checkpoint, const std::string& arch, std::size_t steps,
               std::size_t batch_size, std::optional<double> learning_rate, const std::string& optimizer,
               std::uint64_t seed, double holdout, double eps_init, std::optional<Path> loss_log) {
  fs::TrainReport report;
  std::size_t params = 0;
  {
    py::gil_scoped_release release;
    const auto data = fs::load_symbols(data_path);
    auto config = fs::ModelConfig::defaults(fs::parse_arch(arch), static_cast<std::size_t>(data.vocab_size),
                                            data.length - 1);
    config.eps_init = eps_init;
    auto model = fs::Model::create(config, seed);
    fs::TrainConfig tc;
    tc.max_steps = steps;
    tc.batch_size = batch_size;
    tc.learning_rate = learning_rate;
    tc.optimizer = fs::parse_optimizer(optimizer);
    tc.seed = seed;
    tc.holdout_fraction = holdout;
    report = fs::train(model, data, tc);
    fs::save_checkpoint(model, checkpoint, {{"optimizer", std::string(fs::to_string(tc.optimizer))},
                                            {"seed", std::to_string(seed)},
                                            {"steps", std::to_string(steps)}});
    if (loss_log) fs::write_loss_csv(report, *loss_log);
    params = model.params.numel();
  }
  py::dict d;
  d["train_loss"] = report.train_loss;
  d["holdout_loss"] = report.holdout_loss;
  d["initial_loss"] = report.initial_loss;
  d["steps"] = report.steps;
  d["params"] = params;
  return d;
}

std::size_t sample(const Path& checkpoint, const Path& codebook_path, std::size_t n, const Path& out,
                   double temperature, std::uint64_t seed, std::size_t threads) {
  py::gil_scoped_release release;
  auto model = fs::load_checkpoint(checkpoint);
  const auto codebook = fs::load_codebook(codebook_path);
  return fs::generate_flows(model, codebook, n, temperature, seed, out, threads).rows();
}

py::dict evaluate(const Path& real_csv, const Path& synth_csv, const Path& codebook_path, double nu,
                  std::uint64_t seed) {
  fs::EvalReport report;
  {
    py::gil_scoped_release release;
    const auto codebook = fs::load_codebook(codebook_path);
    report = fs::evaluate(fs::load_csv(real_csv).table, fs::load_csv(synth_csv).table, codebook, nu, seed);
  }
  return report_dict(report);
}

py::dict pca(const Path& csv, std::size_t components) {
  fs::PcaResult result;
  {
    py::gil_scoped_release release;
    result = fs::pca_explained_variance(fs::clean(fs::load_csv(csv).table).table, components);
  }
  py::dict d;
  d["explained_variance_ratio"] = result.explained_variance_ratio;
  d["cumulative"] = result.cumulative;
  d["columns"] = result.columns;
  return d;
}

py::dict benchmark(std::optional<Path> out_dir, std::size_t rows, std::size_t synth_rows, std::size_t steps,
                   std::size_t batch_size, double learning_rate, double nu, std::uint64_t seed, std::size_t threads) {
  fs::BenchResult result;
  {
    py::gil_scoped_release release;
    fs::BenchOptions o;
    o.rows = rows;
    o.synth_rows = synth_rows;
    o.steps = steps;
    o.batch_size = batch_size;
    o.learning_rate = learning_rate;
    o.nu = nu;
    o.seed = seed;
    o.threads = threads;
    if (out_dir) o.out_dir = *out_dir;
    result = fs::run_benchmark(o);
  }
  py::dict d;
  for (const auto& m : result.models) {
    auto entry = report_dict(m.eval);
    entry["params"] = m.params;
    entry["final_train_loss"] = m.training.train_loss.empty() ? 0.0 : m.training.train_loss.back();
    d[py::str(std::string(fs::to_string(m.arch)))] = entry;
  }
  d["control"] = report_dict(result.control);
  d["truth"] = report_dict(result.truth);
  d["total_seconds"] = result.total_seconds;
  return d;
}

void write_benchmark_csv(const Path& path, std::size_t rows, std::uint64_t seed) {
  py::gil_scoped_release release;
  fs::write_csv(fs::make_benchmark_table(rows, seed), path);
}

std::size_t count_params(const std::string& arch, std::size_t vocab_size, std::size_t context_length) {
  return fs::count_params(fs::ModelConfig::defaults(fs::parse_arch(arch), vocab_size, context_length));
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Symbolic network-flow synthesis: encode, train, sample, evaluate.";

  auto base = py::register_exception<fs::Error>(m, "FlowsynthError", PyExc_RuntimeError);
  py::register_exception<fs::UsageError>(m, "UsageError", base.ptr());
  py::register_exception<fs::DataError>(m, "DataError", base.ptr());
  py::register_exception<fs::DivergenceError>(m, "DivergenceError", base.ptr());
  py::register_exception<fs::ConvergenceError>(m, "ConvergenceError", base.ptr());

  m.def("encode_csv", &encode_csv, py::arg("input"), py::arg("codebook"), py::arg("data"),
        py::arg("features") = py::none(), py::arg("k") = fs::kDefaultAlphabetSize, py::arg("mode") = "equalfreq",
        "Fit a codebook on a flow CSV and write it with the encoded symbol sequences.");
  m.def("train", &train, py::arg("data"), py::arg("checkpoint"), py::arg("arch") = "rnn", py::arg("steps") = 1000,
        py::arg("batch_size") = 64, py::arg("learning_rate") = py::none(), py::arg("optimizer") = "adam",
        py::arg("seed") = 0, py::arg("holdout") = 0.1, py::arg("eps_init") = 1e-3, py::arg("loss_log") = py::none(),
        "Train a model on encoded sequences and save a checkpoint.");
  m.def("sample", &sample, py::arg("checkpoint"), py::arg("codebook"), py::arg("n"), py::arg("out"),
        py::arg("temperature") = 1.0, py::arg("seed") = 0, py::arg("threads") = 1,
        "Sample n flows from a checkpoint and write them as CSV. Returns the row count.");
  m.def("evaluate", &evaluate, py::arg("real"), py::arg("synth"), py::arg("codebook"), py::arg("nu") = 0.1,
        py::arg("seed") = 0, "Score synthetic flows against real ones.");
  m.def("pca", &pca, py::arg("csv"), py::arg("components") = 10,
        "Explained-variance ratios of the standardized numeric columns of a CSV.");
  m.def("benchmark", &benchmark, py::arg("out_dir") = py::none(), py::arg("rows") = 30000,
        py::arg("synth_rows") = 30000, py::arg("steps") = 1500, py::arg("batch_size") = 64,
        py::arg("learning_rate") = 1e-3, py::arg("nu") = 0.1, py::arg("seed") = 0, py::arg("threads") = 1,
        "Run the synthetic end-to-end benchmark for all three architectures.");
  m.def("write_benchmark_csv", &write_benchmark_csv, py::arg("path"), py::arg("rows"), py::arg("seed") = 0,
        "Write a draw from the benchmark's synthetic flow generator.");
  m.def("count_params", &count_params, py::arg("arch"), py::arg("vocab_size"), py::arg("context_length"),
        "Parameter count of the default configuration for an architecture.");
}
