#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "CLI11.hpp"
#include "flowsynth/benchmark.hpp"
#include "flowsynth/codec.hpp"
#include "flowsynth/error.hpp"
#include "flowsynth/evaluator.hpp"
#include "flowsynth/flow_table.hpp"
#include "flowsynth/models.hpp"
#include "flowsynth/pca.hpp"
#include "flowsynth/sampler.hpp"
#include "flowsynth/trainer.hpp"

namespace fs = flowsynth;

namespace {

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

// "a,b,c" or "@file" (names separated by commas or newlines).
std::vector<std::string> parse_feature_list(const std::string& spec) {
  std::string text = spec;
  if (!spec.empty() && spec[0] == '@') {
    std::ifstream in(spec.substr(1));
    if (!in) throw fs::DataError("cannot open feature list " + spec.substr(1));
    std::stringstream buf;
    buf << in.rdbuf();
    text = buf.str();
    std::replace(text.begin(), text.end(), '\n', ',');
  }
  std::vector<std::string> out;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  if (out.empty()) throw fs::UsageError("empty feature list");
  return out;
}

// key=value lines; blank lines and '#' comments are skipped.
std::map<std::string, std::string> read_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw fs::UsageError("cannot open config file " + path);
  std::map<std::string, std::string> out;
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw fs::UsageError(path + ":" + std::to_string(n) + ": expected key=value");
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

// Config values become extra `--key=value` arguments unless the command
// line already names that flag. Keys the chosen subcommand does not know
// are ignored so one file can serve every subcommand.
std::vector<std::string> merge_config(const CLI::App& app, std::vector<std::string> args) {
  std::string config_path;
  std::string subcommand;
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) config_path = args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) config_path = args[i].substr(9);
    if (subcommand.empty() && !args[i].empty() && args[i][0] != '-') subcommand = args[i];
  }
  if (config_path.empty() || subcommand.empty()) return args;
  const CLI::App* sub = nullptr;
  try {
    sub = app.get_subcommand(subcommand);
  } catch (const CLI::OptionNotFound&) {
    return args;
  }
  for (const auto& [key, value] : read_config(config_path)) {
    if (key == "config") continue;
    if (sub->get_option_no_throw("--" + key) == nullptr) continue;
    const bool given = std::any_of(args.begin(), args.end(), [&](const std::string& a) {
      return a == "--" + key || a.rfind("--" + key + "=", 0) == 0;
    });
    if (!given) args.push_back("--" + key + "=" + value);
  }
  return args;
}

void print_banner(const fs::ModelConfig& c) {
  std::printf("arch=%s vocab=%zu context=%zu embed=%zu hidden=%zu", std::string(fs::to_string(c.arch)).c_str(),
              c.vocab_size, c.context_length, c.embed_dim, c.hidden_dim);
  if (c.arch == fs::Arch::kTransformer) std::printf(" blocks=%zu heads=%zu", c.n_blocks, c.n_heads);
  if (c.arch == fs::Arch::kWaveNet) {
    std::printf(" kernel=%zu dilations=", c.conv_kernel);
    const auto d = c.dilation_schedule();
    for (std::size_t i = 0; i < d.size(); ++i) std::printf("%s%zu", i ? "," : "", d[i]);
  }
  std::printf(" params=%zu\n", fs::count_params(c));
}

std::filesystem::path with_extension(std::filesystem::path p, const std::string& ext) {
  p.replace_extension(ext);
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"flowsynth: symbolic flow encoding, autoregressive generators and fidelity evaluation"};
  app.require_subcommand(1);
  std::string config_path;

  auto add_config = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "key=value file with defaults for this command's flags");
  };

  // encode
  std::string enc_input, enc_features, enc_codebook, enc_data, enc_mode = "equalfreq", enc_hints;
  int enc_k = fs::kDefaultAlphabetSize;
  auto* encode = app.add_subcommand("encode", "Fit a codebook on a flow CSV and encode it into symbol sequences");
  encode->add_option("--input", enc_input, "Flow CSV")->required();
  encode->add_option("--features", enc_features, "Comma-separated feature list or @file (default: all usable columns)");
  encode->add_option("--k", enc_k, "Value symbols per feature");
  encode->add_option("--mode", enc_mode, "Binning: equalfreq or equalwidth");
  encode->add_option("--schema", enc_hints, "Schema hints file (name=Kind lines)");
  encode->add_option("--out-codebook", enc_codebook, "Codebook output path")->required();
  encode->add_option("--out-data", enc_data, "Symbol data output path")->required();
  add_config(encode);

  // train
  std::string tr_data, tr_arch = "wavenet", tr_opt = "adam", tr_out, tr_loss;
  std::size_t tr_steps = 1000, tr_batch = 64, tr_eval_every = 100;
  double tr_lr = 0.0, tr_clip = 5.0, tr_holdout = 0.1, tr_eps = 1e-3;
  std::uint64_t tr_seed = 0;
  auto* trainc = app.add_subcommand("train", "Train a sequence model on encoded data");
  trainc->add_option("--data", tr_data, "Symbol data file")->required();
  trainc->add_option("--arch", tr_arch, "wavenet, rnn or transformer");
  trainc->add_option("--steps", tr_steps, "Optimizer steps");
  trainc->add_option("--batch", tr_batch, "Sequences per batch");
  trainc->add_option("--lr", tr_lr, "Learning rate (default 3e-4 for adam, 0.1 for sgd)");
  trainc->add_option("--opt", tr_opt, "adam or sgd");
  trainc->add_option("--clip", tr_clip, "Global gradient norm limit");
  trainc->add_option("--holdout", tr_holdout, "Held-out fraction of sequences");
  trainc->add_option("--eval-every", tr_eval_every, "Steps between held-out loss probes");
  trainc->add_option("--eps-init", tr_eps, "Half-width of the uniform output-layer init");
  trainc->add_option("--seed", tr_seed, "Random seed");
  trainc->add_option("--out", tr_out, "Checkpoint output path")->required();
  trainc->add_option("--loss-log", tr_loss, "CSV of per-step training loss");
  add_config(trainc);

  // sample
  std::string sm_ckpt, sm_codebook, sm_out;
  std::size_t sm_n = 30000, sm_threads = std::max(1u, std::thread::hardware_concurrency());
  double sm_temp = 1.0;
  std::uint64_t sm_seed = 0;
  auto* sample = app.add_subcommand("sample", "Generate synthetic flows from a checkpoint");
  sample->add_option("--ckpt", sm_ckpt, "Checkpoint")->required();
  sample->add_option("--codebook", sm_codebook, "Codebook")->required();
  sample->add_option("--n", sm_n, "Rows to generate");
  sample->add_option("--temp", sm_temp, "Sampling temperature");
  sample->add_option("--seed", sm_seed, "Random seed");
  sample->add_option("--threads", sm_threads, "Worker threads (output does not depend on this)");
  sample->add_option("--out", sm_out, "Synthetic CSV output path")->required();
  add_config(sample);

  // eval
  std::string ev_real, ev_codebook, ev_out, ev_csv;
  std::vector<std::string> ev_synth;
  double ev_nu = 0.1;
  std::uint64_t ev_seed = 0;
  auto* eval = app.add_subcommand("eval", "Score synthetic flows against real flows");
  eval->add_option("--real", ev_real, "Real flow CSV")->required();
  eval->add_option("--synth", ev_synth, "Synthetic flow CSV (repeat to compare several)")->required();
  eval->add_option("--codebook", ev_codebook, "Codebook")->required();
  eval->add_option("--nu", ev_nu, "One-class SVM nu");
  eval->add_option("--seed", ev_seed, "Random seed");
  eval->add_option("--out", ev_out, "Text report path")->required();
  eval->add_option("--csv", ev_csv, "Comparison CSV path (default: report path with .csv)");
  add_config(eval);

  // pca
  std::string pca_input, pca_out;
  std::size_t pca_components = 10;
  auto* pca = app.add_subcommand("pca", "Explained-variance ratios of the numeric columns");
  pca->add_option("--input", pca_input, "Flow CSV")->required();
  pca->add_option("--components", pca_components, "Components to report");
  pca->add_option("--out", pca_out, "CSV output path")->required();
  add_config(pca);

  // bench
  fs::BenchOptions bench_opts;
  std::string bench_dir = "bench_out", bench_mode = "equalfreq";
  double bench_lr = *bench_opts.learning_rate;
  bench_opts.threads = std::max(1u, std::thread::hardware_concurrency());
  auto* bench = app.add_subcommand("bench", "Run the full pipeline on the built-in synthetic benchmark");
  bench->add_option("--out-dir", bench_dir, "Directory for all artifacts");
  bench->add_option("--rows", bench_opts.rows, "Real rows");
  bench->add_option("--synth-rows", bench_opts.synth_rows, "Synthetic rows per model");
  bench->add_option("--k", bench_opts.alphabet_size, "Value symbols per feature");
  bench->add_option("--mode", bench_mode, "Binning: equalfreq or equalwidth");
  bench->add_option("--steps", bench_opts.steps, "Training steps per model");
  bench->add_option("--batch", bench_opts.batch_size, "Sequences per batch");
  bench->add_option("--lr", bench_lr, "Adam learning rate");
  bench->add_option("--nu", bench_opts.nu, "One-class SVM nu");
  bench->add_option("--seed", bench_opts.seed, "Random seed");
  bench->add_option("--threads", bench_opts.threads, "Worker threads (output does not depend on this)");
  add_config(bench);

  try {
    std::vector<std::string> args(argv + 1, argv + argc);
    args = merge_config(app, args);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(fs::ExitCode::kUsage);
  } catch (const fs::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  }

  try {
    if (*encode) {
      if (enc_k < 2) throw fs::UsageError("--k must be at least 2");
      const auto mode = fs::parse_binning_mode(enc_mode);
      const auto hints = enc_hints.empty() ? fs::SchemaHints{} : fs::load_schema_hints(enc_hints);
      auto loaded = fs::load_csv(enc_input, hints);
      auto cleaned = fs::clean(loaded.table);
      std::cerr << "read " << loaded.stats.rows_read << " rows, dropped " << loaded.stats.rows_dropped + cleaned.stats.rows_dropped
                << "\n";
      if (!cleaned.stats.empty()) std::cerr << fs::format_clean_report(cleaned.stats);
      std::vector<std::string> features;
      if (enc_features.empty()) {
        for (const auto& spec : cleaned.table.schema())
          if (!spec.constant) features.push_back(spec.name);
      } else {
        features = parse_feature_list(enc_features);
      }
      const auto codebook = fs::fit_codebook(cleaned.table, features, enc_k, mode);
      const auto data = fs::encode(cleaned.table, codebook);
      fs::save_codebook(codebook, enc_codebook);
      fs::save_symbols(data, codebook.alphabet_size(), enc_data);
      std::printf("encoded %zu sequences of length %zu (K=%d, %zu features)\n", data.size(), data.length,
                  codebook.alphabet_size(), features.size());
    } else if (*trainc) {
      const auto data = fs::load_symbols(tr_data);
      auto config = fs::ModelConfig::defaults(fs::parse_arch(tr_arch), static_cast<std::size_t>(data.vocab_size),
                                              std::max<std::size_t>(1, data.length - 1));
      config.eps_init = tr_eps;
      fs::TrainConfig tc;
      tc.batch_size = tr_batch;
      tc.max_steps = tr_steps;
      tc.optimizer = fs::parse_optimizer(tr_opt);
      if (tr_lr > 0.0) tc.learning_rate = tr_lr;
      if (trainc->count("--lr") && !(tr_lr > 0.0)) throw fs::UsageError("--lr must be positive");
      tc.grad_clip_norm = tr_clip;
      tc.holdout_fraction = tr_holdout;
      tc.eval_every = tr_eval_every;
      tc.seed = tr_seed;
      tc.validate();
      auto model = fs::Model::create(config, tr_seed);
      print_banner(config);
      std::printf("optimizer=%s lr=%g batch=%zu steps=%zu seed=%llu\n", std::string(fs::to_string(tc.optimizer)).c_str(),
                  tc.base_learning_rate(), tc.batch_size, tc.max_steps, static_cast<unsigned long long>(tc.seed));
      const std::size_t every = std::max<std::size_t>(1, tr_steps / 10);
      const auto report = fs::train(model, data, tc, [&](std::size_t step, double loss) {
        if (step == 0) {
          std::printf("step 0 loss %.4f (ln V = %.4f)\n", loss, std::log(static_cast<double>(config.vocab_size)));
        } else if (step % every == 0 || step + 1 == tr_steps) {
          std::printf("step %zu loss %.4f\n", step, loss);
        }
        std::fflush(stdout);
      });
      fs::save_checkpoint(model, tr_out, {{"optimizer", std::string(fs::to_string(tc.optimizer))},
                                          {"seed", std::to_string(tc.seed)},
                                          {"steps", std::to_string(tc.max_steps)}});
      if (!tr_loss.empty()) fs::write_loss_csv(report, tr_loss);
      std::printf("final train loss %.4f", report.train_loss.back());
      if (!report.holdout_loss.empty()) std::printf(", holdout loss %.4f", report.holdout_loss.back().second);
      std::printf(", params %zu, %.1f s\n", model.params.numel(), report.wall_seconds);
    } else if (*sample) {
      auto model = fs::load_checkpoint(sm_ckpt);
      const auto codebook = fs::load_codebook(sm_codebook);
      const auto table = fs::generate_flows(model, codebook, sm_n, sm_temp, sm_seed, sm_out, sm_threads);
      std::printf("wrote %zu rows to %s\n", table.rows(), sm_out.c_str());
    } else if (*eval) {
      const auto codebook = fs::load_codebook(ev_codebook);
      const auto real = fs::load_csv(ev_real).table;
      std::vector<std::pair<std::string, fs::EvalReport>> rows;
      std::ofstream text(ev_out);
      if (!text) throw fs::DataError("cannot write " + ev_out);
      for (const auto& path : ev_synth) {
        const auto synth = fs::load_csv(path).table;
        auto report = fs::evaluate(real, synth, codebook, ev_nu, ev_seed);
        const std::string name = std::filesystem::path(path).stem().string();
        if (ev_synth.size() > 1) text << "[" << name << "]\n";
        fs::write_report_text(report, text);
        std::printf("%s: inlier %.2f%% (real holdout %.2f%%), discriminative %.3f\n", name.c_str(), report.inlier_pct,
                    report.real_holdout_inlier_pct, report.discriminative_accuracy);
        rows.emplace_back(name, std::move(report));
      }
      const auto csv_path = ev_csv.empty() ? with_extension(ev_out, ".csv") : std::filesystem::path(ev_csv);
      std::ofstream csv(csv_path);
      if (!csv) throw fs::DataError("cannot write " + csv_path.string());
      fs::write_report_csv(rows, csv);
    } else if (*pca) {
      const auto table = fs::clean(fs::load_csv(pca_input).table).table;
      const auto result = fs::pca_explained_variance(table, pca_components);
      std::ofstream out(pca_out);
      if (!out) throw fs::DataError("cannot write " + pca_out);
      out << "component,explained_variance_ratio,cumulative\n";
      char buf[96];
      for (std::size_t i = 0; i < result.explained_variance_ratio.size(); ++i) {
        std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g\n", i + 1, result.explained_variance_ratio[i], result.cumulative[i]);
        out << buf;
      }
      std::printf("%zu components over %zu columns written to %s\n", result.explained_variance_ratio.size(),
                  result.columns.size(), pca_out.c_str());
    } else if (*bench) {
      bench_opts.out_dir = bench_dir;
      bench_opts.mode = fs::parse_binning_mode(bench_mode);
      bench_opts.learning_rate = bench_lr;
      if (bench_opts.alphabet_size < 2) throw fs::UsageError("--k must be at least 2");
      const auto result = fs::run_benchmark(bench_opts, &std::cout);
      fs::write_bench_summary(result, std::cout, true);
    }
  } catch (const fs::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(e.code());
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return static_cast<int>(fs::ExitCode::kData);
  }
  return 0;
}
