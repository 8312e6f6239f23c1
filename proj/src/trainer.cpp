#include "flowsynth/trainer.hpp"

#include <zlib.h>

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>

#include "flowsynth/error.hpp"

namespace flowsynth {

namespace {

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_hex(const std::string& text) {
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (end == text.c_str() || *end != '\0') throw DataError("checkpoint: bad number '" + text + "'");
  return v;
}

std::size_t parse_size(const std::string& text) {
  char* end = nullptr;
  const unsigned long long v = std::strtoull(text.c_str(), &end, 10);
  if (text.empty() || *end != '\0') throw DataError("checkpoint: bad integer '" + text + "'");
  return static_cast<std::size_t>(v);
}

template <typename T>
void put(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xFF));
}

void put_float(std::string& out, float value) {
  std::uint32_t bits;
  std::memcpy(&bits, &value, sizeof bits);
  put(out, bits);
}

class Reader {
 public:
  Reader(const std::string& bytes, std::size_t end) : bytes_(bytes), end_(end) {}

  template <typename T>
  T get() {
    need(sizeof(T));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  float get_float() {
    const auto bits = get<std::uint32_t>();
    float f;
    std::memcpy(&f, &bits, sizeof f);
    return f;
  }

  std::string get_string(std::size_t n) {
    need(n);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const noexcept { return pos_; }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > end_) throw DataError("truncated checkpoint");
  }

  const std::string& bytes_;
  std::size_t end_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(const std::string& bytes, std::size_t n) {
  uLong crc = crc32(0L, Z_NULL, 0);
  const auto* p = reinterpret_cast<const Bytef*>(bytes.data());
  while (n > 0) {
    const uInt chunk = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
    crc = crc32(crc, p, chunk);
    p += chunk;
    n -= chunk;
  }
  return static_cast<std::uint32_t>(crc);
}

std::string join_floats(const std::vector<float>& values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ' ';
    out += hex(values[i]);
  }
  return out;
}

std::vector<float> split_floats(const std::string& text) {
  std::vector<float> out;
  std::istringstream in(text);
  std::string word;
  while (in >> word) out.push_back(static_cast<float>(parse_hex(word)));
  return out;
}

}  // namespace

std::string_view to_string(Optimizer opt) noexcept { return opt == Optimizer::kSgd ? "sgd" : "adam"; }

Optimizer parse_optimizer(std::string_view text) {
  if (text == "sgd") return Optimizer::kSgd;
  if (text == "adam") return Optimizer::kAdam;
  throw UsageError("unknown optimizer '" + std::string(text) + "' (expected adam or sgd)");
}

double TrainConfig::base_learning_rate() const {
  if (learning_rate) return *learning_rate;
  return optimizer == Optimizer::kSgd ? 0.1 : 3e-4;
}

double TrainConfig::learning_rate_at(std::size_t step) const {
  const double lr = base_learning_rate();
  if (decay && 3 * step >= 2 * max_steps) return lr * 0.1;
  return lr;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw UsageError("invalid training config: " + m); };
  if (batch_size < 1) fail("batch size must be positive");
  if (max_steps < 1) fail("step count must be positive");
  if (!(base_learning_rate() > 0.0) || !std::isfinite(base_learning_rate())) fail("learning rate must be positive");
  if (!(grad_clip_norm > 0.0)) fail("gradient clip norm must be positive");
  if (eval_every < 1) fail("eval interval must be positive");
  if (!(holdout_fraction > 0.0 && holdout_fraction < 0.5)) fail("holdout fraction must lie in (0, 0.5)");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0 && adam_eps > 0.0)) fail("bad Adam constants");
}

DatasetSplit split_dataset(std::size_t n_sequences, double holdout_fraction, std::uint64_t seed) {
  DatasetSplit split;
  const std::uint64_t key = derive_seed(seed, "holdout");
  for (std::size_t i = 0; i < n_sequences; ++i) {
    const double u = static_cast<double>(mix64(key ^ mix64(i)) >> 11) * 0x1.0p-53;
    (u < holdout_fraction ? split.holdout : split.train).push_back(i);
  }
  return split;
}

Batch make_batch(const SymbolDataset& data, std::span<const std::size_t> sequences) {
  if (data.length < 2) throw DataError("sequences must have at least 2 symbols to train on");
  if (sequences.empty()) throw DataError("empty batch");
  const std::size_t steps = data.length - 1;
  Batch b;
  b.inputs.batch = sequences.size();
  b.inputs.steps = steps;
  b.inputs.ids.reserve(sequences.size() * steps);
  b.targets.reserve(sequences.size() * steps);
  for (auto s : sequences) {
    const auto seq = data.sequence(s);
    b.inputs.ids.insert(b.inputs.ids.end(), seq.begin(), seq.end() - 1);
    b.targets.insert(b.targets.end(), seq.begin() + 1, seq.end());
  }
  return b;
}

BatchSampler::BatchSampler(const SymbolDataset& data, std::vector<std::size_t> pool, std::size_t batch_size,
                           std::uint64_t seed)
    : data_(&data), pool_(std::move(pool)), batch_size_(batch_size), rng_(seed) {
  if (pool_.empty()) throw DataError("no sequences to draw batches from");
  if (batch_size_ == 0) throw UsageError("batch size must be positive");
}

std::vector<std::size_t> BatchSampler::next_indices() {
  std::vector<std::size_t> idx(batch_size_);
  for (auto& i : idx) i = pool_[rng_.below(pool_.size())];
  return idx;
}

Batch BatchSampler::next() { return make_batch(*data_, next_indices()); }

double clip_grad_norm(std::span<const Tensor> params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params)
    for (float g : p.grad()) sq += static_cast<double>(g) * g;
  const double norm = std::sqrt(sq);
  if (std::isfinite(norm) && norm > max_norm) {
    const double factor = max_norm / (norm + 1e-12);
    for (const auto& p : params)
      for (auto& g : p.grad()) g = static_cast<float>(g * factor);
  }
  return norm;
}

void sgd_step(std::span<Tensor> params, double lr) {
  for (auto& p : params) {
    auto data = p.data();
    const auto grad = p.grad();
    for (std::size_t i = 0; i < data.size(); ++i) data[i] = static_cast<float>(data[i] - lr * grad[i]);
  }
}

void adam_step(std::span<Tensor> params, AdamState& state, double lr) {
  if (state.m.size() != params.size()) {
    state.m.assign(params.size(), {});
    state.v.assign(params.size(), {});
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.m[i].assign(params[i].numel(), 0.0);
      state.v[i].assign(params[i].numel(), 0.0);
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto data = params[i].data();
    const auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < data.size(); ++j) {
      const double g = grad[j];
      m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
      v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
      const double mhat = m[j] / c1;
      const double vhat = v[j] / c2;
      data[j] = static_cast<float>(data[j] - lr * mhat / (std::sqrt(vhat) + state.eps));
    }
  }
}

double evaluate_loss(Model& model, const SymbolDataset& data, std::span<const std::size_t> sequences,
                     std::size_t batch_size) {
  if (sequences.empty()) throw DataError("no sequences to evaluate");
  NoGradGuard guard;
  double total = 0.0;
  for (std::size_t start = 0; start < sequences.size(); start += batch_size) {
    const std::size_t count = std::min(batch_size, sequences.size() - start);
    const Batch b = make_batch(data, sequences.subspan(start, count));
    const Tensor logits = model.forward(b.inputs, NormMode::kEval);
    total += static_cast<double>(cross_entropy(logits, b.targets, 1.0).item());
  }
  return total / static_cast<double>(sequences.size() * (data.length - 1));
}

Trainer::Trainer(Model& model, const SymbolDataset& data, TrainConfig config)
    : model_(&model),
      data_(&data),
      config_(std::move(config)),
      split_(split_dataset(data.size(), config_.holdout_fraction, config_.seed)),
      sampler_(data, split_.train, config_.batch_size, derive_seed(config_.seed, "batches")) {
  config_.validate();
  if (data.size() == 0) throw DataError("empty dataset");
  if (data.length < 2) throw DataError("sequences must have at least 2 symbols to train on");
  if (static_cast<std::size_t>(data.vocab_size) != model.config.vocab_size) {
    throw UsageError("model vocabulary " + std::to_string(model.config.vocab_size) + " does not match dataset vocabulary " +
                     std::to_string(data.vocab_size));
  }
  if (model.config.arch != Arch::kRnn && model.config.context_length < data.length - 1) {
    throw UsageError("model context length " + std::to_string(model.config.context_length) +
                     " is shorter than the training inputs (" + std::to_string(data.length - 1) + ")");
  }
  adam_.beta1 = config_.beta1;
  adam_.beta2 = config_.beta2;
  adam_.eps = config_.adam_eps;
}

double Trainer::holdout_loss() {
  if (split_.holdout.empty()) return std::numeric_limits<double>::quiet_NaN();
  return evaluate_loss(*model_, *data_, split_.holdout);
}

double Trainer::step() {
  if (done()) throw std::logic_error("training already finished");
  const auto t0 = std::chrono::steady_clock::now();
  if (step_ == 0 && !split_.holdout.empty()) report_.holdout_loss.emplace_back(0, holdout_loss());

  const Batch batch = sampler_.next();
  auto& params = model_->params.tensors;
  for (auto& p : params) p.zero_grad();
  Tensor loss = cross_entropy(model_->forward(batch.inputs, NormMode::kTrain), batch.targets,
                              static_cast<double>(batch.inputs.batch));
  const double value = static_cast<double>(loss.item()) / static_cast<double>(batch.inputs.steps);
  if (step_ == 0) report_.initial_loss = value;
  if (!std::isfinite(value)) {
    throw DivergenceError("training diverged at step " + std::to_string(step_) + ": loss is not finite");
  }
  if (10 * step_ >= config_.max_steps && value > 2.0 * report_.initial_loss) {
    throw DivergenceError("training diverged at step " + std::to_string(step_) + ": loss " + std::to_string(value) +
                          " exceeds twice the initial loss " + std::to_string(report_.initial_loss));
  }
  loss.backward();
  const double norm = clip_grad_norm(params, config_.grad_clip_norm);
  if (!std::isfinite(norm)) {
    throw DivergenceError("training diverged at step " + std::to_string(step_) + ": gradient is not finite");
  }
  const double lr = config_.learning_rate_at(step_);
  if (config_.optimizer == Optimizer::kSgd) {
    sgd_step(params, lr);
  } else {
    adam_step(params, adam_, lr);
  }
  report_.train_loss.push_back(value);
  ++step_;
  report_.steps = step_;
  if (!split_.holdout.empty() && (step_ % config_.eval_every == 0 || step_ == config_.max_steps)) {
    report_.holdout_loss.emplace_back(step_, holdout_loss());
  }
  elapsed_ += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  report_.wall_seconds = elapsed_;
  return value;
}

TrainReport Trainer::finish() {
  while (!done()) step();
  return report_;
}

TrainReport train(Model& model, const SymbolDataset& data, const TrainConfig& config, const ProgressFn& progress) {
  Trainer trainer(model, data, config);
  while (!trainer.done()) {
    const double loss = trainer.step();
    if (progress) progress(trainer.steps_done() - 1, loss);
  }
  return trainer.report();
}

void write_loss_csv(const TrainReport& report, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << "step,loss\n";
  char buf[64];
  for (std::size_t i = 0; i < report.train_loss.size(); ++i) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g\n", i, report.train_loss[i]);
    out << buf;
  }
  if (!out) throw DataError("write failed: " + path.string());
}

void save_checkpoint(const Model& model, const std::filesystem::path& path,
                     const std::map<std::string, std::string>& extra) {
  const auto& c = model.config;
  std::string meta;
  auto line = [&meta](const std::string& key, const std::string& value) { meta += key + "=" + value + "\n"; };
  line("vocab_size", std::to_string(c.vocab_size));
  line("context_length", std::to_string(c.context_length));
  line("embed_dim", std::to_string(c.embed_dim));
  line("hidden_dim", std::to_string(c.hidden_dim));
  line("n_blocks", std::to_string(c.n_blocks));
  line("n_heads", std::to_string(c.n_heads));
  line("conv_kernel", std::to_string(c.conv_kernel));
  std::string dil;
  for (auto r : c.dilations) dil += (dil.empty() ? "" : ",") + std::to_string(r);
  line("dilations", dil);
  line("eps_init", hex(c.eps_init));
  for (std::size_t l = 0; l < model.params.running.size(); ++l) {
    line("running." + std::to_string(l) + ".mean", join_floats(model.params.running[l].mean));
    line("running." + std::to_string(l) + ".var", join_floats(model.params.running[l].var));
  }
  for (const auto& [key, value] : extra) {
    if (key.find_first_of("=\n") != std::string::npos || value.find('\n') != std::string::npos) {
      throw UsageError("checkpoint metadata key/value may not contain '=' or newlines: " + key);
    }
    line("x." + key, value);
  }

  std::string bytes = "FSYN";
  put<std::uint16_t>(bytes, kCheckpointVersion);
  put<std::uint16_t>(bytes, static_cast<std::uint16_t>(c.arch));
  put<std::uint32_t>(bytes, static_cast<std::uint32_t>(model.params.size()));
  put<std::uint32_t>(bytes, static_cast<std::uint32_t>(meta.size()));
  bytes += meta;
  for (std::size_t i = 0; i < model.params.size(); ++i) {
    const auto& name = model.params.names[i];
    const auto& t = model.params.tensors[i];
    put<std::uint16_t>(bytes, static_cast<std::uint16_t>(name.size()));
    bytes += name;
    put<std::uint8_t>(bytes, static_cast<std::uint8_t>(t.rank()));
    for (auto d : t.shape()) put<std::uint32_t>(bytes, static_cast<std::uint32_t>(d));
    for (float v : t.data()) put_float(bytes, v);
  }
  put<std::uint32_t>(bytes, crc_of(bytes, bytes.size()));

  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

Model load_checkpoint(const std::filesystem::path& path, std::map<std::string, std::string>* extra) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() < 4 || bytes.compare(0, 4, "FSYN") != 0) throw DataError("not a flowsynth checkpoint: " + path.string());
  if (bytes.size() < 20) throw DataError("truncated checkpoint");
  Reader header(bytes, bytes.size());
  header.get_string(4);
  const auto version = header.get<std::uint16_t>();
  if (version != kCheckpointVersion) {
    throw DataError("checkpoint version mismatch: found " + std::to_string(version) + ", expected " +
                    std::to_string(kCheckpointVersion));
  }
  const auto arch_tag = header.get<std::uint16_t>();
  const auto count = header.get<std::uint32_t>();
  const auto meta_len = header.get<std::uint32_t>();
  if (16 + static_cast<std::size_t>(meta_len) + 4 > bytes.size()) throw DataError("truncated checkpoint");
  const std::size_t body_end = bytes.size() - 4;
  Reader trailer(bytes, bytes.size());
  trailer.get_string(body_end);
  if (trailer.get<std::uint32_t>() != crc_of(bytes, body_end)) {
    throw DataError("checkpoint CRC mismatch (corrupted or truncated file)");
  }
  if (arch_tag < 1 || arch_tag > 3) throw DataError("checkpoint has unknown architecture tag " + std::to_string(arch_tag));

  Reader r(bytes, body_end);
  r.get_string(16);
  std::map<std::string, std::string> meta;
  {
    std::istringstream text(r.get_string(meta_len));
    std::string line;
    while (std::getline(text, line)) {
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw DataError("checkpoint metadata line without '=': " + line);
      meta[line.substr(0, eq)] = line.substr(eq + 1);
    }
  }
  auto field = [&meta](const std::string& key) -> const std::string& {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataError("checkpoint metadata missing '" + key + "'");
    return it->second;
  };
  ModelConfig c;
  c.arch = static_cast<Arch>(arch_tag);
  c.vocab_size = parse_size(field("vocab_size"));
  c.context_length = parse_size(field("context_length"));
  c.embed_dim = parse_size(field("embed_dim"));
  c.hidden_dim = parse_size(field("hidden_dim"));
  c.n_blocks = parse_size(field("n_blocks"));
  c.n_heads = parse_size(field("n_heads"));
  c.conv_kernel = parse_size(field("conv_kernel"));
  {
    std::istringstream dil(field("dilations"));
    std::string part;
    while (std::getline(dil, part, ',')) c.dilations.push_back(parse_size(part));
  }
  c.eps_init = parse_hex(field("eps_init"));
  try {
    c.validate();
  } catch (const UsageError& e) {
    throw DataError(std::string("checkpoint: ") + e.what());
  }

  Rng scratch(0);
  Model model{c, init_params(c, scratch)};
  if (count != model.params.size()) {
    throw DataError("checkpoint shape table inconsistency: " + std::to_string(count) + " tensors, config implies " +
                    std::to_string(model.params.size()));
  }
  for (std::size_t i = 0; i < count; ++i) {
    const auto name = r.get_string(r.get<std::uint16_t>());
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint32_t>();
    if (name != model.params.names[i] || shape != model.params.tensors[i].shape()) {
      throw DataError("checkpoint shape table inconsistency at '" + name + "' " + shape_to_string(shape) +
                      ", expected '" + model.params.names[i] + "' " + shape_to_string(model.params.tensors[i].shape()));
    }
    auto data = model.params.tensors[i].data();
    for (auto& v : data) v = r.get_float();
  }
  if (r.pos() != body_end) throw DataError("checkpoint has trailing bytes before the CRC");
  for (std::size_t l = 0; l < model.params.running.size(); ++l) {
    auto mean = split_floats(field("running." + std::to_string(l) + ".mean"));
    auto var = split_floats(field("running." + std::to_string(l) + ".var"));
    if (mean.size() != model.params.running[l].mean.size() || var.size() != mean.size()) {
      throw DataError("checkpoint running statistics have the wrong width");
    }
    model.params.running[l].mean = std::move(mean);
    model.params.running[l].var = std::move(var);
  }
  if (extra) {
    extra->clear();
    for (const auto& [key, value] : meta)
      if (key.rfind("x.", 0) == 0) (*extra)[key.substr(2)] = value;
  }
  return model;
}

}  // namespace flowsynth
