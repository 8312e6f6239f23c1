#include "flowsynth/evaluator.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <ostream>
#include <stdexcept>

#include "flowsynth/error.hpp"
#include "flowsynth/pca.hpp"
#include "flowsynth/rng.hpp"

namespace flowsynth {

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

std::vector<double> projections(std::span<const double> w, const Matrix& lifted) {
  if (w.size() != lifted.cols) throw std::invalid_argument("weight width does not match lifted data");
  std::vector<double> p(lifted.rows);
  for (std::size_t i = 0; i < lifted.rows; ++i) p[i] = dot(w, lifted.row(i));
  return p;
}

void shuffle(std::vector<std::size_t>& v, Rng& rng) {
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
}

Matrix select_rows(const Matrix& m, std::span<const std::size_t> rows) {
  Matrix out(rows.size(), m.cols);
  for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(m.row(rows[i]).begin(), m.cols, out.row(i).begin());
  return out;
}

Matrix select_cols(const Matrix& m, std::span<const std::size_t> cols) {
  Matrix out(m.rows, cols.size());
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < cols.size(); ++j) out(i, j) = m(i, cols[j]);
  return out;
}

std::vector<double> column_stddev(const Matrix& m) {
  std::vector<double> mean(m.cols, 0.0), var(m.cols, 0.0);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) mean[j] += m(i, j);
  for (auto& v : mean) v /= static_cast<double>(m.rows);
  for (std::size_t i = 0; i < m.rows; ++i)
    for (std::size_t j = 0; j < m.cols; ++j) var[j] += (m(i, j) - mean[j]) * (m(i, j) - mean[j]);
  for (auto& v : var) v = std::sqrt(v / static_cast<double>(m.rows));
  return var;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

std::vector<double> histogram(std::span<const SymbolId> ids, std::size_t bins) {
  std::vector<double> h(bins, 0.0);
  for (auto id : ids) h[static_cast<std::size_t>(id)] += 1.0;
  if (!ids.empty())
    for (auto& v : h) v /= static_cast<double>(ids.size());
  return h;
}

}  // namespace

Standardizer Standardizer::fit(const Matrix& data) {
  if (data.rows == 0 || data.cols == 0) throw DataError("cannot standardize an empty matrix");
  Standardizer s;
  s.mean.assign(data.cols, 0.0);
  for (std::size_t i = 0; i < data.rows; ++i)
    for (std::size_t j = 0; j < data.cols; ++j) s.mean[j] += data(i, j);
  for (auto& m : s.mean) m /= static_cast<double>(data.rows);
  s.stddev.assign(data.cols, 0.0);
  for (std::size_t i = 0; i < data.rows; ++i)
    for (std::size_t j = 0; j < data.cols; ++j) {
      const double c = data(i, j) - s.mean[j];
      s.stddev[j] += c * c;
    }
  for (std::size_t j = 0; j < data.cols; ++j) {
    s.stddev[j] = std::sqrt(s.stddev[j] / static_cast<double>(data.rows));
    if (!(s.stddev[j] > 0.0) || !std::isfinite(s.stddev[j])) {
      throw DataError("feature " + std::to_string(j) + " has zero variance; cannot standardize");
    }
  }
  return s;
}

Matrix Standardizer::apply(const Matrix& data) const {
  if (data.cols != mean.size()) {
    throw DataError("feature count mismatch: " + std::to_string(data.cols) + " vs " + std::to_string(mean.size()));
  }
  Matrix out(data.rows, data.cols);
  for (std::size_t i = 0; i < data.rows; ++i)
    for (std::size_t j = 0; j < data.cols; ++j) out(i, j) = (data(i, j) - mean[j]) / stddev[j];
  return out;
}

Matrix lift(const Standardizer& standardizer, const Matrix& data) {
  const Matrix z = standardizer.apply(data);
  const std::size_t d = z.cols;
  const double c = std::sqrt(static_cast<double>(d));
  Matrix out(z.rows, d + 1);
  for (std::size_t i = 0; i < z.rows; ++i) {
    double norm = c * c;
    for (std::size_t j = 0; j < d; ++j) norm += z(i, j) * z(i, j);
    norm = std::sqrt(norm);
    for (std::size_t j = 0; j < d; ++j) out(i, j) = z(i, j) / norm;
    out(i, d) = c / norm;
  }
  return out;
}

std::vector<double> OcsvmModel::decision(const Matrix& data) const {
  auto p = projections(w, lift(standardizer, data));
  for (auto& v : p) v -= rho;
  return p;
}

double ocsvm_objective(std::span<const double> w, double rho, const Matrix& lifted, double nu) {
  const auto p = projections(w, lifted);
  double hinge = 0.0;
  for (double v : p) hinge += std::max(0.0, rho - v);
  return 0.5 * dot(w, w) + hinge / (nu * static_cast<double>(lifted.rows)) - rho;
}

double optimal_rho(std::span<const double> w, const Matrix& lifted, double nu) {
  if (lifted.rows == 0) throw DataError("no rows");
  auto p = projections(w, lifted);
  const auto k = static_cast<std::size_t>(std::ceil(nu * static_cast<double>(p.size()) - 1e-12));
  const std::size_t idx = std::clamp<std::size_t>(k, 1, p.size()) - 1;
  std::nth_element(p.begin(), p.begin() + static_cast<std::ptrdiff_t>(idx), p.end());
  return p[idx];
}

OcsvmSolution solve_ocsvm(const Matrix& lifted, double nu, std::size_t epochs, std::uint64_t seed) {
  if (!(nu > 0.0 && nu < 1.0)) throw UsageError("nu must lie in (0, 1)");
  if (lifted.rows == 0) throw DataError("one-class SVM needs training rows");
  const std::size_t n = lifted.rows, dim = lifted.cols;
  OcsvmSolution sol;
  sol.epochs = epochs ? epochs : std::max<std::size_t>(5, (200000 + n - 1) / n);

  Rng rng(derive_seed(seed, "ocsvm"));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::vector<double> w(dim, 0.0), avg(dim, 0.0);
  double rho = 0.0;
  const double inv_nu = 1.0 / nu;
  const std::size_t total = sol.epochs * n;
  const std::size_t average_from = total / 2;
  std::size_t averaged = 0;
  std::size_t t = 0;
  for (std::size_t e = 0; e < sol.epochs; ++e) {
    shuffle(order, rng);
    for (auto i : order) {
      ++t;
      const double eta = 1.0 / static_cast<double>(t);
      const auto row = lifted.row(i);
      const bool active = rho > dot(w, row);
      for (std::size_t j = 0; j < dim; ++j) w[j] -= eta * (w[j] - (active ? inv_nu * row[j] : 0.0));
      rho -= eta * ((active ? inv_nu : 0.0) - 1.0);
      if (t > average_from) {
        ++averaged;
        for (std::size_t j = 0; j < dim; ++j) avg[j] += (w[j] - avg[j]) / static_cast<double>(averaged);
      }
    }
  }
  sol.w = avg;
  sol.rho = optimal_rho(sol.w, lifted, nu);
  sol.objective = ocsvm_objective(sol.w, sol.rho, lifted, nu);
  return sol;
}

OcsvmModel fit_ocsvm(const Matrix& real, const OcsvmOptions& options) {
  if (!(options.nu > 0.0 && options.nu < 1.0)) throw UsageError("nu must lie in (0, 1)");
  if (real.rows < 100) {
    throw DataError("one-class SVM needs at least 100 training rows, got " + std::to_string(real.rows));
  }
  OcsvmModel model;
  model.nu = options.nu;
  model.standardizer = Standardizer::fit(real);
  const Matrix x = lift(model.standardizer, real);
  auto sol = solve_ocsvm(x, options.nu, options.epochs, options.seed);
  model.w = std::move(sol.w);
  model.rho = sol.rho;
  model.objective = sol.objective;
  model.epochs = sol.epochs;
  std::size_t outliers = 0;
  for (double p : projections(model.w, x))
    if (p - model.rho < 0.0) ++outliers;
  model.training_outlier_fraction = static_cast<double>(outliers) / static_cast<double>(x.rows);
  if (model.training_outlier_fraction < options.nu - 0.05 || model.training_outlier_fraction > options.nu + 0.02) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "one-class SVM did not reach the nu-property: training outlier fraction %.4f, nu %.4f",
                  model.training_outlier_fraction, options.nu);
    throw ConvergenceError(buf);
  }
  return model;
}

double inlier_rate(const OcsvmModel& model, const Matrix& data) {
  if (data.rows == 0) throw DataError("cannot score an empty data set");
  std::size_t inside = 0;
  for (double d : model.decision(data))
    if (d >= 0.0) ++inside;
  return 100.0 * static_cast<double>(inside) / static_cast<double>(data.rows);
}

double tv_distance(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw std::invalid_argument("distributions have different supports");
  double s = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) s += std::abs(p[i] - q[i]);
  return 0.5 * s;
}

double marginal_tv_distance(std::span<const double> real, std::span<const double> synth,
                            std::span<const double> edges) {
  if (edges.size() < 2) throw std::invalid_argument("need at least two bin edges");
  if (real.empty() || synth.empty()) throw DataError("cannot compare empty columns");
  const std::size_t bins = edges.size() - 1;
  auto hist = [&](std::span<const double> col) {
    std::vector<double> h(bins, 0.0);
    for (double v : col) {
      const auto it = std::upper_bound(edges.begin() + 1, edges.end() - 1, v);
      h[static_cast<std::size_t>(it - (edges.begin() + 1))] += 1.0;
    }
    for (auto& x : h) x /= static_cast<double>(col.size());
    return h;
  };
  return tv_distance(hist(real), hist(synth));
}

double discriminative_score(const Matrix& real, const Matrix& synth, const DiscriminativeOptions& options) {
  if (real.rows < 200 || synth.rows < 200) {
    throw DataError("discriminative score needs at least 200 rows per side (real " + std::to_string(real.rows) +
                    ", synthetic " + std::to_string(synth.rows) + ")");
  }
  if (real.cols != synth.cols) throw DataError("real and synthetic feature counts differ");
  Rng rng(derive_seed(options.seed, "discriminative"));
  const std::size_t m = std::min(real.rows, synth.rows);
  auto pick = [&](std::size_t n) {
    std::vector<std::size_t> idx(n);
    std::iota(idx.begin(), idx.end(), 0);
    shuffle(idx, rng);
    idx.resize(m);
    std::sort(idx.begin(), idx.end());
    return idx;
  };
  const auto ri = pick(real.rows);
  const auto si = pick(synth.rows);
  // (is_real, row)
  std::vector<std::pair<int, std::size_t>> pool;
  for (auto i : ri) pool.emplace_back(1, i);
  for (auto i : si) pool.emplace_back(0, i);
  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
  const auto n_train = static_cast<std::size_t>(options.train_fraction * static_cast<double>(pool.size()));
  if (n_train == 0 || n_train >= pool.size()) throw DataError("degenerate train/test split");

  const std::size_t d = real.cols;
  Matrix x(pool.size(), d);
  std::vector<double> y(pool.size());
  for (std::size_t i = 0; i < pool.size(); ++i) {
    const Matrix& src = pool[i].first ? real : synth;
    std::copy_n(src.row(pool[i].second).begin(), d, x.row(i).begin());
    y[i] = pool[i].first;
  }
  double positives = 0.0;
  for (std::size_t i = 0; i < n_train; ++i) positives += y[i];
  if (positives == 0.0 || positives == static_cast<double>(n_train)) throw DataError("degenerate train/test split");

  // Standardize on the training part; columns constant there carry no signal.
  std::vector<double> mean(d, 0.0), sd(d, 0.0);
  for (std::size_t i = 0; i < n_train; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += x(i, j);
  for (auto& v : mean) v /= static_cast<double>(n_train);
  for (std::size_t i = 0; i < n_train; ++i)
    for (std::size_t j = 0; j < d; ++j) sd[j] += (x(i, j) - mean[j]) * (x(i, j) - mean[j]);
  for (auto& v : sd) v = std::sqrt(v / static_cast<double>(n_train));
  for (std::size_t i = 0; i < x.rows; ++i)
    for (std::size_t j = 0; j < d; ++j) x(i, j) = sd[j] > 0.0 ? (x(i, j) - mean[j]) / sd[j] : 0.0;

  std::vector<double> w(d, 0.0), grad(d);
  double b = 0.0;
  for (std::size_t e = 0; e < options.epochs; ++e) {
    std::fill(grad.begin(), grad.end(), 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n_train; ++i) {
      const double r = sigmoid(dot(w, x.row(i)) + b) - y[i];
      for (std::size_t j = 0; j < d; ++j) grad[j] += r * x(i, j);
      gb += r;
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= options.learning_rate * grad[j] / static_cast<double>(n_train);
    b -= options.learning_rate * gb / static_cast<double>(n_train);
  }
  std::size_t correct = 0;
  for (std::size_t i = n_train; i < pool.size(); ++i) {
    const double p = sigmoid(dot(w, x.row(i)) + b);
    if ((p >= 0.5 ? 1.0 : 0.0) == y[i]) ++correct;
  }
  const double acc = static_cast<double>(correct) / static_cast<double>(pool.size() - n_train);
  return std::max(acc, 1.0 - acc);
}

Matrix feature_matrix(const FlowTable& table, const Codebook& codebook) {
  const auto& features = codebook.features();
  Matrix out(table.rows(), features.size());
  for (std::size_t j = 0; j < features.size(); ++j) {
    const auto* spec = table.find(features[j].name);
    if (!spec) throw DataError("unknown feature '" + features[j].name + "' in table");
    if (features[j].is_numeric()) {
      if (spec->kind == ColumnKind::kCategorical) throw DataError("feature '" + features[j].name + "' is not numeric");
      const auto col = table.numeric_column(features[j].name);
      for (std::size_t i = 0; i < col.size(); ++i) out(i, j) = col[i];
    } else {
      if (spec->kind != ColumnKind::kCategorical) throw DataError("feature '" + features[j].name + "' is not categorical");
      const auto& col = table.categorical_column(features[j].name);
      for (std::size_t i = 0; i < col.size(); ++i) out(i, j) = codebook.encode_category(j, col[i]);
    }
  }
  return out;
}

void quantize_numeric(Matrix& features, const Codebook& codebook) {
  const auto& specs = codebook.features();
  if (features.cols != specs.size()) throw DataError("feature count does not match the codebook");
  for (std::size_t j = 0; j < specs.size(); ++j) {
    if (!specs[j].is_numeric()) continue;
    for (std::size_t i = 0; i < features.rows; ++i) {
      features(i, j) = codebook.decode_value(j, codebook.encode_value(j, features(i, j)));
    }
  }
}

std::vector<double> explained_variance_ratios(const Matrix& data, const Standardizer& standardizer) {
  const Matrix z = standardizer.apply(data);
  const std::size_t d = z.cols;
  std::vector<double> mean(d, 0.0), cov(d * d, 0.0);
  if (z.rows == 0) return std::vector<double>(d, 0.0);
  for (std::size_t i = 0; i < z.rows; ++i)
    for (std::size_t j = 0; j < d; ++j) mean[j] += z(i, j);
  for (auto& m : mean) m /= static_cast<double>(z.rows);
  for (std::size_t i = 0; i < z.rows; ++i)
    for (std::size_t a = 0; a < d; ++a)
      for (std::size_t b = a; b < d; ++b) cov[a * d + b] += (z(i, a) - mean[a]) * (z(i, b) - mean[b]);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov[a * d + b] /= static_cast<double>(z.rows);
      cov[b * d + a] = cov[a * d + b];
    }
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov[a * d + a];
  if (!(trace > 0.0)) return std::vector<double>(d, 0.0);
  auto eig = symmetric_eigenvalues(std::move(cov), d);
  for (auto& v : eig) v = std::max(0.0, v) / trace;
  return eig;
}

double EvalReport::mean_tv() const {
  if (tv_distances.empty()) return 0.0;
  return std::accumulate(tv_distances.begin(), tv_distances.end(), 0.0) / static_cast<double>(tv_distances.size());
}

double EvalReport::max_pca_drift() const {
  return pca_drift.empty() ? 0.0 : *std::max_element(pca_drift.begin(), pca_drift.end());
}

EvalReport evaluate(const FlowTable& real, const FlowTable& synth, const Codebook& codebook, double nu,
                    std::uint64_t seed) {
  Matrix r = feature_matrix(real, codebook);
  Matrix s = feature_matrix(synth, codebook);
  quantize_numeric(r, codebook);
  quantize_numeric(s, codebook);
  if (s.rows == 0) throw DataError("synthetic table is empty");

  EvalReport rep;
  rep.nu = nu;
  rep.synth_rows = s.rows;
  for (const auto& f : codebook.features()) rep.features.push_back(f.name);

  std::vector<std::size_t> train_rows, holdout_rows;
  const std::uint64_t key = derive_seed(seed, "eval-split");
  for (std::size_t i = 0; i < r.rows; ++i) {
    const double u = static_cast<double>(mix64(key ^ mix64(i)) >> 11) * 0x1.0p-53;
    (u < 0.2 ? holdout_rows : train_rows).push_back(i);
  }
  if (holdout_rows.empty()) throw DataError("real data too small for a holdout split");
  rep.real_train_rows = train_rows.size();
  rep.real_holdout_rows = holdout_rows.size();

  const Matrix r_train_all = select_rows(r, train_rows);
  const auto sd = column_stddev(r_train_all);
  std::vector<std::size_t> keep;
  for (std::size_t j = 0; j < sd.size(); ++j) {
    if (sd[j] > 0.0) {
      keep.push_back(j);
    } else {
      rep.dropped_features.push_back(rep.features[j]);
    }
  }
  if (keep.empty()) throw DataError("every feature is constant in the real data");

  const Matrix r_kept = select_cols(r, keep);
  const Matrix s_kept = select_cols(s, keep);
  const Matrix r_train = select_rows(r_kept, train_rows);
  const Matrix r_holdout = select_rows(r_kept, holdout_rows);

  const OcsvmModel model = fit_ocsvm(r_train, {nu, 0, derive_seed(seed, "ocsvm")});
  rep.training_outlier_fraction = model.training_outlier_fraction;
  rep.inlier_pct = inlier_rate(model, s_kept);
  rep.real_holdout_inlier_pct = inlier_rate(model, r_holdout);

  const auto& features = codebook.features();
  for (std::size_t j = 0; j < features.size(); ++j) {
    std::vector<double> rc(r.rows), sc(s.rows);
    for (std::size_t i = 0; i < r.rows; ++i) rc[i] = r(i, j);
    for (std::size_t i = 0; i < s.rows; ++i) sc[i] = s(i, j);
    if (const auto* bins = std::get_if<NumericBins>(&features[j].spec)) {
      rep.tv_distances.push_back(marginal_tv_distance(rc, sc, bins->edges));
    } else {
      const auto k = static_cast<std::size_t>(codebook.alphabet_size());
      std::vector<SymbolId> ri(rc.begin(), rc.end()), si(sc.begin(), sc.end());
      rep.tv_distances.push_back(tv_distance(histogram(ri, k), histogram(si, k)));
    }
  }

  const Standardizer pca_std = Standardizer::fit(r_kept);
  rep.pca_real = explained_variance_ratios(r_kept, pca_std);
  rep.pca_synth = explained_variance_ratios(s_kept, pca_std);
  for (std::size_t i = 0; i < rep.pca_real.size(); ++i) rep.pca_drift.push_back(std::abs(rep.pca_real[i] - rep.pca_synth[i]));

  rep.discriminative_accuracy = discriminative_score(r_kept, s_kept, {500, 0.1, 0.7, derive_seed(seed, "discriminative")});
  return rep;
}

void write_report_text(const EvalReport& report, std::ostream& out) {
  char buf[256];
  auto kv = [&](const char* key, double v) {
    std::snprintf(buf, sizeof buf, "%s: %.6f\n", key, v);
    out << buf;
  };
  kv("nu", report.nu);
  kv("inlier_pct", report.inlier_pct);
  kv("real_holdout_inlier_pct", report.real_holdout_inlier_pct);
  kv("training_outlier_fraction", report.training_outlier_fraction);
  kv("discriminative_accuracy", report.discriminative_accuracy);
  kv("mean_tv_distance", report.mean_tv());
  kv("max_pca_drift", report.max_pca_drift());
  out << "real_train_rows: " << report.real_train_rows << "\n";
  out << "real_holdout_rows: " << report.real_holdout_rows << "\n";
  out << "synth_rows: " << report.synth_rows << "\n";
  for (std::size_t j = 0; j < report.features.size(); ++j) {
    std::snprintf(buf, sizeof buf, "tv.%s: %.6f\n", report.features[j].c_str(), report.tv_distances[j]);
    out << buf;
  }
  for (std::size_t i = 0; i < report.pca_real.size(); ++i) {
    std::snprintf(buf, sizeof buf, "pca.%zu: real %.6f synth %.6f drift %.6f\n", i + 1, report.pca_real[i],
                  report.pca_synth[i], report.pca_drift[i]);
    out << buf;
  }
  for (const auto& f : report.dropped_features) out << "dropped_constant_feature: " << f << "\n";
}

void write_report_csv(std::span<const std::pair<std::string, EvalReport>> rows, std::ostream& out) {
  out << "model,nu,inlier_pct,real_holdout_inlier_pct,discriminative_accuracy,mean_tv_distance,max_pca_drift,synth_rows\n";
  char buf[256];
  for (const auto& [name, r] : rows) {
    std::snprintf(buf, sizeof buf, ",%.4f,%.4f,%.4f,%.6f,%.6f,%.6f,%zu\n", r.nu, r.inlier_pct, r.real_holdout_inlier_pct,
                  r.discriminative_accuracy, r.mean_tv(), r.max_pca_drift(), r.synth_rows);
    out << name << buf;
  }
}

}  // namespace flowsynth
