#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "flowsynth/codec.hpp"
#include "flowsynth/flow_table.hpp"
#include "flowsynth/matrix.hpp"

namespace flowsynth {

// Per-column affine map to zero mean and unit (population) variance.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  // Throws DataError on an empty matrix or a zero-variance column.
  static Standardizer fit(const Matrix& data);
  Matrix apply(const Matrix& data) const;
};

// Standardized features mapped onto the unit sphere with an extra constant
// coordinate: phi(x) = (z, c) / |(z, c)| with c = sqrt(d). A linear
// one-class SVM in this space bounds a cap around the data instead of a
// half-space through the mean.
Matrix lift(const Standardizer& standardizer, const Matrix& data);

struct OcsvmOptions {
  double nu = 0.1;
  // Passes over the data; 0 picks enough passes for about 200k updates.
  std::size_t epochs = 0;
  std::uint64_t seed = 0;
};

struct OcsvmModel {
  Standardizer standardizer;
  std::vector<double> w;  // over the lifted space (d + 1 coordinates)
  double rho = 0.0;
  double nu = 0.1;
  double objective = 0.0;
  double training_outlier_fraction = 0.0;
  std::size_t epochs = 0;

  // d(x) = w . phi(x) - rho for every row of `data` (raw feature space).
  std::vector<double> decision(const Matrix& data) const;
};

// min 1/2 |w|^2 + 1/(nu n) sum max(0, rho - w.phi_i) - rho over lifted rows.
double ocsvm_objective(std::span<const double> w, double rho, const Matrix& lifted, double nu);
// rho minimizing the objective for fixed w: the ceil(nu n)-th smallest projection.
double optimal_rho(std::span<const double> w, const Matrix& lifted, double nu);

struct OcsvmSolution {
  std::vector<double> w;
  double rho = 0.0;
  double objective = 0.0;
  std::size_t epochs = 0;
};

// Shuffled subgradient descent with step 1/t and suffix averaging, then the
// exact offset for the averaged weights. Works on already lifted rows.
OcsvmSolution solve_ocsvm(const Matrix& lifted, double nu, std::size_t epochs = 0, std::uint64_t seed = 0);

// Standardizes, lifts and solves. Throws ConvergenceError when the training
// outlier fraction leaves [nu - 0.05, nu + 0.02].
OcsvmModel fit_ocsvm(const Matrix& real, const OcsvmOptions& options = {});

// Percentage of rows with d(x) >= 0.
double inlier_rate(const OcsvmModel& model, const Matrix& data);

// 1/2 sum |p_i - q_i| for two discrete distributions.
double tv_distance(std::span<const double> p, std::span<const double> q);
// Histograms both columns over `edges` (values clamp into the edge bins).
double marginal_tv_distance(std::span<const double> real, std::span<const double> synth,
                            std::span<const double> edges);

struct DiscriminativeOptions {
  std::size_t epochs = 500;
  double learning_rate = 0.1;
  double train_fraction = 0.7;
  std::uint64_t seed = 0;
};

// Logistic regression real (1) vs synthetic (0) on standardized features with
// balanced classes; returns max(test accuracy, 1 - test accuracy).
double discriminative_score(const Matrix& real, const Matrix& synth, const DiscriminativeOptions& options = {});

// Codebook features as columns: numeric values as-is, categories as their
// symbol ids (overflow for anything unmapped).
Matrix feature_matrix(const FlowTable& table, const Codebook& codebook);

// Replaces every numeric feature value by its bin midpoint, i.e. what a
// decoded sequence would carry. Idempotent; categorical ids are unchanged.
void quantize_numeric(Matrix& features, const Codebook& codebook);

// Explained-variance ratios of the covariance of `data` after applying
// `standardizer`; all zero when the data has no variance.
std::vector<double> explained_variance_ratios(const Matrix& data, const Standardizer& standardizer);

struct EvalReport {
  double nu = 0.1;
  double inlier_pct = 0.0;
  double real_holdout_inlier_pct = 0.0;
  double training_outlier_fraction = 0.0;
  std::vector<std::string> features;
  std::vector<double> tv_distances;
  std::vector<double> pca_real;
  std::vector<double> pca_synth;
  std::vector<double> pca_drift;
  double discriminative_accuracy = 0.5;
  std::size_t real_train_rows = 0;
  std::size_t real_holdout_rows = 0;
  std::size_t synth_rows = 0;
  std::vector<std::string> dropped_features;  // constant in the real training split

  double mean_tv() const;
  double max_pca_drift() const;
};

// Both tables are compared at the codebook's resolution (see
// quantize_numeric), so discretization error is not charged to the model.
EvalReport evaluate(const FlowTable& real, const FlowTable& synth, const Codebook& codebook, double nu,
                    std::uint64_t seed);

void write_report_text(const EvalReport& report, std::ostream& out);
void write_report_csv(std::span<const std::pair<std::string, EvalReport>> rows, std::ostream& out);

}  // namespace flowsynth
