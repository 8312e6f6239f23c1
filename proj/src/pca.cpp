#include "flowsynth/pca.hpp"

#include <algorithm>
#include <cmath>
#include <functional>

#include "flowsynth/error.hpp"

namespace flowsynth {

std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n, double tol) {
  auto at = [&](std::size_t i, std::size_t j) -> double& { return a[i * n + j]; };
  auto off_norm = [&] {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j)
        if (i != j) s += at(i, j) * at(i, j);
    return std::sqrt(s);
  };
  constexpr int kMaxSweeps = 100;
  for (int sweep = 0; sweep < kMaxSweeps && off_norm() > tol; ++sweep) {
    for (std::size_t p = 0; p + 1 < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = at(p, q);
        if (apq == 0.0) continue;
        const double theta = (at(q, q) - at(p, p)) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = at(k, p), akq = at(k, q);
          at(k, p) = c * akp - s * akq;
          at(k, q) = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = at(p, k), aqk = at(q, k);
          at(p, k) = c * apk - s * aqk;
          at(q, k) = s * apk + c * aqk;
        }
      }
    }
  }
  std::vector<double> eig(n);
  for (std::size_t i = 0; i < n; ++i) eig[i] = at(i, i);
  std::sort(eig.begin(), eig.end(), std::greater<>());
  return eig;
}

std::vector<double> correlation_matrix(const Matrix& data) {
  const std::size_t n = data.rows, p = data.cols;
  if (n < 2) throw DataError("correlation needs at least 2 rows");
  std::vector<double> mean(p, 0.0), sd(p, 0.0);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < p; ++c) mean[c] += data(r, c);
  for (auto& m : mean) m /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < p; ++c) sd[c] += (data(r, c) - mean[c]) * (data(r, c) - mean[c]);
  for (std::size_t c = 0; c < p; ++c) {
    sd[c] = std::sqrt(sd[c] / static_cast<double>(n - 1));
    if (!(sd[c] > 0.0)) throw DataError("zero-variance column in correlation input");
  }
  std::vector<double> cov(p * p, 0.0);
  std::vector<double> z(p);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < p; ++c) z[c] = (data(r, c) - mean[c]) / sd[c];
    for (std::size_t i = 0; i < p; ++i)
      for (std::size_t j = i; j < p; ++j) cov[i * p + j] += z[i] * z[j];
  }
  for (std::size_t i = 0; i < p; ++i) {
    for (std::size_t j = i; j < p; ++j) {
      cov[i * p + j] /= static_cast<double>(n - 1);
      cov[j * p + i] = cov[i * p + j];
    }
  }
  return cov;
}

PcaResult pca_explained_variance(const Matrix& data, std::size_t max_components) {
  if (data.cols < 2) throw DataError("PCA needs at least 2 usable numeric columns, got " + std::to_string(data.cols));
  if (data.rows < 2) throw DataError("PCA needs at least 2 rows");
  auto eig = symmetric_eigenvalues(correlation_matrix(data), data.cols);
  double trace = 0.0;
  for (auto& e : eig) {
    e = std::max(e, 0.0);
    trace += e;
  }
  PcaResult result;
  double running = 0.0;
  const std::size_t m = std::min(max_components, eig.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double ratio = eig[i] / trace;
    running += ratio;
    result.explained_variance_ratio.push_back(ratio);
    result.cumulative.push_back(running);
  }
  return result;
}

PcaResult pca_explained_variance(const FlowTable& table, std::size_t max_components) {
  std::vector<const ColumnSpec*> usable;
  for (const auto& spec : table.schema()) {
    if (!spec.is_numeric() || spec.constant) continue;
    const double first = table.rows() ? table.numeric(0, spec.slot) : 0.0;
    bool varies = false;
    for (std::size_t r = 1; r < table.rows() && !varies; ++r) varies = table.numeric(r, spec.slot) != first;
    if (varies) usable.push_back(&spec);
  }
  Matrix m(table.rows(), usable.size());
  for (std::size_t r = 0; r < table.rows(); ++r)
    for (std::size_t c = 0; c < usable.size(); ++c) m(r, c) = table.numeric(r, usable[c]->slot);
  auto result = pca_explained_variance(m, max_components);
  for (const auto* spec : usable) result.columns.push_back(spec->name);
  return result;
}

}  // namespace flowsynth
