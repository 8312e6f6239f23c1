#pragma once

#include <cstddef>
#include <vector>

#include "flowsynth/flow_table.hpp"
#include "flowsynth/matrix.hpp"

namespace flowsynth {

struct PcaResult {
  std::vector<double> explained_variance_ratio;  // descending, each in [0, 1]
  std::vector<double> cumulative;
  std::vector<std::string> columns;  // columns that entered the decomposition
};

// Eigenvalues of a symmetric n x n matrix (row-major), sorted descending.
// Cyclic Jacobi rotations until the off-diagonal Frobenius norm is below `tol`.
std::vector<double> symmetric_eigenvalues(std::vector<double> a, std::size_t n, double tol = 1e-10);

// Standardizes every column (mean 0, variance 1) and returns the sample
// correlation matrix. Zero-variance columns must be removed by the caller.
std::vector<double> correlation_matrix(const Matrix& data);

// Ratios over all usable columns; at most `max_components` are reported.
PcaResult pca_explained_variance(const Matrix& data, std::size_t max_components);
// Uses every numeric/timestamp column that is not constant.
PcaResult pca_explained_variance(const FlowTable& table, std::size_t max_components);

}  // namespace flowsynth
