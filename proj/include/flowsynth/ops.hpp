#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "flowsynth/tensor.hpp"

namespace flowsynth {

// All ops treat the last dimension as the feature dimension and fold the
// leading dimensions into rows unless stated otherwise.

Tensor matmul(const Tensor& a, const Tensor& b);                      // [m,k]x[k,n]
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias = {});  // [...,k]x[k,n] + [n]
Tensor add(const Tensor& a, const Tensor& b);                         // same shape
Tensor scale(const Tensor& x, float factor);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
// Weighted sum sum_i w_i x_i; handy for gradient checks.
Tensor weighted_sum(const Tensor& x, std::span<const float> weights);

Tensor tanh_act(const Tensor& x);
// Derivative at exactly zero is zero.
Tensor relu_act(const Tensor& x);

// Row-wise softmax over the last dimension with max subtraction. Throws on NaN.
Tensor softmax_rows(const Tensor& logits);

// Sum of per-position negative log-likelihoods divided by `divisor` (the
// number of sequences the rows belong to). Gradient: (softmax - onehot)/divisor.
Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, double divisor);

// Row gather: output shape [ids.size(), d]. Gradient scatter-adds.
Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids);

enum class NormMode { kTrain, kEval };

struct RunningStats {
  std::vector<float> mean;
  std::vector<float> var;

  explicit RunningStats(std::size_t dim = 0) : mean(dim, 0.0f), var(dim, 1.0f) {}
  bool operator==(const RunningStats&) const = default;
};

inline constexpr float kNormEps = 1e-5f;
inline constexpr float kBatchNormMomentum = 0.1f;

// Per-feature normalization over all rows. Train mode uses batch statistics
// (population variance) and updates `running`; Eval mode uses `running`.
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormMode mode, RunningStats& running,
                  float momentum = kBatchNormMomentum, float eps = kNormEps);

// Per-row normalization over the last dimension.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps = kNormEps);

// y(t) = sum_k x(t - dilation*k) * filters[k] (+ bias), zero for t - dilation*k < 0.
// x: [T,Cin] or [B,T,Cin]; filters: [K,Cin,Cout]; bias: [Cout] or undefined.
Tensor causal_conv1d(const Tensor& x, const Tensor& filters, std::size_t dilation, const Tensor& bias = {});

// Causally masked multi-head scaled dot-product attention.
// q, k, v: [B,T,d] with d divisible by heads. Position t attends to s <= t only.
Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);

// h_t = tanh(x_t Wx + h_{t-1} Wh + b), h_{-1} = 0. x: [B,T,din] -> [B,T,h].
Tensor rnn_tanh(const Tensor& x, const Tensor& wx, const Tensor& wh, const Tensor& b);

}  // namespace flowsynth
