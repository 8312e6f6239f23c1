#include "flowsynth/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

#include "kernels.hpp"

namespace flowsynth {

namespace {

bool wants(const Tensor& t) { return t.defined() && t.requires_grad(); }

std::size_t last_dim(const Tensor& t) {
  if (t.rank() == 0) throw std::invalid_argument("expected a tensor with at least one dimension");
  return t.shape().back();
}

void require(bool ok, const std::string& what) {
  if (!ok) throw std::invalid_argument(what);
}

void check_vector(const Tensor& t, std::size_t n, const char* name) {
  require(t.defined() && t.rank() == 1 && t.dim(0) == n,
          std::string(name) + " must have shape [" + std::to_string(n) + "], got " +
              (t.defined() ? shape_to_string(t.shape()) : std::string("undefined")));
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  require(a.rank() == 2 && b.rank() == 2, "matmul expects rank-2 tensors");
  const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  require(b.dim(0) == k, "matmul shape mismatch: " + shape_to_string(a.shape()) + " x " + shape_to_string(b.shape()));
  std::vector<float> out(m * n);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data(), m, k, n, false);
  return Tensor::make_result({m, n}, std::move(out), {a, b}, [a, b, m, k, n](const Tensor& y) {
    const float* dy = y.grad().data();
    if (wants(a)) kernels::gemm_nt_acc(dy, b.data().data(), a.grad().data(), m, n, k);
    if (wants(b)) kernels::gemm_tn_acc(a.data().data(), dy, b.grad().data(), m, k, n);
  });
}

Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias) {
  require(weight.rank() == 2, "linear weight must be rank 2");
  const std::size_t k = weight.dim(0), n = weight.dim(1);
  require(last_dim(x) == k, "linear shape mismatch: " + shape_to_string(x.shape()) + " x " + shape_to_string(weight.shape()));
  if (bias.defined()) check_vector(bias, n, "linear bias");
  const std::size_t m = x.numel() / k;
  std::vector<float> out(m * n);
  if (bias.defined()) {
    for (std::size_t i = 0; i < m; ++i) std::copy(bias.data().begin(), bias.data().end(), out.begin() + i * n);
  }
  kernels::gemm_nn(x.data().data(), weight.data().data(), out.data(), m, k, n, bias.defined());
  Shape shape = x.shape();
  shape.back() = n;
  return Tensor::make_result(std::move(shape), std::move(out), {x, weight, bias},
                             [x, weight, bias, m, k, n](const Tensor& y) {
                               const float* dy = y.grad().data();
                               if (wants(x)) kernels::gemm_nt_acc(dy, weight.data().data(), x.grad().data(), m, n, k);
                               if (wants(weight)) kernels::gemm_tn_acc(x.data().data(), dy, weight.grad().data(), m, k, n);
                               if (wants(bias)) {
                                 auto db = bias.grad();
                                 for (std::size_t j = 0; j < n; ++j) {
                                   double s = 0.0;
                                   for (std::size_t i = 0; i < m; ++i) s += dy[i * n + j];
                                   db[j] += static_cast<float>(s);
                                 }
                               }
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require(a.shape() == b.shape(), "add shape mismatch: " + shape_to_string(a.shape()) + " vs " + shape_to_string(b.shape()));
  std::vector<float> out(a.numel());
  const auto da = a.data(), db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = da[i] + db[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b}, [a, b](const Tensor& y) {
    const auto dy = y.grad();
    if (wants(a)) {
      auto g = a.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    }
    if (wants(b)) {
      auto g = b.grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
    }
  });
}

Tensor scale(const Tensor& x, float factor) {
  std::vector<float> out(x.data().begin(), x.data().end());
  for (auto& v : out) v *= factor;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x, factor](const Tensor& y) {
    const auto dy = y.grad();
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * dy[i];
  });
}

Tensor reshape(const Tensor& x, Shape shape) {
  require(shape_numel(shape) == x.numel(), "reshape " + shape_to_string(x.shape()) + " -> " + shape_to_string(shape));
  std::vector<float> out(x.data().begin(), x.data().end());
  return Tensor::make_result(std::move(shape), std::move(out), {x}, [x](const Tensor& y) {
    const auto dy = y.grad();
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i];
  });
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (float v : x.data()) s += v;
  return Tensor::make_result({}, {static_cast<float>(s)}, {x}, [x](const Tensor& y) {
    const float dy = y.grad()[0];
    for (auto& g : x.grad()) g += dy;
  });
}

Tensor weighted_sum(const Tensor& x, std::span<const float> weights) {
  require(weights.size() == x.numel(), "weighted_sum: weight count mismatch");
  double s = 0.0;
  const auto d = x.data();
  for (std::size_t i = 0; i < d.size(); ++i) s += static_cast<double>(d[i]) * weights[i];
  std::vector<float> w(weights.begin(), weights.end());
  return Tensor::make_result({}, {static_cast<float>(s)}, {x}, [x, w = std::move(w)](const Tensor& y) {
    const float dy = y.grad()[0];
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy * w[i];
  });
}

Tensor tanh_act(const Tensor& x) {
  std::vector<float> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(d[i]);
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x](const Tensor& y) {
    const auto dy = y.grad();
    const auto yv = y.data();
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += dy[i] * (1.0f - yv[i] * yv[i]);
  });
}

Tensor relu_act(const Tensor& x) {
  std::vector<float> out(x.numel());
  const auto d = x.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = d[i] > 0.0f ? d[i] : 0.0f;
  return Tensor::make_result(x.shape(), std::move(out), {x}, [x](const Tensor& y) {
    const auto dy = y.grad();
    const auto xv = x.data();
    auto g = x.grad();
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0.0f) g[i] += dy[i];
    }
  });
}

Tensor softmax_rows(const Tensor& logits) {
  const std::size_t v = last_dim(logits);
  const std::size_t rows = logits.numel() / v;
  const auto z = logits.data();
  std::vector<float> out(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = z.data() + r * v;
    float mx = -std::numeric_limits<float>::infinity();
    for (std::size_t j = 0; j < v; ++j) {
      if (std::isnan(row[j])) throw std::invalid_argument("softmax_rows: NaN logit");
      mx = std::max(mx, row[j]);
    }
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < v; ++j) out[r * v + j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / total);
  }
  return Tensor::make_result(logits.shape(), std::move(out), {logits}, [logits, v, rows](const Tensor& y) {
    const auto dy = y.grad();
    const auto p = y.data();
    auto g = logits.grad();
    for (std::size_t r = 0; r < rows; ++r) {
      const double inner = kernels::dot(dy.data() + r * v, p.data() + r * v, v);
      for (std::size_t j = 0; j < v; ++j) {
        g[r * v + j] += static_cast<float>(p[r * v + j] * (dy[r * v + j] - inner));
      }
    }
  });
}

Tensor cross_entropy(const Tensor& logits, std::span<const std::int32_t> targets, double divisor) {
  const std::size_t v = last_dim(logits);
  const std::size_t rows = logits.numel() / v;
  require(targets.size() == rows, "cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                                      std::to_string(rows) + " rows");
  require(divisor > 0.0, "cross_entropy: divisor must be positive");
  const auto z = logits.data();
  std::vector<float> probs(z.size());
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    const auto t = targets[r];
    if (t < 0 || static_cast<std::size_t>(t) >= v) {
      throw std::out_of_range("cross_entropy: target " + std::to_string(t) + " outside [0," + std::to_string(v) + ")");
    }
    const float* row = z.data() + r * v;
    double mx = row[0];
    for (std::size_t j = 1; j < v; ++j) mx = std::max(mx, static_cast<double>(row[j]));
    double total = 0.0;
    for (std::size_t j = 0; j < v; ++j) total += std::exp(row[j] - mx);
    const double lse = mx + std::log(total);
    loss += lse - row[static_cast<std::size_t>(t)];
    for (std::size_t j = 0; j < v; ++j) probs[r * v + j] = static_cast<float>(std::exp(row[j] - lse));
  }
  std::vector<std::int32_t> tgt(targets.begin(), targets.end());
  return Tensor::make_result(
      {}, {static_cast<float>(loss / divisor)}, {logits},
      [logits, probs = std::move(probs), tgt = std::move(tgt), v, divisor](const Tensor& y) {
        const double dy = y.grad()[0] / divisor;
        auto g = logits.grad();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<float>(dy * probs[i]);
        for (std::size_t r = 0; r < tgt.size(); ++r) g[r * v + static_cast<std::size_t>(tgt[r])] -= static_cast<float>(dy);
      });
}

Tensor embedding_lookup(const Tensor& table, std::span<const std::int32_t> ids) {
  require(table.rank() == 2, "embedding table must be rank 2");
  const std::size_t vocab = table.dim(0), d = table.dim(1);
  std::vector<float> out(ids.size() * d);
  const auto t = table.data();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw std::out_of_range("embedding id " + std::to_string(ids[i]) + " outside [0," + std::to_string(vocab) + ")");
    }
    std::copy_n(t.begin() + static_cast<std::size_t>(ids[i]) * d, d, out.begin() + i * d);
  }
  std::vector<std::int32_t> idv(ids.begin(), ids.end());
  return Tensor::make_result({ids.size(), d}, std::move(out), {table}, [table, idv = std::move(idv), d](const Tensor& y) {
    const auto dy = y.grad();
    auto g = table.grad();
    for (std::size_t i = 0; i < idv.size(); ++i) {
      float* row = g.data() + static_cast<std::size_t>(idv[i]) * d;
      for (std::size_t j = 0; j < d; ++j) row[j] += dy[i * d + j];
    }
  });
}

Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, NormMode mode, RunningStats& running,
                  float momentum, float eps) {
  const std::size_t d = last_dim(x);
  const std::size_t n = x.numel() / d;
  check_vector(gamma, d, "batch_norm gamma");
  check_vector(beta, d, "batch_norm beta");
  require(running.mean.size() == d && running.var.size() == d, "batch_norm running stats size mismatch");
  const auto xv = x.data();
  std::vector<double> mean(d, 0.0), inv_std(d, 0.0);
  if (mode == NormMode::kTrain) {
    require(n >= 2, "batch_norm in train mode needs at least 2 rows, got " + std::to_string(n));
    std::vector<double> var(d, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) mean[j] += xv[i * d + j];
    for (auto& m : mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) {
        const double c = xv[i * d + j] - mean[j];
        var[j] += c * c;
      }
    for (std::size_t j = 0; j < d; ++j) {
      var[j] /= static_cast<double>(n);
      inv_std[j] = 1.0 / std::sqrt(var[j] + eps);
      running.mean[j] = static_cast<float>((1.0 - momentum) * running.mean[j] + momentum * mean[j]);
      running.var[j] = static_cast<float>((1.0 - momentum) * running.var[j] + momentum * var[j]);
    }
  } else {
    for (std::size_t j = 0; j < d; ++j) {
      mean[j] = running.mean[j];
      inv_std[j] = 1.0 / std::sqrt(static_cast<double>(running.var[j]) + eps);
    }
  }
  std::vector<float> xhat(x.numel()), out(x.numel());
  const auto gv = gamma.data(), bv = beta.data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (xv[i * d + j] - mean[j]) * inv_std[j];
      xhat[i * d + j] = static_cast<float>(h);
      out[i * d + j] = static_cast<float>(gv[j] * h + bv[j]);
    }
  const bool train = mode == NormMode::kTrain;
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d, train](const Tensor& y) {
        const auto dy = y.grad();
        const auto gv = gamma.data();
        std::vector<double> sum_dy(d, 0.0), sum_dy_xhat(d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t j = 0; j < d; ++j) {
            sum_dy[j] += dy[i * d + j];
            sum_dy_xhat[j] += static_cast<double>(dy[i * d + j]) * xhat[i * d + j];
          }
        if (wants(gamma)) {
          auto g = gamma.grad();
          for (std::size_t j = 0; j < d; ++j) g[j] += static_cast<float>(sum_dy_xhat[j]);
        }
        if (wants(beta)) {
          auto g = beta.grad();
          for (std::size_t j = 0; j < d; ++j) g[j] += static_cast<float>(sum_dy[j]);
        }
        if (wants(x)) {
          auto g = x.grad();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              const double dxhat = static_cast<double>(dy[i * d + j]) * gv[j];
              double dx;
              if (train) {
                dx = inv_std[j] * (dxhat - inv_n * gv[j] * (sum_dy[j] + xhat[i * d + j] * sum_dy_xhat[j]));
              } else {
                dx = inv_std[j] * dxhat;
              }
              g[i * d + j] += static_cast<float>(dx);
            }
        }
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const std::size_t d = last_dim(x);
  const std::size_t n = x.numel() / d;
  check_vector(gamma, d, "layer_norm gamma");
  check_vector(beta, d, "layer_norm beta");
  const auto xv = x.data();
  const auto gv = gamma.data(), bv = beta.data();
  std::vector<float> xhat(x.numel()), out(x.numel());
  std::vector<double> inv_std(n);
  for (std::size_t i = 0; i < n; ++i) {
    const float* row = xv.data() + i * d;
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    inv_std[i] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * inv_std[i];
      xhat[i * d + j] = static_cast<float>(h);
      out[i * d + j] = static_cast<float>(gv[j] * h + bv[j]);
    }
  }
  return Tensor::make_result(
      x.shape(), std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std), n, d](const Tensor& y) {
        const auto dy = y.grad();
        const auto gv = gamma.data();
        if (wants(gamma) || wants(beta)) {
          std::vector<double> dg(d, 0.0), db(d, 0.0);
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
              dg[j] += static_cast<double>(dy[i * d + j]) * xhat[i * d + j];
              db[j] += dy[i * d + j];
            }
          if (wants(gamma)) {
            auto g = gamma.grad();
            for (std::size_t j = 0; j < d; ++j) g[j] += static_cast<float>(dg[j]);
          }
          if (wants(beta)) {
            auto g = beta.grad();
            for (std::size_t j = 0; j < d; ++j) g[j] += static_cast<float>(db[j]);
          }
        }
        if (wants(x)) {
          auto g = x.grad();
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t i = 0; i < n; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double dxhat = static_cast<double>(dy[i * d + j]) * gv[j];
              s1 += dxhat;
              s2 += dxhat * xhat[i * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double dxhat = static_cast<double>(dy[i * d + j]) * gv[j];
              g[i * d + j] += static_cast<float>(inv_std[i] * (dxhat - inv_d * (s1 + xhat[i * d + j] * s2)));
            }
          }
        }
      });
}

Tensor causal_conv1d(const Tensor& x, const Tensor& filters, std::size_t dilation, const Tensor& bias) {
  require(x.rank() == 2 || x.rank() == 3, "causal_conv1d input must be [T,C] or [B,T,C]");
  require(filters.rank() == 3, "causal_conv1d filters must be [K,Cin,Cout]");
  require(dilation >= 1, "causal_conv1d dilation must be >= 1");
  const std::size_t batch = x.rank() == 3 ? x.dim(0) : 1;
  const std::size_t steps = x.dim(x.rank() - 2);
  const std::size_t cin = x.shape().back();
  const std::size_t taps = filters.dim(0), cout = filters.dim(2);
  require(taps >= 1, "causal_conv1d needs at least one tap");
  require(filters.dim(1) == cin, "causal_conv1d channel mismatch: input " + std::to_string(cin) + ", filters " +
                                     shape_to_string(filters.shape()));
  if (bias.defined()) check_vector(bias, cout, "causal_conv1d bias");

  // Column buffer: row (b,t) holds x(t), x(t-r), ..., x(t-r(K-1)); missing taps are zero.
  const std::size_t rows = batch * steps;
  const std::size_t width = taps * cin;
  std::vector<float> cols(rows * width, 0.0f);
  const auto xv = x.data();
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t k = 0; k < taps; ++k) {
        const std::size_t shift = dilation * k;
        if (shift > t) break;
        std::copy_n(xv.begin() + ((b * steps + t - shift) * cin), cin, cols.begin() + (b * steps + t) * width + k * cin);
      }
  std::vector<float> out(rows * cout, 0.0f);
  if (bias.defined()) {
    for (std::size_t r = 0; r < rows; ++r) std::copy(bias.data().begin(), bias.data().end(), out.begin() + r * cout);
  }
  kernels::gemm_nn(cols.data(), filters.data().data(), out.data(), rows, width, cout, bias.defined());
  Shape shape = x.shape();
  shape.back() = cout;
  return Tensor::make_result(
      std::move(shape), std::move(out), {x, filters, bias},
      [x, filters, bias, cols = std::move(cols), batch, steps, cin, taps, cout, dilation, rows, width](const Tensor& y) {
        const float* dy = y.grad().data();
        if (wants(filters)) kernels::gemm_tn_acc(cols.data(), dy, filters.grad().data(), rows, width, cout);
        if (wants(bias)) {
          auto db = bias.grad();
          for (std::size_t j = 0; j < cout; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < rows; ++r) s += dy[r * cout + j];
            db[j] += static_cast<float>(s);
          }
        }
        if (wants(x)) {
          std::vector<float> dcols(rows * width, 0.0f);
          kernels::gemm_nt_acc(dy, filters.data().data(), dcols.data(), rows, cout, width);
          auto g = x.grad();
          for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < steps; ++t)
              for (std::size_t k = 0; k < taps; ++k) {
                const std::size_t shift = dilation * k;
                if (shift > t) break;
                const float* src = dcols.data() + (b * steps + t) * width + k * cin;
                float* dst = g.data() + (b * steps + t - shift) * cin;
                for (std::size_t c = 0; c < cin; ++c) dst[c] += src[c];
              }
        }
      });
}

Tensor causal_self_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  require(q.rank() == 3, "attention expects [B,T,d] inputs");
  require(k.shape() == q.shape() && v.shape() == q.shape(), "attention q/k/v shapes differ");
  const std::size_t batch = q.dim(0), steps = q.dim(1), d = q.dim(2);
  require(heads >= 1 && d % heads == 0, "attention width " + std::to_string(d) + " not divisible by " +
                                            std::to_string(heads) + " heads");
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto qv = q.data(), kv = k.data(), vv = v.data();
  // probs[b][h][t][s] for s <= t.
  std::vector<float> probs(batch * heads * steps * steps, 0.0f);
  std::vector<float> out(q.numel(), 0.0f);
  std::vector<double> scores(steps);
  std::vector<double> acc(hd);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < steps; ++t) {
        const float* qrow = qv.data() + (b * steps + t) * d + h * hd;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          scores[s] = kernels::dot(qrow, kv.data() + (b * steps + s) * d + h * hd, hd) * scale;
          mx = std::max(mx, scores[s]);
        }
        double total = 0.0;
        for (std::size_t s = 0; s <= t; ++s) {
          scores[s] = std::exp(scores[s] - mx);
          total += scores[s];
        }
        float* prow = probs.data() + ((b * heads + h) * steps + t) * steps;
        std::fill(acc.begin(), acc.end(), 0.0);
        for (std::size_t s = 0; s <= t; ++s) {
          const double p = scores[s] / total;
          prow[s] = static_cast<float>(p);
          const float* vrow = vv.data() + (b * steps + s) * d + h * hd;
          for (std::size_t j = 0; j < hd; ++j) acc[j] += p * vrow[j];
        }
        float* orow = out.data() + (b * steps + t) * d + h * hd;
        for (std::size_t j = 0; j < hd; ++j) orow[j] = static_cast<float>(acc[j]);
      }
  return Tensor::make_result(
      q.shape(), std::move(out), {q, k, v},
      [q, k, v, probs = std::move(probs), batch, steps, d, heads, hd, scale](const Tensor& y) {
        const auto dy = y.grad();
        const auto qv = q.data(), kv = k.data(), vv = v.data();
        std::vector<float> dq(q.numel(), 0.0f), dk(q.numel(), 0.0f), dv(q.numel(), 0.0f);
        std::vector<double> dscore(steps);
        for (std::size_t b = 0; b < batch; ++b)
          for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t t = 0; t < steps; ++t) {
              const float* prow = probs.data() + ((b * heads + h) * steps + t) * steps;
              const float* go = dy.data() + (b * steps + t) * d + h * hd;
              double inner = 0.0;
              for (std::size_t s = 0; s <= t; ++s) {
                const float* vrow = vv.data() + (b * steps + s) * d + h * hd;
                float* dvrow = dv.data() + (b * steps + s) * d + h * hd;
                for (std::size_t j = 0; j < hd; ++j) dvrow[j] += prow[s] * go[j];
                dscore[s] = kernels::dot(go, vrow, hd);
                inner += prow[s] * dscore[s];
              }
              const float* qrow = qv.data() + (b * steps + t) * d + h * hd;
              float* dqrow = dq.data() + (b * steps + t) * d + h * hd;
              for (std::size_t s = 0; s <= t; ++s) {
                const double ds = prow[s] * (dscore[s] - inner) * scale;
                const float* krow = kv.data() + (b * steps + s) * d + h * hd;
                float* dkrow = dk.data() + (b * steps + s) * d + h * hd;
                for (std::size_t j = 0; j < hd; ++j) {
                  dqrow[j] += static_cast<float>(ds * krow[j]);
                  dkrow[j] += static_cast<float>(ds * qrow[j]);
                }
              }
            }
        auto accumulate = [](const Tensor& t, const std::vector<float>& g) {
          if (!wants(t)) return;
          auto dst = t.grad();
          for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
        };
        accumulate(q, dq);
        accumulate(k, dk);
        accumulate(v, dv);
      });
}

Tensor rnn_tanh(const Tensor& x, const Tensor& wx, const Tensor& wh, const Tensor& b) {
  require(x.rank() == 3, "rnn_tanh input must be [B,T,din]");
  require(wx.rank() == 2 && wh.rank() == 2, "rnn_tanh weights must be rank 2");
  const std::size_t batch = x.dim(0), steps = x.dim(1), din = x.dim(2);
  const std::size_t hidden = wh.dim(0);
  require(wx.dim(0) == din && wx.dim(1) == hidden && wh.dim(1) == hidden,
          "rnn_tanh weight shapes " + shape_to_string(wx.shape()) + ", " + shape_to_string(wh.shape()) +
              " do not match input " + shape_to_string(x.shape()));
  check_vector(b, hidden, "rnn_tanh bias");
  const std::size_t rows = batch * steps;
  std::vector<float> hs(rows * hidden);
  for (std::size_t r = 0; r < rows; ++r) std::copy(b.data().begin(), b.data().end(), hs.begin() + r * hidden);
  kernels::gemm_nn(x.data().data(), wx.data().data(), hs.data(), rows, din, hidden, true);
  std::vector<float> prev(batch * hidden), rec(batch * hidden);
  for (std::size_t t = 0; t < steps; ++t) {
    if (t > 0) {
      for (std::size_t bi = 0; bi < batch; ++bi)
        std::copy_n(hs.begin() + (bi * steps + t - 1) * hidden, hidden, prev.begin() + bi * hidden);
      kernels::gemm_nn(prev.data(), wh.data().data(), rec.data(), batch, hidden, hidden, false);
    }
    for (std::size_t bi = 0; bi < batch; ++bi) {
      float* row = hs.data() + (bi * steps + t) * hidden;
      for (std::size_t j = 0; j < hidden; ++j) {
        const float pre = t > 0 ? row[j] + rec[bi * hidden + j] : row[j];
        row[j] = std::tanh(pre);
      }
    }
  }
  return Tensor::make_result(
      {batch, steps, hidden}, std::move(hs), {x, wx, wh, b},
      [x, wx, wh, b, batch, steps, din, hidden, rows](const Tensor& y) {
        const auto dy = y.grad();
        const auto hv = y.data();
        std::vector<float> dpre(rows * hidden, 0.0f);
        std::vector<float> carry(batch * hidden, 0.0f), step_grad(batch * hidden), prev(batch * hidden);
        std::vector<float> dwh(hidden * hidden, 0.0f);
        for (std::size_t t = steps; t-- > 0;) {
          for (std::size_t bi = 0; bi < batch; ++bi) {
            const std::size_t row = (bi * steps + t) * hidden;
            for (std::size_t j = 0; j < hidden; ++j) {
              const float h = hv[row + j];
              const float g = (dy[row + j] + carry[bi * hidden + j]) * (1.0f - h * h);
              step_grad[bi * hidden + j] = g;
              dpre[row + j] = g;
            }
          }
          if (t > 0) {
            for (std::size_t bi = 0; bi < batch; ++bi)
              std::copy_n(hv.begin() + (bi * steps + t - 1) * hidden, hidden, prev.begin() + bi * hidden);
            kernels::gemm_tn_acc(prev.data(), step_grad.data(), dwh.data(), batch, hidden, hidden);
            std::fill(carry.begin(), carry.end(), 0.0f);
            kernels::gemm_nt_acc(step_grad.data(), wh.data().data(), carry.data(), batch, hidden, hidden);
          }
        }
        if (wants(wh)) {
          auto g = wh.grad();
          for (std::size_t i = 0; i < g.size(); ++i) g[i] += dwh[i];
        }
        if (wants(b)) {
          auto g = b.grad();
          for (std::size_t j = 0; j < hidden; ++j) {
            double s = 0.0;
            for (std::size_t r = 0; r < rows; ++r) s += dpre[r * hidden + j];
            g[j] += static_cast<float>(s);
          }
        }
        if (wants(x)) kernels::gemm_nt_acc(dpre.data(), wx.data().data(), x.grad().data(), rows, hidden, din);
        if (wants(wx)) kernels::gemm_tn_acc(x.data().data(), dpre.data(), wx.grad().data(), rows, din, hidden);
      });
}

}  // namespace flowsynth
