#include "oracles.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "flowsynth/ops.hpp"
#include "flowsynth/rng.hpp"

namespace flowsynth::oracle {

namespace {

using Vec = std::vector<double>;

std::string dims(const std::vector<Shape>& shapes) {
  std::ostringstream out;
  for (std::size_t i = 0; i < shapes.size(); ++i) out << (i ? " " : "") << shape_to_string(shapes[i]);
  return out.str();
}

std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

std::vector<float> random_values(Rng& rng, std::size_t n, double scale = 1.0) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.normal() * scale);
  return v;
}

Vec to_double(std::span<const float> v) { return Vec(v.begin(), v.end()); }

// ---- float64 shadows ----

Vec mm(const Vec& a, const Vec& b, std::size_t m, std::size_t k, std::size_t n) {
  Vec c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p)
      for (std::size_t j = 0; j < n; ++j) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

Vec affine(const Vec& x, const Vec& w, const Vec* b, std::size_t m, std::size_t k, std::size_t n) {
  Vec y = mm(x, w, m, k, n);
  if (b)
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) y[i * n + j] += (*b)[j];
  return y;
}

Vec softmax(const Vec& z, std::size_t rows, std::size_t v) {
  Vec p(z.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, z[r * v + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(z[r * v + j] - mx);
    for (std::size_t j = 0; j < v; ++j) p[r * v + j] = std::exp(z[r * v + j] - mx) / s;
  }
  return p;
}

double xent(const Vec& z, const std::vector<std::int32_t>& t, std::size_t v, double divisor) {
  double loss = 0.0;
  for (std::size_t r = 0; r < t.size(); ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < v; ++j) mx = std::max(mx, z[r * v + j]);
    double s = 0.0;
    for (std::size_t j = 0; j < v; ++j) s += std::exp(z[r * v + j] - mx);
    loss += mx + std::log(s) - z[r * v + static_cast<std::size_t>(t[r])];
  }
  return loss / divisor;
}

Vec normalize_rows(const Vec& x, const Vec& g, const Vec& b, std::size_t rows, std::size_t d, double eps) {
  Vec y(x.size());
  for (std::size_t r = 0; r < rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x[r * d + j];
    mean /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) var += (x[r * d + j] - mean) * (x[r * d + j] - mean);
    var /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) y[r * d + j] = (x[r * d + j] - mean) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

Vec normalize_cols(const Vec& x, const Vec& g, const Vec& b, std::size_t rows, std::size_t d, double eps) {
  Vec y(x.size());
  for (std::size_t j = 0; j < d; ++j) {
    double mean = 0.0, var = 0.0;
    for (std::size_t r = 0; r < rows; ++r) mean += x[r * d + j];
    mean /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) var += (x[r * d + j] - mean) * (x[r * d + j] - mean);
    var /= static_cast<double>(rows);
    for (std::size_t r = 0; r < rows; ++r) y[r * d + j] = (x[r * d + j] - mean) / std::sqrt(var + eps) * g[j] + b[j];
  }
  return y;
}

Vec conv(const Vec& x, const Vec& f, const Vec& bias, std::size_t batch, std::size_t steps, std::size_t cin,
         std::size_t cout, std::size_t kernel, std::size_t dilation) {
  Vec y(batch * steps * cout, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t t = 0; t < steps; ++t)
      for (std::size_t o = 0; o < cout; ++o) {
        double s = bias[o];
        for (std::size_t k = 0; k < kernel; ++k) {
          if (t < dilation * k) continue;
          const std::size_t src = t - dilation * k;
          for (std::size_t c = 0; c < cin; ++c) s += x[(b * steps + src) * cin + c] * f[(k * cin + c) * cout + o];
        }
        y[(b * steps + t) * cout + o] = s;
      }
  return y;
}

Vec attention(const Vec& q, const Vec& k, const Vec& v, std::size_t batch, std::size_t steps, std::size_t d,
              std::size_t heads) {
  const std::size_t hd = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));
  Vec out(batch * steps * d, 0.0);
  for (std::size_t b = 0; b < batch; ++b)
    for (std::size_t h = 0; h < heads; ++h)
      for (std::size_t t = 0; t < steps; ++t) {
        Vec score(t + 1);
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t s = 0; s <= t; ++s) {
          double dot = 0.0;
          for (std::size_t c = 0; c < hd; ++c) dot += q[(b * steps + t) * d + h * hd + c] * k[(b * steps + s) * d + h * hd + c];
          score[s] = dot * scale;
          mx = std::max(mx, score[s]);
        }
        double z = 0.0;
        for (auto& s : score) z += (s = std::exp(s - mx));
        for (std::size_t s = 0; s <= t; ++s)
          for (std::size_t c = 0; c < hd; ++c)
            out[(b * steps + t) * d + h * hd + c] += score[s] / z * v[(b * steps + s) * d + h * hd + c];
      }
  return out;
}

Vec rnn(const Vec& x, const Vec& wx, const Vec& wh, const Vec& bias, std::size_t batch, std::size_t steps,
        std::size_t din, std::size_t hid) {
  Vec out(batch * steps * hid);
  for (std::size_t b = 0; b < batch; ++b) {
    Vec h(hid, 0.0);
    for (std::size_t t = 0; t < steps; ++t) {
      Vec next(hid);
      for (std::size_t j = 0; j < hid; ++j) {
        double s = bias[j];
        for (std::size_t i = 0; i < din; ++i) s += x[(b * steps + t) * din + i] * wx[i * hid + j];
        for (std::size_t i = 0; i < hid; ++i) s += h[i] * wh[i * hid + j];
        next[j] = std::tanh(s);
      }
      h = next;
      std::copy(h.begin(), h.end(), out.begin() + static_cast<std::ptrdiff_t>((b * steps + t) * hid));
    }
  }
  return out;
}

// One gradient-check case: the library forward on float tensors and a
// float64 shadow of the same function over the same inputs.
struct Case {
  std::vector<Tensor> inputs;
  std::function<Tensor(const std::vector<Tensor>&)> forward;
  std::function<Vec(const std::vector<Vec>&)> shadow;
};

double run_case(Case& c, Rng& rng, double h) {
  for (auto& t : c.inputs) t.set_requires_grad(true);
  Tensor y = c.forward(c.inputs);
  std::vector<float> weights = random_values(rng, y.numel());
  Tensor loss = weighted_sum(y, weights);
  loss.backward();

  std::vector<Vec> base;
  for (const auto& t : c.inputs) base.push_back(to_double(t.data()));
  auto objective = [&](const std::vector<Vec>& in) {
    const Vec out = c.shadow(in);
    if (out.size() != weights.size()) throw std::logic_error("shadow output size mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < out.size(); ++i) s += static_cast<double>(weights[i]) * out[i];
    return s;
  };

  double worst = 0.0;
  for (std::size_t i = 0; i < c.inputs.size(); ++i) {
    Vec numeric(base[i].size());
    auto probe = base;
    for (std::size_t j = 0; j < base[i].size(); ++j) {
      probe[i][j] = base[i][j] + h;
      const double up = objective(probe);
      probe[i][j] = base[i][j] - h;
      const double down = objective(probe);
      probe[i][j] = base[i][j];
      numeric[j] = (up - down) / (2.0 * h);
    }
    worst = std::max(worst, relative_error(to_double(c.inputs[i].grad()), numeric));
  }
  return worst;
}

std::vector<std::int32_t> random_ids(Rng& rng, std::size_t n, std::size_t vocab) {
  std::vector<std::int32_t> ids(n);
  for (auto& id : ids) id = static_cast<std::int32_t>(rng.below(vocab));
  return ids;
}

Case make_case(const std::string& op, Rng& rng, std::vector<Shape>& shapes) {
  Case c;
  auto input = [&](Shape s, double scale = 1.0) {
    shapes.push_back(s);
    const std::size_t n = shape_numel(s);
    c.inputs.emplace_back(std::move(s), random_values(rng, n, scale));
  };

  if (op == "matmul") {
    const std::size_t m = pick(rng, 1, 6), k = pick(rng, 1, 6), n = pick(rng, 1, 6);
    input({m, k});
    input({k, n});
    c.forward = [](const auto& in) { return matmul(in[0], in[1]); };
    c.shadow = [=](const auto& in) { return mm(in[0], in[1], m, k, n); };
  } else if (op == "linear") {
    const std::size_t b = pick(rng, 1, 3), t = pick(rng, 1, 4), k = pick(rng, 1, 5), n = pick(rng, 1, 5);
    input({b, t, k});
    input({k, n});
    input({n});
    c.forward = [](const auto& in) { return linear(in[0], in[1], in[2]); };
    c.shadow = [=](const auto& in) { return affine(in[0], in[1], &in[2], b * t, k, n); };
  } else if (op == "add") {
    const Shape s{pick(rng, 1, 4), pick(rng, 1, 5)};
    input(s);
    input(s);
    c.forward = [](const auto& in) { return add(in[0], in[1]); };
    c.shadow = [](const auto& in) {
      Vec y(in[0].size());
      for (std::size_t i = 0; i < y.size(); ++i) y[i] = in[0][i] + in[1][i];
      return y;
    };
  } else if (op == "scale") {
    const float factor = static_cast<float>(rng.normal() * 2.0);
    input({pick(rng, 1, 4), pick(rng, 1, 5)});
    c.forward = [factor](const auto& in) { return scale(in[0], factor); };
    c.shadow = [factor](const auto& in) {
      Vec y = in[0];
      for (auto& v : y) v *= static_cast<double>(factor);
      return y;
    };
  } else if (op == "reshape") {
    const std::size_t a = pick(rng, 1, 4), b = pick(rng, 1, 4), d = pick(rng, 1, 3);
    input({a, b, d});
    c.forward = [=](const auto& in) { return tanh_act(reshape(in[0], {b * d, a})); };
    c.shadow = [](const auto& in) {
      Vec y = in[0];
      for (auto& v : y) v = std::tanh(v);
      return y;
    };
  } else if (op == "sum") {
    input({pick(rng, 1, 4), pick(rng, 1, 5)});
    c.forward = [](const auto& in) { return sum(in[0]); };
    c.shadow = [](const auto& in) { return Vec{std::accumulate(in[0].begin(), in[0].end(), 0.0)}; };
  } else if (op == "tanh") {
    input({pick(rng, 1, 4), pick(rng, 1, 6)}, 1.5);
    c.forward = [](const auto& in) { return tanh_act(in[0]); };
    c.shadow = [](const auto& in) {
      Vec y = in[0];
      for (auto& v : y) v = std::tanh(v);
      return y;
    };
  } else if (op == "relu") {
    input({pick(rng, 1, 4), pick(rng, 1, 6)});
    // Keep every entry away from the kink so central differences stay smooth.
    for (auto& v : c.inputs.back().data())
      if (std::fabs(v) < 0.05f) v = v < 0 ? -0.05f - std::fabs(v) : 0.05f + v;
    c.forward = [](const auto& in) { return relu_act(in[0]); };
    c.shadow = [](const auto& in) {
      Vec y = in[0];
      for (auto& v : y) v = std::max(v, 0.0);
      return y;
    };
  } else if (op == "softmax_rows") {
    const std::size_t n = pick(rng, 1, 4), v = pick(rng, 2, 7);
    input({n, v}, 2.0);
    c.forward = [](const auto& in) { return softmax_rows(in[0]); };
    c.shadow = [=](const auto& in) { return softmax(in[0], n, v); };
  } else if (op == "cross_entropy") {
    const std::size_t n = pick(rng, 1, 8), v = pick(rng, 2, 9);
    const double divisor = static_cast<double>(pick(rng, 1, 4));
    const auto targets = random_ids(rng, n, v);
    input({n, v}, 2.0);
    c.forward = [=](const auto& in) { return cross_entropy(in[0], targets, divisor); };
    c.shadow = [=](const auto& in) { return Vec{xent(in[0], targets, v, divisor)}; };
  } else if (op == "embedding_lookup") {
    const std::size_t v = pick(rng, 2, 5), d = pick(rng, 1, 4), n = pick(rng, v + 1, 3 * v);
    const auto ids = random_ids(rng, n, v);  // n > v forces duplicates
    input({v, d});
    c.forward = [=](const auto& in) { return embedding_lookup(in[0], ids); };
    c.shadow = [=](const auto& in) {
      Vec y(n * d);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) y[i * d + j] = in[0][static_cast<std::size_t>(ids[i]) * d + j];
      return y;
    };
  } else if (op == "batch_norm") {
    const std::size_t n = pick(rng, 3, 8), d = pick(rng, 1, 4);
    input({n, d});
    input({d});
    input({d});
    c.forward = [d](const auto& in) {
      RunningStats running(d);
      return batch_norm(in[0], in[1], in[2], NormMode::kTrain, running);
    };
    c.shadow = [=](const auto& in) { return normalize_cols(in[0], in[1], in[2], n, d, kNormEps); };
  } else if (op == "layer_norm") {
    const std::size_t n = pick(rng, 1, 5), d = pick(rng, 3, 6);
    input({n, d});
    input({d});
    input({d});
    c.forward = [](const auto& in) { return layer_norm(in[0], in[1], in[2]); };
    c.shadow = [=](const auto& in) { return normalize_rows(in[0], in[1], in[2], n, d, kNormEps); };
  } else if (op == "causal_conv1d") {
    const std::size_t b = pick(rng, 1, 2), t = pick(rng, 2, 7), cin = pick(rng, 1, 3), cout = pick(rng, 1, 3);
    const std::size_t kernel = pick(rng, 1, 3), dilation = pick(rng, 1, 3);
    input({b, t, cin});
    input({kernel, cin, cout});
    input({cout});
    c.forward = [dilation](const auto& in) { return causal_conv1d(in[0], in[1], dilation, in[2]); };
    c.shadow = [=](const auto& in) { return conv(in[0], in[1], in[2], b, t, cin, cout, kernel, dilation); };
  } else if (op == "causal_self_attention") {
    const std::size_t b = pick(rng, 1, 2), t = pick(rng, 1, 5), heads = pick(rng, 1, 3), d = heads * pick(rng, 1, 3);
    input({b, t, d});
    input({b, t, d});
    input({b, t, d});
    c.forward = [heads](const auto& in) { return causal_self_attention(in[0], in[1], in[2], heads); };
    c.shadow = [=](const auto& in) { return attention(in[0], in[1], in[2], b, t, d, heads); };
  } else if (op == "rnn_tanh") {
    const std::size_t b = pick(rng, 1, 2), t = pick(rng, 1, 5), din = pick(rng, 1, 3), hid = pick(rng, 1, 4);
    input({b, t, din});
    input({din, hid}, 0.5);
    input({hid, hid}, 0.5);
    input({hid}, 0.5);
    c.forward = [](const auto& in) { return rnn_tanh(in[0], in[1], in[2], in[3]); };
    c.shadow = [=](const auto& in) { return rnn(in[0], in[1], in[2], in[3], b, t, din, hid); };
  } else {
    throw std::invalid_argument("no gradient check for op '" + op + "'");
  }
  return c;
}

}  // namespace

double relative_error(const std::vector<double>& analytic, const std::vector<double>& numeric) {
  if (analytic.size() != numeric.size()) throw std::invalid_argument("gradient size mismatch");
  double diff = 0.0, na = 0.0, nn = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff += (analytic[i] - numeric[i]) * (analytic[i] - numeric[i]);
    na += analytic[i] * analytic[i];
    nn += numeric[i] * numeric[i];
  }
  return std::sqrt(diff) / std::max({std::sqrt(na), std::sqrt(nn), 1e-8});
}

const std::vector<std::string>& checked_ops() {
  static const std::vector<std::string> ops{
      "matmul",        "linear",           "add",        "scale",      "reshape",       "sum",
      "tanh",          "relu",             "softmax_rows", "cross_entropy", "embedding_lookup", "batch_norm",
      "layer_norm",    "causal_conv1d",    "causal_self_attention", "rnn_tanh"};
  return ops;
}

double gradient_tolerance(const std::string& op) { return op == "batch_norm" ? 1e-2 : 1e-3; }

GradCheck check_op(const std::string& op, std::uint64_t seed, double h) {
  Rng rng(derive_seed(seed, op));
  std::vector<Shape> shapes;
  Case c = make_case(op, rng, shapes);
  GradCheck result{op, seed, dims(shapes), 0.0};
  result.rel_error = run_case(c, rng, h);
  return result;
}

GradCheck check_mlp(std::uint64_t seed, double h) {
  Rng rng(derive_seed(seed, "mlp"));
  const std::size_t n = pick(rng, 2, 6), d0 = pick(rng, 2, 5), h1 = pick(rng, 2, 6), h2 = pick(rng, 2, 6),
                    v = pick(rng, 2, 6);
  const auto targets = random_ids(rng, n, v);
  const Tensor x({n, d0}, random_values(rng, n * d0));
  std::vector<Shape> shapes{{d0, h1}, {h1}, {h1, h2}, {h2}, {h2, v}, {v}};
  Case c;
  for (const auto& s : shapes) c.inputs.emplace_back(s, random_values(rng, shape_numel(s), 0.7));
  c.forward = [=](const auto& in) {
    Tensor a = tanh_act(linear(x, in[0], in[1]));
    Tensor b = tanh_act(linear(a, in[2], in[3]));
    return cross_entropy(linear(b, in[4], in[5]), targets, static_cast<double>(n));
  };
  const Vec xd = to_double(x.data());
  c.shadow = [=](const auto& in) {
    Vec a = affine(xd, in[0], &in[1], n, d0, h1);
    for (auto& e : a) e = std::tanh(e);
    Vec b = affine(a, in[2], &in[3], n, h1, h2);
    for (auto& e : b) e = std::tanh(e);
    return Vec{xent(affine(b, in[4], &in[5], n, h2, v), targets, v, static_cast<double>(n))};
  };
  shapes.insert(shapes.begin(), Shape{n, d0});
  GradCheck result{"mlp", seed, dims(shapes), 0.0};
  result.rel_error = run_case(c, rng, h);
  return result;
}

std::vector<double> power_iteration_eigenvalues(std::vector<double> a, std::size_t n, std::size_t iters) {
  std::vector<double> values;
  for (std::size_t k = 0; k < n; ++k) {
    Vec v(n);
    for (std::size_t i = 0; i < n; ++i) v[i] = 1.0 + 0.1 * static_cast<double>((i * 7 + k * 3) % 11);
    double lambda = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      Vec w(n, 0.0);
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) w[i] += a[i * n + j] * v[j];
      double norm = 0.0;
      for (double e : w) norm += e * e;
      norm = std::sqrt(norm);
      if (norm < 1e-300) {
        lambda = 0.0;
        break;
      }
      for (std::size_t i = 0; i < n; ++i) v[i] = w[i] / norm;
      double next = 0.0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) next += v[i] * a[i * n + j] * v[j];
      const bool settled = std::fabs(next - lambda) < 1e-15 * std::max(1.0, std::fabs(next));
      lambda = next;
      if (settled && it > 50) break;
    }
    values.push_back(lambda);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) a[i * n + j] -= lambda * v[i] * v[j];
  }
  std::sort(values.rbegin(), values.rend());
  return values;
}

std::vector<double> pca_ratios_oracle(const Matrix& data) {
  const std::size_t n = data.rows, d = data.cols;
  Vec mean(d, 0.0), sd(d, 0.0);
  for (std::size_t j = 0; j < d; ++j) {
    for (std::size_t i = 0; i < n; ++i) mean[j] += data(i, j);
    mean[j] /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) sd[j] += (data(i, j) - mean[j]) * (data(i, j) - mean[j]);
    sd[j] = std::sqrt(sd[j] / static_cast<double>(n - 1));
  }
  Vec corr(d * d, 0.0);
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = 0; b < d; ++b) {
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += (data(i, a) - mean[a]) / sd[a] * (data(i, b) - mean[b]) / sd[b];
      corr[a * d + b] = s / static_cast<double>(n - 1);
    }
  auto values = power_iteration_eigenvalues(corr, d);
  double total = 0.0;
  for (double& v : values) total += (v = std::max(v, 0.0));
  for (double& v : values) v /= total;
  return values;
}

double ocsvm_profile_objective(const std::vector<double>& w, const Matrix& lifted, double nu) {
  const std::size_t n = lifted.rows;
  Vec proj(n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < lifted.cols; ++j) proj[i] += w[j] * lifted(i, j);
  double best = std::numeric_limits<double>::infinity();
  for (double rho : proj) {
    double hinge = 0.0;
    for (double p : proj) hinge += std::max(0.0, rho - p);
    best = std::min(best, hinge / (nu * static_cast<double>(n)) - rho);
  }
  double sq = 0.0;
  for (double e : w) sq += e * e;
  return 0.5 * sq + best;
}

double ocsvm_grid_minimum(const Matrix& lifted, double nu, std::vector<double>* w_out) {
  const std::size_t d = lifted.cols;
  if (d > 4) throw std::invalid_argument("grid oracle is meant for at most 4 lifted coordinates");
  Vec center(d, 0.0), best_w(d, 0.0);
  double best = ocsvm_profile_objective(center, lifted, nu);
  double half = 1.5;  // optimal w is a convex combination of unit vectors
  const int steps = 10;
  for (int round = 0; round < 80; ++round) {
    std::vector<int> idx(d, -steps);
    const Vec origin = center;
    while (true) {
      Vec w(d);
      for (std::size_t j = 0; j < d; ++j) w[j] = origin[j] + half * idx[j] / steps;
      const double f = ocsvm_profile_objective(w, lifted, nu);
      if (f < best) {
        best = f;
        best_w = w;
      }
      std::size_t j = 0;
      while (j < d && ++idx[j] > steps) idx[j++] = -steps;
      if (j == d) break;
    }
    center = best_w;
    half *= 0.75;
  }
  if (w_out) *w_out = best_w;
  return best;
}

double ocsvm_dual_value(const Matrix& lifted, double nu) {
  const std::size_t n = lifted.rows;
  const double cap = 1.0 / (nu * static_cast<double>(n));
  Vec gram(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t c = 0; c < lifted.cols; ++c) gram[i * n + j] += lifted(i, c) * lifted(j, c);
  double lip = 0.0;
  for (std::size_t i = 0; i < n; ++i) lip += gram[i * n + i];

  // Euclidean projection onto {0 <= a <= cap, sum a = 1} by bisection on the shift.
  auto project = [&](const Vec& y) {
    double lo = *std::min_element(y.begin(), y.end()) - cap - 1.0;
    double hi = *std::max_element(y.begin(), y.end()) + 1.0;
    Vec a(n);
    for (int it = 0; it < 200; ++it) {
      const double tau = 0.5 * (lo + hi);
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += std::clamp(y[i] - tau, 0.0, cap);
      (s > 1.0 ? lo : hi) = tau;
    }
    const double tau = 0.5 * (lo + hi);
    for (std::size_t i = 0; i < n; ++i) a[i] = std::clamp(y[i] - tau, 0.0, cap);
    return a;
  };
  auto value = [&](const Vec& a) {
    double v = 0.0;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) v += a[i] * gram[i * n + j] * a[j];
    return 0.5 * v;
  };

  // Accelerated projected gradient.
  Vec a(n, 1.0 / static_cast<double>(n)), z = a;
  double t = 1.0;
  for (int it = 0; it < 20000; ++it) {
    Vec g(n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) g[i] += gram[i * n + j] * z[j];
    Vec y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = z[i] - g[i] / lip;
    const Vec next = project(y);
    const double tn = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
    for (std::size_t i = 0; i < n; ++i) z[i] = next[i] + (t - 1.0) / tn * (next[i] - a[i]);
    a = next;
    t = tn;
  }
  return -value(a);
}

CausalityResult check_causality(Arch arch, std::size_t vocab, std::size_t steps, std::uint64_t seed) {
  auto config = ModelConfig::defaults(arch, vocab, steps);
  Model model = Model::create(config, seed);
  Rng rng(derive_seed(seed, "causality"));
  const std::size_t batch = 3;
  TokenBatch base{batch, steps, random_ids(rng, batch * steps, vocab)};
  {
    // Move batch-norm running statistics away from their initial values.
    NoGradGuard guard;
    model.forward(base, NormMode::kTrain);
  }
  CausalityResult result;
  NoGradGuard guard;
  const Tensor reference = model.forward(base, NormMode::kEval);
  for (std::size_t t = 0; t < steps; ++t) {
    TokenBatch changed = base;
    for (std::size_t b = 0; b < batch; ++b)
      for (std::size_t s = t + 1; s < steps; ++s) {
        auto& id = changed.ids[b * steps + s];
        id = static_cast<std::int32_t>((static_cast<std::size_t>(id) + 1 + rng.below(vocab - 1)) % vocab);
      }
    const Tensor out = model.forward(changed, NormMode::kEval);
    ++result.positions_checked;
    for (std::size_t b = 0; b < batch; ++b) {
      const std::size_t offset = b * steps * vocab;
      const std::size_t count = (t + 1) * vocab;
      if (std::memcmp(reference.data().data() + offset, out.data().data() + offset, count * sizeof(float)) != 0) {
        result.ok = false;
        result.detail = std::string(to_string(arch)) + ": logits up to t=" + std::to_string(t) +
                        " changed after perturbing later ids";
        return result;
      }
    }
    // Positions after t must actually react somewhere, or the test proves nothing.
    if (t + 1 < steps && std::memcmp(reference.data().data(), out.data().data(), out.numel() * sizeof(float)) == 0) {
      result.ok = false;
      result.detail = std::string(to_string(arch)) + ": perturbation after t=" + std::to_string(t) + " had no effect";
      return result;
    }
  }
  return result;
}

}  // namespace flowsynth::oracle
