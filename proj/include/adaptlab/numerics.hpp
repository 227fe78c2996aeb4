// Copyright 2026 The adaptlab Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

// Dense matrices, a seeded random stream, and reverse-mode differentiation
// for feed-forward chains of affine and ReLU layers.

#ifndef ADAPTLAB_NUMERICS_HPP_
#define ADAPTLAB_NUMERICS_HPP_

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace adaptlab {

// Raised for invalid shapes, parameters or configuration.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Raised when a training run produces non-finite values.
class RunError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

namespace numerics {

// Row-major dense matrix of doubles.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), values_(rows * cols, fill) {}
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
      : rows_(rows), cols_(cols), values_(std::move(values)) {
    if (values_.size() != rows_ * cols_) {
      throw ConfigError("Matrix: value count " + std::to_string(values_.size()) +
                        " does not match shape " + std::to_string(rows_) + "x" +
                        std::to_string(cols_));
    }
  }

  static Matrix identity(std::size_t n) {
    Matrix m(n, n);
    for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
    return m;
  }

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return values_.size(); }
  bool empty() const { return values_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }

  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const {
    return {values_.data() + r * cols_, cols_};
  }

  std::vector<double>& values() { return values_; }
  const std::vector<double>& values() const { return values_; }
  double* data() { return values_.data(); }
  const double* data() const { return values_.data(); }

  bool all_finite() const {
    return std::all_of(values_.begin(), values_.end(),
                       [](double v) { return std::isfinite(v); });
  }

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

inline Matrix transpose(const Matrix& a) {
  Matrix out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

// a (n x k) times b (k x m). The inner loop runs along output rows so that
// every output entry accumulates in a fixed order (t = 0..k-1).
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw ConfigError("matmul: inner dimension mismatch " + shape_string(a) + " vs " +
                      shape_string(b));
  }
  Matrix out(a.rows(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    double* __restrict orow = out.data() + i * m;
    for (std::size_t t = 0; t < a.cols(); ++t) {
      const double av = a(i, t);
      if (av == 0.0) continue;
      const double* __restrict br = b.data() + t * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * br[j];
    }
  }
  return out;
}

// a (n x k) times b^T where b is (m x k): result n x m.
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw ConfigError("matmul_bt: inner dimension mismatch " + shape_string(a) +
                      " vs " + shape_string(b));
  }
  return matmul(a, transpose(b));
}

// a^T (k x n) times b (n x m) where a is (n x k): result k x m.
inline Matrix matmul_at(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) {
    throw ConfigError("matmul_at: row count mismatch " + shape_string(a) + " vs " +
                      shape_string(b));
  }
  Matrix out(a.cols(), b.cols());
  const std::size_t m = b.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    const double* __restrict br = b.data() + i * m;
    for (std::size_t t = 0; t < a.cols(); ++t) {
      const double av = a(i, t);
      if (av == 0.0) continue;
      double* __restrict orow = out.data() + t * m;
      for (std::size_t j = 0; j < m; ++j) orow[j] += av * br[j];
    }
  }
  return out;
}

inline Matrix add(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ConfigError("add: shape mismatch " + shape_string(a) + " vs " + shape_string(b));
  }
  Matrix out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out.values()[i] += b.values()[i];
  return out;
}

inline Matrix scaled(const Matrix& a, double s) {
  Matrix out = a;
  for (double& v : out.values()) v *= s;
  return out;
}

inline double frobenius_norm_sq(const Matrix& a) {
  double s = 0.0;
  for (double v : a.values()) s += v * v;
  return s;
}

inline double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double norm2(std::span<const double> a) { return std::sqrt(dot(a, a)); }

// Selects rows by index into a new matrix.
inline Matrix gather_rows(const Matrix& a, std::span<const std::size_t> idx) {
  Matrix out(idx.size(), a.cols());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(a.data() + idx[i] * a.cols(), a.cols(), out.data() + i * a.cols());
  }
  return out;
}

// Concatenates columns: [a | b].
inline Matrix hconcat(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ConfigError("hconcat: row count mismatch");
  Matrix out(a.rows(), a.cols() + b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i) {
    std::copy_n(a.data() + i * a.cols(), a.cols(), out.data() + i * out.cols());
    std::copy_n(b.data() + i * b.cols(), b.cols(), out.data() + i * out.cols() + a.cols());
  }
  return out;
}

// Solves (A + ridge I) X = B for symmetric positive definite A via Cholesky.
inline Matrix cholesky_solve(Matrix a, Matrix b, double ridge = 0.0) {
  const std::size_t n = a.rows();
  if (a.cols() != n || b.rows() != n) throw ConfigError("cholesky_solve: shape mismatch");
  for (std::size_t i = 0; i < n; ++i) a(i, i) += ridge;
  for (std::size_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= a(j, k) * a(j, k);
    if (!(d > 0.0)) throw ConfigError("cholesky_solve: matrix is not positive definite");
    a(j, j) = std::sqrt(d);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= a(i, k) * a(j, k);
      a(i, j) = s / a(j, j);
    }
  }
  for (std::size_t c = 0; c < b.cols(); ++c) {
    for (std::size_t i = 0; i < n; ++i) {
      double s = b(i, c);
      for (std::size_t k = 0; k < i; ++k) s -= a(i, k) * b(k, c);
      b(i, c) = s / a(i, i);
    }
    for (std::size_t ii = n; ii-- > 0;) {
      double s = b(ii, c);
      for (std::size_t k = ii + 1; k < n; ++k) s -= a(k, ii) * b(k, c);
      b(ii, c) = s / a(ii, ii);
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// Random numbers
// ---------------------------------------------------------------------------

// Deterministic random stream: std::mt19937_64 (whose output sequence is fixed
// by the C++ standard) with hand-written distributions, so a seed reproduces
// the same values on every conforming platform. Substreams are derived from the
// seed and a purpose tag through SplitMix64, independent of consumption.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }

  Rng derive(std::string_view purpose, std::uint64_t index = 0) const {
    std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
    for (char ch : purpose) {
      h ^= static_cast<unsigned char>(ch);
      h *= 0x100000001b3ULL;
    }
    std::uint64_t s = splitmix64(seed_ ^ splitmix64(h));
    s = splitmix64(s ^ splitmix64(index + 0x632be59bd9b4e019ULL));
    return Rng(s);
  }

  std::uint64_t next_u64() { return engine_(); }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n), unbiased by rejection.
  std::size_t below(std::size_t n) {
    if (n == 0) throw ConfigError("Rng::below: empty range");
    const std::uint64_t bound = static_cast<std::uint64_t>(n);
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
  }

  bool coin() { return (engine_() >> 63) != 0; }

  // Standard normal, Marsaglia polar method.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u, v, s;
    do {
      u = 2.0 * uniform() - 1.0;
      v = 2.0 * uniform() - 1.0;
      s = u * u + v * v;
    } while (s >= 1.0 || s == 0.0);
    const double f = std::sqrt(-2.0 * std::log(s) / s);
    spare_ = v * f;
    has_spare_ = true;
    return u * f;
  }

  std::vector<std::size_t> permutation(std::size_t n) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = n; i > 1; --i) std::swap(p[i - 1], p[below(i)]);
    return p;
  }

  // k distinct indices from [0, n), partial Fisher-Yates.
  std::vector<std::size_t> choose(std::size_t n, std::size_t k) {
    std::vector<std::size_t> p(n);
    for (std::size_t i = 0; i < n; ++i) p[i] = i;
    for (std::size_t i = 0; i < k; ++i) std::swap(p[i], p[i + below(n - i)]);
    p.resize(k);
    return p;
  }

  Matrix normal_matrix(std::size_t rows, std::size_t cols, double stddev = 1.0) {
    Matrix m(rows, cols);
    for (double& v : m.values()) v = stddev * normal();
    return m;
  }

 private:
  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::mt19937_64 engine_;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// ---------------------------------------------------------------------------
// Computation graph
// ---------------------------------------------------------------------------

struct Affine {
  Matrix weight;              // out x in
  std::vector<double> bias;   // out
  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
  bool operator==(const Affine&) const = default;
};

struct Relu {
  bool operator==(const Relu&) const = default;
};

using Layer = std::variant<Affine, Relu>;

// A feed-forward chain. The last layer is always affine and produces logits.
class Graph {
 public:
  Graph() = default;
  explicit Graph(std::vector<Layer> layers) : layers_(std::move(layers)) { validate(); }

  const std::vector<Layer>& layers() const { return layers_; }
  std::vector<Layer>& layers() { return layers_; }

  std::size_t input_dim() const { return std::get<Affine>(layers_.front()).in_dim(); }
  std::size_t output_dim() const { return std::get<Affine>(layers_.back()).out_dim(); }
  std::size_t num_affine() const {
    return static_cast<std::size_t>(std::count_if(layers_.begin(), layers_.end(), [](const Layer& l) {
      return std::holds_alternative<Affine>(l);
    }));
  }

  Affine& affine(std::size_t k) { return const_cast<Affine&>(std::as_const(*this).affine(k)); }
  const Affine& affine(std::size_t k) const {
    for (const Layer& l : layers_) {
      if (const auto* a = std::get_if<Affine>(&l)) {
        if (k-- == 0) return *a;
      }
    }
    throw ConfigError("Graph: affine layer index out of range");
  }

  void validate() const {
    if (layers_.empty()) throw ConfigError("Graph: no layers");
    if (!std::holds_alternative<Affine>(layers_.back())) {
      throw ConfigError("Graph: final layer must be affine");
    }
    std::size_t width = 0;
    bool first = true;
    for (const Layer& layer : layers_) {
      if (const auto* a = std::get_if<Affine>(&layer)) {
        if (a->bias.size() != a->out_dim()) throw ConfigError("Graph: bias size mismatch");
        if (!first && a->in_dim() != width) {
          throw ConfigError("Graph: layer input " + std::to_string(a->in_dim()) +
                            " does not compose with previous width " +
                            std::to_string(width));
        }
        width = a->out_dim();
        first = false;
      } else if (first) {
        throw ConfigError("Graph: first layer must be affine");
      }
    }
  }

  bool operator==(const Graph&) const = default;

 private:
  std::vector<Layer> layers_;
};

// Builds affine(+relu) chain with the given widths [in, h1, ..., out]. Hidden
// layers use He-normal weights; the output layer uses 1/fan_in variance.
inline Graph make_mlp(std::span<const std::size_t> widths, Rng& rng) {
  if (widths.size() < 2) throw ConfigError("make_mlp: need at least two widths");
  std::vector<Layer> layers;
  for (std::size_t k = 0; k + 1 < widths.size(); ++k) {
    const bool last = k + 2 == widths.size();
    const double var = (last ? 1.0 : 2.0) / static_cast<double>(widths[k]);
    Affine a{rng.normal_matrix(widths[k + 1], widths[k], std::sqrt(var)),
             std::vector<double>(widths[k + 1], 0.0)};
    layers.emplace_back(std::move(a));
    if (!last) layers.emplace_back(Relu{});
  }
  return Graph(std::move(layers));
}

struct Activations {
  Matrix input;
  std::vector<Matrix> outputs;  // one per layer; back() holds the logits
  const Matrix& logits() const { return outputs.back(); }
};

inline Matrix affine_forward(const Affine& a, const Matrix& x) {
  Matrix y = matmul_bt(x, a.weight);
  for (std::size_t i = 0; i < y.rows(); ++i) {
    double* r = y.data() + i * y.cols();
    for (std::size_t j = 0; j < y.cols(); ++j) r[j] += a.bias[j];
  }
  return y;
}

inline Activations forward(const Graph& graph, const Matrix& input) {
  if (input.cols() != graph.input_dim()) {
    throw ConfigError("forward: input has " + std::to_string(input.cols()) +
                      " columns, graph expects " + std::to_string(graph.input_dim()));
  }
  Activations acts;
  acts.input = input;
  acts.outputs.reserve(graph.layers().size());
  const Matrix* cur = &acts.input;
  for (const Layer& layer : graph.layers()) {
    if (const auto* a = std::get_if<Affine>(&layer)) {
      acts.outputs.push_back(affine_forward(*a, *cur));
    } else {
      Matrix y = *cur;
      for (double& v : y.values()) v = v > 0.0 ? v : 0.0;
      acts.outputs.push_back(std::move(y));
    }
    cur = &acts.outputs.back();
  }
  return acts;
}

inline Matrix forward_logits(const Graph& graph, const Matrix& input) {
  if (input.cols() != graph.input_dim()) {
    throw ConfigError("forward: input has " + std::to_string(input.cols()) +
                      " columns, graph expects " + std::to_string(graph.input_dim()));
  }
  Matrix cur = input;
  for (const Layer& layer : graph.layers()) {
    if (const auto* a = std::get_if<Affine>(&layer)) {
      cur = affine_forward(*a, cur);
    } else {
      for (double& v : cur.values()) v = v > 0.0 ? v : 0.0;
    }
  }
  return cur;
}

// ---------------------------------------------------------------------------
// Probabilities and losses
// ---------------------------------------------------------------------------

inline constexpr double kProbFloor = 1e-12;
inline constexpr double kProbCeil = 1.0 - 1e-12;

inline double clamp_prob(double p) { return std::clamp(p, kProbFloor, kProbCeil); }

inline Matrix softmax(const Matrix& logits) {
  Matrix p(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto z = logits.row(i);
    auto out = p.row(i);
    const double mx = *std::max_element(z.begin(), z.end());
    double s = 0.0;
    for (std::size_t j = 0; j < z.size(); ++j) {
      out[j] = std::exp(z[j] - mx);
      s += out[j];
    }
    for (double& v : out) v /= s;
  }
  return p;
}

// Entropy of each row with the clamped-log convention.
inline std::vector<double> row_entropy(const Matrix& probs) {
  std::vector<double> h(probs.rows(), 0.0);
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    for (double p : probs.row(i)) h[i] -= p * std::log(clamp_prob(p));
  }
  return h;
}

inline std::size_t argmax(std::span<const double> v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

struct SoftmaxCrossEntropy {
  std::vector<int> labels;
};
struct KlDivergence {
  Matrix reference;  // rows are reference distributions; no gradient flows into them
};
struct Entropy {};
struct MeanSquaredError {
  Matrix target;
};

// Mean over the batch of the per-sample loss.
using Loss = std::variant<SoftmaxCrossEntropy, KlDivergence, Entropy, MeanSquaredError>;

enum class Reduction { kMean, kSum };

struct LossEval {
  double value = 0.0;
  Matrix dlogits;
};

namespace detail {

// dL/dz for L expressed through dL/dp, using the softmax Jacobian row-wise.
inline void softmax_pullback(std::span<const double> p, std::span<const double> dp,
                             std::span<double> dz) {
  double s = 0.0;
  for (std::size_t j = 0; j < p.size(); ++j) s += p[j] * dp[j];
  for (std::size_t j = 0; j < p.size(); ++j) dz[j] = p[j] * (dp[j] - s);
}

// Derivative of log(clamp(p)) with respect to p.
inline double dlog_clamped(double p) {
  return (p > kProbFloor && p < kProbCeil) ? 1.0 / p : 0.0;
}

}  // namespace detail

inline LossEval evaluate_loss(const Matrix& logits, const Loss& loss,
                              Reduction reduction = Reduction::kMean) {
  const std::size_t n = logits.rows();
  const std::size_t c = logits.cols();
  if (n == 0) throw ConfigError("evaluate_loss: empty batch");
  const double scale = reduction == Reduction::kMean ? 1.0 / static_cast<double>(n) : 1.0;
  LossEval out;
  out.dlogits = Matrix(n, c);
  std::vector<double> dp(c);

  if (const auto* mse = std::get_if<MeanSquaredError>(&loss)) {
    if (mse->target.rows() != n || mse->target.cols() != c) {
      throw ConfigError("mse: target shape " + shape_string(mse->target) +
                        " does not match logits " + shape_string(logits));
    }
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        const double r = logits(i, j) - mse->target(i, j);
        out.value += r * r;
        out.dlogits(i, j) = 2.0 * r * scale;
      }
    }
    out.value *= scale;
    return out;
  }

  const Matrix probs = softmax(logits);
  for (std::size_t i = 0; i < n; ++i) {
    auto p = probs.row(i);
    std::fill(dp.begin(), dp.end(), 0.0);
    double li = 0.0;
    if (const auto* ce = std::get_if<SoftmaxCrossEntropy>(&loss)) {
      if (ce->labels.size() != n) throw ConfigError("softmax_ce: label count mismatch");
      const int y = ce->labels[i];
      if (y < 0 || static_cast<std::size_t>(y) >= c) {
        throw ConfigError("softmax_ce: label out of range");
      }
      li = -std::log(clamp_prob(p[y]));
      dp[y] = -detail::dlog_clamped(p[y]);
    } else if (const auto* kl = std::get_if<KlDivergence>(&loss)) {
      if (kl->reference.rows() != n || kl->reference.cols() != c) {
        throw ConfigError("kl: reference shape mismatch");
      }
      for (std::size_t j = 0; j < c; ++j) {
        const double r = kl->reference(i, j);
        if (r > 0.0) li += r * (std::log(clamp_prob(r)) - std::log(clamp_prob(p[j])));
        dp[j] = -r * detail::dlog_clamped(p[j]);
      }
    } else {
      for (std::size_t j = 0; j < c; ++j) {
        const double lp = std::log(clamp_prob(p[j]));
        li -= p[j] * lp;
        dp[j] = -(lp + p[j] * detail::dlog_clamped(p[j]));
      }
    }
    out.value += li;
    auto dz = out.dlogits.row(i);
    detail::softmax_pullback(p, dp, dz);
    for (double& v : dz) v *= scale;
  }
  out.value *= scale;
  return out;
}

inline Loss loss_from_name(std::string_view name, const Matrix& aux = {},
                           std::vector<int> labels = {}) {
  if (name == "softmax_ce") return SoftmaxCrossEntropy{std::move(labels)};
  if (name == "kl") return KlDivergence{aux};
  if (name == "entropy") return Entropy{};
  if (name == "mse") return MeanSquaredError{aux};
  throw ConfigError("unknown loss kind '" + std::string(name) + "'");
}

// ---------------------------------------------------------------------------
// Backward pass
// ---------------------------------------------------------------------------

struct AffineGrad {
  Matrix weight;
  std::vector<double> bias;
};

struct Gradients {
  double loss = 0.0;
  std::vector<AffineGrad> params;  // one per affine layer, in layer order
  Matrix input_grad;
};

// Propagates dL/dlogits back through the chain.
inline Gradients backward_from(const Graph& graph, const Activations& acts,
                               Matrix upstream) {
  const auto& layers = graph.layers();
  if (acts.outputs.size() != layers.size()) {
    throw ConfigError("backward: activations were not produced by this graph");
  }
  if (upstream.rows() != acts.logits().rows() || upstream.cols() != acts.logits().cols()) {
    throw ConfigError("backward: upstream gradient shape mismatch");
  }
  Gradients g;
  g.params.resize(graph.num_affine());
  std::size_t affine_idx = graph.num_affine();
  Matrix grad = std::move(upstream);
  for (std::size_t k = layers.size(); k-- > 0;) {
    const Matrix& in = k == 0 ? acts.input : acts.outputs[k - 1];
    if (const auto* a = std::get_if<Affine>(&layers[k])) {
      --affine_idx;
      AffineGrad& pg = g.params[affine_idx];
      pg.weight = matmul_at(grad, in);
      pg.bias.assign(a->out_dim(), 0.0);
      for (std::size_t i = 0; i < grad.rows(); ++i) {
        for (std::size_t j = 0; j < grad.cols(); ++j) pg.bias[j] += grad(i, j);
      }
      grad = matmul(grad, a->weight);
    } else {
      const Matrix& out = acts.outputs[k];
      for (std::size_t i = 0; i < grad.size(); ++i) {
        if (!(out.values()[i] > 0.0)) grad.values()[i] = 0.0;
      }
    }
  }
  g.input_grad = std::move(grad);
  return g;
}

inline Gradients backward(const Graph& graph, const Activations& acts, const Loss& loss,
                          Reduction reduction = Reduction::kMean) {
  LossEval le = evaluate_loss(acts.logits(), loss, reduction);
  Gradients g = backward_from(graph, acts, std::move(le.dlogits));
  g.loss = le.value;
  return g;
}

// Accumulates scale * src into dst (same graph shape).
inline void accumulate(std::vector<AffineGrad>& dst, const std::vector<AffineGrad>& src,
                       double scale) {
  for (std::size_t k = 0; k < dst.size(); ++k) {
    for (std::size_t i = 0; i < dst[k].weight.size(); ++i)
      dst[k].weight.values()[i] += scale * src[k].weight.values()[i];
    for (std::size_t i = 0; i < dst[k].bias.size(); ++i)
      dst[k].bias[i] += scale * src[k].bias[i];
  }
}

inline void scale(std::vector<AffineGrad>& grads, double s) {
  for (AffineGrad& g : grads) {
    for (double& v : g.weight.values()) v *= s;
    for (double& v : g.bias) v *= s;
  }
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

// Heavy-ball SGD: v <- momentum * v + g; p <- p - lr * v. Velocity is kept per
// parameter across calls.
class SgdMomentum {
 public:
  SgdMomentum(const Graph& graph, double momentum) : momentum_(momentum) {
    if (!(momentum >= 0.0 && momentum < 1.0)) {
      throw ConfigError("sgd: momentum must lie in [0, 1)");
    }
    for (std::size_t k = 0; k < graph.num_affine(); ++k) {
      const Affine& a = graph.affine(k);
      velocity_.push_back({Matrix(a.weight.rows(), a.weight.cols()),
                           std::vector<double>(a.bias.size(), 0.0)});
    }
  }

  void step(Graph& graph, const std::vector<AffineGrad>& grads, double lr) {
    if (!(lr >= 0.0) || !std::isfinite(lr)) throw ConfigError("sgd: invalid learning rate");
    if (grads.size() != velocity_.size()) throw ConfigError("sgd: gradient count mismatch");
    for (std::size_t k = 0; k < grads.size(); ++k) {
      const Affine& a = graph.affine(k);
      if (grads[k].weight.rows() != a.weight.rows() ||
          grads[k].weight.cols() != a.weight.cols() ||
          grads[k].bias.size() != a.bias.size()) {
        throw ConfigError("sgd: gradient shape mismatch at affine layer " +
                          std::to_string(k));
      }
      if (!grads[k].weight.all_finite() ||
          !std::all_of(grads[k].bias.begin(), grads[k].bias.end(),
                       [](double v) { return std::isfinite(v); })) {
        throw RunError("sgd: non-finite gradient at affine layer " + std::to_string(k));
      }
    }
    for (std::size_t k = 0; k < grads.size(); ++k) {
      Affine& a = graph.affine(k);
      update(a.weight.values(), velocity_[k].weight.values(), grads[k].weight.values(), lr);
      update(a.bias, velocity_[k].bias, grads[k].bias, lr);
    }
  }

 private:
  void update(std::vector<double>& p, std::vector<double>& v, const std::vector<double>& g,
              double lr) const {
    for (std::size_t i = 0; i < p.size(); ++i) {
      v[i] = momentum_ * v[i] + g[i];
      p[i] -= lr * v[i];
    }
  }

  double momentum_;
  std::vector<AffineGrad> velocity_;
};

}  // namespace numerics
}  // namespace adaptlab

#endif  // ADAPTLAB_NUMERICS_HPP_
