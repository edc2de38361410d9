// Small fully connected networks with hand-written backpropagation, AdamW,
// inverted dropout, and the BFNN1 checkpoint format.
//
// Batches are column-major: one sample per column.
//
// Checkpoint layout (little-endian):
//   "BFNN1\0\0\0", u32 version, u32 kind tag, u32 n_sizes, u64 sizes[n_sizes],
//   u32 hidden activation, u32 output activation, f64 leaky slope, f64 dropout,
//   per layer: W (rows x cols, row-major f64), b (rows f64),
//   u64 n_extra, f64 extra[n_extra]
#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "bflow/binary_io.hpp"
#include "bflow/core.hpp"
#include "bflow/parallel.hpp"
#include "bflow/rng.hpp"

namespace bflow {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

enum class Activation : std::uint32_t { Identity = 0, ReLU = 1, LeakyReLU = 2, Sigmoid = 3 };

inline std::string to_string(Activation a) {
  switch (a) {
    case Activation::Identity: return "identity";
    case Activation::ReLU: return "relu";
    case Activation::LeakyReLU: return "leaky_relu";
    case Activation::Sigmoid: return "sigmoid";
  }
  return "?";
}

inline Activation activation_from_string(const std::string& s) {
  if (s == "identity") return Activation::Identity;
  if (s == "relu") return Activation::ReLU;
  if (s == "leaky_relu") return Activation::LeakyReLU;
  if (s == "sigmoid") return Activation::Sigmoid;
  throw ConfigError("unknown activation '" + s + "'");
}

struct MlpSpec {
  std::vector<std::size_t> layer_sizes;  // input, hidden..., output
  Activation hidden = Activation::LeakyReLU;
  Activation output = Activation::Identity;
  double leaky_slope = 0.01;
  double dropout = 0.0;

  void validate() const {
    if (layer_sizes.size() < 2) throw ConfigError("MlpSpec: need at least input and output sizes");
    for (auto s : layer_sizes)
      if (s == 0) throw ConfigError("MlpSpec: layer sizes must be positive");
    if (!(dropout >= 0.0 && dropout < 1.0)) throw ConfigError("MlpSpec: dropout must be in [0, 1)");
    if (hidden == Activation::Sigmoid) throw ConfigError("MlpSpec: sigmoid is only supported as output activation");
    if (!(leaky_slope >= 0.0)) throw ConfigError("MlpSpec: leaky slope must be non-negative");
  }
};

struct MlpModel {
  MlpSpec spec;
  std::vector<Matrix> W;  // W[l] is (size[l+1] x size[l])
  std::vector<Vector> b;

  std::size_t n_layers() const { return W.size(); }
  std::size_t input_dim() const { return spec.layer_sizes.front(); }
  std::size_t output_dim() const { return spec.layer_sizes.back(); }

  std::size_t n_params() const {
    std::size_t n = 0;
    for (std::size_t l = 0; l < W.size(); ++l) n += static_cast<std::size_t>(W[l].size() + b[l].size());
    return n;
  }

  bool finite() const {
    for (std::size_t l = 0; l < W.size(); ++l)
      if (!W[l].allFinite() || !b[l].allFinite()) return false;
    return true;
  }
};

/// Kaiming-uniform for hidden layers, LeCun-uniform for the output layer,
/// zero biases.
inline MlpModel make_mlp(const MlpSpec& spec, std::uint64_t seed) {
  spec.validate();
  MlpModel m;
  m.spec = spec;
  RngStream rng(seed, 0);
  const std::size_t L = spec.layer_sizes.size() - 1;
  for (std::size_t l = 0; l < L; ++l) {
    const auto fan_in = static_cast<double>(spec.layer_sizes[l]);
    const bool last = l + 1 == L;
    double bound;
    if (last) {
      bound = std::sqrt(3.0 / fan_in);
    } else {
      const double a = spec.hidden == Activation::LeakyReLU ? spec.leaky_slope : 0.0;
      bound = spec.hidden == Activation::Identity ? std::sqrt(3.0 / fan_in)
                                                   : std::sqrt(6.0 / ((1.0 + a * a) * fan_in));
    }
    Matrix W(spec.layer_sizes[l + 1], spec.layer_sizes[l]);
    for (Eigen::Index i = 0; i < W.rows(); ++i)
      for (Eigen::Index j = 0; j < W.cols(); ++j) W(i, j) = rng.uniform(-bound, bound);
    m.W.push_back(std::move(W));
    m.b.push_back(Vector::Zero(static_cast<Eigen::Index>(spec.layer_sizes[l + 1])));
  }
  return m;
}

/// All weights and biases zero.
inline MlpModel make_zero_mlp(const MlpSpec& spec) {
  spec.validate();
  MlpModel m;
  m.spec = spec;
  for (std::size_t l = 0; l + 1 < spec.layer_sizes.size(); ++l) {
    m.W.push_back(Matrix::Zero(spec.layer_sizes[l + 1], spec.layer_sizes[l]));
    m.b.push_back(Vector::Zero(static_cast<Eigen::Index>(spec.layer_sizes[l + 1])));
  }
  return m;
}

namespace detail {

inline void apply_activation(Activation a, double slope, Matrix& z) {
  switch (a) {
    case Activation::Identity: break;
    case Activation::ReLU: z = z.cwiseMax(0.0); break;
    case Activation::LeakyReLU: z = z.unaryExpr([slope](double v) { return v > 0 ? v : slope * v; }); break;
    case Activation::Sigmoid:
      z = z.unaryExpr([](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      });
      break;
  }
}

// Derivative expressed through pre-activation z (and post-activation a for sigmoid).
inline Matrix activation_derivative(Activation act, double slope, const Matrix& z, const Matrix& a) {
  switch (act) {
    case Activation::Identity: return Matrix::Ones(z.rows(), z.cols());
    case Activation::ReLU: return z.unaryExpr([](double v) { return v > 0 ? 1.0 : 0.0; });
    case Activation::LeakyReLU: return z.unaryExpr([slope](double v) { return v > 0 ? 1.0 : slope; });
    case Activation::Sigmoid: return a.cwiseProduct((1.0 - a.array()).matrix());
  }
  return {};
}

}  // namespace detail

/// Intermediate values kept for backpropagation.
struct ForwardCache {
  std::vector<Matrix> pre;   // affine outputs per layer
  std::vector<Matrix> post;  // post[0] is the input; post[l+1] after activation and dropout
  std::vector<Matrix> mask;  // dropout masks (already scaled); empty when unused
};

inline Matrix forward(const MlpModel& m, const Matrix& X, bool train_mode = false, RngStream* rng = nullptr,
                      ForwardCache* cache = nullptr) {
  if (static_cast<std::size_t>(X.rows()) != m.input_dim())
    throw ShapeError("forward: input width " + std::to_string(X.rows()) + " != " + std::to_string(m.input_dim()));
  const bool drop = train_mode && m.spec.dropout > 0.0;
  if (drop && !rng) throw ConfigError("forward: dropout in train mode needs an rng");
  const double keep = 1.0 - m.spec.dropout;
  if (cache) {
    cache->pre.clear();
    cache->post.assign(1, X);
    cache->mask.clear();
  }
  Matrix a = X;
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    Matrix z = m.W[l] * a;
    z.colwise() += m.b[l];
    const bool last = l + 1 == m.n_layers();
    if (cache) cache->pre.push_back(z);
    detail::apply_activation(last ? m.spec.output : m.spec.hidden, m.spec.leaky_slope, z);
    if (!last && drop) {
      Matrix mask(z.rows(), z.cols());
      for (Eigen::Index j = 0; j < mask.cols(); ++j)
        for (Eigen::Index i = 0; i < mask.rows(); ++i) mask(i, j) = rng->uniform() < keep ? 1.0 / keep : 0.0;
      z = z.cwiseProduct(mask);
      if (cache) cache->mask.push_back(std::move(mask));
    } else if (cache && !last) {
      cache->mask.emplace_back();
    }
    if (cache) cache->post.push_back(z);
    a = std::move(z);
  }
  return a;
}

/// Eval-mode forward over a large batch, split across workers by columns.
inline Matrix predict(const MlpModel& m, const Matrix& X, std::size_t chunk = 4096) {
  if (static_cast<std::size_t>(X.rows()) != m.input_dim()) throw ShapeError("predict: input width mismatch");
  Matrix out(static_cast<Eigen::Index>(m.output_dim()), X.cols());
  parallel_for(static_cast<std::size_t>(X.cols()), chunk, [&](std::size_t begin, std::size_t end) {
    const auto n = static_cast<Eigen::Index>(end - begin);
    out.middleCols(static_cast<Eigen::Index>(begin), n) =
        forward(m, X.middleCols(static_cast<Eigen::Index>(begin), n));
  });
  return out;
}

struct Gradients {
  std::vector<Matrix> dW;
  std::vector<Vector> db;

  static Gradients zeros_like(const MlpModel& m) {
    Gradients g;
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
      g.dW.push_back(Matrix::Zero(m.W[l].rows(), m.W[l].cols()));
      g.db.push_back(Vector::Zero(m.b[l].size()));
    }
    return g;
  }
};

struct LossResult {
  double loss = 0;
  Gradients grad;
};

namespace detail {

// dZ is the loss gradient with respect to the last pre-activation.
inline Gradients backward(const MlpModel& m, const ForwardCache& c, Matrix dZ) {
  Gradients g;
  const std::size_t L = m.n_layers();
  g.dW.resize(L);
  g.db.resize(L);
  for (std::size_t l = L; l-- > 0;) {
    g.dW[l] = dZ * c.post[l].transpose();
    g.db[l] = dZ.rowwise().sum();
    if (l == 0) break;
    Matrix dA = m.W[l].transpose() * dZ;
    if (c.mask[l - 1].size()) dA = dA.cwiseProduct(c.mask[l - 1]);
    dZ = dA.cwiseProduct(activation_derivative(m.spec.hidden, m.spec.leaky_slope, c.pre[l - 1], c.post[l]));
  }
  return g;
}

inline std::string batch_diagnostics(const Matrix& X) {
  return "batch of " + std::to_string(X.cols()) + " rows, input range [" + std::to_string(X.minCoeff()) + ", " +
         std::to_string(X.maxCoeff()) + "]";
}

}  // namespace detail

inline constexpr double kBceClamp = 1e-7;

/// Mean binary cross-entropy of a sigmoid-output net. Outputs are clamped to
/// [1e-7, 1 - 1e-7]; where the clamp is active the gradient is zero.
inline LossResult bce_loss_and_grad(const MlpModel& m, const Matrix& X, const Eigen::RowVectorXd& labels,
                                    bool train_mode = false, RngStream* rng = nullptr) {
  if (m.spec.output != Activation::Sigmoid || m.output_dim() != 1)
    throw ConfigError("bce_loss_and_grad: model needs a single sigmoid output");
  if (labels.size() != X.cols()) throw ShapeError("bce_loss_and_grad: label count differs from batch size");
  if (X.cols() == 0) throw ShapeError("bce_loss_and_grad: empty batch");
  ForwardCache c;
  const Matrix F = forward(m, X, train_mode, rng, &c);
  const auto M = static_cast<double>(X.cols());
  double loss = 0;
  Matrix dZ(1, X.cols());
  for (Eigen::Index j = 0; j < X.cols(); ++j) {
    const double g = labels(j);
    if (g != 0.0 && g != 1.0) throw DomainError("bce_loss_and_grad: labels must be 0 or 1");
    const double raw = F(0, j);
    const double f = std::clamp(raw, kBceClamp, 1.0 - kBceClamp);
    loss -= g * std::log(f) + (1.0 - g) * std::log(1.0 - f);
    dZ(0, j) = (raw == f) ? (raw - g) / M : 0.0;
  }
  loss /= M;
  if (!std::isfinite(loss)) throw NumericError("bce loss is not finite; " + detail::batch_diagnostics(X));
  return {loss, detail::backward(m, c, std::move(dZ))};
}

/// Mean over samples of the squared error summed over output components.
inline LossResult mse_loss_and_grad(const MlpModel& m, const Matrix& X, const Matrix& Y, bool train_mode = false,
                                    RngStream* rng = nullptr) {
  if (static_cast<std::size_t>(Y.rows()) != m.output_dim() || Y.cols() != X.cols())
    throw ShapeError("mse_loss_and_grad: target shape differs from output shape");
  if (X.cols() == 0) throw ShapeError("mse_loss_and_grad: empty batch");
  ForwardCache c;
  const Matrix G = forward(m, X, train_mode, rng, &c);
  const auto M = static_cast<double>(X.cols());
  const Matrix diff = G - Y;
  const double loss = diff.squaredNorm() / M;
  if (!std::isfinite(loss)) throw NumericError("mse loss is not finite; " + detail::batch_diagnostics(X));
  Matrix dA = (2.0 / M) * diff;
  Matrix dZ = dA.cwiseProduct(detail::activation_derivative(m.spec.output, m.spec.leaky_slope, c.pre.back(), G));
  return {loss, detail::backward(m, c, std::move(dZ))};
}

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t step = 0;
  std::vector<Matrix> mW, vW;
  std::vector<Vector> mb, vb;

  static AdamState for_model(const MlpModel& m, double lr, double weight_decay) {
    AdamState s;
    s.lr = lr;
    s.weight_decay = weight_decay;
    for (std::size_t l = 0; l < m.n_layers(); ++l) {
      s.mW.push_back(Matrix::Zero(m.W[l].rows(), m.W[l].cols()));
      s.vW.push_back(Matrix::Zero(m.W[l].rows(), m.W[l].cols()));
      s.mb.push_back(Vector::Zero(m.b[l].size()));
      s.vb.push_back(Vector::Zero(m.b[l].size()));
    }
    return s;
  }
};

/// One AdamW update; weight decay is decoupled from the moment estimates.
inline void adam_step(MlpModel& m, const Gradients& g, AdamState& s) {
  if (g.dW.size() != m.n_layers() || g.db.size() != m.n_layers() || s.mW.size() != m.n_layers())
    throw ShapeError("adam_step: gradient/state layer count differs from model");
  ++s.step;
  const double c1 = 1.0 - std::pow(s.beta1, static_cast<double>(s.step));
  const double c2 = 1.0 - std::pow(s.beta2, static_cast<double>(s.step));
  auto update = [&](auto& p, const auto& grad, auto& mom, auto& var) {
    if (grad.rows() != p.rows() || grad.cols() != p.cols()) throw ShapeError("adam_step: gradient shape mismatch");
    mom = s.beta1 * mom + (1.0 - s.beta1) * grad;
    var = s.beta2 * var + (1.0 - s.beta2) * grad.cwiseProduct(grad);
    const auto mhat = mom.array() / c1;
    const auto vhat = var.array() / c2;
    p.array() -= s.lr * (mhat / (vhat.sqrt() + s.eps) + s.weight_decay * p.array());
  };
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    update(m.W[l], g.dW[l], s.mW[l], s.vW[l]);
    update(m.b[l], g.db[l], s.mb[l], s.vb[l]);
  }
  if (!m.finite()) throw NumericError("adam_step: non-finite parameters after step " + std::to_string(s.step));
}

enum class LossKind { BinaryCrossEntropy, MeanSquared };

struct TrainOptions {
  std::size_t epochs = 100;
  std::size_t batch_size = 1024;
  double lr = 1e-3;
  double weight_decay = 0.0;
  bool cosine_decay = false;
  std::uint64_t seed = 0;
};

struct TrainingCurve {
  std::vector<double> epoch_loss;  // mean minibatch loss per epoch
};

/// Shuffled minibatch training. Deterministic given options.seed.
inline TrainingCurve train_mlp(MlpModel& m, const Matrix& X, const Matrix& Y, LossKind kind, const TrainOptions& opt,
                               const std::function<void(std::size_t, double)>& on_epoch = {}) {
  const auto M = static_cast<std::size_t>(X.cols());
  if (M == 0) throw ConfigError("train_mlp: training set is empty");
  if (Y.cols() != X.cols()) throw ShapeError("train_mlp: input/target row counts differ");
  if (opt.batch_size == 0) throw ConfigError("train_mlp: batch_size must be positive");
  if (!(opt.lr > 0)) throw ConfigError("train_mlp: learning rate must be positive");
  AdamState state = AdamState::for_model(m, opt.lr, opt.weight_decay);
  RngStream shuffle_rng(opt.seed, 0), dropout_rng(opt.seed, 1);
  std::vector<Eigen::Index> order(M);
  std::iota(order.begin(), order.end(), 0);
  TrainingCurve curve;
  Matrix xb, yb;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    if (opt.cosine_decay)
      state.lr = opt.lr * 0.5 * (1.0 + std::cos(kPi * static_cast<double>(epoch) / static_cast<double>(opt.epochs)));
    for (std::size_t i = M; i > 1; --i) {
      const auto j = static_cast<std::size_t>(shuffle_rng() % i);
      std::swap(order[i - 1], order[j]);
    }
    double sum = 0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < M; start += opt.batch_size) {
      const std::size_t n = std::min(opt.batch_size, M - start);
      xb.resize(X.rows(), static_cast<Eigen::Index>(n));
      yb.resize(Y.rows(), static_cast<Eigen::Index>(n));
      for (std::size_t k = 0; k < n; ++k) {
        xb.col(static_cast<Eigen::Index>(k)) = X.col(order[start + k]);
        yb.col(static_cast<Eigen::Index>(k)) = Y.col(order[start + k]);
      }
      LossResult r;
      try {
        r = kind == LossKind::BinaryCrossEntropy ? bce_loss_and_grad(m, xb, yb.row(0), true, &dropout_rng)
                                                 : mse_loss_and_grad(m, xb, yb, true, &dropout_rng);
      } catch (const NumericError& e) {
        throw NumericError(std::string(e.what()) + " (epoch " + std::to_string(epoch) + ", batch " +
                           std::to_string(batches) + ")");
      }
      adam_step(m, r.grad, state);
      sum += r.loss;
      ++batches;
    }
    curve.epoch_loss.push_back(sum / static_cast<double>(batches));
    if (on_epoch) on_epoch(epoch, curve.epoch_loss.back());
  }
  return curve;
}

/// Per-feature affine scaling to zero mean and unit variance. Features with
/// (near) zero spread keep unit scale.
struct FeatureScaler {
  std::vector<double> mean;
  std::vector<double> scale;

  static FeatureScaler fit(const std::vector<double>& rows, std::size_t dims) {
    if (dims == 0 || rows.size() % dims) throw ShapeError("FeatureScaler::fit: row data not a multiple of dims");
    const std::size_t n = rows.size() / dims;
    if (n == 0) throw ConfigError("FeatureScaler::fit: no rows");
    FeatureScaler s;
    s.mean.assign(dims, 0.0);
    s.scale.assign(dims, 0.0);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < dims; ++k) s.mean[k] += rows[i * dims + k];
    for (auto& m : s.mean) m /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t k = 0; k < dims; ++k) s.scale[k] += std::pow(rows[i * dims + k] - s.mean[k], 2);
    for (auto& v : s.scale) {
      v = std::sqrt(v / static_cast<double>(n));
      if (!(v > 1e-12)) v = 1.0;
    }
    return s;
  }

  static FeatureScaler identity(std::size_t dims) { return {std::vector<double>(dims, 0.0), std::vector<double>(dims, 1.0)}; }

  std::size_t dims() const { return mean.size(); }
  double forward(std::size_t k, double v) const { return (v - mean[k]) / scale[k]; }
  double inverse(std::size_t k, double v) const { return v * scale[k] + mean[k]; }

  void append_to(std::vector<double>& out) const {
    out.insert(out.end(), mean.begin(), mean.end());
    out.insert(out.end(), scale.begin(), scale.end());
  }
  static FeatureScaler read_from(const std::vector<double>& in, std::size_t& pos, std::size_t dims) {
    if (pos + 2 * dims > in.size()) throw LoadError("checkpoint: scaler block truncated");
    FeatureScaler s;
    s.mean.assign(in.begin() + static_cast<std::ptrdiff_t>(pos), in.begin() + static_cast<std::ptrdiff_t>(pos + dims));
    s.scale.assign(in.begin() + static_cast<std::ptrdiff_t>(pos + dims),
                   in.begin() + static_cast<std::ptrdiff_t>(pos + 2 * dims));
    pos += 2 * dims;
    for (double v : s.scale)
      if (!(v > 0) || !std::isfinite(v)) throw LoadError("checkpoint: invalid scale in scaler block");
    return s;
  }
};

// ---------------------------------------------------------------------------
// Checkpoints

inline constexpr char kCheckpointMagic[8] = {'B', 'F', 'N', 'N', '1', '\0', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  MlpModel model;
  std::uint32_t kind = 0;
  std::vector<double> extra;  // owner-defined block (normalization, dt_obs, ...)
};

inline void save_checkpoint(const Checkpoint& c, const std::string& path) {
  io::Writer w(path);
  const MlpModel& m = c.model;
  w.put_bytes(kCheckpointMagic, 8);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(c.kind);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.spec.layer_sizes.size()));
  for (auto s : m.spec.layer_sizes) w.put<std::uint64_t>(s);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.spec.hidden));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(m.spec.output));
  w.put<double>(m.spec.leaky_slope);
  w.put<double>(m.spec.dropout);
  for (std::size_t l = 0; l < m.n_layers(); ++l) {
    for (Eigen::Index i = 0; i < m.W[l].rows(); ++i)
      for (Eigen::Index j = 0; j < m.W[l].cols(); ++j) w.put<double>(m.W[l](i, j));
    for (Eigen::Index i = 0; i < m.b[l].size(); ++i) w.put<double>(m.b[l](i));
  }
  w.put<std::uint64_t>(c.extra.size());
  w.put_array<double>(c.extra);
  w.close();
}

inline Checkpoint load_checkpoint(const std::string& path, std::optional<std::uint32_t> expected_kind = {}) {
  io::Reader r(path);
  const auto magic = r.bytes(8, "magic");
  if (!std::equal(magic.begin(), magic.end(), reinterpret_cast<const unsigned char*>(kCheckpointMagic)))
    throw LoadError(path + ": bad magic (not a BFNN1 checkpoint)");
  if (const auto v = r.get<std::uint32_t>("version"); v != kCheckpointVersion)
    throw LoadError(path + ": unsupported checkpoint version " + std::to_string(v));
  Checkpoint c;
  c.kind = r.get<std::uint32_t>("kind");
  if (expected_kind && c.kind != *expected_kind)
    throw LoadError(path + ": checkpoint kind " + std::to_string(c.kind) + " does not match expected " +
                    std::to_string(*expected_kind));
  const auto n_sizes = r.get<std::uint32_t>("n_sizes");
  if (n_sizes < 2 || n_sizes > 64) throw LoadError(path + ": invalid layer count in field 'n_sizes'");
  MlpSpec spec;
  for (std::uint32_t i = 0; i < n_sizes; ++i) {
    const auto s = r.get<std::uint64_t>("layer_sizes");
    if (s == 0 || s > (1u << 20)) throw LoadError(path + ": invalid value in field 'layer_sizes'");
    spec.layer_sizes.push_back(s);
  }
  const auto h = r.get<std::uint32_t>("hidden_activation");
  const auto o = r.get<std::uint32_t>("output_activation");
  if (h > 3 || o > 3) throw LoadError(path + ": invalid activation enum");
  spec.hidden = static_cast<Activation>(h);
  spec.output = static_cast<Activation>(o);
  spec.leaky_slope = r.get<double>("leaky_slope");
  spec.dropout = r.get<double>("dropout");
  try {
    spec.validate();
  } catch (const ConfigError& e) {
    throw LoadError(path + ": " + e.what());
  }
  c.model = make_zero_mlp(spec);
  for (std::size_t l = 0; l < c.model.n_layers(); ++l) {
    const auto w = r.get_array<double>(static_cast<std::size_t>(c.model.W[l].size()), "weights");
    for (Eigen::Index i = 0, k = 0; i < c.model.W[l].rows(); ++i)
      for (Eigen::Index j = 0; j < c.model.W[l].cols(); ++j) c.model.W[l](i, j) = w[static_cast<std::size_t>(k++)];
    const auto b = r.get_array<double>(static_cast<std::size_t>(c.model.b[l].size()), "biases");
    for (Eigen::Index i = 0; i < c.model.b[l].size(); ++i) c.model.b[l](i) = b[static_cast<std::size_t>(i)];
  }
  const auto n_extra = r.get<std::uint64_t>("n_extra");
  if (n_extra > r.size()) throw LoadError(path + ": truncated file while reading field 'extra'");
  c.extra = r.get_array<double>(n_extra, "extra");
  if (r.offset() != r.size()) throw LoadError(path + ": trailing bytes after last field");
  if (!c.model.finite()) throw LoadError(path + ": non-finite parameters");
  return c;
}

}  // namespace bflow
