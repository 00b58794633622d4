#pragma once

// Projection head: BatchNorm (no affine) -> Linear -> L2 normalize, trained
// with an additive angular margin softmax (ArcFace). Gradients are analytic.

#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>

#include "guie/error.hpp"
#include "guie/rng.hpp"
#include "guie/tensor.hpp"

namespace guie {

enum class NormMode : std::uint8_t { train, eval };

template <class T>
struct BatchNormState {
  RowVector<T> running_mean;
  RowVector<T> running_var;
  T momentum = T(0.1);
  T epsilon = T(1e-5);
  NormMode mode = NormMode::train;

  /// Fresh state: zero mean, unit variance.
  static BatchNormState fresh(Eigen::Index dim) {
    BatchNormState s;
    s.running_mean = RowVector<T>::Zero(dim);
    s.running_var = RowVector<T>::Ones(dim);
    return s;
  }

  Eigen::Index dim() const noexcept { return running_mean.size(); }

  template <class U>
  BatchNormState<U> cast() const {
    BatchNormState<U> o;
    o.running_mean = running_mean.template cast<U>();
    o.running_var = running_var.template cast<U>();
    o.momentum = static_cast<U>(momentum);
    o.epsilon = static_cast<U>(epsilon);
    o.mode = mode;
    return o;
  }
};

template <class T>
struct BatchNormCache {
  Matrix<T> normalized;  // X̂
  RowVector<T> inv_std;  // 1 / sqrt(var + eps), biased batch variance
};

template <class T>
struct BatchNormOutput {
  Matrix<T> y;
  BatchNormCache<T> cache;
};

/// Normalizes with the running statistics. Pure; ignores `state.mode`.
template <class T>
Matrix<T> batchnorm_eval(const Matrix<T>& x, const BatchNormState<T>& state) {
  if (x.cols() != state.dim()) throw DomainError("batchnorm: input width does not match state");
  if (!x.allFinite()) throw DomainError("batchnorm: non-finite input");
  const RowVector<T> inv = (state.running_var.array() + state.epsilon).rsqrt().matrix();
  return ((x.rowwise() - state.running_mean).array().rowwise() * inv.array()).matrix();
}

/// Train mode: batch statistics, running stats updated in place with the
/// unbiased batch variance. Eval mode: running statistics, state untouched.
template <class T>
BatchNormOutput<T> batchnorm_forward(const Matrix<T>& x, BatchNormState<T>& state) {
  if (x.cols() != state.dim()) throw DomainError("batchnorm: input width does not match state");
  if (!x.allFinite()) throw DomainError("batchnorm: non-finite input");
  BatchNormOutput<T> out;
  if (state.mode == NormMode::eval) {
    out.y = batchnorm_eval(x, state);
    out.cache.normalized = out.y;
    out.cache.inv_std = (state.running_var.array() + state.epsilon).rsqrt().matrix();
    return out;
  }
  const auto b = x.rows();
  if (b < 2) throw DomainError("batchnorm: train mode needs a batch of at least 2");
  const RowVector<T> mean = x.colwise().mean();
  const Matrix<T> centered = x.rowwise() - mean;
  const RowVector<T> var = centered.array().square().colwise().sum().matrix() / static_cast<T>(b);
  out.cache.inv_std = (var.array() + state.epsilon).rsqrt().matrix();
  out.cache.normalized = (centered.array().rowwise() * out.cache.inv_std.array()).matrix();
  out.y = out.cache.normalized;

  const T mom = state.momentum;
  const RowVector<T> unbiased = var * (static_cast<T>(b) / static_cast<T>(b - 1));
  state.running_mean = (T(1) - mom) * state.running_mean + mom * mean;
  state.running_var = (T(1) - mom) * state.running_var + mom * unbiased;
  return out;
}

/// dX = (1 / (B σ̂)) (B dY − Σ dY − X̂ ⊙ Σ(dY ⊙ X̂)), sums over the batch.
template <class T>
Matrix<T> batchnorm_backward(const Matrix<T>& dy, const BatchNormCache<T>& cache) {
  if (dy.rows() != cache.normalized.rows() || dy.cols() != cache.normalized.cols())
    throw DomainError("batchnorm_backward: gradient shape does not match cache");
  const T b = static_cast<T>(dy.rows());
  const RowVector<T> sum_dy = dy.colwise().sum();
  const RowVector<T> sum_dy_xhat = (dy.array() * cache.normalized.array()).colwise().sum().matrix();
  Matrix<T> dx = (b * dy).rowwise() - sum_dy;
  dx -= (cache.normalized.array().rowwise() * sum_dy_xhat.array()).matrix();
  dx = (dx.array().rowwise() * (cache.inv_std.array() / b)).matrix();
  return dx;
}

// ---------------------------------------------------------------------------
// Parameters

template <class T>
struct HeadParams {
  enum : std::size_t { kProjWeight = 0, kProjBias = 1, kClassWeight = 2 };

  // [d_out x d_in], [1 x d_out], [n_classes x d_out]
  TensorList<T> tensors;

  Matrix<T>& proj_weight() { return tensors[kProjWeight]; }
  Matrix<T>& proj_bias() { return tensors[kProjBias]; }
  Matrix<T>& class_weight() { return tensors[kClassWeight]; }
  const Matrix<T>& proj_weight() const { return tensors[kProjWeight]; }
  const Matrix<T>& proj_bias() const { return tensors[kProjBias]; }
  const Matrix<T>& class_weight() const { return tensors[kClassWeight]; }

  Eigen::Index d_in() const { return proj_weight().cols(); }
  Eigen::Index d_out() const { return proj_weight().rows(); }
  Eigen::Index n_classes() const { return class_weight().rows(); }

  /// Linear weight ~ U(−1/√d_in, 1/√d_in) row-major, bias 0, class rows
  /// ~ N(0, I) row-major then L2-normalized; drawn in that order.
  static HeadParams init(Eigen::Index d_in, Eigen::Index d_out, Eigen::Index n_classes, SplitMix64& rng) {
    if (d_in < 1 || d_out < 1 || n_classes < 1) throw DomainError("head dimensions must be positive");
    HeadParams p;
    p.tensors = {Matrix<T>(d_out, d_in), Matrix<T>::Zero(1, d_out), Matrix<T>(n_classes, d_out)};
    const double bound = 1.0 / std::sqrt(static_cast<double>(d_in));
    for (Eigen::Index r = 0; r < d_out; ++r)
      for (Eigen::Index c = 0; c < d_in; ++c)
        p.proj_weight()(r, c) = static_cast<T>(-bound + 2.0 * bound * rng.uniform());
    for (Eigen::Index r = 0; r < n_classes; ++r) {
      std::vector<double> row(static_cast<std::size_t>(d_out));
      double sq = 0.0;
      for (auto& v : row) {
        v = rng.normal();
        sq += v * v;
      }
      const double inv = 1.0 / std::sqrt(sq);
      for (Eigen::Index c = 0; c < d_out; ++c)
        p.class_weight()(r, c) = static_cast<T>(row[static_cast<std::size_t>(c)] * inv);
    }
    return p;
  }

  template <class U>
  HeadParams<U> cast() const {
    HeadParams<U> o;
    for (const auto& t : tensors) o.tensors.push_back(t.template cast<U>());
    return o;
  }
};

struct ArcFaceConfig {
  double scale = 30.0;
  double margin = 0.5;

  void validate() const {
    if (!(scale > 0.0) || !std::isfinite(scale)) throw ConfigError("arcface scale must be positive");
    if (!(margin >= 0.0) || !(margin < std::numbers::pi / 2))
      throw ConfigError("arcface margin must lie in [0, pi/2)");
  }
};

// ---------------------------------------------------------------------------
// Forward pieces

template <class T>
Matrix<T> project(const Matrix<T>& xhat, const HeadParams<T>& p) {
  if (xhat.cols() != p.d_in()) throw DomainError("head input width does not match projection");
  Matrix<T> z = xhat * p.proj_weight().transpose();
  z.rowwise() += p.proj_bias().row(0);
  return z;
}

template <class T>
struct Normalized {
  Matrix<T> unit;
  Eigen::Matrix<T, Eigen::Dynamic, 1> norms;
};

/// Row-wise L2 normalization; a zero row is a degenerate embedding.
template <class T>
Normalized<T> l2_normalize_rows(const Matrix<T>& z) {
  Normalized<T> n{z, z.rowwise().norm()};
  for (Eigen::Index i = 0; i < z.rows(); ++i) {
    if (!(n.norms(i) > T(0)) || !std::isfinite(static_cast<double>(n.norms(i))))
      throw DomainError("degenerate embedding: zero-norm projection in row " + std::to_string(i));
    n.unit.row(i) /= n.norms(i);
  }
  return n;
}

/// Eval-mode embedding of a batch of head inputs (rows of width d_in).
template <class T>
Matrix<T> embed_batch(const Matrix<T>& x, const HeadParams<T>& p, const BatchNormState<T>& bn) {
  return l2_normalize_rows(project(batchnorm_eval(x, bn), p)).unit;
}

template <class T>
RowVector<T> head_embed(const RowVector<T>& x, const HeadParams<T>& p, const BatchNormState<T>& bn) {
  Matrix<T> m = x;
  return embed_batch(m, p, bn).row(0);
}

// ---------------------------------------------------------------------------
// ArcFace

template <class T>
struct ArcFaceOutput {
  T loss{};
  Matrix<T> logits;        // [B x n_classes], margin applied to targets
  Matrix<T> d_embeddings;  // [B x d_out]
  Matrix<T> d_class_weight;  // [n_classes x d_out]
};

/// Mean cross-entropy over s·cos θ_ij with the target replaced by
/// s·cos(θ + m). When cos θ ≤ cos(π − m) the target uses cos θ − m·sin m.
template <class T>
ArcFaceOutput<T> arcface_loss(const Matrix<T>& emb, const Matrix<T>& class_weight,
                              std::span<const std::uint32_t> labels, const ArcFaceConfig& cfg) {
  cfg.validate();
  const auto b = emb.rows();
  const auto n = class_weight.rows();
  if (static_cast<std::size_t>(b) != labels.size()) throw DomainError("arcface: label count differs from batch");
  if (b == 0) throw DomainError("arcface: empty batch");
  if (class_weight.cols() != emb.cols()) throw DomainError("arcface: embedding width differs from class weights");
  for (Eigen::Index i = 0; i < b; ++i) {
    if (std::abs(static_cast<double>(emb.row(i).norm()) - 1.0) > 1e-4)
      throw DomainError("arcface: embedding row " + std::to_string(i) + " is not unit-norm");
    if (labels[static_cast<std::size_t>(i)] >= static_cast<std::uint64_t>(n))
      throw DomainError("arcface: label out of range in row " + std::to_string(i));
  }

  const Eigen::Matrix<T, Eigen::Dynamic, 1> wnorm = class_weight.rowwise().norm();
  for (Eigen::Index j = 0; j < n; ++j)
    if (!(wnorm(j) > T(0))) throw DomainError("arcface: zero class-weight row " + std::to_string(j));
  const Matrix<T> what = class_weight.array().colwise() / wnorm.array();

  const T s = static_cast<T>(cfg.scale);
  const T cos_m = static_cast<T>(std::cos(cfg.margin));
  const T sin_m = static_cast<T>(std::sin(cfg.margin));
  const T threshold = static_cast<T>(std::cos(std::numbers::pi - cfg.margin));
  const T fallback_shift = static_cast<T>(cfg.margin * std::sin(cfg.margin));

  const Matrix<T> cosines = emb * what.transpose();
  ArcFaceOutput<T> out;
  out.logits = s * cosines;
  std::vector<T> dphi(static_cast<std::size_t>(b));
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    const T c = cosines(i, y);
    T phi, d;
    if (c > threshold) {
      const T sin_t = std::sqrt(std::max(T(0), T(1) - c * c));
      phi = c * cos_m - sin_t * sin_m;
      d = sin_t > T(0) ? cos_m + c * sin_m / sin_t : cos_m;
    } else {
      phi = c - fallback_shift;
      d = T(1);
    }
    out.logits(i, y) = s * phi;
    dphi[static_cast<std::size_t>(i)] = d;
  }

  // Softmax cross-entropy; g holds dLoss/dcos.
  Matrix<T> g(b, n);
  T total = 0;
  for (Eigen::Index i = 0; i < b; ++i) {
    const auto y = static_cast<Eigen::Index>(labels[static_cast<std::size_t>(i)]);
    const T mx = out.logits.row(i).maxCoeff();
    const auto ex = (out.logits.row(i).array() - mx).exp();
    const T z = ex.sum();
    total += std::log(z) + mx - out.logits(i, y);
    g.row(i) = (ex / z).matrix();
    g(i, y) -= T(1);
    g.row(i) *= s / static_cast<T>(b);
    g(i, y) *= dphi[static_cast<std::size_t>(i)];
  }
  out.loss = total / static_cast<T>(b);

  out.d_embeddings = g * what;
  const Matrix<T> d_what = g.transpose() * emb;
  const Eigen::Matrix<T, Eigen::Dynamic, 1> radial = (d_what.array() * what.array()).rowwise().sum();
  out.d_class_weight = ((d_what - (what.array().colwise() * radial.array()).matrix()).array().colwise() /
                        wnorm.array())
                           .matrix();
  return out;
}

// ---------------------------------------------------------------------------
// Whole head

template <class T>
struct HeadLoss {
  T loss{};
  TensorList<T> grads;  // mirrors HeadParams::tensors
  Matrix<T> d_normalized_input;  // dLoss/dX̂
};

/// Loss and parameter gradients for an already-normalized batch X̂.
template <class T>
HeadLoss<T> head_loss(const Matrix<T>& xhat, const HeadParams<T>& p, std::span<const std::uint32_t> labels,
                      const ArcFaceConfig& cfg) {
  const Matrix<T> z = project(xhat, p);
  const auto n = l2_normalize_rows(z);
  auto arc = arcface_loss(n.unit, p.class_weight(), labels, cfg);

  // Back through e = z / ‖z‖.
  const Eigen::Matrix<T, Eigen::Dynamic, 1> radial = (arc.d_embeddings.array() * n.unit.array()).rowwise().sum();
  const Matrix<T> dz = ((arc.d_embeddings - (n.unit.array().colwise() * radial.array()).matrix()).array().colwise() /
                        n.norms.array())
                           .matrix();

  HeadLoss<T> out;
  out.loss = arc.loss;
  out.grads = {dz.transpose() * xhat, dz.colwise().sum(), std::move(arc.d_class_weight)};
  out.d_normalized_input = dz * p.proj_weight();
  return out;
}

template <class T>
struct ChainLoss {
  T loss{};
  TensorList<T> grads;
  Matrix<T> d_input;
};

/// Full chain from raw inputs: train-mode BatchNorm on `x` (updating `bn`),
/// head_loss, and backprop into the raw inputs.
template <class T>
ChainLoss<T> chain_loss(const Matrix<T>& x, const HeadParams<T>& p, BatchNormState<T>& bn,
                        std::span<const std::uint32_t> labels, const ArcFaceConfig& cfg) {
  auto norm = batchnorm_forward(x, bn);
  auto h = head_loss(norm.y, p, labels, cfg);
  return {h.loss, std::move(h.grads), batchnorm_backward(h.d_normalized_input, norm.cache)};
}

}  // namespace guie
