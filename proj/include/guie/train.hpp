#pragma once

// Mini-batch SAM+AdamW training of the head on precomputed features, with
// checkpoint selection by zero-shot mAP@5.

#include <cmath>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "guie/checkpoint.hpp"
#include "guie/error.hpp"
#include "guie/features.hpp"
#include "guie/head.hpp"
#include "guie/optim.hpp"
#include "guie/preprocess.hpp"
#include "guie/retrieval.hpp"
#include "guie/rng.hpp"

namespace guie {

struct TrainConfig {
  std::uint32_t batch_size = 256;
  std::uint32_t total_epochs = 1000;
  std::uint64_t seed = 0;
  std::uint32_t eval_every = 10;
  std::uint32_t d_out = 64;
  std::uint32_t eval_k = 5;
  ScheduleSpec schedule;
  ArcFaceConfig arcface;
  SamConfig sam;
  AdamWConfig adamw;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  /// Schedule copy whose total_epochs follows this config.
  ScheduleSpec effective_schedule() const {
    auto s = schedule;
    s.total_epochs = total_epochs;
    return s;
  }

  void validate() const {
    if (batch_size < 2) throw ConfigError("batch_size must be at least 2");
    if (total_epochs < 1) throw ConfigError("total_epochs must be at least 1");
    if (eval_every < 1) throw ConfigError("eval_every must be at least 1");
    if (d_out < 1) throw ConfigError("d_out must be positive");
    if (eval_k < 1) throw ConfigError("eval k must be positive");
    if (!(bn_momentum > 0.0 && bn_momentum < 1.0)) throw ConfigError("bn momentum must lie in (0, 1)");
    if (!(bn_epsilon > 0.0)) throw ConfigError("bn epsilon must be positive");
    effective_schedule().validate();
    arcface.validate();
    sam.validate();
    adamw.validate();
  }

  nlohmann::ordered_json to_json() const {
    nlohmann::ordered_json j;
    j["batch_size"] = batch_size;
    j["total_epochs"] = total_epochs;
    j["seed"] = seed;
    j["eval_every"] = eval_every;
    j["d_out"] = d_out;
    j["eval_k"] = eval_k;
    j["lr_max"] = schedule.lr_max;
    j["lr_min"] = schedule.lr_min;
    j["warmup_epochs"] = schedule.warmup_epochs;
    j["scale"] = arcface.scale;
    j["margin"] = arcface.margin;
    j["rho"] = sam.rho;
    j["grad_norm_floor"] = sam.grad_norm_floor;
    j["beta1"] = adamw.beta1;
    j["beta2"] = adamw.beta2;
    j["adam_eps"] = adamw.epsilon;
    j["weight_decay"] = adamw.weight_decay;
    j["bn_momentum"] = bn_momentum;
    j["bn_epsilon"] = bn_epsilon;
    j["aspect"] = kAspectIsWidthOverHeight ? "width/height" : "height/width";
    return j;
  }
};

/// Contiguous label indices for the sorted distinct classes of a manifest.
class LabelIndex {
public:
  explicit LabelIndex(const Manifest& m) : classes_(distinct_classes(m)) {
    for (std::size_t i = 0; i < classes_.size(); ++i) pos_[classes_[i]] = static_cast<std::uint32_t>(i);
  }

  std::size_t size() const noexcept { return classes_.size(); }
  const std::vector<std::uint32_t>& classes() const noexcept { return classes_; }

  std::uint32_t operator()(std::uint32_t class_id) const {
    auto it = pos_.find(class_id);
    if (it == pos_.end()) throw DomainError("class " + std::to_string(class_id) + " is not in the label index");
    return it->second;
  }

private:
  std::vector<std::uint32_t> classes_;
  std::unordered_map<std::uint32_t, std::uint32_t> pos_;
};

/// Head inputs for the manifest entries, in manifest order: each row is the
/// backbone feature followed by geometry_features(width, height) of the
/// store record.
inline Matrix<float> head_inputs(const FeatureStore& store, const Manifest& m) {
  const auto dim = static_cast<Eigen::Index>(store.dimension());
  Matrix<float> x(static_cast<Eigen::Index>(m.size()), dim + static_cast<Eigen::Index>(kGeometryDim));
  for (std::size_t i = 0; i < m.size(); ++i) {
    const auto& r = store.at(m.entries[i].image_id);
    const auto row = static_cast<Eigen::Index>(i);
    x.row(row).head(dim) = Eigen::Map<const RowVector<float>>(r.feature.data(), dim);
    const auto g = geometry_features(r.width, r.height);
    for (std::size_t k = 0; k < kGeometryDim; ++k) x(row, dim + static_cast<Eigen::Index>(k)) = g[k];
  }
  return x;
}

inline Matrix<float> head_inputs(const FeatureStore& store) {
  Manifest all;
  for (const auto& r : store.records()) all.entries.push_back({r.image_id, r.class_id, "", r.width, r.height, r.category, {}});
  return head_inputs(store, all);
}

struct TrainState {
  HeadParams<float> params;
  BatchNormState<float> bn;
  AdamWState<float> opt;

  static TrainState init(Eigen::Index d_in, const TrainConfig& cfg, std::size_t n_classes, SplitMix64& rng) {
    TrainState s;
    s.params = HeadParams<float>::init(d_in, cfg.d_out, static_cast<Eigen::Index>(n_classes), rng);
    s.bn = BatchNormState<float>::fresh(d_in);
    s.bn.momentum = static_cast<float>(cfg.bn_momentum);
    s.bn.epsilon = static_cast<float>(cfg.bn_epsilon);
    s.opt = AdamWState<float>::for_params(s.params.tensors, cfg.adamw);
    return s;
  }
};

/// One pass over the shuffled rows of `inputs` in chunks of batch_size (a
/// final chunk of fewer than 2 rows is dropped). Each chunk takes one SAM
/// step whose two gradient evaluations share the chunk's batch statistics.
/// Returns the mean first-evaluation loss over chunks.
inline double train_epoch(const Matrix<float>& inputs, const std::vector<std::uint32_t>& labels, TrainState& st,
                          double lr, const TrainConfig& cfg, SplitMix64& rng) {
  const auto n = static_cast<std::size_t>(inputs.rows());
  if (labels.size() != n) throw DomainError("train_epoch: label count differs from inputs");
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  shuffle<std::size_t>(order, rng);

  st.bn.mode = NormMode::train;
  double loss_sum = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < n; start += cfg.batch_size) {
    const std::size_t len = std::min<std::size_t>(cfg.batch_size, n - start);
    if (len < 2) break;
    Matrix<float> x(static_cast<Eigen::Index>(len), inputs.cols());
    std::vector<std::uint32_t> y(len);
    for (std::size_t i = 0; i < len; ++i) {
      x.row(static_cast<Eigen::Index>(i)) = inputs.row(static_cast<Eigen::Index>(order[start + i]));
      y[i] = labels[order[start + i]];
    }
    const Matrix<float> xhat = batchnorm_forward(x, st.bn).y;

    std::optional<float> first_loss;
    const GradientFn<float> grad_eval = [&](const TensorList<float>& ts) {
      HeadParams<float> p{ts};
      auto h = head_loss(xhat, p, y, cfg.arcface);
      if (!std::isfinite(h.loss) || !all_finite(h.grads))
        throw DivergenceError(batches, "non-finite loss or gradient");
      if (!first_loss) first_loss = h.loss;
      return std::move(h.grads);
    };
    try {
      sam_step(st.params.tensors, grad_eval, st.opt, cfg.sam, lr);
    } catch (const OptimizerError& e) {
      throw DivergenceError(batches, e.what());
    }
    loss_sum += static_cast<double>(*first_loss);
    ++batches;
  }
  if (batches == 0) throw ConfigError("train_epoch: fewer than 2 training rows");
  const double mean = loss_sum / static_cast<double>(batches);
  if (!std::isfinite(mean)) throw DivergenceError(batches, "non-finite mean loss");
  return mean;
}

/// Embeds `m` with an eval-mode head and scores leave-one-out mAP@k.
inline double evaluate_retrieval(const FeatureStore& store, const Manifest& m, const HeadParams<float>& params,
                                 const BatchNormState<float>& bn, std::size_t k = 5) {
  const Matrix<float> e = embed_batch(head_inputs(store, m), params, bn);
  std::vector<std::string> ids;
  std::vector<std::uint32_t> labels;
  for (const auto& en : m.entries) {
    ids.push_back(en.image_id);
    labels.push_back(en.class_id);
  }
  return leave_one_out_map(build_index(std::move(ids), e, std::move(labels)), k);
}

struct EpochLog {
  std::uint32_t epoch = 0;  // 1-based
  double lr = 0.0;
  double mean_loss = 0.0;
};

struct EvalLog {
  std::uint32_t epoch = 0;
  double map = 0.0;
};

struct FitObserver {
  std::function<void(const EpochLog&)> on_epoch;
  std::function<void(const EvalLog&)> on_eval;
};

struct FitResult {
  Checkpoint best;
  std::vector<EpochLog> epochs;
  std::vector<EvalLog> evals;
};

/// Trains on splits.train and keeps the checkpoint with the highest
/// zero-shot mAP@k. Evaluations run after every eval_every-th epoch and
/// after the last epoch; ties keep the earlier epoch.
inline FitResult fit(const FeatureStore& store, const Splits& splits, const TrainConfig& cfg,
                     const FitObserver& observer = {}) {
  cfg.validate();
  if (splits.zeroshot_test.empty()) throw ConfigError("fit: zero-shot split is empty");
  if (splits.train.empty()) throw ConfigError("fit: train split is empty");

  const LabelIndex label_index(splits.train);
  std::vector<std::uint32_t> labels;
  labels.reserve(splits.train.size());
  for (const auto& e : splits.train.entries) labels.push_back(label_index(e.class_id));
  const Matrix<float> inputs = head_inputs(store, splits.train);

  SplitMix64 rng(cfg.seed);
  auto st = TrainState::init(inputs.cols(), cfg, label_index.size(), rng);
  const auto schedule = cfg.effective_schedule();
  const std::string config_json = cfg.to_json().dump();

  FitResult out;
  bool have_best = false;
  for (std::uint32_t e = 0; e < cfg.total_epochs; ++e) {
    const double lr = lr_at(e, schedule);
    const double loss = train_epoch(inputs, labels, st, lr, cfg, rng);
    out.epochs.push_back({e + 1, lr, loss});
    if (observer.on_epoch) observer.on_epoch(out.epochs.back());

    if ((e + 1) % cfg.eval_every != 0 && e + 1 != cfg.total_epochs) continue;
    auto bn_eval = st.bn;
    bn_eval.mode = NormMode::eval;
    const double map = evaluate_retrieval(store, splits.zeroshot_test, st.params, bn_eval, cfg.eval_k);
    out.evals.push_back({e + 1, map});
    if (observer.on_eval) observer.on_eval(out.evals.back());
    if (!have_best || map > out.best.zeroshot_map5) {
      have_best = true;
      out.best = Checkpoint{st.params, bn_eval, cfg.arcface, label_index.classes(), e + 1, map, config_json};
    }
  }
  return out;
}

/// Eval-mode embedding of every store record. Records keyed
/// "<id>#<variant_tag>" are grouped by id and aggregated; output order is
/// first appearance of each id, metadata from the group's first record.
inline FeatureStore embed_store(const FeatureStore& store, const Checkpoint& c) {
  if (store.dimension() + kGeometryDim != static_cast<std::size_t>(c.params.d_in()))
    throw FormatError("embed: store dimension " + std::to_string(store.dimension()) +
                      " does not match checkpoint input width " + std::to_string(c.params.d_in()));
  const Matrix<float> e = embed_batch(head_inputs(store), c.params, c.eval_bn());

  std::vector<std::string> order;
  std::unordered_map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < store.size(); ++i) {
    auto base = split_variant_key(store[i].image_id).first;
    auto [it, fresh] = groups.try_emplace(base);
    if (fresh) order.push_back(base);
    it->second.push_back(i);
  }

  FeatureStore out(static_cast<std::uint32_t>(c.params.d_out()));
  for (const auto& id : order) {
    const auto& members = groups[id];
    RowVector<float> v;
    if (members.size() == 1) {
      v = e.row(static_cast<Eigen::Index>(members.front()));
    } else {
      std::vector<RowVector<float>> rows;
      for (auto i : members) rows.push_back(e.row(static_cast<Eigen::Index>(i)));
      v = aggregate_embeddings(rows);
    }
    FeatureRecord r = store[members.front()];
    r.image_id = id;
    r.feature.assign(v.data(), v.data() + v.size());
    out.add(std::move(r));
  }
  return out;
}

}  // namespace guie
