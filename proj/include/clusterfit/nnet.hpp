#pragma once

// Multilayer perceptron with ReLU hidden layers and one or more softmax
// heads sharing the trunk. Trained from scratch with mini-batch SGD +
// momentum under a step-decay learning-rate schedule. Supports plain
// cross-entropy, temperature distillation from a teacher, and multi-head
// multi-task training (sum of per-head cross-entropies).
//
// Scalar is float for experiments and double for gradient checks.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "clusterfit/errors.hpp"
#include "clusterfit/featurestore.hpp"
#include "clusterfit/rng.hpp"
#include "json.hpp"

namespace clusterfit {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// Layer widths: input, hidden layers (may be empty), and one width per head.
struct MlpShape {
  std::size_t input = 0;
  std::vector<std::size_t> hidden;
  std::vector<std::size_t> heads;

  std::size_t penultimate() const { return hidden.empty() ? input : hidden.back(); }

  std::size_t parameter_count() const {
    std::size_t count = 0;
    std::size_t prev = input;
    for (auto w : hidden) {
      count += prev * w + w;
      prev = w;
    }
    for (auto h : heads) count += prev * h + h;
    return count;
  }

  void validate() const {
    require(input > 0, ErrorKind::config, "input width must be positive");
    require(!heads.empty(), ErrorKind::config, "model needs at least one head");
    for (auto w : hidden) require(w > 0, ErrorKind::config, "hidden layer of width 0");
    for (auto h : heads) require(h > 0, ErrorKind::config, "head of width 0");
  }

  friend bool operator==(const MlpShape&, const MlpShape&) = default;
};

template <typename Scalar>
struct DenseLayer {
  Matrix<Scalar> weight;  // out x in
  RowVector<Scalar> bias;  // 1 x out
};

template <typename Scalar>
struct MlpModel {
  MlpShape shape;
  std::vector<DenseLayer<Scalar>> trunk;
  std::vector<DenseLayer<Scalar>> heads;
  std::uint64_t seed = 0;
  std::size_t epochs_trained = 0;

  static MlpModel zeros(const MlpShape& shape) {
    MlpModel m;
    m.shape = shape;
    std::size_t prev = shape.input;
    for (auto w : shape.hidden) {
      m.trunk.push_back({Matrix<Scalar>::Zero(w, prev), RowVector<Scalar>::Zero(w)});
      prev = w;
    }
    for (auto h : shape.heads) m.heads.push_back({Matrix<Scalar>::Zero(h, prev), RowVector<Scalar>::Zero(h)});
    return m;
  }

  template <typename Fn>
  void for_each_layer(Fn&& fn) {
    for (auto& l : trunk) fn(l);
    for (auto& l : heads) fn(l);
  }

  template <typename Fn>
  void for_each_layer(Fn&& fn) const {
    for (const auto& l : trunk) fn(l);
    for (const auto& l : heads) fn(l);
  }

  /// All parameters in canonical order: per layer (trunk, then heads) the
  /// row-major weight followed by the bias.
  std::vector<Scalar> flatten() const {
    std::vector<Scalar> out;
    out.reserve(shape.parameter_count());
    for_each_layer([&](const DenseLayer<Scalar>& l) {
      out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
      out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
    });
    return out;
  }

  void unflatten(std::span<const Scalar> values) {
    require(values.size() == shape.parameter_count(), ErrorKind::shape, "parameter vector has the wrong length");
    std::size_t at = 0;
    for_each_layer([&](DenseLayer<Scalar>& l) {
      std::copy_n(values.data() + at, l.weight.size(), l.weight.data());
      at += static_cast<std::size_t>(l.weight.size());
      std::copy_n(values.data() + at, l.bias.size(), l.bias.data());
      at += static_cast<std::size_t>(l.bias.size());
    });
  }

  bool finite() const {
    bool ok = true;
    for_each_layer([&](const DenseLayer<Scalar>& l) { ok = ok && l.weight.allFinite() && l.bias.allFinite(); });
    return ok;
  }

  template <typename Other>
  MlpModel<Other> cast() const {
    MlpModel<Other> m;
    m.shape = shape;
    m.seed = seed;
    m.epochs_trained = epochs_trained;
    for (const auto& l : trunk) m.trunk.push_back({l.weight.template cast<Other>(), l.bias.template cast<Other>()});
    for (const auto& l : heads) m.heads.push_back({l.weight.template cast<Other>(), l.bias.template cast<Other>()});
    return m;
  }
};

/// Hidden weights ~ N(0, 1/fan_in); head weights and all biases start at zero.
template <typename Scalar = float>
MlpModel<Scalar> init_model(const MlpShape& shape, std::uint64_t seed) {
  shape.validate();
  auto m = MlpModel<Scalar>::zeros(shape);
  m.seed = seed;
  Rng rng(mix_seed(seed, 0x1417));
  for (auto& layer : m.trunk) {
    const double scale = 1.0 / std::sqrt(double(layer.weight.cols()));
    for (Eigen::Index i = 0; i < layer.weight.size(); ++i) layer.weight.data()[i] = Scalar(rng.normal() * scale);
  }
  return m;
}

template <typename Scalar>
Matrix<Scalar> to_matrix(const FeatureMatrix& x) {
  Matrix<Scalar> out(x.rows(), x.cols());
  const auto data = x.data();
  for (std::size_t i = 0; i < data.size(); ++i) out.data()[i] = Scalar(data[i]);
  return out;
}

template <typename Scalar>
Matrix<Scalar> gather_rows(const FeatureMatrix& x, std::span<const std::size_t> rows) {
  Matrix<Scalar> out(rows.size(), x.cols());
  for (std::size_t r = 0; r < rows.size(); ++r) {
    auto src = x.row(rows[r]);
    for (std::size_t j = 0; j < src.size(); ++j) out(Eigen::Index(r), Eigen::Index(j)) = Scalar(src[j]);
  }
  return out;
}

template <typename Scalar>
FeatureMatrix to_features(const Matrix<Scalar>& m) {
  std::vector<float> data(static_cast<std::size_t>(m.size()));
  for (Eigen::Index i = 0; i < m.size(); ++i) data[std::size_t(i)] = static_cast<float>(m.data()[i]);
  return FeatureMatrix(static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols()), std::move(data));
}

/// Row-wise softmax of logits / temperature.
template <typename Scalar>
Matrix<Scalar> softmax_rows(const Matrix<Scalar>& logits, Scalar temperature = Scalar(1)) {
  Matrix<Scalar> z = logits / temperature;
  const auto max = z.rowwise().maxCoeff().eval();
  z = (z.colwise() - max).array().exp().matrix();
  const auto sum = z.rowwise().sum().eval();
  for (Eigen::Index i = 0; i < z.rows(); ++i) z.row(i) /= sum(i);
  return z;
}

/// Row-wise log-softmax of logits / temperature.
template <typename Scalar>
Matrix<Scalar> log_softmax_rows(const Matrix<Scalar>& logits, Scalar temperature = Scalar(1)) {
  Matrix<Scalar> z = logits / temperature;
  const auto max = z.rowwise().maxCoeff().eval();
  z = z.colwise() - max;
  const auto lse = z.array().exp().rowwise().sum().log().matrix().eval();
  return z.colwise() - lse;
}

template <typename Scalar>
struct ForwardCache {
  std::vector<Matrix<Scalar>> activations;  // [0] = input, then post-ReLU hidden outputs
  std::vector<Matrix<Scalar>> logits;       // one per head

  const Matrix<Scalar>& penultimate() const { return activations.back(); }
};

template <typename Scalar>
ForwardCache<Scalar> forward_cache(const MlpModel<Scalar>& model, Matrix<Scalar> batch) {
  require(static_cast<std::size_t>(batch.cols()) == model.shape.input, ErrorKind::shape,
          "batch has width " + std::to_string(batch.cols()) + ", model expects " + std::to_string(model.shape.input));
  // A one-row product takes Eigen's matrix-vector path, which rounds
  // differently from the matrix-matrix kernel; duplicate the row so a
  // sample's outputs do not depend on the size of the batch it lands in.
  const bool single = batch.rows() == 1;
  if (single) {
    batch.conservativeResize(2, Eigen::NoChange);
    batch.row(1) = batch.row(0);
  }
  ForwardCache<Scalar> cache;
  cache.activations.reserve(model.trunk.size() + 1);
  cache.activations.push_back(std::move(batch));
  for (const auto& layer : model.trunk) {
    Matrix<Scalar> z = cache.activations.back() * layer.weight.transpose();
    z.rowwise() += layer.bias;
    cache.activations.push_back(z.cwiseMax(Scalar(0)));
  }
  for (const auto& head : model.heads) {
    Matrix<Scalar> z = cache.activations.back() * head.weight.transpose();
    z.rowwise() += head.bias;
    cache.logits.push_back(std::move(z));
  }
  if (single) {
    for (auto& a : cache.activations) a.conservativeResize(1, Eigen::NoChange);
    for (auto& z : cache.logits) z.conservativeResize(1, Eigen::NoChange);
  }
  return cache;
}

template <typename Scalar>
struct ForwardResult {
  std::vector<Matrix<Scalar>> probabilities;  // one n x C_h matrix per head
  Matrix<Scalar> penultimate;                 // n x last hidden width
};

template <typename Scalar>
ForwardResult<Scalar> forward(const MlpModel<Scalar>& model, const FeatureMatrix& batch) {
  auto cache = forward_cache(model, to_matrix<Scalar>(batch));
  ForwardResult<Scalar> out;
  for (const auto& z : cache.logits) out.probabilities.push_back(softmax_rows(z));
  out.penultimate = std::move(cache.activations.back());
  return out;
}

/// Penultimate-layer activations for every row, computed in blocks.
template <typename Scalar>
FeatureMatrix extract_features(const MlpModel<Scalar>& model, const FeatureMatrix& inputs, std::size_t block = 4096) {
  require(inputs.cols() == model.shape.input, ErrorKind::shape,
          "inputs have width " + std::to_string(inputs.cols()) + ", model expects " + std::to_string(model.shape.input));
  const std::size_t width = model.shape.penultimate();
  std::vector<float> out(inputs.rows() * width);
  std::vector<std::size_t> rows;
  for (std::size_t lo = 0; lo < inputs.rows(); lo += block) {
    const std::size_t hi = std::min(inputs.rows(), lo + block);
    rows.resize(hi - lo);
    std::iota(rows.begin(), rows.end(), lo);
    auto cache = forward_cache(model, gather_rows<Scalar>(inputs, rows));
    const auto& h = cache.penultimate();
    for (Eigen::Index i = 0; i < h.size(); ++i) out[lo * width + std::size_t(i)] = static_cast<float>(h.data()[i]);
  }
  return FeatureMatrix(inputs.rows(), width, std::move(out));
}

/// Head-0 logits for every row, computed in blocks.
template <typename Scalar>
Matrix<Scalar> head_logits(const MlpModel<Scalar>& model, const FeatureMatrix& inputs, std::size_t head = 0,
                           std::size_t block = 4096) {
  Matrix<Scalar> out(inputs.rows(), model.shape.heads.at(head));
  std::vector<std::size_t> rows;
  for (std::size_t lo = 0; lo < inputs.rows(); lo += block) {
    const std::size_t hi = std::min(inputs.rows(), lo + block);
    rows.resize(hi - lo);
    std::iota(rows.begin(), rows.end(), lo);
    auto cache = forward_cache(model, gather_rows<Scalar>(inputs, rows));
    out.middleRows(Eigen::Index(lo), Eigen::Index(hi - lo)) = cache.logits[head];
  }
  return out;
}

/// Argmax per row of head `head`, ties to the lowest class id.
template <typename Scalar>
std::vector<std::uint32_t> predict(const MlpModel<Scalar>& model, const FeatureMatrix& inputs, std::size_t head = 0) {
  const auto logits = head_logits(model, inputs, head);
  std::vector<std::uint32_t> out(inputs.rows());
  for (Eigen::Index i = 0; i < logits.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < logits.cols(); ++c) {
      if (logits(i, c) > logits(i, best)) best = c;
    }
    out[std::size_t(i)] = static_cast<std::uint32_t>(best);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Losses

struct DistillConfig {
  double temperature = 20.0;
  double alpha = 0.75;  // weight on the soft-target term; hard labels get 1 - alpha

  void validate() const {
    require(temperature > 0.0, ErrorKind::config, "distillation temperature must be positive");
    require(alpha >= 0.0 && alpha <= 1.0, ErrorKind::config, "distillation alpha must be in [0, 1]");
  }
};

struct CrossEntropyLoss {};

template <typename Scalar>
struct DistillLoss {
  DistillConfig config;
  std::shared_ptr<const MlpModel<Scalar>> teacher;
};

/// One label vector per head; the loss is the sum of per-head cross-entropies.
struct MultiTaskLoss {};

template <typename Scalar>
using LossSpec = std::variant<CrossEntropyLoss, DistillLoss<Scalar>, MultiTaskLoss>;

template <typename Scalar>
struct LossAndGrad {
  double loss = 0.0;
  double soft = 0.0;  // distillation only: unscaled soft-target cross-entropy
  double hard = 0.0;  // hard-label cross-entropy (summed over heads for multi-task)
  MlpModel<Scalar> grad;
};

namespace detail {

// Mean cross-entropy of one head and its logit gradient scaled by `weight`.
template <typename Scalar>
double hard_cross_entropy(const Matrix<Scalar>& logits, std::span<const std::uint32_t> labels, Scalar weight,
                          Matrix<Scalar>& dlogits) {
  const auto n = logits.rows();
  const Matrix<Scalar> logp = log_softmax_rows(logits);
  double loss = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) loss -= double(logp(i, Eigen::Index(labels[std::size_t(i)])));
  loss /= double(n);
  Matrix<Scalar> g = logp.array().exp().matrix();
  for (Eigen::Index i = 0; i < n; ++i) g(i, Eigen::Index(labels[std::size_t(i)])) -= Scalar(1);
  dlogits += (weight / Scalar(n)) * g;
  return loss;
}

}  // namespace detail

/// Loss on a batch and its exact gradient. `labels[h]` holds the batch labels
/// for head h (only head 0 is used by cross-entropy and distillation).
/// `teacher_logits` is required for distillation: the teacher's head-0
/// logits for the same batch rows.
template <typename Scalar>
LossAndGrad<Scalar> loss_and_grad(const MlpModel<Scalar>& model, const Matrix<Scalar>& batch,
                                  std::span<const std::vector<std::uint32_t>> labels, const LossSpec<Scalar>& spec,
                                  const Matrix<Scalar>* teacher_logits = nullptr) {
  auto cache = forward_cache(model, batch);
  const Eigen::Index n = batch.rows();
  LossAndGrad<Scalar> out;
  out.grad = MlpModel<Scalar>::zeros(model.shape);

  std::vector<Matrix<Scalar>> dlogits;
  for (const auto& z : cache.logits) dlogits.push_back(Matrix<Scalar>::Zero(z.rows(), z.cols()));

  if (std::holds_alternative<CrossEntropyLoss>(spec)) {
    require(!labels.empty(), ErrorKind::config, "cross-entropy needs labels");
    out.hard = detail::hard_cross_entropy(cache.logits[0], labels[0], Scalar(1), dlogits[0]);
    out.loss = out.hard;
  } else if (std::holds_alternative<MultiTaskLoss>(spec)) {
    require(labels.size() == cache.logits.size(), ErrorKind::config, "multi-task loss needs one label set per head");
    for (std::size_t h = 0; h < labels.size(); ++h) {
      out.hard += detail::hard_cross_entropy(cache.logits[h], labels[h], Scalar(1), dlogits[h]);
    }
    out.loss = out.hard;
  } else {
    const auto& distill = std::get<DistillLoss<Scalar>>(spec);
    require(teacher_logits != nullptr && teacher_logits->rows() == n && teacher_logits->cols() == cache.logits[0].cols(),
            ErrorKind::shape, "distillation needs teacher logits matching the batch and head 0");
    const Scalar T = Scalar(distill.config.temperature);
    const Scalar alpha = Scalar(distill.config.alpha);
    const Matrix<Scalar> q = softmax_rows(*teacher_logits, T);
    const Matrix<Scalar> log_s = log_softmax_rows(cache.logits[0], T);
    out.soft = -double((q.array() * log_s.array()).sum()) / double(n);
    // d/dz of T^2 * CE(q, softmax(z/T)) is T * (s - q).
    dlogits[0] += (alpha * T / Scalar(n)) * (log_s.array().exp().matrix() - q);
    out.hard = detail::hard_cross_entropy(cache.logits[0], labels[0], Scalar(1) - alpha, dlogits[0]);
    out.loss = double(alpha) * double(T) * double(T) * out.soft + (1.0 - double(alpha)) * out.hard;
  }

  // Heads, then back through the trunk.
  const Matrix<Scalar>& top = cache.activations.back();
  Matrix<Scalar> dtop = Matrix<Scalar>::Zero(top.rows(), top.cols());
  for (std::size_t h = 0; h < model.heads.size(); ++h) {
    out.grad.heads[h].weight.noalias() = dlogits[h].transpose() * top;
    out.grad.heads[h].bias = dlogits[h].colwise().sum();
    dtop.noalias() += dlogits[h] * model.heads[h].weight;
  }
  for (std::size_t l = model.trunk.size(); l-- > 0;) {
    const Matrix<Scalar>& act = cache.activations[l + 1];
    Matrix<Scalar> dz = (act.array() > Scalar(0)).select(dtop, Scalar(0));
    out.grad.trunk[l].weight.noalias() = dz.transpose() * cache.activations[l];
    out.grad.trunk[l].bias = dz.colwise().sum();
    if (l > 0) dtop.noalias() = dz * model.trunk[l].weight;
  }
  return out;
}

// ---------------------------------------------------------------------------
// Training

/// lr(step) = lr0 * factor^-floor(step * (drops + 1) / total_steps): `drops`
/// equally spaced decays, all inside the run, ending at lr0 * factor^-drops.
struct LrSchedule {
  double factor = 2.0;
  std::size_t drops = 13;

  double at(double lr0, std::size_t step, std::size_t total_steps) const {
    if (total_steps == 0) return lr0;
    const auto stage = (static_cast<unsigned __int128>(step) * (drops + 1)) / total_steps;
    return lr0 * std::pow(factor, -double(stage));
  }
};

struct TrainConfig {
  std::size_t epochs = 10;
  std::size_t batch_size = 256;
  double lr0 = 0.1;
  LrSchedule schedule{};
  double momentum = 0.9;
  double weight_decay = 1e-4;
  std::uint64_t seed = 0;

  void validate() const {
    require(epochs >= 1, ErrorKind::config, "epochs must be >= 1");
    require(batch_size >= 1, ErrorKind::config, "batch_size must be >= 1");
    require(lr0 > 0.0, ErrorKind::config, "lr0 must be positive");
    require(schedule.factor >= 1.0, ErrorKind::config, "lr decay factor must be >= 1");
    require(momentum >= 0.0 && momentum < 1.0, ErrorKind::config, "momentum must be in [0, 1)");
    require(weight_decay >= 0.0, ErrorKind::config, "weight_decay must be >= 0");
  }

  std::size_t steps_per_epoch(std::size_t n) const { return (n + batch_size - 1) / batch_size; }
};

struct TrainHistory {
  std::vector<double> epoch_loss;  // mean batch loss per epoch
  std::vector<double> step_loss;
  std::vector<double> step_lr;
};

/// Trains `model` in place. labels[h] supervises head h (cross-entropy and
/// distillation use labels[0] only). Weight decay applies to weights, not
/// biases.
template <typename Scalar>
void train(MlpModel<Scalar>& model, const FeatureMatrix& inputs, std::span<const LabelVector> labels,
           const TrainConfig& cfg, const LossSpec<Scalar>& spec, TrainHistory* history = nullptr) {
  cfg.validate();
  require(inputs.cols() == model.shape.input, ErrorKind::shape,
          "inputs have width " + std::to_string(inputs.cols()) + ", model expects " + std::to_string(model.shape.input));
  require(inputs.rows() > 0, ErrorKind::degenerate, "no training rows");
  const bool multitask = std::holds_alternative<MultiTaskLoss>(spec);
  const std::size_t used_heads = multitask ? model.heads.size() : 1;
  require(labels.size() >= used_heads, ErrorKind::config,
          "loss needs " + std::to_string(used_heads) + " label sets, got " + std::to_string(labels.size()));
  for (std::size_t h = 0; h < used_heads; ++h) {
    require(labels[h].size() == inputs.rows(), ErrorKind::shape, "label count disagrees with inputs");
    require(labels[h].num_classes() == model.shape.heads[h], ErrorKind::validation,
            "label space of size " + std::to_string(labels[h].num_classes()) + " does not match head " +
                std::to_string(h) + " of width " + std::to_string(model.shape.heads[h]));
  }

  Matrix<Scalar> teacher_logits;
  if (const auto* d = std::get_if<DistillLoss<Scalar>>(&spec)) {
    d->config.validate();
    require(d->teacher != nullptr, ErrorKind::config, "distillation needs a teacher");
    require(d->teacher->shape.input == model.shape.input, ErrorKind::shape, "teacher and student input widths differ");
    require(d->teacher->shape.heads.at(0) == model.shape.heads[0], ErrorKind::shape,
            "teacher and student head widths differ");
    teacher_logits = head_logits(*d->teacher, inputs);
  }

  const std::size_t n = inputs.rows();
  const std::size_t steps_per_epoch = cfg.steps_per_epoch(n);
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  auto velocity = MlpModel<Scalar>::zeros(model.shape);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng shuffle_rng(mix_seed(cfg.seed, 0x5eed));
  std::vector<std::vector<std::uint32_t>> batch_labels(used_heads);
  Matrix<Scalar> batch_teacher;

  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(std::span<std::size_t>(order));
    double epoch_sum = 0.0;
    for (std::size_t b = 0; b < steps_per_epoch; ++b, ++step) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      std::span<const std::size_t> rows(order.data() + lo, hi - lo);
      const Matrix<Scalar> x = gather_rows<Scalar>(inputs, rows);
      for (std::size_t h = 0; h < used_heads; ++h) {
        batch_labels[h].resize(rows.size());
        for (std::size_t r = 0; r < rows.size(); ++r) batch_labels[h][r] = labels[h][rows[r]];
      }
      const Matrix<Scalar>* tl = nullptr;
      if (teacher_logits.size() > 0) {
        batch_teacher.resize(Eigen::Index(rows.size()), teacher_logits.cols());
        for (std::size_t r = 0; r < rows.size(); ++r) batch_teacher.row(Eigen::Index(r)) = teacher_logits.row(Eigen::Index(rows[r]));
        tl = &batch_teacher;
      }
      auto lg = loss_and_grad<Scalar>(model, x, batch_labels, spec, tl);
      if (!std::isfinite(lg.loss)) {
        fail(ErrorKind::divergence, "non-finite loss at step " + std::to_string(step) + " (epoch " + std::to_string(epoch) + ")");
      }
      const double lr = cfg.schedule.at(cfg.lr0, step, total_steps);
      if (history) {
        history->step_loss.push_back(lg.loss);
        history->step_lr.push_back(lr);
      }
      epoch_sum += lg.loss;

      const Scalar mu = Scalar(cfg.momentum);
      const Scalar wd = Scalar(cfg.weight_decay);
      const Scalar eta = Scalar(lr);
      auto apply = [&](DenseLayer<Scalar>& p, DenseLayer<Scalar>& v, const DenseLayer<Scalar>& g) {
        v.weight = mu * v.weight + g.weight + wd * p.weight;
        v.bias = mu * v.bias + g.bias;
        p.weight -= eta * v.weight;
        p.bias -= eta * v.bias;
      };
      for (std::size_t l = 0; l < model.trunk.size(); ++l) apply(model.trunk[l], velocity.trunk[l], lg.grad.trunk[l]);
      for (std::size_t h = 0; h < model.heads.size(); ++h) apply(model.heads[h], velocity.heads[h], lg.grad.heads[h]);
    }
    if (history) history->epoch_loss.push_back(epoch_sum / double(steps_per_epoch));
    ++model.epochs_trained;
  }
  if (!model.finite()) fail(ErrorKind::divergence, "non-finite parameters after training");
}

/// init_model(shape, cfg.seed) followed by train().
template <typename Scalar = float>
MlpModel<Scalar> train_from_scratch(const MlpShape& shape, const FeatureMatrix& inputs, std::span<const LabelVector> labels,
                                    const TrainConfig& cfg, const LossSpec<Scalar>& spec, TrainHistory* history = nullptr) {
  auto model = init_model<Scalar>(shape, cfg.seed);
  train(model, inputs, labels, cfg, spec, history);
  return model;
}

// ---------------------------------------------------------------------------
// Checkpoints: "CFM1", u32 version, u64 header length, JSON header
// {input, hidden, heads, seed, epoch, dtype}, then float32 little-endian
// parameters in flatten() order.

template <typename Scalar>
void save_model(const std::filesystem::path& path, const MlpModel<Scalar>& model) {
  nlohmann::json header{{"input", model.shape.input}, {"hidden", model.shape.hidden}, {"heads", model.shape.heads},
                        {"seed", model.seed},         {"epoch", model.epochs_trained}, {"dtype", "f32"}};
  const std::string text = header.dump();
  std::vector<unsigned char> buf{'C', 'F', 'M', '1'};
  detail::put_u32(buf, 1);
  detail::put_u64(buf, text.size());
  buf.insert(buf.end(), text.begin(), text.end());
  for (Scalar v : model.flatten()) detail::put_f32(buf, static_cast<float>(v));
  detail::write_file(path, buf);
}

template <typename Scalar = float>
MlpModel<Scalar> load_model(const std::filesystem::path& path) {
  const auto bytes = detail::read_file(path);
  require(bytes.size() >= 16 && std::memcmp(bytes.data(), "CFM1", 4) == 0, ErrorKind::format, "bad checkpoint magic");
  require(detail::get_u32(bytes.data() + 4) == 1, ErrorKind::format, "unsupported checkpoint version");
  const auto header_len = detail::get_u64(bytes.data() + 8);
  require(header_len <= bytes.size() - 16, ErrorKind::truncation, "checkpoint header truncated");
  const auto header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + std::ptrdiff_t(header_len));
  MlpShape shape{header.at("input").get<std::size_t>(), header.at("hidden").get<std::vector<std::size_t>>(),
                 header.at("heads").get<std::vector<std::size_t>>()};
  shape.validate();
  const std::size_t count = shape.parameter_count();
  const std::size_t offset = 16 + header_len;
  require(bytes.size() - offset == count * 4, ErrorKind::truncation,
          "checkpoint holds " + std::to_string(bytes.size() - offset) + " parameter bytes, expected " +
              std::to_string(count * 4));
  std::vector<Scalar> params(count);
  for (std::size_t i = 0; i < count; ++i) params[i] = Scalar(detail::get_f32(bytes.data() + offset + 4 * i));
  auto model = MlpModel<Scalar>::zeros(shape);
  model.unflatten(params);
  model.seed = header.at("seed").get<std::uint64_t>();
  model.epochs_trained = header.at("epoch").get<std::size_t>();
  require(model.finite(), ErrorKind::validation, "checkpoint contains non-finite parameters");
  return model;
}

}  // namespace clusterfit
