#pragma once

// Linear probes: multinomial logistic regression on fixed features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "clusterfit/errors.hpp"
#include "clusterfit/featurestore.hpp"
#include "clusterfit/nnet.hpp"
#include "json.hpp"

namespace clusterfit {

struct ProbeConfig {
  std::size_t epochs = 20;
  std::size_t batch_size = 256;
  double lr0 = 0.01;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  std::uint64_t seed = 0;

  void validate() const {
    require(lr0 > 0.0, ErrorKind::config, "probe lr0 must be positive");
    require(batch_size >= 1, ErrorKind::config, "probe batch_size must be >= 1");
  }

  /// Same optimiser as network training, with the rate dropped 10x at two
  /// equally spaced points.
  TrainConfig train_config() const {
    TrainConfig t;
    t.epochs = epochs;
    t.batch_size = batch_size;
    t.lr0 = lr0;
    t.schedule = LrSchedule{10.0, 2};
    t.momentum = momentum;
    t.weight_decay = weight_decay;
    t.seed = seed;
    return t;
  }
};

/// A C x d weight matrix plus bias, stored as a model with no hidden layers.
using LinearClassifier = MlpModel<float>;

struct ProbeResult {
  double top1 = 0.0;
  double train_top1 = 0.0;
  std::size_t num_eval = 0;
  std::vector<double> per_class;  // accuracy per class; 0 for classes absent from the eval split
};

inline LinearClassifier probe_fit(const FeatureMatrix& train_features, const LabelVector& train_labels,
                                  const ProbeConfig& cfg) {
  cfg.validate();
  require(train_features.rows() == train_labels.size(), ErrorKind::shape, "probe features and labels disagree on n");
  const auto counts = train_labels.class_counts();
  const auto present = std::count_if(counts.begin(), counts.end(), [](auto c) { return c > 0; });
  require(present >= 2, ErrorKind::degenerate, "probe training set has a single class");

  const MlpShape shape{train_features.cols(), {}, {train_labels.num_classes()}};
  auto classifier = LinearClassifier::zeros(shape);
  classifier.seed = cfg.seed;
  if (cfg.epochs == 0) return classifier;
  const LabelVector labels[] = {train_labels};
  train<float>(classifier, train_features, labels, cfg.train_config(), CrossEntropyLoss{});
  return classifier;
}

inline ProbeResult probe_eval(const LinearClassifier& classifier, const FeatureMatrix& eval_features,
                              const LabelVector& eval_labels) {
  require(classifier.trunk.empty(), ErrorKind::config, "probe classifier must be linear");
  require(eval_features.cols() == classifier.shape.input, ErrorKind::shape,
          "eval features have width " + std::to_string(eval_features.cols()) + ", classifier expects " +
              std::to_string(classifier.shape.input));
  require(eval_features.rows() == eval_labels.size(), ErrorKind::shape, "eval features and labels disagree on n");
  require(eval_labels.size() > 0, ErrorKind::degenerate, "empty eval split");
  require(eval_labels.num_classes() <= classifier.shape.heads[0], ErrorKind::shape,
          "eval labels exceed classifier output width");

  const auto predicted = predict(classifier, eval_features);
  const std::size_t classes = eval_labels.num_classes();
  std::vector<std::size_t> hits(classes, 0);
  std::vector<std::size_t> totals(classes, 0);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < eval_labels.size(); ++i) {
    ++totals[eval_labels[i]];
    if (predicted[i] == eval_labels[i]) {
      ++correct;
      ++hits[eval_labels[i]];
    }
  }
  ProbeResult r;
  r.num_eval = eval_labels.size();
  r.top1 = double(correct) / double(r.num_eval);
  r.per_class.resize(classes, 0.0);
  for (std::size_t c = 0; c < classes; ++c) {
    if (totals[c] > 0) r.per_class[c] = double(hits[c]) / double(totals[c]);
  }
  return r;
}

/// Fits on the train split and scores both splits.
inline ProbeResult probe_run(const FeatureMatrix& train_features, const LabelVector& train_labels,
                             const FeatureMatrix& eval_features, const LabelVector& eval_labels, const ProbeConfig& cfg) {
  const auto classifier = probe_fit(train_features, train_labels, cfg);
  auto result = probe_eval(classifier, eval_features, eval_labels);
  result.train_top1 = probe_eval(classifier, train_features, train_labels).top1;
  return result;
}

/// Probes once per learning rate and keeps the best eval top-1 (first wins ties).
inline ProbeResult probe_sweep(const FeatureMatrix& train_features, const LabelVector& train_labels,
                               const FeatureMatrix& eval_features, const LabelVector& eval_labels, ProbeConfig cfg,
                               const std::vector<double>& lr_grid, double* best_lr = nullptr) {
  std::vector<double> grid = lr_grid.empty() ? std::vector<double>{cfg.lr0} : lr_grid;
  ProbeResult best;
  best.top1 = -1.0;
  for (double lr : grid) {
    cfg.lr0 = lr;
    auto r = probe_run(train_features, train_labels, eval_features, eval_labels, cfg);
    if (r.top1 > best.top1) {
      best = std::move(r);
      if (best_lr) *best_lr = lr;
    }
  }
  return best;
}

/// Per-column affine map estimated on one split: x -> (x - mean) / std.
/// Columns with zero variance are only centered.
struct Standardizer {
  std::vector<double> mean;
  std::vector<double> inv_std;

  static Standardizer fit(const FeatureMatrix& x) {
    const std::size_t d = x.cols();
    Standardizer s;
    s.mean.assign(d, 0.0);
    s.inv_std.assign(d, 1.0);
    if (x.rows() == 0) return s;
    std::vector<double> sq(d, 0.0);
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto r = x.row(i);
      for (std::size_t j = 0; j < d; ++j) s.mean[j] += r[j];
    }
    for (auto& m : s.mean) m /= double(x.rows());
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto r = x.row(i);
      for (std::size_t j = 0; j < d; ++j) sq[j] += (r[j] - s.mean[j]) * (r[j] - s.mean[j]);
    }
    for (std::size_t j = 0; j < d; ++j) {
      const double sd = std::sqrt(sq[j] / double(x.rows()));
      if (sd > 1e-12) s.inv_std[j] = 1.0 / sd;
    }
    return s;
  }

  FeatureMatrix apply(const FeatureMatrix& x) const {
    require(x.cols() == mean.size(), ErrorKind::shape, "standardizer width mismatch");
    std::vector<float> out(x.data().size());
    const std::size_t d = x.cols();
    for (std::size_t i = 0; i < x.rows(); ++i) {
      auto r = x.row(i);
      for (std::size_t j = 0; j < d; ++j) out[i * d + j] = static_cast<float>((r[j] - mean[j]) * inv_std[j]);
    }
    return FeatureMatrix(x.rows(), d, std::move(out));
  }
};

inline nlohmann::json to_json(const ProbeResult& r) {
  return {{"top1", r.top1}, {"train_top1", r.train_top1}, {"num_eval", r.num_eval}, {"per_class", r.per_class}};
}

}  // namespace clusterfit
