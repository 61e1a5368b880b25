#pragma once

// Pseudo-label producers: unsupervised cluster labels, per-label clustering,
// prototype alignment, and synthetic uniform label noise.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include "clusterfit/errors.hpp"
#include "clusterfit/featurestore.hpp"
#include "clusterfit/kmeans.hpp"
#include "clusterfit/parallel.hpp"
#include "clusterfit/rng.hpp"
#include "json.hpp"

namespace clusterfit {

struct NoiseSpec {
  double p = 0.0;
  std::uint64_t seed = 0;

  void validate() const { require(p >= 0.0 && p <= 1.0, ErrorKind::config, "noise p must be in [0, 1]"); }
};

struct PerLabelPlan {
  std::vector<std::size_t> k_per_class;
  std::vector<std::size_t> n_per_class;

  std::size_t total_k() const { return std::accumulate(k_per_class.begin(), k_per_class.end(), std::size_t{0}); }

  /// Global id of cluster j inside class c.
  std::size_t offset(std::size_t c) const {
    return std::accumulate(k_per_class.begin(), k_per_class.begin() + static_cast<std::ptrdiff_t>(c), std::size_t{0});
  }
};

/// k-means on the features, then each sample labelled with its cluster.
inline LabelVector pseudo_labels(const FeatureMatrix& features, const KMeansConfig& cfg, KMeansTrace* trace = nullptr) {
  const Centroids c = kmeans_fit(features, cfg, trace);
  auto a = kmeans_assign(features, c, cfg.threads);
  return LabelVector(cfg.k, std::move(a.index));
}

/// Flips each label with probability p to a class drawn uniformly from the
/// other num_classes - 1 classes. Draws come from counter streams keyed by
/// sample index.
inline LabelVector inject_noise(const LabelVector& labels, const NoiseSpec& spec) {
  spec.validate();
  if (spec.p == 0.0) return labels;
  require(labels.num_classes() >= 2, ErrorKind::infeasible, "label noise needs at least 2 classes");
  std::vector<std::uint32_t> out(labels.labels().begin(), labels.labels().end());
  const std::uint64_t others = labels.num_classes() - 1;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (counter_uniform(spec.seed, 0, i) >= spec.p) continue;
    const auto r = static_cast<std::uint32_t>(counter_below(spec.seed, 1, i, others));
    out[i] = r < out[i] ? r : r + 1;
  }
  return LabelVector(labels.num_classes(), std::move(out));
}

namespace detail {

// Largest-remainder apportionment of `budget` over `weights`; remainder ties
// go to the lowest position.
inline std::vector<std::size_t> apportion(const std::vector<double>& weights, std::size_t budget) {
  const double total = std::accumulate(weights.begin(), weights.end(), 0.0);
  std::vector<std::size_t> seats(weights.size(), 0);
  if (weights.empty() || total <= 0.0) return seats;
  std::vector<double> remainder(weights.size());
  std::size_t used = 0;
  for (std::size_t i = 0; i < weights.size(); ++i) {
    const double quota = double(budget) * weights[i] / total;
    seats[i] = static_cast<std::size_t>(std::floor(quota));
    remainder[i] = quota - double(seats[i]);
    used += seats[i];
  }
  std::vector<std::size_t> order(weights.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return remainder[a] > remainder[b]; });
  for (std::size_t i = 0; used < budget && i < order.size(); ++i, ++used) ++seats[order[i]];
  return seats;
}

}  // namespace detail

/// k_l proportional to sqrt(n_l), apportioned by largest remainder and
/// clamped to [1, n_l]; clamped classes are fixed and the rest re-apportioned.
inline PerLabelPlan per_label_plan(const LabelVector& labels, std::size_t total_k) {
  PerLabelPlan plan;
  plan.n_per_class = labels.class_counts();
  plan.k_per_class.assign(labels.num_classes(), 0);
  const std::size_t classes = labels.num_classes();
  const auto nonempty =
      static_cast<std::size_t>(std::count_if(plan.n_per_class.begin(), plan.n_per_class.end(), [](auto n) { return n > 0; }));
  require(total_k >= nonempty, ErrorKind::infeasible,
          "total_k = " + std::to_string(total_k) + " is below the " + std::to_string(nonempty) + " non-empty classes");

  std::vector<bool> fixed(classes, false);
  for (std::size_t c = 0; c < classes; ++c) fixed[c] = plan.n_per_class[c] == 0;
  for (;;) {
    std::vector<std::size_t> free;
    std::size_t budget = total_k;
    for (std::size_t c = 0; c < classes; ++c) {
      if (fixed[c]) {
        budget -= std::min(budget, plan.k_per_class[c]);
      } else {
        free.push_back(c);
      }
    }
    if (free.empty()) break;
    std::vector<double> weights;
    for (auto c : free) weights.push_back(std::sqrt(double(plan.n_per_class[c])));
    const auto seats = detail::apportion(weights, budget);
    bool over = false;
    bool under = false;
    for (std::size_t i = 0; i < free.size(); ++i) {
      plan.k_per_class[free[i]] = seats[i];
      over |= seats[i] > plan.n_per_class[free[i]];
      under |= seats[i] < 1;
    }
    if (!over && !under) break;
    // Upper clamps free budget for the others, so settle them first.
    for (std::size_t i = 0; i < free.size(); ++i) {
      const std::size_t c = free[i];
      if (over && seats[i] > plan.n_per_class[c]) {
        plan.k_per_class[c] = plan.n_per_class[c];
        fixed[c] = true;
      } else if (!over && seats[i] < 1) {
        plan.k_per_class[c] = 1;
        fixed[c] = true;
      }
    }
  }
  return plan;
}

/// Clusters each class separately with k = k_l; cluster j of class c gets
/// global id offset(c) + j.
inline LabelVector per_label_pseudo_labels(const FeatureMatrix& features, const LabelVector& labels,
                                           const PerLabelPlan& plan, const KMeansConfig& cfg) {
  require(features.rows() == labels.size(), ErrorKind::shape, "features and labels disagree on n");
  require(plan.k_per_class.size() == labels.num_classes() && plan.n_per_class.size() == labels.num_classes(),
          ErrorKind::config, "plan does not cover the label space");
  const auto counts = labels.class_counts();
  require(counts == plan.n_per_class, ErrorKind::config, "plan class sizes disagree with labels");

  const std::size_t classes = labels.num_classes();
  std::vector<std::vector<std::size_t>> members(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) members[labels[i]].push_back(i);
  std::vector<std::size_t> offsets(classes, 0);
  for (std::size_t c = 1; c < classes; ++c) offsets[c] = offsets[c - 1] + plan.k_per_class[c - 1];

  std::vector<std::uint32_t> out(labels.size(), 0);
  parallel_for(0, classes, cfg.threads, [&](std::size_t c) {
    const std::size_t k = plan.k_per_class[c];
    const auto& rows = members[c];
    if (rows.empty()) return;
    require(k >= 1 && k <= rows.size(), ErrorKind::infeasible,
            "class " + std::to_string(c) + " has " + std::to_string(rows.size()) + " rows but k_l = " + std::to_string(k));
    if (k == 1) {
      for (auto i : rows) out[i] = static_cast<std::uint32_t>(offsets[c]);
      return;
    }
    KMeansConfig class_cfg = cfg;
    class_cfg.k = k;
    class_cfg.seed = cfg.seed ^ std::uint64_t(c);
    class_cfg.threads = 1;
    const FeatureMatrix sub = features.select_rows(rows);
    const auto local = pseudo_labels(sub, class_cfg);
    for (std::size_t r = 0; r < rows.size(); ++r) out[rows[r]] = static_cast<std::uint32_t>(offsets[c] + local[r]);
  });
  return LabelVector(plan.total_k(), std::move(out));
}

/// One step of label-initialised k-means: class means become centers, then
/// each sample moves to its nearest center (ties to the lowest class id).
inline LabelVector prototype_labels(const FeatureMatrix& features, const LabelVector& labels, unsigned threads = 1) {
  require(features.rows() == labels.size(), ErrorKind::shape, "features and labels disagree on n");
  const std::size_t classes = labels.num_classes();
  const std::size_t d = features.cols();
  Centroids protos;
  protos.k = classes;
  protos.d = d;
  protos.centers.assign(classes * d, 0.0);
  const auto counts = labels.class_counts();
  for (std::size_t c = 0; c < classes; ++c) {
    require(counts[c] > 0, ErrorKind::degenerate, "class " + std::to_string(c) + " has no samples");
  }
  for (std::size_t i = 0; i < features.rows(); ++i) {
    auto xr = features.row(i);
    double* center = protos.centers.data() + std::size_t(labels[i]) * d;
    for (std::size_t j = 0; j < d; ++j) center[j] += double(xr[j]);
  }
  for (std::size_t c = 0; c < classes; ++c) {
    for (std::size_t j = 0; j < d; ++j) protos.centers[c * d + j] /= double(counts[c]);
  }
  auto a = kmeans_assign(features, protos, threads);
  return LabelVector(classes, std::move(a.index));
}

inline nlohmann::json plan_to_json(const PerLabelPlan& plan) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t c = 0; c < plan.k_per_class.size(); ++c) {
    j[std::to_string(c)] = {{"n", plan.n_per_class[c]}, {"k", plan.k_per_class[c]}};
  }
  return j;
}

inline void write_plan(const std::filesystem::path& path, const PerLabelPlan& plan) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << plan_to_json(plan).dump(2) << '\n';
}

}  // namespace clusterfit
