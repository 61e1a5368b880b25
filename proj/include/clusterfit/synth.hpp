#pragma once

// Hierarchical Gaussian mixture used as a desk-scale stand-in for a
// coarse pre-training label space with a finer-grained transfer target.
// coarse center ~ N(0, inter^2 I); fine center = coarse + N(0, intra^2 I);
// sample = fine center + N(0, noise^2 I). Fine classes are drawn uniformly.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <vector>

#include "clusterfit/errors.hpp"
#include "clusterfit/featurestore.hpp"
#include "clusterfit/rng.hpp"

namespace clusterfit {

struct SynthSpec {
  std::size_t num_coarse = 20;
  std::size_t fines_per_coarse = 5;
  std::size_t d_input = 32;
  double noise_scale = 1.5;
  double inter_coarse_sep = 1.0;
  double intra_coarse_sep = 1.0;
  std::size_t n_pretrain = 20000;
  std::size_t n_clusterfit = 0;  // 0 aliases D_cf to D_pre
  std::size_t n_target_train = 10000;
  std::size_t n_target_eval = 5000;
  std::uint64_t seed = 0;

  std::size_t num_fine() const { return num_coarse * fines_per_coarse; }

  void validate() const {
    require(num_coarse >= 1 && fines_per_coarse >= 1 && d_input >= 1, ErrorKind::config, "synth counts must be >= 1");
    require(n_pretrain >= 1 && n_target_train >= 1 && n_target_eval >= 1, ErrorKind::config,
            "synth split sizes must be >= 1");
    require(inter_coarse_sep > 0.0 && intra_coarse_sep > 0.0, ErrorKind::config, "synth separations must be positive");
    require(noise_scale >= 0.0, ErrorKind::config, "synth noise scale must be >= 0");
  }
};

struct SynthSplit {
  FeatureMatrix inputs;
  LabelVector coarse;
  LabelVector fine;
};

struct SynthData {
  SynthSplit pretrain;
  std::optional<SynthSplit> clusterfit;  // empty when aliased to pretrain
  SynthSplit target_train;
  SynthSplit target_eval;
  std::vector<double> fine_centers;  // num_fine x d
  std::size_t fines_per_coarse = 1;

  const SynthSplit& clusterfit_split() const { return clusterfit ? *clusterfit : pretrain; }
};

namespace detail {

inline SynthSplit sample_split(const SynthSpec& spec, const std::vector<double>& fine_centers,
                               std::span<const std::uint32_t> allowed_coarse, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  const std::size_t d = spec.d_input;
  const std::size_t fpc = spec.fines_per_coarse;
  std::vector<float> x(n * d);
  std::vector<std::uint32_t> coarse(n);
  std::vector<std::uint32_t> fine(n);
  for (std::size_t i = 0; i < n; ++i) {
    const std::uint32_t c = allowed_coarse[rng.below(allowed_coarse.size())];
    const auto f = static_cast<std::uint32_t>(c * fpc + rng.below(fpc));
    coarse[i] = c;
    fine[i] = f;
    for (std::size_t j = 0; j < d; ++j) {
      x[i * d + j] = static_cast<float>(fine_centers[f * d + j] + spec.noise_scale * rng.normal());
    }
  }
  return {FeatureMatrix(n, d, std::move(x)), LabelVector(spec.num_coarse, std::move(coarse)),
          LabelVector(spec.num_fine(), std::move(fine))};
}

// Keeps the rows whose coarse label is among `keep` and renumbers those
// labels to their position in `keep`.
inline SynthSplit remap_coarse(const SynthSplit& split, std::span<const std::uint32_t> keep) {
  std::vector<std::uint32_t> rank(split.coarse.num_classes(), UINT32_MAX);
  for (std::size_t r = 0; r < keep.size(); ++r) rank[keep[r]] = static_cast<std::uint32_t>(r);
  std::vector<std::uint32_t> coarse;
  for (auto l : split.coarse.labels()) coarse.push_back(rank[l]);
  return {split.inputs, LabelVector(keep.size(), std::move(coarse)), split.fine};
}

}  // namespace detail

/// The m most frequent labels, ties to the lowest id, in rank order.
inline std::vector<std::uint32_t> top_m_labels(const LabelVector& labels, std::size_t m) {
  const auto counts = labels.class_counts();
  std::vector<std::uint32_t> ids(counts.size());
  std::iota(ids.begin(), ids.end(), 0u);
  std::stable_sort(ids.begin(), ids.end(), [&](auto a, auto b) { return counts[a] > counts[b]; });
  ids.resize(std::min(m, ids.size()));
  return ids;
}

/// Generates D_pre, D_cf, and the target train / eval splits.
/// With `top_m`, D_pre keeps its sample budget but is drawn only from the m
/// most frequent coarse classes, and D_cf is the unrestricted split.
inline SynthData synth_generate(const SynthSpec& spec, std::optional<std::size_t> top_m = std::nullopt) {
  spec.validate();
  const std::size_t d = spec.d_input;
  Rng rng(mix_seed(spec.seed, 0xc0a));
  SynthData out;
  out.fines_per_coarse = spec.fines_per_coarse;
  out.fine_centers.resize(spec.num_fine() * d);
  std::vector<double> coarse_center(d);
  for (std::size_t c = 0; c < spec.num_coarse; ++c) {
    for (auto& v : coarse_center) v = spec.inter_coarse_sep * rng.normal();
    for (std::size_t f = 0; f < spec.fines_per_coarse; ++f) {
      const std::size_t id = c * spec.fines_per_coarse + f;
      for (std::size_t j = 0; j < d; ++j) out.fine_centers[id * d + j] = coarse_center[j] + spec.intra_coarse_sep * rng.normal();
    }
  }

  std::vector<std::uint32_t> all_coarse(spec.num_coarse);
  std::iota(all_coarse.begin(), all_coarse.end(), 0u);
  out.pretrain = detail::sample_split(spec, out.fine_centers, all_coarse, spec.n_pretrain, mix_seed(spec.seed, 1));
  if (spec.n_clusterfit > 0) {
    out.clusterfit = detail::sample_split(spec, out.fine_centers, all_coarse, spec.n_clusterfit, mix_seed(spec.seed, 2));
  }
  out.target_train = detail::sample_split(spec, out.fine_centers, all_coarse, spec.n_target_train, mix_seed(spec.seed, 3));
  out.target_eval = detail::sample_split(spec, out.fine_centers, all_coarse, spec.n_target_eval, mix_seed(spec.seed, 4));

  if (top_m) {
    require(*top_m >= 1 && *top_m <= spec.num_coarse, ErrorKind::config, "m must be in [1, num_coarse]");
    const auto keep = top_m_labels(out.pretrain.coarse, *top_m);
    if (!out.clusterfit) out.clusterfit = out.pretrain;
    out.pretrain = detail::remap_coarse(
        detail::sample_split(spec, out.fine_centers, keep, spec.n_pretrain, mix_seed(spec.seed, 5)), keep);
  }
  return out;
}

/// Nearest true fine center classification accuracy on a split: the
/// reference ceiling for fine-target probes.
inline double nearest_center_accuracy(const SynthData& data, const SynthSplit& split) {
  const std::size_t d = split.inputs.cols();
  const std::size_t classes = split.fine.num_classes();
  std::size_t correct = 0;
  for (std::size_t i = 0; i < split.inputs.rows(); ++i) {
    auto x = split.inputs.row(i);
    std::size_t best = 0;
    double best_dist = INFINITY;
    for (std::size_t c = 0; c < classes; ++c) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = double(x[j]) - data.fine_centers[c * d + j];
        s += diff * diff;
      }
      if (s < best_dist) {
        best_dist = s;
        best = c;
      }
    }
    correct += best == split.fine[i];
  }
  return double(correct) / double(split.inputs.rows());
}

}  // namespace clusterfit
