#pragma once

// Lloyd's k-means with a two-stage schedule: a number of iterations on a
// random subsample, then a few more on the full data starting from those
// centers. Per-cluster sums are accumulated in fixed 4096-row chunks and the
// chunk partials reduced in chunk order, so the result does not depend on the
// number of worker threads.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "clusterfit/errors.hpp"
#include "clusterfit/featurestore.hpp"
#include "clusterfit/parallel.hpp"
#include "clusterfit/rng.hpp"
#include "json.hpp"

namespace clusterfit {

inline constexpr std::size_t kChunkRows = 4096;

enum class InitMethod { random_points, kmeans_plus_plus };
enum class EmptyClusterPolicy { respawn_farthest };

struct KMeansConfig {
  std::size_t k = 1;
  InitMethod init = InitMethod::kmeans_plus_plus;
  double stage1_fraction = 0.2;
  std::size_t stage1_iters = 30;
  std::size_t stage2_iters = 5;
  std::uint64_t seed = 0;
  double tol = 1e-6;
  EmptyClusterPolicy empty_cluster_policy = EmptyClusterPolicy::respawn_farthest;
  unsigned threads = 1;

  void validate() const {
    require(k >= 1, ErrorKind::config, "k must be >= 1");
    require(stage1_fraction > 0.0 && stage1_fraction <= 1.0, ErrorKind::config, "stage1_fraction must be in (0, 1]");
    require(tol >= 0.0, ErrorKind::config, "tol must be >= 0");
  }
};

struct ClusterAssignment {
  std::vector<std::uint32_t> index;
  std::vector<double> distance;  // squared distance to the assigned center
};

/// Per-iteration record of a fit, mostly for tests and logging.
struct KMeansTrace {
  std::vector<double> stage1_inertia;
  std::vector<double> stage2_inertia;
  std::size_t stage1_rows = 0;
  std::size_t respawns = 0;
  bool degenerate = false;
};

namespace detail {

inline double squared_distance(std::span<const float> x, std::span<const double> c) noexcept {
  double sum = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) {
    const double diff = double(x[j]) - c[j];
    sum += diff * diff;
  }
  return sum;
}

// Nearest center by squared Euclidean distance, ties to the lowest index.
// Candidates are abandoned once a partial sum reaches the current best; the
// partial sums only grow, so the winner and its distance are unaffected.
inline std::pair<std::uint32_t, double> nearest_center(std::span<const float> x, const std::vector<double>& centers,
                                                       std::size_t k) noexcept {
  const std::size_t d = x.size();
  std::uint32_t best = 0;
  double best_dist = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < k; ++c) {
    const double* center = centers.data() + c * d;
    double sum = 0.0;
    std::size_t j = 0;
    bool pruned = false;
    while (j < d) {
      const std::size_t stop = std::min(d, j + 16);
      for (; j < stop; ++j) {
        const double diff = double(x[j]) - center[j];
        sum += diff * diff;
      }
      if (sum >= best_dist) {
        pruned = true;
        break;
      }
    }
    if (!pruned && sum < best_dist) {
      best_dist = sum;
      best = static_cast<std::uint32_t>(c);
    }
  }
  return {best, best_dist};
}

class LloydRunner {
 public:
  LloydRunner(const FeatureMatrix& x, std::size_t k, unsigned threads) : x_(x), k_(k), d_(x.cols()), threads_(threads) {}

  // Assigns every row of `rows` to its nearest center, returns the inertia
  // and leaves per-cluster sums and counts ready for update().
  double assign(std::span<const std::size_t> rows, const std::vector<double>& centers) {
    const std::size_t n = rows.size();
    assign_.assign(n, 0);
    dist_.assign(n, 0.0);
    sums_.assign(k_ * d_, 0.0);
    counts_.assign(k_, 0);
    double inertia = 0.0;

    const std::size_t num_chunks = (n + kChunkRows - 1) / kChunkRows;
    const std::size_t wave = std::max<std::size_t>(1, resolve_threads(threads_));
    std::vector<Partial> partials(std::min(wave, num_chunks));
    for (std::size_t first = 0; first < num_chunks; first += wave) {
      const std::size_t last = std::min(num_chunks, first + wave);
      parallel_for(first, last, threads_, [&](std::size_t chunk) {
        Partial& p = partials[chunk - first];
        p.sums.assign(k_ * d_, 0.0);
        p.counts.assign(k_, 0);
        p.inertia = 0.0;
        const std::size_t lo = chunk * kChunkRows;
        const std::size_t hi = std::min(n, lo + kChunkRows);
        for (std::size_t pos = lo; pos < hi; ++pos) {
          auto xr = x_.row(rows[pos]);
          auto [c, dist] = nearest_center(xr, centers, k_);
          assign_[pos] = c;
          dist_[pos] = dist;
          p.inertia += dist;
          ++p.counts[c];
          double* s = p.sums.data() + std::size_t(c) * d_;
          for (std::size_t j = 0; j < d_; ++j) s[j] += double(xr[j]);
        }
      });
      for (std::size_t chunk = first; chunk < last; ++chunk) {
        const Partial& p = partials[chunk - first];
        inertia += p.inertia;
        for (std::size_t i = 0; i < sums_.size(); ++i) sums_[i] += p.sums[i];
        for (std::size_t c = 0; c < k_; ++c) counts_[c] += p.counts[c];
      }
    }
    return inertia;
  }

  // Recomputes centers as cluster means; empty clusters take the point
  // farthest from its current center (ties to the lowest position), moved
  // out of a cluster that keeps at least one member.
  std::size_t update(std::span<const std::size_t> rows, std::vector<double>& centers) {
    std::size_t respawns = 0;
    for (std::size_t c = 0; c < k_; ++c) {
      if (counts_[c] != 0) continue;
      std::size_t far = rows.size();
      double far_dist = -1.0;
      for (std::size_t pos = 0; pos < rows.size(); ++pos) {
        if (counts_[assign_[pos]] > 1 && dist_[pos] > far_dist) {
          far_dist = dist_[pos];
          far = pos;
        }
      }
      if (far == rows.size()) break;  // k > number of rows; prevented by callers
      auto xr = x_.row(rows[far]);
      const std::uint32_t old = assign_[far];
      for (std::size_t j = 0; j < d_; ++j) {
        sums_[old * d_ + j] -= double(xr[j]);
        sums_[c * d_ + j] = double(xr[j]);
      }
      --counts_[old];
      counts_[c] = 1;
      assign_[far] = static_cast<std::uint32_t>(c);
      dist_[far] = 0.0;
      ++respawns;
    }
    for (std::size_t c = 0; c < k_; ++c) {
      if (counts_[c] == 0) continue;
      const double inv = 1.0 / double(counts_[c]);
      for (std::size_t j = 0; j < d_; ++j) centers[c * d_ + j] = sums_[c * d_ + j] * inv;
    }
    return respawns;
  }

 private:
  struct Partial {
    std::vector<double> sums;
    std::vector<std::size_t> counts;
    double inertia = 0.0;
  };

  const FeatureMatrix& x_;
  std::size_t k_;
  std::size_t d_;
  unsigned threads_;
  std::vector<std::uint32_t> assign_;
  std::vector<double> dist_;
  std::vector<double> sums_;
  std::vector<std::size_t> counts_;
};

inline std::vector<double> init_centers(const FeatureMatrix& x, std::span<const std::size_t> rows,
                                        const KMeansConfig& cfg, Rng& rng) {
  const std::size_t d = x.cols();
  const std::size_t k = cfg.k;
  std::vector<double> centers(k * d);
  auto set_center = [&](std::size_t c, std::size_t row) {
    auto xr = x.row(row);
    for (std::size_t j = 0; j < d; ++j) centers[c * d + j] = double(xr[j]);
  };

  if (cfg.init == InitMethod::random_points) {
    std::vector<std::size_t> pos(rows.size());
    std::iota(pos.begin(), pos.end(), std::size_t{0});
    for (std::size_t c = 0; c < k; ++c) {
      std::swap(pos[c], pos[c + rng.below(pos.size() - c)]);
      set_center(c, rows[pos[c]]);
    }
    return centers;
  }

  // k-means++: sample each new center with probability proportional to the
  // squared distance to the nearest center chosen so far.
  std::vector<double> d2(rows.size());
  set_center(0, rows[rng.below(rows.size())]);
  const std::size_t num_chunks = (rows.size() + kChunkRows - 1) / kChunkRows;
  auto refresh = [&](std::size_t c, bool first) {
    std::span<const double> center(centers.data() + c * d, d);
    parallel_for(0, num_chunks, cfg.threads, [&](std::size_t chunk) {
      const std::size_t hi = std::min(rows.size(), (chunk + 1) * kChunkRows);
      for (std::size_t pos = chunk * kChunkRows; pos < hi; ++pos) {
        const double dist = squared_distance(x.row(rows[pos]), center);
        d2[pos] = first ? dist : std::min(d2[pos], dist);
      }
    });
  };
  refresh(0, true);
  for (std::size_t c = 1; c < k; ++c) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t chosen = rows.size() - 1;
    if (total > 0.0) {
      const double target = rng.uniform() * total;
      double running = 0.0;
      for (std::size_t pos = 0; pos < rows.size(); ++pos) {
        if (d2[pos] <= 0.0) continue;
        running += d2[pos];
        chosen = pos;
        if (running > target) break;
      }
    } else {
      chosen = rng.below(rows.size());
    }
    set_center(c, rows[chosen]);
    refresh(c, false);
  }
  return centers;
}

inline bool all_rows_identical(const FeatureMatrix& x) {
  if (x.rows() < 2) return true;
  auto first = x.row(0);
  for (std::size_t i = 1; i < x.rows(); ++i) {
    if (!std::equal(first.begin(), first.end(), x.row(i).begin())) return false;
  }
  return true;
}

}  // namespace detail

/// Squared-Euclidean nearest-center assignment, ties to the lowest center index.
inline ClusterAssignment kmeans_assign(const FeatureMatrix& features, const Centroids& c, unsigned threads = 1) {
  require(features.cols() == c.d, ErrorKind::shape,
          "features have dimension " + std::to_string(features.cols()) + ", centroids " + std::to_string(c.d));
  const std::size_t n = features.rows();
  ClusterAssignment out;
  out.index.resize(n);
  out.distance.resize(n);
  const std::size_t num_chunks = (n + kChunkRows - 1) / kChunkRows;
  parallel_for(0, num_chunks, threads, [&](std::size_t chunk) {
    const std::size_t hi = std::min(n, (chunk + 1) * kChunkRows);
    for (std::size_t i = chunk * kChunkRows; i < hi; ++i) {
      auto [idx, dist] = detail::nearest_center(features.row(i), c.centers, c.k);
      out.index[i] = idx;
      out.distance[i] = dist;
    }
  });
  return out;
}

inline Centroids kmeans_fit(const FeatureMatrix& features, const KMeansConfig& cfg, KMeansTrace* trace = nullptr) {
  cfg.validate();
  const std::size_t n = features.rows();
  const std::size_t d = features.cols();
  require(n >= cfg.k, ErrorKind::infeasible,
          "cannot form " + std::to_string(cfg.k) + " clusters from " + std::to_string(n) + " rows");

  KMeansTrace local;
  KMeansTrace& tr = trace ? *trace : local;
  tr = KMeansTrace{};
  if (cfg.k > 1 && detail::all_rows_identical(features)) {
    tr.degenerate = true;
    warn("k-means: all " + std::to_string(n) + " rows are identical; clusters will be duplicates");
  }

  std::vector<std::size_t> all(n);
  std::iota(all.begin(), all.end(), std::size_t{0});

  // Stage-1 subsample in ascending row order. A subsample with fewer than k
  // rows cannot hold k clusters, so stage 1 then uses every row.
  std::size_t sub_n = static_cast<std::size_t>(std::ceil(cfg.stage1_fraction * double(n)));
  if (sub_n < cfg.k) sub_n = n;
  sub_n = std::min(sub_n, n);
  std::vector<std::size_t> subset;
  if (sub_n == n) {
    subset = all;
  } else {
    Rng pick(mix_seed(cfg.seed, 1));
    std::vector<std::size_t> perm = all;
    for (std::size_t i = 0; i < sub_n; ++i) std::swap(perm[i], perm[i + pick.below(n - i)]);
    subset.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(sub_n));
    std::sort(subset.begin(), subset.end());
  }
  tr.stage1_rows = subset.size();

  Rng init_rng(mix_seed(cfg.seed, 2));
  std::vector<double> centers = detail::init_centers(features, subset, cfg, init_rng);

  detail::LloydRunner runner(features, cfg.k, cfg.threads);
  std::size_t iterations = 0;
  auto run_stage = [&](std::span<const std::size_t> rows, std::size_t iters, std::vector<double>& history) {
    double previous = 0.0;
    for (std::size_t it = 0; it < iters; ++it) {
      const double inertia = runner.assign(rows, centers);
      history.push_back(inertia);
      const bool converged =
          it > 0 && (previous == 0.0 || (previous - inertia) / previous < cfg.tol);
      tr.respawns += runner.update(rows, centers);
      ++iterations;
      if (converged) break;
      previous = inertia;
    }
  };
  run_stage(subset, cfg.stage1_iters, tr.stage1_inertia);
  run_stage(all, cfg.stage2_iters, tr.stage2_inertia);

  Centroids out;
  out.k = cfg.k;
  out.d = d;
  out.centers = std::move(centers);
  out.iterations_run = iterations;
  out.inertia = runner.assign(all, out.centers);
  out.validate();
  return out;
}

inline double kmeans_inertia(const FeatureMatrix& features, const Centroids& c, unsigned threads = 1) {
  auto a = kmeans_assign(features, c, threads);
  double total = 0.0;
  for (double v : a.distance) total += v;
  return total;
}

/// Centers as CFF1 plus a JSON sidecar at `<path>.json`.
inline void write_centroids(const std::filesystem::path& path, const Centroids& c, std::uint64_t seed) {
  std::vector<float> data(c.centers.begin(), c.centers.end());
  write_features(path, FeatureMatrix(c.k, c.d, std::move(data)));
  nlohmann::json meta{{"k", c.k}, {"inertia", c.inertia}, {"iterations_run", c.iterations_run}, {"seed", seed}};
  std::ofstream out(path.string() + ".json");
  require(static_cast<bool>(out), ErrorKind::io, "cannot write centroid sidecar for " + path.string());
  out << meta.dump(2) << '\n';
}

inline Centroids read_centroids(const std::filesystem::path& path, std::uint64_t* seed = nullptr) {
  const FeatureMatrix m = read_features(path);
  Centroids c;
  c.k = m.rows();
  c.d = m.cols();
  c.centers.assign(m.data().begin(), m.data().end());
  std::ifstream in(path.string() + ".json");
  if (in) {
    const auto meta = nlohmann::json::parse(in);
    require(meta.at("k").get<std::size_t>() == c.k, ErrorKind::format, "centroid sidecar disagrees with payload on k");
    c.inertia = meta.at("inertia").get<double>();
    c.iterations_run = meta.at("iterations_run").get<std::size_t>();
    if (seed) *seed = meta.at("seed").get<std::uint64_t>();
  }
  c.validate();
  return c;
}

}  // namespace clusterfit
