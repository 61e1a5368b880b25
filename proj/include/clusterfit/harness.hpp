#pragma once

// Experiment orchestration: the ClusterFit pipeline (pre-train, extract,
// relabel, re-fit from scratch, probe), its baselines, and sweeps.
//
// Every stage result is cached under a key that spells out all of the
// stage's inputs (upstream keys included), so a cache hit is only possible
// when a fresh computation would see identical inputs.

#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "clusterfit/config.hpp"
#include "clusterfit/errors.hpp"
#include "clusterfit/featurestore.hpp"
#include "clusterfit/kmeans.hpp"
#include "clusterfit/nnet.hpp"
#include "clusterfit/parallel.hpp"
#include "clusterfit/probe.hpp"
#include "clusterfit/relabel.hpp"
#include "clusterfit/rng.hpp"
#include "clusterfit/synth.hpp"

namespace clusterfit {

struct ResultRow {
  std::string method;
  std::optional<std::size_t> k;
  double p = 0.0;
  std::optional<std::size_t> m;
  double capacity = 1.0;
  std::uint64_t seed = 0;
  std::string target;
  double top1 = 0.0;
  double wallclock_s = 0.0;
};

struct ResultsTable {
  json config;
  std::vector<ResultRow> rows;

  static constexpr const char* kHeader = "method,K,p,m,capacity,seed,target,top1,wallclock_s";

  static std::string format_row(const ResultRow& r, bool with_wallclock = true) {
    char buf[512];
    std::snprintf(buf, sizeof buf, "%s,%s,%g,%s,%g,%llu,%s,%.6f", r.method.c_str(),
                  r.k ? std::to_string(*r.k).c_str() : "", r.p, r.m ? std::to_string(*r.m).c_str() : "", r.capacity,
                  static_cast<unsigned long long>(r.seed), r.target.c_str(), r.top1);
    std::string line = buf;
    if (with_wallclock) {
      std::snprintf(buf, sizeof buf, ",%.3f", r.wallclock_s);
      line += buf;
    }
    return line;
  }

  std::string to_csv() const {
    std::string out = std::string(kHeader) + "\n";
    for (const auto& r : rows) out += format_row(r) + "\n";
    return out;
  }

  /// Writes the CSV and a `<path>.json` sidecar holding the generating config.
  void write(const std::filesystem::path& path) const {
    std::ofstream out(path);
    require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
    out << to_csv();
    std::ofstream meta(path.string() + ".json");
    meta << config.dump(2) << '\n';
  }

  std::vector<const ResultRow*> select(const std::string& method, const std::string& target) const {
    std::vector<const ResultRow*> out;
    for (const auto& r : rows) {
      if (r.method == method && r.target == target) out.push_back(&r);
    }
    return out;
  }
};

/// Type-erased store of stage outputs keyed by their full input description.
class StageCache {
 public:
  template <typename T, typename Fn>
  std::shared_ptr<const T> get(const std::string& key, Fn&& compute) {
    {
      std::lock_guard lock(mutex_);
      if (auto it = entries_.find(key); it != entries_.end()) {
        ++hits_;
        return std::static_pointer_cast<const T>(it->second);
      }
    }
    auto value = std::make_shared<const T>(compute());
    std::lock_guard lock(mutex_);
    ++misses_;
    entries_.emplace(key, value);
    return value;
  }

  std::size_t hits() const { return hits_; }
  std::size_t misses() const { return misses_; }
  void clear() {
    std::lock_guard lock(mutex_);
    entries_.clear();
  }

 private:
  std::mutex mutex_;
  std::map<std::string, std::shared_ptr<const void>> entries_;
  std::size_t hits_ = 0;
  std::size_t misses_ = 0;
};

struct TargetSplit {
  std::string name;
  FeatureMatrix train_inputs;
  LabelVector train_labels;
  FeatureMatrix eval_inputs;
  LabelVector eval_labels;
};

struct PipelineData {
  Dataset pretrain;
  Dataset clusterfit;
  bool aliased = true;  // D_cf is D_pre
  std::vector<TargetSplit> targets;
};

namespace detail {

template <typename Fn>
auto run_stage(const std::string& stage, Fn&& fn) -> decltype(fn()) {
  try {
    return fn();
  } catch (const StageError&) {
    throw;
  } catch (const Error& e) {
    throw StageError(stage, e);
  } catch (const std::exception& e) {
    throw StageError(stage, Error(ErrorKind::config, e.what()));
  }
}

inline PipelineData load_pipeline_data(const ExperimentConfig& cfg) {
  PipelineData out;
  if (cfg.synth) {
    SynthSpec spec = *cfg.synth;
    spec.seed = mix_seed(spec.seed, cfg.seed);
    const SynthData s = synth_generate(spec, cfg.m);
    out.pretrain = Dataset(s.pretrain.inputs, s.pretrain.coarse, DatasetRole::pretrain);
    out.aliased = !s.clusterfit.has_value();
    const auto& cf = s.clusterfit_split();
    out.clusterfit = Dataset(cf.inputs, cf.coarse, DatasetRole::clusterfit);
    for (const auto& name : cfg.targets) {
      const bool fine = name == "fine";
      out.targets.push_back({name, s.target_train.inputs, fine ? s.target_train.fine : s.target_train.coarse,
                             s.target_eval.inputs, fine ? s.target_eval.fine : s.target_eval.coarse});
    }
    return out;
  }
  const FileData& f = *cfg.files;
  LabelVector pre_labels = read_labels(f.pretrain_labels);
  FeatureMatrix pre_inputs = read_features(f.pretrain_inputs);
  out.aliased = f.clusterfit_inputs.empty();
  if (out.aliased) {
    out.clusterfit = Dataset(pre_inputs, pre_labels, DatasetRole::clusterfit);
  } else {
    std::optional<LabelVector> cf_labels;
    if (!f.clusterfit_labels.empty()) cf_labels = read_labels(f.clusterfit_labels);
    out.clusterfit = Dataset(read_features(f.clusterfit_inputs), cf_labels, DatasetRole::clusterfit);
  }
  if (cfg.m) {
    const auto keep = top_m_labels(pre_labels, *cfg.m);
    std::vector<std::uint32_t> rank(pre_labels.num_classes(), UINT32_MAX);
    for (std::size_t r = 0; r < keep.size(); ++r) rank[keep[r]] = static_cast<std::uint32_t>(r);
    std::vector<std::size_t> rows;
    std::vector<std::uint32_t> remapped;
    for (std::size_t i = 0; i < pre_labels.size(); ++i) {
      if (rank[pre_labels[i]] != UINT32_MAX) {
        rows.push_back(i);
        remapped.push_back(rank[pre_labels[i]]);
      }
    }
    pre_inputs = pre_inputs.select_rows(rows);
    pre_labels = LabelVector(keep.size(), std::move(remapped));
  }
  out.pretrain = Dataset(std::move(pre_inputs), std::move(pre_labels), DatasetRole::pretrain);
  for (const auto& t : f.targets) {
    out.targets.push_back({t.name, read_features(t.train_inputs), read_labels(t.train_labels), read_features(t.eval_inputs),
                           read_labels(t.eval_labels)});
  }
  return out;
}

struct TargetFeatures {
  FeatureMatrix train;
  FeatureMatrix eval;
};

}  // namespace detail

/// Runs pipelines and sweeps, keeping one stage cache per run seed.
class Harness {
 public:
  /// Optional progress sink (stage name, seconds).
  std::function<void(const std::string&)> log;

  ResultsTable run(const ExperimentConfig& cfg) {
    ResultsTable table;
    table.config = to_json(cfg);
    run_into(cfg, table.rows);
    return table;
  }

  /// As run(), but rows land in `rows` as soon as each method is probed, so a
  /// failing stage leaves the earlier rows available to the caller.
  void run_into(const ExperimentConfig& cfg, std::vector<ResultRow>& rows);

  ResultsTable sweep(const ExperimentConfig& base, const std::string& axis, const std::vector<std::string>& values,
                     const std::vector<std::uint64_t>& seeds, unsigned parallel_seeds = 1) {
    require(!values.empty() && !seeds.empty(), ErrorKind::config, "sweep needs at least one value and one seed");
    std::vector<ExperimentConfig> points;
    for (const auto& v : values) points.push_back(with_axis(base, axis, v));
    for (const auto& p : points) p.validate();

    // slots[v][s] holds rows for (value v, seed s); merged value-major.
    std::vector<std::vector<std::vector<ResultRow>>> slots(points.size(), std::vector<std::vector<ResultRow>>(seeds.size()));
    for (auto s : seeds) cache_for(s);
    parallel_for(0, seeds.size(), parallel_seeds, [&](std::size_t si) {
      for (std::size_t vi = 0; vi < points.size(); ++vi) {
        ExperimentConfig cfg = points[vi];
        cfg.seed = seeds[si];
        run_into(cfg, slots[vi][si]);
      }
    });
    ResultsTable table;
    table.config = to_json(base);
    table.config["sweep"] = {{"axis", axis}, {"values", values}, {"seeds", seeds}};
    for (auto& per_value : slots) {
      for (auto& per_seed : per_value) table.rows.insert(table.rows.end(), per_seed.begin(), per_seed.end());
    }
    return table;
  }

  static ExperimentConfig with_axis(ExperimentConfig cfg, const std::string& axis, const std::string& value) {
    try {
      if (axis == "K") {
        cfg.clusterfit.kmeans.k = std::stoul(value);
      } else if (axis == "p") {
        cfg.pretrain.noise_p = std::stod(value);
      } else if (axis == "m") {
        cfg.m = std::stoul(value);
      } else if (axis == "capacity") {
        cfg.capacity = std::stod(value);
      } else if (axis == "strategy") {
        cfg.clusterfit.strategy = parse_strategy(value);
      } else {
        fail(ErrorKind::config, "unknown sweep axis '" + axis + "' (expected K, p, m, capacity or strategy)");
      }
    } catch (const std::logic_error&) {
      fail(ErrorKind::config, "bad value '" + value + "' for sweep axis " + axis);
    }
    return cfg;
  }

  StageCache& cache_for(std::uint64_t seed) {
    std::lock_guard lock(caches_mutex_);
    auto& slot = caches_[seed];
    if (!slot) slot = std::make_unique<StageCache>();
    return *slot;
  }

  void clear_caches() {
    std::lock_guard lock(caches_mutex_);
    caches_.clear();
  }

 private:
  class Pipeline;

  std::mutex caches_mutex_;
  std::map<std::uint64_t, std::unique_ptr<StageCache>> caches_;
};

class Harness::Pipeline {
 public:
  Pipeline(Harness& h, const ExperimentConfig& cfg, StageCache& cache, std::vector<ResultRow>& rows)
      : harness_(h), cfg_(cfg), cache_(cache), rows_(rows) {}

  void execute() {
    using Clock = std::chrono::steady_clock;
    const auto data_key = json{{"synth", cfg_.synth ? to_json(*cfg_.synth) : json(nullptr)},
                               {"files", cfg_.files ? to_json(cfg_).at("files") : json(nullptr)},
                               {"seed", cfg_.seed},
                               {"m", cfg_.m ? json(*cfg_.m) : json(nullptr)},
                               {"targets", cfg_.targets}}
                              .dump();
    data_ = detail::run_stage("data", [&] {
      return cache_.get<PipelineData>("data:" + data_key, [&] { return detail::load_pipeline_data(cfg_); });
    });
    require(data_->pretrain.labels.has_value(), ErrorKind::config, "D_pre needs labels");

    // (1) Pre-training labels, optionally corrupted.
    const NoiseSpec noise{cfg_.pretrain.noise_p, mix_seed(cfg_.pretrain.noise_seed, cfg_.seed)};
    const std::string labels_key = data_key + "|noise:" + json{{"p", noise.p}, {"seed", noise.seed}}.dump();
    pre_labels_ = detail::run_stage("noise", [&] {
      return cache_.get<LabelVector>("labels:" + labels_key, [&] { return inject_noise(*data_->pretrain.labels, noise); });
    });

    const std::size_t d = data_->pretrain.features.cols();
    const MlpShape pre_shape{d, cfg_.pretrain_hidden(), {pre_labels_->num_classes()}};
    TrainConfig pre_train = cfg_.pretrain.net.train;
    pre_train.seed = mix_seed(pre_train.seed, cfg_.seed);
    const std::string npre_key = labels_key + "|npre:" + shape_key(pre_shape) + to_json(pre_train).dump();

    auto t0 = Clock::now();
    auto npre = detail::run_stage("pretrain", [&] {
      return cache_.get<MlpModel<float>>("model:" + npre_key, [&] {
        note("training N_pre");
        const LabelVector labels[] = {*pre_labels_};
        return train_from_scratch<float>(pre_shape, data_->pretrain.features, labels, pre_train, CrossEntropyLoss{});
      });
    });
    const double npre_time = seconds_since(t0);
    if (cfg_.baselines.npre) emit_probes("npre", std::nullopt, npre_key, *npre, npre_time);

    if (cfg_.baselines.npre2x) {
      t0 = Clock::now();
      TrainConfig longer = pre_train;
      longer.epochs *= 2;
      const std::string key = labels_key + "|npre2x:" + shape_key(pre_shape) + to_json(longer).dump();
      auto model = detail::run_stage("baseline-npre2x", [&] {
        return cache_.get<MlpModel<float>>("model:" + key, [&] {
          note("training N_pre^2x");
          const LabelVector labels[] = {*pre_labels_};
          return train_from_scratch<float>(pre_shape, data_->pretrain.features, labels, longer, CrossEntropyLoss{});
        });
      });
      emit_probes("npre2x", std::nullopt, key, *model, seconds_since(t0));
    }

    if (cfg_.baselines.distill) {
      t0 = Clock::now();
      const DistillConfig dc = *cfg_.baselines.distill;
      TrainConfig student = pre_train;
      student.seed = mix_seed(student.seed, 0xd157);
      const std::string key = npre_key + "|distill:" + to_json(dc).dump() + to_json(student).dump();
      auto model = detail::run_stage("baseline-distill", [&] {
        return cache_.get<MlpModel<float>>("model:" + key, [&] {
          note("training distilled student");
          const LabelVector labels[] = {*pre_labels_};
          return train_from_scratch<float>(pre_shape, data_->pretrain.features, labels, student,
                                           DistillLoss<float>{dc, npre});
        });
      });
      emit_probes("distill", std::nullopt, key, *model, seconds_since(t0));
    }

    // (2) Features of D_cf through N_pre.
    t0 = Clock::now();
    const std::string features_key = npre_key + "|cf-features:l2=" + std::to_string(cfg_.clusterfit.l2_normalize);
    auto features = detail::run_stage("extract", [&] {
      return cache_.get<FeatureMatrix>("features:" + features_key, [&] {
        auto f = extract_features(*npre, data_->clusterfit.features);
        return cfg_.clusterfit.l2_normalize ? l2_normalize(f) : f;
      });
    });
    const double extract_time = seconds_since(t0);

    // Labels of D_cf as seen by label-aware strategies: the (noisy) D_pre
    // labels when the two sets are aliased.
    std::shared_ptr<const LabelVector> cf_labels;
    std::string cf_labels_key;
    if (data_->aliased) {
      cf_labels = pre_labels_;
      cf_labels_key = labels_key;
    } else if (data_->clusterfit.labels) {
      cf_labels = std::make_shared<const LabelVector>(*data_->clusterfit.labels);
      cf_labels_key = data_key + "|cf-labels";
    }

    // (3) + (4) Relabel and fit N_cf from scratch for the same epoch count.
    auto relabel_and_fit = [&](RelabelStrategy strategy, const std::string& method) {
      const auto t1 = Clock::now();
      KMeansConfig km = cfg_.clusterfit.kmeans;
      km.seed = mix_seed(km.seed, cfg_.seed);
      km.threads = cfg_.threads;
      std::string relabel_key = features_key + "|relabel:" + to_string(strategy);
      if (strategy != RelabelStrategy::prototype) relabel_key += to_json(km).dump();
      if (strategy != RelabelStrategy::unsupervised) {
        require(cf_labels != nullptr, ErrorKind::config, to_string(strategy) + " relabelling needs D_cf labels");
        relabel_key += "|" + cf_labels_key;
      }
      auto pseudo = detail::run_stage("relabel", [&] {
        return cache_.get<LabelVector>("pseudo:" + relabel_key, [&] {
          note("relabelling (" + to_string(strategy) + ")");
          switch (strategy) {
            case RelabelStrategy::unsupervised: return pseudo_labels(*features, km);
            case RelabelStrategy::per_label:
              return per_label_pseudo_labels(*features, *cf_labels, per_label_plan(*cf_labels, km.k), km);
            case RelabelStrategy::prototype: return prototype_labels(*features, *cf_labels, cfg_.threads);
          }
          fail(ErrorKind::config, "unknown strategy");
        });
      });

      const MlpShape cf_shape{data_->clusterfit.features.cols(), cfg_.clusterfit.net.hidden, {pseudo->num_classes()}};
      TrainConfig cf_train = cfg_.clusterfit.net.train;
      cf_train.epochs = pre_train.epochs;
      cf_train.seed = mix_seed(cf_train.seed, cfg_.seed);
      const std::string ncf_key = relabel_key + "|ncf:" + shape_key(cf_shape) + to_json(cf_train).dump();
      auto ncf = detail::run_stage("clusterfit-train", [&] {
        return cache_.get<MlpModel<float>>("model:" + ncf_key, [&] {
          note("training N_cf (" + method + ", K=" + std::to_string(pseudo->num_classes()) + ")");
          const LabelVector labels[] = {*pseudo};
          return train_from_scratch<float>(cf_shape, data_->clusterfit.features, labels, cf_train, CrossEntropyLoss{});
        });
      });
      emit_probes(method, pseudo->num_classes(), ncf_key, *ncf, extract_time + seconds_since(t1));
    };

    switch (cfg_.clusterfit.strategy) {
      case RelabelStrategy::unsupervised: relabel_and_fit(RelabelStrategy::unsupervised, "cf"); break;
      case RelabelStrategy::per_label: relabel_and_fit(RelabelStrategy::per_label, "cf-per-label"); break;
      case RelabelStrategy::prototype: relabel_and_fit(RelabelStrategy::prototype, "cf-prototype"); break;
    }
    if (cfg_.baselines.prototype && cfg_.clusterfit.strategy != RelabelStrategy::prototype) {
      relabel_and_fit(RelabelStrategy::prototype, "prototype");
    }
  }

 private:
  static std::string shape_key(const MlpShape& s) {
    return json{{"input", s.input}, {"hidden", s.hidden}, {"heads", s.heads}}.dump();
  }

  static double seconds_since(std::chrono::steady_clock::time_point t) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t).count();
  }

  void note(const std::string& what) const {
    if (harness_.log) harness_.log("[seed " + std::to_string(cfg_.seed) + "] " + what);
  }

  // (5) Linear probes on penultimate features for every target.
  void emit_probes(const std::string& method, std::optional<std::size_t> k, const std::string& model_key,
                   const MlpModel<float>& model, double model_seconds) {
    for (const auto& target : data_->targets) {
      const auto t0 = std::chrono::steady_clock::now();
      const std::string key = model_key + "|probe:" + target.name + to_json(cfg_.probe.config).dump() +
                              json(cfg_.probe.lr_grid).dump() + (cfg_.probe.standardize ? "std" : "raw");
      auto result = detail::run_stage("probe", [&] {
        return cache_.get<ProbeResult>("probe:" + key, [&] {
          FeatureMatrix train = extract_features(model, target.train_inputs);
          FeatureMatrix eval = extract_features(model, target.eval_inputs);
          if (cfg_.probe.standardize) {
            const auto s = Standardizer::fit(train);
            train = s.apply(train);
            eval = s.apply(eval);
          }
          ProbeConfig pc = cfg_.probe.config;
          pc.seed = mix_seed(pc.seed, cfg_.seed);
          return probe_sweep(train, target.train_labels, eval, target.eval_labels, pc, cfg_.probe.lr_grid);
        });
      });
      ResultRow row;
      row.method = method;
      row.k = k;
      row.p = cfg_.pretrain.noise_p;
      row.m = cfg_.m;
      row.capacity = cfg_.capacity;
      row.seed = cfg_.seed;
      row.target = target.name;
      row.top1 = result->top1;
      row.wallclock_s = model_seconds + seconds_since(t0);
      note(method + " on " + target.name + ": top1 = " + std::to_string(result->top1));
      rows_.push_back(std::move(row));
    }
  }

  Harness& harness_;
  const ExperimentConfig& cfg_;
  StageCache& cache_;
  std::vector<ResultRow>& rows_;
  std::shared_ptr<const PipelineData> data_;
  std::shared_ptr<const LabelVector> pre_labels_;
};

inline void Harness::run_into(const ExperimentConfig& cfg, std::vector<ResultRow>& rows) {
  cfg.validate();
  StageCache& cache = cache_for(cfg.seed);
  Pipeline(*this, cfg, cache, rows).execute();
}

/// Convenience wrapper: a single pipeline run with a fresh cache.
inline ResultsTable clusterfit_run(const ExperimentConfig& cfg) { return Harness().run(cfg); }

inline ResultsTable sweep(const ExperimentConfig& cfg, const std::string& axis, const std::vector<std::string>& values,
                          const std::vector<std::uint64_t>& seeds) {
  return Harness().sweep(cfg, axis, values, seeds);
}

}  // namespace clusterfit
