#pragma once

// Experiment configuration and its JSON schema. Every field is optional in
// JSON and falls back to the defaults below; unknown keys are rejected.

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <optional>
#include <string>
#include <vector>

#include "clusterfit/errors.hpp"
#include "clusterfit/kmeans.hpp"
#include "clusterfit/nnet.hpp"
#include "clusterfit/probe.hpp"
#include "clusterfit/relabel.hpp"
#include "clusterfit/synth.hpp"
#include "json.hpp"

namespace clusterfit {

using nlohmann::json;

enum class RelabelStrategy { unsupervised, per_label, prototype };

inline std::string to_string(RelabelStrategy s) {
  switch (s) {
    case RelabelStrategy::unsupervised: return "unsupervised";
    case RelabelStrategy::per_label: return "per-label";
    case RelabelStrategy::prototype: return "prototype";
  }
  return "?";
}

inline RelabelStrategy parse_strategy(const std::string& s) {
  if (s == "unsupervised") return RelabelStrategy::unsupervised;
  if (s == "per-label" || s == "per_label") return RelabelStrategy::per_label;
  if (s == "prototype") return RelabelStrategy::prototype;
  fail(ErrorKind::config, "unknown relabel strategy '" + s + "'");
}

struct NetConfig {
  std::vector<std::size_t> hidden{128, 64};
  TrainConfig train{};
};

struct PretrainSettings {
  NetConfig net{};
  double noise_p = 0.0;
  std::uint64_t noise_seed = 0;
};

struct ClusterFitSettings {
  KMeansConfig kmeans{};
  RelabelStrategy strategy = RelabelStrategy::unsupervised;
  NetConfig net{};  // train.epochs is overridden by the pre-training epoch count
  bool l2_normalize = false;
};

struct BaselineSettings {
  bool npre = true;
  bool npre2x = false;
  std::optional<DistillConfig> distill;
  bool prototype = false;
};

struct ProbeSettings {
  ProbeConfig config{};
  std::vector<double> lr_grid;  // empty: config.lr0 only
  bool standardize = true;
};

/// Pre-computed inputs. D_cf defaults to D_pre; targets are listed as
/// named train/eval feature + label files.
struct FileData {
  std::string pretrain_inputs, pretrain_labels;
  std::string clusterfit_inputs, clusterfit_labels;
  struct Target {
    std::string name, train_inputs, train_labels, eval_inputs, eval_labels;
  };
  std::vector<Target> targets;
};

struct ExperimentConfig {
  std::optional<SynthSpec> synth;
  std::optional<FileData> files;
  PretrainSettings pretrain{};
  ClusterFitSettings clusterfit{};
  BaselineSettings baselines{};
  ProbeSettings probe{};
  std::optional<std::size_t> m;  // restrict D_pre to its m most frequent labels
  double capacity = 1.0;        // width multiplier for the pre-trained network
  std::uint64_t seed = 0;
  std::vector<std::string> targets{"fine"};  // synthetic targets: "fine", "coarse"
  unsigned threads = 1;
  std::string output;  // results CSV path, optional

  void validate() const {
    require(synth.has_value() != files.has_value(), ErrorKind::config, "config needs exactly one of 'synth' or 'files'");
    if (synth) synth->validate();
    require(capacity > 0.0, ErrorKind::config, "capacity must be positive");
    require(pretrain.noise_p >= 0.0 && pretrain.noise_p <= 1.0, ErrorKind::config, "noise p must be in [0, 1]");
    pretrain.net.train.validate();
    clusterfit.kmeans.validate();
    if (baselines.distill) baselines.distill->validate();
    probe.config.validate();
    for (double lr : probe.lr_grid) require(lr > 0.0, ErrorKind::config, "probe lr grid values must be positive");
    if (synth) {
      for (const auto& t : targets) {
        require(t == "fine" || t == "coarse", ErrorKind::config, "unknown synthetic target '" + t + "'");
      }
    }
  }

  std::vector<std::size_t> pretrain_hidden() const {
    std::vector<std::size_t> out;
    for (auto w : pretrain.net.hidden) out.push_back(std::max<std::size_t>(1, std::size_t(std::lround(double(w) * capacity))));
    return out;
  }
};

namespace detail {

inline void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  require(j.is_object(), ErrorKind::config, where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* a : allowed) ok = ok || key == a;
    require(ok, ErrorKind::config, "unknown key '" + key + "' in " + where);
  }
}

template <typename T>
void read_opt(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

}  // namespace detail

inline json to_json(const SynthSpec& s) {
  return {{"num_coarse", s.num_coarse},
          {"fines_per_coarse", s.fines_per_coarse},
          {"d_input", s.d_input},
          {"noise_scale", s.noise_scale},
          {"inter_coarse_sep", s.inter_coarse_sep},
          {"intra_coarse_sep", s.intra_coarse_sep},
          {"n_pretrain", s.n_pretrain},
          {"n_clusterfit", s.n_clusterfit},
          {"n_target_train", s.n_target_train},
          {"n_target_eval", s.n_target_eval},
          {"seed", s.seed}};
}

inline SynthSpec synth_from_json(const json& j) {
  detail::check_keys(j, {"num_coarse", "fines_per_coarse", "d_input", "noise_scale", "inter_coarse_sep",
                         "intra_coarse_sep", "n_pretrain", "n_clusterfit", "n_target_train", "n_target_eval", "seed"},
                     "synth");
  SynthSpec s;
  detail::read_opt(j, "num_coarse", s.num_coarse);
  detail::read_opt(j, "fines_per_coarse", s.fines_per_coarse);
  detail::read_opt(j, "d_input", s.d_input);
  detail::read_opt(j, "noise_scale", s.noise_scale);
  detail::read_opt(j, "inter_coarse_sep", s.inter_coarse_sep);
  detail::read_opt(j, "intra_coarse_sep", s.intra_coarse_sep);
  detail::read_opt(j, "n_pretrain", s.n_pretrain);
  detail::read_opt(j, "n_clusterfit", s.n_clusterfit);
  detail::read_opt(j, "n_target_train", s.n_target_train);
  detail::read_opt(j, "n_target_eval", s.n_target_eval);
  detail::read_opt(j, "seed", s.seed);
  s.validate();
  return s;
}

inline json to_json(const TrainConfig& t) {
  return {{"epochs", t.epochs},
          {"batch_size", t.batch_size},
          {"lr0", t.lr0},
          {"lr_decay_factor", t.schedule.factor},
          {"lr_decays", t.schedule.drops},
          {"momentum", t.momentum},
          {"weight_decay", t.weight_decay},
          {"seed", t.seed}};
}

inline TrainConfig train_from_json(const json& j) {
  detail::check_keys(j, {"epochs", "batch_size", "lr0", "lr_decay_factor", "lr_decays", "momentum", "weight_decay", "seed"},
                     "train");
  TrainConfig t;
  detail::read_opt(j, "epochs", t.epochs);
  detail::read_opt(j, "batch_size", t.batch_size);
  detail::read_opt(j, "lr0", t.lr0);
  detail::read_opt(j, "lr_decay_factor", t.schedule.factor);
  detail::read_opt(j, "lr_decays", t.schedule.drops);
  detail::read_opt(j, "momentum", t.momentum);
  detail::read_opt(j, "weight_decay", t.weight_decay);
  detail::read_opt(j, "seed", t.seed);
  t.validate();
  return t;
}

inline json to_json(const NetConfig& n) { return {{"hidden", n.hidden}, {"train", to_json(n.train)}}; }

inline NetConfig net_from_json(const json& j, const std::string& where) {
  detail::check_keys(j, {"hidden", "train"}, where);
  NetConfig n;
  detail::read_opt(j, "hidden", n.hidden);
  if (j.contains("train")) n.train = train_from_json(j.at("train"));
  return n;
}

inline std::string to_string(InitMethod m) { return m == InitMethod::random_points ? "random" : "kpp"; }

inline InitMethod parse_init(const std::string& s) {
  if (s == "kpp" || s == "kmeans++") return InitMethod::kmeans_plus_plus;
  if (s == "random" || s == "random-points") return InitMethod::random_points;
  fail(ErrorKind::config, "unknown k-means init '" + s + "'");
}

inline json to_json(const KMeansConfig& k) {
  return {{"k", k.k},
          {"init", to_string(k.init)},
          {"stage1_fraction", k.stage1_fraction},
          {"stage1_iters", k.stage1_iters},
          {"stage2_iters", k.stage2_iters},
          {"seed", k.seed},
          {"tol", k.tol},
          {"empty_cluster_policy", "respawn-farthest"}};
}

inline KMeansConfig kmeans_from_json(const json& j) {
  detail::check_keys(j, {"k", "init", "stage1_fraction", "stage1_iters", "stage2_iters", "seed", "tol",
                         "empty_cluster_policy", "threads"},
                     "kmeans");
  KMeansConfig k;
  detail::read_opt(j, "k", k.k);
  if (j.contains("init")) k.init = parse_init(j.at("init").get<std::string>());
  detail::read_opt(j, "stage1_fraction", k.stage1_fraction);
  detail::read_opt(j, "stage1_iters", k.stage1_iters);
  detail::read_opt(j, "stage2_iters", k.stage2_iters);
  detail::read_opt(j, "seed", k.seed);
  detail::read_opt(j, "tol", k.tol);
  detail::read_opt(j, "threads", k.threads);
  if (j.contains("empty_cluster_policy")) {
    require(j.at("empty_cluster_policy") == "respawn-farthest", ErrorKind::config,
            "only the respawn-farthest empty cluster policy is supported");
  }
  k.validate();
  return k;
}

inline json to_json(const DistillConfig& d) { return {{"T", d.temperature}, {"alpha", d.alpha}}; }

inline DistillConfig distill_from_json(const json& j) {
  detail::check_keys(j, {"T", "alpha"}, "distill");
  DistillConfig d;
  detail::read_opt(j, "T", d.temperature);
  detail::read_opt(j, "alpha", d.alpha);
  d.validate();
  return d;
}

inline json to_json(const ProbeConfig& p) {
  return {{"epochs", p.epochs},     {"batch_size", p.batch_size},     {"lr0", p.lr0},
          {"momentum", p.momentum}, {"weight_decay", p.weight_decay}, {"seed", p.seed}};
}

inline ProbeConfig probe_config_from_json(const json& j) {
  ProbeConfig p;
  detail::read_opt(j, "epochs", p.epochs);
  detail::read_opt(j, "batch_size", p.batch_size);
  detail::read_opt(j, "lr0", p.lr0);
  detail::read_opt(j, "momentum", p.momentum);
  detail::read_opt(j, "weight_decay", p.weight_decay);
  detail::read_opt(j, "seed", p.seed);
  p.validate();
  return p;
}

inline json to_json(const ExperimentConfig& c) {
  json j;
  if (c.synth) j["synth"] = to_json(*c.synth);
  if (c.files) {
    json t = json::array();
    for (const auto& target : c.files->targets) {
      t.push_back({{"name", target.name},
                   {"train_inputs", target.train_inputs},
                   {"train_labels", target.train_labels},
                   {"eval_inputs", target.eval_inputs},
                   {"eval_labels", target.eval_labels}});
    }
    j["files"] = {{"pretrain_inputs", c.files->pretrain_inputs},
                  {"pretrain_labels", c.files->pretrain_labels},
                  {"clusterfit_inputs", c.files->clusterfit_inputs},
                  {"clusterfit_labels", c.files->clusterfit_labels},
                  {"targets", t}};
  }
  j["pretrain"] = to_json(c.pretrain.net);
  j["pretrain"]["noise"] = {{"p", c.pretrain.noise_p}, {"seed", c.pretrain.noise_seed}};
  j["clusterfit"] = to_json(c.clusterfit.net);
  j["clusterfit"]["kmeans"] = to_json(c.clusterfit.kmeans);
  j["clusterfit"]["strategy"] = to_string(c.clusterfit.strategy);
  j["clusterfit"]["l2_normalize"] = c.clusterfit.l2_normalize;
  j["baselines"] = {{"npre", c.baselines.npre},
                    {"npre2x", c.baselines.npre2x},
                    {"distill", c.baselines.distill ? to_json(*c.baselines.distill) : json(nullptr)},
                    {"prototype", c.baselines.prototype}};
  j["probe"] = to_json(c.probe.config);
  j["probe"]["lr_grid"] = c.probe.lr_grid;
  j["probe"]["standardize"] = c.probe.standardize;
  j["m"] = c.m ? json(*c.m) : json(nullptr);
  j["capacity"] = c.capacity;
  j["seed"] = c.seed;
  j["targets"] = c.targets;
  j["threads"] = c.threads;
  if (!c.output.empty()) j["output"] = c.output;
  return j;
}

inline ExperimentConfig experiment_from_json(const json& j) {
  detail::check_keys(j, {"synth", "files", "pretrain", "clusterfit", "baselines", "probe", "m", "capacity", "seed",
                         "targets", "threads", "output"},
                     "config");
  ExperimentConfig c;
  if (j.contains("synth")) c.synth = synth_from_json(j.at("synth"));
  if (j.contains("files")) {
    const auto& f = j.at("files");
    detail::check_keys(f, {"pretrain_inputs", "pretrain_labels", "clusterfit_inputs", "clusterfit_labels", "targets"},
                       "files");
    FileData fd;
    fd.pretrain_inputs = f.at("pretrain_inputs").get<std::string>();
    fd.pretrain_labels = f.at("pretrain_labels").get<std::string>();
    detail::read_opt(f, "clusterfit_inputs", fd.clusterfit_inputs);
    detail::read_opt(f, "clusterfit_labels", fd.clusterfit_labels);
    for (const auto& t : f.at("targets")) {
      detail::check_keys(t, {"name", "train_inputs", "train_labels", "eval_inputs", "eval_labels"}, "files.targets[]");
      fd.targets.push_back({t.at("name").get<std::string>(), t.at("train_inputs").get<std::string>(),
                            t.at("train_labels").get<std::string>(), t.at("eval_inputs").get<std::string>(),
                            t.at("eval_labels").get<std::string>()});
    }
    c.files = std::move(fd);
  }
  if (j.contains("pretrain")) {
    json p = j.at("pretrain");
    if (p.contains("noise")) {
      const auto& n = p.at("noise");
      detail::check_keys(n, {"p", "seed"}, "pretrain.noise");
      detail::read_opt(n, "p", c.pretrain.noise_p);
      detail::read_opt(n, "seed", c.pretrain.noise_seed);
      p.erase("noise");
    }
    c.pretrain.net = net_from_json(p, "pretrain");
  }
  if (j.contains("clusterfit")) {
    json cf = j.at("clusterfit");
    if (cf.contains("kmeans")) c.clusterfit.kmeans = kmeans_from_json(cf.at("kmeans"));
    if (cf.contains("strategy")) c.clusterfit.strategy = parse_strategy(cf.at("strategy").get<std::string>());
    detail::read_opt(cf, "l2_normalize", c.clusterfit.l2_normalize);
    cf.erase("kmeans");
    cf.erase("strategy");
    cf.erase("l2_normalize");
    c.clusterfit.net = net_from_json(cf, "clusterfit");
  }
  if (j.contains("baselines")) {
    const auto& b = j.at("baselines");
    detail::check_keys(b, {"npre", "npre2x", "distill", "prototype"}, "baselines");
    detail::read_opt(b, "npre", c.baselines.npre);
    detail::read_opt(b, "npre2x", c.baselines.npre2x);
    detail::read_opt(b, "prototype", c.baselines.prototype);
    if (b.contains("distill") && !b.at("distill").is_null()) {
      const auto& d = b.at("distill");
      if (d.is_boolean()) {
        if (d.get<bool>()) c.baselines.distill = DistillConfig{};
      } else {
        c.baselines.distill = distill_from_json(d);
      }
    }
  }
  if (j.contains("probe")) {
    json p = j.at("probe");
    detail::check_keys(p, {"epochs", "batch_size", "lr0", "momentum", "weight_decay", "seed", "lr_grid", "standardize"},
                       "probe");
    detail::read_opt(p, "lr_grid", c.probe.lr_grid);
    detail::read_opt(p, "standardize", c.probe.standardize);
    c.probe.config = probe_config_from_json(p);
  }
  if (j.contains("m") && !j.at("m").is_null()) c.m = j.at("m").get<std::size_t>();
  detail::read_opt(j, "capacity", c.capacity);
  detail::read_opt(j, "seed", c.seed);
  detail::read_opt(j, "targets", c.targets);
  detail::read_opt(j, "threads", c.threads);
  detail::read_opt(j, "output", c.output);
  c.clusterfit.kmeans.threads = c.threads;
  c.validate();
  return c;
}

}  // namespace clusterfit
