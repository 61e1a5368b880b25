// clusterfit: command-line front end for the ClusterFit pipeline.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <iostream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "clusterfit/clusterfit.hpp"

namespace fs = std::filesystem;
using namespace clusterfit;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorKind::config, path.string() + ": " + e.what());
  }
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path);
  require(static_cast<bool>(out), ErrorKind::io, "cannot write " + path.string());
  out << j.dump(2) << '\n';
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::string item;
  std::stringstream ss(s);
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// "0..4" or "1,3,7"
std::vector<std::uint64_t> parse_seeds(const std::string& s) {
  std::vector<std::uint64_t> out;
  if (auto dots = s.find(".."); dots != std::string::npos) {
    const auto lo = std::stoull(s.substr(0, dots));
    const auto hi = std::stoull(s.substr(dots + 2));
    require(lo <= hi, ErrorKind::config, "seed range " + s + " is empty");
    for (auto v = lo; v <= hi; ++v) out.push_back(v);
  } else {
    for (const auto& item : split_list(s)) out.push_back(std::stoull(item));
  }
  require(!out.empty(), ErrorKind::config, "no seeds given");
  return out;
}

std::vector<std::size_t> parse_widths(const std::string& s) {
  std::vector<std::size_t> out;
  for (const auto& item : split_list(s)) out.push_back(std::stoul(item));
  return out;
}

fs::path labels_beside(const fs::path& features) {
  fs::path p = features;
  p.replace_extension(".cfl");
  return p;
}

int run_stage(const std::string& stage, const std::function<void()>& fn) {
  try {
    fn();
    return 0;
  } catch (const StageError& e) {
    std::cerr << "clusterfit: " << e.what() << '\n';
  } catch (const std::exception& e) {
    std::cerr << "clusterfit: stage '" << stage << "': " << e.what() << '\n';
  }
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ClusterFit: cluster pre-trained features, re-fit on pseudo-labels, probe transfer quality"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Suppress progress and warnings");

  // synth
  auto* synth = app.add_subcommand("synth", "Generate a synthetic hierarchical dataset");
  std::string synth_spec, synth_out;
  std::uint64_t synth_seed = 0;
  synth->add_option("--spec", synth_spec, "SynthSpec JSON (a full experiment config with a 'synth' block also works)")
      ->required();
  synth->add_option("--out", synth_out, "Output directory")->required();
  synth->add_option("--seed", synth_seed, "Run seed mixed into the spec seed");

  // cluster
  auto* cluster = app.add_subcommand("cluster", "k-means on a feature file");
  std::string cl_features, cl_out, cl_labels_out, cl_init = "kpp";
  KMeansConfig cl_cfg;
  bool cl_l2 = false;
  cluster->add_option("--features", cl_features, "CFF1 features")->required();
  cluster->add_option("--k", cl_cfg.k, "Number of clusters")->required();
  cluster->add_option("--seed", cl_cfg.seed, "Seed");
  cluster->add_option("--out", cl_out, "Centroids (CFF1 + .json sidecar)")->required();
  cluster->add_option("--labels-out", cl_labels_out, "Also write cluster assignments as CFL1");
  cluster->add_option("--init", cl_init, "kpp or random");
  cluster->add_option("--stage1-fraction", cl_cfg.stage1_fraction, "Subsample fraction for stage 1");
  cluster->add_option("--stage1-iters", cl_cfg.stage1_iters, "Stage-1 iterations");
  cluster->add_option("--stage2-iters", cl_cfg.stage2_iters, "Stage-2 iterations on all rows");
  cluster->add_option("--tol", cl_cfg.tol, "Relative inertia improvement stopping threshold");
  cluster->add_option("--threads", cl_cfg.threads, "Worker threads (0 = all cores)");
  cluster->add_flag("--l2", cl_l2, "L2-normalize features first");

  // relabel
  auto* relabel = app.add_subcommand("relabel", "Produce pseudo-labels");
  std::string rl_strategy = "unsupervised", rl_features, rl_labels, rl_out, rl_plan_out;
  KMeansConfig rl_cfg;
  relabel->add_option("--strategy", rl_strategy, "unsupervised | per-label | prototype")
      ->check(CLI::IsMember({"unsupervised", "per-label", "prototype"}));
  relabel->add_option("--features", rl_features, "CFF1 features of D_cf")->required();
  relabel->add_option("--labels", rl_labels, "CFL1 labels of D_cf (per-label, prototype)");
  relabel->add_option("--k", rl_cfg.k, "Total cluster count (unsupervised, per-label)");
  relabel->add_option("--seed", rl_cfg.seed, "Seed");
  relabel->add_option("--stage1-fraction", rl_cfg.stage1_fraction, "Subsample fraction for stage 1");
  relabel->add_option("--threads", rl_cfg.threads, "Worker threads");
  relabel->add_option("--out", rl_out, "Output CFL1")->required();
  relabel->add_option("--plan-out", rl_plan_out, "Per-label plan JSON");

  // inject-noise
  auto* noise = app.add_subcommand("inject-noise", "Uniform label noise");
  std::string nz_labels, nz_out;
  NoiseSpec nz_spec;
  noise->add_option("--labels", nz_labels, "Input CFL1")->required();
  noise->add_option("--p", nz_spec.p, "Flip probability")->required()->check(CLI::Range(0.0, 1.0));
  noise->add_option("--seed", nz_spec.seed, "Seed")->required();
  noise->add_option("--out", nz_out, "Output CFL1 (default: <labels>.noisy.cfl)");

  // fit
  auto* fit = app.add_subcommand("fit", "Train a network from scratch");
  std::string fit_inputs, fit_train, fit_out, fit_hidden = "128,64", fit_teacher;
  std::vector<std::string> fit_labels;
  double fit_T = 20.0, fit_alpha = 0.75;
  fit->add_option("--inputs", fit_inputs, "CFF1 inputs")->required();
  fit->add_option("--labels", fit_labels, "CFL1 labels; two or more train a multi-task model")->required();
  fit->add_option("--train", fit_train, "TrainConfig JSON");
  fit->add_option("--hidden", fit_hidden, "Hidden widths, comma separated");
  fit->add_option("--teacher", fit_teacher, "Teacher checkpoint: enables distillation");
  fit->add_option("--T", fit_T, "Distillation temperature");
  fit->add_option("--alpha", fit_alpha, "Distillation soft-target weight");
  fit->add_option("--out", fit_out, "Checkpoint path")->required();

  // extract
  auto* extract = app.add_subcommand("extract", "Penultimate-layer features of a checkpoint");
  std::string ex_model, ex_inputs, ex_out;
  extract->add_option("--model", ex_model, "Checkpoint")->required();
  extract->add_option("--inputs", ex_inputs, "CFF1 inputs")->required();
  extract->add_option("--out", ex_out, "Output CFF1")->required();

  // probe
  auto* probe = app.add_subcommand("probe", "Linear probe on a checkpoint's penultimate features");
  std::string pr_model, pr_train, pr_eval, pr_train_labels, pr_eval_labels, pr_out, pr_grid;
  ProbeConfig pr_cfg;
  bool pr_raw = false;
  probe->add_option("--model", pr_model, "Checkpoint (omit to probe the inputs directly)");
  probe->add_option("--target-train", pr_train, "CFF1 target train inputs")->required();
  probe->add_option("--target-eval", pr_eval, "CFF1 target eval inputs")->required();
  probe->add_option("--target-train-labels", pr_train_labels, "Default: beside --target-train with .cfl");
  probe->add_option("--target-eval-labels", pr_eval_labels, "Default: beside --target-eval with .cfl");
  probe->add_option("--epochs", pr_cfg.epochs, "Probe epochs");
  probe->add_option("--lr", pr_cfg.lr0, "Initial learning rate");
  probe->add_option("--lr-grid", pr_grid, "Comma-separated learning rates; best eval top-1 is reported");
  probe->add_option("--seed", pr_cfg.seed, "Seed");
  probe->add_flag("--raw", pr_raw, "Do not standardize features");
  probe->add_option("--out", pr_out, "ProbeResult JSON");

  // pipeline
  auto* pipeline = app.add_subcommand("pipeline", "Run the full ClusterFit pipeline and baselines");
  std::string pl_config, pl_out;
  pipeline->add_option("--config", pl_config, "ExperimentConfig JSON")->required();
  pipeline->add_option("--out", pl_out, "Results CSV");

  // sweep
  auto* sweep_cmd = app.add_subcommand("sweep", "Sweep one axis over values and seeds");
  std::string sw_config, sw_axis, sw_values, sw_seeds = "0", sw_out;
  unsigned sw_parallel = 1;
  sweep_cmd->add_option("--config", sw_config, "ExperimentConfig JSON")->required();
  sweep_cmd->add_option("--axis", sw_axis, "K | p | m | capacity | strategy")
      ->required()
      ->check(CLI::IsMember({"K", "p", "m", "capacity", "strategy"}));
  sweep_cmd->add_option("--values", sw_values, "Comma-separated axis values")->required();
  sweep_cmd->add_option("--seeds", sw_seeds, "Seed range a..b or list");
  sweep_cmd->add_option("--parallel", sw_parallel, "Seeds run concurrently");
  sweep_cmd->add_option("--out", sw_out, "Results CSV");

  CLI11_PARSE(app, argc, argv);
  if (quiet) warnings_enabled() = false;

  if (*synth) {
    return run_stage("synth", [&] {
      const json j = read_json(synth_spec);
      SynthSpec spec = synth_from_json(j.contains("synth") ? j.at("synth") : j);
      spec.seed = mix_seed(spec.seed, synth_seed);
      const auto data = synth_generate(spec);
      fs::create_directories(synth_out);
      const fs::path dir(synth_out);
      auto dump = [&](const std::string& name, const SynthSplit& s, bool coarse) {
        write_features(dir / (name + ".cff"), s.inputs);
        write_labels(dir / (name + ".cfl"), coarse ? s.coarse : s.fine);
        write_labels(dir / (name + (coarse ? ".fine.cfl" : ".coarse.cfl")), coarse ? s.fine : s.coarse);
      };
      dump("pretrain", data.pretrain, true);
      if (data.clusterfit) dump("clusterfit", *data.clusterfit, true);
      dump("target_train", data.target_train, false);
      dump("target_eval", data.target_eval, false);
      const double reference = nearest_center_accuracy(data, data.target_eval);
      write_json(dir / "manifest.json", {{"spec", to_json(spec)},
                                         {"nearest_center_top1", reference},
                                         {"aliased_clusterfit", !data.clusterfit.has_value()}});
      if (!quiet) std::cout << "nearest-true-center fine top1 on target_eval: " << reference << '\n';
    });
  }

  if (*cluster) {
    return run_stage("cluster", [&] {
      cl_cfg.init = parse_init(cl_init);
      FeatureMatrix f = read_features(cl_features);
      if (cl_l2) f = l2_normalize(f);
      KMeansTrace trace;
      const auto c = kmeans_fit(f, cl_cfg, &trace);
      write_centroids(cl_out, c, cl_cfg.seed);
      if (!cl_labels_out.empty()) {
        auto a = kmeans_assign(f, c, cl_cfg.threads);
        write_labels(cl_labels_out, LabelVector(c.k, std::move(a.index)));
      }
      if (!quiet) std::cout << "k=" << c.k << " inertia=" << c.inertia << " iterations=" << c.iterations_run << '\n';
    });
  }

  if (*relabel) {
    return run_stage("relabel", [&] {
      const FeatureMatrix f = read_features(rl_features);
      const auto strategy = parse_strategy(rl_strategy);
      LabelVector out;
      if (strategy == RelabelStrategy::unsupervised) {
        out = pseudo_labels(f, rl_cfg);
      } else {
        require(!rl_labels.empty(), ErrorKind::config, "--labels is required for " + rl_strategy);
        const LabelVector labels = read_labels(rl_labels);
        if (strategy == RelabelStrategy::prototype) {
          out = prototype_labels(f, labels, rl_cfg.threads);
        } else {
          const auto plan = per_label_plan(labels, rl_cfg.k);
          if (!rl_plan_out.empty()) write_plan(rl_plan_out, plan);
          out = per_label_pseudo_labels(f, labels, plan, rl_cfg);
        }
      }
      write_labels(rl_out, out);
      if (!quiet) std::cout << "wrote " << out.size() << " labels over " << out.num_classes() << " classes\n";
    });
  }

  if (*noise) {
    return run_stage("inject-noise", [&] {
      const auto labels = read_labels(nz_labels);
      const auto noisy = inject_noise(labels, nz_spec);
      std::size_t flipped = 0;
      for (std::size_t i = 0; i < labels.size(); ++i) flipped += labels[i] != noisy[i];
      const std::string out = nz_out.empty() ? fs::path(nz_labels).replace_extension(".noisy.cfl").string() : nz_out;
      write_labels(out, noisy);
      if (!quiet) std::cout << "flipped " << flipped << " of " << labels.size() << " labels -> " << out << '\n';
    });
  }

  if (*fit) {
    return run_stage("fit", [&] {
      const FeatureMatrix inputs = read_features(fit_inputs);
      std::vector<LabelVector> labels;
      for (const auto& path : fit_labels) labels.push_back(read_labels(path));
      TrainConfig cfg = fit_train.empty() ? TrainConfig{} : train_from_json(read_json(fit_train));
      MlpShape shape{inputs.cols(), parse_widths(fit_hidden), {}};
      for (const auto& l : labels) shape.heads.push_back(l.num_classes());
      TrainHistory history;
      MlpModel<float> model;
      if (!fit_teacher.empty()) {
        require(labels.size() == 1, ErrorKind::config, "distillation takes exactly one label set");
        auto teacher = std::make_shared<const MlpModel<float>>(load_model<float>(fit_teacher));
        model = train_from_scratch<float>(shape, inputs, labels, cfg,
                                          DistillLoss<float>{DistillConfig{fit_T, fit_alpha}, teacher}, &history);
      } else if (labels.size() > 1) {
        model = train_from_scratch<float>(shape, inputs, labels, cfg, MultiTaskLoss{}, &history);
      } else {
        model = train_from_scratch<float>(shape, inputs, labels, cfg, CrossEntropyLoss{}, &history);
      }
      save_model(fit_out, model);
      if (!quiet) {
        for (std::size_t e = 0; e < history.epoch_loss.size(); ++e) {
          std::cout << "epoch " << e + 1 << " loss " << history.epoch_loss[e] << '\n';
        }
      }
    });
  }

  if (*extract) {
    return run_stage("extract", [&] {
      const auto model = load_model<float>(ex_model);
      write_features(ex_out, extract_features(model, read_features(ex_inputs)));
    });
  }

  if (*probe) {
    return run_stage("probe", [&] {
      FeatureMatrix train = read_features(pr_train);
      FeatureMatrix eval = read_features(pr_eval);
      const auto train_labels = read_labels(pr_train_labels.empty() ? labels_beside(pr_train) : fs::path(pr_train_labels));
      const auto eval_labels = read_labels(pr_eval_labels.empty() ? labels_beside(pr_eval) : fs::path(pr_eval_labels));
      if (!pr_model.empty()) {
        const auto model = load_model<float>(pr_model);
        train = extract_features(model, train);
        eval = extract_features(model, eval);
      }
      if (!pr_raw) {
        const auto s = Standardizer::fit(train);
        train = s.apply(train);
        eval = s.apply(eval);
      }
      std::vector<double> grid;
      for (const auto& v : split_list(pr_grid)) grid.push_back(std::stod(v));
      double best_lr = pr_cfg.lr0;
      const auto result = probe_sweep(train, train_labels, eval, eval_labels, pr_cfg, grid, &best_lr);
      json j = to_json(result);
      j["lr"] = best_lr;
      if (!pr_out.empty()) write_json(pr_out, j);
      if (!quiet) std::cout << "top1=" << result.top1 << " train_top1=" << result.train_top1 << " lr=" << best_lr << '\n';
    });
  }

  if (*pipeline) {
    std::vector<ResultRow> rows;
    ExperimentConfig cfg;
    std::string out;
    const int status = run_stage("config", [&] {
      cfg = experiment_from_json(read_json(pl_config));
      out = pl_out.empty() ? cfg.output : pl_out;
    });
    if (status != 0) return status;
    Harness harness;
    if (!quiet) harness.log = [](const std::string& s) { std::clog << s << '\n'; };
    const int run_status = run_stage("pipeline", [&] { harness.run_into(cfg, rows); });
    ResultsTable table{to_json(cfg), rows};
    if (!out.empty()) {
      table.write(out);  // partial rows are flushed on failure as well
    } else {
      std::cout << table.to_csv();
    }
    return run_status;
  }

  if (*sweep_cmd) {
    return run_stage("sweep", [&] {
      const auto cfg = experiment_from_json(read_json(sw_config));
      Harness harness;
      if (!quiet) harness.log = [](const std::string& s) { std::clog << s << '\n'; };
      const auto table = harness.sweep(cfg, sw_axis, split_list(sw_values), parse_seeds(sw_seeds), sw_parallel);
      const std::string out = sw_out.empty() ? cfg.output : sw_out;
      if (!out.empty()) {
        table.write(out);
      } else {
        std::cout << table.to_csv();
      }
    });
  }
  return 0;
}
