// Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
// criterion fails. Experiment configs are read from the configs/ directory
// given as argv[1].

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <string>

#include "clusterfit/clusterfit.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"

using namespace clusterfit;
using Clock = std::chrono::steady_clock;

namespace {

int failures = 0;

void report(bool ok, const std::string& name, const std::string& detail) {
  std::printf("%s  %-34s %s\n", ok ? "PASS" : "FAIL", name.c_str(), detail.c_str());
  std::fflush(stdout);
  if (!ok) ++failures;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path);
  require(static_cast<bool>(in), ErrorKind::io, "cannot open " + path);
  return experiment_from_json(json::parse(in));
}

// mean over seeds of top1 for (method, target, axis value)
using Means = std::map<std::string, double>;

Means mean_by(const ResultsTable& t, const std::string& method, auto key_of) {
  std::map<std::string, std::pair<double, int>> acc;
  for (const auto& r : t.rows) {
    if (r.method != method || r.target != "fine") continue;
    auto& [sum, n] = acc[key_of(r)];
    sum += r.top1;
    ++n;
  }
  Means out;
  for (const auto& [k, v] : acc) out[k] = v.first / v.second;
  return out;
}

FeatureMatrix blobs(std::size_t n, std::size_t d, std::size_t k, std::uint64_t seed) {
  std::mt19937_64 gen(seed);
  std::normal_distribution<double> nd(0.0, 1.0);
  std::vector<double> centers(k * d);
  for (auto& v : centers) v = 3.0 * nd(gen);
  std::vector<float> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = gen() % k;
    for (std::size_t j = 0; j < d; ++j) x[i * d + j] = static_cast<float>(centers[c * d + j] + nd(gen));
  }
  return FeatureMatrix(n, d, std::move(x));
}

void kmeans_criteria() {
  const auto t0 = Clock::now();

  // (a) per-stage inertia non-increasing, 100 random instances
  {
    std::mt19937_64 gen(2024);
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
      const std::size_t n = 200 + gen() % 2000;
      const std::size_t d = 2 + gen() % 15;
      const std::size_t k = 2 + gen() % 30;
      KMeansConfig cfg;
      cfg.k = k;
      cfg.seed = gen();
      cfg.tol = 0.0;
      cfg.init = trial % 2 ? InitMethod::random_points : InitMethod::kmeans_plus_plus;
      KMeansTrace trace;
      kmeans_fit(blobs(n, d, 1 + gen() % 20, gen()), cfg, &trace);
      for (const auto* stage : {&trace.stage1_inertia, &trace.stage2_inertia}) {
        for (std::size_t t = 1; t < stage->size(); ++t) worst = std::max(worst, (*stage)[t] / (*stage)[t - 1] - 1.0);
      }
    }
    report(worst <= 1e-12, "kmeans.monotone_inertia", fmt("max relative increase %.3g (tol 1e-12)", worst));
  }

  // (b) converged centers are the means of their assigned points
  {
    double worst = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto x = blobs(3000, 8, 10, seed);
      KMeansConfig cfg;
      cfg.k = 10;
      cfg.seed = seed;
      cfg.tol = 0.0;
      cfg.stage2_iters = 300;
      const auto c = kmeans_fit(x, cfg);
      const auto a = kmeans_assign(x, c);
      std::vector<double> sum(10 * 8, 0.0);
      std::vector<std::size_t> count(10, 0);
      for (std::size_t i = 0; i < x.rows(); ++i) {
        ++count[a.index[i]];
        for (std::size_t j = 0; j < 8; ++j) sum[a.index[i] * 8 + j] += x(i, j);
      }
      for (std::size_t q = 0; q < 10; ++q) {
        for (std::size_t j = 0; j < 8; ++j) {
          const double mean = count[q] ? sum[q * 8 + j] / double(count[q]) : INFINITY;
          worst = std::max(worst, std::abs(c.centers[q * 8 + j] - mean));
        }
      }
    }
    report(worst <= 1e-9, "kmeans.fixed_point", fmt("max |center - mean| %.3g (tol 1e-9)", worst));
  }

  // (c) four-point example against the exhaustive partition oracle
  {
    const FeatureMatrix x(4, 2, {0, 0, 0, 1, 10, 0, 10, 1});
    KMeansConfig cfg;
    cfg.k = 2;
    const auto c = kmeans_fit(x, cfg);
    std::vector<std::pair<double, double>> centers{{c.centers[0], c.centers[1]}, {c.centers[2], c.centers[3]}};
    std::sort(centers.begin(), centers.end());
    const double oracle_inertia = oracle::best_partition(x, 2).inertia;
    const bool ok = centers[0] == std::make_pair(0.0, 0.5) && centers[1] == std::make_pair(10.0, 0.5) &&
                    c.inertia == 1.0 && oracle_inertia == 1.0;
    report(ok, "kmeans.four_point_example",
           fmt("centers (%g,%g) (%g,%g), inertia %.17g, oracle %.17g", centers[0].first, centers[0].second,
               centers[1].first, centers[1].second, c.inertia, oracle_inertia));
  }

  // (d) bit-identical across thread counts
  {
    const auto x = blobs(20000, 32, 100, 5);
    KMeansConfig cfg;
    cfg.k = 400;
    cfg.seed = 9;
    cfg.threads = 1;
    const auto ref = kmeans_fit(x, cfg);
    bool same = true;
    for (unsigned threads : {2u, 4u, 7u}) {
      cfg.threads = threads;
      const auto c = kmeans_fit(x, cfg);
      same = same && c.centers.size() == ref.centers.size() &&
             std::memcmp(c.centers.data(), ref.centers.data(), ref.centers.size() * sizeof(double)) == 0 &&
             std::memcmp(&c.inertia, &ref.inertia, sizeof(double)) == 0;
    }
    report(same, "kmeans.thread_determinism", "threads {1,2,4,7}, n=20000, d=32, K=400");
  }

  const double elapsed = seconds_since(t0);
  report(elapsed < 60.0, "kmeans.runtime", fmt("%.1f s (limit 60 s)", elapsed));
}

void noise_criteria() {
  std::mt19937_64 gen(7);
  std::vector<std::uint32_t> y(10000);
  for (auto& l : y) l = static_cast<std::uint32_t>(gen() % 20);
  const LabelVector labels(20, y);

  const auto half = inject_noise(labels, {0.5, 1});
  const double frac = double(oracle::count_mismatches(labels.labels(), half.labels())) / 10000.0;
  report(frac >= 0.48 && frac <= 0.52, "noise.flip_fraction", fmt("p=0.5, n=1e4: %.4f (bounds [0.48, 0.52])", frac));

  // a flip never lands on the original class: count positions whose draw
  // said "flip" but whose label is unchanged
  std::size_t self = 0;
  for (double p : {0.1, 0.5, 0.9, 1.0}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const auto noisy = inject_noise(labels, {p, seed});
      for (std::size_t i = 0; i < labels.size(); ++i) {
        if (counter_uniform(seed, 0, i) < p && noisy[i] == labels[i]) ++self;
      }
    }
  }
  report(self == 0, "noise.never_self", fmt("%zu self-flips over 20 draws", self));

  report(inject_noise(labels, {0.0, 3}) == labels, "noise.p0_identity", "p=0 output equals input");
  const auto all = inject_noise(labels, {1.0, 3});
  const auto changed = oracle::count_mismatches(labels.labels(), all.labels());
  report(changed == labels.size(), "noise.p1_flips_all", fmt("%zu / %zu labels changed", changed, labels.size()));
}

void gradient_criteria() {
  for (auto v : {gradcheck::Variant::cross_entropy, gradcheck::Variant::distill, gradcheck::Variant::multitask}) {
    double worst = 0.0;
    for (std::uint64_t draw = 0; draw < 10; ++draw) worst = std::max(worst, gradcheck::max_error(v, 500 + draw));
    report(worst < 1e-4, "grad." + gradcheck::name(v), fmt("max relative error %.3g over 10 draws (tol 1e-4)", worst));
  }

  // distill with alpha = 0 reproduces the cross-entropy loss trajectory
  const auto x = oracle::gaussian_matrix(512, 8, 3);
  std::mt19937_64 gen(3);
  std::vector<std::uint32_t> y(512);
  for (auto& l : y) l = static_cast<std::uint32_t>(gen() % 4);
  const LabelVector labels[] = {LabelVector(4, y)};
  const MlpShape shape{8, {16}, {4}};
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.batch_size = 64;
  TrainHistory ce, distill;
  train_from_scratch<double>(shape, x, labels, cfg, CrossEntropyLoss{}, &ce);
  auto teacher = std::make_shared<const MlpModel<double>>(gradcheck::random_model(shape, gen));
  train_from_scratch<double>(shape, x, labels, cfg, DistillLoss<double>{{20.0, 0.0}, teacher}, &distill);
  double worst = ce.step_loss.size() == distill.step_loss.size() ? 0.0 : INFINITY;
  for (std::size_t s = 0; s < std::min(ce.step_loss.size(), distill.step_loss.size()); ++s) {
    worst = std::max(worst, std::abs(ce.step_loss[s] - distill.step_loss[s]));
  }
  report(worst <= 1e-12, "grad.distill_alpha0_trajectory",
         fmt("max |loss difference| %.3g over %zu steps (tol 1e-12)", worst, ce.step_loss.size()));
}

void probe_criteria() {
  {
    const auto [x, labels] = oracle::two_blobs(1000, 8, 1.0, 0.5, 11);
    std::vector<int> y;
    for (auto l : labels.labels()) y.push_back(l ? 1 : -1);
    const bool separable = oracle::perceptron_separable(x, y);
    ProbeConfig cfg;
    cfg.lr0 = 0.1;
    const auto r = probe_run(x, labels, x, labels, cfg);
    report(separable && r.train_top1 == 1.0, "probe.separable_blobs",
           fmt("perceptron certifies separable: %s, train top1 %.4f", separable ? "yes" : "no", r.train_top1));
  }
  {
    const std::size_t n = 5000;
    std::mt19937_64 gen(12);
    std::vector<std::uint32_t> y(n);
    for (auto& l : y) {
      const double u = std::uniform_real_distribution<double>(0, 1)(gen);
      l = u < 0.4 ? 2 : static_cast<std::uint32_t>(gen() % 5);
    }
    const LabelVector labels(5, y);
    const FeatureMatrix x(n, 6, std::vector<float>(n * 6, 0.7f));
    const auto r = probe_run(x, labels, x, labels, ProbeConfig{});
    const auto counts = labels.class_counts();
    const double majority = double(*std::max_element(counts.begin(), counts.end())) / double(n);
    report(std::abs(r.top1 - majority) <= 0.02, "probe.constant_features",
           fmt("top1 %.4f vs majority frequency %.4f (tol 0.02)", r.top1, majority));
  }
  {
    double worst = 0.0;
    for (std::size_t classes : {2u, 10u, 100u, 400u}) {
      const auto m = init_model<double>(MlpShape{32, {128, 64}, {classes}}, classes);
      const auto x = oracle::gaussian_matrix(64, 32, classes);
      std::vector<std::vector<std::uint32_t>> l(1, std::vector<std::uint32_t>(64));
      for (std::size_t i = 0; i < 64; ++i) l[0][i] = static_cast<std::uint32_t>(i % classes);
      const auto r = loss_and_grad<double>(m, to_matrix<double>(x), l, CrossEntropyLoss{});
      worst = std::max(worst, std::abs(r.loss - std::log(double(classes))));
    }
    report(worst <= 1e-6, "probe.zero_head_loss_lnC", fmt("max |CE - ln C| %.3g for C in {2,10,100,400}", worst));
  }
}

void prototype_criteria() {
  std::vector<float> v;
  std::vector<std::uint32_t> y;
  std::mt19937_64 gen(13);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (std::uint32_t c = 0; c < 20; ++c) {
    std::vector<float> point(16);
    for (auto& p : point) p = static_cast<float>(5.0 * nd(gen));
    for (int r = 0; r < 25; ++r) {
      v.insert(v.end(), point.begin(), point.end());
      y.push_back(c);
    }
  }
  const LabelVector labels(20, y);
  const auto out = prototype_labels(FeatureMatrix(500, 16, std::move(v)), labels);
  report(out == labels, "prototype.zero_variance_identity", fmt("%zu mismatches", oracle::count_mismatches(out.labels(), labels.labels())));

  SynthSpec spec;
  spec.n_pretrain = 5000;
  const auto data = synth_generate(spec);
  const auto proto = prototype_labels(data.pretrain.inputs, data.pretrain.coarse);
  report(proto.num_classes() == spec.num_coarse, "prototype.label_space_size",
         fmt("%zu prototypes for %zu classes", proto.num_classes(), spec.num_coarse));
}

void experiment_criteria(const std::string& configs) {
  Harness harness;
  const std::vector<std::uint64_t> seeds{0, 1, 2, 3, 4};

  // Control experiment: p sweep with N_pre, ClusterFit and distillation.
  const auto t0 = Clock::now();
  const auto control = harness.sweep(load_config(configs + "/control.json"), "p", {"0", "0.25", "0.5", "0.75"}, seeds);
  const double control_time = seconds_since(t0);
  auto by_p = [](const ResultRow& r) { return fmt("%.2f", r.p); };
  const auto npre = mean_by(control, "npre", by_p);
  const auto cf = mean_by(control, "cf", by_p);
  const auto distill = mean_by(control, "distill", by_p);
  std::string gaps;
  std::vector<double> gap;
  for (const char* p : {"0.00", "0.25", "0.50", "0.75"}) {
    gap.push_back(cf.at(p) - npre.at(p));
    gaps += fmt("%s%s:%+.4f", gaps.empty() ? "" : " ", p, gap.back());
  }
  report(gap[3] >= 0.03, "control.cf_beats_npre_at_p0.75",
         fmt("N_cf %.4f vs N_pre %.4f, gap %+.4f (need >= 0.03)", cf.at("0.75"), npre.at("0.75"), gap[3]));
  report(std::is_sorted(gap.begin(), gap.end()), "control.gap_nondecreasing_in_p", gaps);
  const double distill_gap = distill.at("0.75") - npre.at("0.75");
  report(distill_gap < gap[3], "control.distill_gap_below_cf",
         fmt("distill gap %+.4f vs cf gap %+.4f at p=0.75", distill_gap, gap[3]));
  report(control_time < 600.0, "control.runtime", fmt("%.1f s (limit 600 s)", control_time));

  // K trend at p = 0.5, K in {C, 2C, 4C} with C = 100 fine classes.
  const auto p050 = load_config(configs + "/p050.json");
  const auto ktable = harness.sweep(p050, "K", {"100", "200", "400"}, seeds);
  const auto by_k = mean_by(ktable, "cf", [](const ResultRow& r) { return std::to_string(*r.k); });
  const double k1 = by_k.at("100"), k2 = by_k.at("200"), k4 = by_k.at("400");
  report(k1 <= k2 && k2 <= k4, "ktrend.nondecreasing", fmt("K=100 %.4f, K=200 %.4f, K=400 %.4f", k1, k2, k4));

  // Strategy ablation at matched K and p = 0.5.
  const auto stable = harness.sweep(p050, "strategy", {"unsupervised", "per-label"}, seeds);
  const auto all = [](const ResultRow&) { return std::string("all"); };
  const double unsup = mean_by(stable, "cf", all).at("all");
  const double per_label = mean_by(stable, "cf-per-label", all).at("all");
  report(unsup >= per_label - 0.01, "strategy.unsupervised_vs_per_label",
         fmt("unsupervised %.4f vs per-label %.4f (K=%zu, need >= per-label - 0.01)", unsup, per_label,
             p050.clusterfit.kmeans.k));
}

}  // namespace

int main(int argc, char** argv) {
  if (argc < 2) {
    std::fprintf(stderr, "usage: %s <configs dir>\n", argv[0]);
    return 2;
  }
  warnings_enabled() = false;
  const auto t0 = Clock::now();
  try {
    kmeans_criteria();
    noise_criteria();
    gradient_criteria();
    probe_criteria();
    prototype_criteria();
    experiment_criteria(argv[1]);
  } catch (const std::exception& e) {
    std::printf("FAIL  %-34s %s\n", "suite.aborted", e.what());
    return 1;
  }
  std::printf("%d criteria failed, %.1f s total\n", failures, seconds_since(t0));
  return failures == 0 ? 0 : 1;
}
