#pragma once

// Analytic vs central-difference gradients for the three loss variants on a
// random 64-bit (8, 16, 4) model.

#include <random>
#include <string>

#include "clusterfit/nnet.hpp"
#include "oracles.hpp"

namespace gradcheck {

enum class Variant { cross_entropy, distill, multitask };

inline constexpr double kStep = 1e-5;
inline constexpr std::size_t kBatch = 32;

// Every parameter ~ N(0, 0.5^2) so heads are non-zero and gradients reach
// the trunk.
inline clusterfit::MlpModel<double> random_model(const clusterfit::MlpShape& shape, std::mt19937_64& gen) {
  auto m = clusterfit::MlpModel<double>::zeros(shape);
  std::normal_distribution<double> nd(0.0, 0.5);
  std::vector<double> theta(shape.parameter_count());
  for (auto& t : theta) t = nd(gen);
  m.unflatten(theta);
  return m;
}

inline double max_error(Variant variant, std::uint64_t seed) {
  using namespace clusterfit;
  std::mt19937_64 gen(seed);
  const MlpShape shape{8, {16}, variant == Variant::multitask ? std::vector<std::size_t>{4, 3} : std::vector<std::size_t>{4}};
  const auto model = random_model(shape, gen);
  Matrix<double> batch(kBatch, 8);
  std::normal_distribution<double> nd(0.0, 1.0);
  for (Eigen::Index i = 0; i < batch.size(); ++i) batch.data()[i] = nd(gen);
  std::vector<std::vector<std::uint32_t>> labels(shape.heads.size(), std::vector<std::uint32_t>(kBatch));
  for (std::size_t h = 0; h < shape.heads.size(); ++h) {
    for (auto& l : labels[h]) l = static_cast<std::uint32_t>(gen() % shape.heads[h]);
  }

  LossSpec<double> spec = CrossEntropyLoss{};
  Matrix<double> teacher_logits;
  if (variant == Variant::distill) {
    auto teacher = std::make_shared<const MlpModel<double>>(random_model(MlpShape{8, {16}, {4}}, gen));
    // scale the teacher up so its softened distribution is not uniform at T = 20
    teacher_logits = 20.0 * forward_cache(*teacher, batch).logits[0];
    spec = DistillLoss<double>{DistillConfig{20.0, 0.75}, teacher};
  } else if (variant == Variant::multitask) {
    spec = MultiTaskLoss{};
  }
  const Matrix<double>* tl = teacher_logits.size() ? &teacher_logits : nullptr;

  const auto analytic = loss_and_grad(model, batch, labels, spec, tl).grad.flatten();
  auto probe = model;
  const auto numeric = oracle::central_difference(
      [&](const std::vector<double>& theta) {
        probe.unflatten(theta);
        return loss_and_grad(probe, batch, labels, spec, tl).loss;
      },
      model.flatten(), kStep);
  return oracle::max_relative_error(analytic, numeric, 1e-6);
}

inline std::string name(Variant v) {
  switch (v) {
    case Variant::cross_entropy: return "cross-entropy";
    case Variant::distill: return "distill";
    case Variant::multitask: return "multitask";
  }
  return "?";
}

}  // namespace gradcheck
