#pragma once

// Stability-regularized training of a linear concept predictor and linear head.
//
// The stability term -log(1 + ||delta_min||^2) uses the single-constraint attack on the
// ground-truth concepts, so its gradient reaches only the head parameters (W, b).

#include "cbm/attacks.hpp"
#include "cbm/core.hpp"
#include "cbm/metrics.hpp"

#include <cstdint>
#include <optional>
#include <string_view>
#include <vector>

namespace cbm {

struct LossWeights {
  double lambda_c = 1.0;
  double lambda_y = 1.0;
  double lambda_s_max = 0.0;
  double lambda_r = 0.0;  // sparsity of predicted concepts; off by default
  int warmup_epochs = 5;

  void validate() const;
};

/// Which target class enters delta_min during training.
enum class TargetRule {
  true_runner_up,  // highest non-true logit at c*
  fixed,           // TrainConfig::fixed_target (falls back to runner-up when it equals y*)
  nearest,         // target with the smallest single-constraint norm
};

std::string_view to_string(TargetRule r);
TargetRule target_rule_from_string(std::string_view s);

enum class LrSchedule { constant, cosine };

std::string_view to_string(LrSchedule s);
LrSchedule lr_schedule_from_string(std::string_view s);

struct TrainConfig {
  int epochs = 50;
  double learning_rate = 1e-3;
  double weight_decay = 1e-4;
  int batch_size = 32;
  std::uint64_t seed = 0;
  TargetRule target_rule = TargetRule::true_runner_up;
  ClassIndex fixed_target = 0;
  LrSchedule schedule = LrSchedule::constant;
  double grad_clip_norm = 10.0;  // <= 0 disables clipping
  AttackConfig attack;

  void validate() const;
};

struct EpochRecord {
  int epoch = 0;  // 1-based
  double concept_loss = 0.0;
  double class_loss = 0.0;
  double stability_loss = 0.0;
  double total_loss = 0.0;
  double lambda_s = 0.0;
  double val_accuracy = 0.0;
  double val_mean_attackability = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> rows;
};

struct TrainResult {
  std::optional<LinearConceptPredictor> predictor;  // empty for concept-only datasets
  LinearHead head;
  TrainLog log;
};

/// Target class for the stability term of one sample.
ClassIndex stability_target(const LinearHead& head, const LabeledSample& s, TargetRule rule,
                            ClassIndex fixed_target = 0, const AttackConfig& cfg = {});

/// -log(1 + ||delta||^2) for the single-constraint attack toward t.
double stability_loss_for_target(const LinearHead& head, const LabeledSample& s, ClassIndex t,
                                 const AttackConfig& cfg = {});

double stability_loss(const LinearHead& head, const LabeledSample& s, const AttackConfig& cfg = {},
                      TargetRule rule = TargetRule::true_runner_up, ClassIndex fixed_target = 0);

/// Predictions are clipped to this distance from 0 and 1 before the logarithm.
inline constexpr double kBceClip = 1e-7;

/// Mean binary cross-entropy over the K concepts.
double concept_loss(const Vector& predicted, const Vector& truth);
double concept_loss(const ConceptVector& predicted, const ConceptVector& truth);

/// Softmax cross-entropy.
double class_loss(const Vector& logits, ClassIndex y_star);

/// lambda_s_max * min(1, epoch / warmup_epochs).
double warmup_lambda(const LossWeights& w, int epoch);

double total_loss(double l_c, double l_y, double l_s, double l_r, const LossWeights& w, int epoch);

struct HeadGradient {
  Matrix weights;
  Vector bias;
};

/// Analytic gradient of stability_loss_for_target with respect to W and b.
HeadGradient stability_grad(const LinearHead& head, const LabeledSample& s, ClassIndex t,
                            const AttackConfig& cfg = {});

struct InitialModel {
  std::optional<LinearConceptPredictor> predictor;
  LinearHead head;
};

/// Seeded initialization used by train(). d = 0 gives a head-only model.
InitialModel initial_model(std::size_t num_concepts, std::size_t num_classes, std::size_t feature_dim,
                           std::uint64_t seed);

/// Top-1 accuracy of the full pipeline when a predictor and features are present,
/// otherwise of the head applied to ground-truth concepts.
double accuracy(const std::optional<LinearConceptPredictor>& predictor, const LinearHead& head, const Dataset& d);

/// Concepts the model would feed to the head: predictor outputs when available, else c*.
std::vector<Vector> model_concepts(const std::optional<LinearConceptPredictor>& predictor, const Dataset& d);

/// Mini-batch SGD on the weighted objective. Datasets without features train the head
/// alone on ground-truth concepts. Throws TrainingError on a non-finite loss.
TrainResult train(const Dataset& train_set, const Dataset& val_set, const LossWeights& w, const TrainConfig& cfg);

struct BoundReport {
  double lhs = 0.0;  // empirical mean of ||delta_min||^2
  double rhs = 0.0;  // exp(-lambda_s E[L_stability] / (lambda_c + lambda_y)) - 1
  bool holds = true;
};

BoundReport robustness_bound_report(const TrainLog& log, const LossWeights& w, const DatasetRobustness& final_metrics);

struct MlpTrainConfig {
  std::vector<std::size_t> hidden = {32};
  Activation hidden_activation = Activation::relu;
  int epochs = 100;
  double learning_rate = 0.05;
  int batch_size = 32;
  double weight_decay = 0.0;
  std::uint64_t seed = 0;
};

/// Cross-entropy training of a multi-layer head on ground-truth concepts.
MlpHead train_mlp_head(const Dataset& d, const MlpTrainConfig& cfg);

}  // namespace cbm
