#pragma once

// Sample- and dataset-level concept-space robustness metrics.

#include "cbm/attacks.hpp"
#include "cbm/core.hpp"

#include <map>
#include <span>
#include <vector>

namespace cbm {

/// Stabilizer added to rho before taking the reciprocal.
inline constexpr double kAttackabilityStabilizer = 1e-8;

double attackability_from_rho(double rho);

struct SampleRobustness {
  double rho = 0.0;             // minimal perturbation norm; +inf when no target succeeds
  double attackability = 0.0;   // 1 / (rho + 1e-8); 0 when infeasible
  std::map<ClassIndex, double> per_target_attackability;
  double rel_pert_norm = 0.0;   // rho / ||c*||; +inf when ||c*|| = 0
  bool attack_feasible = false;
  bool correctly_classified = true;  // head predicts y* on the unperturbed c*
  bool zero_norm_concepts = false;
  ClassIndex label = 0;
};

struct DatasetRobustness {
  // Aggregates cover samples that are attack-feasible and correctly classified on c*.
  double mean_attackability = 0.0;
  std::map<ClassIndex, double> per_class_mean;
  double median_rho = 0.0;
  double p95_rho = 0.0;
  double iqr_rho = 0.0;
  double mean_rel_pert_norm = 0.0;
  std::size_t n_samples = 0;
  std::size_t n_feasible = 0;
  std::size_t n_misclassified = 0;
  std::size_t n_aggregated = 0;
  double sparsity = 0.0;  // of the evaluated concept vectors
  bool linearization_bound = false;  // metrics from a local linearization of a nonlinear head
  std::vector<SampleRobustness> samples;
};

/// Uses the per-target single-constraint solution by default, which yields the exact
/// distance to the nearest pairwise decision hyperplane. Throws MetricError when every
/// target is degenerate.
SampleRobustness sample_robustness(const LinearHead& head, const LabeledSample& s, const AttackConfig& cfg = {},
                                   AttackMethod method = AttackMethod::single);

/// Same metrics for a nonlinear head via linearized_attack (a local-linearization estimate).
SampleRobustness sample_robustness(const MlpHead& head, const LabeledSample& s, const AttackConfig& cfg = {});

/// Samples whose attack is degenerate for every target are recorded as infeasible.
DatasetRobustness dataset_robustness(const LinearHead& head, const Dataset& d, const AttackConfig& cfg = {},
                                     AttackMethod method = AttackMethod::single);
DatasetRobustness dataset_robustness(const MlpHead& head, const Dataset& d, const AttackConfig& cfg = {});

/// Mean absolute activation, averaged over samples.
double sparsity_metric(std::span<const ConceptVector> concepts);
double sparsity_metric(std::span<const Vector> concepts);

struct RelPertSummary {
  double mean = 0.0;
  std::size_t used = 0;
  std::size_t excluded = 0;  // zero-norm c* or infeasible
};

/// Mean of rel_pert_norm over samples with finite values. Throws MetricError when none remain.
RelPertSummary rel_pert_norm_mean(std::span<const SampleRobustness> results);

/// Linear-interpolation quantile (numpy "linear" rule) of an unsorted sample.
double quantile(std::vector<double> values, double q);

}  // namespace cbm
