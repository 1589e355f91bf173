#include "cbm/metrics.hpp"

#include "cbm/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace cbm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();
constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

SampleRobustness from_attacks(const LabeledSample& s, bool correct, const AttackResult& best,
                              std::map<ClassIndex, double> per_target) {
  SampleRobustness r;
  r.label = s.label;
  r.correctly_classified = correct;
  r.per_target_attackability = std::move(per_target);
  r.attack_feasible = best.success;
  r.rho = best.success ? best.norm : kInf;
  r.attackability = attackability_from_rho(r.rho);
  const double cnorm = s.concepts.norm();
  r.zero_norm_concepts = cnorm == 0.0;
  r.rel_pert_norm = r.zero_norm_concepts ? kInf : r.rho / cnorm;
  return r;
}

SampleRobustness infeasible(const LabeledSample& s, bool correct) {
  SampleRobustness r;
  r.label = s.label;
  r.correctly_classified = correct;
  r.rho = kInf;
  r.attackability = 0.0;
  r.rel_pert_norm = kInf;
  r.zero_norm_concepts = s.concepts.norm() == 0.0;
  return r;
}

template <typename Evaluate>
DatasetRobustness aggregate(const Dataset& d, Evaluate&& evaluate) {
  if (d.samples.empty()) throw ParameterError("dataset_robustness needs a non-empty dataset");
  DatasetRobustness out;
  out.n_samples = d.samples.size();
  out.samples.reserve(d.samples.size());
  for (const auto& s : d.samples) out.samples.push_back(evaluate(s));

  std::vector<double> rhos;
  std::vector<SampleRobustness> used;
  std::map<ClassIndex, std::pair<double, std::size_t>> per_class;
  double sum = 0.0;
  for (const auto& r : out.samples) {
    if (r.attack_feasible) ++out.n_feasible;
    if (!r.correctly_classified) ++out.n_misclassified;
    if (!r.attack_feasible || !r.correctly_classified) continue;
    sum += r.attackability;
    rhos.push_back(r.rho);
    used.push_back(r);
    auto& [class_sum, count] = per_class[r.label];
    class_sum += r.attackability;
    ++count;
  }
  out.n_aggregated = rhos.size();
  for (const auto& [label, acc] : per_class) out.per_class_mean[label] = acc.first / static_cast<double>(acc.second);

  if (rhos.empty()) {
    out.mean_attackability = out.median_rho = out.p95_rho = out.iqr_rho = out.mean_rel_pert_norm = kNaN;
  } else {
    out.mean_attackability = sum / static_cast<double>(rhos.size());
    out.median_rho = quantile(rhos, 0.5);
    out.p95_rho = quantile(rhos, 0.95);
    out.iqr_rho = quantile(rhos, 0.75) - quantile(rhos, 0.25);
    try {
      out.mean_rel_pert_norm = rel_pert_norm_mean(used).mean;
    } catch (const MetricError&) {
      out.mean_rel_pert_norm = kNaN;
    }
  }

  std::vector<Vector> concepts;
  concepts.reserve(d.samples.size());
  for (const auto& s : d.samples) concepts.push_back(s.concepts.values());
  out.sparsity = sparsity_metric(concepts);
  return out;
}

}  // namespace

double attackability_from_rho(double rho) {
  if (std::isinf(rho)) return 0.0;
  return 1.0 / (rho + kAttackabilityStabilizer);
}

SampleRobustness sample_robustness(const LinearHead& head, const LabeledSample& s, const AttackConfig& cfg,
                                   AttackMethod method) {
  const bool correct = predict(head, s.concepts) == s.label;
  UntargetedAttack sweep;
  try {
    sweep = untargeted_min_attack(head, s.concepts, s.label, cfg, method);
  } catch (const DegenerateError& e) {
    throw MetricError(std::string("no attackable target: ") + e.what());
  }
  std::map<ClassIndex, double> per_target;
  for (ClassIndex t = 0; t < sweep.per_target.size(); ++t)
    if (sweep.per_target[t]) per_target[t] = attackability_from_rho(sweep.per_target[t]->norm);
  return from_attacks(s, correct, sweep.best, std::move(per_target));
}

SampleRobustness sample_robustness(const MlpHead& head, const LabeledSample& s, const AttackConfig& cfg) {
  const bool correct = argmax(mlp_forward(head, s.concepts)) == s.label;
  std::map<ClassIndex, double> per_target;
  std::optional<AttackResult> best;
  for (ClassIndex t = 0; t < head.output_dim(); ++t) {
    if (t == s.label) continue;
    AttackResult r = linearized_attack(head, s.concepts, s.label, t, cfg);
    per_target[t] = attackability_from_rho(r.norm);
    if (!best || (r.success && !best->success) || (r.success == best->success && r.norm < best->norm))
      best = std::move(r);
  }
  return from_attacks(s, correct, *best, std::move(per_target));
}

DatasetRobustness dataset_robustness(const LinearHead& head, const Dataset& d, const AttackConfig& cfg,
                                     AttackMethod method) {
  return aggregate(d, [&](const LabeledSample& s) {
    try {
      return sample_robustness(head, s, cfg, method);
    } catch (const MetricError&) {
      return infeasible(s, predict(head, s.concepts) == s.label);
    }
  });
}

DatasetRobustness dataset_robustness(const MlpHead& head, const Dataset& d, const AttackConfig& cfg) {
  auto out = aggregate(d, [&](const LabeledSample& s) { return sample_robustness(head, s, cfg); });
  out.linearization_bound = true;
  return out;
}

double sparsity_metric(std::span<const Vector> concepts) {
  if (concepts.empty()) throw ParameterError("sparsity_metric needs at least one concept vector");
  double total = 0.0;
  for (const auto& c : concepts) {
    if (c.size() == 0) throw ShapeError("empty concept vector");
    total += c.cwiseAbs().mean();
  }
  return total / static_cast<double>(concepts.size());
}

double sparsity_metric(std::span<const ConceptVector> concepts) {
  std::vector<Vector> values;
  values.reserve(concepts.size());
  for (const auto& c : concepts) values.push_back(c.values());
  return sparsity_metric(std::span<const Vector>(values));
}

RelPertSummary rel_pert_norm_mean(std::span<const SampleRobustness> results) {
  if (results.empty()) throw ParameterError("rel_pert_norm_mean needs at least one result");
  RelPertSummary out;
  double sum = 0.0;
  for (const auto& r : results) {
    if (r.zero_norm_concepts || !std::isfinite(r.rel_pert_norm)) {
      ++out.excluded;
      continue;
    }
    sum += r.rel_pert_norm;
    ++out.used;
  }
  if (out.used == 0) throw MetricError("every sample was excluded from the relative perturbation norm");
  out.mean = sum / static_cast<double>(out.used);
  return out;
}

double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw ParameterError("quantile of an empty sample");
  if (q < 0.0 || q > 1.0) throw ParameterError("quantile level must lie in [0,1]");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + frac * (values[hi] - values[lo]);
}

}  // namespace cbm
