#pragma once

// Minimal-norm concept-space attacks on concept-to-class heads.
//
// For a linear head g(c) = Wc + b, a sample c* of class y and a target t, the attack looks
// for a small delta with argmax g(c* + delta) = t. Writing the margin of class k over the
// target as beta_k = (w_k - w_t)^T c* + (b_k - b_t), the target wins by at least epsilon
// against class k exactly when (w_t - w_k)^T delta >= beta_k + epsilon.

#include "cbm/core.hpp"

#include <optional>
#include <string_view>
#include <vector>

namespace cbm {

enum class AttackMethod { single, multi, linearized };

std::string_view to_string(AttackMethod m);
AttackMethod attack_method_from_string(std::string_view s);

/// Slack on the target-over-true-class margin when verifying an attack.
inline constexpr double kMarginTolerance = 1e-9;

struct AttackConfig {
  double epsilon = 1e-3;      // decision margin the target must reach
  int max_relin_iters = 20;   // nonlinear heads only
  bool clamp_concepts = false;

  void validate() const;
};

struct AttackResult {
  Vector delta;           // applied perturbation (after clamping, when enabled)
  double norm = 0.0;      // ||delta||_2
  ClassIndex target = 0;
  bool success = false;
  Vector margins;         // beta_k for every k != target, ascending class order
  AttackMethod method = AttackMethod::single;
  bool clamped = false;
  int iterations = 1;
};

/// beta_k for every class, with entry t set to zero.
Vector margins(const LinearHead& head, const ConceptVector& c_star, ClassIndex t);

/// True when `t` is the argmax of `after` and beats `y_star` by at least epsilon (up to
/// kMarginTolerance).
bool target_reached(const Vector& after, ClassIndex y_star, ClassIndex t, double epsilon);

/// Closed form along w_t - w_y. Returns delta = 0 when the target already leads by epsilon.
AttackResult single_constraint_attack(const LinearHead& head, const ConceptVector& c_star, ClassIndex y_star,
                                      ClassIndex t, const AttackConfig& cfg = {});

/// delta = A^+ b with rows (w_t - w_k)^T and entries beta_k + epsilon over all k != t.
/// This is the minimum-norm solution of the equality system; success is checked on the
/// perturbed point and reported as-is.
AttackResult multi_constraint_attack(const LinearHead& head, const ConceptVector& c_star, ClassIndex y_star,
                                     ClassIndex t, const AttackConfig& cfg = {});

struct UntargetedAttack {
  AttackResult best;
  std::vector<std::optional<AttackResult>> per_target;  // indexed by class; empty for y* and degenerate targets
  std::size_t degenerate_targets = 0;
};

/// Runs the per-target attack for every t != y* and keeps the smallest successful one
/// (lowest target index on ties). Degenerate targets are skipped and counted. Throws
/// DegenerateError when every target is degenerate.
UntargetedAttack untargeted_min_attack(const LinearHead& head, const ConceptVector& c_star, ClassIndex y_star,
                                       const AttackConfig& cfg = {},
                                       AttackMethod method = AttackMethod::single);

/// Repeated local linearization of a nonlinear head followed by the multi-constraint step.
/// Returns the cumulative perturbation from c*; success = false when max_relin_iters runs out.
AttackResult linearized_attack(const MlpHead& head, const ConceptVector& c_star, ClassIndex y_star, ClassIndex t,
                               const AttackConfig& cfg = {});

}  // namespace cbm
