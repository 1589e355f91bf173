#pragma once

// Concept-to-input robustness transfer: Lipschitz constants of the concept predictor and
// input-space searches that realize a requested concept shift.

#include "cbm/core.hpp"

#include <cstdint>
#include <vector>

namespace cbm {

/// sigma_max(W_h) times the largest slope of the output activation (1/4 for sigmoid).
double lipschitz_bound_analytic(const LinearConceptPredictor& p);

/// Largest observed ||h(x1) - h(x2)|| / ||x1 - x2|| over random, near-coincident and
/// top-singular-direction pairs.
double lipschitz_estimate_empirical(const LinearConceptPredictor& p, int n_pairs, std::uint64_t seed);

struct InputAttackResult {
  bool found = false;
  Vector delta_x;
  Vector achieved_delta_c;  // h(x + delta_x) - h(x)
  double concept_error = 0.0;  // ||achieved - requested||
  std::vector<double> stage_norms;  // best feasible ||delta_x|| after each penalty stage (inf if none yet)
  int iterations = 0;
};

struct InputAttackOptions {
  int stages = 10;
  double initial_penalty = 1.0;  // halved every stage
};

/// Searches for a small delta_x with ||h(x + delta_x) - (h(x) + delta_c)|| <= tol: Gauss-Newton
/// minimum-norm steps reach the target, then penalty-weighted steps try to shrink the norm while
/// staying within tol. The returned norm upper-bounds the true minimal input perturbation.
InputAttackResult input_space_attack(const LinearConceptPredictor& p, const Vector& x, const Vector& delta_c,
                                     double tol = 1e-8, int max_iters = 200, const InputAttackOptions& opts = {});

struct TransferTrial {
  double delta_c_norm = 0.0;  // achieved concept shift
  double delta_x_norm = 0.0;
  double bound_rhs = 0.0;     // delta_c_norm / L
  bool converged = false;
  bool bound_ok = false;
};

struct NestedShiftPair {
  double delta_x_gain = 0.0;   // ||dx2|| - ||dx1||
  double delta_c_gain_over_l = 0.0;  // (||dc2|| - ||dc1||) / L
  bool converged = false;
  bool consistent = false;
};

struct TransferReport {
  double lipschitz_bound = 0.0;
  double lipschitz_empirical = 0.0;
  std::vector<TransferTrial> trials;
  std::vector<NestedShiftPair> nested_pairs;

  std::size_t converged_trials() const;
  std::size_t passing_trials() const;  // converged and bound_ok
  std::size_t consistent_pairs() const;
};

/// Random inputs and feasible concept shifts; every converged trial must satisfy
/// ||delta_x|| >= ||delta_c|| / L.
TransferReport lower_bound_check(const LinearConceptPredictor& p, int trials, std::uint64_t seed);

/// Nested shifts n1 < n2 along one direction; records whether the found input norms grow by at
/// least (n2 - n1) / L. Diagnostic only.
std::vector<NestedShiftPair> nested_shift_diagnostic(const LinearConceptPredictor& p, int pairs, std::uint64_t seed);

/// Minimal input perturbation for an identity-activation predictor: W_h^+ delta_c.
Vector minimal_linear_input_perturbation(const LinearConceptPredictor& p, const Vector& delta_c);

}  // namespace cbm
