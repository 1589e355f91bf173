#include "cbm/transfer.hpp"

#include "cbm/error.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace cbm {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

double activation_slope_bound(const LinearConceptPredictor& p) {
  return p.activation() == ConceptActivation::sigmoid ? 0.25 : 1.0;
}

Matrix jacobian(const LinearConceptPredictor& p, const Vector& x) {
  if (p.activation() == ConceptActivation::identity) return p.weights();
  const Vector c = p.forward(x);
  const Vector slope = c.cwiseProduct((1.0 - c.array()).matrix());
  return slope.asDiagonal() * p.weights();
}

Vector random_unit(std::size_t n, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Vector v(static_cast<Eigen::Index>(n));
  do {
    for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  } while (v.norm() == 0.0);
  return v.normalized();
}

Vector random_normal(std::size_t n, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Vector v(static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < v.size(); ++i) v[i] = normal(rng);
  return v;
}

// Largest multiple of `direction` (up to `wanted`) keeping c + s*direction inside [lo, hi]^K.
double feasible_scale(const Vector& c, const Vector& direction, double wanted, double lo, double hi) {
  double s = wanted;
  for (Eigen::Index k = 0; k < c.size(); ++k) {
    if (direction[k] > 0.0) s = std::min(s, (hi - c[k]) / direction[k]);
    if (direction[k] < 0.0) s = std::min(s, (lo - c[k]) / direction[k]);
  }
  return std::max(s, 0.0);
}

// Gauss-Newton with minimum-norm steps and step halving on the residual h(x + dx) - target.
bool restore(const LinearConceptPredictor& p, const Vector& x, const Vector& target, Vector& dx, double tol,
             int& budget, int& used) {
  double err = (p.forward(x + dx) - target).norm();
  while (err > tol && budget > 0) {
    --budget;
    ++used;
    const Vector r = p.forward(x + dx) - target;
    const Vector step = -(pseudoinverse(jacobian(p, x + dx)) * r);
    double scale = 1.0;
    bool improved = false;
    for (int h = 0; h < 40; ++h, scale *= 0.5) {
      const Vector trial = dx + scale * step;
      const double e = (p.forward(x + trial) - target).norm();
      if (e < err) {
        dx = trial;
        err = e;
        improved = true;
        break;
      }
    }
    if (!improved) break;
  }
  return err <= tol;
}

}  // namespace

double lipschitz_bound_analytic(const LinearConceptPredictor& p) {
  return spectral_norm(p.weights()) * activation_slope_bound(p);
}

double lipschitz_estimate_empirical(const LinearConceptPredictor& p, int n_pairs, std::uint64_t seed) {
  if (n_pairs < 1) throw ParameterError("n_pairs must be >= 1");
  std::mt19937_64 rng(seed);
  const std::size_t d = p.input_dim();

  // Inputs whose pre-activation is near zero, where the sigmoid is steepest.
  const Vector center = -(pseudoinverse(p.weights()) * p.bias());
  Eigen::BDCSVD<Eigen::MatrixXd> svd(p.weights(), Eigen::ComputeThinV);
  const Vector top_direction = svd.matrixV().col(0);

  double best = 0.0;
  for (int i = 0; i < n_pairs; ++i) {
    Vector x1, step;
    switch (i % 4) {
      case 0:  // steepest point, top singular direction
        x1 = center + random_normal(d, 1e-3, rng);
        step = 1e-4 * top_direction;
        break;
      case 1:  // near-coincident pair
        x1 = random_normal(d, 1.0, rng);
        step = 1e-4 * random_unit(d, rng);
        break;
      case 2:  // well-separated pair
        x1 = random_normal(d, 1.0, rng);
        step = random_unit(d, rng);
        break;
      default:  // near the steep region, random direction
        x1 = center + random_normal(d, 0.1, rng);
        step = 1e-2 * random_unit(d, rng);
        break;
    }
    const double ratio = (p.forward(x1 + step) - p.forward(x1)).norm() / step.norm();
    best = std::max(best, ratio);
  }
  return best;
}

InputAttackResult input_space_attack(const LinearConceptPredictor& p, const Vector& x, const Vector& delta_c,
                                     double tol, int max_iters, const InputAttackOptions& opts) {
  if (!(tol > 0.0)) throw ParameterError("tol must be positive");
  if (max_iters < 1) throw ParameterError("max_iters must be >= 1");
  if (static_cast<std::size_t>(delta_c.size()) != p.num_concepts()) throw ShapeError("delta_c length differs from K");

  InputAttackResult out;
  out.delta_x = Vector::Zero(x.size());
  const Vector c0 = p.forward(x);
  out.achieved_delta_c = Vector::Zero(c0.size());
  if (delta_c.isZero(0.0)) {
    out.found = true;
    out.stage_norms.assign(static_cast<std::size_t>(opts.stages), 0.0);
    return out;
  }
  const Vector target = c0 + delta_c;
  if (p.activation() == ConceptActivation::sigmoid && ((target.array() <= 0.0).any() || (target.array() >= 1.0).any())) {
    out.concept_error = delta_c.norm();
    return out;  // outside the sigmoid's open range
  }

  int budget = max_iters;
  Vector dx = Vector::Zero(x.size());
  const bool feasible = restore(p, x, target, dx, tol, budget, out.iterations);
  double best_norm = feasible ? dx.norm() : kInf;
  Vector best = dx;

  double penalty = opts.initial_penalty;
  for (int stage = 0; stage < opts.stages; ++stage, penalty *= 0.5) {
    for (int inner = 0; inner < 3 && budget > 0 && feasible; ++inner) {
      --budget;
      ++out.iterations;
      const Matrix jac = jacobian(p, x + best);
      const Vector r = p.forward(x + best) - target;
      const Eigen::MatrixXd normal =
          jac.transpose() * jac + penalty * Eigen::MatrixXd::Identity(x.size(), x.size());
      Vector candidate = best - Vector(normal.ldlt().solve(jac.transpose() * r + penalty * best));
      if (restore(p, x, target, candidate, tol, budget, out.iterations) && candidate.norm() < best_norm) {
        best = candidate;
        best_norm = candidate.norm();
      } else {
        break;
      }
    }
    out.stage_norms.push_back(best_norm);
  }

  out.found = feasible;
  if (feasible) {
    out.delta_x = best;
    out.achieved_delta_c = p.forward(x + best) - c0;
    out.concept_error = (p.forward(x + best) - target).norm();
  } else {
    out.concept_error = (p.forward(x + dx) - target).norm();
  }
  return out;
}

std::size_t TransferReport::converged_trials() const {
  return static_cast<std::size_t>(std::count_if(trials.begin(), trials.end(), [](const auto& t) { return t.converged; }));
}

std::size_t TransferReport::passing_trials() const {
  return static_cast<std::size_t>(
      std::count_if(trials.begin(), trials.end(), [](const auto& t) { return t.converged && t.bound_ok; }));
}

std::size_t TransferReport::consistent_pairs() const {
  return static_cast<std::size_t>(
      std::count_if(nested_pairs.begin(), nested_pairs.end(), [](const auto& t) { return t.converged && t.consistent; }));
}

TransferReport lower_bound_check(const LinearConceptPredictor& p, int trials, std::uint64_t seed) {
  if (trials < 1) throw ParameterError("trials must be >= 1");
  TransferReport report;
  report.lipschitz_bound = lipschitz_bound_analytic(p);
  report.lipschitz_empirical = lipschitz_estimate_empirical(p, 4 * trials, seed);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> norm_dist(0.01, 0.3);

  for (int i = 0; i < trials; ++i) {
    const Vector x = random_normal(p.input_dim(), 0.5, rng);
    const Vector c0 = p.forward(x);
    const Vector u = random_unit(p.num_concepts(), rng);
    double n = norm_dist(rng);
    if (p.activation() == ConceptActivation::sigmoid) n = feasible_scale(c0, u, n, 0.01, 0.99);
    const InputAttackResult r = input_space_attack(p, x, n * u);

    TransferTrial t;
    t.converged = r.found;
    t.delta_c_norm = r.achieved_delta_c.norm();
    t.delta_x_norm = r.delta_x.norm();
    t.bound_rhs = report.lipschitz_bound > 0.0 ? t.delta_c_norm / report.lipschitz_bound : (t.delta_c_norm > 0.0 ? kInf : 0.0);
    t.bound_ok = t.delta_x_norm >= t.bound_rhs - 1e-9;
    report.trials.push_back(t);
  }
  return report;
}

std::vector<NestedShiftPair> nested_shift_diagnostic(const LinearConceptPredictor& p, int pairs, std::uint64_t seed) {
  if (pairs < 1) throw ParameterError("pairs must be >= 1");
  const double lip = lipschitz_bound_analytic(p);
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::vector<NestedShiftPair> out;

  for (int i = 0; i < pairs; ++i) {
    const Vector x = random_normal(p.input_dim(), 0.5, rng);
    const Vector c0 = p.forward(x);
    const Vector u = random_unit(p.num_concepts(), rng);
    double n2 = 0.02 + 0.28 * unit(rng);
    if (p.activation() == ConceptActivation::sigmoid) n2 = feasible_scale(c0, u, n2, 0.01, 0.99);
    const double n1 = n2 * (0.1 + 0.8 * unit(rng));
    const auto first = input_space_attack(p, x, n1 * u);
    const auto second = input_space_attack(p, x, n2 * u);

    NestedShiftPair row;
    row.converged = first.found && second.found;
    row.delta_x_gain = second.delta_x.norm() - first.delta_x.norm();
    const double dc_gain = second.achieved_delta_c.norm() - first.achieved_delta_c.norm();
    row.delta_c_gain_over_l = lip > 0.0 ? dc_gain / lip : 0.0;
    row.consistent = row.converged && row.delta_x_gain >= row.delta_c_gain_over_l - 1e-9;
    out.push_back(row);
  }
  return out;
}

Vector minimal_linear_input_perturbation(const LinearConceptPredictor& p, const Vector& delta_c) {
  if (p.activation() != ConceptActivation::identity)
    throw ParameterError("closed-form minimal perturbation needs an identity-activation predictor");
  return pseudoinverse(p.weights()) * delta_c;
}

}  // namespace cbm
