#include "cbm/attacks.hpp"

#include "cbm/error.hpp"

#include <cmath>
#include <limits>

namespace cbm {

namespace {

void check_class(ClassIndex k, std::size_t num_classes, const char* what) {
  if (k >= num_classes)
    throw ParameterError(std::string(what) + " " + std::to_string(k) + " out of range for " +
                         std::to_string(num_classes) + " classes");
}

void check_pair(const LinearHead& head, const ConceptVector& c_star, ClassIndex y_star, ClassIndex t) {
  if (static_cast<std::size_t>(c_star.size()) != head.num_concepts())
    throw ShapeError("concept vector length differs from head K");
  check_class(y_star, head.num_classes(), "true class");
  check_class(t, head.num_classes(), "target class");
  if (t == y_star) throw ParameterError("target class equals true class");
}

Vector margins_from_logits(const Vector& z, ClassIndex t) {
  Vector m(z.size());
  for (Eigen::Index k = 0; k < z.size(); ++k) m[k] = z[k] - z[static_cast<Eigen::Index>(t)];
  m[static_cast<Eigen::Index>(t)] = 0.0;
  return m;
}

Vector drop_entry(const Vector& v, ClassIndex t) {
  Vector out(v.size() - 1);
  for (Eigen::Index k = 0, j = 0; k < v.size(); ++k)
    if (k != static_cast<Eigen::Index>(t)) out[j++] = v[k];
  return out;
}

// Applies delta (clamping if configured) and fills the bookkeeping fields.
template <typename Forward>
AttackResult finish(const ConceptVector& c_star, Vector delta, ClassIndex y_star, ClassIndex t, const Vector& beta,
                    AttackMethod method, const AttackConfig& cfg, Forward&& forward) {
  const ConceptVector moved = c_star.perturbed(delta, cfg.clamp_concepts);
  AttackResult r;
  r.delta = cfg.clamp_concepts ? Vector(moved.values() - c_star.values()) : std::move(delta);
  r.norm = r.delta.norm();
  r.target = t;
  r.margins = drop_entry(beta, t);
  r.method = method;
  r.clamped = cfg.clamp_concepts;
  r.success = target_reached(forward(moved.values()), y_star, t, cfg.epsilon);
  return r;
}

}  // namespace

std::string_view to_string(AttackMethod m) {
  switch (m) {
    case AttackMethod::single:
      return "single";
    case AttackMethod::multi:
      return "multi";
    case AttackMethod::linearized:
      return "linearized";
  }
  return "single";
}

AttackMethod attack_method_from_string(std::string_view s) {
  if (s == "single") return AttackMethod::single;
  if (s == "multi") return AttackMethod::multi;
  if (s == "linearized") return AttackMethod::linearized;
  throw ParameterError("unknown attack method '" + std::string(s) + "'");
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ParameterError("epsilon must be finite and >= 0");
  if (max_relin_iters < 1) throw ParameterError("max_relin_iters must be >= 1");
}

Vector margins(const LinearHead& head, const ConceptVector& c_star, ClassIndex t) {
  check_class(t, head.num_classes(), "target class");
  return margins_from_logits(logits(head, c_star), t);
}

bool target_reached(const Vector& after, ClassIndex y_star, ClassIndex t, double epsilon) {
  const auto ti = static_cast<Eigen::Index>(t);
  const auto yi = static_cast<Eigen::Index>(y_star);
  return argmax(after) == t && after[ti] - after[yi] >= epsilon - kMarginTolerance;
}

AttackResult single_constraint_attack(const LinearHead& head, const ConceptVector& c_star, ClassIndex y_star,
                                      ClassIndex t, const AttackConfig& cfg) {
  cfg.validate();
  check_pair(head, c_star, y_star, t);
  const Vector direction = head.weights().row(t) - head.weights().row(y_star);
  const double sq = direction.squaredNorm();
  if (sq == 0.0) throw DegenerateError("w_t equals w_y: no attack direction");

  const Vector beta = margins(head, c_star, t);
  const double rhs = beta[static_cast<Eigen::Index>(y_star)] + cfg.epsilon;
  Vector delta = rhs > 0.0 ? Vector((rhs / sq) * direction) : Vector(Vector::Zero(direction.size()));
  return finish(c_star, std::move(delta), y_star, t, beta, AttackMethod::single, cfg,
                [&](const Vector& c) { return logits(head, c); });
}

AttackResult multi_constraint_attack(const LinearHead& head, const ConceptVector& c_star, ClassIndex y_star,
                                     ClassIndex t, const AttackConfig& cfg) {
  cfg.validate();
  check_pair(head, c_star, y_star, t);
  const auto num_classes = static_cast<Eigen::Index>(head.num_classes());
  const Vector beta = margins(head, c_star, t);

  Matrix a(num_classes - 1, head.weights().cols());
  Vector rhs(num_classes - 1);
  for (Eigen::Index k = 0, row = 0; k < num_classes; ++k) {
    if (k == static_cast<Eigen::Index>(t)) continue;
    a.row(row) = head.weights().row(t) - head.weights().row(k);
    rhs[row] = beta[k] + cfg.epsilon;
    ++row;
  }
  if (a.isZero(0.0)) throw DegenerateError("constraint matrix is zero: target indistinguishable from all classes");

  // Every constraint already holds: moving would only push away from a satisfied region.
  Vector delta = (rhs.array() <= 0.0).all() ? Vector(Vector::Zero(a.cols())) : Vector(pseudoinverse(a) * rhs);
  return finish(c_star, std::move(delta), y_star, t, beta, AttackMethod::multi, cfg,
                [&](const Vector& c) { return logits(head, c); });
}

UntargetedAttack untargeted_min_attack(const LinearHead& head, const ConceptVector& c_star, ClassIndex y_star,
                                       const AttackConfig& cfg, AttackMethod method) {
  if (method == AttackMethod::linearized) throw ParameterError("linearized attacks need an MLP head");
  check_class(y_star, head.num_classes(), "true class");
  UntargetedAttack out;
  out.per_target.resize(head.num_classes());

  const AttackResult* best = nullptr;
  for (ClassIndex t = 0; t < head.num_classes(); ++t) {
    if (t == y_star) continue;
    try {
      out.per_target[t] = method == AttackMethod::single ? single_constraint_attack(head, c_star, y_star, t, cfg)
                                                         : multi_constraint_attack(head, c_star, y_star, t, cfg);
    } catch (const DegenerateError&) {
      ++out.degenerate_targets;
      continue;
    }
    const AttackResult& r = *out.per_target[t];
    // Successful results dominate unsuccessful ones; strict < keeps the lowest index on ties.
    if (!best || (r.success && !best->success) || (r.success == best->success && r.norm < best->norm)) best = &r;
  }
  if (!best) throw DegenerateError("every target class is degenerate");
  out.best = *best;
  return out;
}

AttackResult linearized_attack(const MlpHead& head, const ConceptVector& c_star, ClassIndex y_star, ClassIndex t,
                               const AttackConfig& cfg) {
  cfg.validate();
  if (static_cast<std::size_t>(c_star.size()) != head.input_dim())
    throw ShapeError("concept vector length differs from MLP input dim");
  check_class(y_star, head.output_dim(), "true class");
  check_class(t, head.output_dim(), "target class");
  if (t == y_star) throw ParameterError("target class equals true class");

  AttackConfig step_cfg = cfg;
  step_cfg.clamp_concepts = false;

  AttackResult r;
  r.target = t;
  r.method = AttackMethod::linearized;
  r.clamped = cfg.clamp_concepts;
  r.margins = drop_entry(margins_from_logits(mlp_forward(head, c_star), t), t);
  r.delta = Vector::Zero(c_star.size());
  r.iterations = 0;

  Vector point = c_star.values();
  for (int it = 1; it <= cfg.max_relin_iters; ++it) {
    r.iterations = it;
    const Matrix jac = mlp_jacobian(head, point);
    const Vector offset = mlp_forward(head, point) - jac * point;
    AttackResult step;
    try {
      step = multi_constraint_attack(LinearHead(jac, offset), ConceptVector(point), y_star, t, step_cfg);
    } catch (const DegenerateError&) {
      continue;  // flat region, nothing to follow
    }
    const ConceptVector moved = c_star.perturbed(r.delta + step.delta, cfg.clamp_concepts);
    r.delta = moved.values() - c_star.values();
    point = moved.values();
    if (target_reached(mlp_forward(head, point), y_star, t, cfg.epsilon)) {
      r.success = true;
      break;
    }
  }
  r.norm = r.delta.norm();
  return r;
}

}  // namespace cbm
