#include "cbm/data.hpp"
#include "cbm/error.hpp"
#include "cbm/spectra.hpp"

#include "support.hpp"

#include <doctest.h>

#include <cmath>

using namespace cbm;
using namespace testing;

namespace {

Vector vec(std::initializer_list<double> xs) {
  Vector v(static_cast<Eigen::Index>(xs.size()));
  Eigen::Index i = 0;
  for (double x : xs) v[i++] = x;
  return v;
}

LabeledSample sample(Vector c, ClassIndex y) { return {std::nullopt, ConceptVector(std::move(c)), y}; }

// Central differences of the stability loss with respect to every head parameter.
HeadGradient numeric_grad(const LinearHead& h, const LabeledSample& s, ClassIndex t, const AttackConfig& cfg, double step) {
  HeadGradient g{Matrix::Zero(h.weights().rows(), h.weights().cols()), Vector::Zero(h.bias().size())};
  for (Eigen::Index i = 0; i < h.weights().rows(); ++i)
    for (Eigen::Index j = 0; j < h.weights().cols(); ++j) {
      Matrix up = h.weights(), down = h.weights();
      up(i, j) += step;
      down(i, j) -= step;
      g.weights(i, j) = (stability_loss_for_target(LinearHead(up, h.bias()), s, t, cfg) -
                         stability_loss_for_target(LinearHead(down, h.bias()), s, t, cfg)) /
                        (2 * step);
    }
  for (Eigen::Index i = 0; i < h.bias().size(); ++i) {
    Vector up = h.bias(), down = h.bias();
    up[i] += step;
    down[i] -= step;
    g.bias[i] = (stability_loss_for_target(LinearHead(h.weights(), up), s, t, cfg) -
                 stability_loss_for_target(LinearHead(h.weights(), down), s, t, cfg)) /
                (2 * step);
  }
  return g;
}

SyntheticConfig small_synthetic() {
  SyntheticConfig cfg;
  cfg.n_per_class = 60;
  return cfg;
}

}  // namespace

TEST_CASE("stability loss") {
  Matrix w(2, 2);
  w << 1, 0, -1, 0;
  const LinearHead head(w, Vector::Zero(2));
  AttackConfig cfg;
  cfg.epsilon = 0.0;
  CHECK(stability_loss_for_target(head, sample(vec({0, 0.5}), 0), 1, cfg) == 0.0);
  // ||delta|| = x for this head, so ||delta||^2 = e - 1 gives -1.
  const double x = std::sqrt(std::exp(1.0) - 1.0);
  CHECK(stability_loss_for_target(head, sample(vec({x, 0}), 0), 1, cfg) == doctest::Approx(-1.0).epsilon(1e-12));

  std::mt19937_64 rng(31);
  for (int trial = 0; trial < 50; ++trial) {
    const LinearHead h(random_matrix(rng, 4, 5), random_vector(rng, 4));
    const Vector c = random_unit_box(rng, 5);
    const auto s = sample(c, predict(h, c));
    const double l = stability_loss(h, s);
    CHECK(l <= 0.0);
    const auto nearest = stability_loss(h, s, {}, TargetRule::nearest);
    const double rho = untargeted_min_attack(h, s.concepts, s.label).best.norm;
    CHECK(nearest == doctest::Approx(-std::log1p(rho * rho)).epsilon(1e-12));
    CHECK(nearest >= l - 1e-12 * std::abs(l));  // runner-up distance is never below the nearest one
  }
  // strictly decreasing in the perturbation norm
  CHECK(stability_loss_for_target(head, sample(vec({0.2, 0}), 0), 1, cfg) >
        stability_loss_for_target(head, sample(vec({0.3, 0}), 0), 1, cfg));
}

TEST_CASE("stability target rules") {
  Matrix w(3, 2);
  w << 1, 0, 0, 1, 0, 0;
  const LinearHead head(w, vec({0, 0, 0.3}));
  const auto s = sample(vec({0.9, 0.5}), 0);
  CHECK(stability_target(head, s, TargetRule::true_runner_up) == 1);
  CHECK(stability_target(head, s, TargetRule::fixed, 2) == 2);
  CHECK(stability_target(head, s, TargetRule::fixed, 0) == 1);
}

TEST_CASE("concept and class losses") {
  CHECK(concept_loss(Vector::Constant(4, 0.5), vec({0, 1, 1, 0})) == doctest::Approx(std::log(2.0)));
  CHECK(concept_loss(vec({0, 1}), vec({0, 1})) < 1e-6);
  CHECK_THROWS_AS(concept_loss(vec({0.5}), vec({0, 1})), ShapeError);
  const Vector p = vec({0.2, 0.7, 0.9}), y = vec({0, 1, 0.5});
  double oracle = 0;
  for (int i = 0; i < 3; ++i) oracle -= y[i] * std::log(p[i]) + (1 - y[i]) * std::log(1 - p[i]);
  CHECK(concept_loss(p, y) == doctest::Approx(oracle / 3).epsilon(1e-12));

  CHECK(class_loss(Vector::Zero(15), 3) == doctest::Approx(std::log(15.0)));
  Vector z = Vector::Zero(4);
  z[2] = 1000;
  CHECK(class_loss(z, 2) < 1e-12);
  const Vector r = vec({0.3, -1.2, 2.0});
  const double direct = -std::log(std::exp(r[1]) / (std::exp(r[0]) + std::exp(r[1]) + std::exp(r[2])));
  CHECK(class_loss(r, 1) == doctest::Approx(direct).epsilon(1e-12));
  CHECK_THROWS_AS(class_loss(r, 3), ParameterError);
}

TEST_CASE("warmup and total loss") {
  LossWeights w;
  w.lambda_s_max = 1.0;
  w.warmup_epochs = 5;
  CHECK(warmup_lambda(w, 0) == 0.0);
  CHECK(warmup_lambda(w, 2) == 0.4);
  CHECK(warmup_lambda(w, 5) == 1.0);
  CHECK(warmup_lambda(w, 50) == 1.0);
  w.lambda_s_max = 0.083;
  CHECK(warmup_lambda(w, 5) == 0.083);
  CHECK(warmup_lambda(w, 7) == 0.083);
  double previous = -1;
  for (int e = 0; e < 12; ++e) {
    CHECK(warmup_lambda(w, e) >= previous);
    previous = warmup_lambda(w, e);
  }
  CHECK_THROWS_AS(warmup_lambda(w, -1), ParameterError);

  LossWeights ones;
  ones.lambda_s_max = 1.0;
  CHECK(total_loss(1, 2, 3, 0, ones, 5) == 6.0);
  LossWeights off;
  CHECK(total_loss(1, 2, 1e9, 0, off, 10) == 3.0);
  CHECK(total_loss(1, 2, 3, 0, ones, 2) == doctest::Approx(1 + 2 + 0.4 * 3));
}

TEST_CASE("stability gradient") {
  std::mt19937_64 rng(32);
  int checked = 0;
  while (checked < 25) {
    const int c = uniform_int(rng, 2, 6), k = uniform_int(rng, 2, 8);
    const LinearHead h(random_matrix(rng, c, k), random_vector(rng, c));
    const Vector x = random_unit_box(rng, k);
    const auto s = sample(x, predict(h, x));
    const ClassIndex t = (s.label + 1) % static_cast<ClassIndex>(c);
    const AttackConfig cfg;
    const auto g = stability_grad(h, s, t, cfg);
    const auto n = numeric_grad(h, s, t, cfg, 1e-6);
    const double scale = std::max(1.0, n.weights.norm());
    CHECK((g.weights - n.weights).norm() <= 1e-4 * scale);
    CHECK((g.bias - n.bias).norm() <= 1e-4 * std::max(1.0, n.bias.norm()));
    for (Eigen::Index i = 0; i < c; ++i)
      if (static_cast<ClassIndex>(i) != s.label && static_cast<ClassIndex>(i) != t) {
        CHECK(g.weights.row(i).isZero(0.0));
        CHECK(g.bias[i] == 0.0);
      }
    ++checked;
  }

  Matrix w(2, 2);
  w << 1, 0, -1, 0;
  const auto zero = stability_grad(LinearHead(w, Vector::Zero(2)), sample(vec({-1, 0}), 0), 1);
  CHECK(zero.weights.isZero(0.0));
  CHECK(zero.bias.isZero(0.0));
  CHECK_THROWS_AS(stability_grad(LinearHead(Matrix::Ones(2, 2), Vector::Zero(2)), sample(vec({1, 0}), 0), 1), DegenerateError);
}

TEST_CASE("the class-only objective is convex in the head for fixed concepts") {
  std::mt19937_64 rng(33);
  std::vector<LabeledSample> samples;
  for (int i = 0; i < 20; ++i) samples.push_back(sample(random_unit_box(rng, 4), static_cast<ClassIndex>(i % 3)));
  auto objective = [&](const Matrix& w, const Vector& b) {
    const LinearHead h(w, b);
    double sum = 0;
    for (const auto& s : samples) sum += class_loss(logits(h, s.concepts), s.label);
    return sum / static_cast<double>(samples.size());
  };
  for (int trial = 0; trial < 50; ++trial) {
    const Matrix w1 = random_matrix(rng, 3, 4, 3.0), w2 = random_matrix(rng, 3, 4, 3.0);
    const Vector b1 = random_vector(rng, 3), b2 = random_vector(rng, 3);
    const double mid = objective(0.5 * (w1 + w2), 0.5 * (b1 + b2));
    CHECK(mid <= 0.5 * (objective(w1, b1) + objective(w2, b2)) + 1e-12);
  }
}

TEST_CASE("one class-loss step matches a hand-computed update") {
  Dataset d;
  d.num_concepts = 2;
  d.num_classes = 2;
  d.samples = {sample(vec({1, 0}), 0), sample(vec({0, 1}), 1)};
  LossWeights w;
  w.lambda_c = 0;
  w.lambda_y = 1;
  TrainConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 2;
  cfg.learning_rate = 0.1;
  cfg.weight_decay = 0;
  cfg.grad_clip_norm = 0;
  cfg.seed = 3;
  const auto start = initial_model(2, 2, 0, cfg.seed).head;
  const auto result = train(d, d, w, cfg);

  Matrix gw = Matrix::Zero(2, 2);
  Vector gb = Vector::Zero(2);
  for (const auto& s : d.samples) {
    const Vector z = logits(start, s.concepts);
    const Vector p = (z.array() - z.maxCoeff()).exp().matrix();
    const Vector soft = p / p.sum();
    for (int i = 0; i < 2; ++i) {
      const double e = soft[i] - (static_cast<ClassIndex>(i) == s.label ? 1.0 : 0.0);
      gb[i] += e / 2;
      for (int j = 0; j < 2; ++j) gw(i, j) += e * s.concepts[j] / 2;
    }
  }
  CHECK((result.head.weights() - (start.weights() - 0.1 * gw)).cwiseAbs().maxCoeff() < 1e-12);
  CHECK((result.head.bias() - (start.bias() - 0.1 * gb)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("training") {
  const auto data = synth_generate(small_synthetic());
  LossWeights w;
  TrainConfig cfg;
  cfg.epochs = 6;
  cfg.learning_rate = 0.5;
  const auto a = train(data.train, data.test, w, cfg);
  const auto b = train(data.train, data.test, w, cfg);
  CHECK(a.head == b.head);
  CHECK(*a.predictor == *b.predictor);
  REQUIRE(a.log.rows.size() == 6);
  for (std::size_t i = 0; i < a.log.rows.size(); ++i) {
    const auto& r = a.log.rows[i];
    CHECK(r.epoch == static_cast<int>(i) + 1);
    CHECK(std::isfinite(r.total_loss));
    CHECK(r.lambda_s == 0.0);
  }
  CHECK(a.log.rows.back().total_loss < a.log.rows.front().total_loss);

  w.lambda_s_max = 1.0;
  const auto reg = train(data.train, data.test, w, cfg);
  CHECK(reg.log.rows[0].lambda_s == 0.0);
  CHECK(reg.log.rows[2].lambda_s == doctest::Approx(0.4));
  CHECK(reg.log.rows[5].lambda_s == 1.0);

  // concept-only data trains the head on c*
  Dataset concepts_only = data.train;
  concepts_only.feature_dim = 0;
  for (auto& s : concepts_only.samples) s.features.reset();
  const auto head_only = train(concepts_only, concepts_only, LossWeights{}, cfg);
  CHECK_FALSE(head_only.predictor.has_value());

  TrainConfig bad = cfg;
  bad.learning_rate = 1e300;
  bad.grad_clip_norm = 0;
  CHECK_THROWS_AS(train(data.train, data.test, LossWeights{}, bad), TrainingError);
}

TEST_CASE("converged baseline accuracy on separable synthetic data") {
  const auto data = synth_generate(SyntheticConfig{});
  TrainConfig cfg;
  cfg.learning_rate = 0.5;  // the bundled configuration's rate
  const auto r = train(data.train, data.test, LossWeights{}, cfg);
  CHECK(r.log.rows.size() == 50);
  CHECK(r.log.rows.back().val_accuracy >= 0.95);
}

TEST_CASE("robustness bound report") {
  DatasetRobustness m;
  m.n_aggregated = 1;
  SampleRobustness s;
  s.rho = 2;
  s.attack_feasible = true;
  m.samples = {s};
  TrainLog log;
  EpochRecord row;
  row.stability_loss = -1.0;
  log.rows = {row};
  LossWeights w;
  const auto none = robustness_bound_report(log, w, m);
  CHECK(none.rhs == 0.0);
  CHECK(none.holds);
  CHECK(none.lhs == doctest::Approx(4.0));
  w.lambda_s_max = 1.0;
  const auto some = robustness_bound_report(log, w, m);
  CHECK(some.rhs == doctest::Approx(std::exp(0.5) - 1));
  log.rows[0].stability_loss = 0.0;
  CHECK(robustness_bound_report(log, w, m).rhs == 0.0);
}
