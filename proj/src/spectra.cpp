#include "cbm/spectra.hpp"

#include "cbm/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <random>

namespace cbm {

namespace {

struct SingleConstraintGeometry {
  Vector direction;   // w_t - w_y
  double dir_norm;    // ||w_t - w_y||
  double rhs;         // beta_y + epsilon
  double delta_norm;  // max(rhs, 0) / dir_norm
};

SingleConstraintGeometry geometry(const LinearHead& head, const LabeledSample& s, ClassIndex t,
                                  const AttackConfig& cfg) {
  if (s.label >= head.num_classes() || t >= head.num_classes()) throw ParameterError("class index out of range");
  if (t == s.label) throw ParameterError("stability target equals true class");
  if (static_cast<std::size_t>(s.concepts.size()) != head.num_concepts())
    throw ShapeError("concept vector length differs from head K");
  SingleConstraintGeometry g;
  g.direction = head.weights().row(t) - head.weights().row(s.label);
  g.dir_norm = g.direction.norm();
  if (g.dir_norm == 0.0) throw DegenerateError("w_t equals w_y: stability term undefined");
  const Vector z = logits(head, s.concepts);
  g.rhs = z[static_cast<Eigen::Index>(s.label)] - z[static_cast<Eigen::Index>(t)] + cfg.epsilon;
  g.delta_norm = g.rhs > 0.0 ? g.rhs / g.dir_norm : 0.0;
  return g;
}

Matrix random_matrix(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, stddev);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) m(i, j) = normal(rng);
  return m;
}

Vector softmax(const Vector& z) {
  const double mx = z.maxCoeff();
  Vector e = (z.array() - mx).exp();
  return e / e.sum();
}

double bce_term(double p, double truth) {
  const double q = std::clamp(p, kBceClip, 1.0 - kBceClip);
  return -(truth * std::log(q) + (1.0 - truth) * std::log(1.0 - q));
}

// d BCE / d p, zero where the clip is active.
double bce_derivative(double p, double truth) {
  if (p < kBceClip || p > 1.0 - kBceClip) return 0.0;
  return -(truth / p - (1.0 - truth) / (1.0 - p));
}

double learning_rate_at(const TrainConfig& cfg, int epoch_index) {
  if (cfg.schedule == LrSchedule::constant) return cfg.learning_rate;
  return 0.5 * cfg.learning_rate * (1.0 + std::cos(std::numbers::pi * epoch_index / cfg.epochs));
}

}  // namespace

void LossWeights::validate() const {
  for (double v : {lambda_c, lambda_y, lambda_s_max, lambda_r})
    if (!std::isfinite(v) || v < 0.0) throw ParameterError("loss weights must be finite and >= 0");
  if (warmup_epochs < 0) throw ParameterError("warmup_epochs must be >= 0");
}

std::string_view to_string(TargetRule r) {
  switch (r) {
    case TargetRule::true_runner_up:
      return "true_runner_up";
    case TargetRule::fixed:
      return "fixed";
    case TargetRule::nearest:
      return "nearest";
  }
  return "true_runner_up";
}

TargetRule target_rule_from_string(std::string_view s) {
  if (s == "true_runner_up") return TargetRule::true_runner_up;
  if (s == "fixed") return TargetRule::fixed;
  if (s == "nearest") return TargetRule::nearest;
  throw ParameterError("unknown target rule '" + std::string(s) + "'");
}

std::string_view to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

LrSchedule lr_schedule_from_string(std::string_view s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw ParameterError("unknown learning-rate schedule '" + std::string(s) + "'");
}

void TrainConfig::validate() const {
  if (epochs < 1) throw ParameterError("epochs must be >= 1");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ParameterError("learning_rate must be > 0");
  if (!(weight_decay >= 0.0)) throw ParameterError("weight_decay must be >= 0");
  if (batch_size < 1) throw ParameterError("batch_size must be >= 1");
  attack.validate();
}

ClassIndex stability_target(const LinearHead& head, const LabeledSample& s, TargetRule rule, ClassIndex fixed_target,
                            const AttackConfig& cfg) {
  const auto y = s.label;
  if (y >= head.num_classes()) throw ParameterError("label out of range");
  if (rule == TargetRule::fixed && fixed_target != y) {
    if (fixed_target >= head.num_classes()) throw ParameterError("fixed target out of range");
    return fixed_target;
  }
  if (rule == TargetRule::nearest) {
    std::optional<ClassIndex> best;
    double best_norm = 0.0;
    for (ClassIndex t = 0; t < head.num_classes(); ++t) {
      if (t == y) continue;
      try {
        const double n = geometry(head, s, t, cfg).delta_norm;
        if (!best || n < best_norm) {
          best = t;
          best_norm = n;
        }
      } catch (const DegenerateError&) {
      }
    }
    if (!best) throw DegenerateError("every target class is degenerate");
    return *best;
  }
  Vector z = logits(head, s.concepts);
  z[static_cast<Eigen::Index>(y)] = -std::numeric_limits<double>::infinity();
  return argmax(z);
}

double stability_loss_for_target(const LinearHead& head, const LabeledSample& s, ClassIndex t,
                                 const AttackConfig& cfg) {
  const auto g = geometry(head, s, t, cfg);
  return -std::log1p(g.delta_norm * g.delta_norm);
}

double stability_loss(const LinearHead& head, const LabeledSample& s, const AttackConfig& cfg, TargetRule rule,
                      ClassIndex fixed_target) {
  return stability_loss_for_target(head, s, stability_target(head, s, rule, fixed_target, cfg), cfg);
}

double concept_loss(const Vector& predicted, const Vector& truth) {
  if (predicted.size() != truth.size()) throw ShapeError("concept_loss: length mismatch");
  if (predicted.size() == 0) throw ShapeError("concept_loss: empty vectors");
  double sum = 0.0;
  for (Eigen::Index k = 0; k < predicted.size(); ++k) sum += bce_term(predicted[k], truth[k]);
  return sum / static_cast<double>(predicted.size());
}

double concept_loss(const ConceptVector& predicted, const ConceptVector& truth) {
  return concept_loss(predicted.values(), truth.values());
}

double class_loss(const Vector& z, ClassIndex y_star) {
  if (y_star >= static_cast<std::size_t>(z.size())) throw ParameterError("class_loss: label out of range");
  const double mx = z.maxCoeff();
  const double lse = mx + std::log((z.array() - mx).exp().sum());
  return lse - z[static_cast<Eigen::Index>(y_star)];
}

double warmup_lambda(const LossWeights& w, int epoch) {
  if (epoch < 0) throw ParameterError("epoch must be >= 0");
  if (w.warmup_epochs <= 0) return w.lambda_s_max;
  if (epoch >= w.warmup_epochs) return w.lambda_s_max;
  return w.lambda_s_max * (static_cast<double>(epoch) / static_cast<double>(w.warmup_epochs));
}

double total_loss(double l_c, double l_y, double l_s, double l_r, const LossWeights& w, int epoch) {
  const double lambda_s = warmup_lambda(w, epoch);
  double total = w.lambda_c * l_c + w.lambda_y * l_y + w.lambda_r * l_r;
  if (lambda_s != 0.0) total += lambda_s * l_s;
  return total;
}

HeadGradient stability_grad(const LinearHead& head, const LabeledSample& s, ClassIndex t, const AttackConfig& cfg) {
  const auto g = geometry(head, s, t, cfg);
  HeadGradient out{Matrix::Zero(head.weights().rows(), head.weights().cols()), Vector::Zero(head.bias().size())};
  if (g.rhs <= 0.0) return out;

  const double n = g.dir_norm;
  const double prefactor = -2.0 * g.delta_norm / (1.0 + g.delta_norm * g.delta_norm);
  // d||delta||/dW_y = c*/n + rhs * d / n^3, and the negation for row t.
  const Vector row_y = s.concepts.values() / n + (g.rhs / (n * n * n)) * g.direction;
  out.weights.row(s.label) = prefactor * row_y;
  out.weights.row(t) = -prefactor * row_y;
  out.bias[static_cast<Eigen::Index>(s.label)] = prefactor / n;
  out.bias[static_cast<Eigen::Index>(t)] = -prefactor / n;
  return out;
}

InitialModel initial_model(std::size_t num_concepts, std::size_t num_classes, std::size_t feature_dim,
                           std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::optional<LinearConceptPredictor> predictor;
  if (feature_dim > 0)
    predictor.emplace(random_matrix(num_concepts, feature_dim, 1.0 / std::sqrt(double(feature_dim)), rng),
                      Vector::Zero(num_concepts));
  LinearHead head(random_matrix(num_classes, num_concepts, 1.0 / std::sqrt(double(num_concepts)), rng),
                  Vector::Zero(num_classes));
  return {std::move(predictor), std::move(head)};
}

std::vector<Vector> model_concepts(const std::optional<LinearConceptPredictor>& predictor, const Dataset& d) {
  std::vector<Vector> out;
  out.reserve(d.samples.size());
  for (const auto& s : d.samples)
    out.push_back(predictor && s.features ? predictor->forward(*s.features) : s.concepts.values());
  return out;
}

double accuracy(const std::optional<LinearConceptPredictor>& predictor, const LinearHead& head, const Dataset& d) {
  if (d.samples.empty()) throw ParameterError("accuracy of an empty dataset");
  const auto concepts = model_concepts(predictor, d);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < concepts.size(); ++i)
    if (predict(head, concepts[i]) == d.samples[i].label) ++hits;
  return static_cast<double>(hits) / static_cast<double>(d.samples.size());
}

TrainResult train(const Dataset& train_set, const Dataset& val_set, const LossWeights& w, const TrainConfig& cfg) {
  w.validate();
  cfg.validate();
  train_set.validate();
  val_set.validate();
  if (train_set.samples.empty()) throw ParameterError("training set is empty");
  if (val_set.num_concepts != train_set.num_concepts || val_set.num_classes != train_set.num_classes ||
      val_set.feature_dim != train_set.feature_dim)
    throw ShapeError("training and validation sets disagree on K, C or d");
  if (train_set.num_classes < 2) throw ShapeError("training needs at least 2 classes");

  const auto num_concepts = static_cast<Eigen::Index>(train_set.num_concepts);
  const bool with_predictor = train_set.has_features();
  auto init = initial_model(train_set.num_concepts, train_set.num_classes, train_set.feature_dim, cfg.seed);
  Matrix head_w = init.head.weights();
  Vector head_b = init.head.bias();
  Matrix pred_w = with_predictor ? init.predictor->weights() : Matrix();
  Vector pred_b = with_predictor ? init.predictor->bias() : Vector();

  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::size_t> order(train_set.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});

  TrainLog log;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    const double lambda_s = warmup_lambda(w, epoch);
    const double lr = learning_rate_at(cfg, epoch);
    double sum_c = 0.0, sum_y = 0.0, sum_s = 0.0, sum_total = 0.0;
    int batches = 0;

    for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      const double inv_n = 1.0 / static_cast<double>(stop - start);
      const LinearHead head(head_w, head_b);

      Matrix g_head_w = Matrix::Zero(head_w.rows(), head_w.cols());
      Vector g_head_b = Vector::Zero(head_b.size());
      Matrix g_pred_w = Matrix::Zero(pred_w.rows(), pred_w.cols());
      Vector g_pred_b = Vector::Zero(pred_b.size());
      double l_c = 0.0, l_y = 0.0, l_s = 0.0, l_r = 0.0;

      for (std::size_t i = start; i < stop; ++i) {
        const LabeledSample& s = train_set.samples[order[i]];
        const Vector& truth = s.concepts.values();
        Vector c;
        if (with_predictor) {
          Vector z = pred_w * *s.features;
          z += pred_b;
          c = z.unaryExpr([](double v) { return sigmoid(v); });
          l_c += concept_loss(c, truth);
          l_r += c.cwiseAbs().mean();
        } else {
          c = truth;
        }

        Vector z = head_w * c;
        z += head_b;
        l_y += class_loss(z, s.label);
        Vector g_logits = softmax(z);
        g_logits[static_cast<Eigen::Index>(s.label)] -= 1.0;
        g_head_w.noalias() += w.lambda_y * g_logits * c.transpose();
        g_head_b += w.lambda_y * g_logits;

        if (with_predictor) {
          Vector g_c = w.lambda_y * (head_w.transpose() * g_logits);
          for (Eigen::Index k = 0; k < num_concepts; ++k) {
            g_c[k] += w.lambda_c * bce_derivative(c[k], truth[k]) / static_cast<double>(num_concepts);
            g_c[k] += w.lambda_r / static_cast<double>(num_concepts);  // c > 0 under the sigmoid
          }
          const Vector g_z = g_c.cwiseProduct(c.cwiseProduct((1.0 - c.array()).matrix()));
          g_pred_w.noalias() += g_z * s.features->transpose();
          g_pred_b += g_z;
        }

        try {
          const ClassIndex t = stability_target(head, s, cfg.target_rule, cfg.fixed_target, cfg.attack);
          l_s += stability_loss_for_target(head, s, t, cfg.attack);
          if (lambda_s > 0.0) {
            const HeadGradient gs = stability_grad(head, s, t, cfg.attack);
            g_head_w += lambda_s * gs.weights;
            g_head_b += lambda_s * gs.bias;
          }
        } catch (const DegenerateError&) {
          // no attack direction for this sample; the term contributes nothing
        }
      }

      l_c *= inv_n;
      l_y *= inv_n;
      l_s *= inv_n;
      l_r *= inv_n;
      const double l_total = total_loss(l_c, l_y, l_s, l_r, w, epoch);
      if (!std::isfinite(l_total)) throw TrainingError("non-finite training loss", epoch + 1, int(batch) + 1);

      g_head_w *= inv_n;
      g_head_b *= inv_n;
      g_pred_w *= inv_n;
      g_pred_b *= inv_n;
      g_head_w += cfg.weight_decay * head_w;
      if (with_predictor) g_pred_w += cfg.weight_decay * pred_w;

      if (cfg.grad_clip_norm > 0.0) {
        const double norm = std::sqrt(g_head_w.squaredNorm() + g_head_b.squaredNorm() + g_pred_w.squaredNorm() +
                                      g_pred_b.squaredNorm());
        if (norm > cfg.grad_clip_norm) {
          const double scale = cfg.grad_clip_norm / norm;
          g_head_w *= scale;
          g_head_b *= scale;
          g_pred_w *= scale;
          g_pred_b *= scale;
        }
      }
      if (!g_head_w.allFinite() || !g_head_b.allFinite() || !g_pred_w.allFinite() || !g_pred_b.allFinite())
        throw TrainingError("non-finite gradient", epoch + 1, int(batch) + 1);

      head_w -= lr * g_head_w;
      head_b -= lr * g_head_b;
      if (with_predictor) {
        pred_w -= lr * g_pred_w;
        pred_b -= lr * g_pred_b;
      }
      if (!head_w.allFinite() || !head_b.allFinite() || !pred_w.allFinite() || !pred_b.allFinite())
        throw TrainingError("parameters overflowed", epoch + 1, int(batch) + 1);

      sum_c += l_c;
      sum_y += l_y;
      sum_s += l_s;
      sum_total += l_total;
      ++batches;
    }

    std::optional<LinearConceptPredictor> predictor;
    if (with_predictor) predictor.emplace(pred_w, pred_b);
    const LinearHead head(head_w, head_b, train_set.class_names);
    EpochRecord row;
    row.epoch = epoch + 1;
    row.concept_loss = sum_c / batches;
    row.class_loss = sum_y / batches;
    row.stability_loss = sum_s / batches;
    row.total_loss = sum_total / batches;
    row.lambda_s = lambda_s;
    if (!val_set.samples.empty()) {
      row.val_accuracy = accuracy(predictor, head, val_set);
      row.val_mean_attackability = dataset_robustness(head, val_set, cfg.attack).mean_attackability;
    } else {
      row.val_accuracy = row.val_mean_attackability = std::numeric_limits<double>::quiet_NaN();
    }
    log.rows.push_back(row);
  }

  std::optional<LinearConceptPredictor> predictor;
  if (with_predictor) predictor.emplace(pred_w, pred_b);
  return {std::move(predictor), LinearHead(head_w, head_b, train_set.class_names), std::move(log)};
}

BoundReport robustness_bound_report(const TrainLog& log, const LossWeights& w, const DatasetRobustness& final_metrics) {
  BoundReport r;
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& s : final_metrics.samples) {
    if (!s.attack_feasible || !s.correctly_classified) continue;
    sum += s.rho * s.rho;
    ++n;
  }
  r.lhs = n ? sum / static_cast<double>(n) : 0.0;
  const double expected_stability = log.rows.empty() ? 0.0 : log.rows.back().stability_loss;
  const double exponent_num = -w.lambda_s_max * expected_stability;
  const double denom = w.lambda_c + w.lambda_y;
  if (exponent_num == 0.0) {
    r.rhs = 0.0;
  } else if (denom == 0.0) {
    r.rhs = exponent_num > 0.0 ? std::numeric_limits<double>::infinity() : -1.0;
  } else {
    r.rhs = std::expm1(exponent_num / denom);
  }
  r.holds = r.lhs >= r.rhs;
  return r;
}

MlpHead train_mlp_head(const Dataset& d, const MlpTrainConfig& cfg) {
  d.validate();
  if (d.samples.empty()) throw ParameterError("training set is empty");
  if (cfg.epochs < 1 || cfg.batch_size < 1 || !(cfg.learning_rate > 0.0))
    throw ParameterError("invalid MLP training configuration");

  std::mt19937_64 rng(cfg.seed);
  std::vector<std::size_t> dims{d.num_concepts};
  dims.insert(dims.end(), cfg.hidden.begin(), cfg.hidden.end());
  dims.push_back(d.num_classes);

  std::vector<DenseLayer> layers;
  for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
    const bool last = i + 2 == dims.size();
    layers.push_back({random_matrix(dims[i + 1], dims[i], 1.0 / std::sqrt(double(dims[i])), rng),
                      Vector::Zero(dims[i + 1]), last ? Activation::identity : cfg.hidden_activation});
  }

  std::vector<std::size_t> order(d.samples.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  const std::size_t depth = layers.size();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t stop = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
      std::vector<Matrix> gw(depth);
      std::vector<Vector> gb(depth);
      for (std::size_t l = 0; l < depth; ++l) {
        gw[l] = Matrix::Zero(layers[l].weights.rows(), layers[l].weights.cols());
        gb[l] = Vector::Zero(layers[l].bias.size());
      }
      for (std::size_t i = start; i < stop; ++i) {
        const auto& s = d.samples[order[i]];
        std::vector<Vector> acts{s.concepts.values()};
        for (const auto& layer : layers) {
          Vector z = layer.weights * acts.back();
          z += layer.bias;
          if (layer.activation == Activation::relu) z = z.cwiseMax(0.0);
          if (layer.activation == Activation::sigmoid) z = z.unaryExpr([](double v) { return sigmoid(v); });
          acts.push_back(std::move(z));
        }
        Vector delta = softmax(acts.back());
        delta[static_cast<Eigen::Index>(s.label)] -= 1.0;
        for (std::size_t l = depth; l-- > 0;) {
          gw[l].noalias() += delta * acts[l].transpose();
          gb[l] += delta;
          if (l == 0) break;
          Vector back = layers[l].weights.transpose() * delta;
          const Vector& a = acts[l];
          if (layers[l - 1].activation == Activation::relu)
            back = back.cwiseProduct((a.array() > 0.0).cast<double>().matrix());
          else if (layers[l - 1].activation == Activation::sigmoid)
            back = back.cwiseProduct(a.cwiseProduct((1.0 - a.array()).matrix()));
          delta = std::move(back);
        }
      }
      const double inv_n = 1.0 / static_cast<double>(stop - start);
      for (std::size_t l = 0; l < depth; ++l) {
        layers[l].weights -= cfg.learning_rate * (gw[l] * inv_n + cfg.weight_decay * layers[l].weights);
        layers[l].bias -= cfg.learning_rate * gb[l] * inv_n;
      }
    }
  }
  return MlpHead(std::move(layers));
}

}  // namespace cbm
