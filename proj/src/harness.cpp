#include "cbm/harness.hpp"

#include "cbm/error.hpp"

#include <json.hpp>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <istream>
#include <limits>
#include <mutex>
#include <ostream>
#include <sstream>
#include <thread>

namespace cbm {

using nlohmann::json;

namespace {

constexpr const char* kCsvMagic = "# cbm-sweep-report v1";
constexpr const char* kCsvHeader =
    "lambda_s,accuracy,mean_attackability,mean_rel_pert_norm,sparsity,mean_stability_loss,bound_lhs,bound_rhs,"
    "bound_holds,status";

bool same(double a, double b) { return (std::isnan(a) && std::isnan(b)) || a == b; }

bool same(const std::optional<double>& a, const std::optional<double>& b) {
  if (a.has_value() != b.has_value()) return false;
  return !a || same(*a, *b);
}

std::string single_line(std::string s) {
  std::replace_if(s.begin(), s.end(), [](char c) { return c == '\n' || c == '\r' || c == ','; }, ';');
  return s;
}

std::string optional_text(const std::optional<double>& v) { return v ? format_double(*v) : std::string("none"); }

std::optional<double> optional_value(const std::string& s, std::size_t line) {
  if (s == "none") return std::nullopt;
  return parse_double(s, line);
}

json number(double v) {
  if (std::isfinite(v)) return v;
  return format_double(v);  // "nan", "inf", "-inf"
}

double number(const json& j) {
  if (j.is_number()) return j.get<double>();
  if (j.is_string()) return parse_double(j.get<std::string>());
  throw FormatError("expected a number");
}

void check_keys(const json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw ParameterError(where + ": expected an object");
  for (const auto& [key, value] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw ParameterError(where + ": unknown field '" + key + "'");
  }
}

template <typename T>
void take(const json& j, const char* key, T& into) {
  if (j.contains(key)) into = j.at(key).get<T>();
}

void parse_attack(const json& j, AttackConfig& a) {
  check_keys(j, {"epsilon", "max_relin_iters", "clamp_concepts"}, "attack");
  take(j, "epsilon", a.epsilon);
  take(j, "max_relin_iters", a.max_relin_iters);
  take(j, "clamp_concepts", a.clamp_concepts);
}

void parse_train(const json& j, TrainConfig& t) {
  check_keys(j,
             {"epochs", "learning_rate", "weight_decay", "batch_size", "seed", "target_rule", "fixed_target", "schedule",
              "grad_clip_norm", "attack"},
             "train");
  take(j, "epochs", t.epochs);
  take(j, "learning_rate", t.learning_rate);
  take(j, "weight_decay", t.weight_decay);
  take(j, "batch_size", t.batch_size);
  take(j, "seed", t.seed);
  if (j.contains("target_rule")) t.target_rule = target_rule_from_string(j.at("target_rule").get<std::string>());
  take(j, "fixed_target", t.fixed_target);
  if (j.contains("schedule")) t.schedule = lr_schedule_from_string(j.at("schedule").get<std::string>());
  take(j, "grad_clip_norm", t.grad_clip_norm);
  if (j.contains("attack")) parse_attack(j.at("attack"), t.attack);
}

void parse_weights(const json& j, LossWeights& w) {
  check_keys(j, {"lambda_c", "lambda_y", "lambda_s_max", "lambda_r", "warmup_epochs"}, "weights");
  take(j, "lambda_c", w.lambda_c);
  take(j, "lambda_y", w.lambda_y);
  take(j, "lambda_s_max", w.lambda_s_max);
  take(j, "lambda_r", w.lambda_r);
  take(j, "warmup_epochs", w.warmup_epochs);
}

void parse_synthetic(const json& j, SyntheticConfig& s) {
  check_keys(j,
             {"num_concepts", "num_classes", "feature_dim", "n_per_class", "sharpness", "feature_noise_std",
              "train_fraction", "seed"},
             "synthetic");
  take(j, "num_concepts", s.num_concepts);
  take(j, "num_classes", s.num_classes);
  take(j, "feature_dim", s.feature_dim);
  take(j, "n_per_class", s.n_per_class);
  take(j, "sharpness", s.sharpness);
  take(j, "feature_noise_std", s.feature_noise_std);
  take(j, "train_fraction", s.train_fraction);
  take(j, "seed", s.seed);
}

json parse_json(const std::string& text) {
  try {
    return json::parse(text);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("invalid JSON: ") + e.what());
  }
}

}  // namespace

void SweepConfig::validate() const {
  if (lambda_grid.empty()) throw ParameterError("lambda_grid must not be empty");
  for (std::size_t i = 0; i < lambda_grid.size(); ++i) {
    if (!std::isfinite(lambda_grid[i]) || lambda_grid[i] < 0.0) throw ParameterError("lambda_grid values must be finite and >= 0");
    if (i > 0 && !(lambda_grid[i] > lambda_grid[i - 1])) throw ParameterError("lambda_grid must be strictly increasing");
  }
  if (parallel_runs < 1) throw ParameterError("parallel_runs must be >= 1");
  train.validate();
  weights.validate();
}

bool SweepRow::operator==(const SweepRow& o) const {
  return same(lambda_s, o.lambda_s) && same(accuracy, o.accuracy) && same(mean_attackability, o.mean_attackability) &&
         same(mean_rel_pert_norm, o.mean_rel_pert_norm) && same(sparsity, o.sparsity) &&
         same(mean_stability_loss, o.mean_stability_loss) && same(bound_lhs, o.bound_lhs) &&
         same(bound_rhs, o.bound_rhs) && bound_holds == o.bound_holds && status == o.status;
}

bool PhaseTransition::operator==(const PhaseTransition& o) const {
  return same(critical_lambda, o.critical_lambda) && same(max_ratio, o.max_ratio) &&
         same(reference_lambda, o.reference_lambda) && diverges_from_reference == o.diverges_from_reference &&
         note == o.note;
}

bool SweepReport::all_ok() const {
  return std::all_of(rows.begin(), rows.end(), [](const SweepRow& r) { return r.status == "ok"; });
}

bool SweepReport::operator==(const SweepReport& o) const { return rows == o.rows && transition == o.transition; }

PhaseTransition detect_phase_transition(const SweepReport& report, std::optional<double> reference_lambda, double floor,
                                        double threshold) {
  if (!(floor > 0.0)) throw ParameterError("drop-ratio floor must be positive");
  std::vector<const SweepRow*> valid;
  for (const auto& r : report.rows)
    if (r.status == "ok" && std::isfinite(r.mean_attackability)) valid.push_back(&r);
  if (valid.size() < 2) throw MetricError("phase-transition detection needs at least 2 rows with finite attackability");

  PhaseTransition out;
  out.reference_lambda = reference_lambda;
  std::optional<double> argmax_lambda;
  for (std::size_t i = 1; i < valid.size(); ++i) {
    const double ratio = valid[i - 1]->mean_attackability / std::max(valid[i]->mean_attackability, floor);
    if (!argmax_lambda || ratio > out.max_ratio) {
      out.max_ratio = ratio;
      argmax_lambda = valid[i]->lambda_s;
    }
  }
  if (out.max_ratio >= threshold) out.critical_lambda = argmax_lambda;

  std::ostringstream note;
  if (out.critical_lambda) {
    note << "critical lambda_s " << format_double(*out.critical_lambda) << " (drop ratio " << format_double(out.max_ratio) << ")";
  } else {
    note << "none detected (max drop ratio " << format_double(out.max_ratio) << " < " << format_double(threshold) << ")";
  }
  if (reference_lambda && !(out.critical_lambda && *out.critical_lambda == *reference_lambda)) {
    out.diverges_from_reference = true;
    note << "; differs from reference " << format_double(*reference_lambda);
  }
  out.note = note.str();
  return out;
}

SplitDataset resolve_data(const DataSource& source) {
  switch (source.kind) {
    case DataSource::Kind::synthetic:
      return synth_generate(source.synthetic);
    case DataSource::Kind::files:
      return {dataset_load(source.train_path), dataset_load(source.test_path)};
    case DataSource::Kind::cub: {
      const auto ingested = cub_ingest(source.cub);
      return source.cub_official_split ? official_split(ingested)
                                       : stratified_split(ingested.dataset, source.cub.train_fraction, 0);
    }
  }
  throw ParameterError("unknown data source");
}

SweepRow evaluate_lambda(const SplitDataset& data, double lambda_s, const LossWeights& weights, const TrainConfig& cfg) {
  LossWeights w = weights;
  w.lambda_s_max = lambda_s;
  SweepRow row;
  row.lambda_s = lambda_s;
  const TrainResult model = train(data.train, data.test, w, cfg);
  const DatasetRobustness metrics = dataset_robustness(model.head, data.test, cfg.attack);
  row.accuracy = accuracy(model.predictor, model.head, data.test);
  row.mean_attackability = metrics.mean_attackability;
  row.mean_rel_pert_norm = metrics.mean_rel_pert_norm;
  const auto concepts = model_concepts(model.predictor, data.test);
  row.sparsity = sparsity_metric(std::span<const Vector>(concepts));
  row.mean_stability_loss = model.log.rows.back().stability_loss;
  const BoundReport bound = robustness_bound_report(model.log, w, metrics);
  row.bound_lhs = bound.lhs;
  row.bound_rhs = bound.rhs;
  row.bound_holds = bound.holds;
  return row;
}

SweepReport run_sweep(const SweepConfig& cfg, const SplitDataset& data) {
  cfg.validate();
  const std::size_t n = cfg.lambda_grid.size();
  SweepReport report;
  report.rows.resize(n);

  auto run_one = [&](std::size_t i) {
    const double lambda = cfg.lambda_grid[i];
    try {
      report.rows[i] = evaluate_lambda(data, lambda, cfg.weights, cfg.train);
    } catch (const std::exception& e) {
      SweepRow failed;
      failed.lambda_s = lambda;
      failed.accuracy = failed.mean_attackability = failed.mean_rel_pert_norm = failed.sparsity =
          failed.mean_stability_loss = failed.bound_lhs = failed.bound_rhs = std::numeric_limits<double>::quiet_NaN();
      failed.bound_holds = false;
      failed.status = "error: " + single_line(e.what());
      report.rows[i] = std::move(failed);
    }
  };

  const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(cfg.parallel_runs), n);
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) run_one(i);
  } else {
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w)
      pool.emplace_back([&] {
        for (std::size_t i = next++; i < n; i = next++) run_one(i);
      });
    for (auto& t : pool) t.join();
  }

  try {
    report.transition = detect_phase_transition(report, cfg.reference_lambda);
  } catch (const MetricError& e) {
    report.transition.reference_lambda = cfg.reference_lambda;
    report.transition.note = std::string("none detected: ") + e.what();
  }
  return report;
}

SweepReport run_sweep(const SweepConfig& cfg) {
  cfg.validate();
  return run_sweep(cfg, resolve_data(cfg.data));
}

void write_sweep_csv(std::ostream& out, const SweepReport& report) {
  const auto& t = report.transition;
  out << kCsvMagic << '\n';
  out << "# critical_lambda: " << optional_text(t.critical_lambda) << '\n';
  out << "# max_drop_ratio: " << format_double(t.max_ratio) << '\n';
  out << "# reference_lambda: " << optional_text(t.reference_lambda) << '\n';
  out << "# diverges_from_reference: " << (t.diverges_from_reference ? 1 : 0) << '\n';
  out << "# note: " << single_line(t.note) << '\n';
  out << kCsvHeader << '\n';
  for (const auto& r : report.rows) {
    out << format_double(r.lambda_s) << ',' << format_double(r.accuracy) << ',' << format_double(r.mean_attackability)
        << ',' << format_double(r.mean_rel_pert_norm) << ',' << format_double(r.sparsity) << ','
        << format_double(r.mean_stability_loss) << ',' << format_double(r.bound_lhs) << ','
        << format_double(r.bound_rhs) << ',' << (r.bound_holds ? 1 : 0) << ',' << single_line(r.status) << '\n';
  }
}

SweepReport read_sweep_csv(std::istream& in) {
  SweepReport report;
  std::string line;
  std::size_t number = 0;
  auto meta = [&](const char* key) {
    if (!std::getline(in, line)) throw FormatError("truncated report header", number + 1);
    ++number;
    const std::string prefix = std::string("# ") + key + ": ";
    if (line.rfind(prefix, 0) != 0) throw FormatError(std::string("expected '") + key + "'", number);
    return line.substr(prefix.size());
  };
  if (!std::getline(in, line) || line != kCsvMagic) throw FormatError("missing report signature", 1);
  ++number;
  auto& t = report.transition;
  t.critical_lambda = optional_value(meta("critical_lambda"), number);
  t.max_ratio = parse_double(meta("max_drop_ratio"), number);
  t.reference_lambda = optional_value(meta("reference_lambda"), number);
  t.diverges_from_reference = meta("diverges_from_reference") == "1";
  t.note = meta("note");
  if (!std::getline(in, line) || line != kCsvHeader) throw FormatError("unexpected column header", number + 1);
  ++number;
  while (std::getline(in, line)) {
    ++number;
    if (line.empty() || line[0] == '#') continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
    if (f.size() != 10) throw FormatError("expected 10 columns", number);
    SweepRow r;
    r.lambda_s = parse_double(f[0], number);
    r.accuracy = parse_double(f[1], number);
    r.mean_attackability = parse_double(f[2], number);
    r.mean_rel_pert_norm = parse_double(f[3], number);
    r.sparsity = parse_double(f[4], number);
    r.mean_stability_loss = parse_double(f[5], number);
    r.bound_lhs = parse_double(f[6], number);
    r.bound_rhs = parse_double(f[7], number);
    r.bound_holds = f[8] == "1";
    r.status = f[9];
    report.rows.push_back(std::move(r));
  }
  return report;
}

std::string sweep_to_json(const SweepReport& report) {
  json rows = json::array();
  for (const auto& r : report.rows) {
    rows.push_back({{"lambda_s", number(r.lambda_s)},
                    {"accuracy", number(r.accuracy)},
                    {"mean_attackability", number(r.mean_attackability)},
                    {"mean_rel_pert_norm", number(r.mean_rel_pert_norm)},
                    {"sparsity", number(r.sparsity)},
                    {"mean_stability_loss", number(r.mean_stability_loss)},
                    {"bound_lhs", number(r.bound_lhs)},
                    {"bound_rhs", number(r.bound_rhs)},
                    {"bound_holds", r.bound_holds},
                    {"status", r.status}});
  }
  const auto& t = report.transition;
  json transition = {{"critical_lambda", t.critical_lambda ? number(*t.critical_lambda) : json(nullptr)},
                     {"max_drop_ratio", number(t.max_ratio)},
                     {"reference_lambda", t.reference_lambda ? number(*t.reference_lambda) : json(nullptr)},
                     {"diverges_from_reference", t.diverges_from_reference},
                     {"note", t.note}};
  return json{{"format", "cbm-sweep-report"}, {"version", 1}, {"rows", rows}, {"phase_transition", transition}}.dump(2);
}

SweepReport sweep_from_json(const std::string& text) {
  const json j = parse_json(text);
  try {
    if (j.at("format") != "cbm-sweep-report" || j.at("version") != 1) throw FormatError("not a version-1 sweep report");
    SweepReport report;
    for (const auto& r : j.at("rows")) {
      SweepRow row;
      row.lambda_s = number(r.at("lambda_s"));
      row.accuracy = number(r.at("accuracy"));
      row.mean_attackability = number(r.at("mean_attackability"));
      row.mean_rel_pert_norm = number(r.at("mean_rel_pert_norm"));
      row.sparsity = number(r.at("sparsity"));
      row.mean_stability_loss = number(r.at("mean_stability_loss"));
      row.bound_lhs = number(r.at("bound_lhs"));
      row.bound_rhs = number(r.at("bound_rhs"));
      row.bound_holds = r.at("bound_holds").get<bool>();
      row.status = r.at("status").get<std::string>();
      report.rows.push_back(std::move(row));
    }
    const auto& t = j.at("phase_transition");
    if (!t.at("critical_lambda").is_null()) report.transition.critical_lambda = number(t.at("critical_lambda"));
    report.transition.max_ratio = number(t.at("max_drop_ratio"));
    if (!t.at("reference_lambda").is_null()) report.transition.reference_lambda = number(t.at("reference_lambda"));
    report.transition.diverges_from_reference = t.at("diverges_from_reference").get<bool>();
    report.transition.note = t.at("note").get<std::string>();
    return report;
  } catch (const json::exception& e) {
    throw FormatError(std::string("malformed sweep report: ") + e.what());
  }
}

SyntheticConfig synthetic_config_from_json(const std::string& text) {
  SyntheticConfig cfg;
  try {
    parse_synthetic(parse_json(text), cfg);
  } catch (const json::exception& e) {
    throw ParameterError(std::string("synthetic config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

void train_config_from_json(const std::string& text, TrainConfig& cfg, LossWeights& weights) {
  const json j = parse_json(text);
  try {
    check_keys(j, {"train", "weights"}, "training config");
    if (j.contains("train")) parse_train(j.at("train"), cfg);
    if (j.contains("weights")) parse_weights(j.at("weights"), weights);
  } catch (const json::exception& e) {
    throw ParameterError(std::string("training config: ") + e.what());
  }
  cfg.validate();
  weights.validate();
}

SweepConfig sweep_config_from_json(const std::string& text, const std::filesystem::path& base_dir) {
  const json j = parse_json(text);
  SweepConfig cfg;
  try {
    check_keys(j, {"lambda_grid", "train", "weights", "data", "parallel_runs", "reference_lambda"}, "sweep config");
    cfg.lambda_grid = j.at("lambda_grid").get<std::vector<double>>();
    if (j.contains("train")) parse_train(j.at("train"), cfg.train);
    if (j.contains("weights")) parse_weights(j.at("weights"), cfg.weights);
    take(j, "parallel_runs", cfg.parallel_runs);
    if (j.contains("reference_lambda") && !j.at("reference_lambda").is_null())
      cfg.reference_lambda = j.at("reference_lambda").get<double>();

    const json& data = j.at("data");
    const auto source = data.at("source").get<std::string>();
    auto resolve = [&](const std::string& p) {
      const std::filesystem::path path(p);
      return path.is_relative() ? base_dir / path : path;
    };
    if (source == "synthetic") {
      check_keys(data, {"source", "synthetic"}, "data");
      cfg.data.kind = DataSource::Kind::synthetic;
      if (data.contains("synthetic")) parse_synthetic(data.at("synthetic"), cfg.data.synthetic);
    } else if (source == "files") {
      check_keys(data, {"source", "train", "test"}, "data");
      cfg.data.kind = DataSource::Kind::files;
      cfg.data.train_path = resolve(data.at("train").get<std::string>());
      cfg.data.test_path = resolve(data.at("test").get<std::string>());
    } else if (source == "cub") {
      check_keys(data, {"source", "root", "class_ids", "split", "train_fraction"}, "data");
      cfg.data.kind = DataSource::Kind::cub;
      cfg.data.cub.root = resolve(data.at("root").get<std::string>());
      take(data, "class_ids", cfg.data.cub.class_ids);
      take(data, "train_fraction", cfg.data.cub.train_fraction);
      const auto split = data.value("split", std::string("official"));
      if (split != "official" && split != "fraction") throw ParameterError("data.split must be 'official' or 'fraction'");
      cfg.data.cub_official_split = split == "official";
    } else {
      throw ParameterError("unknown data source '" + source + "'");
    }
  } catch (const json::exception& e) {
    throw ParameterError(std::string("sweep config: ") + e.what());
  }
  cfg.validate();
  return cfg;
}

}  // namespace cbm
