#include "cbm/harness.hpp"

#include "cbm/error.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <limits>
#include <random>
#include <sstream>

namespace cbm {

using nlohmann::json;

namespace {

struct GlobalOptions {
  std::optional<std::uint64_t> seed;
  std::string config;
  std::string out;
  std::string format = "csv";
};

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Writes to --out when given, otherwise to the command's output stream.
void emit(const GlobalOptions& g, std::ostream& out, const std::string& text) {
  if (g.out.empty()) {
    out << text;
    return;
  }
  std::ofstream f(g.out);
  if (!f) throw InputError("cannot write " + g.out);
  f << text;
}

json num(double v) {
  if (std::isfinite(v)) return v;
  return format_double(v);
}

json vec(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(num(v[i]));
  return a;
}

void write_split(const std::filesystem::path& dir, const SplitDataset& data) {
  std::filesystem::create_directories(dir);
  dataset_save(dir / "train.txt", data.train);
  dataset_save(dir / "test.txt", data.test);
}

json attack_json(const AttackResult& r) {
  return {{"target", r.target},   {"method", std::string(to_string(r.method))},
          {"success", r.success}, {"norm", num(r.norm)},
          {"delta", vec(r.delta)}, {"margins", vec(r.margins)},
          {"clamped", r.clamped}, {"iterations", r.iterations}};
}

int run_synth(const GlobalOptions& g, std::ostream& out) {
  SyntheticConfig cfg = g.config.empty() ? SyntheticConfig{} : synthetic_config_from_json(read_text(g.config));
  if (g.seed) cfg.seed = *g.seed;
  if (g.out.empty()) throw ParameterError("synth needs --out <directory>");
  const auto data = synth_generate(cfg);
  write_split(g.out, data);
  out << "wrote " << data.train.size() << " train and " << data.test.size() << " test samples to " << g.out << '\n';
  return 0;
}

int run_ingest(const GlobalOptions& g, std::ostream& out, const CubIngestConfig& cfg, bool official) {
  if (g.out.empty()) throw ParameterError("ingest-cub needs --out <directory>");
  const auto result = cub_ingest(cfg);
  const auto data = official ? official_split(result) : stratified_split(result.dataset, cfg.train_fraction, g.seed.value_or(0));
  write_split(g.out, data);
  out << "ingested " << result.dataset.size() << " images (" << result.malformed_rows << " malformed attribute rows skipped); "
      << data.train.size() << " train, " << data.test.size() << " test\n";
  return 0;
}

struct TrainArgs {
  std::string train_path;
  std::string val_path;
  std::optional<double> lambda_s;
};

int run_train(const GlobalOptions& g, std::ostream& out, const TrainArgs& a) {
  TrainConfig cfg;
  LossWeights w;
  if (!g.config.empty()) train_config_from_json(read_text(g.config), cfg, w);
  if (g.seed) cfg.seed = *g.seed;
  if (a.lambda_s) w.lambda_s_max = *a.lambda_s;
  if (g.out.empty()) throw ParameterError("train needs --out <model path>");
  const Dataset train_set = dataset_load(a.train_path);
  const Dataset val_set = a.val_path.empty() ? train_set : dataset_load(a.val_path);
  const TrainResult result = train(train_set, val_set, w, cfg);
  model_save(g.out, Checkpoint{result.predictor, result.head, w.lambda_s_max});

  if (g.format == "json") {
    json rows = json::array();
    for (const auto& r : result.log.rows)
      rows.push_back({{"epoch", r.epoch},
                      {"concept_loss", num(r.concept_loss)},
                      {"class_loss", num(r.class_loss)},
                      {"stability_loss", num(r.stability_loss)},
                      {"total_loss", num(r.total_loss)},
                      {"lambda_s", num(r.lambda_s)},
                      {"val_accuracy", num(r.val_accuracy)},
                      {"val_mean_attackability", num(r.val_mean_attackability)}});
    out << json{{"epochs", rows}}.dump(2) << '\n';
  } else {
    out << "epoch,concept_loss,class_loss,stability_loss,total_loss,lambda_s,val_accuracy,val_mean_attackability\n";
    for (const auto& r : result.log.rows)
      out << r.epoch << ',' << format_double(r.concept_loss) << ',' << format_double(r.class_loss) << ','
          << format_double(r.stability_loss) << ',' << format_double(r.total_loss) << ',' << format_double(r.lambda_s)
          << ',' << format_double(r.val_accuracy) << ',' << format_double(r.val_mean_attackability) << '\n';
  }
  return 0;
}

struct AttackArgs {
  std::string model;
  std::string data;
  std::size_t index = 0;
  std::optional<ClassIndex> target;
  std::string method = "single";
  double epsilon = AttackConfig{}.epsilon;
  bool clamp = false;
};

int run_attack(const GlobalOptions& g, std::ostream& out, const AttackArgs& a) {
  const Checkpoint model = model_load(a.model);
  const Dataset data = dataset_load(a.data);
  if (a.index >= data.size())
    throw ParameterError("--index " + std::to_string(a.index) + " out of range (" + std::to_string(data.size()) + " samples)");
  if (data.num_concepts != model.head.num_concepts()) throw ShapeError("dataset and model disagree on the concept count");
  AttackConfig cfg;
  cfg.epsilon = a.epsilon;
  cfg.clamp_concepts = a.clamp;
  cfg.validate();
  const AttackMethod method = attack_method_from_string(a.method);
  if (method == AttackMethod::linearized) throw ParameterError("linearized attacks need a nonlinear head");
  const auto& s = data.samples[a.index];

  json report = {{"index", a.index}, {"label", s.label}, {"predicted", predict(model.head, s.concepts)}};
  if (a.target) {
    const AttackResult r = method == AttackMethod::single
                               ? single_constraint_attack(model.head, s.concepts, s.label, *a.target, cfg)
                               : multi_constraint_attack(model.head, s.concepts, s.label, *a.target, cfg);
    report.update(attack_json(r));
  } else {
    const UntargetedAttack u = untargeted_min_attack(model.head, s.concepts, s.label, cfg, method);
    report.update(attack_json(u.best));
    report["untargeted"] = true;
    report["degenerate_targets"] = u.degenerate_targets;
  }
  emit(g, out, report.dump(2) + "\n");
  return 0;
}

struct EvalArgs {
  std::string model;
  std::string data;
};

int run_eval(const GlobalOptions& g, std::ostream& out, const EvalArgs& a) {
  const Checkpoint model = model_load(a.model);
  const Dataset data = dataset_load(a.data);
  const DatasetRobustness m = dataset_robustness(model.head, data);
  const double acc = accuracy(data.has_features() ? model.predictor : std::nullopt, model.head, data);
  const auto concepts = model_concepts(data.has_features() ? model.predictor : std::nullopt, data);
  const double sparsity = sparsity_metric(std::span<const Vector>(concepts));
  const double lambda = model.lambda_s.value_or(std::numeric_limits<double>::quiet_NaN());

  std::ostringstream text;
  if (g.format == "json") {
    json per_class = json::object();
    for (const auto& [cls, v] : m.per_class_mean) per_class[std::to_string(cls)] = num(v);
    text << json{{"lambda_s", num(lambda)},
                 {"accuracy", num(acc)},
                 {"mean_attackability", num(m.mean_attackability)},
                 {"mean_rel_pert_norm", num(m.mean_rel_pert_norm)},
                 {"sparsity", num(sparsity)},
                 {"per_class_mean_attackability", per_class},
                 {"median_rho", num(m.median_rho)},
                 {"p95_rho", num(m.p95_rho)},
                 {"iqr_rho", num(m.iqr_rho)},
                 {"n_samples", m.n_samples},
                 {"n_feasible", m.n_feasible},
                 {"n_misclassified", m.n_misclassified},
                 {"n_aggregated", m.n_aggregated}}
                .dump(2)
         << '\n';
  } else {
    text << "lambda_s,accuracy,mean_attackability,mean_rel_pert_norm,sparsity\n";
    text << format_double(lambda) << ',' << format_double(acc) << ',' << format_double(m.mean_attackability) << ','
         << format_double(m.mean_rel_pert_norm) << ',' << format_double(sparsity) << '\n';
  }
  emit(g, out, text.str());
  return 0;
}

int run_sweep_command(const GlobalOptions& g, std::ostream& out, std::ostream& err, std::optional<int> parallel) {
  if (g.config.empty()) throw ParameterError("sweep needs --config <path>");
  const std::filesystem::path config_path(g.config);
  SweepConfig cfg = sweep_config_from_json(read_text(config_path), config_path.parent_path());
  if (g.seed) {
    cfg.train.seed = *g.seed;
    cfg.data.synthetic.seed = *g.seed;
  }
  if (parallel) cfg.parallel_runs = *parallel;
  cfg.validate();
  const SweepReport report = run_sweep(cfg);
  std::ostringstream text;
  if (g.format == "json") {
    text << sweep_to_json(report) << '\n';
  } else {
    write_sweep_csv(text, report);
  }
  emit(g, out, text.str());
  if (!report.all_ok()) {
    for (const auto& r : report.rows)
      if (r.status != "ok") err << "lambda_s " << format_double(r.lambda_s) << ": " << r.status << '\n';
    return 2;
  }
  return 0;
}

struct TransferArgs {
  std::string model;
  std::size_t concepts = 8;
  std::size_t features = 16;
  int trials = 100;
  int pairs = 20;
};

int run_transfer(const GlobalOptions& g, std::ostream& out, const TransferArgs& a) {
  const std::uint64_t seed = g.seed.value_or(0);
  std::optional<LinearConceptPredictor> predictor;
  if (!a.model.empty()) {
    predictor = model_load(a.model).predictor;
    if (!predictor) throw InputError("checkpoint has no concept predictor");
  } else {
    predictor = initial_model(a.concepts, 2, a.features, seed).predictor;
  }
  TransferReport report = lower_bound_check(*predictor, a.trials, seed);
  report.nested_pairs = nested_shift_diagnostic(*predictor, a.pairs, seed + 1);

  std::ostringstream text;
  if (g.format == "json") {
    json trials = json::array();
    for (const auto& t : report.trials)
      trials.push_back({{"delta_c_norm", num(t.delta_c_norm)},
                        {"delta_x_norm", num(t.delta_x_norm)},
                        {"bound_rhs", num(t.bound_rhs)},
                        {"converged", t.converged},
                        {"bound_holds", t.bound_ok}});
    text << json{{"lipschitz_bound", num(report.lipschitz_bound)},
                 {"lipschitz_empirical", num(report.lipschitz_empirical)},
                 {"trials", report.trials.size()},
                 {"converged_trials", report.converged_trials()},
                 {"passing_trials", report.passing_trials()},
                 {"gain_pairs", report.nested_pairs.size()},
                 {"consistent_gain_pairs", report.consistent_pairs()},
                 {"per_trial", trials}}
                .dump(2)
         << '\n';
  } else {
    text << "# lipschitz_bound: " << format_double(report.lipschitz_bound) << '\n';
    text << "# lipschitz_empirical: " << format_double(report.lipschitz_empirical) << '\n';
    text << "# passing: " << report.passing_trials() << '/' << report.converged_trials() << " converged of "
         << report.trials.size() << '\n';
    text << "# consistent_gain_pairs: " << report.consistent_pairs() << '/' << report.nested_pairs.size() << '\n';
    text << "trial,delta_c_norm,delta_x_norm,bound_rhs,converged,bound_holds\n";
    for (std::size_t i = 0; i < report.trials.size(); ++i) {
      const auto& t = report.trials[i];
      text << i << ',' << format_double(t.delta_c_norm) << ',' << format_double(t.delta_x_norm) << ','
           << format_double(t.bound_rhs) << ',' << (t.converged ? 1 : 0) << ',' << (t.bound_ok ? 1 : 0) << '\n';
    }
  }
  emit(g, out, text.str());
  return report.passing_trials() == report.converged_trials() ? 0 : 2;
}

}  // namespace

int cli_main(std::span<const std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Concept-bottleneck robustness toolkit", "cbmguard"};
  app.require_subcommand(1);

  GlobalOptions g;
  std::uint64_t seed = 0;
  auto* seed_opt = app.add_option("--seed", seed, "Random seed override");
  app.add_option("--config", g.config, "JSON configuration file");
  app.add_option("--out", g.out, "Output path");
  app.add_option("--format", g.format, "Report format")->check(CLI::IsMember({"csv", "json"}));

  auto* synth = app.add_subcommand("synth", "Generate a synthetic dataset (train.txt/test.txt under --out)");

  CubIngestConfig cub;
  std::string split = "official";
  auto* ingest = app.add_subcommand("ingest-cub", "Convert a CUB-200-2011 directory into dataset files");
  ingest->add_option("--root", cub.root, "CUB_200_2011 directory")->required();
  ingest->add_option("--classes", cub.class_ids, "Class ids to keep");
  ingest->add_option("--split", split, "official or fraction")->check(CLI::IsMember({"official", "fraction"}));
  ingest->add_option("--train-fraction", cub.train_fraction, "Train share for --split fraction");

  TrainArgs train_args;
  double lambda = 0.0;
  auto* train_cmd = app.add_subcommand("train", "Train a concept predictor and head");
  train_cmd->add_option("--train", train_args.train_path, "Training dataset")->required();
  train_cmd->add_option("--val", train_args.val_path, "Validation dataset");
  auto* lambda_opt = train_cmd->add_option("--lambda", lambda, "Maximum stability weight");

  AttackArgs attack_args;
  ClassIndex target = 0;
  auto* attack = app.add_subcommand("attack", "Minimal concept-space attack on one sample");
  attack->add_option("--model", attack_args.model, "Checkpoint")->required();
  attack->add_option("--data", attack_args.data, "Dataset")->required();
  attack->add_option("--index", attack_args.index, "Sample index");
  auto* target_opt = attack->add_option("--target", target, "Target class (untargeted when omitted)");
  attack->add_option("--method", attack_args.method, "single or multi")->check(CLI::IsMember({"single", "multi"}));
  attack->add_option("--epsilon", attack_args.epsilon, "Required target margin");
  attack->add_flag("--clamp", attack_args.clamp, "Clamp perturbed concepts to [0,1]");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Dataset robustness report for a checkpoint");
  eval->add_option("--model", eval_args.model, "Checkpoint")->required();
  eval->add_option("--data", eval_args.data, "Dataset")->required();

  int parallel = 1;
  auto* sweep = app.add_subcommand("sweep", "Train and evaluate across a stability-weight grid");
  auto* parallel_opt = sweep->add_option("--parallel", parallel, "Concurrent runs")->check(CLI::PositiveNumber);

  TransferArgs transfer_args;
  auto* transfer = app.add_subcommand("transfer", "Input-space transfer checks for a concept predictor");
  transfer->add_option("--model", transfer_args.model, "Checkpoint with a concept predictor");
  transfer->add_option("--concepts", transfer_args.concepts, "Concepts for a random predictor");
  transfer->add_option("--features", transfer_args.features, "Input dimension for a random predictor");
  transfer->add_option("--trials", transfer_args.trials, "Number of trials")->check(CLI::PositiveNumber);
  transfer->add_option("--pairs", transfer_args.pairs, "Nested perturbation pairs")->check(CLI::NonNegativeNumber);

  for (auto* sub : app.get_subcommands({})) sub->fallthrough();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(std::move(reversed));
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e, out, err);
  } catch (const CLI::ParseError& e) {
    app.exit(e, err, err);
    err << app.help();
    return 1;
  }

  if (seed_opt->count() > 0) g.seed = seed;
  try {
    if (synth->parsed()) return run_synth(g, out);
    if (ingest->parsed()) return run_ingest(g, out, cub, split == "official");
    if (train_cmd->parsed()) {
      if (lambda_opt->count() > 0) train_args.lambda_s = lambda;
      return run_train(g, out, train_args);
    }
    if (attack->parsed()) {
      if (target_opt->count() > 0) attack_args.target = target;
      return run_attack(g, out, attack_args);
    }
    if (eval->parsed()) return run_eval(g, out, eval_args);
    if (sweep->parsed()) return run_sweep_command(g, out, err, parallel_opt->count() > 0 ? std::optional(parallel) : std::nullopt);
    if (transfer->parsed()) return run_transfer(g, out, transfer_args);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  }
  err << app.help();
  return 1;
}

int cli_main(int argc, const char* const* argv) {
  std::vector<std::string> args;
  for (int i = 1; i < argc; ++i) args.emplace_back(argv[i]);
  return cli_main(args, std::cout, std::cerr);
}

}  // namespace cbm
