#include "cli.hpp"

#include <fstream>
#include <iomanip>
#include <iostream>

#include <CLI11.hpp>

#include "bft/errors.hpp"
#include "bft/experiment.hpp"

namespace bft::cli {
namespace {

json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError(path + ": " + e.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ValidationError("cannot write " + path.string());
  out << text;
}

int cmd_train(const std::string& config_path, const std::string& out_dir, std::ostream& out) {
  const RunConfig config = load_run_config(config_path);
  const RunSummary summary = run_training(config, out_dir);
  out << "run directory: " << summary.dir.string() << '\n';
  out << "steps: " << summary.metrics.size() << '\n';
  if (!summary.metrics.empty()) out << "final loss: " << summary.metrics.back().loss << '\n';
  if (summary.eval.total > 0) {
    out << std::fixed << std::setprecision(4) << "eval exact match: " << summary.eval.accuracy()
        << " (easy " << summary.eval.easy_accuracy() << ", hard " << summary.eval.hard_accuracy()
        << "), loss " << summary.eval.loss << '\n';
  }
  return kSuccess;
}

int cmd_eval(const std::string& config_path, const std::string& checkpoint, const std::string& split,
             std::ostream& out) {
  const RunConfig config = load_run_config(config_path);
  const ModelParams params = load_model(checkpoint);
  if (params.config.vocab_size != config.model.vocab_size ||
      params.config.context_length != config.model.context_length)
    throw ValidationError("checkpoint model shape does not match config field 'model'");
  const Dataset data = load_dataset(config.data, config.model.context_length);
  const auto& samples = split == "train" ? data.train : data.eval;
  if (samples.empty()) throw ValidationError("split '" + split + "' has no samples");
  out << evaluate(params, samples, data.special).to_json().dump(2) << '\n';
  return kSuccess;
}

int cmd_gradcheck(const GradcheckOptions& options, std::ostream& out) {
  const std::vector<GradCheckResult> results = run_gradcheck_suite(options);
  bool ok = true;
  double worst = 0.0;
  out << std::left << std::setw(24) << "check" << std::setw(8) << "status" << std::setw(8)
      << "points" << std::setw(14) << "max_abs" << "max_rel\n";
  for (const auto& r : results) {
    ok = ok && r.passed;
    worst = std::max(worst, r.max_abs_error);
    out << std::left << std::setw(24) << r.name << std::setw(8) << (r.passed ? "ok" : "FAIL")
        << std::setw(8) << r.checked << std::scientific << std::setprecision(3) << std::setw(14)
        << r.max_abs_error << r.max_rel_error << std::defaultfloat << '\n';
    if (!r.passed) out << "  worst: " << r.worst << '\n';
  }
  out << (ok ? "all checks passed" : "gradient check FAILED") << ", max deviation "
      << std::scientific << std::setprecision(3) << worst << std::defaultfloat << '\n';
  return ok ? kSuccess : kCheckFailure;
}

int cmd_sweep(const std::string& grid_path, const std::string& out_dir, std::ostream& out) {
  const ExperimentGrid grid = ExperimentGrid::from_json(read_json_file(grid_path));
  const EvalReport report = run_sweep(grid, out_dir, out);
  out << std::fixed << std::setprecision(4);
  out << "metric: greedy-decode exact match on held-out synthetic data\n";
  out << std::left << std::setw(22) << "objective" << std::setw(7) << "seeds" << std::setw(18)
      << "accuracy" << std::setw(18) << "hard" << "loss\n";
  bool failed = false;
  for (const auto& row : report.rows) {
    failed = failed || !row.failures.empty();
    out << std::left << std::setw(22) << row.label << std::setw(7) << row.per_seed.size()
        << std::setw(18)
        << (std::to_string(row.mean(&EvalResult::accuracy)).substr(0, 6) + " +- " +
            std::to_string(row.stddev(&EvalResult::accuracy)).substr(0, 6))
        << std::setw(18)
        << (std::to_string(row.mean(&EvalResult::hard_accuracy)).substr(0, 6) + " +- " +
            std::to_string(row.stddev(&EvalResult::hard_accuracy)).substr(0, 6))
        << row.mean_loss() << '\n';
    for (const auto& f : row.failures) out << "  failed: " << f << '\n';
  }
  out << std::defaultfloat;
  return failed ? kRuntimeAbort : kSuccess;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& csv_path,
               const std::string& json_path, std::ostream& out, std::ostream& err) {
  std::vector<fs::path> paths(dirs.begin(), dirs.end());
  const std::vector<RunDigest> digests = digest_runs(paths, err);
  if (digests.empty()) throw ValidationError("no completed runs among the given directories");
  out << format_report_table(digests);
  if (!csv_path.empty()) write_text(csv_path, format_report_csv(digests));
  if (!json_path.empty()) write_text(json_path, report_json(digests).dump(2) + "\n");
  return kSuccess;
}

int cmd_overhead(const std::string& config_path, const std::string& numerator,
                 const std::string& denominator, Index window, Index steps, Index warmup,
                 std::ostream& out) {
  const RunConfig base = load_run_config(config_path);
  if (steps < 1 || warmup < 0) throw ValidationError("measure-overhead: steps must be >= 1, warmup >= 0");
  const Index g = window > 0 ? window : base.train.objective.window;
  RunConfig num = base, den = base;
  num.train.objective = objective_from_name(numerator, g, base.train.objective);
  den.train.objective = objective_from_name(denominator, g, base.train.objective);
  num.validate();
  den.validate();
  const OverheadResult r = measure_overhead(num, den, steps, warmup);
  out << std::fixed << std::setprecision(3);
  out << num.train.objective.label() << " / " << den.train.objective.label() << " median step ratio: "
      << r.ratio << '\n';
  out << std::setprecision(6) << "median seconds: " << r.median_numerator << " / "
      << r.median_denominator << " over " << r.measured_steps << " steps after " << warmup
      << " warmup\n";
  out << std::defaultfloat;
  return kSuccess;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Balanced fine-tuning lab"};
  app.require_subcommand(1);

  std::string config_path, out_dir, checkpoint, split = "eval", grid_path, csv_path, json_path;
  std::string numerator = "BFT", denominator = "SFT";
  std::vector<std::string> run_dirs;
  GradcheckOptions gc;
  Index window = 0, steps = 200, warmup = 20;

  auto* train = app.add_subcommand("train", "Train one configuration");
  train->add_option("config", config_path, "Run config (JSON)")->required();
  train->add_option("-o,--out", out_dir, "Run directory")->required();

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  eval->add_option("config", config_path, "Run config (JSON)")->required();
  eval->add_option("-c,--checkpoint", checkpoint, "Model checkpoint")->required();
  eval->add_option("--split", split, "train or eval")->check(CLI::IsMember({"train", "eval"}));

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gradcheck->add_flag("--full", gc.full, "Five random trials per primitive");
  gradcheck->add_flag("--inject-fault", gc.inject_fault, "Flip the GELU backward rule");
  gradcheck->add_option("--seed", gc.seed, "Input seed");

  auto* sweep = app.add_subcommand("sweep", "Run an experiment grid");
  sweep->add_option("grid", grid_path, "Grid config (JSON)")->required();
  sweep->add_option("-o,--out", out_dir, "Output directory")->required();

  auto* report = app.add_subcommand("report", "Compare finished runs");
  report->add_option("runs", run_dirs, "Run directories")->required();
  report->add_option("--csv", csv_path, "Write the table as CSV");
  report->add_option("--json", json_path, "Write the table as JSON");

  auto* overhead = app.add_subcommand("measure-overhead", "Per-step wall time ratio");
  overhead->add_option("config", config_path, "Run config (JSON)")->required();
  overhead->add_option("--numerator", numerator, "Objective name");
  overhead->add_option("--denominator", denominator, "Objective name");
  overhead->add_option("--window", window, "Window length (default: config)");
  overhead->add_option("--steps", steps, "Measured steps");
  overhead->add_option("--warmup", warmup, "Unmeasured leading steps");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kSuccess : kValidationError;
  }

  try {
    if (*train) return cmd_train(config_path, out_dir, out);
    if (*eval) return cmd_eval(config_path, checkpoint, split, out);
    if (*gradcheck) return cmd_gradcheck(gc, out);
    if (*sweep) return cmd_sweep(grid_path, out_dir, out);
    if (*report) return cmd_report(run_dirs, csv_path, json_path, out, err);
    if (*overhead) return cmd_overhead(config_path, numerator, denominator, window, steps, warmup, out);
  } catch (const TrainingAborted& e) {
    err << "error: training aborted at step " << e.step() << ": " << e.what() << '\n';
    return kRuntimeAbort;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kValidationError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kRuntimeAbort;
  }
  return kValidationError;
}

}  // namespace bft::cli
