#include "bft/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "bft/errors.hpp"

namespace bft {
namespace {

void write_json(const fs::path& path, const json& doc) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << doc.dump(2) << '\n';
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot open " + path.string());
  return json::parse(in);
}

double median(std::vector<double> values) {
  if (values.empty()) return 0.0;
  const auto mid = values.begin() + static_cast<std::ptrdiff_t>(values.size() / 2);
  std::nth_element(values.begin(), mid, values.end());
  if (values.size() % 2) return *mid;
  const double upper = *mid;
  return 0.5 * (upper + *std::max_element(values.begin(), mid));
}

std::string file_label(std::string label) {
  std::replace(label.begin(), label.end(), '/', '_');
  return label;
}

}  // namespace

ModelParams pretrained_model(const RunConfig& config, const Dataset& data, const fs::path& run_dir) {
  ModelParams params = init_model(config.model);
  if (config.pretrain.steps == 0) return params;
  std::vector<Sample> corpus;
  for (const Sample& s : data.train)
    if (!config.pretrain.easy_only || !s.hard) corpus.push_back(s);
  if (corpus.empty()) throw ValidationError("config field 'pretrain.easy_only': no easy samples to pretrain on");
  TrainConfig stage = config.train;
  stage.objective = ObjectiveConfig::sft();
  stage.steps = config.pretrain.steps;
  stage.learning_rate = config.pretrain.learning_rate;
  stage.batch_size = config.pretrain.batch_size;
  stage.checkpoint_interval = 0;
  return train(std::move(params), std::move(corpus), stage, data.special, run_dir / "pretrain").params;
}

RunSummary run_training(const RunConfig& config, const fs::path& run_dir) {
  config.validate();
  fs::create_directories(run_dir);
  write_json(run_dir / "config.json", config.to_json());

  const Dataset data = load_dataset(config.data, config.model.context_length);
  if (!data.warnings.empty()) {
    std::ofstream warn(run_dir / "warnings.txt", std::ios::trunc);
    for (const auto& w : data.warnings) warn << w << '\n';
  }
  TrainOutcome outcome =
      train(pretrained_model(config, data, run_dir), data.train, config.train, data.special, run_dir);

  RunSummary summary{run_dir, config, {}, std::move(outcome.metrics)};
  if (!data.eval.empty()) {
    summary.eval = evaluate(outcome.params, data.eval, data.special);
    write_json(run_dir / "eval.json", summary.eval.to_json());
  }
  return summary;
}

ExperimentGrid ExperimentGrid::from_json(const json& doc) {
  if (!doc.is_object()) throw ValidationError("grid: must be an object");
  if (doc.value("schema_version", 0) != kSchemaVersion)
    throw ValidationError("grid field 'schema_version': must equal " + std::to_string(kSchemaVersion));
  for (const auto& [key, _] : doc.items()) {
    if (key != "schema_version" && key != "base" && key != "objectives" && key != "windows" &&
        key != "seeds")
      throw ValidationError("grid field '" + key + "': unknown field");
  }
  if (!doc.contains("base")) throw ValidationError("grid field 'base': required");
  ExperimentGrid grid;
  grid.base = RunConfig::from_json(doc.at("base"));
  try {
    grid.objectives = doc.value("objectives", std::vector<std::string>{});
    grid.windows = doc.value("windows", std::vector<Index>{grid.base.train.objective.window});
    grid.seeds = doc.value("seeds", std::vector<std::uint64_t>{});
  } catch (const json::exception& e) {
    throw ValidationError(std::string("grid: ") + e.what());
  }
  if (grid.objectives.empty()) throw ValidationError("grid field 'objectives': needs at least one objective");
  if (grid.seeds.empty()) throw ValidationError("grid field 'seeds': needs at least one seed");
  if (grid.windows.empty()) throw ValidationError("grid field 'windows': needs at least one window");
  for (Index w : grid.windows)
    if (w < 1) throw ValidationError("grid field 'windows': every window must be >= 1");
  for (const auto& name : grid.objectives) {
    try {
      objective_from_name(name, 1, grid.base.train.objective);
    } catch (const ConfigError& e) {
      throw ValidationError(std::string("grid field 'objectives': ") + e.what());
    }
  }
  return grid;
}

json ExperimentGrid::to_json() const {
  return {{"schema_version", kSchemaVersion},
          {"base", base.to_json()},
          {"objectives", objectives},
          {"windows", windows},
          {"seeds", seeds}};
}

std::vector<GridCell> ExperimentGrid::cells() const {
  std::vector<GridCell> out;
  for (const auto& name : objectives) {
    const bool windowed = name == "BFT" || name == "BFT-w/o-token";
    const std::vector<Index> sweep = windowed ? windows : std::vector<Index>{windows.front()};
    for (Index window : sweep) {
      const ObjectiveConfig objective = objective_from_name(name, window, base.train.objective);
      for (std::uint64_t seed : seeds) {
        GridCell cell{objective.label(), seed, base};
        cell.config.train.objective = objective;
        cell.config.model.seed = seed;
        cell.config.train.seed = seed;
        out.push_back(std::move(cell));
      }
    }
  }
  return out;
}

double ReportRow::mean(double (EvalResult::*metric)() const) const {
  if (per_seed.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : per_seed) total += (r.*metric)();
  return total / static_cast<double>(per_seed.size());
}

double ReportRow::stddev(double (EvalResult::*metric)() const) const {
  if (per_seed.size() < 2) return 0.0;
  const double mu = mean(metric);
  double total = 0.0;
  for (const auto& r : per_seed) total += std::pow((r.*metric)() - mu, 2);
  return std::sqrt(total / static_cast<double>(per_seed.size() - 1));
}

double ReportRow::mean_loss() const {
  if (per_seed.empty()) return 0.0;
  double total = 0.0;
  for (const auto& r : per_seed) total += r.loss;
  return total / static_cast<double>(per_seed.size());
}

const ReportRow* EvalReport::find(const std::string& label) const {
  for (const auto& row : rows)
    if (row.label == label) return &row;
  return nullptr;
}

json EvalReport::to_json() const {
  json out = json::array();
  for (const auto& row : rows) {
    json seeds = json::array();
    for (std::size_t i = 0; i < row.per_seed.size(); ++i) {
      json cell = row.per_seed[i].to_json();
      cell["seed"] = row.seeds[i];
      seeds.push_back(std::move(cell));
    }
    out.push_back({{"objective", row.label},
                   {"mean_loss", row.mean_loss()},
                   {"accuracy_mean", row.mean(&EvalResult::accuracy)},
                   {"accuracy_std", row.stddev(&EvalResult::accuracy)},
                   {"easy_accuracy_mean", row.mean(&EvalResult::easy_accuracy)},
                   {"easy_accuracy_std", row.stddev(&EvalResult::easy_accuracy)},
                   {"hard_accuracy_mean", row.mean(&EvalResult::hard_accuracy)},
                   {"hard_accuracy_std", row.stddev(&EvalResult::hard_accuracy)},
                   {"per_seed", std::move(seeds)},
                   {"failures", row.failures}});
  }
  return {{"metric", "greedy-decode exact match on held-out synthetic queries"}, {"rows", out}};
}

EvalReport run_sweep(const ExperimentGrid& grid, const fs::path& out_dir, std::ostream& log) {
  fs::create_directories(out_dir / "cells");
  write_json(out_dir / "grid.json", grid.to_json());

  EvalReport report;
  std::map<std::string, std::vector<std::vector<double>>> curves;
  auto row_for = [&report](const std::string& label) -> ReportRow& {
    for (auto& row : report.rows)
      if (row.label == label) return row;
    report.rows.push_back({label, {}, {}, {}});
    return report.rows.back();
  };

  for (const GridCell& cell : grid.cells()) {
    const fs::path dir = out_dir / "cells" / (file_label(cell.label) + "__seed" + std::to_string(cell.seed));
    ReportRow& row = row_for(cell.label);
    log << "[sweep] " << cell.label << " seed " << cell.seed << " ... " << std::flush;
    try {
      RunSummary run = run_training(cell.config, dir);
      row.seeds.push_back(cell.seed);
      row.per_seed.push_back(run.eval);
      std::vector<double> losses;
      for (const auto& m : run.metrics) losses.push_back(m.loss);
      curves[cell.label].push_back(std::move(losses));
      log << "acc " << std::fixed << std::setprecision(3) << run.eval.accuracy() << " hard "
          << run.eval.hard_accuracy() << std::defaultfloat << '\n';
    } catch (const std::exception& e) {
      row.failures.push_back("seed " + std::to_string(cell.seed) + ": " + e.what());
      log << "FAILED: " << e.what() << '\n';
    }
  }

  write_json(out_dir / "report.json", report.to_json());

  std::ofstream summary(out_dir / "summary.csv", std::ios::trunc);
  summary << "# metric: greedy-decode exact match on held-out synthetic queries (stands in for "
             "benchmark scores)\n"
          << "objective,seeds,mean_loss,accuracy_mean,accuracy_std,easy_accuracy_mean,"
             "easy_accuracy_std,hard_accuracy_mean,hard_accuracy_std,failures\n";
  summary.precision(17);
  for (const auto& row : report.rows) {
    summary << row.label << ',' << row.per_seed.size() << ',' << row.mean_loss() << ','
            << row.mean(&EvalResult::accuracy) << ',' << row.stddev(&EvalResult::accuracy) << ','
            << row.mean(&EvalResult::easy_accuracy) << ',' << row.stddev(&EvalResult::easy_accuracy)
            << ',' << row.mean(&EvalResult::hard_accuracy) << ','
            << row.stddev(&EvalResult::hard_accuracy) << ',' << row.failures.size() << '\n';
  }

  std::ofstream cells(out_dir / "cells.csv", std::ios::trunc);
  cells.precision(17);
  cells << "objective,seed,loss,accuracy,easy_accuracy,hard_accuracy,total,easy,hard\n";
  for (const auto& row : report.rows)
    for (std::size_t i = 0; i < row.per_seed.size(); ++i) {
      const EvalResult& r = row.per_seed[i];
      cells << row.label << ',' << row.seeds[i] << ',' << r.loss << ',' << r.accuracy() << ','
            << r.easy_accuracy() << ',' << r.hard_accuracy() << ',' << r.total << ',' << r.easy
            << ',' << r.hard << '\n';
    }

  // Plot data: mean training loss per step, and BFT accuracy against window length.
  for (const auto& [label, runs] : curves) {
    std::ofstream dat(out_dir / ("loss_" + file_label(label) + ".dat"), std::ios::trunc);
    dat.precision(17);
    dat << "# step mean_loss\n";
    const std::size_t steps = runs.front().size();
    for (std::size_t s = 0; s < steps; ++s) {
      double total = 0.0;
      for (const auto& r : runs) total += r[s];
      dat << s << ' ' << total / static_cast<double>(runs.size()) << '\n';
    }
  }
  std::ofstream windows(out_dir / "window_accuracy.dat", std::ios::trunc);
  windows.precision(17);
  windows << "# window accuracy_mean hard_accuracy_mean\n";
  for (Index w : grid.windows) {
    if (const ReportRow* row = report.find("BFT-" + std::to_string(w)); row && !row->per_seed.empty())
      windows << w << ' ' << row->mean(&EvalResult::accuracy) << ' '
              << row->mean(&EvalResult::hard_accuracy) << '\n';
  }
  return report;
}

OverheadResult measure_overhead(const RunConfig& numerator, const RunConfig& denominator,
                                Index steps, Index warmup) {
  if (numerator.model != denominator.model) throw ConfigError("measure_overhead: model configs differ");
  const Dataset data = load_dataset(numerator.data, numerator.model.context_length);
  const ModelParams initial = init_model(numerator.model);

  TrainConfig num_cfg = numerator.train, den_cfg = denominator.train;
  num_cfg.steps = den_cfg.steps = warmup + steps;
  Trainer num(initial, data.train, num_cfg, data.special);
  Trainer den(initial, data.train, den_cfg, data.special);

  std::vector<double> num_times, den_times;
  for (Index s = 0; s < warmup + steps; ++s) {
    // Alternate which side goes first so drift affects both equally.
    double tn, td;
    if (s % 2 == 0) {
      tn = num.step().wall_seconds;
      td = den.step().wall_seconds;
    } else {
      td = den.step().wall_seconds;
      tn = num.step().wall_seconds;
    }
    if (s >= warmup) {
      num_times.push_back(tn);
      den_times.push_back(td);
    }
  }
  OverheadResult result;
  result.median_numerator = median(num_times);
  result.median_denominator = median(den_times);
  result.ratio = result.median_numerator / result.median_denominator;
  result.measured_steps = steps;
  return result;
}

std::vector<RunDigest> digest_runs(const std::vector<fs::path>& run_dirs, std::ostream& warnings) {
  std::vector<RunDigest> out;
  for (const fs::path& dir : run_dirs) {
    std::ifstream metrics(dir / "metrics.jsonl");
    if (!metrics) {
      warnings << "warning: " << dir.string() << " has no metrics.jsonl, skipped\n";
      continue;
    }
    RunDigest d;
    d.dir = dir;
    d.label = dir.filename().string();
    if (fs::exists(dir / "config.json")) {
      const RunConfig cfg = RunConfig::from_json(read_json(dir / "config.json"));
      d.label = cfg.train.objective.label();
    }
    std::string line;
    while (std::getline(metrics, line)) {
      if (line.empty()) continue;
      const MetricsRecord r = MetricsRecord::from_json(json::parse(line));
      ++d.steps;
      d.final_loss = r.loss;
      d.max_importance_weight = std::max(d.max_importance_weight, r.max_importance_weight);
    }
    std::ifstream timing(dir / "timing.tsv");
    std::vector<double> seconds;
    std::getline(timing, line);  // header
    while (std::getline(timing, line)) {
      std::istringstream fields(line);
      Index step;
      double wall;
      if (fields >> step >> wall) seconds.push_back(wall);
    }
    d.median_step_seconds = median(seconds);
    if (fs::exists(dir / "eval.json")) d.eval = EvalResult::from_json(read_json(dir / "eval.json"));
    out.push_back(std::move(d));
  }
  const auto sft = std::find_if(out.begin(), out.end(), [](const RunDigest& d) { return d.label == "SFT"; });
  if (sft != out.end() && sft->median_step_seconds > 0.0) {
    const double base = sft->median_step_seconds;
    for (auto& d : out) d.runtime_ratio = d.median_step_seconds / base;
  }
  return out;
}

namespace {

struct Aggregate {
  Index runs = 0;
  double final_loss = 0.0, accuracy = 0.0, hard_accuracy = 0.0;
  Index evaluated = 0;
};

std::map<std::string, Aggregate> aggregate_by_label(const std::vector<RunDigest>& digests) {
  std::map<std::string, Aggregate> out;
  for (const auto& d : digests) {
    Aggregate& a = out[d.label];
    ++a.runs;
    a.final_loss += d.final_loss;
    if (d.eval) {
      ++a.evaluated;
      a.accuracy += d.eval->accuracy();
      a.hard_accuracy += d.eval->hard_accuracy();
    }
  }
  for (auto& [_, a] : out) {
    a.final_loss /= static_cast<double>(a.runs);
    if (a.evaluated) {
      a.accuracy /= static_cast<double>(a.evaluated);
      a.hard_accuracy /= static_cast<double>(a.evaluated);
    }
  }
  return out;
}

}  // namespace

std::string format_report_table(const std::vector<RunDigest>& digests) {
  const bool with_ratio = std::any_of(digests.begin(), digests.end(),
                                      [](const RunDigest& d) { return d.runtime_ratio.has_value(); });
  std::ostringstream out;
  out << std::left << std::setw(28) << "run" << std::setw(22) << "objective" << std::right
      << std::setw(7) << "steps" << std::setw(12) << "final_loss" << std::setw(10) << "acc"
      << std::setw(10) << "hard_acc" << std::setw(12) << "step_ms" << std::setw(14) << "max_imp_w";
  if (with_ratio) out << std::setw(10) << "rt_ratio";
  out << '\n' << std::fixed;
  for (const auto& d : digests) {
    out << std::left << std::setw(28) << d.dir.filename().string().substr(0, 27) << std::setw(22)
        << d.label << std::right << std::setw(7) << d.steps << std::setw(12) << std::setprecision(5)
        << d.final_loss;
    if (d.eval)
      out << std::setw(10) << std::setprecision(3) << d.eval->accuracy() << std::setw(10)
          << d.eval->hard_accuracy();
    else
      out << std::setw(10) << "-" << std::setw(10) << "-";
    out << std::setw(12) << std::setprecision(3) << 1e3 * d.median_step_seconds << std::setw(14)
        << std::setprecision(2) << d.max_importance_weight;
    if (with_ratio) out << std::setw(10) << std::setprecision(3) << d.runtime_ratio.value_or(0.0);
    out << '\n';
  }
  out << "\nmeans by objective\n";
  for (const auto& [label, a] : aggregate_by_label(digests)) {
    out << "  " << std::left << std::setw(22) << label << std::right << " runs " << a.runs
        << "  final_loss " << std::setprecision(5) << a.final_loss;
    if (a.evaluated)
      out << "  acc " << std::setprecision(3) << a.accuracy << "  hard_acc " << a.hard_accuracy;
    out << '\n';
  }
  return out.str();
}

std::string format_report_csv(const std::vector<RunDigest>& digests) {
  std::ostringstream out;
  out.precision(17);
  out << "run,objective,steps,final_loss,accuracy,hard_accuracy,median_step_seconds,"
         "max_importance_weight,runtime_ratio\n";
  for (const auto& d : digests) {
    out << d.dir.filename().string() << ',' << d.label << ',' << d.steps << ',' << d.final_loss << ',';
    if (d.eval) out << d.eval->accuracy() << ',' << d.eval->hard_accuracy();
    else out << ',';
    out << ',' << d.median_step_seconds << ',' << d.max_importance_weight << ',';
    if (d.runtime_ratio) out << *d.runtime_ratio;
    out << '\n';
  }
  return out.str();
}

json report_json(const std::vector<RunDigest>& digests) {
  json runs = json::array();
  for (const auto& d : digests) {
    json r{{"run", d.dir.string()},
           {"objective", d.label},
           {"steps", d.steps},
           {"final_loss", d.final_loss},
           {"median_step_seconds", d.median_step_seconds},
           {"max_importance_weight", d.max_importance_weight}};
    if (d.eval) r["eval"] = d.eval->to_json();
    if (d.runtime_ratio) r["runtime_ratio"] = *d.runtime_ratio;
    runs.push_back(std::move(r));
  }
  json means = json::object();
  for (const auto& [label, a] : aggregate_by_label(digests)) {
    json m{{"runs", a.runs}, {"final_loss", a.final_loss}};
    if (a.evaluated) {
      m["accuracy"] = a.accuracy;
      m["hard_accuracy"] = a.hard_accuracy;
    }
    means[label] = std::move(m);
  }
  return {{"runs", runs}, {"means", means}};
}

}  // namespace bft
