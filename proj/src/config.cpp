#include <fstream>
#include <set>

#include "bft/errors.hpp"
#include "bft/experiment.hpp"

namespace bft {
namespace {

// Typed access to one JSON object section with field-qualified errors.
class Section {
 public:
  Section(json doc, std::string path) : doc_(std::move(doc)), path_(std::move(path)) {
    if (!doc_.is_object()) throw ValidationError("config field '" + path_ + "': must be an object");
  }

  template <class T>
  void read(const char* key, T& target) {
    seen_.insert(key);
    if (!doc_.contains(key)) return;
    const json& v = doc_.at(key);
    bool ok;
    if constexpr (std::is_same_v<T, bool>) ok = v.is_boolean();
    else if constexpr (std::is_same_v<T, std::string>) ok = v.is_string();
    else if constexpr (std::is_floating_point_v<T>) ok = v.is_number();
    else if constexpr (std::is_unsigned_v<T>) ok = v.is_number_unsigned();
    else ok = v.is_number_integer();
    if (!ok) throw ValidationError("config field '" + field(key) + "': wrong type");
    target = v.get<T>();
  }

  /// Marks a nested-object key as known; its content is parsed separately.
  void allow(const char* key) { seen_.insert(key); }

  std::string field(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void reject_unknown() const {
    for (const auto& [key, _] : doc_.items()) {
      if (!seen_.count(key)) throw ValidationError("config field '" + field(key.c_str()) + "': unknown field");
    }
  }

 private:
  json doc_;
  std::string path_;
  std::set<std::string> seen_;
};

// Re-raise a validate() failure as a schema error on `field`.
template <class Fn>
void check(const std::string& field, Fn&& fn) {
  try {
    fn();
  } catch (const ConfigError& e) {
    throw ValidationError("config field '" + field + "': " + e.what());
  }
}

ObjectiveConfig parse_objective(const json& doc) {
  ObjectiveConfig cfg;
  Section s(doc, "objective");
  std::string kind = to_string(cfg.kind);
  s.read("kind", kind);
  check("objective.kind", [&] { cfg.kind = parse_objective_kind(kind); });
  s.read("window", cfg.window);
  s.read("epsilon", cfg.epsilon);
  s.read("token_weighting", cfg.token_weighting);
  s.read("sample_weighting", cfg.sample_weighting);
  s.read("focal_gamma", cfg.focal_gamma);
  s.read("window_all_positions", cfg.window_all_positions);
  s.reject_unknown();
  check("objective", [&] { cfg.validate(); });
  return cfg;
}

json objective_json(const ObjectiveConfig& c) {
  return {{"kind", to_string(c.kind)},
          {"window", c.window},
          {"epsilon", c.epsilon},
          {"token_weighting", c.token_weighting},
          {"sample_weighting", c.sample_weighting},
          {"focal_gamma", c.focal_gamma},
          {"window_all_positions", c.window_all_positions}};
}

}  // namespace

RunConfig RunConfig::from_json(const json& doc) {
  RunConfig cfg;
  Section root(doc, "");
  int version = 0;
  root.read("schema_version", version);
  if (version != kSchemaVersion) {
    throw ValidationError("config field 'schema_version': must equal " + std::to_string(kSchemaVersion));
  }

  root.allow("model");
  root.allow("objective");
  root.allow("train");
  root.allow("data");
  root.allow("pretrain");
  {
    Section s(doc.value("model", json::object()), "model");
    s.read("vocab_size", cfg.model.vocab_size);
    s.read("context_length", cfg.model.context_length);
    s.read("embed_dim", cfg.model.embed_dim);
    s.read("layers", cfg.model.layers);
    s.read("heads", cfg.model.heads);
    s.read("seed", cfg.model.seed);
    s.reject_unknown();
  }
  if (doc.contains("objective")) cfg.train.objective = parse_objective(doc.at("objective"));
  {
    Section s(doc.value("train", json::object()), "train");
    TrainConfig& t = cfg.train;
    s.read("learning_rate", t.learning_rate);
    s.read("beta1", t.beta1);
    s.read("beta2", t.beta2);
    s.read("adam_epsilon", t.adam_epsilon);
    s.read("weight_decay", t.weight_decay);
    s.read("batch_size", t.batch_size);
    s.read("steps", t.steps);
    s.read("warmup_steps", t.warmup_steps);
    s.read("clip_norm", t.clip_norm);
    s.read("seed", t.seed);
    s.read("checkpoint_interval", t.checkpoint_interval);
    s.reject_unknown();
  }
  {
    if (!doc.contains("data")) throw ValidationError("config field 'data': required");
    const json& data = doc.at("data");
    Section s(data, "data");
    DataConfig& d = cfg.data;
    s.read("train_samples", d.train_samples);
    s.read("eval_samples", d.eval_samples);
    s.read("sharegpt_train", d.sharegpt_train);
    s.read("sharegpt_eval", d.sharegpt_eval);
    std::string encoding = "bytes";
    s.read("encoding", encoding);
    if (encoding == "bytes") d.encoding = TextEncoding::bytes;
    else if (encoding == "symbols") d.encoding = TextEncoding::symbols;
    else throw ValidationError("config field 'data.encoding': must be one of bytes, symbols");
    s.allow("synthetic");
    s.reject_unknown();
    if (data.contains("synthetic")) {
      Section syn(data.at("synthetic"), "data.synthetic");
      SyntheticTaskSpec spec;
      std::string task = to_string(spec.kind);
      syn.read("task", task);
      check("data.synthetic.task", [&] { spec.kind = parse_task_kind(task); });
      syn.read("vocab_size", spec.vocab_size);
      syn.read("min_length", spec.min_length);
      syn.read("max_length", spec.max_length);
      syn.read("hard_fraction", spec.hard_fraction);
      syn.read("seed", spec.seed);
      syn.read("common_repeats", spec.common_repeats);
      syn.read("label_noise", spec.label_noise);
      syn.reject_unknown();
      d.synthetic = spec;
    }
  }
  if (doc.contains("pretrain")) {
    Section s(doc.at("pretrain"), "pretrain");
    PretrainConfig& p = cfg.pretrain;
    s.read("steps", p.steps);
    s.read("learning_rate", p.learning_rate);
    s.read("batch_size", p.batch_size);
    s.read("easy_only", p.easy_only);
    s.reject_unknown();
  }
  root.reject_unknown();
  cfg.validate();
  return cfg;
}

void RunConfig::validate() const {
  check("model", [&] { model.validate(); });
  check("train", [&] { train.validate(); });
  if (pretrain.steps < 0) throw ValidationError("config field 'pretrain.steps': must be >= 0");
  if (!(pretrain.learning_rate > 0.0))
    throw ValidationError("config field 'pretrain.learning_rate': must be > 0");
  if (pretrain.batch_size < 1) throw ValidationError("config field 'pretrain.batch_size': must be >= 1");
  if (data.synthetic) {
    check("data.synthetic", [&] { data.synthetic->validate(); });
    if (data.synthetic->vocab_size != model.vocab_size) {
      throw ValidationError("config field 'model.vocab_size': must equal data.synthetic.vocab_size (" +
                            std::to_string(data.synthetic->vocab_size) + ")");
    }
    if (data.train_samples < 1) throw ValidationError("config field 'data.train_samples': must be >= 1");
    if (data.eval_samples < 0) throw ValidationError("config field 'data.eval_samples': must be >= 0");
  } else {
    if (data.sharegpt_train.empty()) {
      throw ValidationError("config field 'data': needs either 'synthetic' or 'sharegpt_train'");
    }
    const Index needed = data.encoding == TextEncoding::bytes ? 259 : 0;
    if (needed && model.vocab_size != needed) {
      throw ValidationError("config field 'model.vocab_size': byte-level data needs 259");
    }
  }
}

json RunConfig::to_json() const {
  json doc{{"schema_version", kSchemaVersion},
           {"model",
            {{"vocab_size", model.vocab_size},
             {"context_length", model.context_length},
             {"embed_dim", model.embed_dim},
             {"layers", model.layers},
             {"heads", model.heads},
             {"seed", model.seed}}},
           {"objective", objective_json(train.objective)},
           {"train",
            {{"learning_rate", train.learning_rate},
             {"beta1", train.beta1},
             {"beta2", train.beta2},
             {"adam_epsilon", train.adam_epsilon},
             {"weight_decay", train.weight_decay},
             {"batch_size", train.batch_size},
             {"steps", train.steps},
             {"warmup_steps", train.warmup_steps},
             {"clip_norm", train.clip_norm},
             {"seed", train.seed},
             {"checkpoint_interval", train.checkpoint_interval}}}};
  json d{{"train_samples", data.train_samples}, {"eval_samples", data.eval_samples}};
  if (data.synthetic) {
    const auto& s = *data.synthetic;
    d["synthetic"] = {{"task", to_string(s.kind)},       {"vocab_size", s.vocab_size},
                      {"min_length", s.min_length},      {"max_length", s.max_length},
                      {"hard_fraction", s.hard_fraction}, {"seed", s.seed},
                      {"common_repeats", s.common_repeats}, {"label_noise", s.label_noise}};
  } else {
    d["sharegpt_train"] = data.sharegpt_train;
    d["sharegpt_eval"] = data.sharegpt_eval;
    d["encoding"] = data.encoding == TextEncoding::bytes ? "bytes" : "symbols";
  }
  doc["data"] = std::move(d);
  if (pretrain.steps > 0) {
    doc["pretrain"] = {{"steps", pretrain.steps},
                       {"learning_rate", pretrain.learning_rate},
                       {"batch_size", pretrain.batch_size},
                       {"easy_only", pretrain.easy_only}};
  }
  return doc;
}

RunConfig load_run_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  json doc;
  try {
    doc = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ValidationError("config " + path.string() + ": invalid JSON: " + e.what());
  }
  RunConfig cfg = RunConfig::from_json(doc);
  // Relative dataset paths are taken from the config file's directory.
  for (std::string* data_path : {&cfg.data.sharegpt_train, &cfg.data.sharegpt_eval}) {
    if (!data_path->empty() && fs::path(*data_path).is_relative())
      *data_path = (path.parent_path() / *data_path).lexically_normal().string();
  }
  return cfg;
}

ObjectiveConfig objective_from_name(const std::string& name, Index window,
                                    const ObjectiveConfig& base) {
  ObjectiveConfig cfg = base;
  cfg.window = window;
  cfg.token_weighting = true;
  cfg.sample_weighting = true;
  if (name == "BFT-w/o-sample") {
    cfg.kind = ObjectiveKind::bft;
    cfg.sample_weighting = false;
  } else if (name == "BFT-w/o-token") {
    cfg.kind = ObjectiveKind::bft;
    cfg.token_weighting = false;
  } else if (name == "BFT-w/o-sample-w/o-token") {
    cfg.kind = ObjectiveKind::bft;
    cfg.token_weighting = false;
    cfg.sample_weighting = false;
  } else {
    try {
      cfg.kind = parse_objective_kind(name);
    } catch (const ConfigError&) {
      throw ConfigError("unknown grid objective \"" + name +
                        "\"; allowed: SFT, DFT, BFT, BFT-w/o-sample, BFT-w/o-token, "
                        "BFT-w/o-sample-w/o-token, FOCAL");
    }
  }
  return cfg;
}

}  // namespace bft
