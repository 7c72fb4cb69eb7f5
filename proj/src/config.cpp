#include "adlprune/config.hpp"

#include <cerrno>
#include <cstdlib>
#include <fstream>
#include <set>

#include <fmt/format.h>

namespace adlprune {

namespace {

using nlohmann::json;

// Reads the keys of one JSON object section, rejecting anything unexpected.
class Section {
 public:
  Section(const json& parent, const char* name) : name_(name) {
    if (!parent.contains(name)) return;
    node_ = &parent.at(name);
    if (!node_->is_object()) throw ConfigError(fmt::format("config: '{}' must be an object", name));
  }

  template <typename T>
  void read(const char* key, T& out) {
    known_.insert(key);
    if (node_ == nullptr || !node_->contains(key)) return;
    const json& v = node_->at(key);
    try {
      if constexpr (std::is_integral_v<T>) {
        if (!v.is_number_integer()) throw ConfigError("");
        if constexpr (std::is_unsigned_v<T>) {
          if (v.is_number_unsigned() || v.get<std::int64_t>() >= 0) {
            out = v.get<T>();
            return;
          }
          throw ConfigError("");
        } else {
          out = v.get<T>();
        }
      } else {
        if (!v.is_number()) throw ConfigError("");
        out = v.get<T>();
      }
    } catch (const std::exception&) {
      throw ConfigError(fmt::format("config: {}.{} has the wrong type or range ({})", name_, key,
                                    v.dump()));
    }
  }

  void finish() const {
    if (node_ == nullptr) return;
    for (const auto& [key, _] : node_->items()) {
      if (!known_.count(key)) throw ConfigError(fmt::format("config: unknown key {}.{}", name_, key));
    }
  }

 private:
  const char* name_;
  const json* node_ = nullptr;
  std::set<std::string> known_;
};

std::uint64_t parse_seed(const char* text) {
  errno = 0;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(text, &end, 10);
  if (errno != 0 || end == text || *end != '\0' || text[0] == '-') {
    throw ConfigError(fmt::format("SEED must be a non-negative integer, got '{}'", text));
  }
  return v;
}

}  // namespace

void LogConfig::validate() const {
  if (log_interval < 1) throw ConfigError("log: log_interval must be >= 1");
  if (snapshot_interval < 1) throw ConfigError("log: snapshot_interval must be >= 1");
}

ConformerConfig RunConfig::default_model() {
  ConformerConfig m;
  m.adl.scheduler.period = 2000;
  return m;
}

void RunConfig::validate() const {
  model.validate();
  task.validate();
  optim.validate();
  log.validate();
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config: top level must be an object");
  static const std::set<std::string> sections{"seed", "model", "adl", "task", "optim", "log"};
  for (const auto& [key, _] : j.items()) {
    if (!sections.count(key)) throw ConfigError(fmt::format("config: unknown key {}", key));
  }
  RunConfig c;
  if (j.contains("seed")) {
    const json& s = j.at("seed");
    if (!s.is_number_integer() || (!s.is_number_unsigned() && s.get<std::int64_t>() < 0)) {
      throw ConfigError("config: seed must be a non-negative integer");
    }
    c.seed = s.get<std::uint64_t>();
  }

  Section model(j, "model");
  model.read("num_blocks", c.model.num_blocks);
  model.read("model_dim", c.model.model_dim);
  model.read("num_heads", c.model.num_heads);
  model.read("ffn_hidden", c.model.ffn_hidden);
  model.read("conv_kernel", c.model.conv_kernel);
  model.read("input_dim", c.model.input_dim);
  model.read("num_classes", c.model.num_classes);
  model.finish();

  Section adl(j, "adl");
  adl.read("alpha", c.model.adl.alpha);
  adl.read("gamma", c.model.adl.gamma);
  adl.read("c0", c.model.adl.scheduler.c0);
  adl.read("c_inf", c.model.adl.scheduler.c_inf);
  adl.read("K", c.model.adl.scheduler.period);
  adl.finish();

  Section task(j, "task");
  task.read("seq_len", c.task.seq_len);
  task.read("batch_size", c.task.batch_size);
  task.finish();

  Section optim(j, "optim");
  optim.read("base_lr", c.optim.base_lr);
  optim.read("warmup", c.optim.warmup);
  optim.read("steps", c.optim.steps);
  optim.read("beta1", c.optim.beta1);
  optim.read("beta2", c.optim.beta2);
  optim.read("eps", c.optim.eps);
  optim.finish();

  Section log(j, "log");
  log.read("log_interval", c.log.log_interval);
  log.read("snapshot_interval", c.log.snapshot_interval);
  log.read("eval_batches", c.log.eval_batches);
  log.finish();

  c.validate();
  return c;
}

json config_to_json(const RunConfig& c) {
  const auto& m = c.model;
  const auto& s = m.adl.scheduler;
  return {
      {"seed", c.seed},
      {"model",
       {{"num_blocks", m.num_blocks},
        {"model_dim", m.model_dim},
        {"num_heads", m.num_heads},
        {"ffn_hidden", m.ffn_hidden},
        {"conv_kernel", m.conv_kernel},
        {"input_dim", m.input_dim},
        {"num_classes", m.num_classes}}},
      {"adl", {{"alpha", m.adl.alpha}, {"gamma", m.adl.gamma}, {"c0", s.c0}, {"c_inf", s.c_inf}, {"K", s.period}}},
      {"task", {{"seq_len", c.task.seq_len}, {"batch_size", c.task.batch_size}}},
      {"optim",
       {{"base_lr", c.optim.base_lr},
        {"warmup", c.optim.warmup},
        {"steps", c.optim.steps},
        {"beta1", c.optim.beta1},
        {"beta2", c.optim.beta2},
        {"eps", c.optim.eps}}},
      {"log",
       {{"log_interval", c.log.log_interval},
        {"snapshot_interval", c.log.snapshot_interval},
        {"eval_batches", c.log.eval_batches}}},
  };
}

bool apply_seed_override(RunConfig& c) {
  const char* env = std::getenv("SEED");
  if (env == nullptr || *env == '\0') return false;
  c.seed = parse_seed(env);
  return true;
}

RunConfig load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("cannot open config file {}", path));
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(fmt::format("config {} is not valid JSON: {}", path, e.what()));
  }
  RunConfig c = config_from_json(j);
  apply_seed_override(c);
  return c;
}

}  // namespace adlprune
