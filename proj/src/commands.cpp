#include "adlprune/commands.hpp"

#include <cerrno>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <fmt/format.h>
#include <fmt/ostream.h>

#include "CLI11.hpp"
#include "adlprune/checkpoint.hpp"
#include "adlprune/pruner.hpp"
#include "adlprune/trainkit.hpp"

namespace adlprune {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  return out;
}

json survival_snapshot(const ConformerModel& model, std::int64_t step) {
  json sites = json::array();
  for (const AdlSite* s : model.adl_sites()) {
    const auto st = s->survival(step);
    sites.push_back({{"site", s->name()}, {"surviving", st.surviving}, {"total", st.total}, {"rate", st.rate}});
  }
  return {{"step", step}, {"c_t", model.config().adl.scheduler.at(step)}, {"sites", std::move(sites)}};
}

void print_report(const PruneReport& r, std::ostream& out) {
  fmt::print(out, "threshold {}  step {}\n", r.threshold, r.step);
  fmt::print(out, "{:>5}  {:<12} {:>6} {:>9} {:>8}\n", "block", "site", "total", "surviving", "rate");
  for (const auto& row : r.rows) {
    fmt::print(out, "{:>5}  {:<12} {:>6} {:>9} {:>8.4f}\n", row.block, row.site, row.total, row.surviving,
               row.rate);
  }
  fmt::print(out, "params before {}  after {}  reduction {:.4f}\n", r.params_before, r.params_after,
             r.reduction_ratio);
}

}  // namespace

double parse_threshold(const std::string& text) {
  errno = 0;
  char* end = nullptr;
  const double v = std::strtod(text.c_str(), &end);
  if (text.empty() || end != text.c_str() + text.size() || errno == ERANGE) {
    throw UsageError(fmt::format("--threshold: '{}' is not a real number", text));
  }
  if (std::isnan(v)) throw ConfigError("--threshold: NaN is not a valid threshold");
  return v;
}

TrainSummary cmd_train(const std::string& config_path, const std::string& out_dir, std::ostream& log) {
  const RunConfig cfg = load_config(config_path);
  fs::create_directories(out_dir);
  const fs::path dir(out_dir);
  std::ofstream metrics = open_out(dir / "metrics.jsonl");
  std::ofstream survival = open_out(dir / "survival.jsonl");

  ConformerModel model(cfg.model, cfg.seed);
  AdamOptimizer opt(cfg.optim);
  const ToyTask task(cfg.seed, cfg.model.input_dim, cfg.model.num_classes, cfg.task.seq_len);
  fmt::print(log, "training {} steps, seed {}\n", cfg.optim.steps, cfg.seed);

  for (std::int64_t t = 1; t <= cfg.optim.steps; ++t) {
    const Batch batch = task.generate_batch("train", static_cast<std::uint64_t>(t - 1), cfg.task.batch_size);
    const StepMetrics m = train_step(model, opt, batch);
    if (t % cfg.log.log_interval == 0) {
      const json line = {{"step", m.step}, {"ce", m.ce}, {"frame_acc", m.frame_acc}, {"c_t", m.c_t},
                         {"lr", m.lr}, {"survival_rate_overall", m.survival_rate_overall}};
      metrics << line.dump() << '\n';
      fmt::print(log, "step {:>6}  ce {:.4f}  acc {:.3f}  c {:+.3f}  lr {:.2e}  survival {:.3f}\n", m.step,
                 m.ce, m.frame_acc, m.c_t, m.lr, m.survival_rate_overall);
      log.flush();
    }
    if (t % cfg.log.snapshot_interval == 0 || t == cfg.optim.steps) {
      survival << survival_snapshot(model, t).dump() << '\n';
    }
  }

  const std::int64_t step = opt.step();
  const EvalMetrics ev = evaluate(model, task, cfg.log.eval_batches, cfg.task.batch_size, step);
  TrainSummary s{step, ev.frame_accuracy, ev.ce, overall_survival(model, step)};
  open_out(dir / "eval.json") << json{{"step", step},
                                      {"frame_accuracy", ev.frame_accuracy},
                                      {"ce", ev.ce},
                                      {"chance", 1.0 / static_cast<double>(cfg.model.num_classes)},
                                      {"survival_rate_overall", s.survival_rate_overall}}
                                     .dump(2)
                              << '\n';
  save_checkpoint((dir / "final.ckpt").string(), cfg, step, model, &opt);
  fmt::print(log, "eval frame accuracy {:.4f}  ce {:.4f}  survival {:.4f}\n", ev.frame_accuracy, ev.ce,
             s.survival_rate_overall);
  return s;
}

void cmd_prune(const std::string& ckpt_path, std::optional<double> threshold, const std::string& out_path,
               std::ostream& log) {
  Checkpoint ck = load_checkpoint(ckpt_path);
  const PruneReport report = make_report(ck.model, ck.step, threshold);
  const PruneDecision decision = decide(ck.model, ck.step, report.threshold);
  const ConformerModel pruned = prune_model(ck.model, decision);
  save_checkpoint(out_path, ck.config, ck.step, pruned, nullptr, report.threshold);

  const fs::path dir = fs::absolute(out_path).parent_path();
  open_out(dir / "report.csv") << report_csv(report);
  open_out(dir / "report.json") << report_json(report).dump(2) << '\n';
  print_report(report, log);
}

double cmd_verify(const std::string& ckpt_path, const std::string& pruned_path, std::size_t batches,
                  std::ostream& log) {
  if (batches == 0) throw UsageError("--batches must be >= 1");
  Checkpoint masked = load_checkpoint(ckpt_path);
  Checkpoint pruned = load_checkpoint(pruned_path, masked.config);
  if (masked.model.pruned()) throw ConfigError(ckpt_path + " is already pruned; pass the masked checkpoint");
  if (!pruned.model.pruned() || !pruned.prune_threshold) {
    throw ConfigError(pruned_path + " is not a pruned checkpoint");
  }
  if (pruned.step != masked.step) {
    throw ConfigError(fmt::format("step mismatch: {} vs {}", masked.step, pruned.step));
  }
  const double diff = verify_equivalence(masked.model, pruned.model, masked.step, *pruned.prune_threshold,
                                         batches, masked.config.seed);
  fmt::print(log, "max_abs_diff {:.3e} over {} batches ({})\n", diff, batches,
             diff <= kEquivalenceTol ? "ok" : "MISMATCH");
  return diff;
}

void cmd_report(const std::string& ckpt_path, const std::optional<std::string>& csv_path,
                std::optional<double> threshold, std::ostream& out) {
  const Checkpoint ck = load_checkpoint(ckpt_path);
  const PruneReport report = make_report(ck.model, ck.step, threshold);
  print_report(report, out);
  if (csv_path) open_out(*csv_path) << report_csv(report);
}

int cli_main(int argc, char** argv) {
  CLI::App app{"Adaptive-dropout structured pruning for a toy Conformer encoder", "adlprune"};
  app.require_subcommand(1);

  std::string config_path, out_dir;
  auto* train = app.add_subcommand("train", "Train with adaptive dropout layers");
  train->add_option("--config", config_path, "Run config (JSON)")->required();
  train->add_option("--out", out_dir, "Output directory")->required();

  std::string ckpt, out_path, thr_text;
  auto* prune = app.add_subcommand("prune", "Physically remove units below the threshold");
  prune->add_option("--ckpt", ckpt, "Trained checkpoint")->required();
  prune->add_option("--threshold", thr_text, "Pruning threshold (default: c_inf)");
  prune->add_option("--out", out_path, "Pruned checkpoint path")->required();

  std::string pruned_path;
  long long batches = 0;
  auto* verify = app.add_subcommand("verify", "Check masked and pruned models agree");
  verify->add_option("--ckpt", ckpt, "Masked checkpoint")->required();
  verify->add_option("--pruned", pruned_path, "Pruned checkpoint")->required();
  verify->add_option("--batches", batches, "Number of random batches")->required();

  std::string csv_path;
  auto* report = app.add_subcommand("report", "Print survival rates and parameter counts");
  report->add_option("--ckpt", ckpt, "Checkpoint")->required();
  report->add_option("--csv", csv_path, "Also write the table as CSV");
  report->add_option("--threshold", thr_text, "Threshold (default: c_inf)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitUsage;
  }

  try {
    std::optional<double> thr;
    if (!thr_text.empty()) thr = parse_threshold(thr_text);
    if (*train) {
      cmd_train(config_path, out_dir, std::cout);
    } else if (*prune) {
      cmd_prune(ckpt, thr, out_path, std::cout);
    } else if (*verify) {
      if (batches <= 0) throw UsageError("--batches must be >= 1");
      const double diff = cmd_verify(ckpt, pruned_path, static_cast<std::size_t>(batches), std::cout);
      if (!(diff <= kEquivalenceTol)) {
        fmt::print(stderr, "error: pruned model differs from masked model by {:.3e} (> {:.0e})\n", diff,
                   kEquivalenceTol);
        return kExitValidation;
      }
    } else if (*report) {
      cmd_report(ckpt, csv_path.empty() ? std::nullopt : std::optional(csv_path), thr, std::cout);
    }
  } catch (const UsageError& e) {
    fmt::print(stderr, "usage error: {}\n", e.what());
    return kExitUsage;
  } catch (const NumericalError& e) {
    fmt::print(stderr, "numerical error: {}\n", e.what());
    return kExitNumerical;
  } catch (const std::exception& e) {
    fmt::print(stderr, "error: {}\n", e.what());
    return kExitValidation;
  }
  return kExitOk;
}

}  // namespace adlprune
