// Command-line front end: dataset generation, training, sweeps, evaluation,
// gradient checks and embedding export.
#include <algorithm>
#include <atomic>
#include <charconv>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <mutex>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>
#include <boost/crc.hpp>

#include "ambokd/checkpoint.hpp"
#include "ambokd/config.hpp"
#include "ambokd/data.hpp"
#include "ambokd/gradcheck_suite.hpp"
#include "ambokd/trainer.hpp"

namespace fs = std::filesystem;
using namespace ambokd;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;
constexpr int kExitPartial = 4;

constexpr double kGradTolerance = 1e-4;
constexpr double kOracleTolerance = 1e-10;

std::string output_root() {
  const char* env = std::getenv("AMBOKD_OUTPUT_ROOT");
  return env && *env ? env : "ambokd-out";
}

std::uint32_t crc32_of(const std::vector<unsigned char>& bytes) {
  boost::crc_32_type crc;
  crc.process_bytes(bytes.data(), bytes.size());
  return crc.checksum();
}

/// Output directories must be creatable; checked before anything is written.
void check_output_dir(const std::string& dir) {
  std::error_code ec;
  if (fs::exists(dir, ec) && !fs::is_directory(dir, ec))
    throw config_error("output path '" + dir + "' exists and is not a directory");
}

void check_output_file(const std::string& path) {
  std::error_code ec;
  if (fs::is_directory(path, ec))
    throw config_error("output path '" + path + "' is a directory");
  const fs::path parent = fs::path(path).parent_path();
  if (!parent.empty() && fs::exists(parent, ec) && !fs::is_directory(parent, ec))
    throw config_error("parent of '" + path + "' is not a directory");
}

void make_dirs(const fs::path& dir) {
  if (dir.empty()) return;
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw io_error("cannot create directory '" + dir.string() + "': " + ec.message());
}

void require_file(const std::string& path, const char* what) {
  std::error_code ec;
  if (!fs::is_regular_file(path, ec))
    throw config_error(std::string(what) + " '" + path + "' does not exist");
}

/// Flags shared by every command that resolves a RunConfig. Precedence:
/// built-in defaults, then --config, then --set, then the dedicated flags.
struct RunFlags {
  std::string config_file;
  std::vector<std::string> sets;
  std::optional<std::string> variant;
  std::optional<std::uint64_t> seed;
  std::optional<int> epochs;
  std::optional<std::size_t> batch_size;
  std::optional<std::string> data;
};

void add_run_flags(CLI::App* cmd, RunFlags& f, bool with_variant) {
  cmd->add_option("--config", f.config_file, "Config file of 'key = value' lines");
  cmd->add_option("--set", f.sets, "Override one config key, as key=value (repeatable)");
  if (with_variant)
    cmd->add_option("--variant", f.variant, "Training variant: " + variant_list() +
                                                " (default: ambokd)");
  cmd->add_option("--seed", f.seed, "Run seed (default: 1)");
  cmd->add_option("--epochs", f.epochs, "Training epochs (default: 15)");
  cmd->add_option("--batch-size", f.batch_size, "Mini-batch size (default: 64)");
  cmd->add_option("--data", f.data,
                  "PMD1 dataset file (default: generate the synthetic dataset of data.*)");
}

RunConfig resolve_config(const RunFlags& f) {
  RunConfig cfg;
  if (!f.config_file.empty()) cfg = load_config_file(f.config_file);
  for (const std::string& kv : f.sets) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw config_error("--set expects key=value, got '" + kv + "'");
    set_config_value(cfg, detail::trim(kv.substr(0, eq)), detail::trim(kv.substr(eq + 1)));
  }
  if (f.variant) cfg.variant = parse_variant(*f.variant);
  if (f.seed) cfg.seed = *f.seed;
  if (f.epochs) cfg.epochs = *f.epochs;
  if (f.batch_size) cfg.batch_size = *f.batch_size;
  if (f.data) cfg.data_path = *f.data;
  return cfg;
}

std::string run_dir_name(const RunConfig& cfg) {
  return std::string(variant_name(cfg.variant)) + "-seed" + std::to_string(cfg.seed);
}

std::string fmt_metric(const std::optional<double>& v) { return v ? detail::fmt9(*v) : "NA"; }

void print_epoch(const EpochReport& r, int epochs) {
  std::printf("epoch %d/%d", r.epoch, epochs);
  for (Branch b : kBranches) {
    const BranchEpochStats& s = r.branches[index(b)];
    std::printf("  %s ce=%.4f auc=%s rdg=%.3f", branch_name(b), s.ce,
                s.val.auc ? std::to_string(*s.val.auc).substr(0, 6).c_str() : "NA",
                s.rdg_mean);
  }
  std::printf("\n");
  std::fflush(stdout);
}

// ---------------------------------------------------------------------------
// gen-data

struct GenDataFlags {
  SynthSpec synth;
  std::string out;
};

int cmd_gen_data(const GenDataFlags& f) {
  f.synth.validate();
  const std::string out =
      f.out.empty() ? output_root() + "/data-seed" + std::to_string(f.synth.seed) + ".pmd"
                    : f.out;
  check_output_file(out);
  const Dataset data = generate(f.synth);
  make_dirs(fs::path(out).parent_path());
  save(data, out);
  std::printf("%s crc32=%08x samples=%zu positives=%zu\n", out.c_str(),
              crc32_of(detail::read_file(out)), data.size(), data.count_label(1));
  return kExitOk;
}

// ---------------------------------------------------------------------------
// train

int cmd_train(const RunFlags& rf, const std::string& out_flag) {
  RunConfig cfg = resolve_config(rf);
  if (!out_flag.empty()) cfg.out_dir = out_flag;
  if (cfg.out_dir.empty()) cfg.out_dir = output_root() + "/" + run_dir_name(cfg);
  cfg.validate();
  check_output_dir(cfg.out_dir);

  const PreparedData data = prepare_data(cfg, load_or_generate(cfg));
  make_dirs(cfg.out_dir);
  const fs::path dir(cfg.out_dir);
  write_text((dir / "config.resolved").string(), format_config(cfg));
  RunResult res = run_experiment(cfg, data, [&](const EpochReport& r) {
    print_epoch(r, cfg.epochs);
  });
  write_text((dir / "metrics.csv").string(), format_metrics_csv(res.reports));
  save_checkpoint(res.params, (dir / "checkpoint.ambk").string());
  std::printf("wrote %s/{metrics.csv,checkpoint.ambk,config.resolved}\n", cfg.out_dir.c_str());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// sweep

std::uint64_t parse_seed(const std::string& text) {
  std::uint64_t v = 0;
  const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), v);
  if (ec != std::errc() || end != text.data() + text.size())
    throw config_error("--seeds: cannot parse '" + text + "'");
  return v;
}

std::vector<std::uint64_t> parse_seed_list(const std::string& text) {
  std::vector<std::uint64_t> seeds;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = detail::trim(part);
    if (part.empty()) continue;
    const auto dash = part.find('-');
    if (dash == std::string::npos) {
      seeds.push_back(parse_seed(part));
      continue;
    }
    const std::uint64_t lo = parse_seed(part.substr(0, dash));
    const std::uint64_t hi = parse_seed(part.substr(dash + 1));
    if (hi < lo) throw config_error("--seeds: empty range '" + part + "'");
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
  }
  if (seeds.empty()) throw config_error("--seeds: no seeds given");
  return seeds;
}

std::vector<Variant> parse_variant_list(const std::string& text) {
  std::vector<Variant> out;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    part = detail::trim(part);
    if (!part.empty()) out.push_back(parse_variant(part));
  }
  if (out.empty()) throw config_error("--variants: no variants given");
  return out;
}

struct SweepFlags {
  RunFlags run;
  std::string variants;
  std::string seeds = "1";
  unsigned workers = 1;
  std::string out;
  std::string inject_failure;  // "variant:seed", test hook
};

struct SweepRun {
  RunConfig cfg;
  std::optional<EpochReport> last;
  std::string error;
};

int cmd_sweep(const SweepFlags& f) {
  const RunConfig base = resolve_config(f.run);
  const std::vector<Variant> variants = parse_variant_list(f.variants);
  const std::vector<std::uint64_t> seeds = parse_seed_list(f.seeds);
  if (f.workers == 0) throw config_error("--workers must be >= 1");
  const std::string out = f.out.empty() ? output_root() + "/sweep" : f.out;
  check_output_dir(out);

  std::vector<SweepRun> runs;
  for (Variant v : variants)
    for (std::uint64_t s : seeds) {
      RunConfig cfg = base;
      cfg.variant = v;
      cfg.seed = s;
      cfg.out_dir = (fs::path(out) / run_dir_name(cfg)).string();
      cfg.validate();
      runs.push_back({cfg, std::nullopt, {}});
    }

  const Dataset full = load_or_generate(base);
  make_dirs(out);
  std::atomic<std::size_t> next{0};
  std::mutex print_mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      SweepRun& run = runs[i];
      try {
        const std::string tag = run_dir_name(run.cfg);
        if (!f.inject_failure.empty() &&
            f.inject_failure == std::string(variant_name(run.cfg.variant)) + ":" +
                                    std::to_string(run.cfg.seed))
          throw numerical_error("injected failure for " + tag);
        RunResult res = run_experiment(run.cfg, prepare_data(run.cfg, full));
        make_dirs(run.cfg.out_dir);
        const fs::path dir(run.cfg.out_dir);
        write_text((dir / "config.resolved").string(), format_config(run.cfg));
        write_text((dir / "metrics.csv").string(), format_metrics_csv(res.reports));
        save_checkpoint(res.params, (dir / "checkpoint.ambk").string());
        run.last = res.reports.back();
        std::lock_guard lock(print_mu);
        std::printf("done %s fusion auc=%s\n", tag.c_str(),
                    fmt_metric(run.last->branches[index(Branch::fusion)].val.auc).c_str());
        std::fflush(stdout);
      } catch (const std::exception& e) {
        run.error = e.what();
        std::lock_guard lock(print_mu);
        std::fprintf(stderr, "failed %s: %s\n", run_dir_name(run.cfg).c_str(), e.what());
      }
    }
  };
  std::vector<std::thread> pool;
  const unsigned n = std::min<unsigned>(f.workers, static_cast<unsigned>(runs.size()));
  for (unsigned i = 1; i < n; ++i) pool.emplace_back(worker);
  worker();
  for (auto& t : pool) t.join();

  std::string csv = "variant,seed,branch,auc,acc,f1,precision,status\n";
  bool any_failed = false;
  for (const SweepRun& run : runs) {
    const std::string head = std::string(variant_name(run.cfg.variant)) + "," +
                             std::to_string(run.cfg.seed) + ",";
    for (Branch b : kBranches) {
      if (!run.last) {
        csv += head + branch_name(b) + ",NA,NA,NA,NA,failed\n";
        continue;
      }
      const Metrics& m = run.last->branches[index(b)].val;
      csv += head + branch_name(b) + "," + fmt_metric(m.auc) + "," + detail::fmt9(m.acc) +
             "," + detail::fmt9(m.f1) + "," + detail::fmt9(m.precision) + ",ok\n";
    }
    any_failed = any_failed || !run.last;
  }
  const std::string summary = (fs::path(out) / "summary.csv").string();
  write_text(summary, csv);
  std::printf("wrote %s\n", summary.c_str());
  return any_failed ? kExitPartial : kExitOk;
}

// ---------------------------------------------------------------------------
// eval and dump-embeddings

struct ModelFlags {
  RunFlags run;
  std::string checkpoint;
  std::string split = "validation";
  std::string out;
};

/// Dataset selected by --split, with the config's split and validation noise.
Dataset select_split(const RunConfig& cfg, const std::string& split) {
  Dataset full = load_or_generate(cfg);
  if (split == "all") return full;
  PreparedData p = prepare_data(cfg, full);
  return split == "train" ? std::move(p.train) : std::move(p.validation);
}

struct LoadedModel {
  ModelSpec spec;
  ParamSet params;
  Dataset data;
};

LoadedModel load_model(const ModelFlags& f) {
  const RunConfig cfg = resolve_config(f.run);
  cfg.validate();
  require_file(f.checkpoint, "checkpoint");
  if (f.split != "validation" && f.split != "train" && f.split != "all")
    throw config_error("--split must be validation, train or all, got '" + f.split + "'");
  LoadedModel m;
  m.data = select_split(cfg, f.split);
  m.spec = resolve_model(cfg, m.data);
  m.params = init_params(m.spec, 0);
  try {
    restore_into(m.params, load_checkpoint(f.checkpoint));
  } catch (const format_error& e) {
    throw config_error(e.what());
  } catch (const dimension_error& e) {
    throw config_error(std::string("checkpoint does not match the model layout: ") + e.what());
  }
  return m;
}

int cmd_eval(const ModelFlags& f) {
  if (!f.out.empty()) check_output_file(f.out);
  const LoadedModel m = load_model(f);
  const auto metrics = evaluate(m.spec, m.params, m.data);
  std::string csv = "branch,auc,acc,f1,precision,recall\n";
  for (Branch b : kBranches) {
    const Metrics& x = metrics[index(b)];
    csv += std::string(branch_name(b)) + "," + fmt_metric(x.auc) + "," + detail::fmt9(x.acc) +
           "," + detail::fmt9(x.f1) + "," + detail::fmt9(x.precision) + "," +
           detail::fmt9(x.recall) + "\n";
  }
  std::fputs(csv.c_str(), stdout);
  if (!f.out.empty()) {
    make_dirs(fs::path(f.out).parent_path());
    write_text(f.out, csv);
  }
  return kExitOk;
}

int cmd_dump_embeddings(const ModelFlags& f) {
  const std::string out = f.out.empty() ? output_root() + "/embeddings.csv" : f.out;
  check_output_file(out);
  const LoadedModel m = load_model(f);
  make_dirs(fs::path(out).parent_path());
  dump_embeddings(m.spec, m.params, m.data, out);
  std::printf("wrote %s (%zu rows)\n", out.c_str(), m.data.size());
  return kExitOk;
}

// ---------------------------------------------------------------------------
// gradcheck

struct GradCheckFlags {
  double eps = 1e-5;
  std::size_t seeds = 20;
  std::size_t oracle_instances = 100;
  std::string corrupt;  // block name, test hook
};

int cmd_gradcheck(const GradCheckFlags& f) {
  if (!(f.eps > 0.0) || f.eps > 1e-2) throw config_error("--eps must lie in (0, 1e-2]");
  if (f.seeds == 0) throw config_error("--seeds must be >= 1");
  const auto& blocks = gradcheck_blocks();
  if (!f.corrupt.empty() && std::find(blocks.begin(), blocks.end(), f.corrupt) == blocks.end())
    throw config_error("--corrupt: unknown block '" + f.corrupt + "'");

  std::vector<std::string> failed;
  std::printf("%-16s %-14s %-28s %s\n", "block", "max_rel_error", "worst", "status");
  for (const std::string& block : blocks) {
    GradCheckCase worst;
    for (std::uint64_t s = 1; s <= f.seeds; ++s) {
      GradCheckCase c = run_gradcheck_case(block, s, f.eps, block == f.corrupt);
      if (s == 1 || c.report.max_rel_error > worst.report.max_rel_error) worst = c;
    }
    const bool ok = worst.report.max_rel_error <= kGradTolerance;
    if (!ok) failed.push_back(block);
    const std::string where = worst.report.worst_param + "[" +
                              std::to_string(worst.report.worst_index) + "] seed " +
                              std::to_string(worst.seed);
    std::printf("%-16s %-14.3e %-28s %s\n", block.c_str(), worst.report.max_rel_error,
                where.c_str(), ok ? "ok" : "FAIL");
  }
  const double oracle = ce_oracle_max_error(f.oracle_instances, 12);
  const bool oracle_ok = oracle <= kOracleTolerance;
  if (!oracle_ok) failed.push_back("ce_oracle");
  std::printf("%-16s %-14.3e %-28s %s\n", "ce_oracle", oracle,
              (std::to_string(f.oracle_instances) + " instances").c_str(),
              oracle_ok ? "ok" : "FAIL");
  if (failed.empty()) return kExitOk;
  std::string names;
  for (const auto& b : failed) names += (names.empty() ? "" : ", ") + b;
  std::fprintf(stderr, "gradcheck failed: %s\n", names.c_str());
  return kExitRuntime;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Adaptive modality-balanced online knowledge distillation toolkit"};
  app.require_subcommand(1);
  app.footer("Output root for default paths: $AMBOKD_OUTPUT_ROOT (default: ambokd-out)");

  GenDataFlags gen;
  auto* gen_cmd = app.add_subcommand("gen-data", "Generate a synthetic paired dataset (PMD1)");
  gen_cmd->add_option("--n", gen.synth.n_samples, "Number of samples")->capture_default_str();
  gen_cmd->add_option("--positive-frac", gen.synth.positive_fraction, "Fraction of positives")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  gen_cmd->add_option("--sep-a", gen.synth.sep_a, "Class separation of the image modality")
      ->capture_default_str();
  gen_cmd->add_option("--sep-b", gen.synth.sep_b, "Class separation of the EEG modality")
      ->capture_default_str();
  gen_cmd->add_option("--noise-a", gen.synth.noise_a, "Noise std of the image modality")
      ->capture_default_str();
  gen_cmd->add_option("--noise-b", gen.synth.noise_b, "Noise std of the EEG modality")
      ->capture_default_str();
  gen_cmd->add_option("--classes", gen.synth.num_classes, "Number of classes")
      ->capture_default_str();
  gen_cmd->add_option("--seed", gen.synth.seed, "Generator seed")->capture_default_str();
  gen_cmd->add_option("--out", gen.out, "Output file (default: <root>/data-seed<seed>.pmd)");

  RunFlags train;
  std::string train_out;
  auto* train_cmd = app.add_subcommand("train", "Train one variant and write metrics");
  add_run_flags(train_cmd, train, true);
  train_cmd->add_option("--out", train_out,
                        "Output directory (default: <root>/<variant>-seed<seed>)");

  SweepFlags sweep;
  auto* sweep_cmd = app.add_subcommand("sweep", "Train every variant x seed combination");
  add_run_flags(sweep_cmd, sweep.run, false);
  sweep_cmd->add_option("--variants", sweep.variants, "Comma-separated variants")->required();
  sweep_cmd->add_option("--seeds", sweep.seeds, "Seeds, e.g. 1,2,7 or 1-5")
      ->capture_default_str();
  sweep_cmd->add_option("--workers", sweep.workers, "Parallel runs")->capture_default_str();
  sweep_cmd->add_option("--out", sweep.out, "Output directory (default: <root>/sweep)");
  sweep_cmd->add_option("--inject-failure", sweep.inject_failure)->group("");

  ModelFlags eval;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint per branch");
  add_run_flags(eval_cmd, eval.run, false);
  eval_cmd->add_option("--checkpoint", eval.checkpoint, "Checkpoint file")->required();
  eval_cmd->add_option("--split", eval.split, "validation, train or all")
      ->capture_default_str();
  eval_cmd->add_option("--out", eval.out, "Also write the metrics CSV here");

  ModelFlags dump;
  auto* dump_cmd = app.add_subcommand("dump-embeddings", "Export per-sample branch features");
  add_run_flags(dump_cmd, dump.run, false);
  dump_cmd->add_option("--checkpoint", dump.checkpoint, "Checkpoint file")->required();
  dump_cmd->add_option("--split", dump.split, "validation, train or all")
      ->capture_default_str();
  dump_cmd->add_option("--out", dump.out, "Output CSV (default: <root>/embeddings.csv)");

  GradCheckFlags gc;
  auto* gc_cmd = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  gc_cmd->add_option("--eps", gc.eps, "Central-difference step")->capture_default_str();
  gc_cmd->add_option("--seeds", gc.seeds, "Random instances per block")->capture_default_str();
  gc_cmd->add_option("--oracle-instances", gc.oracle_instances,
                     "Instances for the closed-form cross-entropy gradient check")
      ->capture_default_str();
  gc_cmd->add_option("--corrupt", gc.corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kExitConfig;
  }

  try {
    if (*gen_cmd) return cmd_gen_data(gen);
    if (*train_cmd) return cmd_train(train, train_out);
    if (*sweep_cmd) return cmd_sweep(sweep);
    if (*eval_cmd) return cmd_eval(eval);
    if (*dump_cmd) return cmd_dump_embeddings(dump);
    if (*gc_cmd) return cmd_gradcheck(gc);
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitConfig;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}
