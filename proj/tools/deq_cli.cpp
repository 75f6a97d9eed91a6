// deq: copy-memory data generation, training, evaluation and diagnostics.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "deq/checkpoint.hpp"
#include "deq/config.hpp"
#include "deq/data.hpp"
#include "deq/diagnostics.hpp"
#include "deq/training.hpp"

namespace fs = std::filesystem;
using namespace deq;

namespace {

/// Flags shared by every subcommand that needs a TrainConfig. They are
/// applied on top of --config (or the defaults) in a fixed order.
struct ConfigFlags {
  std::string config;
  std::optional<std::string> model, solver;
  std::optional<std::size_t> seq_len;
  std::optional<double> tol_fwd, tol_bwd, tol_inf;
  std::optional<int> max_iters, warmup_depth;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> settings;

  void attach(CLI::App* app) {
    app->add_option("--config", config, "flat key=value config file");
    app->add_option("--model", model, "trellis|transformer");
    app->add_option("--seq-len", seq_len, "copy-memory delay T");
    app->add_option("--tol-fwd", tol_fwd, "training forward tolerance");
    app->add_option("--tol-bwd", tol_bwd, "backward tolerance");
    app->add_option("--tol-inf", tol_inf, "inference tolerance");
    app->add_option("--max-iters", max_iters, "forward iteration limit");
    app->add_option("--solver", solver, "broyden|fixpoint");
    app->add_option("--seed", seed, "random seed");
    app->add_option("--warmup-depth", warmup_depth, "depth of the unrolled warmup stack");
    app->add_option("--set", settings, "extra key=value overrides")->take_all();
  }

  TrainConfig resolve(TrainConfig base = {}) const {
    TrainConfig cfg = config.empty() ? base : load_config(config, base);
    if (model) apply_setting(cfg, "model", *model);
    if (solver) apply_setting(cfg, "solver", *solver);
    if (seq_len) cfg.seq_len = *seq_len;
    if (tol_fwd) cfg.tol_fwd = *tol_fwd;
    if (tol_bwd) cfg.tol_bwd = *tol_bwd;
    if (tol_inf) cfg.tol_inf = *tol_inf;
    if (max_iters) cfg.max_iters = *max_iters;
    if (warmup_depth) cfg.warmup_depth = *warmup_depth;
    if (seed) cfg.seed = *seed;
    for (const std::string& s : settings) {
      const auto eq = s.find('=');
      if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + s + "'");
      apply_setting(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    cfg.validate();
    return cfg;
  }
};

/// Loads the split files, generating them from the config when the directory
/// has none yet.
std::pair<CopyMemoryData, CopyMemoryData> load_or_generate(const TrainConfig& cfg, const fs::path& dir) {
  if (!fs::exists(dir / "train.bin") || !fs::exists(dir / "test.bin")) {
    std::cerr << "generating copy-memory data in " << dir << "\n";
    gen_copy_memory(cfg.n_train, cfg.n_test, cfg.seq_len, cfg.seed, dir);
  }
  return {read_dataset(dir / "train.bin"), read_dataset(dir / "test.bin")};
}

/// Config for a saved run: the run's config.txt unless --config is given,
/// then the command-line overrides.
TrainConfig run_config(const ConfigFlags& flags, const fs::path& checkpoint) {
  ConfigFlags f = flags;
  if (f.config.empty()) {
    const fs::path saved = checkpoint.parent_path() / "config.txt";
    if (fs::exists(saved)) f.config = saved.string();
  }
  return f.resolve();
}

nlohmann::ordered_json to_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["instances"] = r.instances;
  j["loss"] = r.loss;
  j["accuracy"] = r.accuracy;
  j["mean_forward_iters"] = r.mean_forward_iters;
  j["mean_forward_evaluations"] = r.mean_forward_evaluations;
  j["converged_fraction"] = r.converged_fraction;
  j["converged"] = r.converged_fraction == 1.0;
  j["position_accuracy"] = r.position_accuracy;
  return j;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Deep equilibrium sequence models on the copy-memory task"};
  app.require_subcommand(1);

  ConfigFlags gen_flags, train_flags, eval_flags, diag_flags, check_flags;
  std::string gen_out = "data";
  auto* gen = app.add_subcommand("gen-data", "write train.bin and test.bin");
  gen_flags.attach(gen);
  gen->add_option("--out", gen_out, "output directory");

  std::string train_out = "run", train_data;
  auto* tr = app.add_subcommand("train", "train a model and write logs and checkpoints");
  train_flags.attach(tr);
  tr->add_option("--out", train_out, "run directory");
  tr->add_option("--data", train_data, "dataset directory (default <out>/data, generated if missing)");

  std::string eval_ckpt = "run/checkpoint.deqc", eval_data, eval_split = "test", eval_out;
  std::size_t eval_limit = 0, eval_batch = 0;
  auto* ev = app.add_subcommand("eval", "score a checkpoint");
  eval_flags.attach(ev);
  ev->add_option("--checkpoint", eval_ckpt, "checkpoint file");
  ev->add_option("--data", eval_data, "dataset directory (default <checkpoint dir>/data)");
  ev->add_option("--split", eval_split, "train|test")->check(CLI::IsMember({"train", "test"}));
  ev->add_option("--limit", eval_limit, "score only the first N instances");
  ev->add_option("--batch-size", eval_batch, "evaluation batch size");
  ev->add_option("--out", eval_out, "also write the JSON report here");

  std::string diag_mode, diag_ckpt = "run/checkpoint.deqc", diag_data, diag_metrics, diag_out;
  std::vector<double> diag_tols = {1e-4, 1e-3, 1e-2, 1e-1, 1.0};
  std::vector<int> diag_limits = {1, 2, 5, 10, 20, 30};
  std::size_t diag_limit = 100, diag_samples = 3;
  auto* dg = app.add_subcommand("diagnose", "emit CSV diagnostics for a checkpoint or metrics log");
  diag_flags.attach(dg);
  dg->add_option("mode", diag_mode, "tolerance-sweep|iteration-limit-sweep|residual-trace|iters-per-epoch")
      ->required();
  dg->add_option("--checkpoint", diag_ckpt, "checkpoint file");
  dg->add_option("--data", diag_data, "dataset directory (default <checkpoint dir>/data)");
  dg->add_option("--metrics", diag_metrics, "metrics log (default <checkpoint dir>/metrics.jsonl)");
  dg->add_option("--tols", diag_tols, "tolerance grid");
  dg->add_option("--limits", diag_limits, "iteration-limit grid");
  dg->add_option("--limit", diag_limit, "test instances per sweep point");
  dg->add_option("--samples", diag_samples, "instances traced by residual-trace");
  dg->add_option("--out", diag_out, "CSV file (stdout when omitted)");

  GradCheckOptions gc;
  std::size_t gc_coords = gc.coords;
  std::uint64_t gc_seed = 0;
  auto* gk = app.add_subcommand("grad-check", "compare implicit, finite-difference and unrolled gradients");
  check_flags.attach(gk);
  gk->add_option("--coords", gc_coords, "coordinates sampled per parameter tensor");
  gk->add_option("--sample-seed", gc_seed, "seed for coordinate sampling");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) {
      const TrainConfig cfg = gen_flags.resolve();
      gen_copy_memory(cfg.n_train, cfg.n_test, cfg.seq_len, cfg.seed, gen_out);
      std::cout << "wrote " << cfg.n_train << " train and " << cfg.n_test << " test instances of length "
                << cfg.total_length() << " to " << gen_out << "\n";
      return 0;
    }
    if (tr->parsed()) {
      const TrainConfig cfg = train_flags.resolve();
      const fs::path out = train_out;
      const auto [train_set, test_set] = load_or_generate(cfg, train_data.empty() ? out / "data" : fs::path(train_data));
      const TrainResult r = train(cfg, train_set, test_set, out);
      for (const EpochSummary& e : r.epochs) {
        std::printf("epoch %d step %ld train_loss %.6g test_loss %.6g test_acc %.4f fwd_iters %.2f\n", e.epoch,
                    e.step, e.train_loss, e.test.loss, e.test.accuracy, e.test.mean_forward_iters);
      }
      return 0;
    }
    if (ev->parsed()) {
      const fs::path ckpt = eval_ckpt;
      const TrainConfig cfg = run_config(eval_flags, ckpt);
      const Model model = build_model(cfg);
      const ParamSet params = load_checkpoint(ckpt);
      const auto [train_set, test_set] =
          load_or_generate(cfg, eval_data.empty() ? ckpt.parent_path() / "data" : fs::path(eval_data));
      EvalOptions opts;
      opts.limit = eval_limit;
      opts.batch_size = eval_batch;
      const EvalResult r = evaluate(model, params, eval_split == "train" ? train_set : test_set, opts);
      nlohmann::ordered_json j = to_json(r);
      j["split"] = eval_split;
      j["tol"] = cfg.inference_tol();
      std::cout << j.dump() << "\n";
      if (!eval_out.empty()) std::ofstream(eval_out) << j.dump(2) << "\n";
      return 0;
    }
    if (dg->parsed()) {
      const DiagnoseMode mode = parse_diagnose_mode(diag_mode);
      const fs::path ckpt = diag_ckpt;
      CsvTable table;
      if (mode == DiagnoseMode::ItersPerEpoch) {
        const fs::path log = diag_metrics.empty() ? ckpt.parent_path() / "metrics.jsonl" : fs::path(diag_metrics);
        table = to_csv(iters_per_epoch(read_metrics(log)));
      } else {
        const TrainConfig cfg = run_config(diag_flags, ckpt);
        const Model model = build_model(cfg);
        const ParamSet params = load_checkpoint(ckpt);
        const auto [train_set, test_set] =
            load_or_generate(cfg, diag_data.empty() ? ckpt.parent_path() / "data" : fs::path(diag_data));
        if (mode == DiagnoseMode::ToleranceSweep) {
          table = to_csv(tolerance_sweep(model, params, test_set, diag_tols, diag_limit));
        } else if (mode == DiagnoseMode::IterationLimitSweep) {
          table = to_csv(iteration_limit_sweep(model, params, test_set, diag_limits, diag_limit));
        } else {
          table = to_csv(residual_traces(model, params, test_set, diag_samples, cfg.forward_tol(), cfg.max_iters));
        }
      }
      if (diag_out.empty()) {
        table.write(std::cout);
      } else {
        table.save(diag_out);
      }
      return 0;
    }
    if (gk->parsed()) {
      const TrainConfig cfg = check_flags.resolve();
      gc.coords = gc_coords;
      gc.seed = gc_seed;
      const GradCheckReport report = grad_check(cfg, gc);
      std::cout << report.summary() << "\n";
      return report.passed ? 0 : 1;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
