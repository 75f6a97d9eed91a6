#pragma once

#include <filesystem>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "deq/config.hpp"
#include "deq/data.hpp"
#include "deq/deq.hpp"
#include "deq/head.hpp"

namespace deq {

/// A cell f_θ plus a classification head over the ten copy-memory symbols.
/// Parameters live in one set with "cell." and "head." prefixes.
struct Model {
  TrainConfig cfg;
  std::shared_ptr<const DifferentiableFn> cell;
  OutputHead head;

  std::vector<ParamInfo> param_layout() const;
  /// Forward and backward solver settings taken from cfg.
  DeqLayer training_layer() const;
  DeqLayer inference_layer() const;
};

Model build_model(const TrainConfig& cfg);
ParamSet init_model_params(const Model& model);
/// Checks every declared tensor is present with the declared shape, naming
/// the first offending entry otherwise.
void check_model_params(const Model& model, const ParamSet& params);

/// Rescales grads in place so their global ℓ2 norm is at most max_norm
/// (0 disables). Returns the norm before clipping.
double clip_global_norm(ParamSet& grads, double max_norm);

double scheduled_lr(const TrainConfig& cfg, long step, long total_steps);

class Optimizer {
 public:
  explicit Optimizer(const TrainConfig& cfg) : cfg_(cfg) {}
  void step(ParamSet& params, const ParamSet& grads, double lr);
  long steps() const noexcept { return t_; }

 private:
  TrainConfig cfg_;
  ParamSet m_, v_;
  long t_ = 0;
};

struct StepStats {
  double loss = 0.0;
  int forward_iters = 0;
  int backward_iters = 0;
  int forward_evaluations = 0;
  double residual_norm = 0.0;
  bool converged = false;
};

/// Loss and full-model gradients for one batch. With `unrolled_depth` set,
/// the cell runs as an explicit weight-tied stack of that depth instead of
/// an equilibrium layer.
StepStats compute_gradients(const Model& model, const ParamSet& params, const Batch& batch,
                            ParamSet& grads, std::optional<int> unrolled_depth = std::nullopt);

struct MetricsRecord {
  int epoch = 0;
  long step = 0;
  double loss = 0.0;
  int forward_iters = 0;
  int backward_iters = 0;
  double residual_norm = 0.0;
  bool converged = false;
  double wall_seconds = 0.0;

  std::string to_json() const;
  static MetricsRecord from_json(const std::string& line);
  friend bool operator==(const MetricsRecord&, const MetricsRecord&) = default;
};

struct EvalResult {
  double loss = 0.0;
  double accuracy = 0.0;
  std::vector<double> position_accuracy;
  double mean_forward_iters = 0.0;
  double mean_forward_evaluations = 0.0;
  double converged_fraction = 0.0;
  std::size_t instances = 0;
};

struct EvalOptions {
  double tol = 0.0;  // 0 means the config's inference tolerance
  int max_iters = 0;  // 0 means the config's max_iters
  std::optional<SolverKind> solver;
  std::size_t batch_size = 0;  // 0 means the config's batch size
  std::size_t limit = 0;       // score only the first `limit` instances; 0 means all
};

EvalResult evaluate(const Model& model, const ParamSet& params, const CopyMemoryData& data,
                    const EvalOptions& opts = {});

class TrainingAborted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct EpochSummary {
  int epoch = 0;
  long step = 0;
  double train_loss = 0.0;  // mean over the epoch's steps
  EvalResult test;
};

struct TrainResult {
  ParamSet params;
  std::vector<MetricsRecord> metrics;
  std::vector<EpochSummary> epochs;
  long steps = 0;
  bool stopped_early = false;
};

/// Runs the training loop. When out_dir is non-empty it receives config.txt,
/// metrics.jsonl (one line per step, flushed as written), eval.jsonl (one
/// line per epoch) and checkpoint.deqc (replaced atomically after every
/// epoch). A non-finite loss throws TrainingAborted and leaves the last
/// epoch's checkpoint in place.
TrainResult train(const TrainConfig& cfg, const CopyMemoryData& train_set, const CopyMemoryData& test_set,
                  const std::filesystem::path& out_dir = {});

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path);

}  // namespace deq
