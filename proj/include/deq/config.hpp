#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <stdexcept>
#include <string_view>

#include "deq/deq.hpp"

namespace deq {

enum class ModelKind { Trellis, Transformer };
enum class OptimizerKind { Sgd, Adam };
enum class LrSchedule { Constant, Cosine };

/// Everything the harness needs to build, train and evaluate a model. Field
/// names double as config-file keys.
struct TrainConfig {
  ModelKind model = ModelKind::Transformer;
  // transformer
  std::size_t d = 16;
  std::size_t heads = 2;
  std::size_t pos_offsets = 0;  // relative-bias table size; 0 means the full sequence length
  // trellis (hidden width 2m)
  std::size_t m = 16;
  std::size_t kernel = 2;
  std::size_t dilation = 1;

  std::size_t seq_len = 80;  // copy-memory delay T; sequences have T + 20 positions
  std::size_t n_train = 20000;
  std::size_t n_test = 2000;

  OptimizerKind optimizer = OptimizerKind::Adam;
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double grad_clip = 0.5;
  LrSchedule lr_schedule = LrSchedule::Constant;
  int epochs = 20;
  std::size_t batch_size = 32;
  std::uint64_t seed = 0;

  // Non-positive tolerances resolve to the sequence-length defaults below.
  double tol_fwd = 0.0;
  double tol_bwd = 0.0;
  double tol_inf = 0.0;
  int max_iters = 30;
  int bwd_max_iters = 30;
  SolverKind solver = SolverKind::Broyden;

  int warmup_depth = 2;
  long warmup_steps = 0;  // steps trained as an unrolled stack first; 0 disables, −1 means one epoch

  double target_loss = 0.0;   // stop after an epoch whose test loss is below this; 0 disables
  std::size_t eval_subset = 0;  // test instances scored after each epoch; 0 means all
  long max_steps = 0;           // stop after this many optimizer steps; 0 disables
  bool test_mode = false;       // report wall_seconds as 0 so logs are reproducible

  std::size_t total_length() const { return seq_len + 20; }
  /// √L·1e−5, √L·1e−8 and √L·1e−2 for L = total_length() unless set.
  double forward_tol() const;
  double backward_tol() const;
  double inference_tol() const;

  void validate() const;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Sets one field from its textual form; unknown keys and bad values throw.
void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value);
/// Lines of `key = value`; blank lines and lines starting with '#' are skipped.
TrainConfig parse_config(std::string_view text, TrainConfig base = {});
TrainConfig load_config(const std::filesystem::path& path, TrainConfig base = {});
/// Round-trips through parse_config.
std::string format_config(const TrainConfig& cfg);

std::string_view to_string(ModelKind kind);
ModelKind parse_model_kind(std::string_view name);

}  // namespace deq
