#pragma once

#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deq/training.hpp"

namespace deq {

enum class DiagnoseMode { ToleranceSweep, IterationLimitSweep, ResidualTrace, ItersPerEpoch };

DiagnoseMode parse_diagnose_mode(std::string_view name);
std::string_view to_string(DiagnoseMode mode);

/// A CSV table: header names and rows of already-formatted cells.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  void write(std::ostream& out) const;
  void save(const std::filesystem::path& path) const;
};

struct SweepRow {
  double tol = 0.0;
  int max_iters = 0;
  double loss = 0.0;
  double accuracy = 0.0;
  double mean_evaluations = 0.0;
  double converged_fraction = 0.0;
};

/// Evaluates the first `limit` instances once per tolerance, keeping max_iters.
std::vector<SweepRow> tolerance_sweep(const Model& model, const ParamSet& params, const CopyMemoryData& data,
                                      const std::vector<double>& tols, std::size_t limit);
/// Evaluates once per iteration limit at the inference tolerance.
std::vector<SweepRow> iteration_limit_sweep(const Model& model, const ParamSet& params,
                                            const CopyMemoryData& data, const std::vector<int>& limits,
                                            std::size_t limit);

struct TracePoint {
  std::size_t sample = 0;
  SolverKind solver = SolverKind::Broyden;
  TraceRow row;
  int evaluations = 0;  // solver total for the run, repeated on every row
};

/// Forward solves of single instances under both solvers, one row per
/// iteration.
std::vector<TracePoint> residual_traces(const Model& model, const ParamSet& params, const CopyMemoryData& data,
                                        std::size_t samples, double tol, int max_iters);

struct EpochIters {
  int epoch = 0;
  long steps = 0;
  double mean_loss = 0.0;
  double mean_forward_iters = 0.0;
  double mean_backward_iters = 0.0;
  double converged_fraction = 0.0;
};

std::vector<EpochIters> iters_per_epoch(const std::vector<MetricsRecord>& metrics);

CsvTable to_csv(const std::vector<SweepRow>& rows);
CsvTable to_csv(const std::vector<TracePoint>& rows);
CsvTable to_csv(const std::vector<EpochIters>& rows);

struct GradCheckOptions {
  std::size_t coords = 20;  // sampled per parameter tensor
  std::uint64_t seed = 0;
  double fd_step = 1e-5;
  double fd_threshold = 1e-5;
  double unrolled_threshold = 1e-4;
  double forward_tol = 1e-13;
  int max_iters = 0;        // forward budget; 0 means the config's max_iters
  int unrolled_depth = 400;
};

struct GradCheckEntry {
  std::string name;
  std::size_t index = 0;
  double implicit = 0.0;
  double finite_difference = 0.0;
  double fd_step = 0.0;
  double unrolled = 0.0;
  double fd_error = 0.0;
  double unrolled_error = 0.0;
  bool nonsmooth = false;  // difference quotients never settled; excluded from the fd check
};

struct GradCheckReport {
  std::vector<GradCheckEntry> entries;
  double max_fd_error = 0.0;
  double max_unrolled_error = 0.0;
  std::size_t nonsmooth = 0;
  std::optional<GradCheckEntry> worst;  // largest error relative to its threshold
  bool forward_converged = false;
  bool degraded = false;  // the forward solve missed its tolerance, so agreement is not expected
  bool passed = false;
  double loss = 0.0;

  std::string summary() const;
};

/// Compares implicit gradients of the head loss against central differences
/// through re-solved equilibria and against backprop through an unrolled
/// stack, on sampled coordinates. Per-coordinate errors are
/// |a − b| / max(|b|, 1e−3·max|∇|) so that near-zero entries do not dominate.
/// The difference step starts at fd_step and is halved (at most four times)
/// while successive estimates disagree, which keeps it clear of activation
/// kinks. Coordinates whose estimates never settle sit on a non-smooth
/// stretch of the loss and are reported but left out of the fd comparison.
GradCheckReport grad_check(const DifferentiableFn& cell, const OutputHead& head, const ParamSet& params,
                           const Batch& batch, SolverKind solver, const GradCheckOptions& opts);
/// Builds the configured model at its initial parameters and checks it on a
/// freshly generated copy-memory batch of two instances.
GradCheckReport grad_check(const TrainConfig& cfg, const GradCheckOptions& opts);

}  // namespace deq
