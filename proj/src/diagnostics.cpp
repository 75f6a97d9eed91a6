#include "deq/diagnostics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <ostream>
#include <random>
#include <sstream>

#include "deq/io.hpp"

namespace deq {

DiagnoseMode parse_diagnose_mode(std::string_view name) {
  if (name == "tolerance-sweep") return DiagnoseMode::ToleranceSweep;
  if (name == "iteration-limit-sweep") return DiagnoseMode::IterationLimitSweep;
  if (name == "residual-trace") return DiagnoseMode::ResidualTrace;
  if (name == "iters-per-epoch") return DiagnoseMode::ItersPerEpoch;
  throw std::invalid_argument("unknown diagnose mode '" + std::string(name) +
                              "' (expected tolerance-sweep|iteration-limit-sweep|residual-trace|iters-per-epoch)");
}

std::string_view to_string(DiagnoseMode mode) {
  switch (mode) {
    case DiagnoseMode::ToleranceSweep: return "tolerance-sweep";
    case DiagnoseMode::IterationLimitSweep: return "iteration-limit-sweep";
    case DiagnoseMode::ResidualTrace: return "residual-trace";
    case DiagnoseMode::ItersPerEpoch: return "iters-per-epoch";
  }
  return "?";
}

namespace {

std::string num(double v) {
  std::ostringstream os;
  os.precision(10);
  os << v;
  return os.str();
}

SweepRow sweep_point(const Model& model, const ParamSet& params, const CopyMemoryData& data, double tol,
                     int max_iters, std::size_t limit) {
  EvalOptions opts;
  opts.tol = tol;
  opts.max_iters = max_iters;
  opts.limit = limit;
  const EvalResult r = evaluate(model, params, data, opts);
  return {tol, max_iters, r.loss, r.accuracy, r.mean_forward_evaluations, r.converged_fraction};
}

}  // namespace

void CsvTable::write(std::ostream& out) const {
  auto line = [&](const std::vector<std::string>& cells) {
    for (std::size_t i = 0; i < cells.size(); ++i) out << (i ? "," : "") << cells[i];
    out << '\n';
  };
  line(header);
  for (const auto& r : rows) line(r);
}

void CsvTable::save(const std::filesystem::path& path) const {
  std::ostringstream os;
  write(os);
  io::write_file_atomic(path, os.str());
}

std::vector<SweepRow> tolerance_sweep(const Model& model, const ParamSet& params, const CopyMemoryData& data,
                                      const std::vector<double>& tols, std::size_t limit) {
  std::vector<SweepRow> out;
  for (double tol : tols) {
    if (!(tol > 0)) throw std::invalid_argument("tolerance-sweep: tolerances must be positive");
    out.push_back(sweep_point(model, params, data, tol, model.cfg.max_iters, limit));
  }
  return out;
}

std::vector<SweepRow> iteration_limit_sweep(const Model& model, const ParamSet& params,
                                            const CopyMemoryData& data, const std::vector<int>& limits,
                                            std::size_t limit) {
  std::vector<SweepRow> out;
  for (int it : limits) {
    if (it <= 0) throw std::invalid_argument("iteration-limit-sweep: limits must be positive");
    out.push_back(sweep_point(model, params, data, model.cfg.inference_tol(), it, limit));
  }
  return out;
}

std::vector<TracePoint> residual_traces(const Model& model, const ParamSet& params, const CopyMemoryData& data,
                                        std::size_t samples, double tol, int max_iters) {
  check_model_params(model, params);
  const ParamSet cell_params = params.with_prefix_stripped("cell.");
  std::vector<TracePoint> out;
  const std::size_t count = std::min(samples, data.count());
  for (std::size_t i = 0; i < count; ++i) {
    const Batch batch = make_batch(data, i, i + 1);
    for (SolverKind solver : {SolverKind::Broyden, SolverKind::FixedPoint}) {
      DeqLayer layer = model.inference_layer();
      layer.forward_cfg.tol = tol;
      layer.forward_cfg.max_iters = max_iters;
      layer.solver = solver;
      const EquilibriumResult r = deq_forward(layer, batch.x, cell_params);
      for (const TraceRow& row : residual_trace(r)) out.push_back({i, solver, row, r.evaluations});
    }
  }
  return out;
}

std::vector<EpochIters> iters_per_epoch(const std::vector<MetricsRecord>& metrics) {
  std::map<int, EpochIters> by_epoch;
  std::map<int, long> converged;
  for (const MetricsRecord& m : metrics) {
    EpochIters& e = by_epoch[m.epoch];
    e.epoch = m.epoch;
    ++e.steps;
    e.mean_loss += m.loss;
    e.mean_forward_iters += m.forward_iters;
    e.mean_backward_iters += m.backward_iters;
    if (m.converged) ++converged[m.epoch];
  }
  std::vector<EpochIters> out;
  for (auto& [epoch, e] : by_epoch) {
    const auto n = static_cast<double>(e.steps);
    e.mean_loss /= n;
    e.mean_forward_iters /= n;
    e.mean_backward_iters /= n;
    e.converged_fraction = static_cast<double>(converged[epoch]) / n;
    out.push_back(e);
  }
  return out;
}

CsvTable to_csv(const std::vector<SweepRow>& rows) {
  CsvTable t{{"tol", "max_iters", "loss", "accuracy", "mean_f_evals", "converged_fraction"}, {}};
  for (const SweepRow& r : rows) {
    t.rows.push_back({num(r.tol), std::to_string(r.max_iters), num(r.loss), num(r.accuracy),
                      num(r.mean_evaluations), num(r.converged_fraction)});
  }
  return t;
}

CsvTable to_csv(const std::vector<TracePoint>& rows) {
  CsvTable t{{"sample", "solver", "iter", "residual_norm", "rel_step", "total_f_evals"}, {}};
  for (const TracePoint& r : rows) {
    t.rows.push_back({std::to_string(r.sample), std::string(to_string(r.solver)), std::to_string(r.row.iter),
                      num(r.row.residual_norm), num(r.row.rel_step), std::to_string(r.evaluations)});
  }
  return t;
}

CsvTable to_csv(const std::vector<EpochIters>& rows) {
  CsvTable t{{"epoch", "steps", "mean_loss", "mean_forward_iters", "mean_backward_iters", "converged_fraction"}, {}};
  for (const EpochIters& r : rows) {
    t.rows.push_back({std::to_string(r.epoch), std::to_string(r.steps), num(r.mean_loss),
                      num(r.mean_forward_iters), num(r.mean_backward_iters), num(r.converged_fraction)});
  }
  return t;
}

std::string GradCheckReport::summary() const {
  std::ostringstream os;
  os.precision(3);
  os << (passed ? "PASS" : "FAIL") << ": " << entries.size() << " coordinates, max fd rel err "
     << std::scientific << max_fd_error << ", max unrolled rel err " << max_unrolled_error;
  if (nonsmooth) os << "; " << nonsmooth << " coordinates skipped by the fd check (no stable difference quotient)";
  if (degraded) os << "; DEGRADED: forward solve did not converge, agreement not expected";
  if (worst) {
    os << "; worst " << worst->name << "[" << worst->index << "] implicit " << worst->implicit << " fd "
       << worst->finite_difference << " unrolled " << worst->unrolled;
  }
  return os.str();
}

GradCheckReport grad_check(const DifferentiableFn& cell, const OutputHead& head, const ParamSet& params,
                           const Batch& batch, SolverKind solver, const GradCheckOptions& opts) {
  const ParamSet cell_params = params.with_prefix_stripped("cell.");
  const ParamSet head_params = params.with_prefix_stripped("head.");
  DeqLayer layer;
  layer.f = std::shared_ptr<const DifferentiableFn>(&cell, [](const DifferentiableFn*) {});
  layer.forward_cfg.tol = opts.forward_tol;
  layer.forward_cfg.max_iters = opts.max_iters > 0 ? opts.max_iters : 100;
  layer.backward_cfg.tol = opts.forward_tol;
  layer.backward_cfg.max_iters = std::max(100, layer.forward_cfg.max_iters);
  layer.solver = solver;

  GradCheckReport report;
  const EquilibriumResult fwd = deq_forward(layer, batch.x, cell_params);
  report.forward_converged = fwd.converged;
  report.degraded = !fwd.converged;
  const HeadResult hr = apply_head_and_loss(head, head_params, fwd.solution, batch.targets);
  report.loss = hr.loss;
  const Gradients g = deq_backward(layer, fwd.solution, batch.x, cell_params, hr.dl_dz);
  ParamSet implicit = g.wrt_params.prefixed("cell.");
  implicit.merge(hr.grads.prefixed("head."));

  const UnrolledForward unrolled = unrolled_forward(cell, batch.x, cell_params, opts.unrolled_depth);
  const HeadResult hr_u = apply_head_and_loss(head, head_params, unrolled.output(), batch.targets);
  const Gradients gu = unrolled_backward(cell, unrolled, batch.x, cell_params, hr_u.dl_dz);
  ParamSet explicit_g = gu.wrt_params.prefixed("cell.");
  explicit_g.merge(hr_u.grads.prefixed("head."));

  auto solved_loss = [&](const ParamSet& p) {
    const ParamSet cp = p.with_prefix_stripped("cell.");
    const EquilibriumResult r = deq_forward(layer, batch.x, cp);
    return apply_head_and_loss(head, p.with_prefix_stripped("head."), r.solution, batch.targets).loss;
  };

  double scale = 0.0;
  for (const auto& [name, t] : implicit) scale = std::max(scale, max_abs(t));
  const double floor = std::max(1e-3 * scale, 1e-300);

  std::mt19937_64 rng(opts.seed);
  ParamSet probe = params;
  double worst_ratio = -1.0;
  for (const auto& [name, value] : params) {
    std::vector<std::size_t> idx(value.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(opts.coords, idx.size()));
    std::sort(idx.begin(), idx.end());
    for (std::size_t i : idx) {
      GradCheckEntry e;
      e.name = name;
      e.index = i;
      e.implicit = implicit[name][i];
      e.unrolled = explicit_g[name][i];
      Tensor& slot = probe[name];
      const double keep = slot[i];
      auto central = [&](double h) {
        slot[i] = keep + h;
        const double up = solved_loss(probe);
        slot[i] = keep - h;
        const double down = solved_loss(probe);
        slot[i] = keep;
        return (up - down) / (2 * h);
      };
      // A ReLU kink inside [θ − h, θ + h] makes the estimates at h and h/2
      // disagree by far more than rounding does; halve the step until they
      // are consistent.
      double h = opts.fd_step;
      double coarse = central(h);
      e.nonsmooth = true;
      for (int shrink = 0; shrink < 4; ++shrink) {
        const double fine = central(h / 2);
        if (std::abs(coarse - fine) <= 0.5 * opts.fd_threshold * std::max(std::abs(fine), floor)) {
          e.nonsmooth = false;
          break;
        }
        coarse = fine;
        h /= 2;
      }
      e.finite_difference = coarse;
      e.fd_step = h;
      e.fd_error = std::abs(e.implicit - e.finite_difference) / std::max(std::abs(e.finite_difference), floor);
      e.unrolled_error = std::abs(e.implicit - e.unrolled) / std::max(std::abs(e.unrolled), floor);
      if (e.nonsmooth) {
        ++report.nonsmooth;
      } else {
        report.max_fd_error = std::max(report.max_fd_error, e.fd_error);
      }
      report.max_unrolled_error = std::max(report.max_unrolled_error, e.unrolled_error);
      const double ratio =
          std::max(e.nonsmooth ? 0.0 : e.fd_error / opts.fd_threshold, e.unrolled_error / opts.unrolled_threshold);
      if (!std::isfinite(ratio) || ratio > worst_ratio) {
        worst_ratio = std::isfinite(ratio) ? ratio : std::numeric_limits<double>::infinity();
        report.worst = e;
      }
      report.entries.push_back(std::move(e));
    }
  }
  report.passed = !report.degraded && report.nonsmooth < report.entries.size() &&
                  report.max_fd_error <= opts.fd_threshold &&
                  report.max_unrolled_error <= opts.unrolled_threshold;
  return report;
}

GradCheckReport grad_check(const TrainConfig& cfg, const GradCheckOptions& opts) {
  const Model model = build_model(cfg);
  const ParamSet params = init_model_params(model);
  std::mt19937_64 rng(cfg.seed);
  const CopyMemoryData data = generate_copy_memory(2, cfg.seq_len, rng);
  GradCheckOptions o = opts;
  if (o.max_iters <= 0) o.max_iters = std::max(cfg.max_iters, 1);
  return grad_check(*model.cell, model.head, params, make_batch(data, 0, 2), cfg.solver, o);
}

}  // namespace deq
