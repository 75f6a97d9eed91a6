#include "deq/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>

#include "json.hpp"

#include "deq/checkpoint.hpp"
#include "deq/io.hpp"
#include "deq/transformer.hpp"
#include "deq/trellis.hpp"

namespace deq {

namespace {

constexpr double kAdamEps = 1e-8;

ParamSet combine(const ParamSet& cell, const ParamSet& head) {
  ParamSet out = cell.prefixed("cell.");
  out.merge(head.prefixed("head."));
  return out;
}

}  // namespace

std::vector<ParamInfo> Model::param_layout() const {
  std::vector<ParamInfo> out;
  for (ParamInfo info : cell->param_layout()) {
    info.name = "cell." + info.name;
    out.push_back(std::move(info));
  }
  for (ParamInfo info : head.param_layout()) {
    info.name = "head." + info.name;
    out.push_back(std::move(info));
  }
  return out;
}

DeqLayer Model::training_layer() const {
  DeqLayer layer;
  layer.f = cell;
  layer.forward_cfg.tol = cfg.forward_tol();
  layer.forward_cfg.max_iters = cfg.max_iters;
  layer.backward_cfg.tol = cfg.backward_tol();
  layer.backward_cfg.max_iters = cfg.bwd_max_iters;
  layer.solver = cfg.solver;
  return layer;
}

DeqLayer Model::inference_layer() const {
  DeqLayer layer = training_layer();
  layer.forward_cfg.tol = cfg.inference_tol();
  return layer;
}

Model build_model(const TrainConfig& cfg) {
  cfg.validate();
  Model model;
  model.cfg = cfg;
  if (cfg.model == ModelKind::Transformer) {
    const std::size_t offsets = cfg.pos_offsets ? cfg.pos_offsets : cfg.total_length();
    model.cell = std::make_shared<TransformerCell>(TransformerDims{kCopySymbols, cfg.d, cfg.heads, offsets});
  } else {
    model.cell = std::make_shared<TrellisCell>(TrellisDims{kCopySymbols, cfg.m, cfg.kernel, cfg.dilation});
  }
  model.head = OutputHead{model.cell->hidden_width(), kCopySymbols, LossKind::CrossEntropy};
  return model;
}

ParamSet init_model_params(const Model& model) { return init_params(model.param_layout(), model.cfg.seed); }

void check_model_params(const Model& model, const ParamSet& params) {
  const auto layout = model.param_layout();
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const ParamInfo& info = layout[i];
    if (!params.contains(info.name)) {
      throw ShapeError("parameter entry " + std::to_string(i) + " '" + info.name + "' is missing");
    }
    if (params[info.name].shape() != info.shape) {
      throw ShapeError("parameter entry " + std::to_string(i) + " '" + info.name + "' has shape " +
                       to_string(params[info.name].shape()) + ", expected " + to_string(info.shape));
    }
  }
  if (params.size() != layout.size()) {
    for (const auto& [name, value] : params) {
      const bool known = std::any_of(layout.begin(), layout.end(), [&](const ParamInfo& p) { return p.name == name; });
      if (!known) throw ShapeError("unexpected parameter entry '" + name + "'");
    }
  }
}

double clip_global_norm(ParamSet& grads, double max_norm) {
  const double norm = norm2(grads);
  if (max_norm > 0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& [name, g] : grads) g *= scale;
  }
  return norm;
}

double scheduled_lr(const TrainConfig& cfg, long step, long total_steps) {
  if (cfg.lr_schedule == LrSchedule::Constant || total_steps <= 0) return cfg.lr;
  const double frac = std::min(1.0, static_cast<double>(step) / static_cast<double>(total_steps));
  return 0.5 * cfg.lr * (1.0 + std::cos(std::numbers::pi * frac));
}

void Optimizer::step(ParamSet& params, const ParamSet& grads, double lr) {
  ++t_;
  if (cfg_.optimizer == OptimizerKind::Sgd) {
    for (auto& [name, p] : params) {
      const Tensor& g = grads[name];
      for (std::size_t i = 0; i < p.size(); ++i) {
        const double delta = lr * g[i];
        if (delta != 0.0) p[i] -= delta;
      }
    }
    return;
  }
  if (m_.empty()) {
    m_ = params.zeros_like();
    v_ = params.zeros_like();
  }
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& [name, p] : params) {
    const Tensor& g = grads[name];
    Tensor& m = m_[name];
    Tensor& v = v_[name];
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double delta = lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + kAdamEps);
      if (delta != 0.0) p[i] -= delta;
    }
  }
}

StepStats compute_gradients(const Model& model, const ParamSet& params, const Batch& batch, ParamSet& grads,
                            std::optional<int> unrolled_depth) {
  const ParamSet cell_params = params.with_prefix_stripped("cell.");
  const ParamSet head_params = params.with_prefix_stripped("head.");
  StepStats stats;
  if (unrolled_depth) {
    const UnrolledForward fwd = unrolled_forward(*model.cell, batch.x, cell_params, *unrolled_depth);
    const HeadResult hr = apply_head_and_loss(model.head, head_params, fwd.output(), batch.targets);
    const Gradients g = unrolled_backward(*model.cell, fwd, batch.x, cell_params, hr.dl_dz);
    grads = combine(g.wrt_params, hr.grads);
    stats.loss = hr.loss;
    stats.forward_iters = *unrolled_depth;
    stats.forward_evaluations = *unrolled_depth;
    stats.backward_iters = *unrolled_depth;
    const Tensor& z = fwd.output();
    stats.residual_norm = norm2(model.cell->forward(z, batch.x, cell_params) - z);
    stats.converged = stats.residual_norm < model.cfg.forward_tol();
    return stats;
  }
  const DeqLayer layer = model.training_layer();
  const EquilibriumResult fwd = deq_forward(layer, batch.x, cell_params);
  const HeadResult hr = apply_head_and_loss(model.head, head_params, fwd.solution, batch.targets);
  const Gradients g = deq_backward(layer, fwd.solution, batch.x, cell_params, hr.dl_dz);
  grads = combine(g.wrt_params, hr.grads);
  stats.loss = hr.loss;
  stats.forward_iters = fwd.iters;
  stats.forward_evaluations = fwd.evaluations;
  stats.backward_iters = g.backward.iters;
  stats.residual_norm = fwd.residual_norm;
  stats.converged = fwd.converged;
  return stats;
}

std::string MetricsRecord::to_json() const {
  nlohmann::ordered_json j;
  j["epoch"] = epoch;
  j["step"] = step;
  j["loss"] = loss;
  j["forward_iters"] = forward_iters;
  j["backward_iters"] = backward_iters;
  j["residual_norm"] = residual_norm;
  j["converged"] = converged;
  j["wall_seconds"] = wall_seconds;
  return j.dump();
}

MetricsRecord MetricsRecord::from_json(const std::string& line) {
  const auto j = nlohmann::json::parse(line);
  MetricsRecord r;
  r.epoch = j.at("epoch").get<int>();
  r.step = j.at("step").get<long>();
  r.loss = j.at("loss").get<double>();
  r.forward_iters = j.at("forward_iters").get<int>();
  r.backward_iters = j.at("backward_iters").get<int>();
  r.residual_norm = j.at("residual_norm").get<double>();
  r.converged = j.at("converged").get<bool>();
  r.wall_seconds = j.at("wall_seconds").get<double>();
  return r;
}

std::vector<MetricsRecord> read_metrics(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open metrics log " + path.string());
  std::vector<MetricsRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.push_back(MetricsRecord::from_json(line));
    } catch (const nlohmann::json::exception& e) {
      throw std::runtime_error(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

EvalResult evaluate(const Model& model, const ParamSet& params, const CopyMemoryData& data,
                    const EvalOptions& opts) {
  check_model_params(model, params);
  DeqLayer layer = model.inference_layer();
  if (opts.tol > 0) layer.forward_cfg.tol = opts.tol;
  if (opts.max_iters > 0) layer.forward_cfg.max_iters = opts.max_iters;
  if (opts.solver) layer.solver = *opts.solver;
  const std::size_t batch_size = opts.batch_size ? opts.batch_size : model.cfg.batch_size;
  const std::size_t count = opts.limit ? std::min(opts.limit, data.count()) : data.count();
  const ParamSet cell_params = params.with_prefix_stripped("cell.");
  const ParamSet head_params = params.with_prefix_stripped("head.");

  EvalResult r;
  r.instances = count;
  r.position_accuracy.assign(data.length, 0.0);
  std::size_t batches = 0, converged = 0;
  double loss_sum = 0.0, iters = 0.0, evals = 0.0;
  for (std::size_t begin = 0; begin < count; begin += batch_size) {
    const Batch batch = make_batch(data, begin, std::min(begin + batch_size, count));
    const std::size_t n = batch.x.dim(0);
    const EquilibriumResult fwd = deq_forward(layer, batch.x, cell_params);
    const HeadResult hr = apply_head_and_loss(model.head, head_params, fwd.solution, batch.targets);
    loss_sum += hr.loss * static_cast<double>(n);
    const std::size_t q = model.head.outputs;
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t t = 0; t < data.length; ++t) {
        const std::size_t row = i * data.length + t;
        const double* o = hr.outputs.ptr() + row * q;
        const auto best = static_cast<std::size_t>(std::max_element(o, o + q) - o);
        if (static_cast<double>(best) == batch.targets[row]) r.position_accuracy[t] += 1.0;
      }
    }
    iters += fwd.iters;
    evals += fwd.evaluations;
    if (fwd.converged) ++converged;
    ++batches;
  }
  if (count == 0) return r;
  r.loss = loss_sum / static_cast<double>(count);
  double hits = 0.0;
  for (double& a : r.position_accuracy) {
    hits += a;
    a /= static_cast<double>(count);
  }
  r.accuracy = hits / static_cast<double>(count * data.length);
  r.mean_forward_iters = iters / static_cast<double>(batches);
  r.mean_forward_evaluations = evals / static_cast<double>(batches);
  r.converged_fraction = static_cast<double>(converged) / static_cast<double>(batches);
  return r;
}

TrainResult train(const TrainConfig& cfg, const CopyMemoryData& train_set, const CopyMemoryData& test_set,
                  const std::filesystem::path& out_dir) {
  cfg.validate();
  if (train_set.length != cfg.total_length() || test_set.length != cfg.total_length()) {
    throw DatasetError("dataset sequence length " + std::to_string(train_set.length) + " does not match seq_len " +
                       std::to_string(cfg.seq_len) + " + 20");
  }
  if (train_set.count() == 0) throw DatasetError("training set is empty");
  const Model model = build_model(cfg);
  TrainResult result;
  result.params = init_model_params(model);
  Optimizer opt(cfg);

  std::ofstream metrics_out, eval_out;
  if (!out_dir.empty()) {
    std::filesystem::create_directories(out_dir);
    io::write_file_atomic(out_dir / "config.txt", format_config(cfg));
    metrics_out.open(out_dir / "metrics.jsonl", std::ios::trunc);
    eval_out.open(out_dir / "eval.jsonl", std::ios::trunc);
    if (!metrics_out || !eval_out) throw std::runtime_error("cannot write logs in " + out_dir.string());
  }

  const std::size_t n = train_set.count();
  const long steps_per_epoch = static_cast<long>((n + cfg.batch_size - 1) / cfg.batch_size);
  const long total_steps = steps_per_epoch * cfg.epochs;
  const long warmup = cfg.warmup_steps < 0 ? steps_per_epoch : cfg.warmup_steps;
  std::mt19937_64 shuffle_rng(cfg.seed ^ 0x5eed5eedULL);
  std::vector<std::size_t> order(n);
  const auto start = std::chrono::steady_clock::now();

  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    double epoch_loss = 0.0;
    long epoch_steps = 0;
    bool stop = false;
    for (std::size_t begin = 0; begin < n && !stop; begin += cfg.batch_size) {
      const std::size_t end = std::min(begin + cfg.batch_size, n);
      const Batch batch = make_batch(train_set, std::span(order).subspan(begin, end - begin));
      const std::optional<int> depth =
          result.steps < warmup ? std::optional<int>(cfg.warmup_depth) : std::nullopt;
      auto abort = [&](const std::string& why) {
        return TrainingAborted(why + " at epoch " + std::to_string(epoch) + " step " +
                               std::to_string(result.steps + 1) + "; last completed epoch's checkpoint kept");
      };
      ParamSet grads;
      StepStats s;
      try {
        s = compute_gradients(model, result.params, batch, grads, depth);
      } catch (const SolverError& e) {
        throw abort(std::string("solver failure (") + e.what() + ")");
      }
      if (!std::isfinite(s.loss)) throw abort("non-finite loss");
      clip_global_norm(grads, cfg.grad_clip);
      opt.step(result.params, grads, scheduled_lr(cfg, result.steps, total_steps));
      ++result.steps;
      ++epoch_steps;
      epoch_loss += s.loss;

      MetricsRecord rec;
      rec.epoch = epoch;
      rec.step = result.steps;
      rec.loss = s.loss;
      rec.forward_iters = s.forward_iters;
      rec.backward_iters = s.backward_iters;
      rec.residual_norm = s.residual_norm;
      rec.converged = s.converged;
      rec.wall_seconds =
          cfg.test_mode ? 0.0 : std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      if (metrics_out.is_open()) metrics_out << rec.to_json() << '\n' << std::flush;
      result.metrics.push_back(rec);
      if (cfg.max_steps > 0 && result.steps >= cfg.max_steps) stop = true;
    }

    EpochSummary summary;
    summary.epoch = epoch;
    summary.step = result.steps;
    summary.train_loss = epoch_steps ? epoch_loss / static_cast<double>(epoch_steps) : 0.0;
    EvalOptions eval_opts;
    eval_opts.limit = cfg.eval_subset;
    try {
      summary.test = evaluate(model, result.params, test_set, eval_opts);
    } catch (const SolverError& e) {
      throw TrainingAborted("solver failure while evaluating epoch " + std::to_string(epoch) + " (" + e.what() +
                            "); last completed epoch's checkpoint kept");
    }
    if (!std::isfinite(summary.test.loss)) {
      throw TrainingAborted("non-finite test loss after epoch " + std::to_string(epoch) +
                            "; last completed epoch's checkpoint kept");
    }
    if (!out_dir.empty()) {
      save_checkpoint(result.params, out_dir / "checkpoint.deqc");
      nlohmann::ordered_json j;
      j["epoch"] = epoch;
      j["step"] = result.steps;
      j["train_loss"] = summary.train_loss;
      j["test_loss"] = summary.test.loss;
      j["test_accuracy"] = summary.test.accuracy;
      j["mean_forward_iters"] = summary.test.mean_forward_iters;
      j["converged_fraction"] = summary.test.converged_fraction;
      j["instances"] = summary.test.instances;
      eval_out << j.dump() << '\n' << std::flush;
    }
    result.epochs.push_back(summary);
    if (stop) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
    if (cfg.target_loss > 0 && summary.test.loss < cfg.target_loss) {
      result.stopped_early = epoch < cfg.epochs;
      break;
    }
  }
  return result;
}

}  // namespace deq
