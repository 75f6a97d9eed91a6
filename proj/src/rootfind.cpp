#include "deq/rootfind.hpp"

#include <cmath>
#include <string>

namespace deq {

void SolverConfig::validate() const {
  if (!(tol > 0)) throw std::invalid_argument("SolverConfig: tol must be > 0");
  if (max_iters < 1) throw std::invalid_argument("SolverConfig: max_iters must be >= 1");
  if (!(alpha > 0 && alpha <= 1)) throw std::invalid_argument("SolverConfig: alpha must be in (0, 1]");
  if (line_search_halvings < 0) {
    throw std::invalid_argument("SolverConfig: line_search_halvings must be >= 0");
  }
}

namespace {

double dot_raw(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

void require_finite(const Tensor& t, const char* solver, int iter) {
  if (!all_finite(t)) {
    throw SolverError(std::string(solver) + ": non-finite value at iteration " + std::to_string(iter));
  }
}

}  // namespace

Tensor BroydenState::apply(const Tensor& v) const {
  Tensor out = v;
  out *= -1.0;
  for (std::size_t i = 0; i < us_.size(); ++i) {
    const double c = dot_raw(vs_[i].data(), v.ptr(), n_);
    const double* u = us_[i].data();
    for (std::size_t j = 0; j < n_; ++j) out[j] += c * u[j];
  }
  return out;
}

Tensor BroydenState::apply_transpose(const Tensor& v) const {
  Tensor out = v;
  out *= -1.0;
  for (std::size_t i = 0; i < us_.size(); ++i) {
    const double c = dot_raw(us_[i].data(), v.ptr(), n_);
    const double* w = vs_[i].data();
    for (std::size_t j = 0; j < n_; ++j) out[j] += c * w[j];
  }
  return out;
}

bool BroydenState::update(const Tensor& dz, const Tensor& dg) {
  const Tensor b_dg = apply(dg);
  const double denom = dot(dz, b_dg);
  if (!(std::abs(denom) >= 1e-12 * norm2(dz) * norm2(dg)) || denom == 0.0) return false;
  std::vector<double> u(n_);
  for (std::size_t j = 0; j < n_; ++j) u[j] = (dz[j] - b_dg[j]) / denom;
  const Tensor v = apply_transpose(dz);
  us_.push_back(std::move(u));
  vs_.emplace_back(v.values());
  return true;
}

void BroydenState::reset() {
  us_.clear();
  vs_.clear();
}

std::vector<double> BroydenState::dense() const {
  std::vector<double> m(n_ * n_, 0.0);
  for (std::size_t i = 0; i < n_; ++i) m[i * n_ + i] = -1.0;
  for (std::size_t r = 0; r < us_.size(); ++r) {
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t j = 0; j < n_; ++j) m[i * n_ + j] += us_[r][i] * vs_[r][j];
    }
  }
  return m;
}

EquilibriumResult fixed_point_iterate(const VectorMap& f, const Tensor& z0, const SolverConfig& cfg) {
  cfg.validate();
  EquilibriumResult res;
  Tensor z = z0;
  res.iterate_norms.push_back(norm2(z));
  for (int i = 0;; ++i) {
    Tensor fz = f(z);
    ++res.evaluations;
    require_finite(fz, "fixed_point_iterate", i);
    require_same_shape("fixed_point_iterate", fz, z);
    const double r = norm2(fz - z);
    res.trace.push_back(r);
    if (r < cfg.tol) {
      res.converged = true;
      break;
    }
    if (i == cfg.max_iters) break;
    res.step_norms.push_back(r);
    z = std::move(fz);
    res.iterate_norms.push_back(norm2(z));
    ++res.iters;
  }
  res.residual_norm = res.trace.back();
  res.solution = std::move(z);
  return res;
}

EquilibriumResult broyden_solve(const VectorMap& g, const Tensor& z0, const SolverConfig& cfg,
                                const BroydenObserver& observer) {
  cfg.validate();
  EquilibriumResult res;
  Tensor z = z0;
  Tensor gz = g(z);
  ++res.evaluations;
  require_finite(gz, "broyden_solve", 0);
  require_same_shape("broyden_solve", gz, z);
  double r = norm2(gz);
  res.trace.push_back(r);
  res.iterate_norms.push_back(norm2(z));

  Tensor best = z;
  double best_r = r;
  BroydenState state(z.size());

  while (r >= cfg.tol && res.iters < cfg.max_iters) {
    const Tensor direction = state.apply(gz);
    double alpha = cfg.alpha;
    bool accepted = false;
    Tensor z_try, g_try;
    double r_try = 0.0;
    for (int h = 0; h <= cfg.line_search_halvings; ++h) {
      z_try = z;
      z_try.axpy(-alpha, direction);
      g_try = g(z_try);
      ++res.evaluations;
      require_finite(g_try, "broyden_solve", res.iters + 1);
      r_try = norm2(g_try);
      if (cfg.line_search_halvings == 0 || r_try < r) {
        accepted = true;
        break;
      }
      alpha *= 0.5;
    }

    const Tensor dz = z_try - z;
    const Tensor dg = g_try - gz;
    const bool applied = state.update(dz, dg);
    if (observer) observer(state, dz, dg, applied);

    if (accepted) {
      res.step_norms.push_back(norm2(dz));
      z = std::move(z_try);
      gz = std::move(g_try);
      r = r_try;
    } else {
      res.step_norms.push_back(0.0);
      if (!applied) state.reset();
    }
    ++res.iters;
    res.trace.push_back(r);
    res.iterate_norms.push_back(norm2(z));
    if (r < best_r) {
      best_r = r;
      best = z;
    }
  }

  res.solution = std::move(best);
  res.residual_norm = best_r;
  res.converged = best_r < cfg.tol;
  return res;
}

EquilibriumResult solve_linear_vjp(const VectorMap& jtvp, const Tensor& rhs, const SolverConfig& cfg) {
  const VectorMap residual = [&](const Tensor& x) {
    Tensor y = jtvp(x);
    y += rhs;
    return y;
  };
  return broyden_solve(residual, Tensor(rhs.shape()), cfg);
}

std::vector<TraceRow> residual_trace(const EquilibriumResult& result) {
  std::vector<TraceRow> rows;
  if (result.trace.empty()) return rows;
  if (result.iters == 0) {
    rows.push_back({0, result.trace.front(), 0.0});
    return rows;
  }
  for (int i = 0; i < result.iters; ++i) {
    const auto k = static_cast<std::size_t>(i);
    double denom = result.iterate_norms[k];
    if (denom == 0.0) denom = result.iterate_norms[k + 1];
    const double rel = denom > 0.0 ? result.step_norms[k] / denom : 0.0;
    rows.push_back({i + 1, result.trace[k + 1], rel});
  }
  return rows;
}

}  // namespace deq
