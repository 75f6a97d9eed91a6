#include "deq/config.hpp"

#include <charconv>
#include <cmath>
#include <functional>
#include <sstream>
#include <vector>

#include "deq/io.hpp"

namespace deq {

double TrainConfig::forward_tol() const {
  return tol_fwd > 0 ? tol_fwd : std::sqrt(static_cast<double>(total_length())) * 1e-5;
}
double TrainConfig::backward_tol() const {
  return tol_bwd > 0 ? tol_bwd : std::sqrt(static_cast<double>(total_length())) * 1e-8;
}
double TrainConfig::inference_tol() const {
  return tol_inf > 0 ? tol_inf : std::sqrt(static_cast<double>(total_length())) * 1e-2;
}

void TrainConfig::validate() const {
  auto need = [](bool ok, const std::string& what) {
    if (!ok) throw ConfigError("config: " + what);
  };
  need(d > 0 && m > 0 && heads > 0, "widths and heads must be positive");
  if (model == ModelKind::Transformer) need(d % heads == 0, "heads must divide d");
  need(kernel > 0 && dilation > 0, "kernel and dilation must be positive");
  need(seq_len > 0, "seq_len must be positive");
  need(n_train > 0 && n_test > 0, "dataset sizes must be positive");
  need(lr >= 0, "lr must be non-negative");
  need(beta1 >= 0 && beta1 < 1 && beta2 >= 0 && beta2 < 1, "betas must lie in [0, 1)");
  need(grad_clip >= 0, "grad_clip must be non-negative (0 disables clipping)");
  need(epochs > 0 && batch_size > 0, "epochs and batch_size must be positive");
  need(max_iters > 0 && bwd_max_iters > 0, "iteration limits must be positive");
  need(warmup_depth >= 0, "warmup_depth must be non-negative");
  need(warmup_steps >= -1, "warmup_steps must be >= -1");
  need(target_loss >= 0 && max_steps >= 0, "target_loss and max_steps must be non-negative");
}

std::string_view to_string(ModelKind kind) { return kind == ModelKind::Trellis ? "trellis" : "transformer"; }

ModelKind parse_model_kind(std::string_view name) {
  if (name == "trellis") return ModelKind::Trellis;
  if (name == "transformer") return ModelKind::Transformer;
  throw ConfigError("unknown model '" + std::string(name) + "' (expected trellis|transformer)");
}

namespace {

template <class T>
T parse_number(std::string_view key, std::string_view text) {
  T value{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, value);
  if (ec != std::errc() || ptr != end) {
    throw ConfigError("config: bad value '" + std::string(text) + "' for " + std::string(key));
  }
  return value;
}

bool parse_bool(std::string_view key, std::string_view text) {
  if (text == "true" || text == "1") return true;
  if (text == "false" || text == "0") return false;
  throw ConfigError("config: bad value '" + std::string(text) + "' for " + std::string(key));
}

std::string fmt(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

struct Field {
  std::string_view key;
  std::function<void(TrainConfig&, std::string_view)> set;
  std::function<std::string(const TrainConfig&)> get;
};

#define DEQ_SIZE(name)                                                                        \
  Field {                                                                                     \
    #name, [](TrainConfig& c, std::string_view v) { c.name = parse_number<std::size_t>(#name, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.name); }                           \
  }
#define DEQ_INT(name, type)                                                            \
  Field {                                                                              \
    #name, [](TrainConfig& c, std::string_view v) { c.name = parse_number<type>(#name, v); }, \
        [](const TrainConfig& c) { return std::to_string(c.name); }                    \
  }
#define DEQ_REAL(name)                                                                        \
  Field {                                                                                     \
    #name, [](TrainConfig& c, std::string_view v) { c.name = parse_number<double>(#name, v); }, \
        [](const TrainConfig& c) { return fmt(c.name); }                                     \
  }

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      {"model", [](TrainConfig& c, std::string_view v) { c.model = parse_model_kind(v); },
       [](const TrainConfig& c) { return std::string(to_string(c.model)); }},
      DEQ_SIZE(d),
      DEQ_SIZE(heads),
      DEQ_SIZE(pos_offsets),
      DEQ_SIZE(m),
      DEQ_SIZE(kernel),
      DEQ_SIZE(dilation),
      DEQ_SIZE(seq_len),
      DEQ_SIZE(n_train),
      DEQ_SIZE(n_test),
      {"optimizer",
       [](TrainConfig& c, std::string_view v) {
         if (v == "sgd") {
           c.optimizer = OptimizerKind::Sgd;
         } else if (v == "adam") {
           c.optimizer = OptimizerKind::Adam;
         } else {
           throw ConfigError("config: unknown optimizer '" + std::string(v) + "' (expected sgd|adam)");
         }
       },
       [](const TrainConfig& c) { return std::string(c.optimizer == OptimizerKind::Sgd ? "sgd" : "adam"); }},
      DEQ_REAL(lr),
      DEQ_REAL(beta1),
      DEQ_REAL(beta2),
      DEQ_REAL(grad_clip),
      {"lr_schedule",
       [](TrainConfig& c, std::string_view v) {
         if (v == "constant") {
           c.lr_schedule = LrSchedule::Constant;
         } else if (v == "cosine") {
           c.lr_schedule = LrSchedule::Cosine;
         } else {
           throw ConfigError("config: unknown lr_schedule '" + std::string(v) + "' (expected constant|cosine)");
         }
       },
       [](const TrainConfig& c) {
         return std::string(c.lr_schedule == LrSchedule::Constant ? "constant" : "cosine");
       }},
      DEQ_INT(epochs, int),
      DEQ_SIZE(batch_size),
      DEQ_INT(seed, std::uint64_t),
      DEQ_REAL(tol_fwd),
      DEQ_REAL(tol_bwd),
      DEQ_REAL(tol_inf),
      DEQ_INT(max_iters, int),
      DEQ_INT(bwd_max_iters, int),
      {"solver",
       [](TrainConfig& c, std::string_view v) {
         try {
           c.solver = parse_solver_kind(v);
         } catch (const std::invalid_argument& e) {
           throw ConfigError(std::string("config: ") + e.what());
         }
       },
       [](const TrainConfig& c) { return std::string(to_string(c.solver)); }},
      DEQ_INT(warmup_depth, int),
      DEQ_INT(warmup_steps, long),
      DEQ_REAL(target_loss),
      DEQ_SIZE(eval_subset),
      DEQ_INT(max_steps, long),
      {"test_mode", [](TrainConfig& c, std::string_view v) { c.test_mode = parse_bool("test_mode", v); },
       [](const TrainConfig& c) { return std::string(c.test_mode ? "true" : "false"); }},
  };
  return table;
}

#undef DEQ_SIZE
#undef DEQ_INT
#undef DEQ_REAL

std::string_view trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return s.substr(first, last - first + 1);
}

}  // namespace

void apply_setting(TrainConfig& cfg, std::string_view key, std::string_view value) {
  for (const Field& f : fields()) {
    if (f.key == key) {
      f.set(cfg, value);
      return;
    }
  }
  throw ConfigError("config: unknown key '" + std::string(key) + "'");
}

TrainConfig parse_config(std::string_view text, TrainConfig base) {
  std::size_t line_no = 0;
  while (!text.empty()) {
    const auto nl = text.find('\n');
    const std::string_view line = trim(text.substr(0, nl));
    text = nl == std::string_view::npos ? std::string_view{} : text.substr(nl + 1);
    ++line_no;
    if (line.empty() || line.front() == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config: line " + std::to_string(line_no) + " is not key=value");
    }
    apply_setting(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  base.validate();
  return base;
}

TrainConfig load_config(const std::filesystem::path& path, TrainConfig base) {
  return parse_config(io::read_file(path), std::move(base));
}

std::string format_config(const TrainConfig& cfg) {
  std::string out;
  for (const Field& f : fields()) {
    out += f.key;
    out += " = ";
    out += f.get(cfg);
    out += '\n';
  }
  return out;
}

}  // namespace deq
