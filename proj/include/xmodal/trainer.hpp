#pragma once

// Training configuration, Adam, the epoch loop, validation and checkpoints.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <concepts>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "xmodal/model.hpp"
#include "xmodal/synthdata.hpp"

namespace xmodal {

struct TrainConfig {
  std::size_t epochs = 50;
  std::size_t batch_size = 8;
  std::uint64_t seed = 0;
  int precision = 32;  ///< 32 or 64
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double sigma_loc = 2.0;  ///< pixels
  double sigma_ori = 2.0;  ///< bins
  bool augment = true;
  AugmentOptions augmentation;
  ModelConfig model;
  LossWeights loss;

  void validate() const {
    if (batch_size < 1) throw ValidationError("batch_size must be at least 1");
    if (precision != 32 && precision != 64) throw ValidationError("precision must be 32 or 64");
    if (lr < 0) throw ValidationError("lr must be non-negative");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ValidationError("Adam betas must lie in [0, 1)");
    if (!(adam_eps > 0)) throw ValidationError("adam_eps must be positive");
    if (!(sigma_loc > 0) || !(sigma_ori > 0)) throw ValidationError("target sigmas must be positive");
    loss.validate();
  }
};

namespace detail {

inline std::string format_value(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "on" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "off" || v == "no") return false;
  throw ValidationError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

/// Calls `f(key, field)` for every nameable field. Used for parsing, printing
/// and checkpoint metadata.
template <typename Cfg, typename F>
void visit_config(Cfg& c, F&& f) {
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
  f("seed", c.seed);
  f("precision", c.precision);
  f("lr", c.lr);
  f("beta1", c.beta1);
  f("beta2", c.beta2);
  f("adam_eps", c.adam_eps);
  f("sigma_loc", c.sigma_loc);
  f("sigma_ori", c.sigma_ori);
  f("augment", c.augment);
  f("max_rot", c.augmentation.max_rot_deg);
  f("rot_prob", c.augmentation.rot_prob);
  f("jitter", c.augmentation.jitter_strength);
  f("tile_size", c.model.tile_size);
  f("feature_dim", c.model.feature_dim);
  f("embed_dim", c.model.embed_dim);
  f("stem_channels", c.model.stem_channels);
  f("stage_channels_0", c.model.stage_channels[0]);
  f("stage_channels_1", c.model.stage_channels[1]);
  f("stage_channels_2", c.model.stage_channels[2]);
  for (std::size_t i = 0; i < 5; ++i) f("decoder_channels_" + std::to_string(i), c.model.decoder_channels[i]);
  f("bins", c.model.bins);
  f("heads", c.model.heads);
  f("rel_pos_window", c.model.rel_pos_window);
  f("fusion_mode", c.model.fusion_mode);
  f("bidirectional", c.model.bidirectional);
  f("use_multiscale", c.model.use_multiscale);
  f("use_fourier", c.model.use_fourier);
  f("use_refine_attention", c.model.use_refine_attention);
  f("decoder", c.model.decoder_mode);
  f("init_seed", c.model.init_seed);
  f("lambda1", c.loss.lambda1);
  f("lambda2", c.loss.lambda2);
  f("tau", c.loss.tau);
  f("conf_weight", c.loss.conf_weight);
  f("huber_delta", c.loss.huber_delta);
  f("hard_k", c.loss.hard_k);
  f("softargmax_temperature", c.loss.softargmax_temperature);
  f("conf_radius", c.loss.conf_radius_m);
  f("use_reg", c.loss.use_reg);
  f("use_contrastive", c.loss.use_contrastive);
  f("symmetric_infonce", c.loss.symmetric_infonce);
  f("kl_literal_order", c.loss.kl_literal_order);
}

struct FieldWriter {
  std::vector<std::pair<std::string, std::string>>* out;
  template <std::integral V>
  void operator()(const std::string& k, V v) const {
    out->emplace_back(k, std::to_string(v));
  }
  void operator()(const std::string& k, double v) const { out->emplace_back(k, format_value(v)); }
  void operator()(const std::string& k, bool v) const { out->emplace_back(k, v ? "true" : "false"); }
  void operator()(const std::string& k, FusionMode v) const { out->emplace_back(k, to_string(v)); }
  void operator()(const std::string& k, DecoderMode v) const { out->emplace_back(k, to_string(v)); }
};

struct FieldSetter {
  const std::string& key;
  const std::string& value;
  bool* found;

  template <typename V>
  void operator()(const std::string& k, V& field) const {
    if (k != key) return;
    *found = true;
    try {
      if constexpr (std::is_same_v<V, bool>) {
        field = parse_bool(key, value);
      } else if constexpr (std::is_same_v<V, FusionMode>) {
        field = parse_fusion_mode(value);
      } else if constexpr (std::is_same_v<V, DecoderMode>) {
        field = parse_decoder_mode(value);
      } else if constexpr (std::is_same_v<V, double>) {
        std::size_t used = 0;
        field = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
      } else if constexpr (std::is_same_v<V, int>) {
        std::size_t used = 0;
        field = std::stoi(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
      } else {
        std::size_t used = 0;
        if (!value.empty() && value[0] == '-') throw std::invalid_argument(value);
        field = static_cast<V>(std::stoull(value, &used));
        if (used != value.size()) throw std::invalid_argument(value);
      }
    } catch (const ValidationError&) {
      throw;
    } catch (const std::exception&) {
      throw ValidationError("config key '" + key + "' has invalid value '" + value + "'");
    }
  }
};

}  // namespace detail

/// Sets one field by name; throws ValidationError for unknown keys.
inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  bool found = false;
  detail::visit_config(cfg, detail::FieldSetter{key, value, &found});
  if (!found) throw ValidationError("unknown config key '" + key + "'");
}

inline std::vector<std::pair<std::string, std::string>> config_entries(const TrainConfig& cfg) {
  std::vector<std::pair<std::string, std::string>> out;
  detail::visit_config(cfg, detail::FieldWriter{&out});
  return out;
}

/// `key = value` lines; `#` starts a comment.
inline TrainConfig parse_train_config(std::istream& is, TrainConfig cfg = {}) {
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ValidationError("config line " + std::to_string(lineno) + ": expected key = value");
    set_config_value(cfg, detail::trim(line.substr(0, eq)), detail::trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

inline TrainConfig load_train_config(const std::string& path, TrainConfig base = {}) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file: " + path);
  return parse_train_config(is, std::move(base));
}

inline std::string format_train_config(const TrainConfig& cfg) {
  std::string s;
  for (const auto& [k, v] : config_entries(cfg)) s += k + " = " + v + "\n";
  return s;
}

template <typename T>
struct AdamState {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  std::size_t t = 0;
  std::vector<Tensor<T>> m, v;

  AdamState() = default;
  explicit AdamState(const TrainConfig& cfg) : lr(cfg.lr), beta1(cfg.beta1), beta2(cfg.beta2), eps(cfg.adam_eps) {}
};

/// Bias-corrected Adam over every parameter that requires grad. A parameter
/// with no gradient buffer is treated as having a zero gradient. All
/// gradients are checked before anything is modified.
template <typename T>
void adam_step(ParamStore<T>& params, AdamState<T>& state) {
  const auto& entries = params.entries();
  for (const auto& e : entries) {
    const auto& g = e.var->grad;
    if (!g.size()) continue;
    if (g.shape() != e.var->value.shape()) throw ShapeError("gradient shape mismatch for parameter " + e.name);
    if (!g.all_finite()) throw NumericError("non-finite gradient in parameter " + e.name);
  }
  if (state.m.size() != entries.size()) {
    state.m.clear();
    state.v.clear();
    for (const auto& e : entries) {
      state.m.emplace_back(e.var->value.shape());
      state.v.emplace_back(e.var->value.shape());
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  const T b1 = static_cast<T>(state.beta1), b2 = static_cast<T>(state.beta2);
  for (std::size_t i = 0; i < entries.size(); ++i) {
    auto& p = *entries[i].var;
    if (!p.requires_grad) continue;
    auto& m = state.m[i];
    auto& v = state.v[i];
    const bool has_grad = p.grad.size() != 0;
    for (std::size_t j = 0; j < p.value.size(); ++j) {
      const T g = has_grad ? p.grad[j] : T(0);
      m[j] = b1 * m[j] + (T(1) - b1) * g;
      v[j] = b2 * v[j] + (T(1) - b2) * g * g;
      const double mh = static_cast<double>(m[j]) / c1;
      const double vh = static_cast<double>(v[j]) / c2;
      p.value[j] = static_cast<T>(static_cast<double>(p.value[j]) - state.lr * mh / (std::sqrt(vh) + state.eps));
    }
  }
}

/// A dataset sample with its BEV raster precomputed.
struct PreparedSample {
  std::string id;
  AerialTile tile;
  Pose pose;
  BevGrid bev;
};

inline PreparedSample prepare_sample(const Sample& s) {
  return {s.id, s.tile, s.pose, project_to_bev(s.cloud, s.bev)};
}

inline std::vector<PreparedSample> prepare_samples(const std::vector<Sample>& samples) {
  std::vector<PreparedSample> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(prepare_sample(s));
  return out;
}

/// Worker count from XMODAL_THREADS, defaulting to the hardware count.
inline std::size_t worker_count(bool deterministic = false) {
  if (deterministic) return 1;
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("XMODAL_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) n = static_cast<std::size_t>(v);
    } catch (const std::exception&) {
      throw ValidationError(std::string("XMODAL_THREADS must be a positive integer, got '") + env + "'");
    }
  }
  return n;
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers, static partition.
inline void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(threads, n);
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(threads);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < threads; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += threads) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

inline constexpr const char* kTrainLogHeader = "step,loss_total,loss_loc,loss_ori,loss_reg,loss_contrastive,loss_conf";

inline std::string format_log_row(std::size_t step, const LossBreakdown& b) {
  std::string s = std::to_string(step);
  for (double v : {b.total, b.loc, b.ori, b.reg, b.contrastive, b.conf}) s += "," + detail::format_value(v);
  return s;
}

struct EpochMetrics {
  LossBreakdown mean;
  std::size_t steps = 0;
  std::size_t samples = 0;
};

namespace detail {

inline void accumulate(LossBreakdown& acc, const LossBreakdown& b, double w) {
  acc.total += w * b.total;
  acc.loc += w * b.loc;
  acc.ori += w * b.ori;
  acc.reg += w * b.reg;
  acc.contrastive += w * b.contrastive;
  acc.conf += w * b.conf;
}

}  // namespace detail

/// Deterministic permutation of [0, n) for one epoch.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, std::size_t epoch) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Philox rng(Philox::mix(seed, epoch), 0x5A1F);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
  return order;
}

/// One pass over `data`. Appends one row per optimizer step to `log` when
/// given; `step` is the running step counter and is advanced.
template <typename T>
EpochMetrics train_epoch(Model<T>& model, const std::vector<PreparedSample>& data, const TrainConfig& cfg,
                         AdamState<T>& opt, std::size_t epoch, std::size_t& step, std::ostream* log = nullptr) {
  if (data.empty()) throw ValidationError("train_epoch: dataset is empty");
  cfg.validate();
  const auto order = epoch_order(data.size(), cfg.seed, epoch);
  const std::size_t bins = model.config().bins;
  EpochMetrics metrics;
  for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(order.size(), start + cfg.batch_size);
    std::vector<SampleOutputs<T>> outputs;
    std::vector<SampleTargets<T>> targets;
    std::vector<std::string> ids;
    for (std::size_t k = start; k < end; ++k) {
      const std::size_t idx = order[k];
      const auto& s = data[idx];
      AerialTile tile = s.tile;
      Pose pose = s.pose;
      if (cfg.augment) {
        const std::uint64_t aug_seed = Philox::mix(cfg.seed, epoch * data.size() + idx);
        std::tie(tile, pose) = augment_tile(s.tile, s.pose, aug_seed, cfg.augmentation);
      }
      targets.push_back(make_targets<T>(pose, tile, bins, cfg.sigma_loc, cfg.sigma_ori));
      outputs.push_back(model.forward(make_input<T>(tile, s.bev)));
      ids.push_back(s.id);
    }
    auto loss = total_loss(outputs, targets, cfg.loss);
    if (!std::isfinite(loss.terms.total)) {
      std::string offender = ids.front();
      for (std::size_t b = 0; b < outputs.size(); ++b) {
        const auto& o = outputs[b];
        const bool bad = (o.maps && (!o.maps->loc->value.all_finite() || !o.maps->ori->value.all_finite())) ||
                         (o.regression && !o.regression->xy->value.all_finite()) || !o.z_aerial->value.all_finite() ||
                         !o.z_bev->value.all_finite();
        if (bad) {
          offender = ids[b];
          break;
        }
      }
      throw NumericError("non-finite loss at step " + std::to_string(step) + ", sample " + offender);
    }
    model.params().zero_grad();
    backward(loss.value);
    adam_step(model.params(), opt);
    model.params().zero_grad();
    if (log) *log << format_log_row(step, loss.terms) << '\n';
    ++step;
    const double w = static_cast<double>(end - start);
    detail::accumulate(metrics.mean, loss.terms, w);
    metrics.samples += end - start;
    ++metrics.steps;
  }
  LossBreakdown scaled;
  detail::accumulate(scaled, metrics.mean, 1.0 / static_cast<double>(metrics.samples));
  metrics.mean = scaled;
  return metrics;
}

/// Per-sample predictions and the mean loss over a dataset, without
/// augmentation. Batches follow dataset order.
struct Evaluation {
  std::vector<std::string> ids;
  std::vector<PoseEstimate> estimates;
  std::vector<Pose> truths;
  LossBreakdown mean_loss;
};

template <typename T>
Evaluation evaluate(const Model<T>& model, const std::vector<PreparedSample>& data, const TrainConfig& cfg,
                    std::size_t threads = 1) {
  if (data.empty()) throw ValidationError("evaluate: dataset is empty");
  const std::size_t bins = model.config().bins;
  Evaluation ev;
  ev.estimates.resize(data.size());
  std::vector<SampleOutputs<T>> outputs(data.size());
  std::vector<SampleTargets<T>> targets(data.size());
  parallel_for(data.size(), threads, [&](std::size_t i) {
    NoGradGuard guard;
    const auto& s = data[i];
    targets[i] = make_targets<T>(s.pose, s.tile, bins, cfg.sigma_loc, cfg.sigma_ori);
    outputs[i] = model.forward(make_input<T>(s.tile, s.bev));
    if (outputs[i].maps) {
      ev.estimates[i] = extract_pose_argmax(to_maps(*outputs[i].maps), s.tile.pixels_per_meter);
    } else {
      const auto& r = *outputs[i].regression;
      PoseEstimate est;
      est.pose = regression_pose(r, s.tile.height, s.tile.width, s.tile.pixels_per_meter);
      est.confidence = static_cast<double>(r.confidence->value[0]);
      ev.estimates[i] = std::move(est);
    }
  });
  NoGradGuard guard;
  for (std::size_t start = 0; start < data.size(); start += cfg.batch_size) {
    const std::size_t end = std::min(data.size(), start + cfg.batch_size);
    std::vector<SampleOutputs<T>> bo(outputs.begin() + static_cast<long>(start), outputs.begin() + static_cast<long>(end));
    std::vector<SampleTargets<T>> bt(targets.begin() + static_cast<long>(start), targets.begin() + static_cast<long>(end));
    detail::accumulate(ev.mean_loss, total_loss(bo, bt, cfg.loss).terms, static_cast<double>(end - start));
  }
  LossBreakdown scaled;
  detail::accumulate(scaled, ev.mean_loss, 1.0 / static_cast<double>(data.size()));
  ev.mean_loss = scaled;
  for (const auto& s : data) {
    ev.ids.push_back(s.id);
    ev.truths.push_back(s.pose);
  }
  return ev;
}

inline Meta checkpoint_meta(const TrainConfig& cfg) {
  Meta meta;
  for (const auto& [k, v] : config_entries(cfg)) meta["cfg." + k] = v;
  return meta;
}

/// Recovers the training configuration stored in a checkpoint.
inline TrainConfig config_from_checkpoint(const Checkpoint& ck) {
  TrainConfig cfg;
  for (const auto& [k, v] : ck.meta)
    if (k.rfind("cfg.", 0) == 0) set_config_value(cfg, k.substr(4), v);
  cfg.validate();
  return cfg;
}

template <typename T>
void save_model(const Model<T>& model, const TrainConfig& cfg, const std::string& path) {
  save_checkpoint(model.params(), path, checkpoint_meta(cfg));
}

/// Per-epoch summary written to val_log.csv.
struct EpochRecord {
  std::size_t epoch = 0;
  LossBreakdown train;
  LossBreakdown val;
  double val_loc_error = 0;  ///< meters
  double val_ori_error = 0;  ///< degrees
  double seconds = 0;
};

inline constexpr const char* kValLogHeader =
    "epoch,train_total,val_total,val_loc,val_ori,val_reg,val_contrastive,val_conf,val_loc_error_m,val_ori_error_deg";

inline double circular_difference(double a, double b) {
  const double d = std::abs(normalize_degrees(a) - normalize_degrees(b));
  return std::min(d, 360.0 - d);
}

/// Mean location (m) and orientation (deg) error of an evaluation.
inline std::pair<double, double> mean_errors(const Evaluation& ev) {
  double loc = 0, ori = 0;
  for (std::size_t i = 0; i < ev.estimates.size(); ++i) {
    loc += std::hypot(ev.estimates[i].pose.x - ev.truths[i].x, ev.estimates[i].pose.y - ev.truths[i].y);
    ori += circular_difference(ev.estimates[i].pose.theta, ev.truths[i].theta);
  }
  const double n = static_cast<double>(ev.estimates.size());
  return {loc / n, ori / n};
}

/// Full run: epochs of training with validation after each, train_log.csv and
/// val_log.csv under `out_dir`, final checkpoint at out_dir/checkpoint.bin.
template <typename T>
std::vector<EpochRecord> train(Model<T>& model, const std::vector<PreparedSample>& train_set,
                               const std::vector<PreparedSample>& val_set, const TrainConfig& cfg,
                               const std::filesystem::path& out_dir, std::size_t threads = 1,
                               const std::function<void(const EpochRecord&)>& on_epoch = {}) {
  cfg.validate();
  std::filesystem::create_directories(out_dir);
  std::ofstream log(out_dir / "train_log.csv");
  std::ofstream vlog(out_dir / "val_log.csv");
  if (!log || !vlog) throw IoError("cannot write logs under " + out_dir.string());
  log << kTrainLogHeader << '\n';
  vlog << kValLogHeader << '\n';
  AdamState<T> opt(cfg);
  std::vector<EpochRecord> records;
  std::size_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto t0 = std::chrono::steady_clock::now();
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.train = train_epoch(model, train_set, cfg, opt, epoch, step, &log).mean;
    log.flush();
    if (!val_set.empty()) {
      const auto ev = evaluate(model, val_set, cfg, threads);
      rec.val = ev.mean_loss;
      std::tie(rec.val_loc_error, rec.val_ori_error) = mean_errors(ev);
    }
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    vlog << rec.epoch << ',' << detail::format_value(rec.train.total) << ',' << detail::format_value(rec.val.total)
         << ',' << detail::format_value(rec.val.loc) << ',' << detail::format_value(rec.val.ori) << ','
         << detail::format_value(rec.val.reg) << ',' << detail::format_value(rec.val.contrastive) << ','
         << detail::format_value(rec.val.conf) << ',' << detail::format_value(rec.val_loc_error) << ','
         << detail::format_value(rec.val_ori_error) << '\n';
    vlog.flush();
    records.push_back(rec);
    if (on_epoch) on_epoch(rec);
  }
  save_model(model, cfg, (out_dir / "checkpoint.bin").string());
  if (!log || !vlog) throw IoError("failed writing logs under " + out_dir.string());
  return records;
}

}  // namespace xmodal
