#pragma once

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <future>
#include <iomanip>
#include <iostream>
#include <limits>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <sys/resource.h>
#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include "checkpoint.hpp"
#include "data.hpp"
#include "inference.hpp"
#include "losses.hpp"
#include "metrics.hpp"
#include "optim.hpp"
#include "segnet.hpp"

namespace gcaseg {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------------ config

struct TrainConfig {
  // Hyperparameter names as used in config files.
  bool is_debugging = false;
  bool all_samples_as_train = false;
  std::int64_t fold = 4;
  std::int64_t seed = 42;
  std::int64_t max_epochs = 75;
  std::string mednext_size = "B";
  std::int64_t mednext_ksize = 3;
  std::string mednext_ckpt = "None";
  bool deep_sup = true;
  std::int64_t batch_size = 1;
  std::int64_t sw_batch_size = 2;
  std::int64_t num_workers = 4;
  std::int64_t roi_x = 32, roi_y = 32, roi_z = 32;
  double infer_overlap = 0.5;
  std::int64_t aug_type = 1;
  std::int64_t loss_type = 3;
  bool mean_batch = true;
  double lr = 3e-4;
  double weight_decay = 1e-6;
  std::string lr_scheduler = "cosine-with-warmup";
  std::int64_t n_gpus = 1;
  bool pin_memory = true;
  std::int64_t check_val_every_n_epoch = 1;
  std::int64_t precision = 32;
  std::string amp_backend = "native";
  std::int64_t accumulate_grad_batches = 4;
  // Desk-scale additions.
  double warmup_fraction = 0.05;
  std::int64_t n_folds = 5;
  std::int64_t n_stages = 3;
  std::int64_t gca_dense_cap = 4096;
  bool gca_scaled = true;
  std::int64_t gca_heads = 1;
  std::string blending = "gaussian";
  bool binary_channel = false;
  double w_ce = 1.0, w_dice = 1.0, dice_eps = 1e-5;
  std::int64_t min_component_voxels = 10;
  std::int64_t threads = 1;  // concurrent validation tile batches

  Extents roi() const { return {roi_z, roi_y, roi_x}; }

  NetworkConfig network() const {
    NetworkConfig n;
    apply_mednext_size(n, mednext_size);
    n.in_channels = kNumModalities + (binary_channel ? 1 : 0);
    n.n_classes = kNumLabels;
    n.n_stages = n_stages;
    n.kernel_size = mednext_ksize;
    n.deep_sup = deep_sup;
    n.gca_dense_cap = gca_dense_cap;
    n.gca_scaled = gca_scaled;
    n.gca_heads = gca_heads;
    return n;
  }

  LossConfig loss() const {
    LossConfig l;
    l.w_ce = w_ce, l.w_dice = w_dice, l.dice_eps = dice_eps, l.mean_batch = mean_batch;
    l.loss_type = loss_type_from_int(static_cast<int>(loss_type));
    return l;
  }

  SplitPlan split_plan() const {
    return {is_debugging ? 2 : n_folds, is_debugging ? fold % 2 : fold, static_cast<std::uint64_t>(seed)};
  }

  std::int64_t effective_epochs() const { return is_debugging ? std::min<std::int64_t>(max_epochs, 2) : max_epochs; }
};

namespace config_detail {

inline std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "True" || v == "TRUE" || v == "1") return true;
  if (v == "false" || v == "False" || v == "FALSE" || v == "0") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

inline std::int64_t parse_int(const std::string& key, const std::string& v) {
  std::int64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError(key + ": expected an integer, got '" + v + "'");
  return out;
}

inline double parse_double(const std::string& key, const std::string& v) {
  char* end = nullptr;
  const double out = std::strtod(v.c_str(), &end);
  if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out)) throw ConfigError(key + ": expected a number, got '" + v + "'");
  return out;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

struct Field {
  const char* name;
  std::function<std::string(const TrainConfig&)> get;
  std::function<void(TrainConfig&, const std::string&)> set;
};

#define GCASEG_BOOL(k) Field{#k, [](const TrainConfig& c) { return std::string(c.k ? "true" : "false"); }, [](TrainConfig& c, const std::string& v) { c.k = parse_bool(#k, v); }}
#define GCASEG_INT(k) Field{#k, [](const TrainConfig& c) { return std::to_string(c.k); }, [](TrainConfig& c, const std::string& v) { c.k = parse_int(#k, v); }}
#define GCASEG_REAL(k) Field{#k, [](const TrainConfig& c) { return fmt(c.k); }, [](TrainConfig& c, const std::string& v) { c.k = parse_double(#k, v); }}
#define GCASEG_STR(k) Field{#k, [](const TrainConfig& c) { return c.k; }, [](TrainConfig& c, const std::string& v) { c.k = v; }}

inline const std::vector<Field>& fields() {
  static const std::vector<Field> f = {
      GCASEG_BOOL(is_debugging), GCASEG_BOOL(all_samples_as_train), GCASEG_INT(fold), GCASEG_INT(seed),
      GCASEG_INT(max_epochs), GCASEG_STR(mednext_size), GCASEG_INT(mednext_ksize), GCASEG_STR(mednext_ckpt),
      GCASEG_BOOL(deep_sup), GCASEG_INT(batch_size), GCASEG_INT(sw_batch_size), GCASEG_INT(num_workers),
      GCASEG_INT(roi_x), GCASEG_INT(roi_y), GCASEG_INT(roi_z), GCASEG_REAL(infer_overlap), GCASEG_INT(aug_type),
      GCASEG_INT(loss_type), GCASEG_BOOL(mean_batch), GCASEG_REAL(lr), GCASEG_REAL(weight_decay),
      GCASEG_STR(lr_scheduler), GCASEG_INT(n_gpus), GCASEG_BOOL(pin_memory), GCASEG_INT(check_val_every_n_epoch),
      GCASEG_INT(precision), GCASEG_STR(amp_backend), GCASEG_INT(accumulate_grad_batches),
      GCASEG_REAL(warmup_fraction), GCASEG_INT(n_folds), GCASEG_INT(n_stages), GCASEG_INT(gca_dense_cap),
      GCASEG_BOOL(gca_scaled), GCASEG_INT(gca_heads), GCASEG_STR(blending), GCASEG_BOOL(binary_channel),
      GCASEG_REAL(w_ce), GCASEG_REAL(w_dice), GCASEG_REAL(dice_eps), GCASEG_INT(min_component_voxels),
      GCASEG_INT(threads),
  };
  return f;
}

#undef GCASEG_BOOL
#undef GCASEG_INT
#undef GCASEG_REAL
#undef GCASEG_STR

}  // namespace config_detail

inline void set_config_value(TrainConfig& cfg, const std::string& key, const std::string& value) {
  for (const auto& f : config_detail::fields())
    if (key == f.name) return f.set(cfg, value);
  throw ConfigError("unknown config key '" + key + "'");
}

inline void validate(const TrainConfig& c) {
  auto need = [](bool ok, const std::string& msg) {
    if (!ok) throw ConfigError(msg);
  };
  need(c.precision == 32, "precision=" + std::to_string(c.precision) +
                              " is not supported: mixed/half precision is not implemented, only precision=32 is honoured");
  need(c.lr_scheduler == "cosine-with-warmup", "lr_scheduler must be cosine-with-warmup");
  need(c.amp_backend == "native", "amp_backend must be native (it has no effect at precision=32)");
  need(c.n_gpus == 0 || c.n_gpus == 1, "n_gpus must be 0 or 1 (training runs in a single CPU process)");
  need(c.mednext_size == "S" || c.mednext_size == "B" || c.mednext_size == "M", "mednext_size must be S, B or M");
  need(c.mednext_ksize >= 1 && c.mednext_ksize % 2 == 1, "mednext_ksize must be a positive odd integer");
  need(c.loss_type >= 1 && c.loss_type <= 3, "loss_type must be 1 (CE), 2 (Dice) or 3 (CE+Dice)");
  need(c.aug_type == 0 || c.aug_type == 1, "aug_type must be 0 (none) or 1 (flip/rotate/brightness)");
  need(c.max_epochs >= 1, "max_epochs must be >= 1");
  need(c.batch_size >= 1, "batch_size must be >= 1");
  need(c.sw_batch_size >= 1, "sw_batch_size must be >= 1");
  need(c.num_workers >= 0, "num_workers must be >= 0");
  need(c.threads >= 1, "threads must be >= 1");
  need(c.accumulate_grad_batches >= 1, "accumulate_grad_batches must be >= 1");
  need(c.check_val_every_n_epoch >= 1, "check_val_every_n_epoch must be >= 1");
  need(c.infer_overlap >= 0 && c.infer_overlap < 1, "infer_overlap must be in [0, 1)");
  need(c.lr > 0 && c.weight_decay >= 0, "lr must be > 0 and weight_decay >= 0");
  need(c.warmup_fraction >= 0 && c.warmup_fraction < 1, "warmup_fraction must be in [0, 1)");
  need(c.n_folds >= 2, "n_folds must be >= 2");
  need(c.fold >= 0 && c.fold < c.n_folds, "fold must be in [0, n_folds)");
  need(c.n_stages >= 2, "n_stages must be >= 2");
  need(c.gca_heads >= 1 && c.gca_dense_cap >= 1, "gca_heads and gca_dense_cap must be >= 1");
  need(c.blending == "gaussian" || c.blending == "constant", "blending must be gaussian or constant");
  need(c.w_ce >= 0 && c.w_dice >= 0 && c.dice_eps > 0, "loss weights must be >= 0 and dice_eps > 0");
  need(c.min_component_voxels >= 0, "min_component_voxels must be >= 0");
  const auto div = std::int64_t{1} << (c.n_stages - 1);
  for (auto r : {c.roi_x, c.roi_y, c.roi_z})
    need(r >= div && r % div == 0, "roi extents must be positive multiples of " + std::to_string(div) + " for " +
                                       std::to_string(c.n_stages) + " stages");
}

// Flat key=value lines; '#' starts a comment. Omitted keys keep their defaults.
inline TrainConfig parse_config(std::istream& in, const std::string& source = "<config>") {
  TrainConfig cfg;
  std::string line;
  for (int no = 1; std::getline(in, line); ++no) {
    if (const auto h = line.find('#'); h != std::string::npos) line.erase(h);
    line = config_detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(source + ":" + std::to_string(no) + ": expected key=value");
    try {
      set_config_value(cfg, config_detail::trim(line.substr(0, eq)), config_detail::trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(source + ":" + std::to_string(no) + ": " + e.what());
    }
  }
  validate(cfg);
  return cfg;
}

inline TrainConfig parse_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_config(in);
}

inline TrainConfig load_config_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  return parse_config(in, path.string());
}

// Every key in table order, one key=value per line.
inline std::string to_text(const TrainConfig& c) {
  std::string out;
  for (const auto& f : config_detail::fields()) out += std::string(f.name) + "=" + f.get(c) + "\n";
  return out;
}

// -------------------------------------------------------------- resources

inline std::int64_t peak_rss_bytes() {
  rusage u{};
  getrusage(RUSAGE_SELF, &u);
  return static_cast<std::int64_t>(u.ru_maxrss) * 1024;
}

// Keeps large tensor buffers on the heap instead of fresh mmaps, so steady-state
// steps reuse already-faulted pages.
inline void tune_allocator() {
#if defined(__GLIBC__)
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, std::numeric_limits<int>::max());
#endif
}

// ------------------------------------------------------------------ runlog

struct EpochRecord {
  std::int64_t epoch = 0;
  double train_loss = 0;
  std::optional<double> val_loss, val_dice_et, val_dice_tc, val_dice_wt, val_dice_mean;
  double lr = 0;
  double epoch_seconds = 0;
  std::int64_t peak_rss_bytes = 0;
};

struct RunLog {
  static constexpr const char* kHeader =
      "epoch,train_loss,val_loss,val_dice_et,val_dice_tc,val_dice_wt,val_dice_mean,lr,epoch_seconds,peak_rss_bytes";
  std::vector<EpochRecord> rows;

  void write_csv(std::ostream& os) const {
    auto opt = [&](const std::optional<double>& v) {
      if (v) os << config_detail::fmt(*v);
    };
    os << kHeader << '\n';
    for (const auto& r : rows) {
      os << r.epoch << ',' << config_detail::fmt(r.train_loss) << ',';
      opt(r.val_loss), os << ',';
      opt(r.val_dice_et), os << ',';
      opt(r.val_dice_tc), os << ',';
      opt(r.val_dice_wt), os << ',';
      opt(r.val_dice_mean), os << ',';
      os << config_detail::fmt(r.lr) << ',' << config_detail::fmt(r.epoch_seconds) << ',' << r.peak_rss_bytes << '\n';
    }
  }

  static RunLog read_csv(std::istream& in) {
    RunLog log;
    std::string line;
    if (!std::getline(in, line) || config_detail::trim(line) != kHeader) throw DataError("runlog: unexpected header");
    while (std::getline(in, line)) {
      line = config_detail::trim(line);
      if (line.empty()) continue;
      std::vector<std::string> f;
      std::stringstream ss(line);
      for (std::string cell; std::getline(ss, cell, ',');) f.push_back(cell);
      if (line.back() == ',') f.emplace_back();
      if (f.size() != 10) throw DataError("runlog: expected 10 fields, got " + std::to_string(f.size()));
      auto opt = [](const std::string& s) -> std::optional<double> {
        if (s.empty()) return std::nullopt;
        return std::stod(s);
      };
      EpochRecord r;
      r.epoch = std::stoll(f[0]);
      r.train_loss = std::stod(f[1]);
      r.val_loss = opt(f[2]), r.val_dice_et = opt(f[3]), r.val_dice_tc = opt(f[4]), r.val_dice_wt = opt(f[5]);
      r.val_dice_mean = opt(f[6]);
      r.lr = std::stod(f[7]);
      r.epoch_seconds = std::stod(f[8]);
      r.peak_rss_bytes = std::stoll(f[9]);
      log.rows.push_back(r);
    }
    return log;
  }
};

// ----------------------------------------------------------------- trainer

struct ValidationResult {
  double loss = 0;
  double dice_et = 0, dice_tc = 0, dice_wt = 0;
  double mean() const { return (dice_et + dice_tc + dice_wt) / 3; }
};

struct TrainResult {
  RunLog log;
  double best_metric = -1;
  std::int64_t best_epoch = 0;
  std::int64_t steps = 0;
};

// Model input for inference: z-normalized modalities, plus an all-zero mask
// channel when the model was trained with the binary channel (labels are not
// available at inference time).
inline Tensor<float> model_input(const Tensor<float>& image, bool binary_channel) {
  auto x = znormalize(image);
  if (!binary_channel) return x;
  return append_mask_channel(x, BinaryMask({x.dim(1), x.dim(2), x.dim(3)}));
}

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<Case> cases, std::filesystem::path out_dir, std::ostream* log = nullptr)
      : cfg_(checked(std::move(cfg))), out_(std::move(out_dir)), log_(log), model_(cfg_.network()) {
    if (cases.empty()) throw DataError("training needs a nonempty dataset");
    std::sort(cases.begin(), cases.end(), [](const Case& a, const Case& b) { return a.id < b.id; });
    if (cfg_.is_debugging && cases.size() > 2) cases.resize(2);
    std::vector<std::string> ids;
    for (const auto& c : cases) {
      validate_case(c);
      ids.push_back(c.id);
    }
    const auto split = split_folds(ids, cfg_.split_plan());
    const std::set<std::string> val_ids(split.val.begin(), split.val.end());
    for (auto& c : cases) {
      Case p = c;
      p.image = znormalize(c.image);
      const bool is_val = val_ids.count(c.id) > 0;
      if (is_val) val_.push_back(p);
      if (!is_val || cfg_.all_samples_as_train) train_.push_back(crop_or_pad(p, cfg_.roi()));
    }
    params_ = model_.parameters();
    model_.init(static_cast<std::uint64_t>(cfg_.seed));
    if (cfg_.mednext_ckpt != "None" && !cfg_.mednext_ckpt.empty()) load_parameters(read_checkpoint(cfg_.mednext_ckpt), params_);
    steps_per_epoch_ = ceil_div(ceil_div(static_cast<std::int64_t>(train_.size()), cfg_.batch_size), cfg_.accumulate_grad_batches);
    total_steps_ = steps_per_epoch_ * cfg_.effective_epochs();
    warmup_ = warmup_steps(total_steps_, cfg_.warmup_fraction);
    adam_.weight_decay = cfg_.weight_decay;
    if (!out_.empty()) std::filesystem::create_directories(out_);
  }

  const TrainConfig& config() const { return cfg_; }
  SegmentationModel<float>& model() { return model_; }
  ParameterList<float>& parameters() { return params_; }
  const AdamWState<float>& optimizer_state() const { return state_; }
  const RunLog& log() const { return runlog_; }
  std::int64_t epoch() const { return epoch_; }
  std::int64_t step() const { return step_; }
  std::int64_t total_steps() const { return total_steps_; }
  std::int64_t warmup() const { return warmup_; }
  std::size_t train_size() const { return train_.size(); }
  std::size_t val_size() const { return val_.size(); }
  std::uint64_t config_hash() const { return fnv1a(to_text(cfg_)); }

  Checkpoint make_checkpoint() const {
    Checkpoint c;
    c.config_hash = config_hash();
    c.config_text = to_text(cfg_);
    c.epoch = epoch_, c.step = step_, c.best_metric = best_metric_, c.best_epoch = best_epoch_;
    add_parameters(c, params_);
    add_optimizer(c, params_, state_);
    return c;
  }

  // Restores weights, optimizer moments, counters and (from <out>/runlog.csv) the log rows.
  void resume(const Checkpoint& c) {
    if (c.config_hash != config_hash()) throw CheckpointError("checkpoint was written with a different configuration");
    load_parameters(c, params_);
    load_optimizer(c, params_, state_);
    epoch_ = c.epoch, step_ = c.step, best_metric_ = c.best_metric, best_epoch_ = c.best_epoch;
    runlog_.rows.clear();
    std::ifstream in(out_ / "runlog.csv");
    if (in) {
      for (const auto& r : RunLog::read_csv(in).rows)
        if (r.epoch <= epoch_) runlog_.rows.push_back(r);
    }
  }

  // Runs epochs until max_epochs (or until `stop_after` completed epochs).
  TrainResult run(std::int64_t stop_after = -1) {
    const auto last = stop_after < 0 ? cfg_.effective_epochs() : std::min(stop_after, cfg_.effective_epochs());
    while (epoch_ < last) run_epoch();
    return {runlog_, best_metric_, best_epoch_, step_};
  }

  void run_epoch() {
    const auto t0 = std::chrono::steady_clock::now();
    const auto e = epoch_;  // 0-based index of the epoch being run
    EpochRecord rec;
    rec.epoch = e + 1;
    rec.train_loss = train_epoch(e, rec.lr);
    if ((e + 1) % cfg_.check_val_every_n_epoch == 0 && !val_.empty()) {
      const auto v = validate_now();
      rec.val_loss = v.loss, rec.val_dice_et = v.dice_et, rec.val_dice_tc = v.dice_tc, rec.val_dice_wt = v.dice_wt;
      rec.val_dice_mean = v.mean();
    }
    epoch_ = e + 1;
    rec.epoch_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    rec.peak_rss_bytes = peak_rss_bytes();
    const bool best = rec.val_dice_mean && *rec.val_dice_mean > best_metric_;
    if (best) best_metric_ = *rec.val_dice_mean, best_epoch_ = rec.epoch;
    runlog_.rows.push_back(rec);
    if (!out_.empty()) {
      const auto ck = make_checkpoint();
      write_checkpoint(out_ / "last.ckpt", ck);
      if (best) write_checkpoint(out_ / "best.ckpt", ck);
      std::ofstream csv(out_ / "runlog.csv", std::ios::trunc);
      runlog_.write_csv(csv);
    }
    if (log_) {
      *log_ << "epoch " << rec.epoch << "/" << cfg_.effective_epochs() << " train_loss " << std::setprecision(6) << rec.train_loss;
      if (rec.val_dice_mean)
        *log_ << " val_loss " << *rec.val_loss << " dice et/tc/wt " << *rec.val_dice_et << "/" << *rec.val_dice_tc << "/"
              << *rec.val_dice_wt << (best ? " (best)" : "");
      *log_ << " lr " << rec.lr << " " << std::setprecision(4) << rec.epoch_seconds << "s rss " << (rec.peak_rss_bytes >> 20)
            << "MiB gpu_mem n/a" << std::endl;
    }
  }

  // Batch tensors for micro-batch `ids` in epoch `e` (augmented when aug_type = 1).
  std::pair<Tensor<float>, std::vector<LabelVolume>> make_batch(const std::vector<std::size_t>& idx, std::int64_t e) const {
    std::vector<float> values;
    std::vector<LabelVolume> labels;
    Shape shape;
    for (auto i : idx) {
      const auto& src = train_[i];
      Case c = cfg_.aug_type == 1 ? augment(src, augment_seed(static_cast<std::uint64_t>(cfg_.seed), src.id, static_cast<std::uint64_t>(e)))
                                  : src;
      auto img = cfg_.binary_channel ? append_mask_channel(c.image, binarize(c.labels)) : c.image;
      if (shape.empty()) shape = {0, img.dim(0), img.dim(1), img.dim(2), img.dim(3)};
      values.insert(values.end(), img.values().begin(), img.values().end());
      labels.push_back(std::move(c.labels));
    }
    shape[0] = static_cast<std::int64_t>(idx.size());
    return {Tensor<float>(shape, std::move(values)), std::move(labels)};
  }

  // Epoch order: Fisher-Yates over the sorted training set seeded by (seed, epoch).
  std::vector<std::size_t> epoch_order(std::int64_t e) const {
    std::vector<std::size_t> order(train_.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::mt19937_64 rng(mix64(static_cast<std::uint64_t>(cfg_.seed) ^ mix64(static_cast<std::uint64_t>(e) + 0x5eed)));
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng() % i]);
    return order;
  }

  std::vector<std::vector<std::size_t>> micro_batches(std::int64_t e) const {
    const auto order = epoch_order(e);
    const auto bs = static_cast<std::size_t>(cfg_.batch_size);
    std::vector<std::vector<std::size_t>> micro;
    for (std::size_t i = 0; i < order.size(); i += bs)
      micro.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i),
                         order.begin() + static_cast<std::ptrdiff_t>(std::min(order.size(), i + bs)));
    return micro;
  }

  // Forward/backward over micro-batches [first, first + count) of `micro`,
  // accumulating grad(mean of their losses) into the parameters. Returns the
  // sum of the micro-batch losses.
  double accumulate(const std::vector<std::vector<std::size_t>>& micro, std::size_t first, std::size_t count, std::int64_t e) {
    const auto loss_cfg = cfg_.loss();
    double loss_sum = 0;
    std::future<std::pair<Tensor<float>, std::vector<LabelVolume>>> next;
    const bool prefetch = cfg_.num_workers > 0;
    auto prepare = [&](std::size_t k) {
      next = std::async(std::launch::async, [this, &micro, k, e] { return make_batch(micro[k], e); });
    };
    if (prefetch) prepare(first);
    for (std::size_t k = first; k < first + count; ++k) {
      auto batch = prefetch ? next.get() : make_batch(micro[k], e);
      if (prefetch && k + 1 < first + count) prepare(k + 1);
      auto out = model_.forward(batch.first);
      auto loss = combined_loss(out, batch.second, loss_cfg);
      const double v = loss.item();
      if (!std::isfinite(v)) {
        std::string which;
        for (auto i : micro[k]) which += (which.empty() ? "" : ",") + train_[i].id;
        throw NumericalError("non-finite loss " + std::to_string(v) + " at epoch " + std::to_string(e + 1) + ", batch " +
                             std::to_string(k) + " (cases " + which + ")");
      }
      loss_sum += v;
      scale(loss, 1.0f / static_cast<float>(count)).backward();
    }
    return loss_sum;
  }

  // One optimizer step per window of accumulate_grad_batches micro-batches;
  // a partial window at the end of the epoch is flushed as its own step.
  double train_epoch(std::int64_t e, double& last_lr) {
    const auto micro = micro_batches(e);
    const auto accum = static_cast<std::size_t>(cfg_.accumulate_grad_batches);
    double loss_sum = 0;
    for (std::size_t w = 0; w < micro.size(); w += accum) {
      loss_sum += accumulate(micro, w, std::min(accum, micro.size() - w), e);
      last_lr = cosine_warmup_lr(step_, total_steps_, warmup_, cfg_.lr);
      adamw_step(params_, state_, last_lr, adam_);
      for (auto& p : params_) p.zero_grad();
      ++step_;
    }
    return micro.empty() ? 0.0 : loss_sum / static_cast<double>(micro.size());
  }

  TileModel<float> tile_model() const {
    return [this](const Tensor<float>& x) { return model_.forward(x).logits; };
  }

  ValidationResult validate_now() const {
    NoGradGuard ng;
    ValidationResult r;
    const auto loss_cfg = cfg_.loss();
    const SlidingWindowOptions sw{cfg_.sw_batch_size, blending_from_string(cfg_.blending), cfg_.threads};
    for (const auto& c : val_) {
      const auto x = cfg_.binary_channel ? append_mask_channel(c.image, BinaryMask(c.labels.dims)) : c.image;
      const auto logits = infer_case(x, tile_model(), cfg_.roi(), cfg_.infer_overlap, sw);
      const Tensor<float> batched({1, logits.dim(0), logits.dim(1), logits.dim(2), logits.dim(3)}, logits.values());
      r.loss += stage_loss(batched, {c.labels}, loss_cfg).item();
      const auto pred = predict_labels(batched)[0];
      const auto p = region_composites(pred), g = region_composites(c.labels);
      r.dice_et += dice(overlap_counts(p.et, g.et));
      r.dice_tc += dice(overlap_counts(p.tc, g.tc));
      r.dice_wt += dice(overlap_counts(p.wt, g.wt));
    }
    const double n = static_cast<double>(val_.size());
    r.loss /= n, r.dice_et /= n, r.dice_tc /= n, r.dice_wt /= n;
    return r;
  }

 private:
  static TrainConfig checked(TrainConfig c) {
    validate(c);
    return c;
  }
  static std::int64_t ceil_div(std::int64_t a, std::int64_t b) { return (a + b - 1) / b; }

  TrainConfig cfg_;
  std::filesystem::path out_;
  std::ostream* log_;
  SegmentationModel<float> model_;
  ParameterList<float> params_;
  AdamWState<float> state_;
  AdamWOptions adam_;
  std::vector<Case> train_, val_;
  std::int64_t steps_per_epoch_ = 0, total_steps_ = 0, warmup_ = 0;
  std::int64_t epoch_ = 0, step_ = 0;
  double best_metric_ = -1;
  std::int64_t best_epoch_ = 0;
  RunLog runlog_;
};

// Loads a checkpoint into a fresh model using the configuration stored inside it.
inline std::pair<TrainConfig, SegmentationModel<float>> load_model(const std::filesystem::path& ckpt) {
  const auto c = read_checkpoint(ckpt);
  auto cfg = parse_config_text(c.config_text);
  SegmentationModel<float> model(cfg.network());
  auto params = model.parameters();
  load_parameters(c, params);
  return {cfg, std::move(model)};
}

}  // namespace gcaseg
