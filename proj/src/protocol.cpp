#include "addp/protocol.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "addp/io.hpp"
#include "addp/nn/optim.hpp"
#include "addp/simplify.hpp"

namespace addp::protocol {

using nlohmann::json;
namespace fs = std::filesystem;

Method method_from_name(const std::string& s) {
  if (s == "addp") return Method::kAddp;
  if (s == "naive") return Method::kNaive;
  if (s == "joint") return Method::kJoint;
  throw ConfigError("method: unknown method '" + s + "' (expected addp, naive or joint)");
}

std::string method_name(Method m) {
  switch (m) {
    case Method::kAddp: return "addp";
    case Method::kNaive: return "naive";
    case Method::kJoint: return "joint";
  }
  return "?";
}

// --- config parsing ---------------------------------------------------------

namespace {

void check_keys(const json& j, const std::string& path, std::initializer_list<const char*> keys) {
  if (!j.is_object()) throw ConfigError(path + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* k) { return key == k; })) {
      throw ConfigError(path + (path.empty() ? "" : ".") + key + ": unknown field");
    }
  }
}

std::string join(const std::string& path, const std::string& key) { return path.empty() ? key : path + "." + key; }

template <class T>
void field(const json& j, const std::string& path, const char* key, T& dst) {
  if (!j.contains(key)) return;
  try {
    dst = j.at(key).get<T>();
  } catch (const json::exception& e) {
    throw ConfigError(join(path, key) + ": " + e.what());
  }
}

json domain_json(const synth::DomainFactors& d) {
  return {{"base_color", d.base_color},
          {"illumination_gain", d.illumination_gain},
          {"illumination_flicker_hz", d.illumination_flicker_hz},
          {"motion_amplitude", d.motion_amplitude},
          {"noise_sigma", d.noise_sigma},
          {"fs", d.fs}};
}

synth::DomainFactors parse_domain(const json& j, const std::string& path) {
  check_keys(j, path,
             {"base_color", "illumination_gain", "illumination_flicker_hz", "motion_amplitude", "noise_sigma", "fs"});
  synth::DomainFactors d;
  field(j, path, "base_color", d.base_color);
  field(j, path, "illumination_gain", d.illumination_gain);
  field(j, path, "illumination_flicker_hz", d.illumination_flicker_hz);
  field(j, path, "motion_amplitude", d.motion_amplitude);
  field(j, path, "noise_sigma", d.noise_sigma);
  field(j, path, "fs", d.fs);
  return d;
}

TaskSource parse_task(const json& j, const std::string& path, const fs::path& base_dir) {
  check_keys(j, path,
             {"name", "domain", "n_train_clips", "n_test_clips", "hr_range", "seed", "frames", "height", "width",
              "manifest", "window"});
  TaskSource t;
  field(j, path, "name", t.spec.name);
  if (j.contains("manifest")) {
    std::string m;
    field(j, path, "manifest", m);
    fs::path p(m);
    t.manifest = p.is_relative() ? base_dir / p : p;
    if (j.contains("window")) {
      const std::string wp = join(path, "window");
      check_keys(j.at("window"), wp, {"win", "step"});
      field(j.at("window"), wp, "win", t.window.win);
      field(j.at("window"), wp, "step", t.window.step);
    }
    return t;
  }
  if (j.contains("domain")) t.spec.domain = parse_domain(j.at("domain"), join(path, "domain"));
  field(j, path, "n_train_clips", t.spec.n_train_clips);
  field(j, path, "n_test_clips", t.spec.n_test_clips);
  if (j.contains("hr_range")) {
    std::array<double, 2> r{};
    field(j, path, "hr_range", r);
    t.spec.hr_lo = r[0];
    t.spec.hr_hi = r[1];
  }
  field(j, path, "seed", t.spec.seed);
  field(j, path, "frames", t.spec.frames);
  field(j, path, "height", t.spec.height);
  field(j, path, "width", t.spec.width);
  return t;
}

Toggles parse_toggles(const json& j, const std::string& path, Toggles t = {}) {
  field(j, path, "style_aug", t.style_aug);
  field(j, path, "noise_aug", t.noise_aug);
  field(j, path, "simplify", t.simplify);
  return t;
}

Hyper parse_hyper(const json& j, const std::string& path) {
  check_keys(j, path,
             {"K", "p", "alpha", "lr", "weight_decay", "epochs_initial", "epochs_incremental", "batch", "lambda_freq",
              "loss_nfft", "hr_nfft", "mae_attribution", "sampling", "top_m", "clip_augment"});
  Hyper h;
  field(j, path, "K", h.k);
  field(j, path, "p", h.p);
  field(j, path, "alpha", h.alpha);
  field(j, path, "lr", h.lr);
  field(j, path, "weight_decay", h.weight_decay);
  field(j, path, "epochs_initial", h.epochs_initial);
  field(j, path, "epochs_incremental", h.epochs_incremental);
  field(j, path, "batch", h.batch);
  field(j, path, "lambda_freq", h.lambda_freq);
  field(j, path, "loss_nfft", h.loss_nfft);
  field(j, path, "hr_nfft", h.hr_nfft);
  field(j, path, "mae_attribution", h.mae_attribution);
  field(j, path, "top_m", h.top_m);
  if (j.contains("sampling")) {
    std::string s;
    field(j, path, "sampling", s);
    try {
      h.sampling = augment::sampling_from_name(s);
    } catch (const std::exception& e) {
      throw ConfigError(join(path, "sampling") + ": " + e.what());
    }
  }
  if (j.contains("clip_augment")) {
    const std::string cp = join(path, "clip_augment");
    const json& c = j.at("clip_augment");
    check_keys(c, cp,
               {"horizontal_flip", "resized_crop", "temporal_resample", "intensity_noise", "min_crop_fraction",
                "min_speed", "intensity_sigma"});
    auto& o = h.clip_augment;
    field(c, cp, "horizontal_flip", o.horizontal_flip);
    field(c, cp, "resized_crop", o.resized_crop);
    field(c, cp, "temporal_resample", o.temporal_resample);
    field(c, cp, "intensity_noise", o.intensity_noise);
    field(c, cp, "min_crop_fraction", o.min_crop_fraction);
    field(c, cp, "min_speed", o.min_speed);
    field(c, cp, "intensity_sigma", o.intensity_sigma);
  }
  return h;
}

json hyper_json(const Hyper& h) {
  const auto& o = h.clip_augment;
  return {{"K", h.k},
          {"p", h.p},
          {"alpha", h.alpha},
          {"lr", h.lr},
          {"weight_decay", h.weight_decay},
          {"epochs_initial", h.epochs_initial},
          {"epochs_incremental", h.epochs_incremental},
          {"batch", h.batch},
          {"lambda_freq", h.lambda_freq},
          {"loss_nfft", h.loss_nfft},
          {"hr_nfft", h.hr_nfft},
          {"mae_attribution", h.mae_attribution},
          {"sampling", augment::sampling_name(h.sampling)},
          {"top_m", h.top_m},
          {"clip_augment",
           {{"horizontal_flip", o.horizontal_flip},
            {"resized_crop", o.resized_crop},
            {"temporal_resample", o.temporal_resample},
            {"intensity_noise", o.intensity_noise},
            {"min_crop_fraction", o.min_crop_fraction},
            {"min_speed", o.min_speed},
            {"intensity_sigma", o.intensity_sigma}}}};
}

json toggles_json(const Toggles& t) {
  return {{"style_aug", t.style_aug}, {"noise_aug", t.noise_aug}, {"simplify", t.simplify}};
}

// Temporal length of the pooled stage-4 feature for a clip of `frames`.
int pooled_length(const nn::ModelConfig& m, int frames) {
  int t = frames - 1;
  for (int s : m.temporal_strides) t = (t + s - 1) / s;
  return t;
}

}  // namespace

void ExperimentConfig::validate() const {
  if (tasks.empty()) throw ConfigError("tasks: at least one task is required");
  try {
    model.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const std::string path = "tasks[" + std::to_string(i) + "]";
    const auto& t = tasks[i];
    int frames = t.spec.frames;
    if (t.manifest) {
      if (t.window.win < 1 || t.window.step < 1) throw ConfigError(path + ".window: win and step must be >= 1");
      frames = t.window.win;
    } else {
      try {
        t.spec.validate();
      } catch (const std::invalid_argument& e) {
        throw ConfigError(path + "." + e.what());
      }
      if (t.spec.n_test_clips < 2) throw ConfigError(path + ".n_test_clips: need >= 2 test clips for metrics");
      if (t.spec.height < 16 || t.spec.width < 16) throw ConfigError(path + ": height and width must be >= 16");
      if (t.spec.frames < 2) throw ConfigError(path + ".frames: must be >= 2");
    }
    const int c2 = model.stage_channels[3];
    const int t2 = pooled_length(model, frames);
    if (hyper.alpha > std::min(c2, t2)) {
      throw ConfigError("hyper.alpha: " + std::to_string(hyper.alpha) + " exceeds min(C2, T2) = " +
                        std::to_string(std::min(c2, t2)) + " for " + path);
    }
  }
  const Hyper& h = hyper;
  if (h.k < 1) throw ConfigError("hyper.K: must be >= 1");
  if (!(h.p >= 0.0 && h.p <= 1.0)) throw ConfigError("hyper.p: must lie in [0, 1]");
  if (h.alpha < 0) throw ConfigError("hyper.alpha: must be >= 0");
  if (!(h.lr > 0.0)) throw ConfigError("hyper.lr: must be > 0");
  if (!(h.weight_decay >= 0.0)) throw ConfigError("hyper.weight_decay: must be >= 0");
  if (h.epochs_initial < 1) throw ConfigError("hyper.epochs_initial: must be >= 1");
  if (h.epochs_incremental < 0) throw ConfigError("hyper.epochs_incremental: must be >= 0");
  if (h.batch < 1) throw ConfigError("hyper.batch: must be >= 1");
  if (h.top_m < 1) throw ConfigError("hyper.top_m: must be >= 1");
  if (!task_order.empty()) {
    std::vector<int> sorted = task_order;
    std::sort(sorted.begin(), sorted.end());
    for (std::size_t i = 0; i < sorted.size(); ++i) {
      if (sorted.size() != tasks.size() || sorted[i] != static_cast<int>(i)) {
        throw ConfigError("task_order: must be a permutation of 0.." + std::to_string(tasks.size() - 1));
      }
    }
  }
  std::set<std::string> names;
  for (const auto& row : ablation) {
    if (row.name.empty() || !names.insert(row.name).second) {
      throw ConfigError("ablation: row names must be unique and non-empty");
    }
  }
}

std::vector<TaskSource> ExperimentConfig::ordered_tasks() const {
  if (task_order.empty()) return tasks;
  std::vector<TaskSource> out;
  for (int i : task_order) out.push_back(tasks.at(static_cast<std::size_t>(i)));
  return out;
}

void to_json(json& j, const ExperimentConfig& c) {
  json tasks = json::array();
  for (const auto& t : c.tasks) {
    if (t.manifest) {
      tasks.push_back({{"name", t.spec.name},
                       {"manifest", t.manifest->string()},
                       {"window", {{"win", t.window.win}, {"step", t.window.step}}}});
    } else {
      json s = synth::spec_to_json(t.spec);
      s["domain"] = domain_json(t.spec.domain);
      tasks.push_back(s);
    }
  }
  json ablation = json::array();
  for (const auto& row : c.ablation) {
    json r = toggles_json(row.toggles);
    r["name"] = row.name;
    ablation.push_back(r);
  }
  j = json{{"name", c.name},           {"seed", c.seed},
           {"method", method_name(c.method)}, {"toggles", toggles_json(c.toggles)},
           {"hyper", hyper_json(c.hyper)},    {"model", c.model},
           {"tasks", tasks},               {"ablation", ablation},
           {"task_order", c.task_order},   {"audit", c.audit},
           {"checkpoints", c.checkpoints}};
}

namespace {

ExperimentConfig parse_config(const json& j, const fs::path& base_dir) {
  check_keys(j, "",
             {"name", "seed", "method", "toggles", "hyper", "model", "tasks", "ablation", "task_order", "audit",
              "checkpoints"});
  ExperimentConfig c;
  field(j, "", "name", c.name);
  field(j, "", "seed", c.seed);
  if (j.contains("method")) {
    std::string m;
    field(j, "", "method", m);
    c.method = method_from_name(m);
  }
  if (j.contains("toggles")) {
    check_keys(j.at("toggles"), "toggles", {"style_aug", "noise_aug", "simplify"});
    c.toggles = parse_toggles(j.at("toggles"), "toggles");
  }
  if (j.contains("hyper")) c.hyper = parse_hyper(j.at("hyper"), "hyper");
  if (j.contains("model")) {
    try {
      c.model = j.at("model").get<nn::ModelConfig>();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(e.what());
    }
  }
  if (!j.contains("tasks") || !j.at("tasks").is_array()) throw ConfigError("tasks: expected a list of tasks");
  for (std::size_t i = 0; i < j.at("tasks").size(); ++i) {
    c.tasks.push_back(parse_task(j.at("tasks")[i], "tasks[" + std::to_string(i) + "]", base_dir));
  }
  if (j.contains("ablation")) {
    const json& a = j.at("ablation");
    if (a.is_string() && a.get<std::string>() == "default") {
      c.ablation = default_ablation_grid();
    } else if (a.is_array()) {
      for (std::size_t i = 0; i < a.size(); ++i) {
        const std::string path = "ablation[" + std::to_string(i) + "]";
        check_keys(a[i], path, {"name", "style_aug", "noise_aug", "simplify"});
        AblationRow row;
        field(a[i], path, "name", row.name);
        row.toggles = parse_toggles(a[i], path, Toggles{false, false, false});
        c.ablation.push_back(row);
      }
    } else {
      throw ConfigError("ablation: expected a list of rows or \"default\"");
    }
  }
  field(j, "", "task_order", c.task_order);
  field(j, "", "audit", c.audit);
  field(j, "", "checkpoints", c.checkpoints);
  c.validate();
  return c;
}

}  // namespace

ExperimentConfig config_from_json(const json& j) { return parse_config(j, fs::current_path()); }

ExperimentConfig load_config(const fs::path& path) {
  std::string text;
  try {
    text = io::read_text(path);
  } catch (const std::exception& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: JSON parse error: ") + e.what());
  }
  return parse_config(j, path.has_parent_path() ? path.parent_path() : fs::current_path());
}

std::string config_hash(const ExperimentConfig& c) {
  const std::string s = json(c).dump();
  return io::hex64(io::fnv1a(s.data(), s.size()));
}

ExperimentConfig default_benchmark(std::uint64_t seed, Method method) {
  ExperimentConfig c;
  c.name = "benchmark";
  c.seed = seed;
  c.method = method;

  const auto task = [&](const char* name, std::array<double, 3> color, double gain, double flicker, double motion,
                        double noise, std::uint64_t stream) {
    TaskSource t;
    t.spec.name = name;
    t.spec.domain.base_color = color;
    t.spec.domain.illumination_gain = gain;
    t.spec.domain.illumination_flicker_hz = flicker;
    t.spec.domain.motion_amplitude = motion;
    t.spec.domain.noise_sigma = noise;
    t.spec.n_train_clips = 16;
    t.spec.n_test_clips = 8;
    t.spec.hr_lo = 50.0;
    t.spec.hr_hi = 150.0;
    t.spec.seed = synth::derive_seed(seed, 0x7a5c, stream);
    return t;
  };
  c.tasks = {
      task("motion", {0.80, 0.60, 0.50}, 1.00, 0.0, 0.3, 0.02, 1),
      task("dim-dark", {0.50, 0.35, 0.28}, 0.75, 0.0, 0.0, 0.01, 2),
      task("bright-flicker", {0.90, 0.75, 0.65}, 1.20, 4.0, 0.0, 0.02, 3),
  };
  c.hyper.lr = 1e-3;
  c.hyper.batch = 4;
  c.hyper.epochs_initial = 12;
  c.hyper.epochs_incremental = 8;
  c.hyper.clip_augment = {true, true, true, true};
  return c;
}

std::vector<AblationRow> default_ablation_grid() {
  return {{"none", {false, false, false}},
          {"style", {true, false, false}},
          {"style_noise", {true, true, false}},
          {"full", {true, true, true}}};
}

// --- training ---------------------------------------------------------------

namespace {

constexpr std::uint64_t kOrderStream = 0x0de7;
constexpr std::uint64_t kClipAugStream = 0xc11a;
constexpr std::uint64_t kClusterStream = 0xc1a5;

signal::HrOptions hr_options(const Hyper& h) { return {signal::Band{}, h.hr_nfft}; }

// Key identifying a clip across tasks, for per-clip random streams.
std::uint64_t clip_key(const synth::ClipSample& c) {
  return (static_cast<std::uint64_t>(c.task_id) << 32) ^ static_cast<std::uint64_t>(c.sample_id);
}

}  // namespace

std::vector<EpochLog> train_task(nn::Model& model, const std::vector<synth::ClipSample>& train, int task_index,
                                 nn::Stage stage, bool augment, TrainContext& ctx) {
  if (train.empty()) throw std::invalid_argument("train_task: empty training set");
  const ExperimentConfig& cfg = ctx.config;
  const Hyper& h = cfg.hyper;
  if (augment && ctx.store.empty()) {
    throw std::runtime_error("train_task: prototype store is empty before incremental task " +
                             std::to_string(task_index + 1));
  }
  model.set_stage(stage);
  std::vector<nn::Parameter*> trainable;
  for (nn::Parameter* p : model.parameters()) {
    if (p->trainable) trainable.push_back(p);
  }
  nn::Adam opt(trainable, {h.lr, 0.9, 0.999, 1e-8, h.weight_decay});
  const std::uint64_t frozen = model.checksum(nn::Partition::kBackbone);

  loss::Options lo;
  lo.lambda_freq = h.lambda_freq;
  lo.fs = train.front().label.fs;
  lo.nfft = h.loss_nfft;
  const augment::Options ao{h.p, cfg.toggles.style_aug, cfg.toggles.noise_aug, h.alpha, h.sampling};
  const signal::HrOptions hr = hr_options(h);
  const int epochs = stage == nn::Stage::kInitial ? h.epochs_initial : h.epochs_incremental;

  std::mt19937_64 order_rng(synth::derive_seed(cfg.seed, kOrderStream, static_cast<std::uint64_t>(task_index)));
  std::vector<std::size_t> order(train.size());
  std::vector<EpochLog> logs;
  for (int epoch = 0; epoch < epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), order_rng);
    double total = 0.0;
    for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(h.batch)) {
      const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(h.batch));
      model.zero_grad();
      for (std::size_t b = start; b < end; ++b) {
        const synth::ClipSample& src = train[order[b]];
        const std::uint64_t key = clip_key(src);
        synth::ClipSample augmented;
        const synth::ClipSample* clip = &src;
        if (h.clip_augment.any()) {
          std::mt19937_64 rng(synth::derive_seed(cfg.seed ^ kClipAugStream, static_cast<std::uint64_t>(ctx.step), key));
          augmented = synth::augment_clip(src, h.clip_augment, rng);
          clip = &augmented;
        }
        augment::Decision d;
        if (augment) {
          std::mt19937_64 rng = augment::clip_rng(cfg.seed, static_cast<std::uint64_t>(ctx.step), key);
          d = augment::draw(ctx.store, ao, rng);
          if (ctx.audit) ctx.audit->write(ctx.step, static_cast<std::int64_t>(key), d);
        }
        const nn::Hooks hooks = augment::make_hooks(d, ctx.store, h.alpha);
        const Video& v = clip->video;
        nn::Model::Tape tape;
        const nn::Prediction pred = model.forward_train(nn::video_to_mat(v), {v.frames, v.height, v.width}, hooks, tape);
        const loss::Value lv = loss::rppg_loss(pred.pred, clip->label.samples, lo);
        model.backward(tape, lv.grad);
        total += lv.total;
        if (d.style_id) {
          const double est = signal::estimate_hr(signal::Waveform(pred.pred, clip->label.fs), hr);
          ctx.store.record_mae(*d.style_id, std::abs(est - clip->hr));
        }
      }
      opt.step(1.0 / static_cast<double>(end - start));
      ++ctx.step;
    }
    EpochLog log{task_index, epoch, total / static_cast<double>(train.size()),
                 model.checksum(nn::Partition::kBackbone), model.checksum(nn::Partition::kAdapter),
                 model.checksum(nn::Partition::kHead)};
    if (stage == nn::Stage::kIncremental && log.backbone != frozen) {
      throw std::runtime_error("train_task: backbone changed during an incremental task");
    }
    logs.push_back(log);
  }
  return logs;
}

// --- evaluation -------------------------------------------------------------

Simplification plan_simplification(const proto::PrototypeStore& store, int top_m) {
  return {simplify::select_top(store, top_m)};
}

Evaluation evaluate(const nn::Model& model, const std::vector<synth::ClipSample>& test,
                    const proto::PrototypeStore* store, const Simplification& simp, const Hyper& hyper) {
  if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
  const signal::HrOptions hr = hr_options(hyper);
  const bool on = store != nullptr && !simp.candidates.empty();

  std::vector<std::int64_t> recordings;
  std::map<std::int64_t, std::pair<double, double>> pred_sum, gt_sum;
  std::map<std::int64_t, int> counts;
  for (const auto& clip : test) {
    nn::Hooks hooks;
    if (on) {
      std::size_t id = simp.candidates.front();
      if (simp.candidates.size() > 1) {
        const nn::Prediction plain = model.infer(clip.video);
        id = simplify::nearest(*store, simp.candidates, transfer::style_stats(plain.taps.h.x));
      }
      const auto& p = store->style().at(id);
      hooks.style_mu = &p.mu;
      hooks.style_sigma = &p.sigma;
    }
    const nn::Prediction pred = model.infer(clip.video, hooks);
    const double est = signal::estimate_hr(signal::Waveform(pred.pred, clip.label.fs), hr);
    if (!counts.count(clip.recording_id)) recordings.push_back(clip.recording_id);
    pred_sum[clip.recording_id].first += est;
    gt_sum[clip.recording_id].first += clip.hr;
    ++counts[clip.recording_id];
  }
  Evaluation ev;
  for (std::int64_t r : recordings) {
    ev.pred_hr.push_back(pred_sum[r].first / counts[r]);
    ev.gt_hr.push_back(gt_sum[r].first / counts[r]);
  }
  if (ev.pred_hr.size() < 2) throw std::invalid_argument("evaluate: need at least 2 recordings per test set");
  ev.report = signal::compute_metrics(ev.pred_hr, ev.gt_hr);
  return ev;
}

// --- runs -------------------------------------------------------------------

json RunRecord::to_json() const {
  json epochs_j = json::array();
  for (const auto& e : epochs) {
    epochs_j.push_back({{"task", e.task + 1},
                        {"epoch", e.epoch + 1},
                        {"loss", e.loss},
                        {"checksum",
                         {{"backbone", io::hex64(e.backbone)},
                          {"adapter", io::hex64(e.adapter)},
                          {"head", io::hex64(e.head)}}}});
  }
  json perf = json::object();
  for (const auto& [k, v] : final_performance) perf[k] = std::isnan(v) ? json(nullptr) : json(v);
  json sel = json::array();
  for (std::size_t i = 0; i < selected.size(); ++i) {
    if (selected[i]) {
      sel.push_back({{"after_task", i + 1}, {"style_id", *selected[i]}, {"train_mae", selected_mae[i]}});
    } else {
      sel.push_back({{"after_task", i + 1}, {"style_id", nullptr}, {"train_mae", nullptr}});
    }
  }
  json rows = json::array();
  for (std::size_t i = 0; i < matrix.n_tasks(); ++i) {
    json row = json::array();
    for (std::size_t j = 0; j <= i; ++j) row.push_back(matrix.has(i, j) ? json(matrix.at(i, j)) : json(nullptr));
    rows.push_back(row);
  }
  return {{"name", name},
          {"method", method},
          {"toggles", toggles_json(toggles)},
          {"final_performance", perf},
          {"result_matrix", rows},
          {"style_prototypes", style_counts},
          {"noise_prototypes", noise_counts},
          {"simplification", sel},
          {"epochs", epochs_j},
          {"wall_seconds", wall_seconds},
          {"config_hash", config_hash}};
}

TaskSet materialize_tasks(const ExperimentConfig& config) {
  TaskSet ts;
  const auto tasks = config.ordered_tasks();
  for (std::size_t i = 0; i < tasks.size(); ++i) {
    const auto& t = tasks[i];
    ts.names.push_back(t.spec.name);
    if (t.manifest) {
      ts.data.push_back(synth::load_task_dataset(*t.manifest, static_cast<int>(i), t.window));
    } else {
      ts.data.push_back(synth::generate_task(t.spec, static_cast<int>(i)));
    }
    if (ts.data.back().train.empty()) throw std::runtime_error("task '" + t.spec.name + "' has no training clips");
  }
  return ts;
}

namespace {

void write_artifacts(const fs::path& dir, const RunRecord& rec, const proto::PrototypeStore& store, bool has_store) {
  io::write_text(dir / "result_matrix.csv", rec.matrix.to_csv());
  io::write_text(dir / "metrics.json", rec.to_json().dump(2) + "\n");
  if (has_store) store.save(dir / "prototypes.arc");
}

void fill_final_performance(RunRecord& rec) {
  const std::size_t n = rec.matrix.n_tasks();
  bool full = n > 0;
  for (std::size_t j = 0; j < n; ++j) full = full && rec.matrix.has(n - 1, j);
  if (!full) return;
  for (auto m : {signal::Metric::kStd, signal::Metric::kMae, signal::Metric::kRmse, signal::Metric::kR}) {
    rec.final_performance[signal::metric_name(m)] = signal::incremental_performance(rec.matrix, m);
  }
}

}  // namespace

RunRecord run_dil(const ExperimentConfig& config, const std::optional<fs::path>& out_dir, const Progress& progress,
                  const TaskSet* tasks) {
  config.validate();
  const auto t0 = std::chrono::steady_clock::now();
  const auto say = [&](const std::string& s) {
    if (progress) progress(s);
  };
  TaskSet owned;
  if (!tasks) {
    owned = materialize_tasks(config);
    tasks = &owned;
  }
  const std::size_t n = tasks->data.size();

  RunRecord rec;
  rec.name = config.name;
  rec.method = method_name(config.method);
  rec.toggles = config.toggles;
  rec.matrix = signal::ResultMatrix(n);
  rec.config_hash = config_hash(config);

  nn::ModelConfig mc = config.model;
  mc.seed = config.seed;
  nn::Model model(mc);
  proto::PrototypeStore store;
  const bool addp = config.method == Method::kAddp;
  augment::AuditLog audit;
  if (out_dir) {
    fs::create_directories(*out_dir);
    io::write_text(*out_dir / "config.json", json(config).dump(2) + "\n");
    if (config.audit && addp) audit = augment::AuditLog(*out_dir / "audit.jsonl");
  }
  TrainContext ctx{config, store, audit.enabled() ? &audit : nullptr, 0};
  const auto elapsed = [&] {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  if (config.method == Method::kJoint) {
    std::vector<synth::ClipSample> all;
    for (const auto& d : tasks->data) all.insert(all.end(), d.train.begin(), d.train.end());
    say("joint training on " + std::to_string(all.size()) + " clips");
    auto logs = train_task(model, all, 0, nn::Stage::kInitial, false, ctx);
    rec.epochs.insert(rec.epochs.end(), logs.begin(), logs.end());
    for (std::size_t j = 0; j < n; ++j) {
      rec.matrix.set(n - 1, j, evaluate(model, tasks->data[j].test, nullptr, {}, config.hyper).report);
    }
    rec.selected.assign(n, std::nullopt);
    rec.selected_mae.assign(n, std::nan(""));
    if (out_dir && config.checkpoints) model.save(*out_dir / "checkpoints" / "joint.ckpt");
  } else {
    const bool any_aug = config.toggles.style_aug || config.toggles.noise_aug;
    for (std::size_t t = 0; t < n; ++t) {
      const auto stage = t == 0 ? nn::Stage::kInitial : nn::Stage::kIncremental;
      say("task " + std::to_string(t + 1) + "/" + std::to_string(n) + " (" + tasks->names[t] + ")");
      const bool aug = addp && t > 0 && any_aug;
      auto logs = train_task(model, tasks->data[t].train, static_cast<int>(t), stage, aug, ctx);
      rec.epochs.insert(rec.epochs.end(), logs.begin(), logs.end());
      if (addp) {
        proto::ExtractOptions eo;
        eo.k = config.hyper.k;
        eo.alpha = config.hyper.alpha;
        eo.seed = synth::derive_seed(config.seed, kClusterStream, t);
        eo.mae_attribution = config.hyper.mae_attribution;
        eo.hr = hr_options(config.hyper);
        proto::extract_task_prototypes(model, tasks->data[t].train, static_cast<int>(t), eo, store);
      }
      rec.style_counts.push_back(store.style().size());
      rec.noise_counts.push_back(store.noise().size());

      Simplification simp;
      if (addp && config.toggles.simplify) simp = plan_simplification(store, config.hyper.top_m);
      if (simp.candidates.empty()) {
        rec.selected.push_back(std::nullopt);
        rec.selected_mae.push_back(std::nan(""));
      } else {
        rec.selected.push_back(simp.candidates.front());
        rec.selected_mae.push_back(store.style()[simp.candidates.front()].mae.mean);
      }
      for (std::size_t j = 0; j <= t; ++j) {
        rec.matrix.set(t, j, evaluate(model, tasks->data[j].test, &store, simp, config.hyper).report);
      }
      if (out_dir) {
        if (config.checkpoints) model.save(*out_dir / "checkpoints" / ("task" + std::to_string(t + 1) + ".ckpt"));
        rec.wall_seconds = elapsed();
        write_artifacts(*out_dir, rec, store, addp);
      }
    }
  }
  fill_final_performance(rec);
  rec.wall_seconds = elapsed();
  if (out_dir) write_artifacts(*out_dir, rec, store, addp);
  return rec;
}

std::vector<RunRecord> run_ablation(const ExperimentConfig& config, const std::vector<AblationRow>& rows,
                                    const std::optional<fs::path>& out_dir, const Progress& progress,
                                    const TaskSet* tasks) {
  TaskSet owned;
  if (!tasks) {
    owned = materialize_tasks(config);
    tasks = &owned;
  }
  std::vector<RunRecord> out;
  for (const auto& row : rows) {
    ExperimentConfig c = config;
    c.method = Method::kAddp;
    c.toggles = row.toggles;
    c.ablation.clear();
    c.name = config.name + "/" + row.name;
    if (progress) progress("ablation row " + row.name);
    std::optional<fs::path> dir;
    if (out_dir) dir = *out_dir / row.name;
    out.push_back(run_dil(c, dir, progress, tasks));
  }
  return out;
}

std::string summary_table(const std::vector<RunRecord>& records) {
  std::ostringstream os;
  os << std::left << std::setw(28) << "run" << std::setw(8) << "method" << std::right;
  for (const char* m : {"Std", "MAE", "RMSE", "R"}) os << std::setw(10) << m;
  os << '\n';
  os << std::fixed;
  for (const auto& r : records) {
    os << std::left << std::setw(28) << r.name << std::setw(8) << r.method << std::right;
    for (const char* m : {"std", "mae", "rmse", "r"}) {
      const auto it = r.final_performance.find(m);
      if (it == r.final_performance.end() || std::isnan(it->second)) {
        os << std::setw(10) << "-";
      } else {
        os << std::setw(10) << std::setprecision(m[0] == 'r' && m[1] == '\0' ? 3 : 2) << it->second;
      }
    }
    os << '\n';
  }
  return os.str();
}

}  // namespace addp::protocol
