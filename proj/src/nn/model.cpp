#include "addp/nn/model.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "addp/io.hpp"

namespace addp::nn {

using nlohmann::json;

namespace {

void require(bool ok, const std::string& field, const std::string& what) {
  if (!ok) throw std::invalid_argument("model." + field + ": " + what);
}

}  // namespace

void ModelConfig::validate() const {
  for (int i = 0; i < 4; ++i) {
    require(stage_channels[i] > 0, "stage_channels", "must be positive");
    require(blocks_per_stage[i] >= 0, "blocks_per_stage", "must be non-negative");
    require(temporal_strides[i] >= 1, "temporal_strides", "must be >= 1");
    if (attention_stages[i]) {
      require(stage_channels[i] % heads == 0, "heads", "must divide the channel count of attention stages");
    }
  }
  require(adapter_ratio > 0.0 && adapter_ratio <= 1.0, "adapter_ratio", "must lie in (0, 1]");
  require(mlp_ratio >= 1, "mlp_ratio", "must be >= 1");
  require(head_channels >= 1, "head_channels", "must be >= 1");
  require(heads >= 1, "heads", "must be >= 1");
}

int ModelConfig::temporal_downsampling() const {
  int s = 1;
  for (int k : temporal_strides) s *= k;
  return s;
}

void to_json(json& j, const ModelConfig& c) {
  j = json{{"stage_channels", c.stage_channels},   {"blocks_per_stage", c.blocks_per_stage},
           {"adapter_ratio", c.adapter_ratio},     {"attention_stages", c.attention_stages},
           {"temporal_strides", c.temporal_strides}, {"mlp_ratio", c.mlp_ratio},
           {"head_channels", c.head_channels},     {"heads", c.heads},
           {"seed", c.seed}};
}

void from_json(const json& j, ModelConfig& c) {
  if (!j.is_object()) throw std::invalid_argument("model: expected an object");
  static const char* known[] = {"stage_channels", "blocks_per_stage", "adapter_ratio", "attention_stages",
                                "temporal_strides", "mlp_ratio", "head_channels", "heads", "seed"};
  for (const auto& [key, _] : j.items()) {
    bool ok = false;
    for (const char* k : known) ok = ok || key == k;
    if (!ok) throw std::invalid_argument("model." + key + ": unknown field");
  }
  auto get = [&](const char* key, auto& dst) {
    if (!j.contains(key)) return;
    try {
      j.at(key).get_to(dst);
    } catch (const json::exception& e) {
      throw std::invalid_argument(std::string("model.") + key + ": " + e.what());
    }
  };
  get("stage_channels", c.stage_channels);
  get("blocks_per_stage", c.blocks_per_stage);
  get("adapter_ratio", c.adapter_ratio);
  get("attention_stages", c.attention_stages);
  get("temporal_strides", c.temporal_strides);
  get("mlp_ratio", c.mlp_ratio);
  get("head_channels", c.head_channels);
  get("heads", c.heads);
  get("seed", c.seed);
}

int bottleneck_width(int channels, double ratio) {
  return std::max(1, static_cast<int>(std::lround(ratio * channels)));
}

Eigen::Index ParameterPartition::count(const std::vector<Parameter*>& ps) const {
  Eigen::Index n = 0;
  for (const Parameter* p : ps) n += p->numel();
  return n;
}

Eigen::Index ParameterPartition::trainable_count() const {
  Eigen::Index n = 0;
  for (const auto* group : {&backbone, &adapter, &head}) {
    for (const Parameter* p : *group) {
      if (p->trainable) n += p->numel();
    }
  }
  return n;
}

Eigen::Index ParameterPartition::total_count() const { return count(backbone) + count(adapter) + count(head); }

Mat video_to_mat(const Video& v) {
  Mat x(3, static_cast<Eigen::Index>(v.channel_stride()));
  for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = v.data[static_cast<std::size_t>(i)];
  return x;
}

// --- construction -----------------------------------------------------------

Model::Model(const ModelConfig& cfg)
    : cfg_(cfg), diffnorm_(cfg.diffnorm_channels()), head_(cfg.stage_channels[3], cfg.head_channels,
                                                           cfg.temporal_downsampling()) {
  cfg_.validate();
  int in = cfg_.diffnorm_channels();
  for (int i = 0; i < 4; ++i) {
    const int c = cfg_.stage_channels[i];
    const std::string name = "stage" + std::to_string(i + 1);
    StageModule sm{PatchEmbed(name + ".embed", in, c, cfg_.temporal_strides[i]), {}};
    for (int b = 0; b < cfg_.blocks_per_stage[i]; ++b) {
      sm.blocks.emplace_back(name + ".block" + std::to_string(b + 1), c, cfg_.attention_stages[i],
                             c * cfg_.mlp_ratio, bottleneck_width(c, cfg_.adapter_ratio), cfg_.heads);
    }
    stages_.push_back(std::move(sm));
    in = c;
  }
  std::mt19937_64 rng(cfg_.seed);
  diffnorm_.init(rng);
  for (auto& sm : stages_) {
    sm.embed.init(rng);
    for (auto& b : sm.blocks) b.init(rng);
  }
  head_.init(rng);
}

std::vector<Parameter*> Model::parameters() {
  std::vector<Parameter*> out;
  diffnorm_.collect(out);
  for (auto& sm : stages_) {
    sm.embed.collect(out);
    for (auto& b : sm.blocks) b.collect(out);
  }
  head_.collect(out);
  return out;
}

std::vector<const Parameter*> Model::const_parameters() const {
  auto ps = const_cast<Model*>(this)->parameters();
  return {ps.begin(), ps.end()};
}

ParameterPartition Model::partition() {
  ParameterPartition pp;
  for (Parameter* p : parameters()) {
    switch (p->part) {
      case Partition::kBackbone: pp.backbone.push_back(p); break;
      case Partition::kAdapter: pp.adapter.push_back(p); break;
      case Partition::kHead: pp.head.push_back(p); break;
    }
  }
  return pp;
}

ParameterPartition Model::set_stage(Stage stage) {
  stage_ = stage;
  for (Parameter* p : parameters()) {
    p->trainable = stage == Stage::kInitial || p->part != Partition::kBackbone;
  }
  return partition();
}

void Model::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

std::uint64_t Model::checksum(Partition part) const {
  std::uint64_t h = io::fnv1a(nullptr, 0);
  for (const Parameter* p : const_parameters()) {
    if (p->part != part) continue;
    h = io::fnv1a(p->name.data(), p->name.size(), h);
    h = io::fnv1a(p->value.data(), sizeof(Real) * static_cast<std::size_t>(p->value.size()), h);
  }
  if (part == Partition::kBackbone) {
    h = io::fnv1a(diffnorm_.running_mean.data(), sizeof(Real) * 3, h);
    h = io::fnv1a(diffnorm_.running_var.data(), sizeof(Real) * 3, h);
  }
  return h;
}

// --- forward ----------------------------------------------------------------

Prediction Model::infer(const Video& v, const Hooks& hooks) const {
  return infer(video_to_mat(v), {v.frames, v.height, v.width}, hooks);
}

Prediction Model::infer(const Mat& x, Shape3 s, const Hooks& hooks) const {
  return run(x, s, hooks, false, nullptr);
}

Prediction Model::forward_train(const Mat& x, Shape3 s, const Hooks& hooks, Tape& tape) {
  const bool batch_stats = stage_ == Stage::kInitial;
  Prediction p = run(x, s, hooks, batch_stats, &tape);
  if (batch_stats) diffnorm_.update_running(tape.bn_mean, tape.bn_var);
  return p;
}

Prediction Model::run(const Mat& x, Shape3 s, const Hooks& hooks, bool batch_stats, Tape* tape) const {
  if (x.rows() != 3 || x.cols() != s.size()) {
    throw std::invalid_argument("model: input must be [3, T*H*W] matching its shape");
  }
  if (s.t < 2 || s.h < 16 || s.w < 16) {
    throw std::invalid_argument("model: input needs T >= 2 and H, W >= 16");
  }
  Prediction out;
  Vec mean, var;
  Feature f = diffnorm_.forward(x, s, batch_stats, tape ? &tape->diffnorm : nullptr, &mean, &var);
  if (tape) {
    tape->input_shape = s;
    tape->bn_mean = mean;
    tape->bn_var = var;
  }
  for (int i = 0; i < 4; ++i) {
    const StageModule& sm = stages_[static_cast<std::size_t>(i)];
    if (tape) {
      tape->stage_in[static_cast<std::size_t>(i)] = f;
      tape->blocks[static_cast<std::size_t>(i)].assign(sm.blocks.size(), {});
    }
    f = sm.embed.forward(f);
    for (std::size_t b = 0; b < sm.blocks.size(); ++b) {
      f = sm.blocks[b].forward(f, tape ? &tape->blocks[static_cast<std::size_t>(i)][b] : nullptr);
    }
    if (i == 1) {
      out.taps.h = f;
      if (tape) tape->styled = hooks.style();
      if (hooks.style()) {
        f.x = transfer::adain(f.x, *hooks.style_mu, *hooks.style_sigma, tape ? &tape->adain : nullptr);
      }
    }
  }
  Mat z = ops::spatial_mean(f.x, f.shape);
  out.taps.z = z;
  if (tape) {
    tape->stage4_shape = f.shape;
    tape->noised = hooks.noise != nullptr;
  }
  if (hooks.noise) z = transfer::mix_noise(z, *hooks.noise, hooks.alpha, tape ? &tape->noise : nullptr);

  const Mat y = head_.forward(z, tape ? &tape->head : nullptr);
  const int len = static_cast<int>(y.cols());
  out.pred.resize(static_cast<std::size_t>(s.t));
  for (int t = 0; t < s.t; ++t) out.pred[static_cast<std::size_t>(t)] = y(0, std::min(t, len - 1));
  if (tape) {
    tape->head_len = len;
    tape->out_len = s.t;
  }
  return out;
}

// --- backward ---------------------------------------------------------------

namespace {

bool any_trainable(const std::vector<Parameter*>& ps) {
  for (const Parameter* p : ps) {
    if (p->trainable) return true;
  }
  return false;
}

}  // namespace

Mat Model::backward(const Tape& tape, const std::vector<double>& dpred, bool need_input_grad) {
  if (static_cast<int>(dpred.size()) != tape.out_len) throw std::invalid_argument("backward: gradient length");

  // needs[k]: whether anything upstream of module k wants a gradient.
  // Modules in order: diffnorm, then per stage the embed and each block.
  std::vector<std::vector<Parameter*>> modules;
  {
    std::vector<Parameter*> ps;
    diffnorm_.collect(ps);
    modules.push_back(ps);
    for (auto& sm : stages_) {
      ps.clear();
      sm.embed.collect(ps);
      modules.push_back(ps);
      for (auto& b : sm.blocks) {
        ps.clear();
        b.collect(ps);
        modules.push_back(ps);
      }
    }
  }
  std::vector<bool> upstream(modules.size() + 1);
  upstream[0] = need_input_grad;
  for (std::size_t k = 0; k < modules.size(); ++k) upstream[k + 1] = upstream[k] || any_trainable(modules[k]);
  if (!upstream[modules.size()]) {
    // Nothing before the head needs a gradient.
    Mat dy = Mat::Zero(1, tape.head_len);
    for (int t = 0; t < tape.out_len; ++t) dy(0, std::min(t, tape.head_len - 1)) += dpred[static_cast<std::size_t>(t)];
    head_.backward(tape.head, dy, false);
    return {};
  }

  Mat dy = Mat::Zero(1, tape.head_len);
  for (int t = 0; t < tape.out_len; ++t) dy(0, std::min(t, tape.head_len - 1)) += dpred[static_cast<std::size_t>(t)];
  Mat dz = head_.backward(tape.head, dy, true);
  if (tape.noised) dz = transfer::mix_noise_backward(tape.noise, dz);
  Mat g = ops::spatial_mean_backward(dz, tape.stage4_shape);

  std::size_t k = modules.size();
  for (int i = 3; i >= 0; --i) {
    StageModule& sm = stages_[static_cast<std::size_t>(i)];
    const auto& caches = tape.blocks[static_cast<std::size_t>(i)];
    if (i == 1 && tape.styled) g = transfer::adain_backward(tape.adain, g);
    for (std::size_t b = sm.blocks.size(); b-- > 0;) {
      --k;
      g = sm.blocks[b].backward(caches[b], g, upstream[k]);
      if (!upstream[k]) return {};
    }
    --k;
    g = sm.embed.backward(tape.stage_in[static_cast<std::size_t>(i)], g, upstream[k]);
    if (!upstream[k]) return {};
  }
  return diffnorm_.backward(tape.diffnorm, g, need_input_grad);
}

// --- checkpoints ------------------------------------------------------------

void Model::save(const std::filesystem::path& path) const {
  io::Archive ar;
  ar.meta["config"] = cfg_;
  ar.meta["stage"] = stage_ == Stage::kInitial ? "initial" : "incremental";
  for (const Parameter* p : const_parameters()) {
    io::NdArray a;
    a.shape.assign(p->shape.begin(), p->shape.end());
    a.data.assign(p->value.data(), p->value.data() + p->value.size());
    ar.put(p->name, std::move(a), json{{"partition", partition_name(p->part)}});
  }
  for (const auto& [name, v] : {std::pair{"diffnorm.bn.running_mean", &diffnorm_.running_mean},
                                std::pair{"diffnorm.bn.running_var", &diffnorm_.running_var}}) {
    io::NdArray a;
    a.shape = {static_cast<std::size_t>(v->size())};
    a.data.assign(v->data(), v->data() + v->size());
    ar.put(name, std::move(a), json{{"partition", "backbone"}});
  }
  io::write_archive(path, ar);
}

std::unique_ptr<Model> Model::load(const std::filesystem::path& path) {
  const io::Archive ar = io::read_archive(path);
  auto m = std::make_unique<Model>(ar.meta.at("config").get<ModelConfig>());
  for (Parameter* p : m->parameters()) {
    const io::NdArray& a = ar.get(p->name);
    if (a.numel() != static_cast<std::size_t>(p->value.size())) {
      throw std::runtime_error("checkpoint: size mismatch for " + p->name);
    }
    std::copy(a.data.begin(), a.data.end(), p->value.data());
  }
  const auto& rm = ar.get("diffnorm.bn.running_mean").data;
  const auto& rv = ar.get("diffnorm.bn.running_var").data;
  if (rm.size() != 3 || rv.size() != 3) throw std::runtime_error("checkpoint: bad running statistics");
  std::copy(rm.begin(), rm.end(), m->diffnorm_.running_mean.data());
  std::copy(rv.begin(), rv.end(), m->diffnorm_.running_var.data());
  m->set_stage(ar.meta.at("stage") == "initial" ? Stage::kInitial : Stage::kIncremental);
  return m;
}

}  // namespace addp::nn
