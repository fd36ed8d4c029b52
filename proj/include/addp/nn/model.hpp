#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <vector>

#include "addp/nn/layers.hpp"
#include "addp/transfer.hpp"
#include "addp/video.hpp"
#include "json.hpp"

namespace addp::nn {

struct ModelConfig {
  std::array<int, 4> stage_channels{16, 32, 64, 64};
  std::array<int, 4> blocks_per_stage{1, 1, 1, 1};
  double adapter_ratio = 0.25;
  std::array<bool, 4> attention_stages{false, false, true, true};
  std::array<int, 4> temporal_strides{2, 1, 2, 1};
  int mlp_ratio = 4;
  int head_channels = 32;
  int heads = 2;
  std::uint64_t seed = 0;

  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  int diffnorm_channels() const { return stage_channels[0]; }
  int temporal_downsampling() const;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

int bottleneck_width(int channels, double ratio);

enum class Stage { kInitial, kIncremental };

struct ParameterPartition {
  std::vector<Parameter*> backbone;
  std::vector<Parameter*> adapter;
  std::vector<Parameter*> head;

  Eigen::Index count(const std::vector<Parameter*>& ps) const;
  Eigen::Index trainable_count() const;
  Eigen::Index total_count() const;
};

/// Optional feature substitutions applied at the taps.
struct Hooks {
  // AdaIN target for the stage-2 output.
  const Vec* style_mu = nullptr;
  const Vec* style_sigma = nullptr;
  // Noise prototype mixed into the pooled stage-4 feature.
  const Mat* noise = nullptr;
  int alpha = 0;

  bool style() const { return style_mu != nullptr; }
};

/// Features seen before any hook is applied.
struct FeatureTaps {
  Feature h;  // stage-2 output [C1, T1*H1*W1]
  Mat z;      // pooled stage-4 output [C2, T2]
};

struct Prediction {
  std::vector<double> pred;  // length T
  FeatureTaps taps;
};

class Model {
 public:
  explicit Model(const ModelConfig& cfg);
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }

  /// Evaluation-mode forward (running normalization statistics).
  Prediction infer(const Video& v, const Hooks& hooks = {}) const;
  Prediction infer(const Mat& x, Shape3 s, const Hooks& hooks = {}) const;

  struct Tape;
  /// Training forward. Uses per-clip normalization statistics (and updates the
  /// running ones) only in the initial stage.
  Prediction forward_train(const Mat& x, Shape3 s, const Hooks& hooks, Tape& tape);
  /// Accumulates parameter gradients for dL/dpred. Returns dL/dx when asked.
  Mat backward(const Tape& tape, const std::vector<double>& dpred, bool need_input_grad = false);

  ParameterPartition set_stage(Stage stage);
  Stage stage() const { return stage_; }
  ParameterPartition partition();
  std::vector<Parameter*> parameters();
  void zero_grad();

  /// FNV-1a digest over the raw bytes of every parameter in a partition
  /// (and the normalization running statistics for the backbone).
  std::uint64_t checksum(Partition part) const;

  void save(const std::filesystem::path& path) const;
  static std::unique_ptr<Model> load(const std::filesystem::path& path);

  DiffNorm& diffnorm() { return diffnorm_; }

 private:
  struct StageModule {
    PatchEmbed embed;
    std::vector<Block> blocks;
  };

  Prediction run(const Mat& x, Shape3 s, const Hooks& hooks, bool batch_stats, Tape* tape) const;
  std::vector<const Parameter*> const_parameters() const;

  ModelConfig cfg_;
  Stage stage_ = Stage::kInitial;
  DiffNorm diffnorm_;
  std::vector<StageModule> stages_;
  Head head_;
};

struct Model::Tape {
  Shape3 input_shape;
  DiffNorm::Cache diffnorm;
  Vec bn_mean, bn_var;
  std::array<Feature, 4> stage_in;                 // patch-embed inputs
  std::array<std::vector<Block::Cache>, 4> blocks;
  bool styled = false;
  transfer::AdainCache adain;
  Shape3 stage4_shape;
  bool noised = false;
  transfer::NoiseMixCache noise;
  Head::Cache head;
  int head_len = 0;
  int out_len = 0;
};

Mat video_to_mat(const Video& v);

}  // namespace addp::nn
