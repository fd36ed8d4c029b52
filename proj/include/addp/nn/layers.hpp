#pragma once

#include <random>
#include <string>
#include <vector>

#include "addp/nn/ops.hpp"
#include "addp/nn/tensor.hpp"

namespace addp::nn {

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialization.
void init_uniform(Parameter& p, int fan_in, std::mt19937_64& rng);

inline Mat* grad_of(Parameter& p) { return p.trainable ? &p.grad : nullptr; }

/// Input module: frames concatenated with batch-normalized frame differences,
/// fused by a 1x1x1 convolution. Output has T-1 frames.
class DiffNorm {
 public:
  explicit DiffNorm(int out_channels);

  struct Cache {
    Shape3 in_shape;
    Mat cat;
    ops::BatchNormCache bn;
  };

  /// `x` is [3, T*H*W]. With `batch_stats` the difference branch is normalized
  /// by this clip's statistics (written to mean/var when given), otherwise by
  /// the running statistics.
  Feature forward(const Mat& x, Shape3 s, bool batch_stats, Cache* cache, Vec* mean = nullptr,
                  Vec* var = nullptr) const;
  Mat backward(const Cache& cache, const Mat& dy, bool need_dx);

  void update_running(const Vec& mean, const Vec& var);
  void collect(std::vector<Parameter*>& out);
  void init(std::mt19937_64& rng);

  Parameter bn_gamma, bn_beta, conv_w, conv_b;
  Vec running_mean, running_var;
  Real momentum = 0.1;
};

/// Stage entry: patch convolution, kernel = stride = (kt, 2, 2).
class PatchEmbed {
 public:
  PatchEmbed(std::string name, int in_channels, int out_channels, int temporal_stride);

  Feature forward(const Feature& x) const;
  Mat backward(const Feature& x, const Mat& dy, bool need_dx);
  void collect(std::vector<Parameter*>& out);
  void init(std::mt19937_64& rng);

  int kt;
  Parameter w, b;
};

/// Parallel bottleneck adapter: W_up(GELU(W_down x)), no inner skip.
class Adapter {
 public:
  Adapter(std::string name, int channels, int bottleneck);

  struct Cache {
    Mat x, hidden;
  };
  Mat forward(const Mat& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dy, bool need_dx);
  void collect(std::vector<Parameter*>& out);
  void init(std::mt19937_64& rng);

  Parameter down_w, down_b, up_w, up_b;
};

/// Two-layer GELU MLP.
class Mlp {
 public:
  Mlp(std::string name, int channels, int hidden);

  struct Cache {
    Mat x, hidden;
  };
  Mat forward(const Mat& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dy, bool need_dx);
  void collect(std::vector<Parameter*>& out);
  void init(std::mt19937_64& rng);

  Parameter fc1_w, fc1_b, fc2_w, fc2_b;
};

/// Temporal self-attention over spatially pooled tokens; the result is
/// broadcast back to every spatial position.
class TemporalAttention {
 public:
  TemporalAttention(std::string name, int channels, int heads);

  struct Cache {
    Shape3 shape;
    ops::AttentionCache attn;
  };
  /// x: [C, T*H*W] -> [C, T] update to broadcast over space.
  Mat forward(const Mat& x, Shape3 s, Cache* cache) const;
  /// dy: [C, T] gradient of the (pre-broadcast) output.
  Mat backward(const Cache& cache, const Mat& dy, bool need_dx);
  void collect(std::vector<Parameter*>& out);
  void init(std::mt19937_64& rng);

  int heads;
  Parameter wq, bq, wk, bk, wv, bv, wo, bo;

 private:
  ops::AttentionWeights weights() const;
};

/// One block: x += DPE(x); x += Mixer(LN1 x); x += FFN(LN2 x) + Adapter(LN2 x).
/// The mixer is pointwise -> depthwise 3x3x3 -> pointwise convolution, or
/// temporal attention for global stages.
class Block {
 public:
  Block(std::string name, int channels, bool attention, int mlp_hidden, int bottleneck, int heads);

  struct Cache {
    Shape3 shape;
    Mat x0, x1;
    ops::LayerNormCache ln1, ln2;
    Mat y1;
    Mat a, b;  // conv mixer intermediates
    TemporalAttention::Cache attn;
    Mlp::Cache mlp;
    Adapter::Cache adapter;
  };

  Feature forward(const Feature& x, Cache* cache) const;
  Mat backward(const Cache& cache, const Mat& dy, bool need_dx);
  void collect(std::vector<Parameter*>& out);
  void init(std::mt19937_64& rng);

  bool attention;
  Parameter dpe_w, dpe_b, ln1_g, ln1_b, ln2_g, ln2_b;
  Parameter pw1_w, pw1_b, dw_w, dw_b, pw2_w, pw2_b;
  TemporalAttention attn;
  Mlp mlp;
  Adapter adapter;
};

/// Regression head: transposed temporal convolution, then two kernel-3
/// convolutions down to one channel.
class Head {
 public:
  Head(int in_channels, int hidden, int stride);

  struct Cache {
    Mat z, u, ug, c1, c1g;
  };
  Mat forward(const Mat& z, Cache* cache) const;  // [1, L * stride]
  Mat backward(const Cache& cache, const Mat& dy, bool need_dx);
  void collect(std::vector<Parameter*>& out);
  void init(std::mt19937_64& rng);

  int stride;
  Parameter up_w, up_b, c1_w, c1_b, c2_w, c2_b;
};

}  // namespace addp::nn
