#pragma once

#include "addp/nn/tensor.hpp"

// Differentiable primitives. Every `*_backward` accumulates into the gradient
// pointers it is given (null pointers are skipped) and returns the input
// gradient, or an empty matrix when `need_dx` is false.
namespace addp::nn::ops {

// y = W x + b   (W: [out, in], b: [out, 1], x: [in, N])
Mat linear(const Mat& w, const Mat& b, const Mat& x);
Mat linear_backward(const Mat& w, const Mat& x, const Mat& dy, Mat* dw, Mat* db, bool need_dx = true);

Mat gelu(const Mat& x);
// dL/dx given x and dL/dy.
Mat gelu_backward(const Mat& x, const Mat& dy);
Real gelu_scalar(Real x);

// Depthwise 3x3x3 convolution, zero padding 1. W: [C, 27] ordered (dt, dy, dx).
Mat dwconv3(const Mat& w, const Mat& b, const Mat& x, Shape3 s);
Mat dwconv3_backward(const Mat& w, const Mat& x, const Mat& dy, Shape3 s, Mat* dw, Mat* db, bool need_dx = true);

// Non-overlapping patch convolution with kernel = stride = (kt, 2, 2). The
// temporal axis is zero-padded up to a multiple of kt; odd spatial edges drop.
// W: [out, in * kt * 4].
Shape3 patch_out_shape(Shape3 in, int kt);
Mat patch_conv(const Mat& w, const Mat& b, const Mat& x, Shape3 s, int kt);
Mat patch_conv_backward(const Mat& w, const Mat& x, const Mat& dy, Shape3 s, int kt, Mat* dw, Mat* db,
                        bool need_dx = true);

// Per-position normalization across channels.
struct LayerNormCache {
  Mat xhat;
  Eigen::Matrix<Real, 1, Eigen::Dynamic> inv_std;
};
Mat layernorm(const Mat& x, const Mat& gamma, const Mat& beta, LayerNormCache* cache, Real eps = 1e-5);
Mat layernorm_backward(const Mat& gamma, const LayerNormCache& cache, const Mat& dy, Mat* dgamma, Mat* dbeta);

// Per-channel normalization over all positions of one clip.
struct BatchNormCache {
  Mat xhat;
  Vec inv_std;
  bool batch_stats = true;
};
Mat batchnorm_train(const Mat& x, const Mat& gamma, const Mat& beta, BatchNormCache* cache, Vec* mean_out,
                    Vec* var_out, Real eps = 1e-5);
Mat batchnorm_eval(const Mat& x, const Mat& gamma, const Mat& beta, const Vec& running_mean,
                   const Vec& running_var, BatchNormCache* cache, Real eps = 1e-5);
Mat batchnorm_backward(const Mat& gamma, const BatchNormCache& cache, const Mat& dy, Mat* dgamma, Mat* dbeta);

// [C, T*H*W] -> [C, T] spatial mean, and its adjoint.
Mat spatial_mean(const Mat& x, Shape3 s);
Mat spatial_mean_backward(const Mat& dy, Shape3 s);
// x[c, t, :, :] += a[c, t]
void add_broadcast(Mat& x, const Mat& a, Shape3 s);
// adjoint of the broadcast: sums over positions within each frame
Mat sum_spatial(const Mat& dx, Shape3 s);

// Multi-head self-attention over the columns (tokens) of p: [C, T].
struct AttentionCache {
  Mat p, q, k, v, o;
  std::vector<Mat> attn;  // per head [T, T], rows = queries
};
struct AttentionWeights {
  const Mat& wq; const Mat& bq;
  const Mat& wk; const Mat& bk;
  const Mat& wv; const Mat& bv;
  const Mat& wo; const Mat& bo;
};
struct AttentionGrads {
  Mat* wq = nullptr; Mat* bq = nullptr;
  Mat* wk = nullptr; Mat* bk = nullptr;
  Mat* wv = nullptr; Mat* bv = nullptr;
  Mat* wo = nullptr; Mat* bo = nullptr;
};
Mat attention(const AttentionWeights& w, const Mat& p, int heads, AttentionCache* cache);
Mat attention_backward(const AttentionWeights& w, const AttentionCache& cache, const Mat& dy, int heads,
                       const AttentionGrads& g);

// 1-D convolution with kernel 3 and zero padding 1. W: [out, in * 3].
Mat conv1d3(const Mat& w, const Mat& b, const Mat& x);
Mat conv1d3_backward(const Mat& w, const Mat& x, const Mat& dy, Mat* dw, Mat* db, bool need_dx = true);

// Transposed 1-D convolution, kernel = stride = s. W: [out * s, in]; y: [out, L * s].
Mat conv_transpose1d(const Mat& w, const Mat& b, const Mat& x, int s);
Mat conv_transpose1d_backward(const Mat& w, const Mat& x, const Mat& dy, int s, Mat* dw, Mat* db,
                              bool need_dx = true);

}  // namespace addp::nn::ops
