#include "addp/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace addp::nn::ops {

Mat linear(const Mat& w, const Mat& b, const Mat& x) {
  Mat y = w * x;
  y.colwise() += b.col(0);
  return y;
}

Mat linear_backward(const Mat& w, const Mat& x, const Mat& dy, Mat* dw, Mat* db, bool need_dx) {
  if (dw) dw->noalias() += dy * x.transpose();
  if (db) db->col(0) += dy.rowwise().sum();
  if (!need_dx) return {};
  return w.transpose() * dy;
}

constexpr Real kInvSqrt2 = 0.7071067811865476;

Real gelu_scalar(Real x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); }

Mat gelu(const Mat& x) {
  return x.unaryExpr([](Real v) { return gelu_scalar(v); });
}

Mat gelu_backward(const Mat& x, const Mat& dy) {
  constexpr Real inv_sqrt_2pi = 0.3989422804014327;
  return x.binaryExpr(dy, [](Real v, Real g) {
    const Real cdf = 0.5 * (1.0 + std::erf(v * kInvSqrt2));
    const Real pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
    return g * (cdf + v * pdf);
  });
}

namespace {

// Visits the valid (output, input) ranges for one kernel tap of a 3x3x3
// same-padded convolution. f(out_offset, in_offset, count) covers one row run.
template <typename F>
void for_tap_rows(Shape3 s, int dt, int dy, int dx, F&& f) {
  const int t0 = std::max(0, -dt), t1 = std::min(s.t, s.t - dt);
  const int y0 = std::max(0, -dy), y1 = std::min(s.h, s.h - dy);
  const int x0 = std::max(0, -dx), x1 = std::min(s.w, s.w - dx);
  if (x1 <= x0) return;
  for (int t = t0; t < t1; ++t) {
    for (int y = y0; y < y1; ++y) {
      const int o = (t * s.h + y) * s.w + x0;
      const int i = ((t + dt) * s.h + (y + dy)) * s.w + (x0 + dx);
      f(o, i, x1 - x0);
    }
  }
}

}  // namespace

Mat dwconv3(const Mat& w, const Mat& b, const Mat& x, Shape3 s) {
  const Eigen::Index C = x.rows();
  Mat y(C, x.cols());
  for (Eigen::Index c = 0; c < C; ++c) {
    Real* out = y.row(c).data();
    const Real* in = x.row(c).data();
    std::fill(out, out + x.cols(), b(c, 0));
    int k = 0;
    for (int dt = -1; dt <= 1; ++dt)
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx, ++k) {
          const Real wk = w(c, k);
          for_tap_rows(s, dt, dy, dx, [&](int o, int i, int n) {
            for (int j = 0; j < n; ++j) out[o + j] += wk * in[i + j];
          });
        }
  }
  return y;
}

Mat dwconv3_backward(const Mat& w, const Mat& x, const Mat& dy, Shape3 s, Mat* dw, Mat* db, bool need_dx) {
  const Eigen::Index C = x.rows();
  Mat dx;
  if (need_dx) dx = Mat::Zero(C, x.cols());
  if (db) db->col(0) += dy.rowwise().sum();
  for (Eigen::Index c = 0; c < C; ++c) {
    const Real* g = dy.row(c).data();
    const Real* in = x.row(c).data();
    Real* din = need_dx ? dx.row(c).data() : nullptr;
    int k = 0;
    for (int dt = -1; dt <= 1; ++dt)
      for (int ddy = -1; ddy <= 1; ++ddy)
        for (int ddx = -1; ddx <= 1; ++ddx, ++k) {
          const Real wk = w(c, k);
          Real acc = 0.0;
          for_tap_rows(s, dt, ddy, ddx, [&](int o, int i, int n) {
            if (dw) {
              for (int j = 0; j < n; ++j) acc += g[o + j] * in[i + j];
            }
            if (din) {
              for (int j = 0; j < n; ++j) din[i + j] += wk * g[o + j];
            }
          });
          if (dw) (*dw)(c, k) += acc;
        }
  }
  return dx;
}

Shape3 patch_out_shape(Shape3 in, int kt) { return {(in.t + kt - 1) / kt, in.h / 2, in.w / 2}; }

namespace {

Mat patch_im2col(const Mat& x, Shape3 s, int kt) {
  const Shape3 o = patch_out_shape(s, kt);
  const Eigen::Index cin = x.rows();
  Mat cols = Mat::Zero(cin * kt * 4, o.size());
  for (Eigen::Index ci = 0; ci < cin; ++ci) {
    const Real* in = x.row(ci).data();
    for (int a = 0; a < kt; ++a)
      for (int b = 0; b < 2; ++b)
        for (int d = 0; d < 2; ++d) {
          Real* row = cols.row(((ci * kt + a) * 2 + b) * 2 + d).data();
          for (int ot = 0; ot < o.t; ++ot) {
            const int it = ot * kt + a;
            if (it >= s.t) continue;
            for (int oy = 0; oy < o.h; ++oy) {
              const Real* src = in + (it * s.h + 2 * oy + b) * s.w + d;
              Real* dst = row + (ot * o.h + oy) * o.w;
              for (int ox = 0; ox < o.w; ++ox) dst[ox] = src[2 * ox];
            }
          }
        }
  }
  return cols;
}

}  // namespace

Mat patch_conv(const Mat& w, const Mat& b, const Mat& x, Shape3 s, int kt) {
  return linear(w, b, patch_im2col(x, s, kt));
}

Mat patch_conv_backward(const Mat& w, const Mat& x, const Mat& dy, Shape3 s, int kt, Mat* dw, Mat* db,
                        bool need_dx) {
  if (dw) dw->noalias() += dy * patch_im2col(x, s, kt).transpose();
  if (db) db->col(0) += dy.rowwise().sum();
  if (!need_dx) return {};
  const Shape3 o = patch_out_shape(s, kt);
  const Mat dcols = w.transpose() * dy;
  const Eigen::Index cin = x.rows();
  Mat dx = Mat::Zero(cin, x.cols());
  for (Eigen::Index ci = 0; ci < cin; ++ci) {
    Real* din = dx.row(ci).data();
    for (int a = 0; a < kt; ++a)
      for (int b = 0; b < 2; ++b)
        for (int d = 0; d < 2; ++d) {
          const Real* row = dcols.row(((ci * kt + a) * 2 + b) * 2 + d).data();
          for (int ot = 0; ot < o.t; ++ot) {
            const int it = ot * kt + a;
            if (it >= s.t) continue;
            for (int oy = 0; oy < o.h; ++oy) {
              Real* dst = din + (it * s.h + 2 * oy + b) * s.w + d;
              const Real* src = row + (ot * o.h + oy) * o.w;
              for (int ox = 0; ox < o.w; ++ox) dst[2 * ox] += src[ox];
            }
          }
        }
  }
  return dx;
}

Mat layernorm(const Mat& x, const Mat& gamma, const Mat& beta, LayerNormCache* cache, Real eps) {
  const Real c = static_cast<Real>(x.rows());
  const Eigen::Matrix<Real, 1, Eigen::Dynamic> mean = x.colwise().sum() / c;
  Mat xc = x.rowwise() - mean;
  const Eigen::Matrix<Real, 1, Eigen::Dynamic> inv_std =
      ((xc.array().square().colwise().sum() / c) + eps).sqrt().inverse().matrix();
  xc.array().rowwise() *= inv_std.array();
  Mat y = xc;
  y.array().colwise() *= gamma.col(0).array();
  y.colwise() += beta.col(0);
  if (cache) {
    cache->xhat = std::move(xc);
    cache->inv_std = inv_std;
  }
  return y;
}

Mat layernorm_backward(const Mat& gamma, const LayerNormCache& cache, const Mat& dy, Mat* dgamma, Mat* dbeta) {
  if (dgamma) dgamma->col(0) += dy.cwiseProduct(cache.xhat).rowwise().sum();
  if (dbeta) dbeta->col(0) += dy.rowwise().sum();
  const Real c = static_cast<Real>(dy.rows());
  Mat dxhat = dy;
  dxhat.array().colwise() *= gamma.col(0).array();
  const Eigen::Matrix<Real, 1, Eigen::Dynamic> s1 = dxhat.colwise().sum();
  const Eigen::Matrix<Real, 1, Eigen::Dynamic> s2 = dxhat.cwiseProduct(cache.xhat).colwise().sum();
  Mat dx = dxhat * c;
  dx.rowwise() -= s1;
  Mat proj = cache.xhat;
  proj.array().rowwise() *= s2.array();
  dx -= proj;
  dx.array().rowwise() *= (cache.inv_std.array() / c);
  return dx;
}

Mat batchnorm_train(const Mat& x, const Mat& gamma, const Mat& beta, BatchNormCache* cache, Vec* mean_out,
                    Vec* var_out, Real eps) {
  const Real n = static_cast<Real>(x.cols());
  const Vec mean = x.rowwise().sum() / n;
  Mat xc = x.colwise() - mean;
  const Vec var = xc.array().square().rowwise().sum() / n;
  const Vec inv_std = (var.array() + eps).sqrt().inverse().matrix();
  xc.array().colwise() *= inv_std.array();
  Mat y = xc;
  y.array().colwise() *= gamma.col(0).array();
  y.colwise() += beta.col(0);
  if (cache) {
    cache->xhat = std::move(xc);
    cache->inv_std = inv_std;
    cache->batch_stats = true;
  }
  if (mean_out) *mean_out = mean;
  if (var_out) *var_out = var;
  return y;
}

Mat batchnorm_eval(const Mat& x, const Mat& gamma, const Mat& beta, const Vec& running_mean,
                   const Vec& running_var, BatchNormCache* cache, Real eps) {
  const Vec inv_std = (running_var.array() + eps).sqrt().inverse().matrix();
  Mat xhat = x.colwise() - running_mean;
  xhat.array().colwise() *= inv_std.array();
  Mat y = xhat;
  y.array().colwise() *= gamma.col(0).array();
  y.colwise() += beta.col(0);
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_std = inv_std;
    cache->batch_stats = false;
  }
  return y;
}

Mat batchnorm_backward(const Mat& gamma, const BatchNormCache& cache, const Mat& dy, Mat* dgamma, Mat* dbeta) {
  if (dgamma) dgamma->col(0) += dy.cwiseProduct(cache.xhat).rowwise().sum();
  if (dbeta) dbeta->col(0) += dy.rowwise().sum();
  Mat dxhat = dy;
  dxhat.array().colwise() *= gamma.col(0).array();
  if (!cache.batch_stats) {
    dxhat.array().colwise() *= cache.inv_std.array();
    return dxhat;
  }
  const Real n = static_cast<Real>(dy.cols());
  const Vec s1 = dxhat.rowwise().sum();
  const Vec s2 = dxhat.cwiseProduct(cache.xhat).rowwise().sum();
  Mat dx = dxhat * n;
  dx.colwise() -= s1;
  Mat proj = cache.xhat;
  proj.array().colwise() *= s2.array();
  dx -= proj;
  dx.array().colwise() *= (cache.inv_std.array() / n);
  return dx;
}

Mat spatial_mean(const Mat& x, Shape3 s) {
  const int p = s.plane();
  Mat y(x.rows(), s.t);
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    const Real* in = x.row(c).data();
    for (int t = 0; t < s.t; ++t) {
      Real acc = 0.0;
      for (int i = 0; i < p; ++i) acc += in[t * p + i];
      y(c, t) = acc / p;
    }
  }
  return y;
}

Mat spatial_mean_backward(const Mat& dy, Shape3 s) {
  const int p = s.plane();
  Mat dx(dy.rows(), s.size());
  for (Eigen::Index c = 0; c < dy.rows(); ++c) {
    Real* out = dx.row(c).data();
    for (int t = 0; t < s.t; ++t) std::fill(out + t * p, out + (t + 1) * p, dy(c, t) / p);
  }
  return dx;
}

void add_broadcast(Mat& x, const Mat& a, Shape3 s) {
  const int p = s.plane();
  for (Eigen::Index c = 0; c < x.rows(); ++c) {
    Real* out = x.row(c).data();
    for (int t = 0; t < s.t; ++t) {
      const Real v = a(c, t);
      for (int i = 0; i < p; ++i) out[t * p + i] += v;
    }
  }
}

Mat sum_spatial(const Mat& dx, Shape3 s) {
  Mat m = spatial_mean(dx, s);
  return m * static_cast<Real>(s.plane());
}

namespace {

void softmax_rows(Mat& m) {
  for (Eigen::Index i = 0; i < m.rows(); ++i) {
    auto row = m.row(i);
    const Real mx = row.maxCoeff();
    row = (row.array() - mx).exp().matrix();
    row /= row.sum();
  }
}

}  // namespace

Mat attention(const AttentionWeights& w, const Mat& p, int heads, AttentionCache* cache) {
  const Eigen::Index C = p.rows();
  if (heads < 1 || C % heads != 0) throw std::invalid_argument("attention: channels must divide by heads");
  const Eigen::Index d = C / heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(d));
  Mat q = linear(w.wq, w.bq, p);
  Mat k = linear(w.wk, w.bk, p);
  Mat v = linear(w.wv, w.bv, p);
  Mat o(C, p.cols());
  std::vector<Mat> attn;
  for (int h = 0; h < heads; ++h) {
    Mat a = (q.middleRows(h * d, d).transpose() * k.middleRows(h * d, d)) * scale;
    softmax_rows(a);
    o.middleRows(h * d, d).noalias() = v.middleRows(h * d, d) * a.transpose();
    attn.push_back(std::move(a));
  }
  Mat y = linear(w.wo, w.bo, o);
  if (cache) {
    cache->p = p;
    cache->q = std::move(q);
    cache->k = std::move(k);
    cache->v = std::move(v);
    cache->o = std::move(o);
    cache->attn = std::move(attn);
  }
  return y;
}

Mat attention_backward(const AttentionWeights& w, const AttentionCache& cache, const Mat& dy, int heads,
                       const AttentionGrads& g) {
  const Eigen::Index C = cache.p.rows();
  const Eigen::Index d = C / heads;
  const Real scale = 1.0 / std::sqrt(static_cast<Real>(d));
  const Mat dout = linear_backward(w.wo, cache.o, dy, g.wo, g.bo, true);
  Mat dq(C, cache.p.cols()), dk(C, cache.p.cols()), dv(C, cache.p.cols());
  for (int h = 0; h < heads; ++h) {
    const Mat& a = cache.attn[h];
    const auto doh = dout.middleRows(h * d, d);
    const auto vh = cache.v.middleRows(h * d, d);
    dv.middleRows(h * d, d).noalias() = doh * a;
    const Mat da = doh.transpose() * vh;
    Mat ds = a.cwiseProduct(da);
    const Vec rs = ds.rowwise().sum();
    Mat proj = a;
    proj.array().colwise() *= rs.array();
    ds -= proj;
    dq.middleRows(h * d, d).noalias() = scale * (cache.k.middleRows(h * d, d) * ds.transpose());
    dk.middleRows(h * d, d).noalias() = scale * (cache.q.middleRows(h * d, d) * ds);
  }
  Mat dp = linear_backward(w.wq, cache.p, dq, g.wq, g.bq, true);
  dp += linear_backward(w.wk, cache.p, dk, g.wk, g.bk, true);
  dp += linear_backward(w.wv, cache.p, dv, g.wv, g.bv, true);
  return dp;
}

namespace {

Mat conv1d3_im2col(const Mat& x) {
  const Eigen::Index cin = x.rows(), L = x.cols();
  Mat cols = Mat::Zero(cin * 3, L);
  for (Eigen::Index c = 0; c < cin; ++c) {
    cols.row(c * 3 + 0).segment(1, L - 1) = x.row(c).segment(0, L - 1);
    cols.row(c * 3 + 1) = x.row(c);
    cols.row(c * 3 + 2).segment(0, L - 1) = x.row(c).segment(1, L - 1);
  }
  return cols;
}

}  // namespace

Mat conv1d3(const Mat& w, const Mat& b, const Mat& x) { return linear(w, b, conv1d3_im2col(x)); }

Mat conv1d3_backward(const Mat& w, const Mat& x, const Mat& dy, Mat* dw, Mat* db, bool need_dx) {
  if (dw) dw->noalias() += dy * conv1d3_im2col(x).transpose();
  if (db) db->col(0) += dy.rowwise().sum();
  if (!need_dx) return {};
  const Mat dcols = w.transpose() * dy;
  const Eigen::Index cin = x.rows(), L = x.cols();
  Mat dx = Mat::Zero(cin, L);
  for (Eigen::Index c = 0; c < cin; ++c) {
    dx.row(c).segment(0, L - 1) += dcols.row(c * 3 + 0).segment(1, L - 1);
    dx.row(c) += dcols.row(c * 3 + 1);
    dx.row(c).segment(1, L - 1) += dcols.row(c * 3 + 2).segment(0, L - 1);
  }
  return dx;
}

Mat conv_transpose1d(const Mat& w, const Mat& b, const Mat& x, int s) {
  const Mat z = w * x;  // [out*s, L]
  const Eigen::Index out = z.rows() / s, L = x.cols();
  Mat y(out, L * s);
  for (Eigen::Index co = 0; co < out; ++co)
    for (Eigen::Index l = 0; l < L; ++l)
      for (int a = 0; a < s; ++a) y(co, l * s + a) = z(co * s + a, l) + b(co, 0);
  return y;
}

Mat conv_transpose1d_backward(const Mat& w, const Mat& x, const Mat& dy, int s, Mat* dw, Mat* db, bool need_dx) {
  const Eigen::Index out = dy.rows(), L = x.cols();
  Mat dz(out * s, L);
  for (Eigen::Index co = 0; co < out; ++co)
    for (Eigen::Index l = 0; l < L; ++l)
      for (int a = 0; a < s; ++a) dz(co * s + a, l) = dy(co, l * s + a);
  if (dw) dw->noalias() += dz * x.transpose();
  if (db) db->col(0) += dy.rowwise().sum();
  if (!need_dx) return {};
  return w.transpose() * dz;
}

}  // namespace addp::nn::ops
