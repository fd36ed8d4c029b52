#include "addp/nn/layers.hpp"

#include <cmath>
#include <stdexcept>

namespace addp::nn {

const char* partition_name(Partition p) {
  switch (p) {
    case Partition::kBackbone: return "backbone";
    case Partition::kAdapter: return "adapter";
    case Partition::kHead: return "head";
  }
  return "?";
}

Partition partition_from_name(const std::string& s) {
  if (s == "backbone") return Partition::kBackbone;
  if (s == "adapter") return Partition::kAdapter;
  if (s == "head") return Partition::kHead;
  throw std::invalid_argument("unknown partition: " + s);
}

void init_uniform(Parameter& p, int fan_in, std::mt19937_64& rng) {
  const Real bound = 1.0 / std::sqrt(static_cast<Real>(fan_in));
  std::uniform_real_distribution<Real> dist(-bound, bound);
  for (Eigen::Index i = 0; i < p.value.size(); ++i) p.value.data()[i] = dist(rng);
}

namespace {

Parameter ones(std::string name, Partition part, int n) {
  Parameter p(std::move(name), part, {n}, n, 1);
  p.value.setOnes();
  return p;
}

Parameter zeros(std::string name, Partition part, int n) { return Parameter(std::move(name), part, {n}, n, 1); }

}  // namespace

// --- DiffNorm ---------------------------------------------------------------

DiffNorm::DiffNorm(int out_channels)
    : bn_gamma(ones("diffnorm.bn.gamma", Partition::kBackbone, 3)),
      bn_beta(zeros("diffnorm.bn.beta", Partition::kBackbone, 3)),
      conv_w("diffnorm.conv.w", Partition::kBackbone, {out_channels, 6, 1, 1, 1}, out_channels, 6),
      conv_b(zeros("diffnorm.conv.b", Partition::kBackbone, out_channels)),
      running_mean(Vec::Zero(3)),
      running_var(Vec::Ones(3)) {}

Feature DiffNorm::forward(const Mat& x, Shape3 s, bool batch_stats, Cache* cache, Vec* mean, Vec* var) const {
  if (s.t < 2) throw std::invalid_argument("diffnorm: need at least 2 frames");
  const Eigen::Index p = s.plane();
  const Eigen::Index n = static_cast<Eigen::Index>(s.t - 1) * p;
  Mat cat(6, n);
  cat.topRows(3) = x.leftCols(n);
  const Mat diff = x.rightCols(n) - x.leftCols(n);
  ops::BatchNormCache bn;
  if (batch_stats) {
    cat.bottomRows(3) = ops::batchnorm_train(diff, bn_gamma.value, bn_beta.value, &bn, mean, var);
  } else {
    cat.bottomRows(3) = ops::batchnorm_eval(diff, bn_gamma.value, bn_beta.value, running_mean, running_var, &bn);
  }
  Feature out{ops::linear(conv_w.value, conv_b.value, cat), {s.t - 1, s.h, s.w}};
  if (cache) {
    cache->in_shape = s;
    cache->cat = std::move(cat);
    cache->bn = std::move(bn);
  }
  return out;
}

Mat DiffNorm::backward(const Cache& cache, const Mat& dy, bool need_dx) {
  const bool need_cat = need_dx || bn_gamma.trainable || bn_beta.trainable;
  const Mat dcat = ops::linear_backward(conv_w.value, cache.cat, dy, grad_of(conv_w), grad_of(conv_b), need_cat);
  if (!need_cat) return {};
  const Mat ddiff =
      ops::batchnorm_backward(bn_gamma.value, cache.bn, dcat.bottomRows(3), grad_of(bn_gamma), grad_of(bn_beta));
  if (!need_dx) return {};
  const Eigen::Index p = cache.in_shape.plane();
  const Eigen::Index n = static_cast<Eigen::Index>(cache.in_shape.t - 1) * p;
  Mat dx = Mat::Zero(3, static_cast<Eigen::Index>(cache.in_shape.t) * p);
  dx.leftCols(n) += dcat.topRows(3) - ddiff;
  dx.rightCols(n) += ddiff;
  return dx;
}

void DiffNorm::update_running(const Vec& mean, const Vec& var) {
  running_mean = (1.0 - momentum) * running_mean + momentum * mean;
  running_var = (1.0 - momentum) * running_var + momentum * var;
}

void DiffNorm::collect(std::vector<Parameter*>& out) {
  out.insert(out.end(), {&bn_gamma, &bn_beta, &conv_w, &conv_b});
}

void DiffNorm::init(std::mt19937_64& rng) {
  init_uniform(conv_w, 6, rng);
  init_uniform(conv_b, 6, rng);
}

// --- PatchEmbed -------------------------------------------------------------

PatchEmbed::PatchEmbed(std::string name, int in_channels, int out_channels, int temporal_stride)
    : kt(temporal_stride),
      w(name + ".w", Partition::kBackbone, {out_channels, in_channels, temporal_stride, 2, 2}, out_channels,
        in_channels * temporal_stride * 4),
      b(zeros(name + ".b", Partition::kBackbone, out_channels)) {}

Feature PatchEmbed::forward(const Feature& x) const {
  return {ops::patch_conv(w.value, b.value, x.x, x.shape, kt), ops::patch_out_shape(x.shape, kt)};
}

Mat PatchEmbed::backward(const Feature& x, const Mat& dy, bool need_dx) {
  return ops::patch_conv_backward(w.value, x.x, dy, x.shape, kt, grad_of(w), grad_of(b), need_dx);
}

void PatchEmbed::collect(std::vector<Parameter*>& out) { out.insert(out.end(), {&w, &b}); }

void PatchEmbed::init(std::mt19937_64& rng) {
  const int fan_in = static_cast<int>(w.value.cols());
  init_uniform(w, fan_in, rng);
  init_uniform(b, fan_in, rng);
}

// --- Adapter ----------------------------------------------------------------

Adapter::Adapter(std::string name, int channels, int bottleneck)
    : down_w(name + ".down.w", Partition::kAdapter, {bottleneck, channels}, bottleneck, channels),
      down_b(zeros(name + ".down.b", Partition::kAdapter, bottleneck)),
      up_w(name + ".up.w", Partition::kAdapter, {channels, bottleneck}, channels, bottleneck),
      up_b(zeros(name + ".up.b", Partition::kAdapter, channels)) {}

Mat Adapter::forward(const Mat& x, Cache* cache) const {
  Mat hidden = ops::linear(down_w.value, down_b.value, x);
  Mat y = ops::linear(up_w.value, up_b.value, ops::gelu(hidden));
  if (cache) {
    cache->x = x;
    cache->hidden = std::move(hidden);
  }
  return y;
}

Mat Adapter::backward(const Cache& cache, const Mat& dy, bool need_dx) {
  const Mat dact = ops::linear_backward(up_w.value, ops::gelu(cache.hidden), dy, grad_of(up_w), grad_of(up_b), true);
  const Mat dhidden = ops::gelu_backward(cache.hidden, dact);
  return ops::linear_backward(down_w.value, cache.x, dhidden, grad_of(down_w), grad_of(down_b), need_dx);
}

void Adapter::collect(std::vector<Parameter*>& out) { out.insert(out.end(), {&down_w, &down_b, &up_w, &up_b}); }

// The up projection starts at zero so a fresh adapter leaves the block unchanged.
void Adapter::init(std::mt19937_64& rng) {
  init_uniform(down_w, static_cast<int>(down_w.value.cols()), rng);
  init_uniform(down_b, static_cast<int>(down_w.value.cols()), rng);
  up_w.value.setZero();
  up_b.value.setZero();
}

// --- Mlp --------------------------------------------------------------------

Mlp::Mlp(std::string name, int channels, int hidden)
    : fc1_w(name + ".fc1.w", Partition::kBackbone, {hidden, channels}, hidden, channels),
      fc1_b(zeros(name + ".fc1.b", Partition::kBackbone, hidden)),
      fc2_w(name + ".fc2.w", Partition::kBackbone, {channels, hidden}, channels, hidden),
      fc2_b(zeros(name + ".fc2.b", Partition::kBackbone, channels)) {}

Mat Mlp::forward(const Mat& x, Cache* cache) const {
  Mat hidden = ops::linear(fc1_w.value, fc1_b.value, x);
  Mat y = ops::linear(fc2_w.value, fc2_b.value, ops::gelu(hidden));
  if (cache) {
    cache->x = x;
    cache->hidden = std::move(hidden);
  }
  return y;
}

Mat Mlp::backward(const Cache& cache, const Mat& dy, bool need_dx) {
  const Mat dact =
      ops::linear_backward(fc2_w.value, ops::gelu(cache.hidden), dy, grad_of(fc2_w), grad_of(fc2_b), true);
  const Mat dhidden = ops::gelu_backward(cache.hidden, dact);
  return ops::linear_backward(fc1_w.value, cache.x, dhidden, grad_of(fc1_w), grad_of(fc1_b), need_dx);
}

void Mlp::collect(std::vector<Parameter*>& out) { out.insert(out.end(), {&fc1_w, &fc1_b, &fc2_w, &fc2_b}); }

void Mlp::init(std::mt19937_64& rng) {
  init_uniform(fc1_w, static_cast<int>(fc1_w.value.cols()), rng);
  init_uniform(fc1_b, static_cast<int>(fc1_w.value.cols()), rng);
  init_uniform(fc2_w, static_cast<int>(fc2_w.value.cols()), rng);
  init_uniform(fc2_b, static_cast<int>(fc2_w.value.cols()), rng);
}

// --- TemporalAttention ------------------------------------------------------

TemporalAttention::TemporalAttention(std::string name, int channels, int heads_)
    : heads(heads_),
      wq(name + ".q.w", Partition::kBackbone, {channels, channels}, channels, channels),
      bq(zeros(name + ".q.b", Partition::kBackbone, channels)),
      wk(name + ".k.w", Partition::kBackbone, {channels, channels}, channels, channels),
      bk(zeros(name + ".k.b", Partition::kBackbone, channels)),
      wv(name + ".v.w", Partition::kBackbone, {channels, channels}, channels, channels),
      bv(zeros(name + ".v.b", Partition::kBackbone, channels)),
      wo(name + ".o.w", Partition::kBackbone, {channels, channels}, channels, channels),
      bo(zeros(name + ".o.b", Partition::kBackbone, channels)) {}

ops::AttentionWeights TemporalAttention::weights() const {
  return {wq.value, bq.value, wk.value, bk.value, wv.value, bv.value, wo.value, bo.value};
}

Mat TemporalAttention::forward(const Mat& x, Shape3 s, Cache* cache) const {
  const Mat pooled = ops::spatial_mean(x, s);
  ops::AttentionCache ac;
  Mat y = ops::attention(weights(), pooled, heads, cache ? &ac : nullptr);
  if (cache) {
    cache->shape = s;
    cache->attn = std::move(ac);
  }
  return y;
}

Mat TemporalAttention::backward(const Cache& cache, const Mat& dy, bool need_dx) {
  const ops::AttentionGrads g{grad_of(wq), grad_of(bq), grad_of(wk), grad_of(bk),
                              grad_of(wv), grad_of(bv), grad_of(wo), grad_of(bo)};
  const Mat dp = ops::attention_backward(weights(), cache.attn, dy, heads, g);
  if (!need_dx) return {};
  return ops::spatial_mean_backward(dp, cache.shape);
}

void TemporalAttention::collect(std::vector<Parameter*>& out) {
  out.insert(out.end(), {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo});
}

void TemporalAttention::init(std::mt19937_64& rng) {
  for (Parameter* p : {&wq, &bq, &wk, &bk, &wv, &bv, &wo, &bo}) {
    init_uniform(*p, static_cast<int>(wq.value.cols()), rng);
  }
}

// --- Block ------------------------------------------------------------------

Block::Block(std::string name, int channels, bool use_attention, int mlp_hidden, int bottleneck, int heads)
    : attention(use_attention),
      dpe_w(name + ".dpe.w", Partition::kBackbone, {channels, 1, 3, 3, 3}, channels, 27),
      dpe_b(zeros(name + ".dpe.b", Partition::kBackbone, channels)),
      ln1_g(ones(name + ".ln1.g", Partition::kBackbone, channels)),
      ln1_b(zeros(name + ".ln1.b", Partition::kBackbone, channels)),
      ln2_g(ones(name + ".ln2.g", Partition::kBackbone, channels)),
      ln2_b(zeros(name + ".ln2.b", Partition::kBackbone, channels)),
      attn(name + ".attn", use_attention ? channels : 0, use_attention ? heads : 1),
      mlp(name + ".mlp", channels, mlp_hidden),
      adapter(name + ".adapter", channels, bottleneck) {
  if (!attention) {
    pw1_w = Parameter(name + ".mix.pw1.w", Partition::kBackbone, {channels, channels}, channels, channels);
    pw1_b = zeros(name + ".mix.pw1.b", Partition::kBackbone, channels);
    dw_w = Parameter(name + ".mix.dw.w", Partition::kBackbone, {channels, 1, 3, 3, 3}, channels, 27);
    dw_b = zeros(name + ".mix.dw.b", Partition::kBackbone, channels);
    pw2_w = Parameter(name + ".mix.pw2.w", Partition::kBackbone, {channels, channels}, channels, channels);
    pw2_b = zeros(name + ".mix.pw2.b", Partition::kBackbone, channels);
  }
}

Feature Block::forward(const Feature& in, Cache* cache) const {
  const Shape3 s = in.shape;
  Mat x1 = in.x + ops::dwconv3(dpe_w.value, dpe_b.value, in.x, s);
  ops::LayerNormCache ln1, ln2;
  Mat y1 = ops::layernorm(x1, ln1_g.value, ln1_b.value, cache ? &ln1 : nullptr);
  Mat x2 = x1;
  Mat a, b;
  TemporalAttention::Cache ac;
  if (attention) {
    const Mat upd = attn.forward(y1, s, cache ? &ac : nullptr);
    ops::add_broadcast(x2, upd, s);
  } else {
    a = ops::linear(pw1_w.value, pw1_b.value, y1);
    b = ops::dwconv3(dw_w.value, dw_b.value, a, s);
    x2 += ops::linear(pw2_w.value, pw2_b.value, b);
  }
  const Mat y2 = ops::layernorm(x2, ln2_g.value, ln2_b.value, cache ? &ln2 : nullptr);
  Mlp::Cache mc;
  Adapter::Cache adc;
  Mat x3 = x2 + mlp.forward(y2, cache ? &mc : nullptr) + adapter.forward(y2, cache ? &adc : nullptr);
  if (cache) {
    cache->shape = s;
    cache->x0 = in.x;
    cache->x1 = std::move(x1);
    cache->ln1 = std::move(ln1);
    cache->ln2 = std::move(ln2);
    cache->y1 = std::move(y1);
    cache->a = std::move(a);
    cache->b = std::move(b);
    cache->attn = std::move(ac);
    cache->mlp = std::move(mc);
    cache->adapter = std::move(adc);
  }
  return {std::move(x3), s};
}

Mat Block::backward(const Cache& c, const Mat& dy, bool need_dx) {
  const Shape3 s = c.shape;
  // FFN and adapter branches share the LN2 input.
  Mat dy2 = mlp.backward(c.mlp, dy, true);
  dy2 += adapter.backward(c.adapter, dy, true);
  Mat dx2 = dy + ops::layernorm_backward(ln2_g.value, c.ln2, dy2, grad_of(ln2_g), grad_of(ln2_b));

  Mat dy1;
  if (attention) {
    dy1 = attn.backward(c.attn, ops::sum_spatial(dx2, s), true);
  } else {
    const Mat db = ops::linear_backward(pw2_w.value, c.b, dx2, grad_of(pw2_w), grad_of(pw2_b), true);
    const Mat da = ops::dwconv3_backward(dw_w.value, c.a, db, s, grad_of(dw_w), grad_of(dw_b), true);
    dy1 = ops::linear_backward(pw1_w.value, c.y1, da, grad_of(pw1_w), grad_of(pw1_b), true);
  }
  Mat dx1 = dx2 + ops::layernorm_backward(ln1_g.value, c.ln1, dy1, grad_of(ln1_g), grad_of(ln1_b));
  const bool dpe_needs = need_dx || dpe_w.trainable || dpe_b.trainable;
  if (!dpe_needs) return {};
  Mat ddpe = ops::dwconv3_backward(dpe_w.value, c.x0, dx1, s, grad_of(dpe_w), grad_of(dpe_b), need_dx);
  if (!need_dx) return {};
  return dx1 + ddpe;
}

void Block::collect(std::vector<Parameter*>& out) {
  out.insert(out.end(), {&dpe_w, &dpe_b, &ln1_g, &ln1_b});
  if (attention) {
    attn.collect(out);
  } else {
    out.insert(out.end(), {&pw1_w, &pw1_b, &dw_w, &dw_b, &pw2_w, &pw2_b});
  }
  out.insert(out.end(), {&ln2_g, &ln2_b});
  mlp.collect(out);
  adapter.collect(out);
}

void Block::init(std::mt19937_64& rng) {
  init_uniform(dpe_w, 27, rng);
  init_uniform(dpe_b, 27, rng);
  if (attention) {
    attn.init(rng);
  } else {
    const int c = static_cast<int>(pw1_w.value.cols());
    init_uniform(pw1_w, c, rng);
    init_uniform(pw1_b, c, rng);
    init_uniform(dw_w, 27, rng);
    init_uniform(dw_b, 27, rng);
    init_uniform(pw2_w, c, rng);
    init_uniform(pw2_b, c, rng);
  }
  mlp.init(rng);
  adapter.init(rng);
}

// --- Head -------------------------------------------------------------------

Head::Head(int in_channels, int hidden, int stride_)
    : stride(stride_),
      up_w("head.up.w", Partition::kHead, {in_channels, hidden, stride_}, hidden * stride_, in_channels),
      up_b(zeros("head.up.b", Partition::kHead, hidden)),
      c1_w("head.conv1.w", Partition::kHead, {hidden, hidden, 3}, hidden, hidden * 3),
      c1_b(zeros("head.conv1.b", Partition::kHead, hidden)),
      c2_w("head.conv2.w", Partition::kHead, {1, hidden, 3}, 1, hidden * 3),
      c2_b(zeros("head.conv2.b", Partition::kHead, 1)) {}

Mat Head::forward(const Mat& z, Cache* cache) const {
  Mat u = ops::conv_transpose1d(up_w.value, up_b.value, z, stride);
  Mat ug = ops::gelu(u);
  Mat c1 = ops::conv1d3(c1_w.value, c1_b.value, ug);
  Mat c1g = ops::gelu(c1);
  Mat y = ops::conv1d3(c2_w.value, c2_b.value, c1g);
  if (cache) {
    cache->z = z;
    cache->u = std::move(u);
    cache->ug = std::move(ug);
    cache->c1 = std::move(c1);
    cache->c1g = std::move(c1g);
  }
  return y;
}

Mat Head::backward(const Cache& c, const Mat& dy, bool need_dx) {
  const Mat dc1g = ops::conv1d3_backward(c2_w.value, c.c1g, dy, grad_of(c2_w), grad_of(c2_b), true);
  const Mat dc1 = ops::gelu_backward(c.c1, dc1g);
  const Mat dug = ops::conv1d3_backward(c1_w.value, c.ug, dc1, grad_of(c1_w), grad_of(c1_b), true);
  const Mat du = ops::gelu_backward(c.u, dug);
  return ops::conv_transpose1d_backward(up_w.value, c.z, du, stride, grad_of(up_w), grad_of(up_b), need_dx);
}

void Head::collect(std::vector<Parameter*>& out) {
  out.insert(out.end(), {&up_w, &up_b, &c1_w, &c1_b, &c2_w, &c2_b});
}

void Head::init(std::mt19937_64& rng) {
  const int cin = static_cast<int>(up_w.value.cols());
  const int hidden = static_cast<int>(c1_w.value.rows());
  init_uniform(up_w, cin, rng);
  init_uniform(up_b, cin, rng);
  init_uniform(c1_w, hidden * 3, rng);
  init_uniform(c1_b, hidden * 3, rng);
  init_uniform(c2_w, hidden * 3, rng);
  init_uniform(c2_b, hidden * 3, rng);
}

}  // namespace addp::nn
