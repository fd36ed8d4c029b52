#include <cmath>
#include <filesystem>

#include "addp/nn/model.hpp"
#include "addp/nn/optim.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace addp::nn;
using gradcheck::dot;
using gradcheck::numeric_grad;
using gradcheck::random_mat;
using gradcheck::rel_err;

namespace {

ModelConfig tiny_config() {
  ModelConfig c;
  c.stage_channels = {4, 4, 8, 8};
  c.mlp_ratio = 2;
  c.head_channels = 4;
  return c;
}

}  // namespace

TEST_CASE("diffnorm on a static clip uses only the appearance branch") {
  DiffNorm dn(5);
  std::mt19937_64 rng(1);
  dn.init(rng);
  const Shape3 s{4, 2, 3};
  Mat frame = random_mat(3, s.plane(), rng);
  Mat x(3, s.size());
  for (int t = 0; t < s.t; ++t) x.middleCols(t * s.plane(), s.plane()) = frame;
  for (bool batch : {true, false}) {
    const Feature out = dn.forward(x, s, batch, nullptr);
    CHECK(out.shape == Shape3{3, 2, 3});
    CHECK(out.x.allFinite());
    const Mat expected = (dn.conv_w.value.leftCols(3) * x.leftCols((s.t - 1) * s.plane())).colwise() + dn.conv_b.value.col(0);
    CHECK((out.x - expected).norm() < 1e-12);
  }
  CHECK_THROWS(dn.forward(Mat::Zero(3, 6), {1, 2, 3}, true, nullptr));
}

TEST_CASE("diffnorm gradients match finite differences") {
  for (int trial = 0; trial < 5; ++trial) {
    std::mt19937_64 rng(100 + trial);
    DiffNorm dn(4);
    dn.init(rng);
    dn.bn_gamma.value = random_mat(3, 1, rng);
    dn.bn_beta.value = random_mat(3, 1, rng);
    const Shape3 s{4, 2, 2};
    Mat x = random_mat(3, s.size(), rng);
    const Feature ref = dn.forward(x, s, true, nullptr);
    const Mat w = random_mat(ref.x.rows(), ref.x.cols(), rng);
    auto loss = [&] { return dot(w, dn.forward(x, s, true, nullptr).x); };

    for (Parameter* p : {&dn.bn_gamma, &dn.bn_beta, &dn.conv_w, &dn.conv_b}) p->zero_grad();
    DiffNorm::Cache cache;
    dn.forward(x, s, true, &cache);
    const Mat dx = dn.backward(cache, w, true);
    CHECK(rel_err(dx, numeric_grad(x, loss)) < 1e-4);
    for (Parameter* p : {&dn.bn_gamma, &dn.bn_beta, &dn.conv_w, &dn.conv_b}) {
      CHECK_MESSAGE(rel_err(p->grad, numeric_grad(p->value, loss)) < 1e-4, p->name);
    }
  }
}

TEST_CASE("adapter arithmetic") {
  Adapter a("a", 4, bottleneck_width(4, 0.25));
  std::vector<Parameter*> ps;
  a.collect(ps);
  Eigen::Index n = 0;
  for (auto* p : ps) n += p->numel();
  CHECK(n == 13);

  std::mt19937_64 rng(3);
  a.init(rng);
  const Mat x = random_mat(4, 7, rng);
  CHECK(a.forward(x, nullptr).isZero(0.0));
}

TEST_CASE("adapter forward matches a hand-written gelu chain") {
  Adapter a("a", 3, 2);
  std::mt19937_64 rng(8);
  for (Parameter* p : {&a.down_w, &a.down_b, &a.up_w, &a.up_b}) p->value = random_mat(p->value.rows(), p->value.cols(), rng);
  const Mat x = random_mat(3, 5, rng);
  const Mat y = a.forward(x, nullptr);
  for (int n = 0; n < 5; ++n) {
    double hidden[2];
    for (int k = 0; k < 2; ++k) {
      double s = a.down_b.value(k, 0);
      for (int c = 0; c < 3; ++c) s += a.down_w.value(k, c) * x(c, n);
      hidden[k] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
    }
    for (int c = 0; c < 3; ++c) {
      double o = a.up_b.value(c, 0);
      for (int k = 0; k < 2; ++k) o += a.up_w.value(c, k) * hidden[k];
      CHECK(y(c, n) == doctest::Approx(o).epsilon(1e-6));
    }
  }
}

TEST_CASE("adapter gradients match finite differences") {
  for (int trial = 0; trial < 5; ++trial) {
    std::mt19937_64 rng(200 + trial);
    Adapter a("a", 6, 2);
    for (Parameter* p : {&a.down_w, &a.down_b, &a.up_w, &a.up_b}) {
      p->value = random_mat(p->value.rows(), p->value.cols(), rng);
      p->zero_grad();
    }
    Mat x = random_mat(6, 5, rng);
    const Mat w = random_mat(6, 5, rng);
    auto loss = [&] { return dot(w, a.forward(x, nullptr)); };
    Adapter::Cache cache;
    a.forward(x, &cache);
    const Mat dx = a.backward(cache, w, true);
    CHECK(rel_err(dx, numeric_grad(x, loss)) < 1e-4);
    for (Parameter* p : {&a.down_w, &a.down_b, &a.up_w, &a.up_b}) {
      CHECK_MESSAGE(rel_err(p->grad, numeric_grad(p->value, loss)) < 1e-4, p->name);
    }
  }
}

namespace {

void check_block(bool attention, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  Block blk("b", 4, attention, 8, 1, 2);
  blk.init(rng);
  std::vector<Parameter*> ps;
  blk.collect(ps);
  for (Parameter* p : ps) {
    p->value += random_mat(p->value.rows(), p->value.cols(), rng, 0.3);
    p->zero_grad();
  }
  const Shape3 s{3, 2, 2};
  Feature in{random_mat(4, s.size(), rng), s};
  const Mat w = random_mat(4, s.size(), rng);
  auto loss = [&] { return dot(w, blk.forward(in, nullptr).x); };
  Block::Cache cache;
  blk.forward(in, &cache);
  const Mat dx = blk.backward(cache, w, true);
  CHECK(rel_err(dx, numeric_grad(in.x, loss)) < 1e-4);
  for (Parameter* p : ps) CHECK_MESSAGE(rel_err(p->grad, numeric_grad(p->value, loss)) < 1e-4, p->name);
}

}  // namespace

TEST_CASE("attention block gradients match finite differences") {
  for (int trial = 0; trial < 5; ++trial) check_block(true, 300 + trial);
}

TEST_CASE("convolution block gradients match finite differences") {
  for (int trial = 0; trial < 2; ++trial) check_block(false, 400 + trial);
}

TEST_CASE("patch embed and head gradients match finite differences") {
  std::mt19937_64 rng(9);
  PatchEmbed pe("pe", 3, 4, 2);
  pe.init(rng);
  const Shape3 s{5, 4, 4};
  Feature in{random_mat(3, s.size(), rng), s};
  const Feature out = pe.forward(in);
  CHECK(out.shape == Shape3{3, 2, 2});
  const Mat w = random_mat(out.x.rows(), out.x.cols(), rng);
  auto loss = [&] { return dot(w, pe.forward(in).x); };
  pe.w.zero_grad();
  pe.b.zero_grad();
  const Mat dx = pe.backward(in, w, true);
  CHECK(rel_err(dx, numeric_grad(in.x, loss)) < 1e-4);
  CHECK(rel_err(pe.w.grad, numeric_grad(pe.w.value, loss)) < 1e-4);

  Head head(4, 3, 2);
  head.init(rng);
  Mat z = random_mat(4, 5, rng);
  const Mat hw = random_mat(1, 10, rng);
  auto hloss = [&] { return dot(hw, head.forward(z, nullptr)); };
  Head::Cache hc;
  head.forward(z, &hc);
  const Mat dz = head.backward(hc, hw, true);
  CHECK(rel_err(dz, numeric_grad(z, hloss)) < 1e-4);
  for (Parameter* p : {&head.up_w, &head.c1_w, &head.c2_w, &head.c2_b}) {
    CHECK_MESSAGE(rel_err(p->grad, numeric_grad(p->value, hloss)) < 1e-4, p->name);
  }
}

TEST_CASE("full model gradient with both feature hooks") {
  Model m(tiny_config());
  m.set_stage(Stage::kInitial);
  std::mt19937_64 rng(12);
  const Shape3 s{9, 16, 16};
  Mat x = random_mat(3, s.size(), rng, 0.2);
  for (Parameter* p : m.parameters()) {
    if (p->part == Partition::kAdapter) p->value = random_mat(p->value.rows(), p->value.cols(), rng, 0.2);
  }
  // Hooks: AdaIN to a fixed target at h, noise mixing at z.
  const Prediction plain = m.infer(x, s);
  const Vec mu = Vec::Constant(plain.taps.h.channels(), 0.1);
  const Vec sigma = Vec::Constant(plain.taps.h.channels(), 0.7);
  const Mat noise = random_mat(plain.taps.z.rows(), plain.taps.z.cols(), rng, 0.05);
  Hooks hooks;
  hooks.style_mu = &mu;
  hooks.style_sigma = &sigma;
  hooks.noise = &noise;
  hooks.alpha = 1;
  // Evaluation-mode statistics keep the forward a fixed function of x.
  m.set_stage(Stage::kIncremental);
  for (Parameter* p : m.parameters()) p->trainable = true;
  const std::vector<double> w = [&] {
    std::vector<double> v(s.t);
    std::normal_distribution<double> g;
    for (double& e : v) e = g(rng);
    return v;
  }();
  auto loss = [&] {
    const auto p = m.infer(x, s, hooks);
    double l = 0;
    for (int t = 0; t < s.t; ++t) l += w[t] * p.pred[t];
    return l;
  };
  m.zero_grad();
  Model::Tape tape;
  m.forward_train(x, s, hooks, tape);
  const Mat dx = m.backward(tape, w, true);
  // Noise mixing treats the singular vectors as constants, so only the
  // parameters after that hook see the exact gradient.
  Parameter* head_w = nullptr;
  for (Parameter* p : m.parameters()) {
    if (p->name == "head.conv2.w") head_w = p;
  }
  REQUIRE(head_w);
  CHECK(rel_err(head_w->grad, numeric_grad(head_w->value, loss)) < 1e-4);

  hooks.noise = nullptr;
  m.zero_grad();
  Model::Tape tape2;
  m.forward_train(x, s, hooks, tape2);
  const Mat dx2 = m.backward(tape2, w, true);
  CHECK(rel_err(dx2, numeric_grad(x, loss)) < 1e-4);
  for (Parameter* p : m.parameters()) {
    if (p->name == "stage1.block1.adapter.up.w" || p->name == "stage3.block1.attn.q.w" || p->name == "diffnorm.conv.w") {
      CHECK_MESSAGE(rel_err(p->grad, numeric_grad(p->value, loss)) < 1e-4, p->name);
    }
  }
  (void)dx;
}

TEST_CASE("forward contract") {
  Model m(ModelConfig{});
  std::mt19937_64 rng(2);
  for (int t : {32, 160}) {
    const Shape3 s{t, 32, 32};
    const Mat x = random_mat(3, s.size(), rng, 0.1).array() + 0.5;
    const Prediction a = m.infer(x, s);
    const Prediction b = m.infer(x, s);
    CHECK(a.pred.size() == std::size_t(t));
    CHECK(a.pred == b.pred);
    CHECK(a.taps.h.channels() == 32);
    CHECK(a.taps.z.rows() == 64);
    CHECK(a.taps.z.cols() >= 2);
  }
  const Shape3 s{32, 32, 32};
  const Prediction z = m.infer(Mat::Zero(3, s.size()), s);
  for (double v : z.pred) CHECK(std::isfinite(v));
  CHECK_THROWS(m.infer(Mat::Zero(3, 10), s));
  CHECK_THROWS(m.infer(Mat::Zero(3, 16 * 8 * 8), {16, 8, 8}));
}

TEST_CASE("parameter partition and trainable fraction") {
  Model m(ModelConfig{});
  const ParameterPartition pp = m.set_stage(Stage::kIncremental);
  // Oracle: adapter count from the bottleneck formula, head from its layer shapes.
  Eigen::Index adapters = 0;
  for (int c : {16, 32, 64, 64}) {
    const int b = std::max(1, int(std::lround(0.25 * c)));
    adapters += c * b + b * c + b + c;
  }
  CHECK(pp.count(pp.adapter) == adapters);
  const Eigen::Index head = 64 * 32 * 4 + 32 + 32 * 32 * 3 + 32 + 32 * 3 + 1;
  CHECK(pp.count(pp.head) == head);
  CHECK(pp.trainable_count() == adapters + head);
  CHECK(double(pp.trainable_count()) / double(pp.total_count()) < 0.15);
  for (auto* p : pp.backbone) CHECK_FALSE(p->trainable);

  const ParameterPartition all = m.set_stage(Stage::kInitial);
  CHECK(all.trainable_count() == all.total_count());
  CHECK(all.backbone.size() + all.adapter.size() + all.head.size() == m.parameters().size());
}

TEST_CASE("freeze contract across optimizer steps") {
  Model m(tiny_config());
  std::mt19937_64 rng(5);
  const Shape3 s{17, 16, 16};
  const Mat x = random_mat(3, s.size(), rng, 0.2).array() + 0.5;
  std::vector<double> dpred(s.t);
  for (int t = 0; t < s.t; ++t) dpred[t] = std::sin(0.9 * t);

  const auto step = [&](Stage stage) {
    m.set_stage(stage);
    std::vector<Parameter*> tr;
    for (auto* p : m.parameters())
      if (p->trainable) tr.push_back(p);
    Adam opt(tr, {1e-2, 0.9, 0.999, 1e-8, 5e-5});
    for (int k = 0; k < 3; ++k) {
      m.zero_grad();
      Model::Tape tape;
      m.forward_train(x, s, {}, tape);
      m.backward(tape, dpred);
      opt.step();
    }
  };
  const auto b0 = m.checksum(Partition::kBackbone);
  step(Stage::kInitial);
  const auto b1 = m.checksum(Partition::kBackbone);
  CHECK(b1 != b0);

  const auto a1 = m.checksum(Partition::kAdapter);
  const auto h1 = m.checksum(Partition::kHead);
  step(Stage::kIncremental);
  CHECK(m.checksum(Partition::kBackbone) == b1);
  CHECK(m.checksum(Partition::kAdapter) != a1);
  CHECK(m.checksum(Partition::kHead) != h1);
}

TEST_CASE("checkpoint round trip") {
  namespace fs = std::filesystem;
  Model m(tiny_config());
  m.set_stage(Stage::kIncremental);
  std::mt19937_64 rng(6);
  m.diffnorm().running_mean = Vec::Constant(3, 0.25);
  const fs::path path = fs::temp_directory_path() / "addp_model_test.ckpt";
  m.save(path);
  const auto back = Model::load(path);
  CHECK(back->stage() == Stage::kIncremental);
  for (auto part : {Partition::kBackbone, Partition::kAdapter, Partition::kHead}) {
    CHECK(back->checksum(part) == m.checksum(part));
  }
  const Shape3 s{9, 16, 16};
  const Mat x = random_mat(3, s.size(), rng);
  CHECK(back->infer(x, s).pred == m.infer(x, s).pred);
  fs::remove(path);
}

TEST_CASE("model config validation and json") {
  ModelConfig c;
  c.stage_channels[2] = 63;
  CHECK_THROWS_WITH_AS(c.validate(), "model.heads: must divide the channel count of attention stages",
                       std::invalid_argument);
  nlohmann::json j = ModelConfig{};
  CHECK(j.get<ModelConfig>().stage_channels == ModelConfig{}.stage_channels);
  j["bogus"] = 1;
  CHECK_THROWS_WITH_AS(j.get<ModelConfig>(), "model.bogus: unknown field", std::invalid_argument);
  CHECK(bottleneck_width(4, 0.25) == 1);
  CHECK(bottleneck_width(2, 0.25) == 1);
  CHECK(bottleneck_width(64, 0.25) == 16);
}
