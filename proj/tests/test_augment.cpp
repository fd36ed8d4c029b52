#include <filesystem>
#include <fstream>

#include "addp/augment.hpp"
#include "doctest.h"
#include "gradcheck.hpp"
#include "json.hpp"

using namespace addp;
using gradcheck::random_mat;
using nn::Mat;
using nn::Vec;

TEST_CASE("adain identity and post-condition") {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    const Mat h = random_mat(6, 40, rng, 1.0 + trial);
    const auto own = transfer::style_stats(h);
    CHECK((transfer::adain(h, own.mu, own.sigma) - h).cwiseAbs().maxCoeff() < 1e-5);

    const Vec mu = random_mat(6, 1, rng, 3.0);
    const Vec sigma = random_mat(6, 1, rng).cwiseAbs();
    const auto got = transfer::style_stats(transfer::adain(h, mu, sigma));
    CHECK((got.mu - mu).cwiseAbs().maxCoeff() < 1e-5);
    CHECK((got.sigma - sigma).cwiseAbs().maxCoeff() < 1e-5);
  }
}

TEST_CASE("adain on a two-channel toy feature") {
  Mat h(2, 4);
  h << 1, 3, 1, 3,  // mu 2, sigma 1
      0, 0, 4, 4;   // mu 2, sigma 2
  Vec mu(2), sigma(2);
  mu << 0, 1;
  sigma << 1, 2;
  Mat expect(2, 4);
  for (int n = 0; n < 4; ++n) {
    expect(0, n) = 1.0 * (h(0, n) - 2.0) / 1.0 + 0.0;
    expect(1, n) = 2.0 * (h(1, n) - 2.0) / 2.0 + 1.0;
  }
  CHECK((transfer::adain(h, mu, sigma) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("adain shifts flat channels and rejects mismatches") {
  Mat h(2, 3);
  h << 5, 5, 5, 1, 2, 3;
  Vec mu(2), sigma(2);
  mu << -1, 0;
  sigma << 4, 1;
  const Mat y = transfer::adain(h, mu, sigma);
  for (int n = 0; n < 3; ++n) CHECK(y(0, n) == doctest::Approx(-1.0));
  CHECK(y.allFinite());
  CHECK_THROWS_AS(transfer::adain(h, Vec::Zero(3), Vec::Ones(3)), std::invalid_argument);
}

TEST_CASE("adain gradient matches finite differences") {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 5; ++trial) {
    Mat h = random_mat(3, 7, rng);
    h.row(2).setConstant(0.3);
    const Vec mu = random_mat(3, 1, rng);
    const Vec sigma = random_mat(3, 1, rng).cwiseAbs();
    const Mat w = random_mat(3, 7, rng);
    transfer::AdainCache cache;
    transfer::adain(h, mu, sigma, &cache);
    const Mat dx = transfer::adain_backward(cache, w);
    // The flat channel sits on a kink of the standard deviation, so only the
    // other rows are compared numerically.
    Mat top = h.topRows(2);
    auto loss = [&] {
      Mat full = h;
      full.topRows(2) = top;
      return gradcheck::dot(w, transfer::adain(full, mu, sigma));
    };
    CHECK(gradcheck::rel_err(dx.topRows(2), gradcheck::numeric_grad(top, loss)) < 1e-4);
    CHECK(std::abs(dx.row(2).sum()) < 1e-12);
  }
}

namespace {

// Best rank-1 approximation by power iteration on z^T z.
Mat rank1_oracle(const Mat& z) {
  Vec v = Vec::Ones(z.cols());
  for (int i = 0; i < 5000; ++i) {
    v = z.transpose() * (z * v);
    v.normalize();
  }
  return z * v * v.transpose();
}

}  // namespace

TEST_CASE("noise mixing") {
  std::mt19937_64 rng(3);
  const Mat z = random_mat(8, 5, rng);
  for (int a : {0, 1, 3, 5}) {
    const Mat self = transfer::mix_noise(z, transfer::extract_noise(z, a), a);
    CHECK((self - z).norm() / z.norm() < 1e-5);
  }
  const Mat n = random_mat(8, 5, rng);
  CHECK((transfer::mix_noise(z, n, 5) - (z + n)).norm() / (z + n).norm() < 1e-10);

  const Mat r3 = random_mat(8, 3, rng) * random_mat(3, 5, rng);
  const Mat got = transfer::mix_noise(r3, Mat::Zero(8, 5), 1);
  CHECK((got - rank1_oracle(r3)).norm() / r3.norm() < 1e-8);

  CHECK_THROWS_AS(transfer::mix_noise(z, Mat::Zero(5, 8), 1), std::invalid_argument);
  CHECK_THROWS(transfer::mix_noise(z, n, 6));
}

TEST_CASE("noise mixing gradient with fixed singular vectors") {
  std::mt19937_64 rng(4);
  const Mat z = random_mat(6, 4, rng);
  transfer::NoiseMixCache cache;
  transfer::mix_noise(z, Mat::Zero(6, 4), 2, &cache);
  const Mat w = random_mat(6, 4, rng);
  const Mat dz = transfer::mix_noise_backward(cache, w);
  // Projection onto the span of the kept components: U U^T W V V^T restricted to the diagonal.
  Mat expect = Mat::Zero(6, 4);
  for (int i = 0; i < 2; ++i) {
    const double g = cache.u.col(i).dot(w * cache.v.col(i));
    expect += g * cache.u.col(i) * cache.v.col(i).transpose();
  }
  CHECK((dz - expect).norm() < 1e-12);
}

namespace {

proto::PrototypeStore make_store(int per_task_1, int per_task_2) {
  proto::PrototypeStore s;
  int cluster = 0;
  for (int i = 0; i < per_task_1; ++i) {
    s.add_style({Vec::Zero(2), Vec::Ones(2), 1, cluster, {}});
    s.add_noise({Mat::Zero(2, 2), 1, cluster++});
  }
  cluster = 0;
  for (int i = 0; i < per_task_2; ++i) {
    s.add_style({Vec::Ones(2), Vec::Ones(2), 2, cluster, {}});
    s.add_noise({Mat::Ones(2, 2), 2, cluster++});
  }
  return s;
}

}  // namespace

TEST_CASE("augmentation draws") {
  std::mt19937_64 rng(5);
  augment::Options opts;

  proto::PrototypeStore empty;
  for (int i = 0; i < 100; ++i) CHECK_FALSE(augment::draw(empty, opts, rng).any());
  const nn::Hooks none = augment::make_hooks({}, empty, 9);
  CHECK(none.style_mu == nullptr);
  CHECK(none.noise == nullptr);

  const auto store = make_store(3, 2);
  opts.p = 0.0;
  for (int i = 0; i < 1000; ++i) CHECK_FALSE(augment::draw(store, opts, rng).any());

  opts.p = 1.0;
  for (int i = 0; i < 1000; ++i) {
    const auto d = augment::draw(store, opts, rng);
    CHECK(d.style_id.has_value());
    CHECK(d.noise_id.has_value());
  }

  opts.p = 0.5;
  int style = 0, noise = 0, both = 0;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const auto d = augment::draw(store, opts, rng);
    style += d.style_id.has_value();
    noise += d.noise_id.has_value();
    both += d.style_id && d.noise_id;
  }
  CHECK(double(style) / n >= 0.48);
  CHECK(double(style) / n <= 0.52);
  CHECK(double(noise) / n >= 0.48);
  CHECK(double(noise) / n <= 0.52);
  // Independence: joint rate close to 0.25.
  CHECK(std::abs(double(both) / n - 0.25) < 0.02);

  opts.p = 1.0;
  opts.noise = false;
  const auto d = augment::draw(store, opts, rng);
  CHECK(d.style_id.has_value());
  CHECK_FALSE(d.noise_id.has_value());

  opts.p = 1.5;
  CHECK_THROWS(augment::draw(store, opts, rng));
}

TEST_CASE("pooled and per-task sampling") {
  const auto store = make_store(1, 9);
  augment::Options opts;
  opts.p = 1.0;
  auto rate = [&](augment::Sampling s) {
    opts.sampling = s;
    std::mt19937_64 rng(6);
    int hits = 0;
    for (int i = 0; i < 10000; ++i) hits += *augment::draw(store, opts, rng).style_id == 0;
    return hits / 10000.0;
  };
  CHECK(std::abs(rate(augment::Sampling::kPooled) - 0.1) < 0.02);
  CHECK(std::abs(rate(augment::Sampling::kPerTask) - 0.5) < 0.02);
  CHECK(augment::sampling_from_name("per_task") == augment::Sampling::kPerTask);
  CHECK(augment::sampling_name(augment::Sampling::kPooled) == "pooled");
  CHECK_THROWS(augment::sampling_from_name("weighted"));
}

TEST_CASE("clip generators are reproducible and distinct") {
  auto a = augment::clip_rng(1, 2, 3);
  auto b = augment::clip_rng(1, 2, 3);
  auto c = augment::clip_rng(1, 2, 4);
  const auto x = a();
  CHECK(x == b());
  CHECK(x != c());
}

TEST_CASE("hooks point at the chosen prototypes") {
  const auto store = make_store(1, 1);
  augment::Decision d;
  d.style_id = 1;
  d.noise_id = 0;
  const auto h = augment::make_hooks(d, store, 2);
  CHECK(h.style_mu == &store.style()[1].mu);
  CHECK(h.noise == &store.noise()[0].n);
  CHECK(h.alpha == 2);
}

TEST_CASE("audit log lines") {
  namespace fs = std::filesystem;
  const fs::path path = fs::temp_directory_path() / "addp_audit_test" / "audit.jsonl";
  {
    augment::AuditLog log(path);
    CHECK(log.enabled());
    augment::Decision d;
    d.style_id = 4;
    log.write(7, 11, d);
    log.write(8, 12, {});
  }
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  auto j = nlohmann::json::parse(line);
  CHECK(j["step"] == 7);
  CHECK(j["clip"] == 11);
  CHECK(j["style_id"] == 4);
  CHECK(j["noise_id"].is_null());
  std::getline(in, line);
  j = nlohmann::json::parse(line);
  CHECK(j["style_id"].is_null());
  fs::remove_all(path.parent_path());
  CHECK_FALSE(augment::AuditLog().enabled());
}
