#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>

#include "addp/prototypes.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace addp;
using gradcheck::random_mat;
using nn::Mat;
using nn::Vec;

TEST_CASE("style statistics") {
  Mat h(3, 6);
  h.row(0).setConstant(1.5);
  h.row(1).setConstant(-2.0);
  h.row(2) << 0, 2, 0, 2, 2, 0;
  const auto st = transfer::style_stats(h);
  CHECK(st.mu(0) == doctest::Approx(1.5));
  CHECK(st.sigma(0) == doctest::Approx(0.0));
  CHECK(st.mu(1) == doctest::Approx(-2.0));
  CHECK(st.sigma(1) == doctest::Approx(0.0));
  CHECK(st.mu(2) == doctest::Approx(1.0));
  CHECK(st.sigma(2) == doctest::Approx(1.0));
}

TEST_CASE("style statistics match flattened moments") {
  std::mt19937_64 rng(4);
  // [4, 2*3*3]
  const Mat h = random_mat(4, 18, rng, 2.0);
  const auto st = transfer::style_stats(h);
  for (int c = 0; c < 4; ++c) {
    std::vector<double> v(h.row(c).data(), h.row(c).data() + 18);
    double s = 0;
    for (double x : v) s += x;
    const double m = s / v.size();
    double q = 0;
    for (double x : v) q += (x - m) * (x - m);
    CHECK(std::abs(st.mu(c) - m) < 1e-6);
    CHECK(std::abs(st.sigma(c) - std::sqrt(q / v.size())) < 1e-6);
  }

  // Position permutation leaves the statistics alone.
  std::vector<int> perm(18);
  std::iota(perm.begin(), perm.end(), 0);
  std::shuffle(perm.begin(), perm.end(), rng);
  Mat p(4, 18);
  for (int i = 0; i < 18; ++i) p.col(i) = h.col(perm[i]);
  const auto sp = transfer::style_stats(p);
  CHECK((sp.mu - st.mu).norm() < 1e-12);
  CHECK((sp.sigma - st.sigma).norm() < 1e-12);
}

TEST_CASE("noise extraction") {
  std::mt19937_64 rng(5);
  const Mat z = random_mat(8, 6, rng);
  CHECK((transfer::extract_noise(z, 0) - z).norm() / z.norm() < 1e-5);
  CHECK(transfer::extract_noise(z, 6).norm() < 1e-10);

  const Mat u = random_mat(8, 1, rng);
  const Mat v = random_mat(6, 1, rng);
  const Mat r1 = 3.5 * u * v.transpose();
  CHECK(transfer::extract_noise(r1, 1).norm() < 1e-6);

  CHECK_THROWS(transfer::extract_noise(z, 7));
  CHECK_THROWS(transfer::extract_noise(z, -1));
  Mat bad = z;
  bad(0, 0) = std::nan("");
  CHECK_THROWS(transfer::extract_noise(bad, 1));
}

TEST_CASE("noise and signal parts split the energy") {
  std::mt19937_64 rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const Mat z = random_mat(8, 5, rng);
    double last = z.norm() + 1.0;
    for (int a = 0; a <= 5; ++a) {
      const Mat n = transfer::extract_noise(z, a);
      CHECK((n + transfer::keep_signal(z, a) - z).norm() / z.norm() < 1e-5);
      CHECK(n.norm() <= last + 1e-12);
      last = n.norm();
    }
  }
}

TEST_CASE("kmeans corner cases") {
  std::mt19937_64 rng(7);
  const Mat pts = random_mat(5, 3, rng);
  const auto r = proto::kmeans(pts, {5, 10, 100, 1});
  REQUIRE(r.centroids.rows() == 5);
  for (int i = 0; i < 5; ++i) {
    double best = 1e9;
    for (int k = 0; k < 5; ++k) best = std::min(best, (r.centroids.row(k) - pts.row(i)).norm());
    CHECK(best < 1e-12);
  }
  CHECK(proto::kmeans(pts, {8, 10, 100, 1}).centroids.rows() == 5);

  Mat same(6, 3);
  for (int i = 0; i < 6; ++i) same.row(i) << 1.0, -2.0, 0.5;
  const auto s = proto::kmeans(same, {3, 10, 100, 2});
  for (int k = 0; k < s.centroids.rows(); ++k) CHECK((s.centroids.row(k) - same.row(0)).norm() < 1e-12);

  CHECK_THROWS(proto::kmeans(Mat(0, 3), {}));
}

TEST_CASE("kmeans recovers two separated blobs") {
  std::mt19937_64 rng(8);
  const int n = 200;
  const double sigma = 0.5;
  Mat pts(2 * n, 2);
  Vec a(2), b(2);
  a << -5, 0;
  b << 5, 3;
  pts.topRows(n) = random_mat(n, 2, rng, sigma).rowwise() + a.transpose();
  pts.bottomRows(n) = random_mat(n, 2, rng, sigma).rowwise() + b.transpose();
  // Oracle: the blobs' own sample means.
  const Vec ma = pts.topRows(n).colwise().mean().transpose();
  const Vec mb = pts.bottomRows(n).colwise().mean().transpose();
  const auto r = proto::kmeans(pts, {2, 10, 100, 3});
  const double tol = 3 * sigma / std::sqrt(double(n));
  Vec c0 = r.centroids.row(0).transpose();
  Vec c1 = r.centroids.row(1).transpose();
  if ((c0 - ma).norm() > (c1 - ma).norm()) std::swap(c0, c1);
  CHECK((c0 - ma).norm() < tol);
  CHECK((c1 - mb).norm() < tol);
}

TEST_CASE("style clustering clamps sigma") {
  std::vector<transfer::StyleStats> f;
  for (int i = 0; i < 4; ++i) f.push_back({Vec::Constant(2, i), Vec::Constant(2, 0.1 * i)});
  const auto c = proto::cluster_styles(f, {2, 10, 100, 0});
  CHECK(c.centroids.size() == 2);
  for (const auto& s : c.centroids) CHECK(s.sigma.minCoeff() >= 0.0);
  CHECK_THROWS(proto::cluster_styles({}, {}));
}

TEST_CASE("mae statistics") {
  proto::MaeStat m;
  CHECK_FALSE(m.eligible());
  CHECK(m.count == 0);
  m.record(2);
  m.record(4);
  CHECK(m.mean == doctest::Approx(3.0));
  CHECK(m.count == 2);

  std::mt19937_64 rng(9);
  std::exponential_distribution<double> e(0.2);
  proto::MaeStat big;
  std::vector<double> vals;
  for (int i = 0; i < 1000; ++i) {
    vals.push_back(e(rng));
    big.record(vals.back());
  }
  const double batch = std::accumulate(vals.begin(), vals.end(), 0.0) / vals.size();
  CHECK(std::abs(big.mean - batch) < 1e-9);

  proto::PrototypeStore store;
  store.add_style({Vec::Zero(2), Vec::Ones(2), 1, 0, {}});
  store.record_mae(0, 5.0);
  CHECK(store.style()[0].mae.mean == 5.0);
  CHECK_THROWS_AS(store.record_mae(1, 1.0), std::out_of_range);
}

TEST_CASE("store archive round trip") {
  namespace fs = std::filesystem;
  std::mt19937_64 rng(10);
  proto::PrototypeStore store;
  store.add_style({random_mat(3, 1, rng), random_mat(3, 1, rng).cwiseAbs(), 1, 0, {}});
  store.add_style({random_mat(3, 1, rng), random_mat(3, 1, rng).cwiseAbs(), 2, 1, {}});
  store.record_mae(1, 2.5);
  store.add_noise({random_mat(4, 5, rng), 1, 0});
  const fs::path path = fs::temp_directory_path() / "addp_store_test.arc";
  store.save(path);
  const auto back = proto::PrototypeStore::load(path);
  REQUIRE(back.style().size() == 2);
  REQUIRE(back.noise().size() == 1);
  CHECK(back.style()[1].mu == store.style()[1].mu);
  CHECK(back.style()[1].sigma == store.style()[1].sigma);
  CHECK(back.style()[1].task_id == 2);
  CHECK(back.style()[1].mae.count == 1);
  CHECK(back.style()[1].mae.mean == 2.5);
  CHECK_FALSE(back.style()[0].mae.eligible());
  CHECK(back.noise()[0].n == store.noise()[0].n);
  CHECK(back.task_ids() == std::vector<int>{1, 2});
  fs::remove(path);
}

namespace {

nn::ModelConfig small_model() {
  nn::ModelConfig c;
  c.stage_channels = {4, 8, 8, 8};
  c.mlp_ratio = 2;
  c.head_channels = 4;
  return c;
}

synth::TaskSpec small_spec(std::uint64_t seed, int n_train) {
  synth::TaskSpec s;
  s.n_train_clips = n_train;
  s.n_test_clips = 2;
  s.frames = 32;
  s.height = 16;
  s.width = 16;
  s.seed = seed;
  s.domain.noise_sigma = 0.01;
  return s;
}

}  // namespace

TEST_CASE("task prototype extraction") {
  nn::Model model(small_model());
  proto::PrototypeStore store;
  proto::ExtractOptions opts;
  opts.alpha = 3;

  const auto one = synth::generate_task(small_spec(1, 1), 0);
  auto r = proto::extract_task_prototypes(model, one.train, 1, opts, store);
  CHECK(r.style_ids.size() == 1);
  CHECK(r.noise_ids.size() == 1);
  CHECK(store.style()[0].mae.count == 1);

  const auto three = synth::generate_task(small_spec(2, 3), 1);
  opts.k = 2;
  r = proto::extract_task_prototypes(model, three.train, 2, opts, store);
  CHECK(r.style_ids.size() == 2);
  CHECK(store.style().size() == 3);
  CHECK(store.noise().size() == 3);
  CHECK(store.style_count(2) == 2);
  CHECK(store.noise_count(1) == 1);

  opts.k = 8;
  const std::vector<synth::ClipSample> twins{three.train[0], three.train[0], three.train[0]};
  proto::PrototypeStore s2;
  proto::extract_task_prototypes(model, twins, 1, opts, s2);
  REQUIRE(s2.style().size() >= 1);
  for (const auto& p : s2.style()) {
    CHECK((p.mu - s2.style()[0].mu).norm() < 1e-12);
    CHECK((p.sigma - s2.style()[0].sigma).norm() < 1e-12);
  }
  for (const auto& p : s2.noise()) CHECK((p.n - s2.noise()[0].n).norm() < 1e-12);

  opts.mae_attribution = false;
  proto::PrototypeStore s3;
  proto::extract_task_prototypes(model, one.train, 1, opts, s3);
  CHECK_FALSE(s3.style()[0].mae.eligible());
}

TEST_CASE("style prototypes track the domain rather than the pulse rate") {
  nn::Model model(nn::ModelConfig{});
  synth::TaskSpec a;
  a.domain.noise_sigma = 0.01;
  synth::TaskSpec b = a;
  b.domain.base_color = {0.5, 0.35, 0.28};
  b.domain.illumination_gain = 0.75;

  auto prototype = [&](const synth::TaskSpec& spec, double hr, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<synth::ClipSample> clips;
    for (int i = 0; i < 3; ++i) {
      clips.push_back(synth::make_clip(spec, hr, rng));
    }
    proto::PrototypeStore store;
    proto::ExtractOptions opts;
    opts.k = 1;
    proto::extract_task_prototypes(model, clips, 1, opts, store);
    const auto& p = store.style()[0];
    Vec v(p.mu.size() * 2);
    v << p.mu, p.sigma;
    return v;
  };
  const Vec slow = prototype(a, 60, 1);
  const Vec fast = prototype(a, 120, 2);
  const Vec other = prototype(b, 60, 3);
  const double within = (slow - fast).norm();
  const double across = (slow - other).norm();
  MESSAGE("within-domain " << within << ", across-domain " << across);
  CHECK(within < 0.2 * across);
}
