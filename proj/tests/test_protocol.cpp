#include <cmath>
#include <filesystem>
#include <numbers>

#include "addp/io.hpp"
#include "addp/protocol.hpp"
#include "doctest.h"
#include "gradcheck.hpp"

using namespace addp;
using protocol::ConfigError;
using protocol::ExperimentConfig;
namespace fs = std::filesystem;

namespace {

std::vector<double> tone(double bpm, int n, double fs = 30.0, double phase = 0.0) {
  std::vector<double> v(n);
  for (int i = 0; i < n; ++i) v[i] = std::sin(2 * std::numbers::pi * bpm / 60.0 * i / fs + phase);
  return v;
}

ExperimentConfig tiny(int n_tasks, protocol::Method method = protocol::Method::kAddp, std::uint64_t seed = 3) {
  ExperimentConfig c;
  c.name = "tiny";
  c.seed = seed;
  c.method = method;
  c.model.stage_channels = {4, 8, 8, 8};
  c.model.mlp_ratio = 2;
  c.model.head_channels = 4;
  c.hyper.alpha = 3;
  c.hyper.k = 2;
  c.hyper.lr = 3e-3;
  c.hyper.batch = 2;
  c.hyper.epochs_initial = 15;
  c.hyper.epochs_incremental = 4;
  c.hyper.hr_nfft = 512;
  const std::array<std::array<double, 3>, 3> colors{{{0.8, 0.6, 0.5}, {0.5, 0.35, 0.28}, {0.9, 0.75, 0.65}}};
  for (int t = 0; t < n_tasks; ++t) {
    protocol::TaskSource s;
    s.spec.name = "t" + std::to_string(t + 1);
    s.spec.domain.base_color = colors[t % 3];
    s.spec.domain.illumination_gain = 0.8 + 0.2 * t;
    s.spec.domain.noise_sigma = 0.01;
    s.spec.frames = 32;
    s.spec.height = s.spec.width = 16;
    s.spec.n_train_clips = 4;
    s.spec.n_test_clips = 2;
    s.spec.seed = 100 + t;
    c.tasks.push_back(s);
  }
  return c;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("addp_protocol_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("negative pearson term") {
  const auto label = tone(72, 160);
  CHECK(loss::rppg_loss(label, label).np == doctest::Approx(0.0).epsilon(1e-6));
  std::vector<double> neg(label.size());
  for (std::size_t i = 0; i < label.size(); ++i) neg[i] = -label[i];
  CHECK(loss::rppg_loss(neg, label).np == doctest::Approx(2.0).epsilon(1e-6));
  const std::vector<double> flat(160, 0.5);
  CHECK(loss::guarded_pearson(flat, label) == doctest::Approx(0.0));
  CHECK(std::isfinite(loss::rppg_loss(flat, label).total));
  CHECK_THROWS(loss::rppg_loss(flat, std::vector<double>(10, 0.0)));
}

TEST_CASE("frequency term is minimal for the label tone") {
  // 90 bpm sits exactly on a periodogram bin for 160 samples at 30 Hz.
  const auto label = tone(90, 160);
  const double at_label = loss::rppg_loss(label, label).freq;
  double best_other = 1e9;
  for (double bpm = 40.0; bpm <= 180.0; bpm += 0.25) {
    if (std::abs(bpm - 90.0) < 1e-9) continue;
    best_other = std::min(best_other, loss::rppg_loss(tone(bpm, 160, 30.0, 0.3), label).freq);
  }
  CHECK(at_label < best_other);
}

TEST_CASE("loss gradient matches finite differences") {
  std::mt19937_64 rng(1);
  const auto label = tone(84, 64);
  for (int trial = 0; trial < 5; ++trial) {
    nn::Mat p = gradcheck::random_mat(1, 64, rng);
    auto as_vec = [&] { return std::vector<double>(p.data(), p.data() + p.size()); };
    const auto v = loss::rppg_loss(as_vec(), label);
    const nn::Mat analytic = Eigen::Map<const nn::Mat>(v.grad.data(), 1, 64);
    auto f = [&] { return loss::rppg_loss(as_vec(), label).total; };
    CHECK(gradcheck::rel_err(analytic, gradcheck::numeric_grad(p, f)) < 1e-4);
  }
}

TEST_CASE("config parsing reports the offending field") {
  const nlohmann::json good = tiny(2);
  const auto back = protocol::config_from_json(good);
  CHECK(protocol::config_hash(back) == protocol::config_hash(tiny(2)));
  CHECK(back.tasks.size() == 2);
  CHECK(back.hyper.alpha == 3);

  auto expect_error = [](nlohmann::json j, const std::string& prefix) {
    try {
      protocol::config_from_json(j);
      FAIL("no error for " << prefix);
    } catch (const ConfigError& e) {
      CHECK_MESSAGE(std::string(e.what()).rfind(prefix, 0) == 0, e.what());
    }
  };
  nlohmann::json j = good;
  j["hyper"]["bogus"] = 1;
  expect_error(j, "hyper.bogus");
  j = good;
  j["hyper"]["lr"] = "fast";
  expect_error(j, "hyper.lr");
  j = good;
  j["hyper"]["alpha"] = 9;
  expect_error(j, "hyper.alpha");
  j = good;
  j["method"] = "magic";
  expect_error(j, "method");
  j = good;
  j["tasks"][1]["n_test_clips"] = 1;
  expect_error(j, "tasks[1].n_test_clips");
  j = good;
  j["tasks"][0]["domain"]["noise_sigma"] = -1;
  expect_error(j, "tasks[0]");
  j = good;
  j["task_order"] = {0, 0};
  expect_error(j, "task_order");
  j = good;
  j["model"]["heads"] = 3;
  expect_error(j, "model.heads");
  j = good;
  j.erase("tasks");
  expect_error(j, "tasks");

  const fs::path dir = scratch("badjson");
  fs::create_directories(dir);
  io::write_text(dir / "c.json", "{ \"name\": ");
  CHECK_THROWS_AS(protocol::load_config(dir / "c.json"), ConfigError);
  CHECK_THROWS_AS(protocol::load_config(dir / "missing.json"), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("default benchmark and ablation grid") {
  const auto c = protocol::default_benchmark(0);
  CHECK_NOTHROW(c.validate());
  CHECK(c.tasks.size() == 3);
  CHECK(c.hyper.alpha <= 9);
  CHECK(protocol::default_ablation_grid().size() == 4);
  nlohmann::json j = tiny(2);
  j["ablation"] = "default";
  CHECK(protocol::config_from_json(j).ablation.size() == 4);
}

TEST_CASE("train_task contracts") {
  const auto cfg = tiny(1);
  const auto ts = protocol::materialize_tasks(cfg);
  nn::Model model(cfg.model);
  proto::PrototypeStore store;
  protocol::TrainContext ctx{cfg, store, nullptr, 0};

  CHECK_THROWS(protocol::train_task(model, {}, 0, nn::Stage::kInitial, false, ctx));
  CHECK_THROWS_AS(protocol::train_task(model, ts.data[0].train, 1, nn::Stage::kIncremental, true, ctx),
                  std::runtime_error);

  auto c2 = cfg;
  c2.hyper.epochs_initial = 8;
  protocol::TrainContext ctx2{c2, store, nullptr, 0};
  const auto logs = protocol::train_task(model, ts.data[0].train, 0, nn::Stage::kInitial, false, ctx2);
  REQUIRE(logs.size() == 8);
  CHECK(logs.back().loss < logs.front().loss);
  CHECK(logs.front().backbone != logs.back().backbone);
  CHECK(ctx2.step == 8 * 2);
  CHECK(store.empty());
}

TEST_CASE("single task run") {
  const auto rec = protocol::run_dil(tiny(1));
  CHECK(rec.matrix.n_tasks() == 1);
  REQUIRE(rec.matrix.has(0, 0));
  CHECK(rec.final_performance.at("mae") == rec.matrix.at(0, 0).mae);
  CHECK(rec.final_performance.at("rmse") == rec.matrix.at(0, 0).rmse);
  CHECK(rec.style_counts == std::vector<std::size_t>{2});
}

TEST_CASE("naive runs skip prototypes and joint fills the final row") {
  const auto naive = protocol::run_dil(tiny(2, protocol::Method::kNaive));
  CHECK(naive.style_counts == std::vector<std::size_t>{0, 0});
  CHECK(naive.matrix.complete());

  const auto joint = protocol::run_dil(tiny(2, protocol::Method::kJoint));
  CHECK_FALSE(joint.matrix.has(0, 0));
  CHECK(joint.matrix.has(1, 0));
  CHECK(joint.matrix.has(1, 1));
  CHECK(joint.final_performance.count("mae") == 1);
  // One pass over the union of both training sets per epoch.
  CHECK(joint.epochs.size() == 15);
}

TEST_CASE("incremental runs keep the backbone frozen and write artifacts") {
  auto cfg = tiny(2);
  cfg.audit = true;
  const fs::path out = scratch("run");
  const auto rec = protocol::run_dil(cfg, out);
  CHECK(rec.style_counts == std::vector<std::size_t>{2, 4});
  CHECK(rec.noise_counts == std::vector<std::size_t>{2, 4});
  std::vector<protocol::EpochLog> inc;
  for (const auto& e : rec.epochs)
    if (e.task == 1) inc.push_back(e);
  REQUIRE(inc.size() == 4);
  const auto& last_initial = rec.epochs[14];
  for (const auto& e : inc) {
    CHECK(e.backbone == last_initial.backbone);
    CHECK(e.adapter != last_initial.adapter);
    CHECK(e.head != last_initial.head);
  }
  for (const char* f : {"config.json", "result_matrix.csv", "metrics.json", "prototypes.arc", "audit.jsonl",
                        "checkpoints/task1.ckpt", "checkpoints/task2.ckpt"}) {
    CHECK_MESSAGE(fs::exists(out / f), f);
  }
  const auto m = signal::ResultMatrix::from_csv(io::read_text(out / "result_matrix.csv"));
  CHECK(m.at(1, 0).mae == doctest::Approx(rec.matrix.at(1, 0).mae).epsilon(1e-9));
  CHECK(protocol::load_config(out / "config.json").hyper.k == 2);
  CHECK(proto::PrototypeStore::load(out / "prototypes.arc").style().size() == 4);
  fs::remove_all(out);
}

TEST_CASE("runs are reproducible") {
  const auto a = protocol::run_dil(tiny(2));
  const auto b = protocol::run_dil(tiny(2));
  CHECK(a.matrix.to_csv() == b.matrix.to_csv());
  CHECK(a.config_hash == b.config_hash);
}

TEST_CASE("ablation rows") {
  auto cfg = tiny(2);
  const fs::path out = scratch("ablation");
  const auto rows = protocol::default_ablation_grid();
  const auto recs = protocol::run_ablation(cfg, rows, out);
  REQUIRE(recs.size() == 4);
  for (const auto& r : rows) CHECK(fs::exists(out / r.name / "result_matrix.csv"));
  const auto naive = protocol::run_dil(tiny(2, protocol::Method::kNaive));
  CHECK(recs[0].matrix.to_csv() == naive.matrix.to_csv());
  for (std::size_t i = 0; i < 2; ++i)
    for (std::size_t j = 0; j <= i; ++j) CHECK(recs[0].matrix.at(i, j).mae == naive.matrix.at(i, j).mae);
  CHECK(recs[1].matrix.to_csv() != naive.matrix.to_csv());
  const std::string table = protocol::summary_table(recs);
  CHECK(table.find("tiny/style_noise") != std::string::npos);
  fs::remove_all(out);
}

TEST_CASE("simplification changes evaluation on a three-task run") {
  auto on = tiny(3);
  auto off = on;
  off.toggles.simplify = false;
  const auto a = protocol::run_dil(on);
  const auto b = protocol::run_dil(off);
  bool differs = false;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j <= i; ++j) differs = differs || a.matrix.at(i, j).mae != b.matrix.at(i, j).mae;
  CHECK(differs);
  CHECK(a.selected.back().has_value());
  CHECK_FALSE(b.selected.back().has_value());
}

TEST_CASE("task order permutes the sequence") {
  auto cfg = tiny(2);
  cfg.task_order = {1, 0};
  const auto ts = protocol::materialize_tasks(cfg);
  CHECK(ts.names == std::vector<std::string>{"t2", "t1"});
  CHECK(ts.data[0].train.front().task_id == 0);
}

TEST_CASE("manifest tasks resolve relative to the config file") {
  const fs::path dir = scratch("manifest");
  const auto cfg = tiny(1);
  const auto data = synth::generate_task(cfg.tasks[0].spec, 0);
  synth::write_task_dataset(data, cfg.tasks[0].spec, dir / "data");
  nlohmann::json j = cfg;
  j["tasks"] = {{{"name", "disk"}, {"manifest", "data/index.json"}, {"window", {{"win", 32}, {"step", 32}}}}};
  io::write_text(dir / "c.json", j.dump());
  const auto loaded = protocol::load_config(dir / "c.json");
  REQUIRE(loaded.tasks[0].manifest.has_value());
  CHECK(*loaded.tasks[0].manifest == dir / "data" / "index.json");
  const auto ts = protocol::materialize_tasks(loaded);
  CHECK(ts.data[0].train.size() == data.train.size());
  CHECK(ts.data[0].test.size() == data.test.size());
  fs::remove_all(dir);
}
