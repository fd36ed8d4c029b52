#include "addp/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <stdexcept>
#include <string>

#include "addp/io.hpp"

namespace addp::proto {

using nlohmann::json;

void MaeStat::record(double value) {
  if (!std::isfinite(value)) throw std::invalid_argument("record_mae: non-finite value");
  ++count;
  mean += (value - mean) / static_cast<double>(count);
}

std::size_t PrototypeStore::add_style(StylePrototype p) {
  if ((p.sigma.array() < 0.0).any()) throw std::invalid_argument("style prototype: negative sigma");
  style_.push_back(std::move(p));
  return style_.size() - 1;
}

std::size_t PrototypeStore::add_noise(NoisePrototype p) {
  if (!p.n.allFinite()) throw std::invalid_argument("noise prototype: non-finite values");
  noise_.push_back(std::move(p));
  return noise_.size() - 1;
}

void PrototypeStore::record_mae(std::size_t style_id, double clip_mae) {
  if (style_id >= style_.size()) {
    throw std::out_of_range("record_mae: unknown style prototype " + std::to_string(style_id));
  }
  style_[style_id].mae.record(clip_mae);
}

std::size_t PrototypeStore::style_count(int task_id) const {
  return static_cast<std::size_t>(
      std::count_if(style_.begin(), style_.end(), [&](const auto& p) { return p.task_id == task_id; }));
}

std::size_t PrototypeStore::noise_count(int task_id) const {
  return static_cast<std::size_t>(
      std::count_if(noise_.begin(), noise_.end(), [&](const auto& p) { return p.task_id == task_id; }));
}

std::vector<int> PrototypeStore::task_ids() const {
  std::set<int> ids;
  for (const auto& p : style_) ids.insert(p.task_id);
  for (const auto& p : noise_) ids.insert(p.task_id);
  return {ids.begin(), ids.end()};
}

namespace {

io::NdArray to_array(const Mat& m) {
  io::NdArray a;
  a.shape = {static_cast<std::size_t>(m.rows()), static_cast<std::size_t>(m.cols())};
  a.data.assign(m.data(), m.data() + m.size());
  return a;
}

io::NdArray to_array(const Vec& v) {
  io::NdArray a;
  a.shape = {static_cast<std::size_t>(v.size())};
  a.data.assign(v.data(), v.data() + v.size());
  return a;
}

Vec vec_from(const io::NdArray& a) { return Eigen::Map<const Vec>(a.data.data(), static_cast<Eigen::Index>(a.numel())); }

Mat mat_from(const io::NdArray& a) {
  if (a.shape.size() != 2) throw std::runtime_error("prototype archive: expected a 2-D array");
  return Eigen::Map<const Mat>(a.data.data(), static_cast<Eigen::Index>(a.shape[0]),
                               static_cast<Eigen::Index>(a.shape[1]));
}

}  // namespace

void PrototypeStore::save(const std::filesystem::path& path) const {
  io::Archive ar;
  json styles = json::array();
  for (std::size_t i = 0; i < style_.size(); ++i) {
    const auto& p = style_[i];
    const std::string key = "style/" + std::to_string(i);
    ar.put(key + "/mu", to_array(p.mu));
    ar.put(key + "/sigma", to_array(p.sigma));
    styles.push_back({{"id", i},
                      {"task_id", p.task_id},
                      {"cluster_id", p.cluster_id},
                      {"mae_mean", p.mae.eligible() ? json(p.mae.mean) : json(nullptr)},
                      {"mae_count", p.mae.count}});
  }
  json noises = json::array();
  for (std::size_t i = 0; i < noise_.size(); ++i) {
    const auto& p = noise_[i];
    ar.put("noise/" + std::to_string(i) + "/n", to_array(p.n));
    noises.push_back({{"id", i}, {"task_id", p.task_id}, {"cluster_id", p.cluster_id}});
  }
  ar.meta["style"] = styles;
  ar.meta["noise"] = noises;
  io::write_archive(path, ar);
}

PrototypeStore PrototypeStore::load(const std::filesystem::path& path) {
  const io::Archive ar = io::read_archive(path);
  PrototypeStore store;
  for (const auto& e : ar.meta.at("style")) {
    const std::string key = "style/" + std::to_string(e.at("id").get<std::size_t>());
    StylePrototype p{vec_from(ar.get(key + "/mu")), vec_from(ar.get(key + "/sigma")), e.at("task_id").get<int>(),
                     e.at("cluster_id").get<int>(), {}};
    p.mae.count = e.at("mae_count").get<std::int64_t>();
    if (p.mae.count > 0) p.mae.mean = e.at("mae_mean").get<double>();
    store.style_.push_back(std::move(p));
  }
  for (const auto& e : ar.meta.at("noise")) {
    const std::string key = "noise/" + std::to_string(e.at("id").get<std::size_t>()) + "/n";
    store.noise_.push_back({mat_from(ar.get(key)), e.at("task_id").get<int>(), e.at("cluster_id").get<int>()});
  }
  return store;
}

// --- KMeans -----------------------------------------------------------------

namespace {

using Rows = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

double sq_dist(const Rows& a, Eigen::Index i, const Rows& b, Eigen::Index j) {
  return (a.row(i) - b.row(j)).squaredNorm();
}

Rows seed_plus_plus(const Rows& x, int k, std::mt19937_64& rng) {
  const Eigen::Index n = x.rows();
  Rows c(k, x.cols());
  std::vector<double> d2(static_cast<std::size_t>(n), std::numeric_limits<double>::infinity());
  Eigen::Index first = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
  c.row(0) = x.row(first);
  for (int m = 1; m < k; ++m) {
    double total = 0.0;
    for (Eigen::Index i = 0; i < n; ++i) {
      d2[static_cast<std::size_t>(i)] = std::min(d2[static_cast<std::size_t>(i)], sq_dist(x, i, c, m - 1));
      total += d2[static_cast<std::size_t>(i)];
    }
    Eigen::Index pick = 0;
    if (total > 0.0) {
      double u = std::uniform_real_distribution<double>(0.0, total)(rng);
      for (pick = 0; pick < n - 1; ++pick) {
        u -= d2[static_cast<std::size_t>(pick)];
        if (u < 0.0) break;
      }
    } else {
      pick = std::uniform_int_distribution<Eigen::Index>(0, n - 1)(rng);
    }
    c.row(m) = x.row(pick);
  }
  return c;
}

KMeansResult lloyd(const Rows& x, Rows c, int max_iter) {
  const Eigen::Index n = x.rows();
  const Eigen::Index k = c.rows();
  std::vector<int> labels(static_cast<std::size_t>(n), -1);
  std::vector<double> dist(static_cast<std::size_t>(n), 0.0);
  for (int it = 0; it < max_iter; ++it) {
    bool changed = false;
    for (Eigen::Index i = 0; i < n; ++i) {
      int best = 0;
      double bd = std::numeric_limits<double>::infinity();
      for (Eigen::Index j = 0; j < k; ++j) {
        const double d = sq_dist(x, i, c, j);
        if (d < bd) {
          bd = d;
          best = static_cast<int>(j);
        }
      }
      changed = changed || labels[static_cast<std::size_t>(i)] != best;
      labels[static_cast<std::size_t>(i)] = best;
      dist[static_cast<std::size_t>(i)] = bd;
    }
    Rows next = Rows::Zero(k, x.cols());
    std::vector<Eigen::Index> counts(static_cast<std::size_t>(k), 0);
    for (Eigen::Index i = 0; i < n; ++i) {
      next.row(labels[static_cast<std::size_t>(i)]) += x.row(i);
      ++counts[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)])];
    }
    for (Eigen::Index j = 0; j < k; ++j) {
      if (counts[static_cast<std::size_t>(j)] > 0) {
        next.row(j) /= static_cast<double>(counts[static_cast<std::size_t>(j)]);
        continue;
      }
      const auto far = std::max_element(dist.begin(), dist.end()) - dist.begin();
      next.row(j) = x.row(far);
      dist[static_cast<std::size_t>(far)] = 0.0;
      changed = true;
    }
    c = std::move(next);
    if (!changed && it > 0) break;
  }
  KMeansResult r;
  r.inertia = 0.0;
  for (Eigen::Index i = 0; i < n; ++i) {
    int best = 0;
    double bd = std::numeric_limits<double>::infinity();
    for (Eigen::Index j = 0; j < k; ++j) {
      const double d = sq_dist(x, i, c, j);
      if (d < bd) {
        bd = d;
        best = static_cast<int>(j);
      }
    }
    labels[static_cast<std::size_t>(i)] = best;
    r.inertia += bd;
  }
  r.centroids = std::move(c);
  r.labels = std::move(labels);
  return r;
}

}  // namespace

KMeansResult kmeans(const Mat& points, const KMeansOptions& opts) {
  if (points.rows() == 0) throw std::invalid_argument("kmeans: no features to cluster");
  if (opts.k < 1) throw std::invalid_argument("kmeans: k must be >= 1");
  if (!points.allFinite()) throw std::invalid_argument("kmeans: non-finite features");
  const int k = static_cast<int>(std::min<Eigen::Index>(opts.k, points.rows()));
  std::mt19937_64 rng(opts.seed);
  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  for (int r = 0; r < std::max(1, opts.restarts); ++r) {
    KMeansResult cur = lloyd(points, seed_plus_plus(points, k, rng), opts.max_iter);
    if (cur.inertia < best.inertia) best = std::move(cur);
  }
  return best;
}

StyleCentroids cluster_styles(const std::vector<transfer::StyleStats>& feats, const KMeansOptions& opts) {
  if (feats.empty()) throw std::invalid_argument("cluster_styles: no features to cluster");
  const Eigen::Index c = feats.front().mu.size();
  Mat x(static_cast<Eigen::Index>(feats.size()), 2 * c);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (feats[i].mu.size() != c || feats[i].sigma.size() != c) {
      throw std::invalid_argument("cluster_styles: inconsistent channel counts");
    }
    x.row(static_cast<Eigen::Index>(i)) << feats[i].mu.transpose(), feats[i].sigma.transpose();
  }
  StyleCentroids out;
  out.center = x.colwise().mean().transpose();
  out.scale = ((x.rowwise() - out.center.transpose()).array().square().colwise().mean()).sqrt().transpose();
  for (Eigen::Index d = 0; d < out.scale.size(); ++d) {
    if (out.scale(d) < 1e-12) out.scale(d) = 1.0;
  }
  Mat xs = x.rowwise() - out.center.transpose();
  xs.array().rowwise() /= out.scale.transpose().array();

  const KMeansResult km = kmeans(xs, opts);
  out.labels = km.labels;
  for (Eigen::Index j = 0; j < km.centroids.rows(); ++j) {
    const Vec v = km.centroids.row(j).transpose().cwiseProduct(out.scale) + out.center;
    out.centroids.push_back({v.head(c), v.tail(c).cwiseMax(0.0)});
  }
  return out;
}

std::vector<Mat> cluster_noise(const std::vector<Mat>& feats, const KMeansOptions& opts) {
  if (feats.empty()) throw std::invalid_argument("cluster_noise: no features to cluster");
  const Eigen::Index r = feats.front().rows(), c = feats.front().cols();
  Mat x(static_cast<Eigen::Index>(feats.size()), r * c);
  for (std::size_t i = 0; i < feats.size(); ++i) {
    if (feats[i].rows() != r || feats[i].cols() != c) {
      throw std::invalid_argument("cluster_noise: inconsistent feature shapes");
    }
    x.row(static_cast<Eigen::Index>(i)) = Eigen::Map<const Eigen::RowVectorXd>(feats[i].data(), r * c);
  }
  const KMeansResult km = kmeans(x, opts);
  std::vector<Mat> out;
  for (Eigen::Index j = 0; j < km.centroids.rows(); ++j) {
    out.push_back(Eigen::Map<const Mat>(km.centroids.row(j).data(), r, c));
  }
  return out;
}

// --- extraction -------------------------------------------------------------

ClipFeatures collect_features(const nn::Model& model, const std::vector<synth::ClipSample>& clips, int alpha,
                              const signal::HrOptions& hr) {
  ClipFeatures f;
  for (const auto& clip : clips) {
    const nn::Prediction p = model.infer(clip.video);
    f.styles.push_back(transfer::style_stats(p.taps.h.x));
    f.noises.push_back(transfer::extract_noise(p.taps.z, alpha));
    const double est = signal::estimate_hr(signal::Waveform(p.pred, clip.label.fs), hr);
    f.clip_mae.push_back(std::abs(est - clip.hr));
  }
  return f;
}

ExtractResult extract_task_prototypes(const nn::Model& model, const std::vector<synth::ClipSample>& train,
                                      int task_id, const ExtractOptions& opts, PrototypeStore& store) {
  if (train.empty()) throw std::invalid_argument("extract_task_prototypes: empty training set");
  const ClipFeatures f = collect_features(model, train, opts.alpha, opts.hr);
  const KMeansOptions km{opts.k, 10, 100, opts.seed};
  const StyleCentroids sc = cluster_styles(f.styles, km);
  const std::vector<Mat> nc = cluster_noise(f.noises, km);

  ExtractResult r;
  for (std::size_t j = 0; j < sc.centroids.size(); ++j) {
    r.style_ids.push_back(
        store.add_style({sc.centroids[j].mu, sc.centroids[j].sigma, task_id, static_cast<int>(j), {}}));
  }
  for (std::size_t j = 0; j < nc.size(); ++j) {
    r.noise_ids.push_back(store.add_noise({nc[j], task_id, static_cast<int>(j)}));
  }
  if (opts.mae_attribution) {
    // The final KMeans assignment is each clip's nearest centroid.
    for (std::size_t i = 0; i < train.size(); ++i) {
      store.record_mae(r.style_ids[static_cast<std::size_t>(sc.labels[i])], f.clip_mae[i]);
    }
  }
  return r;
}

}  // namespace addp::proto
