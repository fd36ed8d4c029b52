#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "addp/nn/model.hpp"
#include "addp/signal.hpp"
#include "addp/synth.hpp"
#include "addp/transfer.hpp"

namespace addp::proto {

using nn::Mat;
using nn::Vec;

/// Running mean of recorded clip MAEs.
struct MaeStat {
  double mean = 0.0;
  std::int64_t count = 0;

  void record(double value);
  bool eligible() const { return count > 0; }
};

struct StylePrototype {
  Vec mu;
  Vec sigma;
  int task_id = 0;
  int cluster_id = 0;
  MaeStat mae;
};

struct NoisePrototype {
  Mat n;
  int task_id = 0;
  int cluster_id = 0;
};

/// Prototypes of every completed task. Ids are positions in `style` / `noise`.
class PrototypeStore {
 public:
  const std::vector<StylePrototype>& style() const { return style_; }
  const std::vector<NoisePrototype>& noise() const { return noise_; }
  bool empty() const { return style_.empty() && noise_.empty(); }

  std::size_t add_style(StylePrototype p);
  std::size_t add_noise(NoisePrototype p);
  void record_mae(std::size_t style_id, double clip_mae);

  std::size_t style_count(int task_id) const;
  std::size_t noise_count(int task_id) const;
  std::vector<int> task_ids() const;

  void save(const std::filesystem::path& path) const;
  static PrototypeStore load(const std::filesystem::path& path);

 private:
  std::vector<StylePrototype> style_;
  std::vector<NoisePrototype> noise_;
};

struct KMeansOptions {
  int k = 8;
  int restarts = 10;
  int max_iter = 100;
  std::uint64_t seed = 0;
};

struct KMeansResult {
  Mat centroids;            // [k, d]
  std::vector<int> labels;  // per point
  double inertia = 0.0;
};

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs by
/// inertia. k is clipped to the number of points. Empty clusters are re-seeded
/// from the point farthest from its centroid.
KMeansResult kmeans(const Mat& points, const KMeansOptions& opts);

struct StyleCentroids {
  std::vector<transfer::StyleStats> centroids;
  std::vector<int> labels;
  // Standardization used for clustering, kept for nearest-prototype queries.
  Vec center, scale;
};

/// Clusters concatenated (mu, sigma) vectors after per-dimension
/// standardization; sigma is clamped at zero after de-standardization.
StyleCentroids cluster_styles(const std::vector<transfer::StyleStats>& feats, const KMeansOptions& opts);
std::vector<Mat> cluster_noise(const std::vector<Mat>& feats, const KMeansOptions& opts);

struct ClipFeatures {
  std::vector<transfer::StyleStats> styles;
  std::vector<Mat> noises;
  std::vector<double> clip_mae;  // |HR(pred) - HR| per clip
};

/// One evaluation-mode forward per clip.
ClipFeatures collect_features(const nn::Model& model, const std::vector<synth::ClipSample>& clips, int alpha,
                              const signal::HrOptions& hr);

struct ExtractOptions {
  int k = 8;
  int alpha = 9;
  std::uint64_t seed = 0;
  // Record each training clip's MAE against its nearest own-task style prototype.
  bool mae_attribution = true;
  signal::HrOptions hr{};
};

struct ExtractResult {
  std::vector<std::size_t> style_ids;
  std::vector<std::size_t> noise_ids;
};

ExtractResult extract_task_prototypes(const nn::Model& model, const std::vector<synth::ClipSample>& train,
                                      int task_id, const ExtractOptions& opts, PrototypeStore& store);

}  // namespace addp::proto
