#pragma once

#include <cstddef>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

namespace addp::signal {

/// A sampled physiological waveform (rPPG trace or model prediction).
struct Waveform {
  std::vector<double> samples;
  double fs = 30.0;

  Waveform() = default;
  Waveform(std::vector<double> s, double rate);

  std::size_t size() const { return samples.size(); }
  /// Throws std::invalid_argument if length < 2, fs <= 0 or a sample is not finite.
  void validate() const;
};

struct Band {
  double lo = 0.66;
  double hi = 3.0;
};

struct HrOptions {
  Band band{};
  // Periodogram length. 0 means the waveform length (no zero padding).
  std::size_t nfft = 0;
};

/// Indices and frequencies of the periodogram bins that fall inside `band`.
struct BandBins {
  std::size_t nfft = 0;
  std::vector<std::size_t> bins;
  std::vector<double> freqs;
};

BandBins band_bins(std::size_t nfft, double fs, Band band);

/// Periodogram |X_k|^2 / N of the mean-removed signal at the given bins.
std::vector<double> periodogram(std::span<const double> x, std::size_t nfft,
                                std::span<const std::size_t> bins);

/// Heart rate in bpm from the periodogram peak inside the band. Ties go to the
/// lower frequency.
double estimate_hr(const Waveform& w, const HrOptions& opts = {});

/// Pearson correlation. Returns 0 when exactly one input is constant.
double pearson_r(std::span<const double> a, std::span<const double> b);

struct MetricReport {
  double std = 0.0;
  double mae = 0.0;
  double rmse = 0.0;
  double r = 0.0;  // NaN when both predictions and targets are constant
  std::size_t n = 0;
};

void to_json(nlohmann::json& j, const MetricReport& rep);
void from_json(const nlohmann::json& j, MetricReport& rep);

MetricReport compute_metrics(std::span<const double> pred_hrs, std::span<const double> gt_hrs);

enum class Metric { kStd, kMae, kRmse, kR };

Metric metric_from_name(const std::string& name);
std::string metric_name(Metric m);
double metric_value(const MetricReport& rep, Metric m);

/// Lower-triangular table p(i, j): metric on task j's test set after training
/// task i (0-based, j <= i).
class ResultMatrix {
 public:
  explicit ResultMatrix(std::size_t n_tasks = 0);

  std::size_t n_tasks() const { return n_; }
  void set(std::size_t i, std::size_t j, const MetricReport& rep);
  bool has(std::size_t i, std::size_t j) const;
  const MetricReport& at(std::size_t i, std::size_t j) const;
  bool complete() const;

  std::string to_csv() const;
  static ResultMatrix from_csv(const std::string& text);

 private:
  std::size_t n_;
  std::vector<std::optional<MetricReport>> cells_;
};

/// Mean of the final row p(N, j) over j for the given metric.
double incremental_performance(const ResultMatrix& m, Metric metric);

/// Natural cubic spline through (source_times, values), evaluated at target_times.
std::vector<double> align_labels(std::span<const double> values,
                                 std::span<const double> source_times,
                                 std::span<const double> target_times);
std::vector<double> align_labels(const Waveform& signal, std::span<const double> source_times,
                                 std::span<const double> target_times);

}  // namespace addp::signal
