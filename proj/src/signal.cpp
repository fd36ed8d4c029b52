#include "addp/signal.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace addp::signal {

Waveform::Waveform(std::vector<double> s, double rate) : samples(std::move(s)), fs(rate) {}

void Waveform::validate() const {
  if (samples.size() < 2) throw std::invalid_argument("waveform: length must be >= 2");
  if (!(fs > 0.0) || !std::isfinite(fs)) throw std::invalid_argument("waveform: fs must be > 0");
  for (double v : samples) {
    if (!std::isfinite(v)) throw std::invalid_argument("waveform: non-finite sample");
  }
}

BandBins band_bins(std::size_t nfft, double fs, Band band) {
  BandBins out;
  out.nfft = nfft;
  for (std::size_t k = 1; k <= nfft / 2; ++k) {
    const double f = static_cast<double>(k) * fs / static_cast<double>(nfft);
    if (f >= band.lo && f <= band.hi) {
      out.bins.push_back(k);
      out.freqs.push_back(f);
    }
  }
  return out;
}

std::vector<double> periodogram(std::span<const double> x, std::size_t nfft,
                                std::span<const std::size_t> bins) {
  const std::size_t n = x.size();
  const double mean = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(n);
  std::vector<double> power(bins.size());
  const double two_pi = 2.0 * std::numbers::pi;
  for (std::size_t b = 0; b < bins.size(); ++b) {
    const double w = two_pi * static_cast<double>(bins[b]) / static_cast<double>(nfft);
    double re = 0.0, im = 0.0;
    for (std::size_t t = 0; t < n; ++t) {
      const double v = x[t] - mean;
      re += v * std::cos(w * static_cast<double>(t));
      im -= v * std::sin(w * static_cast<double>(t));
    }
    power[b] = (re * re + im * im) / static_cast<double>(n);
  }
  return power;
}

double estimate_hr(const Waveform& w, const HrOptions& opts) {
  w.validate();
  if (!(opts.band.lo > 0.0) || !(opts.band.hi > opts.band.lo)) {
    throw std::invalid_argument("estimate_hr: invalid band");
  }
  const std::size_t nfft = std::max(opts.nfft, w.size());
  const BandBins bb = band_bins(nfft, w.fs, opts.band);
  if (bb.bins.empty()) throw std::invalid_argument("band unresolvable at this length/fs");
  const std::vector<double> p = periodogram(w.samples, nfft, bb.bins);
  std::size_t best = 0;
  for (std::size_t i = 1; i < p.size(); ++i) {
    if (p[i] > p[best]) best = i;  // strict: ties keep the lower frequency
  }
  return 60.0 * bb.freqs[best];
}

double pearson_r(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) throw std::invalid_argument("pearson_r: length mismatch");
  if (a.size() < 2) throw std::invalid_argument("pearson_r: need at least 2 samples");
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(a.begin(), a.end(), 0.0) / n;
  const double mb = std::accumulate(b.begin(), b.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double da = a[i] - ma;
    const double db = b[i] - mb;
    sab += da * db;
    saa += da * da;
    sbb += db * db;
  }
  if (saa == 0.0 && sbb == 0.0) throw std::invalid_argument("undefined correlation");
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return std::clamp(sab / std::sqrt(saa * sbb), -1.0, 1.0);
}

MetricReport compute_metrics(std::span<const double> pred_hrs, std::span<const double> gt_hrs) {
  if (pred_hrs.size() != gt_hrs.size()) throw std::invalid_argument("compute_metrics: length mismatch");
  if (pred_hrs.size() < 2) throw std::invalid_argument("compute_metrics: need at least 2 pairs");
  const double n = static_cast<double>(pred_hrs.size());
  double sum = 0.0, sum_abs = 0.0, sum_sq = 0.0;
  for (std::size_t i = 0; i < pred_hrs.size(); ++i) {
    const double e = pred_hrs[i] - gt_hrs[i];
    sum += e;
    sum_abs += std::abs(e);
    sum_sq += e * e;
  }
  const double mean = sum / n;
  double var = 0.0;
  for (std::size_t i = 0; i < pred_hrs.size(); ++i) {
    const double d = pred_hrs[i] - gt_hrs[i] - mean;
    var += d * d;
  }
  MetricReport rep;
  rep.n = pred_hrs.size();
  rep.mae = sum_abs / n;
  rep.rmse = std::sqrt(sum_sq / n);
  rep.std = std::sqrt(var / n);
  try {
    rep.r = pearson_r(pred_hrs, gt_hrs);
  } catch (const std::invalid_argument&) {
    rep.r = std::numeric_limits<double>::quiet_NaN();
  }
  return rep;
}

void to_json(nlohmann::json& j, const MetricReport& rep) {
  j = nlohmann::json{{"std", rep.std}, {"mae", rep.mae}, {"rmse", rep.rmse}, {"n", rep.n}};
  if (std::isnan(rep.r)) {
    j["r"] = nullptr;
  } else {
    j["r"] = rep.r;
  }
}

void from_json(const nlohmann::json& j, MetricReport& rep) {
  rep.std = j.at("std").get<double>();
  rep.mae = j.at("mae").get<double>();
  rep.rmse = j.at("rmse").get<double>();
  rep.r = j.at("r").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("r").get<double>();
  rep.n = j.at("n").get<std::size_t>();
}

Metric metric_from_name(const std::string& name) {
  if (name == "std") return Metric::kStd;
  if (name == "mae") return Metric::kMae;
  if (name == "rmse") return Metric::kRmse;
  if (name == "r") return Metric::kR;
  throw std::invalid_argument("unknown metric: " + name);
}

std::string metric_name(Metric m) {
  switch (m) {
    case Metric::kStd: return "std";
    case Metric::kMae: return "mae";
    case Metric::kRmse: return "rmse";
    case Metric::kR: return "r";
  }
  return "?";
}

double metric_value(const MetricReport& rep, Metric m) {
  switch (m) {
    case Metric::kStd: return rep.std;
    case Metric::kMae: return rep.mae;
    case Metric::kRmse: return rep.rmse;
    case Metric::kR: return rep.r;
  }
  return 0.0;
}

ResultMatrix::ResultMatrix(std::size_t n_tasks) : n_(n_tasks), cells_(n_tasks * n_tasks) {}

void ResultMatrix::set(std::size_t i, std::size_t j, const MetricReport& rep) {
  if (i >= n_ || j > i) throw std::out_of_range("ResultMatrix: entry must satisfy j <= i < n");
  cells_[i * n_ + j] = rep;
}

bool ResultMatrix::has(std::size_t i, std::size_t j) const {
  return i < n_ && j <= i && cells_[i * n_ + j].has_value();
}

const MetricReport& ResultMatrix::at(std::size_t i, std::size_t j) const {
  if (!has(i, j)) throw std::out_of_range("ResultMatrix: missing entry");
  return *cells_[i * n_ + j];
}

bool ResultMatrix::complete() const {
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (!has(i, j)) return false;
    }
  }
  return true;
}

namespace {
constexpr Metric kAllMetrics[] = {Metric::kStd, Metric::kMae, Metric::kRmse, Metric::kR};
}

// One line per (after-task, metric); columns are the evaluated tasks, 1-based.
std::string ResultMatrix::to_csv() const {
  std::ostringstream os;
  os.precision(17);
  os << "i,metric";
  for (std::size_t j = 0; j < n_; ++j) os << ',' << (j + 1);
  os << '\n';
  for (std::size_t i = 0; i < n_; ++i) {
    for (Metric m : kAllMetrics) {
      os << (i + 1) << ',' << metric_name(m);
      for (std::size_t j = 0; j < n_; ++j) {
        os << ',';
        if (has(i, j)) {
          const double v = metric_value(at(i, j), m);
          if (!std::isnan(v)) os << v;
        }
      }
      os << '\n';
    }
    // n is shared by all metrics of a cell
    os << (i + 1) << ",n";
    for (std::size_t j = 0; j < n_; ++j) {
      os << ',';
      if (has(i, j)) os << at(i, j).n;
    }
    os << '\n';
  }
  return os.str();
}

ResultMatrix ResultMatrix::from_csv(const std::string& text) {
  std::istringstream is(text);
  std::string line;
  if (!std::getline(is, line)) throw std::invalid_argument("result matrix csv: empty");
  const auto split = [](const std::string& l) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream ls(l);
    while (std::getline(ls, cell, ',')) out.push_back(cell);
    if (!l.empty() && l.back() == ',') out.emplace_back();
    return out;
  };
  const auto header = split(line);
  if (header.size() < 3 || header[0] != "i" || header[1] != "metric") {
    throw std::invalid_argument("result matrix csv: bad header");
  }
  const std::size_t n = header.size() - 2;
  std::vector<std::vector<std::optional<MetricReport>>> cells(n, std::vector<std::optional<MetricReport>>(n));
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto row = split(line);
    if (row.size() != n + 2) throw std::invalid_argument("result matrix csv: ragged row");
    const std::size_t i = std::stoul(row[0]) - 1;
    if (i >= n) throw std::invalid_argument("result matrix csv: row index out of range");
    for (std::size_t j = 0; j < n; ++j) {
      const std::string& cell = row[j + 2];
      if (j > i) continue;
      auto& slot = cells[i][j];
      if (!slot) slot = MetricReport{};
      if (row[1] == "n") {
        if (!cell.empty()) slot->n = std::stoul(cell);
        continue;
      }
      const double v = cell.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(cell);
      switch (metric_from_name(row[1])) {
        case Metric::kStd: slot->std = v; break;
        case Metric::kMae: slot->mae = v; break;
        case Metric::kRmse: slot->rmse = v; break;
        case Metric::kR: slot->r = v; break;
      }
    }
  }
  ResultMatrix m(n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j <= i; ++j) {
      if (cells[i][j] && cells[i][j]->n > 0) m.set(i, j, *cells[i][j]);
    }
  }
  return m;
}

double incremental_performance(const ResultMatrix& m, Metric metric) {
  const std::size_t n = m.n_tasks();
  if (n == 0) throw std::invalid_argument("incremental_performance: empty matrix");
  double sum = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    if (!m.has(n - 1, j)) throw std::invalid_argument("incremental_performance: missing entries in final row");
    sum += metric_value(m.at(n - 1, j), metric);
  }
  return sum / static_cast<double>(n);
}

std::vector<double> align_labels(std::span<const double> values, std::span<const double> source_times,
                                 std::span<const double> target_times) {
  const std::size_t n = source_times.size();
  if (values.size() != n) throw std::invalid_argument("align_labels: values/times length mismatch");
  if (n < 2) throw std::invalid_argument("align_labels: need at least 2 source samples");
  for (std::size_t i = 1; i < n; ++i) {
    if (!(source_times[i] > source_times[i - 1])) {
      throw std::invalid_argument("align_labels: source times must be strictly increasing");
    }
  }
  const double t0 = source_times.front();
  const double t1 = source_times.back();
  for (double t : target_times) {
    if (!(t >= t0 && t <= t1)) throw std::invalid_argument("align_labels: extrapolation requested");
  }

  // Natural spline second derivatives via the Thomas algorithm.
  std::vector<double> m(n, 0.0);
  if (n > 2) {
    const std::size_t k = n - 2;
    std::vector<double> diag(k), upper(k), rhs(k);
    for (std::size_t i = 1; i + 1 < n; ++i) {
      const double h0 = source_times[i] - source_times[i - 1];
      const double h1 = source_times[i + 1] - source_times[i];
      diag[i - 1] = 2.0 * (h0 + h1);
      upper[i - 1] = h1;
      rhs[i - 1] = 6.0 * ((values[i + 1] - values[i]) / h1 - (values[i] - values[i - 1]) / h0);
    }
    for (std::size_t i = 1; i < k; ++i) {
      const double lower = source_times[i + 1] - source_times[i];  // h_{i}
      const double w = lower / diag[i - 1];
      diag[i] -= w * upper[i - 1];
      rhs[i] -= w * rhs[i - 1];
    }
    m[k] = rhs[k - 1] / diag[k - 1];
    for (std::size_t i = k - 1; i-- > 0;) {
      m[i + 1] = (rhs[i] - upper[i] * m[i + 2]) / diag[i];
    }
  }

  std::vector<double> out;
  out.reserve(target_times.size());
  for (double t : target_times) {
    auto it = std::upper_bound(source_times.begin(), source_times.end(), t);
    std::size_t hi = static_cast<std::size_t>(it - source_times.begin());
    hi = std::clamp<std::size_t>(hi, 1, n - 1);
    const std::size_t lo = hi - 1;
    const double h = source_times[hi] - source_times[lo];
    const double a = (source_times[hi] - t) / h;
    const double b = (t - source_times[lo]) / h;
    out.push_back(a * values[lo] + b * values[hi] +
                  ((a * a * a - a) * m[lo] + (b * b * b - b) * m[hi]) * h * h / 6.0);
  }
  return out;
}

std::vector<double> align_labels(const Waveform& signal, std::span<const double> source_times,
                                 std::span<const double> target_times) {
  return align_labels(signal.samples, source_times, target_times);
}

}  // namespace addp::signal
