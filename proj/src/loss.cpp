#include "addp/loss.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace addp::loss {

namespace {

std::vector<double> centered(const std::vector<double>& x) {
  const double m = std::accumulate(x.begin(), x.end(), 0.0) / static_cast<double>(x.size());
  std::vector<double> c(x.size());
  std::transform(x.begin(), x.end(), c.begin(), [m](double v) { return v - m; });
  return c;
}

}  // namespace

double guarded_pearson(const std::vector<double>& a, const std::vector<double>& b, double eps) {
  if (a.size() != b.size() || a.size() < 2) throw std::invalid_argument("guarded_pearson: length mismatch");
  const auto ca = centered(a);
  const auto cb = centered(b);
  const double saa = std::inner_product(ca.begin(), ca.end(), ca.begin(), 0.0) + eps;
  const double sbb = std::inner_product(cb.begin(), cb.end(), cb.begin(), 0.0) + eps;
  return std::inner_product(ca.begin(), ca.end(), cb.begin(), 0.0) / std::sqrt(saa * sbb);
}

Value rppg_loss(const std::vector<double>& pred, const std::vector<double>& label, const Options& opts) {
  const std::size_t n = pred.size();
  if (label.size() != n) throw std::invalid_argument("loss: prediction and label lengths differ");
  if (n < 2) throw std::invalid_argument("loss: need at least 2 samples");
  Value v;
  v.grad.assign(n, 0.0);

  const auto a = centered(pred);
  const auto b = centered(label);
  const double saa = std::inner_product(a.begin(), a.end(), a.begin(), 0.0) + opts.eps;
  const double sbb = std::inner_product(b.begin(), b.end(), b.begin(), 0.0) + opts.eps;
  const double c = std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
  const double denom = std::sqrt(saa * sbb);
  const double r = c / denom;
  v.np = 1.0 - r;
  // a and b are already centered, so the centering projection is a no-op here.
  for (std::size_t i = 0; i < n; ++i) v.grad[i] = -(b[i] / denom - c * a[i] / (saa * denom));

  if (opts.lambda_freq != 0.0) {
    const std::size_t nfft = opts.nfft == 0 ? n : opts.nfft;
    const signal::BandBins bb = signal::band_bins(nfft, opts.fs, opts.band);
    if (bb.bins.empty()) throw std::invalid_argument("loss: band unresolvable at this length/fs");
    const std::size_t k = bb.bins.size();
    const auto target_power = signal::periodogram(label, nfft, bb.bins);
    const std::size_t target =
        static_cast<std::size_t>(std::max_element(target_power.begin(), target_power.end()) - target_power.begin());

    std::vector<double> re(k, 0.0), im(k, 0.0), power(k);
    for (std::size_t j = 0; j < k; ++j) {
      const double w = 2.0 * std::numbers::pi * static_cast<double>(bb.bins[j]) / static_cast<double>(nfft);
      for (std::size_t t = 0; t < n; ++t) {
        re[j] += a[t] * std::cos(w * static_cast<double>(t));
        im[j] -= a[t] * std::sin(w * static_cast<double>(t));
      }
      power[j] = (re[j] * re[j] + im[j] * im[j]) / static_cast<double>(n);
    }
    const double s = std::accumulate(power.begin(), power.end(), 0.0) + opts.eps;
    std::vector<double> q(k);
    for (std::size_t j = 0; j < k; ++j) q[j] = power[j] / s;
    const double qmax = *std::max_element(q.begin(), q.end());
    double z = 0.0;
    for (double x : q) z += std::exp(x - qmax);
    const double lse = qmax + std::log(z);
    v.freq = lse - q[target];

    // dL/dq -> dL/dP -> dL/dx
    std::vector<double> gq(k);
    for (std::size_t j = 0; j < k; ++j) gq[j] = std::exp(q[j] - lse) - (j == target ? 1.0 : 0.0);
    double gp_dot = 0.0;
    for (std::size_t j = 0; j < k; ++j) gp_dot += gq[j] * power[j];
    std::vector<double> gx(n, 0.0);
    for (std::size_t j = 0; j < k; ++j) {
      const double gp = gq[j] / s - gp_dot / (s * s);
      const double w = 2.0 * std::numbers::pi * static_cast<double>(bb.bins[j]) / static_cast<double>(nfft);
      const double scale = opts.lambda_freq * gp * 2.0 / static_cast<double>(n);
      for (std::size_t t = 0; t < n; ++t) {
        gx[t] += scale * (re[j] * std::cos(w * static_cast<double>(t)) - im[j] * std::sin(w * static_cast<double>(t)));
      }
    }
    const double mean = std::accumulate(gx.begin(), gx.end(), 0.0) / static_cast<double>(n);
    for (std::size_t t = 0; t < n; ++t) v.grad[t] += gx[t] - mean;
  }
  v.total = v.np + opts.lambda_freq * v.freq;
  return v;
}

}  // namespace addp::loss
