#pragma once

#include <cstddef>
#include <vector>

#include "addp/signal.hpp"

namespace addp::loss {

struct Options {
  double lambda_freq = 1.0;
  double fs = 30.0;
  signal::Band band{};
  // Periodogram length for the frequency term; 0 means the clip length.
  std::size_t nfft = 0;
  double eps = 1e-8;
};

struct Value {
  double total = 0.0;
  double np = 0.0;    // 1 - r
  double freq = 0.0;  // spectral cross-entropy
  std::vector<double> grad;  // dL/dpred
};

/// Negative Pearson plus cross-entropy between the softmax of the
/// sum-normalized in-band periodogram of `pred` and the label's peak bin.
Value rppg_loss(const std::vector<double>& pred, const std::vector<double>& label, const Options& opts = {});

/// Correlation with eps added to both sums of squares, so a constant input
/// gives r = 0 instead of a division by zero.
double guarded_pearson(const std::vector<double>& a, const std::vector<double>& b, double eps = 1e-8);

}  // namespace addp::loss
