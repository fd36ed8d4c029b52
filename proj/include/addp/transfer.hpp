#pragma once

#include <vector>

#include "addp/nn/tensor.hpp"

// Feature-statistics transfer shared by prototype extraction, training-time
// augmentation and test-time simplification.
namespace addp::transfer {

using nn::Mat;
using nn::Vec;

inline constexpr double kSigmaEps = 1e-6;

struct StyleStats {
  Vec mu;
  Vec sigma;
};

/// Channel-wise mean and population standard deviation of h: [C, positions].
StyleStats style_stats(const Mat& h);

struct AdainCache {
  Mat xhat;  // standardized input (centered only for shift-only channels)
  Vec inv_sigma;
  Vec target_sigma;
  std::vector<bool> shift_only;
};

/// Re-standardizes every channel of h to (mu, sigma). Channels whose own
/// sigma is below kSigmaEps are only shifted.
Mat adain(const Mat& h, const Vec& mu, const Vec& sigma, AdainCache* cache = nullptr);
Mat adain_backward(const AdainCache& cache, const Mat& dy);

/// Reconstruction of z with its leading `alpha` singular values removed.
Mat extract_noise(const Mat& z, int alpha);
/// Reconstruction of z from its leading `alpha` singular components only.
Mat keep_signal(const Mat& z, int alpha);

struct NoiseMixCache {
  Mat u;  // [C2, alpha]
  Mat v;  // [T2, alpha]
};

/// keep_signal(z, alpha) + noise. The backward pass treats the singular
/// vectors of z as constants and differentiates the kept singular values.
Mat mix_noise(const Mat& z, const Mat& noise, int alpha, NoiseMixCache* cache = nullptr);
Mat mix_noise_backward(const NoiseMixCache& cache, const Mat& dy);

}  // namespace addp::transfer
