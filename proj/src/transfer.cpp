#include "addp/transfer.hpp"

#include <Eigen/SVD>
#include <cmath>
#include <stdexcept>
#include <string>

namespace addp::transfer {

StyleStats style_stats(const Mat& h) {
  if (h.cols() < 1) throw std::invalid_argument("style_stats: empty feature");
  const double n = static_cast<double>(h.cols());
  StyleStats s;
  s.mu = h.rowwise().sum() / n;
  s.sigma = ((h.colwise() - s.mu).array().square().rowwise().sum() / n).sqrt().matrix();
  return s;
}

Mat adain(const Mat& h, const Vec& mu, const Vec& sigma, AdainCache* cache) {
  if (mu.size() != h.rows() || sigma.size() != h.rows()) {
    throw std::invalid_argument("adain: prototype has " + std::to_string(mu.size()) + " channels, feature has " +
                                std::to_string(h.rows()));
  }
  const StyleStats own = style_stats(h);
  Mat xhat = h.colwise() - own.mu;
  Vec inv(h.rows());
  std::vector<bool> shift_only(h.rows());
  for (Eigen::Index c = 0; c < h.rows(); ++c) {
    shift_only[c] = own.sigma(c) < kSigmaEps;
    inv(c) = shift_only[c] ? 1.0 : 1.0 / own.sigma(c);
  }
  xhat.array().colwise() *= inv.array();
  Mat y(h.rows(), h.cols());
  for (Eigen::Index c = 0; c < h.rows(); ++c) {
    const double scale = shift_only[c] ? 1.0 : sigma(c);
    y.row(c) = (xhat.row(c).array() * scale + mu(c)).matrix();
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_sigma = inv;
    cache->target_sigma = sigma;
    cache->shift_only = std::move(shift_only);
  }
  return y;
}

Mat adain_backward(const AdainCache& cache, const Mat& dy) {
  const double n = static_cast<double>(dy.cols());
  Mat dx(dy.rows(), dy.cols());
  for (Eigen::Index c = 0; c < dy.rows(); ++c) {
    if (cache.shift_only[c]) {
      dx.row(c) = (dy.row(c).array() - dy.row(c).sum() / n).matrix();
      continue;
    }
    const auto g = (dy.row(c) * cache.target_sigma(c)).eval();
    const auto xh = cache.xhat.row(c);
    const double m1 = g.sum() / n;
    const double m2 = g.dot(xh) / n;
    dx.row(c) = ((g.array() - m1 - xh.array() * m2) * cache.inv_sigma(c)).matrix();
  }
  return dx;
}

namespace {

using Dense = Eigen::MatrixXd;

void check_alpha(const Mat& z, int alpha, const char* who) {
  const auto r = std::min(z.rows(), z.cols());
  if (alpha < 0 || alpha > r) {
    throw std::invalid_argument(std::string(who) + ": alpha must lie in [0, min(C2, T2)]");
  }
  if (!z.allFinite()) throw std::invalid_argument(std::string(who) + ": non-finite feature");
}

Eigen::JacobiSVD<Dense> thin_svd(const Mat& z) {
  return Eigen::JacobiSVD<Dense>(Dense(z), Eigen::ComputeThinU | Eigen::ComputeThinV);
}

// Reconstruct using singular components [from, to).
Mat reconstruct(const Eigen::JacobiSVD<Dense>& svd, Eigen::Index from, Eigen::Index to, Eigen::Index rows,
                Eigen::Index cols) {
  if (to <= from) return Mat::Zero(rows, cols);
  const auto n = to - from;
  const Dense us = svd.matrixU().middleCols(from, n) * svd.singularValues().segment(from, n).asDiagonal();
  return us * svd.matrixV().middleCols(from, n).transpose();
}

}  // namespace

Mat extract_noise(const Mat& z, int alpha) {
  check_alpha(z, alpha, "extract_noise");
  const auto svd = thin_svd(z);
  const auto r = svd.singularValues().size();
  return reconstruct(svd, alpha, r, z.rows(), z.cols());
}

Mat keep_signal(const Mat& z, int alpha) {
  check_alpha(z, alpha, "keep_signal");
  const auto svd = thin_svd(z);
  return reconstruct(svd, 0, alpha, z.rows(), z.cols());
}

Mat mix_noise(const Mat& z, const Mat& noise, int alpha, NoiseMixCache* cache) {
  if (noise.rows() != z.rows() || noise.cols() != z.cols()) {
    throw std::invalid_argument("mix_noise: noise prototype shape does not match the feature");
  }
  check_alpha(z, alpha, "mix_noise");
  const auto svd = thin_svd(z);
  Mat out = reconstruct(svd, 0, alpha, z.rows(), z.cols()) + noise;
  if (cache) {
    cache->u = svd.matrixU().leftCols(alpha);
    cache->v = svd.matrixV().leftCols(alpha);
  }
  return out;
}

Mat mix_noise_backward(const NoiseMixCache& cache, const Mat& dy) {
  // d sigma_i / dz = u_i v_i^T for fixed singular vectors.
  const Eigen::Index a = cache.u.cols();
  Mat dz = Mat::Zero(dy.rows(), dy.cols());
  for (Eigen::Index i = 0; i < a; ++i) {
    const double gi = cache.u.col(i).dot(dy * cache.v.col(i));
    dz.noalias() += gi * cache.u.col(i) * cache.v.col(i).transpose();
  }
  return dz;
}

}  // namespace addp::transfer
