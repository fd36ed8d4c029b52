#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

namespace addp::nn {

using Real = double;
// Feature maps are [channels, positions] with positions laid out as (t, y, x).
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

struct Shape3 {
  int t = 0;
  int h = 0;
  int w = 0;

  int plane() const { return h * w; }
  int size() const { return t * h * w; }
  bool operator==(const Shape3&) const = default;
};

struct Feature {
  Mat x;
  Shape3 shape;

  int channels() const { return static_cast<int>(x.rows()); }
};

enum class Partition { kBackbone, kAdapter, kHead };

const char* partition_name(Partition p);
Partition partition_from_name(const std::string& s);

/// A trainable tensor. Convolution kernels are stored flattened to 2-D
/// ([out, in * taps]); `shape` records the logical layout for checkpoints.
struct Parameter {
  std::string name;
  Partition part = Partition::kBackbone;
  std::vector<int> shape;
  Mat value;
  Mat grad;
  bool trainable = true;

  Parameter() = default;
  Parameter(std::string n, Partition p, std::vector<int> logical_shape, Eigen::Index rows, Eigen::Index cols)
      : name(std::move(n)), part(p), shape(std::move(logical_shape)), value(Mat::Zero(rows, cols)),
        grad(Mat::Zero(rows, cols)) {}

  Eigen::Index numel() const { return value.size(); }
  void zero_grad() { grad.setZero(); }
};

}  // namespace addp::nn
