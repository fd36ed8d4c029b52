#pragma once

#include <cstdint>
#include <fstream>
#include <optional>
#include <random>

#include "addp/nn/model.hpp"
#include "addp/prototypes.hpp"

namespace addp::augment {

enum class Sampling { kPooled, kPerTask };

Sampling sampling_from_name(const std::string& s);
std::string sampling_name(Sampling s);

struct Options {
  double p = 0.5;
  bool style = true;
  bool noise = true;
  int alpha = 9;
  Sampling sampling = Sampling::kPooled;
};

struct Decision {
  std::optional<std::size_t> style_id;
  std::optional<std::size_t> noise_id;

  bool any() const { return style_id || noise_id; }
};

/// Generator for one clip at one optimizer step.
std::mt19937_64 clip_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t clip);

/// Two independent Bernoulli(p) draws pick whether to apply style and noise
/// replay; each applied replay uses a uniformly drawn prototype. An empty
/// store never augments.
Decision draw(const proto::PrototypeStore& store, const Options& opts, std::mt19937_64& rng);

/// Hooks that apply the decision inside the forward pass. The returned hooks
/// point into `store`, which must outlive them.
nn::Hooks make_hooks(const Decision& d, const proto::PrototypeStore& store, int alpha);

/// JSON-lines record of every decision: {"step", "clip", "style_id", "noise_id"}.
class AuditLog {
 public:
  AuditLog() = default;
  explicit AuditLog(const std::filesystem::path& path);

  bool enabled() const { return out_.is_open(); }
  void write(std::int64_t step, std::int64_t sample_id, const Decision& d);

 private:
  std::ofstream out_;
};

}  // namespace addp::augment
