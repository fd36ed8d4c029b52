#include "addp/augment.hpp"

#include <algorithm>
#include <stdexcept>

#include "addp/synth.hpp"
#include "json.hpp"

namespace addp::augment {

Sampling sampling_from_name(const std::string& s) {
  if (s == "pooled") return Sampling::kPooled;
  if (s == "per_task") return Sampling::kPerTask;
  throw std::invalid_argument("unknown sampling '" + s + "' (expected pooled or per_task)");
}

std::string sampling_name(Sampling s) { return s == Sampling::kPooled ? "pooled" : "per_task"; }

std::mt19937_64 clip_rng(std::uint64_t seed, std::uint64_t step, std::uint64_t clip) {
  return std::mt19937_64(synth::derive_seed(seed, step, clip));
}

namespace {

template <class P>
std::optional<std::size_t> pick(const std::vector<P>& protos, Sampling sampling, std::mt19937_64& rng) {
  if (protos.empty()) return std::nullopt;
  if (sampling == Sampling::kPooled) {
    return std::uniform_int_distribution<std::size_t>(0, protos.size() - 1)(rng);
  }
  std::vector<int> tasks;
  for (const auto& p : protos) {
    if (std::find(tasks.begin(), tasks.end(), p.task_id) == tasks.end()) tasks.push_back(p.task_id);
  }
  const int task = tasks[std::uniform_int_distribution<std::size_t>(0, tasks.size() - 1)(rng)];
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < protos.size(); ++i) {
    if (protos[i].task_id == task) ids.push_back(i);
  }
  return ids[std::uniform_int_distribution<std::size_t>(0, ids.size() - 1)(rng)];
}

}  // namespace

Decision draw(const proto::PrototypeStore& store, const Options& opts, std::mt19937_64& rng) {
  if (opts.p < 0.0 || opts.p > 1.0) throw std::invalid_argument("augment: p must lie in [0, 1]");
  Decision d;
  if (store.empty()) return d;
  // Both coins are always tossed so toggling one replay leaves the other's draws unchanged.
  std::uniform_real_distribution<double> coin(0.0, 1.0);
  const bool do_style = coin(rng) < opts.p;
  const bool do_noise = coin(rng) < opts.p;
  std::mt19937_64 style_rng(rng());
  std::mt19937_64 noise_rng(rng());
  if (opts.style && do_style) d.style_id = pick(store.style(), opts.sampling, style_rng);
  if (opts.noise && do_noise) d.noise_id = pick(store.noise(), opts.sampling, noise_rng);
  return d;
}

nn::Hooks make_hooks(const Decision& d, const proto::PrototypeStore& store, int alpha) {
  nn::Hooks h;
  if (d.style_id) {
    const auto& p = store.style().at(*d.style_id);
    h.style_mu = &p.mu;
    h.style_sigma = &p.sigma;
  }
  if (d.noise_id) {
    h.noise = &store.noise().at(*d.noise_id).n;
    h.alpha = alpha;
  }
  return h;
}

AuditLog::AuditLog(const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::out | std::ios::trunc);
  if (!out_) throw std::runtime_error("cannot open audit log " + path.string());
}

void AuditLog::write(std::int64_t step, std::int64_t sample_id, const Decision& d) {
  if (!enabled()) return;
  nlohmann::json j{{"step", step},
                   {"clip", sample_id},
                   {"style_id", d.style_id ? nlohmann::json(*d.style_id) : nlohmann::json(nullptr)},
                   {"noise_id", d.noise_id ? nlohmann::json(*d.noise_id) : nlohmann::json(nullptr)}};
  out_ << j.dump() << '\n';
}

}  // namespace addp::augment
