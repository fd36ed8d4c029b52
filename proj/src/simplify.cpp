#include "addp/simplify.hpp"

#include <algorithm>
#include <limits>
#include <stdexcept>

namespace addp::simplify {

std::vector<std::size_t> select_top(const proto::PrototypeStore& store, int m) {
  const auto& ps = store.style();
  std::vector<std::size_t> ids;
  for (std::size_t i = 0; i < ps.size(); ++i) {
    if (ps[i].mae.eligible()) ids.push_back(i);
  }
  std::sort(ids.begin(), ids.end(), [&](std::size_t a, std::size_t b) {
    const auto& pa = ps[a];
    const auto& pb = ps[b];
    if (pa.mae.mean != pb.mae.mean) return pa.mae.mean < pb.mae.mean;
    if (pa.task_id != pb.task_id) return pa.task_id > pb.task_id;
    return pa.cluster_id < pb.cluster_id;
  });
  if (m >= 0 && ids.size() > static_cast<std::size_t>(m)) ids.resize(static_cast<std::size_t>(m));
  return ids;
}

std::optional<std::size_t> select_best_prototype(const proto::PrototypeStore& store) {
  const auto ids = select_top(store, 1);
  if (ids.empty()) return std::nullopt;
  return ids.front();
}

std::size_t nearest(const proto::PrototypeStore& store, const std::vector<std::size_t>& candidates,
                    const transfer::StyleStats& own) {
  if (candidates.empty()) throw std::invalid_argument("nearest: no candidate prototypes");
  std::size_t best = candidates.front();
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t id : candidates) {
    const auto& p = store.style().at(id);
    const double d = (p.mu - own.mu).squaredNorm() + (p.sigma - own.sigma).squaredNorm();
    if (d < bd) {
      bd = d;
      best = id;
    }
  }
  return best;
}

nn::Mat simplify(const nn::Mat& h, const proto::StylePrototype& p) { return transfer::adain(h, p.mu, p.sigma); }

}  // namespace addp::simplify
