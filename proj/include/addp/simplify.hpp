#pragma once

#include <optional>
#include <vector>

#include "addp/prototypes.hpp"

namespace addp::simplify {

/// Eligible prototype (at least one MAE record) with the lowest mean MAE.
/// Ties go to the latest task, then the lowest cluster id.
std::optional<std::size_t> select_best_prototype(const proto::PrototypeStore& store);

/// Up to m eligible prototypes in the same order of preference.
std::vector<std::size_t> select_top(const proto::PrototypeStore& store, int m);

/// Candidate whose (mu, sigma) is closest to `own` in Euclidean distance.
std::size_t nearest(const proto::PrototypeStore& store, const std::vector<std::size_t>& candidates,
                    const transfer::StyleStats& own);

/// Transfers h to the prototype's style; the same transform as training-time AdaIN.
nn::Mat simplify(const nn::Mat& h, const proto::StylePrototype& p);

}  // namespace addp::simplify
