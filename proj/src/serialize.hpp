#pragma once

// JSON encodings shared by the public stream writers and the pipeline's
// artifact envelopes.

#include <span>
#include <vector>

#include "cdrsteer/cdr.hpp"
#include "cdrsteer/csp.hpp"
#include "json.hpp"

namespace cdrsteer::serialize {

nlohmann::json branch_points(const BranchPointSet& set);
BranchPointSet branch_points(const nlohmann::json& j);

nlohmann::json direction_pairs(std::span<const DirectionPair> pairs);
std::vector<DirectionPair> direction_pairs(const nlohmann::json& j);

}  // namespace cdrsteer::serialize
