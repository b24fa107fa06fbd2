#pragma once

#include <vector>

namespace kalos {

/// Minimum-cost assignment for an n x m cost matrix with n <= m (Kuhn-Munkres
/// with potentials, O(n^2 m)). Returns the column chosen for each row.
std::vector<int> hungarian(const std::vector<std::vector<double>>& cost);

}  // namespace kalos
