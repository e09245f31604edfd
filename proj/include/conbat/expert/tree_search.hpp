#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "conbat/common/error.hpp"

namespace conbat::expert {

struct SearchConfig {
  int horizon = 3;
  std::size_t beam_width = 512;  // frontier cap per depth; larger trees are pruned
};

struct SearchResult {
  double action = 0.0;
  std::size_t action_index = 0;
  double cost = 0.0;
  double violation = 0.0;  // worst violation along the chosen branch
  bool safe = true;        // false when every branch violates the margin
};

/// Exhaustive search over grid^horizon with beam pruning.
///   expand(state, action) -> child state (applies the action for one level)
///   stage(state) -> {cost, violation}; violation > 0 marks an unsafe node
/// Branch cost is the sum of stage costs. The chosen branch is the cheapest
/// safe one, else the one with the smallest worst violation. Ties go to the
/// smallest |first action|, then the smallest grid index.
template <typename State, typename Expand, typename Stage>
SearchResult tree_search(const State& root, std::span<const double> grid, const SearchConfig& cfg, Expand&& expand,
                         Stage&& stage) {
  if (grid.empty()) throw UsageError("tree_search: empty action grid");
  if (cfg.horizon < 1) throw UsageError("tree_search: horizon must be >= 1");

  struct Node {
    State state;
    std::size_t first;
    double cost;
    double violation;
    bool dead;  // a terminal (crashed) state; not expanded further
  };
  std::vector<Node> frontier;
  frontier.reserve(grid.size());
  for (std::size_t a = 0; a < grid.size(); ++a) {
    State child = expand(root, grid[a]);
    const auto [c, v, dead] = stage(child);
    frontier.push_back({std::move(child), a, c, v, dead});
  }
  auto better = [&](const Node& x, const Node& y) {
    const bool xs = x.violation <= 0.0, ys = y.violation <= 0.0;
    if (xs != ys) return xs;
    if (!xs && x.violation != y.violation) return x.violation < y.violation;
    if (x.cost != y.cost) return x.cost < y.cost;
    const double ax = std::abs(grid[x.first]), ay = std::abs(grid[y.first]);
    if (ax != ay) return ax < ay;
    return x.first < y.first;
  };

  for (int depth = 1; depth < cfg.horizon; ++depth) {
    std::vector<Node> next;
    next.reserve(frontier.size() * grid.size());
    for (const auto& node : frontier) {
      if (node.dead) {
        next.push_back(node);
        continue;
      }
      for (std::size_t a = 0; a < grid.size(); ++a) {
        State child = expand(node.state, grid[a]);
        const auto [c, v, dead] = stage(child);
        next.push_back({std::move(child), node.first, node.cost + c, std::max(node.violation, v), dead});
      }
    }
    if (next.size() > cfg.beam_width) {
      std::stable_sort(next.begin(), next.end(), better);
      next.resize(cfg.beam_width);
    }
    frontier = std::move(next);
  }

  const Node* best = &frontier.front();
  for (const auto& n : frontier) {
    if (better(n, *best)) best = &n;
  }
  return {grid[best->first], best->first, best->cost, best->violation, best->violation <= 0.0};
}

}  // namespace conbat::expert
