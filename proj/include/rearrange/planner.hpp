#pragma once

#include <optional>
#include <queue>

#include "rearrange/env.hpp"

namespace rearrange {

struct GridCell {
  int x = 0;
  int y = 0;
  bool operator==(const GridCell& o) const { return x == o.x && y == o.y; }
};

// 0.25 m occupancy grid over the arena with obstacles inflated by the base
// radius plus a safety margin, so paths over cell centers are drivable.
class OccupancyGrid {
 public:
  static constexpr double kCell = 0.25;

  static OccupancyGrid build(const EpisodeSpec& spec, const EnvParams& params,
                             double margin = 0.15) {
    OccupancyGrid g;
    g.n_ = int(std::lround(params.arena / kCell));
    g.blocked_.assign(size_t(g.n_) * size_t(g.n_), 0);
    const double r = params.base_radius + margin;
    for (int y = 0; y < g.n_; ++y) {
      for (int x = 0; x < g.n_; ++x) {
        const Vec2 c = g.center_of({x, y});
        bool blocked = c.x < r || c.y < r || c.x > params.arena - r || c.y > params.arena - r;
        for (const Rect& ob : spec.obstacles)
          blocked = blocked || ob.expanded(r).contains(c);
        for (const Receptacle& rec : spec.receptacles)
          blocked = blocked || rec.body.expanded(r).contains(c);
        g.blocked_[size_t(y) * size_t(g.n_) + size_t(x)] = blocked ? 1 : 0;
      }
    }
    return g;
  }

  int size() const { return n_; }
  bool in_bounds(const GridCell& c) const { return c.x >= 0 && c.y >= 0 && c.x < n_ && c.y < n_; }
  bool blocked(const GridCell& c) const {
    return blocked_[size_t(c.y) * size_t(n_) + size_t(c.x)] != 0;
  }
  bool free(const GridCell& c) const { return in_bounds(c) && !blocked(c); }

  GridCell cell_of(const Vec2& p) const {
    return {int(std::floor(p.x / kCell)), int(std::floor(p.y / kCell))};
  }
  Vec2 center_of(const GridCell& c) const {
    return {(c.x + 0.5) * kCell, (c.y + 0.5) * kCell};
  }

  // Nearest free cell to a point within max_radius (meters); scans cells in a
  // deterministic ring order.
  std::optional<GridCell> nearest_free(const Vec2& p, double max_radius) const {
    const GridCell c0 = cell_of(p);
    const int rr = int(std::ceil(max_radius / kCell));
    std::optional<GridCell> best;
    double best_d = max_radius;
    for (int dy = -rr; dy <= rr; ++dy) {
      for (int dx = -rr; dx <= rr; ++dx) {
        GridCell c{c0.x + dx, c0.y + dy};
        if (!free(c)) continue;
        const double d = dist(center_of(c), p);
        if (d < best_d - 1e-12) {
          best_d = d;
          best = c;
        }
      }
    }
    return best;
  }

  // Flood fill over 8-connected free cells.
  std::vector<uint8_t> reachable_from(const GridCell& start) const {
    std::vector<uint8_t> seen(size_t(n_) * size_t(n_), 0);
    if (!free(start)) return seen;
    std::vector<GridCell> stack = {start};
    seen[size_t(start.y) * size_t(n_) + size_t(start.x)] = 1;
    while (!stack.empty()) {
      GridCell c = stack.back();
      stack.pop_back();
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) {
          if (dx == 0 && dy == 0) continue;
          GridCell nb{c.x + dx, c.y + dy};
          if (!free(nb)) continue;
          uint8_t& flag = seen[size_t(nb.y) * size_t(n_) + size_t(nb.x)];
          if (!flag) {
            flag = 1;
            stack.push_back(nb);
          }
        }
    }
    return seen;
  }

 private:
  int n_ = 0;
  std::vector<uint8_t> blocked_;
};

// Shortest 8-connected path. Hop count is minimized first (so lengths agree
// with plain breadth-first search), octile length breaks ties toward natural
// diagonal routes. Returns nullopt when the goal is unreachable; an empty
// path when start == goal.
inline std::optional<std::vector<GridCell>> plan_path(const OccupancyGrid& grid,
                                                      const GridCell& start,
                                                      const GridCell& goal) {
  if (!grid.free(start) || !grid.free(goal)) return std::nullopt;
  if (start == goal) return std::vector<GridCell>{};

  const int n = grid.size();
  const double kHopWeight = 1024.0;
  auto idx = [n](const GridCell& c) { return size_t(c.y) * size_t(n) + size_t(c.x); };
  auto heuristic = [&](const GridCell& c) {
    const int dx = std::abs(c.x - goal.x), dy = std::abs(c.y - goal.y);
    const double octile = double(std::max(dx, dy)) + (M_SQRT2 - 1.0) * double(std::min(dx, dy));
    return kHopWeight * double(std::max(dx, dy)) + octile;
  };

  std::vector<double> g_cost(size_t(n) * size_t(n), std::numeric_limits<double>::infinity());
  std::vector<int> parent(size_t(n) * size_t(n), -1);
  using QItem = std::pair<double, size_t>;  // (f, cell index): index breaks ties
  std::priority_queue<QItem, std::vector<QItem>, std::greater<QItem>> open;

  g_cost[idx(start)] = 0.0;
  open.push({heuristic(start), idx(start)});
  while (!open.empty()) {
    auto [f, ci] = open.top();
    open.pop();
    GridCell c{int(ci % size_t(n)), int(ci / size_t(n))};
    if (c == goal) break;
    if (f > g_cost[ci] + heuristic(c) + 1e-9) continue;  // stale entry
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dx == 0 && dy == 0) continue;
        GridCell nb{c.x + dx, c.y + dy};
        if (!grid.free(nb)) continue;
        const double edge = kHopWeight + (dx != 0 && dy != 0 ? M_SQRT2 : 1.0);
        const double cand = g_cost[ci] + edge;
        if (cand < g_cost[idx(nb)] - 1e-12) {
          g_cost[idx(nb)] = cand;
          parent[idx(nb)] = int(ci);
          open.push({cand + heuristic(nb), idx(nb)});
        }
      }
  }

  if (parent[idx(goal)] < 0) return std::nullopt;
  std::vector<GridCell> path;
  for (size_t ci = idx(goal); int(ci) != int(idx(start)); ci = size_t(parent[ci])) {
    path.push_back({int(ci % size_t(n)), int(ci / size_t(n))});
    if (parent[ci] < 0) return std::nullopt;
  }
  std::reverse(path.begin(), path.end());
  return path;
}

}  // namespace rearrange
