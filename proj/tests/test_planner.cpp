#include <catch2/catch_amalgamated.hpp>

#include <deque>

#include "rearrange/episodes.hpp"

using namespace rearrange;

namespace {

// Independent breadth-first search over the same grid; minimal hop count.
int bfs_hops(const OccupancyGrid& grid, GridCell start, GridCell goal) {
  if (!grid.free(start) || !grid.free(goal)) return -1;
  const int n = grid.size();
  std::vector<int> depth(size_t(n) * size_t(n), -1);
  auto idx = [n](const GridCell& c) { return size_t(c.y) * size_t(n) + size_t(c.x); };
  std::deque<GridCell> q = {start};
  depth[idx(start)] = 0;
  while (!q.empty()) {
    GridCell c = q.front();
    q.pop_front();
    if (c == goal) return depth[idx(c)];
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx) {
        if (dx == 0 && dy == 0) continue;
        GridCell nb{c.x + dx, c.y + dy};
        if (!grid.free(nb) || depth[idx(nb)] >= 0) continue;
        depth[idx(nb)] = depth[idx(c)] + 1;
        q.push_back(nb);
      }
  }
  return -1;
}

EpisodeSpec bare_spec() {
  EpisodeSpec e;
  e.agent_start = {5, 5, 0};
  return e;
}

}  // namespace

TEST_CASE("start equal to goal yields an empty path") {
  const EnvParams p;
  OccupancyGrid grid = OccupancyGrid::build(bare_spec(), p);
  auto path = plan_path(grid, {10, 10}, {10, 10});
  REQUIRE(path.has_value());
  CHECK(path->empty());
}

TEST_CASE("open corridor gives a straight path with the right cell count") {
  const EnvParams p;
  OccupancyGrid grid = OccupancyGrid::build(bare_spec(), p);
  auto path = plan_path(grid, {10, 20}, {18, 20});
  REQUIRE(path.has_value());
  CHECK(int(path->size()) == 8);
  for (const GridCell& c : *path) CHECK(c.y == 20);
}

TEST_CASE("single-wall detour length equals the breadth-first-search length") {
  const EnvParams p;
  EpisodeSpec spec = bare_spec();
  spec.obstacles.push_back({3.0, 2.0, 3.5, 8.0});  // vertical wall with gaps at the ends
  OccupancyGrid grid = OccupancyGrid::build(spec, p);
  GridCell start{6, 20}, goal{20, 20};
  auto path = plan_path(grid, start, goal);
  REQUIRE(path.has_value());
  CHECK(int(path->size()) == bfs_hops(grid, start, goal));
}

TEST_CASE("unreachable goals are reported") {
  const EnvParams p;
  EpisodeSpec spec = bare_spec();
  spec.obstacles.push_back({2.0, 0.0, 2.5, 10.0});  // full-height wall
  OccupancyGrid grid = OccupancyGrid::build(spec, p);
  auto path = plan_path(grid, {4, 20}, {30, 20});
  CHECK_FALSE(path.has_value());
  CHECK(bfs_hops(grid, {4, 20}, {30, 20}) == -1);
}

TEST_CASE("path lengths equal the BFS oracle on random grids") {
  int compared = 0;
  for (uint64_t seed = 0; compared < 100; ++seed) {
    Rng rng(seed_mix(0x9a70, seed));
    EpisodeSpec spec = bare_spec();
    const int n_obs = 2 + int(rng.randint(5));
    for (int i = 0; i < n_obs; ++i) {
      const double x = rng.uniform(1.0, 8.0), y = rng.uniform(1.0, 8.0);
      spec.obstacles.push_back({x, y, x + rng.uniform(0.4, 2.2), y + rng.uniform(0.4, 2.2)});
    }
    const EnvParams p;
    OccupancyGrid grid = OccupancyGrid::build(spec, p);
    GridCell start{int(rng.randint(40)), int(rng.randint(40))};
    GridCell goal{int(rng.randint(40)), int(rng.randint(40))};
    if (!grid.free(start) || !grid.free(goal)) continue;
    auto path = plan_path(grid, start, goal);
    const int hops = bfs_hops(grid, start, goal);
    if (!path.has_value()) {
      CHECK(hops == -1);
    } else {
      CHECK(int(path->size()) == hops);
      // every step is a valid 8-connected move over free cells
      GridCell prev = start;
      for (const GridCell& c : *path) {
        CHECK(grid.free(c));
        CHECK(std::max(std::abs(c.x - prev.x), std::abs(c.y - prev.y)) == 1);
        prev = c;
      }
      CHECK(prev == goal);
    }
    ++compared;
  }
}

TEST_CASE("blocked endpoints are rejected") {
  const EnvParams p;
  EpisodeSpec spec = bare_spec();
  spec.obstacles.push_back({4.0, 4.0, 6.0, 6.0});
  OccupancyGrid grid = OccupancyGrid::build(spec, p);
  GridCell inside = grid.cell_of({5.0, 5.0});
  CHECK_FALSE(plan_path(grid, {2, 2}, inside).has_value());
}
