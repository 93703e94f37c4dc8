#pragma once

#include <nlohmann/json.hpp>

#include "rearrange/planner.hpp"

namespace rearrange {

using nlohmann::json;

// ---------------------------------------------------------------------------
// Layout templates: two receptacles (one drawer, one fridge) against walls
// plus a few furniture rects, jittered per episode.
// ---------------------------------------------------------------------------

enum Wall : int { kWallN = 0, kWallS = 1, kWallE = 2, kWallW = 3 };

struct WallSpot {
  int wall;
  double along;  // position of the unit center along the wall
};

struct LayoutTemplate {
  WallSpot drawer;
  WallSpot fridge;
  std::vector<Rect> obstacles;
};

inline const std::vector<LayoutTemplate>& layout_templates() {
  static const std::vector<LayoutTemplate> layouts = {
      {{kWallN, 3.0}, {kWallW, 7.0}, {{4.5, 4.3, 6.0, 5.3}}},
      {{kWallE, 5.0}, {kWallN, 7.5}, {{2.0, 2.0, 3.2, 3.0}, {6.0, 6.5, 7.0, 7.6}}},
      {{kWallS, 2.5}, {kWallE, 2.5}, {{4.0, 4.5, 5.0, 6.3}}},
      {{kWallW, 3.0}, {kWallS, 7.0}, {{5.5, 2.0, 7.0, 3.0}, {2.5, 6.0, 3.5, 7.5}}},
      {{kWallN, 7.0}, {kWallS, 3.0}, {{4.5, 4.8, 5.5, 5.8}}},
      {{kWallE, 7.5}, {kWallW, 2.0}, {{3.8, 2.8, 5.0, 3.8}, {5.0, 6.2, 6.2, 7.2}}},
      {{kWallS, 7.5}, {kWallN, 2.0}, {{6.2, 4.2, 7.4, 5.2}}},
      {{kWallW, 7.5}, {kWallE, 7.0}, {{2.2, 3.5, 3.4, 4.5}, {5.8, 5.8, 6.8, 6.8}}},
  };
  return layouts;
}

namespace detail {

inline Vec2 wall_inward(int wall) {
  switch (wall) {
    case kWallN: return {0, -1};
    case kWallS: return {0, 1};
    case kWallE: return {-1, 0};
    default: return {1, 0};
  }
}

inline Receptacle make_receptacle(int kind, int wall, double along, double arena,
                                  int hinge_side) {
  const double depth = kind == kDrawer ? 0.6 : 0.8;
  const double width = kind == kDrawer ? 0.9 : 0.8;
  const Vec2 front = wall_inward(wall);
  Receptacle r;
  r.kind = kind;
  // Body hugging the wall, front face toward the interior.
  switch (wall) {
    case kWallN: r.body = {along - width / 2, arena - depth, along + width / 2, arena}; break;
    case kWallS: r.body = {along - width / 2, 0, along + width / 2, depth}; break;
    case kWallE: r.body = {arena - depth, along - width / 2, arena, along + width / 2}; break;
    default: r.body = {0, along - width / 2, depth, along + width / 2}; break;
  }
  r.front = front;
  const Vec2 face = r.body.center() + front * (depth / 2.0);
  if (kind == kDrawer) {
    r.handle_rest = face + front * 0.12;
    r.anchor = face - front * 0.18;
    r.travel = 0.42;
  } else {
    // Hinge on one front corner, handle on the other; the door swings a
    // quarter circle outward.
    const Vec2 side = Vec2{-front.y, front.x};  // along the face
    const Vec2 c1 = face + side * (width / 2.0);
    const Vec2 c2 = face - side * (width / 2.0);
    r.hinge = hinge_side == 0 ? c1 : c2;
    r.handle_rest = face + front * 0.10;  // mid-face handle: a short pull arc
    r.anchor = face - front * 0.25;
    // Pick the swing sign that carries the handle away from the wall.
    auto outwardness = [&](double sign) {
      const Vec2 mid = r.hinge + (r.handle_rest - r.hinge).rotated(sign * M_PI / 4.0);
      return (mid - face).dot(front);
    };
    r.swing = (outwardness(1.0) >= outwardness(-1.0) ? 1.0 : -1.0) * (M_PI / 2.0);
  }
  return r;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

struct GenConfig {
  std::vector<int> layout_pool = {0, 1, 2, 3, 4, 5, 6, 7};
  // P(object contained | hard); the rest put the goal in a receptacle.
  double hard_object_mix = 0.5;
};

namespace detail {

inline bool point_clear(const EpisodeSpec& spec, const Vec2& p, double clearance,
                        double arena, double wall_margin) {
  if (p.x < wall_margin || p.y < wall_margin || p.x > arena - wall_margin ||
      p.y > arena - wall_margin)
    return false;
  for (const Rect& ob : spec.obstacles)
    if (ob.expanded(clearance).contains(p)) return false;
  for (const Receptacle& r : spec.receptacles)
    if (r.body.expanded(clearance).contains(p)) return false;
  return true;
}

inline bool reachable_near(const OccupancyGrid& grid, const std::vector<uint8_t>& reach,
                           const Vec2& p, double radius) {
  const GridCell c0 = grid.cell_of(p);
  const int rr = int(std::ceil(radius / OccupancyGrid::kCell));
  for (int dy = -rr; dy <= rr; ++dy)
    for (int dx = -rr; dx <= rr; ++dx) {
      GridCell c{c0.x + dx, c0.y + dy};
      if (!grid.free(c)) continue;
      if (dist(grid.center_of(c), p) > radius) continue;
      if (reach[size_t(c.y) * size_t(grid.size()) + size_t(c.x)]) return true;
    }
  return false;
}

inline bool episode_valid(const EpisodeSpec& spec, const EnvParams& params) {
  const double arena = params.arena;
  // Receptacle bodies and obstacles must not crowd each other.
  for (size_t i = 0; i < spec.receptacles.size(); ++i) {
    for (size_t j = i + 1; j < spec.receptacles.size(); ++j)
      if (spec.receptacles[i].body.expanded(0.7).overlaps(spec.receptacles[j].body))
        return false;
    for (const Rect& ob : spec.obstacles)
      if (spec.receptacles[i].body.expanded(0.7).overlaps(ob)) return false;
  }

  const OccupancyGrid grid = OccupancyGrid::build(spec, params);
  const GridCell agent_cell = grid.cell_of(spec.agent_start.pos());
  if (!grid.free(agent_cell)) return false;
  const std::vector<uint8_t> reach = grid.reachable_from(agent_cell);

  // Handle sweep and slid-out contents must stay clear; their surroundings
  // must be reachable.
  for (const Receptacle& r : spec.receptacles) {
    for (double o = 0.0; o <= 1.001; o += 0.25) {
      const Vec2 h = r.handle_at(std::min(o, 1.0));
      if (h.x < 0.2 || h.y < 0.2 || h.x > arena - 0.2 || h.y > arena - 0.2) return false;
      for (const Rect& ob : spec.obstacles)
        if (ob.expanded(0.05).contains(h)) return false;
      for (const Receptacle& other : spec.receptacles)
        if (&other != &r && other.body.expanded(0.05).contains(h)) return false;
    }
    if (!reachable_near(grid, reach, r.handle_rest, 0.9)) return false;
    if (r.kind == kDrawer) {
      const Vec2 out = r.contents_at(1.0);
      for (const Rect& ob : spec.obstacles)
        if (ob.expanded(0.1).contains(out)) return false;
      if (!reachable_near(grid, reach, out, 0.9)) return false;
    }
    // Room to stand in front and back up while pulling. The fridge pull
    // curls sideways along the door arc, so its lane is wider.
    const Vec2 face = r.body.center() + r.front * ((r.kind == kDrawer ? 0.6 : 0.8) / 2.0);
    const Vec2 side{-r.front.y, r.front.x};
    std::vector<Vec2> lane = {face + r.front * 0.9, face + r.front * 1.4, face + r.front * 1.9,
                              face + r.front * 1.3 + side * 0.7,
                              face + r.front * 1.3 - side * 0.7};
    if (r.kind == kFridge) {
      lane.push_back(face + r.front * 1.0 + side * 1.1);
      lane.push_back(face + r.front * 1.0 - side * 1.1);
      lane.push_back(face + r.front * 1.6 + side * 1.1);
      lane.push_back(face + r.front * 1.6 - side * 1.1);
    }
    for (const Vec2& pt : lane)
      if (!point_clear(spec, pt, 0.32, arena, 0.35)) return false;
  }

  const Vec2 obj_world = spec.object_container == 0
                             ? spec.object_start
                             : spec.receptacles[size_t(spec.object_container - 1)].contents_at(0);
  const Vec2 goal_world = spec.goal_container == 0
                              ? spec.goal
                              : spec.receptacles[size_t(spec.goal_container - 1)].contents_at(0);
  if (dist(obj_world, goal_world) < 2.0) return false;

  if (spec.object_container == 0) {
    if (!point_clear(spec, spec.object_start, 0.35, arena, 0.6)) return false;
    if (!reachable_near(grid, reach, spec.object_start, 0.9)) return false;
  }
  if (spec.goal_container == 0) {
    if (!point_clear(spec, spec.goal, 0.35, arena, 0.6)) return false;
    if (!reachable_near(grid, reach, spec.goal, 0.9)) return false;
  }
  return true;
}

}  // namespace detail

// Seeded, deterministic episode construction. Rejection-samples placements
// and re-seeds internally after 1000 failures before giving up.
inline EpisodeSpec generate_episode(uint64_t seed, Difficulty difficulty,
                                    const GenConfig& gen = {}, const EnvParams& params = {}) {
  if (gen.layout_pool.empty()) fail("generate_episode: empty layout pool");
  const auto& layouts = layout_templates();
  for (int reseed = 0; reseed < 4; ++reseed) {
    Rng rng(seed_mix(seed, uint64_t(difficulty) + 1, 0x5eedULL + uint64_t(reseed)));
    for (int attempt = 0; attempt < 1000; ++attempt) {
      EpisodeSpec spec;
      spec.seed = seed;
      spec.difficulty = difficulty;
      spec.layout_id = gen.layout_pool[size_t(rng.randint(gen.layout_pool.size()))];
      if (spec.layout_id < 0 || spec.layout_id >= int(layouts.size()))
        fail("generate_episode: layout id out of range");
      const LayoutTemplate& tpl = layouts[size_t(spec.layout_id)];

      auto jittered = [&](const WallSpot& spot) {
        return std::clamp(spot.along + rng.uniform(-0.4, 0.4), 1.3, params.arena - 1.3);
      };
      spec.receptacles.push_back(detail::make_receptacle(
          kDrawer, tpl.drawer.wall, jittered(tpl.drawer), params.arena, int(rng.randint(2))));
      spec.receptacles.push_back(detail::make_receptacle(
          kFridge, tpl.fridge.wall, jittered(tpl.fridge), params.arena, int(rng.randint(2))));
      for (const Rect& ob : tpl.obstacles) {
        const double jx = rng.uniform(-0.25, 0.25), jy = rng.uniform(-0.25, 0.25);
        Rect r{ob.x0 + jx, ob.y0 + jy, ob.x1 + jx, ob.y1 + jy};
        r.x0 = std::max(r.x0, 0.8);
        r.y0 = std::max(r.y0, 0.8);
        r.x1 = std::min(r.x1, params.arena - 0.8);
        r.y1 = std::min(r.y1, params.arena - 0.8);
        spec.obstacles.push_back(r);
      }

      // Containment per split: easy none, very hard both (distinct
      // receptacles), hard exactly one.
      switch (difficulty) {
        case Difficulty::easy:
          break;
        case Difficulty::hard:
          if (rng.uniform() < gen.hard_object_mix)
            spec.object_container = 1 + int(rng.randint(spec.receptacles.size()));
          else
            spec.goal_container = 1 + int(rng.randint(spec.receptacles.size()));
          break;
        case Difficulty::very_hard: {
          const int first = 1 + int(rng.randint(spec.receptacles.size()));
          spec.object_container = first;
          spec.goal_container = first == 1 ? 2 : 1;
          break;
        }
      }

      auto sample_point = [&]() -> Vec2 {
        return {rng.uniform(0.7, params.arena - 0.7), rng.uniform(0.7, params.arena - 0.7)};
      };
      if (spec.object_container != 0)
        spec.object_start = spec.receptacles[size_t(spec.object_container - 1)].contents_at(0);
      else
        spec.object_start = sample_point();
      if (spec.goal_container != 0)
        spec.goal = spec.receptacles[size_t(spec.goal_container - 1)].contents_at(0);
      else
        spec.goal = sample_point();
      const Vec2 a = sample_point();
      spec.agent_start = {a.x, a.y, wrap_angle(rng.uniform(-M_PI, M_PI))};

      if (detail::episode_valid(spec, params)) return spec;
    }
  }
  fail("generate_episode: placement failed after repeated rejection sampling (seed " +
       std::to_string(seed) + ", " + difficulty_name(difficulty) + ")");
}

// ---------------------------------------------------------------------------
// JSONL serialization
// ---------------------------------------------------------------------------

inline json rect_to_json(const Rect& r) { return json::array({r.x0, r.y0, r.x1, r.y1}); }
inline Rect rect_from_json(const json& j) { return {j[0], j[1], j[2], j[3]}; }
inline json vec_to_json(const Vec2& v) { return json::array({v.x, v.y}); }
inline Vec2 vec_from_json(const json& j) { return {j[0], j[1]}; }

inline json receptacle_to_json(const Receptacle& r) {
  return json{{"kind", r.kind},
              {"body", rect_to_json(r.body)},
              {"front", vec_to_json(r.front)},
              {"handle", vec_to_json(r.handle_rest)},
              {"anchor", vec_to_json(r.anchor)},
              {"travel", r.travel},
              {"hinge", vec_to_json(r.hinge)},
              {"swing", r.swing},
              {"open_threshold", r.open_threshold}};
}

inline Receptacle receptacle_from_json(const json& j) {
  Receptacle r;
  r.kind = j.at("kind");
  r.body = rect_from_json(j.at("body"));
  r.front = vec_from_json(j.at("front"));
  r.handle_rest = vec_from_json(j.at("handle"));
  r.anchor = vec_from_json(j.at("anchor"));
  r.travel = j.at("travel");
  r.hinge = vec_from_json(j.at("hinge"));
  r.swing = j.at("swing");
  r.open_threshold = j.at("open_threshold");
  return r;
}

inline json episode_to_json(const EpisodeSpec& e) {
  json obstacles = json::array();
  for (const Rect& r : e.obstacles) obstacles.push_back(rect_to_json(r));
  json receptacles = json::array();
  for (const Receptacle& r : e.receptacles) receptacles.push_back(receptacle_to_json(r));
  return json{{"seed", e.seed},
              {"layout_id", e.layout_id},
              {"obstacles", obstacles},
              {"receptacles", receptacles},
              {"object_start", vec_to_json(e.object_start)},
              {"goal", vec_to_json(e.goal)},
              {"object_container", e.object_container},
              {"goal_container", e.goal_container},
              {"difficulty", difficulty_name(e.difficulty)},
              {"agent_start", json::array({e.agent_start.x, e.agent_start.y,
                                           e.agent_start.heading})}};
}

inline EpisodeSpec episode_from_json(const json& j) {
  EpisodeSpec e;
  e.seed = j.at("seed");
  e.layout_id = j.at("layout_id");
  for (const auto& r : j.at("obstacles")) e.obstacles.push_back(rect_from_json(r));
  for (const auto& r : j.at("receptacles")) e.receptacles.push_back(receptacle_from_json(r));
  e.object_start = vec_from_json(j.at("object_start"));
  e.goal = vec_from_json(j.at("goal"));
  e.object_container = j.at("object_container");
  e.goal_container = j.at("goal_container");
  e.difficulty = difficulty_from_name(j.at("difficulty"));
  const auto& a = j.at("agent_start");
  e.agent_start = {a[0], a[1], a[2]};
  return e;
}

inline void write_episode_set(const std::filesystem::path& path,
                              const std::vector<EpisodeSpec>& episodes) {
  std::string out;
  for (const EpisodeSpec& e : episodes) {
    out += episode_to_json(e).dump();
    out += "\n";
  }
  atomic_write_file(path, out);
}

inline std::vector<EpisodeSpec> read_episode_set(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) fail("cannot open episode set: " + path.string());
  std::vector<EpisodeSpec> episodes;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      episodes.push_back(episode_from_json(json::parse(line)));
    } catch (const std::exception& e) {
      fail("episode set " + path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return episodes;
}

}  // namespace rearrange
