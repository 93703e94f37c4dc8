#pragma once

#include "rearrange/planner.hpp"

namespace rearrange {

// Privileged scripted skills. They generate demonstrations and stand in as
// the modular baseline's per-skill controllers, with termination decided by
// privileged post-condition predicates or a per-skill timeout.

enum class PlanMode { fixed, oracle };

inline PlanMode plan_mode_from_name(const std::string& s) {
  if (s == "fixed") return PlanMode::fixed;
  if (s == "oracle") return PlanMode::oracle;
  fail("unknown plan mode: " + s);
}

// Target designator for a skill invocation.
enum class Target { none, object, goal, receptacle1, receptacle2 };

struct PlanEntry {
  int skill;
  Target target;
};

struct Plan {
  std::vector<PlanEntry> entries;
};

inline Target receptacle_target(int container_index) {
  return container_index == 1 ? Target::receptacle1 : Target::receptacle2;
}

inline int open_skill_for(const EpisodeSpec& spec, int container_index) {
  return spec.receptacles[size_t(container_index - 1)].kind == kDrawer ? kSkillOpenDrawer
                                                                       : kSkillOpenFridge;
}

// Fixed mode is the constant navigate-pick-navigate-place sequence. Oracle
// mode reads containment off the spec and inserts navigate+open pairs; the
// goal container is opened first because the suction gripper cannot work a
// handle while carrying the object.
inline Plan plan(const EpisodeSpec& spec, PlanMode mode) {
  Plan p;
  if (mode == PlanMode::oracle && spec.goal_container != 0) {
    p.entries.push_back({kSkillNavigate, receptacle_target(spec.goal_container)});
    p.entries.push_back(
        {open_skill_for(spec, spec.goal_container), receptacle_target(spec.goal_container)});
  }
  if (mode == PlanMode::oracle && spec.object_container != 0) {
    p.entries.push_back({kSkillNavigate, receptacle_target(spec.object_container)});
    p.entries.push_back({open_skill_for(spec, spec.object_container),
                         receptacle_target(spec.object_container)});
  }
  p.entries.push_back({kSkillNavigate, Target::object});
  p.entries.push_back({kSkillPick, Target::object});
  p.entries.push_back({kSkillNavigate, Target::goal});
  p.entries.push_back({kSkillPlace, Target::goal});
  p.entries.push_back({kSkillStop, Target::none});
  return p;
}

// Resolves a designator to a world point using privileged state.
inline Vec2 resolve_target(const WorldState& s, Target t) {
  switch (t) {
    case Target::object: return s.object;
    case Target::goal: return goal_world(s);
    case Target::receptacle1: return s.spec->receptacles[0].handle_at(s.openness[0]);
    case Target::receptacle2: return s.spec->receptacles[1].handle_at(s.openness[1]);
    case Target::none: break;
  }
  return s.base;
}

// ---------------------------------------------------------------------------
// ik_delta: one damped gradient step on ||FK(q) - target||^2, clipped.
// ---------------------------------------------------------------------------

// One clipped step toward the elbow-up solution of FK(q) = target. For the
// default two-link arm the solution is closed-form (best-effort clamp onto
// the reach boundary for unreachable targets); other arm sizes take a damped
// least-squares step on ||FK(q) - target||^2.
inline std::vector<double> ik_delta(const WorldState& s, const Vec2& target) {
  const EnvParams& p = *s.params;
  const Vec2 e = end_effector(s) - target;
  std::vector<double> delta(size_t(p.arm_dof), 0.0);
  if (e.norm() < 1e-9) return delta;

  if (p.arm_dof == 2) {
    const double l = p.link_len;
    const Vec2 rel = target - s.base;
    const double r = std::clamp(rel.norm(), 1e-6, 2.0 * l - 1e-9);
    const double c2 = std::clamp((r * r - 2.0 * l * l) / (2.0 * l * l), -1.0, 1.0);
    const double q2 = std::acos(c2);  // elbow-up branch
    const double q1 =
        wrap_angle(rel.angle() - s.heading - std::atan2(l * std::sin(q2), l + l * c2));
    delta[0] = std::clamp(wrap_angle(q1 - s.q[0]), -p.arm_delta_max, p.arm_delta_max);
    delta[1] = std::clamp(wrap_angle(q2 - s.q[1]), -p.arm_delta_max, p.arm_delta_max);
    return delta;
  }

  const std::vector<Vec2> jac = arm_jacobian(s);
  const double damp = 0.05;
  double a = damp, b = 0.0, d = damp;
  for (const Vec2& col : jac) {
    a += col.x * col.x;
    b += col.x * col.y;
    d += col.y * col.y;
  }
  const double det = a * d - b * b;
  const Vec2 v{(-d * e.x + b * e.y) / det, (b * e.x - a * e.y) / det};
  double step_norm = 0.0;
  for (int i = 0; i < p.arm_dof; ++i) {
    delta[size_t(i)] = jac[size_t(i)].dot(v);
    step_norm += delta[size_t(i)] * delta[size_t(i)];
  }
  const double max_reach = p.arm_dof * p.link_len;
  if (step_norm < 1e-10 && e.norm() > 0.02 && dist(target, s.base) < max_reach - 0.05) {
    // straightened singularity with a reachable target: bend upward
    for (int i = 1; i < p.arm_dof; ++i) delta[size_t(i)] = p.arm_delta_max;
  }
  for (auto& dq : delta) dq = std::clamp(dq, -p.arm_delta_max, p.arm_delta_max);
  return delta;
}

// ---------------------------------------------------------------------------
// Scripted skill controllers
// ---------------------------------------------------------------------------

struct SkillScratch {
  int phase = 0;
  int steps = 0;
  int last_collisions = -1;
  std::vector<Vec2> waypoints;
  size_t wp = 0;
  bool have_path = false;
  int replan_cooldown = 0;
  double best_openness = 0.0;
  int stall = 0;
};

struct SkillStep {
  ActionVector action;
  bool done = false;
  bool failed = false;
};

inline constexpr int kSkillTimeout = 150;

namespace detail {

// Straight-line clearance test over the inflated grid.
inline bool line_of_sight(const OccupancyGrid& grid, const Vec2& a, const Vec2& b) {
  const double len = dist(a, b);
  const int samples = std::max(2, int(len / 0.08));
  for (int i = 0; i <= samples; ++i) {
    const double t = double(i) / double(samples);
    if (!grid.free(grid.cell_of(a + (b - a) * t))) return false;
  }
  return true;
}

// Plans a grid path to the free cell nearest the target, then pulls the
// cell-scale zigzag into a few straight corner-to-corner segments so the
// pursuit steering varies smoothly.
inline bool plan_waypoints(const WorldState& s, const Vec2& target, SkillScratch& sc) {
  const OccupancyGrid grid = OccupancyGrid::build(*s.spec, *s.params);
  const GridCell start = grid.cell_of(s.base);
  GridCell from = start;
  if (!grid.free(from)) {
    auto near = grid.nearest_free(s.base, 0.8);
    if (!near) return false;
    from = *near;
  }
  auto goal_cell = grid.nearest_free(target, 1.2);
  if (!goal_cell) return false;
  auto cells = plan_path(grid, from, *goal_cell);
  if (!cells) return false;

  std::vector<Vec2> raw;
  raw.push_back(s.base);
  for (const GridCell& c : *cells) raw.push_back(grid.center_of(c));
  raw.push_back(grid.center_of(*goal_cell));

  sc.waypoints.clear();
  size_t i = 0;
  sc.waypoints.push_back(raw[0]);
  while (i + 1 < raw.size()) {
    size_t j = raw.size() - 1;
    while (j > i + 1 && !line_of_sight(grid, raw[i], raw[j])) --j;
    sc.waypoints.push_back(raw[j]);
    i = j;
  }
  sc.wp = 0;
  sc.have_path = true;
  return true;
}

// Pure pursuit with a continuous arc-length lookahead: the steering target
// is the point a fixed distance ahead of the base's projection onto the
// path polyline, so the commanded velocities vary smoothly with the pose.
inline bool drive_along(const WorldState& s, const Vec2& target, SkillScratch& sc,
                        ActionVector& a) {
  // Plan once per invocation; replan only after a collision. A periodic
  // replan would make the steering depend on a hidden timer.
  if (!sc.have_path ||
      (sc.last_collisions >= 0 && s.collision_count > sc.last_collisions)) {
    if (!plan_waypoints(s, target, sc)) return false;
  }

  const auto& wps = sc.waypoints;
  Vec2 look = target;
  if (wps.size() >= 2) {
    // project the base onto the polyline
    double best_d = std::numeric_limits<double>::infinity();
    size_t best_seg = 0;
    double best_t = 0.0;
    for (size_t i = 0; i + 1 < wps.size(); ++i) {
      const Vec2 seg = wps[i + 1] - wps[i];
      const double len2 = std::max(seg.dot(seg), 1e-12);
      const double t = std::clamp((s.base - wps[i]).dot(seg) / len2, 0.0, 1.0);
      const double d = dist(wps[i] + seg * t, s.base);
      if (d < best_d - 1e-9) {
        best_d = d;
        best_seg = i;
        best_t = t;
      }
    }
    // walk 0.6 m further along the polyline
    double remain = 0.6;
    size_t i = best_seg;
    double t = best_t;
    for (;;) {
      const Vec2 seg = wps[i + 1] - wps[i];
      const double seg_len = seg.norm();
      const double left = (1.0 - t) * seg_len;
      if (remain <= left || i + 2 >= wps.size()) {
        const double adv = seg_len < 1e-9 ? 0.0 : std::min(t + remain / seg_len, 1.0);
        look = wps[i] + seg * adv;
        break;
      }
      remain -= left;
      i += 1;
      t = 0.0;
    }
    if (i + 2 >= wps.size() && dist(look, wps.back()) < 1e-6) look = target;
  }

  // tanh steering and a gaussian alignment gate keep the commands smooth in
  // the pose, which imitation can regress cleanly
  const double err = wrap_angle((look - s.base).angle() - s.heading);
  a.ang = 0.95 * std::tanh(err / s.params->ang_step);
  a.lin = 0.95 * std::exp(-(err / 0.45) * (err / 0.45));
  return true;
}

// Proportional steering toward a point, faded out near the target where the
// bearing becomes ill-conditioned.
inline double steer_toward(const WorldState& s, const Vec2& target) {
  const double err = wrap_angle((target - s.base).angle() - s.heading);
  const double gate = std::clamp((dist(s.base, target) - 0.3) / 0.5, 0.0, 1.0);
  return gate * 0.95 * std::tanh(err / s.params->ang_step);
}

inline std::vector<double> tuck_arm(const WorldState& s) {
  std::vector<double> d(size_t(s.params->arm_dof));
  for (int i = 0; i < s.params->arm_dof; ++i)
    d[size_t(i)] = std::clamp(2.2 - s.q[size_t(i)], -s.params->arm_delta_max,
                              s.params->arm_delta_max);
  return d;
}

}  // namespace detail

// Privileged termination predicate shared by the sequencers.
inline bool skill_postcondition(int skill, Target target, const WorldState& s) {
  switch (skill) {
    case kSkillNavigate: {
      const bool to_receptacle =
          target == Target::receptacle1 || target == Target::receptacle2;
      return dist(s.base, resolve_target(s, target)) <=
             (to_receptacle ? 1.0 : s.params->skill_radius);
    }
    case kSkillPick: return s.holding;
    case kSkillPlace:
      return !s.holding && dist(s.object, goal_world(s)) <= s.params->success_radius;
    case kSkillOpenDrawer:
    case kSkillOpenFridge: {
      const int idx = target == Target::receptacle1 ? 0 : 1;
      return s.openness[size_t(idx)] >= 0.95 && s.handle_attached != idx;
    }
    case kSkillStop: return s.stop_issued;
    default: return false;
  }
}

inline SkillStep skill_navigate(const WorldState& s, const Vec2& target, SkillScratch& sc,
                                double stop_radius) {
  SkillStep out;
  out.action = ActionVector::zero(s.params->arm_dof);
  if (dist(s.base, target) <= stop_radius) {
    out.done = true;
    return out;
  }
  if (s.handle_attached >= 0) {  // left-over grip from a failed open
    out.action.gripper = kGripOpen;
    return out;
  }
  out.action.arm = detail::tuck_arm(s);
  if (!detail::drive_along(s, target, sc, out.action)) {
    out.done = true;
    out.failed = true;
  }
  sc.last_collisions = s.collision_count;
  return out;
}

inline SkillStep skill_pick(const WorldState& s, SkillScratch& sc) {
  SkillStep out;
  out.action = ActionVector::zero(s.params->arm_dof);
  if (s.holding) {  // retraction happens inside the next navigate
    out.done = true;
    return out;
  }
  if (s.handle_attached >= 0) {
    out.action.gripper = kGripOpen;
    return out;
  }
  const Vec2 object = s.object;
  const double d = dist(s.base, object);
  // Approach until the object is in the arm's sweet spot; a blocked drive
  // within reach (e.g. up against a receptacle body) also ends the approach.
  const bool bumped = sc.last_collisions >= 0 && s.collision_count > sc.last_collisions;
  if (sc.phase == 0 && (d <= 0.65 || (bumped && d <= 0.95))) sc.phase = 1;
  if (sc.phase == 0 || d > 1.2) {
    sc.phase = 0;
    out.action.arm = detail::tuck_arm(s);
    if (!detail::drive_along(s, object, sc, out.action)) {
      out.done = true;
      out.failed = true;
    }
    // ease off as the stand distance approaches
    out.action.lin *= std::clamp((d - 0.45) / 0.55, 0.3, 1.0);
    sc.last_collisions = s.collision_count;
    return out;
  }
  out.action.ang = detail::steer_toward(s, object);
  const double reach = dist(end_effector(s), object);
  if (reach > 0.10) {
    out.action.arm = ik_delta(s, object);
    return out;
  }
  out.action.gripper = kGripClose;
  return out;
}

inline SkillStep skill_place(const WorldState& s, SkillScratch& sc) {
  SkillStep out;
  out.action = ActionVector::zero(s.params->arm_dof);
  const Vec2 target = goal_world(s);
  if (!s.holding) {
    out.done = dist(s.object, target) <= s.params->success_radius;
    out.failed = !out.done;
    return out;
  }
  const double d = dist(s.base, target);
  const bool bumped = sc.last_collisions >= 0 && s.collision_count > sc.last_collisions;
  if (sc.phase == 0 && (d <= 0.65 || (bumped && d <= 0.95))) sc.phase = 1;
  if (sc.phase == 0 || d > 1.2) {
    sc.phase = 0;
    if (!detail::drive_along(s, target, sc, out.action)) {
      out.done = true;
      out.failed = true;
    }
    out.action.lin *= std::clamp((d - 0.45) / 0.55, 0.3, 1.0);
    sc.last_collisions = s.collision_count;
    return out;
  }
  out.action.ang = detail::steer_toward(s, target);
  if (dist(end_effector(s), target) > 0.08) {
    out.action.arm = ik_delta(s, target);
    return out;
  }
  out.action.gripper = kGripOpen;
  return out;
}

inline SkillStep skill_open(const WorldState& s, int receptacle, SkillScratch& sc) {
  SkillStep out;
  out.action = ActionVector::zero(s.params->arm_dof);
  const Receptacle& rec = s.spec->receptacles[size_t(receptacle)];
  const double openness = s.openness[size_t(receptacle)];
  if (sc.phase >= 4 && openness >= 0.95) {
    // release and finish
    if (s.handle_attached == receptacle) {
      out.action.gripper = kGripOpen;
      return out;
    }
    out.done = true;
    return out;
  }
  // A bent-arm stand point: close enough that the whole pull stays inside
  // the arm's reach without passing through the extended singularity. For
  // the fridge this is the centroid of the door arc.
  const Vec2 stand =
      rec.kind == kDrawer
          ? rec.handle_at(0) + rec.front * 0.55
          : (rec.handle_at(0) + rec.handle_at(0.5) + rec.handle_at(1.0)) * (1.0 / 3.0) +
                rec.front * 0.40;
  switch (sc.phase) {
    case 0: {  // approach the stand point in front of the handle
      const double d = dist(s.base, stand);
      if (d <= 0.22) {
        sc.phase = 2;
        return skill_open(s, receptacle, sc);
      }
      out.action.arm = detail::tuck_arm(s);
      if (!detail::drive_along(s, stand, sc, out.action)) {
        out.done = true;
        out.failed = true;
        return out;
      }
      out.action.lin *= std::clamp((d - 0.15) / 0.6, 0.25, 1.0);
      sc.last_collisions = s.collision_count;
      return out;
    }
    case 2: {  // reach the handle, steering onto it
      const Vec2 handle = rec.handle_at(openness);
      if (dist(end_effector(s), handle) <= 0.10) {
        sc.phase = 3;
        return skill_open(s, receptacle, sc);
      }
      out.action.ang = detail::steer_toward(s, handle);
      out.action.arm = ik_delta(s, handle);
      return out;
    }
    case 3: {  // attach
      if (s.handle_attached == receptacle) {
        sc.phase = 4;
        sc.best_openness = openness;
        sc.stall = 0;
        return skill_open(s, receptacle, sc);
      }
      out.action.gripper = kGripClose;
      return out;
    }
    default: {  // pull: the arm tracks the handle path, base stays put
      if (s.handle_attached != receptacle) {
        // lost the handle mid-pull (e.g. the receptacle snapped shut):
        // a single attempt per invocation, so report failure
        out.done = true;
        out.failed = true;
        return out;
      }
      if (openness > sc.best_openness + 1e-6) {
        sc.best_openness = openness;
        sc.stall = 0;
      } else if (++sc.stall > 20) {
        out.done = true;
        out.failed = true;
        return out;
      }
      // Chase a point just ahead of the end-effector along the pull
      // direction; the moving target never becomes a fixed point, so the
      // pull continues until the openness post-condition ends the skill.
      const Vec2 pull_target = end_effector(s) + rec.pull_dir(openness) * 0.3;
      out.action.arm = ik_delta(s, pull_target);
      return out;
    }
  }
}

// Stop runs for three steps and issues the termination signal on the last.
inline SkillStep skill_stop(const WorldState& s, SkillScratch& sc) {
  SkillStep out;
  out.action = ActionVector::zero(s.params->arm_dof);
  if (sc.phase >= 2) out.action.stop = true;
  sc.phase += 1;
  return out;
}

// Dispatch with the per-skill timeout. The post-condition check happens
// before an action is emitted, so recorded steps always belong to the acting
// skill.
inline SkillStep skill_policy_step(int skill, Target target, const WorldState& s,
                                   SkillScratch& sc) {
  if (sc.steps >= kSkillTimeout) {
    SkillStep out;
    out.action = ActionVector::zero(s.params->arm_dof);
    out.done = true;
    out.failed = true;
    return out;
  }
  sc.steps += 1;
  // Navigation to a receptacle stops tighter than the generic nearby-region
  // radius so the following open starts inside the labeling radius of the
  // contents.
  const bool to_receptacle = target == Target::receptacle1 || target == Target::receptacle2;
  switch (skill) {
    case kSkillNavigate:
      return skill_navigate(s, resolve_target(s, target), sc,
                            to_receptacle ? 1.0 : s.params->skill_radius);
    case kSkillPick: return skill_pick(s, sc);
    case kSkillPlace: return skill_place(s, sc);
    case kSkillOpenDrawer:
    case kSkillOpenFridge: {
      const int idx = target == Target::receptacle1 ? 0 : 1;
      return skill_open(s, idx, sc);
    }
    case kSkillStop: return skill_stop(s, sc);
    default: fail("skill_policy_step: bad skill id " + std::to_string(skill));
  }
}

}  // namespace rearrange
