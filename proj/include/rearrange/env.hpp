#pragma once

#include "rearrange/geometry.hpp"

namespace rearrange {

// Deterministic 2-D rearrangement world: a disc base with a planar arm and
// suction gripper, two openable receptacles per scene, a single target
// object, and a goal that may sit inside a receptacle.

enum class Difficulty { easy = 0, hard = 1, very_hard = 2 };

inline const char* difficulty_name(Difficulty d) {
  switch (d) {
    case Difficulty::easy: return "easy";
    case Difficulty::hard: return "hard";
    case Difficulty::very_hard: return "very_hard";
  }
  return "?";
}

inline Difficulty difficulty_from_name(const std::string& s) {
  if (s == "easy") return Difficulty::easy;
  if (s == "hard") return Difficulty::hard;
  if (s == "very_hard") return Difficulty::very_hard;
  fail("unknown difficulty: " + s);
}

// Skill ids shared by the labeler, the demonstrations, and the policies.
enum Skill : int {
  kSkillNavigate = 0,
  kSkillPick = 1,
  kSkillPlace = 2,
  kSkillOpenDrawer = 3,
  kSkillOpenFridge = 4,
  kSkillStop = 5,
};
inline constexpr int kNumSkills = 6;

inline const char* skill_name(int s) {
  static const char* names[] = {"navigate", "pick", "place", "open_drawer", "open_fridge",
                                "stop"};
  return s >= 0 && s < kNumSkills ? names[s] : "?";
}

enum ReceptacleKind : int { kDrawer = 0, kFridge = 1 };

enum GripperAction : int { kGripOpen = 0, kGripClose = 1, kGripMaintain = 2 };

struct EnvParams {
  double arena = 10.0;
  int arm_dof = 2;
  double link_len = 0.5;
  double base_radius = 0.3;
  double grasp_radius = 0.15;
  double success_radius = 0.15;
  int ray_count = 32;
  double fov_deg = 90.0;
  double ray_max = 5.0;
  double object_radius = 0.08;
  double arm_delta_max = 0.1;
  double lin_step = 0.25;
  double ang_step = 0.3;
  int max_steps = 500;
  int collision_budget = 100;
  double open_threshold = 0.9;
  double skill_radius = 1.5;  // labeling / navigate-termination radius

  int proprio_dim() const { return arm_dof + 9; }
  int ray_dim() const { return ray_count * 6; }
  int obs_dim() const { return ray_dim() + proprio_dim(); }
  int action_dim() const { return arm_dof + 2 + 3; }
};

// Openable container. A drawer's handle (and contents) translate along the
// front axis; a fridge handle swings on a quarter-circle arc about the hinge
// while contents stay put. Both reduce to one openness scalar in [0, 1].
struct Receptacle {
  int kind = kDrawer;
  Rect body;
  Vec2 front;        // unit vector out of the front face
  Vec2 handle_rest;  // handle at openness 0
  Vec2 anchor;       // interior point holding contents at openness 0
  double travel = 0.42;  // drawer translation range
  Vec2 hinge;            // fridge only
  double swing = M_PI / 2.0;  // fridge arc, signed

  double open_threshold = 0.9;

  Vec2 handle_at(double openness) const {
    if (kind == kDrawer) return handle_rest + front * (openness * travel);
    return hinge + (handle_rest - hinge).rotated(openness * swing);
  }

  Vec2 contents_at(double openness) const {
    if (kind == kDrawer) return anchor + front * (openness * travel);
    return anchor;
  }

  // Local pull direction: the drawer axis, or the arc tangent at the current
  // openness.
  Vec2 pull_dir(double openness) const {
    if (kind == kDrawer) return front;
    const Vec2 radial = (handle_rest - hinge).rotated(openness * swing);
    const Vec2 tangent = Vec2{-radial.y, radial.x} * (swing > 0 ? 1.0 : -1.0);
    const double n = tangent.norm();
    return n > 1e-12 ? tangent * (1.0 / n) : front;
  }

  // End-effector displacement projected on the opening axis/arc, as an
  // openness increment.
  double openness_delta(const Vec2& ee_before, const Vec2& ee_after, double openness) const {
    const Vec2 disp = ee_after - ee_before;
    if (kind == kDrawer) return disp.dot(front) / travel;
    const double arc_len = (handle_rest - hinge).norm() * std::fabs(swing);
    return disp.dot(pull_dir(openness)) / arc_len;
  }
};

struct Pose {
  double x = 0, y = 0, heading = 0;
  Vec2 pos() const { return {x, y}; }
};

struct EpisodeSpec {
  uint64_t seed = 0;
  int layout_id = 0;
  std::vector<Rect> obstacles;
  std::vector<Receptacle> receptacles;
  Vec2 object_start;
  Vec2 goal;
  int object_container = 0;  // 0 = none, else 1-based receptacle index
  int goal_container = 0;
  Difficulty difficulty = Difficulty::easy;
  Pose agent_start;
};

enum class FailureReason { none = 0, premature_stop, collision, timeout };

inline const char* failure_name(FailureReason f) {
  switch (f) {
    case FailureReason::none: return "none";
    case FailureReason::premature_stop: return "premature_stop";
    case FailureReason::collision: return "collision";
    case FailureReason::timeout: return "timeout";
  }
  return "?";
}

struct WorldState {
  std::shared_ptr<const EpisodeSpec> spec;
  std::shared_ptr<const EnvParams> params;
  int time = 0;
  Vec2 base;
  double heading = 0.0;
  std::vector<double> q;  // joint angles, radians
  bool holding = false;
  bool object_contained = false;  // still riding its start container
  int handle_attached = -1;       // receptacle index or -1
  Vec2 object;
  std::vector<double> openness;
  int collision_count = 0;
  bool stop_issued = false;
  bool terminated = false;
  bool success = false;
  FailureReason failure = FailureReason::none;
  bool perturb_armed = false;
  bool perturb_fired = false;
  bool ever_held = false;
};

struct Observation {
  std::vector<float> rays;     // ray_count x (depth + 5-way one-hot)
  std::vector<float> proprio;  // q[A], holding, obj-EE cart(2), goal-EE cart(2),
                               // obj-base polar(2), goal-base polar(2)
  std::vector<float> flat() const {
    std::vector<float> v;
    v.reserve(rays.size() + proprio.size());
    v.insert(v.end(), rays.begin(), rays.end());
    v.insert(v.end(), proprio.begin(), proprio.end());
    return v;
  }
};

struct ActionVector {
  std::vector<double> arm;  // joint deltas
  double lin = 0.0;         // [-1, 1]
  double ang = 0.0;         // [-1, 1]
  int gripper = kGripMaintain;
  bool stop = false;  // episode termination signal, outside the action heads

  static ActionVector zero(int arm_dof) {
    ActionVector a;
    a.arm.assign(size_t(arm_dof), 0.0);
    return a;
  }
};

// ---------------------------------------------------------------------------
// Kinematics
// ---------------------------------------------------------------------------

inline Vec2 forward_kinematics(const Vec2& base, double heading, const std::vector<double>& q,
                               double link_len) {
  Vec2 p = base;
  double a = heading;
  for (double qi : q) {
    a += qi;
    p = p + heading_dir(a) * link_len;
  }
  return p;
}

inline Vec2 end_effector(const WorldState& s) {
  return forward_kinematics(s.base, s.heading, s.q, s.params->link_len);
}

// d(EE)/d(q_i): column i of the planar Jacobian.
inline std::vector<Vec2> arm_jacobian(const WorldState& s) {
  const EnvParams& p = *s.params;
  std::vector<Vec2> joints;  // joint positions
  Vec2 pos = s.base;
  double a = s.heading;
  joints.push_back(pos);
  for (double qi : s.q) {
    a += qi;
    pos = pos + heading_dir(a) * p.link_len;
    joints.push_back(pos);
  }
  const Vec2 ee = joints.back();
  std::vector<Vec2> cols;
  for (size_t i = 0; i + 1 < joints.size(); ++i) {
    const Vec2 r = ee - joints[i];
    cols.push_back({-r.y, r.x});
  }
  return cols;
}

// ---------------------------------------------------------------------------
// State helpers
// ---------------------------------------------------------------------------

inline bool receptacle_open(const WorldState& s, int idx) {
  return s.openness[size_t(idx)] >= s.spec->receptacles[size_t(idx)].open_threshold;
}

// Contents (and grasp targets) are reachable only through an open container.
inline bool object_accessible(const WorldState& s) {
  if (!s.object_contained) return true;
  return receptacle_open(s, s.spec->object_container - 1);
}

inline bool goal_accessible(const WorldState& s) {
  if (s.spec->goal_container == 0) return true;
  return receptacle_open(s, s.spec->goal_container - 1);
}

// The goal rides its container the same way contents do.
inline Vec2 goal_world(const WorldState& s) {
  if (s.spec->goal_container == 0) return s.spec->goal;
  const Receptacle& r = s.spec->receptacles[size_t(s.spec->goal_container - 1)];
  return r.contents_at(s.openness[size_t(s.spec->goal_container - 1)]);
}

inline bool success_condition(const WorldState& s) {
  return !s.holding && goal_accessible(s) &&
         dist(s.object, goal_world(s)) <= s.params->success_radius;
}

// ---------------------------------------------------------------------------
// reset
// ---------------------------------------------------------------------------

inline WorldState reset(const EpisodeSpec& spec, const EnvParams& params,
                        bool perturb = false) {
  WorldState s;
  s.spec = std::make_shared<EpisodeSpec>(spec);
  s.params = std::make_shared<EnvParams>(params);
  s.time = 0;
  s.base = spec.agent_start.pos();
  s.heading = spec.agent_start.heading;
  s.q.assign(size_t(params.arm_dof), 2.2);  // tucked
  s.holding = false;
  s.object_contained = spec.object_container != 0;
  s.handle_attached = -1;
  s.openness.assign(spec.receptacles.size(), 0.0);
  s.object = s.object_contained
                 ? spec.receptacles[size_t(spec.object_container - 1)].contents_at(0.0)
                 : spec.object_start;
  s.collision_count = 0;
  s.perturb_armed = perturb && spec.object_container != 0;
  return s;
}

// ---------------------------------------------------------------------------
// Perturbation: once the object's container first reaches open, it snaps
// shut. Fires at most once per episode.
// ---------------------------------------------------------------------------

inline WorldState inject_perturbation(const WorldState& state) {
  WorldState s = state;
  if (!s.perturb_armed || s.perturb_fired || s.spec->object_container == 0) return s;
  const int idx = s.spec->object_container - 1;
  if (s.openness[size_t(idx)] < s.spec->receptacles[size_t(idx)].open_threshold) return s;
  s.openness[size_t(idx)] = 0.0;
  if (s.handle_attached == idx) s.handle_attached = -1;
  if (s.object_contained) s.object = s.spec->receptacles[size_t(idx)].contents_at(0.0);
  s.perturb_fired = true;
  return s;
}

// ---------------------------------------------------------------------------
// step
// ---------------------------------------------------------------------------

namespace detail {

inline bool base_move_blocked(const WorldState& s, const Vec2& from, const Vec2& to) {
  const EnvParams& p = *s.params;
  const double r = p.base_radius;
  if (to.x < r || to.y < r || to.x > p.arena - r || to.y > p.arena - r) return true;
  for (const Rect& ob : s.spec->obstacles)
    if (capsule_hits_rect(from, to, r, ob)) return true;
  for (const Receptacle& rec : s.spec->receptacles)
    if (capsule_hits_rect(from, to, r, rec.body)) return true;
  return false;
}

}  // namespace detail

inline WorldState step(const WorldState& state, const ActionVector& action) {
  if (state.terminated) fail("step: acting on a terminated state");
  const EnvParams& p = *state.params;
  if (int(action.arm.size()) != p.arm_dof)
    fail("step: arm action has " + std::to_string(action.arm.size()) + " dims, expected " +
         std::to_string(p.arm_dof));

  // The perturbation hook runs first, so a crossing observed at step t takes
  // effect at the start of step t+1.
  WorldState s = inject_perturbation(state);

  const Vec2 ee_before = end_effector(s);

  // Arm integration, clipped.
  for (int i = 0; i < p.arm_dof; ++i)
    s.q[size_t(i)] += std::clamp(action.arm[size_t(i)], -p.arm_delta_max, p.arm_delta_max);

  // Base motion: rotation always applies; translation only when the swept
  // disc stays clear (no sliding), otherwise the position holds and the
  // collision counter increments.
  const double ang = std::clamp(action.ang, -1.0, 1.0) * p.ang_step;
  const double lin = std::clamp(action.lin, -1.0, 1.0) * p.lin_step;
  s.heading = wrap_angle(s.heading + ang);
  if (lin != 0.0) {
    const Vec2 proposed = s.base + heading_dir(s.heading) * lin;
    if (detail::base_move_blocked(s, s.base, proposed)) {
      s.collision_count += 1;
    } else {
      s.base = proposed;
    }
  }

  const Vec2 ee_after = end_effector(s);

  // Handle pulling.
  if (s.handle_attached >= 0) {
    const int idx = s.handle_attached;
    const Receptacle& rec = s.spec->receptacles[size_t(idx)];
    double& o = s.openness[size_t(idx)];
    o = std::clamp(o + rec.openness_delta(ee_before, ee_after, o), 0.0, 1.0);
  }

  // Object tracking.
  if (s.holding) {
    s.object = ee_after;
  } else if (s.object_contained) {
    const Receptacle& rec = s.spec->receptacles[size_t(s.spec->object_container - 1)];
    s.object = rec.contents_at(s.openness[size_t(s.spec->object_container - 1)]);
  }

  // Gripper.
  if (action.gripper == kGripClose) {
    if (!s.holding && s.handle_attached < 0) {
      if (object_accessible(s) && dist(ee_after, s.object) <= p.grasp_radius) {
        s.holding = true;
        s.object_contained = false;
        s.object = ee_after;
      } else {
        int best = -1;
        double best_d = p.grasp_radius;
        for (size_t i = 0; i < s.spec->receptacles.size(); ++i) {
          const double d = dist(ee_after, s.spec->receptacles[i].handle_at(s.openness[i]));
          if (d <= best_d) {
            best_d = d;
            best = int(i);
          }
        }
        if (best >= 0) s.handle_attached = best;
      }
    }
  } else if (action.gripper == kGripOpen) {
    s.holding = false;
    s.handle_attached = -1;
  }

  if (action.stop) s.stop_issued = true;

  s.time += 1;
  s.ever_held = s.ever_held || s.holding;

  // Termination.
  if (s.stop_issued) {
    s.terminated = true;
    s.success = success_condition(s);
    if (!s.success) s.failure = FailureReason::premature_stop;
  } else if (s.collision_count > p.collision_budget) {
    s.terminated = true;
    s.failure = FailureReason::collision;
  } else if (s.time >= p.max_steps) {
    s.terminated = true;
    s.failure = FailureReason::timeout;
  }
  return s;
}

inline bool check_success(const WorldState& s) { return s.terminated && s.success; }

// ---------------------------------------------------------------------------
// observe
// ---------------------------------------------------------------------------

enum RayClass : int {
  kRayNothing = 0,
  kRayObstacle = 1,
  kRayReceptacleClosed = 2,
  kRayReceptacleOpen = 3,
  kRayObject = 4,
};

inline Observation observe(const WorldState& s) {
  const EnvParams& p = *s.params;
  Observation obs;
  obs.rays.assign(size_t(p.ray_dim()), 0.0f);

  const double fov = p.fov_deg * M_PI / 180.0;
  const bool object_visible = !s.object_contained || object_accessible(s);

  for (int i = 0; i < p.ray_count; ++i) {
    const double frac = p.ray_count == 1 ? 0.5 : double(i) / double(p.ray_count - 1);
    const double a = s.heading - fov * 0.5 + fov * frac;
    const Vec2 d = heading_dir(a);
    double best_t = p.ray_max;
    int cls = kRayNothing;

    auto consider = [&](double t, int c) {
      if (t >= 0.0 && t < best_t) {
        best_t = t;
        cls = c;
      }
    };

    // Arena walls as obstacles: exit point of the arena box.
    {
      double tmax = std::numeric_limits<double>::infinity();
      if (std::fabs(d.x) > 1e-12)
        tmax = std::min(tmax, ((d.x > 0 ? p.arena : 0.0) - s.base.x) / d.x);
      if (std::fabs(d.y) > 1e-12)
        tmax = std::min(tmax, ((d.y > 0 ? p.arena : 0.0) - s.base.y) / d.y);
      consider(tmax, kRayObstacle);
    }
    for (const Rect& ob : s.spec->obstacles) consider(ray_rect_entry(s.base, d, ob), kRayObstacle);
    for (size_t ri = 0; ri < s.spec->receptacles.size(); ++ri) {
      const int c = receptacle_open(s, int(ri)) ? kRayReceptacleOpen : kRayReceptacleClosed;
      consider(ray_rect_entry(s.base, d, s.spec->receptacles[ri].body), c);
    }
    if (object_visible)
      consider(ray_circle_entry(s.base, d, s.object, p.object_radius), kRayObject);

    obs.rays[size_t(i * 6)] = float(std::min(best_t, p.ray_max) / p.ray_max);
    if (best_t >= p.ray_max) cls = kRayNothing;
    obs.rays[size_t(i * 6 + 1 + cls)] = 1.0f;
  }

  // Proprioception.
  const Vec2 ee = end_effector(s);
  obs.proprio.reserve(size_t(p.proprio_dim()));
  for (double qi : s.q) obs.proprio.push_back(float(qi));
  obs.proprio.push_back(s.holding ? 1.0f : 0.0f);
  auto push_cart = [&](const Vec2& target) {
    const Vec2 rel = (target - ee).rotated(-s.heading);
    obs.proprio.push_back(float(rel.x));
    obs.proprio.push_back(float(rel.y));
  };
  auto push_polar = [&](const Vec2& target) {
    const Vec2 rel = target - s.base;
    obs.proprio.push_back(float(rel.norm()));
    obs.proprio.push_back(float(wrap_angle(rel.angle() - s.heading)));
  };
  push_cart(s.spec->object_start);
  push_cart(s.spec->goal);
  push_polar(s.spec->object_start);
  push_polar(s.spec->goal);
  return obs;
}

// ---------------------------------------------------------------------------
// Ground-truth skill labeling
// ---------------------------------------------------------------------------

inline int gt_skill_label(const WorldState& s) {
  if (success_condition(s)) return kSkillStop;
  const double r = s.params->skill_radius;
  const bool near_obj = dist(s.base, s.spec->object_start) <= r;
  const bool near_goal = dist(s.base, s.spec->goal) <= r;
  auto open_kind = [&](int container) {
    return s.spec->receptacles[size_t(container - 1)].kind == kDrawer ? kSkillOpenDrawer
                                                                      : kSkillOpenFridge;
  };
  const bool goal_closed = s.spec->goal_container != 0 && !goal_accessible(s);
  const bool obj_closed = s.object_contained && !object_accessible(s);
  if (!s.holding) {
    if (near_goal && goal_closed) return open_kind(s.spec->goal_container);
    if (near_obj && obj_closed) return open_kind(s.spec->object_container);
    if (near_obj && object_accessible(s)) return kSkillPick;
    return kSkillNavigate;
  }
  if (near_goal) {
    if (goal_closed) return open_kind(s.spec->goal_container);
    return kSkillPlace;
  }
  return kSkillNavigate;
}

// ---------------------------------------------------------------------------
// Reward
// ---------------------------------------------------------------------------

// Progress-shaped move-object reward: EE-to-object progress while empty-
// handed, object-to-goal progress while holding, +1 on the success
// transition.
inline double move_object_reward(const WorldState& prev, const WorldState& cur) {
  double r = 0.0;
  if (!prev.holding) {
    r += dist(end_effector(prev), prev.object) - dist(end_effector(cur), cur.object);
  } else {
    r += dist(prev.object, goal_world(prev)) - dist(cur.object, goal_world(cur));
  }
  if (cur.success && !prev.success) r += 1.0;
  return r;
}

}  // namespace rearrange
