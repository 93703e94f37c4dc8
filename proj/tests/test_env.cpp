#include <catch2/catch_amalgamated.hpp>

#include "rearrange/episodes.hpp"

using namespace rearrange;

namespace {

EpisodeSpec simple_spec() {
  EpisodeSpec e;
  e.seed = 1;
  e.object_start = {3.0, 5.0};
  e.goal = {7.0, 5.0};
  e.agent_start = {5.0, 2.0, M_PI / 2.0};
  return e;
}

EpisodeSpec drawer_spec() {
  EpisodeSpec e = simple_spec();
  e.receptacles.push_back(detail::make_receptacle(kDrawer, kWallN, 5.0, 10.0, 0));
  e.receptacles.push_back(detail::make_receptacle(kFridge, kWallW, 5.0, 10.0, 0));
  e.object_container = 1;
  e.object_start = e.receptacles[0].contents_at(0);
  e.difficulty = Difficulty::hard;
  return e;
}

ActionVector zero_action(const EnvParams& p) { return ActionVector::zero(p.arm_dof); }

// Stand 1 m in front of the drawer handle with the arm extended onto it,
// attach, then back straight up; the projected displacement opens it.
WorldState grab_drawer_handle(const EpisodeSpec& spec, const EnvParams& p) {
  WorldState s = reset(spec, p);
  const Receptacle& r = spec.receptacles[0];
  const Vec2 handle = r.handle_at(0);
  s.base = handle + r.front * 1.0;
  s.heading = (handle - s.base).angle();
  s.q = {0.0, 0.0};  // extended: EE lands on the handle
  ActionVector close = zero_action(p);
  close.gripper = kGripClose;
  return step(s, close);
}

}  // namespace

TEST_CASE("generate_episode is deterministic and honors split invariants") {
  const EnvParams params;
  EpisodeSpec a = generate_episode(7, Difficulty::easy);
  EpisodeSpec b = generate_episode(7, Difficulty::easy);
  CHECK(episode_to_json(a).dump() == episode_to_json(b).dump());
  CHECK(a.object_container == 0);
  CHECK(a.goal_container == 0);

  for (uint64_t seed = 0; seed < 12; ++seed) {
    EpisodeSpec vh = generate_episode(seed, Difficulty::very_hard);
    CHECK(vh.object_container != 0);
    CHECK(vh.goal_container != 0);
    CHECK(vh.object_container != vh.goal_container);
    EpisodeSpec h = generate_episode(seed, Difficulty::hard);
    CHECK(((h.object_container != 0) ^ (h.goal_container != 0)));
    // contained starts sit at the container interior
    if (h.object_container != 0) {
      const Vec2 anchor = h.receptacles[size_t(h.object_container - 1)].contents_at(0);
      CHECK(dist(h.object_start, anchor) < 1e-12);
    }
  }
}

TEST_CASE("episode specs round-trip through json") {
  EpisodeSpec e = generate_episode(42, Difficulty::very_hard);
  EpisodeSpec back = episode_from_json(episode_to_json(e));
  CHECK(episode_to_json(back).dump() == episode_to_json(e).dump());
}

TEST_CASE("reset places contained objects at the interior anchor") {
  const EnvParams p;
  EpisodeSpec spec = drawer_spec();
  WorldState s = reset(spec, p);
  CHECK(s.time == 0);
  CHECK_FALSE(s.holding);
  CHECK(s.openness[0] == 0.0);
  CHECK(dist(s.object, spec.receptacles[0].anchor) < 1e-12);

  WorldState s2 = reset(spec, p);
  CHECK(s2.base.x == s.base.x);
  CHECK(s2.object.x == s.object.x);
  CHECK(s2.q == s.q);
}

TEST_CASE("rays see closed receptacles after reset") {
  const EnvParams p;
  EpisodeSpec spec = drawer_spec();
  WorldState s = reset(spec, p);
  // face the drawer from below
  s.base = {5.0, 7.0};
  s.heading = M_PI / 2.0;
  Observation obs = observe(s);
  int closed_hits = 0;
  for (int i = 0; i < p.ray_count; ++i)
    if (obs.rays[size_t(i * 6 + 1 + kRayReceptacleClosed)] == 1.0f) ++closed_hits;
  CHECK(closed_hits > 0);
}

TEST_CASE("zero action only advances time") {
  const EnvParams p;
  WorldState s = reset(simple_spec(), p);
  WorldState s2 = step(s, zero_action(p));
  CHECK(s2.time == 1);
  CHECK(s2.base.x == s.base.x);
  CHECK(s2.base.y == s.base.y);
  CHECK(s2.heading == s.heading);
  CHECK(s2.q == s.q);
  CHECK(s2.collision_count == 0);
}

TEST_CASE("driving into a wall leaves the pose unchanged and counts a collision") {
  const EnvParams p;
  EpisodeSpec spec = simple_spec();
  spec.agent_start = {5.0, 9.5, M_PI / 2.0};  // squeezed against the north wall
  WorldState s = reset(spec, p);
  ActionVector fwd = zero_action(p);
  fwd.lin = 1.0;
  WorldState s2 = step(s, fwd);
  CHECK(s2.base.x == s.base.x);
  CHECK(s2.base.y == s.base.y);
  CHECK(s2.collision_count == 1);

  // the base never ends up intersecting obstacles
  spec = simple_spec();
  spec.obstacles.push_back({4.0, 4.5, 6.0, 5.5});
  WorldState t = reset(spec, p);
  ActionVector push = zero_action(p);
  push.lin = 1.0;
  for (int i = 0; i < 30 && !t.terminated; ++i) {
    t = step(t, push);
    for (const Rect& ob : spec.obstacles) CHECK(ob.distance(t.base) >= p.base_radius - 1e-9);
  }
  CHECK(t.collision_count > 0);
}

TEST_CASE("closing the gripper near an accessible object grabs it") {
  const EnvParams p;
  EpisodeSpec spec = simple_spec();
  spec.object_start = {3.0, 5.1};
  WorldState s = reset(spec, p);
  s.base = {3.0, 4.0};
  s.heading = M_PI / 2.0;
  s.q = {0.0, 0.0};  // EE at (3, 5): 0.10 m from the object
  REQUIRE(dist(end_effector(s), s.object) == Catch::Approx(0.1).margin(1e-9));
  ActionVector close = zero_action(p);
  close.gripper = kGripClose;
  WorldState s2 = step(s, close);
  CHECK(s2.holding);
  CHECK(dist(s2.object, end_effector(s2)) < 1e-12);

  // the object tracks the end-effector while held
  ActionVector move = zero_action(p);
  move.arm = {0.05, -0.03};
  WorldState s3 = step(s2, move);
  CHECK(dist(s3.object, end_effector(s3)) < 1e-12);
}

TEST_CASE("contained objects cannot be grasped while the container is closed") {
  const EnvParams p;
  EpisodeSpec spec = drawer_spec();
  WorldState s = reset(spec, p);
  s.base = spec.receptacles[0].anchor + spec.receptacles[0].front * 1.0;
  s.heading = (spec.receptacles[0].anchor - s.base).angle();
  s.q = {0.0, 0.0};
  ActionVector close = zero_action(p);
  close.gripper = kGripClose;
  WorldState s2 = step(s, close);
  CHECK_FALSE(s2.holding);
}

TEST_CASE("pulling the drawer handle opens it monotonically") {
  const EnvParams p;
  EpisodeSpec spec = drawer_spec();
  WorldState s = grab_drawer_handle(spec, p);
  REQUIRE(s.handle_attached == 0);
  ActionVector back = zero_action(p);
  back.lin = -1.0;
  double prev = s.openness[0];
  while (s.openness[0] < 1.0 && s.time < 20) {
    s = step(s, back);
    CHECK(s.openness[0] >= prev - 1e-12);
    CHECK(s.openness[0] <= 1.0);
    prev = s.openness[0];
  }
  CHECK(s.openness[0] == Catch::Approx(1.0));
  // contents slid out with the drawer
  const Vec2 out = spec.receptacles[0].contents_at(1.0);
  CHECK(dist(s.object, out) < 1e-9);
  CHECK(object_accessible(s));
}

TEST_CASE("backing up with the fridge handle swings the door open") {
  const EnvParams p;
  for (int hinge_side = 0; hinge_side < 2; ++hinge_side) {
    EpisodeSpec spec = simple_spec();
    spec.receptacles.push_back(detail::make_receptacle(kFridge, kWallE, 5.0, 10.0, hinge_side));
    WorldState s = reset(spec, p);
    const Receptacle& r = spec.receptacles[0];
    const Vec2 handle = r.handle_at(0);
    s.base = handle + r.front * 1.0;
    s.heading = (handle - s.base).angle();
    s.q = {0.0, 0.0};
    ActionVector close = zero_action(p);
    close.gripper = kGripClose;
    s = step(s, close);
    REQUIRE(s.handle_attached == 0);
    // Pull along the swinging arc: keep the heading opposed to the local
    // tangent and back up.
    for (int i = 0; i < 40 && s.openness[0] < 0.95; ++i) {
      const Vec2 pull = r.pull_dir(s.openness[0]);
      const double want = pull.angle();
      const double err = wrap_angle(want - s.heading + M_PI);  // drive in reverse
      ActionVector a = zero_action(p);
      a.ang = std::clamp(err / p.ang_step, -1.0, 1.0);
      a.lin = std::fabs(err) < 0.6 ? -1.0 : 0.0;
      s = step(s, a);
    }
    INFO("hinge side " << hinge_side);
    CHECK(s.openness[0] >= 0.95);
  }
}

TEST_CASE("perturbation closes the container once, on the step after opening") {
  const EnvParams p;
  EpisodeSpec spec = drawer_spec();
  WorldState s = grab_drawer_handle(spec, p);
  s.perturb_armed = true;
  ActionVector back = zero_action(p);
  back.lin = -1.0;
  while (s.openness[0] < 0.9) s = step(s, back);
  CHECK_FALSE(s.perturb_fired);
  const double seen_open = s.openness[0];
  REQUIRE(seen_open >= 0.9);
  WorldState after = step(s, zero_action(p));
  CHECK(after.perturb_fired);
  CHECK(after.openness[0] == 0.0);
  CHECK(after.handle_attached == -1);
  CHECK(dist(after.object, spec.receptacles[0].contents_at(0)) < 1e-12);

  // a second opening is not perturbed again
  WorldState again = after;
  again.base = spec.receptacles[0].handle_at(0) + spec.receptacles[0].front * 1.0;
  again.heading = (spec.receptacles[0].handle_at(0) - again.base).angle();
  again.q = {0.0, 0.0};
  ActionVector close = zero_action(p);
  close.gripper = kGripClose;
  again = step(again, close);
  REQUIRE(again.handle_attached == 0);
  while (again.openness[0] < 1.0 && !again.terminated) again = step(again, back);
  CHECK(again.openness[0] == Catch::Approx(1.0));
  CHECK(again.perturb_fired);  // still marked, fired exactly once
}

TEST_CASE("perturbation never fires on easy episodes") {
  const EnvParams p;
  WorldState s = reset(simple_spec(), p, /*perturb=*/true);
  CHECK_FALSE(s.perturb_armed);
  for (int i = 0; i < 5; ++i) s = step(s, zero_action(p));
  CHECK_FALSE(s.perturb_fired);
}

TEST_CASE("empty arena rays report nothing at full depth") {
  EnvParams p;
  EpisodeSpec spec = simple_spec();
  spec.agent_start = {5.0, 5.0, M_PI / 4.0};
  WorldState s = reset(spec, p);
  s.object = {0.5, 0.5};  // behind the agent
  Observation obs = observe(s);
  // all rays travel >= 5 m before the walls along the diagonal fan
  for (int i = 0; i < p.ray_count; ++i) {
    CHECK(obs.rays[size_t(i * 6)] == 1.0f);
    CHECK(obs.rays[size_t(i * 6 + 1 + kRayNothing)] == 1.0f);
  }
}

TEST_CASE("ray depths match an independent ray-rectangle evaluation") {
  const EnvParams p;
  EpisodeSpec spec = simple_spec();
  spec.obstacles.push_back({4.0, 4.5, 6.0, 5.5});  // front face 2.5 m ahead
  WorldState s = reset(spec, p);
  s.object = {9, 9};
  Observation obs = observe(s);
  const double fov = p.fov_deg * M_PI / 180.0;
  for (int i = 0; i < p.ray_count; ++i) {
    const double a = s.heading - fov / 2 + fov * double(i) / double(p.ray_count - 1);
    // independent evaluation: distance along the ray to y = 4.5, if the hit
    // x lies within the slab, else the arena walls
    const Vec2 d = heading_dir(a);
    double expect = p.ray_max;
    if (d.y > 1e-12) {
      const double t = (4.5 - s.base.y) / d.y;
      const double x = s.base.x + t * d.x;
      if (x >= 4.0 && x <= 6.0) expect = std::min(expect, t);
    }
    if (expect >= p.ray_max) continue;  // wall hits checked elsewhere
    CHECK(double(obs.rays[size_t(i * 6)]) ==
          Catch::Approx(expect / p.ray_max).epsilon(1e-6));
    CHECK(obs.rays[size_t(i * 6 + 1 + kRayObstacle)] == 1.0f);
  }
  // the two central rays are ~2.5 m out
  CHECK(double(obs.rays[size_t(15 * 6)]) == Catch::Approx(0.5).margin(1e-3));
}

TEST_CASE("polar features match the closed form") {
  const EnvParams p;
  EpisodeSpec spec = simple_spec();
  WorldState s = reset(spec, p);
  Observation obs = observe(s);
  const int base_off = p.arm_dof + 1 + 4;
  const Vec2 rel = spec.object_start - s.base;
  CHECK(double(obs.proprio[size_t(base_off)]) == Catch::Approx(rel.norm()).epsilon(1e-6));
  CHECK(double(obs.proprio[size_t(base_off + 1)]) ==
        Catch::Approx(wrap_angle(rel.angle() - s.heading)).epsilon(1e-6));
  const Vec2 relg = spec.goal - s.base;
  CHECK(double(obs.proprio[size_t(base_off + 2)]) == Catch::Approx(relg.norm()).epsilon(1e-6));
  CHECK(double(obs.proprio[size_t(base_off + 3)]) ==
        Catch::Approx(wrap_angle(relg.angle() - s.heading)).epsilon(1e-6));
}

TEST_CASE("ground-truth skill labels follow the distance rules") {
  const EnvParams p;
  EpisodeSpec spec = drawer_spec();
  WorldState s = reset(spec, p);

  s.base = {5.0, 3.0};  // far from both
  CHECK(gt_skill_label(s) == kSkillNavigate);

  s.base = spec.object_start + Vec2{0.0, -1.2};  // near contained object, closed drawer
  CHECK(gt_skill_label(s) == kSkillOpenDrawer);

  s.openness[0] = 0.95;  // drawer open: pick
  s.object = spec.receptacles[0].contents_at(0.95);
  CHECK(gt_skill_label(s) == kSkillPick);

  s.holding = true;
  s.object_contained = false;
  s.object = end_effector(s);
  s.base = spec.goal + Vec2{-1.0, 0.0};
  CHECK(gt_skill_label(s) == kSkillPlace);

  // dropped within the success radius: stop from then on
  s.holding = false;
  s.object = spec.goal + Vec2{0.1, 0.0};
  CHECK(gt_skill_label(s) == kSkillStop);
}

TEST_CASE("labels never say pick or place through a closed container") {
  const EnvParams p;
  for (uint64_t seed = 100; seed < 110; ++seed) {
    EpisodeSpec spec = generate_episode(seed, Difficulty::very_hard);
    WorldState s = reset(spec, p);
    // stand near the object container, closed
    s.base = spec.object_start + Vec2{0.3, 0.3};
    int lbl = gt_skill_label(s);
    CHECK(lbl != kSkillPick);
    s.holding = true;
    s.object_contained = false;
    s.base = spec.goal + Vec2{0.3, 0.3};
    lbl = gt_skill_label(s);
    CHECK(lbl != kSkillPlace);
  }
}

TEST_CASE("move-object reward tracks progress and the success bonus") {
  const EnvParams p;
  EpisodeSpec spec = simple_spec();
  WorldState a = reset(spec, p);
  WorldState b = step(a, zero_action(p));
  CHECK(move_object_reward(a, b) == Catch::Approx(0.0).margin(1e-12));

  // holding: object moves 0.1 m toward the goal
  WorldState h = reset(spec, p);
  h.holding = true;
  h.object_contained = false;
  h.object = {5.0, 5.0};
  WorldState h2 = h;
  const Vec2 toward = (spec.goal - h.object) * (0.1 / dist(spec.goal, h.object));
  h2.object = h.object + toward;
  CHECK(move_object_reward(h, h2) == Catch::Approx(0.1).epsilon(1e-9));

  // success transition adds exactly +1
  WorldState s1 = reset(spec, p);
  s1.holding = false;
  s1.object = spec.goal;
  WorldState s2 = s1;
  s2.success = true;
  CHECK(move_object_reward(s1, s2) == Catch::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("success needs the stop signal, proximity, and an accessible goal") {
  const EnvParams p;
  EpisodeSpec spec = simple_spec();

  WorldState s = reset(spec, p);
  s.object = spec.goal;
  s.holding = false;
  ActionVector stop = zero_action(p);
  stop.stop = true;
  WorldState done = step(s, stop);
  CHECK(done.terminated);
  CHECK(done.success);
  CHECK(check_success(done));

  WorldState far = reset(spec, p);
  far.object = spec.goal + Vec2{0.2, 0.0};
  WorldState failed = step(far, stop);
  CHECK(failed.terminated);
  CHECK_FALSE(failed.success);
  CHECK(failed.failure == FailureReason::premature_stop);

  WorldState crash = reset(spec, p);
  crash.collision_count = p.collision_budget;  // one more exceeds the budget
  crash.base = {5.0, 9.5};
  crash.heading = M_PI / 2.0;
  ActionVector fwd = zero_action(p);
  fwd.lin = 1.0;
  WorldState dead = step(crash, fwd);
  CHECK(dead.collision_count == p.collision_budget + 1);
  CHECK(dead.terminated);
  CHECK_FALSE(dead.success);
  CHECK(dead.failure == FailureReason::collision);

  CHECK_THROWS_WITH(step(dead, fwd), Catch::Matchers::ContainsSubstring("terminated"));
}

TEST_CASE("timeout terminates at max_steps") {
  EnvParams p;
  p.max_steps = 5;
  WorldState s = reset(simple_spec(), p);
  for (int i = 0; i < 5; ++i) s = step(s, zero_action(p));
  CHECK(s.terminated);
  CHECK(s.failure == FailureReason::timeout);
}

TEST_CASE("identical action sequences replay to bit-identical trajectories") {
  const EnvParams p;
  EpisodeSpec spec = generate_episode(5, Difficulty::hard);
  Rng rng(123);
  std::vector<ActionVector> actions;
  for (int i = 0; i < 60; ++i) {
    ActionVector a = ActionVector::zero(p.arm_dof);
    a.arm = {rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2)};
    a.lin = rng.uniform(-1, 1);
    a.ang = rng.uniform(-1, 1);
    a.gripper = int(rng.randint(3));
    actions.push_back(a);
  }
  auto run = [&]() {
    std::vector<double> trace;
    WorldState s = reset(spec, p);
    for (const auto& a : actions) {
      if (s.terminated) break;
      s = step(s, a);
      trace.push_back(s.base.x);
      trace.push_back(s.base.y);
      trace.push_back(s.heading);
      trace.push_back(s.object.x);
      trace.push_back(s.object.y);
      trace.push_back(double(s.collision_count));
      trace.push_back(s.openness.empty() ? 0.0 : s.openness[0]);
    }
    return trace;
  };
  auto t1 = run();
  auto t2 = run();
  REQUIRE(t1.size() == t2.size());
  for (size_t i = 0; i < t1.size(); ++i)
    CHECK(std::memcmp(&t1[i], &t2[i], sizeof(double)) == 0);
}
