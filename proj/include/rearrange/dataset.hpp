#pragma once

#include <nlohmann/json.hpp>

#include "rearrange/episodes.hpp"
#include "rearrange/oracle.hpp"

namespace rearrange {

// One labeled demonstration timestep.
struct DemoStep {
  Observation obs;
  ActionVector action;
  int skill = kSkillNavigate;
  int y_pred = 0;  // receptacle holding the target object, 0 = none
  float reward = 0.0f;
  bool done = false;
};

struct Trajectory {
  EpisodeSpec spec;
  std::vector<DemoStep> steps;
  bool success = false;

  double total_return() const {
    double r = 0.0;
    for (const DemoStep& s : steps) r += double(s.reward);
    return r;
  }
};

// ---------------------------------------------------------------------------
// Demonstration generation: execute the plan with the scripted skills,
// labeling each step with the acting skill and the privileged container id.
// ---------------------------------------------------------------------------

inline Trajectory generate_demo(const EpisodeSpec& spec, PlanMode mode,
                                const EnvParams& params = {}) {
  Trajectory traj;
  traj.spec = spec;
  WorldState state = reset(spec, params);
  const Plan p = plan(spec, mode);
  for (const PlanEntry& entry : p.entries) {
    SkillScratch scratch;
    while (!state.terminated) {
      SkillStep step_out = skill_policy_step(entry.skill, entry.target, state, scratch);
      if (step_out.done) break;
      DemoStep d;
      d.obs = observe(state);
      d.action = step_out.action;
      d.skill = entry.skill;
      d.y_pred = spec.object_container;
      WorldState next = step(state, step_out.action);
      d.reward = float(move_object_reward(state, next));
      traj.steps.push_back(std::move(d));
      state = next;
    }
    if (state.terminated) break;
  }
  if (!traj.steps.empty()) traj.steps.back().done = true;
  traj.success = state.success;
  return traj;
}

// ---------------------------------------------------------------------------
// Dataset directory: manifest.json + episode_%06d.jsonl. Floats carry 9
// significant digits, which round-trips binary32 exactly.
// ---------------------------------------------------------------------------

inline constexpr int kDatasetVersion = 1;

namespace detail {

inline void append_float_array(std::string& out, const std::vector<float>& v) {
  out += '[';
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ',';
    out += fmt_g9(double(v[i]));
  }
  out += ']';
}

}  // namespace detail

inline std::string demo_step_line(const DemoStep& d, int t) {
  std::string out;
  out += "{\"t\":" + std::to_string(t);
  out += ",\"rays\":";
  detail::append_float_array(out, d.obs.rays);
  out += ",\"proprio\":";
  detail::append_float_array(out, d.obs.proprio);
  out += ",\"arm\":[";
  for (size_t i = 0; i < d.action.arm.size(); ++i) {
    if (i) out += ',';
    out += fmt_g9(double(float(d.action.arm[i])));
  }
  out += "],\"base\":[" + fmt_g9(double(float(d.action.lin))) + "," +
         fmt_g9(double(float(d.action.ang))) + "]";
  out += ",\"gripper\":" + std::to_string(d.action.gripper);
  out += ",\"skill\":" + std::to_string(d.skill);
  out += ",\"y_pred\":" + std::to_string(d.y_pred);
  out += ",\"reward\":" + fmt_g9(double(d.reward));
  out += ",\"done\":";
  out += d.done ? "true" : "false";
  out += "}";
  return out;
}

inline DemoStep demo_step_from_json(const json& j) {
  DemoStep d;
  for (const auto& v : j.at("rays")) d.obs.rays.push_back(v.get<float>());
  for (const auto& v : j.at("proprio")) d.obs.proprio.push_back(v.get<float>());
  for (const auto& v : j.at("arm")) d.action.arm.push_back(double(v.get<float>()));
  d.action.lin = double(j.at("base")[0].get<float>());
  d.action.ang = double(j.at("base")[1].get<float>());
  d.action.gripper = j.at("gripper");
  d.skill = j.at("skill");
  d.y_pred = j.at("y_pred");
  d.reward = j.at("reward").get<float>();
  d.done = j.at("done");
  return d;
}

inline std::string episode_file_name(int index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "episode_%06d.jsonl", index);
  return buf;
}

inline void write_dataset(const std::vector<Trajectory>& trajectories,
                          const std::filesystem::path& dir, uint64_t config_digest,
                          const EnvParams& params = {}) {
  std::filesystem::create_directories(dir);
  json files = json::array();
  int successes = 0;
  for (size_t i = 0; i < trajectories.size(); ++i) {
    const Trajectory& tr = trajectories[i];
    std::string body;
    for (size_t t = 0; t < tr.steps.size(); ++t) {
      body += demo_step_line(tr.steps[t], int(t));
      body += "\n";
    }
    const std::string name = episode_file_name(int(i));
    atomic_write_file(dir / name, body);
    successes += tr.success ? 1 : 0;
    files.push_back(json{{"file", name},
                         {"success", tr.success},
                         {"steps", tr.steps.size()},
                         {"return", tr.total_return()},
                         {"spec", episode_to_json(tr.spec)}});
  }
  json manifest{{"version", kDatasetVersion},
                {"config_digest", digest_hex(config_digest)},
                {"episodes", trajectories.size()},
                {"successes", successes},
                {"failures", trajectories.size() - size_t(successes)},
                {"skills", json::array({"navigate", "pick", "place", "open_drawer",
                                        "open_fridge", "stop"})},
                {"n_receptacles", 2},
                {"arm_dof", params.arm_dof},
                {"ray_count", params.ray_count},
                {"files", files}};
  atomic_write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

struct DatasetInfo {
  int version = 0;
  std::string config_digest;
  int arm_dof = 0;
  int ray_count = 0;
  size_t episodes = 0;
  size_t successes = 0;
};

// Failed demonstrations are excluded from training by default but stay on
// disk; include_failures restores them.
inline std::vector<Trajectory> read_dataset(const std::filesystem::path& dir,
                                            bool include_failures = false,
                                            DatasetInfo* info_out = nullptr,
                                            const std::string& expect_digest = {}) {
  const auto manifest_path = dir / "manifest.json";
  json manifest;
  try {
    manifest = json::parse(read_file(manifest_path));
  } catch (const std::exception& e) {
    fail("dataset manifest " + manifest_path.string() + ": " + e.what());
  }
  if (manifest.at("version").get<int>() != kDatasetVersion)
    fail("dataset version mismatch in " + dir.string() + ": found " +
         std::to_string(manifest.at("version").get<int>()) + ", expected " +
         std::to_string(kDatasetVersion));
  if (!expect_digest.empty() && manifest.at("config_digest").get<std::string>() != expect_digest)
    fail("dataset config digest mismatch in " + dir.string());

  DatasetInfo info;
  info.version = manifest.at("version");
  info.config_digest = manifest.at("config_digest");
  info.arm_dof = manifest.at("arm_dof");
  info.ray_count = manifest.at("ray_count");
  info.episodes = manifest.at("episodes").get<size_t>();
  info.successes = manifest.at("successes").get<size_t>();
  if (info_out) *info_out = info;

  std::vector<Trajectory> out;
  for (const auto& entry : manifest.at("files")) {
    const bool success = entry.at("success");
    if (!success && !include_failures) continue;
    Trajectory tr;
    tr.spec = episode_from_json(entry.at("spec"));
    tr.success = success;
    const auto path = dir / entry.at("file").get<std::string>();
    std::ifstream in(path);
    if (!in) fail("dataset episode missing: " + path.string());
    std::string line;
    int line_no = 0;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      try {
        tr.steps.push_back(demo_step_from_json(json::parse(line)));
      } catch (const std::exception& e) {
        fail("dataset " + path.string() + ":" + std::to_string(line_no) + ": " + e.what());
      }
    }
    const size_t expect_steps = entry.at("steps").get<size_t>();
    if (tr.steps.size() != expect_steps)
      fail("dataset " + path.string() + ": truncated, " + std::to_string(tr.steps.size()) +
           " of " + std::to_string(expect_steps) + " steps");
    out.push_back(std::move(tr));
  }
  return out;
}

}  // namespace rearrange
