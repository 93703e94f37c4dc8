#pragma once

#include <deque>

#include "rearrange/checkpoint.hpp"
#include "rearrange/dataset.hpp"
#include "rearrange/nn.hpp"

namespace rearrange {

// The two-stage policy: a causal transformer infers the active skill from
// observation tokens, a second causal transformer decodes low-level actions
// from interleaved (observation, previous action, skill embedding) tokens.
// Baseline variants reuse the same parts.

enum class Variant { skill_transformer, dt, dt_skill, lstm, bc_modular };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::skill_transformer: return "st";
    case Variant::dt: return "dt";
    case Variant::dt_skill: return "dt-skill";
    case Variant::lstm: return "lstm";
    case Variant::bc_modular: return "bc-modular";
  }
  return "?";
}

inline Variant variant_from_name(const std::string& s) {
  if (s == "st" || s == "skill_transformer") return Variant::skill_transformer;
  if (s == "dt") return Variant::dt;
  if (s == "dt-skill" || s == "dt_skill") return Variant::dt_skill;
  if (s == "lstm") return Variant::lstm;
  if (s == "bc-modular" || s == "bc_modular") return Variant::bc_modular;
  fail("unknown variant: " + s + " (expected st|dt|dt-skill|lstm|bc-modular)");
}

struct ModelConfig {
  int context_length = 16;
  int token_dim = 64;
  int hidden_dim = 64;
  int n_heads = 4;
  int n_layers = 2;
  int n_skills = kNumSkills;
  int n_receptacles = 2;
  int arm_dof = 2;
  int gripper_classes = 3;
  int ray_count = 32;
  Variant variant = Variant::skill_transformer;
  double focal_gamma = 2.0;
  double dropout = 0.1;
  bool strict_skill_causality = false;
  uint64_t seed = 0;

  int ray_dim() const { return ray_count * 6; }
  int proprio_dim() const { return arm_dof + 9; }
  int obs_dim() const { return ray_dim() + proprio_dim(); }
  int action_dim() const { return arm_dof + 2 + gripper_classes; }
  int action_embed_dim() const { return arm_dof + 2 + gripper_classes; }
  int aux_dim() const { return n_receptacles + 1; }

  json to_json() const {
    return json{{"context_length", context_length},
                {"token_dim", token_dim},
                {"hidden_dim", hidden_dim},
                {"n_heads", n_heads},
                {"n_layers", n_layers},
                {"n_skills", n_skills},
                {"n_receptacles", n_receptacles},
                {"arm_dof", arm_dof},
                {"gripper_classes", gripper_classes},
                {"ray_count", ray_count},
                {"variant", variant_name(variant)},
                {"focal_gamma", focal_gamma},
                {"dropout", dropout},
                {"strict_skill_causality", strict_skill_causality},
                {"seed", seed}};
  }

  static ModelConfig from_json(const json& j) {
    ModelConfig c;
    c.context_length = j.at("context_length");
    c.token_dim = j.at("token_dim");
    c.hidden_dim = j.at("hidden_dim");
    c.n_heads = j.at("n_heads");
    c.n_layers = j.at("n_layers");
    c.n_skills = j.at("n_skills");
    c.n_receptacles = j.at("n_receptacles");
    c.arm_dof = j.at("arm_dof");
    c.gripper_classes = j.at("gripper_classes");
    c.ray_count = j.at("ray_count");
    c.variant = variant_from_name(j.at("variant"));
    c.focal_gamma = j.at("focal_gamma");
    c.dropout = j.at("dropout");
    c.strict_skill_causality = j.at("strict_skill_causality");
    c.seed = j.at("seed");
    return c;
  }

  uint64_t digest() const { return fnv1a64(to_json().dump()); }
};

// Baseline widths are adjusted so every variant lands within 10% of the
// skill transformer's parameter count at the same base width.
inline ModelConfig sized_for_variant(ModelConfig cfg) {
  switch (cfg.variant) {
    case Variant::skill_transformer:
      break;
    case Variant::dt:
    case Variant::dt_skill:
      cfg.token_dim = cfg.token_dim * 11 / 8;
      cfg.hidden_dim = cfg.hidden_dim * 11 / 8;
      break;
    case Variant::lstm:
      cfg.hidden_dim = cfg.hidden_dim * 21 / 16;
      break;
    case Variant::bc_modular:
      cfg.token_dim = cfg.token_dim * 9 / 16;
      cfg.hidden_dim = cfg.hidden_dim * 9 / 16;
      break;
  }
  while (cfg.hidden_dim % cfg.n_heads != 0) cfg.hidden_dim += 1;
  return cfg;
}

// ---------------------------------------------------------------------------
// Parameter construction. Creation by name is idempotent, so the same code
// initializes fresh models and re-attaches to checkpointed parameters.
// ---------------------------------------------------------------------------

template <typename Real>
struct ObsEncoderT {
  nn::LinearT<Real> ray1, ray2;
  nn::LinearT<Real> prop1, prop2;
  int ray_dim = 0;
  int proprio_dim = 0;

  static ObsEncoderT create(nn::ParamSetT<Real>& ps, const std::string& prefix,
                            const ModelConfig& cfg, Rng& rng) {
    ObsEncoderT e;
    const int half = cfg.token_dim / 2;
    e.ray1 = nn::LinearT<Real>::create(ps, prefix + ".ray1", cfg.ray_dim(), cfg.token_dim, rng);
    e.ray2 = nn::LinearT<Real>::create(ps, prefix + ".ray2", cfg.token_dim, half, rng);
    e.prop1 =
        nn::LinearT<Real>::create(ps, prefix + ".prop1", cfg.proprio_dim(), cfg.token_dim, rng);
    e.prop2 = nn::LinearT<Real>::create(ps, prefix + ".prop2", cfg.token_dim,
                                        cfg.token_dim - half, rng);
    e.ray_dim = cfg.ray_dim();
    e.proprio_dim = cfg.proprio_dim();
    return e;
  }

  // obs: [T x obs_dim] -> tokens [T x D]
  TensorT<Real> forward(const TensorT<Real>& obs) const {
    const int t = obs.dim(0);
    TensorT<Real> rays = slice(obs, {0, 0}, {t, ray_dim});
    TensorT<Real> prop = slice(obs, {0, ray_dim}, {t, proprio_dim});
    TensorT<Real> r = ray2.forward(gelu(ray1.forward(rays)));
    TensorT<Real> p = prop2.forward(gelu(prop1.forward(prop)));
    return concat(std::vector<TensorT<Real>>{r, p}, 1);
  }
};

template <typename Real>
struct PolicyNetT {
  ModelConfig cfg;

  // shared by the single-model variants
  ObsEncoderT<Real> enc;
  TensorT<Real> pos_skill;  // [C x D]
  TensorT<Real> pos_act;    // [C x D]
  TensorT<Real> pad_token;  // [1 x D]
  nn::LinearT<Real> act_embed;
  nn::LinearT<Real> arm_head, base_head, grip_head;

  // skill transformer / lstm
  nn::TransformerT<Real> skill_trunk;
  nn::TransformerT<Real> act_trunk;
  nn::RecurrentEncoderT<Real> skill_rnn;
  nn::RecurrentEncoderT<Real> act_rnn;
  nn::LinearT<Real> skill_head;
  nn::LinearT<Real> aux_head;
  TensorT<Real> skill_embed;  // [N x D]

  // dt variants
  nn::LinearT<Real> rtg_embed;

  // bc-modular: one action-only model per non-stop skill
  std::vector<ObsEncoderT<Real>> bc_enc;
  std::vector<nn::LinearT<Real>> bc_act_embed;
  std::vector<nn::TransformerT<Real>> bc_trunk;
  std::vector<nn::LinearT<Real>> bc_arm, bc_base, bc_grip;
  std::vector<TensorT<Real>> bc_pos, bc_pad;
};

template <typename Real>
PolicyNetT<Real> build_policy(const ModelConfig& cfg, nn::ParamSetT<Real>& ps) {
  Rng rng(seed_mix(cfg.seed, 0xb111d));
  PolicyNetT<Real> net;
  net.cfg = cfg;
  const int c = cfg.context_length;
  const int d = cfg.token_dim;

  nn::TransformerCfg tc;
  tc.token_dim = d;
  tc.hidden_dim = cfg.hidden_dim;
  tc.n_heads = cfg.n_heads;
  tc.n_layers = cfg.n_layers;

  auto pos_table = [&](const std::string& name, int rows) {
    return ps.param(name, {rows, d}, nn::init_normal<Real>(rng, 0.02));
  };

  if (cfg.variant == Variant::bc_modular) {
    for (int sk = 0; sk < kSkillStop; ++sk) {
      const std::string prefix = "bc" + std::to_string(sk);
      net.bc_enc.push_back(ObsEncoderT<Real>::create(ps, prefix + ".enc", cfg, rng));
      net.bc_act_embed.push_back(
          nn::LinearT<Real>::create(ps, prefix + ".aembed", cfg.action_embed_dim(), d, rng));
      tc.max_positions = 2 * c;
      net.bc_trunk.push_back(nn::TransformerT<Real>::create(ps, prefix + ".trunk", tc, rng));
      net.bc_arm.push_back(
          nn::LinearT<Real>::create(ps, prefix + ".arm", cfg.hidden_dim, cfg.arm_dof, rng));
      net.bc_base.push_back(nn::LinearT<Real>::create(ps, prefix + ".base", cfg.hidden_dim, 2, rng));
      net.bc_grip.push_back(nn::LinearT<Real>::create(ps, prefix + ".grip", cfg.hidden_dim,
                                                      cfg.gripper_classes, rng));
      net.bc_pos.push_back(pos_table(prefix + ".pos", c));
      net.bc_pad.push_back(ps.param(prefix + ".pad", {1, d}, nn::init_normal<Real>(rng, 0.02)));
    }
    return net;
  }

  net.enc = ObsEncoderT<Real>::create(ps, "enc", cfg, rng);
  net.pad_token = ps.param("pad", {1, d}, nn::init_normal<Real>(rng, 0.02));
  net.act_embed = nn::LinearT<Real>::create(ps, "aembed", cfg.action_embed_dim(), d, rng);
  net.arm_head = nn::LinearT<Real>::create(ps, "arm", cfg.hidden_dim, cfg.arm_dof, rng);
  net.base_head = nn::LinearT<Real>::create(ps, "base", cfg.hidden_dim, 2, rng);
  net.grip_head =
      nn::LinearT<Real>::create(ps, "grip", cfg.hidden_dim, cfg.gripper_classes, rng);
  net.pos_act = pos_table("pos_act", c);

  const bool has_skill_stage =
      cfg.variant == Variant::skill_transformer || cfg.variant == Variant::lstm;
  if (has_skill_stage) {
    net.pos_skill = pos_table("pos_skill", c);
    net.skill_head =
        nn::LinearT<Real>::create(ps, "skill_head", cfg.hidden_dim, cfg.n_skills, rng);
    net.aux_head = nn::LinearT<Real>::create(ps, "aux_head", cfg.hidden_dim, cfg.aux_dim(), rng);
    net.skill_embed = ps.param("skill_embed", {cfg.n_skills, d}, nn::init_normal<Real>(rng, 0.02));
    if (cfg.variant == Variant::lstm) {
      net.skill_rnn = nn::RecurrentEncoderT<Real>::create(ps, "skill_rnn", d, cfg.hidden_dim, rng);
      net.act_rnn = nn::RecurrentEncoderT<Real>::create(ps, "act_rnn", d, cfg.hidden_dim, rng);
    } else {
      tc.max_positions = c;
      net.skill_trunk = nn::TransformerT<Real>::create(ps, "skill_trunk", tc, rng);
      tc.max_positions = 3 * c;
      net.act_trunk = nn::TransformerT<Real>::create(ps, "act_trunk", tc, rng);
    }
  } else {
    net.pos_skill = pos_table("pos_skill", c);  // dt reads skills off x rows
    if (cfg.variant == Variant::dt_skill)
      net.skill_head =
          nn::LinearT<Real>::create(ps, "skill_head", cfg.hidden_dim, cfg.n_skills, rng);
    net.rtg_embed = nn::LinearT<Real>::create(ps, "rtg", 1, d, rng);
    tc.max_positions = 3 * c;
    net.act_trunk = nn::TransformerT<Real>::create(ps, "act_trunk", tc, rng);
  }
  return net;
}

// ---------------------------------------------------------------------------
// Training windows: fixed length C, front-padded at episode starts; padded
// slots are masked out of the loss.
// ---------------------------------------------------------------------------

struct Window {
  int length = 0;  // == C
  int pad = 0;     // leading padded slots
  std::vector<std::vector<float>> obs;          // flat observation per slot
  std::vector<std::vector<float>> prev_action;  // embedded-action input per slot
  std::vector<int> skill;                       // teacher labels
  std::vector<int> y_pred;
  std::vector<std::vector<float>> y_arm;
  std::vector<float> y_lin, y_ang;
  std::vector<int> y_grip;
  std::vector<float> rtg;

  int real() const { return length - pad; }
};

inline std::vector<float> encode_action_input(const ActionVector& a, int arm_dof,
                                              int gripper_classes) {
  std::vector<float> v;
  v.reserve(size_t(arm_dof + 2 + gripper_classes));
  for (int i = 0; i < arm_dof; ++i)
    v.push_back(i < int(a.arm.size()) ? float(a.arm[size_t(i)]) : 0.0f);
  v.push_back(float(a.lin));
  v.push_back(float(a.ang));
  for (int g = 0; g < gripper_classes; ++g) v.push_back(a.gripper == g ? 1.0f : 0.0f);
  return v;
}

// Window ending at step `end` (inclusive).
inline Window make_window(const Trajectory& tr, int end, const ModelConfig& cfg) {
  const int c = cfg.context_length;
  Window w;
  w.length = c;
  const int start = end - c + 1;
  w.pad = std::max(0, -start);
  double rtg = tr.total_return();
  for (int t = 0; t < start; ++t)
    if (t >= 0) rtg -= double(tr.steps[size_t(t)].reward);
  for (int i = 0; i < c; ++i) {
    const int t = start + i;
    if (t < 0) {
      w.obs.emplace_back();
      w.prev_action.emplace_back();
      w.skill.push_back(0);
      w.y_pred.push_back(0);
      w.y_arm.emplace_back();
      w.y_lin.push_back(0);
      w.y_ang.push_back(0);
      w.y_grip.push_back(0);
      w.rtg.push_back(0);
      continue;
    }
    const DemoStep& d = tr.steps[size_t(t)];
    w.obs.push_back(d.obs.flat());
    if (t == 0) {
      w.prev_action.push_back(encode_action_input(ActionVector::zero(cfg.arm_dof), cfg.arm_dof,
                                                  cfg.gripper_classes));
    } else {
      w.prev_action.push_back(encode_action_input(tr.steps[size_t(t - 1)].action, cfg.arm_dof,
                                                  cfg.gripper_classes));
    }
    w.skill.push_back(d.skill);
    w.y_pred.push_back(d.y_pred);
    std::vector<float> arm(size_t(cfg.arm_dof), 0.0f);
    for (int k = 0; k < cfg.arm_dof && k < int(d.action.arm.size()); ++k)
      arm[size_t(k)] = float(d.action.arm[size_t(k)]);
    w.y_arm.push_back(std::move(arm));
    w.y_lin.push_back(float(d.action.lin));
    w.y_ang.push_back(float(d.action.ang));
    w.y_grip.push_back(d.action.gripper);
    w.rtg.push_back(float(rtg));
    rtg -= double(d.reward);
  }
  return w;
}

// ---------------------------------------------------------------------------
// Forward passes
// ---------------------------------------------------------------------------

namespace policy_detail {

template <typename Real>
TensorT<Real> obs_matrix(const Window& w) {
  int dim = 0;
  for (const auto& o : w.obs)
    if (!o.empty()) dim = int(o.size());
  std::vector<Real> data(size_t(w.real()) * size_t(dim), Real(0));
  int row = 0;
  for (const auto& o : w.obs) {
    if (o.empty()) continue;
    for (size_t j = 0; j < o.size(); ++j) data[size_t(row) * size_t(dim) + j] = Real(o[j]);
    ++row;
  }
  return TensorT<Real>::from({w.real(), dim}, std::move(data));
}

template <typename Real>
TensorT<Real> matrix_from_rows(const std::vector<std::vector<float>>& rows, int skip,
                               int dim) {
  std::vector<Real> data;
  int count = 0;
  for (size_t i = size_t(skip); i < rows.size(); ++i) {
    for (int j = 0; j < dim; ++j) data.push_back(Real(rows[i][size_t(j)]));
    ++count;
  }
  return TensorT<Real>::from({count, dim}, std::move(data));
}

// Prepends `pad` copies of the pad token to a [R x D] block.
template <typename Real>
TensorT<Real> with_front_pad(const TensorT<Real>& block, const TensorT<Real>& pad_token,
                             int pad) {
  if (pad == 0) return block;
  TensorT<Real> pads = embedding_lookup(pad_token, std::vector<int>(size_t(pad), 0));
  return concat(std::vector<TensorT<Real>>{pads, block}, 0);
}

// Interleaves per-slot token rows from k streams of [C x D] into [kC x D].
template <typename Real>
TensorT<Real> interleave(const std::vector<TensorT<Real>>& streams) {
  const int c = streams[0].dim(0);
  const int d = streams[0].dim(1);
  const int k = int(streams.size());
  std::vector<TensorT<Real>> rows;
  rows.reserve(size_t(c * k));
  for (int i = 0; i < c; ++i)
    for (int s = 0; s < k; ++s) rows.push_back(slice(streams[size_t(s)], {i, 0}, {1, d}));
  return concat(rows, 0);
}

// Gathers rows offset, offset+k, offset+2k, ... from [kC x H].
template <typename Real>
TensorT<Real> gather_stride(const TensorT<Real>& m, int k, int offset, int c) {
  std::vector<TensorT<Real>> rows;
  rows.reserve(size_t(c));
  const int h = m.dim(1);
  for (int i = 0; i < c; ++i) rows.push_back(slice(m, {offset + i * k, 0}, {1, h}));
  return concat(rows, 0);
}

}  // namespace policy_detail

// Skill-stage output: per-position skill logits and auxiliary logits.
template <typename Real>
struct SkillStageOut {
  TensorT<Real> logits;  // [C x N]
  TensorT<Real> aux;     // [C x (M+1)]
};

// encode_observation over the window's real slots, with pads prepended:
// ray embedding (D/2) || proprio embedding (D/2) per slot.
template <typename Real>
TensorT<Real> encode_window_tokens(const PolicyNetT<Real>& net, const Window& w) {
  TensorT<Real> obs = policy_detail::obs_matrix<Real>(w);
  TensorT<Real> x = net.enc.forward(obs);
  return policy_detail::with_front_pad(x, net.pad_token, w.pad);
}

template <typename Real>
SkillStageOut<Real> skill_inference(const PolicyNetT<Real>& net, const Window& w,
                                    double dropout = 0.0, Rng* rng = nullptr) {
  const ModelConfig& cfg = net.cfg;
  TensorT<Real> x = encode_window_tokens(net, w);
  if (cfg.strict_skill_causality) {
    // position i sees tokens strictly before i: shift the stream right
    TensorT<Real> shifted = slice(x, {0, 0}, {cfg.context_length - 1, cfg.token_dim});
    x = policy_detail::with_front_pad(shifted, net.pad_token, 1);
  }
  x = nn::positional_embed(x, net.pos_skill);
  if (dropout > 0.0 && rng) x = nn::dropout(x, dropout, *rng);
  TensorT<Real> h = cfg.variant == Variant::lstm ? net.skill_rnn.forward(x)
                                                 : net.skill_trunk.forward_causal(x);
  if (dropout > 0.0 && rng) h = nn::dropout(h, dropout, *rng);
  SkillStageOut<Real> out;
  out.logits = net.skill_head.forward(h);
  out.aux = net.aux_head.forward(h);
  return out;
}

// Action-stage output heads, read at each timestep's final token.
template <typename Real>
struct ActionStageOut {
  TensorT<Real> arm;   // [C x A]
  TensorT<Real> base;  // [C x 2], tanh-squashed
  TensorT<Real> grip;  // [C x 3]
  TensorT<Real> skill_aux;  // dt-skill only: [C x N]
};

template <typename Real>
ActionStageOut<Real> action_inference(const PolicyNetT<Real>& net, const Window& w,
                                      const std::vector<int>& skills, double dropout = 0.0,
                                      Rng* rng = nullptr) {
  const ModelConfig& cfg = net.cfg;
  const int c = cfg.context_length;
  TensorT<Real> x = encode_window_tokens(net, w);

  TensorT<Real> a_in = policy_detail::matrix_from_rows<Real>(w.prev_action, w.pad,
                                                             cfg.action_embed_dim());
  TensorT<Real> a = policy_detail::with_front_pad(net.act_embed.forward(a_in), net.pad_token,
                                                  w.pad);

  std::vector<TensorT<Real>> streams;
  int read_offset = 0;
  if (cfg.variant == Variant::dt || cfg.variant == Variant::dt_skill) {
    std::vector<Real> rtg_data;
    for (int i = w.pad; i < c; ++i) rtg_data.push_back(Real(w.rtg[size_t(i)]));
    TensorT<Real> rtg_in = TensorT<Real>::from({c - w.pad, 1}, std::move(rtg_data));
    TensorT<Real> r = policy_detail::with_front_pad(net.rtg_embed.forward(rtg_in),
                                                    net.pad_token, w.pad);
    streams = {r, a, x};  // return-to-go, previous action, observation
    read_offset = 2;
  } else {
    // skill embedding rows for real slots; pads stay pad tokens
    std::vector<int> idx;
    for (int i = w.pad; i < c; ++i) idx.push_back(skills[size_t(i)]);
    TensorT<Real> z = policy_detail::with_front_pad(
        idx.empty() ? TensorT<Real>::zeros({0, cfg.token_dim})
                    : embedding_lookup(net.skill_embed, idx),
        net.pad_token, w.pad);
    streams = {x, a, z};  // observation, previous action, skill
    read_offset = 2;
  }

  // the three tokens of one timestep share a positional index
  std::vector<int> pos_idx;
  for (int i = 0; i < c; ++i)
    for (size_t s = 0; s < streams.size(); ++s) pos_idx.push_back(i);
  TensorT<Real> tokens = policy_detail::interleave(streams);
  tokens = nn::positional_embed(tokens, net.pos_act, pos_idx);
  if (dropout > 0.0 && rng) tokens = nn::dropout(tokens, dropout, *rng);

  TensorT<Real> h = cfg.variant == Variant::lstm ? net.act_rnn.forward(tokens)
                                                 : net.act_trunk.forward_causal(tokens);
  if (dropout > 0.0 && rng) h = nn::dropout(h, dropout, *rng);
  TensorT<Real> hz = policy_detail::gather_stride(h, int(streams.size()), read_offset, c);

  ActionStageOut<Real> out;
  out.arm = net.arm_head.forward(hz);
  out.base = vtanh(net.base_head.forward(hz));
  out.grip = net.grip_head.forward(hz);
  if (cfg.variant == Variant::dt_skill) out.skill_aux = net.skill_head.forward(hz);
  return out;
}

// bc-modular: per-skill action model over (prev action, observation) pairs.
template <typename Real>
ActionStageOut<Real> bc_forward(const PolicyNetT<Real>& net, int skill, const Window& w,
                                double dropout = 0.0, Rng* rng = nullptr) {
  const ModelConfig& cfg = net.cfg;
  const int c = cfg.context_length;
  if (skill < 0 || skill >= int(net.bc_enc.size())) fail("bc_forward: bad skill id");
  const auto& enc = net.bc_enc[size_t(skill)];
  const auto& pad = net.bc_pad[size_t(skill)];

  TensorT<Real> obs = policy_detail::obs_matrix<Real>(w);
  TensorT<Real> x = policy_detail::with_front_pad(enc.forward(obs), pad, w.pad);
  TensorT<Real> a_in = policy_detail::matrix_from_rows<Real>(w.prev_action, w.pad,
                                                             cfg.action_embed_dim());
  TensorT<Real> a = policy_detail::with_front_pad(
      net.bc_act_embed[size_t(skill)].forward(a_in), pad, w.pad);

  std::vector<TensorT<Real>> streams = {a, x};
  std::vector<int> pos_idx;
  for (int i = 0; i < c; ++i) {
    pos_idx.push_back(i);
    pos_idx.push_back(i);
  }
  TensorT<Real> tokens = policy_detail::interleave(streams);
  tokens = nn::positional_embed(tokens, net.bc_pos[size_t(skill)], pos_idx);
  if (dropout > 0.0 && rng) tokens = nn::dropout(tokens, dropout, *rng);
  TensorT<Real> h = net.bc_trunk[size_t(skill)].forward_causal(tokens);
  TensorT<Real> hx = policy_detail::gather_stride(h, 2, 1, c);

  ActionStageOut<Real> out;
  out.arm = net.bc_arm[size_t(skill)].forward(hx);
  out.base = vtanh(net.bc_base[size_t(skill)].forward(hx));
  out.grip = net.bc_grip[size_t(skill)].forward(hx);
  return out;
}

// ---------------------------------------------------------------------------
// Losses (Skill Inference focal + Action Inference mse/focal + auxiliary CE,
// summed without weights). Teacher forcing supplies ground-truth skills and
// demonstration previous actions.
// ---------------------------------------------------------------------------

struct LossBreakdown {
  double total = 0.0;
  double skill = 0.0;
  double act = 0.0;
  double aux = 0.0;
  int skill_correct = 0;
  int skill_count = 0;
};

template <typename Real>
TensorT<Real> row_of(const TensorT<Real>& m, int r) {
  return reshape(slice(m, {r, 0}, {1, m.dim(1)}), {m.dim(1)});
}

// Returns the differentiable total loss; fills `out` with detached values.
template <typename Real>
TensorT<Real> compute_window_loss(const PolicyNetT<Real>& net, const Window& w,
                                  LossBreakdown* out = nullptr, double dropout = 0.0,
                                  Rng* rng = nullptr) {
  const ModelConfig& cfg = net.cfg;
  const double gamma = cfg.focal_gamma;
  TensorT<Real> zero = TensorT<Real>::scalar(Real(0));
  TensorT<Real> l_skill = zero, l_act = zero, l_aux = zero;

  const bool has_skill_stage =
      cfg.variant == Variant::skill_transformer || cfg.variant == Variant::lstm;

  if (cfg.variant == Variant::bc_modular) {
    // one model per skill; supervise only the final (label-defining) position
    const int skill = w.skill[size_t(w.length - 1)];
    if (skill >= kSkillStop) {
      if (out) *out = LossBreakdown{};
      return zero;
    }
    ActionStageOut<Real> act = bc_forward(net, skill, w, dropout, rng);
    for (int i = w.pad; i < w.length; ++i) {
      if (w.skill[size_t(i)] != skill) continue;
      std::vector<Real> arm_t(w.y_arm[size_t(i)].begin(), w.y_arm[size_t(i)].end());
      TensorT<Real> base_t = TensorT<Real>::from(
          {2}, {Real(w.y_lin[size_t(i)]), Real(w.y_ang[size_t(i)])});
      l_act = add(l_act, nn::mse_loss(row_of(act.base, i), base_t));
      l_act = add(l_act, nn::mse_loss(row_of(act.arm, i),
                                      TensorT<Real>::from({cfg.arm_dof}, std::move(arm_t))));
      l_act = add(l_act, nn::focal_loss(row_of(act.grip, i), w.y_grip[size_t(i)], gamma));
    }
    TensorT<Real> total = l_act;
    if (out) {
      out->act = double(l_act.at(0));
      out->total = double(total.at(0));
    }
    return total;
  }

  SkillStageOut<Real> skill_out;
  if (has_skill_stage) skill_out = skill_inference(net, w, dropout, rng);
  ActionStageOut<Real> act = action_inference(net, w, w.skill, dropout, rng);

  LossBreakdown bd;
  for (int i = w.pad; i < w.length; ++i) {
    if (has_skill_stage) {
      TensorT<Real> srow = row_of(skill_out.logits, i);
      l_skill = add(l_skill, nn::focal_loss(srow, w.skill[size_t(i)], gamma));
      l_aux = add(l_aux, nn::cross_entropy(row_of(skill_out.aux, i), w.y_pred[size_t(i)]));
      bd.skill_correct +=
          nn::argmax_row(srow.values(), 0, size_t(cfg.n_skills)) == w.skill[size_t(i)];
      bd.skill_count += 1;
    } else if (cfg.variant == Variant::dt_skill) {
      TensorT<Real> srow = row_of(act.skill_aux, i);
      l_skill = add(l_skill, nn::focal_loss(srow, w.skill[size_t(i)], gamma));
      bd.skill_correct +=
          nn::argmax_row(srow.values(), 0, size_t(cfg.n_skills)) == w.skill[size_t(i)];
      bd.skill_count += 1;
    }
    std::vector<Real> arm_t(w.y_arm[size_t(i)].begin(), w.y_arm[size_t(i)].end());
    l_act = add(l_act, nn::mse_loss(row_of(act.base, i),
                                    TensorT<Real>::from({2}, {Real(w.y_lin[size_t(i)]),
                                                              Real(w.y_ang[size_t(i)])})));
    l_act = add(l_act, nn::mse_loss(row_of(act.arm, i),
                                    TensorT<Real>::from({cfg.arm_dof}, std::move(arm_t))));
    l_act = add(l_act, nn::focal_loss(row_of(act.grip, i), w.y_grip[size_t(i)], gamma));
  }

  TensorT<Real> total = add(add(l_skill, l_act), l_aux);
  if (out) {
    bd.skill = double(l_skill.at(0));
    bd.act = double(l_act.at(0));
    bd.aux = double(l_aux.at(0));
    bd.total = double(total.at(0));
    *out = bd;
  }
  return total;
}

// ---------------------------------------------------------------------------
// Rollout-time policy
// ---------------------------------------------------------------------------

enum class EvalMode { deterministic, stochastic };

struct RolloutContext {
  ModelConfig cfg;
  std::deque<std::vector<float>> obs;
  std::deque<std::vector<float>> prev_action;
  std::deque<int> skills;
  std::deque<float> rtg;
  ActionVector last_action;
  double rtg_remaining = 0.0;
  double dt_initial_return = 0.0;
  int stop_streak = 0;
  Rng rng;

  explicit RolloutContext(const ModelConfig& c, uint64_t seed = 0,
                          double dt_return = 0.0)
      : cfg(c), last_action(ActionVector::zero(c.arm_dof)),
        rtg_remaining(dt_return), dt_initial_return(dt_return), rng(seed) {}

  void observe_reward(double r) { rtg_remaining -= r; }

  void push(const Observation& o) {
    obs.push_back(o.flat());
    prev_action.push_back(
        encode_action_input(last_action, cfg.arm_dof, cfg.gripper_classes));
    rtg.push_back(float(rtg_remaining));
    while (int(obs.size()) > cfg.context_length) {
      obs.pop_front();
      prev_action.pop_front();
      rtg.pop_front();
      if (int(skills.size()) >= int(obs.size())) skills.pop_front();
    }
  }

  Window window() const {
    Window w;
    w.length = cfg.context_length;
    w.pad = cfg.context_length - int(obs.size());
    for (int i = 0; i < w.pad; ++i) {
      w.obs.emplace_back();
      w.prev_action.emplace_back();
      w.skill.push_back(0);
      w.rtg.push_back(0);
    }
    for (size_t i = 0; i < obs.size(); ++i) {
      w.obs.push_back(obs[i]);
      w.prev_action.push_back(prev_action[i]);
      w.skill.push_back(i < skills.size() ? skills[i] : 0);
      w.rtg.push_back(rtg[i]);
    }
    return w;
  }
};

struct ActOutput {
  ActionVector action;
  int skill = -1;
};

// One closed-loop decision: infer the skill from the observation history,
// then decode the action conditioned on it and the executed past actions.
template <typename Real>
ActOutput act(RolloutContext& ctx, const Observation& obs, const PolicyNetT<Real>& net,
              EvalMode mode = EvalMode::deterministic) {
  const ModelConfig& cfg = net.cfg;
  ctx.push(obs);
  Window w = ctx.window();
  const int last = cfg.context_length - 1;

  ActOutput out;
  out.action = ActionVector::zero(cfg.arm_dof);

  const bool has_skill_stage =
      cfg.variant == Variant::skill_transformer || cfg.variant == Variant::lstm;
  if (has_skill_stage) {
    SkillStageOut<Real> s = skill_inference(net, w);
    out.skill = nn::argmax_row(s.logits.values(), size_t(last) * size_t(cfg.n_skills),
                               size_t(cfg.n_skills));
    ctx.skills.push_back(out.skill);
    while (int(ctx.skills.size()) > int(ctx.obs.size())) ctx.skills.pop_front();
    w.skill.back() = out.skill;
    for (int i = 0; i < int(ctx.skills.size()); ++i)
      w.skill[size_t(w.pad + i)] = ctx.skills[size_t(i)];
  }

  ActionStageOut<Real> a = action_inference(net, w, w.skill);
  if (cfg.variant == Variant::dt_skill) {
    out.skill = nn::argmax_row(a.skill_aux.values(), size_t(last) * size_t(cfg.n_skills),
                               size_t(cfg.n_skills));
  }

  for (int i = 0; i < cfg.arm_dof; ++i) {
    double v = double(a.arm.at(last, i));
    if (mode == EvalMode::stochastic) v += ctx.rng.normal(0.0, 0.1);
    out.action.arm[size_t(i)] = v;
  }
  double lin = double(a.base.at(last, 0));
  double ang = double(a.base.at(last, 1));
  if (mode == EvalMode::stochastic) {
    lin += ctx.rng.normal(0.0, 0.1);
    ang += ctx.rng.normal(0.0, 0.1);
  }
  out.action.lin = lin;
  out.action.ang = ang;
  out.action.gripper = nn::argmax_row(a.grip.values(),
                                      size_t(last) * size_t(cfg.gripper_classes),
                                      size_t(cfg.gripper_classes));

  // Stop handling: three consecutive stop predictions issue the termination
  // signal; plain dt stops once its conditioned return is spent.
  if (out.skill == kSkillStop)
    ctx.stop_streak += 1;
  else
    ctx.stop_streak = 0;
  if (ctx.stop_streak >= 3) out.action.stop = true;
  if (cfg.variant == Variant::dt &&
      ctx.rtg_remaining <= 0.05 * std::max(1.0, ctx.dt_initial_return))
    out.action.stop = true;

  ctx.last_action = out.action;
  return out;
}

}  // namespace rearrange
