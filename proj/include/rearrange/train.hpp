#pragma once

#include <functional>

#include "rearrange/policy.hpp"

namespace rearrange {

struct TrainConfig {
  ScheduleCfg schedule{1e-8, 3e-4, 15, 160};  // desk defaults
  int episodes_per_epoch = 80;
  int windows_per_episode = 4;
  int batch_size = 32;
  double grad_clip = 1.0;
  int eval_every = 0;  // epochs between checkpoint-selection evals; 0 = off
  uint64_t seed = 0;
  bool include_failures = false;

  json to_json() const {
    return json{{"lr_min", schedule.lr_min},
                {"lr_max", schedule.lr_max},
                {"warmup_epochs", schedule.warmup_epochs},
                {"total_epochs", schedule.total_epochs},
                {"episodes_per_epoch", episodes_per_epoch},
                {"windows_per_episode", windows_per_episode},
                {"batch_size", batch_size},
                {"grad_clip", grad_clip},
                {"eval_every", eval_every},
                {"seed", seed},
                {"include_failures", include_failures}};
  }
};

struct MetricsRow {
  int epoch = 0;
  double lr = 0;
  double loss = 0;
  double loss_skill = 0;
  double loss_act = 0;
  double loss_aux = 0;
  double skill_acc = 0;
  double grad_norm = 0;
};

inline std::string metrics_csv_header() {
  return "epoch,lr,L,L_skill,L_act,L_aux,skill_acc,grad_norm";
}

inline std::string metrics_csv_row(const MetricsRow& r) {
  std::string s = std::to_string(r.epoch);
  for (double v : {r.lr, r.loss, r.loss_skill, r.loss_act, r.loss_aux, r.skill_acc, r.grad_norm}) {
    s += ",";
    s += fmt_g9(v);
  }
  return s;
}

struct TrainResult {
  nn::ParamSet params;       // final parameters
  nn::ParamSet best_params;  // best by the selection callback (== params when unused)
  ModelConfig cfg;
  std::vector<MetricsRow> metrics;
  double dt_max_return = 0.0;
  double best_eval = -1.0;

  std::string metrics_csv() const {
    std::string out = metrics_csv_header() + "\n";
    for (const MetricsRow& r : metrics) out += metrics_csv_row(r) + "\n";
    return out;
  }
};

namespace train_detail {

inline nn::ParamSet snapshot(const nn::ParamSet& ps) {
  nn::ParamSet copy;
  for (size_t i = 0; i < ps.size(); ++i)
    copy.put(ps.names()[i],
             Tensor::from(ps.tensors()[i].shape(), ps.tensors()[i].values(), true));
  return copy;
}

// Windows for bc-modular end inside one skill segment per sub-model; other
// variants sample uniform end offsets.
inline int sample_window_end(const Trajectory& tr, const ModelConfig& cfg, Rng& rng) {
  if (cfg.variant != Variant::bc_modular) return int(rng.randint(tr.steps.size()));
  for (int tries = 0; tries < 20; ++tries) {
    int e = int(rng.randint(tr.steps.size()));
    if (tr.steps[size_t(e)].skill < kSkillStop) return e;
  }
  return int(rng.randint(tr.steps.size()));
}

}  // namespace train_detail

// Imitation training: per epoch, iterate a fixed number of randomly selected
// episodes, sample context-length windows from each, and apply AdamW with the
// warmup+cosine schedule. The loss covers every non-padded window position
// under teacher forcing.
inline TrainResult train(const std::vector<Trajectory>& dataset, const ModelConfig& cfg,
                         const TrainConfig& tc,
                         const std::function<double(const nn::ParamSet&, const ModelConfig&)>&
                             selection_eval = nullptr,
                         const nn::ParamSet* init_from = nullptr) {
  if (dataset.empty()) fail("train: empty dataset");

  TrainResult result;
  result.cfg = cfg;
  nn::ParamSet params;
  if (init_from) params = train_detail::snapshot(*init_from);
  PolicyNetT<float> net = build_policy(cfg, params);

  for (const Trajectory& tr : dataset)
    result.dt_max_return = std::max(result.dt_max_return, tr.total_return());

  OptimState opt;
  opt.init(params.tensors());

  const int n_batches_hint =
      std::max(1, tc.episodes_per_epoch * tc.windows_per_episode / tc.batch_size);
  (void)n_batches_hint;

  for (int epoch = 0; epoch < tc.schedule.total_epochs; ++epoch) {
    const double lr = lr_at(epoch, tc.schedule);
    Rng erng(seed_mix(tc.seed, 0xe90c4, uint64_t(epoch)));

    // select episodes for this epoch
    std::vector<size_t> order(dataset.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    erng.shuffle(order);
    std::vector<size_t> chosen;
    for (int i = 0; i < tc.episodes_per_epoch; ++i)
      chosen.push_back(order[size_t(i) % order.size()]);

    // sample windows
    std::vector<Window> windows;
    for (size_t ei : chosen)
      for (int k = 0; k < tc.windows_per_episode; ++k)
        windows.push_back(make_window(dataset[ei],
                                      train_detail::sample_window_end(dataset[ei], cfg, erng),
                                      cfg));
    erng.shuffle(windows);

    MetricsRow row;
    row.epoch = epoch;
    row.lr = lr;
    long positions = 0;
    int batches = 0;

    for (size_t start = 0; start < windows.size(); start += size_t(tc.batch_size)) {
      const size_t bsz = std::min(size_t(tc.batch_size), windows.size() - start);
      params.zero_grads();

      std::vector<GradMap<float>> grads(bsz);
      std::vector<LossBreakdown> breakdowns(bsz);
      parallel_for(bsz, [&](size_t bi) {
        const Window& w = windows[start + bi];
        Rng drop_rng(seed_mix(tc.seed, uint64_t(epoch) * 1000003ULL + start + bi, 0xd209));
        Tape tape;
        {
          TapeScope scope(tape);
          Tensor loss = compute_window_loss(net, w, &breakdowns[bi], cfg.dropout, &drop_rng);
          if (!std::isfinite(breakdowns[bi].total))
            fail("train: non-finite loss at epoch " + std::to_string(epoch));
          if (tape.empty()) return;  // windowed segment contributed nothing
          grads[bi] = backward(tape, Tensor::scalar(1.0f), /*write_leaf_grads=*/false);
        }
      });

      // deterministic reduction in window order
      const float inv_b = 1.0f / float(bsz);
      for (size_t bi = 0; bi < bsz; ++bi) {
        for (auto& t : params.tensors()) {
          auto it = grads[bi].find(t.id());
          if (it == grads[bi].end()) continue;
          t.ensure_grad();
          auto& g = t.grad();
          for (size_t k = 0; k < g.size(); ++k) g[k] += it->second[k] * inv_b;
        }
        row.loss += breakdowns[bi].total;
        row.loss_skill += breakdowns[bi].skill;
        row.loss_act += breakdowns[bi].act;
        row.loss_aux += breakdowns[bi].aux;
        row.skill_acc += breakdowns[bi].skill_correct;
        positions += breakdowns[bi].skill_count;
      }

      row.grad_norm = clip_global_norm(params.tensors(), tc.grad_clip);
      adamw_step(params.tensors(), opt, lr, &params.names());
      batches += 1;
    }

    const double denom = double(windows.size());
    row.loss /= denom;
    row.loss_skill /= denom;
    row.loss_act /= denom;
    row.loss_aux /= denom;
    row.skill_acc = positions > 0 ? row.skill_acc / double(positions) : 0.0;
    result.metrics.push_back(row);

    if (selection_eval && tc.eval_every > 0 &&
        ((epoch + 1) % tc.eval_every == 0 || epoch + 1 == tc.schedule.total_epochs)) {
      const double score = selection_eval(params, cfg);
      if (score > result.best_eval) {
        result.best_eval = score;
        result.best_params = train_detail::snapshot(params);
      }
    }
  }

  result.params = std::move(params);
  if (result.best_params.size() == 0) result.best_params = train_detail::snapshot(result.params);
  return result;
}

}  // namespace rearrange
