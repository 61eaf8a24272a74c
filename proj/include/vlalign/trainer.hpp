#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "vlalign/model.hpp"
#include "vlalign/records.hpp"

// Multi-task optimization of the four-part objective over the trainable
// parameter set, with warm-up + cosine decay and validation-based early
// stopping.

namespace vlalign {

struct TrainStepError : std::runtime_error {
  explicit TrainStepError(const std::string& msg) : std::runtime_error(msg) {}
};

// Decoupled weight decay adaptive-moment optimizer. Decay applies to
// weight matrices only; vectors (biases, norms, the temperature) are
// exempt.
class AdamW {
 public:
  AdamW(std::vector<Param*> params, const TrainConfig& cfg)
      : params_(std::move(params)),
        beta1_(cfg.beta1),
        beta2_(cfg.beta2),
        eps_(cfg.adam_eps),
        weight_decay_(cfg.weight_decay) {
    for (Param* p : params_) {
      m_.push_back(Tensor::zeros(p->value.shape()));
      v_.push_back(Tensor::zeros(p->value.shape()));
      decay_.push_back(p->value.rank() >= 2);
    }
  }

  void step(double lr) {
    ++t_;
    double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Param* p = params_[i];
      if (p->grad.numel() == 0) continue;
      double wd = decay_[i] ? weight_decay_ : 0.0;
      for (long j = 0; j < p->value.numel(); ++j) {
        double g = p->grad[j];
        m_[i][j] = beta1_ * m_[i][j] + (1.0 - beta1_) * g;
        v_[i][j] = beta2_ * v_[i][j] + (1.0 - beta2_) * g * g;
        double mhat = m_[i][j] / bc1;
        double vhat = v_[i][j] / bc2;
        p->value[j] -= lr * (mhat / (std::sqrt(vhat) + eps_) + wd * p->value[j]);
      }
    }
  }

  const std::vector<Param*>& params() const { return params_; }
  long steps_taken() const { return t_; }

 private:
  std::vector<Param*> params_;
  std::vector<Tensor> m_, v_;
  std::vector<char> decay_;
  double beta1_, beta2_, eps_, weight_decay_;
  long t_ = 0;
};

struct LrSchedule {
  double peak = 5.625e-5;
  long warmup_steps = 0;
  long total_steps = 1;
};

// Linear ramp to the peak over the warm-up, cosine decay to zero at the
// final step, zero beyond.
inline double lr_at(long step, const LrSchedule& s) {
  if (step < 0) throw ConfigError("lr_at: negative step");
  if (s.warmup_steps > 0 && step < s.warmup_steps)
    return s.peak * static_cast<double>(step) / static_cast<double>(s.warmup_steps);
  if (step >= s.total_steps) return 0.0;
  double progress = static_cast<double>(step - s.warmup_steps) /
                    static_cast<double>(s.total_steps - s.warmup_steps);
  return s.peak * 0.5 * (1.0 + std::cos(M_PI * progress));
}

struct LossReport {
  long step = 0;
  double l_global = 0.0;
  double l_local = 0.0;
  double l_mlm = 0.0;
  double l_mim = 0.0;
  double total = 0.0;
  double lr = 0.0;

  json to_json() const {
    return json{{"step", step},   {"l_global", l_global}, {"l_local", l_local}, {"l_mlm", l_mlm},
                {"l_mim", l_mim}, {"total", total},       {"lr", lr}};
  }
};

// Ablation switches empty a view family before encoding (the zero-fill
// path then applies, mirroring records with genuinely absent views).
inline Record apply_input_ablation(const Record& r, bool drop_temporal, bool drop_multiview) {
  Record out = r;
  auto clear = [&out](ViewTag v) {
    out.present[static_cast<std::size_t>(v)] = false;
    out.image(v) = Tensor(out.image(v).shape());
    if (v == ViewTag::pf) out.time_interval_days = -1.0;
  };
  if (drop_temporal) {
    clear(ViewTag::pf);
    clear(ViewTag::pl);
  }
  if (drop_multiview) {
    // lateral views disappear entirely, leaving the (cf, pf) pair
    clear(ViewTag::cl);
    clear(ViewTag::pl);
  }
  return out;
}

// One optimization step: a single forward computes all four losses with
// shared vision encodings (the MLM path re-encodes the masked report),
// then one AdamW update on the trainable set only.
inline LossReport train_step(DualTowerModel& m, const std::vector<const Record*>& raw_batch,
                             const LossWeights& lw, const TrainConfig& tc, AdamW& opt, double lr,
                             Rng& step_rng, long step_index,
                             std::vector<std::string>* warnings = nullptr) {
  std::vector<Record> ablated;
  std::vector<const Record*> batch;
  if (tc.ablate_temporal || tc.ablate_multiview) {
    ablated.reserve(raw_batch.size());
    for (const Record* r : raw_batch)
      ablated.push_back(apply_input_ablation(*r, tc.ablate_temporal, tc.ablate_multiview));
    for (const Record& r : ablated) batch.push_back(&r);
  } else {
    batch = raw_batch;
  }
  long B = static_cast<long>(batch.size());

  Graph g;
  auto parts = draw_partitions(B, m.cfg.n_patches(), m.cfg.image_mask_ratio, step_rng);
  BatchEncoding enc = encode_batch(g, m, batch, parts);

  NodePtr l_global = info_nce_global(g, enc.img.global, enc.txt.global, g.param(*m.align.log_tau_global));
  NodePtr total = l_global;

  NodePtr l_local;
  if (!tc.ablate_local) {
    l_local = info_nce_local(g, enc.img, enc.txt, m.align);
    total = add(total, scale(l_local, lw.lambda1));
  }

  MlmResult mlm_res;
  if (!tc.ablate_mlm) {
    std::vector<TokenizedReport> masked(batch.size());
    std::vector<const TokenizedReport*> masked_ptrs;
    for (std::size_t i = 0; i < batch.size(); ++i) {
      TokenizedReport plain;
      plain.ids = batch[i]->report_tokens;
      masked[i] = mask_tokens(plain, m.cfg.report_mask_ratio, step_rng);
      masked_ptrs.push_back(&masked[i]);
    }
    mlm_res = mlm_loss(g, m.language, m.mlm, masked_ptrs, enc.img.global);
    if (mlm_res.n_masked == 0 && warnings)
      warnings->push_back("step " + std::to_string(step_index) + ": no masked tokens, MLM loss 0");
    total = add(total, scale(mlm_res.loss, lw.lambda2));
  }

  MimResult mim_res;
  if (!tc.ablate_mim) {
    NodePtr cf_tokens = slice_batch(enc.vision_tokens, 0, B);
    std::vector<const Tensor*> cf_images;
    for (const Record* r : batch) cf_images.push_back(&r->image(ViewTag::cf));
    mim_res = mim_loss(g, m.decoder, cf_tokens, parts[0], cf_images, m.cfg.patch, m.cfg.mim_target_scale);
    if (mim_res.n_masked == 0 && warnings)
      warnings->push_back("step " + std::to_string(step_index) + ": no masked patches, MIM loss 0");
    total = add(total, scale(mim_res.loss, lw.lambda3));
  }

  LossReport rep;
  rep.step = step_index;
  rep.lr = lr;
  rep.l_global = l_global->value[0];
  rep.l_local = tc.ablate_local ? 0.0 : l_local->value[0];
  rep.l_mlm = tc.ablate_mlm ? 0.0 : mlm_res.loss->value[0];
  rep.l_mim = tc.ablate_mim ? 0.0 : mim_res.loss->value[0];
  rep.total = total->value[0];
  if (!std::isfinite(rep.total)) {
    std::ostringstream os;
    os << "non-finite loss at step " << step_index << ": global=" << rep.l_global
       << " local=" << rep.l_local << " mlm=" << rep.l_mlm << " mim=" << rep.l_mim;
    throw TrainStepError(os.str());
  }

  m.store.zero_grad();
  g.backward(total);
  opt.step(lr);
  clamp_log_tau(*m.align.log_tau_global);
  return rep;
}

using ValidationScorer = std::function<double(DualTowerModel&)>;

struct FitResult {
  std::vector<LossReport> history;
  std::vector<std::pair<long, double>> val_scores;  // (epoch, score)
  double best_score = 0.0;
  long best_epoch = -1;
  long steps_run = 0;
  bool early_stopped = false;
  bool aborted = false;
  std::string abort_reason;
};

// Epoch loop with seed-determined batch order, per-epoch validation,
// patience-based early stopping, and best-checkpoint retention. A scorer
// failure or a non-finite loss aborts training with the partial history
// preserved in the result.
inline FitResult fit(DualTowerModel& m, const std::vector<Record>& train_set,
                     const RunConfig& cfg, const ValidationScorer& scorer,
                     const std::string& out_dir = "", long period_token_id = 4) {
  const TrainConfig& tc = cfg.train;
  if (train_set.size() < 2) throw ConfigError("fit: need at least 2 training records");
  long B = std::min<long>(tc.batch_size, static_cast<long>(train_set.size()));
  long steps_per_epoch = std::max<long>(1, static_cast<long>(train_set.size()) / B);
  long total_steps = tc.max_steps > 0 ? tc.max_steps : tc.max_epochs * steps_per_epoch;
  LrSchedule sched{tc.peak_lr, std::min(tc.warmup_steps, total_steps / 2), total_steps};

  AdamW opt(m.store.trainable(), tc);
  Rng order_rng = Rng(cfg.seed).derive(101);
  Rng aug_rng = Rng(cfg.seed).derive(103);

  FitResult res;
  res.best_score = -std::numeric_limits<double>::infinity();
  long stale_epochs = 0;
  long step = 0;
  std::string best_path = out_dir.empty() ? "" : (std::filesystem::path(out_dir) / "best.ckpt").string();

  for (long epoch = 0; epoch < tc.max_epochs && step < total_steps; ++epoch) {
    std::vector<long> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<long>(i);
    order_rng.shuffle(order);

    for (long s = 0; s < steps_per_epoch && step < total_steps; ++s) {
      std::vector<Record> batch_records;
      std::vector<const Record*> batch;
      batch_records.reserve(static_cast<std::size_t>(B));
      for (long b = 0; b < B; ++b) {
        const Record& r = train_set[static_cast<std::size_t>(order[static_cast<std::size_t>((s * B + b) % static_cast<long>(train_set.size()))])];
        batch_records.push_back(augment(r, aug_rng, cfg.augment, period_token_id,
                                        cfg.records.truncate_len));
      }
      for (const Record& r : batch_records) batch.push_back(&r);
      Rng step_rng = Rng(cfg.seed).derive(20000 + static_cast<std::uint64_t>(step));
      double lr = lr_at(step, sched);
      try {
        res.history.push_back(train_step(m, batch, cfg.loss_weights, tc, opt, lr, step_rng, step));
      } catch (const TrainStepError& e) {
        res.aborted = true;
        res.abort_reason = e.what();
        res.steps_run = step;
        return res;
      }
      ++step;
    }

    if (!scorer) continue;  // no validation signal, no early stopping
    double score = 0.0;
    try {
      score = scorer(m);
    } catch (const std::exception& e) {
      res.aborted = true;
      res.abort_reason = std::string("validation scorer failed: ") + e.what();
      res.steps_run = step;
      return res;
    }
    res.val_scores.emplace_back(epoch, score);
    if (score > res.best_score) {
      res.best_score = score;
      res.best_epoch = epoch;
      stale_epochs = 0;
      if (!best_path.empty()) save_checkpoint(m.store, best_path, config_hash(cfg));
    } else {
      ++stale_epochs;
      if (stale_epochs >= tc.patience) {
        res.early_stopped = true;
        break;
      }
    }
  }
  res.steps_run = step;
  return res;
}

inline void save_history(const std::vector<LossReport>& history, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write history: " + path);
  for (const auto& r : history) out << r.to_json().dump() << "\n";
}

}  // namespace vlalign
