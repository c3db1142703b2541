#pragma once

// Multitask trainer for the cross-attention adapters (and the small
// encoder when present).  The host decoder never moves.  Each epoch makes
// two passes over the data: pass 1 trains answering, pass 2 trains the
// auxiliary context-repetition and infilling tasks that force the model to
// actually read its cached context.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "xc/cache_store.hpp"
#include "xc/error.hpp"
#include "xc/synth_data.hpp"
#include "xc/xc_model.hpp"

namespace xc {

struct TrainConfig {
  double base_lr = 2e-4;
  int64_t warmup_steps = 2500;
  int64_t total_steps = 40000;
  int64_t batch_size = 256;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.95;
  double adam_eps = 1e-6;
  double weight_decay = 0.001;
  double max_grad_norm = 1.0;
  uint64_t seed = 0;

  void validate() const {
    if (base_lr <= 0) throw ConfigError("base_lr must be positive");
    if (warmup_steps <= 0 || total_steps <= 0 || batch_size <= 0)
      throw ConfigError("warmup_steps, total_steps and batch_size must be positive");
    if (warmup_steps >= total_steps)
      throw ConfigError("warmup_steps " + std::to_string(warmup_steps) +
                        " must be below total_steps " + std::to_string(total_steps));
    if (adam_beta1 <= 0 || adam_beta1 >= 1 || adam_beta2 <= 0 || adam_beta2 >= 1)
      throw ConfigError("adam betas must lie in (0,1)");
    if (adam_eps <= 0) throw ConfigError("adam_eps must be positive");
    if (weight_decay < 0) throw ConfigError("weight_decay must be non-negative");
    if (max_grad_norm <= 0) throw ConfigError("max_grad_norm must be positive");
  }

  // published hyperparameter table
  static TrainConfig reference() { return TrainConfig{}; }

  // scaled-down preset keeping warmup/total = 1/16
  static TrainConfig toy(int64_t total = 2000, int64_t batch = 32) {
    TrainConfig c;
    c.total_steps = total;
    c.warmup_steps = std::max<int64_t>(1, total / 16);
    c.batch_size = batch;
    return c;
  }
};

// Linear warmup to base_lr, then linear decay reaching zero exactly at the
// final step.
inline double lr_at(int64_t step, const TrainConfig& cfg) {
  if (step < 0 || step > cfg.total_steps)
    throw ContractError("lr_at step " + std::to_string(step) +
                        " outside [0," + std::to_string(cfg.total_steps) + "]");
  if (step <= cfg.warmup_steps)
    return cfg.base_lr * (double)step / (double)cfg.warmup_steps;
  return cfg.base_lr * (double)(cfg.total_steps - step) /
         (double)(cfg.total_steps - cfg.warmup_steps);
}

enum class TaskKind { Answer, RepeatAsIs, InfillPSM, InfillSPM };

inline const char* task_kind_name(TaskKind t) {
  switch (t) {
    case TaskKind::Answer: return "answer";
    case TaskKind::RepeatAsIs: return "repeat";
    case TaskKind::InfillPSM: return "infill_psm";
    case TaskKind::InfillSPM: return "infill_spm";
  }
  throw ConfigError("unknown task kind");
}

// ---- sequence framing -----------------------------------------------------

// Teacher-forced training sequence: input tokens, next-token targets, and
// the mask selecting the supervised positions.
struct TrainSequence {
  TaskKind task = TaskKind::Answer;
  std::vector<int64_t> context;  // encoder side (cross-attention input)
  std::vector<int64_t> input;    // decoder side
  std::vector<int64_t> targets;  // aligned with input
  std::vector<uint8_t> mask;     // 1 = loss position
};

struct FimSequence {
  std::vector<int64_t> tokens;  // instruct tokens + segments + EOS
  size_t mid_start;             // index of the first middle-content token
};

inline FimSequence build_fim_sequence(const std::vector<int64_t>& context,
                                      size_t i, size_t j, bool spm_order) {
  if (i > j || j > context.size())
    throw ContractError("infill split (" + std::to_string(i) + "," +
                        std::to_string(j) + ") invalid for context of " +
                        std::to_string(context.size()) + " tokens");
  FimSequence out;
  auto put = [&](size_t a, size_t b) {
    for (size_t k = a; k < b; ++k) out.tokens.push_back(context[k]);
  };
  if (!spm_order) {
    out.tokens.push_back(kTokFimPre);
    put(0, i);
    out.tokens.push_back(kTokFimSuf);
    put(j, context.size());
  } else {
    out.tokens.push_back(kTokFimSuf);
    put(j, context.size());
    out.tokens.push_back(kTokFimPre);
    put(0, i);
  }
  out.tokens.push_back(kTokFimMid);
  out.mid_start = out.tokens.size();
  put(i, j);
  out.tokens.push_back(kTokEos);
  return out;
}

namespace detail {

// full teacher-forced sequence -> (input, shifted targets, mask over
// targets at positions >= first_supervised)
inline void shift_into(const std::vector<int64_t>& seq, size_t first_supervised,
                       TrainSequence& out) {
  if (seq.size() < 2) throw ContractError("training sequence needs 2+ tokens");
  out.input.assign(seq.begin(), seq.end() - 1);
  out.targets.assign(seq.begin() + 1, seq.end());
  out.mask.assign(out.targets.size(), 0);
  // target index t supervises seq[t+1]
  for (size_t t = first_supervised > 0 ? first_supervised - 1 : 0;
       t < out.mask.size(); ++t)
    out.mask[t] = 1;
}

}  // namespace detail

// Build the decoder-side training sequence for one record+task.  The
// context always reaches the model through the encoder only.
inline TrainSequence make_train_sequence(const QARecord& rec, TaskKind task,
                                         std::mt19937_64& rng) {
  TrainSequence out;
  out.task = task;
  for (const auto& c : rec.contexts)
    out.context.insert(out.context.end(), c.begin(), c.end());

  std::vector<int64_t> seq;
  size_t first;  // index in seq of the first supervised token
  switch (task) {
    case TaskKind::Answer: {
      // [query..., ANSWER, answer..., EOS]; loss on answer+EOS
      seq = rec.query;
      seq.push_back(kTokAnswer);
      first = seq.size();
      const auto& ans = rec.answers.at(0);
      seq.insert(seq.end(), ans.begin(), ans.end());
      seq.push_back(kTokEos);
      break;
    }
    case TaskKind::RepeatAsIs: {
      // [REPEAT, context..., EOS]; loss on context+EOS
      seq.push_back(kTokRepeat);
      first = 1;
      seq.insert(seq.end(), out.context.begin(), out.context.end());
      seq.push_back(kTokEos);
      break;
    }
    case TaskKind::InfillPSM:
    case TaskKind::InfillSPM: {
      size_t n = out.context.size();
      size_t i = (size_t)std::uniform_int_distribution<int64_t>(0, (int64_t)n)(rng);
      size_t j = (size_t)std::uniform_int_distribution<int64_t>((int64_t)i, (int64_t)n)(rng);
      FimSequence f =
          build_fim_sequence(out.context, i, j, task == TaskKind::InfillSPM);
      seq = std::move(f.tokens);
      first = f.mid_start;
      break;
    }
    default:
      throw ConfigError("unknown task kind");
  }
  detail::shift_into(seq, first, out);
  return out;
}

// ---- optimizer ------------------------------------------------------------

// Global-norm clip: scales every gradient so the joint norm is at most
// max_norm.  Returns the pre-clip norm.
inline double clip_gradients(std::vector<std::pair<std::string, Tensor>>& params,
                             double max_norm) {
  double sq = 0;
  for (auto& [name, t] : params) {
    const auto* g = t.grad_if_any();
    if (!g) continue;
    for (float v : *g) sq += (double)v * (double)v;
  }
  double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0) {
    float s = (float)(max_norm / norm);
    for (auto& [name, t] : params) {
      if (!t.grad_if_any()) continue;
      for (auto& v : t.grad()) v *= s;
    }
  }
  return norm;
}

// AdamW with decoupled weight decay and bias-corrected moments.
class AdamW {
 public:
  AdamW() = default;
  AdamW(const TrainConfig& cfg) : cfg_(cfg) {}

  void init(const std::vector<std::pair<std::string, Tensor>>& params) {
    m_.clear();
    v_.clear();
    for (const auto& [name, t] : params) {
      m_.emplace_back((size_t)t.numel(), 0.f);
      v_.emplace_back((size_t)t.numel(), 0.f);
    }
    applied_ = 0;
  }

  void apply(std::vector<std::pair<std::string, Tensor>>& params, double lr) {
    if (m_.size() != params.size()) init(params);
    ++applied_;
    double bc1 = 1.0 - std::pow(cfg_.adam_beta1, (double)applied_);
    double bc2 = 1.0 - std::pow(cfg_.adam_beta2, (double)applied_);
    for (size_t p = 0; p < params.size(); ++p) {
      auto& t = params[p].second;
      const auto* gp = t.grad_if_any();
      auto& data = t.mutable_data();
      auto& m = m_[p];
      auto& v = v_[p];
      for (size_t i = 0; i < data.size(); ++i) {
        double g = gp ? (double)(*gp)[i] : 0.0;
        data[i] -= (float)(lr * cfg_.weight_decay * (double)data[i]);
        m[i] = (float)(cfg_.adam_beta1 * (double)m[i] + (1 - cfg_.adam_beta1) * g);
        v[i] = (float)(cfg_.adam_beta2 * (double)v[i] + (1 - cfg_.adam_beta2) * g * g);
        double mh = (double)m[i] / bc1;
        double vh = (double)v[i] / bc2;
        data[i] -= (float)(lr * mh / (std::sqrt(vh) + cfg_.adam_eps));
      }
    }
  }

  int64_t applied_steps() const { return applied_; }
  std::vector<std::vector<float>>& moments_m() { return m_; }
  std::vector<std::vector<float>>& moments_v() { return v_; }
  const std::vector<std::vector<float>>& moments_m() const { return m_; }
  const std::vector<std::vector<float>>& moments_v() const { return v_; }
  void set_applied_steps(int64_t n) { applied_ = n; }

 private:
  TrainConfig cfg_;
  std::vector<std::vector<float>> m_, v_;
  int64_t applied_ = 0;
};

// ---- epoch schedule -------------------------------------------------------

struct ScheduledExample {
  size_t example;
  TaskKind task;
};

// Two passes per epoch: a shuffled Answer pass, then an independently
// shuffled auxiliary pass with the task drawn uniformly per example.
inline std::vector<ScheduledExample> epoch_schedule(size_t n_examples,
                                                    int64_t epoch_index,
                                                    uint64_t seed) {
  if (n_examples == 0) throw ContractError("schedule over an empty dataset");
  auto make_rng = [&](uint64_t salt) {
    uint64_t buf[3] = {seed, (uint64_t)epoch_index, salt};
    return std::mt19937_64(fnv1a64(buf, sizeof buf));
  };
  std::vector<size_t> p(n_examples);
  std::vector<ScheduledExample> out;
  out.reserve(2 * n_examples);

  for (size_t i = 0; i < p.size(); ++i) p[i] = i;
  auto rng1 = make_rng(1);
  std::shuffle(p.begin(), p.end(), rng1);
  for (size_t i : p) out.push_back({i, TaskKind::Answer});

  for (size_t i = 0; i < p.size(); ++i) p[i] = i;
  auto rng2 = make_rng(2);
  std::shuffle(p.begin(), p.end(), rng2);
  static const TaskKind kAux[3] = {TaskKind::RepeatAsIs, TaskKind::InfillPSM,
                                   TaskKind::InfillSPM};
  for (size_t i : p)
    out.push_back({i, kAux[std::uniform_int_distribution<int>(0, 2)(rng2)]});
  return out;
}

// ---- one optimization step ------------------------------------------------

struct StepStats {
  int64_t step = 0;
  TaskKind task = TaskKind::Answer;
  double loss = 0;
  double lr = 0;
  double grad_norm = 0;  // pre-clip
};

// Accumulates gradients sequence by sequence (losses scaled 1/B), clips the
// joint norm, applies AdamW.  `step` is the 0-based index of this update;
// the schedule is evaluated at step+1 so the first update already moves.
inline StepStats train_step(XCModel& model,
                            const std::vector<TrainSequence>& batch, AdamW& opt,
                            const TrainConfig& cfg, int64_t step,
                            std::mt19937_64& rng) {
  if (batch.empty()) throw ContractError("train_step on an empty batch");
  auto params = model.trainable_parameters();
  zero_grads(params);
  float inv_b = 1.f / (float)batch.size();
  double total_loss = 0;
  XcRunOpts opts;
  opts.training = true;
  opts.rng = &rng;
  for (const auto& seq : batch) {
    Tape tape;
    Tensor enc = model.encode(seq.context);
    ForwardResult fw = xc_forward(model, seq.input, enc, opts);
    Tensor loss = scale(cross_entropy(fw.logits, seq.targets, seq.mask), inv_b);
    total_loss += (double)loss.item();  // accumulates the mean of per-seq means
    tape.backward(loss);
  }
  StepStats st;
  st.step = step;
  st.task = batch.front().task;
  st.loss = total_loss;
  st.lr = lr_at(std::min(step + 1, cfg.total_steps), cfg);
  st.grad_norm = clip_gradients(params, cfg.max_grad_norm);
  if (!std::isfinite(st.loss) || !std::isfinite(st.grad_norm))
    throw NumericError("non-finite training signal at step " +
                       std::to_string(step) + " (task " +
                       task_kind_name(st.task) + "): loss=" +
                       std::to_string(st.loss) + " grad_norm=" +
                       std::to_string(st.grad_norm));
  opt.apply(params, st.lr);
  return st;
}

// ---- training log ---------------------------------------------------------

// Pass label: auxiliary batches mix the three aux task kinds, so the log
// records which pass the batch belonged to.
inline const char* pass_name(TaskKind t) {
  return t == TaskKind::Answer ? "answer" : "aux";
}

inline void write_log_header(std::ostream& out) {
  out << "step,task,loss,lr,grad_norm\n";
}

inline void write_log_row(std::ostream& out, const StepStats& st) {
  out << st.step << ',' << pass_name(st.task) << ',' << st.loss << ',' << st.lr
      << ',' << st.grad_norm << '\n';
}

// ---- trainer driver -------------------------------------------------------

// Owns the step counter and walks the epoch schedule in deterministic
// batch order.  Every state needed to resume is (weights, moments, step):
// the schedule and per-step RNGs are re-derived from (seed, step).
class Trainer {
 public:
  Trainer(XCModel& model, std::vector<QARecord> data, TrainConfig cfg)
      : model_(model), data_(std::move(data)), cfg_(cfg), opt_(cfg) {
    cfg_.validate();
    if (data_.empty()) throw ContractError("trainer needs a nonempty dataset");
    opt_.init(model_.trainable_parameters());
    batches_per_epoch_ = 2 * ((data_.size() + (size_t)cfg_.batch_size - 1) /
                              (size_t)cfg_.batch_size);
  }

  int64_t step() const { return step_; }
  const TrainConfig& config() const { return cfg_; }
  AdamW& optimizer() { return opt_; }

  // Assemble the deterministic batch for a given step index.
  std::vector<TrainSequence> batch_for_step(int64_t step) const {
    int64_t epoch = step / (int64_t)batches_per_epoch_;
    size_t slot = (size_t)(step % (int64_t)batches_per_epoch_);
    auto sched = epoch_schedule(data_.size(), epoch, cfg_.seed);
    size_t per_pass = (sched.size() / 2 + (size_t)cfg_.batch_size - 1) /
                      (size_t)cfg_.batch_size;
    size_t begin, end;
    if (slot < per_pass) {  // answer pass
      begin = slot * (size_t)cfg_.batch_size;
      end = std::min(begin + (size_t)cfg_.batch_size, sched.size() / 2);
    } else {  // auxiliary pass
      size_t aux_slot = slot - per_pass;
      begin = sched.size() / 2 + aux_slot * (size_t)cfg_.batch_size;
      end = std::min(begin + (size_t)cfg_.batch_size, sched.size());
    }
    std::vector<TrainSequence> batch;
    batch.reserve(end - begin);
    for (size_t k = begin; k < end; ++k) {
      uint64_t buf[3] = {cfg_.seed ^ 0x5eedu, (uint64_t)step, (uint64_t)k};
      std::mt19937_64 rng(fnv1a64(buf, sizeof buf));
      batch.push_back(
          make_train_sequence(data_[sched[k].example], sched[k].task, rng));
    }
    return batch;
  }

  StepStats step_once() {
    uint64_t buf[2] = {cfg_.seed ^ 0xd0d0u, (uint64_t)step_};
    std::mt19937_64 rng(fnv1a64(buf, sizeof buf));
    StepStats st =
        train_step(model_, batch_for_step(step_), opt_, cfg_, step_, rng);
    ++step_;
    return st;
  }

  void save_checkpoint(const std::string& prefix) const {
    uint64_t digest = model_digest(model_);
    save_weights(model_.trainable_parameters(), digest, prefix + ".params.xcc");
    auto wrap = [&](const std::vector<std::vector<float>>& mom,
                    const std::string& path) {
      std::vector<std::pair<std::string, Tensor>> named;
      auto params = model_.trainable_parameters();
      for (size_t i = 0; i < mom.size(); ++i)
        named.emplace_back(params[i].first,
                           Tensor(params[i].second.shape(),
                                  std::vector<float>(mom[i])));
      save_weights(named, digest, path);
    };
    wrap(opt_.moments_m(), prefix + ".adam_m.xcc");
    wrap(opt_.moments_v(), prefix + ".adam_v.xcc");
    nlohmann::json j;
    j["step"] = step_;
    j["applied"] = opt_.applied_steps();
    std::ofstream out(prefix + ".state.json", std::ios::trunc);
    out << j.dump(2) << "\n";
    if (!out) throw ParseError("cannot write " + prefix + ".state.json");
  }

  void load_checkpoint(const std::string& prefix) {
    uint64_t digest = model_digest(model_);
    load_weights(prefix + ".params.xcc", digest, model_.trainable_parameters());
    auto unwrap = [&](std::vector<std::vector<float>>& mom,
                      const std::string& path) {
      auto params = model_.trainable_parameters();
      std::vector<std::pair<std::string, Tensor>> named;
      for (auto& [name, t] : params)
        named.emplace_back(name, Tensor(t.shape(),
                                        std::vector<float>((size_t)t.numel(), 0.f)));
      load_weights(path, digest, named);
      mom.clear();
      for (auto& [name, t] : named) mom.push_back(t.data());
    };
    opt_.init(model_.trainable_parameters());
    unwrap(opt_.moments_m(), prefix + ".adam_m.xcc");
    unwrap(opt_.moments_v(), prefix + ".adam_v.xcc");
    std::ifstream in(prefix + ".state.json");
    if (!in) throw ParseError("cannot open " + prefix + ".state.json");
    nlohmann::json j;
    try {
      in >> j;
      step_ = j.at("step").get<int64_t>();
      opt_.set_applied_steps(j.at("applied").get<int64_t>());
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(prefix + ".state.json: " + e.what());
    }
  }

 private:
  XCModel& model_;
  std::vector<QARecord> data_;
  TrainConfig cfg_;
  AdamW opt_;
  int64_t step_ = 0;
  size_t batches_per_epoch_ = 0;
};

}  // namespace xc
