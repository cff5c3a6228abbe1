#pragma once

// Two-stage optimization. Stage 1 (pretrain) trains the prototype extractor
// and projector with both towers frozen; stage 2 (finetune) trains adapters
// plus extractor plus projector against the joint self-questioning and
// answering objective, expressed as one union loss mask per sequence.

#include <cmath>
#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <tuple>
#include <vector>

#include "sqvlm/data.hpp"
#include "sqvlm/model.hpp"
#include "sqvlm/tensor.hpp"

namespace sqvlm {

enum class Stage : std::uint8_t { kPretrain = 0, kFinetune = 1 };

inline const char* stage_name(Stage s) {
  return s == Stage::kPretrain ? "pretrain" : "finetune";
}

struct TrainPlan {
  Stage stage = Stage::kPretrain;
  double lr = 2e-3;           // pretrain group (prototype extractor + projector)
  double lr_adapters = 2e-4;  // finetune adapter group
  double lr_other = 2e-5;     // finetune extractor/projector group
  std::string schedule = "constant";  // "constant" or "cosine_warmup"
  int warmup_steps = 0;
  int batch_size = 256;
  int epochs = 1;
  std::uint64_t seed = 0;
  double grad_clip = 1.0;   // global norm; <= 0 disables
  int max_steps = 0;        // overrides the epoch count when > 0
  double target_loss = 0.0; // early stop once total loss drops below; 0 disables

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (epochs < 1 && max_steps <= 0)
      throw ConfigError("epochs must be >= 1 when max_steps is unset");
    if (schedule != "constant" && schedule != "cosine_warmup")
      throw ConfigError("unknown schedule \"" + schedule + "\"");
    if (warmup_steps < 0) throw ConfigError("warmup_steps must be >= 0");
  }
};

// stage gating: which parameters may move
inline bool param_trainable(Stage stage, const std::string& name) {
  const bool phi_or_w = name.rfind("vision.proto.", 0) == 0 ||
                        name.rfind("vision.proj.", 0) == 0;
  if (stage == Stage::kPretrain) return phi_or_w;
  return phi_or_w || name.find(".lora_") != std::string::npos;
}

inline double param_lr(const TrainPlan& plan, const std::string& name) {
  if (plan.stage == Stage::kPretrain) return plan.lr;
  return name.find(".lora_") != std::string::npos ? plan.lr_adapters
                                                  : plan.lr_other;
}

// ---------------------------------------------------------------------------
// AdamW with decoupled weight decay and bias-corrected moments

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
};

class AdamW {
 public:
  struct Moments {
    std::vector<double> m, v;
  };

  explicit AdamW(AdamWOptions opt = {}) : opt_(opt) {}

  // one update over (name, tensor, lr) triples; moments start at zero
  void update(const std::vector<std::tuple<std::string, Tensor, double>>& params) {
    ++t_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
    for (const auto& [name, tensor, lr] : params) {
      Tensor t = tensor;
      Moments& mom = state_[name];
      const std::size_t n = t.numel();
      if (mom.m.empty()) {
        mom.m.assign(n, 0.0);
        mom.v.assign(n, 0.0);
      }
      const std::vector<double>* g = t.has_grad() ? &t.grad_view() : nullptr;
      auto& w = t.value();
      for (std::size_t i = 0; i < n; ++i) {
        const double gi = g ? (*g)[i] : 0.0;
        mom.m[i] = opt_.beta1 * mom.m[i] + (1.0 - opt_.beta1) * gi;
        mom.v[i] = opt_.beta2 * mom.v[i] + (1.0 - opt_.beta2) * gi * gi;
        const double mhat = mom.m[i] / bc1;
        const double vhat = mom.v[i] / bc2;
        w[i] -= lr * (mhat / (std::sqrt(vhat) + opt_.eps) +
                      opt_.weight_decay * w[i]);
      }
    }
  }

  long step_count() const { return t_; }
  void set_step_count(long t) { t_ = t; }
  std::map<std::string, Moments>& state() { return state_; }
  const std::map<std::string, Moments>& state() const { return state_; }
  const AdamWOptions& options() const { return opt_; }

 private:
  AdamWOptions opt_;
  std::map<std::string, Moments> state_;
  long t_ = 0;
};

// ---------------------------------------------------------------------------
// sample preparation: expansion of the image span and next-token shift

struct TrainSample {
  TurnSequence seq;
  Tensor pixels;
};

struct PreparedSample {
  std::string id;
  std::vector<int> text_ids;  // with the image placeholder
  std::vector<int> targets;   // per spliced position, shifted by one
  BoolVec mask_union, mask_q, mask_a;
  int union_count = 0;
  Tensor pixels;
};

inline PreparedSample prepare_sample(const TrainSample& sample, int image_len,
                                     int max_seq_len) {
  const TurnSequence& ts = sample.seq;
  MixedSequence ms;
  ms.text_ids = ts.token_ids;
  for (int i = 0; i < static_cast<int>(ts.token_ids.size()); ++i)
    if (ts.token_ids[i] == Vocab::kImage) {
      if (ms.image_pos >= 0)
        throw DataError("sample " + ts.id + " has multiple image placeholders");
      ms.image_pos = i;
    }
  if (ms.image_pos < 0)
    throw DataError("sample " + ts.id + " has no image placeholder");
  ms.image_len = image_len;

  const std::vector<int> exp_ids = ms.expanded_ids(Vocab::kPad);
  const BoolVec exp_union = ms.expand_flags(ts.loss_mask, 0);
  const BoolVec exp_q = ms.expand_flags(question_target_mask(ts), 0);
  const BoolVec exp_a = ms.expand_flags(answer_target_mask(ts), 0);
  const int len = static_cast<int>(exp_ids.size());
  if (max_seq_len > 0 && len > max_seq_len)
    throw DataError("sample " + ts.id + " splices to " + std::to_string(len) +
                    " tokens, over max_seq_len " + std::to_string(max_seq_len));

  PreparedSample out;
  out.id = ts.id;
  out.text_ids = ts.token_ids;
  out.pixels = sample.pixels;
  out.targets.assign(len, Vocab::kPad);
  out.mask_union.assign(len, 0);
  out.mask_q.assign(len, 0);
  out.mask_a.assign(len, 0);
  for (int i = 0; i + 1 < len; ++i) {
    out.targets[i] = exp_ids[i + 1];
    out.mask_union[i] = exp_union[i + 1];
    out.mask_q[i] = exp_q[i + 1];
    out.mask_a[i] = exp_a[i + 1];
  }
  for (std::uint8_t b : out.mask_union) out.union_count += b;
  return out;
}

// plain-arithmetic masked NLL over precomputed logits, normalized by `norm`
inline double masked_nll(const Tensor& logits, const std::vector<int>& targets,
                         const BoolVec& mask, int norm) {
  if (norm <= 0) return 0.0;
  const int l = logits.dim(0), v = logits.dim(1);
  double sum = 0.0;
  for (int i = 0; i < l; ++i) {
    if (!mask[static_cast<std::size_t>(i)]) continue;
    const double* row = logits.value().data() + static_cast<std::size_t>(i) * v;
    double mx = row[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, row[j]);
    double s = 0.0;
    for (int j = 0; j < v; ++j) s += std::exp(row[j] - mx);
    sum += mx + std::log(s) - row[targets[static_cast<std::size_t>(i)]];
  }
  return sum / norm;
}

struct StepMetrics {
  long step = 0;
  Stage stage = Stage::kPretrain;
  double loss_total = 0.0;
  double loss_q = 0.0;
  double loss_a = 0.0;
  double lr = 0.0;
};

inline std::string metrics_to_json(const StepMetrics& m) {
  nlohmann::json j;
  j["step"] = m.step;
  j["stage"] = stage_name(m.stage);
  j["loss_total"] = m.loss_total;
  j["loss_q"] = m.loss_q;
  j["loss_a"] = m.loss_a;
  j["lr"] = m.lr;
  return j.dump();
}

// ---------------------------------------------------------------------------

class Trainer {
 public:
  Trainer(VlmModel& model, const TrainPlan& plan)
      : model_(model), plan_(plan), rng_(plan.seed) {
    plan_.validate();
    apply_freeze();
  }

  const TrainPlan& plan() const { return plan_; }

  void set_dataset(const std::vector<TrainSample>& samples) {
    prepared_.clear();
    const int image_len = model_.spec().vision.tokens();
    const int max_len = model_.spec().lm.max_seq_len;
    for (const TrainSample& s : samples)
      prepared_.push_back(prepare_sample(s, image_len, max_len));
    if (prepared_.empty()) throw DataError("training dataset is empty");
  }

  long planned_steps() const {
    if (plan_.max_steps > 0) return plan_.max_steps;
    const long n = static_cast<long>(prepared_.size());
    const long per_epoch = (n + plan_.batch_size - 1) / plan_.batch_size;
    return per_epoch * plan_.epochs;
  }

  // one batch: per-sample forward/backward with deterministic ordered
  // accumulation, then a single optimizer update on the trainable groups
  StepMetrics run_step() {
    if (prepared_.empty()) throw StateError("run_step before set_dataset");
    const double mult = schedule_multiplier(global_step_);
    StepMetrics m;
    m.step = global_step_ + 1;
    m.stage = plan_.stage;
    m.lr = mult * (plan_.stage == Stage::kPretrain ? plan_.lr : plan_.lr_adapters);

    auto trainables = trainable_params(mult);
    for (auto& [name, t, lr] : trainables) t.zero_grad();

    const int b = plan_.batch_size;
    const long n = static_cast<long>(prepared_.size());
    for (int i = 0; i < b; ++i) {
      const PreparedSample& s =
          prepared_[static_cast<std::size_t>((global_step_ * b + i) % n)];
      Graph g;
      Tensor hv = model_.vision().forward(s.pixels);
      MixedSequence seq = make_mixed(s.text_ids, hv);
      Tensor logits = model_.lm().forward(seq);
      Tensor loss = cross_entropy(logits, s.targets, s.mask_union);
      const double lv = loss.item();
      if (!std::isfinite(lv))
        throw NumericError("non-finite loss on sample " + s.id + " at step " +
                           std::to_string(m.step));
      g.backward(scale(loss, 1.0 / b));
      m.loss_total += lv / b;
      m.loss_q += masked_nll(logits, s.targets, s.mask_q, s.union_count) / b;
      m.loss_a += masked_nll(logits, s.targets, s.mask_a, s.union_count) / b;
    }

    clip_gradients(trainables);
    std::vector<std::tuple<std::string, Tensor, double>> upd(trainables.begin(),
                                                             trainables.end());
    opt_.update(upd);
    ++global_step_;
    return m;
  }

  std::vector<StepMetrics> train() {
    std::vector<StepMetrics> log;
    const long total = planned_steps();
    while (global_step_ < total) {
      log.push_back(run_step());
      if (plan_.target_loss > 0.0 && log.back().loss_total < plan_.target_loss)
        break;
    }
    return log;
  }

  long step() const { return global_step_; }
  void set_step(long s) { global_step_ = s; }
  AdamW& optimizer() { return opt_; }
  std::mt19937_64& rng() { return rng_; }

  // names the plan considers trainable, in parameter order
  std::vector<std::string> trainable_names() const {
    std::vector<std::string> out;
    for (const auto& [name, t] : model_.named_parameters())
      if (param_trainable(plan_.stage, name)) out.push_back(name);
    return out;
  }

 private:
  void apply_freeze() {
    for (auto& [name, t] : model_.named_parameters())
      t.set_requires_grad(param_trainable(plan_.stage, name));
  }

  double schedule_multiplier(long step) const {
    if (plan_.schedule == "constant") return 1.0;
    const long total = planned_steps();
    if (step < plan_.warmup_steps)
      return static_cast<double>(step + 1) / plan_.warmup_steps;
    const long decay_steps = std::max<long>(1, total - plan_.warmup_steps);
    const double progress =
        std::min(1.0, static_cast<double>(step - plan_.warmup_steps) /
                          static_cast<double>(decay_steps));
    return 0.5 * (1.0 + std::cos(progress * 3.14159265358979323846));
  }

  std::vector<std::tuple<std::string, Tensor, double>> trainable_params(
      double mult) const {
    std::vector<std::tuple<std::string, Tensor, double>> out;
    for (const auto& [name, t] : model_.named_parameters())
      if (param_trainable(plan_.stage, name))
        out.emplace_back(name, t, mult * param_lr(plan_, name));
    return out;
  }

  void clip_gradients(
      const std::vector<std::tuple<std::string, Tensor, double>>& params) {
    if (plan_.grad_clip <= 0.0) return;
    double sq = 0.0;
    for (const auto& [name, t, lr] : params) {
      if (!t.has_grad()) continue;
      for (double g : t.grad_view()) sq += g * g;
    }
    const double norm = std::sqrt(sq);
    if (norm <= plan_.grad_clip) return;
    const double s = plan_.grad_clip / norm;
    for (const auto& [name, t, lr] : params) {
      if (!t.has_grad()) continue;
      for (double& g : Tensor(t).grad()) g *= s;
    }
  }

  VlmModel& model_;
  TrainPlan plan_;
  std::vector<PreparedSample> prepared_;
  AdamW opt_;
  std::mt19937_64 rng_;
  long global_step_ = 0;
};

}  // namespace sqvlm
