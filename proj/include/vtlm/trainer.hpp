#pragma once

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "vtlm/checkpoint.hpp"
#include "vtlm/encoder.hpp"
#include "vtlm/optim.hpp"
#include "vtlm/seq2seq.hpp"

namespace vtlm {

struct TrainConfig {
  Phase phase = Phase::Pretrain;
  double lr = 1e-4;
  int batch_size = 64;
  long max_steps = 30000;
  double dropout = 0.1;
  long warmup_steps = 4000;
  long eval_interval = 1000;
  long log_interval = 100;
  std::uint64_t seed = 1;
  double clip_norm = 5.0;
  /// Validation examples used per evaluation; 0 = all.
  int val_limit = 0;

  static TrainConfig defaults(Phase p) {
    TrainConfig c;
    c.phase = p;
    switch (p) {
      case Phase::Pretrain:
        break;
      case Phase::Finetune:
        c.lr = 1e-5;
        c.max_steps = 5000;
        c.eval_interval = 500;
        break;
      case Phase::Scratch:
        c.max_steps = 10000;
        c.dropout = 0.4;
        c.eval_interval = 500;
        break;
    }
    return c;
  }

  ScheduleConfig schedule() const {
    ScheduleConfig s = ScheduleConfig::defaults(phase);
    s.lr = lr;
    s.warmup_steps = warmup_steps;
    return s;
  }

  void validate() const {
    if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (eval_interval < 1 || log_interval < 1) throw ConfigError("eval_interval and log_interval must be >= 1");
    if (!(lr > 0)) throw ConfigError("lr must be positive");
    if (warmup_steps < 1) throw ConfigError("warmup_steps must be >= 1");
    if (dropout < 0 || dropout >= 1) throw ConfigError("dropout must be in [0, 1)");
  }

  nlohmann::json to_json() const {
    return {{"phase", to_string(phase)},      {"lr", lr},
            {"batch_size", batch_size},       {"max_steps", max_steps},
            {"dropout", dropout},             {"warmup_steps", warmup_steps},
            {"eval_interval", eval_interval}, {"log_interval", log_interval},
            {"seed", seed},                   {"clip_norm", clip_norm},
            {"val_limit", val_limit}};
  }
};

inline constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

/// Loss components reported by one training step. Unused fields stay NaN.
struct StepStats {
  double mlm_loss = kNaN;
  double mrc_loss = kNaN;
  double total = kNaN;
};

struct ValStats {
  double acc = kNaN;  // masked-token accuracy in [0, 1] (pre-training)
  double mrc_acc = kNaN;
  double ppl = kNaN;  // teacher-forced perplexity (translation)
};

/// What the generic loop needs from a model/data pairing.
class TrainTask {
 public:
  virtual ~TrainTask() = default;
  virtual ParamStore<float>& params() = 0;
  virtual std::size_t train_size() const = 0;
  /// Loss over the given training examples; nullopt when the batch has
  /// nothing to predict (the step is then skipped).
  virtual std::optional<std::pair<Tensor<float>, StepStats>> loss(std::span<const std::size_t> batch, long step,
                                                                   ForwardContext<float>& ctx) = 0;
  virtual ValStats validate(int limit) = 0;
  /// Checkpoint selection score; higher is better.
  virtual double score(const ValStats& v) const = 0;
  /// Model description stored in every checkpoint header.
  virtual nlohmann::json describe() const = 0;
};

struct TrainResult {
  long steps = 0;
  long best_step = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  ValStats best;
  ValStats last;
  long skipped = 0;
  long clipped = 0;
  /// Total training loss per step, index = step - 1 (this process only).
  std::vector<double> losses;
  long first_step = 1;
};

struct TrainOutputs {
  std::string dir;
  std::string best() const { return dir + "/best.ckpt"; }
  std::string last() const { return dir + "/last.ckpt"; }
  std::string metrics() const { return dir + "/metrics.csv"; }
};

namespace detail {

inline std::string csv_num(double v) {
  if (std::isnan(v)) return "";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

inline nlohmann::json num_or_null(double v) { return std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr); }

inline double num_or_nan(const nlohmann::json& j) { return j.is_number() ? j.get<double>() : kNaN; }

inline nlohmann::json val_json(const ValStats& v) {
  return {{"val_acc", num_or_null(v.acc)}, {"val_mrc_acc", num_or_null(v.mrc_acc)}, {"val_ppl", num_or_null(v.ppl)}};
}

/// Training order for one epoch, derived from (seed, epoch) only.
inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, long epoch) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Pcg32 rng = Pcg32::for_step(seed, "shuffle", static_cast<std::uint64_t>(epoch));
  shuffle(order.begin(), order.end(), rng);
  return order;
}

}  // namespace detail

/// Restores parameter values in place (shapes must match).
inline void load_param_values(ParamStore<float>& ps, const ParamStore<float>& src) {
  for (auto& [name, t] : ps) {
    const auto& s = src.at(name);
    if (s.shape() != t.shape()) throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(s.shape()));
    t.values() = s.values();
  }
}

/// Generic optimisation loop.
///
/// Step s (1-based) trains on slice (s-1) mod E of the epoch order for epoch
/// (s-1) / E, with E = floor(N / batch). Masking and dropout streams are
/// derived from (seed, s), so resuming from last.ckpt at step k replays steps
/// k+1.. exactly. Every eval_interval steps (and at the end) the task is
/// validated, last.ckpt is rewritten and best.ckpt is replaced when the
/// score improves. A non-finite loss aborts with DivergenceError; last.ckpt
/// then still holds the last good state.
inline TrainResult train(TrainTask& task, const TrainConfig& cfg, const TrainOutputs& out, const nlohmann::json& provenance,
                         bool resume = false) {
  cfg.validate();
  const std::size_t n = task.train_size();
  if (n == 0) throw DataError("no training examples");
  const std::size_t bs = std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), n);
  const long per_epoch = static_cast<long>(n / bs);
  std::filesystem::create_directories(out.dir);

  auto& params = task.params();
  Adam<float> adam(AdamConfig{0.9, 0.999, 1e-8, cfg.clip_norm});
  TrainResult res;
  long start = 1;
  if (resume && std::filesystem::exists(out.last())) {
    const auto ck = load_checkpoint(out.last());
    load_param_values(params, extract_params(ck, "param/"));
    adam = extract_optimizer(ck);
    const auto& tr = ck.header.at("train");
    start = tr.at("step").get<long>() + 1;
    res.best_step = tr.at("best_step").get<long>();
    res.best_score = tr.at("best_score").is_number() ? tr.at("best_score").get<double>() : res.best_score;
    res.best.acc = detail::num_or_nan(tr.at("best").at("val_acc"));
    res.best.mrc_acc = detail::num_or_nan(tr.at("best").at("val_mrc_acc"));
    res.best.ppl = detail::num_or_nan(tr.at("best").at("val_ppl"));
  }
  res.first_step = start;
  res.steps = start - 1;

  const bool fresh_metrics = !std::filesystem::exists(out.metrics()) || start == 1;
  std::ofstream metrics(out.metrics(), fresh_metrics ? std::ios::trunc : std::ios::app);
  if (!metrics) throw DataError("cannot write " + out.metrics());
  if (fresh_metrics) metrics << "step,phase,mlm_loss,mrc_loss,total,lr,val_acc,val_ppl\n";
  auto log_row = [&](long step, const StepStats& s, double lr, const ValStats* v) {
    metrics << step << ',' << to_string(cfg.phase) << ',' << detail::csv_num(s.mlm_loss) << ',' << detail::csv_num(s.mrc_loss) << ','
            << detail::csv_num(s.total) << ',' << detail::csv_num(lr) << ',' << detail::csv_num(v ? v->acc : kNaN) << ','
            << detail::csv_num(v ? v->ppl : kNaN) << '\n';
    metrics.flush();
  };

  auto checkpoint = [&](long step, const ValStats& v) {
    Checkpoint ck;
    ck.header = provenance;
    ck.header["model"] = task.describe();
    ck.header["train_config"] = cfg.to_json();
    ck.header["train"] = {{"phase", to_string(cfg.phase)},
                          {"step", step},
                          {"best_step", res.best_step},
                          {"best_score", detail::num_or_null(res.best_score)},
                          {"metrics", detail::val_json(v)},
                          {"best", detail::val_json(res.best)}};
    add_params(ck, "param/", params);
    return ck;
  };

  auto evaluate = [&](long step, const StepStats& s, double lr) {
    NoGradGuard ng;
    const ValStats v = task.validate(cfg.val_limit);
    res.last = v;
    const double sc = task.score(v);
    log_row(step, s, lr, &v);
    if (sc > res.best_score) {
      res.best_score = sc;
      res.best_step = step;
      res.best = v;
      save_checkpoint(out.best(), checkpoint(step, v));
    }
    auto ck = checkpoint(step, v);
    add_optimizer(ck, adam, params);
    save_checkpoint(out.last(), ck);
  };

  const ScheduleConfig sched = cfg.schedule();
  std::vector<std::size_t> order;
  long order_epoch = -1;
  StepStats last_stats;
  for (long step = start; step <= cfg.max_steps; ++step) {
    const long epoch = (step - 1) / per_epoch;
    if (epoch != order_epoch) {
      order = detail::epoch_order(n, cfg.seed, epoch);
      order_epoch = epoch;
    }
    const auto offset = static_cast<std::size_t>((step - 1) % per_epoch) * bs;
    const std::span<const std::size_t> batch(order.data() + offset, bs);
    Pcg32 drop_rng = Pcg32::for_step(cfg.seed, "dropout", static_cast<std::uint64_t>(step));
    ForwardContext<float> ctx{true, cfg.dropout, &drop_rng};
    params.zero_grad();
    const double lr = lr_at(step, sched);
    auto l = task.loss(batch, step, ctx);
    if (l) {
      last_stats = l->second;
      const double total = l->first.item();
      if (!std::isfinite(total)) {
        throw DivergenceError("non-finite loss at step " + std::to_string(step) + "; last good state kept in " + out.last());
      }
      l->second.total = total;
      last_stats = l->second;
      res.losses.push_back(total);
      l->first.backward();
      adam.step(params, lr);
    } else {
      res.losses.push_back(kNaN);
    }
    res.steps = step;
    const bool eval_now = step % cfg.eval_interval == 0 || step == cfg.max_steps;
    if (eval_now) {
      evaluate(step, last_stats, lr);
    } else if (step % cfg.log_interval == 0) {
      log_row(step, last_stats, lr, nullptr);
    }
  }
  res.skipped = adam.skipped();
  res.clipped = adam.clipped();
  params.zero_grad();
  return res;
}

// ---------------------------------------------------------------------------
// Concrete tasks

/// Masked pre-training (TLM or VTLM). Validation masks the validation set
/// with fixed streams so every evaluation sees the same corruption; the
/// selection metric is masked-token accuracy.
class PretrainTask : public TrainTask {
 public:
  PretrainTask(VtlmModel<float>& model, const std::vector<TripletExample>& train, const std::vector<TripletExample>& valid,
               MaskPolicy policy, std::uint64_t seed, int batch_size, int max_len = 256)
      : model_(model), train_(train), valid_(valid), policy_(policy), seed_(seed), batch_size_(batch_size), max_len_(max_len) {}

  ParamStore<float>& params() override { return model_.params; }
  std::size_t train_size() const override { return train_.size(); }

  std::optional<std::pair<Tensor<float>, StepStats>> loss(std::span<const std::size_t> batch, long step,
                                                           ForwardContext<float>& ctx) override {
    std::vector<const TripletExample*> ex;
    for (auto i : batch) ex.push_back(&train_[i]);
    Pcg32 text_rng = Pcg32::for_step(seed_, "masking.text", static_cast<std::uint64_t>(step));
    Pcg32 vis_rng = Pcg32::for_step(seed_, "masking.visual", static_cast<std::uint64_t>(step));
    const auto mb = make_masked_batch(ex, model_.objective, policy_, model_.cfg.vocab_size, text_rng, vis_rng, max_len_);
    auto l = model_.loss(mb, ctx);
    if (!l.loss.defined()) return std::nullopt;
    StepStats s;
    s.mlm_loss = l.has_mlm() ? l.mlm_loss : kNaN;
    s.mrc_loss = l.has_mrc() ? l.mrc_loss : kNaN;
    return std::make_pair(std::move(l.loss), s);
  }

  ValStats validate(int limit) override {
    const std::size_t n = limit > 0 ? std::min<std::size_t>(static_cast<std::size_t>(limit), valid_.size()) : valid_.size();
    Pcg32 text_rng = Pcg32::for_consumer(seed_, "masking.valid.text");
    Pcg32 vis_rng = Pcg32::for_consumer(seed_, "masking.valid.visual");
    ForwardContext<float> ctx;
    double hits = 0;
    double count = 0;
    double mrc_hits = 0;
    double mrc_count = 0;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size_)) {
      std::vector<const TripletExample*> ex;
      for (std::size_t j = i; j < std::min(n, i + static_cast<std::size_t>(batch_size_)); ++j) ex.push_back(&valid_[j]);
      const auto mb = make_masked_batch(ex, model_.objective, policy_, model_.cfg.vocab_size, text_rng, vis_rng, max_len_);
      const auto l = model_.loss(mb, ctx);
      hits += l.mlm_acc * static_cast<double>(l.mlm_count);
      count += static_cast<double>(l.mlm_count);
      mrc_hits += l.mrc_acc * static_cast<double>(l.mrc_count);
      mrc_count += static_cast<double>(l.mrc_count);
    }
    ValStats v;
    v.acc = count > 0 ? hits / count : kNaN;
    v.mrc_acc = mrc_count > 0 ? mrc_hits / mrc_count : kNaN;
    return v;
  }

  double score(const ValStats& v) const override { return std::isnan(v.acc) ? -1.0 : v.acc; }

  nlohmann::json describe() const override;

 private:
  VtlmModel<float>& model_;
  const std::vector<TripletExample>& train_;
  const std::vector<TripletExample>& valid_;
  MaskPolicy policy_;
  std::uint64_t seed_;
  int batch_size_;
  int max_len_;
};

/// Translation fine-tuning (or from-scratch training). Selection is by
/// lowest validation perplexity.
class TranslationTask : public TrainTask {
 public:
  TranslationTask(MtModel<float>& model, const std::vector<TripletExample>& train, const std::vector<TripletExample>& valid, int batch_size)
      : model_(model), train_(train), valid_(valid), batch_size_(batch_size), joined_(model.joined()) {}

  ParamStore<float>& params() override { return joined_; }
  std::size_t train_size() const override { return train_.size(); }

  std::optional<std::pair<Tensor<float>, StepStats>> loss(std::span<const std::size_t> batch, long,
                                                           ForwardContext<float>& ctx) override {
    std::vector<const TripletExample*> ex;
    for (auto i : batch) ex.push_back(&train_[i]);
    auto l = model_.loss(ex, ctx);
    return std::make_pair(std::move(l.loss), StepStats{});
  }

  ValStats validate(int limit) override {
    const std::size_t n = limit > 0 ? std::min<std::size_t>(static_cast<std::size_t>(limit), valid_.size()) : valid_.size();
    ForwardContext<float> ctx;
    double nll = 0;
    double tokens = 0;
    for (std::size_t i = 0; i < n; i += static_cast<std::size_t>(batch_size_)) {
      std::vector<const TripletExample*> ex;
      for (std::size_t j = i; j < std::min(n, i + static_cast<std::size_t>(batch_size_)); ++j) ex.push_back(&valid_[j]);
      const auto l = model_.loss(ex, ctx);
      nll += l.nll_sum;
      tokens += static_cast<double>(l.tokens);
    }
    ValStats v;
    v.ppl = tokens > 0 ? std::exp(nll / tokens) : kNaN;
    return v;
  }

  double score(const ValStats& v) const override { return std::isnan(v.ppl) ? -std::numeric_limits<double>::infinity() : -v.ppl; }

  nlohmann::json describe() const override;

 private:
  MtModel<float>& model_;
  const std::vector<TripletExample>& train_;
  const std::vector<TripletExample>& valid_;
  int batch_size_;
  ParamStore<float> joined_;  // aliases model_.enc / model_.dec storage
};

// ---------------------------------------------------------------------------
// Model descriptions in checkpoint headers

inline nlohmann::json encoder_config_json(const EncoderConfig& c) {
  return {{"d_model", c.d_model},     {"ffn", c.ffn},     {"layers", c.layers},           {"heads", c.heads},
          {"dropout", c.dropout},     {"max_positions", c.max_positions}, {"vocab_size", c.vocab_size},
          {"label_vocab", c.label_vocab}, {"feat_dim", c.feat_dim}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
  EncoderConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.ffn = j.at("ffn").get<int>();
  c.layers = j.at("layers").get<int>();
  c.heads = j.at("heads").get<int>();
  c.dropout = j.at("dropout").get<double>();
  c.max_positions = j.at("max_positions").get<int>();
  c.vocab_size = j.at("vocab_size").get<int>();
  c.label_vocab = j.at("label_vocab").get<int>();
  c.feat_dim = j.at("feat_dim").get<int>();
  return c;
}

inline nlohmann::json PretrainTask::describe() const {
  return {{"kind", "pretrain"},
          {"objective", model_.objective == Objective::VTLM ? "vtlm" : "tlm"},
          {"encoder", encoder_config_json(model_.cfg)}};
}

inline nlohmann::json TranslationTask::describe() const {
  return {{"kind", "mt"}, {"task", to_string(model_.task)}, {"encoder", encoder_config_json(model_.cfg)}};
}

/// Loads the parameters of a pre-training checkpoint.
inline VtlmModel<float> load_pretrained(const Checkpoint& ck) {
  const auto& m = ck.header.at("model");
  if (m.at("kind") != "pretrain") throw DataError("checkpoint is not a pre-training checkpoint");
  VtlmModel<float> model;
  model.cfg = encoder_config_from_json(m.at("encoder"));
  model.objective = m.at("objective") == "vtlm" ? Objective::VTLM : Objective::TLM;
  model.params = extract_params(ck, "param/");
  return model;
}

/// Loads a translation model from a checkpoint written by train().
inline MtModel<float> load_translation(const Checkpoint& ck) {
  const auto& m = ck.header.at("model");
  if (m.at("kind") != "mt") throw DataError("checkpoint is not a translation checkpoint");
  MtModel<float> model;
  model.cfg = encoder_config_from_json(m.at("encoder"));
  model.task = m.at("task") == "mmt" ? MtTask::MMT : MtTask::NMT;
  model.enc = extract_params(ck, "param/enc.");
  model.dec = extract_params(ck, "param/dec.");
  return model;
}

}  // namespace vtlm
