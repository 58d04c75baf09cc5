#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "vtlm/params.hpp"

namespace vtlm {

enum class Phase { Pretrain, Finetune, Scratch };

inline const char* to_string(Phase p) {
  switch (p) {
    case Phase::Pretrain:
      return "pretrain";
    case Phase::Finetune:
      return "finetune";
    case Phase::Scratch:
      return "scratch";
  }
  return "?";
}

inline Phase phase_from_string(const std::string& s) {
  if (s == "pretrain") return Phase::Pretrain;
  if (s == "finetune") return Phase::Finetune;
  if (s == "scratch") return Phase::Scratch;
  throw ConfigError("unknown phase '" + s + "'");
}

struct ScheduleConfig {
  Phase phase = Phase::Pretrain;
  /// Constant rate for pretrain/finetune; peak rate for scratch.
  double lr = 1e-4;
  long warmup_steps = 4000;
  double warmup_init = 1e-7;

  static ScheduleConfig defaults(Phase p) {
    ScheduleConfig c;
    c.phase = p;
    c.lr = p == Phase::Finetune ? 1e-5 : 1e-4;
    return c;
  }
};

/// Learning rate for 1-based `step`. Scratch runs warm up linearly from
/// warmup_init to lr, then decay with the inverse square root of the step.
inline double lr_at(long step, const ScheduleConfig& cfg) {
  if (step < 1) throw UsageError("lr_at: step must be >= 1");
  if (cfg.phase != Phase::Scratch) return cfg.lr;
  const auto w = static_cast<double>(cfg.warmup_steps);
  const auto s = static_cast<double>(step);
  if (step <= cfg.warmup_steps) return cfg.warmup_init + (s / w) * (cfg.lr - cfg.warmup_init);
  return cfg.lr * std::sqrt(w / s);
}

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  /// Global gradient-norm clip; <= 0 disables.
  double clip_norm = 5.0;
};

/// Adam with bias correction and global-norm clipping. Parameters without a
/// gradient in a step are left untouched (their moments do not decay).
template <class T>
class Adam {
 public:
  explicit Adam(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Returns false (and counts a skip) when any gradient is non-finite.
  bool step(ParamStore<T>& params, double lr) {
    double sq = 0;
    for (auto& [_, p] : params) {
      if (!p.has_grad()) continue;
      for (T g : p.grad()) {
        if (!std::isfinite(g)) {
          ++skipped_;
          return false;
        }
        sq += static_cast<double>(g) * static_cast<double>(g);
      }
    }
    last_grad_norm_ = std::sqrt(sq);
    double factor = 1.0;
    if (cfg_.clip_norm > 0 && last_grad_norm_ > cfg_.clip_norm) {
      factor = cfg_.clip_norm / last_grad_norm_;
      ++clipped_;
    }
    ++t_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [name, p] : params) {
      if (!p.has_grad()) continue;
      auto& m = moment(m_, name, p);
      auto& v = moment(v_, name, p);
      auto data = p.data();
      auto grad = p.grad();
      for (std::size_t i = 0; i < data.size(); ++i) {
        const double g = static_cast<double>(grad[i]) * factor;
        m[i] = static_cast<T>(cfg_.beta1 * m[i] + (1 - cfg_.beta1) * g);
        v[i] = static_cast<T>(cfg_.beta2 * v[i] + (1 - cfg_.beta2) * g * g);
        const double mhat = m[i] / bc1;
        const double vhat = v[i] / bc2;
        data[i] = static_cast<T>(data[i] - lr * mhat / (std::sqrt(vhat) + cfg_.eps));
      }
    }
    return true;
  }

  long steps() const { return t_; }
  long skipped() const { return skipped_; }
  long clipped() const { return clipped_; }
  double last_grad_norm() const { return last_grad_norm_; }
  const AdamConfig& config() const { return cfg_; }

  std::map<std::string, std::vector<T>>& first_moments() { return m_; }
  std::map<std::string, std::vector<T>>& second_moments() { return v_; }
  const std::map<std::string, std::vector<T>>& first_moments() const { return m_; }
  const std::map<std::string, std::vector<T>>& second_moments() const { return v_; }

  void restore(long steps, long skipped, long clipped) {
    t_ = steps;
    skipped_ = skipped;
    clipped_ = clipped;
  }

  bool operator==(const Adam& o) const {
    return t_ == o.t_ && skipped_ == o.skipped_ && clipped_ == o.clipped_ && m_ == o.m_ && v_ == o.v_;
  }

 private:
  static std::vector<T>& moment(std::map<std::string, std::vector<T>>& store, const std::string& name, const Tensor<T>& p) {
    auto& mv = store[name];
    if (mv.empty()) mv.assign(static_cast<std::size_t>(p.numel()), T(0));
    return mv;
  }

  AdamConfig cfg_;
  std::map<std::string, std::vector<T>> m_;
  std::map<std::string, std::vector<T>> v_;
  long t_ = 0;
  long skipped_ = 0;
  long clipped_ = 0;
  double last_grad_norm_ = 0;
};

}  // namespace vtlm
