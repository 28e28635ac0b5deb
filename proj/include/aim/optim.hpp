#pragma once

#include <cmath>
#include <map>
#include <string>
#include <vector>

#include "aim/common.hpp"
#include "aim/model.hpp"
#include "aim/params.hpp"

namespace aim {

struct ScheduleConfig {
  double base_lr = 3e-4;
  std::size_t warmup_steps = 0;
  std::size_t total_steps = 0;
  double min_lr = 0.0;
};

// Linear warmup from 0 to base_lr, then cosine decay to min_lr.
inline double lr_at(std::size_t step, const ScheduleConfig& s) {
  if (step > s.total_steps)
    throw contract_error("lr_at: step " + std::to_string(step) + " beyond total " +
                         std::to_string(s.total_steps));
  if (step < s.warmup_steps) return s.base_lr * double(step) / double(s.warmup_steps);
  if (s.total_steps == s.warmup_steps) return s.base_lr;
  double progress = double(step - s.warmup_steps) / double(s.total_steps - s.warmup_steps);
  return s.min_lr + 0.5 * (s.base_lr - s.min_lr) * (1.0 + std::cos(progress * 3.14159265358979323846));
}

// Decoupled weight decay applies to weight matrices only, never to biases,
// norms or embeddings.
inline bool decays(const std::string& name, std::size_t rank) {
  return rank >= 2 && name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0;
}

template <class T>
class AdamW {
 public:
  struct Moments {
    std::vector<double> m, v;
  };

  AdamW(ParamStore<T>& params, const FreezePartition& partition, double beta1 = 0.9,
        double beta2 = 0.999, double eps = 1e-8, double weight_decay = 5e-2)
      : params_(params), beta1_(beta1), beta2_(beta2), eps_(eps), wd_(weight_decay) {
    for (const auto& name : partition.tunable) {
      const Tensor<T>& t = params_.at(name);
      state_.emplace(name, Moments{std::vector<double>(t.size(), 0.0),
                                   std::vector<double>(t.size(), 0.0)});
    }
  }

  std::size_t step_count() const { return step_; }
  bool has_state(const std::string& name) const { return state_.count(name) != 0; }
  const std::map<std::string, Moments>& state() const { return state_; }

  void step(double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1_, double(step_));
    const double bc2 = 1.0 - std::pow(beta2_, double(step_));
    for (auto& [name, mo] : state_) {
      Tensor<T>& p = params_.at(name);
      if (!p.has_grad())
        throw contract_error("adamw_step: missing gradient for tunable parameter '" + name + "'");
      auto g = p.grad();
      auto v = p.mutable_value();
      const double wd = decays(name, p.rank()) ? wd_ : 0.0;
      for (std::size_t i = 0; i < v.size(); ++i) {
        double gi = double(g[i]);
        mo.m[i] = beta1_ * mo.m[i] + (1.0 - beta1_) * gi;
        mo.v[i] = beta2_ * mo.v[i] + (1.0 - beta2_) * gi * gi;
        double mhat = mo.m[i] / bc1;
        double vhat = mo.v[i] / bc2;
        double upd = mhat / (std::sqrt(vhat) + eps_) + wd * double(v[i]);
        v[i] = T(double(v[i]) - lr * upd);
      }
    }
  }

  void zero_grad() {
    for (auto& [name, mo] : state_) params_.at(name).zero_grad();
  }

 private:
  ParamStore<T>& params_;
  double beta1_, beta2_, eps_, wd_;
  std::size_t step_ = 0;
  std::map<std::string, Moments> state_;
};

}  // namespace aim
