#pragma once

#include <cmath>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "aim/common.hpp"
#include "aim/model.hpp"
#include "aim/optim.hpp"
#include "aim/tasks.hpp"
#include "aim/tensor.hpp"

namespace aim {

struct TrainConfig {
  std::size_t steps = 500;
  std::size_t batch = 8;
  ScheduleConfig schedule;
  double weight_decay = 5e-2;
  double label_smoothing = 0.0;
  std::uint64_t seed = 1;
  std::size_t eval_every = 0;  // 0 = only at the end
  std::size_t eval_samples = 256;
  std::string log_path;        // empty = in-memory only
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss = 0.0;
  double eval_acc = -1.0;  // < 0 when no eval ran this step
};

struct TrainResult {
  std::vector<StepRecord> log;
  double final_eval_acc = -1.0;
};

inline std::string step_record_json(const StepRecord& r) {
  char buf[160];
  if (r.eval_acc >= 0.0)
    std::snprintf(buf, sizeof buf, "{\"step\":%zu,\"lr\":%.10g,\"loss\":%.10g,\"eval_acc\":%.10g}",
                  r.step, r.lr, r.loss, r.eval_acc);
  else
    std::snprintf(buf, sizeof buf, "{\"step\":%zu,\"lr\":%.10g,\"loss\":%.10g}", r.step, r.lr,
                  r.loss);
  return buf;
}

// classify_fn: videos [B,T,C,H,W] -> logits [B,C]
template <class T, class ClassifyFn>
double evaluate_fn(ClassifyFn&& classify_fn, const ToyVideoTask& task, std::size_t n_samples,
                   std::uint64_t eval_seed = 0xe7a1u) {
  ToyVideoTask eval_task = task;
  eval_task.seed = task.seed ^ eval_seed;
  const std::size_t batch = 32;
  std::size_t done = 0, correct = 0;
  std::uint64_t bi = 0;
  while (done < n_samples) {
    std::size_t b = std::min(batch, n_samples - done);
    auto [videos, labels] = generate_toy_batch<T>(eval_task, b, bi++);
    Tensor<T> logits = classify_fn(videos);
    auto lv = logits.value();
    const std::size_t C = logits.shape()[1];
    for (std::size_t i = 0; i < b; ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < C; ++j)
        if (lv[i * C + j] > lv[i * C + best]) best = j;
      if (int(best) == labels[i]) ++correct;
    }
    done += b;
  }
  return double(correct) / double(done);
}

template <class T>
double evaluate(const AimModel<T>& model, const ToyVideoTask& task, std::size_t n_samples,
                std::uint64_t eval_seed = 0xe7a1u) {
  return evaluate_fn<T>([&](const Tensor<T>& v) { return model.classify(v); }, task, n_samples,
                        eval_seed);
}

// SGD loop over the synthetic stream. Frozen parameters are never touched:
// they carry no grad and the optimizer holds no state for them.
template <class T>
TrainResult train(AimModel<T>& model, const FreezePartition& partition, const ToyVideoTask& task,
                  TrainConfig cfg) {
  if (cfg.schedule.total_steps == 0) {
    cfg.schedule.total_steps = cfg.steps;
    cfg.schedule.warmup_steps = cfg.steps / 10;
  }
  AdamW<T> opt(model.params, partition, 0.9, 0.999, 1e-8, cfg.weight_decay);
  Rng sd_rng(cfg.seed ^ 0x5d5d5d5dull);

  std::ofstream log_file;
  if (!cfg.log_path.empty()) {
    log_file.open(cfg.log_path, std::ios::trunc);
    if (!log_file) throw io_error("train: cannot open log file " + cfg.log_path);
  }

  TrainResult result;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    auto [videos, labels] = generate_toy_batch<T>(task, cfg.batch, step);
    Rng* sd = model.config.stochastic_depth_rate > 0.0 ? &sd_rng : nullptr;
    Tensor<T> logits = model.classify(videos, sd);
    Tensor<T> loss = cross_entropy(logits, labels, T(cfg.label_smoothing));
    double loss_val = double(loss.item());
    if (std::isnan(loss_val))
      throw numeric_error("train: NaN loss at step " + std::to_string(step));

    opt.zero_grad();
    backward(loss);
    double lr = lr_at(step, cfg.schedule);
    opt.step(lr);

    StepRecord rec{step, lr, loss_val, -1.0};
    if (cfg.eval_every && (step + 1) % cfg.eval_every == 0)
      rec.eval_acc = evaluate(model, task, cfg.eval_samples);
    result.log.push_back(rec);
    if (log_file) log_file << step_record_json(rec) << '\n';
  }
  if (cfg.steps > 0) result.final_eval_acc = evaluate(model, task, cfg.eval_samples);
  return result;
}

}  // namespace aim
