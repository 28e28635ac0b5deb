#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "aim/common.hpp"
#include "aim/tensor.hpp"

namespace aim {

struct GradCheckCoord {
  std::string name;
  std::size_t index = 0;
  double analytic = 0.0;
  double numeric = 0.0;
  double rel_err = 0.0;
};

struct GradCheckReport {
  bool pass = false;
  std::size_t checked = 0;
  double max_rel_err = 0.0;
  GradCheckCoord worst;
};

struct GradCheckOptions {
  double h = 1e-5;
  double tol = 1e-4;
  std::size_t samples_per_param = 4;  // 0 = every coordinate
  std::uint64_t seed = 17;
  bool corrupt = false;  // test fixture: falsifies one analytic value
};

// Central-difference check of reverse-mode gradients. Params are double
// precision leaves captured by f; f must be deterministic.
inline GradCheckReport finite_diff_check(
    const std::function<Tensor<double>()>& f,
    const std::vector<std::pair<std::string, Tensor<double>>>& params,
    GradCheckOptions opt = {}) {
  for (auto& [name, p] : params) {
    (void)name;
    const_cast<Tensor<double>&>(p).zero_grad();
  }
  Tensor<double> loss = f();
  backward(loss);

  GradCheckReport report;
  Rng rng(opt.seed);
  bool corrupted = false;
  for (auto& [name, p_const] : params) {
    auto& p = const_cast<Tensor<double>&>(p_const);
    std::vector<std::size_t> coords;
    if (opt.samples_per_param == 0 || p.size() <= opt.samples_per_param) {
      coords.resize(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < opt.samples_per_param; ++i) coords.push_back(rng.index(p.size()));
    }
    for (std::size_t c : coords) {
      double analytic = p.has_grad() ? p.grad()[c] : 0.0;
      if (opt.corrupt && !corrupted) {
        analytic += 1.0;
        corrupted = true;
      }
      double orig = p.mutable_value()[c];
      p.mutable_value()[c] = orig + opt.h;
      double fp = f().item();
      p.mutable_value()[c] = orig - opt.h;
      double fm = f().item();
      p.mutable_value()[c] = orig;
      double numeric = (fp - fm) / (2.0 * opt.h);
      double denom = std::max({1.0, std::abs(analytic), std::abs(numeric)});
      double rel = std::abs(analytic - numeric) / denom;
      ++report.checked;
      if (rel >= report.max_rel_err) {
        report.max_rel_err = rel;
        report.worst = {name, c, analytic, numeric, rel};
      }
    }
  }
  report.pass = report.max_rel_err <= opt.tol;
  return report;
}

}  // namespace aim
