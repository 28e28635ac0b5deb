#include <cstdio>
#include <cstdlib>
#include <string>

#include "aim/aim.hpp"
#include "aim/presets.hpp"

using namespace aim;

int main(int argc, char** argv) {
  std::size_t steps = argc > 1 ? std::strtoul(argv[1], nullptr, 10) : 300;
  double lr = argc > 2 ? std::strtod(argv[2], nullptr) : 3e-3;

  VitConfig cfg = preset("tiny");
  ToyVideoTask match{TaskKind::MatchAcrossFrames, 8, 4, 2, 5};
  ToyVideoTask ordered{TaskKind::OrderedMotion, 8, 4, 2, 5};

  auto run = [&](AdaptMode mode, bool tpe, const ToyVideoTask& task, std::uint64_t seed) {
    AdaptationPolicy pol;
    pol.mode = mode;
    pol.ratio = 0.25;
    pol.temporal_pos_embed = tpe;
    auto [model, fp] = build_model<float>(cfg, pol, seed);
    TrainConfig tc;
    tc.steps = steps;
    tc.batch = 8;
    tc.seed = seed;
    tc.eval_samples = 512;
    tc.schedule.base_lr = lr;
    auto r = train(model, fp, task, tc);
    return r.final_eval_acc;
  };

  for (std::uint64_t seed : {13ull, 14ull, 15ull}) {
    std::printf("match seed=%llu frozen=%.3f spatial=%.3f st=%.3f aim=%.3f\n",
                (unsigned long long)seed,
                run(AdaptMode::FrozenSpaceOnly, false, match, seed),
                run(AdaptMode::Spatial, false, match, seed),
                run(AdaptMode::SpatialTemporal, false, match, seed),
                run(AdaptMode::Aim, false, match, seed));
    std::fflush(stdout);
  }
  for (std::uint64_t seed : {13ull, 14ull, 15ull}) {
    std::printf("ordered seed=%llu aim_no_tpe=%.3f aim_tpe=%.3f\n", (unsigned long long)seed,
                run(AdaptMode::Aim, false, ordered, seed), run(AdaptMode::Aim, true, ordered, seed));
    std::fflush(stdout);
  }
  return 0;
}
