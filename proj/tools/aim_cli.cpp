#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "aim/aim.hpp"
#include "aim/gradcheck.hpp"
#include "aim/presets.hpp"

using namespace aim;

namespace {

struct ModelFlags {
  std::string preset_name = "tiny";
  std::string mode = "aim";
  double ratio = 0.25;
  std::string positions = "all";
  bool pre_temporal_adapter = false;
  double scale = 0.5;
  bool temporal_pos_embed = false;
  std::size_t classes = 0;  // 0 = keep preset default
  std::size_t frames = 0;
};

AdaptMode parse_mode(const std::string& s) {
  if (s == "frozen") return AdaptMode::FrozenSpaceOnly;
  if (s == "finetune") return AdaptMode::FullFinetuneSpaceOnly;
  if (s == "spatial") return AdaptMode::Spatial;
  if (s == "spatial-temporal") return AdaptMode::SpatialTemporal;
  if (s == "aim") return AdaptMode::Aim;
  throw CLI::ValidationError("--mode", "unknown mode '" + s + "'");
}

PositionPolicy parse_positions(const std::string& s) {
  if (s == "all") return {PositionPolicy::Kind::All, 0};
  if (s == "every-other") return {PositionPolicy::Kind::EveryOther, 0};
  auto colon = s.find(':');
  if (colon != std::string::npos) {
    std::string kind = s.substr(0, colon);
    std::size_t k = std::strtoul(s.c_str() + colon + 1, nullptr, 10);
    if (kind == "top") return {PositionPolicy::Kind::Top, k};
    if (kind == "bottom") return {PositionPolicy::Kind::Bottom, k};
  }
  throw CLI::ValidationError("--positions", "unknown position policy '" + s + "'");
}

void add_model_flags(CLI::App* cmd, ModelFlags& mf) {
  cmd->add_option("--preset", mf.preset_name, "Architecture preset: vitb16, vitl14, tiny")
      ->capture_default_str();
  cmd->add_option("--mode", mf.mode, "frozen, finetune, spatial, spatial-temporal, aim")
      ->capture_default_str();
  cmd->add_option("--ratio", mf.ratio, "Adapter bottleneck ratio")->capture_default_str();
  cmd->add_option("--positions", mf.positions, "all, top:K, bottom:K, every-other")
      ->capture_default_str();
  cmd->add_flag("--pre-temporal-adapter", mf.pre_temporal_adapter,
                "Add an adapter before temporal attention");
  cmd->add_option("--scale", mf.scale, "Joint adapter branch scale")->capture_default_str();
  cmd->add_flag("--temporal-pos-embed", mf.temporal_pos_embed,
                "Add learnable temporal position embeddings");
  cmd->add_option("--classes", mf.classes, "Number of classes (0 = preset default)")
      ->capture_default_str();
  cmd->add_option("--frames", mf.frames, "Frames per clip (0 = preset default)")
      ->capture_default_str();
}

std::pair<VitConfig, AdaptationPolicy> resolve(const ModelFlags& mf) {
  VitConfig cfg = preset(mf.preset_name);
  if (mf.classes) cfg.num_classes = mf.classes;
  if (mf.frames) cfg.frames = mf.frames;
  AdaptationPolicy pol;
  pol.mode = parse_mode(mf.mode);
  pol.ratio = mf.ratio;
  pol.positions = parse_positions(mf.positions);
  pol.pre_temporal_adapter = mf.pre_temporal_adapter;
  pol.scale = mf.scale;
  pol.temporal_pos_embed = mf.temporal_pos_embed;
  return {cfg, pol};
}

ToyVideoTask parse_task(const std::string& s, const VitConfig& cfg, std::uint64_t seed) {
  ToyVideoTask task;
  if (s == "match")
    task.kind = TaskKind::MatchAcrossFrames;
  else if (s == "ordered")
    task.kind = TaskKind::OrderedMotion;
  else
    throw CLI::ValidationError("--task", "unknown task '" + s + "'");
  task.canvas = cfg.image_size;
  task.frames = cfg.frames;
  task.num_classes = cfg.num_classes;
  task.seed = seed;
  return task;
}

int cmd_count_params(const ModelFlags& mf) {
  auto [cfg, pol] = resolve(mf);
  ParamCounts c = count_params(cfg, pol);
  std::printf("preset          %s\n", mf.preset_name.c_str());
  std::printf("mode            %s\n", mode_name(pol.mode));
  std::printf("total params    %zu  (%.1fM)\n", c.total, millions_rounded(c.total));
  std::printf("tunable params  %zu  (%.1fM)\n", c.tunable, millions_rounded(c.tunable));
  return 0;
}

int cmd_gradcheck(bool corrupt) {
  // tiny double-precision model regardless of any training dtype
  VitConfig cfg = preset("tiny");
  cfg.frames = 3;
  AdaptationPolicy pol;
  pol.mode = AdaptMode::Aim;
  pol.ratio = 0.25;
  pol.pre_temporal_adapter = true;
  auto [model, fp] = build_model<double>(cfg, pol, 123);
  set_all_requires_grad(model, true);

  ToyVideoTask task{TaskKind::MatchAcrossFrames, cfg.image_size, cfg.frames, cfg.num_classes, 9};
  auto [videos, labels] = generate_toy_batch<double>(task, 2, 0);

  std::vector<std::pair<std::string, Tensor<double>>> params;
  for (const auto& name : model.params.names()) params.emplace_back(name, model.params.at(name));

  GradCheckOptions opt;
  opt.corrupt = corrupt;
  GradCheckReport rep = finite_diff_check(
      [&] { return cross_entropy(model.classify(videos), labels, 0.0); }, params, opt);
  std::printf("checked %zu coordinates, max relative error %.3g (tolerance %.3g)\n", rep.checked,
              rep.max_rel_err, opt.tol);
  if (!rep.pass) {
    std::printf("FAIL worst coordinate %s[%zu]: analytic %.8g vs numeric %.8g (rel %.3g)\n",
                rep.worst.name.c_str(), rep.worst.index, rep.worst.analytic, rep.worst.numeric,
                rep.worst.rel_err);
    return 1;
  }
  std::printf("PASS\n");
  return 0;
}

struct TrainFlags {
  std::string task = "match";
  std::size_t steps = 500;
  std::size_t batch = 8;
  std::uint64_t seed = 1;
  double lr = 1e-2;
  double warmup_frac = 0.1;
  double weight_decay = 5e-2;
  std::size_t eval_samples = 512;
  std::string log_path;
  std::string checkpoint_path;
};

int cmd_train(const ModelFlags& mf, const TrainFlags& tf) {
  auto [cfg, pol] = resolve(mf);
  auto [model, fp] = build_model<float>(cfg, pol, tf.seed);
  ToyVideoTask task = parse_task(tf.task, cfg, tf.seed + 1000);

  TrainConfig tc;
  tc.steps = tf.steps;
  tc.batch = tf.batch;
  tc.seed = tf.seed;
  tc.weight_decay = tf.weight_decay;
  tc.eval_samples = tf.eval_samples;
  tc.log_path = tf.log_path;
  tc.schedule.base_lr = tf.lr;
  tc.schedule.total_steps = tf.steps;
  tc.schedule.warmup_steps = std::size_t(double(tf.steps) * tf.warmup_frac);

  TrainResult r = train(model, fp, task, tc);
  if (!tf.checkpoint_path.empty()) save_checkpoint(model.params, tf.checkpoint_path);
  std::printf("steps %zu  final_eval_acc %.4f\n", tf.steps, r.final_eval_acc);
  return 0;
}

struct DumpFlags {
  std::string task = "match";
  std::uint64_t seed = 1;
  std::string checkpoint_path;
  std::vector<std::size_t> blocks;
  std::string out_prefix = "attention";
};

void write_attention(const AttentionProbe<float>& probe, const std::string& base) {
  const std::size_t heads = probe.shape[1], L = probe.shape[2];
  // instance 0 of the batched attention tensor [S, heads, L, L]
  std::ofstream csv(base + ".csv");
  if (!csv) throw io_error("cannot open " + base + ".csv");
  for (std::size_t h = 0; h < heads; ++h)
    for (std::size_t q = 0; q < L; ++q) {
      for (std::size_t k = 0; k < L; ++k) {
        char buf[32];
        std::snprintf(buf, sizeof buf, "%.8g", probe.probs[(h * L + q) * L + k]);
        csv << buf << (k + 1 == L ? "" : ",");
      }
      csv << '\n';
    }
  for (std::size_t h = 0; h < heads; ++h) {
    std::ofstream pgm(base + ".h" + std::to_string(h) + ".pgm");
    if (!pgm) throw io_error("cannot open pgm under " + base);
    pgm << "P2\n" << L << ' ' << L << "\n255\n";
    for (std::size_t q = 0; q < L; ++q) {
      for (std::size_t k = 0; k < L; ++k) {
        int v = int(probe.probs[(h * L + q) * L + k] * 255.0f + 0.5f);
        pgm << std::clamp(v, 0, 255) << (k + 1 == L ? "" : " ");
      }
      pgm << '\n';
    }
  }
}

int cmd_attention_dump(const ModelFlags& mf, const DumpFlags& df) {
  auto [cfg, pol] = resolve(mf);
  auto [model, fp] = build_model<float>(cfg, pol, df.seed);
  if (df.checkpoint_path.empty())
    throw CLI::ValidationError("--checkpoint", "attention-dump requires a checkpoint");
  apply_checkpoint(model.params, load_checkpoint<float>(df.checkpoint_path));

  for (std::size_t b : df.blocks)
    if (b >= cfg.depth)
      throw CLI::ValidationError("--blocks",
                                 "block " + std::to_string(b) + " out of range for depth " +
                                     std::to_string(cfg.depth));

  ToyVideoTask task = parse_task(df.task, cfg, df.seed);
  auto [videos, labels] = generate_toy_batch<float>(task, 1, 0);

  std::map<std::size_t, AimBlockProbes<float>> probes;
  std::vector<AttentionProbe<float>> spatial(df.blocks.size()), temporal(df.blocks.size());
  for (std::size_t i = 0; i < df.blocks.size(); ++i)
    probes[df.blocks[i]] = AimBlockProbes<float>{&temporal[i], &spatial[i]};

  model.forward_tokens(videos, nullptr, &probes);

  for (std::size_t i = 0; i < df.blocks.size(); ++i) {
    std::string base = df.out_prefix + ".block" + std::to_string(df.blocks[i]);
    write_attention(spatial[i], base + ".spatial");
    if (!temporal[i].probs.empty()) write_attention(temporal[i], base + ".temporal");
  }
  std::printf("dumped %zu block(s) to %s.*\n", df.blocks.size(), df.out_prefix.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Frozen vision transformer with trainable adapters for video recognition"};
  app.require_subcommand(1);
  app.set_config("--config", "", "Read options from a key=value file");

  ModelFlags mf;
  TrainFlags tf;
  DumpFlags df;
  bool corrupt = false;

  CLI::App* cp = app.add_subcommand("count-params", "Print total and tunable parameter counts");
  add_model_flags(cp, mf);

  CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference check of the gradients");
  gc->add_flag("--corrupt", corrupt, "Negative control: falsify one analytic gradient");

  CLI::App* tr = app.add_subcommand("train", "Train on a synthetic video task");
  add_model_flags(tr, mf);
  tr->add_option("--task", tf.task, "match or ordered")->capture_default_str();
  tr->add_option("--steps", tf.steps)->capture_default_str();
  tr->add_option("--batch", tf.batch)->capture_default_str();
  tr->add_option("--seed", tf.seed)->capture_default_str();
  tr->add_option("--lr", tf.lr)->capture_default_str();
  tr->add_option("--warmup-frac", tf.warmup_frac)->capture_default_str();
  tr->add_option("--weight-decay", tf.weight_decay)->capture_default_str();
  tr->add_option("--eval-samples", tf.eval_samples)->capture_default_str();
  tr->add_option("--log", tf.log_path, "JSON-lines metrics log path");
  tr->add_option("--checkpoint", tf.checkpoint_path, "Checkpoint output path");

  CLI::App* ad = app.add_subcommand("attention-dump",
                                    "Write attention weights as CSV and PGM per head");
  add_model_flags(ad, mf);
  ad->add_option("--task", df.task, "match or ordered")->capture_default_str();
  ad->add_option("--seed", df.seed)->capture_default_str();
  ad->add_option("--checkpoint", df.checkpoint_path, "Checkpoint to load")->required();
  ad->add_option("--blocks", df.blocks, "Block indices to dump")->required();
  ad->add_option("--out", df.out_prefix, "Output file prefix")->capture_default_str();

  try {
    app.parse(argc, argv);
    if (cp->parsed()) return cmd_count_params(mf);
    if (gc->parsed()) return cmd_gradcheck(corrupt);
    if (tr->parsed()) return cmd_train(mf, tf);
    if (ad->parsed()) return cmd_attention_dump(mf, df);
    return 2;
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  } catch (const config_error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
}
