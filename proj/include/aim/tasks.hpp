#pragma once

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "aim/common.hpp"
#include "aim/tensor.hpp"

namespace aim {

enum class TaskKind {
  MatchAcrossFrames,  // do all frames show the same glyph?
  OrderedMotion,      // does the dot sweep left->right or right->left?
};

struct ToyVideoTask {
  TaskKind kind = TaskKind::MatchAcrossFrames;
  std::size_t canvas = 8;   // H == W, single channel
  std::size_t frames = 4;   // T
  std::size_t num_classes = 2;
  std::uint64_t seed = 1;
};

namespace task_detail {

// Four clearly distinct 4x4 glyphs.
inline const std::array<std::array<int, 16>, 4>& glyphs() {
  static const std::array<std::array<int, 16>, 4> g = {{
      {1, 0, 0, 1, 0, 1, 1, 0, 0, 1, 1, 0, 1, 0, 0, 1},  // X
      {1, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 1},  // O
      {1, 1, 1, 1, 0, 0, 0, 0, 1, 1, 1, 1, 0, 0, 0, 0},  // stripes
      {0, 0, 1, 1, 0, 0, 1, 1, 1, 1, 0, 0, 1, 1, 0, 0},  // checker
  }};
  return g;
}

template <class T>
void stamp_glyph(T* img, std::size_t canvas, std::size_t id, std::size_t gx, std::size_t gy,
                 T amp) {
  const auto& g = glyphs()[id];
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t x = 0; x < 4; ++x)
      img[(gy + y) * canvas + gx + x] += amp * T(g[y * 4 + x]);
}

// Zero-mean 2x2 marker; its pixel sum is 0 so a fixed linear readout of the
// raw canvas carries no class signal from it.
template <class T>
void stamp_marker(T* img, std::size_t canvas, std::size_t mx, std::size_t my, T amp) {
  img[my * canvas + mx] += amp;
  img[my * canvas + mx + 1] -= amp;
  img[(my + 1) * canvas + mx] -= amp;
  img[(my + 1) * canvas + mx + 1] += amp;
}

}  // namespace task_detail

// One deterministic labeled batch. batch_index selects the slice of the
// task's stream, so training and evaluation can draw disjoint data.
template <class T>
std::pair<Tensor<T>, std::vector<int>> generate_toy_batch(const ToyVideoTask& task,
                                                          std::size_t batch,
                                                          std::uint64_t batch_index) {
  const std::size_t C = 1, H = task.canvas, W = task.canvas, Tn = task.frames;
  Rng rng(task.seed * 0x9e3779b97f4a7c15ull + batch_index + 1);
  std::vector<T> data(batch * Tn * C * H * W, T(0));
  std::vector<int> labels(batch);

  for (std::size_t i = 0; i < batch; ++i) {
    // balanced within +-1 by construction
    int label = int((i + batch_index * batch) % 2);
    labels[i] = label;
    T* video = &data[i * Tn * H * W];

    if (task.kind == TaskKind::MatchAcrossFrames) {
      std::vector<std::size_t> ids(Tn);
      if (label == 1) {
        std::size_t id = rng.index(4);
        for (auto& v : ids) v = id;
      } else {
        bool all_same = true;
        do {
          for (auto& v : ids) v = rng.index(4);
          all_same = true;
          for (auto v : ids) all_same = all_same && v == ids[0];
        } while (all_same);
      }
      // glyph position is fixed within a clip so the match signal lives in
      // cross-frame comparison, not in spatial layout
      std::size_t gx = rng.index(W - 3), gy = rng.index(H - 3);
      for (std::size_t t = 0; t < Tn; ++t) {
        T* img = &video[t * H * W];
        task_detail::stamp_glyph(img, H, ids[t], gx, gy, T(1));
        // weak per-frame cue, present more often on matching clips
        double q = label == 1 ? 0.7 : 0.3;
        if (rng.uniform() < q)
          task_detail::stamp_marker(img, H, rng.index(W - 1), rng.index(H - 1), T(1.2));
      }
    } else {  // OrderedMotion
      std::size_t row = rng.index(H - 1);
      for (std::size_t t = 0; t < Tn; ++t) {
        T* img = &video[t * H * W];
        // evenly spaced sweep; reversing the frame order flips the label
        std::size_t slot = label == 0 ? t : (Tn - 1 - t);
        std::size_t x = (W - 2) * slot / (Tn - 1 ? Tn - 1 : 1);
        img[row * W + x] += T(1.5);
        img[row * W + x + 1] += T(1.5);
        img[(row + 1) * W + x] += T(1.5);
        img[(row + 1) * W + x + 1] += T(1.5);
      }
    }
    for (std::size_t k = 0; k < Tn * H * W; ++k) video[k] += T(rng.normal(0.0, 0.1));
  }
  return {Tensor<T>({batch, Tn, C, H, W}, std::move(data)), std::move(labels)};
}

}  // namespace aim
