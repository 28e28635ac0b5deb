#pragma once

#include <string>

#include "aim/common.hpp"
#include "aim/vit.hpp"

namespace aim {

// Backbone presets. vitb16/vitl14 mirror the standard image checkpoints so
// parameter accounting lines up; tiny is the desk-scale test backbone.
inline VitConfig preset(const std::string& name) {
  VitConfig cfg;
  if (name == "vitb16") {
    cfg.image_size = 224;
    cfg.patch_size = 16;
    cfg.channels = 3;
    cfg.width = 768;
    cfg.depth = 12;
    cfg.heads = 12;
    cfg.mlp_ratio = 4;
    cfg.frames = 8;
    cfg.num_classes = 400;
  } else if (name == "vitl14") {
    cfg.image_size = 224;
    cfg.patch_size = 14;
    cfg.channels = 3;
    cfg.width = 1024;
    cfg.depth = 24;
    cfg.heads = 16;
    cfg.mlp_ratio = 4;
    cfg.frames = 8;
    cfg.num_classes = 400;
  } else if (name == "tiny") {
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.channels = 1;
    cfg.width = 32;
    cfg.depth = 2;
    cfg.heads = 4;
    cfg.mlp_ratio = 4;
    cfg.frames = 4;
    cfg.num_classes = 2;
  } else {
    throw config_error("unknown preset: " + name);
  }
  return cfg;
}

}  // namespace aim
