#pragma once

#include <filesystem>

#include "lidia/model/model.hpp"
#include "lidia/train/loss.hpp"
#include "lidia/train/sam.hpp"

namespace lidia {

/// One run configuration file drives gen-data/train/eval/ablate.
struct RunConfig {
  std::filesystem::path dataset;  // index.json (or directory containing it)
  ModelConfig model;
  LossConfig loss;
  SamConfig sam;

  int batch_size = 2;
  int steps = 2000;
  int checkpoint_every = 500;
  int log_every = 1;
  uint64_t seed = 0;

  // ablation switches
  bool disable_ifm = false;        // 3-phase early concat
  bool symmetric_contrast = false;
  bool disable_sam = false;
  bool disable_focal = false;      // focal -> plain CE (gamma = 0)
  std::string diagnosis = "livermax";  // or "pixelcount"

  ModelConfig effective_model() const {
    ModelConfig m = model;
    m.use_ifm = !disable_ifm;
    if (m.init_seed == 0) m.init_seed = seed;
    return m;
  }

  LossConfig effective_loss() const {
    LossConfig l = loss;
    l.symmetric_contrast = symmetric_contrast || loss.symmetric_contrast;
    if (disable_focal) l.focal_gamma = 0.0;
    return l;
  }

  SamConfig effective_sam() const {
    SamConfig s = sam;
    if (disable_sam) s.enabled = false;
    return s;
  }

  void validate() const;

  std::string to_json() const;
  static RunConfig from_json(const std::string& text);
  static RunConfig from_file(const std::filesystem::path& path);
  void to_file(const std::filesystem::path& path) const;
};

/// JSON round trip for phantom generation configs (gen-data CLI).
std::string phantom_config_to_json(const phantom::PhantomConfig& cfg);
phantom::PhantomConfig phantom_config_from_json(const std::string& text);

/// Resolves an output directory against the LIDIA_RUN_ROOT override.
std::filesystem::path resolve_run_dir(const std::filesystem::path& out);

}  // namespace lidia
