#pragma once

#include "lidia/common.hpp"
#include "lidia/core/nn.hpp"

namespace lidia {

struct FusionConfig {
  int channels = 16;  // C
  double in_eps = 1e-5;
  double lrelu_slope = 0.01;
  /// One fusion block reused at every step (default), or one block per step.
  bool shared_fconv = true;
};

/// Per-phase feature extraction and iterative temporal fusion.
///
/// Each phase has its own two-block encoder (conv3 + instance norm +
/// LeakyReLU, full resolution). Fusion walks the phases in temporal order:
///   h_1 = h_NC,  h_{k+1} = F_conv(concat(h_k, next))
/// and returns h_3 or h_4 depending on whether the delayed phase is present.
template <class T>
class FusionModule {
 public:
  FusionModule(ParamStore<T>& ps, const FusionConfig& cfg, Rng& rng) : cfg_(cfg) {
    for (int p = 0; p < kNumPhases; ++p) {
      const std::string prefix = "fusion.phase_" + phase_names()[static_cast<size_t>(p)];
      enc1_[static_cast<size_t>(p)] = ConvBlock<T>(ps, prefix + ".block1", 1, cfg.channels, 3, 1,
                                                   cfg.in_eps, cfg.lrelu_slope, rng);
      enc2_[static_cast<size_t>(p)] = ConvBlock<T>(ps, prefix + ".block2", cfg.channels,
                                                   cfg.channels, 3, 1, cfg.in_eps,
                                                   cfg.lrelu_slope, rng);
    }
    const int steps = cfg.shared_fconv ? 1 : kNumPhases - 1;
    for (int k = 0; k < steps; ++k) {
      const std::string prefix =
          cfg.shared_fconv ? std::string("fusion.fconv") : "fusion.fconv_step" + std::to_string(k);
      fconv_.push_back(ConvBlock<T>(ps, prefix, 2 * cfg.channels, cfg.channels, 3, 1, cfg.in_eps,
                                    cfg.lrelu_slope, rng));
    }
  }

  /// Encode one (1, D, H, W) phase volume into (C, D, H, W) features.
  Var<T> phase_encode(const Var<T>& volume, Phase phase) const {
    const int p = static_cast<int>(phase);
    if (p < 0 || p >= kNumPhases) throw Error("unknown_phase", "unknown phase id");
    if (volume.val().ndim() != 4 || volume.val().dim(0) != 1)
      throw dimension_error("phase_encode: expected a (1, D, H, W) volume");
    return enc2_[static_cast<size_t>(p)].forward(enc1_[static_cast<size_t>(p)].forward(volume));
  }

  Var<T> phase_encode(const Tensor<T>& volume, Phase phase) const {
    if (volume.ndim() != 3) throw dimension_error("phase_encode: expected a 3-D volume");
    Tensor<T> v4 = volume.reshaped({1, volume.dim(0), volume.dim(1), volume.dim(2)});
    return phase_encode(ops::constant(v4), phase);
  }

  /// Fuse 3 or 4 per-phase feature maps given in temporal order.
  Var<T> iterative_fuse(const std::vector<Var<T>>& features) const {
    if (features.size() < 3 || features.size() > 4)
      throw dimension_error("iterative_fuse: expected 3 or 4 feature maps, got " +
                            std::to_string(features.size()));
    for (const auto& f : features)
      if (!f.val().same_shape(features[0].val()))
        throw dimension_error("iterative_fuse: feature shape mismatch");
    Var<T> fused = features[0];
    for (size_t k = 1; k < features.size(); ++k)
      fused = step_block(k - 1).forward(ops::concat_channels(fused, features[k]));
    return fused;
  }

  const ConvBlock<T>& step_block(size_t step) const {
    return cfg_.shared_fconv ? fconv_[0] : fconv_[step];
  }

  const FusionConfig& config() const { return cfg_; }

 private:
  FusionConfig cfg_;
  std::array<ConvBlock<T>, kNumPhases> enc1_, enc2_;
  std::vector<ConvBlock<T>> fconv_;
};

}  // namespace lidia
