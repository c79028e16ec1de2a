#pragma once

#include "lidia/model/fusion.hpp"
#include "lidia/model/segmenter.hpp"
#include "lidia/phantom/phantom.hpp"

namespace lidia {

struct ModelConfig {
  int grid = 48;
  int channels = 16;       // C
  int query_dim = 64;      // d
  int embed_dim = 128;     // d_e
  int num_queries = 50;    // Q
  int decoder_layers = 2;  // L
  /// false: drop the delayed phase and early-concat NC/A/V as channels
  /// through one conv block (fusion ablation).
  bool use_ifm = true;
  bool shared_fconv = true;
  double in_eps = 1e-5;
  double lrelu_slope = 0.01;
  double attn_mask_threshold = 0.5;
  uint64_t init_seed = 0;

  SegmenterConfig segmenter() const {
    SegmenterConfig s;
    s.grid = grid;
    s.channels = channels;
    s.query_dim = query_dim;
    s.embed_dim = embed_dim;
    s.num_queries = num_queries;
    s.decoder_layers = decoder_layers;
    s.in_eps = in_eps;
    s.lrelu_slope = lrelu_slope;
    s.attn_mask_threshold = attn_mask_threshold;
    return s;
  }
};

/// Full network: per-phase encoders + iterative fusion (or the early-concat
/// ablation) feeding the pixel backbone and query decoder.
template <class T>
class LidiaModel {
 public:
  explicit LidiaModel(const ModelConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed);
    if (cfg.use_ifm) {
      FusionConfig fc;
      fc.channels = cfg.channels;
      fc.in_eps = cfg.in_eps;
      fc.lrelu_slope = cfg.lrelu_slope;
      fc.shared_fconv = cfg.shared_fconv;
      fusion_.emplace(ps_, fc, rng);
    } else {
      early_concat_ = ConvBlock<T>(ps_, "early_concat", 3, cfg.channels, 3, 1, cfg.in_eps,
                                   cfg.lrelu_slope, rng);
    }
    seg_.emplace(ps_, cfg.segmenter(), rng);
  }

  /// Fused feature map for a case (3- or 4-phase path per phases_present).
  Var<T> fuse_case(const phantom::Case& c) const {
    if (c.grid() != cfg_.grid)
      throw dimension_error("model grid " + std::to_string(cfg_.grid) +
                            " does not match case grid " + std::to_string(c.grid()));
    const int g = cfg_.grid;
    if (cfg_.use_ifm) {
      std::vector<Var<T>> feats;
      for (Phase p : c.phases_present)
        feats.push_back(fusion_->phase_encode(ops::constant(volume_tensor(c, p)), p));
      return fusion_->iterative_fuse(feats);
    }
    // ablation: stack NC/A/V as channels, one context-agnostic first block
    Tensor<T> stacked({3, g, g, g});
    int ch = 0;
    for (Phase p : {Phase::NC, Phase::A, Phase::V}) {
      Tensor<T> v = volume_tensor(c, p);
      std::copy_n(v.data(), v.numel(), stacked.data() + static_cast<int64_t>(ch++) * v.numel());
    }
    return early_concat_->forward(ops::constant(stacked));
  }

  HeadOutput<T> forward(const phantom::Case& c, bool masked_attention = true,
                        DecodeTrace<T>* trace = nullptr) const {
    BackboneFeatures<T> feat = seg_->encode_decode(fuse_case(c));
    return seg_->transformer_decode(feat, masked_attention, trace);
  }

  ParamStore<T>& params() { return ps_; }
  const ParamStore<T>& params() const { return ps_; }
  const ModelConfig& config() const { return cfg_; }
  const Segmenter<T>& segmenter() const { return *seg_; }
  const FusionModule<T>& fusion() const { return *fusion_; }

 private:
  Tensor<T> volume_tensor(const phantom::Case& c, Phase p) const {
    const auto& vol = c.volumes.at(p);
    Tensor<T> t({1, vol.dim(0), vol.dim(1), vol.dim(2)});
    for (int64_t i = 0; i < vol.numel(); ++i) t[i] = static_cast<T>(vol[i]);
    return t;
  }

  ModelConfig cfg_;
  ParamStore<T> ps_;
  std::optional<FusionModule<T>> fusion_;
  std::optional<ConvBlock<T>> early_concat_;
  std::optional<Segmenter<T>> seg_;
};

}  // namespace lidia
