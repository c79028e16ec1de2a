#pragma once

#include "lidia/common.hpp"
#include "lidia/core/nn.hpp"

namespace lidia {

struct SegmenterConfig {
  int grid = 48;
  int channels = 16;       // C; pyramid widths are C, 2C, 4C
  int query_dim = 64;      // d
  int embed_dim = 128;     // d_e
  int num_queries = 50;    // Q
  int decoder_layers = 2;  // L
  int ffn_hidden = 0;      // 0 -> 4 * query_dim
  double in_eps = 1e-5;
  double lrelu_slope = 0.01;
  /// Sigmoid threshold for masked attention. >= 1 disables every mask (all
  /// rows take the unmasked fallback); <= 0 allows all voxels explicitly.
  double attn_mask_threshold = 0.5;
};

template <class T>
struct BackboneFeatures {
  std::array<Var<T>, 3> scales;  // widths C, 2C, 4C at 1x, 1/2x, 1/4x grid
  Var<T> mask_features;          // d channels at full resolution
};

template <class T>
struct HeadOutput {
  Var<T> class_logits;  // Q x (8 tumor classes + no-object)
  Var<T> mask_logits;   // Q x grid^3
  Var<T> embeddings;    // Q x d_e, L2-normalized rows
};

/// Optional per-layer introspection of the decoder (tests).
template <class T>
struct DecodeTrace {
  std::vector<Tensor<T>> cross_attention;  // post-softmax rows, one per layer
  std::vector<int> attended_scale;
};

/// U-Net-style pixel backbone with an FPN decoder plus a query transformer
/// with masked cross-attention, Mask2Former-style.
template <class T>
class Segmenter {
 public:
  Segmenter(ParamStore<T>& ps, const SegmenterConfig& cfg, Rng& rng) : cfg_(cfg) {
    if (cfg.grid % 4 != 0)
      throw config_error("segmenter requires grid divisible by 4, got " +
                         std::to_string(cfg.grid));
    const int c = cfg.channels, d = cfg.query_dim;
    const double eps = cfg.in_eps, sl = cfg.lrelu_slope;
    enc_s1_ = ConvBlock<T>(ps, "seg.enc.s1", c, c, 3, 1, eps, sl, rng);
    down1_ = ConvBlock<T>(ps, "seg.enc.down1", c, 2 * c, 2, 2, eps, sl, rng);
    enc_s2_ = ConvBlock<T>(ps, "seg.enc.s2", 2 * c, 2 * c, 3, 1, eps, sl, rng);
    down2_ = ConvBlock<T>(ps, "seg.enc.down2", 2 * c, 4 * c, 2, 2, eps, sl, rng);
    enc_s3_ = ConvBlock<T>(ps, "seg.enc.s3", 4 * c, 4 * c, 3, 1, eps, sl, rng);
    lat1_ = PointwiseConv<T>(ps, "seg.fpn.lat1", c, d, rng);
    lat2_ = PointwiseConv<T>(ps, "seg.fpn.lat2", 2 * c, d, rng);
    lat3_ = PointwiseConv<T>(ps, "seg.fpn.lat3", 4 * c, d, rng);
    mask_head_ = ConvBlock<T>(ps, "seg.fpn.mask_head", d, d, 1, 1, eps, sl, rng);

    query_embed_ = ps.add("seg.queries", init::normal<T>({cfg.num_queries, d}, 1.0, rng));

    const int hidden = cfg.ffn_hidden > 0 ? cfg.ffn_hidden : 4 * d;
    const std::array<int, 3> scale_width = {c, 2 * c, 4 * c};
    for (int l = 0; l < cfg.decoder_layers; ++l) {
      const std::string p = "seg.dec.layer" + std::to_string(l);
      DecoderLayer layer;
      layer.scale_index = 2 - (l % 3);  // coarse-to-fine round robin
      const int cs = scale_width[static_cast<size_t>(layer.scale_index)];
      layer.key_proj = Linear<T>(ps, p + ".cross.key", cs, d, rng);
      layer.value_proj = Linear<T>(ps, p + ".cross.value", cs, d, rng);
      layer.cross_q = Linear<T>(ps, p + ".cross.query", d, d, rng);
      layer.cross_out = Linear<T>(ps, p + ".cross.out", d, d, rng);
      layer.norm1 = LayerNorm<T>(ps, p + ".norm1", d);
      layer.self_q = Linear<T>(ps, p + ".self.query", d, d, rng);
      layer.self_k = Linear<T>(ps, p + ".self.key", d, d, rng);
      layer.self_v = Linear<T>(ps, p + ".self.value", d, d, rng);
      layer.self_out = Linear<T>(ps, p + ".self.out", d, d, rng);
      layer.norm2 = LayerNorm<T>(ps, p + ".norm2", d);
      layer.ffn1 = Linear<T>(ps, p + ".ffn.fc1", d, hidden, rng);
      layer.ffn2 = Linear<T>(ps, p + ".ffn.fc2", hidden, d, rng);
      layer.norm3 = LayerNorm<T>(ps, p + ".norm3", d);
      layers_.push_back(std::move(layer));
    }
    class_head_ = Linear<T>(ps, "seg.head.class", d, kNumClasses + 1, rng);
    mask_embed_ = Mlp<T>(ps, "seg.head.mask_embed", d, d, d, rng);
    embed_head_ = Mlp<T>(ps, "seg.head.embed", d, cfg.embed_dim, cfg.embed_dim, rng);
  }

  BackboneFeatures<T> encode_decode(const Var<T>& fused) const {
    const auto& s = fused.val().shape();
    if (s.size() != 4 || s[0] != cfg_.channels)
      throw dimension_error("encode_decode: expected (" + std::to_string(cfg_.channels) +
                            ", D, H, W) input, got " + shape_str(s));
    BackboneFeatures<T> out;
    out.scales[0] = enc_s1_.forward(fused);
    out.scales[1] = enc_s2_.forward(down1_.forward(out.scales[0]));
    out.scales[2] = enc_s3_.forward(down2_.forward(out.scales[1]));
    Var<T> p3 = lat3_.forward(out.scales[2]);
    Var<T> p2 = ops::add(lat2_.forward(out.scales[1]), ops::upsample_nearest2(p3));
    Var<T> p1 = ops::add(lat1_.forward(out.scales[0]), ops::upsample_nearest2(p2));
    out.mask_features = mask_head_.forward(p1);
    return out;
  }

  HeadOutput<T> transformer_decode(const BackboneFeatures<T>& feat, bool masked_attention = true,
                                   DecodeTrace<T>* trace = nullptr) const {
    const int d = cfg_.query_dim;
    const int q = cfg_.num_queries;
    const T inv_sqrt_d = T(1) / std::sqrt(static_cast<T>(d));

    // per-scale token matrices (N_s x C_s) and pooled mask features for
    // attention-mask generation (values only; the hard threshold carries no
    // gradient)
    std::array<Var<T>, 3> tokens;
    std::array<Tensor<T>, 3> pooled_mask_feat;  // (d x N_s)
    for (int si = 0; si < 3; ++si) {
      const Var<T>& sc = feat.scales[static_cast<size_t>(si)];
      const int cs = sc.val().dim(0);
      const int ns = static_cast<int>(sc.val().numel() / cs);
      tokens[static_cast<size_t>(si)] = ops::transpose(ops::reshape(sc, {cs, ns}));
      NoGradGuard ng;
      Var<T> pooled = si == 0 ? ops::detach(feat.mask_features)
                              : ops::avgpool(ops::detach(feat.mask_features), si == 1 ? 2 : 4);
      pooled_mask_feat[static_cast<size_t>(si)] = pooled.val().reshaped({d, ns});
    }

    Var<T> x(query_embed_.node);
    for (const auto& layer : layers_) {
      const int si = layer.scale_index;
      const Var<T>& tok = tokens[static_cast<size_t>(si)];
      const int ns = tok.val().dim(0);

      Var<T> scores = ops::scale(
          ops::matmul_nt(layer.cross_q.forward(x), layer.key_proj.forward(tok)), inv_sqrt_d);
      Var<T> attn;
      if (masked_attention) {
        auto allowed = attention_mask(x, pooled_mask_feat[static_cast<size_t>(si)], q, ns);
        attn = ops::masked_softmax_rows(scores, allowed);
      } else {
        attn = ops::softmax_rows(scores);
      }
      if (trace) {
        trace->cross_attention.push_back(attn.val());
        trace->attended_scale.push_back(si);
      }
      Var<T> ctx = layer.cross_out.forward(ops::matmul(attn, layer.value_proj.forward(tok)));
      x = layer.norm1.forward(ops::add(x, ctx));

      Var<T> self_scores = ops::scale(
          ops::matmul_nt(layer.self_q.forward(x), layer.self_k.forward(x)), inv_sqrt_d);
      Var<T> self_ctx =
          layer.self_out.forward(ops::matmul(ops::softmax_rows(self_scores),
                                             layer.self_v.forward(x)));
      x = layer.norm2.forward(ops::add(x, self_ctx));

      Var<T> ffn = layer.ffn2.forward(ops::relu(layer.ffn1.forward(x)));
      x = layer.norm3.forward(ops::add(x, ffn));
    }

    HeadOutput<T> out;
    out.class_logits = class_head_.forward(x);
    const int v = static_cast<int>(feat.mask_features.val().numel() / d);
    out.mask_logits =
        ops::matmul(mask_embed_.forward(x), ops::reshape(feat.mask_features, {d, v}));
    out.embeddings = ops::l2_normalize_rows(embed_head_.forward(x));
    return out;
  }

  const SegmenterConfig& config() const { return cfg_; }

 private:
  /// Boolean attention mask from the queries' current mask predictions at the
  /// attended scale; a query allowing no voxel falls back to full attention
  /// inside masked_softmax_rows.
  std::shared_ptr<std::vector<uint8_t>> attention_mask(const Var<T>& x,
                                                       const Tensor<T>& pooled, int q,
                                                       int ns) const {
    auto allowed = std::make_shared<std::vector<uint8_t>>(static_cast<size_t>(q) * ns, 0);
    const double t = cfg_.attn_mask_threshold;
    if (t <= 0.0) {
      std::fill(allowed->begin(), allowed->end(), uint8_t(1));
      return allowed;
    }
    if (t >= 1.0) return allowed;  // nothing passes; fallback handles every row

    NoGradGuard ng;
    Var<T> qdesc = mask_embed_.forward(ops::detach(x));
    Var<T> logits = ops::matmul(qdesc, ops::constant(pooled));
    const T cut = static_cast<T>(std::log(t / (1.0 - t)));
    for (int64_t i = 0; i < logits.val().numel(); ++i)
      (*allowed)[static_cast<size_t>(i)] = logits.val()[i] > cut ? 1 : 0;
    return allowed;
  }

  struct DecoderLayer {
    int scale_index = 2;
    Linear<T> key_proj, value_proj, cross_q, cross_out;
    LayerNorm<T> norm1;
    Linear<T> self_q, self_k, self_v, self_out;
    LayerNorm<T> norm2;
    Linear<T> ffn1, ffn2;
    LayerNorm<T> norm3;
  };

  SegmenterConfig cfg_;
  ConvBlock<T> enc_s1_, down1_, enc_s2_, down2_, enc_s3_;
  PointwiseConv<T> lat1_, lat2_, lat3_;
  ConvBlock<T> mask_head_;
  Var<T> query_embed_;
  std::vector<DecoderLayer> layers_;
  Linear<T> class_head_;
  Mlp<T> mask_embed_;
  Mlp<T> embed_head_;
};

}  // namespace lidia
