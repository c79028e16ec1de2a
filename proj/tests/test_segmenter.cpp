#include "doctest.h"

#include "gradcheck.hpp"
#include "lidia/model/model.hpp"

using namespace lidia;

namespace {

Var<float> random_fused(int c, int g, Rng& rng) {
  Tensor<float> t({c, g, g, g});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<float>(rng.normal(0.0, 1.0));
  return ops::constant(t);
}

SegmenterConfig toy_config(int grid = 8, int c = 4, int d = 8, int de = 8, int q = 4) {
  SegmenterConfig cfg;
  cfg.grid = grid;
  cfg.channels = c;
  cfg.query_dim = d;
  cfg.embed_dim = de;
  cfg.num_queries = q;
  return cfg;
}

phantom::Case toy_case(int grid, uint64_t seed, double delayed_prob) {
  phantom::PhantomConfig pc;
  pc.grid_size = grid;
  pc.seed = 900;
  pc.lesion_radius_range = {1, 2};
  pc.num_lesions_range = {1, 2};
  pc.delayed_phase_prob = delayed_prob;
  return phantom::generate_case(pc, seed);
}

}  // namespace

TEST_CASE("encode_decode shape contract: 16x48^3 -> 16x48^3, 32x24^3, 64x12^3") {
  ParamStore<float> ps;
  Rng rng(1);
  Segmenter<float> seg(ps, SegmenterConfig{}, rng);
  Rng data(2);
  auto feat = seg.encode_decode(random_fused(16, 48, data));
  CHECK(feat.scales[0].val().shape() == std::vector<int>({16, 48, 48, 48}));
  CHECK(feat.scales[1].val().shape() == std::vector<int>({32, 24, 24, 24}));
  CHECK(feat.scales[2].val().shape() == std::vector<int>({64, 12, 12, 12}));
  CHECK(feat.mask_features.val().shape() == std::vector<int>({64, 48, 48, 48}));
}

TEST_CASE("zero input with zero biases gives a zero pyramid") {
  ParamStore<float> ps;
  Rng rng(3);
  Segmenter<float> seg(ps, toy_config(), rng);
  auto feat = seg.encode_decode(ops::constant(Tensor<float>({4, 8, 8, 8})));
  for (const auto& s : feat.scales)
    for (int64_t i = 0; i < s.val().numel(); ++i) CHECK(s.val()[i] == 0.0f);
  for (int64_t i = 0; i < feat.mask_features.val().numel(); ++i)
    CHECK(feat.mask_features.val()[i] == 0.0f);
}

TEST_CASE("grid not divisible by 4 fails at construction") {
  ParamStore<float> ps;
  Rng rng(4);
  CHECK_THROWS_AS(Segmenter<float>(ps, toy_config(10), rng), Error);
}

TEST_CASE("transformer_decode emits spec-shaped heads with unit embeddings") {
  ParamStore<float> ps;
  Rng rng(5);
  Segmenter<float> seg(ps, SegmenterConfig{}, rng);
  Rng data(6);
  auto feat = seg.encode_decode(random_fused(16, 48, data));
  HeadOutput<float> head = seg.transformer_decode(feat);
  CHECK(head.class_logits.val().shape() == std::vector<int>({50, 9}));
  CHECK(head.mask_logits.val().shape() == std::vector<int>({50, 48 * 48 * 48}));
  CHECK(head.embeddings.val().shape() == std::vector<int>({50, 128}));
  for (int i = 0; i < 50; ++i) {
    double r = 0;
    for (int j = 0; j < 128; ++j) {
      const double e = head.embeddings.val()[i * 128 + j];
      r += e * e;
    }
    CHECK(std::abs(std::sqrt(r) - 1.0) < 1e-5);
  }
}

TEST_CASE("attention rows sum to 1 after softmax (masked and fallback rows)") {
  ParamStore<float> ps;
  Rng rng(7);
  Segmenter<float> seg(ps, toy_config(8, 4, 8, 8, 6), rng);
  Rng data(8);
  auto feat = seg.encode_decode(random_fused(4, 8, data));
  DecodeTrace<float> trace;
  seg.transformer_decode(feat, true, &trace);
  REQUIRE(trace.cross_attention.size() == 2);
  for (const auto& attn : trace.cross_attention) {
    const int rows = attn.dim(0), cols = attn.dim(1);
    for (int i = 0; i < rows; ++i) {
      double s = 0;
      for (int j = 0; j < cols; ++j) s += attn[static_cast<int64_t>(i) * cols + j];
      CHECK(std::abs(s - 1.0) < 1e-5);
    }
  }
}

TEST_CASE("all-permissive mask equals the unmasked code path bit-for-bit") {
  Rng data(10);
  Tensor<float> fused_vals({4, 8, 8, 8});
  for (int64_t i = 0; i < fused_vals.numel(); ++i)
    fused_vals[i] = static_cast<float>(data.normal(0.0, 1.0));

  auto run = [&](double threshold, bool masked) {
    ParamStore<float> ps;
    Rng rng(9);
    SegmenterConfig cfg = toy_config(8, 4, 8, 8, 6);
    cfg.attn_mask_threshold = threshold;
    Segmenter<float> seg(ps, cfg, rng);
    auto feat = seg.encode_decode(ops::constant(fused_vals));
    return seg.transformer_decode(feat, masked);
  };

  HeadOutput<float> unmasked = run(0.5, false);
  // threshold <= 0: every voxel explicitly allowed
  HeadOutput<float> permissive = run(-1.0, true);
  // threshold >= 1: every row empty, all rows take the unmasked fallback
  HeadOutput<float> fallback = run(1.5, true);

  auto bitwise_equal = [](const Var<float>& a, const Var<float>& b) {
    if (!a.val().same_shape(b.val())) return false;
    for (int64_t i = 0; i < a.val().numel(); ++i)
      if (a.val()[i] != b.val()[i]) return false;
    return true;
  };
  CHECK(bitwise_equal(unmasked.class_logits, permissive.class_logits));
  CHECK(bitwise_equal(unmasked.mask_logits, permissive.mask_logits));
  CHECK(bitwise_equal(unmasked.embeddings, permissive.embeddings));
  CHECK(bitwise_equal(unmasked.class_logits, fallback.class_logits));
  CHECK(bitwise_equal(unmasked.mask_logits, fallback.mask_logits));
  CHECK(bitwise_equal(unmasked.embeddings, fallback.embeddings));
}

TEST_CASE("query permutation equivariance") {
  Rng data(12);
  Tensor<float> fused_vals({4, 8, 8, 8});
  for (int64_t i = 0; i < fused_vals.numel(); ++i)
    fused_vals[i] = static_cast<float>(data.normal(0.0, 1.0));
  const std::vector<int> perm = {3, 0, 4, 1, 5, 2};

  ParamStore<float> ps;
  Rng rng(11);
  Segmenter<float> seg(ps, toy_config(8, 4, 8, 8, 6), rng);
  auto feat = seg.encode_decode(ops::constant(fused_vals));
  HeadOutput<float> base = seg.transformer_decode(feat);

  // permute the learned query rows in place and rerun
  Var<float> queries = ps.find("seg.queries");
  Tensor<float> orig = queries.val().clone();
  for (int i = 0; i < 6; ++i)
    for (int j = 0; j < 8; ++j)
      queries.val()[i * 8 + j] = orig[perm[static_cast<size_t>(i)] * 8 + j];
  HeadOutput<float> permuted = seg.transformer_decode(feat);

  auto rows_match = [&](const Var<float>& a, const Var<float>& b, double tol) {
    const int cols = a.val().dim(1);
    double max_err = 0;
    for (int i = 0; i < 6; ++i)
      for (int j = 0; j < cols; ++j)
        max_err = std::max<double>(
            max_err, std::abs(b.val()[static_cast<int64_t>(i) * cols + j] -
                              a.val()[static_cast<int64_t>(perm[static_cast<size_t>(i)]) * cols + j]));
    return max_err < tol;
  };
  CHECK(rows_match(base.class_logits, permuted.class_logits, 2e-4));
  CHECK(rows_match(base.mask_logits, permuted.mask_logits, 2e-3));
  CHECK(rows_match(base.embeddings, permuted.embeddings, 2e-4));
}

TEST_CASE("model forward: 3- and 4-phase cases give identical output shapes") {
  ModelConfig cfg;
  cfg.grid = 12;
  cfg.channels = 4;
  cfg.query_dim = 8;
  cfg.embed_dim = 8;
  cfg.num_queries = 5;
  LidiaModel<float> model(cfg);

  phantom::Case c3 = toy_case(12, 1, 0.0);
  phantom::Case c4 = toy_case(12, 2, 1.0);
  REQUIRE(c3.phases_present.size() == 3);
  REQUIRE(c4.phases_present.size() == 4);

  HeadOutput<float> h3 = model.forward(c3);
  HeadOutput<float> h4 = model.forward(c4);
  CHECK(h3.class_logits.val().shape() == h4.class_logits.val().shape());
  CHECK(h3.mask_logits.val().shape() == h4.mask_logits.val().shape());
  CHECK(h3.embeddings.val().shape() == h4.embeddings.val().shape());

  // determinism (no dropout anywhere)
  HeadOutput<float> again = model.forward(c3);
  for (int64_t i = 0; i < h3.class_logits.val().numel(); ++i)
    CHECK(h3.class_logits.val()[i] == again.class_logits.val()[i]);

  phantom::Case wrong = toy_case(8, 1, 0.0);
  CHECK_THROWS_AS(model.forward(wrong), Error);
}

TEST_CASE("early-concat ablation drops the delayed phase but keeps shapes") {
  ModelConfig cfg;
  cfg.grid = 12;
  cfg.channels = 4;
  cfg.query_dim = 8;
  cfg.embed_dim = 8;
  cfg.num_queries = 5;
  cfg.use_ifm = false;
  LidiaModel<float> model(cfg);
  phantom::Case c4 = toy_case(12, 2, 1.0);
  HeadOutput<float> h = model.forward(c4);
  CHECK(h.class_logits.val().shape() == std::vector<int>({5, 9}));
  CHECK_NOTHROW(model.params().find("early_concat.conv.weight"));
}

TEST_CASE("forward produces finite outputs over 100 random cases") {
  ModelConfig cfg;
  cfg.grid = 12;
  cfg.channels = 4;
  cfg.query_dim = 8;
  cfg.embed_dim = 8;
  cfg.num_queries = 5;
  LidiaModel<float> model(cfg);
  NoGradGuard ng;
  for (uint64_t s = 0; s < 100; ++s) {
    phantom::Case c = toy_case(12, s, 0.5);
    HeadOutput<float> h = model.forward(c);
    for (int64_t i = 0; i < h.class_logits.val().numel(); ++i)
      REQUIRE(std::isfinite(h.class_logits.val()[i]));
    for (int64_t i = 0; i < h.embeddings.val().numel(); ++i)
      REQUIRE(std::isfinite(h.embeddings.val()[i]));
    for (int64_t i = 0; i < h.mask_logits.val().numel(); i += 97)
      REQUIRE(std::isfinite(h.mask_logits.val()[i]));
  }
}

TEST_CASE("segmenter end-to-end gradients vs finite differences (8^3, 4 queries)") {
  ParamStore<double> ps;
  Rng rng(13);
  SegmenterConfig cfg = toy_config(8, 4, 8, 8, 4);
  // fallback-mask regime: the attention mask set is input-independent, so the
  // loss stays differentiable at every checked point (hard thresholds would
  // make FD meaningless at mask flips)
  cfg.attn_mask_threshold = 1.5;
  Segmenter<double> seg(ps, cfg, rng);

  // keep kinked nonlinearities (LeakyReLU in conv blocks, ReLU in MLPs) away
  // from zero: normalized activations are ~4 sigma bounded
  for (const auto& e : ps.entries()) {
    Var<double> v = e.var;
    if (e.name.find("norm.gamma") != std::string::npos)
      for (int64_t i = 0; i < v.val().numel(); ++i) v.val()[i] = 0.4;
    if (e.name.find("norm.beta") != std::string::npos)
      for (int64_t i = 0; i < v.val().numel(); ++i) v.val()[i] = (i % 2 == 0) ? 2.5 : -2.5;
    if ((e.name.find("ffn.fc1.bias") != std::string::npos ||
         e.name.find("mask_embed.fc1.bias") != std::string::npos ||
         e.name.find("embed.fc1.bias") != std::string::npos))
      for (int64_t i = 0; i < v.val().numel(); ++i) v.val()[i] = (i % 2 == 0) ? 3.0 : -3.0;
  }

  Rng data(14);
  Tensor<double> fused({4, 8, 8, 8});
  for (int64_t i = 0; i < fused.numel(); ++i) fused[i] = data.normal(0.0, 1.0);
  Tensor<double> probe_cls({4, 9}), probe_emb({4, 8});
  for (int64_t i = 0; i < probe_cls.numel(); ++i) probe_cls[i] = data.normal(0.0, 1.0);
  for (int64_t i = 0; i < probe_emb.numel(); ++i) probe_emb[i] = data.normal(0.0, 1.0);
  std::vector<int64_t> mask_probe_idx;
  for (int64_t i = 0; i < 4 * 512; i += 7) mask_probe_idx.push_back(i);

  auto make_loss = [&]() {
    auto feat = seg.encode_decode(ops::constant(fused));
    HeadOutput<double> head = seg.transformer_decode(feat, true);
    Var<double> l1 = ops::dot(head.class_logits, ops::constant(probe_cls));
    Var<double> l2 = ops::mean(ops::gather(head.mask_logits, mask_probe_idx));
    Var<double> l3 = ops::dot(head.embeddings, ops::constant(probe_emb));
    return ops::add(ops::add(l1, l2), l3);
  };

  auto rep = test::finite_diff_check(ps, make_loss, 1e-4, 2500, 77);
  INFO("max rel err ", rep.max_rel_err, " at ", rep.worst_param, " over ", rep.coords_checked,
       " coordinates");
  CHECK(rep.max_rel_err <= 1e-3);
}
