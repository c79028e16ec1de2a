#include "doctest.h"

#include "gradcheck.hpp"
#include "lidia/model/fusion.hpp"

using namespace lidia;

namespace {

template <class T>
Var<T> random_volume(int grid, Rng& rng, int channels = 1) {
  Tensor<T> t({channels, grid, grid, grid});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = static_cast<T>(rng.normal(0.0, 1.0));
  return ops::constant(t);
}

}  // namespace

TEST_CASE("phase encoder shape contract: 48^3 -> 16 x 48^3") {
  ParamStore<float> ps;
  Rng rng(1);
  FusionModule<float> fm(ps, FusionConfig{}, rng);
  Rng data(2);
  Var<float> h = fm.phase_encode(random_volume<float>(48, data), Phase::NC);
  CHECK(h.val().shape() == std::vector<int>({16, 48, 48, 48}));
}

TEST_CASE("phase encoders are unshared: disjoint parameters, distinct outputs") {
  ParamStore<float> ps;
  Rng rng(3);
  FusionModule<float> fm(ps, FusionConfig{}, rng);

  // parameter identity: each phase owns its own weight tensors
  auto w_nc = ps.find("fusion.phase_NC.block1.conv.weight");
  auto w_a = ps.find("fusion.phase_A.block1.conv.weight");
  CHECK(w_nc.node.get() != w_a.node.get());
  bool all_equal = true;
  for (int64_t i = 0; i < w_nc.val().numel(); ++i)
    all_equal = all_equal && w_nc.val()[i] == w_a.val()[i];
  CHECK_FALSE(all_equal);

  Rng data(4);
  Var<float> vol = random_volume<float>(12, data);
  Var<float> h_nc = fm.phase_encode(vol, Phase::NC);
  Var<float> h_a = fm.phase_encode(vol, Phase::A);
  bool outputs_equal = true;
  for (int64_t i = 0; i < h_nc.val().numel(); ++i)
    outputs_equal = outputs_equal && h_nc.val()[i] == h_a.val()[i];
  CHECK_FALSE(outputs_equal);
}

TEST_CASE("zero input with zero biases maps to zero features") {
  ParamStore<float> ps;
  Rng rng(5);
  FusionModule<float> fm(ps, FusionConfig{}, rng);
  Var<float> zero = ops::constant(Tensor<float>({1, 8, 8, 8}));
  Var<float> h = fm.phase_encode(zero, Phase::V);
  for (int64_t i = 0; i < h.val().numel(); ++i) CHECK(h.val()[i] == 0.0f);
}

TEST_CASE("unknown phase id raises") {
  ParamStore<float> ps;
  Rng rng(6);
  FusionModule<float> fm(ps, FusionConfig{}, rng);
  Var<float> vol = ops::constant(Tensor<float>({1, 8, 8, 8}));
  CHECK_THROWS_AS(fm.phase_encode(vol, static_cast<Phase>(7)), Error);
}

TEST_CASE("iterative fuse: arity 3 and 4 give identical output shape") {
  ParamStore<float> ps;
  Rng rng(7);
  FusionConfig cfg;
  cfg.channels = 8;
  FusionModule<float> fm(ps, cfg, rng);
  Rng data(8);
  std::vector<Var<float>> f3, f4;
  for (int i = 0; i < 4; ++i) f4.push_back(random_volume<float>(12, data, 8));
  f3 = {f4[0], f4[1], f4[2]};

  Var<float> out3 = fm.iterative_fuse(f3);
  Var<float> out4 = fm.iterative_fuse(f4);
  CHECK(out3.val().shape() == std::vector<int>({8, 12, 12, 12}));
  CHECK(out4.val().shape() == out3.val().shape());

  CHECK_THROWS_AS(fm.iterative_fuse({f4[0], f4[1]}), Error);
  CHECK_THROWS_AS(fm.iterative_fuse({f4[0], f4[1], f4[2], f4[3], f4[0]}), Error);
  std::vector<Var<float>> mismatched = {f4[0], f4[1], random_volume<float>(8, data, 8)};
  CHECK_THROWS_AS(fm.iterative_fuse(mismatched), Error);
}

TEST_CASE("fusion equals step-by-step composition recomputed outside the module") {
  ParamStore<double> ps;
  Rng rng(9);
  FusionConfig cfg;
  cfg.channels = 4;
  FusionModule<double> fm(ps, cfg, rng);
  Rng data(10);
  std::vector<Var<double>> f;
  for (int i = 0; i < 3; ++i) f.push_back(random_volume<double>(8, data, 4));

  Var<double> fused = fm.iterative_fuse(f);

  // manual recomposition from raw parameters: F_conv(concat(F_conv(concat(h1,h2)), h3))
  auto w = ps.find("fusion.fconv.conv.weight");
  auto b = ps.find("fusion.fconv.conv.bias");
  auto g = ps.find("fusion.fconv.norm.gamma");
  auto bt = ps.find("fusion.fconv.norm.beta");
  auto fconv = [&](const Var<double>& x) {
    return ops::leaky_relu(ops::instance_norm(ops::conv3d(x, w, b, 1), g, bt, cfg.in_eps),
                           cfg.lrelu_slope);
  };
  Var<double> manual = fconv(ops::concat_channels(fconv(ops::concat_channels(f[0], f[1])), f[2]));

  for (int64_t i = 0; i < fused.val().numel(); ++i) CHECK(fused.val()[i] == manual.val()[i]);
}

TEST_CASE("prefix consistency: 4-phase intermediate equals 3-phase output") {
  ParamStore<double> ps;
  Rng rng(11);
  FusionConfig cfg;
  cfg.channels = 4;
  FusionModule<double> fm(ps, cfg, rng);
  Rng data(12);
  std::vector<Var<double>> f;
  for (int i = 0; i < 4; ++i) f.push_back(random_volume<double>(8, data, 4));

  Var<double> h3 = fm.iterative_fuse({f[0], f[1], f[2]});
  Var<double> h3_via_prefix = fm.step_block(1).forward(
      ops::concat_channels(fm.step_block(0).forward(ops::concat_channels(f[0], f[1])), f[2]));
  for (int64_t i = 0; i < h3.val().numel(); ++i) CHECK(h3.val()[i] == h3_via_prefix.val()[i]);
}

TEST_CASE("unshared fconv option uses distinct per-step parameters") {
  ParamStore<double> ps;
  Rng rng(13);
  FusionConfig cfg;
  cfg.channels = 4;
  cfg.shared_fconv = false;
  FusionModule<double> fm(ps, cfg, rng);
  CHECK_NOTHROW(ps.find("fusion.fconv_step0.conv.weight"));
  CHECK_NOTHROW(ps.find("fusion.fconv_step2.conv.weight"));
  Rng data(14);
  std::vector<Var<double>> f;
  for (int i = 0; i < 4; ++i) f.push_back(random_volume<double>(8, data, 4));
  CHECK(fm.iterative_fuse(f).val().shape() == std::vector<int>({4, 8, 8, 8}));
}

TEST_CASE("fusion gradients match central finite differences (8^3, step 1e-4)") {
  ParamStore<double> ps;
  Rng rng(15);
  FusionConfig cfg;
  cfg.channels = 4;
  FusionModule<double> fm(ps, cfg, rng);

  // Keep every LeakyReLU pre-activation away from its kink: normalized fields
  // are ~4 sigma bounded, so gamma 0.4 / beta +-2.5 leaves a ~0.9 margin that
  // a 1e-4 FD step cannot cross (half the channels exercise the negative
  // branch). At a kink the derivative does not exist and FD is meaningless.
  for (const auto& e : ps.entries()) {
    Var<double> v = e.var;  // shallow handle, shared storage
    if (e.name.find("norm.gamma") != std::string::npos)
      for (int64_t i = 0; i < v.val().numel(); ++i) v.val()[i] = 0.4;
    if (e.name.find("norm.beta") != std::string::npos)
      for (int64_t i = 0; i < v.val().numel(); ++i) v.val()[i] = (i % 2 == 0) ? 2.5 : -2.5;
  }

  Rng data(16);
  std::vector<Tensor<double>> vols;
  for (int i = 0; i < 4; ++i) {
    Tensor<double> t({1, 8, 8, 8});
    for (int64_t j = 0; j < t.numel(); ++j) t[j] = data.normal(0.0, 1.0);
    vols.push_back(t);
  }
  Tensor<double> probe({4, 8, 8, 8});
  for (int64_t j = 0; j < probe.numel(); ++j) probe[j] = data.normal(0.0, 1.0);

  auto make_loss = [&]() {
    std::vector<Var<double>> feats;
    for (int p = 0; p < 4; ++p)
      feats.push_back(fm.phase_encode(ops::constant(vols[static_cast<size_t>(p)]),
                                      static_cast<Phase>(p)));
    return ops::dot(fm.iterative_fuse(feats), ops::constant(probe));
  };

  auto rep = test::finite_diff_check(ps, make_loss, 1e-4);
  INFO("max rel err ", rep.max_rel_err, " at ", rep.worst_param, " over ", rep.coords_checked,
       " coordinates");
  CHECK(rep.coords_checked == ps.total_size());
  CHECK(rep.max_rel_err <= 1e-3);
}
