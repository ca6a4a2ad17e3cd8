#include <gtest/gtest.h>

#include <cmath>

#include "hsf/net.hpp"
#include "hsf/solver.hpp"
#include "oracles.hpp"

using namespace hsf;
using D = DiffTensor<double>;

namespace {

FusionConfig toy(int stages = 2) {
  FusionConfig c;
  c.stages = stages;
  c.scale = 2;
  c.hsi_bands = 4;
  c.msi_bands = 2;
  c.prior_dim = 8;
  c.n_stl = 2;
  c.window = 4;
  c.heads = 2;
  c.n_conv3d = 2;
  c.conv3d_channels = 2;
  c.seed = 3;
  return c;
}

// Independent closed-form parameter count.
Index expected_params(const FusionConfig& c) {
  const Index S = c.hsi_bands, s = c.msi_bands, P = c.prior_dim, M = c.window, k3 = c.conv3d_kernel;
  const Index hidden = std::max<Index>(1, static_cast<Index>(std::lround(c.mlp_ratio * P)));
  auto stage = [&](Index embed_in) {
    Index n = (s * S * 9 + s) + (S * s * 9 + S) + 1;
    n += c.levels() * 2 * (S * S * 4 + S);
    n += P * embed_in * 9 + P;
    n += c.n_stl * (2 * P + (P * 3 * P + 3 * P) + (P * P + P) + (2 * M - 1) * (2 * M - 1) * c.heads + 2 * P +
                    (P * hidden + hidden) + (hidden * P + P));
    for (int i = 0; i < c.n_conv3d; ++i) {
      const Index in = i == 0 ? 1 : c.conv3d_channels, out = i + 1 == c.n_conv3d ? 1 : c.conv3d_channels;
      n += out * in * k3 * k3 * k3 + out;
    }
    return n + S * P * 9 + S;
  };
  if (c.share_stage_params)
    return stage(S + (c.dense_connections ? P : 0)) + (c.per_stage_eta ? c.stages - 1 : 0);
  Index n = 0;
  for (int k = 0; k < c.stages; ++k) n += stage(S + (c.dense_connections ? k * P : 0));
  return n;
}

struct Toy {
  HsiCube truth, msi, hsi;
};

Toy toy_data(Index W, Index S, Index s, Index d, std::uint64_t seed) {
  Toy t;
  t.truth = synthetic_scene(W, W, S, std::min<Index>(3, s), seed);
  auto p = simulate_pair(t.truth, synthetic_response(S, s), SpatialDegradation<double>{gaussian_kernel(4, 1.0), d});
  t.msi = p.msi;
  t.hsi = p.hsi;
  return t;
}

}  // namespace

TEST(ParamCount, HandCountedDegenerateConfig) {
  FusionConfig c;
  c.stages = 3, c.scale = 2, c.hsi_bands = 2, c.msi_bands = 1, c.prior_dim = 2, c.heads = 1;
  c.n_stl = 0, c.n_conv3d = 0;
  // r 1*2*9+1, rT 2*1*9+2, c and cT 2*2*4+2 each, eta 1, embed 2*4*9+2, head 2*2*9+2
  EXPECT_EQ(count_params(c), 19 + 20 + 18 + 18 + 1 + 74 + 38);
  EXPECT_EQ(count_params(c), 188);
}

TEST(ParamCount, MatchesClosedForm) {
  std::vector<FusionConfig> cs = {FusionConfig{}, toy(1), toy(3)};
  FusionConfig u = toy(3);
  u.share_stage_params = false;
  cs.push_back(u);
  FusionConfig nd = toy(2);
  nd.dense_connections = false;
  cs.push_back(nd);
  FusionConfig pe = toy(4);
  pe.per_stage_eta = true;
  cs.push_back(pe);
  FusionConfig big = toy(2);
  big.scale = 8;
  cs.push_back(big);
  for (const auto& c : cs) EXPECT_EQ(count_params(c), expected_params(c));
}

TEST(ParamCount, SharedIndependentOfStagesUnsharedGrows) {
  FusionConfig a = toy(1), b = toy(5);
  EXPECT_EQ(count_params(a), count_params(b));
  a.share_stage_params = b.share_stage_params = false;
  EXPECT_LT(count_params(a), count_params(b));
  FusionConfig w = toy(2);
  const Index base = count_params(w);
  w.prior_dim *= 2;
  EXPECT_GT(count_params(w), base);
  FusionConfig no3d = toy(2);
  no3d.n_conv3d = 0;
  EXPECT_LT(count_params(no3d), base);
}

TEST(ParamCount, EmbedWidthFollowsDenseMode) {
  FusionConfig c = toy(3);
  EXPECT_EQ(FusionNet<float>(c).stage(2).prior.embed.weight.dim(1), 4 + 8);
  c.dense_connections = false;
  EXPECT_EQ(FusionNet<float>(c).stage(2).prior.embed.weight.dim(1), 4);
  c.dense_connections = true;
  c.share_stage_params = false;
  FusionNet<float> n(c);
  for (int k = 0; k < 3; ++k) EXPECT_EQ(n.stage(k).prior.embed.weight.dim(1), 4 + k * 8);
}

TEST(DataModule, ConsistentObservationsGiveZero) {
  FusionNet<double> net(toy());
  Rng rng(1);
  const auto& sp = net.stage(0);
  // The transposed operators carry biases that would add a constant.
  for (double& b : sp.rT_conv.bias.data()) b = 0.0;
  for (double& b : sp.cT_convs[0].bias.data()) b = 0.0;
  D x = oracle::random_tensor<double>({4, 8, 8}, rng);
  NoGradGuard<double> g;
  const D y = conv2d(x, sp.r_conv);
  const D z = conv2d(x, sp.c_convs[0]);
  const D out = data_module(x, y, z, sp);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(DataModule, ZeroStepGivesZero) {
  FusionNet<double> net(toy());
  set_eta(net.stage(0), 0.0);
  EXPECT_EQ(eta_value(net.stage(0)), 0.0);
  Rng rng(2);
  NoGradGuard<double> g;
  const D out = data_module(oracle::random_tensor<double>({4, 8, 8}, rng), oracle::random_tensor<double>({2, 8, 8}, rng),
                            oracle::random_tensor<double>({4, 4, 4}, rng), net.stage(0));
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(DataModule, FrozenOperatorsGiveOneSolverStep) {
  FusionConfig c = toy(1);
  FusionNet<double> net(c);
  auto& sp = net.stage(0);
  Eigen::MatrixXd k(2, 2);
  k << 0.1, 0.2, 0.3, 0.4;
  FusionProblem<double> p;
  p.response = synthetic_response(4, 2);
  p.degradation = {k, 2};
  Rng rng(3);
  p.msi = oracle::random_cube(8, 8, 2, rng);
  p.hsi = oracle::random_cube(4, 4, 4, rng);
  load_explicit_operators(sp, p.response.matrix, {k});
  set_eta(sp, 0.25);
  zero_prior_head(sp);
  const HsiCube x = oracle::random_cube(8, 8, 4, rng);
  HsiCube expect = x;
  expect.data() -= 0.25 * grad_g(x, p).data();

  NoGradGuard<double> g;
  const D xt = to_tensor<double>(x);
  const D v = sub(xt, data_module(xt, to_tensor<double>(p.msi), to_tensor<double>(p.hsi), sp));
  const auto [out, feats] = prior_module(v, D({8, 8, 8}, 0.0), sp.prior);
  EXPECT_LT((to_cube(out).data() - expect.data()).cwiseAbs().maxCoeff(), 1e-5);
}

TEST(DataModule, ExplicitOperatorValidation) {
  FusionNet<double> net(toy());
  Eigen::MatrixXd k = Eigen::MatrixXd::Constant(2, 2, 0.25);
  EXPECT_THROW(load_explicit_operators(net.stage(0), Eigen::MatrixXd::Ones(3, 2), {k}), ShapeError);
  EXPECT_THROW(load_explicit_operators(net.stage(0), synthetic_response(4, 2).matrix, {}), ShapeError);
  EXPECT_THROW(load_explicit_operators(net.stage(0), synthetic_response(4, 2).matrix, {Eigen::MatrixXd::Ones(3, 3)}),
               ShapeError);
}

TEST(PriorModule, ZeroHeadIsIdentityAndFeaturesHavePriorWidth) {
  FusionNet<double> net(toy());
  zero_prior_head(net.stage(0));
  Rng rng(4);
  NoGradGuard<double> g;
  const D v = oracle::random_tensor<double>({4, 8, 8}, rng);
  const auto [out, feats] = prior_module(v, D({8, 8, 8}, 0.0), net.stage(0).prior);
  EXPECT_EQ(out.data()[0], v.data()[0]);
  for (std::size_t i = 0; i < out.data().size(); ++i) EXPECT_EQ(out.data()[i], v.data()[i]);
  EXPECT_EQ(feats.shape(), (Shape{8, 8, 8}));
}

TEST(Forward, OutputShapeAndShapeErrors) {
  FusionNet<float> net(toy());
  const Toy t = toy_data(16, 4, 2, 2, 5);
  NoGradGuard<float> g;
  const auto out = net.forward(to_tensor<float>(t.msi), to_tensor<float>(t.hsi));
  EXPECT_EQ(out.shape(), (Shape{4, 16, 16}));
  EXPECT_EQ(net.forward_stages(to_tensor<float>(t.msi), to_tensor<float>(t.hsi)).size(), 2u);
  EXPECT_THROW(net.forward(to_tensor<float>(t.hsi), to_tensor<float>(t.hsi)), ShapeError);
  EXPECT_THROW(net.forward(to_tensor<float>(t.msi), to_tensor<float>(t.msi)), ShapeError);
  const Toy wrong = toy_data(16, 4, 2, 4, 5);
  EXPECT_THROW(net.forward(to_tensor<float>(t.msi), to_tensor<float>(wrong.hsi)), ShapeError);
}

TEST(Forward, IdentityStagesReturnBicubic) {
  for (bool shared : {true, false}) {
    FusionConfig c = toy(3);
    c.share_stage_params = shared;
    FusionNet<double> net(c);
    for (int k = 0; k < 3; ++k) {
      set_eta(net.stage(k), 0.0);
      zero_prior_head(net.stage(k));
    }
    const Toy t = toy_data(16, 4, 2, 2, 6);
    NoGradGuard<double> g;
    const HsiCube out = to_cube(net.forward(to_tensor<double>(t.msi), to_tensor<double>(t.hsi)));
    EXPECT_LT((out.data() - bicubic_resize_to(t.hsi, 16, 16).data()).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, MoreStagesChangeTheOutput) {
  const Toy t = toy_data(16, 4, 2, 2, 7);
  NoGradGuard<double> g;
  const HsiCube a = to_cube(FusionNet<double>(toy(1)).forward(to_tensor<double>(t.msi), to_tensor<double>(t.hsi)));
  const HsiCube b = to_cube(FusionNet<double>(toy(3)).forward(to_tensor<double>(t.msi), to_tensor<double>(t.hsi)));
  EXPECT_GT((a.data() - b.data()).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Forward, NonFiniteActivationsRaise) {
  FusionNet<float> net(toy());
  net.stage(0).prior.head.bias.data()[0] = std::numeric_limits<float>::quiet_NaN();
  const Toy t = toy_data(16, 4, 2, 2, 8);
  NoGradGuard<float> g;
  EXPECT_THROW(net.forward(to_tensor<float>(t.msi), to_tensor<float>(t.hsi)), NumericsError);
}

TEST(Forward, EveryParameterReceivesGradient) {
  for (bool shared : {true, false}) {
    FusionConfig c = toy(2);
    c.share_stage_params = shared;
    FusionNet<double> net(c);
    const Toy t = toy_data(16, 4, 2, 2, 9);
    for (const auto& [_, p] : net.params().entries()) p.node()->grad.clear();
    {
      Tape<double> tape;
      const D loss = l1(sub(net.forward(to_tensor<double>(t.msi), to_tensor<double>(t.hsi)), to_tensor<double>(t.truth)));
      tape.backward(loss);
    }
    for (const auto& [name, p] : net.params().entries()) {
      ASSERT_TRUE(p.has_grad()) << name;
      double mx = 0.0;
      for (double v : p.grad()) mx = std::max(mx, std::abs(v));
      EXPECT_GT(mx, 1e-12) << name;
    }
  }
}

TEST(Forward, SeedDeterminism) {
  const Toy t = toy_data(16, 4, 2, 2, 10);
  NoGradGuard<float> g;
  auto run = [&](std::uint64_t seed) {
    FusionConfig c = toy();
    c.seed = seed;
    return to_cube(FusionNet<float>(c).forward(to_tensor<float>(t.msi), to_tensor<float>(t.hsi)));
  };
  EXPECT_EQ(run(1).data(), run(1).data());
  EXPECT_NE(run(1).data(), run(2).data());
}

TEST(Eta, PerStageEtaAddsIndependentSteps) {
  FusionConfig c = toy(3);
  c.per_stage_eta = true;
  FusionNet<float> net(c);
  EXPECT_NO_THROW(net.params().at("stage2.eta_raw"));
  EXPECT_NE(eta_value(net.stage(1)), eta_value(net.stage(2)));
  EXPECT_EQ(net.stage(1).r_conv.weight.data().data(), net.stage(2).r_conv.weight.data().data());
  set_eta(net.stage(1), 0.4);
  EXPECT_NEAR(eta_value(net.stage(1)), 0.4, 1e-6);
  EXPECT_THROW(set_eta(net.stage(1), -1.0), ConfigError);
}

TEST(Config, RoundTripAndValidation) {
  FusionConfig c = toy(4);
  c.mlp_ratio = 1.5;
  c.per_stage_eta = true;
  c.precision = Precision::double_;
  KeyValueConfig kv;
  c.write_to(kv);
  const FusionConfig r = FusionConfig::from_config(kv);
  KeyValueConfig kv2;
  r.write_to(kv2);
  EXPECT_EQ(kv.serialize(), kv2.serialize());
  EXPECT_EQ(r.stages, 4);
  EXPECT_EQ(r.mlp_ratio, 1.5);

  auto bad = [](auto mutate) {
    FusionConfig b = toy();
    mutate(b);
    return b;
  };
  EXPECT_THROW(bad([](FusionConfig& b) { b.scale = 3; }).validate(), ConfigError);
  EXPECT_THROW(bad([](FusionConfig& b) { b.prior_dim = 5; }).validate(), ConfigError);
  EXPECT_THROW(bad([](FusionConfig& b) { b.conv3d_kernel = 2; }).validate(), ConfigError);
  EXPECT_THROW(bad([](FusionConfig& b) { b.stages = 0; }).validate(), ConfigError);
  EXPECT_THROW(FusionNet<float>(bad([](FusionConfig& b) { b.heads = 3; })), ConfigError);
  KeyValueConfig junk;
  junk.set("stages", "two");
  EXPECT_THROW(FusionConfig::from_config(junk), ConfigError);
}
