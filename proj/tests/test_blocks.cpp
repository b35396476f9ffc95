#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gridsight/blocks.hpp"
#include "gridsight/grad_check.hpp"
#include "test_util.hpp"

using namespace gridsight;
using testutil::random_tensor;

namespace {

void zero_all(ParamRegistry<double>& reg, const std::string& contains) {
  for (auto& p : reg.entries())
    if (p.name.find(contains) != std::string::npos)
      for (double& v : p.tensor.data()) v = 0.0;
}

}  // namespace

TEST_CASE("silence is a bitwise fixed point with pass-through gradients") {
  Rng rng(1);
  auto x = random_tensor<double>(rng, {1, 3, 4, 4});
  x.set_requires_grad(true);
  auto y = silence(x);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
  backward(sum(y));
  for (double g : x.grad()) CHECK(g == 1.0);

  // two consumers branch off one silence
  x.zero_grad();
  auto report = grad_check(
      [&]() {
        auto s = silence(x);
        return sum(add(mul(s, s), silu(s)));
      },
      {{"x", x}});
  CHECK(report.passed());
}

TEST_CASE("conv_block: autopad preserves, stride halves, composition oracle") {
  Rng rng(2);
  ParamRegistry<double> reg;
  ConvBlock<double> cb(reg, "cb", rng, 8, 8, 3, 1);
  auto x = random_tensor<double>(rng, {1, 8, 16, 16});
  auto y = cb.forward(x, RunCtx::train());
  CHECK(y.shape() == Shape{1, 8, 16, 16});

  ParamRegistry<double> reg2;
  ConvBlock<double> cb2(reg2, "cb2", rng, 8, 8, 3, 2);
  auto y2 = cb2.forward(x, RunCtx::train());
  CHECK(y2.shape() == Shape{1, 8, 8, 8});

  // equals the hand-composed conv2d -> batchnorm2d -> silu chain
  auto w = reg.find("cb.conv.weight")->tensor;
  auto gamma = reg.find("cb.bn.gamma")->tensor;
  auto beta = reg.find("cb.bn.beta")->tensor;
  auto rm = Tensor<double>::zeros({8});
  auto rv = Tensor<double>::full({8}, 1.0);
  auto ref = silu(batchnorm2d(conv2d(x, w, 1, 1), gamma, beta, rm, rv, true, false,
                              ConvBlock<double>::kBnEps, ConvBlock<double>::kBnMomentum));
  auto again = cb.forward(x, RunCtx{true, false});
  for (int64_t i = 0; i < ref.size(); ++i) CHECK(again.data()[i] == ref.data()[i]);

  CHECK_THROWS_AS(ConvBlock<double>(reg, "bad", rng, 4, 4, 2, 1), input_error);
}

TEST_CASE("repn_bottleneck: dead branch leaves the residual") {
  Rng rng(3);
  ParamRegistry<double> reg;
  RepNBottleneck<double> bn(reg, "b", rng, 6, 6);
  zero_all(reg, ".conv.weight");
  auto x = random_tensor<double>(rng, {2, 6, 5, 5});
  auto y = bn.forward(x, RunCtx::train());
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("repn_bottleneck: no residual when channels differ; grads reach both convs") {
  Rng rng(4);
  ParamRegistry<double> reg;
  RepNBottleneck<double> bn(reg, "b", rng, 4, 6);
  auto x = random_tensor<double>(rng, {1, 4, 5, 5});
  x.set_requires_grad(true);
  auto y = bn.forward(x, RunCtx::train());
  CHECK(y.shape() == Shape{1, 6, 5, 5});
  backward(sum(mul(y, y)));
  for (const char* name : {"b.cv1.conv.weight", "b.cv2.conv.weight"}) {
    auto t = reg.find(name)->tensor;
    double norm = 0.0;
    for (double g : t.grad()) norm += g * g;
    INFO(name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("repncsppelan: shapes, degenerate n=0, full gradient reach") {
  Rng rng(5);
  ParamRegistry<double> reg;
  RepNCSPPELAN<double> elan(reg, "e", rng, 32, 32, 32, 2);
  auto x = random_tensor<double>(rng, {1, 32, 16, 16});
  auto y = elan.forward(x, RunCtx::train());
  CHECK(y.shape() == Shape{1, 32, 16, 16});

  ParamRegistry<double> reg0;
  RepNCSPPELAN<double> degen(reg0, "d", rng, 8, 12, 6, 0);
  auto x0 = random_tensor<double>(rng, {1, 8, 4, 4});
  CHECK(degen.forward(x0, RunCtx::train()).shape() == Shape{1, 12, 4, 4});

  CHECK_THROWS_AS(RepNCSPPELAN<double>(reg0, "odd", rng, 8, 8, 7, 1), input_error);

  // every stage and the bypass half receive gradient
  x.set_requires_grad(true);
  auto out = elan.forward(x, RunCtx::train());
  backward(sum(mul(out, out)));
  for (const auto& p : reg.entries()) {
    if (!p.trainable) continue;
    double norm = 0.0;
    for (double g : p.tensor.grad()) norm += std::abs(g);
    INFO(p.name);
    CHECK(norm > 0.0);
  }
}

TEST_CASE("adown: halves spatial dims, paths are independent") {
  Rng rng(6);
  ParamRegistry<double> reg;
  ADown<double> down(reg, "a", rng, 64, 64);
  auto x = random_tensor<double>(rng, {1, 64, 32, 32});
  auto y = down.forward(x, RunCtx{true, false});
  CHECK(y.shape() == Shape{1, 64, 16, 16});

  // perturbing half B's input channels leaves half A's output slice unchanged
  auto x2 = Tensor<double>::from(x.shape(), {x.data().begin(), x.data().end()});
  for (int64_t i = x2.size() / 2; i < x2.size(); ++i) x2.data()[i] += 0.37;
  auto y2 = down.forward(x2, RunCtx{true, false});
  const int64_t half_out = y.size() / 2;
  for (int64_t i = 0; i < half_out; ++i) CHECK(y2.data()[i] == y.data()[i]);
  bool b_changed = false;
  for (int64_t i = half_out; i < y.size(); ++i)
    if (y2.data()[i] != y.data()[i]) b_changed = true;
  CHECK(b_changed);

  CHECK_THROWS_AS(ADown<double>(reg, "odd", rng, 64, 63), input_error);
  auto odd_spatial = random_tensor<double>(rng, {1, 64, 7, 8});
  CHECK_THROWS_AS(down.forward(odd_spatial, RunCtx::train()), input_error);
}

TEST_CASE("sppelan: spatial preservation and pooling composition") {
  Rng rng(7);
  ParamRegistry<double> reg;
  SPPELAN<double> spp(reg, "s", rng, 64, 48, 32);
  auto x = random_tensor<double>(rng, {1, 64, 8, 8});
  CHECK(spp.forward(x, RunCtx::train()).shape() == Shape{1, 48, 8, 8});

  // chained 5x5 stride-1 pools equal one pool with effective kernel 4i+1
  auto m = random_tensor<double>(rng, {1, 3, 9, 9});
  auto chained = m;
  for (int i = 1; i <= 3; ++i) {
    chained = maxpool2d(chained, 5, 1, 2);
    auto direct = maxpool2d(m, 4 * i + 1, 1, 2 * i);
    REQUIRE(chained.size() == direct.size());
    for (int64_t p = 0; p < direct.size(); ++p) CHECK(chained.data()[p] == direct.data()[p]);
  }

  // constant input stays constant through the pooling chain
  auto c = Tensor<double>::full({1, 2, 6, 6}, 3.25);
  auto pooled = maxpool2d(maxpool2d(c, 5, 1, 2), 5, 1, 2);
  for (double v : pooled.data()) CHECK(v == 3.25);
}

TEST_CASE("cb_linear: split shapes and concat roundtrip") {
  Rng rng(8);
  ParamRegistry<double> reg;
  CBLinear<double> cbl(reg, "cbl", rng, 16, {4, 8});
  auto x = random_tensor<double>(rng, {1, 16, 8, 8});
  auto outs = cbl.forward(x, RunCtx::infer());
  REQUIRE(outs.size() == 2);
  CHECK(outs[0].shape() == Shape{1, 4, 8, 8});
  CHECK(outs[1].shape() == Shape{1, 8, 8, 8});

  // concat of the splits equals the unsplit projection
  auto w = reg.find("cbl.weight")->tensor;
  auto b = reg.find("cbl.bias")->tensor;
  auto full = conv2d(x, w, b, 1, 0);
  auto cat = concat_channels(outs);
  for (int64_t i = 0; i < full.size(); ++i) CHECK(cat.data()[i] == full.data()[i]);

  // single split equals no split
  ParamRegistry<double> reg1;
  CBLinear<double> single(reg1, "s", rng, 16, {6});
  auto one = single.forward(x, RunCtx::infer());
  REQUIRE(one.size() == 1);
  auto w1 = reg1.find("s.weight")->tensor;
  auto b1 = reg1.find("s.bias")->tensor;
  auto ref = conv2d(x, w1, b1, 1, 0);
  for (int64_t i = 0; i < ref.size(); ++i) CHECK(one[0].data()[i] == ref.data()[i]);
}

TEST_CASE("cb_fuse: identity cases and constant arithmetic") {
  Rng rng(9);
  auto target = random_tensor<double>(rng, {1, 4, 8, 8});
  auto same = cb_fuse<double>({}, target);
  for (int64_t i = 0; i < target.size(); ++i) CHECK(same.data()[i] == target.data()[i]);

  auto zeros = Tensor<double>::zeros({1, 4, 4, 4});
  auto with_zero = cb_fuse<double>({zeros}, target);
  for (int64_t i = 0; i < target.size(); ++i) CHECK(with_zero.data()[i] == target.data()[i]);

  auto c1 = Tensor<double>::full({1, 4, 4, 4}, 1.5);
  auto c2 = Tensor<double>::full({1, 4, 16, 16}, -0.25);
  auto c3 = Tensor<double>::full({1, 4, 8, 8}, 2.0);
  auto fused = cb_fuse<double>({c1, c2}, c3);
  CHECK(fused.shape() == Shape{1, 4, 8, 8});
  for (double v : fused.data()) CHECK(v == doctest::Approx(3.25).epsilon(1e-12));

  auto bad = Tensor<double>::zeros({1, 3, 8, 8});
  CHECK_THROWS_AS(cb_fuse<double>({bad}, target), input_error);
}

TEST_CASE("rev_couple: zero-initialized subnets act as identity") {
  Rng rng(10);
  ParamRegistry<double> reg;
  RevCouple<double> rev(reg, "r", rng, 8);
  zero_all(reg, ".conv.weight");
  auto x = random_tensor<double>(rng, {2, 8, 6, 6});
  auto y = rev.forward(x, RunCtx::train());
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
  auto back = rev.inverse(y, RunCtx::train());
  for (int64_t i = 0; i < x.size(); ++i) CHECK(back.data()[i] == x.data()[i]);

  CHECK_THROWS_AS(RevCouple<double>(reg, "odd", rng, 7), input_error);
}

TEST_CASE("rev_couple: inverse(forward(x)) recovers x below 1e-9") {
  Rng rng(11);
  for (int trial = 0; trial < 10; ++trial) {
    Rng r = rng.fork(uint64_t(trial));
    int channels = 2 * r.uniform_int(1, 6);
    int h = r.uniform_int(2, 7), w = r.uniform_int(2, 7);
    if (h * w < 2) continue;
    ParamRegistry<double> reg;
    RevCouple<double> rev(reg, "r", rng, channels);
    auto x = random_tensor<double>(r, {2, channels, h, w});
    auto ctx = RunCtx{true, false};
    auto y = rev.forward(x, ctx);
    auto back = rev.inverse(y, ctx);
    double worst = 0.0;
    for (int64_t i = 0; i < x.size(); ++i)
      worst = std::max(worst, std::abs(back.data()[i] - x.data()[i]));
    CHECK(worst < 1e-9);
  }
}

namespace {

// Ridge-regression readout: fit T ~ X*W and return in-sample MSE.
double linear_readout_mse(const std::vector<std::vector<double>>& feats,
                          const std::vector<std::vector<double>>& targets) {
  const size_t m = feats.size(), d = feats[0].size() + 1, t = targets[0].size();
  std::vector<std::vector<double>> a(d, std::vector<double>(d, 0.0));
  std::vector<std::vector<double>> b(d, std::vector<double>(t, 0.0));
  auto feat = [&](size_t row, size_t col) {
    return col < d - 1 ? feats[row][col] : 1.0;  // bias column
  };
  for (size_t r = 0; r < m; ++r)
    for (size_t i = 0; i < d; ++i) {
      for (size_t j = 0; j < d; ++j) a[i][j] += feat(r, i) * feat(r, j);
      for (size_t j = 0; j < t; ++j) b[i][j] += feat(r, i) * targets[r][j];
    }
  for (size_t i = 0; i < d; ++i) a[i][i] += 1e-8;
  // gaussian elimination with partial pivoting
  for (size_t col = 0; col < d; ++col) {
    size_t piv = col;
    for (size_t row = col + 1; row < d; ++row)
      if (std::abs(a[row][col]) > std::abs(a[piv][col])) piv = row;
    std::swap(a[col], a[piv]);
    std::swap(b[col], b[piv]);
    for (size_t row = 0; row < d; ++row) {
      if (row == col || a[row][col] == 0.0) continue;
      double f = a[row][col] / a[col][col];
      for (size_t j = col; j < d; ++j) a[row][j] -= f * a[col][j];
      for (size_t j = 0; j < t; ++j) b[row][j] -= f * b[col][j];
    }
  }
  std::vector<std::vector<double>> w(d, std::vector<double>(t));
  for (size_t i = 0; i < d; ++i)
    for (size_t j = 0; j < t; ++j) w[i][j] = b[i][j] / a[i][i];
  double mse = 0.0;
  for (size_t r = 0; r < m; ++r)
    for (size_t j = 0; j < t; ++j) {
      double pred = 0.0;
      for (size_t i = 0; i < d; ++i) pred += feat(r, i) * w[i][j];
      double e = pred - targets[r][j];
      mse += e * e;
    }
  return mse / double(m * t);
}

}  // namespace

TEST_CASE("rev_couple preserves information a strided conv discards") {
  Rng rng(12);
  const int C = 8, H = 4, W = 4, M = 256;
  ParamRegistry<double> reg;
  RevCouple<double> rev(reg, "r", rng, C);
  // temper the coupling magnitude so the readout stays in the smooth regime
  for (auto& p : reg.entries())
    if (p.name.find(".bn.gamma") != std::string::npos)
      for (double& v : p.tensor.data()) v = 0.1;
  auto conv_w = testutil::random_tensor<double>(rng, {C, C, 3, 3}, -0.3, 0.3);

  std::vector<std::vector<double>> xs, ys_rev, ys_conv;
  NoGradGuard ng;
  for (int s = 0; s < M; ++s) {
    auto x = testutil::random_tensor<double>(rng, {1, C, H, W});
    auto yr = rev.forward(x, RunCtx{true, false});
    auto yc = conv2d(x, conv_w, 2, 1);  // downsampled: 3/4 of the dims gone
    xs.emplace_back(x.data().begin(), x.data().end());
    ys_rev.emplace_back(yr.data().begin(), yr.data().end());
    ys_conv.emplace_back(yc.data().begin(), yc.data().end());
  }
  const double mse_rev = linear_readout_mse(ys_rev, xs);
  const double mse_conv = linear_readout_mse(ys_conv, xs);
  INFO("rev ", mse_rev, " conv ", mse_conv);
  CHECK(mse_rev < 0.05 * mse_conv);
}

TEST_CASE("detect_head: output layout and zero-weight squash") {
  Rng rng(13);
  ParamRegistry<double> reg;
  DetectHead<double> head(reg, "head", rng, {16, 16}, 2, 26);
  auto f0 = random_tensor<double>(rng, {1, 16, 7, 7});
  auto f1 = random_tensor<double>(rng, {1, 16, 4, 4});
  auto outs = head.forward({f0, f1}, RunCtx::infer());
  REQUIRE(outs.size() == 2);
  CHECK(outs[0].shape() == Shape{1, 7, 7, 2 * 5 + 26});
  CHECK(outs[1].shape() == Shape{1, 4, 4, 36});

  ParamRegistry<double> reg1;
  DetectHead<double> tiny(reg1, "h", rng, {8}, 1, 1);
  auto g = random_tensor<double>(rng, {1, 8, 3, 3});
  auto one = tiny.forward({g}, RunCtx::infer());
  CHECK(one[0].shape() == Shape{1, 3, 3, 6});

  // zero weights and bias: x,y,w,h all sigmoid(0) = 0.5
  for (auto& p : reg1.entries())
    for (double& v : p.tensor.data()) v = 0.0;
  auto squashed = tiny.forward({g}, RunCtx::infer());
  const auto d = squashed[0].data();
  for (int cell = 0; cell < 9; ++cell)
    for (int c = 0; c < 4; ++c) CHECK(d[cell * 6 + c] == 0.5);

  CHECK_THROWS_AS(head.forward({f0}, RunCtx::infer()), input_error);
}

TEST_CASE("expected_out_shape matches built blocks over a random spec grid") {
  Rng rng(14);
  for (int trial = 0; trial < 40; ++trial) {
    Rng r = rng.fork(uint64_t(trial));
    BlockSpec spec;
    spec.kind = BlockKind(r.uniform_int(0, 12));
    const int N = r.uniform_int(1, 2);
    int H = 2 * r.uniform_int(2, 6), W = 2 * r.uniform_int(2, 6);
    spec.in_channels = 2 * r.uniform_int(1, 4);
    spec.out_channels = 2 * r.uniform_int(1, 4);
    spec.mid_channels = 2 * r.uniform_int(1, 4);
    spec.n = r.uniform_int(0, 2);
    spec.k = 1 + 2 * r.uniform_int(0, 1);
    spec.stride = r.uniform_int(1, 2);
    spec.factor = r.uniform_int(1, 3);
    Shape in{N, spec.in_channels, H, W};
    Rng init(99);
    ParamRegistry<double> reg;
    auto x = random_tensor<double>(r, in);
    Tensor<double> y;
    auto ctx = RunCtx{true, false};
    switch (spec.kind) {
      case BlockKind::ConvBlock:
        y = ConvBlock<double>(reg, "b", init, spec.in_channels, spec.out_channels, spec.k,
                              spec.stride)
                .forward(x, ctx);
        break;
      case BlockKind::RepNBottleneck:
        y = RepNBottleneck<double>(reg, "b", init, spec.in_channels, spec.out_channels)
                .forward(x, ctx);
        break;
      case BlockKind::RepNCSP:
        y = RepNCSP<double>(reg, "b", init, spec.in_channels, spec.out_channels, spec.n)
                .forward(x, ctx);
        break;
      case BlockKind::RepNCSPPELAN:
        y = RepNCSPPELAN<double>(reg, "b", init, spec.in_channels, spec.out_channels,
                                 spec.mid_channels, spec.n)
                .forward(x, ctx);
        break;
      case BlockKind::ADown:
        y = ADown<double>(reg, "b", init, spec.in_channels, spec.out_channels).forward(x, ctx);
        break;
      case BlockKind::SPPELAN:
        if (H < 3 || W < 3) continue;
        y = SPPELAN<double>(reg, "b", init, spec.in_channels, spec.out_channels,
                            spec.mid_channels)
                .forward(x, ctx);
        break;
      case BlockKind::Silence:
        y = silence(x);
        break;
      case BlockKind::Upsample:
        y = upsample_nearest(x, spec.factor);
        break;
      case BlockKind::RevCouple:
        y = RevCouple<double>(reg, "b", init, spec.in_channels).forward(x, ctx);
        break;
      default:
        continue;  // multi-io blocks have their own shape tests
    }
    CHECK(y.shape() == expected_out_shape(spec, in));
  }
}

TEST_CASE("every block passes finite-difference checks end to end") {
  Rng rng(15);
  for (uint64_t seed = 0; seed < 2; ++seed) {
    Rng r = rng.fork(seed);
    auto ctx = RunCtx{true, false};

    {
      ParamRegistry<double> reg;
      ConvBlock<double> b(reg, "b", r, 3, 4, 3, 1);
      auto x = random_tensor<double>(r, {2, 3, 4, 4});
      std::vector<std::pair<std::string, Tensor<double>>> inputs{{"x", x}};
      for (auto& p : reg.entries())
        if (p.trainable) inputs.emplace_back(p.name, p.tensor);
      auto report = grad_check([&]() { return sum(b.forward(x, ctx)); }, inputs);
      INFO("conv_block worst ", report.max_error);
      CHECK(report.passed());
    }
    {
      ParamRegistry<double> reg;
      RepNCSPPELAN<double> b(reg, "b", r, 4, 4, 4, 1);
      auto x = random_tensor<double>(r, {2, 4, 4, 4});
      std::vector<std::pair<std::string, Tensor<double>>> inputs{{"x", x}};
      for (auto& p : reg.entries())
        if (p.trainable) inputs.emplace_back(p.name, p.tensor);
      auto report =
          grad_check([&]() { return sum(mul(b.forward(x, ctx), b.forward(x, ctx))); }, inputs);
      INFO("repncsppelan worst ", report.max_error);
      CHECK(report.passed());
    }
    {
      ParamRegistry<double> reg;
      ADown<double> b(reg, "b", r, 4, 4);
      auto x = testutil::random_tensor_gapped<double>(r, {1, 4, 4, 4});
      std::vector<std::pair<std::string, Tensor<double>>> inputs{{"x", x}};
      for (auto& p : reg.entries())
        if (p.trainable) inputs.emplace_back(p.name, p.tensor);
      auto report = grad_check([&]() { return sum(silu(b.forward(x, ctx))); }, inputs);
      INFO("adown worst ", report.max_error);
      CHECK(report.passed());
    }
    {
      ParamRegistry<double> reg;
      RevCouple<double> b(reg, "b", r, 4);
      auto x = random_tensor<double>(r, {2, 4, 3, 3});
      std::vector<std::pair<std::string, Tensor<double>>> inputs{{"x", x}};
      for (auto& p : reg.entries())
        if (p.trainable) inputs.emplace_back(p.name, p.tensor);
      auto report = grad_check([&]() { return sum(mul(b.forward(x, ctx), b.forward(x, ctx))); },
                               inputs);
      INFO("rev_couple worst ", report.max_error);
      CHECK(report.passed());
    }
    {
      ParamRegistry<double> reg;
      DetectHead<double> b(reg, "b", r, {3}, 2, 3);
      auto x = random_tensor<double>(r, {1, 3, 3, 3});
      std::vector<std::pair<std::string, Tensor<double>>> inputs{{"x", x}};
      for (auto& p : reg.entries())
        if (p.trainable) inputs.emplace_back(p.name, p.tensor);
      auto report = grad_check(
          [&]() {
            auto outs = b.forward({x}, ctx);
            return sum(mul(outs[0], outs[0]));
          },
          inputs);
      INFO("detect_head worst ", report.max_error);
      CHECK(report.passed());
    }
  }
}
