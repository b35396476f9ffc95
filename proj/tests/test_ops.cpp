#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "gridsight/grad_check.hpp"
#include "gridsight/ops.hpp"
#include "test_util.hpp"

using namespace gridsight;
using testutil::random_tensor;
using testutil::random_tensor_gapped;

namespace {

// Six-nested-loop convolution reference.
std::vector<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& w,
                                const std::vector<double>* bias, int stride, int pad) {
  const int N = x.dim(0), Cin = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Cout = w.dim(0), kh = w.dim(2), kw = w.dim(3);
  const int OH = (H + 2 * pad - kh) / stride + 1;
  const int OW = (W + 2 * pad - kw) / stride + 1;
  std::vector<double> out(size_t(N) * Cout * OH * OW, 0.0);
  for (int n = 0; n < N; ++n)
    for (int co = 0; co < Cout; ++co)
      for (int oi = 0; oi < OH; ++oi)
        for (int oj = 0; oj < OW; ++oj) {
          double acc = bias ? (*bias)[size_t(co)] : 0.0;
          for (int ci = 0; ci < Cin; ++ci)
            for (int ki = 0; ki < kh; ++ki)
              for (int kj = 0; kj < kw; ++kj) {
                int si = oi * stride - pad + ki, sj = oj * stride - pad + kj;
                if (si < 0 || si >= H || sj < 0 || sj >= W) continue;
                acc += x.data()[((int64_t(n) * Cin + ci) * H + si) * W + sj] *
                       w.data()[((int64_t(co) * Cin + ci) * kh + ki) * kw + kj];
              }
          out[((int64_t(n) * Cout + co) * OH + oi) * OW + oj] = acc;
        }
  return out;
}

// Exhaustive window-max reference.
std::vector<double> maxpool_oracle(const Tensor<double>& x, int k, int stride, int pad) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int OH = (H + 2 * pad - k) / stride + 1;
  const int OW = (W + 2 * pad - k) / stride + 1;
  std::vector<double> out(size_t(N) * C * OH * OW);
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int oi = 0; oi < OH; ++oi)
        for (int oj = 0; oj < OW; ++oj) {
          double best = -std::numeric_limits<double>::infinity();
          for (int ki = 0; ki < k; ++ki)
            for (int kj = 0; kj < k; ++kj) {
              int si = oi * stride - pad + ki, sj = oj * stride - pad + kj;
              if (si < 0 || si >= H || sj < 0 || sj >= W) continue;
              best = std::max(best, x.data()[((int64_t(n) * C + c) * H + si) * W + sj]);
            }
          out[((int64_t(n) * C + c) * OH + oi) * OW + oj] = best;
        }
  return out;
}

Tensor<double> avgpool2x2(const Tensor<double>& x) {
  const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  auto out = Tensor<double>::zeros({N, C, H / 2, W / 2});
  for (int n = 0; n < N; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < H / 2; ++i)
        for (int j = 0; j < W / 2; ++j) {
          double acc = 0.0;
          for (int di = 0; di < 2; ++di)
            for (int dj = 0; dj < 2; ++dj)
              acc += x.data()[((int64_t(n) * C + c) * H + 2 * i + di) * W + 2 * j + dj];
          out.data()[((int64_t(n) * C + c) * (H / 2) + i) * (W / 2) + j] = acc / 4.0;
        }
  return out;
}

}  // namespace

TEST_CASE("conv2d: all-ones 3x3 with pad counts window overlap") {
  auto x = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto w = Tensor<double>::full({1, 1, 3, 3}, 1.0);
  auto y = conv2d(x, w, 1, 1);
  CHECK(y.shape() == Shape{1, 1, 3, 3});
  CHECK(y.data()[4] == 9.0);  // center
  CHECK(y.data()[0] == 4.0);  // corners
  CHECK(y.data()[2] == 4.0);
  CHECK(y.data()[6] == 4.0);
  CHECK(y.data()[8] == 4.0);
  CHECK(y.data()[1] == 6.0);  // edges
}

TEST_CASE("conv2d: unit 1x1 kernel is identity") {
  Rng rng(7);
  auto x = random_tensor<double>(rng, {2, 1, 5, 4});
  auto w = Tensor<double>::full({1, 1, 1, 1}, 1.0);
  auto y = conv2d(x, w, 1, 0);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(y.data()[i] == x.data()[i]);
}

TEST_CASE("conv2d matches the six-nested-loop oracle") {
  Rng rng(8);
  auto x = random_tensor<double>(rng, {1, 2, 4, 4});
  auto w = random_tensor<double>(rng, {3, 2, 3, 3});
  auto y = conv2d(x, w, 1, 1);
  auto ref = conv_oracle(x, w, nullptr, 1, 1);
  REQUIRE(size_t(y.size()) == ref.size());
  for (size_t i = 0; i < ref.size(); ++i)
    CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
}

TEST_CASE("conv2d oracle sweep over strides, pads, bias") {
  Rng rng(9);
  for (int seed = 0; seed < 5; ++seed) {
    Rng r = rng.fork(uint64_t(seed));
    int stride = r.uniform_int(1, 3), pad = r.uniform_int(0, 2);
    int k = 1 + 2 * r.uniform_int(0, 1);
    int H = r.uniform_int(std::max(1, k - 2 * pad), 7), W = r.uniform_int(std::max(1, k - 2 * pad), 7);
    auto x = random_tensor<double>(r, {2, 3, H, W});
    auto w = random_tensor<double>(r, {2, 3, k, k});
    auto b = random_tensor<double>(r, {2});
    auto y = conv2d(x, w, b, stride, pad);
    std::vector<double> bias(b.data().begin(), b.data().end());
    auto ref = conv_oracle(x, w, &bias, stride, pad);
    const int OH = (H + 2 * pad - k) / stride + 1, OW = (W + 2 * pad - k) / stride + 1;
    CHECK(y.shape() == Shape{2, 2, OH, OW});
    for (size_t i = 0; i < ref.size(); ++i)
      CHECK(y.data()[i] == doctest::Approx(ref[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d rejects mismatched shapes naming the dimension") {
  auto x = Tensor<double>::zeros({1, 2, 4, 4});
  auto w = Tensor<double>::zeros({3, 5, 3, 3});
  CHECK_THROWS_WITH_AS(conv2d(x, w, 1, 1),
                       doctest::Contains("input channels 2 != weight in-channels 5"),
                       input_error);
  auto w2 = Tensor<double>::zeros({3, 2, 7, 7});
  CHECK_THROWS_WITH_AS(conv2d(x, w2, 1, 1), doctest::Contains("padded height"), input_error);
}

TEST_CASE("conv2d gradients match finite differences") {
  Rng rng(12);
  for (int seed = 0; seed < 5; ++seed) {
    Rng r = rng.fork(uint64_t(seed));
    int stride = r.uniform_int(1, 2), pad = r.uniform_int(0, 1);
    auto x = random_tensor<double>(r, {2, 2, 4, 4});
    auto w = random_tensor<double>(r, {3, 2, 3, 3});
    auto b = random_tensor<double>(r, {3});
    auto builder = [&]() { return sum(silu(conv2d(x, w, b, stride, pad))); };
    auto report = grad_check(builder, {{"x", x}, {"w", w}, {"b", b}});
    INFO("seed ", seed, " worst ", report.max_error);
    CHECK(report.passed());
  }
}

TEST_CASE("batchnorm2d: already-normalized input is a fixed point") {
  // two values with mean 0 and variance 1 per channel
  auto x = Tensor<double>::from({2, 1, 1, 1}, {1.0, -1.0});
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::zeros({1});
  auto rm = Tensor<double>::zeros({1});
  auto rv = Tensor<double>::full({1}, 1.0);
  auto y = batchnorm2d(x, gamma, beta, rm, rv, true, true, 1e-5, 0.03);
  CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-5));
  CHECK(y.data()[1] == doctest::Approx(-1.0).epsilon(1e-5));
}

TEST_CASE("batchnorm2d: constant input in infer mode returns beta") {
  auto x = Tensor<double>::full({1, 2, 3, 3}, 5.0);
  auto gamma = Tensor<double>::from({2}, {2.0, -1.0});
  auto beta = Tensor<double>::from({2}, {0.25, 7.0});
  auto rm = Tensor<double>::full({2}, 5.0);  // running mean = const
  auto rv = Tensor<double>::zeros({2});      // running var = 0, eps guards
  auto y = batchnorm2d(x, gamma, beta, rm, rv, false, false, 1e-5, 0.03);
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(0.25).epsilon(1e-9));
  for (int i = 9; i < 18; ++i) CHECK(y.data()[i] == doctest::Approx(7.0).epsilon(1e-9));
}

TEST_CASE("batchnorm2d matches the per-channel scalar formula") {
  Rng rng(14);
  auto x = random_tensor<double>(rng, {2, 3, 4, 4});
  auto gamma = random_tensor<double>(rng, {3}, 0.5, 1.5);
  auto beta = random_tensor<double>(rng, {3});
  auto rm = Tensor<double>::zeros({3});
  auto rv = Tensor<double>::full({3}, 1.0);
  const double eps = 1e-5;
  auto y = batchnorm2d(x, gamma, beta, rm, rv, true, true, eps, 0.03);

  const int C = 3, plane = 16, N = 2;
  for (int c = 0; c < C; ++c) {
    double mu = 0.0, var = 0.0;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < plane; ++i) mu += x.data()[(n * C + c) * plane + i];
    mu /= N * plane;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < plane; ++i) {
        double d = x.data()[(n * C + c) * plane + i] - mu;
        var += d * d;
      }
    var /= N * plane;
    for (int n = 0; n < N; ++n)
      for (int i = 0; i < plane; ++i) {
        double want = (x.data()[(n * C + c) * plane + i] - mu) / std::sqrt(var + eps) *
                          gamma.data()[c] +
                      beta.data()[c];
        CHECK(y.data()[(n * C + c) * plane + i] == doctest::Approx(want).epsilon(1e-12));
      }
    // running stats moved toward the batch stats
    CHECK(rm.data()[c] == doctest::Approx(0.03 * mu).epsilon(1e-12));
    CHECK(rv.data()[c] == doctest::Approx(0.97 + 0.03 * var).epsilon(1e-12));
  }
}

TEST_CASE("batchnorm2d rejects tiny train batches and non-finite variance") {
  auto gamma = Tensor<double>::full({1}, 1.0);
  auto beta = Tensor<double>::zeros({1});
  auto rm = Tensor<double>::zeros({1});
  auto rv = Tensor<double>::full({1}, 1.0);
  auto tiny = Tensor<double>::full({1, 1, 1, 1}, 3.0);
  CHECK_THROWS_AS(batchnorm2d(tiny, gamma, beta, rm, rv, true, true, 1e-5, 0.03), input_error);
  auto inf = Tensor<double>::from({1, 1, 1, 2},
                                  {std::numeric_limits<double>::infinity(), 0.0});
  CHECK_THROWS_AS(batchnorm2d(inf, gamma, beta, rm, rv, true, true, 1e-5, 0.03),
                  numeric_error);
}

TEST_CASE("batchnorm2d gradients match finite differences (train and infer)") {
  Rng rng(15);
  for (int seed = 0; seed < 5; ++seed) {
    Rng r = rng.fork(uint64_t(seed));
    auto x = random_tensor<double>(r, {2, 2, 3, 3});
    auto gamma = random_tensor<double>(r, {2}, 0.5, 1.5);
    auto beta = random_tensor<double>(r, {2});
    auto rm = random_tensor<double>(r, {2});
    auto rv = random_tensor<double>(r, {2}, 0.5, 1.5);
    for (bool training : {true, false}) {
      auto builder = [&, training]() {
        return sum(silu(batchnorm2d(x, gamma, beta, rm, rv, training, false, 1e-5, 0.03)));
      };
      auto report = grad_check(builder, {{"x", x}, {"gamma", gamma}, {"beta", beta}});
      INFO("training=", training, " worst=", report.max_error);
      CHECK(report.passed());
    }
  }
}

TEST_CASE("maxpool2d spec values") {
  auto x = Tensor<double>::from({1, 1, 2, 2}, {1, 2, 3, 4});
  auto y = maxpool2d(x, 2, 2, 0);
  CHECK(y.shape() == Shape{1, 1, 1, 1});
  CHECK(y.item() == 4.0);

  Rng rng(17);
  auto z = random_tensor<double>(rng, {1, 2, 3, 3});
  auto idy = maxpool2d(z, 1, 1, 0);
  for (int64_t i = 0; i < z.size(); ++i) CHECK(idy.data()[i] == z.data()[i]);
}

TEST_CASE("maxpool2d matches window enumeration oracle") {
  Rng rng(18);
  auto x = random_tensor<double>(rng, {1, 1, 6, 6});
  auto y = maxpool2d(x, 3, 1, 1);
  auto ref = maxpool_oracle(x, 3, 1, 1);
  REQUIRE(size_t(y.size()) == ref.size());
  for (size_t i = 0; i < ref.size(); ++i) CHECK(y.data()[i] == ref[i]);
}

TEST_CASE("maxpool2d rejects kernels larger than the padded input") {
  auto x = Tensor<double>::zeros({1, 1, 3, 3});
  CHECK_THROWS_AS(maxpool2d(x, 5, 1, 0), input_error);
}

TEST_CASE("maxpool2d gradients match finite differences on gapped inputs") {
  Rng rng(19);
  for (int seed = 0; seed < 5; ++seed) {
    Rng r = rng.fork(uint64_t(seed));
    auto x = random_tensor_gapped<double>(r, {1, 2, 6, 6});
    auto builder = [&]() { return sum(silu(maxpool2d(x, 3, 1, 1))); };
    auto report = grad_check(builder, {{"x", x}});
    CHECK(report.passed());
  }
}

TEST_CASE("upsample_nearest spec values and avg-pool roundtrip") {
  auto one = Tensor<double>::full({1, 1, 1, 1}, 7.0);
  auto rep = upsample_nearest(one, 3);
  CHECK(rep.shape() == Shape{1, 1, 3, 3});
  for (double v : rep.data()) CHECK(v == 7.0);

  Rng rng(20);
  auto x = random_tensor<double>(rng, {2, 3, 4, 4});
  auto idy = upsample_nearest(x, 1);
  for (int64_t i = 0; i < x.size(); ++i) CHECK(idy.data()[i] == x.data()[i]);

  auto up = upsample_nearest(x, 2);
  auto back = avgpool2x2(up);
  for (int64_t i = 0; i < x.size(); ++i)
    CHECK(back.data()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("upsample/resize/permute/concat/slice gradients") {
  Rng rng(21);
  for (int seed = 0; seed < 5; ++seed) {
    Rng r = rng.fork(uint64_t(seed));
    auto x = random_tensor<double>(r, {2, 4, 4, 4});
    auto y = random_tensor<double>(r, {2, 2, 4, 4});
    auto builder = [&]() {
      auto up = upsample_nearest(slice_channels(x, 0, 2), 2);
      auto down = resize_nearest(up, 4, 4);
      auto cat = concat_channels<double>({down, y, slice_channels(x, 2, 2)});
      auto nhwc = nchw_to_nhwc(cat);
      return sum(mul(slice_last(nhwc, 1, 3), slice_last(nhwc, 2, 3)));
    };
    auto report = grad_check(builder, {{"x", x}, {"y", y}});
    CHECK(report.passed());
  }
}

TEST_CASE("concat_channels: identity, ordering, split roundtrip") {
  Rng rng(22);
  auto a = random_tensor<double>(rng, {1, 1, 2, 2});
  auto b = random_tensor<double>(rng, {1, 1, 2, 2});
  auto single = concat_channels<double>({a});
  for (int64_t i = 0; i < a.size(); ++i) CHECK(single.data()[i] == a.data()[i]);

  auto cat = concat_channels<double>({a, b});
  CHECK(cat.shape() == Shape{1, 2, 2, 2});
  for (int i = 0; i < 4; ++i) {
    CHECK(cat.data()[i] == a.data()[i]);
    CHECK(cat.data()[4 + i] == b.data()[i]);
  }
  auto back_a = slice_channels(cat, 0, 1);
  auto back_b = slice_channels(cat, 1, 1);
  for (int i = 0; i < 4; ++i) {
    CHECK(back_a.data()[i] == a.data()[i]);
    CHECK(back_b.data()[i] == b.data()[i]);
  }

  CHECK_THROWS_AS(concat_channels<double>({}), input_error);
  auto c = Tensor<double>::zeros({1, 1, 3, 2});
  CHECK_THROWS_AS(concat_channels<double>({a, c}), input_error);
}

TEST_CASE("output shape formulas hold across a swept grid") {
  Rng rng(23);
  for (int k = 1; k <= 5; k += 2)
    for (int stride = 1; stride <= 3; ++stride)
      for (int pad = 0; pad <= 2; ++pad) {
        int H = 9, W = 8;
        if (H + 2 * pad < k || W + 2 * pad < k) continue;
        auto x = random_tensor<double>(rng, {1, 2, H, W});
        auto w = random_tensor<double>(rng, {3, 2, k, k});
        auto y = conv2d(x, w, stride, pad);
        CHECK(y.dim(2) == (H + 2 * pad - k) / stride + 1);
        CHECK(y.dim(3) == (W + 2 * pad - k) / stride + 1);
        auto p = maxpool2d(x, k, stride, pad);
        CHECK(p.dim(2) == (H + 2 * pad - k) / stride + 1);
        CHECK(p.dim(3) == (W + 2 * pad - k) / stride + 1);
      }
}

TEST_CASE("softmax cross-entropy forward and gradient") {
  // two rows, known distributions
  auto logits = Tensor<double>::from({2, 3}, {1.0, 2.0, 3.0, 0.0, 0.0, 0.0});
  auto target = Tensor<double>::from({2, 3}, {0.0, 0.0, 1.0, 1.0, 0.0, 0.0});
  auto xent = softmax_xent_lastdim(logits, target);
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  CHECK(xent.data()[0] == doctest::Approx(-std::log(std::exp(3.0) / z)).epsilon(1e-12));
  CHECK(xent.data()[1] == doctest::Approx(std::log(3.0)).epsilon(1e-12));

  Rng rng(24);
  for (int seed = 0; seed < 5; ++seed) {
    Rng r = rng.fork(uint64_t(seed));
    auto x = random_tensor<double>(r, {4, 5}, -2.0, 2.0);
    auto t = Tensor<double>::zeros({4, 5});
    for (int row = 0; row < 4; ++row) t.data()[row * 5 + r.uniform_int(0, 4)] = 1.0;
    auto report = grad_check([&]() { return sum(softmax_xent_lastdim(x, t)); }, {{"x", x}});
    CHECK(report.passed());
  }
}

TEST_CASE("backward reports NaN gradients with the op name") {
  // sqrt at zero has an infinite local gradient; a zero upstream grad turns
  // it into 0*inf = NaN on the mul node's accumulated grad.
  auto x = Tensor<double>::from({1}, {0.0});
  x.set_requires_grad(true);
  auto b = mul(x, x);
  auto a = sqrt_elem(b);
  auto loss = sum(mul(a, Tensor<double>::zeros({1})));
  CHECK(loss.item() == 0.0);
  CHECK_THROWS_WITH_AS(backward(loss), doctest::Contains("mul"), numeric_error);
}
