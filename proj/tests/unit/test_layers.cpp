#include <cmath>
#include <limits>
#include <numeric>

#include "doctest.h"
#include "dexpr/gradcheck.hpp"
#include "dexpr/layers.hpp"
#include "helpers.hpp"

using namespace dexpr;

namespace {

// Direct summation over the zero-padded input.
Tensor64 naive_conv(const Tensor64& x, const ConvSpec& s, const Tensor64& w, const Tensor64& b) {
  const std::size_t H = x.shape()[1], W = x.shape()[2];
  const std::size_t oh = (H + 2 * s.padding - s.kernel_h) / s.stride + 1;
  const std::size_t ow = (W + 2 * s.padding - s.kernel_w) / s.stride + 1;
  Tensor64 out(Shape{s.out_channels, oh, ow});
  for (std::size_t o = 0; o < s.out_channels; ++o) {
    for (std::size_t u = 0; u < oh; ++u) {
      for (std::size_t v = 0; v < ow; ++v) {
        double acc = b[o];
        for (std::size_t c = 0; c < s.in_channels; ++c) {
          for (std::size_t i = 0; i < s.kernel_h; ++i) {
            for (std::size_t j = 0; j < s.kernel_w; ++j) {
              const long r = static_cast<long>(u * s.stride + i) - static_cast<long>(s.padding);
              const long q = static_cast<long>(v * s.stride + j) - static_cast<long>(s.padding);
              if (r < 0 || q < 0 || r >= static_cast<long>(H) || q >= static_cast<long>(W)) continue;
              acc += w[((o * s.in_channels + c) * s.kernel_h + i) * s.kernel_w + j] *
                     x.at(c, static_cast<std::size_t>(r), static_cast<std::size_t>(q));
            }
          }
        }
        out.at(o, u, v) = acc;
      }
    }
  }
  return out;
}

Tensor64 naive_lrn(const Tensor64& x, const LrnSpec& s) {
  Tensor64 out(x.shape());
  const long C = static_cast<long>(x.shape()[0]);
  const long half = static_cast<long>(s.local_size / 2);
  for (long c = 0; c < C; ++c) {
    for (std::size_t h = 0; h < x.shape()[1]; ++h) {
      for (std::size_t w = 0; w < x.shape()[2]; ++w) {
        double sq = 0;
        for (long k = std::max(0L, c - half); k <= std::min(C - 1, c + half); ++k) {
          const double v = x.at(static_cast<std::size_t>(k), h, w);
          sq += v * v;
        }
        const auto cc = static_cast<std::size_t>(c);
        out.at(cc, h, w) = x.at(cc, h, w) / std::pow(s.k + s.alpha / static_cast<double>(s.local_size) * sq, s.beta);
      }
    }
  }
  return out;
}

}  // namespace

TEST_SUITE("layers") {
  TEST_CASE("conv output shape of the first layer") {
    const ConvSpec spec{1, 64, 7, 7, 2, 3};
    CHECK(spec.output_shape(Shape{1, 224, 224}) == Shape{64, 112, 112});
    const Tensor out = conv_forward(Tensor(Shape{1, 224, 224}), spec, Tensor(spec.weight_shape()),
                                    Tensor(spec.bias_shape()));
    CHECK(out.shape() == Shape{64, 112, 112});
  }

  TEST_CASE("1x1 unit kernel is the identity") {
    Rng rng(1);
    const Tensor x = testing::random_tensor<float>(rng, Shape{1, 5, 7});
    const ConvSpec spec{1, 1, 1, 1, 1, 0};
    const Tensor out = conv_forward(x, spec, Tensor(spec.weight_shape(), {1.0f}), Tensor(spec.bias_shape()));
    CHECK(out.bitwise_equal(x));
  }

  TEST_CASE("2x2 all-ones kernel on a 3x3 ramp") {
    const Tensor x(Shape{1, 3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
    const ConvSpec spec{1, 1, 2, 2, 1, 0};
    const Tensor out = conv_forward(x, spec, Tensor::filled(spec.weight_shape(), 1.0f), Tensor(spec.bias_shape()));
    CHECK(out.shape() == Shape{1, 2, 2});
    CHECK(out.values() == std::vector<float>{12, 16, 24, 28});
  }

  TEST_CASE("conv matches a direct summation oracle") {
    Rng rng(7);
    const ConvSpec specs[] = {{3, 4, 3, 3, 1, 1}, {2, 5, 5, 3, 2, 2}, {1, 2, 7, 7, 2, 3}, {4, 3, 1, 1, 1, 0}};
    for (const ConvSpec& s : specs) {
      const Tensor64 x = testing::random_tensor<double>(rng, Shape{s.in_channels, 9, 11});
      const Tensor64 w = testing::random_tensor<double>(rng, s.weight_shape());
      const Tensor64 b = testing::random_tensor<double>(rng, s.bias_shape());
      const Tensor64 got = conv_forward(x, s, w, b);
      const Tensor64 want = naive_conv(x, s, w, b);
      REQUIRE(got.shape() == want.shape());
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
  }

  TEST_CASE("conv errors") {
    const ConvSpec spec{2, 1, 3, 3, 1, 0};
    CHECK_THROWS_AS(conv_forward(Tensor(Shape{3, 5, 5}), spec, Tensor(spec.weight_shape()), Tensor(spec.bias_shape())),
                    ShapeError);
    CHECK_THROWS_AS(conv_forward(Tensor(Shape{2, 2, 2}), spec, Tensor(spec.weight_shape()), Tensor(spec.bias_shape())),
                    ShapeError);
  }

  TEST_CASE("conv backward closed-form cases") {
    const ConvSpec spec{2, 3, 3, 3, 1, 0};
    const Tensor x(Shape{2, 5, 4});
    const Tensor w(spec.weight_shape());
    const Tensor ones = Tensor::filled(spec.output_shape(x.shape()), 1.0f);
    const auto g = conv_backward(x, spec, w, ones);
    CHECK(std::all_of(g.weights.data().begin(), g.weights.data().end(), [](float v) { return v == 0.0f; }));
    CHECK(g.bias.values() == std::vector<float>(3, 3.0f * 2.0f));

    Rng rng(2);
    const ConvSpec unit{1, 1, 1, 1, 1, 0};
    const Tensor gout = testing::random_tensor<float>(rng, Shape{1, 4, 4});
    const auto gi = conv_backward(Tensor(Shape{1, 4, 4}), unit, Tensor(unit.weight_shape(), {1.0f}), gout);
    CHECK(gi.input.bitwise_equal(gout));

    CHECK_THROWS_AS(conv_backward(x, spec, w, Tensor(Shape{3, 2, 2})), ShapeError);
  }

  TEST_CASE("maxpool forward") {
    const Tensor x(Shape{1, 2, 2}, {1, 3, 2, 4});
    const auto r = maxpool_forward(x, PoolSpec{2, 2, 0});
    CHECK(r.output.shape() == Shape{1, 1, 1});
    CHECK(r.output[0] == 4.0f);

    CHECK(PoolSpec{3, 2, 0}.output_shape(Shape{64, 112, 112}) == Shape{64, 56, 56});
    CHECK(PoolSpec{3, 2, 0}.output_shape(Shape{272, 56, 56}) == Shape{272, 28, 28});
    CHECK(PoolSpec{3, 1, 1}.output_shape(Shape{64, 56, 56}) == Shape{64, 56, 56});
    // Ceiling rounding keeps the partial last window.
    CHECK(PoolSpec{3, 2, 0}.output_shape(Shape{1, 6, 6}) == Shape{1, 3, 3});
    CHECK(PoolSpec{2, 2, 0}.output_shape(Shape{1, 5, 5}) == Shape{1, 3, 3});

    const Tensor c = Tensor::filled(Shape{2, 7, 5}, 0.25f);
    for (const PoolSpec& p : {PoolSpec{2, 2, 0}, PoolSpec{3, 2, 1}, PoolSpec{3, 1, 1}, PoolSpec{5, 3, 0}}) {
      const Tensor out = maxpool_forward(c, p).output;
      CHECK(std::all_of(out.data().begin(), out.data().end(), [](float v) { return v == 0.25f; }));
    }
  }

  TEST_CASE("maxpool padding never wins") {
    const Tensor x = Tensor::filled(Shape{1, 4, 4}, -3.0f);
    const Tensor out = maxpool_forward(x, PoolSpec{3, 1, 1}).output;
    CHECK(out.shape() == Shape{1, 4, 4});
    CHECK(std::all_of(out.data().begin(), out.data().end(), [](float v) { return v == -3.0f; }));
  }

  TEST_CASE("maxpool ties keep the first maximum") {
    const Tensor x(Shape{1, 2, 2}, {5, 5, 5, 5});
    const auto r = maxpool_forward(x, PoolSpec{2, 2, 0});
    CHECK(r.indices.argmax[0] == 0u);
  }

  TEST_CASE("maxpool degenerate output") {
    CHECK_THROWS_AS(PoolSpec({3, 2, 0}).output_shape(Shape{1, 1, 1}), ShapeError);
    CHECK_THROWS_AS(PoolSpec({2, 2, 2}).output_shape(Shape{1, 4, 4}), ShapeError);
  }

  TEST_CASE("maxpool backward") {
    const Tensor x(Shape{1, 2, 2}, {1, 3, 2, 4});
    const auto r = maxpool_forward(x, PoolSpec{2, 2, 0});
    const Tensor g = maxpool_backward(r.indices, Tensor(Shape{1, 1, 1}, {1.0f}));
    CHECK(g.values() == std::vector<float>{0, 0, 0, 1});

    Rng rng(9);
    const Tensor64 big = testing::random_tensor<double>(rng, Shape{3, 8, 8});
    const auto pooled = maxpool_forward(big, PoolSpec{2, 2, 0});
    const Tensor64 gout = testing::random_tensor<double>(rng, pooled.output.shape());
    const Tensor64 gin = maxpool_backward(pooled.indices, gout);
    const double in_sum = std::accumulate(gin.data().begin(), gin.data().end(), 0.0);
    const double out_sum = std::accumulate(gout.data().begin(), gout.data().end(), 0.0);
    CHECK(in_sum == doctest::Approx(out_sum).epsilon(1e-12));

    CHECK_THROWS_AS(maxpool_backward(pooled.indices, Tensor64(Shape{3, 3, 3})), ShapeError);
  }

  TEST_CASE("relu") {
    const Tensor x(Shape{3}, {-2, 0, 7});
    CHECK(relu_forward(x).values() == std::vector<float>{0, 0, 7});
    const Tensor neg = Tensor::filled(Shape{2, 3, 3}, -0.5f);
    const Tensor out = relu_forward(neg);
    const Tensor grad = relu_backward(neg, Tensor::filled(neg.shape(), 1.0f));
    CHECK(std::all_of(out.data().begin(), out.data().end(), [](float v) { return v == 0.0f; }));
    CHECK(std::all_of(grad.data().begin(), grad.data().end(), [](float v) { return v == 0.0f; }));
    CHECK(relu_backward(x, Tensor(Shape{3}, {1, 1, 1})).values() == std::vector<float>{0, 0, 1});
  }

  TEST_CASE("relu zeroes about half of uniform symmetric values") {
    Rng rng(17);
    const double a = std::sqrt(6.0 / (49.0 + 64.0 * 49.0));
    const Tensor w = testing::random_tensor<float>(rng, Shape{64, 1, 7, 7}, -a, a);
    const Tensor r = relu_forward(w.reshaped(Shape{w.size()}));
    const auto zeros = std::count(r.data().begin(), r.data().end(), 0.0f);
    const double fraction = static_cast<double>(zeros) / static_cast<double>(r.size());
    CHECK(fraction == doctest::Approx(0.5).epsilon(0.08));
  }

  TEST_CASE("lrn") {
    Rng rng(4);
    const Tensor64 x = testing::random_tensor<double>(rng, Shape{7, 3, 2}, -3, 3);
    LrnSpec no_alpha;
    no_alpha.alpha = 0.0;
    CHECK(lrn_forward(x, no_alpha).bitwise_equal(x));
    const Tensor64 zero(Shape{4, 2, 2});
    CHECK(lrn_forward(zero, LrnSpec{}).bitwise_equal(zero));

    for (const LrnSpec& s : {LrnSpec{}, LrnSpec{3, 0.5, 0.75, 2.0}, LrnSpec{1, 1.0, 0.5, 1.0}}) {
      const Tensor64 got = lrn_forward(x, s);
      const Tensor64 want = naive_lrn(x, s);
      for (std::size_t i = 0; i < got.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
    }
    CHECK_THROWS_AS(LrnSpec({4, 1e-4, 0.75, 1.0}).validate(), ConfigError);
  }

  TEST_CASE("fc") {
    const FcSpec id{3, 3};
    const Tensor x(Shape{3}, {1.5f, -2.0f, 4.0f});
    const Tensor eye(id.weight_shape(), {1, 0, 0, 0, 1, 0, 0, 0, 1});
    CHECK(fc_forward(x, id, eye, Tensor(id.bias_shape())).values() == x.values());

    const FcSpec two{2, 2};
    const Tensor out = fc_forward(Tensor(Shape{2}, {2, 3}), two, Tensor(two.weight_shape(), {1, 1, 1, -1}),
                                  Tensor(two.bias_shape()));
    CHECK(out.values() == std::vector<float>{5, -1});

    CHECK_THROWS_AS(fc_forward(Tensor(Shape{4}), two, Tensor(two.weight_shape()), Tensor(two.bias_shape())),
                    ShapeError);
  }

  TEST_CASE("fc matches a per-row dot product oracle exactly") {
    // Small integers keep every partial sum exact, so summation order cannot matter.
    Rng rng(21);
    const FcSpec spec{37, 6};
    Tensor x(Shape{37}), w(spec.weight_shape()), b(spec.bias_shape());
    for (float& v : x.data()) v = static_cast<float>(static_cast<int>(rng.below(17)) - 8);
    for (float& v : w.data()) v = static_cast<float>(static_cast<int>(rng.below(17)) - 8);
    for (float& v : b.data()) v = static_cast<float>(static_cast<int>(rng.below(17)) - 8);
    const Tensor got = fc_forward(x, spec, w, b);
    for (std::size_t r = 0; r < spec.out_dim; ++r) {
      float acc = b[r];
      for (std::size_t c = 0; c < spec.in_dim; ++c) acc += w[r * spec.in_dim + c] * x[c];
      CHECK(got[r] == acc);
    }
  }

  TEST_CASE("fc backward closed-form cases") {
    const FcSpec spec{3, 3};
    const Tensor eye(spec.weight_shape(), {1, 0, 0, 0, 1, 0, 0, 0, 1});
    const Tensor x(Shape{3}, {1, 2, 3});
    const auto zero = fc_backward(x, spec, eye, Tensor(Shape{3}));
    for (const Tensor* t : {&zero.input, &zero.weights, &zero.bias}) {
      CHECK(std::all_of(t->data().begin(), t->data().end(), [](float v) { return v == 0.0f; }));
    }
    const Tensor g(Shape{3}, {0.5f, -1.0f, 2.0f});
    const auto through = fc_backward(x, spec, eye, g);
    CHECK(through.input.values() == g.values());
    CHECK(through.bias.values() == g.values());
    CHECK(through.weights.values() == std::vector<float>{0.5f, 1, 1.5f, -1, -2, -3, 2, 4, 6});
  }

  TEST_CASE("softmax") {
    const std::vector<double> half = softmax<double>(std::vector<double>{0, 0});
    CHECK(half[0] == 0.5);
    CHECK(half[1] == 0.5);

    const std::vector<float> big = softmax<float>(std::vector<float>{1000, 0});
    CHECK(std::isfinite(big[0]));
    CHECK(big[0] == doctest::Approx(1.0));
    CHECK(big[1] == doctest::Approx(0.0));

    Rng rng(8);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<float> x(2 + rng.below(10));
      for (float& v : x) v = static_cast<float>(rng.uniform(-20, 20));
      const auto p = softmax<float>(x);
      double sum = 0;
      for (float v : p) {
        CHECK(v >= 0.0f);
        CHECK(v <= 1.0f);
        sum += v;
      }
      CHECK(std::abs(sum - 1.0) <= 1e-6);
      CHECK(argmax_class<float>(p) == argmax_class<float>(x));
    }
  }

  TEST_CASE("softmax shift invariance is bitwise") {
    // Dyadic values plus an integer shift: x - max(x) is exact, so the outputs match bit for bit.
    Rng rng(12);
    for (int trial = 0; trial < 100; ++trial) {
      std::vector<float> x(7), shifted(7);
      const float c = static_cast<float>(static_cast<int>(rng.below(2001)) - 1000);
      for (std::size_t i = 0; i < x.size(); ++i) {
        x[i] = static_cast<float>(static_cast<int>(rng.below(257)) - 128) / 16.0f;
        shifted[i] = x[i] + c;
      }
      CHECK(softmax<float>(x) == softmax<float>(shifted));
    }
  }

  TEST_CASE("argmax_class") {
    CHECK(argmax_class<float>(std::vector<float>{0.1f, 0.7f, 0.2f}) == 1u);
    CHECK(argmax_class<float>(std::vector<float>{0.5f, 0.5f}) == 0u);
    CHECK(argmax_class<float>(std::vector<float>{-1.0f, 3.0f, 3.0f}) == 1u);
  }

  TEST_CASE("cross entropy") {
    CHECK(cross_entropy<double>(std::vector<double>{1000, 0, 0}, 0) == doctest::Approx(0.0));
    CHECK(std::abs(cross_entropy<double>(std::vector<double>(7, 0.3), 4) - std::log(7.0)) <= 1e-9);
    std::vector<double> logits{0.3, -1.2, 2.0, 0.5};
    double previous = cross_entropy<double>(logits, 1);
    for (int step = 0; step < 10; ++step) {
      logits[1] += 0.5;
      const double now = cross_entropy<double>(logits, 1);
      CHECK(now < previous);
      previous = now;
    }
    CHECK(std::isfinite(cross_entropy<float>(std::vector<float>{-1000, 1000}, 0)));
  }

  TEST_CASE("gradient checks of every layer") {
    for (const std::string& layer : checkable_layers()) {
      for (std::uint64_t seed : {1u, 2u, 3u}) {
        const GradCheckReport r = check_layer(layer, seed);
        INFO(r.summary());
        CHECK(r.passed);
        CHECK(r.checked > 0u);
        CHECK(r.skipped == 0u);
        CHECK(r.max_relative_error < 1e-4);
      }
    }
  }

  TEST_CASE("fc gradient error is at rounding level") {
    const GradCheckReport r = check_layer("fc", 5);
    CHECK(r.max_relative_error < 1e-8);
  }

  TEST_CASE("gradient checker reports an injected sign error with its coordinate") {
    for (const std::string& layer : checkable_layers()) {
      const GradCheckReport r = check_layer(layer, 1, {}, true);
      INFO(r.summary());
      CHECK_FALSE(r.passed);
      CHECK(r.max_relative_error > 1.0);
      CHECK(r.worst_coordinate.find("input[") != std::string::npos);
    }
    CHECK_THROWS_AS(check_layer("softmax", 1), ConfigError);
  }
}
