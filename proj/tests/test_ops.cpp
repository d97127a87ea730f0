#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cellsearch/ops.hpp"
#include "helpers.hpp"

using namespace cellsearch;
using cstest::fd_max_rel_error;
using cstest::random_tensor;

namespace {

// Independent reference: direct 7-loop grouped cross-correlation.
std::vector<double> naive_conv2d(const Tensor& x, const Conv2dSpec& s) {
  const int B = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
  const int Ho = (H + 2 * s.ph - s.dh * (s.kh - 1) - 1) / s.sh + 1;
  const int Wo = (W + 2 * s.pw - s.dw * (s.kw - 1) - 1) / s.sw + 1;
  const int cin_g = s.in_channels / s.groups, cout_g = s.out_channels / s.groups;
  std::vector<double> out(static_cast<std::size_t>(B) * s.out_channels * Ho * Wo, 0.0);
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < s.out_channels; ++oc) {
      const int g = oc / cout_g;
      for (int oh = 0; oh < Ho; ++oh)
        for (int ow = 0; ow < Wo; ++ow) {
          double acc = s.bias.defined() ? s.bias.data()[oc] : 0.0;
          for (int ic = 0; ic < cin_g; ++ic)
            for (int ki = 0; ki < s.kh; ++ki)
              for (int kj = 0; kj < s.kw; ++kj) {
                const int ih = oh * s.sh - s.ph + ki * s.dh;
                const int iw = ow * s.sw - s.pw + kj * s.dw;
                if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
                const double xv =
                    x.data()[((static_cast<std::size_t>(b) * C + g * cin_g + ic) * H + ih) * W + iw];
                const double wv =
                    s.weight.data()[((static_cast<std::size_t>(oc) * cin_g + ic) * s.kh + ki) * s.kw + kj];
                acc += xv * wv;
              }
          out[((static_cast<std::size_t>(b) * s.out_channels + oc) * Ho + oh) * Wo + ow] = acc;
        }
    }
  return out;
}

// Brute-force max pooling on one plane.
double window_max(const Tensor& x, int b, int c, int oh, int ow, int k, int stride, int pad) {
  const int H = x.dim(2), W = x.dim(3);
  double best = -1e300;
  for (int ki = 0; ki < k; ++ki)
    for (int kj = 0; kj < k; ++kj) {
      const int ih = oh * stride - pad + ki, iw = ow * stride - pad + kj;
      if (ih < 0 || ih >= H || iw < 0 || iw >= W) continue;
      best = std::max(best, x.data()[((static_cast<std::size_t>(b) * x.dim(1) + c) * H + ih) * W + iw]);
    }
  return best;
}

}  // namespace

TEST_CASE("conv2d parameter count shrinks by the group factor") {
  RngStream rng(1);
  Conv2dSpec g4 = make_conv2d(16, 16, 3, 1, 1, 1, 4, false, rng);
  Conv2dSpec g1 = make_conv2d(16, 16, 3, 1, 1, 1, 1, false, rng);
  CHECK(conv2d_param_count(g4) == 576);
  CHECK(conv2d_param_count(g1) == 2304);
  CHECK(g4.weight.size() * 4 == g1.weight.size());
  for (int g : {1, 2, 4, 8}) {
    Conv2dSpec s = make_conv2d(16, 8, 5, 1, 2, 1, g, true, rng);
    CHECK(conv2d_param_count(s) ==
          static_cast<std::size_t>(8) * (16 / g) * 25 + 8);
  }
}

TEST_CASE("conv2d identity: 1x1 kernel with identity weight") {
  RngStream rng(2);
  const int C = 5;
  Conv2dSpec s = make_conv2d(C, C, 1, 1, 0, 1, 1, false, rng);
  std::fill(s.weight.values().begin(), s.weight.values().end(), 0.0);
  for (int c = 0; c < C; ++c) s.weight.values()[static_cast<std::size_t>(c) * C + c] = 1.0;
  Tensor x = random_tensor({2, C, 4, 4}, rng, -2, 2, false);
  Tensor y = conv2d(x, s);
  CHECK(y.shape() == x.shape());
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(y.values()[i] == Catch::Approx(x.values()[i]).margin(1e-15));
}

TEST_CASE("conv2d matches the direct-loop reference") {
  RngStream rng(3);
  struct Case {
    int cin, cout, k, stride, pad, dil, groups;
  };
  for (const Case& c : {Case{4, 6, 3, 1, 1, 1, 1}, Case{4, 4, 3, 2, 1, 1, 2},
                        Case{6, 6, 3, 1, 2, 2, 3}, Case{8, 8, 1, 1, 0, 1, 8},
                        Case{8, 4, 5, 2, 2, 1, 4}}) {
    Conv2dSpec s = make_conv2d(c.cin, c.cout, c.k, c.stride, c.pad, c.dil, c.groups, true, rng);
    Tensor x = random_tensor({2, c.cin, 7, 8}, rng, -1, 1, false);
    Tensor y = conv2d(x, s);
    std::vector<double> ref = naive_conv2d(x, s);
    REQUIRE(y.size() == ref.size());
    for (std::size_t i = 0; i < ref.size(); ++i)
      CHECK(y.values()[i] == Catch::Approx(ref[i]).margin(1e-12));
  }
}

TEST_CASE("grouped conv equals per-group slices run at g=1") {
  RngStream rng(4);
  const int C = 16, G = 4, cg = C / G;
  Conv2dSpec s = make_conv2d(C, C, 3, 1, 1, 1, G, false, rng);
  Tensor x = random_tensor({2, C, 6, 6}, rng, -1, 1, false);
  Tensor y = conv2d(x, s);

  for (int g = 0; g < G; ++g) {
    Conv2dSpec part = make_conv2d(cg, cg, 3, 1, 1, 1, 1, false, rng);
    const std::size_t wlen = part.weight.size();
    std::copy(s.weight.data() + static_cast<std::size_t>(g) * wlen,
              s.weight.data() + static_cast<std::size_t>(g + 1) * wlen, part.weight.data());
    Tensor xg = narrow(x, 1, g * cg, cg);
    Tensor yg = conv2d(xg, part);
    Tensor yslice = narrow(y, 1, g * cg, cg);
    REQUIRE(yg.size() == yslice.size());
    for (std::size_t i = 0; i < yg.size(); ++i)
      CHECK(yg.values()[i] == Catch::Approx(yslice.values()[i]).margin(1e-12));
  }
}

TEST_CASE("conv2d error paths") {
  RngStream rng(5);
  Conv2dSpec s = make_conv2d(8, 8, 3, 1, 1, 1, 1, false, rng);
  Tensor bad = Tensor::zeros({1, 4, 6, 6});
  CHECK_THROWS_WITH(conv2d(bad, s), Catch::Matchers::ContainsSubstring("4") &&
                                        Catch::Matchers::ContainsSubstring("8"));
  CHECK_THROWS_WITH(make_conv2d(6, 6, 3, 1, 1, 1, 4, false, rng),
                    Catch::Matchers::ContainsSubstring("divisible"));
}

TEST_CASE("conv2d gradients vs finite differences, g in {1,2,4}") {
  RngStream rng(6);
  RngStream coords(7);
  for (int g : {1, 2, 4}) {
    Conv2dSpec s = make_conv2d(4, 4, 3, 1, 1, 1, g, true, rng);
    Tensor x = random_tensor({2, 4, 5, 5}, rng);
    Tensor probe = random_tensor({2, 4, 5, 5}, rng, -1, 1, false);
    auto loss = [&] { return sum(mul(conv2d(x, s), probe)); };
    CHECK(fd_max_rel_error(loss, {x, s.weight, s.bias}, coords, 20) < 1e-4);
  }
}

TEST_CASE("max pooling matches brute force on 5x5 inputs") {
  RngStream rng(8);
  Tensor x = random_tensor({2, 3, 5, 5}, rng, -3, 3, false);
  Tensor y = max_pool2d(x, 3, 1, 1);
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c)
      for (int oh = 0; oh < 5; ++oh)
        for (int ow = 0; ow < 5; ++ow)
          CHECK(y.values()[((static_cast<std::size_t>(b) * 3 + c) * 5 + oh) * 5 + ow] ==
                window_max(x, b, c, oh, ow, 3, 1, 1));

  Tensor ys = max_pool2d(x, 3, 2, 1);
  CHECK(ys.shape() == Shape{2, 3, 3, 3});
  for (int b = 0; b < 2; ++b)
    for (int c = 0; c < 3; ++c)
      for (int oh = 0; oh < 3; ++oh)
        for (int ow = 0; ow < 3; ++ow)
          CHECK(ys.values()[((static_cast<std::size_t>(b) * 3 + c) * 3 + oh) * 3 + ow] ==
                window_max(x, b, c, oh, ow, 3, 2, 1));
}

TEST_CASE("pooling on constant input stays constant; ties route to first argmax") {
  Tensor x = Tensor::full({1, 1, 5, 5}, 2.5, true);
  Tensor ymax = max_pool2d(x, 3, 1, 1);
  Tensor yavg = avg_pool2d(x, 3, 1, 1);
  for (double v : ymax.values()) CHECK(v == 2.5);
  for (double v : yavg.values()) CHECK(v == Catch::Approx(2.5).margin(1e-15));

  // All-tied 2x2 window at output (0,0) with k=3 pad=1: valid cells are
  // (0,0),(0,1),(1,0),(1,1); the first in scan order takes the gradient.
  Tensor single = sum(narrow(narrow(ymax, 2, 0, 1), 3, 0, 1));
  backward(single);
  CHECK(x.grad()[0] == 1.0);
  CHECK(x.grad()[1] == 0.0);
  CHECK(x.grad()[5] == 0.0);
}

TEST_CASE("pooling gradients vs finite differences") {
  RngStream rng(9);
  RngStream coords(10);
  Tensor x = random_tensor({2, 3, 6, 6}, rng);
  Tensor probe = random_tensor({2, 3, 3, 3}, rng, -1, 1, false);
  CHECK(fd_max_rel_error([&] { return sum(mul(max_pool2d(x, 3, 2, 1), probe)); }, {x}, coords, 25) <
        1e-4);
  CHECK(fd_max_rel_error([&] { return sum(mul(avg_pool2d(x, 3, 2, 1), probe)); }, {x}, coords, 25) <
        1e-4);
}

TEST_CASE("batchnorm train mode normalizes per channel") {
  RngStream rng(11);
  BatchNorm2d bn(4, false);
  Tensor x = random_tensor({8, 4, 6, 6}, rng, -30.0, 30.0, false);
  Tensor y = batchnorm2d(x, bn, true);
  const std::size_t spatial = 36;
  for (int c = 0; c < 4; ++c) {
    double mu = 0.0, var = 0.0;
    for (int b = 0; b < 8; ++b)
      for (std::size_t i = 0; i < spatial; ++i)
        mu += y.values()[(static_cast<std::size_t>(b) * 4 + c) * spatial + i];
    mu /= 8 * spatial;
    for (int b = 0; b < 8; ++b)
      for (std::size_t i = 0; i < spatial; ++i) {
        const double d = y.values()[(static_cast<std::size_t>(b) * 4 + c) * spatial + i] - mu;
        var += d * d;
      }
    var /= 8 * spatial;
    CHECK(std::fabs(mu) < 1e-10);
    CHECK(std::fabs(var - 1.0) < 1e-6);
  }
}

TEST_CASE("batchnorm eval mode with identity stats passes input through") {
  BatchNorm2d bn(3, false);
  RngStream rng(12);
  Tensor x = random_tensor({2, 3, 4, 4}, rng, -1, 1, false);
  Tensor y = batchnorm2d(x, bn, false);
  for (std::size_t i = 0; i < x.size(); ++i)
    CHECK(y.values()[i] == Catch::Approx(x.values()[i]).margin(2e-6));

  CHECK_THROWS_WITH(batchnorm2d(Tensor::zeros({1, 5, 2, 2}), bn, false),
                    Catch::Matchers::ContainsSubstring("channels"));
}

TEST_CASE("batchnorm gradients vs finite differences") {
  RngStream rng(13);
  RngStream coords(14);
  BatchNorm2d bn(3, true);
  Tensor x = random_tensor({3, 3, 4, 4}, rng);
  Tensor probe = random_tensor({3, 3, 4, 4}, rng, -1, 1, false);
  auto loss = [&] { return sum(mul(batchnorm2d(x, bn, true), probe)); };
  CHECK(fd_max_rel_error(loss, {x, bn.weight, bn.bias}, coords, 25) < 1e-4);
}

TEST_CASE("classifier head") {
  RngStream rng(15);
  RngStream coords(16);
  SECTION("constant feature maps pool to the constant") {
    Tensor x = Tensor::full({2, 3, 5, 5}, 1.75);
    Tensor pooled = global_avg_pool(x);
    for (double v : pooled.values()) CHECK(v == Catch::Approx(1.75).margin(1e-15));
  }
  SECTION("zero weights give bias logits") {
    Tensor x = random_tensor({2, 3, 4, 4}, rng, -5, 5, false);
    Tensor w = Tensor::zeros({7, 3});
    Tensor b = Tensor::from_vector({7}, {1, 2, 3, 4, 5, 6, 7});
    Tensor logits = classifier_head(x, w, b);
    REQUIRE(logits.shape() == Shape{2, 7});
    for (int i = 0; i < 2; ++i)
      for (int j = 0; j < 7; ++j)
        CHECK(logits.values()[static_cast<std::size_t>(i) * 7 + j] == Catch::Approx(j + 1.0));
  }
  SECTION("gradient check") {
    Tensor x = random_tensor({2, 3, 4, 4}, rng);
    Tensor w = random_tensor({5, 3}, rng);
    Tensor b = random_tensor({5}, rng);
    Tensor probe = random_tensor({2, 5}, rng, -1, 1, false);
    auto loss = [&] { return sum(mul(classifier_head(x, w, b), probe)); };
    CHECK(fd_max_rel_error(loss, {x, w, b}, coords, 25) < 1e-4);
  }
}

TEST_CASE("channel shuffle interleaves and inverts") {
  Tensor x = Tensor::from_vector({1, 8, 1, 2},
                                 {0, 1, 10, 11, 20, 21, 30, 31, 40, 41, 50, 51, 60, 61, 70, 71});
  Tensor y = channel_shuffle(x, 4);
  // groups of 2: channels [0,2,4,6,1,3,5,7] after transpose
  std::vector<double> expect{0, 1, 20, 21, 40, 41, 60, 61, 10, 11, 30, 31, 50, 51, 70, 71};
  CHECK(y.values() == expect);

  Tensor back = channel_shuffle(y, 2);  // inverse: C/groups
  CHECK(back.values() == x.values());

  CHECK_THROWS_WITH(channel_shuffle(x, 3), Catch::Matchers::ContainsSubstring("divisible"));

  RngStream rng(17);
  RngStream coords(18);
  Tensor xr = random_tensor({2, 8, 3, 3}, rng);
  Tensor probe = random_tensor({2, 8, 3, 3}, rng, -1, 1, false);
  CHECK(fd_max_rel_error([&] { return sum(mul(channel_shuffle(xr, 4), probe)); }, {xr}, coords,
                         25) < 1e-4);
}

TEST_CASE("all candidate ops keep channels and divide the spatial extent by the stride") {
  RngStream rng(19);
  for (int stride : {1, 2}) {
    for (int i = 0; i < kNumOps; ++i) {
      const OpKind kind = static_cast<OpKind>(i);
      ModulePtr op = make_candidate(kind, 8, stride, 1, false, rng);
      Tensor x = random_tensor({2, 8, 8, 8}, rng, -1, 1, false);
      Tensor y = op->forward(x, true);
      INFO(op_kind_name(kind) << " stride " << stride);
      CHECK(y.shape() == Shape{2, 8, 8 / stride, 8 / stride});
      CHECK(all_finite(y));
    }
  }
}

TEST_CASE("zero op and identity op behave as named") {
  RngStream rng(20);
  Tensor x = random_tensor({2, 4, 6, 6}, rng, -1, 1, false);
  ModulePtr zero = make_candidate(OpKind::zero, 4, 1, 1, false, rng);
  Tensor z = zero->forward(x, true);
  for (double v : z.values()) CHECK(v == 0.0);
  ModulePtr zero2 = make_candidate(OpKind::zero, 4, 2, 1, false, rng);
  CHECK(zero2->forward(x, true).shape() == Shape{2, 4, 3, 3});

  ModulePtr skip = make_candidate(OpKind::skip_connect, 4, 1, 1, false, rng);
  Tensor s = skip->forward(x, true);
  CHECK(s.values() == x.values());
}

TEST_CASE("learned candidate ops pass finite-difference checks") {
  RngStream rng(21);
  RngStream coords(22);
  for (OpKind kind : {OpKind::sep_conv_3x3, OpKind::sep_conv_5x5, OpKind::dil_conv_3x3,
                      OpKind::dil_conv_5x5, OpKind::skip_connect, OpKind::max_pool_3x3,
                      OpKind::avg_pool_3x3}) {
    const int stride = (kind == OpKind::skip_connect) ? 2 : 1;  // stride-2 skip is the learned one
    ModulePtr op = make_candidate(kind, 4, stride, 1, true, rng);
    Tensor x = random_tensor({2, 4, 6, 6}, rng);
    Tensor probe = random_tensor({2, 4, 6 / stride, 6 / stride}, rng, -1, 1, false);
    std::vector<Tensor> leaves{x};
    op->collect_params(leaves);
    auto loss = [&] { return sum(mul(op->forward(x, true), probe)); };
    INFO(op_kind_name(kind));
    CHECK(fd_max_rel_error(loss, leaves, coords, 12) < 1e-4);
  }
}

TEST_CASE("clamp_groups picks the largest feasible divisor") {
  CHECK(clamp_groups(4, 2, 2) == 2);
  CHECK(clamp_groups(4, 4, 4) == 4);
  CHECK(clamp_groups(4, 8, 8) == 4);
  CHECK(clamp_groups(4, 6, 6) == 3);
  CHECK(clamp_groups(4, 1, 1) == 1);
  CHECK(clamp_groups(1, 16, 16) == 1);
}

TEST_CASE("factorized reduce handles one-channel inputs") {
  RngStream rng(23);
  FactorizedReduce fr(1, 1, 1, false, rng);
  Tensor x = random_tensor({2, 1, 4, 4}, rng, -1, 1, false);
  Tensor y = fr.forward(x, true);
  CHECK(y.shape() == Shape{2, 1, 2, 2});
}
