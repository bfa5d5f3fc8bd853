#include "doctest.h"
#include "test_util.hpp"

#include <sstream>

using namespace onrep;
using onrep::test::random_tensor;
using onrep::test::rand_int;

TEST_CASE("conv2d of all-ones input and kernel counts overlaps") {
  Tape<float> tape;
  auto x = tape.constant(TensorF::constant({1, 1, 3, 3}, 1.f));
  auto k = tape.constant(TensorF::constant({1, 1, 3, 3}, 1.f));
  auto b = tape.constant(TensorF({1, 1, 1, 1}));
  const TensorF y = conv2d(x, k, b, Padding{1, 1}).value();
  CHECK(y(0, 0, 1, 1) == 9.f);
  CHECK(y(0, 0, 0, 1) == 6.f);
  CHECK(y(0, 0, 1, 0) == 6.f);
  CHECK(y(0, 0, 0, 0) == 4.f);
  CHECK(y(0, 0, 2, 2) == 4.f);
}

TEST_CASE("conv2d with a 1x1 unit kernel is the identity") {
  std::mt19937_64 rng(1);
  const TensorF x = random_tensor({2, 1, 4, 5}, rng);
  const TensorF y = kernels::conv2d(x, TensorF::constant({1, 1, 1, 1}, 1.f), TensorF({1, 1, 1, 1}),
                                    Padding{});
  CHECK(y.data() == x.data());
}

TEST_CASE("conv2d matches the loop-nest oracle on random cases") {
  std::mt19937_64 rng(7);
  SUBCASE("fixed 1x2x5x5 with 3x2x3x3 kernel") {
    const TensorF x = random_tensor({1, 2, 5, 5}, rng);
    const TensorF k = random_tensor({3, 2, 3, 3}, rng);
    const TensorF b = random_tensor({3, 1, 1, 1}, rng);
    CHECK(relative_error(kernels::conv2d(x, k, b, Padding{1, 1}),
                         test::naive_conv2d(x, k, b, 1, 1)) <= 1e-6);
  }
  SUBCASE("200 randomized shapes, 32 and 64 bit") {
    double worst_f = 0, worst_d = 0;
    for (int trial = 0; trial < 200; ++trial) {
      const Index kh = rand_int(rng, 0, 1) ? 3 : 1;
      const Index kw = rand_int(rng, 0, 1) ? 3 : 1;
      const Shape xs{rand_int(rng, 1, 2), rand_int(rng, 1, 4), rand_int(rng, 3, 8), rand_int(rng, 3, 8)};
      const Shape ks{rand_int(rng, 1, 8), xs.c, kh, kw};
      const Padding pad{kh / 2, kw / 2};
      const TensorD x = random_tensor<double>(xs, rng);
      const TensorD k = random_tensor<double>(ks, rng);
      const TensorD b = random_tensor<double>({ks.n, 1, 1, 1}, rng);
      worst_d = std::max(worst_d, relative_error(kernels::conv2d(x, k, b, pad),
                                                 test::naive_conv2d(x, k, b, pad.h, pad.w)));
      const TensorF xf = x.cast<float>(), kf = k.cast<float>(), bf = b.cast<float>();
      worst_f = std::max(worst_f, relative_error(kernels::conv2d(xf, kf, bf, pad),
                                                 test::naive_conv2d(xf, kf, bf, pad.h, pad.w)));
    }
    CHECK(worst_f <= 1e-6);
    CHECK(worst_d <= 1e-12);
  }
}

TEST_CASE("conv2d rejects bad shapes") {
  Tape<float> tape;
  auto x = tape.constant(TensorF({1, 2, 4, 4}));
  auto b = tape.constant(TensorF({1, 1, 1, 1}));
  CHECK_THROWS_AS(conv2d(x, tape.constant(TensorF({1, 3, 3, 3})), b, Padding{1, 1}),
                  std::invalid_argument);
  auto small = tape.constant(TensorF({1, 2, 2, 2}));
  CHECK_THROWS_AS(conv2d(small, tape.constant(TensorF({1, 2, 3, 3})), b, Padding{0, 0}),
                  std::invalid_argument);
}

TEST_CASE("linear layer") {
  Tape<float> tape;
  SUBCASE("identity weight") {
    TensorF w({3, 3, 1, 1});
    for (Index i = 0; i < 3; ++i) w(i, i, 0, 0) = 1.f;
    auto x = tape.constant(TensorF({1, 3, 1, 1}, {0.5f, -2.f, 3.f}));
    auto y = linear(x, tape.constant(w), tape.constant(TensorF({3, 1, 1, 1})));
    CHECK(y.value().data() == x.value().data());
  }
  SUBCASE("hand sum") {
    auto y = linear(tape.constant(TensorF({1, 2, 1, 1}, {1.f, 1.f})),
                    tape.constant(TensorF({1, 2, 1, 1}, {1.f, 1.f})),
                    tape.constant(TensorF::vector({1.f})));
    CHECK(y.value()[0] == 3.f);
  }
  SUBCASE("random 8 -> 16 against explicit double loop") {
    std::mt19937_64 rng(3);
    const TensorF x = random_tensor({1, 8, 1, 1}, rng);
    const TensorF w = random_tensor({16, 8, 1, 1}, rng);
    const TensorF b = random_tensor({16, 1, 1, 1}, rng);
    const TensorF y = linear(tape.constant(x), tape.constant(w), tape.constant(b)).value();
    TensorF oracle({1, 16, 1, 1});
    for (Index o = 0; o < 16; ++o) {
      double acc = b[o];
      for (Index i = 0; i < 8; ++i) acc += static_cast<double>(w(o, i, 0, 0)) * x[i];
      oracle[o] = static_cast<float>(acc);
    }
    CHECK(relative_error(y, oracle) <= 1e-6);
  }
  SUBCASE("dimension mismatch") {
    CHECK_THROWS_AS(linear(tape.constant(TensorF({1, 3, 1, 1})), tape.constant(TensorF({2, 2, 1, 1})),
                           tape.constant(TensorF({2, 1, 1, 1}))),
                    std::invalid_argument);
  }
}

TEST_CASE("pixel_shuffle") {
  SUBCASE("four channels to a 2x2 block") {
    const TensorF x({1, 4, 1, 1}, {1.f, 2.f, 3.f, 4.f});
    const TensorF y = kernels::pixel_shuffle(x, 2);
    CHECK(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y(0, 0, 0, 0) == 1.f);
    CHECK(y(0, 0, 0, 1) == 2.f);
    CHECK(y(0, 0, 1, 0) == 3.f);
    CHECK(y(0, 0, 1, 1) == 4.f);
  }
  SUBCASE("factor 1 is the identity") {
    std::mt19937_64 rng(5);
    const TensorF x = random_tensor({2, 3, 4, 5}, rng);
    CHECK(kernels::pixel_shuffle(x, 1).data() == x.data());
  }
  SUBCASE("inverse index map recovers the input bit-exactly") {
    std::mt19937_64 rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      const Index r = rand_int(rng, 1, 3);
      const TensorF x = random_tensor({rand_int(rng, 1, 2), r * r * rand_int(rng, 1, 3), rand_int(rng, 1, 5), rand_int(rng, 1, 5)}, rng);
      CHECK(kernels::pixel_unshuffle(kernels::pixel_shuffle(x, r), r).data() == x.data());
    }
    const TensorF x = random_tensor({1, 18, 4, 4}, rng);
    CHECK(kernels::pixel_unshuffle(kernels::pixel_shuffle(x, 3), 3).data() == x.data());
  }
  SUBCASE("channels not divisible") {
    CHECK_THROWS_AS(kernels::pixel_shuffle(TensorF({1, 6, 2, 2}), 2), std::invalid_argument);
  }
}

TEST_CASE("gelu values") {
  Tape<double> tape;
  const TensorD y = gelu(tape.constant(TensorD({1, 1, 1, 3}, {0.0, 6.0, 1.0}))).value();
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 6.0) < 1e-3);
  // x * Phi(x) at 1 with Phi from the erfc oracle
  const double phi1 = 0.5 * std::erfc(-1.0 / std::sqrt(2.0));
  CHECK(y[2] == doctest::Approx(phi1).epsilon(1e-12));
  CHECK(y[2] == doctest::Approx(0.8413).epsilon(1e-4));
}

TEST_CASE("backward closed forms") {
  std::mt19937_64 rng(11);
  SUBCASE("sum(x) has all-ones gradient") {
    Tape<float> tape;
    auto x = tape.parameter(random_tensor({2, 3, 4, 4}, rng), 0);
    const auto g = tape.backward(sum(x));
    CHECK(g[0].data() == TensorF::constant({2, 3, 4, 4}, 1.f).data());
  }
  SUBCASE("bias gradient of sum(conv) is N*H*W") {
    Tape<float> tape;
    auto x = tape.constant(random_tensor({2, 3, 5, 6}, rng));
    auto k = tape.parameter(random_tensor({4, 3, 3, 3}, rng), 0);
    auto b = tape.parameter(random_tensor({4, 1, 1, 1}, rng), 1);
    const auto g = tape.backward(sum(conv2d(x, k, b, Padding{1, 1})));
    for (Index o = 0; o < 4; ++o) CHECK(g[1][o] == 2.f * 5.f * 6.f);
  }
  SUBCASE("unused parameters get zero gradients") {
    Tape<float> tape;
    auto used = tape.parameter(random_tensor({1, 1, 2, 2}, rng), 0);
    tape.parameter(random_tensor({1, 2, 2, 2}, rng), 1);
    const auto g = tape.backward(sum(used));
    REQUIRE(g.size() == 2);
    CHECK(g[1].shape() == Shape{1, 2, 2, 2});
    CHECK(g[1].data().isZero());
  }
  SUBCASE("errors") {
    Tape<float> tape;
    auto x = tape.parameter(random_tensor({1, 1, 2, 2}, rng), 0);
    CHECK_THROWS_AS(tape.backward(x), std::invalid_argument);
    auto loss = sum(x);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), std::logic_error);
    Tape<float> other;
    CHECK_THROWS_AS(other.backward(loss), std::invalid_argument);
  }
}

TEST_CASE("backward matches central finite differences on composed graphs") {
  std::mt19937_64 rng(13);
  SUBCASE("conv2d, pixel_shuffle, gelu, mul on random shapes")
  for (int trial = 0; trial < 25; ++trial) {
    const Index n = rand_int(rng, 1, 2), c = rand_int(rng, 1, 4), o = 4 * rand_int(rng, 1, 2);
    const Index h = rand_int(rng, 3, 8), w = rand_int(rng, 3, 8);
    const Index kh = rand_int(rng, 0, 1) ? 3 : 1;
    std::vector<TensorD> inputs = {
        random_tensor<double>({n, c, h, w}, rng), random_tensor<double>({o, c, kh, 3}, rng),
        random_tensor<double>({o, 1, 1, 1}, rng), random_tensor<double>({n, o / 4, 2 * h, 2 * w}, rng)};
    test::LossBuilder build = [kh](Tape<double>&, const std::vector<Var<double>>& v) {
      auto y = conv2d(v[0], v[1], v[2], Padding{kh / 2, 1});
      y = gelu(pixel_shuffle(y, 2));
      return sum(y * v[3]);
    };
    const auto analytic = test::analytic_gradients(build, inputs);
    const auto numeric = test::numeric_gradients(build, inputs);
    CHECK(test::max_relative_error(analytic, numeric) <= 1e-4);
  }
  SUBCASE("linear, clamp, abs, div and kernel-space ops") {
    std::vector<TensorD> inputs = {
        random_tensor<double>({1, 6, 1, 1}, rng), random_tensor<double>({5, 6, 1, 1}, rng),
        random_tensor<double>({5, 1, 1, 1}, rng), random_tensor<double>({3, 5, 1, 1}, rng),
        random_tensor<double>({5, 4, 3, 3}, rng), random_tensor<double>({4, 1, 1, 1}, rng, 0.5, 1.5)};
    test::LossBuilder build = [](Tape<double>&, const std::vector<Var<double>>& v) {
      auto y = linear(v[0], v[1], v[2]);
      auto k = mix_left(v[3], v[4]);          // (3, 4, 3, 3)
      auto ks = kernel_sum(k);                 // (3, 4, 1, 1)
      auto d = diag_kernel(v[5], std::array<double, 9>{1, 2, 3, 4, 5, 6, 7, 8, 9});
      auto z = sum(abs(y) + 0.5 * y) + sum(clamp(ks, -0.5, 0.5)) + sum(d * d) +
               sum(pad_kernel_3x3(reshape(v[2], Shape{5, 1, 1, 1})) / add_scalar(pad_kernel_3x3(reshape(v[2], Shape{5, 1, 1, 1})), 3.0));
      return z;
    };
    const auto analytic = test::analytic_gradients(build, inputs);
    const auto numeric = test::numeric_gradients(build, inputs);
    CHECK(test::max_relative_error(analytic, numeric) <= 1e-4);
  }
}

TEST_CASE("mix_right gradients") {
  std::mt19937_64 rng(17);
  std::vector<TensorD> inputs = {random_tensor<double>({3, 4, 3, 3}, rng),
                                 random_tensor<double>({4, 2, 1, 1}, rng),
                                 random_tensor<double>({3, 2, 3, 3}, rng)};
  test::LossBuilder build = [](Tape<double>&, const std::vector<Var<double>>& v) {
    return sum(mix_right(v[0], v[1]) * v[2]);
  };
  CHECK(test::max_relative_error(test::analytic_gradients(build, inputs),
                                 test::numeric_gradients(build, inputs)) <= 1e-4);
}

TEST_CASE("ops are linear in their inputs") {
  std::mt19937_64 rng(19);
  const double alpha = 0.7, beta = -1.3;
  for (int trial = 0; trial < 10; ++trial) {
    const Shape xs{1, 4, rand_int(rng, 3, 8), rand_int(rng, 3, 8)};
    const TensorD x = random_tensor<double>(xs, rng), y = random_tensor<double>(xs, rng);
    const TensorD mix(xs, alpha * x.data() + beta * y.data());
    const TensorD k = random_tensor<double>({3, 4, 3, 3}, rng);
    const TensorD zero({3, 1, 1, 1});
    auto conv = [&](const TensorD& in) { return kernels::conv2d(in, k, zero, Padding{1, 1}); };
    CHECK(relative_error(conv(mix), TensorD(conv(x).shape(), alpha * conv(x).data() + beta * conv(y).data())) < 1e-12);
    auto shuffle = [](const TensorD& in) { return kernels::pixel_shuffle(in, 2); };
    CHECK(relative_error(shuffle(mix), TensorD(shuffle(x).shape(), alpha * shuffle(x).data() + beta * shuffle(y).data())) < 1e-12);
    const TensorD w = random_tensor<double>({5, xs.numel(), 1, 1}, rng);
    auto lin = [&](const TensorD& in) {
      Tape<double> t;
      return linear(t.constant(in.reshaped({1, xs.numel(), 1, 1})), t.constant(w), t.constant(TensorD({5, 1, 1, 1}))).value();
    };
    CHECK(relative_error(lin(mix), TensorD(lin(x).shape(), alpha * lin(x).data() + beta * lin(y).data())) < 1e-12);
  }
}

TEST_CASE("tape replay reproduces recorded outputs and tracks leaf changes") {
  std::mt19937_64 rng(23);
  Tape<float> tape;
  auto x = tape.variable(random_tensor({1, 2, 4, 4}, rng));
  auto k = tape.parameter(random_tensor({4, 2, 3, 3}, rng), 0);
  auto b = tape.parameter(random_tensor({4, 1, 1, 1}, rng), 1);
  auto y = gelu(pixel_shuffle(conv2d(x, k, b, Padding{1, 1}), 2));
  auto loss = mean(y);
  const TensorF before = y.value();
  tape.replay();
  CHECK(y.value().data() == before.data());
  tape.set_value(x, TensorF({1, 2, 4, 4}));
  tape.replay();
  CHECK(y.value().data() != before.data());
  CHECK(tape.count(OpKind::Conv2d) == 1);
  CHECK_THROWS_AS(tape.set_value(y, before), std::logic_error);
  (void)loss;
}

TEST_CASE("finite inputs stay finite") {
  std::mt19937_64 rng(29);
  Tape<float> tape;
  auto x = tape.constant(random_tensor({1, 3, 6, 6}, rng, -50, 50));
  auto y = gelu(conv2d(x, tape.constant(random_tensor({4, 3, 3, 3}, rng)),
                       tape.constant(random_tensor({4, 1, 1, 1}, rng)), Padding{1, 1}));
  CHECK(y.value().all_finite());
}

TEST_CASE("tensor file round trip") {
  std::mt19937_64 rng(31);
  const TensorF t = random_tensor({2, 3, 4, 5}, rng);
  std::stringstream buf;
  write_tensor(buf, t);
  const std::string bytes = buf.str();
  CHECK(bytes.size() == 4 + 32 + 4 * 120);
  CHECK(bytes.substr(0, 4) == "RNVT");
  CHECK(static_cast<unsigned char>(bytes[4]) == 2);  // little-endian extent
  const TensorF back = read_tensor(buf);
  CHECK(back.shape() == t.shape());
  CHECK(back.data() == t.data());
  std::stringstream bad("XXXX");
  CHECK_THROWS(read_tensor(bad));
}
