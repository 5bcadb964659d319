#include <doctest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "gz/network.hpp"
#include "gz/ops.hpp"
#include "gz/prediction.hpp"
#include "oracles.hpp"

using namespace gz;

TEST_CASE("conv of a 2x2 input with an all-ones kernel sums it") {
  const Tensor<float> in({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
  const Tensor<float> w({1, 1, 2, 2}, 1.0f);
  const Tensor<float> out = conv2d_forward(in, w, Tensor<float>({1}), 1, 0);
  CHECK(out.shape() == Shape{1, 1, 1, 1});
  CHECK(out[0] == 10.0f);
}

TEST_CASE("zero kernel leaves the bias") {
  std::mt19937_64 rng(3);
  const Tensor<double> in = oracle::random_tensor({2, 3, 7, 5}, rng);
  const Tensor<double> w({4, 3, 3, 3});
  const Tensor<double> b({4}, std::vector<double>{0.5, -1.0, 2.0, 0.0});
  const Tensor<double> out = conv2d_forward(in, w, b, 1, 1);
  for (int n = 0; n < 2; ++n)
    for (int o = 0; o < 4; ++o)
      for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 5; ++x) CHECK(out.at(n, o, y, x) == b[static_cast<std::size_t>(o)]);
}

TEST_CASE("identity 1x1 conv returns the input") {
  std::mt19937_64 rng(4);
  const Tensor<float> in = oracle::random_tensor({1, 1, 6, 6}, rng).cast<float>();
  const Tensor<float> out = conv2d_forward(in, Tensor<float>({1, 1, 1, 1}, 1.0f), Tensor<float>({1}), 1, 0);
  CHECK(out == in);
}

TEST_CASE("conv equals the nested-loop oracle bit for bit") {
  std::mt19937_64 rng(11);
  std::uniform_int_distribution<int> d(1, 4), hw(3, 9), k(1, 3), s(1, 2), p(0, 2);
  for (int trial = 0; trial < 60; ++trial) {
    const int N = d(rng) % 2 + 1, C = d(rng), H = hw(rng), W = hw(rng), O = d(rng);
    const int K = std::min({k(rng), H, W}), stride = s(rng), pad = std::min(p(rng), K - 1);
    CAPTURE(trial);
    const Tensor<double> in = oracle::random_tensor({N, C, H, W}, rng);
    const Tensor<double> w = oracle::random_tensor({O, C, K, K}, rng);
    const Tensor<double> b = oracle::random_tensor({O}, rng);
    CHECK(conv2d_forward(in, w, b, stride, pad) == oracle::conv(in, w, b, stride, pad));
    const Tensor<float> inf = in.cast<float>(), wf = w.cast<float>(), bf = b.cast<float>();
    CHECK(conv2d_forward(inf, wf, bf, stride, pad) == oracle::conv(inf, wf, bf, stride, pad));
  }
}

TEST_CASE("conv rejects mismatched channels") {
  const Tensor<float> in({1, 3, 5, 5});
  const Tensor<float> w({2, 2, 3, 3});
  CHECK_THROWS_AS(conv2d_forward(in, w, Tensor<float>({2}), 1, 0), ShapeError);
  try {
    conv2d_forward(in, w, Tensor<float>({2}), 1, 0);
  } catch (const ShapeError& e) {
    CHECK(std::string(e.what()).find('3') != std::string::npos);
  }
}

TEST_CASE("conv forward is deterministic") {
  std::mt19937_64 rng(5);
  const Tensor<float> in = oracle::random_tensor({2, 3, 16, 16}, rng).cast<float>();
  const Tensor<float> w = oracle::random_tensor({8, 3, 3, 3}, rng).cast<float>();
  const Tensor<float> b = oracle::random_tensor({8}, rng).cast<float>();
  CHECK(conv2d_forward(in, w, b, 1, 1) == conv2d_forward(in, w, b, 1, 1));
}

TEST_CASE("linear chain rule: y = w x, loss y, x = 3 gives dL/dw = 3") {
  Network<double> net;
  net.add(Layer<double>::linear("fc", Tensor<double>({1, 1}, 2.0), Tensor<double>({1})));
  const Tensor<double> x({1, 1}, 3.0);
  const auto tr = net.forward(x);
  CHECK(tr.output()[0] == 6.0);
  net.zero_grad();
  const Tensor<double> gx = net.backward(tr, Tensor<double>({1, 1}, 1.0));
  CHECK(net.layer(0).params.weight_grad[0] == 3.0);
  CHECK(gx[0] == 2.0);
}

TEST_CASE("softmax cross-entropy gradient on [0,0] with target 0") {
  const std::vector<int> labels{0};
  const auto r = softmax_cross_entropy(Tensor<double>({1, 2}), labels);
  CHECK(r.grad[0] == doctest::Approx(-0.5));
  CHECK(r.grad[1] == doctest::Approx(0.5));
  CHECK(r.loss == doctest::Approx(std::log(2.0)));
}

TEST_CASE("backward without a forward trace is a usage error") {
  Network<double> net;
  net.add(Layer<double>::relu("r"));
  CHECK_THROWS_AS(net.backward(ForwardTrace<double>{}, Tensor<double>({1, 1})), UsageError);
}

namespace {

double check_single(Layer<double> layer, Shape in_shape, std::mt19937_64& rng, double margin = 0.0) {
  Network<double> net;
  net.add(std::move(layer));
  return oracle::gradient_check(net, oracle::random_tensor(std::move(in_shape), rng, margin), rng);
}

// Distinct values with gaps far above the probe step: no ties inside a window.
Tensor<double> spread(Shape shape, std::mt19937_64& rng) {
  Tensor<double> t(std::move(shape));
  std::vector<double> v(t.size());
  std::iota(v.begin(), v.end(), 0.0);
  std::shuffle(v.begin(), v.end(), rng);
  for (std::size_t i = 0; i < v.size(); ++i) t[i] = v[i] * 0.01 - 0.3;
  return t;
}

}  // namespace

TEST_CASE("gradient check, 64-bit, every layer type") {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    CAPTURE(trial);
    const int stride = 1 + trial % 2, pad = trial % 3 == 0 ? 0 : 1;
    CHECK(check_single(Layer<double>::conv("c", oracle::random_tensor({3, 2, 3, 3}, rng),
                                           oracle::random_tensor({3}, rng), stride, pad),
                       {2, 2, 6, 5}, rng) < 1e-4);
    CHECK(check_single(Layer<double>::linear("fc", oracle::random_tensor({4, 6}, rng), oracle::random_tensor({4}, rng)),
                       {3, 6}, rng) < 1e-4);
    CHECK(check_single(Layer<double>::relu("r"), {2, 3, 4, 4}, rng, 0.01) < 1e-4);
    CHECK(check_single(Layer<double>::global_avg_pool("g"), {2, 3, 4, 5}, rng) < 1e-4);
    Network<double> pool;
    pool.add(Layer<double>::maxpool("p", 2, 2));
    CHECK(oracle::gradient_check(pool, spread({2, 2, 6, 6}, rng), rng) < 1e-4);
  }
}

TEST_CASE("gradient check through a random two-block network with cross-entropy") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 5; ++trial) {
    Network<double> net;
    // positive biases: no exact zeros tying inside a pooling window
    Tensor<double> b1({3});
    for (auto& b : b1.values()) b = std::uniform_real_distribution<double>(3.0, 5.0)(rng);
    net.add(Layer<double>::conv("c1", oracle::random_tensor({3, 2, 3, 3}, rng), b1, 1, 1));
    net.add(Layer<double>::relu("r1"));
    net.add(Layer<double>::maxpool("p1", 2, 2));
    net.add(Layer<double>::conv("c2", oracle::random_tensor({4, 3, 3, 3}, rng), oracle::random_tensor({4}, rng), 1, 1));
    net.add(Layer<double>::relu("r2"));
    net.add(Layer<double>::global_avg_pool("gap"));
    net.add(Layer<double>::linear("fc", oracle::random_tensor({3, 4}, rng), oracle::random_tensor({3}, rng)));
    Tensor<double> x = oracle::random_tensor({2, 2, 8, 8}, rng);
    for (int redraw = 0; redraw < 50 && oracle::pool_ties(net.forward(x).acts[2], 1e-3); ++redraw)
      x = oracle::random_tensor({2, 2, 8, 8}, rng);
    REQUIRE_FALSE(oracle::pool_ties(net.forward(x).acts[2], 1e-3));
    const std::vector<int> y{0, 2};
    const auto tr = net.forward(x);
    const auto l = softmax_cross_entropy(tr.output(), y);
    net.zero_grad();
    const Tensor<double> gx = net.backward(tr, l.grad);
    auto loss = [&] { return softmax_cross_entropy(net.infer(x), y).loss; };
    CHECK(oracle::max_rel_error(gx.values(), oracle::central_difference(x.values(), loss)) < 1e-4);
    for (auto& layer : net.layers()) {
      if (layer.params.empty()) continue;
      CHECK(oracle::max_rel_error(layer.params.weight_grad.values(),
                                  oracle::central_difference(layer.params.weight.values(), loss)) < 1e-4);
      CHECK(oracle::max_rel_error(layer.params.bias_grad.values(),
                                  oracle::central_difference(layer.params.bias.values(), loss)) < 1e-4);
    }
  }
}

TEST_CASE("32-bit gradients agree with central differences to 1e-2") {
  std::mt19937_64 rng(9);
  const Tensor<double> w = oracle::random_tensor({3, 2, 3, 3}, rng);
  const Tensor<double> xd = oracle::random_tensor({1, 2, 5, 5}, rng);
  const Tensor<double> R = oracle::random_tensor({1, 3, 5, 5}, rng);
  Network<float> net;
  net.add(Layer<float>::conv("c", w.cast<float>(), Tensor<float>({3}), 1, 1));
  Tensor<float> x = xd.cast<float>();
  const auto tr = net.forward(x);
  net.zero_grad();
  const Tensor<float> gx = net.backward(tr, R.cast<float>());
  const Tensor<float> Rf = R.cast<float>();
  for (std::size_t i = 0; i < x.size(); ++i) {
    const float keep = x[i], h = 1e-2f;
    auto loss = [&] {
      const Tensor<float> y = net.infer(x);
      double s = 0.0;
      for (std::size_t j = 0; j < y.size(); ++j) s += static_cast<double>(y[j]) * Rf[j];
      return s;
    };
    x[i] = keep + h;
    const double up = loss();
    x[i] = keep - h;
    const double down = loss();
    x[i] = keep;
    CHECK(oracle::rel_error(gx[i], (up - down) / (2 * h), 1e-3) < 1e-2);
  }
}

TEST_CASE("max-pool routes gradient to the first maximum only") {
  const Tensor<float> in({1, 1, 2, 4}, std::vector<float>{1, 5, 2, 2, 5, 0, 2, 1});
  std::vector<std::int32_t> arg;
  const Tensor<float> out = maxpool_forward(in, 2, 2, &arg);
  CHECK(out[0] == 5.0f);
  CHECK(out[1] == 2.0f);
  CHECK(arg[0] == 1);  // first 5 in row-major window order
  CHECK(arg[1] == 2);
  const Tensor<float> g({1, 1, 1, 2}, std::vector<float>{3.0f, -1.5f});
  const Tensor<float> back = maxpool_backward(g, arg, in.shape());
  CHECK(back == Tensor<float>({1, 1, 2, 4}, std::vector<float>{0, 3, -1.5f, 0, 0, 0, 0, 0}));
  CHECK(std::accumulate(back.values().begin(), back.values().end(), 0.0f) == 1.5f);
}

TEST_CASE("max-pool backward conserves the incoming gradient") {
  std::mt19937_64 rng(2);
  const Tensor<double> in = oracle::random_tensor({2, 3, 8, 8}, rng);
  std::vector<std::int32_t> arg;
  const Tensor<double> out = maxpool_forward(in, 2, 2, &arg);
  const Tensor<double> g = oracle::random_tensor(out.shape(), rng);
  const Tensor<double> back = maxpool_backward(g, arg, in.shape());
  double a = 0, b = 0;
  for (double v : g.values()) a += v;
  int nonzero = 0;
  for (double v : back.values()) {
    b += v;
    nonzero += v != 0.0;
  }
  CHECK(a == doctest::Approx(b).epsilon(1e-12));
  CHECK(nonzero == static_cast<int>(g.size()));
}

TEST_CASE("softmax examples") {
  const std::vector<double> z3{0, 0, 0};
  for (double p : softmax<double>(z3).probs) CHECK(p == doctest::Approx(1.0 / 3));
  const std::vector<double> big{1000, 1000};
  const Prediction pb = softmax<double>(big);
  CHECK(pb[0] == doctest::Approx(0.5));
  CHECK(pb[1] == doctest::Approx(0.5));
  const std::vector<double> ln2{std::log(2.0), 0.0};
  const Prediction pl = softmax<double>(ln2);
  CHECK(pl[0] == doctest::Approx(2.0 / 3));
  CHECK(pl[1] == doctest::Approx(1.0 / 3));
  const std::vector<double> bad{0.0, std::nan("")};
  CHECK_THROWS_AS(softmax<double>(bad), NumericError);
  const std::vector<double> inf{0.0, INFINITY};
  CHECK_THROWS_AS(softmax<double>(inf), NumericError);
}

TEST_CASE("sgd step examples") {
  LayerParams<double> p(Tensor<double>({1}, 1.0), Tensor<double>({1}));
  p.weight_grad[0] = 1.0;
  sgd_step(p, 0.1, 0.0);
  CHECK(p.weight[0] == doctest::Approx(0.9));

  LayerParams<double> q(Tensor<double>({1}, 0.0), Tensor<double>({1}));
  q.weight_grad[0] = 1.0;
  sgd_step(q, 0.1, 0.9);
  CHECK(q.weight[0] == doctest::Approx(-0.1));
  q.weight_grad[0] = 1.0;
  sgd_step(q, 0.1, 0.9);
  CHECK(q.weight[0] == doctest::Approx(-0.29));

  LayerParams<double> z(Tensor<double>({2}, std::vector<double>{0.3, -0.7}), Tensor<double>({2}));
  const Tensor<double> before = z.weight;
  sgd_step(z, 0.5, 0.0);
  CHECK(z.weight == before);
}
