#include <doctest.h>

#include <cmath>
#include <numeric>

#include "helpers.hpp"
#include "weightvol/checkpoint.hpp"
#include "weightvol/nn.hpp"

using namespace weightvol;

namespace {

double mean_loss(const NetworkParams& p, const Matrix& x, const std::vector<std::size_t>& y, const DropoutMasks* m) {
  const ForwardResult r = forward(p, x, y, m);
  return std::accumulate(r.losses.begin(), r.losses.end(), 0.0) / static_cast<double>(r.losses.size());
}

// Largest relative deviation between backward() and central differences.
double gradient_check(const NetworkParams& params, const Matrix& x, const std::vector<std::size_t>& y,
                      const DropoutMasks* masks) {
  const ForwardResult fr = forward(params, x, y, masks);
  const auto grads = backward(params, fr.trace, y);
  const double h = 1e-5;
  double worst = 0.0;
  NetworkParams p = params;
  for (std::size_t l = 0; l < p.layer_count(); ++l) {
    for (std::size_t i = 0; i < p.weights[l].size(); ++i) {
      const double orig = p.weights[l].data()[i];
      p.weights[l].data()[i] = orig + h;
      const double up = mean_loss(p, x, y, masks);
      p.weights[l].data()[i] = orig - h;
      const double down = mean_loss(p, x, y, masks);
      p.weights[l].data()[i] = orig;
      const double fd = (up - down) / (2 * h);
      const double g = grads[l].data()[i];
      worst = std::max(worst, std::abs(g - fd) / std::max({std::abs(g), std::abs(fd), 1e-3}));
    }
  }
  return worst;
}

Dataset two_blobs(std::size_t n_per_class, std::uint64_t seed) {
  Dataset d = synth_blobs(2, 2, n_per_class, 0.3, seed);
  return d;
}

}  // namespace

TEST_CASE("init_network is deterministic and Kaiming scaled") {
  const auto layers = make_mlp(std::vector<std::size_t>{64, 32, 10}, Activation::relu, 0.0);
  CHECK(init_network(layers, 5) == init_network(layers, 5));
  CHECK_FALSE(init_network(layers, 5) == init_network(layers, 6));

  const NetworkParams p = init_network(layers, 9);
  const auto& w = p.weights[0].data();
  CHECK(w.size() == 2048);
  double s = 0.0;
  double s2 = 0.0;
  for (double v : w) {
    s += v;
    s2 += v * v;
  }
  const double var = s2 / 2048.0 - (s / 2048.0) * (s / 2048.0);
  CHECK(std::abs(var - 2.0 / 64.0) / (2.0 / 64.0) < 0.2);

  const auto tanh_layers = make_mlp(std::vector<std::size_t>{64, 32, 10}, Activation::tanh, 0.0);
  const auto& wt = init_network(tanh_layers, 9).weights[0].data();
  double t2 = 0.0;
  for (double v : wt) t2 += v * v;
  CHECK(std::abs(t2 / 2048.0 - 1.0 / 64.0) / (1.0 / 64.0) < 0.2);
}

TEST_CASE("layer validation") {
  CHECK_THROWS_AS(init_network(std::vector<LayerSpec>{}, 1), Error);
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{{3, 2, Activation::relu, 0.0}}), Error);
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{{3, 2, Activation::relu, 0.0},
                                                         {4, 2, Activation::softmax_output, 0.0}}),
                  Error);
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{{3, 2, Activation::relu, 1.0},
                                                         {2, 2, Activation::softmax_output, 0.0}}),
                  Error);
  CHECK_THROWS_AS(validate_layers(std::vector<LayerSpec>{{3, 2, Activation::softmax_output, 0.2}}), Error);
  CHECK_NOTHROW(validate_layers(std::vector<LayerSpec>{{3, 2, Activation::softmax_output, 0.0}}));
}

TEST_CASE("dropout masks") {
  Rng rng(3);
  const auto none = make_mlp(std::vector<std::size_t>{5, 4, 3}, Activation::relu, 0.0);
  for (const Matrix& m : sample_dropout_masks(none, 7, rng))
    for (double v : m.data()) CHECK(v == 1.0);

  const auto half = make_mlp(std::vector<std::size_t>{5, 40, 3}, Activation::relu, 0.5);
  const auto masks = sample_dropout_masks(half, 50, rng);
  for (double v : masks[0].data()) CHECK((v == 0.0 || v == 2.0));
  for (double v : masks[1].data()) CHECK(v == 1.0);

  const auto q3 = make_mlp(std::vector<std::size_t>{5, 1000, 3}, Activation::relu, 0.3);
  const auto big = sample_dropout_masks(q3, 1000, rng);
  double sum = 0.0;
  std::size_t zeros = 0;
  for (double v : big[0].data()) {
    sum += v;
    zeros += v == 0.0;
  }
  CHECK(std::abs(sum / 1e6 - 1.0) < 0.01);
  CHECK(std::abs(static_cast<double>(zeros) / 1e6 - 0.3) < 0.01);
}

TEST_CASE("forward closed form and shapes") {
  NetworkParams p;
  p.layers = {{3, 3, Activation::softmax_output, 0.0}};
  p.weights = {Matrix::identity(3)};
  const Matrix x{{2.0, 0.5, -1.0}};
  const std::vector<std::size_t> y = {0};
  const ForwardResult r = forward(p, x, y);
  const double z = std::exp(2.0) + std::exp(0.5) + std::exp(-1.0);
  CHECK(r.losses[0] == doctest::Approx(-std::log(std::exp(2.0) / z)).epsilon(1e-14));

  const auto layers = make_mlp(std::vector<std::size_t>{64, 32, 16, 10}, Activation::relu, 0.0);
  const NetworkParams net = init_network(layers, 1);
  Rng rng(4);
  const Matrix batch = testing::random_matrix(12, 64, rng);
  std::vector<std::size_t> labels(12);
  for (std::size_t i = 0; i < 12; ++i) labels[i] = i % 10;
  const ForwardResult fr = forward(net, batch, labels);
  for (double l : fr.losses) {
    CHECK(std::isfinite(l));
    CHECK(l >= 0.0);
  }
  const std::size_t widths[] = {32, 16, 10};
  for (std::size_t l = 0; l < 3; ++l) {
    CHECK(fr.trace.pre[l].rows() == 12);
    CHECK(fr.trace.pre[l].cols() == widths[l]);
  }

  const auto masks = sample_dropout_masks(layers, 12, rng);
  const ForwardResult masked = forward(net, batch, labels, &masks);
  CHECK(masked.losses == fr.losses);

  CHECK_THROWS_AS(forward(net, testing::random_matrix(2, 63, rng), std::vector<std::size_t>{0, 1}), Error);
}

TEST_CASE("backward matches finite differences") {
  Rng rng(21);
  for (Activation act : {Activation::relu, Activation::tanh}) {
    for (double q : {0.0, 0.4}) {
      for (const auto& dims : {std::vector<std::size_t>{6, 4, 3}, std::vector<std::size_t>{10, 8, 6, 3}}) {
        const auto layers = make_mlp(dims, act, q);
        const NetworkParams p = init_network(layers, 2);
        const Matrix x = testing::random_matrix(8, dims.front(), rng);
        std::vector<std::size_t> y(8);
        for (std::size_t i = 0; i < 8; ++i) y[i] = i % dims.back();
        const auto masks = sample_dropout_masks(layers, 8, rng);
        CHECK(gradient_check(p, x, y, nullptr) < 1e-6);
        CHECK(gradient_check(p, x, y, &masks) < 1e-6);
      }
    }
  }
}

TEST_CASE("backward edge cases") {
  // Saturated softmax: the target logit dominates.
  NetworkParams p;
  p.layers = {{2, 2, Activation::softmax_output, 0.0}};
  p.weights = {Matrix{{100, 0}, {0, 100}}};
  const Matrix x{{1.0, 0.0}};
  const std::vector<std::size_t> y = {0};
  const auto g = backward(p, forward(p, x, y).trace, y);
  CHECK(std::sqrt(frobenius_norm_sq(g[0])) < 1e-6);

  // A masked-out hidden node has zero incoming-weight gradients.
  const auto layers = make_mlp(std::vector<std::size_t>{4, 3, 2}, Activation::tanh, 0.5);
  const NetworkParams net = init_network(layers, 3);
  Rng rng(5);
  const Matrix xb = testing::random_matrix(5, 4, rng);
  const std::vector<std::size_t> yb = {0, 1, 0, 1, 1};
  DropoutMasks masks = {Matrix(5, 3, 2.0), Matrix(5, 2, 1.0)};
  for (std::size_t i = 0; i < 5; ++i) masks[0](i, 1) = 0.0;
  const auto grads = backward(net, forward(net, xb, yb, &masks).trace, yb);
  for (std::size_t c = 0; c < 4; ++c) CHECK(grads[0](1, c) == 0.0);
  for (std::size_t r = 0; r < 2; ++r) CHECK(grads[1](r, 1) == 0.0);

  // Trace from another network.
  const auto other = make_mlp(std::vector<std::size_t>{4, 5, 2}, Activation::tanh, 0.0);
  const NetworkParams net2 = init_network(other, 3);
  const ForwardTrace t2 = forward(net2, xb, yb).trace;
  try {
    backward(net, t2, yb);
    FAIL("expected StaleTrace");
  } catch (const Error& e) {
    CHECK(e.kind() == ErrorKind::StaleTrace);
  }
}

TEST_CASE("sgd_step") {
  NetworkParams p;
  p.layers = {{2, 2, Activation::softmax_output, 0.0}};
  p.weights = {Matrix{{1, 2}, {3, 4}}};
  const std::vector<Matrix> g = {Matrix{{0.5, -0.5}, {1, 0}}};

  MomentumState s0;
  NetworkParams a = p;
  sgd_step(a, g, 0.1, 0.0, 0.0, s0);
  CHECK(a.weights[0] == p.weights[0] - 0.1 * g[0]);

  MomentumState s1;
  NetworkParams b = p;
  sgd_step(b, g, 0.1, 0.9, 0.0, s1);
  const Matrix after_one = b.weights[0];
  sgd_step(b, g, 0.1, 0.9, 0.0, s1);
  const Matrix second = after_one - b.weights[0];
  CHECK(max_abs(second - 0.1 * 1.9 * g[0]) < 1e-15);

  MomentumState s2;
  NetworkParams c = p;
  const std::vector<Matrix> zero = {Matrix(2, 2)};
  sgd_step(c, zero, 0.1, 0.0, 0.01, s2);
  CHECK(max_abs(c.weights[0] - (1.0 - 0.1 * 0.01) * p.weights[0]) < 1e-15);
}

TEST_CASE("training") {
  const Dataset train_set = two_blobs(100, 1);
  const auto layers = make_mlp(std::vector<std::size_t>{2, 8, 2}, Activation::relu, 0.0);
  TrainConfig cfg;
  cfg.epochs = 20;
  cfg.batch_size = 16;
  const TrainResult r = train(cfg, train_set, nullptr, layers);
  CHECK(r.history.size() == 20);
  CHECK(r.history.back().train_accuracy >= 0.95);

  const TrainResult again = train(cfg, train_set, nullptr, layers);
  CHECK(again.history == r.history);
  CHECK(again.final == r.final);

  TrainConfig none = cfg;
  none.epochs = 0;
  const TrainResult z = train(none, train_set, nullptr, layers);
  CHECK(z.final == z.initial);
  CHECK(z.history.empty());

  std::vector<std::size_t> seen;
  TrainHooks hooks;
  hooks.on_epoch = [&](std::size_t e, const NetworkParams&) { seen.push_back(e); };
  TrainConfig three = cfg;
  three.epochs = 3;
  train(three, train_set, nullptr, layers, hooks);
  CHECK(seen == std::vector<std::size_t>{0, 1, 2, 3});
}

TEST_CASE("learning-rate schedule halves every fifth of training") {
  TrainConfig c;
  c.epochs = 30;
  c.learning_rate = 0.08;
  CHECK(c.halving_period() == 6);
  CHECK(c.learning_rate_at(5) == 0.08);
  CHECK(c.learning_rate_at(6) == 0.04);
  CHECK(c.learning_rate_at(29) == 0.08 / 16);
  c.lr_halve_every = 10;
  CHECK(c.learning_rate_at(10) == 0.04);
}

TEST_CASE("divergence aborts with partial history") {
  const Dataset d = two_blobs(50, 2);
  const auto layers = make_mlp(std::vector<std::size_t>{2, 16, 2}, Activation::relu, 0.0);
  TrainConfig cfg;
  cfg.epochs = 10;
  cfg.learning_rate = 1e6;
  cfg.momentum = 0.0;
  try {
    train(cfg, d, nullptr, layers);
    FAIL("expected DivergenceDetected");
  } catch (const TrainingDiverged& e) {
    CHECK(e.kind() == ErrorKind::DivergenceDetected);
    CHECK(e.history.size() < 10);
  }
}

TEST_CASE("evaluate") {
  NetworkParams p;
  p.layers = {{2, 4, Activation::softmax_output, 0.0}};
  p.weights = {Matrix(4, 2)};
  Dataset d;
  d.features = Matrix{{1, 2}, {3, 4}, {-1, 0}};
  d.labels = {0, 3, 1};
  d.class_count = 4;
  CHECK(evaluate(p, d).loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));

  Dataset sep;
  sep.features = Matrix{{5, 0}, {0, 5}, {4, 1}};
  sep.labels = {0, 1, 0};
  sep.class_count = 2;
  NetworkParams id;
  id.layers = {{2, 2, Activation::softmax_output, 0.0}};
  id.weights = {Matrix::identity(2)};
  CHECK(evaluate(id, sep).accuracy == 1.0);

  Dataset wrong = sep;
  wrong.features = Matrix(3, 3);
  CHECK_THROWS_AS(evaluate(id, wrong), Error);
}

TEST_CASE("inverted dropout preserves the expected activation") {
  const auto layers = make_mlp(std::vector<std::size_t>{3, 4, 2}, Activation::relu, 0.3);
  const NetworkParams p = init_network(layers, 8);
  const Matrix x{{1.0, -0.5, 2.0}};
  const std::vector<std::size_t> y = {0};
  const Matrix clean = forward(p, x, y).trace.inputs[1];
  Rng rng(6);
  const std::size_t n = 100000;
  Vector sum(4, 0.0);
  Vector sum2(4, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const auto masks = sample_dropout_masks(layers, 1, rng);
    const Matrix a = forward(p, x, y, &masks).trace.inputs[1];
    for (std::size_t j = 0; j < 4; ++j) {
      sum[j] += a(0, j);
      sum2[j] += a(0, j) * a(0, j);
    }
  }
  for (std::size_t j = 0; j < 4; ++j) {
    const double mean = sum[j] / n;
    const double se = std::sqrt(std::max(sum2[j] / n - mean * mean, 0.0) / n);
    CHECK(std::abs(mean - clean(0, j)) <= 3.0 * se + 1e-15);
  }
}

TEST_CASE("checkpoint round trip is exact") {
  const auto layers = make_mlp(std::vector<std::size_t>{5, 4, 3}, Activation::tanh, 0.25);
  Checkpoint c{init_network(layers, 77), 77, 12};
  c.params.weights[0](0, 0) = 0.1 + 0.2;
  c.params.weights[1](1, 2) = -1e-300;
  const std::string text = checkpoint_to_json(c);
  const Checkpoint back = checkpoint_from_json(text);
  CHECK(back == c);
  CHECK(checkpoint_to_json(back) == text);

  CHECK_THROWS_AS(checkpoint_from_json("{\"format_version\": 1}"), Error);
  CHECK_THROWS_AS(checkpoint_from_json("not json"), Error);
}
