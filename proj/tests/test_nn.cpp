#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <set>

#include "doctest.h"
#include "test_support.hpp"
#include "tuap/error.hpp"
#include "tuap/io.hpp"
#include "tuap/nn.hpp"

using namespace tuap;
using namespace tuap::nn;

namespace {

Matrix random_matrix(Index r, Index c, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(r, c);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

std::vector<int> random_labels(Index n, int classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> d(0, classes - 1);
  std::vector<int> out(static_cast<std::size_t>(n));
  for (auto& l : out) l = d(rng);
  return out;
}

double loss_of(const ModelGraph& m, const Matrix& x, const std::vector<int>& y) {
  return cross_entropy(forward(m, x).logits, y).loss;
}

bool close_enough(double analytic, double numeric) {
  return std::abs(analytic - numeric) <= 1e-4 * std::max(std::abs(analytic), std::abs(numeric)) + 1e-8;
}

ModelGraph small_net(int kind, Index seq, std::uint64_t seed) {
  switch (kind) {
    case 0:
      return ModelGraph({seq, 2, 1},
                        {LayerSpec::dense(5, Activation::tanh), LayerSpec::dense(4, Activation::sigmoid),
                         LayerSpec::softmax(2)},
                        seed);
    case 1:
      return ModelGraph({seq, 3, 2},
                        {LayerSpec::conv1d(4, 3, Activation::tanh), LayerSpec::dense(5, Activation::tanh),
                         LayerSpec::softmax(3)},
                        seed);
    default:
      return ModelGraph({seq, 3, 2},
                        {LayerSpec::lstm(4, true), LayerSpec::lstm(3, false), LayerSpec::dense(4, Activation::tanh),
                         LayerSpec::softmax(2)},
                        seed);
  }
}

}  // namespace

TEST_CASE("tensor rejects non-finite values and bad shapes") {
  CHECK_THROWS_AS(Tensor({2}, {1.0, std::nan("")}), NumericalError);
  CHECK_THROWS_AS(Tensor({2, 2}, {1.0, 2.0}), ValidationError);
  const Tensor t({2, 3}, {1, 2, 3, 4, 5, 6});
  CHECK(t.as_matrix()(1, 0) == 4.0);
}

TEST_CASE("graph construction validates the layer plan") {
  CHECK_THROWS_AS(ModelGraph({0, 0, 3}, {LayerSpec::dense(4, Activation::relu)}, 1), ValidationError);
  CHECK_THROWS_AS(ModelGraph({0, 0, 3}, {LayerSpec::softmax(2), LayerSpec::softmax(2)}, 1), ValidationError);
  CHECK_THROWS_AS(ModelGraph({5, 3, 0}, {LayerSpec::dense(4, Activation::relu), LayerSpec::lstm(3, false),
                                         LayerSpec::softmax(2)},
                             1),
                  ValidationError);
  CHECK_THROWS_AS(ModelGraph({0, 0, 3}, {LayerSpec::conv1d(4, 3, Activation::relu), LayerSpec::softmax(2)}, 1),
                  ValidationError);
  const ModelGraph g({5, 3, 2}, {LayerSpec::lstm(4, true), LayerSpec::lstm(3, false), LayerSpec::softmax(2)}, 1);
  const auto names = g.parameter_names();
  CHECK(std::set<std::string>(names.begin(), names.end()).size() == names.size());
}

TEST_CASE("forward: symmetric and identity networks") {
  ModelGraph zero({0, 0, 4}, {LayerSpec::dense(3, Activation::relu), LayerSpec::softmax(2)}, 9);
  for (auto& p : zero.parameters()) p.value->setZero();
  std::mt19937_64 rng(1);
  const Matrix x = random_matrix(6, 4, rng);
  const Matrix probs = softmax(forward(zero, x).logits);
  CHECK((probs.array() == 0.5).all());

  ModelGraph id({0, 0, 3}, {LayerSpec::softmax(3)}, 9);
  auto params = id.parameters();
  *params[0].value = Matrix::Identity(3, 3);
  params[1].value->setZero();
  const Matrix y = random_matrix(5, 3, rng);
  CHECK(forward(id, y).logits == y);
}

TEST_CASE("lstm with zero input and zero biases stays at zero") {
  ModelGraph g({5, 3, 0}, {LayerSpec::lstm(4, true), LayerSpec::lstm(3, false), LayerSpec::softmax(2)}, 3);
  for (auto& p : g.parameters())
    if (p.name.find("bias") != std::string::npos) p.value->setZero();
  const ForwardPass pass = forward(g, Matrix::Zero(4, 15));
  const auto& cache = std::get<LstmCache>(pass.cache.layers[0]);
  for (const Matrix& h : cache.hiddens) CHECK(h.isZero());
  CHECK(pass.logits.isZero());
}

TEST_CASE("backward matches finite differences across kinds, batches and lengths") {
  const Index batches[] = {1, 7, 32};
  const Index lengths[] = {1, 5};
  std::mt19937_64 rng(11);
  int param_failures = 0, input_failures = 0, trials = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int kind = trial % 3;
    const Index batch = batches[(trial / 3) % 3];
    const Index seq = lengths[(trial / 9) % 2];
    ModelGraph g = small_net(kind, seq, 100 + static_cast<std::uint64_t>(trial));
    const Matrix x = random_matrix(batch, g.input_shape().width(), rng);
    const auto y = random_labels(batch, static_cast<int>(g.output_size()), rng);
    const ForwardPass pass = forward(g, x);
    const Gradients grads = backward(g, pass.cache, cross_entropy(pass.logits, y).grad);
    ++trials;

    const double h = 1e-6;
    auto params = g.parameters();
    REQUIRE(grads.params.size() == params.size());
    for (std::size_t p = 0; p < params.size(); ++p) {
      Matrix& w = *params[p].value;
      for (Index k = 0; k < w.size(); ++k) {
        const double keep = w.data()[k];
        w.data()[k] = keep + h;
        const double up = loss_of(g, x, y);
        w.data()[k] = keep - h;
        const double down = loss_of(g, x, y);
        w.data()[k] = keep;
        if (!close_enough(grads.params[p].data()[k], (up - down) / (2 * h))) ++param_failures;
      }
    }
    for (Index k = 0; k < x.size(); ++k) {
      Matrix xp = x, xm = x;
      xp.data()[k] += h;
      xm.data()[k] -= h;
      const double numeric = (loss_of(g, xp, y) - loss_of(g, xm, y)) / (2 * h);
      if (!close_enough(grads.input.data()[k], numeric)) ++input_failures;
    }
  }
  CHECK(trials == 100);
  CHECK(param_failures == 0);
  CHECK(input_failures == 0);
}

TEST_CASE("dead relu unit receives no weight gradient") {
  ModelGraph g({0, 0, 3}, {LayerSpec::dense(4, Activation::relu), LayerSpec::softmax(2)}, 5);
  auto params = g.parameters();
  (*params[1].value)(0, 0) = -100.0;
  std::mt19937_64 rng(2);
  const Matrix x = random_matrix(8, 3, rng, 0.5);
  const auto y = random_labels(8, 2, rng);
  const ForwardPass pass = forward(g, x);
  const Gradients grads = backward(g, pass.cache, cross_entropy(pass.logits, y).grad);
  CHECK(grads.params[0].col(0).isZero());
  CHECK(grads.params[1](0, 0) == 0.0);
}

TEST_CASE("stale cache is rejected") {
  ModelGraph g({0, 0, 3}, {LayerSpec::softmax(2)}, 5);
  const ForwardPass pass = forward(g, Matrix::Ones(2, 3));
  g.touch();
  CHECK_THROWS_AS(backward(g, pass.cache, Matrix::Zero(2, 2)), std::invalid_argument);
  CHECK_THROWS_AS(forward(g, Matrix::Ones(2, 4)), ValidationError);
}

TEST_CASE("cross entropy") {
  const std::vector<int> zero{0};
  CHECK(cross_entropy(Matrix::Zero(1, 2), zero).loss == doctest::Approx(std::log(2.0)));
  Matrix confident(1, 2);
  confident << 800.0, -800.0;
  const auto c = cross_entropy(confident, zero);
  CHECK(c.loss < 1e-12);
  CHECK(std::isfinite(c.loss));
  const std::vector<int> bad{2};
  CHECK_THROWS_AS(cross_entropy(Matrix::Zero(1, 2), bad), ValidationError);

  std::mt19937_64 rng(3);
  const Matrix logits = random_matrix(5, 3, rng);
  const auto labels = random_labels(5, 3, rng);
  const auto res = cross_entropy(logits, labels);
  for (Index k = 0; k < logits.size(); ++k) {
    Matrix up = logits, down = logits;
    up.data()[k] += 1e-6;
    down.data()[k] -= 1e-6;
    const double numeric = (cross_entropy(up, labels).loss - cross_entropy(down, labels).loss) / 2e-6;
    CHECK(std::abs(res.grad.data()[k] - numeric) < 1e-6);
  }
}

TEST_CASE("softmax normalisation and scale stability") {
  std::mt19937_64 rng(4);
  for (double scale : {1e-3, 1.0, 1e3}) {
    const Matrix p = softmax(random_matrix(10, 4, rng, scale));
    for (Index r = 0; r < p.rows(); ++r) CHECK(std::abs(p.row(r).sum() - 1.0) < 1e-12);
    CHECK((p.array() > 0.0).all());
  }
  for (double scale : {1e-3, 1e3}) {
    for (int kind = 0; kind < 3; ++kind) {
      ModelGraph g = small_net(kind, 5, 7);
      const Matrix x = random_matrix(4, g.input_shape().width(), rng, scale);
      const auto y = random_labels(4, static_cast<int>(g.output_size()), rng);
      const ForwardPass pass = forward(g, x);
      const Gradients grads = backward(g, pass.cache, cross_entropy(pass.logits, y).grad);
      CHECK(pass.logits.allFinite());
      CHECK(grads.input.allFinite());
      for (const Matrix& m : grads.params) CHECK(m.allFinite());
    }
  }
  CHECK(sigmoid(-800.0) >= 0.0);
  CHECK(sigmoid(800.0) == 1.0);
  CHECK(sigmoid(0.0) == 0.5);
}

TEST_CASE("train_step: null step, determinism, separable data") {
  std::mt19937_64 rng(5);
  const Matrix x = random_matrix(32, 17, rng);
  const auto y = random_labels(32, 2, rng);
  const std::vector<LayerSpec> specs{LayerSpec::dense(8, Activation::relu), LayerSpec::softmax(2)};

  ModelGraph frozen({0, 0, 17}, specs, 1);
  const auto before = serialize_weights(frozen);
  auto opt0 = OptimizerState::adam(frozen, 0.0, 1);
  for (int i = 0; i < 5; ++i) train_step(frozen, opt0, x, y);
  ModelGraph reference({0, 0, 17}, specs, 1);
  for (std::size_t p = 0; p < frozen.parameter_values().size(); ++p)
    CHECK(*frozen.parameter_values()[p] == *reference.parameter_values()[p]);

  ModelGraph a({0, 0, 17}, specs, 2), b({0, 0, 17}, specs, 2);
  auto oa = OptimizerState::adam(a, 1e-3, 2), ob = OptimizerState::adam(b, 1e-3, 2);
  for (int i = 0; i < 20; ++i) {
    train_step(a, oa, x, y);
    train_step(b, ob, x, y);
  }
  CHECK(serialize_weights(a) == serialize_weights(b));
  CHECK(serialize_weights(a) != before);

  // Two features, labels given by the sign of x0 + x1 with a margin.
  Matrix sx(200, 2);
  std::vector<int> sy;
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (Index i = 0; i < 200;) {
    const double p = u(rng), q = u(rng);
    if (std::abs(p + q) < 0.1) continue;
    sx(i, 0) = p;
    sx(i, 1) = q;
    sy.push_back(p + q > 0 ? 1 : 0);
    ++i;
  }
  ModelGraph lin({0, 0, 2}, {LayerSpec::softmax(2)}, 3);
  auto ol = OptimizerState::adam(lin, 0.05, 3);
  for (int step = 0; step < 200; ++step) train_step(lin, ol, sx, sy);
  const Matrix logits = forward(lin, sx).logits;
  int correct = 0;
  for (Index i = 0; i < 200; ++i) correct += (logits(i, 1) > logits(i, 0) ? 1 : 0) == sy[static_cast<std::size_t>(i)];
  CHECK(correct >= 198);
}

TEST_CASE("train_step aborts on numerical blow-up") {
  ModelGraph g({0, 0, 2}, {LayerSpec::softmax(2)}, 1);
  g.parameters()[0].value->setConstant(1e308);
  auto opt = OptimizerState::adam(g, 1e-3, 1);
  const std::vector<int> y{0, 1};
  CHECK_THROWS_AS(train_step(g, opt, Matrix::Constant(2, 2, 10.0), y), NumericalError);
}

TEST_CASE("weight files") {
  const auto dir = testing::temp_dir("weights");
  std::mt19937_64 rng(6);
  for (int kind = 0; kind < 3; ++kind) {
    const ModelGraph g = small_net(kind, 5, 40 + static_cast<std::uint64_t>(kind));
    const auto path = dir / ("m" + std::to_string(kind) + ".bin");
    save_weights(g, path);
    const ModelGraph back = load_weights(path, g.input_shape(), g.specs());
    const Matrix x = random_matrix(9, g.input_shape().width(), rng);
    CHECK(forward(g, x).logits == forward(back, x).logits);
  }

  auto bytes = io::read_file(dir / "m0.bin");
  bytes.resize(bytes.size() - 20);
  io::write_file_atomic(dir / "truncated.bin", bytes);
  try {
    load_weights(dir / "truncated.bin");
    FAIL("expected checksum failure");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("checksum") != std::string::npos);
  }

  const ModelGraph dnn({0, 0, 17}, {LayerSpec::dense(8, Activation::relu), LayerSpec::softmax(2)}, 1);
  save_weights(dnn, dir / "dnn.bin");
  const std::vector<LayerSpec> cnn{LayerSpec::conv1d(16, 3, Activation::relu), LayerSpec::dense(8, Activation::relu),
                                   LayerSpec::softmax(2)};
  try {
    load_weights(dir / "dnn.bin", {0, 0, 17}, cnn);
    FAIL("expected shape mismatch");
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("shape mismatch at layer 0") != std::string::npos);
  }
}
