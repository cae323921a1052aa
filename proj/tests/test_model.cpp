#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "domadapt/errors.hpp"
#include "domadapt/model.hpp"
#include "domadapt/numdiff.hpp"
#include "domadapt/rng.hpp"

using namespace domadapt;

namespace {

ModelConfig tiny_config(double dropout = 0.0) {
  ModelConfig cfg;
  cfg.input_dim = 5;
  cfg.proj_hidden = 6;
  cfg.proj_out = 4;
  cfg.cls_hidden = 6;
  cfg.dropout_rate = dropout;
  return cfg;
}

Matrix random_matrix(SeededRng& rng, std::size_t r, std::size_t c,
                     double scale = 1.0) {
  Matrix m(r, c);
  for (auto& v : m.data()) v = scale * rng.next_gaussian();
  return m;
}

void zero_weights(ModelState& model) {
  for (auto* layer :
       {&model.proj1, &model.proj2, &model.cls1, &model.cls2, &model.cls3}) {
    std::fill(layer->weight.data().begin(), layer->weight.data().end(), 0.0);
    std::fill(layer->bias.begin(), layer->bias.end(), 0.0);
  }
}

// Straight-line projection forward oracle: loops, no shared code.
std::vector<double> project_row_oracle(const ModelState& m,
                                       std::span<const double> x) {
  std::vector<double> h(m.proj1.out_dim());
  for (std::size_t o = 0; o < h.size(); ++o) {
    double s = m.proj1.bias[o];
    for (std::size_t i = 0; i < x.size(); ++i) {
      s += m.proj1.weight.at(o, i) * x[i];
    }
    h[o] = std::tanh(s);
  }
  std::vector<double> z(m.proj2.out_dim());
  for (std::size_t o = 0; o < z.size(); ++o) {
    double s = m.proj2.bias[o];
    for (std::size_t i = 0; i < h.size(); ++i) {
      s += m.proj2.weight.at(o, i) * h[i];
    }
    z[o] = s;
  }
  return z;
}

}  // namespace

TEST_CASE("project with zero weights is zero") {
  ModelState model = ModelState::init(tiny_config(), 1);
  zero_weights(model);
  const Matrix z = project(model, Matrix(3, 5, 2.0));
  for (const double v : z.data()) CHECK(v == 0.0);
}

TEST_CASE("project rows are independent of the batch around them") {
  ModelState model = ModelState::init(tiny_config(), 2);
  SeededRng rng(3);
  const Matrix batch = random_matrix(rng, 4, 5);
  const Matrix full = project(model, batch);
  const Matrix single = project(model, take_rows(batch, {2}));
  for (std::size_t c = 0; c < full.cols(); ++c) {
    CHECK(full.at(2, c) == single.at(0, c));
  }
}

TEST_CASE("project matches a hand-rolled forward oracle") {
  ModelState model = ModelState::init(tiny_config(), 4);
  SeededRng rng(5);
  const Matrix batch = random_matrix(rng, 3, 5);
  const Matrix z = project(model, batch);
  for (std::size_t r = 0; r < batch.rows(); ++r) {
    const auto want = project_row_oracle(model, batch.row(r));
    for (std::size_t c = 0; c < z.cols(); ++c) {
      CHECK(z.at(r, c) == doctest::Approx(want[c]).epsilon(1e-12));
    }
  }
  CHECK_THROWS_AS(project(model, Matrix(2, 7, 0.0)), ShapeError);
}

TEST_CASE("classify rows live on the probability simplex") {
  ModelState model = ModelState::init(tiny_config(0.2), 6);
  model.set_mode(Mode::Train);
  SeededRng rng(7);
  const Matrix z = random_matrix(rng, 8, 4, 2.0);
  const Matrix probs = classify(model, z);
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    CHECK(std::abs(probs.at(r, 0) + probs.at(r, 1) - 1.0) <= 1e-12);
    CHECK(probs.at(r, 0) >= 0.0);
    CHECK(probs.at(r, 1) >= 0.0);
  }
}

TEST_CASE("zero final layer gives the uniform distribution") {
  ModelState model = ModelState::init(tiny_config(), 8);
  std::fill(model.cls3.weight.data().begin(), model.cls3.weight.data().end(),
            0.0);
  std::fill(model.cls3.bias.begin(), model.cls3.bias.end(), 0.0);
  model.set_mode(Mode::Train);
  SeededRng rng(9);
  const Matrix probs = classify(model, random_matrix(rng, 4, 4));
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    CHECK(probs.at(r, 0) == 0.5);
    CHECK(probs.at(r, 1) == 0.5);
  }
}

TEST_CASE("train-mode classify matches an oracle using batch statistics") {
  ModelConfig cfg = tiny_config();  // dropout 0 keeps the oracle simple
  ModelState model = ModelState::init(cfg, 10);
  SeededRng rng(11);
  const Matrix z = random_matrix(rng, 5, 4);
  const Matrix probs = classify(model, z, ForwardOptions::frozen_train());

  // Oracle: linear, normalize by observed mean/variance, tanh, repeat,
  // linear, softmax.
  auto linear = [](const LinearLayer& l, const Matrix& x) {
    Matrix y(x.rows(), l.out_dim());
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t o = 0; o < l.out_dim(); ++o) {
        double s = l.bias[o];
        for (std::size_t i = 0; i < x.cols(); ++i) {
          s += l.weight.at(o, i) * x.at(r, i);
        }
        y.at(r, o) = s;
      }
    }
    return y;
  };
  auto bn_train = [&](const BatchNormState& bn, const Matrix& x) {
    Matrix y(x.rows(), x.cols());
    for (std::size_t j = 0; j < x.cols(); ++j) {
      double mu = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) mu += x.at(i, j);
      mu /= static_cast<double>(x.rows());
      double var = 0.0;
      for (std::size_t i = 0; i < x.rows(); ++i) {
        var += (x.at(i, j) - mu) * (x.at(i, j) - mu);
      }
      var /= static_cast<double>(x.rows());
      for (std::size_t i = 0; i < x.rows(); ++i) {
        y.at(i, j) = bn.gamma[j] * (x.at(i, j) - mu) /
                         std::sqrt(var + bn.epsilon) +
                     bn.beta[j];
      }
    }
    return y;
  };
  auto tanh_all = [](Matrix x) {
    for (auto& v : x.data()) v = std::tanh(v);
    return x;
  };
  Matrix a = tanh_all(bn_train(model.bn1, linear(model.cls1, z)));
  a = tanh_all(bn_train(model.bn2, linear(model.cls2, a)));
  const Matrix logits = linear(model.cls3, a);
  for (std::size_t r = 0; r < probs.rows(); ++r) {
    const double e0 = std::exp(logits.at(r, 0));
    const double e1 = std::exp(logits.at(r, 1));
    CHECK(probs.at(r, 0) == doctest::Approx(e0 / (e0 + e1)).epsilon(1e-12));
    CHECK(probs.at(r, 1) == doctest::Approx(e1 / (e0 + e1)).epsilon(1e-12));
  }
}

TEST_CASE("bn running estimates stay frozen at momentum zero") {
  BatchNormState bn;
  bn.gamma = {1.0, 1.0};
  bn.beta = {0.0, 0.0};
  bn.running_mean = {0.3, -0.2};
  bn.running_var = {1.5, 2.0};
  bn.momentum = 0.0;
  bn.initialized = true;
  SeededRng rng(13);
  const Matrix x = random_matrix(rng, 6, 2, 3.0);
  bn_forward(bn, x, true, true);
  CHECK(bn.running_mean == std::vector<double>{0.3, -0.2});
  CHECK(bn.running_var == std::vector<double>{1.5, 2.0});
}

TEST_CASE("bn single running update moves 0 toward 1 by the momentum") {
  BatchNormState bn;
  bn.gamma = {1.0};
  bn.beta = {0.0};
  bn.running_mean = {0.0};
  bn.running_var = {1.0};
  bn.momentum = 0.1;
  // Batch with mean exactly 1 and variance 1.
  const Matrix x = Matrix::from_rows({{0.0}, {2.0}});
  bn_forward(bn, x, true, true);
  CHECK(std::abs(bn.running_mean[0] - 0.1) <= 1e-15);
  CHECK(std::abs(bn.running_var[0] - (0.9 * 1.0 + 0.1 * 1.0)) <= 1e-15);
}

TEST_CASE("bn momentum one adopts the batch statistics exactly") {
  BatchNormState bn;
  bn.gamma.assign(3, 1.0);
  bn.beta.assign(3, 0.0);
  bn.running_mean.assign(3, 5.0);
  bn.running_var.assign(3, 9.0);
  bn.momentum = 1.0;
  SeededRng rng(15);
  const Matrix x = random_matrix(rng, 7, 3);
  BnCache cache;
  bn_forward(bn, x, true, true, &cache);
  for (std::size_t j = 0; j < 3; ++j) {
    CHECK(bn.running_mean[j] == cache.mean[j]);
    CHECK(bn.running_var[j] == cache.var[j]);
  }
}

TEST_CASE("bn train output has mean beta and variance gamma squared") {
  BatchNormState bn;
  bn.gamma = {2.0, 0.5};
  bn.beta = {1.0, -3.0};
  bn.running_mean.assign(2, 0.0);
  bn.running_var.assign(2, 1.0);
  SeededRng rng(17);
  const Matrix x = random_matrix(rng, 64, 2, 4.0);
  const Matrix y = bn_forward(bn, x, true, true);
  for (std::size_t j = 0; j < 2; ++j) {
    double mu = 0.0;
    for (std::size_t i = 0; i < y.rows(); ++i) mu += y.at(i, j);
    mu /= static_cast<double>(y.rows());
    double var = 0.0;
    for (std::size_t i = 0; i < y.rows(); ++i) {
      var += (y.at(i, j) - mu) * (y.at(i, j) - mu);
    }
    var /= static_cast<double>(y.rows());
    CHECK(std::abs(mu - bn.beta[j]) < 1e-6);
    // epsilon shrinks the achieved variance slightly below gamma^2
    CHECK(std::abs(var - bn.gamma[j] * bn.gamma[j]) < 1e-4);
  }
}

TEST_CASE("bn mode errors") {
  BatchNormState bn;
  bn.gamma = {1.0};
  bn.beta = {0.0};
  bn.running_mean = {0.0};
  bn.running_var = {1.0};
  CHECK_THROWS_AS(bn_forward(bn, Matrix(4, 1, 1.0), false, false), StateError);
  CHECK_THROWS_AS(bn_forward(bn, Matrix(1, 1, 1.0), true, true),
                  ParameterError);
}

TEST_CASE("dropout zeroes about the configured fraction and rescales") {
  SeededRng rng(19);
  const Matrix x(100, 100, 1.0);
  DropoutCache cache;
  const Matrix y = dropout_forward(x, 0.2, true, rng, &cache);
  std::size_t zeros = 0;
  for (const double v : y.data()) {
    if (v == 0.0) {
      ++zeros;
    } else {
      CHECK(v == doctest::Approx(1.0 / 0.8).epsilon(1e-12));
    }
  }
  const double fraction = static_cast<double>(zeros) / 1e4;
  CHECK(std::abs(fraction - 0.2) < 0.02);
  // Inactive mode is the identity.
  SeededRng rng2(19);
  const Matrix pass = dropout_forward(x, 0.2, false, rng2);
  CHECK(pass == x);
}

TEST_CASE("eval-mode forward is deterministic and pure") {
  ModelState model = ModelState::init(tiny_config(0.2), 20);
  SeededRng rng(21);
  const Matrix z = random_matrix(rng, 5, 4);
  // Prime the running estimates once.
  model.set_mode(Mode::Train);
  classify(model, z);
  model.set_mode(Mode::Eval);
  const std::uint64_t rng_before = model.rng.counter();
  const Matrix p1 = classify_eval(model, z);
  const Matrix p2 = classify_eval(model, z);
  CHECK(p1 == p2);
  CHECK(model.rng.counter() == rng_before);
}

TEST_CASE("backward of a zero upstream is a zero gradient") {
  ModelState model = ModelState::init(tiny_config(), 22);
  SeededRng rng(23);
  const Matrix z = random_matrix(rng, 4, 4);
  ClassifierCache cache;
  classify(model, z, ForwardOptions::frozen_train(), &cache);
  ParamGrads grads = ParamGrads::zeros_like(model);
  classifier_backward(model, cache, Matrix(4, 2, 0.0), grads);
  for (const double g : grads.cls1_w.data()) CHECK(g == 0.0);
  for (const double g : grads.bn1_gamma) CHECK(g == 0.0);
  for (const double g : grads.cls3_b) CHECK(g == 0.0);
}

TEST_CASE("backward without a recorded forward is a state error") {
  ModelState model = ModelState::init(tiny_config(), 24);
  ClassifierCache cache;  // never filled
  ParamGrads grads = ParamGrads::zeros_like(model);
  CHECK_THROWS_AS(classifier_backward(model, cache, Matrix(2, 2, 0.0), grads),
                  StateError);
  ProjectionCache pcache;
  CHECK_THROWS_AS(projection_backward(model, pcache, Matrix(2, 4, 0.0), grads),
                  StateError);
}

TEST_CASE("grad_check passes on the composite objective") {
  ModelState model = ModelState::init(tiny_config(), 26);
  SeededRng rng(27);
  const PairedBatch source{random_matrix(rng, 4, 5),
                           random_matrix(rng, 4, 5)};
  const PairedBatch target{random_matrix(rng, 4, 5),
                           random_matrix(rng, 4, 5)};
  const std::vector<int> labels{0, 1, 1, 0};
  LossWeights weights;  // defaults, median sigma resolved internally
  const GradCheckReport report =
      grad_check(model, source, labels, target, weights, false, 1e-3);
  CHECK(report.pass);
  CHECK(report.max_rel_error <= 1e-3);

  // Zero tolerance must fail on floating-point noise.
  const GradCheckReport strict =
      grad_check(model, source, labels, target, weights, false, 0.0);
  CHECK_FALSE(strict.pass);
}

TEST_CASE("a corrupted gradient is flagged against finite differences") {
  // Oracle-level check: doubling one analytic coordinate must push the
  // relative error far beyond any passing tolerance.
  SeededRng rng(29);
  const auto f = [](const std::vector<double>& x) {
    return x[0] * x[0] + 0.5 * x[1] * x[1];
  };
  const std::vector<double> x{0.7, -1.3};
  std::vector<double> analytic{2.0 * x[0], x[1]};
  analytic[0] *= 2.0;  // injected fault
  const auto fd = finite_diff_grad(f, x, 1e-5);
  const double rel = std::abs(analytic[0] - fd[0]) /
                     std::max(std::abs(analytic[0]), std::abs(fd[0]));
  CHECK(rel > 0.3);
}

TEST_CASE("doubling the MMD weight doubles its gradient share") {
  ModelState model = ModelState::init(tiny_config(), 30);
  SeededRng rng(31);
  const ObjectiveBatches batches{
      {random_matrix(rng, 4, 5), random_matrix(rng, 4, 5)},
      {0, 1, 0, 1},
      {random_matrix(rng, 4, 5), random_matrix(rng, 4, 5)}};
  LossWeights w;
  w.lambda_ce = 0.0;
  w.lambda_ctr = 0.0;
  w.lambda_mmd = 1.0;
  w.sigma = BandwidthPolicy::fixed(1.0);
  ModelState m1 = model;
  ParamGrads g1 = ParamGrads::zeros_like(m1);
  objective_forward_backward(m1, batches, w, false,
                             ForwardOptions::frozen_train(), &g1);
  w.lambda_mmd = 2.0;
  ModelState m2 = model;
  ParamGrads g2 = ParamGrads::zeros_like(m2);
  objective_forward_backward(m2, batches, w, false,
                             ForwardOptions::frozen_train(), &g2);
  for (std::size_t i = 0; i < g1.proj1_w.size(); ++i) {
    CHECK(g2.proj1_w.data()[i] ==
          doctest::Approx(2.0 * g1.proj1_w.data()[i]).epsilon(1e-12));
  }
}

TEST_CASE("adam leaves parameters alone under zero gradients") {
  std::vector<double> w{1.0, -2.0, 0.5};
  const std::vector<double> g(3, 0.0);
  std::vector<double> m, v;
  adam_update(w, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8);
  CHECK(w == std::vector<double>{1.0, -2.0, 0.5});
}

TEST_CASE("adam single step matches the hand-evaluated update") {
  std::vector<double> w{1.0};
  const std::vector<double> g{2.0};  // d/dw w^2 at w=1
  std::vector<double> m, v;
  adam_update(w, g, m, v, 1, 0.1, 0.9, 0.999, 1e-8);
  CHECK(w[0] == doctest::Approx(0.9000000005).epsilon(1e-12));
}

TEST_CASE("adam converges on a shifted quadratic") {
  std::vector<double> w{0.0};
  std::vector<double> m, v;
  for (std::size_t step = 1; step <= 200; ++step) {
    const std::vector<double> g{2.0 * (w[0] - 3.0)};
    adam_update(w, g, m, v, step, 0.1, 0.9, 0.999, 1e-8);
  }
  CHECK(std::abs(w[0] - 3.0) < 0.05);
}

TEST_CASE("adam_step rejects mismatched shapes") {
  ModelState model = ModelState::init(tiny_config(), 32);
  AdamState opt;
  ParamGrads grads = ParamGrads::zeros_like(model);
  grads.cls1_b.resize(2);
  CHECK_THROWS_AS(adam_step(opt, model, grads, 0.1), ShapeError);
}

TEST_CASE("checkpoint round-trip is lossless to the byte") {
  ModelState model = ModelState::init(tiny_config(0.2), 34);
  SeededRng rng(35);
  // Touch BN statistics and the dropout RNG so every field is non-trivial.
  model.set_mode(Mode::Train);
  classify(model, random_matrix(rng, 4, 4));
  model.set_mode(Mode::Eval);

  const std::string path1 = "checkpoint_roundtrip_1.json";
  const std::string path2 = "checkpoint_roundtrip_2.json";
  save_checkpoint(model, path1);
  const ModelState loaded = load_checkpoint(path1);
  save_checkpoint(loaded, path2);

  std::ifstream f1(path1, std::ios::binary);
  std::ifstream f2(path2, std::ios::binary);
  std::stringstream s1, s2;
  s1 << f1.rdbuf();
  s2 << f2.rdbuf();
  CHECK(s1.str() == s2.str());

  CHECK(loaded.proj1.weight == model.proj1.weight);
  CHECK(loaded.cls2.bias == model.cls2.bias);
  CHECK(loaded.bn1.running_mean == model.bn1.running_mean);
  CHECK(loaded.bn2.running_var == model.bn2.running_var);
  CHECK(loaded.bn1.initialized == model.bn1.initialized);
  CHECK(loaded.rng.counter() == model.rng.counter());
  CHECK(loaded.init_seed == model.init_seed);
  std::remove(path1.c_str());
  std::remove(path2.c_str());
}

TEST_CASE("load_checkpoint rejects broken files") {
  const std::string path = "checkpoint_broken.json";
  {
    std::ofstream out(path);
    out << "{ not json";
  }
  CHECK_THROWS_AS(load_checkpoint(path), ParseError);
  {
    std::ofstream out(path);
    out << "{\"format\": \"something-else\"}";
  }
  CHECK_THROWS_AS(load_checkpoint(path), SchemaError);
  CHECK_THROWS_AS(load_checkpoint("does_not_exist.json"), IoError);
  std::remove(path.c_str());
}

TEST_CASE("model config validation") {
  ModelConfig cfg = tiny_config();
  cfg.dropout_rate = 1.0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = tiny_config();
  cfg.num_classes = 3;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
  cfg = tiny_config();
  cfg.input_dim = 0;
  CHECK_THROWS_AS(cfg.validate(), ParameterError);
}
