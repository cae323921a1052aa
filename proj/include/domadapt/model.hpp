#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "domadapt/losses.hpp"
#include "domadapt/matrix.hpp"
#include "domadapt/rng.hpp"

namespace domadapt {

enum class Mode { Train, Eval };

struct ModelConfig {
  std::size_t input_dim = 768;
  std::size_t proj_hidden = 768;
  std::size_t proj_out = 500;
  std::size_t cls_hidden = 768;
  std::size_t num_classes = 2;
  double dropout_rate = 0.2;
  double bn_momentum = 0.1;
  double bn_epsilon = 1e-5;

  // Paper-shaped dims for 768-wide embeddings, proportionally scaled
  // otherwise (proj d -> 2d -> d, classifier d -> 2d -> 2d -> 2).
  static ModelConfig for_dim(std::size_t input_dim);

  void validate() const;
};

struct LinearLayer {
  Matrix weight;             // out x in
  std::vector<double> bias;  // out

  std::size_t in_dim() const { return weight.cols(); }
  std::size_t out_dim() const { return weight.rows(); }
};

struct BatchNormState {
  std::vector<double> gamma;
  std::vector<double> beta;
  std::vector<double> running_mean;
  std::vector<double> running_var;
  double momentum = 0.1;
  double epsilon = 1e-5;
  bool initialized = false;  // running estimates have seen at least one batch

  std::size_t dim() const { return gamma.size(); }
};

// Per-layer records from a forward pass, consumed by the backward pass.
struct LinearCache {
  Matrix input;
  bool recorded = false;
};
struct TanhCache {
  Matrix output;
  bool recorded = false;
};
struct BnCache {
  Matrix input;
  Matrix x_hat;
  std::vector<double> mean;
  std::vector<double> var;
  bool train = false;
  bool recorded = false;
};
struct DropoutCache {
  Matrix mask;  // 0 or 1/(1-rate) per unit
  bool active = false;
  bool recorded = false;
};

struct ProjectionCache {
  LinearCache lin1;
  TanhCache act;
  LinearCache lin2;
};

struct ClassifierCache {
  DropoutCache drop1;
  LinearCache lin1;
  BnCache bn1;
  TanhCache act1;
  LinearCache lin2;
  BnCache bn2;
  TanhCache act2;
  DropoutCache drop2;
  LinearCache lin3;
  Matrix probs;
};

// Projection head plus classifier. Projection: linear, tanh, linear.
// Classifier: dropout, linear, batch norm, tanh, linear, batch norm, tanh,
// dropout, linear, softmax.
struct ModelState {
  ModelConfig config;
  LinearLayer proj1;
  LinearLayer proj2;
  LinearLayer cls1;
  LinearLayer cls2;
  LinearLayer cls3;
  BatchNormState bn1;
  BatchNormState bn2;
  SeededRng rng{0};  // dropout masks
  Mode mode = Mode::Eval;
  std::uint64_t init_seed = 0;

  // Weights uniform in +-1/sqrt(fan_in), biases zero, from the given seed.
  static ModelState init(const ModelConfig& config, std::uint64_t seed);

  void set_mode(Mode m) { mode = m; }
};

// How a classifier forward treats its stochastic/stateful layers. Train
// mode is {true, true, true}; eval is {false, false, false}; the test-time
// adaptation pass is {true, false, true}.
struct ForwardOptions {
  bool bn_train = false;
  bool dropout_active = false;
  bool update_running = false;

  static ForwardOptions train() { return {true, true, true}; }
  static ForwardOptions eval() { return {false, false, false}; }
  static ForwardOptions bn_stats_only() { return {true, false, true}; }
  // Deterministic train-mode forward for finite differencing.
  static ForwardOptions frozen_train() { return {true, false, false}; }
};

Matrix linear_forward(const LinearLayer& layer, const Matrix& x,
                      LinearCache* cache = nullptr);
Matrix tanh_forward(const Matrix& x, TanhCache* cache = nullptr);
Matrix softmax_rows(const Matrix& logits);

// Train mode normalizes by batch statistics (batch size >= 2) and, when
// update_running is set, folds them into the running estimates. Eval mode
// requires initialized running estimates.
Matrix bn_forward(BatchNormState& bn, const Matrix& x, bool train,
                  bool update_running = true, BnCache* cache = nullptr);

// Inverted dropout: survivors scale by 1/(1-rate) so eval is the identity.
Matrix dropout_forward(const Matrix& x, double rate, bool active,
                       SeededRng& rng, DropoutCache* cache = nullptr);

// z = linear2(tanh(linear1(x))); no stochastic layers, pure.
Matrix project(const ModelState& model, const Matrix& x,
               ProjectionCache* cache = nullptr);

// Softmax class probabilities; honors the model's mode unless options are
// given explicitly.
Matrix classify(ModelState& model, const Matrix& z,
                ClassifierCache* cache = nullptr);
Matrix classify(ModelState& model, const Matrix& z,
                const ForwardOptions& options,
                ClassifierCache* cache = nullptr);
// Pure eval-mode forward; StateError if BN statistics are uninitialized.
Matrix classify_eval(const ModelState& model, const Matrix& z);

// Gradients for every trainable parameter. BN running estimates are
// statistics, not parameters, and never receive gradients.
struct ParamGrads {
  Matrix proj1_w;
  std::vector<double> proj1_b;
  Matrix proj2_w;
  std::vector<double> proj2_b;
  Matrix cls1_w;
  std::vector<double> cls1_b;
  std::vector<double> bn1_gamma;
  std::vector<double> bn1_beta;
  Matrix cls2_w;
  std::vector<double> cls2_b;
  std::vector<double> bn2_gamma;
  std::vector<double> bn2_beta;
  Matrix cls3_w;
  std::vector<double> cls3_b;

  static ParamGrads zeros_like(const ModelState& model);
};

// d(loss)/d(logits) in, parameter gradients accumulated, d(loss)/d(z) out.
// StateError if the cache was not recorded by a matching forward.
Matrix classifier_backward(const ModelState& model,
                           const ClassifierCache& cache,
                           const Matrix& d_logits, ParamGrads& grads);

// d(loss)/d(z) in, parameter gradients accumulated, d(loss)/d(x) returned.
Matrix projection_backward(const ModelState& model,
                           const ProjectionCache& cache, const Matrix& d_z,
                           ParamGrads& grads);

// Fused softmax + mean cross-entropy gradient: (probs - onehot) / b,
// scaled by `weight`.
Matrix softmax_cross_entropy_backward(const Matrix& probs,
                                      const std::vector<int>& labels,
                                      double weight);

// One training step's worth of inputs to the weighted objective: a labeled
// source anchor/augment pair and an unlabeled target pair, all in input
// space.
struct ObjectiveBatches {
  PairedBatch source;
  std::vector<int> source_labels;
  PairedBatch target;
};

struct ObjectiveValue {
  double total = 0.0;
  double ce_source = 0.0;
  double ce_augment = 0.0;
  double ctr_source = 0.0;
  double ctr_target = 0.0;
  double mmd = 0.0;
  double sigma = 0.0;  // resolved bandwidth; 0 when the MMD term is off
};

// Evaluates the weighted objective on one step's batches: cross-entropy on
// source anchors and augments (through the classifier), contrastive losses
// on the source and target pairs in projected space, and MMD between the
// projected source and target anchors. Terms with zero weight are skipped
// and reported as 0. When grads is non-null, exact reverse-mode gradients
// of the whole objective accumulate into it.
ObjectiveValue objective_forward_backward(ModelState& model,
                                          const ObjectiveBatches& batches,
                                          const LossWeights& weights,
                                          bool symmetrize,
                                          const ForwardOptions& options,
                                          ParamGrads* grads);

// Fixed-order traversal of all trainable parameters, paired with their
// gradients. Visitor signature: f(name, values span, grads span).
template <typename F>
void for_each_param(ModelState& model, const ParamGrads& grads, F&& f) {
  auto mat = [&](const char* name, Matrix& w, const Matrix& g) {
    f(name, std::span<double>(w.data()), std::span<const double>(g.data()));
  };
  auto vec = [&](const char* name, std::vector<double>& w,
                 const std::vector<double>& g) {
    f(name, std::span<double>(w), std::span<const double>(g));
  };
  mat("proj1.weight", model.proj1.weight, grads.proj1_w);
  vec("proj1.bias", model.proj1.bias, grads.proj1_b);
  mat("proj2.weight", model.proj2.weight, grads.proj2_w);
  vec("proj2.bias", model.proj2.bias, grads.proj2_b);
  mat("cls1.weight", model.cls1.weight, grads.cls1_w);
  vec("cls1.bias", model.cls1.bias, grads.cls1_b);
  vec("bn1.gamma", model.bn1.gamma, grads.bn1_gamma);
  vec("bn1.beta", model.bn1.beta, grads.bn1_beta);
  mat("cls2.weight", model.cls2.weight, grads.cls2_w);
  vec("cls2.bias", model.cls2.bias, grads.cls2_b);
  vec("bn2.gamma", model.bn2.gamma, grads.bn2_gamma);
  vec("bn2.beta", model.bn2.beta, grads.bn2_beta);
  mat("cls3.weight", model.cls3.weight, grads.cls3_w);
  vec("cls3.bias", model.cls3.bias, grads.cls3_b);
}

struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t step_count = 0;
  std::vector<std::vector<double>> first_moment;
  std::vector<std::vector<double>> second_moment;
};

// In-place single-tensor Adam update with bias correction.
void adam_update(std::span<double> values, std::span<const double> grads,
                 std::vector<double>& m, std::vector<double>& v,
                 std::size_t step, double lr, double beta1, double beta2,
                 double epsilon);

// One Adam step over every parameter of the model.
void adam_step(AdamState& opt, ModelState& model, const ParamGrads& grads,
               double lr);

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::string worst_param;
  double tolerance = 0.0;
  bool pass = false;
};

// Compares analytic gradients of the weighted composite objective
// (cross-entropy + contrastive + MMD, fixed-sigma kernel, dropout frozen
// off, BN on batch statistics) against central finite differences over
// every parameter.
GradCheckReport grad_check(const ModelState& model, const PairedBatch& source,
                           const std::vector<int>& source_labels,
                           const PairedBatch& target,
                           const LossWeights& weights, bool symmetrize,
                           double tolerance, double fd_step = 1e-5);

// Lossless JSON checkpoint (bit-exact doubles, shortest round-trip form).
void save_checkpoint(const ModelState& model, const std::string& path);
ModelState load_checkpoint(const std::string& path);

}  // namespace domadapt
