#include "domadapt/model.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "domadapt/errors.hpp"
#include "domadapt/numdiff.hpp"
#include "json.hpp"

namespace domadapt {

namespace {

using nlohmann::json;

void fill_uniform(SeededRng& rng, std::vector<double>& v, double bound) {
  for (double& x : v) x = rng.next_uniform(-bound, bound);
}

LinearLayer init_linear(SeededRng& rng, std::size_t out, std::size_t in) {
  LinearLayer layer{Matrix(out, in), std::vector<double>(out)};
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  fill_uniform(rng, layer.weight.data(), bound);
  fill_uniform(rng, layer.bias, bound);
  return layer;
}

BatchNormState init_bn(std::size_t dim, double momentum, double epsilon) {
  BatchNormState bn;
  bn.gamma.assign(dim, 1.0);
  bn.beta.assign(dim, 0.0);
  bn.running_mean.assign(dim, 0.0);
  bn.running_var.assign(dim, 1.0);
  bn.momentum = momentum;
  bn.epsilon = epsilon;
  bn.initialized = false;
  return bn;
}

void require_recorded(bool recorded, const char* what) {
  if (!recorded) {
    throw StateError(std::string(what) +
                     ": backward without a recorded forward");
  }
}

Matrix tanh_backward(const TanhCache& cache, const Matrix& d_out) {
  require_recorded(cache.recorded, "tanh");
  Matrix d_in = d_out;
  for (std::size_t i = 0; i < d_in.size(); ++i) {
    const double y = cache.output.data()[i];
    d_in.data()[i] *= 1.0 - y * y;
  }
  return d_in;
}

Matrix dropout_backward(const DropoutCache& cache, const Matrix& d_out) {
  require_recorded(cache.recorded, "dropout");
  if (!cache.active) return d_out;
  return hadamard(d_out, cache.mask);
}

// dW = dY^T X, db = column sums of dY, dX = dY W.
Matrix linear_backward(const LinearLayer& layer, const LinearCache& cache,
                       const Matrix& d_out, Matrix& d_weight,
                       std::vector<double>& d_bias) {
  require_recorded(cache.recorded, "linear");
  const Matrix dw = matmul(transpose(d_out), cache.input);
  d_weight = add(d_weight, dw);
  const auto db = column_sums(d_out);
  for (std::size_t i = 0; i < d_bias.size(); ++i) d_bias[i] += db[i];
  return matmul(d_out, layer.weight);
}

Matrix bn_backward(const BatchNormState& bn, const BnCache& cache,
                   const Matrix& d_out, std::vector<double>& d_gamma,
                   std::vector<double>& d_beta) {
  require_recorded(cache.recorded, "batch norm");
  const std::size_t b = cache.input.rows();
  const std::size_t c = cache.input.cols();
  Matrix d_in(b, c);

  if (!cache.train) {
    for (std::size_t j = 0; j < c; ++j) {
      const double s = 1.0 / std::sqrt(bn.running_var[j] + bn.epsilon);
      for (std::size_t i = 0; i < b; ++i) {
        d_gamma[j] += d_out.at(i, j) * cache.x_hat.at(i, j);
        d_beta[j] += d_out.at(i, j);
        d_in.at(i, j) = d_out.at(i, j) * bn.gamma[j] * s;
      }
    }
    return d_in;
  }

  const double bd = static_cast<double>(b);
  for (std::size_t j = 0; j < c; ++j) {
    const double inv_std = 1.0 / std::sqrt(cache.var[j] + bn.epsilon);
    double sum_dxhat = 0.0;
    double sum_dxhat_xc = 0.0;
    double sum_xc = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
      const double dy = d_out.at(i, j);
      d_gamma[j] += dy * cache.x_hat.at(i, j);
      d_beta[j] += dy;
      const double dxhat = dy * bn.gamma[j];
      const double xc = cache.input.at(i, j) - cache.mean[j];
      sum_dxhat += dxhat;
      sum_dxhat_xc += dxhat * xc;
      sum_xc += xc;
    }
    const double d_var =
        sum_dxhat_xc * (-0.5) * inv_std * inv_std * inv_std;
    const double d_mean =
        -inv_std * sum_dxhat + d_var * (-2.0 / bd) * sum_xc;
    for (std::size_t i = 0; i < b; ++i) {
      const double dxhat = d_out.at(i, j) * bn.gamma[j];
      const double xc = cache.input.at(i, j) - cache.mean[j];
      d_in.at(i, j) =
          dxhat * inv_std + d_var * 2.0 * xc / bd + d_mean / bd;
    }
  }
  return d_in;
}

}  // namespace

ModelConfig ModelConfig::for_dim(std::size_t input_dim) {
  if (input_dim == 768) return {};
  ModelConfig cfg;
  cfg.input_dim = input_dim;
  cfg.proj_hidden = 2 * input_dim;
  cfg.proj_out = input_dim;
  cfg.cls_hidden = 2 * input_dim;
  return cfg;
}

void ModelConfig::validate() const {
  if (input_dim == 0 || proj_hidden == 0 || proj_out == 0 || cls_hidden == 0) {
    throw ParameterError("ModelConfig: dimensions must be >= 1");
  }
  if (num_classes != 2) {
    throw ParameterError("ModelConfig: classifier is binary (2 classes)");
  }
  if (dropout_rate < 0.0 || dropout_rate >= 1.0) {
    throw ParameterError("ModelConfig: dropout rate must be in [0, 1)");
  }
  if (bn_momentum < 0.0 || bn_momentum > 1.0) {
    throw ParameterError("ModelConfig: BN momentum must be in [0, 1]");
  }
  if (!(bn_epsilon > 0.0)) {
    throw ParameterError("ModelConfig: BN epsilon must be > 0");
  }
}

ModelState ModelState::init(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ModelState m;
  m.config = config;
  m.init_seed = seed;
  SeededRng root(seed);
  SeededRng weights = root.fork(1);
  m.proj1 = init_linear(weights, config.proj_hidden, config.input_dim);
  m.proj2 = init_linear(weights, config.proj_out, config.proj_hidden);
  m.cls1 = init_linear(weights, config.cls_hidden, config.proj_out);
  m.cls2 = init_linear(weights, config.cls_hidden, config.cls_hidden);
  m.cls3 = init_linear(weights, config.num_classes, config.cls_hidden);
  m.bn1 = init_bn(config.cls_hidden, config.bn_momentum, config.bn_epsilon);
  m.bn2 = init_bn(config.cls_hidden, config.bn_momentum, config.bn_epsilon);
  m.rng = root.fork(2);
  m.mode = Mode::Eval;
  return m;
}

Matrix linear_forward(const LinearLayer& layer, const Matrix& x,
                      LinearCache* cache) {
  if (x.cols() != layer.in_dim()) {
    throw ShapeError("linear_forward: input width " +
                     std::to_string(x.cols()) + " vs layer fan-in " +
                     std::to_string(layer.in_dim()));
  }
  Matrix y = matmul(x, transpose(layer.weight));
  for (std::size_t i = 0; i < y.rows(); ++i) {
    for (std::size_t j = 0; j < y.cols(); ++j) y.at(i, j) += layer.bias[j];
  }
  if (cache != nullptr) {
    cache->input = x;
    cache->recorded = true;
  }
  return y;
}

Matrix tanh_forward(const Matrix& x, TanhCache* cache) {
  Matrix y = x;
  for (double& v : y.data()) v = std::tanh(v);
  if (cache != nullptr) {
    cache->output = y;
    cache->recorded = true;
  }
  return y;
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix probs(logits.rows(), logits.cols());
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    double max_v = logits.at(i, 0);
    for (std::size_t j = 1; j < logits.cols(); ++j) {
      max_v = std::max(max_v, logits.at(i, j));
    }
    double sum = 0.0;
    for (std::size_t j = 0; j < logits.cols(); ++j) {
      const double e = std::exp(logits.at(i, j) - max_v);
      probs.at(i, j) = e;
      sum += e;
    }
    for (std::size_t j = 0; j < logits.cols(); ++j) probs.at(i, j) /= sum;
  }
  probs.require_finite("softmax_rows");
  return probs;
}

Matrix bn_forward(BatchNormState& bn, const Matrix& x, bool train,
                  bool update_running, BnCache* cache) {
  if (x.cols() != bn.dim()) {
    throw ShapeError("bn_forward: width " + std::to_string(x.cols()) +
                     " vs state dim " + std::to_string(bn.dim()));
  }
  const std::size_t b = x.rows();
  const std::size_t c = x.cols();
  Matrix x_hat(b, c);
  Matrix y(b, c);

  if (train) {
    if (b < 2) {
      throw ParameterError(
          "bn_forward: train mode needs batch size >= 2, got " +
          std::to_string(b));
    }
    std::vector<double> mean(c, 0.0);
    std::vector<double> var(c, 0.0);
    for (std::size_t j = 0; j < c; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < b; ++i) s += x.at(i, j);
      mean[j] = s / static_cast<double>(b);
      double v = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const double d = x.at(i, j) - mean[j];
        v += d * d;
      }
      var[j] = v / static_cast<double>(b);  // biased batch statistic
    }
    for (std::size_t j = 0; j < c; ++j) {
      const double inv_std = 1.0 / std::sqrt(var[j] + bn.epsilon);
      for (std::size_t i = 0; i < b; ++i) {
        const double xh = (x.at(i, j) - mean[j]) * inv_std;
        x_hat.at(i, j) = xh;
        y.at(i, j) = bn.gamma[j] * xh + bn.beta[j];
      }
    }
    if (update_running) {
      const double rho = bn.momentum;
      for (std::size_t j = 0; j < c; ++j) {
        bn.running_mean[j] = (1.0 - rho) * bn.running_mean[j] + rho * mean[j];
        bn.running_var[j] = (1.0 - rho) * bn.running_var[j] + rho * var[j];
      }
      bn.initialized = true;
    }
    if (cache != nullptr) {
      cache->input = x;
      cache->x_hat = x_hat;
      cache->mean = std::move(mean);
      cache->var = std::move(var);
      cache->train = true;
      cache->recorded = true;
    }
  } else {
    if (!bn.initialized) {
      throw StateError("bn_forward: eval mode with uninitialized running "
                       "estimates");
    }
    for (std::size_t j = 0; j < c; ++j) {
      const double inv_std = 1.0 / std::sqrt(bn.running_var[j] + bn.epsilon);
      for (std::size_t i = 0; i < b; ++i) {
        const double xh = (x.at(i, j) - bn.running_mean[j]) * inv_std;
        x_hat.at(i, j) = xh;
        y.at(i, j) = bn.gamma[j] * xh + bn.beta[j];
      }
    }
    if (cache != nullptr) {
      cache->input = x;
      cache->x_hat = x_hat;
      cache->mean.clear();
      cache->var.clear();
      cache->train = false;
      cache->recorded = true;
    }
  }
  y.require_finite("bn_forward");
  return y;
}

Matrix dropout_forward(const Matrix& x, double rate, bool active,
                       SeededRng& rng, DropoutCache* cache) {
  if (rate < 0.0 || rate >= 1.0) {
    throw ParameterError("dropout_forward: rate must be in [0, 1)");
  }
  if (!active || rate == 0.0) {
    if (cache != nullptr) {
      cache->active = false;
      cache->recorded = true;
    }
    return x;
  }
  const double keep_scale = 1.0 / (1.0 - rate);
  Matrix mask(x.rows(), x.cols());
  for (double& m : mask.data()) {
    m = (rng.next_unit() >= rate) ? keep_scale : 0.0;
  }
  if (cache != nullptr) {
    cache->mask = mask;
    cache->active = true;
    cache->recorded = true;
  }
  return hadamard(x, mask);
}

Matrix project(const ModelState& model, const Matrix& x,
               ProjectionCache* cache) {
  if (x.cols() != model.config.input_dim) {
    throw ShapeError("project: input width " + std::to_string(x.cols()) +
                     " vs configured " +
                     std::to_string(model.config.input_dim));
  }
  const Matrix h = linear_forward(model.proj1, x,
                                  cache != nullptr ? &cache->lin1 : nullptr);
  const Matrix a =
      tanh_forward(h, cache != nullptr ? &cache->act : nullptr);
  return linear_forward(model.proj2, a,
                        cache != nullptr ? &cache->lin2 : nullptr);
}

Matrix classify(ModelState& model, const Matrix& z, ClassifierCache* cache) {
  const ForwardOptions options = (model.mode == Mode::Train)
                                     ? ForwardOptions::train()
                                     : ForwardOptions::eval();
  return classify(model, z, options, cache);
}

Matrix classify(ModelState& model, const Matrix& z,
                const ForwardOptions& options, ClassifierCache* cache) {
  if (z.cols() != model.config.proj_out) {
    throw ShapeError("classify: input width " + std::to_string(z.cols()) +
                     " vs projection output " +
                     std::to_string(model.config.proj_out));
  }
  const double rate = model.config.dropout_rate;
  auto* c = cache;
  const Matrix a0 = dropout_forward(z, rate, options.dropout_active, model.rng,
                                    c ? &c->drop1 : nullptr);
  const Matrix a1 = linear_forward(model.cls1, a0, c ? &c->lin1 : nullptr);
  const Matrix a2 = bn_forward(model.bn1, a1, options.bn_train,
                               options.update_running, c ? &c->bn1 : nullptr);
  const Matrix a3 = tanh_forward(a2, c ? &c->act1 : nullptr);
  const Matrix a4 = linear_forward(model.cls2, a3, c ? &c->lin2 : nullptr);
  const Matrix a5 = bn_forward(model.bn2, a4, options.bn_train,
                               options.update_running, c ? &c->bn2 : nullptr);
  const Matrix a6 = tanh_forward(a5, c ? &c->act2 : nullptr);
  const Matrix a7 = dropout_forward(a6, rate, options.dropout_active,
                                    model.rng, c ? &c->drop2 : nullptr);
  const Matrix logits = linear_forward(model.cls3, a7, c ? &c->lin3 : nullptr);
  Matrix probs = softmax_rows(logits);
  if (c != nullptr) c->probs = probs;
  return probs;
}

Matrix classify_eval(const ModelState& model, const Matrix& z) {
  // Eval forward touches neither BN statistics nor the RNG.
  ModelState& mutable_view = const_cast<ModelState&>(model);
  return classify(mutable_view, z, ForwardOptions::eval(), nullptr);
}

ParamGrads ParamGrads::zeros_like(const ModelState& model) {
  ParamGrads g;
  g.proj1_w = Matrix(model.proj1.out_dim(), model.proj1.in_dim());
  g.proj1_b.assign(model.proj1.out_dim(), 0.0);
  g.proj2_w = Matrix(model.proj2.out_dim(), model.proj2.in_dim());
  g.proj2_b.assign(model.proj2.out_dim(), 0.0);
  g.cls1_w = Matrix(model.cls1.out_dim(), model.cls1.in_dim());
  g.cls1_b.assign(model.cls1.out_dim(), 0.0);
  g.bn1_gamma.assign(model.bn1.dim(), 0.0);
  g.bn1_beta.assign(model.bn1.dim(), 0.0);
  g.cls2_w = Matrix(model.cls2.out_dim(), model.cls2.in_dim());
  g.cls2_b.assign(model.cls2.out_dim(), 0.0);
  g.bn2_gamma.assign(model.bn2.dim(), 0.0);
  g.bn2_beta.assign(model.bn2.dim(), 0.0);
  g.cls3_w = Matrix(model.cls3.out_dim(), model.cls3.in_dim());
  g.cls3_b.assign(model.cls3.out_dim(), 0.0);
  return g;
}

Matrix classifier_backward(const ModelState& model,
                           const ClassifierCache& cache,
                           const Matrix& d_logits, ParamGrads& grads) {
  const Matrix d_a7 = linear_backward(model.cls3, cache.lin3, d_logits,
                                      grads.cls3_w, grads.cls3_b);
  const Matrix d_a6 = dropout_backward(cache.drop2, d_a7);
  const Matrix d_a5 = tanh_backward(cache.act2, d_a6);
  const Matrix d_a4 = bn_backward(model.bn2, cache.bn2, d_a5, grads.bn2_gamma,
                                  grads.bn2_beta);
  const Matrix d_a3 = linear_backward(model.cls2, cache.lin2, d_a4,
                                      grads.cls2_w, grads.cls2_b);
  const Matrix d_a2 = tanh_backward(cache.act1, d_a3);
  const Matrix d_a1 = bn_backward(model.bn1, cache.bn1, d_a2, grads.bn1_gamma,
                                  grads.bn1_beta);
  const Matrix d_a0 = linear_backward(model.cls1, cache.lin1, d_a1,
                                      grads.cls1_w, grads.cls1_b);
  return dropout_backward(cache.drop1, d_a0);
}

Matrix projection_backward(const ModelState& model,
                           const ProjectionCache& cache, const Matrix& d_z,
                           ParamGrads& grads) {
  const Matrix d_a = linear_backward(model.proj2, cache.lin2, d_z,
                                     grads.proj2_w, grads.proj2_b);
  const Matrix d_h = tanh_backward(cache.act, d_a);
  return linear_backward(model.proj1, cache.lin1, d_h, grads.proj1_w,
                         grads.proj1_b);
}

Matrix softmax_cross_entropy_backward(const Matrix& probs,
                                      const std::vector<int>& labels,
                                      double weight) {
  if (probs.rows() != labels.size()) {
    throw ShapeError("softmax_cross_entropy_backward: rows vs labels");
  }
  Matrix d_logits = probs;
  const double scale = weight / static_cast<double>(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    if (labels[i] != 0 && labels[i] != 1) {
      throw ParameterError("softmax_cross_entropy_backward: label must be 0 "
                           "or 1");
    }
    d_logits.at(i, static_cast<std::size_t>(labels[i])) -= 1.0;
    for (std::size_t j = 0; j < probs.cols(); ++j) d_logits.at(i, j) *= scale;
  }
  return d_logits;
}

void adam_update(std::span<double> values, std::span<const double> grads,
                 std::vector<double>& m, std::vector<double>& v,
                 std::size_t step, double lr, double beta1, double beta2,
                 double epsilon) {
  if (values.size() != grads.size()) {
    throw ShapeError("adam_update: parameter vs gradient size mismatch");
  }
  if (m.size() != values.size()) m.assign(values.size(), 0.0);
  if (v.size() != values.size()) v.assign(values.size(), 0.0);
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < values.size(); ++i) {
    m[i] = beta1 * m[i] + (1.0 - beta1) * grads[i];
    v[i] = beta2 * v[i] + (1.0 - beta2) * grads[i] * grads[i];
    const double m_hat = m[i] / bc1;
    const double v_hat = v[i] / bc2;
    values[i] -= lr * m_hat / (std::sqrt(v_hat) + epsilon);
  }
}

void adam_step(AdamState& opt, ModelState& model, const ParamGrads& grads,
               double lr) {
  if (!(lr > 0.0)) {
    throw ParameterError("adam_step: learning rate must be > 0");
  }
  ++opt.step_count;
  std::size_t slot = 0;
  for_each_param(model, grads,
                 [&](const char*, std::span<double> values,
                     std::span<const double> g) {
                   if (opt.first_moment.size() <= slot) {
                     opt.first_moment.emplace_back();
                     opt.second_moment.emplace_back();
                   }
                   adam_update(values, g, opt.first_moment[slot],
                               opt.second_moment[slot], opt.step_count, lr,
                               opt.beta1, opt.beta2, opt.epsilon);
                   ++slot;
                 });
}

ObjectiveValue objective_forward_backward(ModelState& model,
                                          const ObjectiveBatches& batches,
                                          const LossWeights& weights,
                                          bool symmetrize,
                                          const ForwardOptions& options,
                                          ParamGrads* grads) {
  weights.validate();
  batches.source.validate();
  batches.target.validate();
  if (batches.source.batch_size() != batches.source_labels.size()) {
    throw ShapeError("objective: source labels vs batch size");
  }
  const bool want_grads = grads != nullptr;
  const bool use_ctr = weights.lambda_ctr > 0.0;
  const bool use_mmd = weights.lambda_mmd > 0.0;

  ProjectionCache pc_s, pc_aug, pc_t, pc_t_aug;
  const Matrix z_s =
      project(model, batches.source.anchors, want_grads ? &pc_s : nullptr);
  const Matrix z_s_aug =
      project(model, batches.source.augments, want_grads ? &pc_aug : nullptr);
  const Matrix z_t =
      project(model, batches.target.anchors, want_grads ? &pc_t : nullptr);
  Matrix z_t_aug;
  if (use_ctr) {
    z_t_aug = project(model, batches.target.augments,
                      want_grads ? &pc_t_aug : nullptr);
  }

  ClassifierCache cc_s, cc_aug;
  const Matrix probs_s =
      classify(model, z_s, options, want_grads ? &cc_s : nullptr);
  const Matrix probs_aug =
      classify(model, z_s_aug, options, want_grads ? &cc_aug : nullptr);

  ObjectiveValue value;
  value.ce_source = cross_entropy_batch(probs_s, batches.source_labels);
  value.ce_augment = cross_entropy_batch(probs_aug, batches.source_labels);
  if (use_ctr) {
    value.ctr_source = contrastive_loss({z_s, z_s_aug}, weights.temperature,
                                        symmetrize);
    value.ctr_target = contrastive_loss({z_t, z_t_aug}, weights.temperature,
                                        symmetrize);
  }
  if (use_mmd) {
    value.sigma = resolve_sigma(weights.sigma, vstack(z_s, z_t));
    value.mmd = empirical_mmd(z_s, z_t, value.sigma);
  }
  value.total = total_loss(value.ce_source, value.ce_augment,
                           value.ctr_source, value.ctr_target, value.mmd,
                           weights);
  if (!want_grads) return value;

  // Cross-entropy path: through the classifier into the projected space.
  const double ce_w = 0.5 * weights.lambda_ce;
  Matrix d_z_s(z_s.rows(), z_s.cols());
  Matrix d_z_aug(z_s.rows(), z_s.cols());
  Matrix d_z_t(z_t.rows(), z_t.cols());
  Matrix d_z_t_aug;
  if (weights.lambda_ce > 0.0) {
    const Matrix dl_s =
        softmax_cross_entropy_backward(probs_s, batches.source_labels, ce_w);
    d_z_s = add(d_z_s, classifier_backward(model, cc_s, dl_s, *grads));
    const Matrix dl_aug =
        softmax_cross_entropy_backward(probs_aug, batches.source_labels, ce_w);
    d_z_aug = add(d_z_aug, classifier_backward(model, cc_aug, dl_aug, *grads));
  }
  if (use_ctr) {
    const double w = 0.5 * weights.lambda_ctr;
    auto [ds, daug] = contrastive_loss_backward({z_s, z_s_aug},
                                                weights.temperature,
                                                symmetrize, w);
    d_z_s = add(d_z_s, ds);
    d_z_aug = add(d_z_aug, daug);
    auto [dt, dtaug] = contrastive_loss_backward({z_t, z_t_aug},
                                                 weights.temperature,
                                                 symmetrize, w);
    d_z_t = add(d_z_t, dt);
    d_z_t_aug = dtaug;
  }
  if (use_mmd) {
    auto [ds, dt] =
        empirical_mmd_backward(z_s, z_t, value.sigma, weights.lambda_mmd);
    d_z_s = add(d_z_s, ds);
    d_z_t = add(d_z_t, dt);
  }

  projection_backward(model, pc_s, d_z_s, *grads);
  projection_backward(model, pc_aug, d_z_aug, *grads);
  projection_backward(model, pc_t, d_z_t, *grads);
  if (use_ctr) projection_backward(model, pc_t_aug, d_z_t_aug, *grads);
  return value;
}

namespace {

std::vector<double> flatten_params(ModelState& model) {
  const ParamGrads dummy = ParamGrads::zeros_like(model);
  std::vector<double> flat;
  for_each_param(model, dummy,
                 [&](const char*, std::span<double> values,
                     std::span<const double>) {
                   flat.insert(flat.end(), values.begin(), values.end());
                 });
  return flat;
}

void unflatten_params(ModelState& model, const std::vector<double>& flat) {
  const ParamGrads dummy = ParamGrads::zeros_like(model);
  std::size_t offset = 0;
  for_each_param(model, dummy,
                 [&](const char*, std::span<double> values,
                     std::span<const double>) {
                   std::copy(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                             flat.begin() +
                                 static_cast<std::ptrdiff_t>(offset +
                                                             values.size()),
                             values.begin());
                   offset += values.size();
                 });
}

}  // namespace

GradCheckReport grad_check(const ModelState& model, const PairedBatch& source,
                           const std::vector<int>& source_labels,
                           const PairedBatch& target,
                           const LossWeights& weights, bool symmetrize,
                           double tolerance, double fd_step) {
  LossWeights w = weights;
  w.validate();
  ObjectiveBatches batches{source, source_labels, target};

  // Pin the bandwidth at the base point: the analytic gradient treats
  // sigma as a constant, so the probes must as well.
  if (w.lambda_mmd > 0.0 &&
      w.sigma.kind == BandwidthPolicy::Kind::MedianHeuristic) {
    const Matrix z_s = project(model, source.anchors);
    const Matrix z_t = project(model, target.anchors);
    w.sigma = BandwidthPolicy::fixed(median_heuristic_sigma(vstack(z_s, z_t)));
  }

  ModelState analytic_model = model;
  ParamGrads grads = ParamGrads::zeros_like(analytic_model);
  objective_forward_backward(analytic_model, batches, w, symmetrize,
                             ForwardOptions::frozen_train(), &grads);

  std::vector<double> analytic;
  std::vector<std::string> names;
  {
    std::size_t tensor_index = 0;
    for_each_param(analytic_model, grads,
                   [&](const char* name, std::span<double>,
                       std::span<const double> g) {
                     for (std::size_t i = 0; i < g.size(); ++i) {
                       analytic.push_back(g[i]);
                       names.push_back(std::string(name) + "[" +
                                       std::to_string(i) + "]");
                     }
                     ++tensor_index;
                   });
  }

  ModelState base = model;
  const std::vector<double> theta0 = flatten_params(base);
  auto objective_at = [&](const std::vector<double>& theta) {
    ModelState probe = model;
    unflatten_params(probe, theta);
    return objective_forward_backward(probe, batches, w, symmetrize,
                                      ForwardOptions::frozen_train(), nullptr)
        .total;
  };
  const std::vector<double> fd =
      finite_diff_grad(objective_at, theta0, fd_step);

  GradCheckReport report;
  report.tolerance = tolerance;
  for (std::size_t i = 0; i < fd.size(); ++i) {
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(fd[i]), 1e-6});
    const double rel = std::abs(analytic[i] - fd[i]) / denom;
    if (rel > report.max_rel_error) {
      report.max_rel_error = rel;
      report.worst_param = names[i];
    }
  }
  report.pass = report.max_rel_error <= tolerance;
  return report;
}

namespace {

json linear_to_json(const LinearLayer& layer) {
  return json{{"out", layer.out_dim()},
              {"in", layer.in_dim()},
              {"weight", layer.weight.data()},
              {"bias", layer.bias}};
}

LinearLayer linear_from_json(const json& j) {
  LinearLayer layer;
  const auto out = j.at("out").get<std::size_t>();
  const auto in = j.at("in").get<std::size_t>();
  auto weight = j.at("weight").get<std::vector<double>>();
  layer.weight = Matrix(out, in, std::move(weight));
  layer.bias = j.at("bias").get<std::vector<double>>();
  if (layer.bias.size() != out) {
    throw SchemaError("checkpoint: bias length does not match layer");
  }
  return layer;
}

json bn_to_json(const BatchNormState& bn) {
  return json{{"gamma", bn.gamma},
              {"beta", bn.beta},
              {"running_mean", bn.running_mean},
              {"running_var", bn.running_var},
              {"momentum", bn.momentum},
              {"epsilon", bn.epsilon},
              {"initialized", bn.initialized}};
}

BatchNormState bn_from_json(const json& j) {
  BatchNormState bn;
  bn.gamma = j.at("gamma").get<std::vector<double>>();
  bn.beta = j.at("beta").get<std::vector<double>>();
  bn.running_mean = j.at("running_mean").get<std::vector<double>>();
  bn.running_var = j.at("running_var").get<std::vector<double>>();
  bn.momentum = j.at("momentum").get<double>();
  bn.epsilon = j.at("epsilon").get<double>();
  bn.initialized = j.at("initialized").get<bool>();
  if (bn.beta.size() != bn.gamma.size() ||
      bn.running_mean.size() != bn.gamma.size() ||
      bn.running_var.size() != bn.gamma.size()) {
    throw SchemaError("checkpoint: inconsistent batch-norm vector lengths");
  }
  return bn;
}

constexpr const char* kCheckpointFormat = "domadapt-checkpoint";
constexpr int kCheckpointVersion = 1;

}  // namespace

void save_checkpoint(const ModelState& model, const std::string& path) {
  for (const auto* layer :
       {&model.proj1, &model.proj2, &model.cls1, &model.cls2, &model.cls3}) {
    layer->weight.require_finite("save_checkpoint");
  }
  json j{{"format", kCheckpointFormat},
         {"version", kCheckpointVersion},
         {"config",
          {{"input_dim", model.config.input_dim},
           {"proj_hidden", model.config.proj_hidden},
           {"proj_out", model.config.proj_out},
           {"cls_hidden", model.config.cls_hidden},
           {"num_classes", model.config.num_classes},
           {"dropout_rate", model.config.dropout_rate},
           {"bn_momentum", model.config.bn_momentum},
           {"bn_epsilon", model.config.bn_epsilon}}},
         {"mode", model.mode == Mode::Train ? "train" : "eval"},
         {"init_seed", model.init_seed},
         {"rng_seed", model.rng.seed()},
         {"rng_counter", model.rng.counter()},
         {"projection",
          {{"linear1", linear_to_json(model.proj1)},
           {"linear2", linear_to_json(model.proj2)}}},
         {"classifier",
          {{"linear1", linear_to_json(model.cls1)},
           {"bn1", bn_to_json(model.bn1)},
           {"linear2", linear_to_json(model.cls2)},
           {"bn2", bn_to_json(model.bn2)},
           {"linear3", linear_to_json(model.cls3)}}}};
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("save_checkpoint: cannot open " + path);
  }
  out << j.dump(2) << '\n';
  if (!out) {
    throw IoError("save_checkpoint: write failed for " + path);
  }
}

ModelState load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("load_checkpoint: cannot open " + path);
  }
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParseError("load_checkpoint: " + std::string(e.what()));
  }
  if (j.value("format", "") != kCheckpointFormat) {
    throw SchemaError("load_checkpoint: unrecognized format");
  }
  if (j.value("version", 0) != kCheckpointVersion) {
    throw SchemaError("load_checkpoint: unsupported version");
  }
  ModelState m;
  const json& cfg = j.at("config");
  m.config.input_dim = cfg.at("input_dim").get<std::size_t>();
  m.config.proj_hidden = cfg.at("proj_hidden").get<std::size_t>();
  m.config.proj_out = cfg.at("proj_out").get<std::size_t>();
  m.config.cls_hidden = cfg.at("cls_hidden").get<std::size_t>();
  m.config.num_classes = cfg.at("num_classes").get<std::size_t>();
  m.config.dropout_rate = cfg.at("dropout_rate").get<double>();
  m.config.bn_momentum = cfg.at("bn_momentum").get<double>();
  m.config.bn_epsilon = cfg.at("bn_epsilon").get<double>();
  m.config.validate();

  m.mode = j.at("mode").get<std::string>() == "train" ? Mode::Train
                                                      : Mode::Eval;
  m.init_seed = j.at("init_seed").get<std::uint64_t>();
  m.rng = SeededRng(j.at("rng_seed").get<std::uint64_t>());
  m.rng.set_counter(j.at("rng_counter").get<std::uint64_t>());

  const json& proj = j.at("projection");
  m.proj1 = linear_from_json(proj.at("linear1"));
  m.proj2 = linear_from_json(proj.at("linear2"));
  const json& cls = j.at("classifier");
  m.cls1 = linear_from_json(cls.at("linear1"));
  m.bn1 = bn_from_json(cls.at("bn1"));
  m.cls2 = linear_from_json(cls.at("linear2"));
  m.bn2 = bn_from_json(cls.at("bn2"));
  m.cls3 = linear_from_json(cls.at("linear3"));

  const bool chain_ok =
      m.proj1.in_dim() == m.config.input_dim &&
      m.proj1.out_dim() == m.config.proj_hidden &&
      m.proj2.in_dim() == m.config.proj_hidden &&
      m.proj2.out_dim() == m.config.proj_out &&
      m.cls1.in_dim() == m.config.proj_out &&
      m.cls1.out_dim() == m.config.cls_hidden &&
      m.bn1.dim() == m.config.cls_hidden &&
      m.cls2.in_dim() == m.config.cls_hidden &&
      m.cls2.out_dim() == m.config.cls_hidden &&
      m.bn2.dim() == m.config.cls_hidden &&
      m.cls3.in_dim() == m.config.cls_hidden &&
      m.cls3.out_dim() == m.config.num_classes;
  if (!chain_ok) {
    throw SchemaError("load_checkpoint: layer dimensions do not chain");
  }
  return m;
}

}  // namespace domadapt
