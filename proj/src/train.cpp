#include "domadapt/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>

#include "domadapt/csv.hpp"
#include "domadapt/errors.hpp"
#include "json.hpp"

namespace domadapt {

void TrainConfig::validate() const {
  if (batch_size == 0 || tta_batch_size == 0 || tta_passes == 0) {
    throw ParameterError("TrainConfig: counts must be >= 1");
  }
  if (!(learning_rate > 0.0)) {
    throw ParameterError("TrainConfig: learning rate must be > 0");
  }
  if (augment_std < 0.0) {
    throw ParameterError("TrainConfig: augment std must be >= 0");
  }
  if (validation_fraction < 0.0 || validation_fraction >= 1.0) {
    throw ParameterError("TrainConfig: validation fraction must be in [0, 1)");
  }
  loss_weights.validate();
}

std::vector<double> augment_features(std::span<const double> x,
                                     double std_dev, SeededRng& rng) {
  if (std_dev < 0.0) {
    throw ParameterError("augment_features: std must be >= 0");
  }
  std::vector<double> out(x.begin(), x.end());
  for (double& v : out) v += std_dev * rng.next_gaussian();
  return out;
}

Matrix augment_matrix(const Matrix& x, double std_dev, SeededRng& rng) {
  if (std_dev < 0.0) {
    throw ParameterError("augment_matrix: std must be >= 0");
  }
  Matrix out = x;
  for (double& v : out.data()) v += std_dev * rng.next_gaussian();
  return out;
}

namespace {

// Chunk sizes covering n items with the given batch size. A trailing
// remainder of 1 is folded into the previous chunk so train-mode batch
// norm always sees at least two rows.
std::vector<std::size_t> plan_chunks(std::size_t n, std::size_t batch) {
  std::vector<std::size_t> sizes;
  std::size_t left = n;
  while (left > 0) {
    const std::size_t take = std::min(batch, left);
    sizes.push_back(take);
    left -= take;
  }
  if (sizes.size() >= 2 && sizes.back() == 1) {
    sizes.pop_back();
    sizes.back() += 1;
  }
  return sizes;
}

}  // namespace

BatchAssembler::BatchAssembler(const LabeledSet& source,
                               const Matrix& target_features,
                               const TrainConfig& cfg)
    : source_(source),
      target_(target_features),
      augment_std_(cfg.augment_std),
      shuffle_rng_(SeededRng(cfg.seed).fork(0x73687566ULL)),
      augment_rng_(SeededRng(cfg.seed).fork(0x61756766ULL)) {
  cfg.validate();
  if (source.size() == 0 || target_features.rows() == 0) {
    throw DataError("BatchAssembler: source and target pools must be "
                    "non-empty");
  }
  if (source.features.cols() != target_features.cols()) {
    throw ShapeError("BatchAssembler: source/target feature widths differ");
  }
  chunk_sizes_ = plan_chunks(source.size(), cfg.batch_size);
  source_order_.resize(source.size());
  std::iota(source_order_.begin(), source_order_.end(), 0);
  shuffle_rng_.shuffle(source_order_);
  target_order_.resize(target_features.rows());
  std::iota(target_order_.begin(), target_order_.end(), 0);
  shuffle_rng_.shuffle(target_order_);
}

std::size_t BatchAssembler::next_target_index() {
  if (target_pos_ >= target_order_.size()) {
    shuffle_rng_.shuffle(target_order_);
    target_pos_ = 0;
  }
  return target_order_[target_pos_++];
}

ObjectiveBatches BatchAssembler::assemble_step_batches() {
  if (chunk_index_ >= chunk_sizes_.size()) {
    // New source epoch: reshuffle and restart the chunk plan.
    shuffle_rng_.shuffle(source_order_);
    source_pos_ = 0;
    chunk_index_ = 0;
  }
  const std::size_t b = chunk_sizes_[chunk_index_++];

  std::vector<std::size_t> src_idx(source_order_.begin() +
                                       static_cast<std::ptrdiff_t>(source_pos_),
                                   source_order_.begin() +
                                       static_cast<std::ptrdiff_t>(source_pos_ +
                                                                   b));
  source_pos_ += b;
  std::vector<std::size_t> tgt_idx(b);
  for (auto& i : tgt_idx) i = next_target_index();

  ObjectiveBatches batches;
  batches.source.anchors = take_rows(source_.features, src_idx);
  batches.source.augments =
      augment_matrix(batches.source.anchors, augment_std_, augment_rng_);
  batches.source_labels.reserve(b);
  for (const std::size_t i : src_idx) {
    batches.source_labels.push_back(source_.labels[i]);
  }
  batches.target.anchors = take_rows(target_, tgt_idx);
  batches.target.augments =
      augment_matrix(batches.target.anchors, augment_std_, augment_rng_);
  return batches;
}

ObjectiveValue train_step(ModelState& model, AdamState& opt,
                          const ObjectiveBatches& batches,
                          const TrainConfig& cfg) {
  cfg.validate();
  if (model.mode != Mode::Train) {
    throw StateError("train_step: model must be in train mode");
  }
  ParamGrads grads = ParamGrads::zeros_like(model);
  const ObjectiveValue value = objective_forward_backward(
      model, batches, cfg.loss_weights, cfg.symmetrize_contrastive,
      ForwardOptions::train(), &grads);
  if (!std::isfinite(value.total)) {
    std::ostringstream diag;
    diag << "train_step: non-finite loss (total=" << value.total
         << " ce_s=" << value.ce_source << " ce_aug=" << value.ce_augment
         << " ctr_s=" << value.ctr_source << " ctr_t=" << value.ctr_target
         << " mmd=" << value.mmd << " sigma=" << value.sigma << ")";
    throw NumericError(diag.str());
  }
  adam_step(opt, model, grads, cfg.learning_rate);
  return value;
}

namespace {

double validation_ce(ModelState& model, const Matrix& features,
                     const std::vector<int>& labels) {
  model.set_mode(Mode::Eval);
  const Matrix z = project(model, features);
  const Matrix probs = classify_eval(model, z);
  return cross_entropy_batch(probs, labels);
}

}  // namespace

FitResult fit(const ModelState& initial, const LabeledSet& source,
              const UnlabeledSet& target_train, const TrainConfig& cfg) {
  cfg.validate();
  FitResult result{initial, {}};
  if (cfg.max_epochs == 0) return result;
  if (source.size() < 2) {
    throw DataError("fit: need at least 2 source records");
  }
  if (target_train.size() == 0) {
    throw DataError("fit: target train pool is empty");
  }

  // Seeded held-out source split for the early-stopping metric.
  std::vector<std::size_t> order(source.size());
  std::iota(order.begin(), order.end(), 0);
  SeededRng split_rng = SeededRng(cfg.seed).fork(0x76616cULL);
  split_rng.shuffle(order);
  const auto n_val = static_cast<std::size_t>(
      cfg.validation_fraction * static_cast<double>(source.size()));
  LabeledSet train_split;
  LabeledSet val_split;
  for (std::size_t i = 0; i < order.size(); ++i) {
    LabeledSet& dst = (i < n_val) ? val_split : train_split;
    const std::size_t r = order[i];
    dst.ids.push_back(source.ids[r]);
    dst.domains.push_back(source.domains[r]);
    dst.labels.push_back(source.labels[r]);
  }
  {
    std::vector<std::size_t> tr_idx(order.begin() +
                                        static_cast<std::ptrdiff_t>(n_val),
                                    order.end());
    train_split.features = take_rows(source.features, tr_idx);
    std::vector<std::size_t> va_idx(order.begin(),
                                    order.begin() +
                                        static_cast<std::ptrdiff_t>(n_val));
    val_split.features = take_rows(source.features, va_idx);
  }
  // Tiny sources get no held-out rows; fall back to scoring on the
  // training split so the trace stays well-defined.
  const LabeledSet& val_ref = (n_val > 0) ? val_split : train_split;

  ModelState model = initial;
  BatchAssembler assembler(train_split, target_train.features, cfg);
  AdamState opt;

  ModelState best_model = model;
  double best_val = std::numeric_limits<double>::infinity();
  std::size_t best_epoch = 0;

  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    model.set_mode(Mode::Train);
    EpochStats stats;
    stats.epoch = epoch;
    const std::size_t steps = assembler.steps_per_epoch();
    for (std::size_t s = 0; s < steps; ++s) {
      const ObjectiveBatches batches = assembler.assemble_step_batches();
      const ObjectiveValue v = train_step(model, opt, batches, cfg);
      stats.total += v.total;
      stats.ce_source += v.ce_source;
      stats.ce_augment += v.ce_augment;
      stats.ctr_source += v.ctr_source;
      stats.ctr_target += v.ctr_target;
      stats.mmd += v.mmd;
    }
    const double inv = 1.0 / static_cast<double>(steps);
    stats.total *= inv;
    stats.ce_source *= inv;
    stats.ce_augment *= inv;
    stats.ctr_source *= inv;
    stats.ctr_target *= inv;
    stats.mmd *= inv;

    stats.val_ce = validation_ce(model, val_ref.features, val_ref.labels);
    result.trace.epochs.push_back(stats);

    if (stats.val_ce < best_val) {
      best_val = stats.val_ce;
      best_epoch = epoch;
      best_model = model;
    } else if (epoch - best_epoch > cfg.patience) {
      result.trace.early_stop_epoch = epoch;
      break;
    }
  }
  result.trace.best_epoch = best_epoch;
  best_model.set_mode(Mode::Eval);
  result.model = std::move(best_model);
  return result;
}

void tta_adapt(ModelState& model, const Matrix& target_test_features,
               std::size_t tta_batch_size, std::size_t passes) {
  if (target_test_features.rows() == 0) {
    throw DataError("tta_adapt: target test set is empty");
  }
  if (tta_batch_size == 0 || passes == 0) {
    throw ParameterError("tta_adapt: batch size and passes must be >= 1");
  }
  const std::vector<std::size_t> sizes =
      plan_chunks(target_test_features.rows(), tta_batch_size);
  for (std::size_t p = 0; p < passes; ++p) {
    std::size_t row = 0;
    for (const std::size_t b : sizes) {
      std::vector<std::size_t> idx(b);
      std::iota(idx.begin(), idx.end(), row);
      row += b;
      const Matrix x = take_rows(target_test_features, idx);
      const Matrix z = project(model, x);
      // Running estimates track the target batches; weights, gamma and
      // beta are untouched, dropout stays off.
      classify(model, z, ForwardOptions::bn_stats_only(), nullptr);
    }
  }
  model.set_mode(Mode::Eval);
}

void write_trace_csv(const TrainTrace& trace, const std::string& path) {
  CsvTable table;
  table.header = {"epoch",      "total",      "ce_source", "ce_augment",
                  "ctr_source", "ctr_target", "mmd",       "val_ce"};
  for (const auto& e : trace.epochs) {
    table.rows.push_back({std::to_string(e.epoch), format_double(e.total),
                          format_double(e.ce_source),
                          format_double(e.ce_augment),
                          format_double(e.ctr_source),
                          format_double(e.ctr_target), format_double(e.mmd),
                          format_double(e.val_ce)});
  }
  write_csv(table, path);
}

void write_trace_json(const TrainTrace& trace, const std::string& path) {
  nlohmann::json epochs = nlohmann::json::array();
  for (const auto& e : trace.epochs) {
    epochs.push_back({{"epoch", e.epoch},
                      {"total", e.total},
                      {"ce_source", e.ce_source},
                      {"ce_augment", e.ce_augment},
                      {"ctr_source", e.ctr_source},
                      {"ctr_target", e.ctr_target},
                      {"mmd", e.mmd},
                      {"val_ce", e.val_ce}});
  }
  const nlohmann::json j{{"epochs", epochs},
                         {"early_stop_epoch", trace.early_stop_epoch},
                         {"best_epoch", trace.best_epoch}};
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("write_trace_json: cannot open " + path);
  }
  out << j.dump(2) << '\n';
}

}  // namespace domadapt
