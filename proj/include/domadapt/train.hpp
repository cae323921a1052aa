#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "domadapt/data.hpp"
#include "domadapt/losses.hpp"
#include "domadapt/model.hpp"
#include "domadapt/rng.hpp"

namespace domadapt {

struct TrainConfig {
  std::size_t batch_size = 256;
  std::size_t max_epochs = 20;
  std::size_t patience = 5;
  double learning_rate = 2e-4;
  LossWeights loss_weights;
  double augment_std = 0.05;
  std::uint64_t seed = 0;
  std::size_t tta_batch_size = 256;
  std::size_t tta_passes = 1;
  bool symmetrize_contrastive = false;
  double validation_fraction = 0.1;

  void validate() const;
};

struct EpochStats {
  std::size_t epoch = 0;  // 1-based
  double total = 0.0;
  double ce_source = 0.0;
  double ce_augment = 0.0;
  double ctr_source = 0.0;
  double ctr_target = 0.0;
  double mmd = 0.0;
  double val_ce = 0.0;
};

struct TrainTrace {
  std::vector<EpochStats> epochs;
  std::size_t early_stop_epoch = 0;  // 0 when the loop ran to max_epochs
  std::size_t best_epoch = 0;
};

void write_trace_csv(const TrainTrace& trace, const std::string& path);
void write_trace_json(const TrainTrace& trace, const std::string& path);

// x plus isotropic Gaussian noise of the given std; label-preserving.
std::vector<double> augment_features(std::span<const double> x, double std_dev,
                                     SeededRng& rng);
Matrix augment_matrix(const Matrix& x, double std_dev, SeededRng& rng);

// Hands out one step's batches at a time: a labeled source anchor/augment
// pair and an equal-sized target pair. The source pool defines an epoch;
// whichever pool runs out mid-stream reshuffles and cycles so the two
// sides always match. Target labels never enter here.
class BatchAssembler {
 public:
  BatchAssembler(const LabeledSet& source, const Matrix& target_features,
                 const TrainConfig& cfg);

  std::size_t steps_per_epoch() const { return chunk_sizes_.size(); }

  // Call exactly steps_per_epoch() times per epoch.
  ObjectiveBatches assemble_step_batches();

 private:
  const LabeledSet& source_;
  const Matrix& target_;
  double augment_std_;
  std::vector<std::size_t> chunk_sizes_;
  std::vector<std::size_t> source_order_;
  std::size_t source_pos_ = 0;
  std::size_t chunk_index_ = 0;
  std::vector<std::size_t> target_order_;
  std::size_t target_pos_ = 0;
  SeededRng shuffle_rng_;
  SeededRng augment_rng_;

  std::size_t next_target_index();
};

// Forward, Eq-style weighted losses, backward, one Adam update.
// NumericError with a component dump if the loss goes non-finite.
ObjectiveValue train_step(ModelState& model, AdamState& opt,
                          const ObjectiveBatches& batches,
                          const TrainConfig& cfg);

struct FitResult {
  ModelState model;
  TrainTrace trace;
};

// Epoch loop with early stopping on held-out source-validation
// cross-entropy; returns the best-validation checkpoint. Target rows are
// unlabeled by type, so target labels cannot be read here.
FitResult fit(const ModelState& initial, const LabeledSet& source,
              const UnlabeledSet& target_train, const TrainConfig& cfg);

// One pass (per `passes`) of the unlabeled target test features through
// the network with BN layers tracking batch statistics. Only the BN
// running estimates change; weights, gamma and beta stay bit-identical.
// Leaves the model in eval mode.
void tta_adapt(ModelState& model, const Matrix& target_test_features,
               std::size_t tta_batch_size, std::size_t passes = 1);

}  // namespace domadapt
