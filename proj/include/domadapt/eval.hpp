#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "domadapt/data.hpp"
#include "domadapt/model.hpp"
#include "domadapt/train.hpp"

namespace domadapt {

struct ConfusionCounts {
  std::size_t tp = 0;
  std::size_t fp = 0;
  std::size_t tn = 0;
  std::size_t fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
};

struct EvalReport {
  double accuracy = 0.0;
  double f1 = 0.0;  // binary, positive class = falsified (label 1)
  ConfusionCounts counts;
  std::map<std::string, double> variance_x;  // per-domain, input space
  std::map<std::string, double> variance_z;  // per-domain, projected space
  std::uint64_t seed = 0;
  std::string config_hash;
  bool tta_applied = false;
};

// Argmax class per row of eval-mode forward probabilities.
std::vector<int> predict(const ModelState& model, const Matrix& features);

// Confusion counts, accuracy and binary F1 from already-made predictions.
EvalReport metrics_from_predictions(const std::vector<int>& predicted,
                                    const std::vector<int>& labels);

// Accuracy, binary F1 and the per-domain 1-D variance diagnostic on the
// labeled target test set. Requires the model to be in eval mode.
EvalReport evaluate(const ModelState& model, const LabeledSet& target_test);

// Variance of the rows projected onto their first principal component and
// min-max normalized to [0, 1]. Constant rows give 0.
double feature_variance(const Matrix& features);

// Projection onto the top two principal components, explained variance in
// descending order; missing components of rank-deficient inputs are
// zero-filled.
Matrix project_2d(const Matrix& features);

// The datasets one adaptation experiment runs on.
struct ExperimentData {
  LabeledSet source;
  UnlabeledSet target_train;
  LabeledSet target_test;
};

struct AblationRow {
  std::string name;  // full, wo_contrastive, wo_mmd, wo_tta
  EvalReport report;
};

// Four runs sharing one seed: the full objective, then each of the
// contrastive term, the MMD term and the test-time adaptation pass
// disabled in turn.
std::vector<AblationRow> run_ablation(const ModelConfig& model_cfg,
                                      const TrainConfig& cfg,
                                      const ExperimentData& data);
void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::string& path);

struct SweepGrids {
  std::vector<double> lambda_mmd = {0.5, 1.0, 2.0, 5.0};
  std::vector<double> lambda_ctr = {0.1, 0.5, 1.0, 2.0};
  std::vector<std::size_t> tta_batch = {64, 128, 256, 512};
};

struct SweepPoint {
  std::string sweep;  // lambda_mmd, lambda_ctr, tta_batch
  double value = 0.0;
  double f1 = 0.0;
  double accuracy = 0.0;
};

// Three one-dimensional sweeps around the base config, fixed seed.
std::vector<SweepPoint> run_sensitivity(const ModelConfig& model_cfg,
                                        const TrainConfig& cfg,
                                        const ExperimentData& data,
                                        const SweepGrids& grids);
void write_sweep_csv(const std::vector<SweepPoint>& points,
                     const std::string& path);

// Resolved key=value dump of a run's configuration and its FNV-1a hash.
std::string describe_config(const TrainConfig& cfg,
                            const ModelConfig& model_cfg);
std::string config_hash(const TrainConfig& cfg, const ModelConfig& model_cfg);

void write_metrics_json(const EvalReport& report, const std::string& path);

// id, domain, label, space (x or z), pc1, pc2 for every test row.
void write_projection2d_csv(const ModelState& model,
                            const LabeledSet& target_test,
                            const std::string& path);

}  // namespace domadapt
