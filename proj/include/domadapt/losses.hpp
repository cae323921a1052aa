#pragma once

#include <utility>

#include "domadapt/matrix.hpp"

namespace domadapt {

// Bandwidth of the RBF kernel: either a fixed value or the median of
// pairwise distances over the batch the kernel is applied to.
struct BandwidthPolicy {
  enum class Kind { Fixed, MedianHeuristic };

  Kind kind = Kind::MedianHeuristic;
  double fixed_value = 1.0;

  static BandwidthPolicy fixed(double sigma);
  static BandwidthPolicy median() { return {}; }
};

struct LossWeights {
  double lambda_ce = 0.5;
  double lambda_ctr = 0.5;
  double lambda_mmd = 1.0;
  double temperature = 0.5;
  BandwidthPolicy sigma;

  // ParameterError if any weight is negative, the temperature is not
  // strictly positive, or a fixed bandwidth is not strictly positive.
  void validate() const;
};

// Row-aligned anchor/augmentation pair: row i of augments is the
// augmentation of row i of anchors.
struct PairedBatch {
  Matrix anchors;
  Matrix augments;

  std::size_t batch_size() const { return anchors.rows(); }
  void validate() const;  // ShapeError on mismatched shapes
};

// exp(-||zi - zj||^2 / (2 sigma^2)); always in (0, 1].
double rbf_kernel(std::span<const double> zi, std::span<const double> zj,
                  double sigma);

// Median of pairwise Euclidean distances over all distinct row pairs.
// Falls back to 1.0 when the median is zero; needs at least 2 rows.
double median_heuristic_sigma(const Matrix& z_all);

// Resolves the policy against the combined batch the kernel will see.
double resolve_sigma(const BandwidthPolicy& policy, const Matrix& combined);

// Biased empirical estimator over all index pairs (diagonal included),
// clamped at zero inside the bracket before the square root.
double empirical_mmd(const Matrix& zs, const Matrix& zt, double sigma);

// d(upstream * mmd)/d{zs, zt}. The bracket clamp makes the gradient the
// zero subgradient whenever the clamped value is reached.
std::pair<Matrix, Matrix> empirical_mmd_backward(const Matrix& zs,
                                                 const Matrix& zt,
                                                 double sigma,
                                                 double upstream);

// Normalized temperature-scaled loss over the 2b-item batch (anchors
// followed by augments). Sums over anchor indices; the positive of anchor
// i is augment i, the negatives are all other 2(b-1)+1 items. With
// symmetrize set, augments also act as anchors and the two sums add.
double contrastive_loss(const PairedBatch& batch, double temperature,
                        bool symmetrize = false);

std::pair<Matrix, Matrix> contrastive_loss_backward(const PairedBatch& batch,
                                                    double temperature,
                                                    bool symmetrize,
                                                    double upstream);

// -[y log(p) + (1-y) log(1-p)] with p clamped to [1e-12, 1 - 1e-12].
double cross_entropy(double y_hat, int label);

// Mean cross-entropy of the positive-class column of a (b x 2) probability
// matrix against binary labels.
double cross_entropy_batch(const Matrix& probs, const std::vector<int>& labels);

// 0.5*l_ce*(ce_s + ce_s_aug) + 0.5*l_ctr*(ctr_s + ctr_t) + l_mmd*mmd.
double total_loss(double ce_s, double ce_s_aug, double ctr_s, double ctr_t,
                  double mmd, const LossWeights& w);

}  // namespace domadapt
