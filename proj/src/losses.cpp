#include "domadapt/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "domadapt/errors.hpp"

namespace domadapt {

namespace {

constexpr double kNormEps = 1e-12;
constexpr double kProbEps = 1e-12;

void require_positive_sigma(double sigma, const char* op) {
  if (!(sigma > 0.0)) {
    throw ParameterError(std::string(op) + ": sigma must be > 0, got " +
                         std::to_string(sigma));
  }
}

// Rows of z scaled to (almost) unit norm, plus the raw norms. Throws on a
// zero-norm row since cosine similarity is undefined there.
struct NormalizedRows {
  Matrix unit;                 // u_i = z_i / (||z_i|| + eps)
  std::vector<double> norms;   // ||z_i||
};

NormalizedRows normalize_rows(const Matrix& z, const char* op) {
  NormalizedRows out{Matrix(z.rows(), z.cols()), std::vector<double>(z.rows())};
  for (std::size_t i = 0; i < z.rows(); ++i) {
    const double n = norm2(z.row(i));
    if (n == 0.0) {
      throw NumericError(std::string(op) + ": zero-norm row " +
                         std::to_string(i));
    }
    out.norms[i] = n;
    const double inv = 1.0 / (n + kNormEps);
    for (std::size_t c = 0; c < z.cols(); ++c) {
      out.unit.at(i, c) = z.at(i, c) * inv;
    }
  }
  return out;
}

}  // namespace

BandwidthPolicy BandwidthPolicy::fixed(double sigma) {
  BandwidthPolicy p;
  p.kind = Kind::Fixed;
  p.fixed_value = sigma;
  return p;
}

void LossWeights::validate() const {
  if (lambda_ce < 0.0 || lambda_ctr < 0.0 || lambda_mmd < 0.0) {
    throw ParameterError("LossWeights: lambdas must be nonnegative");
  }
  if (!(temperature > 0.0)) {
    throw ParameterError("LossWeights: temperature must be > 0");
  }
  if (sigma.kind == BandwidthPolicy::Kind::Fixed && !(sigma.fixed_value > 0.0)) {
    throw ParameterError("LossWeights: fixed sigma must be > 0");
  }
}

void PairedBatch::validate() const {
  if (anchors.rows() != augments.rows() || anchors.cols() != augments.cols()) {
    throw ShapeError("PairedBatch: anchors " + std::to_string(anchors.rows()) +
                     "x" + std::to_string(anchors.cols()) + " vs augments " +
                     std::to_string(augments.rows()) + "x" +
                     std::to_string(augments.cols()));
  }
}

double rbf_kernel(std::span<const double> zi, std::span<const double> zj,
                  double sigma) {
  require_positive_sigma(sigma, "rbf_kernel");
  if (zi.size() != zj.size()) {
    throw ShapeError("rbf_kernel: length mismatch " +
                     std::to_string(zi.size()) + " vs " +
                     std::to_string(zj.size()));
  }
  return std::exp(-squared_distance(zi, zj) / (2.0 * sigma * sigma));
}

double median_heuristic_sigma(const Matrix& z_all) {
  const std::size_t n = z_all.rows();
  if (n < 2) {
    throw ParameterError("median_heuristic_sigma: need at least 2 rows");
  }
  std::vector<double> dists;
  dists.reserve(n * (n - 1) / 2);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) {
      dists.push_back(std::sqrt(squared_distance(z_all.row(i), z_all.row(j))));
    }
  }
  std::sort(dists.begin(), dists.end());
  const std::size_t m = dists.size();
  const double median = (m % 2 == 1)
                            ? dists[m / 2]
                            : 0.5 * (dists[m / 2 - 1] + dists[m / 2]);
  return median > 0.0 ? median : 1.0;
}

double resolve_sigma(const BandwidthPolicy& policy, const Matrix& combined) {
  if (policy.kind == BandwidthPolicy::Kind::Fixed) {
    require_positive_sigma(policy.fixed_value, "resolve_sigma");
    return policy.fixed_value;
  }
  return median_heuristic_sigma(combined);
}

double empirical_mmd(const Matrix& zs, const Matrix& zt, double sigma) {
  require_positive_sigma(sigma, "empirical_mmd");
  if (zs.rows() == 0 || zt.rows() == 0) {
    throw ParameterError("empirical_mmd: empty input");
  }
  if (zs.cols() != zt.cols()) {
    throw ShapeError("empirical_mmd: feature width mismatch");
  }
  const std::size_t m = zs.rows();
  const std::size_t n = zt.rows();

  double ss = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < m; ++j) {
      ss += rbf_kernel(zs.row(i), zs.row(j), sigma);
    }
  }
  double st = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      st += rbf_kernel(zs.row(i), zt.row(j), sigma);
    }
  }
  double tt = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      tt += rbf_kernel(zt.row(i), zt.row(j), sigma);
    }
  }
  const double md = static_cast<double>(m);
  const double nd = static_cast<double>(n);
  const double bracket = ss / (md * md) - 2.0 * st / (md * nd) + tt / (nd * nd);
  return std::sqrt(std::max(bracket, 0.0));
}

std::pair<Matrix, Matrix> empirical_mmd_backward(const Matrix& zs,
                                                 const Matrix& zt,
                                                 double sigma,
                                                 double upstream) {
  const double mmd = empirical_mmd(zs, zt, sigma);
  Matrix d_zs(zs.rows(), zs.cols());
  Matrix d_zt(zt.rows(), zt.cols());
  if (mmd <= 0.0) {
    // Clamp region: subgradient zero.
    return {d_zs, d_zt};
  }
  const double m = static_cast<double>(zs.rows());
  const double n = static_cast<double>(zt.rows());
  const double inv_sq = 1.0 / (sigma * sigma);
  // d mmd / d bracket = 1 / (2 mmd); chain with dk/da = -k (a - b) / sigma^2.
  const double scale = upstream / (2.0 * mmd);

  for (std::size_t p = 0; p < zs.rows(); ++p) {
    auto gp = d_zs.row(p);
    for (std::size_t j = 0; j < zs.rows(); ++j) {
      const double k = rbf_kernel(zs.row(p), zs.row(j), sigma);
      const double c = scale * (2.0 / (m * m)) * k * (-inv_sq);
      for (std::size_t ccol = 0; ccol < zs.cols(); ++ccol) {
        gp[ccol] += c * (zs.at(p, ccol) - zs.at(j, ccol));
      }
    }
    for (std::size_t j = 0; j < zt.rows(); ++j) {
      const double k = rbf_kernel(zs.row(p), zt.row(j), sigma);
      const double c = scale * (-2.0 / (m * n)) * k * (-inv_sq);
      for (std::size_t ccol = 0; ccol < zs.cols(); ++ccol) {
        gp[ccol] += c * (zs.at(p, ccol) - zt.at(j, ccol));
      }
    }
  }
  for (std::size_t q = 0; q < zt.rows(); ++q) {
    auto gq = d_zt.row(q);
    for (std::size_t j = 0; j < zt.rows(); ++j) {
      const double k = rbf_kernel(zt.row(q), zt.row(j), sigma);
      const double c = scale * (2.0 / (n * n)) * k * (-inv_sq);
      for (std::size_t ccol = 0; ccol < zt.cols(); ++ccol) {
        gq[ccol] += c * (zt.at(q, ccol) - zt.at(j, ccol));
      }
    }
    for (std::size_t j = 0; j < zs.rows(); ++j) {
      const double k = rbf_kernel(zs.row(j), zt.row(q), sigma);
      const double c = scale * (-2.0 / (m * n)) * k * (-inv_sq);
      for (std::size_t ccol = 0; ccol < zt.cols(); ++ccol) {
        gq[ccol] += c * (zt.at(q, ccol) - zs.at(j, ccol));
      }
    }
  }
  return {d_zs, d_zt};
}

namespace {

// Shared machinery for contrastive forward/backward: similarity matrix of
// the 2b stacked unit rows plus the per-anchor log-sum-exp terms.
struct ContrastiveWork {
  Matrix unit;                // 2b x d unit rows
  std::vector<double> norms;  // 2b raw norms
  Matrix sims;                // 2b x 2b cosine similarities
  std::size_t b = 0;
};

ContrastiveWork contrastive_prepare(const PairedBatch& batch,
                                    double temperature) {
  batch.validate();
  if (!(temperature > 0.0)) {
    throw ParameterError("contrastive_loss: temperature must be > 0");
  }
  if (batch.batch_size() == 0) {
    throw ParameterError("contrastive_loss: empty batch");
  }
  ContrastiveWork w;
  w.b = batch.batch_size();
  const Matrix stacked = vstack(batch.anchors, batch.augments);
  auto normalized = normalize_rows(stacked, "contrastive_loss");
  w.unit = std::move(normalized.unit);
  w.norms = std::move(normalized.norms);
  const std::size_t n = 2 * w.b;
  w.sims = Matrix(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    w.sims.at(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double s = dot(w.unit.row(i), w.unit.row(j));
      w.sims.at(i, j) = s;
      w.sims.at(j, i) = s;
    }
  }
  return w;
}

// One anchor's -log softmax term; fills p (softmax over k != i) when asked.
double anchor_term(const ContrastiveWork& w, std::size_t i, std::size_t pos,
                   double t, std::vector<double>* p) {
  const std::size_t n = 2 * w.b;
  double max_arg = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < n; ++k) {
    if (k == i) continue;
    max_arg = std::max(max_arg, w.sims.at(i, k) / t);
  }
  double denom = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    if (k == i) continue;
    denom += std::exp(w.sims.at(i, k) / t - max_arg);
  }
  if (p != nullptr) {
    p->assign(n, 0.0);
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      (*p)[k] = std::exp(w.sims.at(i, k) / t - max_arg) / denom;
    }
  }
  // -log(exp(s_pos/t) / sum) = log(sum) + max - s_pos/t
  return std::log(denom) + max_arg - w.sims.at(i, pos) / t;
}

}  // namespace

double contrastive_loss(const PairedBatch& batch, double temperature,
                        bool symmetrize) {
  const ContrastiveWork w = contrastive_prepare(batch, temperature);
  double loss = 0.0;
  for (std::size_t i = 0; i < w.b; ++i) {
    loss += anchor_term(w, i, i + w.b, temperature, nullptr);
  }
  if (symmetrize) {
    for (std::size_t i = 0; i < w.b; ++i) {
      loss += anchor_term(w, i + w.b, i, temperature, nullptr);
    }
  }
  return loss;
}

std::pair<Matrix, Matrix> contrastive_loss_backward(const PairedBatch& batch,
                                                    double temperature,
                                                    bool symmetrize,
                                                    double upstream) {
  const ContrastiveWork w = contrastive_prepare(batch, temperature);
  const std::size_t n = 2 * w.b;
  const double t = temperature;

  // dL/dS, assembled anchor row by anchor row.
  Matrix d_sims(n, n);
  std::vector<double> p;
  auto accumulate_anchor = [&](std::size_t i, std::size_t pos) {
    anchor_term(w, i, pos, t, &p);
    for (std::size_t k = 0; k < n; ++k) {
      if (k == i) continue;
      d_sims.at(i, k) += p[k] / t;
    }
    d_sims.at(i, pos) -= 1.0 / t;
  };
  for (std::size_t i = 0; i < w.b; ++i) accumulate_anchor(i, i + w.b);
  if (symmetrize) {
    for (std::size_t i = 0; i < w.b; ++i) accumulate_anchor(i + w.b, i);
  }

  // S_ik = u_i . u_k with both sides trainable: dU = (G + G^T) U.
  Matrix d_unit(n, w.unit.cols());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t k = 0; k < n; ++k) {
      const double g = d_sims.at(i, k) + d_sims.at(k, i);
      if (g == 0.0) continue;
      for (std::size_t c = 0; c < w.unit.cols(); ++c) {
        d_unit.at(i, c) += g * w.unit.at(k, c);
      }
    }
  }

  // Through u = z / (||z|| + eps):
  //   dz = du/(nrm+eps) - z (z . du) / (nrm (nrm+eps)^2)
  Matrix d_anchors(w.b, batch.anchors.cols());
  Matrix d_augments(w.b, batch.anchors.cols());
  const Matrix stacked = vstack(batch.anchors, batch.augments);
  for (std::size_t i = 0; i < n; ++i) {
    const double nrm = w.norms[i];
    const double denom = nrm + kNormEps;
    const double zdu = dot(stacked.row(i), d_unit.row(i));
    Matrix& target = (i < w.b) ? d_anchors : d_augments;
    const std::size_t r = (i < w.b) ? i : i - w.b;
    for (std::size_t c = 0; c < stacked.cols(); ++c) {
      const double g = d_unit.at(i, c) / denom -
                       stacked.at(i, c) * zdu / (nrm * denom * denom);
      target.at(r, c) += upstream * g;
    }
  }
  return {d_anchors, d_augments};
}

double cross_entropy(double y_hat, int label) {
  if (label != 0 && label != 1) {
    throw ParameterError("cross_entropy: label must be 0 or 1, got " +
                         std::to_string(label));
  }
  const double p = std::clamp(y_hat, kProbEps, 1.0 - kProbEps);
  return -(label * std::log(p) + (1 - label) * std::log(1.0 - p));
}

double cross_entropy_batch(const Matrix& probs,
                           const std::vector<int>& labels) {
  if (probs.cols() != 2) {
    throw ShapeError("cross_entropy_batch: expected 2 probability columns");
  }
  if (probs.rows() != labels.size()) {
    throw ShapeError("cross_entropy_batch: rows vs labels mismatch");
  }
  if (probs.rows() == 0) {
    throw ParameterError("cross_entropy_batch: empty batch");
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    sum += cross_entropy(probs.at(i, 1), labels[i]);
  }
  return sum / static_cast<double>(probs.rows());
}

double total_loss(double ce_s, double ce_s_aug, double ctr_s, double ctr_t,
                  double mmd, const LossWeights& w) {
  w.validate();
  for (double v : {ce_s, ce_s_aug, ctr_s, ctr_t, mmd}) {
    if (!std::isfinite(v)) {
      throw NumericError("total_loss: non-finite component");
    }
  }
  return 0.5 * w.lambda_ce * (ce_s + ce_s_aug) +
         0.5 * w.lambda_ctr * (ctr_s + ctr_t) + w.lambda_mmd * mmd;
}

}  // namespace domadapt
