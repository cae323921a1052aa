#include "domadapt/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "domadapt/csv.hpp"
#include "domadapt/errors.hpp"
#include "json.hpp"

namespace domadapt {

namespace {

Matrix center_columns(const Matrix& m) {
  const auto means = column_means(m);
  Matrix out = m;
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out.at(r, c) -= means[c];
  }
  return out;
}

// Dominant eigenpair of a symmetric PSD matrix by power iteration with a
// deterministic start (the column under the largest diagonal entry).
std::pair<double, std::vector<double>> dominant_eigen(const Matrix& c) {
  const std::size_t d = c.rows();
  std::size_t pivot = 0;
  for (std::size_t j = 1; j < d; ++j) {
    if (c.at(j, j) > c.at(pivot, pivot)) pivot = j;
  }
  if (!(c.at(pivot, pivot) > 0.0)) {
    std::vector<double> e(d, 0.0);
    if (d > 0) e[0] = 1.0;
    return {0.0, e};
  }
  std::vector<double> v(d);
  for (std::size_t i = 0; i < d; ++i) v[i] = c.at(i, pivot);
  double n = norm2(v);
  for (auto& x : v) x /= n;

  std::vector<double> w(d);
  double lambda = 0.0;
  for (int iter = 0; iter < 5000; ++iter) {
    for (std::size_t i = 0; i < d; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < d; ++j) s += c.at(i, j) * v[j];
      w[i] = s;
    }
    const double wn = norm2(w);
    if (wn == 0.0) return {0.0, v};
    double diff = 0.0;
    for (std::size_t i = 0; i < d; ++i) {
      w[i] /= wn;
      diff = std::max(diff, std::abs(w[i] - v[i]));
    }
    v = w;
    lambda = wn;
    if (diff < 1e-15) break;
  }
  // Deterministic sign: biggest-magnitude coordinate positive.
  std::size_t arg = 0;
  for (std::size_t i = 1; i < d; ++i) {
    if (std::abs(v[i]) > std::abs(v[arg])) arg = i;
  }
  if (v[arg] < 0.0) {
    for (auto& x : v) x = -x;
  }
  return {lambda, v};
}

std::vector<double> project_onto(const Matrix& centered,
                                 const std::vector<double>& direction) {
  std::vector<double> scores(centered.rows());
  for (std::size_t r = 0; r < centered.rows(); ++r) {
    scores[r] = dot(centered.row(r), direction);
  }
  return scores;
}

}  // namespace

std::vector<int> predict(const ModelState& model, const Matrix& features) {
  const Matrix z = project(model, features);
  const Matrix probs = classify_eval(model, z);
  std::vector<int> labels(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    labels[i] = probs.at(i, 1) > probs.at(i, 0) ? 1 : 0;
  }
  return labels;
}

EvalReport metrics_from_predictions(const std::vector<int>& predicted,
                                    const std::vector<int>& labels) {
  if (predicted.size() != labels.size()) {
    throw ShapeError("metrics_from_predictions: predictions vs labels");
  }
  if (predicted.empty()) {
    throw DataError("metrics_from_predictions: empty prediction set");
  }
  EvalReport report;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int y = labels[i];
    const int p = predicted[i];
    if (p == 1 && y == 1) ++report.counts.tp;
    if (p == 1 && y == 0) ++report.counts.fp;
    if (p == 0 && y == 0) ++report.counts.tn;
    if (p == 0 && y == 1) ++report.counts.fn;
  }
  const auto& c = report.counts;
  report.accuracy =
      static_cast<double>(c.tp + c.tn) / static_cast<double>(c.total());
  const std::size_t f1_denom = 2 * c.tp + c.fp + c.fn;
  report.f1 = f1_denom == 0
                  ? 0.0
                  : 2.0 * static_cast<double>(c.tp) /
                        static_cast<double>(f1_denom);
  return report;
}

EvalReport evaluate(const ModelState& model, const LabeledSet& target_test) {
  if (target_test.size() == 0) {
    throw DataError("evaluate: empty test set");
  }
  if (model.mode != Mode::Eval) {
    throw StateError("evaluate: model must be in eval mode");
  }
  EvalReport report = metrics_from_predictions(
      predict(model, target_test.features), target_test.labels);

  // Per-domain 1-D variance of raw and projected features.
  const Matrix z = project(model, target_test.features);
  std::map<std::string, std::vector<std::size_t>> by_domain;
  for (std::size_t i = 0; i < target_test.size(); ++i) {
    by_domain[target_test.domains[i]].push_back(i);
  }
  for (const auto& [domain, idx] : by_domain) {
    if (idx.size() < 2) continue;
    report.variance_x[domain] =
        feature_variance(take_rows(target_test.features, idx));
    report.variance_z[domain] = feature_variance(take_rows(z, idx));
  }
  return report;
}

double feature_variance(const Matrix& features) {
  if (features.rows() < 2) {
    throw ParameterError("feature_variance: need at least 2 rows");
  }
  const Matrix centered = center_columns(features);
  bool all_zero = true;
  for (double v : centered.data()) {
    if (v != 0.0) {
      all_zero = false;
      break;
    }
  }
  if (all_zero) return 0.0;

  const double n = static_cast<double>(features.rows());
  Matrix cov = scale(matmul(transpose(centered), centered), 1.0 / n);
  const auto [lambda, direction] = dominant_eigen(cov);
  if (lambda <= 0.0) return 0.0;

  std::vector<double> scores = project_onto(centered, direction);
  const auto [mn_it, mx_it] = std::minmax_element(scores.begin(), scores.end());
  const double mn = *mn_it;
  const double mx = *mx_it;
  if (mx == mn) return 0.0;
  double mean = 0.0;
  for (double& s : scores) {
    s = (s - mn) / (mx - mn);
    mean += s;
  }
  mean /= n;
  double var = 0.0;
  for (const double s : scores) var += (s - mean) * (s - mean);
  return var / n;
}

Matrix project_2d(const Matrix& features) {
  if (features.rows() < 2) {
    throw ParameterError("project_2d: need at least 2 rows");
  }
  if (features.cols() < 2) {
    throw ParameterError("project_2d: need feature dimension >= 2");
  }
  const Matrix centered = center_columns(features);
  const double n = static_cast<double>(features.rows());
  Matrix cov = scale(matmul(transpose(centered), centered), 1.0 / n);

  Matrix out(features.rows(), 2);
  const auto [l1, v1] = dominant_eigen(cov);
  if (l1 <= 0.0) return out;  // constant input: both components zero
  const auto s1 = project_onto(centered, v1);
  for (std::size_t r = 0; r < out.rows(); ++r) out.at(r, 0) = s1[r];

  // Deflate and repeat for the runner-up component.
  Matrix deflated = cov;
  for (std::size_t i = 0; i < deflated.rows(); ++i) {
    for (std::size_t j = 0; j < deflated.cols(); ++j) {
      deflated.at(i, j) -= l1 * v1[i] * v1[j];
    }
  }
  const auto [l2, v2] = dominant_eigen(deflated);
  if (l2 > 1e-12 * l1) {
    const auto s2 = project_onto(centered, v2);
    for (std::size_t r = 0; r < out.rows(); ++r) out.at(r, 1) = s2[r];
  }
  return out;
}

namespace {

EvalReport run_single(const ModelConfig& model_cfg, const TrainConfig& cfg,
                      const ExperimentData& data, bool with_tta) {
  ModelState model = ModelState::init(model_cfg, cfg.seed);
  FitResult fitted = fit(model, data.source, data.target_train, cfg);
  if (with_tta) {
    tta_adapt(fitted.model, data.target_test.features, cfg.tta_batch_size,
              cfg.tta_passes);
  }
  EvalReport report = evaluate(fitted.model, data.target_test);
  report.seed = cfg.seed;
  report.config_hash = config_hash(cfg, model_cfg);
  report.tta_applied = with_tta;
  return report;
}

}  // namespace

std::vector<AblationRow> run_ablation(const ModelConfig& model_cfg,
                                      const TrainConfig& cfg,
                                      const ExperimentData& data) {
  std::vector<AblationRow> rows;
  rows.push_back({"full", run_single(model_cfg, cfg, data, true)});
  {
    TrainConfig ablated = cfg;
    ablated.loss_weights.lambda_ctr = 0.0;
    rows.push_back({"wo_contrastive",
                    run_single(model_cfg, ablated, data, true)});
  }
  {
    TrainConfig ablated = cfg;
    ablated.loss_weights.lambda_mmd = 0.0;
    rows.push_back({"wo_mmd", run_single(model_cfg, ablated, data, true)});
  }
  rows.push_back({"wo_tta", run_single(model_cfg, cfg, data, false)});
  return rows;
}

void write_ablation_csv(const std::vector<AblationRow>& rows,
                        const std::string& path) {
  CsvTable table;
  table.header = {"config", "f1", "accuracy"};
  for (const auto& row : rows) {
    table.rows.push_back({row.name, format_double(row.report.f1),
                          format_double(row.report.accuracy)});
  }
  write_csv(table, path);
}

std::vector<SweepPoint> run_sensitivity(const ModelConfig& model_cfg,
                                        const TrainConfig& cfg,
                                        const ExperimentData& data,
                                        const SweepGrids& grids) {
  std::vector<SweepPoint> points;
  for (const double v : grids.lambda_mmd) {
    TrainConfig c = cfg;
    c.loss_weights.lambda_mmd = v;
    const EvalReport r = run_single(model_cfg, c, data, true);
    points.push_back({"lambda_mmd", v, r.f1, r.accuracy});
  }
  for (const double v : grids.lambda_ctr) {
    TrainConfig c = cfg;
    c.loss_weights.lambda_ctr = v;
    const EvalReport r = run_single(model_cfg, c, data, true);
    points.push_back({"lambda_ctr", v, r.f1, r.accuracy});
  }
  for (const std::size_t b : grids.tta_batch) {
    TrainConfig c = cfg;
    c.tta_batch_size = b;
    const EvalReport r = run_single(model_cfg, c, data, true);
    points.push_back({"tta_batch", static_cast<double>(b), r.f1, r.accuracy});
  }
  return points;
}

void write_sweep_csv(const std::vector<SweepPoint>& points,
                     const std::string& path) {
  CsvTable table;
  table.header = {"sweep", "value", "f1", "accuracy"};
  for (const auto& p : points) {
    table.rows.push_back({p.sweep, format_double(p.value),
                          format_double(p.f1), format_double(p.accuracy)});
  }
  write_csv(table, path);
}

std::string describe_config(const TrainConfig& cfg,
                            const ModelConfig& model_cfg) {
  std::ostringstream out;
  out << "batch_size=" << cfg.batch_size << '\n'
      << "max_epochs=" << cfg.max_epochs << '\n'
      << "patience=" << cfg.patience << '\n'
      << "learning_rate=" << format_double(cfg.learning_rate) << '\n'
      << "lambda_ce=" << format_double(cfg.loss_weights.lambda_ce) << '\n'
      << "lambda_ctr=" << format_double(cfg.loss_weights.lambda_ctr) << '\n'
      << "lambda_mmd=" << format_double(cfg.loss_weights.lambda_mmd) << '\n'
      << "temperature=" << format_double(cfg.loss_weights.temperature) << '\n';
  if (cfg.loss_weights.sigma.kind == BandwidthPolicy::Kind::Fixed) {
    out << "sigma=" << format_double(cfg.loss_weights.sigma.fixed_value)
        << '\n';
  } else {
    out << "sigma=median\n";
  }
  out << "augment_std=" << format_double(cfg.augment_std) << '\n'
      << "seed=" << cfg.seed << '\n'
      << "tta_batch_size=" << cfg.tta_batch_size << '\n'
      << "tta_passes=" << cfg.tta_passes << '\n'
      << "symmetrize_contrastive=" << (cfg.symmetrize_contrastive ? 1 : 0)
      << '\n'
      << "validation_fraction=" << format_double(cfg.validation_fraction)
      << '\n'
      << "input_dim=" << model_cfg.input_dim << '\n'
      << "proj_hidden=" << model_cfg.proj_hidden << '\n'
      << "proj_out=" << model_cfg.proj_out << '\n'
      << "cls_hidden=" << model_cfg.cls_hidden << '\n'
      << "num_classes=" << model_cfg.num_classes << '\n'
      << "dropout_rate=" << format_double(model_cfg.dropout_rate) << '\n'
      << "bn_momentum=" << format_double(model_cfg.bn_momentum) << '\n'
      << "bn_epsilon=" << format_double(model_cfg.bn_epsilon) << '\n';
  return out.str();
}

std::string config_hash(const TrainConfig& cfg, const ModelConfig& model_cfg) {
  const std::string text = describe_config(cfg, model_cfg);
  std::uint64_t h = 1469598103934665603ULL;
  for (const unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx",
                static_cast<unsigned long long>(h));
  return std::string(buf);
}

void write_metrics_json(const EvalReport& report, const std::string& path) {
  nlohmann::json j{{"accuracy", report.accuracy},
                   {"f1", report.f1},
                   {"confusion",
                    {{"tp", report.counts.tp},
                     {"fp", report.counts.fp},
                     {"tn", report.counts.tn},
                     {"fn", report.counts.fn}}},
                   {"variance_x", report.variance_x},
                   {"variance_z", report.variance_z},
                   {"seed", report.seed},
                   {"config_hash", report.config_hash},
                   {"tta_applied", report.tta_applied}};
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("write_metrics_json: cannot open " + path);
  }
  out << j.dump(2) << '\n';
}

void write_projection2d_csv(const ModelState& model,
                            const LabeledSet& target_test,
                            const std::string& path) {
  const Matrix px = project_2d(target_test.features);
  const Matrix z = project(model, target_test.features);
  const Matrix pz = project_2d(z);
  CsvTable table;
  table.header = {"id", "domain", "label", "space", "pc1", "pc2"};
  for (std::size_t i = 0; i < target_test.size(); ++i) {
    table.rows.push_back({target_test.ids[i], target_test.domains[i],
                          std::to_string(target_test.labels[i]), "x",
                          format_double(px.at(i, 0)),
                          format_double(px.at(i, 1))});
  }
  for (std::size_t i = 0; i < target_test.size(); ++i) {
    table.rows.push_back({target_test.ids[i], target_test.domains[i],
                          std::to_string(target_test.labels[i]), "z",
                          format_double(pz.at(i, 0)),
                          format_double(pz.at(i, 1))});
  }
  write_csv(table, path);
}

}  // namespace domadapt
