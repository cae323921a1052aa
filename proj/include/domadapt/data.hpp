#pragma once

#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "domadapt/matrix.hpp"
#include "domadapt/rng.hpp"

namespace domadapt {

// One news item as a precomputed embedding vector. Label 1 means falsified
// (caption and image from different contexts), 0 means pristine.
struct EmbeddingRecord {
  std::string id;
  std::string domain;
  std::optional<int> label;
  std::vector<double> features;
};

// Mutually exclusive source/target domain tags.
struct DomainPartition {
  std::set<std::string> source_domains;
  std::set<std::string> target_domains;

  void validate() const;  // DataError on empty or overlapping sets
};

// Labeled rows: ids/domains/labels row-aligned with the feature matrix.
struct LabeledSet {
  std::vector<std::string> ids;
  std::vector<std::string> domains;
  Matrix features;
  std::vector<int> labels;

  std::size_t size() const { return ids.size(); }
};

// Unlabeled rows. Deliberately has no label field: code holding one of
// these cannot read target-train labels even by accident.
struct UnlabeledSet {
  std::vector<std::string> ids;
  std::vector<std::string> domains;
  Matrix features;

  std::size_t size() const { return ids.size(); }
};

struct PartitionResult {
  LabeledSet source;
  UnlabeledSet target_train;
  LabeledSet target_test;
};

// JSON-lines files, one record per line with keys id, domain, label
// (0/1 or null) and features. A .jsonl.gz suffix selects gzip framing.
std::vector<EmbeddingRecord> load_embeddings(const std::string& path);
void save_embeddings(const std::vector<EmbeddingRecord>& records,
                     const std::string& path);

// Splits records into labeled source, unlabeled target-train and labeled
// target-test per the partition; the target train/test split is seeded.
PartitionResult partition(const std::vector<EmbeddingRecord>& records,
                          const DomainPartition& domains, std::uint64_t seed,
                          double test_fraction = 0.2);

// Multi-domain Gaussian benchmark. Per domain k the two classes sit
// margin apart along a shared direction; the whole domain is rotated by
// k * shift in a seeded 2-plane containing that direction and translated
// by k * shift along a seeded offset direction.
struct SyntheticSpec {
  std::size_t n_domains = 3;
  std::size_t per_domain = 1000;
  std::size_t dim = 32;
  double margin = 3.0;
  double shift = 1.0;
  double noise_std = 1.0;
  std::uint64_t seed = 0;

  // Scale factors mapping one unit of shift to radians / offset distance.
  static constexpr double kRotationPerShift = 0.15;
  static constexpr double kOffsetPerShift = 1.0;

  void validate() const;
};

std::vector<EmbeddingRecord> generate_synthetic(const SyntheticSpec& spec);

// Domain tag for synthetic domain k ("d0", "d1", ...).
std::string synthetic_domain_name(std::size_t k);

// Looks up labels for the rows of an unlabeled set in the original
// records. Used only by diagnostics that deliberately train on target
// labels (the supervised upper-bound baseline); the adaptation path never
// calls this.
LabeledSet attach_labels_by_id(const UnlabeledSet& unlabeled,
                               const std::vector<EmbeddingRecord>& records);

}  // namespace domadapt
