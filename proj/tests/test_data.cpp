#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <fstream>
#include <map>
#include <string>

#include "domadapt/data.hpp"
#include "domadapt/errors.hpp"
#include "domadapt/losses.hpp"

using namespace domadapt;

namespace {

struct TempFile {
  std::string path;
  explicit TempFile(std::string p) : path(std::move(p)) {}
  ~TempFile() { std::remove(path.c_str()); }
};

void write_file(const std::string& path, const std::string& body) {
  std::ofstream out(path, std::ios::binary);
  out << body;
}

Matrix domain_features(const std::vector<EmbeddingRecord>& records,
                       const std::string& domain, std::size_t limit) {
  std::vector<std::vector<double>> rows;
  for (const auto& rec : records) {
    if (rec.domain == domain && rows.size() < limit) {
      rows.push_back(rec.features);
    }
  }
  return Matrix::from_rows(rows);
}

}  // namespace

TEST_CASE("load_embeddings on an empty file yields no records") {
  TempFile f("empty.jsonl");
  write_file(f.path, "");
  CHECK(load_embeddings(f.path).empty());
}

TEST_CASE("load_embeddings round-trips a single record") {
  TempFile f("one.jsonl");
  write_file(f.path,
             R"({"id":"a1","domain":"covid","label":1,"features":[0.5,-1.25,3.0]})"
             "\n");
  const auto records = load_embeddings(f.path);
  REQUIRE(records.size() == 1);
  CHECK(records[0].id == "a1");
  CHECK(records[0].domain == "covid");
  CHECK(records[0].label == 1);
  CHECK(records[0].features == std::vector<double>{0.5, -1.25, 3.0});
}

TEST_CASE("load_embeddings reports inconsistent dimensions with both dims") {
  TempFile f("dims.jsonl");
  write_file(f.path,
             R"({"id":"a","domain":"x","label":0,"features":[1,2,3]})"
             "\n"
             R"({"id":"b","domain":"x","label":0,"features":[1,2]})"
             "\n");
  try {
    load_embeddings(f.path);
    FAIL("expected SchemaError");
  } catch (const SchemaError& e) {
    const std::string msg = e.what();
    CHECK(msg.find('3') != std::string::npos);
    CHECK(msg.find('2') != std::string::npos);
  }
}

TEST_CASE("load_embeddings rejects duplicates and malformed lines") {
  TempFile f("bad.jsonl");
  write_file(f.path,
             R"({"id":"a","domain":"x","label":0,"features":[1]})"
             "\n"
             R"({"id":"a","domain":"x","label":1,"features":[2]})"
             "\n");
  CHECK_THROWS_AS(load_embeddings(f.path), SchemaError);

  write_file(f.path, "{ this is not json\n");
  try {
    load_embeddings(f.path);
    FAIL("expected ParseError");
  } catch (const ParseError& e) {
    CHECK(std::string(e.what()).find("line 1") != std::string::npos);
  }

  write_file(f.path, R"({"id":"a","domain":"x","label":7,"features":[1]})"
                     "\n");
  CHECK_THROWS_AS(load_embeddings(f.path), ParseError);
  CHECK_THROWS_AS(load_embeddings("no_such_file.jsonl"), IoError);
}

TEST_CASE("save and load round-trip synthetic data bit-exactly") {
  SyntheticSpec spec;
  spec.n_domains = 2;
  spec.per_domain = 20;
  spec.dim = 5;
  spec.seed = 7;
  const auto records = generate_synthetic(spec);

  for (const char* name : {"roundtrip.jsonl", "roundtrip.jsonl.gz"}) {
    TempFile f(name);
    save_embeddings(records, f.path);
    const auto loaded = load_embeddings(f.path);
    REQUIRE(loaded.size() == records.size());
    for (std::size_t i = 0; i < records.size(); ++i) {
      CHECK(loaded[i].id == records[i].id);
      CHECK(loaded[i].domain == records[i].domain);
      CHECK(loaded[i].label == records[i].label);
      CHECK(loaded[i].features == records[i].features);  // bitwise
    }
  }
}

TEST_CASE("partition splits by domain and strips target-train labels") {
  SyntheticSpec spec;
  spec.n_domains = 3;
  spec.per_domain = 50;
  spec.dim = 4;
  spec.seed = 3;
  const auto records = generate_synthetic(spec);
  const DomainPartition domains{{"d0", "d1"}, {"d2"}};
  const PartitionResult split = domadapt::partition(records, domains, 11);

  CHECK(split.source.size() == 100);
  CHECK(split.target_train.size() + split.target_test.size() == 50);
  CHECK(split.target_test.size() == 10);  // 20% of 50
  for (const auto& d : split.source.domains) CHECK(domains.source_domains.count(d) == 1);
  for (const auto& d : split.target_test.domains) CHECK(d == "d2");
}

TEST_CASE("partition is deterministic in the seed") {
  SyntheticSpec spec;
  spec.n_domains = 2;
  spec.per_domain = 100;
  spec.dim = 3;
  spec.seed = 9;
  const auto records = generate_synthetic(spec);
  const DomainPartition domains{{"d0"}, {"d1"}};
  const PartitionResult a = domadapt::partition(records, domains, 42);
  const PartitionResult b = domadapt::partition(records, domains, 42);
  CHECK(a.target_test.ids == b.target_test.ids);
  CHECK(a.target_train.ids == b.target_train.ids);
  const PartitionResult c = domadapt::partition(records, domains, 43);
  CHECK(a.target_test.ids != c.target_test.ids);
}

TEST_CASE("partition error paths") {
  SyntheticSpec spec;
  spec.n_domains = 2;
  spec.per_domain = 10;
  spec.dim = 3;
  const auto records = generate_synthetic(spec);

  CHECK_THROWS_AS(domadapt::partition(records, {{"d0"}, {"d0"}}, 1), DataError);
  CHECK_THROWS_AS(domadapt::partition(records, {{}, {"d1"}}, 1), DataError);
  // d1 records have a domain outside both sides.
  CHECK_THROWS_AS(domadapt::partition(records, {{"d0"}, {"dX"}}, 1), DataError);

  // Unlabeled source record.
  auto broken = records;
  broken[0].label.reset();
  CHECK_THROWS_AS(domadapt::partition(broken, {{"d0"}, {"d1"}}, 1), DataError);

  // All records in source domains leave the target sets empty.
  std::vector<EmbeddingRecord> source_only;
  for (const auto& r : records) {
    if (r.domain == "d0") source_only.push_back(r);
  }
  const PartitionResult split = domadapt::partition(source_only, {{"d0"}, {"d1"}}, 1);
  CHECK(split.target_train.size() == 0);
  CHECK(split.target_test.size() == 0);
}

TEST_CASE("generate_synthetic balances labels within every domain") {
  SyntheticSpec spec;
  spec.n_domains = 3;
  spec.per_domain = 51;  // odd on purpose
  spec.dim = 6;
  spec.seed = 5;
  const auto records = generate_synthetic(spec);
  std::map<std::string, std::array<int, 2>> counts;
  for (const auto& rec : records) counts[rec.domain][*rec.label] += 1;
  CHECK(counts.size() == 3);
  for (const auto& [domain, c] : counts) {
    CHECK(std::abs(c[0] - c[1]) <= 1);
  }
}

TEST_CASE("generate_synthetic is deterministic in the spec seed") {
  SyntheticSpec spec;
  spec.n_domains = 2;
  spec.per_domain = 30;
  spec.dim = 8;
  spec.seed = 12;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].features == b[i].features);
  }
}

TEST_CASE("zero shift gives identically distributed domains (small MMD)") {
  SyntheticSpec spec;
  spec.n_domains = 3;
  spec.per_domain = 500;
  spec.dim = 16;
  spec.shift = 0.0;
  spec.seed = 21;
  const auto records = generate_synthetic(spec);
  const Matrix a = domain_features(records, "d0", 500);
  const Matrix b = domain_features(records, "d1", 500);
  const Matrix c = domain_features(records, "d2", 500);
  const double sigma = median_heuristic_sigma(vstack(a, vstack(b, c)));
  CHECK(empirical_mmd(a, b, sigma) < 0.05);
  CHECK(empirical_mmd(a, c, sigma) < 0.05);
  CHECK(empirical_mmd(b, c, sigma) < 0.05);
}

TEST_CASE("domain MMD from domain zero is non-decreasing in the index") {
  for (const std::uint64_t seed : {1ULL, 2ULL, 3ULL, 4ULL, 5ULL}) {
    SyntheticSpec spec;
    spec.n_domains = 4;
    spec.per_domain = 300;
    spec.dim = 8;
    spec.shift = 1.0;
    spec.seed = seed;
    const auto records = generate_synthetic(spec);
    const Matrix d0 = domain_features(records, "d0", 300);
    double prev = 0.0;
    for (std::size_t k = 1; k < 4; ++k) {
      const Matrix dk =
          domain_features(records, synthetic_domain_name(k), 300);
      const double sigma = median_heuristic_sigma(vstack(d0, dk));
      const double mmd = empirical_mmd(d0, dk, sigma);
      CHECK(mmd >= prev);
      prev = mmd;
    }
  }
}

TEST_CASE("large margins are linearly separable within a domain") {
  SyntheticSpec spec;
  spec.n_domains = 2;
  spec.per_domain = 400;
  spec.dim = 16;
  spec.margin = 10.0;
  spec.noise_std = 1.0;
  spec.seed = 31;
  const auto records = generate_synthetic(spec);

  // Mean-difference linear oracle fit on d0, evaluated on d0.
  std::vector<double> mean0(spec.dim, 0.0), mean1(spec.dim, 0.0);
  std::size_t n0 = 0, n1 = 0;
  for (const auto& rec : records) {
    if (rec.domain != "d0") continue;
    auto& m = (*rec.label == 1) ? mean1 : mean0;
    auto& n = (*rec.label == 1) ? n1 : n0;
    for (std::size_t c = 0; c < spec.dim; ++c) m[c] += rec.features[c];
    ++n;
  }
  for (std::size_t c = 0; c < spec.dim; ++c) {
    mean0[c] /= static_cast<double>(n0);
    mean1[c] /= static_cast<double>(n1);
  }
  std::size_t correct = 0, total = 0;
  for (const auto& rec : records) {
    if (rec.domain != "d0") continue;
    double score = 0.0;
    for (std::size_t c = 0; c < spec.dim; ++c) {
      const double mid = 0.5 * (mean0[c] + mean1[c]);
      score += (mean1[c] - mean0[c]) * (rec.features[c] - mid);
    }
    const int predicted = score > 0.0 ? 1 : 0;
    correct += (predicted == *rec.label) ? 1 : 0;
    ++total;
  }
  CHECK(static_cast<double>(correct) / static_cast<double>(total) > 0.99);
}

TEST_CASE("synthetic spec validation") {
  SyntheticSpec spec;
  spec.dim = 1;
  spec.shift = 1.0;
  CHECK_THROWS_AS(spec.validate(), ParameterError);
  spec = SyntheticSpec{};
  spec.per_domain = 0;
  CHECK_THROWS_AS(spec.validate(), ParameterError);
  spec = SyntheticSpec{};
  spec.margin = -1.0;
  CHECK_THROWS_AS(spec.validate(), ParameterError);
}

TEST_CASE("attach_labels_by_id restores labels for diagnostics") {
  SyntheticSpec spec;
  spec.n_domains = 2;
  spec.per_domain = 40;
  spec.dim = 3;
  spec.seed = 17;
  const auto records = generate_synthetic(spec);
  const PartitionResult split = domadapt::partition(records, {{"d0"}, {"d1"}}, 5);
  const LabeledSet relabeled = attach_labels_by_id(split.target_train, records);
  REQUIRE(relabeled.size() == split.target_train.size());
  std::map<std::string, int> truth;
  for (const auto& rec : records) truth[rec.id] = *rec.label;
  for (std::size_t i = 0; i < relabeled.size(); ++i) {
    CHECK(relabeled.labels[i] == truth[relabeled.ids[i]]);
  }
}
