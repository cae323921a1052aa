#include "domadapt/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "domadapt/errors.hpp"
#include "json.hpp"

namespace domadapt {

namespace {

using nlohmann::json;

bool has_suffix(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) {
    throw IoError("load_embeddings: cannot open " + path);
  }
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

std::string read_gzip_file(const std::string& path) {
  gzFile gz = gzopen(path.c_str(), "rb");
  if (gz == nullptr) {
    throw IoError("load_embeddings: cannot open " + path);
  }
  std::string out;
  char chunk[1 << 16];
  int n = 0;
  while ((n = gzread(gz, chunk, sizeof(chunk))) > 0) {
    out.append(chunk, static_cast<std::size_t>(n));
  }
  const bool failed = n < 0;
  gzclose(gz);
  if (failed) {
    throw IoError("load_embeddings: gzip read failed for " + path);
  }
  return out;
}

EmbeddingRecord record_from_json(const json& j, std::size_t line_no) {
  const auto fail = [&](const std::string& why) -> ParseError {
    return ParseError("line " + std::to_string(line_no) + ": " + why);
  };
  if (!j.is_object()) throw fail("record is not a JSON object");
  EmbeddingRecord rec;
  if (!j.contains("id") || !j.at("id").is_string()) {
    throw fail("missing string field 'id'");
  }
  rec.id = j.at("id").get<std::string>();
  if (!j.contains("domain") || !j.at("domain").is_string()) {
    throw fail("missing string field 'domain'");
  }
  rec.domain = j.at("domain").get<std::string>();
  if (!j.contains("label")) throw fail("missing field 'label'");
  const json& lab = j.at("label");
  if (lab.is_null()) {
    rec.label = std::nullopt;
  } else if (lab.is_number_integer()) {
    const int v = lab.get<int>();
    if (v != 0 && v != 1) throw fail("label must be 0, 1 or null");
    rec.label = v;
  } else {
    throw fail("label must be 0, 1 or null");
  }
  if (!j.contains("features") || !j.at("features").is_array()) {
    throw fail("missing array field 'features'");
  }
  rec.features.reserve(j.at("features").size());
  for (const json& v : j.at("features")) {
    if (!v.is_number()) throw fail("features must be numbers");
    const double x = v.get<double>();
    if (!std::isfinite(x)) throw fail("non-finite feature value");
    rec.features.push_back(x);
  }
  return rec;
}

std::vector<EmbeddingRecord> parse_jsonl(const std::string& text) {
  std::vector<EmbeddingRecord> records;
  std::unordered_set<std::string> seen_ids;
  std::size_t line_no = 0;
  std::size_t start = 0;
  std::optional<std::size_t> dim;
  std::size_t dim_line = 0;
  while (start < text.size()) {
    std::size_t end = text.find('\n', start);
    if (end == std::string::npos) end = text.size();
    ++line_no;
    const std::string_view line(text.data() + start, end - start);
    start = end + 1;
    if (line.empty() ||
        line.find_first_not_of(" \t\r") == std::string_view::npos) {
      continue;
    }
    json j;
    try {
      j = json::parse(line);
    } catch (const json::parse_error& e) {
      throw ParseError("line " + std::to_string(line_no) + ": " + e.what());
    }
    EmbeddingRecord rec = record_from_json(j, line_no);
    if (!dim.has_value()) {
      dim = rec.features.size();
      dim_line = line_no;
    } else if (rec.features.size() != *dim) {
      throw SchemaError("line " + std::to_string(line_no) + ": feature dim " +
                        std::to_string(rec.features.size()) +
                        " conflicts with dim " + std::to_string(*dim) +
                        " from line " + std::to_string(dim_line));
    }
    if (!seen_ids.insert(rec.id).second) {
      throw SchemaError("line " + std::to_string(line_no) +
                        ": duplicate id '" + rec.id + "'");
    }
    records.push_back(std::move(rec));
  }
  return records;
}

std::string record_to_line(const EmbeddingRecord& rec) {
  json j;
  j["id"] = rec.id;
  j["domain"] = rec.domain;
  if (rec.label.has_value()) {
    j["label"] = *rec.label;
  } else {
    j["label"] = nullptr;
  }
  j["features"] = rec.features;
  return j.dump();
}

Matrix features_matrix(const std::vector<const EmbeddingRecord*>& rows) {
  if (rows.empty()) return {};
  const std::size_t d = rows.front()->features.size();
  Matrix m(rows.size(), d);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy(rows[i]->features.begin(), rows[i]->features.end(),
              m.row(i).begin());
  }
  return m;
}

// Applies a plane rotation by angle in span(e1, e2) to x (orthonormal
// e1, e2): x' = x + (cos-1)(a e1 + b e2) + sin (a e2 - b e1) with
// a = x.e1, b = x.e2.
void rotate_in_plane(std::vector<double>& x, const std::vector<double>& e1,
                     const std::vector<double>& e2, double angle) {
  double a = 0.0;
  double b = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    a += x[i] * e1[i];
    b += x[i] * e2[i];
  }
  const double c = std::cos(angle);
  const double s = std::sin(angle);
  const double na = c * a - s * b;
  const double nb = s * a + c * b;
  for (std::size_t i = 0; i < x.size(); ++i) {
    x[i] += (na - a) * e1[i] + (nb - b) * e2[i];
  }
}

std::vector<double> random_unit_vector(SeededRng& rng, std::size_t dim) {
  std::vector<double> v(dim);
  double n = 0.0;
  while (n == 0.0) {
    for (auto& x : v) x = rng.next_gaussian();
    n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
  }
  for (auto& x : v) x /= n;
  return v;
}

}  // namespace

void DomainPartition::validate() const {
  if (source_domains.empty() || target_domains.empty()) {
    throw DataError("DomainPartition: both domain sets must be non-empty");
  }
  for (const auto& d : source_domains) {
    if (target_domains.count(d) != 0) {
      throw DataError("DomainPartition: domain '" + d +
                      "' appears on both sides");
    }
  }
}

std::vector<EmbeddingRecord> load_embeddings(const std::string& path) {
  const std::string text = has_suffix(path, ".jsonl.gz")
                               ? read_gzip_file(path)
                               : read_text_file(path);
  return parse_jsonl(text);
}

void save_embeddings(const std::vector<EmbeddingRecord>& records,
                     const std::string& path) {
  std::string body;
  for (const auto& rec : records) {
    body += record_to_line(rec);
    body += '\n';
  }
  if (has_suffix(path, ".jsonl.gz")) {
    gzFile gz = gzopen(path.c_str(), "wb");
    if (gz == nullptr) {
      throw IoError("save_embeddings: cannot open " + path);
    }
    const int written =
        gzwrite(gz, body.data(), static_cast<unsigned>(body.size()));
    gzclose(gz);
    if (written != static_cast<int>(body.size())) {
      throw IoError("save_embeddings: gzip write failed for " + path);
    }
    return;
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) {
    throw IoError("save_embeddings: cannot open " + path);
  }
  out << body;
  if (!out) {
    throw IoError("save_embeddings: write failed for " + path);
  }
}

PartitionResult partition(const std::vector<EmbeddingRecord>& records,
                          const DomainPartition& domains, std::uint64_t seed,
                          double test_fraction) {
  domains.validate();
  if (test_fraction < 0.0 || test_fraction > 1.0) {
    throw ParameterError("partition: test fraction must be in [0, 1]");
  }
  std::vector<const EmbeddingRecord*> source_rows;
  std::vector<const EmbeddingRecord*> target_rows;
  for (const auto& rec : records) {
    const bool in_source = domains.source_domains.count(rec.domain) != 0;
    const bool in_target = domains.target_domains.count(rec.domain) != 0;
    if (!in_source && !in_target) {
      throw DataError("partition: record '" + rec.id + "' has domain '" +
                      rec.domain + "' outside both partitions");
    }
    if (in_source) {
      if (!rec.label.has_value()) {
        throw DataError("partition: source record '" + rec.id +
                        "' is unlabeled");
      }
      source_rows.push_back(&rec);
    } else {
      target_rows.push_back(&rec);
    }
  }

  PartitionResult result;
  result.source.features = features_matrix(source_rows);
  for (const auto* rec : source_rows) {
    result.source.ids.push_back(rec->id);
    result.source.domains.push_back(rec->domain);
    result.source.labels.push_back(*rec->label);
  }

  // Seeded target train/test split; membership depends only on the seed
  // and the target ordering in the input file.
  std::vector<std::size_t> order(target_rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  SeededRng split_rng = SeededRng(seed).fork(0x74657374ULL);
  split_rng.shuffle(order);
  const auto n_test = static_cast<std::size_t>(
      std::llround(test_fraction * static_cast<double>(target_rows.size())));
  std::vector<bool> is_test(target_rows.size(), false);
  for (std::size_t i = 0; i < n_test; ++i) is_test[order[i]] = true;

  std::vector<const EmbeddingRecord*> train_rows;
  std::vector<const EmbeddingRecord*> test_rows;
  for (std::size_t i = 0; i < target_rows.size(); ++i) {
    (is_test[i] ? test_rows : train_rows).push_back(target_rows[i]);
  }
  result.target_train.features = features_matrix(train_rows);
  for (const auto* rec : train_rows) {
    result.target_train.ids.push_back(rec->id);
    result.target_train.domains.push_back(rec->domain);
  }
  result.target_test.features = features_matrix(test_rows);
  for (const auto* rec : test_rows) {
    if (!rec->label.has_value()) {
      throw DataError("partition: target test record '" + rec->id +
                      "' is unlabeled");
    }
    result.target_test.ids.push_back(rec->id);
    result.target_test.domains.push_back(rec->domain);
    result.target_test.labels.push_back(*rec->label);
  }
  return result;
}

void SyntheticSpec::validate() const {
  if (n_domains == 0 || per_domain == 0 || dim == 0) {
    throw ParameterError("SyntheticSpec: counts must be >= 1");
  }
  if (margin < 0.0 || noise_std < 0.0) {
    throw ParameterError("SyntheticSpec: margin and noise std must be >= 0");
  }
  if (shift < 0.0) {
    throw ParameterError("SyntheticSpec: shift magnitude must be >= 0");
  }
  if (dim < 2 && shift > 0.0) {
    throw ParameterError(
        "SyntheticSpec: rotation needs dim >= 2 when shift > 0");
  }
}

std::string synthetic_domain_name(std::size_t k) {
  return "d" + std::to_string(k);
}

std::vector<EmbeddingRecord> generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  SeededRng root(spec.seed);
  SeededRng geometry = root.fork(1);

  // Shared class direction, an orthogonal partner spanning the rotation
  // plane, and the offset direction for domain translation.
  std::vector<double> class_dir = random_unit_vector(geometry, spec.dim);
  std::vector<double> plane_partner(spec.dim, 0.0);
  if (spec.dim >= 2) {
    plane_partner = random_unit_vector(geometry, spec.dim);
    double proj = 0.0;
    for (std::size_t i = 0; i < spec.dim; ++i) {
      proj += plane_partner[i] * class_dir[i];
    }
    double n = 0.0;
    for (std::size_t i = 0; i < spec.dim; ++i) {
      plane_partner[i] -= proj * class_dir[i];
      n += plane_partner[i] * plane_partner[i];
    }
    n = std::sqrt(n);
    if (n < 1e-9) {
      // Partner collapsed onto the class direction; take any orthogonal.
      plane_partner.assign(spec.dim, 0.0);
      plane_partner[class_dir[0] * class_dir[0] < 0.5 ? 0 : 1] = 1.0;
    } else {
      for (auto& v : plane_partner) v /= n;
    }
  }
  std::vector<double> offset_dir = random_unit_vector(geometry, spec.dim);

  std::vector<EmbeddingRecord> records;
  records.reserve(spec.n_domains * spec.per_domain);
  for (std::size_t k = 0; k < spec.n_domains; ++k) {
    SeededRng draw = root.fork(100 + k);
    const double angle =
        static_cast<double>(k) * spec.shift * SyntheticSpec::kRotationPerShift;
    const double offset =
        static_cast<double>(k) * spec.shift * SyntheticSpec::kOffsetPerShift;
    for (std::size_t i = 0; i < spec.per_domain; ++i) {
      // Alternating labels keep per-domain counts balanced within one.
      const int label = static_cast<int>(i % 2);
      std::vector<double> x(spec.dim);
      const double side = (label == 1) ? 0.5 : -0.5;
      for (std::size_t c = 0; c < spec.dim; ++c) {
        x[c] = side * spec.margin * class_dir[c] +
               spec.noise_std * draw.next_gaussian();
      }
      if (angle != 0.0) {
        rotate_in_plane(x, class_dir, plane_partner, angle);
      }
      for (std::size_t c = 0; c < spec.dim; ++c) {
        x[c] += offset * offset_dir[c];
      }
      EmbeddingRecord rec;
      rec.id = synthetic_domain_name(k) + "-" + std::to_string(i);
      rec.domain = synthetic_domain_name(k);
      rec.label = label;
      rec.features = std::move(x);
      records.push_back(std::move(rec));
    }
  }
  return records;
}

LabeledSet attach_labels_by_id(const UnlabeledSet& unlabeled,
                               const std::vector<EmbeddingRecord>& records) {
  std::unordered_map<std::string, int> labels;
  for (const auto& rec : records) {
    if (rec.label.has_value()) labels.emplace(rec.id, *rec.label);
  }
  LabeledSet out;
  out.ids = unlabeled.ids;
  out.domains = unlabeled.domains;
  out.features = unlabeled.features;
  out.labels.reserve(unlabeled.size());
  for (const auto& id : unlabeled.ids) {
    const auto it = labels.find(id);
    if (it == labels.end()) {
      throw DataError("attach_labels_by_id: no labeled record for '" + id +
                      "'");
    }
    out.labels.push_back(it->second);
  }
  return out;
}

}  // namespace domadapt
