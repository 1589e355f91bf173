#include "cbm/data.hpp"

#include "cbm/error.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>

namespace cbm {

namespace {

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    const std::size_t start = i;
    while (i < line.size() && !std::isspace(static_cast<unsigned char>(line[i]))) ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

std::optional<long long> parse_int(std::string_view token) {
  long long v = 0;
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc() || ptr != token.data() + token.size()) return std::nullopt;
  return v;
}

// Line source that skips '#' comments and blank lines and remembers line numbers.
class LineReader {
 public:
  explicit LineReader(std::istream& in) : in_(in) {}

  bool next(std::string& line) {
    while (std::getline(in_, line)) {
      ++number_;
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto first = line.find_first_not_of(" \t");
      if (first == std::string::npos || line[first] == '#') continue;
      return true;
    }
    return false;
  }

  std::string require(const char* what) {
    std::string line;
    if (!next(line)) throw FormatError(std::string("unexpected end of file, expected ") + what, number_ + 1);
    return line;
  }

  // Reads "key: value" and returns value.
  std::string field(std::string_view key) {
    const std::string line = require(std::string(key).c_str());
    const auto colon = line.find(':');
    if (colon == std::string::npos || std::string_view(line).substr(0, colon) != key)
      throw FormatError("expected field '" + std::string(key) + "'", number_);
    auto value = line.substr(colon + 1);
    const auto b = value.find_first_not_of(" \t");
    return b == std::string::npos ? std::string() : value.substr(b);
  }

  std::size_t count_field(std::string_view key) {
    const auto v = parse_int(field(key));
    if (!v || *v < 0) throw FormatError("field '" + std::string(key) + "' must be a non-negative integer", number_);
    return static_cast<std::size_t>(*v);
  }

  std::vector<double> numbers(std::size_t expected, const char* what) {
    const std::string line = require(what);
    const auto tokens = split_ws(line);
    if (tokens.size() != expected)
      throw FormatError(std::string(what) + ": expected " + std::to_string(expected) + " values, found " +
                            std::to_string(tokens.size()),
                        number_);
    std::vector<double> out;
    out.reserve(expected);
    for (auto t : tokens) out.push_back(parse_double(t, number_));
    return out;
  }

  std::size_t line() const noexcept { return number_; }

 private:
  std::istream& in_;
  std::size_t number_ = 0;
};

void header(LineReader& r, std::string_view kind) {
  const auto version = r.field("format_version");
  if (version != std::to_string(kFormatVersion))
    throw FormatError("unsupported format_version '" + version + "'", r.line());
  if (r.field("kind") != kind) throw FormatError("expected kind '" + std::string(kind) + "'", r.line());
}

void write_row(std::ostream& out, const auto& values) {
  for (Eigen::Index j = 0; j < values.size(); ++j) {
    if (j) out << ' ';
    out << format_double(values[j]);
  }
  out << '\n';
}

Matrix read_matrix(LineReader& r, std::size_t rows, std::size_t cols, const char* what) {
  Matrix m(rows, cols);
  for (std::size_t i = 0; i < rows; ++i) {
    const auto v = r.numbers(cols, what);
    for (std::size_t j = 0; j < cols; ++j) m(i, j) = v[j];
  }
  return m;
}

Vector read_vector(LineReader& r, std::size_t n, const char* what) {
  const auto v = r.numbers(n, what);
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(n));
}

std::vector<std::string> read_names(LineReader& r) {
  const std::size_t n = r.count_field("class_names");
  std::vector<std::string> names;
  for (std::size_t i = 0; i < n; ++i) names.push_back(r.require("class name"));
  return names;
}

void write_names(std::ostream& out, const std::vector<std::string>& names) {
  out << "class_names: " << names.size() << '\n';
  for (const auto& n : names) {
    if (n.empty() || n.find('\n') != std::string::npos || n.front() == '#')
      throw ParameterError("class names must be non-empty single lines not starting with '#'");
    out << n << '\n';
  }
}

std::pair<std::size_t, std::size_t> dims_pair(LineReader& r, std::string_view value) {
  const auto tokens = split_ws(value);
  if (tokens.size() < 2) throw FormatError("expected two dimensions", r.line());
  const auto a = parse_int(tokens[0]);
  const auto b = parse_int(tokens[1]);
  if (!a || !b || *a < 1 || *b < 1) throw FormatError("dimensions must be positive integers", r.line());
  return {static_cast<std::size_t>(*a), static_cast<std::size_t>(*b)};
}

std::ifstream open_in(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "' for reading");
  return in;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw FormatError("cannot open '" + path.string() + "' for writing");
  return out;
}

}  // namespace

std::string format_double(double v) {
  char buf[64];
  const auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);  // shortest form that parses back exactly
  if (ec != std::errc()) throw FormatError("cannot format value");
  return std::string(buf, ptr);
}

double parse_double(std::string_view token, std::size_t line) {
  double v = 0.0;
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), v);
  if (ec != std::errc() || ptr != token.data() + token.size())
    throw FormatError("invalid number '" + std::string(token) + "'", line);
  return v;
}

void SyntheticConfig::validate() const {
  if (num_concepts < 1 || num_classes < 1 || feature_dim < 1 || n_per_class < 1)
    throw ParameterError("synthetic K, C, d and n_per_class must be >= 1");
  if (!(sharpness > 0.5 && sharpness <= 1.0)) throw ParameterError("sharpness must lie in (0.5, 1]");
  if (!(feature_noise_std >= 0.0)) throw ParameterError("feature_noise_std must be >= 0");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ParameterError("train_fraction must lie in (0,1)");
}

SplitDataset synth_generate(const SyntheticConfig& cfg) {
  cfg.validate();
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);

  const auto k = static_cast<Eigen::Index>(cfg.num_concepts);
  Matrix prototypes(cfg.num_classes, cfg.num_concepts);
  for (Eigen::Index j = 0; j < prototypes.rows(); ++j)
    for (Eigen::Index i = 0; i < k; ++i) prototypes(j, i) = unit(rng) < 0.5 ? 1.0 : 0.0;

  Matrix mixing(cfg.feature_dim, cfg.num_concepts);
  const double scale = 1.0 / std::sqrt(static_cast<double>(cfg.num_concepts));
  for (Eigen::Index r = 0; r < mixing.rows(); ++r)
    for (Eigen::Index c = 0; c < k; ++c) mixing(r, c) = scale * normal(rng);

  SplitDataset out;
  for (Dataset* d : {&out.train, &out.test}) {
    d->num_concepts = cfg.num_concepts;
    d->num_classes = cfg.num_classes;
    d->feature_dim = cfg.feature_dim;
    d->provenance = Provenance::synthetic;
  }

  const auto n_train = static_cast<std::size_t>(std::llround(cfg.train_fraction * double(cfg.n_per_class)));
  for (std::size_t label = 0; label < cfg.num_classes; ++label) {
    for (std::size_t n = 0; n < cfg.n_per_class; ++n) {
      Vector c(k);
      for (Eigen::Index i = 0; i < k; ++i) {
        const double bit = prototypes(static_cast<Eigen::Index>(label), i);
        c[i] = unit(rng) < cfg.sharpness ? bit : 1.0 - bit;
      }
      Vector x = mixing * c;
      for (Eigen::Index r = 0; r < x.size(); ++r) x[r] += cfg.feature_noise_std * normal(rng);
      LabeledSample s{std::move(x), ConceptVector::ground_truth(std::move(c)), label};
      (n < n_train ? out.train : out.test).samples.push_back(std::move(s));
    }
  }
  std::shuffle(out.train.samples.begin(), out.train.samples.end(), rng);
  std::shuffle(out.test.samples.begin(), out.test.samples.end(), rng);
  out.train.validate();
  out.test.validate();
  return out;
}

SplitDataset stratified_split(const Dataset& d, double train_fraction, std::uint64_t seed) {
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ParameterError("train_fraction must lie in (0,1)");
  std::mt19937_64 rng(seed);
  SplitDataset out{d, d};
  out.train.samples.clear();
  out.test.samples.clear();
  std::vector<std::vector<std::size_t>> by_class(d.num_classes);
  for (std::size_t i = 0; i < d.samples.size(); ++i) by_class.at(d.samples[i].label).push_back(i);
  for (auto& idx : by_class) {
    std::shuffle(idx.begin(), idx.end(), rng);
    const auto n_train = static_cast<std::size_t>(std::llround(train_fraction * double(idx.size())));
    for (std::size_t j = 0; j < idx.size(); ++j) (j < n_train ? out.train : out.test).samples.push_back(d.samples[idx[j]]);
  }
  return out;
}

std::vector<int> CubIngestConfig::default_class_ids() {
  std::vector<int> ids(15);
  std::iota(ids.begin(), ids.end(), 1);
  return ids;
}

void CubIngestConfig::validate() const {
  if (class_ids.empty()) throw ParameterError("class_ids must not be empty");
  for (int id : class_ids)
    if (id < 1 || id > 200) throw ParameterError("class id " + std::to_string(id) + " outside [1, 200]");
  if (!(train_fraction > 0.0 && train_fraction < 1.0)) throw ParameterError("train_fraction must lie in (0,1)");
}

CubIngestResult cub_ingest(const CubIngestConfig& cfg) {
  cfg.validate();
  const std::set<int> wanted(cfg.class_ids.begin(), cfg.class_ids.end());
  std::map<int, std::size_t> label_of;
  for (int id : wanted) label_of.emplace(id, label_of.size());

  auto open = [&](const std::filesystem::path& rel) {
    const auto path = cfg.root / rel;
    std::ifstream in(path);
    if (!in) throw IngestError("missing CUB file: " + path.string());
    return in;
  };
  auto for_each_row = [](std::ifstream& in, auto&& fn) {
    std::string line;
    while (std::getline(in, line)) {
      if (!line.empty() && line.back() == '\r') line.pop_back();
      const auto tokens = split_ws(line);
      if (!tokens.empty()) fn(tokens);
    }
  };

  auto classes_in = open("classes.txt");
  std::map<int, std::string> class_names;
  for_each_row(classes_in, [&](const auto& t) {
    if (t.size() >= 2)
      if (auto id = parse_int(t[0])) class_names[static_cast<int>(*id)] = std::string(t[1]);
  });

  auto labels_in = open("image_class_labels.txt");
  std::map<int, int> class_of_image;
  for_each_row(labels_in, [&](const auto& t) {
    if (t.size() < 2) return;
    const auto img = parse_int(t[0]);
    const auto cls = parse_int(t[1]);
    if (img && cls && wanted.count(static_cast<int>(*cls))) class_of_image[static_cast<int>(*img)] = static_cast<int>(*cls);
  });

  auto split_in = open("train_test_split.txt");
  std::map<int, bool> is_train;
  for_each_row(split_in, [&](const auto& t) {
    if (t.size() < 2) return;
    const auto img = parse_int(t[0]);
    const auto flag = parse_int(t[1]);
    if (img && flag) is_train[static_cast<int>(*img)] = *flag != 0;
  });

  auto attrs_in = open(std::filesystem::path("attributes") / "image_attribute_labels.txt");
  CubIngestResult result;
  std::map<int, std::vector<int>> attributes;  // image -> per-attribute flag, -1 = unseen
  for_each_row(attrs_in, [&](const auto& t) {
    std::optional<long long> img, attr, present;
    if (t.size() >= 3) {
      img = parse_int(t[0]);
      attr = parse_int(t[1]);
      present = parse_int(t[2]);
    }
    if (!img || !attr || !present || *attr < 1 || *attr > static_cast<long long>(kCubAttributeCount) ||
        (*present != 0 && *present != 1)) {
      ++result.malformed_rows;
      return;
    }
    const int image = static_cast<int>(*img);
    if (!class_of_image.count(image)) return;
    auto& row = attributes[image];
    if (row.empty()) row.assign(kCubAttributeCount, -1);
    auto& slot = row[static_cast<std::size_t>(*attr - 1)];
    if (slot != -1) throw IngestError("duplicate attribute " + std::to_string(*attr) + " for image " + std::to_string(image));
    slot = static_cast<int>(*present);
  });

  Dataset& d = result.dataset;
  d.num_concepts = kCubAttributeCount;
  d.num_classes = wanted.size();
  d.feature_dim = 0;
  d.provenance = Provenance::cub;
  bool all_named = true;
  for (int id : wanted) {
    if (!class_names.count(id)) all_named = false;
  }
  if (all_named)
    for (int id : wanted) d.class_names.push_back(class_names[id]);

  for (const auto& [image, cls] : class_of_image) {  // std::map iterates in image-id order
    const auto it = attributes.find(image);
    const std::size_t seen =
        it == attributes.end() ? 0 : static_cast<std::size_t>(std::count_if(it->second.begin(), it->second.end(), [](int v) { return v != -1; }));
    if (seen != kCubAttributeCount)
      throw IngestError("image " + std::to_string(image) + " has " + std::to_string(seen) + " attributes, expected " +
                        std::to_string(kCubAttributeCount));
    Vector c(static_cast<Eigen::Index>(kCubAttributeCount));
    for (std::size_t a = 0; a < kCubAttributeCount; ++a) c[static_cast<Eigen::Index>(a)] = it->second[a];
    d.samples.push_back({std::nullopt, ConceptVector::ground_truth(std::move(c)), label_of.at(cls)});
    result.image_ids.push_back(image);
    const auto split = is_train.find(image);
    if (split == is_train.end()) throw IngestError("image " + std::to_string(image) + " missing from train_test_split.txt");
    result.official_train.push_back(split->second);
  }
  d.validate();
  return result;
}

SplitDataset official_split(const CubIngestResult& r) {
  SplitDataset out{r.dataset, r.dataset};
  out.train.samples.clear();
  out.test.samples.clear();
  for (std::size_t i = 0; i < r.dataset.samples.size(); ++i)
    (r.official_train[i] ? out.train : out.test).samples.push_back(r.dataset.samples[i]);
  return out;
}

void dataset_save(std::ostream& out, const Dataset& d) {
  d.validate();
  out << "# cbm dataset\n";
  out << "format_version: " << kFormatVersion << '\n';
  out << "kind: dataset\n";
  out << "K: " << d.num_concepts << '\n';
  out << "C: " << d.num_classes << '\n';
  out << "d: " << d.feature_dim << '\n';
  out << "provenance: " << to_string(d.provenance) << '\n';
  write_names(out, d.class_names);
  out << "n: " << d.samples.size() << '\n';
  out << "# label, " << d.feature_dim << " features, " << d.num_concepts << " concepts\n";
  for (const auto& s : d.samples) {
    out << s.label;
    if (s.features)
      for (Eigen::Index j = 0; j < s.features->size(); ++j) out << ' ' << format_double((*s.features)[j]);
    for (Eigen::Index j = 0; j < s.concepts.size(); ++j) out << ' ' << format_double(s.concepts[j]);
    out << '\n';
  }
  if (!out) throw FormatError("write failed");
}

void dataset_save(const std::filesystem::path& path, const Dataset& d) {
  auto out = open_out(path);
  dataset_save(out, d);
}

Dataset dataset_load(std::istream& in) {
  LineReader r(in);
  header(r, "dataset");
  Dataset d;
  d.num_concepts = r.count_field("K");
  d.num_classes = r.count_field("C");
  d.feature_dim = r.count_field("d");
  try {
    d.provenance = provenance_from_string(r.field("provenance"));
  } catch (const ParameterError& e) {
    throw FormatError(e.what(), r.line());
  }
  d.class_names = read_names(r);
  const std::size_t n = r.count_field("n");
  if (d.num_concepts == 0 || d.num_classes == 0) throw FormatError("K and C must be positive", r.line());

  const std::size_t width = 1 + d.feature_dim + d.num_concepts;
  d.samples.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::string line;
    if (!r.next(line))
      throw FormatError("file ends after " + std::to_string(i) + " of " + std::to_string(n) + " samples", r.line() + 1);
    const auto tokens = split_ws(line);
    if (tokens.size() != width)
      throw FormatError("expected " + std::to_string(width) + " fields, found " + std::to_string(tokens.size()), r.line());
    const auto label = parse_int(tokens[0]);
    if (!label || *label < 0 || static_cast<std::size_t>(*label) >= d.num_classes)
      throw FormatError("invalid label '" + std::string(tokens[0]) + "'", r.line());
    std::optional<Vector> features;
    if (d.feature_dim) {
      features.emplace(static_cast<Eigen::Index>(d.feature_dim));
      for (std::size_t j = 0; j < d.feature_dim; ++j) (*features)[Eigen::Index(j)] = parse_double(tokens[1 + j], r.line());
    }
    Vector c(static_cast<Eigen::Index>(d.num_concepts));
    for (std::size_t j = 0; j < d.num_concepts; ++j) c[Eigen::Index(j)] = parse_double(tokens[1 + d.feature_dim + j], r.line());
    try {
      d.samples.push_back({std::move(features), ConceptVector(std::move(c)), static_cast<std::size_t>(*label)});
    } catch (const Error& e) {
      throw FormatError(e.what(), r.line());
    }
  }
  std::string extra;
  if (r.next(extra)) throw FormatError("unexpected content after " + std::to_string(n) + " samples", r.line());
  d.validate();
  return d;
}

Dataset dataset_load(const std::filesystem::path& path) {
  auto in = open_in(path);
  return dataset_load(in);
}

bool Checkpoint::operator==(const Checkpoint& other) const {
  return predictor == other.predictor && head == other.head && lambda_s == other.lambda_s;
}

void model_save(std::ostream& out, const Checkpoint& m) {
  out << "# cbm model\n";
  out << "format_version: " << kFormatVersion << '\n';
  out << "kind: model\n";
  out << "lambda_s: " << (m.lambda_s ? format_double(*m.lambda_s) : std::string("none")) << '\n';
  if (m.predictor) {
    const auto& p = *m.predictor;
    out << "predictor: " << p.num_concepts() << ' ' << p.input_dim() << ' '
        << (p.activation() == ConceptActivation::sigmoid ? "sigmoid" : "identity") << '\n';
    for (Eigen::Index i = 0; i < p.weights().rows(); ++i) write_row(out, p.weights().row(i));
    write_row(out, p.bias());
  } else {
    out << "predictor: none\n";
  }
  out << "head: " << m.head.num_classes() << ' ' << m.head.num_concepts() << '\n';
  for (Eigen::Index i = 0; i < m.head.weights().rows(); ++i) write_row(out, m.head.weights().row(i));
  write_row(out, m.head.bias());
  write_names(out, m.head.class_names());
  if (!out) throw FormatError("write failed");
}

void model_save(const std::filesystem::path& path, const Checkpoint& m) {
  auto out = open_out(path);
  model_save(out, m);
}

Checkpoint model_load(std::istream& in) {
  LineReader r(in);
  header(r, "model");
  std::optional<double> lambda_s;
  if (const auto v = r.field("lambda_s"); v != "none") lambda_s = parse_double(v, r.line());

  std::optional<LinearConceptPredictor> predictor;
  if (const auto v = r.field("predictor"); v != "none") {
    const auto [k, d] = dims_pair(r, v);
    const auto tokens = split_ws(v);
    auto activation = ConceptActivation::sigmoid;
    if (tokens.size() == 3 && tokens[2] == "identity") activation = ConceptActivation::identity;
    else if (tokens.size() != 3 || tokens[2] != "sigmoid") throw FormatError("bad predictor header", r.line());
    Matrix w = read_matrix(r, k, d, "predictor weights");
    Vector b = read_vector(r, k, "predictor bias");
    predictor.emplace(std::move(w), std::move(b), activation);
  }

  const auto [c, k] = dims_pair(r, r.field("head"));
  const std::size_t header_line = r.line();
  Matrix w = read_matrix(r, c, k, "head weights");
  Vector b = read_vector(r, c, "head bias");
  auto names = read_names(r);
  if (predictor && predictor->num_concepts() != k)
    throw FormatError("head K differs from predictor K", header_line);
  std::string extra;
  if (r.next(extra)) throw FormatError("unexpected content after model", r.line());
  try {
    return {std::move(predictor), LinearHead(std::move(w), std::move(b), std::move(names)), lambda_s};
  } catch (const Error& e) {
    throw FormatError(e.what(), header_line);
  }
}

Checkpoint model_load(const std::filesystem::path& path) {
  auto in = open_in(path);
  return model_load(in);
}

}  // namespace cbm
