#include "uch/data.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>

#include "uch/binary_io.hpp"
#include "uch/errors.hpp"
#include "uch/random.hpp"

namespace uch {

namespace {

constexpr std::string_view kFeatureMagic = "UCHFEAT1";
constexpr std::string_view kLabelMagic = "UCHLAB1";

std::ifstream open_in(const std::filesystem::path& path, const char* what) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IngestionError(std::string("cannot open ") + what + " file " + path.string());
  return is;
}

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  return os;
}

void require_finite(const Matrix& m, const std::string& what) {
  for (std::size_t r = 0; r < m.rows(); ++r)
    for (double v : m.row(r))
      if (!std::isfinite(v)) throw DataError(what + ": non-finite value in row " + std::to_string(r));
}

Matrix random_unit_rows(Rng& rng, std::size_t count, std::size_t dim, double min_separation) {
  Matrix anchors(count, dim);
  constexpr int kMaxAttempts = 10000;
  for (std::size_t c = 0; c < count; ++c) {
    int attempt = 0;
    for (;; ++attempt) {
      if (attempt == kMaxAttempts)
        throw ContractError("generate_synthetic: cannot place " + std::to_string(count) + " anchors " +
                            std::to_string(min_separation) + " apart in " + std::to_string(dim) + " dimensions");
      double norm = 0;
      auto row = anchors.row(c);
      for (double& v : row) {
        v = rng.normal();
        norm += v * v;
      }
      norm = std::sqrt(norm);
      if (norm == 0) continue;
      for (double& v : row) v /= norm;
      bool separated = true;
      for (std::size_t other = 0; other < c && separated; ++other) {
        double d2 = 0;
        for (std::size_t k = 0; k < dim; ++k) d2 += (anchors(c, k) - anchors(other, k)) * (anchors(c, k) - anchors(other, k));
        separated = std::sqrt(d2) >= min_separation;
      }
      if (separated) break;
    }
  }
  return anchors;
}

}  // namespace

// ---------------------------------------------------------------------------
// PairedDataset

std::vector<std::size_t> PairedDataset::indices(SplitTag tag) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < tags.size(); ++i)
    if (tags[i] == tag) out.push_back(i);
  return out;
}

PairedDataset PairedDataset::subset(std::span<const std::size_t> items) const {
  PairedDataset out;
  out.images = images.gather_rows(items);
  out.texts = texts.gather_rows(items);
  if (labels) out.labels = labels->subset(items);
  out.tags.reserve(items.size());
  for (std::size_t i : items) out.tags.push_back(tags.at(i));
  return out;
}

void PairedDataset::validate() const {
  if (images.rows() != texts.rows())
    throw IngestionError("item counts differ: " + std::to_string(images.rows()) + " images vs " +
                         std::to_string(texts.rows()) + " texts");
  if (labels && labels->rows() != images.rows())
    throw IngestionError("item counts differ: " + std::to_string(images.rows()) + " images vs " +
                         std::to_string(labels->rows()) + " label rows");
  if (tags.size() != images.rows()) throw ContractError("split tags do not cover every item");
  require_finite(images, "image features");
  require_finite(texts, "text features");
  if (labels)
    for (std::size_t i = 0; i < labels->rows(); ++i)
      if (labels->count(i) == 0) throw DataError("item " + std::to_string(i) + " has no active label");
}

// ---------------------------------------------------------------------------
// Feature files

void write_features(std::ostream& os, const Matrix& features) {
  io::write_magic(os, kFeatureMagic);
  io::write_u32_checked(os, features.rows(), "item count");
  io::write_u32_checked(os, features.cols(), "feature dimension");
  for (double v : features.values()) io::write_f32(os, static_cast<float>(v));
  if (!os) throw FormatError("feature write failed");
}

Matrix read_features(std::istream& is) {
  io::expect_magic(is, kFeatureMagic, "feature");
  const auto n = io::read_le<std::uint32_t>(is, "item count");
  const auto dim = io::read_le<std::uint32_t>(is, "feature dimension");
  Matrix m(n, dim);
  for (double& v : m.values()) v = io::read_f32(is, "feature values");
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("feature file: trailing bytes");
  return m;
}

Matrix read_features_csv(std::istream& is) {
  std::vector<double> values;
  std::size_t rows = 0, cols = 0;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::size_t count = 0;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) {
      try {
        std::size_t used = 0;
        values.push_back(std::stod(cell, &used));
        if (cell.find_first_not_of(" \t", used) != std::string::npos) throw std::invalid_argument(cell);
      } catch (const std::exception&) {
        throw FormatError("CSV line " + std::to_string(line_no) + ": cannot parse '" + cell + "'");
      }
      ++count;
    }
    if (rows == 0) cols = count;
    if (count != cols)
      throw FormatError("CSV line " + std::to_string(line_no) + " has " + std::to_string(count) + " fields, expected " +
                        std::to_string(cols));
    ++rows;
  }
  return Matrix(rows, cols, std::move(values));
}

void save_features(const std::filesystem::path& path, const Matrix& features) {
  auto os = open_out(path);
  write_features(os, features);
}

Matrix load_features(const std::filesystem::path& path) {
  auto is = open_in(path, "feature");
  std::string head(kFeatureMagic.size(), '\0');
  is.read(head.data(), std::streamsize(head.size()));
  const bool binary = is.gcount() == std::streamsize(head.size()) && head == kFeatureMagic;
  is.clear();
  is.seekg(0);
  try {
    return binary ? read_features(is) : read_features_csv(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Label files

void write_labels(std::ostream& os, const LabelMatrix& labels) {
  io::write_magic(os, kLabelMagic);
  io::write_u32_checked(os, labels.rows(), "item count");
  io::write_u32_checked(os, labels.bits(), "label count");
  const std::size_t bytes_per_row = (labels.bits() + 7) / 8;
  for (std::size_t i = 0; i < labels.rows(); ++i) {
    auto words = labels.row_words(i);
    for (std::size_t b = 0; b < bytes_per_row; ++b) os.put(static_cast<char>((words[b / 8] >> (8 * (b % 8))) & 0xFFu));
  }
  if (!os) throw FormatError("label write failed");
}

LabelMatrix read_labels(std::istream& is) {
  io::expect_magic(is, kLabelMagic, "label");
  const auto n = io::read_le<std::uint32_t>(is, "item count");
  const auto count = io::read_le<std::uint32_t>(is, "label count");
  LabelMatrix labels(n, count);
  const std::size_t bytes_per_row = (std::size_t(count) + 7) / 8;
  std::vector<std::uint64_t> words(std::size_t(n) * labels.words_per_row(), 0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < bytes_per_row; ++b) {
      const int byte = is.get();
      if (byte == std::char_traits<char>::eof()) throw FormatError("truncated input while reading label bits");
      words[i * labels.words_per_row() + b / 8] |= std::uint64_t(byte & 0xFF) << (8 * (b % 8));
    }
  labels.assign_words(std::move(words));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("label file: trailing bytes");
  return labels;
}

void save_labels(const std::filesystem::path& path, const LabelMatrix& labels) {
  auto os = open_out(path);
  write_labels(os, labels);
}

LabelMatrix load_labels(const std::filesystem::path& path) {
  auto is = open_in(path, "label");
  try {
    return read_labels(is);
  } catch (const FormatError& e) {
    throw FormatError(path.string() + ": " + e.what());
  }
}

LoadedDataset load_dataset(const std::filesystem::path& images, const std::filesystem::path& texts,
                           const std::optional<std::filesystem::path>& labels) {
  PairedDataset raw;
  raw.images = load_features(images);
  raw.texts = load_features(texts);
  if (raw.images.rows() != raw.texts.rows())
    throw IngestionError("item counts differ: " + images.string() + " has " + std::to_string(raw.images.rows()) + ", " +
                         texts.string() + " has " + std::to_string(raw.texts.rows()));
  if (labels) {
    raw.labels = load_labels(*labels);
    if (raw.labels->rows() != raw.images.rows())
      throw IngestionError("item counts differ: " + images.string() + " has " + std::to_string(raw.images.rows()) + ", " +
                           labels->string() + " has " + std::to_string(raw.labels->rows()));
  }
  require_finite(raw.images, images.string());
  require_finite(raw.texts, texts.string());
  raw.tags.assign(raw.images.rows(), SplitTag::retrieval);

  LoadedDataset out;
  for (std::size_t i = 0; i < raw.size(); ++i)
    if (!raw.labels || raw.labels->count(i) > 0) out.source_rows.push_back(i);
  out.pruned_unlabeled = raw.size() - out.source_rows.size();
  out.dataset = out.pruned_unlabeled == 0 ? std::move(raw) : raw.subset(out.source_rows);
  out.dataset.validate();
  return out;
}

// ---------------------------------------------------------------------------
// Synthetic data

void SyntheticSpec::validate() const {
  if (clusters < 2) throw ContractError("synthetic: at least two clusters are required");
  if (pairs_per_cluster == 0) throw ContractError("synthetic: pairs per cluster must be positive");
  if (image_dim == 0 || text_dim == 0) throw ContractError("synthetic: dimensions must be positive");
  if (!(sigma > 0) || !std::isfinite(sigma)) throw ContractError("synthetic: sigma must be positive and finite");
  if (!(misalignment >= 0 && misalignment <= 1)) throw ContractError("synthetic: misalignment must lie in [0, 1]");
  if (!(min_anchor_separation >= 0)) throw ContractError("synthetic: anchor separation must be non-negative");
}

SyntheticDataset generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  Rng rng(spec.seed);
  SyntheticDataset out;
  out.image_anchors = random_unit_rows(rng, spec.clusters, spec.image_dim, spec.min_anchor_separation);
  out.text_anchors = random_unit_rows(rng, spec.clusters, spec.text_dim, spec.min_anchor_separation);

  const std::size_t n = spec.clusters * spec.pairs_per_cluster;
  PairedDataset& d = out.dataset;
  d.images = Matrix(n, spec.image_dim);
  d.texts = Matrix(n, spec.text_dim);
  d.labels = LabelMatrix(n, spec.clusters);
  d.tags.assign(n, SplitTag::retrieval);
  out.image_cluster.resize(n);
  out.text_cluster.resize(n);

  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = i % spec.clusters;
    std::size_t text_c = c;
    if (spec.misalignment > 0 && rng.uniform() < spec.misalignment) {
      text_c = static_cast<std::size_t>(rng.index(spec.clusters - 1));
      if (text_c >= c) ++text_c;
    }
    for (std::size_t k = 0; k < spec.image_dim; ++k)
      d.images(i, k) = static_cast<float>(out.image_anchors(c, k) + spec.sigma * rng.normal());
    for (std::size_t k = 0; k < spec.text_dim; ++k)
      d.texts(i, k) = static_cast<float>(out.text_anchors(text_c, k) + spec.sigma * rng.normal());
    d.labels->set(i, c);
    out.image_cluster[i] = c;
    out.text_cluster[i] = text_c;
  }
  return out;
}

std::vector<SplitTag> split_tags(std::size_t n, std::size_t query_count, std::uint64_t seed) {
  if (query_count >= n && !(query_count == 0 && n == 0))
    throw ContractError("split: query count " + std::to_string(query_count) + " must be below the item count " +
                        std::to_string(n));
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  Rng rng(seed);
  rng.shuffle(std::span<std::size_t>(order));
  std::vector<SplitTag> tags(n, SplitTag::retrieval);
  for (std::size_t k = 0; k < query_count; ++k) tags[order[k]] = SplitTag::query;
  return tags;
}

PairedDataset split(PairedDataset dataset, std::size_t query_count, std::uint64_t seed) {
  dataset.tags = split_tags(dataset.size(), query_count, seed);
  return dataset;
}

}  // namespace uch
