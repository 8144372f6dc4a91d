#pragma once

// Paired image/text feature datasets: file formats, synthetic generation, query/retrieval splits.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <span>
#include <vector>

#include "uch/ndcore.hpp"
#include "uch/retrieval.hpp"

namespace uch {

enum class SplitTag : std::uint8_t { retrieval, query };

struct PairedDataset {
  Matrix images;  // n × d_img
  Matrix texts;   // n × d_txt
  std::optional<LabelMatrix> labels;
  std::vector<SplitTag> tags;  // all retrieval until split()

  std::size_t size() const noexcept { return images.rows(); }
  // Ascending item indices carrying `tag`.
  std::vector<std::size_t> indices(SplitTag tag) const;
  PairedDataset subset(std::span<const std::size_t> items) const;
  // Throws IngestionError / DataError on inconsistent counts, non-finite values, or empty label rows.
  void validate() const;
};

struct LoadedDataset {
  PairedDataset dataset;
  std::size_t pruned_unlabeled = 0;
  std::vector<std::size_t> source_rows;  // file row of each kept item
};

// Feature file: "UCHFEAT1", u32 n, u32 dim, n·dim f32 row-major, all little-endian.
void write_features(std::ostream& os, const Matrix& features);
Matrix read_features(std::istream& is);
void save_features(const std::filesystem::path& path, const Matrix& features);
// Binary when the file starts with the feature magic, otherwise comma-separated rows without a header.
Matrix load_features(const std::filesystem::path& path);
Matrix read_features_csv(std::istream& is);

// Label file: "UCHLAB1", u32 n, u32 L, then per item ceil(L/8) bytes; label j is bit j%8 of byte j/8.
void write_labels(std::ostream& os, const LabelMatrix& labels);
LabelMatrix read_labels(std::istream& is);
void save_labels(const std::filesystem::path& path, const LabelMatrix& labels);
LabelMatrix load_labels(const std::filesystem::path& path);

// Items without any active label are dropped when labels are given.
LoadedDataset load_dataset(const std::filesystem::path& images, const std::filesystem::path& texts,
                           const std::optional<std::filesystem::path>& labels = std::nullopt);

struct SyntheticSpec {
  std::size_t clusters = 8;
  std::size_t pairs_per_cluster = 250;
  std::size_t image_dim = 64;
  std::size_t text_dim = 32;
  double sigma = 0.1;         // per-coordinate noise standard deviation
  double misalignment = 0.0;  // fraction of pairs whose text comes from another cluster
  std::uint64_t seed = 7;
  double min_anchor_separation = 1.0;

  void validate() const;
};

struct SyntheticDataset {
  PairedDataset dataset;
  Matrix image_anchors;  // clusters × d_img, unit rows
  Matrix text_anchors;   // clusters × d_txt, unit rows
  std::vector<std::size_t> image_cluster;
  std::vector<std::size_t> text_cluster;
};

// Item i belongs to cluster i % clusters and carries that cluster as a one-hot label.
// Values are rounded to float precision so they survive the feature file format exactly.
SyntheticDataset generate_synthetic(const SyntheticSpec& spec);

// Tags `query_count` items drawn uniformly without replacement as queries, the rest as retrieval.
std::vector<SplitTag> split_tags(std::size_t n, std::size_t query_count, std::uint64_t seed);
PairedDataset split(PairedDataset dataset, std::size_t query_count, std::uint64_t seed);

}  // namespace uch
