#pragma once

// Bit-packed binary codes, Hamming ranking, and retrieval metrics (MAP, PR over Hamming radius, P@N).

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <vector>

#include "uch/ndcore.hpp"

namespace uch {

// Rows of `bits` bits packed into little-endian 64-bit words, ceil(bits/64) words per row.
// Bits past `bits` in the last word are always zero.
class BitMatrix {
 public:
  BitMatrix() = default;
  BitMatrix(std::size_t rows, std::size_t bits);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t bits() const noexcept { return bits_; }
  std::size_t words_per_row() const noexcept { return words_per_row_; }

  bool test(std::size_t row, std::size_t bit) const;
  void set(std::size_t row, std::size_t bit, bool value = true);
  std::size_t count(std::size_t row) const;

  std::span<const std::uint64_t> row_words(std::size_t row) const;
  std::span<const std::uint64_t> words() const noexcept { return words_; }
  // Replaces the packed payload; throws FormatError if padding bits are set.
  void assign_words(std::vector<std::uint64_t> words);

  bool operator==(const BitMatrix&) const = default;

 protected:
  std::size_t rows_ = 0;
  std::size_t bits_ = 0;
  std::size_t words_per_row_ = 0;
  std::vector<std::uint64_t> words_;
};

struct CodeView {
  std::span<const std::uint64_t> words;
  std::size_t bits = 0;
};

// Hash codes: bit j of item i is set iff code value j is +1.
class CodeMatrix : public BitMatrix {
 public:
  using BitMatrix::BitMatrix;

  // sign() per entry, with sign(0) = +1.
  static CodeMatrix from_signs(const Matrix& h);
  // ±1 matrix.
  Matrix unpack() const;
  CodeView code(std::size_t item) const { return {row_words(item), bits_}; }
  CodeMatrix subset(std::span<const std::size_t> items) const;
};

// Multi-hot labels; two items are relevant to each other iff they share an active label.
class LabelMatrix : public BitMatrix {
 public:
  using BitMatrix::BitMatrix;

  bool shares_label(std::size_t row, const LabelMatrix& other, std::size_t other_row) const;
  LabelMatrix subset(std::span<const std::size_t> items) const;
};

std::size_t hamming_distance(CodeView a, CodeView b);

// Database indices by ascending distance, ties by ascending index.
std::vector<std::size_t> rank_by_hamming(CodeView query, const CodeMatrix& database);

enum class RetrievalDirection { image_to_text, text_to_image };
const char* direction_name(RetrievalDirection d);

struct PrPoint {
  std::size_t radius = 0;
  double precision = 0;
  double recall = 0;
};

struct PrecisionAtN {
  std::size_t n = 0;
  double precision = 0;
};

struct RetrievalReport {
  RetrievalDirection direction = RetrievalDirection::image_to_text;
  std::size_t bits = 0;
  std::size_t queries = 0;
  std::size_t skipped_queries = 0;  // queries with no relevant database item
  std::size_t database_size = 0;
  // (query, radius) pairs that retrieved nothing; scored precision 1, recall 0.
  std::size_t empty_retrievals = 0;
  double map = 0;
  std::vector<PrPoint> pr_curve;
  std::vector<PrecisionAtN> precision_at;
};

struct EvalOptions {
  std::vector<std::size_t> precision_at;
  unsigned threads = 1;  // 0 = hardware concurrency
};

// All metrics average over the queries that have at least one relevant database item.
RetrievalReport evaluate(const CodeMatrix& queries, const CodeMatrix& database, const LabelMatrix& query_labels,
                         const LabelMatrix& database_labels, RetrievalDirection direction, const EvalOptions& options);

double mean_average_precision(const CodeMatrix& queries, const CodeMatrix& database, const LabelMatrix& query_labels,
                              const LabelMatrix& database_labels);
std::vector<PrPoint> pr_curve(const CodeMatrix& queries, const CodeMatrix& database, const LabelMatrix& query_labels,
                              const LabelMatrix& database_labels);
std::vector<PrecisionAtN> precision_at(const CodeMatrix& queries, const CodeMatrix& database,
                                       const LabelMatrix& query_labels, const LabelMatrix& database_labels,
                                       std::span<const std::size_t> ns);

// Parallelism cap from UCH_THREADS (unset or 0 = hardware concurrency).
unsigned evaluation_threads_from_env();

void write_report_csv(std::ostream& os, const RetrievalReport& report);

// Code file: "UCHCODE1", u32 n, u32 K, then n·ceil(K/64) u64 words, all little-endian.
void write_codes(std::ostream& os, const CodeMatrix& codes);
CodeMatrix read_codes(std::istream& is);
void save_codes(const std::filesystem::path& path, const CodeMatrix& codes);
CodeMatrix load_codes(const std::filesystem::path& path);

}  // namespace uch
