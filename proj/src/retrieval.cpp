#include "uch/retrieval.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <thread>

#include "uch/binary_io.hpp"
#include "uch/errors.hpp"

namespace uch {

namespace {

constexpr std::string_view kCodeMagic = "UCHCODE1";

std::uint64_t padding_mask(std::size_t bits) {
  const std::size_t used = bits % 64;
  return used == 0 ? 0 : ~((std::uint64_t{1} << used) - 1);
}

// Per-query results, merged in query order so the totals do not depend on the thread count.
struct QueryScores {
  bool valid = false;
  double average_precision = 0;
  std::vector<double> precision;  // per radius
  std::vector<double> recall;
  std::vector<double> precision_at;
  std::size_t empty_retrievals = 0;
};

QueryScores score_query(CodeView query, const CodeMatrix& database, const LabelMatrix& query_labels, std::size_t q,
                        const LabelMatrix& database_labels, std::span<const std::size_t> ns) {
  const std::size_t bits = database.bits();
  const std::size_t n = database.rows();
  std::vector<std::size_t> distance(n);
  std::vector<char> relevant(n);
  std::size_t total_relevant = 0;
  for (std::size_t j = 0; j < n; ++j) {
    distance[j] = hamming_distance(query, database.code(j));
    relevant[j] = query_labels.shares_label(q, database_labels, j) ? 1 : 0;
    total_relevant += relevant[j];
  }
  QueryScores s;
  if (total_relevant == 0) return s;
  s.valid = true;

  // Counting sort by distance; within a bucket indices stay ascending.
  std::vector<std::size_t> bucket_count(bits + 1, 0), bucket_relevant(bits + 1, 0);
  for (std::size_t j = 0; j < n; ++j) {
    ++bucket_count[distance[j]];
    bucket_relevant[distance[j]] += relevant[j];
  }
  std::vector<std::size_t> offset(bits + 2, 0);
  for (std::size_t d = 0; d <= bits; ++d) offset[d + 1] = offset[d] + bucket_count[d];
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < n; ++j) order[offset[distance[j]]++] = j;

  std::size_t hits = 0;
  double ap_sum = 0;
  std::vector<std::size_t> hits_at(ns.size(), 0);
  for (std::size_t rank = 0; rank < n; ++rank) {
    if (relevant[order[rank]]) {
      ++hits;
      ap_sum += static_cast<double>(hits) / static_cast<double>(rank + 1);
    }
    for (std::size_t k = 0; k < ns.size(); ++k)
      if (ns[k] == rank + 1) hits_at[k] = hits;
  }
  s.average_precision = ap_sum / static_cast<double>(total_relevant);

  s.precision.resize(bits + 1);
  s.recall.resize(bits + 1);
  std::size_t retrieved = 0, retrieved_relevant = 0;
  for (std::size_t r = 0; r <= bits; ++r) {
    retrieved += bucket_count[r];
    retrieved_relevant += bucket_relevant[r];
    if (retrieved == 0) {
      s.precision[r] = 1.0;
      s.recall[r] = 0.0;
      ++s.empty_retrievals;
    } else {
      s.precision[r] = static_cast<double>(retrieved_relevant) / static_cast<double>(retrieved);
      s.recall[r] = static_cast<double>(retrieved_relevant) / static_cast<double>(total_relevant);
    }
  }
  s.precision_at.resize(ns.size());
  for (std::size_t k = 0; k < ns.size(); ++k) s.precision_at[k] = static_cast<double>(hits_at[k]) / static_cast<double>(ns[k]);
  return s;
}

void validate_inputs(const CodeMatrix& queries, const CodeMatrix& database, const LabelMatrix& query_labels,
                     const LabelMatrix& database_labels) {
  if (queries.bits() != database.bits())
    throw ContractError("code length mismatch: queries K=" + std::to_string(queries.bits()) +
                        ", database K=" + std::to_string(database.bits()));
  if (query_labels.rows() != queries.rows())
    throw ContractError("query labels cover " + std::to_string(query_labels.rows()) + " items, codes " +
                        std::to_string(queries.rows()));
  if (database_labels.rows() != database.rows())
    throw ContractError("database labels cover " + std::to_string(database_labels.rows()) + " items, codes " +
                        std::to_string(database.rows()));
  if (query_labels.bits() != database_labels.bits()) throw ContractError("query and database label vocabularies differ");
}

}  // namespace

// ---------------------------------------------------------------------------
// BitMatrix

BitMatrix::BitMatrix(std::size_t rows, std::size_t bits)
    : rows_(rows), bits_(bits), words_per_row_((bits + 63) / 64), words_(rows * words_per_row_, 0) {}

bool BitMatrix::test(std::size_t row, std::size_t bit) const {
  return (words_[row * words_per_row_ + bit / 64] >> (bit % 64)) & 1u;
}

void BitMatrix::set(std::size_t row, std::size_t bit, bool value) {
  if (row >= rows_ || bit >= bits_) throw ContractError("bit index out of range");
  std::uint64_t& w = words_[row * words_per_row_ + bit / 64];
  const std::uint64_t mask = std::uint64_t{1} << (bit % 64);
  w = value ? (w | mask) : (w & ~mask);
}

std::size_t BitMatrix::count(std::size_t row) const {
  std::size_t total = 0;
  for (std::uint64_t w : row_words(row)) total += static_cast<std::size_t>(std::popcount(w));
  return total;
}

std::span<const std::uint64_t> BitMatrix::row_words(std::size_t row) const {
  return {words_.data() + row * words_per_row_, words_per_row_};
}

void BitMatrix::assign_words(std::vector<std::uint64_t> words) {
  if (words.size() != words_.size()) throw FormatError("packed payload has the wrong number of words");
  const std::uint64_t mask = padding_mask(bits_);
  if (mask != 0)
    for (std::size_t r = 0; r < rows_; ++r)
      if (words[r * words_per_row_ + words_per_row_ - 1] & mask)
        throw FormatError("padding bits set in row " + std::to_string(r));
  words_ = std::move(words);
}

// ---------------------------------------------------------------------------
// CodeMatrix / LabelMatrix

CodeMatrix CodeMatrix::from_signs(const Matrix& h) {
  CodeMatrix codes(h.rows(), h.cols());
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t j = 0; j < h.cols(); ++j)
      if (h(i, j) >= 0.0) codes.set(i, j);
  return codes;
}

Matrix CodeMatrix::unpack() const {
  Matrix m(rows_, bits_);
  for (std::size_t i = 0; i < rows_; ++i)
    for (std::size_t j = 0; j < bits_; ++j) m(i, j) = test(i, j) ? 1.0 : -1.0;
  return m;
}

namespace {
template <typename T>
T subset_rows(const T& src, std::span<const std::size_t> items) {
  T out(items.size(), src.bits());
  std::vector<std::uint64_t> words;
  words.reserve(items.size() * src.words_per_row());
  for (std::size_t i : items) {
    if (i >= src.rows()) throw ContractError("subset: row index out of range");
    auto row = src.row_words(i);
    words.insert(words.end(), row.begin(), row.end());
  }
  out.assign_words(std::move(words));
  return out;
}
}  // namespace

CodeMatrix CodeMatrix::subset(std::span<const std::size_t> items) const { return subset_rows(*this, items); }

LabelMatrix LabelMatrix::subset(std::span<const std::size_t> items) const { return subset_rows(*this, items); }

bool LabelMatrix::shares_label(std::size_t row, const LabelMatrix& other, std::size_t other_row) const {
  auto a = row_words(row);
  auto b = other.row_words(other_row);
  for (std::size_t w = 0; w < a.size(); ++w)
    if (a[w] & b[w]) return true;
  return false;
}

// ---------------------------------------------------------------------------
// Distances and ranking

std::size_t hamming_distance(CodeView a, CodeView b) {
  if (a.bits != b.bits || a.words.size() != b.words.size())
    throw ContractError("hamming_distance: code lengths differ (" + std::to_string(a.bits) + " vs " + std::to_string(b.bits) + ")");
  std::size_t d = 0;
  for (std::size_t w = 0; w < a.words.size(); ++w) d += static_cast<std::size_t>(std::popcount(a.words[w] ^ b.words[w]));
  return d;
}

std::vector<std::size_t> rank_by_hamming(CodeView query, const CodeMatrix& database) {
  if (database.rows() == 0) return {};
  if (query.bits != database.bits()) throw ContractError("rank_by_hamming: code lengths differ");
  std::vector<std::size_t> distance(database.rows());
  std::vector<std::size_t> offset(query.bits + 2, 0);
  for (std::size_t j = 0; j < database.rows(); ++j) {
    distance[j] = hamming_distance(query, database.code(j));
    ++offset[distance[j] + 1];
  }
  for (std::size_t d = 1; d < offset.size(); ++d) offset[d] += offset[d - 1];
  std::vector<std::size_t> order(database.rows());
  for (std::size_t j = 0; j < database.rows(); ++j) order[offset[distance[j]]++] = j;
  return order;
}

// ---------------------------------------------------------------------------
// Metrics

const char* direction_name(RetrievalDirection d) {
  return d == RetrievalDirection::image_to_text ? "image_to_text" : "text_to_image";
}

unsigned evaluation_threads_from_env() {
  const char* env = std::getenv("UCH_THREADS");
  unsigned requested = 0;
  if (env != nullptr) requested = static_cast<unsigned>(std::strtoul(env, nullptr, 10));
  if (requested == 0) requested = std::max(1u, std::thread::hardware_concurrency());
  return requested;
}

RetrievalReport evaluate(const CodeMatrix& queries, const CodeMatrix& database, const LabelMatrix& query_labels,
                         const LabelMatrix& database_labels, RetrievalDirection direction, const EvalOptions& options) {
  validate_inputs(queries, database, query_labels, database_labels);
  for (std::size_t n : options.precision_at)
    if (n == 0 || n > database.rows())
      throw ContractError("precision@N: N=" + std::to_string(n) + " outside [1, " + std::to_string(database.rows()) + "]");

  const std::size_t q_count = queries.rows();
  std::vector<QueryScores> scores(q_count);
  unsigned threads = options.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : options.threads;
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(q_count, 1)));
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t q = begin; q < end; ++q)
      scores[q] = score_query(queries.code(q), database, query_labels, q, database_labels, options.precision_at);
  };
  if (threads <= 1) {
    work(0, q_count);
  } else {
    std::vector<std::jthread> pool;
    const std::size_t chunk = (q_count + threads - 1) / threads;
    for (std::size_t begin = 0; begin < q_count; begin += chunk) pool.emplace_back(work, begin, std::min(q_count, begin + chunk));
  }

  RetrievalReport report;
  report.direction = direction;
  report.bits = database.bits();
  report.queries = q_count;
  report.database_size = database.rows();
  std::vector<double> prec(report.bits + 1, 0.0), rec(report.bits + 1, 0.0), p_at(options.precision_at.size(), 0.0);
  double ap_total = 0;
  std::size_t valid = 0;
  for (const auto& s : scores) {
    if (!s.valid) {
      ++report.skipped_queries;
      continue;
    }
    ++valid;
    ap_total += s.average_precision;
    report.empty_retrievals += s.empty_retrievals;
    for (std::size_t r = 0; r <= report.bits; ++r) {
      prec[r] += s.precision[r];
      rec[r] += s.recall[r];
    }
    for (std::size_t k = 0; k < p_at.size(); ++k) p_at[k] += s.precision_at[k];
  }
  if (valid == 0) throw ContractError("no query has a relevant database item");
  const double inv = 1.0 / static_cast<double>(valid);
  report.map = ap_total * inv;
  for (std::size_t r = 0; r <= report.bits; ++r) report.pr_curve.push_back({r, prec[r] * inv, rec[r] * inv});
  for (std::size_t k = 0; k < p_at.size(); ++k) report.precision_at.push_back({options.precision_at[k], p_at[k] * inv});
  return report;
}

double mean_average_precision(const CodeMatrix& queries, const CodeMatrix& database, const LabelMatrix& query_labels,
                              const LabelMatrix& database_labels) {
  return evaluate(queries, database, query_labels, database_labels, RetrievalDirection::image_to_text, {}).map;
}

std::vector<PrPoint> pr_curve(const CodeMatrix& queries, const CodeMatrix& database, const LabelMatrix& query_labels,
                              const LabelMatrix& database_labels) {
  return evaluate(queries, database, query_labels, database_labels, RetrievalDirection::image_to_text, {}).pr_curve;
}

std::vector<PrecisionAtN> precision_at(const CodeMatrix& queries, const CodeMatrix& database,
                                       const LabelMatrix& query_labels, const LabelMatrix& database_labels,
                                       std::span<const std::size_t> ns) {
  EvalOptions options;
  options.precision_at.assign(ns.begin(), ns.end());
  return evaluate(queries, database, query_labels, database_labels, RetrievalDirection::image_to_text, options).precision_at;
}

void write_report_csv(std::ostream& os, const RetrievalReport& r) {
  char buf[128];
  auto num = [&buf](double v) {
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return std::string(buf);
  };
  os << "# uch retrieval report\n";
  os << "# direction=" << direction_name(r.direction) << '\n';
  os << "# bits=" << r.bits << '\n';
  os << "# queries=" << r.queries << '\n';
  os << "# skipped_queries=" << r.skipped_queries << '\n';
  os << "# database=" << r.database_size << '\n';
  os << "# empty_retrievals=" << r.empty_retrievals << " (query/radius pairs retrieving nothing; precision 1, recall 0)\n";
  os << "# block=map\n";
  os << "map\n" << num(r.map) << '\n';
  os << "# block=pr_curve (hamming radius 0..bits)\n";
  os << "radius,precision,recall\n";
  for (const auto& p : r.pr_curve) os << p.radius << ',' << num(p.precision) << ',' << num(p.recall) << '\n';
  os << "# block=precision_at\n";
  os << "n,precision\n";
  for (const auto& p : r.precision_at) os << p.n << ',' << num(p.precision) << '\n';
}

// ---------------------------------------------------------------------------
// Code files

void write_codes(std::ostream& os, const CodeMatrix& codes) {
  io::write_magic(os, kCodeMagic);
  io::write_u32_checked(os, codes.rows(), "code count");
  io::write_u32_checked(os, codes.bits(), "code length");
  for (std::uint64_t w : codes.words()) io::write_le(os, w);
  if (!os) throw FormatError("code file write failed");
}

CodeMatrix read_codes(std::istream& is) {
  io::expect_magic(is, kCodeMagic, "code");
  const auto n = io::read_le<std::uint32_t>(is, "code count");
  const auto bits = io::read_le<std::uint32_t>(is, "code length");
  if (bits == 0) throw FormatError("code file: zero code length");
  CodeMatrix codes(n, bits);
  std::vector<std::uint64_t> words(std::size_t(n) * codes.words_per_row());
  for (auto& w : words) w = io::read_le<std::uint64_t>(is, "code words");
  codes.assign_words(std::move(words));
  if (is.peek() != std::char_traits<char>::eof()) throw FormatError("code file: trailing bytes");
  return codes;
}

void save_codes(const std::filesystem::path& path, const CodeMatrix& codes) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw FormatError("cannot open " + path.string() + " for writing");
  write_codes(os, codes);
}

CodeMatrix load_codes(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open code file " + path.string());
  return read_codes(is);
}

}  // namespace uch
