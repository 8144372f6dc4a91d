#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>
#include <unistd.h>

#include "oracles.hpp"
#include "uch/errors.hpp"
#include "uch/data.hpp"

using namespace uch;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("uch_data_" + std::to_string(::getpid()));
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  fs::path operator/(const std::string& name) const { return path / name; }
};

std::string file_bytes(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p, std::ios::binary) << s; }

Matrix float_matrix(Rng& rng, std::size_t r, std::size_t c) {
  Matrix m = oracle::random_matrix(rng, r, c, -10.0, 10.0);
  for (double& v : m.values()) v = static_cast<float>(v);
  return m;
}

LabelMatrix random_label_matrix(Rng& rng, std::size_t n, std::size_t classes) {
  LabelMatrix m(n, classes);
  for (std::size_t i = 0; i < n; ++i) {
    m.set(i, rng.index(classes));
    for (std::size_t j = 0; j < classes; ++j)
      if (rng.uniform() < 0.2) m.set(i, j);
  }
  return m;
}

}  // namespace

TEST_CASE("feature files round-trip bit-exactly") {
  Rng rng(1);
  for (auto [r, c] : {std::pair<std::size_t, std::size_t>{0, 3}, {1, 1}, {17, 5}, {3, 64}}) {
    const Matrix m = float_matrix(rng, r, c);
    std::stringstream s1;
    write_features(s1, m);
    const std::string bytes = s1.str();
    CHECK(bytes.size() == 16 + 4 * r * c);
    CHECK(bytes.substr(0, 8) == "UCHFEAT1");
    const Matrix back = read_features(s1);
    CHECK(back == m);
    std::stringstream s2;
    write_features(s2, back);
    CHECK(s2.str() == bytes);
  }
  // Little-endian header and payload.
  std::stringstream s;
  write_features(s, Matrix::from_rows({{1.0}}));
  CHECK(s.str().substr(8) == std::string("\x01\0\0\0\x01\0\0\0\0\0\x80\x3f", 12));
}

TEST_CASE("feature file errors") {
  std::stringstream good;
  write_features(good, Matrix::from_rows({{1, 2}, {3, 4}}));
  const std::string bytes = good.str();
  auto read = [](const std::string& b) {
    std::stringstream s(b);
    return read_features(s);
  };
  CHECK_THROWS_AS(read("UCHFEAT2" + bytes.substr(8)), FormatError);
  CHECK_THROWS_AS(read(bytes.substr(0, 10)), FormatError);
  CHECK_THROWS_AS(read(bytes.substr(0, bytes.size() - 2)), FormatError);
  CHECK_THROWS_AS(read(bytes + std::string(1, '\0')), FormatError);
}

TEST_CASE("CSV import") {
  std::stringstream s("1,2.5,-3\r\n4, 5 ,6e-1\n\n");
  const Matrix m = read_features_csv(s);
  CHECK(m == Matrix::from_rows({{1, 2.5, -3}, {4, 5, 0.6}}));
  std::stringstream ragged("1,2\n3\n");
  CHECK_THROWS_AS(read_features_csv(ragged), FormatError);
  std::stringstream junk("1,abc\n");
  CHECK_THROWS_AS(read_features_csv(junk), FormatError);
  std::stringstream trailing("1,2x\n");
  CHECK_THROWS_AS(read_features_csv(trailing), FormatError);

  TempDir dir;
  write_text(dir / "f.csv", "0.5,1\n2,3\n");
  CHECK(load_features(dir / "f.csv") == Matrix::from_rows({{0.5, 1}, {2, 3}}));
}

TEST_CASE("label files round-trip bit-exactly") {
  Rng rng(2);
  for (std::size_t classes : {1, 7, 8, 9, 24, 64, 80}) {
    const LabelMatrix l = random_label_matrix(rng, 13, classes);
    std::stringstream s1;
    write_labels(s1, l);
    const std::string bytes = s1.str();
    CHECK(bytes.size() == 7 + 8 + 13 * ((classes + 7) / 8));
    const LabelMatrix back = read_labels(s1);
    CHECK(back == l);
    std::stringstream s2;
    write_labels(s2, back);
    CHECK(s2.str() == bytes);
  }
  // Label j is bit j % 8 of byte j / 8.
  LabelMatrix l(1, 10);
  l.set(0, 1);
  l.set(0, 9);
  std::stringstream s;
  write_labels(s, l);
  CHECK(s.str().substr(15) == std::string("\x02\x02", 2));

  std::stringstream padded(std::string("UCHLAB1\x01\0\0\0\x03\0\0\0\x10", 16));
  CHECK_THROWS_AS(read_labels(padded), FormatError);
  std::stringstream truncated(std::string("UCHLAB1\x02\0\0\0\x03\0\0\0\x01", 16));
  CHECK_THROWS_AS(read_labels(truncated), FormatError);
}

TEST_CASE("a hand-built 10-pair fixture loads with the expected shapes") {
  TempDir dir;
  Matrix images(10, 4), texts(10, 3);
  LabelMatrix labels(10, 3);
  for (std::size_t i = 0; i < 10; ++i) {
    for (std::size_t k = 0; k < 4; ++k) images(i, k) = static_cast<double>(i) + 0.25 * static_cast<double>(k);
    for (std::size_t k = 0; k < 3; ++k) texts(i, k) = (i + k) % 2;
    labels.set(i, i % 3);
  }
  save_features(dir / "img", images);
  save_features(dir / "txt", texts);
  save_labels(dir / "lab", labels);
  const LoadedDataset loaded = load_dataset(dir / "img", dir / "txt", dir / "lab");
  const PairedDataset& d = loaded.dataset;
  CHECK(d.size() == 10);
  CHECK(d.images.cols() == 4);
  CHECK(d.texts.cols() == 3);
  CHECK(d.labels->rows() == 10);
  CHECK(d.labels->bits() == 3);
  CHECK(d.images == images);
  CHECK(d.texts == texts);
  CHECK(*d.labels == labels);
  CHECK(loaded.pruned_unlabeled == 0);
  CHECK(d.indices(SplitTag::retrieval).size() == 10);

  const LoadedDataset unlabeled = load_dataset(dir / "img", dir / "txt");
  CHECK(!unlabeled.dataset.labels);
  CHECK(unlabeled.dataset.size() == 10);

  // Written files reproduce byte for byte.
  save_features(dir / "img2", d.images);
  save_labels(dir / "lab2", *d.labels);
  CHECK(file_bytes(dir / "img2") == file_bytes(dir / "img"));
  CHECK(file_bytes(dir / "lab2") == file_bytes(dir / "lab"));
}

TEST_CASE("ingestion errors") {
  TempDir dir;
  save_features(dir / "img", Matrix(5, 2));
  save_features(dir / "txt4", Matrix(4, 2));
  save_features(dir / "txt", Matrix(5, 2));
  LabelMatrix labels(6, 2);
  for (std::size_t i = 0; i < 6; ++i) labels.set(i, 0);
  save_labels(dir / "lab6", labels);

  try {
    load_dataset(dir / "img", dir / "txt4");
    FAIL("expected ingestion error");
  } catch (const IngestionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("img") != std::string::npos);
    CHECK(msg.find("txt4") != std::string::npos);
    CHECK(msg.find('5') != std::string::npos);
    CHECK(msg.find('4') != std::string::npos);
  }
  CHECK_THROWS_AS(load_dataset(dir / "img", dir / "txt", dir / "lab6"), IngestionError);
  CHECK_THROWS_AS(load_dataset(dir / "missing", dir / "txt"), IngestionError);

  Matrix bad(5, 2);
  bad(3, 1) = std::numeric_limits<double>::infinity();
  save_features(dir / "bad", bad);
  try {
    load_dataset(dir / "bad", dir / "txt");
    FAIL("expected data error");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("row 3") != std::string::npos);
  }
  write_text(dir / "nan.csv", "1,2\nnan,3\n");
  save_features(dir / "txt2", Matrix(2, 1));
  CHECK_THROWS_AS(load_dataset(dir / "nan.csv", dir / "txt2"), DataError);
}

TEST_CASE("unlabeled items are pruned") {
  TempDir dir;
  Matrix images(6, 2);
  for (std::size_t i = 0; i < 6; ++i) images(i, 0) = static_cast<double>(i);
  LabelMatrix labels(6, 2);
  for (std::size_t i : {0, 2, 3, 5}) labels.set(i, i % 2);
  save_features(dir / "img", images);
  save_features(dir / "txt", images);
  save_labels(dir / "lab", labels);
  const LoadedDataset loaded = load_dataset(dir / "img", dir / "txt", dir / "lab");
  CHECK(loaded.pruned_unlabeled == 2);
  CHECK(loaded.source_rows == std::vector<std::size_t>{0, 2, 3, 5});
  CHECK(loaded.dataset.size() == 4);
  CHECK(loaded.dataset.images(2, 0) == 3.0);
  for (std::size_t i = 0; i < 4; ++i) CHECK(loaded.dataset.labels->count(i) > 0);
}

TEST_CASE("dataset validation") {
  PairedDataset d;
  d.images = Matrix(3, 2);
  d.texts = Matrix(3, 2);
  d.tags.assign(3, SplitTag::retrieval);
  CHECK_NOTHROW(d.validate());
  d.labels = LabelMatrix(3, 2);
  CHECK_THROWS_AS(d.validate(), DataError);
  d.labels = LabelMatrix(2, 2);
  CHECK_THROWS_AS(d.validate(), IngestionError);
  d.labels.reset();
  d.texts = Matrix(2, 2);
  CHECK_THROWS_AS(d.validate(), IngestionError);
}

TEST_CASE("synthetic generator contracts") {
  SyntheticSpec spec;
  CHECK_NOTHROW(spec.validate());
  for (auto mutate : std::vector<std::function<void(SyntheticSpec&)>>{
           [](SyntheticSpec& s) { s.clusters = 1; }, [](SyntheticSpec& s) { s.sigma = 0; },
           [](SyntheticSpec& s) { s.sigma = -1; }, [](SyntheticSpec& s) { s.misalignment = 1.5; },
           [](SyntheticSpec& s) { s.pairs_per_cluster = 0; }, [](SyntheticSpec& s) { s.image_dim = 0; }}) {
    SyntheticSpec bad;
    mutate(bad);
    CHECK_THROWS_AS(generate_synthetic(bad), ContractError);
  }

  const SyntheticDataset a = generate_synthetic(spec);
  const SyntheticDataset b = generate_synthetic(spec);
  CHECK(a.dataset.images == b.dataset.images);
  CHECK(a.dataset.texts == b.dataset.texts);
  CHECK(*a.dataset.labels == *b.dataset.labels);
  CHECK(a.dataset.size() == 2000);
  CHECK(a.dataset.images.cols() == 64);
  CHECK(a.dataset.texts.cols() == 32);
  CHECK_NOTHROW(a.dataset.validate());
  for (double v : a.dataset.images.values()) CHECK(v == static_cast<double>(static_cast<float>(v)));

  spec.seed = 8;
  CHECK(!(generate_synthetic(spec).dataset.images == a.dataset.images));
}

TEST_CASE("synthetic clusters, labels and anchors") {
  SyntheticSpec spec;
  spec.pairs_per_cluster = 40;
  const SyntheticDataset s = generate_synthetic(spec);
  for (std::size_t c = 0; c < spec.clusters; ++c) {
    double norm = 0;
    for (double v : s.image_anchors.row(c)) norm += v * v;
    CHECK(std::sqrt(norm) == doctest::Approx(1.0));
    for (std::size_t o = 0; o < c; ++o) {
      double d2 = 0;
      for (std::size_t k = 0; k < spec.image_dim; ++k) d2 += std::pow(s.image_anchors(c, k) - s.image_anchors(o, k), 2);
      CHECK(std::sqrt(d2) >= 1.0);
    }
  }
  for (std::size_t i = 0; i < s.dataset.size(); ++i) {
    CHECK(s.image_cluster[i] == i % spec.clusters);
    CHECK(s.text_cluster[i] == s.image_cluster[i]);
    CHECK(s.dataset.labels->count(i) == 1);
    CHECK(s.dataset.labels->test(i, i % spec.clusters));
  }
}

TEST_CASE("vanishing noise collapses each cluster onto its anchor") {
  SyntheticSpec spec;
  spec.sigma = 1e-300;
  spec.pairs_per_cluster = 5;
  const SyntheticDataset s = generate_synthetic(spec);
  for (std::size_t i = spec.clusters; i < s.dataset.size(); ++i) {
    const auto a = s.dataset.images.row(i);
    const auto b = s.dataset.images.row(i % spec.clusters);
    CHECK(std::equal(a.begin(), a.end(), b.begin()));
  }
}

TEST_CASE("misalignment moves the text of a fraction of pairs to other clusters") {
  SyntheticSpec spec;
  spec.misalignment = 0.3;
  const SyntheticDataset s = generate_synthetic(spec);
  std::size_t moved = 0;
  for (std::size_t i = 0; i < s.dataset.size(); ++i)
    if (s.text_cluster[i] != s.image_cluster[i]) ++moved;
  CHECK(std::abs(static_cast<double>(moved) / 2000.0 - 0.3) < 0.05);

  spec.misalignment = 1.0;
  const SyntheticDataset all = generate_synthetic(spec);
  for (std::size_t i = 0; i < all.dataset.size(); ++i) CHECK(all.text_cluster[i] != all.image_cluster[i]);
}

TEST_CASE("nearest-anchor classification separates the clusters") {
  const SyntheticDataset s = generate_synthetic(SyntheticSpec{});
  auto nearest = [](const Matrix& anchors, std::span<const double> x) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < anchors.rows(); ++c) {
      double d = 0;
      for (std::size_t k = 0; k < x.size(); ++k) d += (x[k] - anchors(c, k)) * (x[k] - anchors(c, k));
      if (d < best_d) best_d = d, best = c;
    }
    return best;
  };
  std::size_t image_hits = 0, text_hits = 0;
  for (std::size_t i = 0; i < s.dataset.size(); ++i) {
    image_hits += nearest(s.image_anchors, s.dataset.images.row(i)) == s.image_cluster[i];
    text_hits += nearest(s.text_anchors, s.dataset.texts.row(i)) == s.text_cluster[i];
  }
  CHECK(static_cast<double>(image_hits) / 2000.0 >= 0.99);
  CHECK(static_cast<double>(text_hits) / 2000.0 >= 0.99);
}

TEST_CASE("split") {
  const auto tags0 = split_tags(10, 0, 3);
  CHECK(std::count(tags0.begin(), tags0.end(), SplitTag::retrieval) == 10);
  CHECK_THROWS_AS(split_tags(10, 10, 3), ContractError);
  CHECK_THROWS_AS(split_tags(10, 11, 3), ContractError);

  Rng rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 1 + rng.index(300), q = rng.index(n);
    const std::uint64_t seed = rng.index(1000);
    const auto tags = split_tags(n, q, seed);
    CHECK(tags.size() == n);
    CHECK(static_cast<std::size_t>(std::count(tags.begin(), tags.end(), SplitTag::query)) == q);
    CHECK(split_tags(n, q, seed) == tags);
  }

  PairedDataset d = generate_synthetic(SyntheticSpec{}).dataset;
  d = split(std::move(d), 200, 1);
  const auto query = d.indices(SplitTag::query), retrieval = d.indices(SplitTag::retrieval);
  CHECK(query.size() == 200);
  CHECK(query.size() + retrieval.size() == 2000);
  CHECK(std::is_sorted(query.begin(), query.end()));
  const PairedDataset sub = d.subset(query);
  CHECK(sub.size() == 200);
  CHECK(sub.labels->rows() == 200);
  for (SplitTag t : sub.tags) CHECK(t == SplitTag::query);
  CHECK(!(split_tags(2000, 200, 1) == split_tags(2000, 200, 2)));
}
