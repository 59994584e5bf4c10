#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "comet/data.hpp"

using namespace comet;
using namespace comet::data;

namespace {

std::string temp_file(const std::string& name, const std::string& text) {
  const auto path = std::filesystem::temp_directory_path() / name;
  std::ofstream(path, std::ios::binary) << text;
  return path.string();
}

bool same(const Dataset& a, const Dataset& b) {
  return a.features == b.features && a.targets == b.targets && a.task_kinds == b.task_kinds &&
         a.hash_keys == b.hash_keys && a.feature_names == b.feature_names && a.task_names == b.task_names;
}

}  // namespace

TEST_SUITE("data") {
  TEST_CASE("cluster generator is deterministic") {
    CHECK(same(synth_cluster_moe(5, 4, 3, 300, 0.1), synth_cluster_moe(5, 4, 3, 300, 0.1)));
    CHECK_FALSE(same(synth_cluster_moe(5, 4, 3, 300, 0.1), synth_cluster_moe(6, 4, 3, 300, 0.1)));
  }

  TEST_CASE("noiseless cluster data is fit exactly by the oracle router") {
    const auto ds = synth_cluster_moe(1, 4, 5, 500, 0.0);
    const auto& oracle = *ds.provenance.oracle;
    for (std::size_t r = 0; r < ds.size(); ++r) {
      CHECK(ds.targets[0][r] == oracle.predict(ds.features.row(r), oracle.cluster[r]));
      CHECK(ds.hash_keys[r] == static_cast<std::int64_t>(oracle.cluster[r]));
    }
  }

  TEST_CASE("clusters are drawn uniformly") {
    const auto ds = synth_cluster_moe(2, 4, 3, 4000, 0.1);
    std::vector<std::size_t> counts(4, 0);
    for (auto c : ds.provenance.oracle->cluster) ++counts[c];
    // Four binomial standard deviations around 1000.
    for (auto c : counts) CHECK(std::abs(static_cast<double>(c) - 1000.0) < 4.0 * std::sqrt(4000 * 0.25 * 0.75));
  }

  TEST_CASE("features are standardized") {
    const auto ds = synth_cluster_moe(3, 4, 3, 1000, 0.1);
    for (std::size_t f = 0; f < 3; ++f) {
      double m = 0.0, ss = 0.0;
      for (std::size_t r = 0; r < ds.size(); ++r) m += ds.features(r, f);
      m /= ds.size();
      for (std::size_t r = 0; r < ds.size(); ++r) ss += (ds.features(r, f) - m) * (ds.features(r, f) - m);
      CHECK(std::abs(m) < 1e-12);
      CHECK(ss / ds.size() == doctest::Approx(1.0).epsilon(1e-9));
    }
  }

  TEST_CASE("generator argument checks") {
    CHECK_THROWS_AS(synth_cluster_moe(0, 1, 3, 10, 0.1), UsageError);
    CHECK_THROWS_AS(synth_cluster_moe(0, 4, 3, 2, 0.1), UsageError);
    CHECK_THROWS_AS(synth_cluster_moe(0, 4, 3, 10, -1.0), UsageError);
    CHECK_THROWS_AS(synth_multitask(0, 0, 10), UsageError);
  }

  TEST_CASE("multitask generator") {
    const auto ds = synth_multitask(4, 6, 2000);
    REQUIRE(ds.n_tasks() == 2);
    CHECK(ds.task_kinds[1] == TaskKind::kBinary);
    double positive = 0.0;
    for (double y : ds.targets[1]) {
      CHECK((y == 0.0 || y == 1.0));
      positive += y;
    }
    positive /= ds.size();
    CHECK(positive >= 0.3);
    CHECK(positive <= 0.7);
    CHECK(same(ds, synth_multitask(4, 6, 2000)));
    CHECK_NOTHROW(synth_multitask(1, 1, 50).validate());
  }

  TEST_CASE("csv reads a hand-written file") {
    const auto path = temp_file("comet_small.csv", "a,b,y,label,k\n1,2,0.5,1,7\n3,4,-1.5,0,8\n5.5,6e1,2,1,7\n");
    CsvSchema s;
    s.targets = {{"y", TaskKind::kRegression}, {"label", TaskKind::kBinary}};
    s.key_column = "k";
    const auto ds = load_csv(path, s);
    CHECK(ds.features == Tensor(3, 2, {1, 2, 3, 4, 5.5, 60}));
    CHECK(ds.targets[0] == std::vector<double>{0.5, -1.5, 2});
    CHECK(ds.targets[1] == std::vector<double>{1, 0, 1});
    CHECK(ds.hash_keys == std::vector<std::int64_t>{7, 8, 7});
    CHECK(ds.feature_names == std::vector<std::string>{"a", "b"});
  }

  TEST_CASE("csv quotes, byte-order mark and delimiters") {
    const auto path = temp_file("comet_quoted.csv", "\xEF\xBB\xBF\"x 1\";\"y\"\n\"1.5\";2\n");
    CsvSchema s;
    s.targets = {{"y"}};
    s.delimiter = ';';
    const auto ds = load_csv(path, s);
    CHECK(ds.feature_names == std::vector<std::string>{"x 1"});
    CHECK(ds.features(0, 0) == 1.5);
  }

  TEST_CASE("csv errors name the line") {
    CsvSchema s;
    s.targets = {{"y"}};
    auto expect = [&](const std::string& text, CsvError::Kind kind, std::size_t line) {
      try {
        load_csv(temp_file("comet_bad.csv", text), s);
        FAIL("expected CsvError");
      } catch (const CsvError& e) {
        CHECK(e.kind() == kind);
        CHECK(e.line() == line);
      }
    };
    expect("a,y\nfoo,1\n", CsvError::Kind::kNonNumeric, 2);
    expect("a,y\n1,2\n3\n", CsvError::Kind::kMalformedRow, 3);
    expect("a,z\n1,2\n", CsvError::Kind::kMissingColumn, 1);
    expect("", CsvError::Kind::kEmptyFile, 0);
    expect("a,y\n1,inf\n", CsvError::Kind::kInvalidValue, 2);
    s.targets = {{"y", TaskKind::kBinary}};
    expect("a,y\n1,0.5\n", CsvError::Kind::kInvalidValue, 2);
    CHECK_THROWS_AS(load_csv("/nonexistent/file.csv", s), CsvError);
  }

  TEST_CASE("csv round-trips a large generated dataset") {
    const auto ds = synth_multitask(11, 5, 10000);
    const auto path = (std::filesystem::temp_directory_path() / "comet_roundtrip.csv").string();
    write_csv(ds, path);
    CsvSchema s;
    s.targets = {{ds.task_names[0], TaskKind::kRegression}, {ds.task_names[1], TaskKind::kBinary}};
    s.key_column = "key";
    CHECK(same(load_csv(path, s), ds));
  }

  TEST_CASE("hash buckets stand in for a key column") {
    const auto path = temp_file("comet_buckets.csv", "a,y\n1,1\n2,2\n3,3\n4,4\n5,5\n");
    CsvSchema s;
    s.targets = {{"y"}};
    s.hash_buckets = 2;
    CHECK(load_csv(path, s).hash_keys == std::vector<std::int64_t>{0, 1, 0, 1, 0});
  }

  TEST_CASE("split sizes") {
    const auto parts = split_indices(100, {0.8, 0.1, 0.1, 3});
    CHECK(parts[0].size() == 80);
    CHECK(parts[1].size() == 10);
    CHECK(parts[2].size() == 10);
    CHECK(parts == split_indices(100, {0.8, 0.1, 0.1, 3}));
    CHECK(split_indices(3, {}).at(1).size() == 1);
    CHECK_THROWS_AS(split_indices(2, {}), UsageError);
    CHECK_THROWS_AS(split_indices(100, {0.5, 0.1, 0.1, 0}), UsageError);
    CHECK_THROWS_AS(split_indices(100, {1.0, 0.0, 0.0, 0}), UsageError);
  }

  TEST_CASE("splits partition the rows for any seed") {
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
      const auto parts = split_indices(97, {0.7, 0.2, 0.1, seed});
      std::set<std::size_t> all;
      std::size_t total = 0;
      for (const auto& p : parts) {
        all.insert(p.begin(), p.end());
        total += p.size();
      }
      CHECK(total == 97);
      CHECK(all.size() == 97);
      CHECK(*all.rbegin() == 96);
    }
  }

  TEST_CASE("split datasets carry the rows they name") {
    const auto ds = synth_cluster_moe(4, 3, 2, 50, 0.1);
    const auto s = split(ds, {0.6, 0.2, 0.2, 1});
    const auto idx = split_indices(50, {0.6, 0.2, 0.2, 1});
    for (std::size_t i = 0; i < idx[1].size(); ++i) {
      CHECK(s.validation.targets[0][i] == ds.targets[0][idx[1][i]]);
      CHECK(s.validation.hash_keys[i] == ds.hash_keys[idx[1][i]]);
      CHECK(s.validation.provenance.oracle->cluster[i] == ds.provenance.oracle->cluster[idx[1][i]]);
    }
  }

  TEST_CASE("validate catches inconsistent datasets") {
    auto ds = synth_cluster_moe(4, 3, 2, 20, 0.1);
    ds.targets[0].pop_back();
    CHECK_THROWS_AS(ds.validate(), UsageError);
    auto bin = synth_multitask(1, 2, 20);
    bin.targets[1][0] = 0.5;
    CHECK_THROWS_AS(bin.validate(), UsageError);
  }
}
