#include "support.hpp"

#include "gravel/data_io.hpp"

#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

using namespace gravel;
using namespace gravel::io;
using gravel::testing::scratch_dir;

namespace {

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  out << text;
}

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

/// Line count from awk, as an oracle independent of the C++ readers.
long awk_rows(const fs::path& path) {
  const std::string cmd = "awk 'END { print NR }' '" + path.string() + "'";
  FILE* pipe = ::popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  long rows = -1;
  REQUIRE(std::fscanf(pipe, "%ld", &rows) == 1);
  ::pclose(pipe);
  return rows;
}

InteractionDataset fixture() {
  InteractionDataset ds;
  ds.num_users = 3;
  ds.num_items = 4;
  ds.user_ids = IdMap(std::vector<std::string>{"u10", "u20", "u30"});
  ds.item_ids = IdMap(std::vector<std::string>{"i1", "i2", "i3", "i4"});
  ds.train_edges = {{0, 0}, {0, 2}, {1, 1}, {2, 3}, {2, 0}};
  ds.test_edges = {{0, 1}, {2, 2}};
  return ds;
}

}  // namespace

TEST_CASE("dataset directory round-trips") {
  const auto dir = scratch_dir("ds_roundtrip");
  const auto ds = fixture();
  write_dataset(dir, ds);
  CHECK(read_text(dir / kUserList) == "org_id\tremap_id\nu10\t0\nu20\t1\nu30\t2\n");
  CHECK(read_text(dir / kTrainFile) == "0\t0\t2\n1\t1\n2\t3\t0\n");
  const auto back = read_dataset(dir);
  CHECK(back == ds);
  write_dataset(dir / "again", back);
  CHECK(read_text(dir / kTrainFile) == read_text(dir / "again" / kTrainFile));
  CHECK_FALSE(back.val_edges.has_value());
}

TEST_CASE("readers accept CRLF and spaces") {
  const auto dir = scratch_dir("crlf");
  write_text(dir / kUserList, "org_id remap_id\r\na 0\r\nb 1\r\n");
  write_text(dir / kItemList, "org_id\tremap_id\nx\t0\ny\t1\n");
  write_text(dir / kTrainFile, "0 0 1\r\n1 1\r\n");
  write_text(dir / kTestFile, "1  0\n");
  const auto ds = read_dataset(dir);
  CHECK(ds.num_users == 2);
  CHECK(ds.train_edges.size() == 3);
  CHECK(ds.test_edges == std::vector<Edge>{{1, 0}});
}

TEST_CASE("reader errors name file and line") {
  const auto dir = scratch_dir("errors");
  write_text(dir / "gap.txt", "org_id remap_id\na 0\nb 2\n");
  try {
    read_id_map(dir / "gap.txt");
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("gap.txt:3:") != std::string::npos);
  }
  write_text(dir / "dup.txt", "org_id remap_id\na 0\na 1\n");
  CHECK_THROWS_AS(read_id_map(dir / "dup.txt"), DataError);
  write_text(dir / "rag.txt", "0 1\n0 9\n");
  try {
    read_ragged(dir / "rag.txt", 1, 5);
    FAIL("expected DataError");
  } catch (const DataError& e) {
    CHECK(std::string(e.what()).find("rag.txt:2:") != std::string::npos);
  }
  write_text(dir / "neg.txt", "0\t-1\n");
  CHECK_THROWS_AS(read_interactions(dir / "neg.txt"), DataError);
}

TEST_CASE("benchmark conversion files round-trip with row-count identities") {
  const auto dir = scratch_dir("convert");
  SyntheticSpec spec;
  spec.num_users = 30;
  spec.num_items = 40;
  const auto ds = generate_synthetic(spec);
  const auto files = convert_for_benchmark(ds, dir);
  CHECK(files.size() == 7);

  const auto train = read_interactions(dir / kTrainElliot);
  const auto test = read_interactions(dir / kTestElliot);
  CHECK(train == ds.train_edges);
  CHECK(test == ds.test_edges);
  CHECK(awk_rows(dir / kTrainElliot) == static_cast<long>(ds.train_edges.size()));
  CHECK(awk_rows(dir / kTestElliot) == static_cast<long>(ds.test_edges.size()));

  CHECK(read_node_table(dir / kSrcDf, "user_id").size() == static_cast<std::size_t>(ds.num_users));
  CHECK(read_node_table(dir / kDstDf, "item_id").size() == static_cast<std::size_t>(ds.num_items));
  CHECK(awk_rows(dir / kSrcDf) == ds.num_users + 1);
  CHECK(awk_rows(dir / kDstDf) == ds.num_items + 1);

  const auto train_df = read_user_items_table(dir / kTrainDf);
  std::size_t listed = 0;
  for (const auto& row : train_df) listed += row.items.size();
  CHECK(listed == ds.train_edges.size());
  const auto target = read_target_table(dir / kTargetTable);
  CHECK(target == ds.train_edges);
  CHECK(awk_rows(dir / kTargetTable) == static_cast<long>(ds.train_edges.size()) + 1);

  // write(read(file)) reproduces every file byte for byte.
  std::ostringstream a, b, c, d, e;
  write_interactions(a, train);
  write_node_table(b, "user_id", static_cast<Index>(read_node_table(dir / kSrcDf, "user_id").size()));
  write_user_items_table(c, [&] {
    std::vector<Edge> edges;
    for (const auto& row : train_df) {
      for (Index i : row.items) edges.push_back({row.user, i});
    }
    return edges;
  }());
  write_target_table(d, target);
  write_interactions(e, test);
  CHECK(a.str() == read_text(dir / kTrainElliot));
  CHECK(b.str() == read_text(dir / kSrcDf));
  CHECK(c.str() == read_text(dir / kTrainDf));
  CHECK(d.str() == read_text(dir / kTargetTable));
  CHECK(e.str() == read_text(dir / kTestElliot));

  const auto split = read_interaction_split(dir / kTrainElliot, dir / kTestElliot);
  CHECK(split.train_edges == ds.train_edges);
  CHECK(split.num_users <= ds.num_users);
}

TEST_CASE("table headers are enforced") {
  const auto dir = scratch_dir("headers");
  write_text(dir / "t.tsv", "user\titem_id\ttimestamp\n0\t1\t0\n");
  CHECK_THROWS_AS(read_target_table(dir / "t.tsv"), DataError);
}

TEST_CASE("synthetic generator is deterministic with binomially plausible counts") {
  SyntheticSpec spec;
  const auto a = generate_synthetic(spec);
  const auto b = generate_synthetic(spec);
  CHECK(a == b);
  CHECK_NOTHROW(a.validate());

  // Expected edges: per user, in-block items at p_in and the rest at p_cross.
  double mean = 0.0, var = 0.0;
  for (Index u = 0; u < spec.num_users; ++u) {
    for (Index i = 0; i < spec.num_items; ++i) {
      const double p = block_of(u, spec.num_users, spec.blocks) == block_of(i, spec.num_items, spec.blocks)
                           ? spec.in_block_density
                           : spec.cross_density;
      mean += p;
      var += p * (1.0 - p);
    }
  }
  const double total = static_cast<double>(a.train_edges.size() + a.test_edges.size());
  CHECK(std::abs(total - mean) < 3.0 * std::sqrt(var));

  const auto train = a.items_by_user(a.train_edges);
  const auto test = a.items_by_user(a.test_edges);
  for (Index u = 0; u < spec.num_users; ++u) {
    const auto deg = static_cast<double>(train[static_cast<std::size_t>(u)].size() + test[static_cast<std::size_t>(u)].size());
    if (deg == 0) continue;
    const auto want = std::min(deg - 1.0, std::ceil(spec.test_fraction * deg - 1e-9));
    CHECK(static_cast<double>(test[static_cast<std::size_t>(u)].size()) == want);
  }

  spec.seed = 8;
  CHECK_FALSE(generate_synthetic(spec) == a);
  spec.in_block_density = 1.5;
  CHECK_THROWS_AS(generate_synthetic(spec), ConfigError);
}
