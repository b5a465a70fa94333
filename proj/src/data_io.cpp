#include "gravel/data_io.hpp"

#include <fmt/format.h>
#include <fmt/ostream.h>

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <random>
#include <unordered_map>

namespace gravel::io {

namespace {

/// Line-oriented reader that tracks 1-based line numbers and strips CR.
class LineReader {
 public:
  explicit LineReader(const fs::path& path) : path_(path), in_(path) {
    if (!in_) throw DataError(fmt::format("{}: cannot open file", path.string()));
  }

  bool next(std::string& line) {
    if (!std::getline(in_, line)) return false;
    ++line_no_;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return true;
  }

  [[noreturn]] void fail(const std::string& message) const {
    throw DataError(fmt::format("{}:{}: {}", path_.string(), line_no_, message));
  }

  std::size_t line_no() const { return line_no_; }

 private:
  fs::path path_;
  std::ifstream in_;
  std::size_t line_no_ = 0;
};

std::vector<std::string_view> split_ws(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t pos = 0;
  while (pos < line.size()) {
    while (pos < line.size() && (line[pos] == ' ' || line[pos] == '\t')) ++pos;
    const std::size_t start = pos;
    while (pos < line.size() && line[pos] != ' ' && line[pos] != '\t') ++pos;
    if (pos > start) out.push_back(line.substr(start, pos - start));
  }
  return out;
}

std::vector<std::string_view> split_tabs(std::string_view line) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  while (true) {
    const auto tab = line.find('\t', start);
    out.push_back(line.substr(start, tab == std::string_view::npos ? std::string_view::npos : tab - start));
    if (tab == std::string_view::npos) break;
    start = tab + 1;
  }
  return out;
}

Index parse_index(const LineReader& reader, std::string_view token, const char* what) {
  Index value = -1;
  const auto [ptr, ec] = std::from_chars(token.data(), token.data() + token.size(), value);
  if (ec != std::errc() || ptr != token.data() + token.size() || value < 0) {
    reader.fail(fmt::format("invalid {} '{}'", what, token));
  }
  return value;
}

bool blank(std::string_view line) { return split_ws(line).empty(); }

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError(fmt::format("{}: cannot open for writing", path.string()));
  return out;
}

void expect_header(LineReader& reader, const std::vector<std::string_view>& columns) {
  std::string line;
  if (!reader.next(line)) reader.fail("missing header row");
  const auto got = split_ws(line);
  if (got != columns) reader.fail(fmt::format("expected header '{}'", fmt::join(columns, "\t")));
}

/// Groups edges by user in first-appearance order, preserving item order.
std::vector<UserItemsRow> group_by_user(const std::vector<Edge>& edges) {
  std::vector<UserItemsRow> rows;
  std::unordered_map<Index, std::size_t> slot;
  for (const Edge& e : edges) {
    auto [it, inserted] = slot.try_emplace(e.user, rows.size());
    if (inserted) rows.push_back({e.user, {}});
    rows[it->second].items.push_back(e.item);
  }
  return rows;
}

}  // namespace

IdMap read_id_map(const fs::path& path) {
  LineReader reader(path);
  expect_header(reader, {"org_id", "remap_id"});
  std::vector<std::string> ids;
  std::unordered_map<std::string, std::size_t> seen;
  std::string line;
  while (reader.next(line)) {
    if (blank(line)) continue;
    const auto fields = split_ws(line);
    if (fields.size() != 2) reader.fail(fmt::format("expected 2 columns, found {}", fields.size()));
    const Index remap = parse_index(reader, fields[1], "remap_id");
    if (remap != static_cast<Index>(ids.size())) {
      reader.fail(fmt::format("remap_id {} breaks contiguity (expected {})", remap, ids.size()));
    }
    std::string org(fields[0]);
    if (const auto it = seen.find(org); it != seen.end()) {
      reader.fail(fmt::format("duplicate org_id '{}' (first seen with remap_id {})", org, it->second));
    }
    seen.emplace(org, ids.size());
    ids.push_back(std::move(org));
  }
  return IdMap(std::move(ids));
}

void write_id_map(std::ostream& out, const IdMap& map) {
  out << "org_id\tremap_id\n";
  for (Index i = 0; i < map.size(); ++i) fmt::print(out, "{}\t{}\n", map.org_id(i), i);
}

std::vector<Edge> read_ragged(const fs::path& path, Index num_users, Index num_items) {
  LineReader reader(path);
  std::vector<Edge> edges;
  std::string line;
  while (reader.next(line)) {
    const auto fields = split_ws(line);
    if (fields.empty()) continue;
    const Index user = parse_index(reader, fields[0], "user id");
    if (user >= num_users) reader.fail(fmt::format("user {} not in user list of {} users", user, num_users));
    for (std::size_t f = 1; f < fields.size(); ++f) {
      const Index item = parse_index(reader, fields[f], "item id");
      if (item >= num_items) reader.fail(fmt::format("item {} not in item list of {} items", item, num_items));
      edges.push_back({user, item});
    }
  }
  return edges;
}

void write_ragged(std::ostream& out, const std::vector<Edge>& edges) {
  for (const auto& row : group_by_user(edges)) {
    out << row.user;
    for (Index item : row.items) out << '\t' << item;
    out << '\n';
  }
}

InteractionDataset read_dataset(const fs::path& dir) {
  InteractionDataset ds;
  ds.user_ids = read_id_map(dir / kUserList);
  ds.item_ids = read_id_map(dir / kItemList);
  ds.num_users = ds.user_ids.size();
  ds.num_items = ds.item_ids.size();
  ds.train_edges = read_ragged(dir / kTrainFile, ds.num_users, ds.num_items);
  ds.test_edges = read_ragged(dir / kTestFile, ds.num_users, ds.num_items);
  if (fs::exists(dir / kValFile)) ds.val_edges = read_ragged(dir / kValFile, ds.num_users, ds.num_items);
  try {
    ds.validate();
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", dir.string(), e.what()));
  }
  return ds;
}

void write_dataset(const fs::path& dir, const InteractionDataset& dataset) {
  fs::create_directories(dir);
  {
    auto out = open_out(dir / kUserList);
    write_id_map(out, dataset.user_ids);
  }
  {
    auto out = open_out(dir / kItemList);
    write_id_map(out, dataset.item_ids);
  }
  {
    auto out = open_out(dir / kTrainFile);
    write_ragged(out, dataset.train_edges);
  }
  {
    auto out = open_out(dir / kTestFile);
    write_ragged(out, dataset.test_edges);
  }
  if (dataset.val_edges) {
    auto out = open_out(dir / kValFile);
    write_ragged(out, *dataset.val_edges);
  }
}

void write_interactions(std::ostream& out, const std::vector<Edge>& edges) {
  for (const Edge& e : edges) fmt::print(out, "{}\t{}\n", e.user, e.item);
}

std::vector<Edge> read_interactions(const fs::path& path) {
  LineReader reader(path);
  std::vector<Edge> edges;
  std::string line;
  while (reader.next(line)) {
    if (blank(line)) continue;
    const auto fields = split_ws(line);
    if (fields.size() != 2) reader.fail(fmt::format("expected 2 columns, found {}", fields.size()));
    edges.push_back({parse_index(reader, fields[0], "user id"), parse_index(reader, fields[1], "item id")});
  }
  return edges;
}

void write_node_table(std::ostream& out, const std::string& id_column, Index count) {
  fmt::print(out, "{}\ttimestamp\n", id_column);
  for (Index i = 0; i < count; ++i) fmt::print(out, "{}\t{}\n", i, kDummyTimestamp);
}

std::vector<Index> read_node_table(const fs::path& path, const std::string& id_column) {
  LineReader reader(path);
  expect_header(reader, {id_column, "timestamp"});
  std::vector<Index> ids;
  std::string line;
  while (reader.next(line)) {
    if (blank(line)) continue;
    const auto fields = split_ws(line);
    if (fields.size() != 2) reader.fail(fmt::format("expected 2 columns, found {}", fields.size()));
    ids.push_back(parse_index(reader, fields[0], id_column.c_str()));
    parse_index(reader, fields[1], "timestamp");
  }
  return ids;
}

void write_user_items_table(std::ostream& out, const std::vector<Edge>& edges) {
  out << "user_id\titem_ids\ttimestamp\n";
  for (const auto& row : group_by_user(edges)) {
    fmt::print(out, "{}\t{}\t{}\n", row.user, fmt::join(row.items, " "), kDummyTimestamp);
  }
}

std::vector<UserItemsRow> read_user_items_table(const fs::path& path) {
  LineReader reader(path);
  expect_header(reader, {"user_id", "item_ids", "timestamp"});
  std::vector<UserItemsRow> rows;
  std::string line;
  while (reader.next(line)) {
    if (blank(line)) continue;
    const auto fields = split_tabs(line);
    if (fields.size() != 3) reader.fail(fmt::format("expected 3 tab-separated columns, found {}", fields.size()));
    UserItemsRow row{parse_index(reader, fields[0], "user id"), {}};
    for (auto token : split_ws(fields[1])) row.items.push_back(parse_index(reader, token, "item id"));
    parse_index(reader, fields[2], "timestamp");
    rows.push_back(std::move(row));
  }
  return rows;
}

void write_target_table(std::ostream& out, const std::vector<Edge>& edges) {
  out << "user_id\titem_id\ttimestamp\n";
  for (const Edge& e : edges) fmt::print(out, "{}\t{}\t{}\n", e.user, e.item, kDummyTimestamp);
}

std::vector<Edge> read_target_table(const fs::path& path) {
  LineReader reader(path);
  expect_header(reader, {"user_id", "item_id", "timestamp"});
  std::vector<Edge> edges;
  std::string line;
  while (reader.next(line)) {
    if (blank(line)) continue;
    const auto fields = split_ws(line);
    if (fields.size() != 3) reader.fail(fmt::format("expected 3 columns, found {}", fields.size()));
    edges.push_back({parse_index(reader, fields[0], "user id"), parse_index(reader, fields[1], "item id")});
    parse_index(reader, fields[2], "timestamp");
  }
  return edges;
}

std::vector<fs::path> convert_for_benchmark(const InteractionDataset& dataset, const fs::path& out_dir) {
  fs::create_directories(out_dir);
  std::vector<fs::path> written;
  auto emit = [&](const char* name, auto&& writer) {
    const fs::path path = out_dir / name;
    auto out = open_out(path);
    writer(out);
    if (!out) throw DataError(fmt::format("{}: write failed", path.string()));
    written.push_back(path);
  };
  emit(kTrainElliot, [&](std::ostream& o) { write_interactions(o, dataset.train_edges); });
  emit(kTestElliot, [&](std::ostream& o) { write_interactions(o, dataset.test_edges); });
  emit(kSrcDf, [&](std::ostream& o) { write_node_table(o, "user_id", dataset.num_users); });
  emit(kDstDf, [&](std::ostream& o) { write_node_table(o, "item_id", dataset.num_items); });
  emit(kTrainDf, [&](std::ostream& o) { write_user_items_table(o, dataset.train_edges); });
  emit(kTestDf, [&](std::ostream& o) { write_user_items_table(o, dataset.test_edges); });
  emit(kTargetTable, [&](std::ostream& o) { write_target_table(o, dataset.train_edges); });
  return written;
}

InteractionDataset read_interaction_split(const fs::path& train_path, const fs::path& test_path,
                                          const std::optional<fs::path>& val_path) {
  InteractionDataset ds;
  ds.train_edges = read_interactions(train_path);
  ds.test_edges = read_interactions(test_path);
  if (val_path) ds.val_edges = read_interactions(*val_path);

  const fs::path dir = train_path.parent_path();
  if (fs::exists(dir / kUserList) && fs::exists(dir / kItemList)) {
    ds.user_ids = read_id_map(dir / kUserList);
    ds.item_ids = read_id_map(dir / kItemList);
  } else {
    Index max_user = -1;
    Index max_item = -1;
    auto scan = [&](const std::vector<Edge>& edges) {
      for (const Edge& e : edges) {
        max_user = std::max(max_user, e.user);
        max_item = std::max(max_item, e.item);
      }
    };
    scan(ds.train_edges);
    scan(ds.test_edges);
    if (ds.val_edges) scan(*ds.val_edges);
    ds.user_ids = IdMap::dense(max_user + 1);
    ds.item_ids = IdMap::dense(max_item + 1);
  }
  ds.num_users = ds.user_ids.size();
  ds.num_items = ds.item_ids.size();
  try {
    ds.validate();
  } catch (const DataError& e) {
    throw DataError(fmt::format("{}: {}", train_path.string(), e.what()));
  }
  return ds;
}

Index block_of(Index index, Index count, Index blocks) { return index * blocks / count; }

InteractionDataset generate_synthetic(const SyntheticSpec& spec) {
  auto density_ok = [](Real d) { return d >= 0.0 && d <= 1.0; };
  if (!density_ok(spec.in_block_density) || !density_ok(spec.cross_density) || !density_ok(spec.test_fraction)) {
    throw ConfigError("densities and test_fraction must lie in [0, 1]");
  }
  if (spec.num_users < 1 || spec.num_items < 1) throw ConfigError("need at least one user and item");
  if (spec.blocks < 1 || spec.blocks > std::min(spec.num_users, spec.num_items)) {
    throw ConfigError("blocks must be in [1, min(num_users, num_items)]");
  }

  std::mt19937_64 rng(derive_seed(spec.seed, 0x5e7dULL));
  InteractionDataset ds;
  ds.num_users = spec.num_users;
  ds.num_items = spec.num_items;
  ds.user_ids = IdMap::dense(spec.num_users);
  ds.item_ids = IdMap::dense(spec.num_items);

  std::vector<Index> items;
  for (Index u = 0; u < spec.num_users; ++u) {
    const Index ub = block_of(u, spec.num_users, spec.blocks);
    items.clear();
    for (Index i = 0; i < spec.num_items; ++i) {
      const Real p = block_of(i, spec.num_items, spec.blocks) == ub ? spec.in_block_density : spec.cross_density;
      if (uniform_unit(rng) < p) items.push_back(i);
    }
    const auto degree = static_cast<Index>(items.size());
    // The epsilon keeps products like 0.2 * 15 from rounding up past 3.
    auto n_test = static_cast<Index>(std::ceil(spec.test_fraction * static_cast<Real>(degree) - 1e-9));
    n_test = std::min(n_test, std::max<Index>(degree - 1, 0));
    for (Index s = 0; s < n_test; ++s) {
      const auto j = s + static_cast<Index>(uniform_below(rng, static_cast<std::uint64_t>(degree - s)));
      std::swap(items[static_cast<std::size_t>(s)], items[static_cast<std::size_t>(j)]);
    }
    std::sort(items.begin(), items.begin() + n_test);
    std::sort(items.begin() + n_test, items.end());
    for (Index s = 0; s < degree; ++s) {
      const Edge e{u, items[static_cast<std::size_t>(s)]};
      (s < n_test ? ds.test_edges : ds.train_edges).push_back(e);
    }
  }
  return ds;
}

}  // namespace gravel::io
