#pragma once

// Readers and writers for the dataset directory layout and the benchmark
// conversion outputs. Writers emit LF line endings, tab separators and no
// trailing whitespace; readers accept CRLF and any run of spaces/tabs.
// Every reader error is a DataError of the form "<path>:<line>: <message>".

#include "gravel/graph.hpp"

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace gravel::io {

namespace fs = std::filesystem;

inline constexpr const char* kUserList = "user_list.txt";
inline constexpr const char* kItemList = "item_list.txt";
inline constexpr const char* kTrainFile = "train.txt";
inline constexpr const char* kTestFile = "test.txt";
inline constexpr const char* kValFile = "val.txt";

/// `org_id remap_id` table with a header row; remap ids must be 0..n-1 in
/// file order.
IdMap read_id_map(const fs::path& path);
void write_id_map(std::ostream& out, const IdMap& map);

/// Header-less ragged rows: user followed by every interacted item.
std::vector<Edge> read_ragged(const fs::path& path, Index num_users, Index num_items);
/// One row per user with at least one edge, users in first-appearance order.
void write_ragged(std::ostream& out, const std::vector<Edge>& edges);

/// Reads user_list.txt, item_list.txt, train.txt, test.txt and, if present,
/// val.txt from `dir`.
InteractionDataset read_dataset(const fs::path& dir);
void write_dataset(const fs::path& dir, const InteractionDataset& dataset);

// --- benchmark conversion outputs -------------------------------------------

inline constexpr const char* kTrainElliot = "train_elliot.tsv";
inline constexpr const char* kTestElliot = "test_elliot.tsv";
inline constexpr const char* kSrcDf = "src_df.tsv";
inline constexpr const char* kDstDf = "dst_df.tsv";
inline constexpr const char* kTrainDf = "train_df.tsv";
inline constexpr const char* kTestDf = "test_df.tsv";
inline constexpr const char* kTargetTable = "target_table.tsv";

/// Literal written into every timestamp column.
inline constexpr int kDummyTimestamp = 0;

/// `user<TAB>item` per interaction, no header.
void write_interactions(std::ostream& out, const std::vector<Edge>& edges);
std::vector<Edge> read_interactions(const fs::path& path);

/// `<id_column><TAB>timestamp` header, then one row per node index.
void write_node_table(std::ostream& out, const std::string& id_column, Index count);
std::vector<Index> read_node_table(const fs::path& path, const std::string& id_column);

struct UserItemsRow {
  Index user = 0;
  std::vector<Index> items;
  friend bool operator==(const UserItemsRow&, const UserItemsRow&) = default;
};

/// `user_id<TAB>item_ids<TAB>timestamp` header; item ids space-separated.
void write_user_items_table(std::ostream& out, const std::vector<Edge>& edges);
std::vector<UserItemsRow> read_user_items_table(const fs::path& path);

/// `user_id<TAB>item_id<TAB>timestamp` header, one row per interaction.
void write_target_table(std::ostream& out, const std::vector<Edge>& edges);
std::vector<Edge> read_target_table(const fs::path& path);

/// Writes the seven conversion files into `out_dir` and returns their paths.
std::vector<fs::path> convert_for_benchmark(const InteractionDataset& dataset, const fs::path& out_dir);

/// Loads the two-column interaction files a run config points at. Counts
/// come from user_list.txt/item_list.txt beside the train file when present,
/// otherwise from the largest index seen.
InteractionDataset read_interaction_split(const fs::path& train_path, const fs::path& test_path,
                                          const std::optional<fs::path>& val_path = std::nullopt);

// --- synthetic data ----------------------------------------------------------

struct SyntheticSpec {
  Index num_users = 200;
  Index num_items = 300;
  Index blocks = 4;
  Real in_block_density = 0.25;
  Real cross_density = 0.01;
  Real test_fraction = 0.2;
  std::uint64_t seed = 7;
};

/// Block of node `index` among `count` nodes split into `blocks` contiguous groups.
Index block_of(Index index, Index count, Index blocks);

/// Planted-block interactions; per user ceil(test_fraction * degree) edges
/// move to test, capped so at least one train edge remains.
InteractionDataset generate_synthetic(const SyntheticSpec& spec);

}  // namespace gravel::io
