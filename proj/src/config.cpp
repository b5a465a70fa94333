#include "gravel/experiment.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace gravel::exp {

namespace {

[[noreturn]] void config_fail(int line, const std::string& message) {
  throw ConfigError(fmt::format("line {}: {}", line, message));
}

std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
  return s;
}

struct Line {
  int number = 0;
  int indent = 0;
  std::string text;
};

std::string strip_comment(std::string_view raw) {
  char quote = 0;
  for (std::size_t k = 0; k < raw.size(); ++k) {
    const char c = raw[k];
    if (quote) {
      if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == '#' && (k == 0 || raw[k - 1] == ' ' || raw[k - 1] == '\t')) {
      return std::string(raw.substr(0, k));
    }
  }
  return std::string(raw);
}

std::vector<Line> tokenize_lines(std::string_view text) {
  std::vector<Line> lines;
  int number = 0;
  std::size_t start = 0;
  while (start <= text.size()) {
    const auto end = text.find('\n', start);
    const std::string_view raw = text.substr(start, end == std::string_view::npos ? std::string_view::npos : end - start);
    ++number;
    const std::string body = strip_comment(raw);
    const std::string_view content = trim(body);
    if (!content.empty()) {
      int indent = 0;
      for (char c : body) {
        if (c == ' ') {
          ++indent;
        } else if (c == '\t') {
          config_fail(number, "tabs are not allowed for indentation");
        } else {
          break;
        }
      }
      lines.push_back({number, indent, std::string(content)});
    }
    if (end == std::string_view::npos) break;
    start = end + 1;
  }
  return lines;
}

std::string unquote(std::string_view s, int line) {
  if (s.size() >= 2 && (s.front() == '"' || s.front() == '\'') && s.back() == s.front()) {
    return std::string(s.substr(1, s.size() - 2));
  }
  if (!s.empty() && (s.front() == '"' || s.front() == '\'')) config_fail(line, "unterminated quoted string");
  return std::string(s);
}

/// Splits on commas that are not nested inside brackets, parentheses or quotes.
std::vector<std::string_view> split_top_level(std::string_view body, int line) {
  std::vector<std::string_view> parts;
  int depth = 0;
  char quote = 0;
  std::size_t start = 0;
  for (std::size_t k = 0; k < body.size(); ++k) {
    const char c = body[k];
    if (quote) {
      if (c == quote) quote = 0;
      continue;
    }
    if (c == '"' || c == '\'') quote = c;
    if (c == '[' || c == '(') ++depth;
    if (c == ']' || c == ')') --depth;
    if (depth < 0) config_fail(line, "unbalanced brackets");
    if (c == ',' && depth == 0) {
      parts.push_back(trim(body.substr(start, k - start)));
      start = k + 1;
    }
  }
  if (depth != 0 || quote) config_fail(line, "unbalanced brackets or quotes");
  parts.push_back(trim(body.substr(start)));
  return parts;
}

YamlNode parse_inline(std::string_view text, int line) {
  YamlNode node;
  node.line = line;
  if (text.front() == '[') {
    if (text.back() != ']') config_fail(line, fmt::format("malformed list '{}'", text));
    node.kind = YamlNode::Kind::List;
    const auto body = trim(text.substr(1, text.size() - 2));
    if (!body.empty()) {
      for (auto part : split_top_level(body, line)) {
        if (part.empty()) config_fail(line, fmt::format("empty element in list '{}'", text));
        node.items.push_back(parse_inline(part, line));
      }
    }
    return node;
  }
  if (text.front() == '(') {
    if (text.back() != ')') config_fail(line, fmt::format("malformed tuple '{}'", text));
    node.kind = YamlNode::Kind::Tuple;
    const auto body = trim(text.substr(1, text.size() - 2));
    if (body.empty()) config_fail(line, "empty tuple");
    for (auto part : split_top_level(body, line)) {
      if (part.empty() || part.front() == '(' || part.front() == '[') {
        config_fail(line, fmt::format("malformed tuple '{}'", text));
      }
      YamlNode item;
      item.line = line;
      item.scalar = unquote(part, line);
      node.items.push_back(std::move(item));
    }
    return node;
  }
  node.scalar = unquote(text, line);
  return node;
}

/// Position of the key separator ':' (followed by space or end of line),
/// outside quotes; npos if none.
std::size_t key_separator(std::string_view text) {
  char quote = 0;
  for (std::size_t k = 0; k < text.size(); ++k) {
    const char c = text[k];
    if (quote) {
      if (c == quote) quote = 0;
    } else if (c == '"' || c == '\'') {
      quote = c;
    } else if (c == ':' && (k + 1 == text.size() || text[k + 1] == ' ')) {
      return k;
    }
  }
  return std::string_view::npos;
}

bool is_list_item(const std::string& text) { return text == "-" || text.rfind("- ", 0) == 0; }

class BlockParser {
 public:
  explicit BlockParser(std::vector<Line> lines) : lines_(std::move(lines)) {}

  YamlNode parse_document() {
    if (lines_.empty()) {
      YamlNode empty;
      empty.kind = YamlNode::Kind::Map;
      return empty;
    }
    YamlNode root = parse_block(lines_.front().indent);
    if (pos_ < lines_.size()) config_fail(lines_[pos_].number, "unexpected indentation");
    return root;
  }

 private:
  YamlNode parse_block(int indent) {
    return is_list_item(lines_[pos_].text) ? parse_list(indent) : parse_map(indent);
  }

  YamlNode parse_child(int parent_indent, int line) {
    if (pos_ < lines_.size() && lines_[pos_].indent > parent_indent) {
      // Nested blocks report the line of the key that introduces them.
      YamlNode child = parse_block(lines_[pos_].indent);
      child.line = line;
      return child;
    }
    YamlNode empty;
    empty.line = line;
    return empty;
  }

  YamlNode parse_list(int indent) {
    YamlNode node;
    node.kind = YamlNode::Kind::List;
    node.line = lines_[pos_].number;
    while (pos_ < lines_.size() && lines_[pos_].indent == indent) {
      const Line& ln = lines_[pos_];
      if (!is_list_item(ln.text)) config_fail(ln.number, "expected '- ' list item");
      ++pos_;
      const auto rest = trim(std::string_view(ln.text).substr(1));
      node.items.push_back(rest.empty() ? parse_child(indent, ln.number) : parse_inline(rest, ln.number));
    }
    return node;
  }

  YamlNode parse_map(int indent) {
    YamlNode node;
    node.kind = YamlNode::Kind::Map;
    node.line = lines_[pos_].number;
    std::set<std::string> keys;
    while (pos_ < lines_.size() && lines_[pos_].indent == indent) {
      const Line& ln = lines_[pos_];
      if (is_list_item(ln.text)) config_fail(ln.number, "list item where a mapping key was expected");
      const auto sep = key_separator(ln.text);
      if (sep == std::string_view::npos) config_fail(ln.number, fmt::format("expected 'key: value', got '{}'", ln.text));
      const std::string key = unquote(trim(std::string_view(ln.text).substr(0, sep)), ln.number);
      if (key.empty()) config_fail(ln.number, "empty key");
      if (!keys.insert(key).second) config_fail(ln.number, fmt::format("duplicate key '{}'", key));
      const auto rest = trim(std::string_view(ln.text).substr(sep + 1));
      ++pos_;
      node.entries.emplace_back(key, rest.empty() ? parse_child(indent, ln.number) : parse_inline(rest, ln.number));
    }
    if (pos_ < lines_.size() && lines_[pos_].indent > indent) {
      config_fail(lines_[pos_].number, "unexpected indentation");
    }
    return node;
  }

  std::vector<Line> lines_;
  std::size_t pos_ = 0;
};

// --- typed extraction --------------------------------------------------------

const YamlNode& expect_map(const YamlNode& node, const std::string& what) {
  if (node.kind != YamlNode::Kind::Map) config_fail(node.line, fmt::format("'{}' must be a mapping", what));
  return node;
}

std::string expect_scalar(const YamlNode& node, const std::string& key) {
  if (node.kind != YamlNode::Kind::Scalar) config_fail(node.line, fmt::format("'{}' must be a scalar", key));
  return node.scalar;
}

bool parse_bool(const std::string& text, int line, const std::string& key) {
  if (text == "True" || text == "true") return true;
  if (text == "False" || text == "false") return false;
  config_fail(line, fmt::format("'{}' must be True or False, got '{}'", key, text));
}

Index parse_int(const std::string& text, int line, const std::string& key) {
  Index value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    config_fail(line, fmt::format("'{}' must be an integer, got '{}'", key, text));
  }
  return value;
}

Real parse_real(const std::string& text, int line, const std::string& key) {
  try {
    std::size_t used = 0;
    const Real value = std::stod(text, &used);
    if (used == text.size()) return value;
  } catch (const std::exception&) {
  }
  config_fail(line, fmt::format("'{}' must be a number, got '{}'", key, text));
}

std::vector<Index> parse_tuple(const std::string& text, int line, const std::string& key) {
  if (text.size() < 2 || text.front() != '(' || text.back() != ')') {
    config_fail(line, fmt::format("'{}' must be a tuple like (16,16), got '{}'", key, text));
  }
  std::vector<Index> out;
  for (auto part : split_top_level(std::string_view(text).substr(1, text.size() - 2), line)) {
    out.push_back(parse_int(std::string(part), line, key));
  }
  return out;
}

std::string canonical_value(const YamlNode& node, const std::string& key) {
  if (node.kind == YamlNode::Kind::Scalar) return node.scalar;
  if (node.kind == YamlNode::Kind::Tuple) {
    std::vector<std::string> parts;
    for (const auto& item : node.items) parts.push_back(item.scalar);
    return fmt::format("({})", fmt::join(parts, ","));
  }
  config_fail(node.line, fmt::format("'{}' must be a scalar or tuple", key));
}

MetaBlock parse_meta(const YamlNode& node) {
  expect_map(node, "meta");
  MetaBlock meta;
  for (const auto& [key, value] : node.entries) {
    const std::string text = expect_scalar(value, key);
    if (key == "hyper_opt_alg") {
      if (text != "grid") config_fail(value.line, fmt::format("hyper_opt_alg '{}' is not supported (only grid)", text));
      meta.hyper_opt_alg = text;
    } else if (key == "verbose") {
      meta.verbose = parse_bool(text, value.line, key);
    } else if (key == "save_weights") {
      meta.save_weights = parse_bool(text, value.line, key);
    } else if (key == "validation_rate") {
      meta.validation_rate = parse_int(text, value.line, key);
    } else if (key == "validation_metric") {
      try {
        MetricTag::parse(text);
      } catch (const ConfigError& e) {
        config_fail(value.line, e.what());
      }
      meta.validation_metric = text;
    } else if (key == "restore") {
      meta.restore = parse_bool(text, value.line, key);
    } else {
      config_fail(value.line, fmt::format("unknown meta key '{}'", key));
    }
  }
  return meta;
}

const std::map<std::string, std::set<std::string>>& allowed_hyper() {
  static const std::map<std::string, std::set<std::string>> table{
      {kContextGNNTag,
       {"lr", "epochs", "factors", "batch_size", "n_layers", "aggr", "channels", "max_steps", "neigh", "seed",
        "routing", "warm_start_q"}},
      {kBPRMFTag, {"lr", "epochs", "factors", "batch_size", "max_steps", "seed"}},
      {kLightGCNTag, {"lr", "epochs", "factors", "batch_size", "max_steps", "seed", "n_layers"}},
      {kItemFilterTag, {"smoothing"}},
  };
  return table;
}

ModelSpec parse_model(const std::string& tag, const YamlNode& node) {
  const auto& table = allowed_hyper();
  const auto allowed = table.find(tag);
  if (allowed == table.end()) config_fail(node.line, fmt::format("unknown model tag '{}'", tag));
  expect_map(node, tag);
  ModelSpec spec;
  spec.tag = tag;
  spec.line = node.line;
  for (const auto& [key, value] : node.entries) {
    if (key == "meta") {
      spec.meta = parse_meta(value);
      continue;
    }
    if (!allowed->second.contains(key)) config_fail(value.line, fmt::format("unknown key '{}' for model {}", key, tag));
    HyperValue hv;
    hv.line = value.line;
    if (value.kind == YamlNode::Kind::List) {
      if (value.items.empty()) config_fail(value.line, fmt::format("grid for '{}' is empty", key));
      hv.grid = true;
      for (const auto& item : value.items) hv.choices.push_back(canonical_value(item, key));
    } else {
      hv.choices.push_back(canonical_value(value, key));
    }
    spec.hyper.emplace_back(key, std::move(hv));
  }
  return spec;
}

void apply_hyper(ModelRun& run, const std::string& key, const std::string& text, int line) {
  TrainConfig& t = run.train;
  if (key == "lr") {
    t.lr = parse_real(text, line, key);
  } else if (key == "epochs") {
    t.epochs = parse_int(text, line, key);
  } else if (key == "factors") {
    t.factors = parse_int(text, line, key);
  } else if (key == "batch_size") {
    t.batch_size = parse_int(text, line, key);
  } else if (key == "n_layers") {
    t.n_layers = parse_int(text, line, key);
  } else if (key == "aggr") {
    t.aggr = text;
  } else if (key == "channels") {
    t.channels = parse_int(text, line, key);
  } else if (key == "max_steps") {
    t.max_steps = parse_int(text, line, key);
  } else if (key == "neigh") {
    t.neigh = parse_tuple(text, line, key);
  } else if (key == "seed") {
    const Index seed = parse_int(text, line, key);
    if (seed < 0) config_fail(line, "seed must be non-negative");
    t.seed = static_cast<std::uint64_t>(seed);
  } else if (key == "routing") {
    if (text == "sampled") {
      run.routing = Routing::Sampled;
    } else if (text == "exact") {
      run.routing = Routing::Exact;
    } else {
      config_fail(line, fmt::format("routing must be 'sampled' or 'exact', got '{}'", text));
    }
  } else if (key == "warm_start_q") {
    run.warm_start_q = parse_bool(text, line, key);
  } else if (key == "smoothing") {
    run.smoothing = parse_real(text, line, key);
  }
}

bool needs_quotes(const std::string& s) {
  if (s.empty()) return true;
  if (s.front() == '[' || s.front() == '(' || s.front() == '"' || s.front() == '\'' || s.front() == '-' ||
      s.front() == ' ' || s.back() == ' ') {
    return !(s.front() == '(' && s.back() == ')');
  }
  return s.find(": ") != std::string::npos || s.find(" #") != std::string::npos || s.back() == ':' ||
         s.find(',') != std::string::npos;
}

std::string render_scalar(const std::string& s) { return needs_quotes(s) ? fmt::format("\"{}\"", s) : s; }

}  // namespace

const YamlNode* YamlNode::find(std::string_view key) const {
  for (const auto& [k, v] : entries) {
    if (k == key) return &v;
  }
  return nullptr;
}

YamlNode parse_yaml(std::string_view text) { return BlockParser(tokenize_lines(text)).parse_document(); }

std::string model_display_name(const std::string& tag) {
  const auto dot = tag.rfind('.');
  return dot == std::string::npos ? tag : tag.substr(dot + 1);
}

std::vector<ModelRun> expand_grid(const ModelSpec& spec) {
  std::size_t points = 1;
  for (const auto& [key, hv] : spec.hyper) points *= hv.choices.size();

  std::vector<ModelRun> runs;
  for (std::size_t p = 0; p < points; ++p) {
    ModelRun run;
    run.tag = spec.tag;
    run.meta = spec.meta;
    run.label = points > 1 ? fmt::format("{}_grid{}", model_display_name(spec.tag), p)
                           : model_display_name(spec.tag);
    run.train.validation_rate = spec.meta.validation_rate;
    run.train.validation_metric = MetricTag::parse(spec.meta.validation_metric);
    if (spec.tag == kLightGCNTag) run.train.n_layers = 3;

    // Mixed-radix decode; the last declared key varies fastest.
    std::size_t rest = p;
    std::vector<std::size_t> pick(spec.hyper.size());
    for (std::size_t k = spec.hyper.size(); k-- > 0;) {
      const std::size_t n = spec.hyper[k].second.choices.size();
      pick[k] = rest % n;
      rest /= n;
    }
    for (std::size_t k = 0; k < spec.hyper.size(); ++k) {
      const auto& [key, hv] = spec.hyper[k];
      apply_hyper(run, key, hv.choices[pick[k]], hv.line);
    }

    const bool has_neigh = std::any_of(spec.hyper.begin(), spec.hyper.end(),
                                       [](const auto& kv) { return kv.first == "neigh"; });
    if (spec.tag != kContextGNNTag || !has_neigh) {
      // Fanouts only matter to ContextGNN; elsewhere they follow n_layers.
      if (spec.tag != kContextGNNTag) run.train.neigh.assign(static_cast<std::size_t>(run.train.n_layers), 16);
    }
    try {
      run.train.validate();
    } catch (const ConfigError& e) {
      config_fail(spec.line, fmt::format("model {}: {}", spec.tag, e.what()));
    }
    if (spec.tag == kContextGNNTag && run.train.factors != run.train.channels) {
      config_fail(spec.line, fmt::format("model {}: factors ({}) must equal channels ({})", spec.tag,
                                         run.train.factors, run.train.channels));
    }
    if (spec.tag == kItemFilterTag && !(run.smoothing >= 0.0)) {
      config_fail(spec.line, "smoothing must be >= 0");
    }
    runs.push_back(std::move(run));
  }
  return runs;
}

ExperimentConfig parse_config(std::string_view text) {
  const YamlNode root = parse_yaml(text);
  expect_map(root, "document");
  const YamlNode* exp_node = root.find("experiment");
  if (!exp_node) config_fail(1, "missing top-level 'experiment' mapping");
  for (const auto& [key, value] : root.entries) {
    if (key != "experiment") config_fail(value.line, fmt::format("unknown top-level key '{}'", key));
  }
  expect_map(*exp_node, "experiment");

  ExperimentConfig config;
  bool have_data = false;
  bool have_models = false;
  for (const auto& [key, value] : exp_node->entries) {
    if (key == "backend") {
      config.backend = expect_scalar(value, key);
    } else if (key == "dataset") {
      config.dataset = expect_scalar(value, key);
    } else if (key == "top_k") {
      config.top_k = parse_int(expect_scalar(value, key), value.line, key);
      if (config.top_k < 1) config_fail(value.line, "top_k must be >= 1");
    } else if (key == "data_config") {
      have_data = true;
      expect_map(value, key);
      for (const auto& [dkey, dvalue] : value.entries) {
        const std::string text = expect_scalar(dvalue, dkey);
        if (dkey == "strategy") {
          if (text != "fixed") config_fail(dvalue.line, fmt::format("strategy '{}' is not supported (only fixed)", text));
          config.strategy = text;
        } else if (dkey == "train_path") {
          config.train_path = text;
        } else if (dkey == "test_path") {
          config.test_path = text;
        } else if (dkey == "validation_path") {
          config.validation_path = text;
        } else {
          config_fail(dvalue.line, fmt::format("unknown data_config key '{}'", dkey));
        }
      }
    } else if (key == "models") {
      have_models = true;
      expect_map(value, key);
      for (const auto& [tag, model] : value.entries) config.models.push_back(parse_model(tag, model));
    } else {
      config_fail(value.line, fmt::format("unknown experiment key '{}'", key));
    }
  }
  if (!have_data || config.train_path.empty() || config.test_path.empty()) {
    config_fail(exp_node->line, "data_config with train_path and test_path is required");
  }
  if (config.dataset.empty()) config_fail(exp_node->line, "dataset is required");
  if (!have_models || config.models.empty()) config_fail(exp_node->line, "at least one model is required");
  for (const auto& spec : config.models) expand_grid(spec);
  return config;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError(fmt::format("{}: cannot open config", path.string()));
  std::ostringstream buf;
  buf << in.rdbuf();
  try {
    return parse_config(buf.str());
  } catch (const ConfigError& e) {
    throw ConfigError(fmt::format("{}: {}", path.string(), e.what()));
  }
}

std::string render_config(const ExperimentConfig& config) {
  std::string out;
  auto line = [&](int indent, const std::string& text) {
    out.append(static_cast<std::size_t>(indent), ' ');
    out += text;
    out += '\n';
  };
  auto boolean = [](bool b) { return b ? "True" : "False"; };
  line(0, "experiment:");
  line(2, fmt::format("backend: {}", render_scalar(config.backend)));
  line(2, "data_config:");
  line(4, fmt::format("strategy: {}", render_scalar(config.strategy)));
  line(4, fmt::format("train_path: {}", render_scalar(config.train_path)));
  line(4, fmt::format("test_path: {}", render_scalar(config.test_path)));
  if (config.validation_path) line(4, fmt::format("validation_path: {}", render_scalar(*config.validation_path)));
  line(2, fmt::format("dataset: {}", render_scalar(config.dataset)));
  line(2, fmt::format("top_k: {}", config.top_k));
  line(2, "models:");
  for (const ModelSpec& m : config.models) {
    line(4, fmt::format("{}:", m.tag));
    line(6, "meta:");
    line(8, fmt::format("hyper_opt_alg: {}", m.meta.hyper_opt_alg));
    line(8, fmt::format("verbose: {}", boolean(m.meta.verbose)));
    line(8, fmt::format("save_weights: {}", boolean(m.meta.save_weights)));
    line(8, fmt::format("validation_rate: {}", m.meta.validation_rate));
    line(8, fmt::format("validation_metric: {}", m.meta.validation_metric));
    line(8, fmt::format("restore: {}", boolean(m.meta.restore)));
    for (const auto& [key, hv] : m.hyper) {
      if (hv.grid) {
        std::vector<std::string> parts;
        for (const auto& c : hv.choices) parts.push_back(render_scalar(c));
        line(6, fmt::format("{}: [{}]", key, fmt::join(parts, ", ")));
      } else {
        line(6, fmt::format("{}: {}", key, render_scalar(hv.choices.front())));
      }
    }
  }
  return out;
}

}  // namespace gravel::exp
