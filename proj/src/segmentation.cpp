#include "prt/segmentation.hpp"

#include <algorithm>
#include <sstream>

namespace prt {

int PhrasePlan::token_count() const {
  int n = 0;
  for (uint8_t v : valid) n += v ? 1 : 0;
  return n;
}

int ntok_for_length(int seql) {
  if (seql < 1) throw ParseError("ntok_for_length: sentence length must be >= 1");
  return std::max(std::min(8, seql / 6), 3);
}

PhrasePlan segment_ngram(int seql) {
  int width = ntok_for_length(seql);
  PhrasePlan plan;
  plan.slot_width = width;
  plan.n_phrases = (seql + width - 1) / width;
  plan.index_grid.assign(static_cast<size_t>(plan.n_phrases) * width, PhrasePlan::kPad);
  plan.valid.assign(plan.index_grid.size(), 0);
  for (int t = 0; t < seql; ++t) {
    plan.index_grid[t] = t;
    plan.valid[t] = 1;
  }
  return plan;
}

int ParseTree::leaf_count() const {
  if (is_leaf()) return 1;
  int n = 0;
  for (const auto& c : children) n += c->leaf_count();
  return n;
}

void ParseTree::leaves(std::vector<const ParseTree*>& out) const {
  if (is_leaf()) {
    out.push_back(this);
    return;
  }
  for (const auto& c : children) c->leaves(out);
}

std::vector<std::string> ParseTree::leaf_tokens() const {
  std::vector<const ParseTree*> ls;
  leaves(ls);
  std::vector<std::string> toks;
  toks.reserve(ls.size());
  for (const auto* l : ls) toks.push_back(l->token);
  return toks;
}

namespace {

[[noreturn]] void parse_fail(const std::string& msg, size_t offset) {
  std::ostringstream os;
  os << msg << " at offset " << offset;
  throw ParseError(os.str());
}

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\r' || c == '\n'; }

struct BracketParser {
  const std::string& text;
  size_t pos = 0;

  void skip_space() {
    while (pos < text.size() && is_space(text[pos])) ++pos;
  }

  std::string atom() {
    size_t start = pos;
    while (pos < text.size() && !is_space(text[pos]) && text[pos] != '(' && text[pos] != ')')
      ++pos;
    if (pos == start) parse_fail("expected token", pos);
    return text.substr(start, pos - start);
  }

  std::unique_ptr<ParseTree> constituent() {
    size_t open = pos;
    ++pos;  // consume '('
    skip_space();
    if (pos >= text.size() || text[pos] == ')')
      parse_fail("empty constituent", open);
    if (text[pos] == '(') parse_fail("constituent missing label", open);
    auto node = std::make_unique<ParseTree>();
    node->label = atom();
    skip_space();
    while (pos < text.size() && text[pos] != ')') {
      if (text[pos] == '(') {
        node->children.push_back(constituent());
      } else {
        auto leaf = std::make_unique<ParseTree>();
        leaf->token = atom();
        node->children.push_back(std::move(leaf));
      }
      skip_space();
    }
    if (pos >= text.size()) parse_fail("unbalanced bracket", open);
    ++pos;  // consume ')'
    if (node->children.empty()) parse_fail("empty constituent", open);
    return node;
  }
};

}  // namespace

std::unique_ptr<ParseTree> parse_bracketed(const std::string& text) {
  BracketParser p{text};
  p.skip_space();
  if (p.pos >= text.size()) parse_fail("empty input", 0);
  if (text[p.pos] != '(') parse_fail("expected '('", p.pos);
  auto tree = p.constituent();
  p.skip_space();
  if (p.pos < text.size()) parse_fail("trailing garbage", p.pos);
  return tree;
}

std::string serialize_tree(const ParseTree& tree) {
  if (tree.is_leaf()) return tree.token;
  std::string out = "(" + tree.label;
  for (const auto& c : tree.children) {
    out += ' ';
    out += serialize_tree(*c);
  }
  out += ')';
  return out;
}

namespace {

// Flat view of the tree used by phrase extraction: per node depth, leaf span
// and a live remaining-token count that shrinks as phrases are carved off the
// right edge.
struct FlatTree {
  struct NodeInfo {
    int parent = -1;
    int depth = 0;
    int span_begin = 0;  // leaf index range [begin, end)
    int span_end = 0;
    int remaining = 0;
  };
  std::vector<NodeInfo> nodes;
  std::vector<int> leaf_node;  // leaf index -> node id

  static FlatTree build(const ParseTree& t) {
    FlatTree f;
    int leaf_cursor = 0;
    build_rec(f, t, -1, 0, leaf_cursor);
    return f;
  }

  static int build_rec(FlatTree& f, const ParseTree& t, int parent, int depth,
                       int& leaf_cursor) {
    int id = static_cast<int>(f.nodes.size());
    f.nodes.push_back({parent, depth, leaf_cursor, leaf_cursor, 0});
    if (t.is_leaf()) {
      f.nodes[id].span_end = leaf_cursor + 1;
      f.nodes[id].remaining = 1;
      f.leaf_node.push_back(id);
      ++leaf_cursor;
      return id;
    }
    for (const auto& c : t.children) build_rec(f, *c, id, depth + 1, leaf_cursor);
    f.nodes[id].span_end = leaf_cursor;
    f.nodes[id].remaining = f.nodes[id].span_end - f.nodes[id].span_begin;
    return id;
  }

};

}  // namespace

std::vector<std::vector<int>> extract_phrases_from_tree(const ParseTree& tree, int n,
                                                        TreeBudget budget) {
  if (n < 2) throw ParseError("extract_phrases_from_tree: phrase budget must be >= 2");
  FlatTree flat = FlatTree::build(tree);
  int total = static_cast<int>(flat.leaf_node.size());
  if (total == 0) throw ParseError("extract_phrases_from_tree: tree has no leaves");

  int remaining_total = total;

  auto chain_of = [&](int leaf_idx) {
    std::vector<int> chain;  // leaf node up to root
    for (int cur = flat.leaf_node[leaf_idx]; cur != -1; cur = flat.nodes[cur].parent)
      chain.push_back(cur);
    return chain;
  };

  // Drops the remaining tokens of `node` (a suffix of what is left) and
  // returns them in order.
  auto take = [&](int node) {
    int k = flat.nodes[node].remaining;
    int last = remaining_total;  // remaining leaves are 0..remaining_total-1
    std::vector<int> tokens;
    for (int t = last - k; t < last; ++t) tokens.push_back(t);
    for (int cur = node; cur != -1; cur = flat.nodes[cur].parent)
      flat.nodes[cur].remaining -= k;
    remaining_total -= k;
    return tokens;
  };

  std::vector<std::vector<int>> phrases;
  while (remaining_total > 0) {
    int rightmost = remaining_total - 1;
    // ST: among subtrees on the right edge (ancestors of the rightmost
    // remaining leaf) with fewer than n remaining tokens, the one with the
    // most tokens; equal counts resolve to the deeper node.
    int st = -1;
    for (int cand : chain_of(rightmost)) {
      int cnt = flat.nodes[cand].remaining;
      if (cnt >= n) continue;
      if (st == -1 || cnt > flat.nodes[st].remaining ||
          (cnt == flat.nodes[st].remaining && flat.nodes[cand].depth > flat.nodes[st].depth))
        st = cand;
    }
    int dst = flat.nodes[st].depth;
    int nst = flat.nodes[st].remaining;
    std::vector<int> phrase = take(st);
    int mt = budget == TreeBudget::fixed ? n - nst : n;

    while (mt > 0 && remaining_total > 0) {
      // Adjacent sub-tree: the constituent at depth exactly dst containing
      // the new rightmost leaf; absent that depth, stop.
      int r2 = remaining_total - 1;
      int sta = -1;
      for (int cand : chain_of(r2)) {
        if (flat.nodes[cand].depth == dst) {
          sta = cand;
          break;
        }
      }
      if (sta == -1) break;
      int nsta = flat.nodes[sta].remaining;
      if (nsta > mt) break;
      std::vector<int> head = take(sta);
      phrase.insert(phrase.begin(), head.begin(), head.end());
      mt -= nsta;
    }
    phrases.push_back(std::move(phrase));
  }
  std::reverse(phrases.begin(), phrases.end());
  return phrases;
}

PhrasePlan plan_from_tree(const ParseTree& tree, int seql, TreeBudget budget) {
  if (tree.leaf_count() != seql)
    throw ParseError("plan_from_tree: tree has " + std::to_string(tree.leaf_count()) +
                     " leaves for sentence length " + std::to_string(seql));
  auto phrases = extract_phrases_from_tree(tree, ntok_for_length(seql), budget);
  PhrasePlan plan;
  plan.n_phrases = static_cast<int>(phrases.size());
  plan.slot_width = 0;
  for (const auto& p : phrases)
    plan.slot_width = std::max(plan.slot_width, static_cast<int>(p.size()));
  plan.index_grid.assign(static_cast<size_t>(plan.n_phrases) * plan.slot_width,
                         PhrasePlan::kPad);
  plan.valid.assign(plan.index_grid.size(), 0);
  for (int i = 0; i < plan.n_phrases; ++i)
    for (size_t j = 0; j < phrases[i].size(); ++j) {
      plan.index_grid[i * plan.slot_width + j] = phrases[i][j];
      plan.valid[i * plan.slot_width + j] = 1;
    }
  return plan;
}

BatchedPlans batch_plans(const std::vector<PhrasePlan>& plans) {
  if (plans.empty()) throw ParseError("batch_plans: need at least one plan");
  BatchedPlans out;
  out.batch = static_cast<int>(plans.size());
  for (const auto& p : plans) {
    out.max_phrases = std::max(out.max_phrases, p.n_phrases);
    out.slot_width = std::max(out.slot_width, p.slot_width);
    out.n_phrases.push_back(p.n_phrases);
  }
  out.index_grid.assign(out.grid_size(), PhrasePlan::kPad);
  out.slot_valid.assign(out.grid_size(), 0);
  out.phrase_valid.assign(static_cast<size_t>(out.batch) * out.max_phrases, 0);
  for (int b = 0; b < out.batch; ++b) {
    const auto& p = plans[b];
    for (int i = 0; i < p.n_phrases; ++i) {
      out.phrase_valid[b * out.max_phrases + i] = 1;
      for (int j = 0; j < p.slot_width; ++j) {
        int64_t dst = (static_cast<int64_t>(b) * out.max_phrases + i) * out.slot_width + j;
        out.index_grid[dst] = p.at(i, j);
        out.slot_valid[dst] = p.slot_valid(i, j) ? 1 : 0;
      }
    }
  }
  return out;
}

}  // namespace prt
