// Phrase segmentation: the length-dependent N-gram rule, phrase extraction
// from bracketed constituency trees, and batching of phrase plans into
// rectangular index grids with validity masks.

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "prt/tensor.hpp"

namespace prt {

// Raised on malformed input files / trees; carries a human-readable position.
class ParseError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Per-sentence phrase layout. Reading index_grid row-major and skipping pads
// yields 0..seql-1 in order; every row has at least one valid slot.
struct PhrasePlan {
  static constexpr int kPad = -1;

  int n_phrases = 0;
  int slot_width = 0;
  std::vector<int> index_grid;    // [n_phrases x slot_width], kPad = padding
  std::vector<uint8_t> valid;     // same shape, 0 iff pad

  int at(int phrase, int slot) const { return index_grid[phrase * slot_width + slot]; }
  bool slot_valid(int phrase, int slot) const { return valid[phrase * slot_width + slot] != 0; }
  int token_count() const;
};

// Tokens per phrase for the fixed-length rule: max(min(8, seql / 6), 3).
int ntok_for_length(int seql);

// Sequential chunks of ntok_for_length(seql) tokens; only the last row padded.
PhrasePlan segment_ngram(int seql);

// Rooted ordered constituency tree; exactly one of children / token is set.
struct ParseTree {
  std::string label;
  std::vector<std::unique_ptr<ParseTree>> children;
  std::string token;  // leaves only
  bool is_leaf() const { return children.empty(); }

  int leaf_count() const;
  void leaves(std::vector<const ParseTree*>& out) const;
  std::vector<std::string> leaf_tokens() const;
};

// Penn-style bracketed expression, one sentence. Errors report the character
// offset of the problem.
std::unique_ptr<ParseTree> parse_bracketed(const std::string& text);
std::string serialize_tree(const ParseTree& tree);

// How the per-phrase token budget is tracked while merging adjacent
// sub-trees. `fixed` caps every phrase at n tokens; `paper` reproduces the
// printed pseudocode, which lets a phrase grow to nst + n - 1 tokens.
enum class TreeBudget { fixed, paper };

// Partitions the leaf sequence into phrases of at most n tokens (fixed
// budget), preferring whole constituents; returns token-index lists in
// left-to-right order.
std::vector<std::vector<int>> extract_phrases_from_tree(const ParseTree& tree, int n,
                                                        TreeBudget budget = TreeBudget::fixed);

// Plan whose slot width is the longest extracted phrase.
PhrasePlan plan_from_tree(const ParseTree& tree, int seql,
                          TreeBudget budget = TreeBudget::fixed);

// Batch synthesis: one rectangular grid over sentences, slot and phrase-row
// validity masks. Token-to-phrase assignment is never changed, only padding.
struct BatchedPlans {
  int batch = 0;
  int max_phrases = 0;
  int slot_width = 0;
  std::vector<int> index_grid;       // [batch x max_phrases x slot_width]
  std::vector<uint8_t> slot_valid;   // same shape
  std::vector<uint8_t> phrase_valid; // [batch x max_phrases]
  std::vector<int> n_phrases;        // per sentence

  int64_t grid_size() const {
    return static_cast<int64_t>(batch) * max_phrases * slot_width;
  }
};

BatchedPlans batch_plans(const std::vector<PhrasePlan>& plans);

}  // namespace prt
