#include "doctest.h"
#include "oracles.hpp"
#include "prt/segmentation.hpp"

#include <algorithm>
#include <numeric>

using namespace prt;

namespace {

// Independent trace of the phrase-extraction algorithm. State is a single
// remaining-leaf count; spans and depths are recomputed from the original
// tree at every step, so it shares nothing with the production data
// structures. Also records each chosen right-edge sub-tree span.
struct TraceStep {
  int begin, end;  // span of the chosen right-edge sub-tree
};

std::vector<std::vector<int>> trace_extract(const ParseTree& tree, int n, bool fixed_budget,
                                            std::vector<TraceStep>* st_spans = nullptr) {
  struct PathEntry {
    const ParseTree* node;
    int depth, begin, end;
  };
  // Root-to-leaf path for the leaf at original index r.
  auto path_to = [&](int r) {
    std::vector<PathEntry> path;
    const ParseTree* cur = &tree;
    int begin = 0, depth = 0;
    while (true) {
      int count = cur->leaf_count();
      path.push_back({cur, depth, begin, begin + count});
      if (cur->is_leaf()) break;
      for (const auto& child : cur->children) {
        int c = child->leaf_count();
        if (r < begin + c) {
          cur = child.get();
          break;
        }
        begin += c;
      }
      ++depth;
    }
    return path;
  };

  int remaining = tree.leaf_count();
  std::vector<std::vector<int>> phrases;
  while (remaining > 0) {
    auto path = path_to(remaining - 1);
    const PathEntry* st = nullptr;
    for (const auto& e : path) {
      int rem = std::min(e.end, remaining) - e.begin;
      if (rem >= n) continue;
      if (st == nullptr || rem > std::min(st->end, remaining) - st->begin ||
          (rem == std::min(st->end, remaining) - st->begin && e.depth > st->depth))
        st = &e;
    }
    REQUIRE(st != nullptr);
    int dst = st->depth;
    int nst = std::min(st->end, remaining) - st->begin;
    std::vector<int> phrase(nst);
    std::iota(phrase.begin(), phrase.end(), remaining - nst);
    if (st_spans) st_spans->push_back({remaining - nst, remaining});
    remaining -= nst;
    int mt = fixed_budget ? n - nst : n;
    while (mt > 0 && remaining > 0) {
      auto path2 = path_to(remaining - 1);
      const PathEntry* sta = nullptr;
      for (const auto& e : path2)
        if (e.depth == dst) {
          sta = &e;
          break;
        }
      if (sta == nullptr) break;
      int nsta = std::min(sta->end, remaining) - sta->begin;
      if (nsta > mt) break;
      std::vector<int> head(nsta);
      std::iota(head.begin(), head.end(), remaining - nsta);
      phrase.insert(phrase.begin(), head.begin(), head.end());
      remaining -= nsta;
      mt -= nsta;
    }
    phrases.push_back(std::move(phrase));
  }
  std::reverse(phrases.begin(), phrases.end());
  return phrases;
}

using oracle::random_tree;

}  // namespace

TEST_CASE("ntok_for_length formula") {
  CHECK(ntok_for_length(6) == 3);
  CHECK(ntok_for_length(30) == 5);
  CHECK(ntok_for_length(100) == 8);
  CHECK(ntok_for_length(1) == 3);
  CHECK(ntok_for_length(47) == 7);
  CHECK_THROWS_AS(ntok_for_length(0), ParseError);

  int prev = 3;
  for (int seql = 1; seql <= 300; ++seql) {
    int n = ntok_for_length(seql);
    CHECK(n >= 3);
    CHECK(n <= 8);
    CHECK(n >= prev);  // monotone non-decreasing
    prev = n;
  }
}

TEST_CASE("segment_ngram small cases") {
  PhrasePlan p7 = segment_ngram(7);
  CHECK(p7.slot_width == 3);
  CHECK(p7.n_phrases == 3);
  CHECK(p7.at(0, 0) == 0);
  CHECK(p7.at(1, 2) == 5);
  CHECK(p7.at(2, 0) == 6);
  CHECK(p7.at(2, 1) == PhrasePlan::kPad);
  CHECK_FALSE(p7.slot_valid(2, 2));

  PhrasePlan p6 = segment_ngram(6);
  CHECK(p6.n_phrases == 2);
  for (int i = 0; i < p6.n_phrases; ++i)
    for (int j = 0; j < p6.slot_width; ++j) CHECK(p6.slot_valid(i, j));

  PhrasePlan p50 = segment_ngram(50);
  CHECK(p50.slot_width == 8);
  CHECK(p50.n_phrases == 7);
  int last_valid = 0;
  for (int j = 0; j < 8; ++j) last_valid += p50.slot_valid(6, j) ? 1 : 0;
  CHECK(last_valid == 2);
}

TEST_CASE("segment_ngram round-trip over random lengths") {
  Rng rng(101);
  for (int trial = 0; trial < 1000; ++trial) {
    int seql = rng.uniform_int(1, 256);
    PhrasePlan plan = segment_ngram(seql);
    CHECK(plan.slot_width >= 3);
    CHECK(plan.slot_width <= 8);
    // row-major traversal skipping pads reproduces 0..seql-1
    std::vector<int> seen;
    for (int i = 0; i < plan.n_phrases; ++i) {
      int row_valid = 0;
      for (int j = 0; j < plan.slot_width; ++j) {
        bool valid = plan.slot_valid(i, j);
        CHECK(valid == (plan.at(i, j) != PhrasePlan::kPad));
        if (valid) {
          seen.push_back(plan.at(i, j));
          ++row_valid;
        } else {
          CHECK(i == plan.n_phrases - 1);  // only the last row may pad
        }
      }
      CHECK(row_valid >= 1);
    }
    REQUIRE(static_cast<int>(seen.size()) == seql);
    for (int t = 0; t < seql; ++t) CHECK(seen[t] == t);
  }
}

TEST_CASE("parse_bracketed") {
  SUBCASE("single leaf") {
    auto t = parse_bracketed("(X a)");
    CHECK(t->label == "X");
    REQUIRE(t->children.size() == 1);
    CHECK(t->children[0]->is_leaf());
    CHECK(t->children[0]->token == "a");
    CHECK(t->leaf_count() == 1);
  }
  SUBCASE("three leaves in order") {
    auto t = parse_bracketed("(S (NP (D the) (N cat)) (V ran))");
    auto toks = t->leaf_tokens();
    REQUIRE(toks.size() == 3);
    CHECK(toks[0] == "the");
    CHECK(toks[1] == "cat");
    CHECK(toks[2] == "ran");
  }
  SUBCASE("errors carry offsets") {
    CHECK_THROWS_WITH_AS(parse_bracketed("(X a"), doctest::Contains("offset 0"), ParseError);
    CHECK_THROWS_WITH_AS(parse_bracketed("(X)"), doctest::Contains("empty constituent"),
                         ParseError);
    CHECK_THROWS_AS(parse_bracketed("()"), ParseError);
    CHECK_THROWS_WITH_AS(parse_bracketed("(X a) b"), doctest::Contains("trailing"), ParseError);
    CHECK_THROWS_AS(parse_bracketed("plain"), ParseError);
    CHECK_THROWS_AS(parse_bracketed("   "), ParseError);
    CHECK_THROWS_AS(parse_bracketed("((X) a)"), ParseError);
  }
  SUBCASE("serialize/parse round trip on random trees") {
    Rng rng(7);
    for (int trial = 0; trial < 1000; ++trial) {
      int counter = 0;
      auto t = random_tree(rng, rng.uniform_int(1, 12), &counter);
      std::string text = serialize_tree(*t);
      auto back = parse_bracketed(text);
      CHECK(serialize_tree(*back) == text);
      CHECK(back->leaf_tokens() == t->leaf_tokens());
    }
  }
}

TEST_CASE("extract_phrases_from_tree hand-traced cases") {
  SUBCASE("single leaf") {
    auto t = parse_bracketed("(X a)");
    auto phrases = extract_phrases_from_tree(*t, 3);
    REQUIRE(phrases.size() == 1);
    CHECK(phrases[0] == std::vector<int>{0});
  }
  SUBCASE("the cat / sat the mat") {
    auto t = parse_bracketed("(S (NP (D the) (N cat)) (VP (V sat) (NP (D the) (N mat))))");
    auto phrases = extract_phrases_from_tree(*t, 3);
    REQUIRE(phrases.size() == 2);
    CHECK(phrases[0] == std::vector<int>{0, 1});
    CHECK(phrases[1] == std::vector<int>{2, 3, 4});
  }
  SUBCASE("budget modes differ where the paper trace overflows") {
    auto t = parse_bracketed("(S (A a b) (B c d))");
    auto fixed = extract_phrases_from_tree(*t, 3, TreeBudget::fixed);
    REQUIRE(fixed.size() == 2);
    CHECK(fixed[0] == std::vector<int>{0, 1});
    CHECK(fixed[1] == std::vector<int>{2, 3});
    auto paper = extract_phrases_from_tree(*t, 3, TreeBudget::paper);
    REQUIRE(paper.size() == 1);
    CHECK(paper[0] == std::vector<int>{0, 1, 2, 3});  // nst + n - 1 = 4 tokens
  }
  SUBCASE("n below 2 rejected") {
    auto t = parse_bracketed("(X a)");
    CHECK_THROWS_AS(extract_phrases_from_tree(*t, 1), ParseError);
  }
}

TEST_CASE("extraction matches the independent trace oracle") {
  Rng rng(23);
  for (int trial = 0; trial < 400; ++trial) {
    int counter = 0;
    int leaves = rng.uniform_int(1, 12);
    auto t = random_tree(rng, leaves, &counter);
    int n = rng.uniform_int(2, 6);
    for (bool fixed : {true, false}) {
      auto got = extract_phrases_from_tree(*t, n, fixed ? TreeBudget::fixed : TreeBudget::paper);
      auto want = trace_extract(*t, n, fixed);
      CHECK(got == want);
    }
  }
}

TEST_CASE("extraction properties on random trees") {
  Rng rng(31);
  for (int trial = 0; trial < 300; ++trial) {
    int counter = 0;
    int leaves = rng.uniform_int(1, 40);
    auto t = random_tree(rng, leaves, &counter);
    int n = rng.uniform_int(2, 8);
    auto phrases = extract_phrases_from_tree(*t, n, TreeBudget::fixed);

    // In-order partition of the leaves.
    std::vector<int> flat;
    for (const auto& p : phrases) {
      CHECK_FALSE(p.empty());
      CHECK(static_cast<int>(p.size()) <= n);  // fixed budget honours the cap
      flat.insert(flat.end(), p.begin(), p.end());
    }
    REQUIRE(static_cast<int>(flat.size()) == leaves);
    for (int i = 0; i < leaves; ++i) CHECK(flat[i] == i);

    // Every chosen right-edge sub-tree lands inside one phrase, never split.
    std::vector<TraceStep> spans;
    trace_extract(*t, n, true, &spans);
    std::vector<int> phrase_of(leaves);
    for (size_t pi = 0; pi < phrases.size(); ++pi)
      for (int tok : phrases[pi]) phrase_of[tok] = static_cast<int>(pi);
    for (const auto& s : spans)
      for (int tok = s.begin + 1; tok < s.end; ++tok)
        CHECK(phrase_of[tok] == phrase_of[s.begin]);
  }
}

TEST_CASE("plan_from_tree") {
  SUBCASE("single leaf gives a 1x1 grid") {
    auto t = parse_bracketed("(X a)");
    PhrasePlan plan = plan_from_tree(*t, 1);
    CHECK(plan.n_phrases == 1);
    CHECK(plan.slot_width == 1);
    CHECK(plan.slot_valid(0, 0));
  }
  SUBCASE("slot width is the longest phrase") {
    auto t = parse_bracketed("(S (NP (D the) (N cat)) (VP (V sat) (NP (D the) (N mat))))");
    PhrasePlan plan = plan_from_tree(*t, 5);
    CHECK(plan.n_phrases == 2);
    CHECK(plan.slot_width == 3);
    CHECK(plan.slot_valid(0, 0));
    CHECK(plan.slot_valid(0, 1));
    CHECK_FALSE(plan.slot_valid(0, 2));  // [the cat] padded to width 3
    CHECK(plan.token_count() == 5);
  }
  SUBCASE("leaf count must match the sentence length") {
    auto t = parse_bracketed("(X a)");
    CHECK_THROWS_AS(plan_from_tree(*t, 2), ParseError);
  }
}

TEST_CASE("batch_plans") {
  SUBCASE("identical plans add no padding") {
    PhrasePlan p = segment_ngram(6);
    BatchedPlans b = batch_plans({p, p});
    CHECK(b.batch == 2);
    CHECK(b.max_phrases == p.n_phrases);
    CHECK(b.slot_width == p.slot_width);
    for (uint8_t v : b.slot_valid) CHECK(v == 1);
    for (uint8_t v : b.phrase_valid) CHECK(v == 1);
  }
  SUBCASE("shorter sentences get masked phrase rows") {
    BatchedPlans b = batch_plans({segment_ngram(6), segment_ngram(12)});
    CHECK(b.max_phrases == 4);
    CHECK(b.n_phrases[0] == 2);
    CHECK(b.phrase_valid[0 * 4 + 1] == 1);
    CHECK(b.phrase_valid[0 * 4 + 2] == 0);
    CHECK(b.phrase_valid[0 * 4 + 3] == 0);
    CHECK(b.phrase_valid[1 * 4 + 3] == 1);
  }
  SUBCASE("assignment is unchanged, only padding added") {
    Rng rng(47);
    std::vector<PhrasePlan> plans;
    for (int i = 0; i < 5; ++i) plans.push_back(segment_ngram(rng.uniform_int(1, 60)));
    BatchedPlans b = batch_plans(plans);
    for (int s = 0; s < b.batch; ++s) {
      const PhrasePlan& p = plans[s];
      for (int i = 0; i < b.max_phrases; ++i)
        for (int j = 0; j < b.slot_width; ++j) {
          int64_t at = (static_cast<int64_t>(s) * b.max_phrases + i) * b.slot_width + j;
          bool in_plan = i < p.n_phrases && j < p.slot_width && p.slot_valid(i, j);
          CHECK((b.slot_valid[at] != 0) == in_plan);
          if (in_plan) CHECK(b.index_grid[at] == p.at(i, j));
          else CHECK(b.index_grid[at] == PhrasePlan::kPad);
        }
    }
  }
  SUBCASE("empty input rejected") { CHECK_THROWS_AS(batch_plans({}), ParseError); }
}
