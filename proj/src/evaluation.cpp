#include "prt/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <unordered_map>

namespace prt {

namespace {

// n-gram -> count, keyed by joined tokens ('\x1f' cannot appear in tokens
// read from whitespace-split lines).
std::unordered_map<std::string, int> ngram_counts(const std::vector<std::string>& tokens, int n) {
  std::unordered_map<std::string, int> counts;
  if (static_cast<int>(tokens.size()) < n) return counts;
  for (size_t i = 0; i + n <= tokens.size(); ++i) {
    std::string key = tokens[i];
    for (int j = 1; j < n; ++j) {
      key += '\x1f';
      key += tokens[i + j];
    }
    counts[key]++;
  }
  return counts;
}

}  // namespace

BleuReport bleu(const std::vector<std::vector<std::string>>& candidates,
                const std::vector<std::vector<std::string>>& references) {
  if (candidates.empty() || candidates.size() != references.size())
    throw DataError("bleu: candidate and reference corpora must be non-empty and aligned (" +
                    std::to_string(candidates.size()) + " vs " +
                    std::to_string(references.size()) + " lines)");

  int64_t matched[4] = {0, 0, 0, 0};
  int64_t total[4] = {0, 0, 0, 0};
  BleuReport rep;
  for (size_t s = 0; s < candidates.size(); ++s) {
    const auto& cand = candidates[s];
    const auto& ref = references[s];
    rep.candidate_tokens += static_cast<int64_t>(cand.size());
    rep.reference_tokens += static_cast<int64_t>(ref.size());
    for (int n = 1; n <= 4; ++n) {
      auto cand_counts = ngram_counts(cand, n);
      auto ref_counts = ngram_counts(ref, n);
      for (const auto& [gram, count] : cand_counts) {
        total[n - 1] += count;
        auto it = ref_counts.find(gram);
        if (it != ref_counts.end()) matched[n - 1] += std::min(count, it->second);
      }
    }
  }

  bool any_zero = false;
  double log_sum = 0.0;
  for (int n = 0; n < 4; ++n) {
    rep.precisions[n] = total[n] > 0 ? static_cast<double>(matched[n]) / total[n] : 0.0;
    if (matched[n] == 0) any_zero = true;
    else log_sum += std::log(rep.precisions[n]);
  }
  rep.brevity_penalty =
      rep.candidate_tokens < rep.reference_tokens && rep.candidate_tokens > 0
          ? std::exp(1.0 - static_cast<double>(rep.reference_tokens) / rep.candidate_tokens)
          : 1.0;
  rep.score = any_zero || rep.candidate_tokens == 0
                  ? 0.0
                  : rep.brevity_penalty * std::exp(log_sum / 4.0) * 100.0;
  return rep;
}

LengthBucketReport length_buckets(const std::vector<std::vector<std::string>>& sources,
                                  const std::vector<std::vector<std::string>>& hypotheses,
                                  const std::vector<std::vector<std::string>>& references,
                                  const std::vector<int>& boundaries) {
  if (sources.size() != hypotheses.size() || sources.size() != references.size())
    throw DataError("length_buckets: misaligned inputs");
  for (size_t i = 1; i < boundaries.size(); ++i)
    if (boundaries[i] <= boundaries[i - 1])
      throw DataError("length_buckets: boundaries must be strictly increasing");

  // Boundaries b1 < b2 < ... yield buckets [0,b1), [b1,b2), ..., [bn,inf).
  LengthBucketReport rep;
  std::vector<std::vector<size_t>> members(boundaries.size() + 1);
  for (size_t s = 0; s < sources.size(); ++s) {
    int len = static_cast<int>(sources[s].size());
    size_t b = 0;
    while (b < boundaries.size() && len >= boundaries[b]) ++b;
    members[b].push_back(s);
  }
  for (size_t b = 0; b < members.size(); ++b) {
    LengthBucketReport::Bucket bucket;
    bucket.lo = b == 0 ? 0 : boundaries[b - 1];
    if (b < boundaries.size()) bucket.hi = boundaries[b];
    bucket.sentences = static_cast<int>(members[b].size());
    if (!members[b].empty()) {
      std::vector<std::vector<std::string>> hyp, ref;
      for (size_t s : members[b]) {
        hyp.push_back(hypotheses[s]);
        ref.push_back(references[s]);
      }
      bucket.bleu = bleu(hyp, ref);
    }
    rep.buckets.push_back(std::move(bucket));
  }
  return rep;
}

std::vector<ContrastivePair> load_contrastive(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open contrastive file: " + path);
  std::vector<ContrastivePair> pairs;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    std::vector<std::string> fields;
    size_t start = 0;
    while (true) {
      size_t tab = line.find('\t', start);
      fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
      if (tab == std::string::npos) break;
      start = tab + 1;
    }
    if (fields.size() < 3 || fields.size() > 4)
      throw DataError("line " + std::to_string(lineno) +
                      ": expected source<TAB>reference<TAB>contrastive[<TAB>distance]");
    ContrastivePair p;
    p.source = split_tokens(fields[0]);
    p.reference = split_tokens(fields[1]);
    p.contrastive = split_tokens(fields[2]);
    if (fields.size() == 4 && !fields[3].empty()) {
      try {
        p.distance = std::stoi(fields[3]);
      } catch (const std::exception&) {
        throw DataError("line " + std::to_string(lineno) + ": bad distance '" + fields[3] + "'");
      }
    }
    if (p.reference == p.contrastive)
      throw DataError("line " + std::to_string(lineno) +
                      ": reference and contrastive translations are identical");
    pairs.push_back(std::move(p));
  }
  return pairs;
}

ContrastiveReport contrastive_accuracy(const SequenceScorer& scorer,
                                       const std::vector<ContrastivePair>& pairs) {
  ContrastiveReport rep;
  std::map<int, std::pair<int64_t, int64_t>> by_distance;  // distance -> (total, correct)
  std::pair<int64_t, int64_t> unannotated{0, 0};
  for (size_t i = 0; i < pairs.size(); ++i) {
    const auto& p = pairs[i];
    double ref_score, con_score;
    try {
      ref_score = scorer(p.source, p.reference);
      con_score = scorer(p.source, p.contrastive);
    } catch (const std::exception& e) {
      throw std::runtime_error("contrastive pair " + std::to_string(i + 1) +
                               " failed to score: " + e.what());
    }
    bool correct = ref_score > con_score;  // ties are incorrect
    rep.total++;
    if (correct) rep.correct++;
    if (p.distance) {
      auto& row = by_distance[*p.distance];
      row.first++;
      if (correct) row.second++;
    } else {
      unannotated.first++;
      if (correct) unannotated.second++;
    }
  }
  rep.accuracy = rep.total > 0 ? static_cast<double>(rep.correct) / rep.total : 0.0;
  for (const auto& [d, counts] : by_distance)
    rep.by_distance.push_back({d, counts.first, counts.second});
  if (unannotated.first > 0)
    rep.by_distance.push_back({std::nullopt, unannotated.first, unannotated.second});
  return rep;
}

}  // namespace prt
