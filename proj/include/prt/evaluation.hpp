// Tokenized case-sensitive corpus BLEU, per-length-bucket reports, and
// contrastive-pair accuracy.

#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "prt/training.hpp"

namespace prt {

struct BleuReport {
  double score = 0.0;            // [0, 100]
  double precisions[4] = {0, 0, 0, 0};
  double brevity_penalty = 1.0;
  int64_t candidate_tokens = 0;
  int64_t reference_tokens = 0;
};

// Corpus-level 4-gram clipped precision with brevity penalty, single
// reference, case-sensitive token identity. Zero if any precision is zero.
BleuReport bleu(const std::vector<std::vector<std::string>>& candidates,
                const std::vector<std::vector<std::string>>& references);

struct LengthBucketReport {
  struct Bucket {
    int lo = 0;                  // inclusive
    std::optional<int> hi;       // exclusive; empty = unbounded
    int sentences = 0;
    std::optional<BleuReport> bleu;  // absent for empty buckets
  };
  std::vector<Bucket> buckets;
};

// Buckets sentence pairs by source length at the given strictly increasing
// boundaries and reports per-bucket corpus BLEU.
LengthBucketReport length_buckets(const std::vector<std::vector<std::string>>& sources,
                                  const std::vector<std::vector<std::string>>& hypotheses,
                                  const std::vector<std::vector<std::string>>& references,
                                  const std::vector<int>& boundaries);

struct ContrastivePair {
  std::vector<std::string> source;
  std::vector<std::string> reference;
  std::vector<std::string> contrastive;
  std::optional<int> distance;  // e.g. subject-verb token distance
};

// Tab-separated: source, reference, contrastive, optional distance.
std::vector<ContrastivePair> load_contrastive(const std::string& path);

using SequenceScorer =
    std::function<double(const std::vector<std::string>& source,
                         const std::vector<std::string>& translation)>;

struct ContrastiveReport {
  int64_t total = 0;
  int64_t correct = 0;  // score(reference) strictly greater
  double accuracy = 0.0;
  struct DistanceRow {
    std::optional<int> distance;  // empty = unannotated
    int64_t total = 0;
    int64_t correct = 0;
  };
  std::vector<DistanceRow> by_distance;  // sorted, unannotated last
};

// Ties count as incorrect. Scorer failures abort naming the pair.
ContrastiveReport contrastive_accuracy(const SequenceScorer& scorer,
                                       const std::vector<ContrastivePair>& pairs);

}  // namespace prt
