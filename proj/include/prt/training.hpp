// Data ingestion, token-count batching with gradient accumulation, the
// warmup/inverse-sqrt optimization loop, and checkpoint averaging.

#pragma once

#include <functional>
#include <string>
#include <unordered_map>
#include <vector>

#include "prt/model.hpp"

namespace prt {

// Input-data problems (misaligned files, malformed lines); distinct from
// runtime failures so the CLI can map exit codes.
class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// --- vocabulary ----------------------------------------------------------------

struct Vocab {
  std::vector<std::string> words;  // non-reserved; id = index + kReservedIds
  std::unordered_map<std::string, int> index;

  int size() const { return static_cast<int>(words.size()) + kReservedIds; }
  int id_of(const std::string& token) const;
  std::string token_of(int id) const;

  std::vector<int> encode(const std::vector<std::string>& tokens) const;
  std::vector<std::string> decode(const std::vector<int>& ids) const;

  // Frequency-ordered, ties by first occurrence; max_size caps the total
  // size including the reserved ids.
  static Vocab build(const std::vector<std::vector<std::string>>& corpus, int max_size);

  void save(const std::string& path) const;
  static Vocab load(const std::string& path);
};

// --- corpus -----------------------------------------------------------------------

struct SentencePair {
  std::vector<std::string> src;
  std::vector<std::string> tgt;
  std::string tree_text;  // empty unless a tree file was given
};

// Line-aligned parallel files; pairs with an empty side or a side longer
// than max_len are dropped. Trees, when given, must be line-aligned and
// leaf-match their source lines.
std::vector<SentencePair> load_parallel(const std::string& src_path,
                                        const std::string& tgt_path,
                                        const std::string& tree_path, int max_len);

std::vector<std::string> split_tokens(const std::string& line);

// Numeric form of a pair: target carries a trailing EOS, the phrase plan is
// precomputed under the model's segmentation mode.
struct EncodedPair {
  std::vector<int> src;
  std::vector<int> tgt;  // gold tokens + EOS
  PhrasePlan plan;
};

std::vector<EncodedPair> encode_pairs(const std::vector<SentencePair>& pairs,
                                      const Vocab& src_vocab, const Vocab& tgt_vocab,
                                      const ModelConfig& cfg);

// --- batching ----------------------------------------------------------------------

struct TrainConfig {
  int warmup = 400;
  int tokens_per_batch = 1000;  // target tokens per effective batch
  int accum = 1;                // micro-batches per optimizer update
  int max_len = 256;
  double label_smoothing = 0.1;
  int total_steps = 1000;
  int checkpoint_interval = 1500;
  int log_interval = 50;
  uint64_t seed = 1;
};

// One epoch of batches: outer = effective batches (one optimizer update),
// inner = micro-batches of pair indices. Shuffle is keyed by (seed, epoch);
// micro-batches are length-bucketed; every effective batch except possibly
// the last carries at least tokens_per_batch target tokens.
std::vector<std::vector<std::vector<int>>> make_batches(const std::vector<int>& target_lengths,
                                                        int tokens_per_batch, int accum,
                                                        uint64_t seed, int epoch);

struct MicroBatch {
  TokenBatch src;
  TokenBatch tgt;  // gold (with EOS), padded
  BatchedPlans plans;
  bool has_plans = false;
  int64_t target_tokens = 0;
};

MicroBatch assemble_micro(const std::vector<EncodedPair>& pairs, const std::vector<int>& idxs,
                          bool phrase_repr);

// --- optimization ---------------------------------------------------------------------

// lr = model_dim^-0.5 * min(step^-0.5, step * warmup^-1.5); step >= 1.
double lr_at_step(int64_t step, int model_dim, int warmup);

// Per-token mean of cross-entropy against the smoothed target distribution
// ((1-eps) on gold, eps/(V-1) elsewhere); padded positions excluded.
Tensor label_smoothed_loss(const Tensor& logits, const std::vector<int>& targets,
                           double smoothing, const std::vector<uint8_t>& pad_mask);

// Sum over non-pad positions plus the count, for loss normalization across
// accumulated micro-batches.
Tensor label_smoothed_sum(const Tensor& logits, const std::vector<int>& targets,
                          double smoothing, const std::vector<uint8_t>& pad_mask,
                          int64_t* token_count);

class Adam {
 public:
  Adam(Model& model, double beta1 = 0.9, double beta2 = 0.98, double epsilon = 1e-9);

  void zero_grad();
  void step(double lr);
  int64_t steps_taken() const { return t_; }

  // Optimizer state serialization for checkpoints.
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> export_state() const;
  void import_state(
      const std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>>& state);

 private:
  struct Slot {
    std::string name;
    Tensor param;
    std::vector<double> m;
    std::vector<double> v;
  };
  std::vector<Slot> slots_;
  double beta1_, beta2_, eps_;
  int64_t t_ = 0;
};

struct TrainMetrics {
  int64_t step = 0;
  double loss = 0.0;       // per-token
  double token_accuracy = 0.0;
  double lr = 0.0;
  double tokens_per_sec = 0.0;
  int64_t target_tokens = 0;
};

// One optimizer update over the micro-batches of an effective batch.
// Gradients are scaled so accumulation matches a single large batch.
// A non-finite loss aborts with a diagnostic naming the batch.
TrainMetrics train_step(Model& model, Adam& optimizer, const std::vector<MicroBatch>& micros,
                        int64_t step_number, const TrainConfig& cfg);

struct TrainHooks {
  std::function<void(const TrainMetrics&)> on_metrics;   // every log_interval steps
  std::function<void(Model&, Adam&, int64_t)> on_checkpoint;
  std::function<bool(Model&, int64_t)> should_stop;      // polled at log points
};

// Runs up to cfg.total_steps optimizer updates over epochs of the corpus.
void train_loop(Model& model, Adam& optimizer, const std::vector<EncodedPair>& pairs,
                const TrainConfig& cfg, const TrainHooks& hooks);

// --- checkpoint averaging -----------------------------------------------------------

// Element-wise mean of the model tensors of the given checkpoints (optimizer
// state is dropped). Config echoes and shapes must agree; summation order is
// canonicalized so the result is independent of argument order.
CheckpointData average_checkpoints(const std::vector<std::string>& paths);

}  // namespace prt
