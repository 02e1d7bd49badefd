// The phrase-representation transformer: attentive combination sublayer,
// modified encoder/decoder layers, full model forward, beam-search decoding
// and the checkpoint format. The baseline transformer is the degenerate
// configuration with every phrase flag off.

#pragma once

#include <functional>
#include <map>
#include <optional>

#include "prt/config.hpp"
#include "prt/nn.hpp"
#include "prt/phrase.hpp"
#include "prt/segmentation.hpp"

namespace prt {

// Reserved vocabulary ids, shared by every file format.
constexpr int kPadId = 0;
constexpr int kBosId = 1;
constexpr int kEosId = 2;
constexpr int kUnkId = 3;
constexpr int kReservedIds = 4;

enum class SegmentationMode { ngram, tree };
enum class PositionalKind { sinusoidal, learned };
// Which representations feed phrase generation: every layer output plus the
// embedding level (enc_layers + 1 sequences), or strictly the layer inputs
// (enc_layers sequences).
enum class PhraseLevelSources { outputs_and_embedding, layer_inputs };

SegmentationMode segmentation_mode_from_string(const std::string& s);
std::string to_string(SegmentationMode m);

struct ModelConfig {
  int model_dim = 64;
  int ffn_dim = 256;
  int n_heads = 4;
  int enc_layers = 2;
  int dec_layers = 2;
  double dropout = 0.1;
  int src_vocab = 0;
  int tgt_vocab = 0;
  GlanceMode glance = GlanceMode::max;
  SegmentationMode segmentation = SegmentationMode::ngram;
  bool phrase_repr = true;       // off = baseline transformer
  bool attentive = true;         // scored combination vs pooling only
  bool transparent = true;       // per-decoder-layer mixture of phrase levels
  bool tie_classifier = true;
  PositionalKind positional = PositionalKind::sinusoidal;
  PhraseLevelSources level_sources = PhraseLevelSources::outputs_and_embedding;
  TreeBudget tree_budget = TreeBudget::fixed;
  int max_positions = 512;

  int d_k() const { return model_dim / n_heads; }
  int n_phrase_levels() const {
    if (!phrase_repr) return 0;
    return level_sources == PhraseLevelSources::outputs_and_embedding ? enc_layers + 1
                                                                      : enc_layers;
  }
  // Scorer hidden width; the paper leaves it open, model_dim keeps the
  // scorer smaller than one multi-head block.
  int scorer_hidden() const { return model_dim; }

  void validate() const;  // throws ConfigError listing every problem
  KeyValueConfig to_key_values() const;
  static ModelConfig from_key_values(const KeyValueConfig& kv);
};

// Eq.-style attentive combination parameters: cross-attention over phrases
// plus the two-layer gate that folds the result back into the token sequence.
struct CombinerParams {
  MultiHeadParams mha;
  LinearParams gate_hidden;  // [2*dim x dim]
  LinearParams gate_out;     // [dim x dim]
  LayerNormParams norm;

  int64_t count() const {
    return mha.count() + gate_hidden.count() + gate_out.count() + norm.count();
  }
};

struct EncoderLayerParams {
  CombinerParams combiner;  // present only when phrase_repr
  MultiHeadParams self_attn;
  LayerNormParams self_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

struct DecoderLayerParams {
  MultiHeadParams self_attn;
  LayerNormParams self_norm;
  CombinerParams combiner;  // phrase cross-attention, only when phrase_repr
  MultiHeadParams cross_attn;
  LayerNormParams cross_norm;
  FeedForwardParams ffn;
  LayerNormParams ffn_norm;
};

struct ModelParams {
  Tensor src_embedding;  // [src_vocab x dim]
  Tensor tgt_embedding;  // [tgt_vocab x dim]
  Tensor src_positions;  // constant when sinusoidal, trainable when learned
  Tensor tgt_positions;
  std::vector<EncoderLayerParams> encoder;
  std::vector<DecoderLayerParams> decoder;
  std::vector<PhraseScorerParams> scorers;  // one per phrase level
  TransparentWeights ta;                    // defined only when transparent
  Tensor classifier;                        // defined only when untied
};

ModelParams init_params(const ModelConfig& cfg, uint64_t seed);

// Visits every trainable tensor in a fixed order under its canonical name.
void for_each_parameter(ModelParams& params, const ModelConfig& cfg,
                        const std::function<void(const std::string&, Tensor&)>& fn);

// Same walk without materializing tensors; name/shape pairs only. Lets
// parameter accounting run at full paper scale without allocating weights.
void for_each_parameter_shape(const ModelConfig& cfg,
                              const std::function<void(const std::string&, const Shape&)>& fn);

struct ParameterCounts {
  std::vector<std::pair<std::string, int64_t>> groups;
  int64_t total = 0;

  int64_t group(const std::string& name) const;
};

ParameterCounts count_parameters(ModelParams& params, const ModelConfig& cfg);
// Structural variant over for_each_parameter_shape.
ParameterCounts count_parameters(const ModelConfig& cfg);

// --- batched inputs ---------------------------------------------------------

struct TokenBatch {
  int batch = 0;
  int len = 0;
  std::vector<int> ids;                     // [batch x len], kPadId when padded
  std::vector<std::vector<uint8_t>> valid;  // per sentence

  static TokenBatch from_sentences(const std::vector<std::vector<int>>& sentences);
};

// --- sublayers (exposed for direct testing) ----------------------------------

// out = layer_norm(x + gate(x, MHA(q=x, k/v=phrases))), Eq.-style combination
// with x as queries so the result stays aligned with the token sequence.
Tensor attentive_combination(const Tensor& x, const Tensor& phrases,
                             const AttentionMask& phrase_mask, const CombinerParams& params,
                             double dropout_rate, bool train, Rng& rng);

// Phrase cross-attention (when phrases given), self-attention, feed-forward,
// in that order, each with residual + layer norm.
Tensor encoder_layer_forward(const Tensor& x, const AttentionMask& token_mask,
                             const Tensor* phrases, const AttentionMask& phrase_mask,
                             const EncoderLayerParams& params, double dropout_rate, bool train,
                             Rng& rng);

// Self-attention, phrase cross-attention (when given), token cross-attention,
// feed-forward.
Tensor decoder_layer_forward(const Tensor& y, const AttentionMask& self_mask,
                             const Tensor& memory, const AttentionMask& memory_mask,
                             const Tensor* phrases, const AttentionMask& phrase_mask,
                             const DecoderLayerParams& params, double dropout_rate, bool train,
                             Rng& rng);

// --- the model ----------------------------------------------------------------

struct EncodeResult {
  std::vector<Tensor> levels;         // enc_layers + 1 token representations
  std::vector<Tensor> phrase_levels;  // phrase sequences (empty when PR off)
  AttentionMask memory_mask;
  AttentionMask phrase_mask;

  const Tensor& memory() const { return levels.back(); }
};

struct Hypothesis {
  std::vector<int> tokens;  // without BOS/EOS
  double score = 0.0;       // total log-probability (EOS included when terminated)
  bool terminated = false;
};

enum class LengthHandling { none, average_logprob };

class Model {
 public:
  Model(ModelConfig cfg, uint64_t seed);
  Model(ModelConfig cfg, ModelParams params, uint64_t seed = 0);

  const ModelConfig& config() const { return cfg_; }
  ModelParams& params() { return params_; }

  void set_train(bool train) { train_ = train; }
  bool is_train() const { return train_; }
  Rng& rng() { return rng_; }

  // Builds the phrase plan batch for a source batch under the configured
  // segmentation mode; trees required (aligned per sentence) in tree mode.
  BatchedPlans plan_batch(const TokenBatch& src,
                          const std::vector<const ParseTree*>* trees = nullptr) const;

  EncodeResult encode(const TokenBatch& src, const BatchedPlans* plans);

  // Teacher-forced logits [batch x tgt_len x tgt_vocab]; targets carry EOS,
  // the BOS shift happens internally.
  Tensor forward_train(const TokenBatch& src, const TokenBatch& tgt,
                       const BatchedPlans* plans);

  // Total log-probability of the given target tokens (no length
  // normalization, no implicit EOS term).
  double score_sequence(const std::vector<int>& src_ids, const std::vector<int>& tgt_ids,
                        const PhrasePlan* plan = nullptr);

  Hypothesis greedy_decode(const std::vector<int>& src_ids, int max_len,
                           const PhrasePlan* plan = nullptr);
  Hypothesis beam_search(const std::vector<int>& src_ids, int beam_size, int max_len,
                         LengthHandling length_handling = LengthHandling::none,
                         const PhrasePlan* plan = nullptr);

 private:
  // Decode paths pass train = false explicitly so frozen-parameter inference
  // never mutates model state and stays concurrently callable.
  EncodeResult encode_with(const TokenBatch& src, const BatchedPlans* plans, bool train);
  Tensor decoder_logits(const EncodeResult& enc, const TokenBatch& tgt_in, bool train);
  std::vector<Tensor> decoder_phrase_inputs(const EncodeResult& enc);

  ModelConfig cfg_;
  ModelParams params_;
  Rng rng_;
  bool train_ = false;
};

// --- checkpoints ----------------------------------------------------------------

// On-disk snapshot: magic, format version, config echo, named f32 tensors.
// Documented byte-exactly in the README.
struct CheckpointData {
  std::string config_text;
  // Insertion-ordered (name, shape, values).
  std::vector<std::tuple<std::string, Shape, std::vector<double>>> tensors;

  const std::vector<double>* find(const std::string& name) const;
};

void write_checkpoint_raw(const std::string& path, const CheckpointData& data);
CheckpointData read_checkpoint_raw(const std::string& path);

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// extra_state carries optimizer tensors under reserved "opt." names.
void save_checkpoint(const std::string& path, ModelParams& params, const ModelConfig& cfg,
                     const std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>>*
                         extra_state = nullptr);

struct LoadedCheckpoint {
  ModelConfig config;
  ModelParams params;
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> extra_state;
};

LoadedCheckpoint load_checkpoint(const std::string& path);

}  // namespace prt
