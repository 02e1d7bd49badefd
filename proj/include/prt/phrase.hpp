// Attentive phrase representation generation: a pooled glance over each
// phrase's token vectors, a two-layer scorer against that summary, softmax
// weights, and the weighted combination; plus the transparent-attention
// mixture of per-level phrase sequences for decoder layers.

#pragma once

#include "prt/nn.hpp"
#include "prt/segmentation.hpp"
#include "prt/tensor.hpp"

namespace prt {

enum class GlanceMode { mean, max };

GlanceMode glance_mode_from_string(const std::string& s);
std::string to_string(GlanceMode m);

// Token scorer of one encoder level: 2*model-dim -> hidden -> 1. Strictly
// smaller than one multi-head attention block at equal width.
struct PhraseScorerParams {
  LinearParams w1;  // [2*dim x hidden]
  LinearParams w2;  // [hidden x 1]

  int64_t count() const { return w1.count() + w2.count(); }
};

PhraseScorerParams make_phrase_scorer(int model_dim, int hidden_dim, Rng& rng);

// Trainable mixing logits, one column per decoder layer over the phrase
// levels (embedding level included).
struct TransparentWeights {
  Tensor logits;  // [n_levels x n_decoder_layers]

  int n_levels() const { return logits.shape()[0]; }
  int n_decoder_layers() const { return logits.shape()[1]; }
};

TransparentWeights make_transparent_weights(int n_levels, int n_decoder_layers);

// --- single-phrase operations (token_vecs: [m x dim]) ----------------------

// Pooled summary over valid slots; padding slots never participate.
Tensor glance(const Tensor& token_vecs, const std::vector<uint8_t>& slot_mask, GlanceMode mode);

// s_i = w2 . sigmoid(w1 [token_i | summary] + b1) + b2, one score per slot.
Tensor token_scores(const Tensor& token_vecs, const Tensor& summary,
                    const PhraseScorerParams& params);

// Softmax over valid slots; padding slots get exactly zero.
Tensor phrase_weights(const Tensor& scores, const std::vector<uint8_t>& slot_mask);

// Weighted combination of token vectors.
Tensor phrase_vector(const Tensor& token_vecs, const Tensor& probs);

// Full per-sentence pipeline: one representation row per phrase of the plan.
// With attentive = false the glance summary itself is the phrase vector.
Tensor phrase_sequence_for_level(const Tensor& level_input, const PhrasePlan& plan,
                                 const PhraseScorerParams* params, GlanceMode mode,
                                 bool attentive = true);

// Batched pipeline over [batch x len x dim] inputs and a batched grid;
// fully padded phrase rows produce zero rows (masked downstream).
Tensor phrase_sequences_batched(const Tensor& level_input, const BatchedPlans& plans,
                                const PhraseScorerParams* params, GlanceMode mode,
                                bool attentive = true);

// Transparent attention: softmax(logits[:, layer]) mixture of the level
// sequences, which must share one shape.
Tensor transparent_combine(const std::vector<Tensor>& levels, int decoder_layer,
                           const TransparentWeights& tw);

}  // namespace prt
