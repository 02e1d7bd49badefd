#include "prt/phrase.hpp"

namespace prt {

GlanceMode glance_mode_from_string(const std::string& s) {
  if (s == "mean") return GlanceMode::mean;
  if (s == "max") return GlanceMode::max;
  throw TensorError("unknown glance mode: " + s);
}

std::string to_string(GlanceMode m) { return m == GlanceMode::mean ? "mean" : "max"; }

PhraseScorerParams make_phrase_scorer(int model_dim, int hidden_dim, Rng& rng) {
  PhraseScorerParams p;
  p.w1 = make_linear(2 * model_dim, hidden_dim, rng);
  p.w2 = make_linear(hidden_dim, 1, rng);
  return p;
}

TransparentWeights make_transparent_weights(int n_levels, int n_decoder_layers) {
  // Zero logits start every decoder layer on a uniform mixture.
  TransparentWeights tw;
  tw.logits = parameter_zeros({n_levels, n_decoder_layers});
  return tw;
}

Tensor glance(const Tensor& token_vecs, const std::vector<uint8_t>& slot_mask, GlanceMode mode) {
  if (token_vecs.rank() != 2)
    throw TensorError("glance: expected [slots x dim], got " + shape_str(token_vecs.shape()));
  return mode == GlanceMode::mean ? masked_mean(token_vecs, slot_mask)
                                  : masked_max(token_vecs, slot_mask);
}

Tensor token_scores(const Tensor& token_vecs, const Tensor& summary,
                    const PhraseScorerParams& params) {
  if (token_vecs.rank() != 2 || summary.rank() != 1)
    throw TensorError("token_scores: expected [slots x dim] tokens and [dim] summary");
  int m = token_vecs.shape()[0];
  int d = token_vecs.shape()[1];
  if (summary.shape()[0] != d)
    throw TensorError("token_scores: summary width " + shape_str(summary.shape()) +
                      " does not match tokens " + shape_str(token_vecs.shape()));
  Tensor tiled = expand_axis(reshape(summary, {1, d}), 0, m);
  Tensor cat = concat_last(token_vecs, tiled);  // [m x 2d]
  Tensor hidden = sigmoid(linear(cat, params.w1));
  Tensor scores = linear(hidden, params.w2);  // [m x 1]
  return reshape(scores, {m});
}

Tensor phrase_weights(const Tensor& scores, const std::vector<uint8_t>& slot_mask) {
  if (scores.rank() != 1) throw TensorError("phrase_weights: expected [slots]");
  int m = scores.shape()[0];
  if (static_cast<int>(slot_mask.size()) != m)
    throw TensorError("phrase_weights: mask size mismatch");
  AttentionMask mask;
  mask.kind = MaskKind::padding;
  mask.shape = {m};
  mask.valid = slot_mask;
  return masked_softmax(scores, mask);
}

Tensor phrase_vector(const Tensor& token_vecs, const Tensor& probs) {
  if (token_vecs.rank() != 2 || probs.rank() != 1)
    throw TensorError("phrase_vector: expected [slots x dim] and [slots]");
  int m = token_vecs.shape()[0];
  Tensor weighted = mul(token_vecs, reshape(probs, {m, 1}));
  return sum_axis(weighted, 0);
}

Tensor phrase_sequence_for_level(const Tensor& level_input, const PhrasePlan& plan,
                                 const PhraseScorerParams* params, GlanceMode mode,
                                 bool attentive) {
  if (level_input.rank() != 2)
    throw TensorError("phrase_sequence_for_level: expected [seql x dim]");
  int seql = level_input.shape()[0];
  if (plan.token_count() != seql)
    throw TensorError("phrase_sequence_for_level: plan covers " +
                      std::to_string(plan.token_count()) + " tokens, input has " +
                      std::to_string(seql));
  if (attentive && params == nullptr)
    throw TensorError("phrase_sequence_for_level: attentive mode needs scorer params");

  BatchedPlans single = batch_plans({plan});
  Tensor batched = reshape(level_input, {1, seql, level_input.shape()[1]});
  Tensor out = phrase_sequences_batched(batched, single, params, mode, attentive);
  return reshape(out, {plan.n_phrases, level_input.shape()[1]});
}

Tensor phrase_sequences_batched(const Tensor& level_input, const BatchedPlans& plans,
                                const PhraseScorerParams* params, GlanceMode mode,
                                bool attentive) {
  if (level_input.rank() != 3)
    throw TensorError("phrase_sequences_batched: expected [batch x len x dim]");
  int B = level_input.shape()[0];
  int d = level_input.shape()[2];
  if (B != plans.batch) throw TensorError("phrase_sequences_batched: batch mismatch");
  int P = plans.max_phrases;
  int W = plans.slot_width;

  Tensor slots = gather_slots(level_input, plans.index_grid, B, P, W);  // [B x P x W x d]
  Tensor summary = mode == GlanceMode::mean
                       ? masked_mean(slots, plans.slot_valid, EmptyRowPolicy::zero)
                       : masked_max(slots, plans.slot_valid, EmptyRowPolicy::zero);
  if (!attentive) return summary;  // pooling-only phrase representation

  Tensor tiled = expand_axis(reshape(summary, {B, P, 1, d}), 2, W);
  Tensor cat = concat_last(slots, tiled);                       // [B x P x W x 2d]
  Tensor hidden = sigmoid(linear(cat, params->w1));             // [B x P x W x h]
  Tensor scores = reshape(linear(hidden, params->w2), {B, P, W});

  AttentionMask slot_mask;
  slot_mask.kind = MaskKind::padding;
  slot_mask.shape = {B, P, W};
  slot_mask.valid = plans.slot_valid;
  Tensor probs = masked_softmax(scores, slot_mask, EmptyRowPolicy::zero);

  Tensor weighted = mul(slots, reshape(probs, {B, P, W, 1}));
  return sum_axis(weighted, 2);  // [B x P x d]
}

Tensor transparent_combine(const std::vector<Tensor>& levels, int decoder_layer,
                           const TransparentWeights& tw) {
  if (levels.empty()) throw TensorError("transparent_combine: no levels");
  if (static_cast<int>(levels.size()) != tw.n_levels())
    throw TensorError("transparent_combine: " + std::to_string(levels.size()) +
                      " levels for logits with " + std::to_string(tw.n_levels()) + " rows");
  if (decoder_layer < 0 || decoder_layer >= tw.n_decoder_layers())
    throw TensorError("transparent_combine: decoder layer out of range");
  for (const auto& l : levels)
    if (l.shape() != levels[0].shape())
      throw TensorError("transparent_combine: level shapes disagree, " +
                        shape_str(l.shape()) + " vs " + shape_str(levels[0].shape()));

  int n = tw.n_levels();
  Tensor col = reshape(narrow(tw.logits, 1, decoder_layer, 1), {n});
  Tensor weights = masked_softmax(col, AttentionMask::none());
  Tensor out;
  for (int i = 0; i < n; ++i) {
    Tensor term = mul(levels[i], narrow(weights, 0, i, 1));
    out = i == 0 ? term : add(out, term);
  }
  return out;
}

}  // namespace prt
