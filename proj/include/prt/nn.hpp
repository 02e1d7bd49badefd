// Standard transformer building blocks on top of the tensor substrate:
// linear maps, layer norm, embeddings with positional signal, multi-head
// attention and the position-wise feed-forward network.

#pragma once

#include "prt/tensor.hpp"

namespace prt {

struct LinearParams {
  Tensor weight;  // [in x out]
  Tensor bias;    // [out]

  int64_t count() const { return weight.size() + bias.size(); }
};

// y = x W + b over the last axis.
Tensor linear(const Tensor& x, const LinearParams& p);

struct LayerNormParams {
  Tensor gain;
  Tensor bias;

  int64_t count() const { return gain.size() + bias.size(); }
};

Tensor layer_norm(const Tensor& x, const LayerNormParams& p, double epsilon = 1e-6);

struct MultiHeadParams {
  LinearParams w_q, w_k, w_v, w_o;  // model-dim -> model-dim
  int n_heads = 1;
  int d_k = 0;  // per-head width, model-dim / n_heads

  int64_t count() const { return w_q.count() + w_k.count() + w_v.count() + w_o.count(); }
};

struct FeedForwardParams {
  LinearParams w1;  // model-dim -> ffn-dim
  LinearParams w2;  // ffn-dim -> model-dim

  int64_t count() const { return w1.count() + w2.count(); }
};

// Parameter construction; all weights drawn from one rng stream in a fixed
// order so a seed pins the whole parameter set.
LinearParams make_linear(int in, int out, Rng& rng);
LayerNormParams make_layer_norm(int dim);
MultiHeadParams make_multi_head(int model_dim, int n_heads, Rng& rng);
FeedForwardParams make_feed_forward(int model_dim, int ffn_dim, Rng& rng);

// Sinusoidal position table [max_positions x dim]; not trainable.
Tensor sinusoidal_positions(int max_positions, int dim);

// output[i] = embedding[id_i] * scale + positions[i]; ids shaped [B x L] (or
// [L]); positions provides at least L rows.
Tensor embed_and_position(const std::vector<int>& ids, const Shape& id_shape,
                          const Tensor& embedding_matrix, const Tensor& position_table,
                          double scale);

// Scaled dot-product attention over n_heads heads. q may differ from k/v in
// length; k and v must agree. The mask is broadcast to
// [batch x heads x queries x keys]. Rank-2 inputs are treated as batch 1.
Tensor multi_head_attention(const Tensor& q_seq, const Tensor& k_seq, const Tensor& v_seq,
                            const AttentionMask& mask, const MultiHeadParams& params,
                            double dropout_rate, bool train, Rng& rng);

// Position-wise two-layer network with rectifier activation.
Tensor feed_forward(const Tensor& x, const FeedForwardParams& params, double dropout_rate,
                    bool train, Rng& rng);

}  // namespace prt
