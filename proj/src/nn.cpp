#include "prt/nn.hpp"

#include <cmath>

namespace prt {

Tensor linear(const Tensor& x, const LinearParams& p) {
  return add(matmul(x, p.weight), p.bias);
}

Tensor layer_norm(const Tensor& x, const LayerNormParams& p, double epsilon) {
  return layer_norm(x, p.gain, p.bias, epsilon);
}

LinearParams make_linear(int in, int out, Rng& rng) {
  // Glorot uniform.
  double bound = std::sqrt(6.0 / (in + out));
  std::vector<double> w(static_cast<size_t>(in) * out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  LinearParams p;
  p.weight = parameter({in, out}, std::move(w));
  p.bias = parameter_zeros({out});
  return p;
}

LayerNormParams make_layer_norm(int dim) {
  LayerNormParams p;
  p.gain = parameter({dim}, std::vector<double>(dim, 1.0));
  p.bias = parameter_zeros({dim});
  return p;
}

MultiHeadParams make_multi_head(int model_dim, int n_heads, Rng& rng) {
  if (n_heads <= 0 || model_dim % n_heads != 0)
    throw TensorError("multi-head: model dim " + std::to_string(model_dim) +
                      " not divisible by " + std::to_string(n_heads) + " heads");
  MultiHeadParams p;
  p.w_q = make_linear(model_dim, model_dim, rng);
  p.w_k = make_linear(model_dim, model_dim, rng);
  p.w_v = make_linear(model_dim, model_dim, rng);
  p.w_o = make_linear(model_dim, model_dim, rng);
  p.n_heads = n_heads;
  p.d_k = model_dim / n_heads;
  return p;
}

FeedForwardParams make_feed_forward(int model_dim, int ffn_dim, Rng& rng) {
  FeedForwardParams p;
  p.w1 = make_linear(model_dim, ffn_dim, rng);
  p.w2 = make_linear(ffn_dim, model_dim, rng);
  return p;
}

Tensor sinusoidal_positions(int max_positions, int dim) {
  std::vector<double> table(static_cast<size_t>(max_positions) * dim);
  for (int pos = 0; pos < max_positions; ++pos) {
    for (int i = 0; i < dim; i += 2) {
      double angle = pos / std::pow(10000.0, static_cast<double>(i) / dim);
      table[static_cast<size_t>(pos) * dim + i] = std::sin(angle);
      if (i + 1 < dim) table[static_cast<size_t>(pos) * dim + i + 1] = std::cos(angle);
    }
  }
  return from_values({max_positions, dim}, std::move(table));
}

Tensor embed_and_position(const std::vector<int>& ids, const Shape& id_shape,
                          const Tensor& embedding_matrix, const Tensor& position_table,
                          double scale) {
  int len = id_shape.back();
  if (position_table.shape()[0] < len)
    throw TensorError("embed_and_position: sequence longer than position table (" +
                      std::to_string(len) + " > " +
                      std::to_string(position_table.shape()[0]) + ")");
  Tensor emb = embedding(embedding_matrix, ids, id_shape);
  Tensor pos = narrow(position_table, 0, 0, len);
  return add(scalar_mul(emb, scale), pos);
}

Tensor multi_head_attention(const Tensor& q_seq, const Tensor& k_seq, const Tensor& v_seq,
                            const AttentionMask& mask, const MultiHeadParams& params,
                            double dropout_rate, bool train, Rng& rng) {
  if (k_seq.shape() != v_seq.shape())
    throw TensorError("multi_head_attention: key/value shapes disagree, " +
                      shape_str(k_seq.shape()) + " vs " + shape_str(v_seq.shape()));
  bool flat = q_seq.rank() == 2;
  if (q_seq.rank() != k_seq.rank() || (q_seq.rank() != 2 && q_seq.rank() != 3))
    throw TensorError("multi_head_attention: expected [len x dim] or [batch x len x dim]");

  Tensor q = flat ? reshape(q_seq, {1, q_seq.shape()[0], q_seq.shape()[1]}) : q_seq;
  Tensor k = flat ? reshape(k_seq, {1, k_seq.shape()[0], k_seq.shape()[1]}) : k_seq;
  Tensor v = flat ? reshape(v_seq, {1, v_seq.shape()[0], v_seq.shape()[1]}) : v_seq;

  int B = q.shape()[0];
  int Lq = q.shape()[1];
  int Lk = k.shape()[1];
  int d = q.shape()[2];
  int h = params.n_heads;
  int dk = params.d_k;
  if (h * dk != d)
    throw TensorError("multi_head_attention: params expect dim " + std::to_string(h * dk) +
                      ", input has " + std::to_string(d));

  auto split_heads = [&](const Tensor& t, int L) {
    return permute(reshape(t, {B, L, h, dk}), {0, 2, 1, 3});  // [B x h x L x dk]
  };
  Tensor qp = split_heads(linear(q, params.w_q), Lq);
  Tensor kp = split_heads(linear(k, params.w_k), Lk);
  Tensor vp = split_heads(linear(v, params.w_v), Lk);

  Tensor scores = scalar_mul(matmul(qp, transpose_last(kp)), 1.0 / std::sqrt(double(dk)));
  Tensor weights = masked_softmax(scores, mask);
  weights = dropout(weights, dropout_rate, train, rng);
  Tensor ctx = matmul(weights, vp);  // [B x h x Lq x dk]
  Tensor merged = reshape(permute(ctx, {0, 2, 1, 3}), {B, Lq, d});
  Tensor out = linear(merged, params.w_o);
  return flat ? reshape(out, {Lq, d}) : out;
}

Tensor feed_forward(const Tensor& x, const FeedForwardParams& params, double dropout_rate,
                    bool train, Rng& rng) {
  Tensor hidden = relu(linear(x, params.w1));
  hidden = dropout(hidden, dropout_rate, train, rng);
  return linear(hidden, params.w2);
}

}  // namespace prt
