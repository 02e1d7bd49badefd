#include "prt/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <unordered_map>

namespace prt {

SegmentationMode segmentation_mode_from_string(const std::string& s) {
  if (s == "ngram") return SegmentationMode::ngram;
  if (s == "tree") return SegmentationMode::tree;
  throw ConfigError("unknown segmentation mode: " + s);
}

std::string to_string(SegmentationMode m) {
  return m == SegmentationMode::ngram ? "ngram" : "tree";
}

void ModelConfig::validate() const {
  std::vector<std::string> problems;
  if (model_dim <= 0) problems.push_back("model_dim must be positive");
  if (ffn_dim <= 0) problems.push_back("ffn_dim must be positive");
  if (n_heads <= 0) problems.push_back("n_heads must be positive");
  if (model_dim > 0 && n_heads > 0 && model_dim % n_heads != 0)
    problems.push_back("model_dim must be divisible by n_heads");
  if (enc_layers <= 0) problems.push_back("enc_layers must be positive");
  if (dec_layers <= 0) problems.push_back("dec_layers must be positive");
  if (dropout < 0.0 || dropout >= 1.0) problems.push_back("dropout must be in [0, 1)");
  if (src_vocab <= kReservedIds) problems.push_back("src_vocab must exceed the reserved ids");
  if (tgt_vocab <= kReservedIds) problems.push_back("tgt_vocab must exceed the reserved ids");
  if (max_positions <= 0) problems.push_back("max_positions must be positive");
  if (!phrase_repr && attentive) problems.push_back("attentive requires phrase_repr");
  if (!phrase_repr && transparent) problems.push_back("transparent requires phrase_repr");
  if (!problems.empty()) {
    std::string msg = "invalid model configuration:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw ConfigError(msg);
  }
}

KeyValueConfig ModelConfig::to_key_values() const {
  KeyValueConfig kv;
  kv.set("model_dim", std::to_string(model_dim));
  kv.set("ffn_dim", std::to_string(ffn_dim));
  kv.set("n_heads", std::to_string(n_heads));
  kv.set("enc_layers", std::to_string(enc_layers));
  kv.set("dec_layers", std::to_string(dec_layers));
  {
    std::ostringstream os;
    os << dropout;
    kv.set("dropout", os.str());
  }
  kv.set("src_vocab", std::to_string(src_vocab));
  kv.set("tgt_vocab", std::to_string(tgt_vocab));
  kv.set("glance", to_string(glance));
  kv.set("segmentation", to_string(segmentation));
  kv.set("phrase_repr", phrase_repr ? "true" : "false");
  kv.set("attentive", attentive ? "true" : "false");
  kv.set("transparent", transparent ? "true" : "false");
  kv.set("tie_classifier", tie_classifier ? "true" : "false");
  kv.set("positional", positional == PositionalKind::sinusoidal ? "sinusoidal" : "learned");
  kv.set("phrase_level_sources", level_sources == PhraseLevelSources::outputs_and_embedding
                                     ? "outputs_and_embedding"
                                     : "layer_inputs");
  kv.set("tree_budget", tree_budget == TreeBudget::fixed ? "fixed" : "paper");
  kv.set("max_positions", std::to_string(max_positions));
  return kv;
}

ModelConfig ModelConfig::from_key_values(const KeyValueConfig& kv) {
  ModelConfig cfg;
  cfg.model_dim = kv.get_int("model_dim", cfg.model_dim);
  cfg.ffn_dim = kv.get_int("ffn_dim", cfg.ffn_dim);
  cfg.n_heads = kv.get_int("n_heads", cfg.n_heads);
  cfg.enc_layers = kv.get_int("enc_layers", cfg.enc_layers);
  cfg.dec_layers = kv.get_int("dec_layers", cfg.dec_layers);
  cfg.dropout = kv.get_double("dropout", cfg.dropout);
  cfg.src_vocab = kv.get_int("src_vocab", cfg.src_vocab);
  cfg.tgt_vocab = kv.get_int("tgt_vocab", cfg.tgt_vocab);
  cfg.glance = glance_mode_from_string(kv.get_string("glance", to_string(cfg.glance)));
  cfg.segmentation =
      segmentation_mode_from_string(kv.get_string("segmentation", to_string(cfg.segmentation)));
  cfg.phrase_repr = kv.get_bool("phrase_repr", cfg.phrase_repr);
  cfg.attentive = kv.get_bool("attentive", cfg.attentive);
  cfg.transparent = kv.get_bool("transparent", cfg.transparent);
  cfg.tie_classifier = kv.get_bool("tie_classifier", cfg.tie_classifier);
  std::string pos = kv.get_string("positional", "sinusoidal");
  if (pos != "sinusoidal" && pos != "learned")
    throw ConfigError("unknown positional kind: " + pos);
  cfg.positional = pos == "sinusoidal" ? PositionalKind::sinusoidal : PositionalKind::learned;
  std::string lvl = kv.get_string("phrase_level_sources", "outputs_and_embedding");
  if (lvl != "outputs_and_embedding" && lvl != "layer_inputs")
    throw ConfigError("unknown phrase_level_sources: " + lvl);
  cfg.level_sources = lvl == "outputs_and_embedding"
                          ? PhraseLevelSources::outputs_and_embedding
                          : PhraseLevelSources::layer_inputs;
  std::string bud = kv.get_string("tree_budget", "fixed");
  if (bud != "fixed" && bud != "paper") throw ConfigError("unknown tree_budget: " + bud);
  cfg.tree_budget = bud == "fixed" ? TreeBudget::fixed : TreeBudget::paper;
  cfg.max_positions = kv.get_int("max_positions", cfg.max_positions);
  return cfg;
}

// --- parameter construction ---------------------------------------------------

namespace {

Tensor embedding_init(int vocab, int dim, Rng& rng) {
  std::vector<double> v(static_cast<size_t>(vocab) * dim);
  double stddev = 1.0 / std::sqrt(static_cast<double>(dim));
  for (auto& x : v) x = rng.normal(0.0, stddev);
  return parameter({vocab, dim}, std::move(v));
}

CombinerParams make_combiner(int dim, int heads, Rng& rng) {
  CombinerParams c;
  c.mha = make_multi_head(dim, heads, rng);
  c.gate_hidden = make_linear(2 * dim, dim, rng);
  c.gate_out = make_linear(dim, dim, rng);
  c.norm = make_layer_norm(dim);
  return c;
}

}  // namespace

ModelParams init_params(const ModelConfig& cfg, uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  ModelParams p;
  p.src_embedding = embedding_init(cfg.src_vocab, cfg.model_dim, rng);
  p.tgt_embedding = embedding_init(cfg.tgt_vocab, cfg.model_dim, rng);
  if (cfg.positional == PositionalKind::sinusoidal) {
    p.src_positions = sinusoidal_positions(cfg.max_positions, cfg.model_dim);
    p.tgt_positions = sinusoidal_positions(cfg.max_positions, cfg.model_dim);
  } else {
    p.src_positions = embedding_init(cfg.max_positions, cfg.model_dim, rng);
    p.tgt_positions = embedding_init(cfg.max_positions, cfg.model_dim, rng);
  }
  for (int i = 0; i < cfg.enc_layers; ++i) {
    EncoderLayerParams layer;
    if (cfg.phrase_repr) layer.combiner = make_combiner(cfg.model_dim, cfg.n_heads, rng);
    layer.self_attn = make_multi_head(cfg.model_dim, cfg.n_heads, rng);
    layer.self_norm = make_layer_norm(cfg.model_dim);
    layer.ffn = make_feed_forward(cfg.model_dim, cfg.ffn_dim, rng);
    layer.ffn_norm = make_layer_norm(cfg.model_dim);
    p.encoder.push_back(std::move(layer));
  }
  for (int i = 0; i < cfg.dec_layers; ++i) {
    DecoderLayerParams layer;
    layer.self_attn = make_multi_head(cfg.model_dim, cfg.n_heads, rng);
    layer.self_norm = make_layer_norm(cfg.model_dim);
    if (cfg.phrase_repr) layer.combiner = make_combiner(cfg.model_dim, cfg.n_heads, rng);
    layer.cross_attn = make_multi_head(cfg.model_dim, cfg.n_heads, rng);
    layer.cross_norm = make_layer_norm(cfg.model_dim);
    layer.ffn = make_feed_forward(cfg.model_dim, cfg.ffn_dim, rng);
    layer.ffn_norm = make_layer_norm(cfg.model_dim);
    p.decoder.push_back(std::move(layer));
  }
  if (cfg.phrase_repr && cfg.attentive) {
    for (int i = 0; i < cfg.n_phrase_levels(); ++i)
      p.scorers.push_back(make_phrase_scorer(cfg.model_dim, cfg.scorer_hidden(), rng));
  }
  if (cfg.phrase_repr && cfg.transparent)
    p.ta = make_transparent_weights(cfg.n_phrase_levels(), cfg.dec_layers);
  if (!cfg.tie_classifier) p.classifier = embedding_init(cfg.tgt_vocab, cfg.model_dim, rng);
  return p;
}

namespace {

using ParamFn = std::function<void(const std::string&, Tensor&)>;

void visit_linear(const std::string& prefix, LinearParams& p, const ParamFn& fn) {
  fn(prefix + ".weight", p.weight);
  fn(prefix + ".bias", p.bias);
}

void visit_norm(const std::string& prefix, LayerNormParams& p, const ParamFn& fn) {
  fn(prefix + ".gain", p.gain);
  fn(prefix + ".bias", p.bias);
}

void visit_mha(const std::string& prefix, MultiHeadParams& p, const ParamFn& fn) {
  visit_linear(prefix + ".q", p.w_q, fn);
  visit_linear(prefix + ".k", p.w_k, fn);
  visit_linear(prefix + ".v", p.w_v, fn);
  visit_linear(prefix + ".o", p.w_o, fn);
}

void visit_combiner(const std::string& prefix, CombinerParams& p, const ParamFn& fn) {
  visit_mha(prefix + ".mha", p.mha, fn);
  visit_linear(prefix + ".gate1", p.gate_hidden, fn);
  visit_linear(prefix + ".gate2", p.gate_out, fn);
  visit_norm(prefix + ".norm", p.norm, fn);
}

void visit_ffn(const std::string& prefix, FeedForwardParams& p, const ParamFn& fn) {
  visit_linear(prefix + ".w1", p.w1, fn);
  visit_linear(prefix + ".w2", p.w2, fn);
}

}  // namespace

void for_each_parameter(ModelParams& params, const ModelConfig& cfg, const ParamFn& fn) {
  fn("src_embedding", params.src_embedding);
  fn("tgt_embedding", params.tgt_embedding);
  if (cfg.positional == PositionalKind::learned) {
    fn("src_positions", params.src_positions);
    fn("tgt_positions", params.tgt_positions);
  }
  for (size_t i = 0; i < params.encoder.size(); ++i) {
    std::string base = "encoder." + std::to_string(i);
    auto& layer = params.encoder[i];
    if (cfg.phrase_repr) visit_combiner(base + ".combiner", layer.combiner, fn);
    visit_mha(base + ".self_attn", layer.self_attn, fn);
    visit_norm(base + ".self_norm", layer.self_norm, fn);
    visit_ffn(base + ".ffn", layer.ffn, fn);
    visit_norm(base + ".ffn_norm", layer.ffn_norm, fn);
  }
  for (size_t i = 0; i < params.decoder.size(); ++i) {
    std::string base = "decoder." + std::to_string(i);
    auto& layer = params.decoder[i];
    visit_mha(base + ".self_attn", layer.self_attn, fn);
    visit_norm(base + ".self_norm", layer.self_norm, fn);
    if (cfg.phrase_repr) visit_combiner(base + ".combiner", layer.combiner, fn);
    visit_mha(base + ".cross_attn", layer.cross_attn, fn);
    visit_norm(base + ".cross_norm", layer.cross_norm, fn);
    visit_ffn(base + ".ffn", layer.ffn, fn);
    visit_norm(base + ".ffn_norm", layer.ffn_norm, fn);
  }
  for (size_t i = 0; i < params.scorers.size(); ++i) {
    std::string base = "scorer." + std::to_string(i);
    visit_linear(base + ".w1", params.scorers[i].w1, fn);
    visit_linear(base + ".w2", params.scorers[i].w2, fn);
  }
  if (cfg.phrase_repr && cfg.transparent) fn("transparent.logits", params.ta.logits);
  if (!cfg.tie_classifier) fn("classifier.weight", params.classifier);
}

void for_each_parameter_shape(const ModelConfig& cfg,
                              const std::function<void(const std::string&, const Shape&)>& fn) {
  int d = cfg.model_dim;
  auto lin = [&](const std::string& prefix, int in, int out) {
    fn(prefix + ".weight", {in, out});
    fn(prefix + ".bias", {out});
  };
  auto norm = [&](const std::string& prefix) {
    fn(prefix + ".gain", {d});
    fn(prefix + ".bias", {d});
  };
  auto mha = [&](const std::string& prefix) {
    lin(prefix + ".q", d, d);
    lin(prefix + ".k", d, d);
    lin(prefix + ".v", d, d);
    lin(prefix + ".o", d, d);
  };
  auto combiner = [&](const std::string& prefix) {
    mha(prefix + ".mha");
    lin(prefix + ".gate1", 2 * d, d);
    lin(prefix + ".gate2", d, d);
    norm(prefix + ".norm");
  };
  auto ffn = [&](const std::string& prefix) {
    lin(prefix + ".w1", d, cfg.ffn_dim);
    lin(prefix + ".w2", cfg.ffn_dim, d);
  };

  fn("src_embedding", {cfg.src_vocab, d});
  fn("tgt_embedding", {cfg.tgt_vocab, d});
  if (cfg.positional == PositionalKind::learned) {
    fn("src_positions", {cfg.max_positions, d});
    fn("tgt_positions", {cfg.max_positions, d});
  }
  for (int i = 0; i < cfg.enc_layers; ++i) {
    std::string base = "encoder." + std::to_string(i);
    if (cfg.phrase_repr) combiner(base + ".combiner");
    mha(base + ".self_attn");
    norm(base + ".self_norm");
    ffn(base + ".ffn");
    norm(base + ".ffn_norm");
  }
  for (int i = 0; i < cfg.dec_layers; ++i) {
    std::string base = "decoder." + std::to_string(i);
    mha(base + ".self_attn");
    norm(base + ".self_norm");
    if (cfg.phrase_repr) combiner(base + ".combiner");
    mha(base + ".cross_attn");
    norm(base + ".cross_norm");
    ffn(base + ".ffn");
    norm(base + ".ffn_norm");
  }
  if (cfg.phrase_repr && cfg.attentive) {
    for (int i = 0; i < cfg.n_phrase_levels(); ++i) {
      std::string base = "scorer." + std::to_string(i);
      lin(base + ".w1", 2 * d, cfg.scorer_hidden());
      lin(base + ".w2", cfg.scorer_hidden(), 1);
    }
  }
  if (cfg.phrase_repr && cfg.transparent)
    fn("transparent.logits", {cfg.n_phrase_levels(), cfg.dec_layers});
  if (!cfg.tie_classifier) fn("classifier.weight", {cfg.tgt_vocab, d});
}

int64_t ParameterCounts::group(const std::string& name) const {
  for (const auto& [g, n] : groups)
    if (g == name) return n;
  return 0;
}

namespace {

ParameterCounts make_counts(const std::function<void(
                                const std::function<void(const std::string&, int64_t)>&)>& walk) {
  ParameterCounts out;
  out.groups = {{"embeddings", 0}, {"encoder", 0},     {"decoder", 0},
                {"phrase_scorers", 0}, {"transparent", 0}, {"classifier", 0}};
  auto bump = [&](const std::string& g, int64_t n) {
    for (auto& [name, cnt] : out.groups)
      if (name == g) cnt += n;
    out.total += n;
  };
  walk([&](const std::string& name, int64_t n) {
    if (name.rfind("encoder.", 0) == 0) bump("encoder", n);
    else if (name.rfind("decoder.", 0) == 0) bump("decoder", n);
    else if (name.rfind("scorer.", 0) == 0) bump("phrase_scorers", n);
    else if (name.rfind("transparent.", 0) == 0) bump("transparent", n);
    else if (name.rfind("classifier.", 0) == 0) bump("classifier", n);
    else bump("embeddings", n);
  });
  return out;
}

}  // namespace

ParameterCounts count_parameters(ModelParams& params, const ModelConfig& cfg) {
  return make_counts([&](const std::function<void(const std::string&, int64_t)>& bump) {
    for_each_parameter(params, cfg,
                       [&](const std::string& name, Tensor& t) { bump(name, t.size()); });
  });
}

ParameterCounts count_parameters(const ModelConfig& cfg) {
  return make_counts([&](const std::function<void(const std::string&, int64_t)>& bump) {
    for_each_parameter_shape(
        cfg, [&](const std::string& name, const Shape& s) { bump(name, numel(s)); });
  });
}

// --- batches -----------------------------------------------------------------

TokenBatch TokenBatch::from_sentences(const std::vector<std::vector<int>>& sentences) {
  TokenBatch b;
  b.batch = static_cast<int>(sentences.size());
  for (const auto& s : sentences) b.len = std::max(b.len, static_cast<int>(s.size()));
  b.len = std::max(b.len, 1);
  b.ids.assign(static_cast<size_t>(b.batch) * b.len, kPadId);
  b.valid.assign(b.batch, std::vector<uint8_t>(b.len, 0));
  for (int i = 0; i < b.batch; ++i) {
    for (size_t t = 0; t < sentences[i].size(); ++t) {
      b.ids[i * b.len + t] = sentences[i][t];
      b.valid[i][t] = 1;
    }
  }
  return b;
}

// --- sublayers ---------------------------------------------------------------

Tensor attentive_combination(const Tensor& x, const Tensor& phrases,
                             const AttentionMask& phrase_mask, const CombinerParams& params,
                             double dropout_rate, bool train, Rng& rng) {
  if (phrases.shape()[phrases.rank() - 2] == 0)
    throw TensorError("attentive_combination: zero phrases");
  Tensor attended = multi_head_attention(x, phrases, phrases, phrase_mask, params.mha,
                                         dropout_rate, train, rng);
  Tensor cat = concat_last(x, attended);
  Tensor combined = linear(sigmoid(linear(cat, params.gate_hidden)), params.gate_out);
  combined = dropout(combined, dropout_rate, train, rng);
  return layer_norm(add(x, combined), params.norm);
}

Tensor encoder_layer_forward(const Tensor& x, const AttentionMask& token_mask,
                             const Tensor* phrases, const AttentionMask& phrase_mask,
                             const EncoderLayerParams& params, double dropout_rate, bool train,
                             Rng& rng) {
  Tensor h = x;
  if (phrases != nullptr)
    h = attentive_combination(h, *phrases, phrase_mask, params.combiner, dropout_rate, train,
                              rng);
  Tensor attn = multi_head_attention(h, h, h, token_mask, params.self_attn, dropout_rate,
                                     train, rng);
  h = layer_norm(add(h, dropout(attn, dropout_rate, train, rng)), params.self_norm);
  Tensor ff = feed_forward(h, params.ffn, dropout_rate, train, rng);
  return layer_norm(add(h, dropout(ff, dropout_rate, train, rng)), params.ffn_norm);
}

Tensor decoder_layer_forward(const Tensor& y, const AttentionMask& self_mask,
                             const Tensor& memory, const AttentionMask& memory_mask,
                             const Tensor* phrases, const AttentionMask& phrase_mask,
                             const DecoderLayerParams& params, double dropout_rate, bool train,
                             Rng& rng) {
  Tensor attn = multi_head_attention(y, y, y, self_mask, params.self_attn, dropout_rate,
                                     train, rng);
  Tensor h = layer_norm(add(y, dropout(attn, dropout_rate, train, rng)), params.self_norm);
  if (phrases != nullptr)
    h = attentive_combination(h, *phrases, phrase_mask, params.combiner, dropout_rate, train,
                              rng);
  Tensor cross = multi_head_attention(h, memory, memory, memory_mask, params.cross_attn,
                                      dropout_rate, train, rng);
  h = layer_norm(add(h, dropout(cross, dropout_rate, train, rng)), params.cross_norm);
  Tensor ff = feed_forward(h, params.ffn, dropout_rate, train, rng);
  return layer_norm(add(h, dropout(ff, dropout_rate, train, rng)), params.ffn_norm);
}

// --- model ---------------------------------------------------------------------

Model::Model(ModelConfig cfg, uint64_t seed)
    : cfg_(std::move(cfg)), params_(init_params(cfg_, seed)), rng_(seed ^ 0x9e3779b97f4a7c15ull) {}

Model::Model(ModelConfig cfg, ModelParams params, uint64_t seed)
    : cfg_(std::move(cfg)), params_(std::move(params)), rng_(seed ^ 0x9e3779b97f4a7c15ull) {
  cfg_.validate();
}

BatchedPlans Model::plan_batch(const TokenBatch& src,
                               const std::vector<const ParseTree*>* trees) const {
  std::vector<PhrasePlan> plans;
  for (int b = 0; b < src.batch; ++b) {
    int len = 0;
    for (uint8_t v : src.valid[b]) len += v ? 1 : 0;
    if (len == 0) throw TensorError("plan_batch: empty sentence in batch");
    if (cfg_.segmentation == SegmentationMode::ngram) {
      plans.push_back(segment_ngram(len));
    } else {
      if (trees == nullptr || static_cast<int>(trees->size()) != src.batch)
        throw TensorError("plan_batch: tree segmentation requires one tree per sentence");
      plans.push_back(plan_from_tree(*(*trees)[b], len, cfg_.tree_budget));
    }
  }
  return batch_plans(plans);
}

EncodeResult Model::encode(const TokenBatch& src, const BatchedPlans* plans) {
  return encode_with(src, plans, train_);
}

EncodeResult Model::encode_with(const TokenBatch& src, const BatchedPlans* plans, bool train) {
  if (cfg_.phrase_repr && plans == nullptr)
    throw TensorError("encode: phrase representation enabled but no phrase plans given");
  EncodeResult res;
  res.memory_mask = AttentionMask::padding(src.valid);

  Tensor x = embed_and_position(src.ids, {src.batch, src.len}, params_.src_embedding,
                                params_.src_positions, std::sqrt(double(cfg_.model_dim)));
  x = dropout(x, cfg_.dropout, train, rng_);
  res.levels.push_back(x);

  if (cfg_.phrase_repr) {
    std::vector<std::vector<uint8_t>> rows(plans->batch);
    for (int b = 0; b < plans->batch; ++b)
      rows[b].assign(plans->phrase_valid.begin() + static_cast<size_t>(b) * plans->max_phrases,
                     plans->phrase_valid.begin() +
                         static_cast<size_t>(b + 1) * plans->max_phrases);
    res.phrase_mask = AttentionMask::padding(rows);
  }

  int n_levels = cfg_.n_phrase_levels();
  auto phrase_level = [&](int level) {
    const PhraseScorerParams* scorer =
        cfg_.attentive ? &params_.scorers[level] : nullptr;
    return phrase_sequences_batched(res.levels[level], *plans, scorer, cfg_.glance,
                                    cfg_.attentive);
  };

  for (int k = 0; k < cfg_.enc_layers; ++k) {
    const Tensor* phrases = nullptr;
    if (cfg_.phrase_repr) {
      // This layer cross-attends phrases generated from its own input.
      res.phrase_levels.push_back(phrase_level(k));
      phrases = &res.phrase_levels.back();
    }
    Tensor out = encoder_layer_forward(res.levels.back(), res.memory_mask, phrases,
                                       res.phrase_mask, params_.encoder[k], cfg_.dropout,
                                       train, rng_);
    res.levels.push_back(out);
  }
  if (cfg_.phrase_repr && n_levels == cfg_.enc_layers + 1)
    res.phrase_levels.push_back(phrase_level(cfg_.enc_layers));
  return res;
}

std::vector<Tensor> Model::decoder_phrase_inputs(const EncodeResult& enc) {
  std::vector<Tensor> per_layer;
  if (!cfg_.phrase_repr) return per_layer;
  for (int j = 0; j < cfg_.dec_layers; ++j) {
    if (cfg_.transparent) {
      per_layer.push_back(transparent_combine(enc.phrase_levels, j, params_.ta));
    } else {
      per_layer.push_back(enc.phrase_levels.back());
    }
  }
  return per_layer;
}

Tensor Model::decoder_logits(const EncodeResult& enc, const TokenBatch& tgt_in, bool train) {
  Tensor y = embed_and_position(tgt_in.ids, {tgt_in.batch, tgt_in.len}, params_.tgt_embedding,
                                params_.tgt_positions, std::sqrt(double(cfg_.model_dim)));
  y = dropout(y, cfg_.dropout, train, rng_);
  AttentionMask self_mask = AttentionMask::padding_causal(tgt_in.valid);
  std::vector<Tensor> phrases = decoder_phrase_inputs(enc);
  for (int j = 0; j < cfg_.dec_layers; ++j) {
    const Tensor* ph = cfg_.phrase_repr ? &phrases[j] : nullptr;
    y = decoder_layer_forward(y, self_mask, enc.memory(), enc.memory_mask, ph,
                              enc.phrase_mask, params_.decoder[j], cfg_.dropout, train, rng_);
  }
  const Tensor& weight = cfg_.tie_classifier ? params_.tgt_embedding : params_.classifier;
  return matmul(y, transpose_last(weight));
}

namespace {

// Input position 0 is BOS, position t reads gold token t-1.
TokenBatch shift_right(const TokenBatch& tgt) {
  TokenBatch tgt_in;
  tgt_in.batch = tgt.batch;
  tgt_in.len = tgt.len;
  tgt_in.ids.assign(tgt.ids.size(), kPadId);
  tgt_in.valid.assign(tgt.batch, std::vector<uint8_t>(tgt.len, 0));
  for (int b = 0; b < tgt.batch; ++b) {
    tgt_in.ids[static_cast<size_t>(b) * tgt.len] = kBosId;
    tgt_in.valid[b][0] = 1;
    for (int t = 1; t < tgt.len; ++t) {
      tgt_in.ids[static_cast<size_t>(b) * tgt.len + t] =
          tgt.ids[static_cast<size_t>(b) * tgt.len + t - 1];
      tgt_in.valid[b][t] = tgt.valid[b][t - 1];
    }
  }
  return tgt_in;
}

}  // namespace

Tensor Model::forward_train(const TokenBatch& src, const TokenBatch& tgt,
                            const BatchedPlans* plans) {
  EncodeResult enc = encode_with(src, plans, train_);
  return decoder_logits(enc, shift_right(tgt), train_);
}

namespace {

PhrasePlan default_plan(const ModelConfig& cfg, int len, const PhrasePlan* plan) {
  if (plan != nullptr) return *plan;
  if (cfg.segmentation == SegmentationMode::tree)
    throw TensorError("tree segmentation needs an explicit phrase plan per sentence");
  return segment_ngram(len);
}

}  // namespace

double Model::score_sequence(const std::vector<int>& src_ids, const std::vector<int>& tgt_ids,
                             const PhrasePlan* plan) {
  if (tgt_ids.empty()) throw TensorError("score_sequence: empty target");
  NoGradGuard ng;
  TokenBatch src = TokenBatch::from_sentences({src_ids});
  BatchedPlans plans;
  const BatchedPlans* plans_ptr = nullptr;
  if (cfg_.phrase_repr) {
    PhrasePlan p = default_plan(cfg_, static_cast<int>(src_ids.size()), plan);
    plans = batch_plans({p});
    plans_ptr = &plans;
  }
  TokenBatch tgt = TokenBatch::from_sentences({tgt_ids});
  EncodeResult enc = encode_with(src, plans_ptr, /*train=*/false);
  Tensor logp = log_softmax(decoder_logits(enc, shift_right(tgt), /*train=*/false));
  double score = 0.0;
  int T = static_cast<int>(tgt_ids.size());
  int V = cfg_.tgt_vocab;
  for (int t = 0; t < T; ++t) score += logp.data()[static_cast<size_t>(t) * V + tgt_ids[t]];
  return score;
}

namespace {

struct LiveHyp {
  std::vector<int> tokens;  // includes leading BOS
  double score = 0.0;
};

}  // namespace

Hypothesis Model::beam_search(const std::vector<int>& src_ids, int beam_size, int max_len,
                              LengthHandling length_handling, const PhrasePlan* plan) {
  if (beam_size < 1) throw TensorError("beam_search: beam size must be >= 1");
  if (max_len < 1) throw TensorError("beam_search: max_len must be >= 1");
  NoGradGuard ng;

  TokenBatch src = TokenBatch::from_sentences({src_ids});
  BatchedPlans plans;
  const BatchedPlans* plans_ptr = nullptr;
  if (cfg_.phrase_repr) {
    PhrasePlan p = default_plan(cfg_, static_cast<int>(src_ids.size()), plan);
    plans = batch_plans({p});
    plans_ptr = &plans;
  }
  EncodeResult enc = encode_with(src, plans_ptr, /*train=*/false);

  int V = cfg_.tgt_vocab;
  auto final_score = [&](const Hypothesis& h) {
    if (length_handling == LengthHandling::none) return h.score;
    int steps = static_cast<int>(h.tokens.size()) + (h.terminated ? 1 : 0);
    return h.score / std::max(1, steps);
  };

  std::vector<LiveHyp> live{LiveHyp{{kBosId}, 0.0}};
  std::optional<Hypothesis> best_completed;

  auto offer_completed = [&](Hypothesis h) {
    if (!best_completed || final_score(h) > final_score(*best_completed)) best_completed = h;
  };

  for (int step = 0; step < max_len + 1 && !live.empty(); ++step) {
    // Last-position log-probabilities for each live hypothesis.
    std::vector<std::vector<double>> rows;
    rows.reserve(live.size());
    for (const auto& h : live) {
      TokenBatch tgt_in = TokenBatch::from_sentences({h.tokens});
      Tensor logits = decoder_logits(enc, tgt_in, /*train=*/false);
      Tensor logp = log_softmax(logits);
      int t = static_cast<int>(h.tokens.size()) - 1;
      const double* row = logp.data().data() + static_cast<size_t>(t) * V;
      rows.emplace_back(row, row + V);
    }

    struct Cand {
      double score;
      int hyp;
      int token;
    };
    std::vector<Cand> cands;
    cands.reserve(live.size() * static_cast<size_t>(V));
    for (size_t hi = 0; hi < live.size(); ++hi)
      for (int v = 0; v < V; ++v)
        cands.push_back({live[hi].score + rows[hi][v], static_cast<int>(hi), v});
    auto better = [](const Cand& a, const Cand& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.token != b.token) return a.token < b.token;  // ties: lower token id
      return a.hyp < b.hyp;
    };
    size_t keep = std::min(cands.size(), static_cast<size_t>(beam_size));
    std::partial_sort(cands.begin(), cands.begin() + keep, cands.end(), better);

    std::vector<LiveHyp> next;
    for (size_t c = 0; c < keep; ++c) {
      const Cand& cand = cands[c];
      if (cand.token == kEosId) {
        Hypothesis done;
        done.tokens.assign(live[cand.hyp].tokens.begin() + 1, live[cand.hyp].tokens.end());
        done.score = cand.score;
        done.terminated = true;
        offer_completed(std::move(done));
      } else {
        LiveHyp nh;
        nh.tokens = live[cand.hyp].tokens;
        nh.tokens.push_back(cand.token);
        nh.score = cand.score;
        if (static_cast<int>(nh.tokens.size()) - 1 >= max_len) {
          Hypothesis cut;
          cut.tokens.assign(nh.tokens.begin() + 1, nh.tokens.end());
          cut.score = nh.score;
          cut.terminated = false;
          offer_completed(std::move(cut));
        } else {
          next.push_back(std::move(nh));
        }
      }
    }
    live = std::move(next);

    // Scores only drop as tokens append, so stop once nothing live can win.
    if (best_completed && length_handling == LengthHandling::none) {
      double best_live = -std::numeric_limits<double>::infinity();
      for (const auto& h : live) best_live = std::max(best_live, h.score);
      if (best_live <= best_completed->score) break;
    }
  }

  if (best_completed) return *best_completed;
  throw TensorError("beam_search: no hypothesis produced");  // unreachable for max_len >= 1
}

Hypothesis Model::greedy_decode(const std::vector<int>& src_ids, int max_len,
                                const PhrasePlan* plan) {
  NoGradGuard ng;

  TokenBatch src = TokenBatch::from_sentences({src_ids});
  BatchedPlans plans;
  const BatchedPlans* plans_ptr = nullptr;
  if (cfg_.phrase_repr) {
    PhrasePlan p = default_plan(cfg_, static_cast<int>(src_ids.size()), plan);
    plans = batch_plans({p});
    plans_ptr = &plans;
  }
  EncodeResult enc = encode_with(src, plans_ptr, /*train=*/false);

  int V = cfg_.tgt_vocab;
  Hypothesis hyp;
  std::vector<int> prefix{kBosId};
  for (int step = 0; step < max_len + 1; ++step) {
    TokenBatch tgt_in = TokenBatch::from_sentences({prefix});
    Tensor logits = decoder_logits(enc, tgt_in, /*train=*/false);
    Tensor logp = log_softmax(logits);
    int t = static_cast<int>(prefix.size()) - 1;
    const double* row = logp.data().data() + static_cast<size_t>(t) * V;
    int best = 0;
    for (int v = 1; v < V; ++v)
      if (row[v] > row[best]) best = v;  // ties keep the lower id
    hyp.score += row[best];
    if (best == kEosId) {
      hyp.terminated = true;
      break;
    }
    hyp.tokens.push_back(best);
    prefix.push_back(best);
    if (static_cast<int>(hyp.tokens.size()) >= max_len) break;
  }
  return hyp;
}

// --- checkpoint I/O ---------------------------------------------------------------

namespace {

constexpr char kMagic[8] = {'P', 'R', 'T', 'C', 'H', 'K', 'P', 'T'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float f) {
  uint32_t bits;
  std::memcpy(&bits, &f, 4);
  put_u32(out, bits);
}

struct Reader {
  const std::string& buf;
  size_t pos = 0;

  void need(size_t n) const {
    if (pos + n > buf.size()) throw CheckpointError("truncated checkpoint file");
  }
  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 4;
    return v;
  }
  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
    pos += 8;
    return v;
  }
  float f32() {
    uint32_t bits = u32();
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
  }
  std::string bytes(size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
};

}  // namespace

const std::vector<double>* CheckpointData::find(const std::string& name) const {
  for (const auto& [n, shape, values] : tensors)
    if (n == name) return &values;
  return nullptr;
}

void write_checkpoint_raw(const std::string& path, const CheckpointData& data) {
  std::string buf;
  buf.append(kMagic, sizeof(kMagic));
  put_u32(buf, kVersion);
  put_u64(buf, data.config_text.size());
  buf.append(data.config_text);
  put_u64(buf, data.tensors.size());
  for (const auto& [name, shape, values] : data.tensors) {
    put_u32(buf, static_cast<uint32_t>(name.size()));
    buf.append(name);
    put_u32(buf, static_cast<uint32_t>(shape.size()));
    for (int ext : shape) put_u32(buf, static_cast<uint32_t>(ext));
    if (static_cast<int64_t>(values.size()) != numel(shape))
      throw CheckpointError("tensor '" + name + "': value count does not match shape");
    for (double v : values) put_f32(buf, static_cast<float>(v));
  }

  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot open for writing: " + tmp);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw CheckpointError("write failed: " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

CheckpointData read_checkpoint_raw(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint: " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  std::string buf = ss.str();

  Reader r{buf};
  std::string magic = r.bytes(sizeof(kMagic));
  if (std::memcmp(magic.data(), kMagic, sizeof(kMagic)) != 0)
    throw CheckpointError("bad magic bytes: not a checkpoint file: " + path);
  uint32_t version = r.u32();
  if (version != kVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(version));
  CheckpointData data;
  data.config_text = r.bytes(r.u64());
  uint64_t count = r.u64();
  for (uint64_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.u32());
    uint32_t rank = r.u32();
    if (rank > 8) throw CheckpointError("tensor '" + name + "': implausible rank");
    Shape shape(rank);
    for (uint32_t d = 0; d < rank; ++d) shape[d] = static_cast<int>(r.u32());
    int64_t n = numel(shape);
    std::vector<double> values(n);
    for (int64_t j = 0; j < n; ++j) values[j] = static_cast<double>(r.f32());
    data.tensors.emplace_back(std::move(name), std::move(shape), std::move(values));
  }
  if (r.pos != buf.size()) throw CheckpointError("trailing bytes after checkpoint payload");
  return data;
}

void save_checkpoint(const std::string& path, ModelParams& params, const ModelConfig& cfg,
                     const std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>>*
                         extra_state) {
  CheckpointData data;
  data.config_text = cfg.to_key_values().to_text();
  for_each_parameter(params, cfg, [&](const std::string& name, Tensor& t) {
    data.tensors.emplace_back(name, t.shape(), t.data());
  });
  if (extra_state != nullptr) {
    for (const auto& [name, shaped] : *extra_state)
      data.tensors.emplace_back("opt." + name, shaped.first, shaped.second);
  }
  write_checkpoint_raw(path, data);
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
  CheckpointData data = read_checkpoint_raw(path);
  LoadedCheckpoint out;
  out.config = ModelConfig::from_key_values(KeyValueConfig::parse_text(data.config_text));
  out.config.validate();
  out.params = init_params(out.config, 0);

  std::unordered_map<std::string, size_t> index;
  for (size_t i = 0; i < data.tensors.size(); ++i)
    index[std::get<0>(data.tensors[i])] = i;

  std::vector<uint8_t> used(data.tensors.size(), 0);
  for_each_parameter(out.params, out.config, [&](const std::string& name, Tensor& t) {
    auto it = index.find(name);
    if (it == index.end())
      throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    const auto& [n, shape, values] = data.tensors[it->second];
    if (shape != t.shape())
      throw CheckpointError("tensor '" + name + "' has shape " + shape_str(shape) +
                            ", config expects " + shape_str(t.shape()));
    t.mutable_data() = values;
    used[it->second] = 1;
  });
  for (size_t i = 0; i < data.tensors.size(); ++i) {
    if (used[i]) continue;
    const auto& [name, shape, values] = data.tensors[i];
    if (name.rfind("opt.", 0) == 0) {
      out.extra_state.emplace_back(name.substr(4), std::make_pair(shape, values));
    } else {
      throw CheckpointError("unexpected tensor '" + name + "' in checkpoint");
    }
  }
  return out;
}

}  // namespace prt
