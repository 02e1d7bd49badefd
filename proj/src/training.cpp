#include "prt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <sstream>

namespace prt {

// --- vocabulary ----------------------------------------------------------------

namespace {

const char* kReservedNames[kReservedIds] = {"<pad>", "<bos>", "<eos>", "<unk>"};

}  // namespace

int Vocab::id_of(const std::string& token) const {
  auto it = index.find(token);
  return it == index.end() ? kUnkId : it->second;
}

std::string Vocab::token_of(int id) const {
  if (id < 0 || id >= size()) throw DataError("vocab: id " + std::to_string(id) + " out of range");
  if (id < kReservedIds) return kReservedNames[id];
  return words[id - kReservedIds];
}

std::vector<int> Vocab::encode(const std::vector<std::string>& tokens) const {
  std::vector<int> ids;
  ids.reserve(tokens.size());
  for (const auto& t : tokens) ids.push_back(id_of(t));
  return ids;
}

std::vector<std::string> Vocab::decode(const std::vector<int>& ids) const {
  std::vector<std::string> tokens;
  tokens.reserve(ids.size());
  for (int id : ids) tokens.push_back(token_of(id));
  return tokens;
}

Vocab Vocab::build(const std::vector<std::vector<std::string>>& corpus, int max_size) {
  if (corpus.empty()) throw DataError("build_vocab: empty corpus");
  struct Entry {
    int64_t freq = 0;
    int64_t first = 0;
  };
  std::unordered_map<std::string, Entry> counts;
  int64_t position = 0;
  for (const auto& sent : corpus)
    for (const auto& tok : sent) {
      auto [it, fresh] = counts.try_emplace(tok);
      if (fresh) it->second.first = position;
      it->second.freq++;
      ++position;
    }
  std::vector<std::pair<std::string, Entry>> entries(counts.begin(), counts.end());
  std::sort(entries.begin(), entries.end(), [](const auto& a, const auto& b) {
    if (a.second.freq != b.second.freq) return a.second.freq > b.second.freq;
    return a.second.first < b.second.first;
  });
  Vocab v;
  int limit = std::max(0, max_size - kReservedIds);
  for (const auto& [tok, e] : entries) {
    if (static_cast<int>(v.words.size()) >= limit) break;
    v.index[tok] = static_cast<int>(v.words.size()) + kReservedIds;
    v.words.push_back(tok);
  }
  return v;
}

void Vocab::save(const std::string& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw DataError("cannot write vocab file: " + path);
  for (const auto& w : words) out << w << "\n";
}

Vocab Vocab::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open vocab file: " + path);
  Vocab v;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    v.index[line] = static_cast<int>(v.words.size()) + kReservedIds;
    v.words.push_back(line);
  }
  return v;
}

// --- corpus ----------------------------------------------------------------------

std::vector<std::string> split_tokens(const std::string& line) {
  std::vector<std::string> out;
  size_t i = 0;
  while (i < line.size()) {
    while (i < line.size() && (line[i] == ' ' || line[i] == '\t' || line[i] == '\r')) ++i;
    size_t start = i;
    while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '\r') ++i;
    if (i > start) out.push_back(line.substr(start, i - start));
  }
  return out;
}

namespace {

std::vector<std::string> read_lines(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) lines.push_back(line);
  return lines;
}

}  // namespace

std::vector<SentencePair> load_parallel(const std::string& src_path,
                                        const std::string& tgt_path,
                                        const std::string& tree_path, int max_len) {
  auto src_lines = read_lines(src_path);
  auto tgt_lines = read_lines(tgt_path);
  if (src_lines.size() != tgt_lines.size())
    throw DataError("line-count mismatch: " + src_path + " has " +
                    std::to_string(src_lines.size()) + " lines, " + tgt_path + " has " +
                    std::to_string(tgt_lines.size()));
  std::vector<std::string> tree_lines;
  if (!tree_path.empty()) {
    tree_lines = read_lines(tree_path);
    if (tree_lines.size() != src_lines.size())
      throw DataError("line-count mismatch: " + tree_path + " has " +
                      std::to_string(tree_lines.size()) + " lines, " + src_path + " has " +
                      std::to_string(src_lines.size()));
  }

  std::vector<SentencePair> pairs;
  for (size_t i = 0; i < src_lines.size(); ++i) {
    SentencePair p;
    p.src = split_tokens(src_lines[i]);
    p.tgt = split_tokens(tgt_lines[i]);
    if (!tree_path.empty()) {
      // Trees are validated even for pairs later dropped by length.
      std::unique_ptr<ParseTree> tree;
      try {
        tree = parse_bracketed(tree_lines[i]);
      } catch (const ParseError& e) {
        throw DataError("line " + std::to_string(i + 1) + ": " + e.what());
      }
      if (tree->leaf_tokens() != p.src)
        throw DataError("line " + std::to_string(i + 1) +
                        ": tree leaves do not match source tokens");
      p.tree_text = tree_lines[i];
    }
    if (p.src.empty() || p.tgt.empty()) continue;
    if (static_cast<int>(p.src.size()) > max_len || static_cast<int>(p.tgt.size()) > max_len)
      continue;
    pairs.push_back(std::move(p));
  }
  return pairs;
}

std::vector<EncodedPair> encode_pairs(const std::vector<SentencePair>& pairs,
                                      const Vocab& src_vocab, const Vocab& tgt_vocab,
                                      const ModelConfig& cfg) {
  std::vector<EncodedPair> out;
  out.reserve(pairs.size());
  for (const auto& p : pairs) {
    EncodedPair e;
    e.src = src_vocab.encode(p.src);
    e.tgt = tgt_vocab.encode(p.tgt);
    e.tgt.push_back(kEosId);
    if (cfg.phrase_repr) {
      if (cfg.segmentation == SegmentationMode::tree) {
        if (p.tree_text.empty())
          throw DataError("tree segmentation configured but no tree for sentence");
        auto tree = parse_bracketed(p.tree_text);
        e.plan = plan_from_tree(*tree, static_cast<int>(e.src.size()), cfg.tree_budget);
      } else {
        e.plan = segment_ngram(static_cast<int>(e.src.size()));
      }
    }
    out.push_back(std::move(e));
  }
  return out;
}

// --- batching --------------------------------------------------------------------

std::vector<std::vector<std::vector<int>>> make_batches(const std::vector<int>& target_lengths,
                                                        int tokens_per_batch, int accum,
                                                        uint64_t seed, int epoch) {
  if (tokens_per_batch < 1 || accum < 1)
    throw DataError("make_batches: tokens_per_batch and accum must be >= 1");
  int n = static_cast<int>(target_lengths.size());
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;

  Rng rng(seed * 0x9e3779b97f4a7c15ull + static_cast<uint64_t>(epoch) + 1);
  rng.shuffle(order);

  // Length bucketing: sort within pools of the shuffled order so batches
  // carry similar lengths without making the epoch order deterministic.
  constexpr int kPool = 512;
  for (int start = 0; start < n; start += kPool) {
    int end = std::min(n, start + kPool);
    std::stable_sort(order.begin() + start, order.begin() + end,
                     [&](int a, int b) { return target_lengths[a] < target_lengths[b]; });
  }

  int micro_target = (tokens_per_batch + accum - 1) / accum;
  std::vector<std::vector<int>> micros;
  std::vector<int> cur;
  int cur_tokens = 0;
  for (int idx : order) {
    cur.push_back(idx);
    cur_tokens += target_lengths[idx];
    if (cur_tokens >= micro_target) {
      micros.push_back(std::move(cur));
      cur.clear();
      cur_tokens = 0;
    }
  }
  if (!cur.empty()) micros.push_back(std::move(cur));

  std::vector<std::vector<std::vector<int>>> effective;
  for (size_t i = 0; i < micros.size(); i += accum) {
    std::vector<std::vector<int>> group;
    for (size_t j = i; j < std::min(micros.size(), i + accum); ++j)
      group.push_back(std::move(micros[j]));
    effective.push_back(std::move(group));
  }
  // The tail group may fall short of the token threshold; it must stay last,
  // so only the full groups are shuffled.
  if (effective.size() > 1) {
    std::vector<std::vector<std::vector<int>>> head(effective.begin(), effective.end() - 1);
    rng.shuffle(head);
    head.push_back(std::move(effective.back()));
    effective = std::move(head);
  }
  return effective;
}

MicroBatch assemble_micro(const std::vector<EncodedPair>& pairs, const std::vector<int>& idxs,
                          bool phrase_repr) {
  MicroBatch mb;
  std::vector<std::vector<int>> src, tgt;
  std::vector<PhrasePlan> plans;
  for (int idx : idxs) {
    src.push_back(pairs[idx].src);
    tgt.push_back(pairs[idx].tgt);
    mb.target_tokens += static_cast<int64_t>(pairs[idx].tgt.size());
    if (phrase_repr) plans.push_back(pairs[idx].plan);
  }
  mb.src = TokenBatch::from_sentences(src);
  mb.tgt = TokenBatch::from_sentences(tgt);
  if (phrase_repr) {
    mb.plans = batch_plans(plans);
    mb.has_plans = true;
  }
  return mb;
}

// --- optimization -------------------------------------------------------------------

double lr_at_step(int64_t step, int model_dim, int warmup) {
  if (step < 1) throw DataError("lr_at_step: step must be >= 1");
  if (model_dim < 1 || warmup < 1) throw DataError("lr_at_step: bad schedule parameters");
  double s = static_cast<double>(step);
  double w = static_cast<double>(warmup);
  return std::pow(static_cast<double>(model_dim), -0.5) *
         std::min(std::pow(s, -0.5), s * std::pow(w, -1.5));
}

Tensor label_smoothed_sum(const Tensor& logits, const std::vector<int>& targets,
                          double smoothing, const std::vector<uint8_t>& pad_mask,
                          int64_t* token_count) {
  if (smoothing < 0.0 || smoothing >= 1.0)
    throw TensorError("label_smoothed_sum: smoothing must be in [0, 1)");
  int64_t V = logits.shape()[logits.rank() - 1];
  int64_t rows = logits.size() / V;
  if (static_cast<int64_t>(targets.size()) != rows ||
      static_cast<int64_t>(pad_mask.size()) != rows)
    throw TensorError("label_smoothed_sum: need one target and mask entry per position");

  int64_t valid = 0;
  for (uint8_t m : pad_mask) valid += m ? 1 : 0;
  if (valid == 0) throw TensorError("label_smoothed_sum: all positions are padding");
  if (token_count != nullptr) *token_count = valid;

  // Gold ids at padded positions are irrelevant but must be in range.
  std::vector<int> safe_targets(targets);
  for (int64_t r = 0; r < rows; ++r)
    if (!pad_mask[r]) safe_targets[r] = 0;

  Tensor logp = log_softmax(logits);
  Shape row_shape(logits.shape().begin(), logits.shape().end() - 1);
  if (row_shape.empty()) row_shape = {1};
  Tensor gold = pick_last(logp, safe_targets);            // [rows...]
  Tensor total = sum_axis(logp, logits.rank() - 1);       // [rows...]

  std::vector<double> mask_vals(rows);
  for (int64_t r = 0; r < rows; ++r) mask_vals[r] = pad_mask[r] ? 1.0 : 0.0;
  Tensor mask = from_values(row_shape, std::move(mask_vals));

  double eps = smoothing;
  double off_gold = V > 1 ? eps / static_cast<double>(V - 1) : 0.0;
  // loss_r = -(1-eps)*gold_r - eps/(V-1)*(total_r - gold_r)
  Tensor loss = add(scalar_mul(gold, -(1.0 - eps) + off_gold), scalar_mul(total, -off_gold));
  return sum_all(mul(loss, mask));
}

Tensor label_smoothed_loss(const Tensor& logits, const std::vector<int>& targets,
                           double smoothing, const std::vector<uint8_t>& pad_mask) {
  int64_t count = 0;
  Tensor total = label_smoothed_sum(logits, targets, smoothing, pad_mask, &count);
  return scalar_mul(total, 1.0 / static_cast<double>(count));
}

Adam::Adam(Model& model, double beta1, double beta2, double epsilon)
    : beta1_(beta1), beta2_(beta2), eps_(epsilon) {
  for_each_parameter(model.params(), model.config(), [&](const std::string& name, Tensor& t) {
    Slot s;
    s.name = name;
    s.param = t;
    s.m.assign(t.size(), 0.0);
    s.v.assign(t.size(), 0.0);
    slots_.push_back(std::move(s));
  });
}

void Adam::zero_grad() {
  for (auto& s : slots_) s.param.zero_grad();
}

void Adam::step(double lr) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (auto& s : slots_) {
    const std::vector<double>& g = s.param.grad_ref();
    std::vector<double>& p = s.param.mutable_data();
    for (size_t i = 0; i < p.size(); ++i) {
      double gi = i < g.size() ? g[i] : 0.0;
      s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * gi;
      s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * gi * gi;
      double mhat = s.m[i] / bc1;
      double vhat = s.v[i] / bc2;
      p[i] -= lr * mhat / (std::sqrt(vhat) + eps_);
    }
    round_leaf_to_precision(s.param);
  }
}

std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> Adam::export_state()
    const {
  std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>> out;
  for (const auto& s : slots_) {
    out.emplace_back("adam.m." + s.name, std::make_pair(s.param.shape(), s.m));
    out.emplace_back("adam.v." + s.name, std::make_pair(s.param.shape(), s.v));
  }
  out.emplace_back("adam.step",
                   std::make_pair(Shape{1}, std::vector<double>{static_cast<double>(t_)}));
  return out;
}

void Adam::import_state(
    const std::vector<std::pair<std::string, std::pair<Shape, std::vector<double>>>>& state) {
  std::unordered_map<std::string, const std::pair<Shape, std::vector<double>>*> map;
  for (const auto& [name, shaped] : state) map[name] = &shaped;
  for (auto& s : slots_) {
    auto m = map.find("adam.m." + s.name);
    auto v = map.find("adam.v." + s.name);
    if (m == map.end() || v == map.end())
      throw CheckpointError("optimizer state missing for '" + s.name + "'");
    if (static_cast<int64_t>(m->second->second.size()) != s.param.size() ||
        static_cast<int64_t>(v->second->second.size()) != s.param.size())
      throw CheckpointError("optimizer state shape mismatch for '" + s.name + "'");
    s.m = m->second->second;
    s.v = v->second->second;
  }
  auto st = map.find("adam.step");
  if (st != map.end() && !st->second->second.empty())
    t_ = static_cast<int64_t>(st->second->second[0]);
}

TrainMetrics train_step(Model& model, Adam& optimizer, const std::vector<MicroBatch>& micros,
                        int64_t step_number, const TrainConfig& cfg) {
  auto start = std::chrono::steady_clock::now();
  optimizer.zero_grad();
  model.set_train(true);

  int64_t total_tokens = 0;
  for (const auto& mb : micros) total_tokens += mb.target_tokens;
  if (total_tokens == 0) throw DataError("train_step: empty effective batch");

  double loss_sum = 0.0;
  int64_t correct = 0;
  for (size_t mi = 0; mi < micros.size(); ++mi) {
    const MicroBatch& mb = micros[mi];
    Tensor logits = model.forward_train(mb.src, mb.tgt,
                                        mb.has_plans ? &mb.plans : nullptr);
    std::vector<uint8_t> mask;
    mask.reserve(mb.tgt.ids.size());
    for (int b = 0; b < mb.tgt.batch; ++b)
      mask.insert(mask.end(), mb.tgt.valid[b].begin(), mb.tgt.valid[b].end());
    int64_t count = 0;
    Tensor micro_sum =
        label_smoothed_sum(logits, mb.tgt.ids, cfg.label_smoothing, mask, &count);
    double micro_val = micro_sum.item();
    if (!std::isfinite(micro_val))
      throw std::runtime_error("train_step: non-finite loss at step " +
                               std::to_string(step_number) + ", micro-batch " +
                               std::to_string(mi + 1) + "/" + std::to_string(micros.size()));
    loss_sum += micro_val;

    // Teacher-forced token accuracy.
    int64_t V = model.config().tgt_vocab;
    const auto& lv = logits.data();
    for (size_t r = 0; r < mask.size(); ++r) {
      if (!mask[r]) continue;
      const double* row = lv.data() + r * V;
      int best = 0;
      for (int v = 1; v < V; ++v)
        if (row[v] > row[best]) best = v;
      if (best == mb.tgt.ids[r]) ++correct;
    }

    backward(scalar_mul(micro_sum, 1.0 / static_cast<double>(total_tokens)));
  }

  double lr = lr_at_step(step_number, model.config().model_dim, cfg.warmup);
  optimizer.step(lr);

  auto elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  TrainMetrics m;
  m.step = step_number;
  m.loss = loss_sum / static_cast<double>(total_tokens);
  m.token_accuracy = static_cast<double>(correct) / static_cast<double>(total_tokens);
  m.lr = lr;
  m.target_tokens = total_tokens;
  m.tokens_per_sec = elapsed > 0 ? static_cast<double>(total_tokens) / elapsed : 0.0;
  return m;
}

void train_loop(Model& model, Adam& optimizer, const std::vector<EncodedPair>& pairs,
                const TrainConfig& cfg, const TrainHooks& hooks) {
  if (pairs.empty()) throw DataError("train_loop: empty corpus");
  std::vector<int> lengths;
  lengths.reserve(pairs.size());
  for (const auto& p : pairs) lengths.push_back(static_cast<int>(p.tgt.size()));

  int64_t step = 0;
  for (int epoch = 0; step < cfg.total_steps; ++epoch) {
    auto batches = make_batches(lengths, cfg.tokens_per_batch, cfg.accum, cfg.seed, epoch);
    for (const auto& group : batches) {
      if (step >= cfg.total_steps) break;
      ++step;
      std::vector<MicroBatch> micros;
      micros.reserve(group.size());
      for (const auto& idxs : group)
        micros.push_back(assemble_micro(pairs, idxs, model.config().phrase_repr));
      TrainMetrics metrics = train_step(model, optimizer, micros, step, cfg);
      bool log_point = cfg.log_interval > 0 && step % cfg.log_interval == 0;
      if (hooks.on_metrics && (log_point || step == 1 || step == cfg.total_steps))
        hooks.on_metrics(metrics);
      if (hooks.on_checkpoint && cfg.checkpoint_interval > 0 &&
          step % cfg.checkpoint_interval == 0)
        hooks.on_checkpoint(model, optimizer, step);
      if (hooks.should_stop && log_point && hooks.should_stop(model, step)) return;
    }
  }
}

// --- checkpoint averaging ---------------------------------------------------------

CheckpointData average_checkpoints(const std::vector<std::string>& paths) {
  if (paths.empty()) throw CheckpointError("average_checkpoints: no checkpoints given");
  std::vector<CheckpointData> all;
  all.reserve(paths.size());
  for (const auto& p : paths) all.push_back(read_checkpoint_raw(p));

  const CheckpointData& first = all.front();
  for (size_t i = 1; i < all.size(); ++i) {
    if (all[i].config_text != first.config_text)
      throw CheckpointError("config echo of '" + paths[i] + "' differs from '" + paths[0] + "'");
  }

  CheckpointData out;
  out.config_text = first.config_text;
  double inv = 1.0 / static_cast<double>(all.size());
  for (const auto& [name, shape, values] : first.tensors) {
    if (name.rfind("opt.", 0) == 0) continue;  // averaged models drop optimizer state
    std::vector<const std::vector<double>*> sources{&values};
    for (size_t i = 1; i < all.size(); ++i) {
      bool found = false;
      for (const auto& [n2, s2, v2] : all[i].tensors) {
        if (n2 != name) continue;
        if (s2 != shape)
          throw CheckpointError("tensor '" + name + "' has shape " + shape_str(s2) + " in '" +
                                paths[i] + "' but " + shape_str(shape) + " in '" + paths[0] +
                                "'");
        sources.push_back(&v2);
        found = true;
        break;
      }
      if (!found)
        throw CheckpointError("tensor '" + name + "' missing from '" + paths[i] + "'");
    }
    std::vector<double> mean(values.size());
    std::vector<double> terms(sources.size());
    for (size_t e = 0; e < values.size(); ++e) {
      for (size_t s = 0; s < sources.size(); ++s) terms[s] = (*sources[s])[e];
      // Canonical summation order makes the mean independent of input order.
      std::sort(terms.begin(), terms.end());
      double acc = 0.0;
      for (double t : terms) acc += t;
      mean[e] = acc * inv;
    }
    out.tensors.emplace_back(name, shape, std::move(mean));
  }
  return out;
}

}  // namespace prt
