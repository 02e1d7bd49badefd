// Command-line surface: segment, train, translate, average, eval,
// contrastive. Exit codes: 0 ok, 1 usage, 2 data/config, 3 runtime.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

#include "CLI11.hpp"
#include "json.hpp"

#include "prt/evaluation.hpp"
#include "prt/model.hpp"
#include "prt/training.hpp"

#ifdef _OPENMP
#include <omp.h>
#endif

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::vector<std::string> read_lines_checked(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw prt::DataError("cannot open file: " + path);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(line);
  }
  return lines;
}

void write_text_atomic(const std::string& path, const std::string& content) {
  std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
    if (!out) throw prt::DataError("cannot write: " + tmp);
    out << content;
    if (!out) throw prt::DataError("write failed: " + tmp);
  }
  fs::rename(tmp, path);
}

uint64_t fnv1a64_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw prt::DataError("cannot open file for digest: " + path);
  uint64_t h = 1469598103934665603ull;
  char buf[1 << 14];
  while (in.read(buf, sizeof(buf)) || in.gcount() > 0) {
    for (std::streamsize i = 0; i < in.gcount(); ++i) {
      h ^= static_cast<uint8_t>(buf[i]);
      h *= 1099511628211ull;
    }
    if (!in) break;
  }
  return h;
}

std::string hex64(uint64_t v) {
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << v;
  return os.str();
}

std::string utc_now() {
  auto now = std::chrono::system_clock::now();
  std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  std::ostringstream os;
  os << std::put_time(&tm, "%Y-%m-%dT%H:%M:%SZ");
  return os.str();
}

// Every training/eval run records its resolved configuration, seed, input
// digests and artifact paths.
void write_manifest(const std::string& path, const std::string& command, uint64_t seed,
                    const prt::KeyValueConfig& config,
                    const std::vector<std::string>& input_paths,
                    const std::vector<std::string>& output_paths) {
  json m;
  m["command"] = command;
  m["created_utc"] = utc_now();
  m["seed"] = seed;
  json cfg = json::object();
  for (const auto& [k, v] : config.entries()) cfg[k] = v;
  m["config"] = cfg;
  json inputs = json::array();
  for (const auto& p : input_paths) {
    json entry;
    entry["path"] = p;
    entry["fnv1a64"] = hex64(fnv1a64_file(p));
    entry["bytes"] = static_cast<int64_t>(fs::file_size(p));
    inputs.push_back(entry);
  }
  m["inputs"] = inputs;
  m["outputs"] = output_paths;
  write_text_atomic(path, m.dump(2) + "\n");
}

std::string join_tokens(const std::vector<std::string>& toks) {
  std::string out;
  for (size_t i = 0; i < toks.size(); ++i) {
    if (i) out += ' ';
    out += toks[i];
  }
  return out;
}

// --- segment -----------------------------------------------------------------

struct SegmentArgs {
  std::string input, output, mode = "ngram", trees, budget = "fixed";
};

int cmd_segment(const SegmentArgs& args) {
  if (args.mode != "ngram" && args.mode != "tree")
    throw UsageError("--mode must be ngram or tree");
  if (args.mode == "tree" && args.trees.empty())
    throw UsageError("tree mode requires --trees");
  if (args.budget != "paper" && args.budget != "fixed")
    throw UsageError("--budget must be fixed or paper");
  prt::TreeBudget budget =
      args.budget == "paper" ? prt::TreeBudget::paper : prt::TreeBudget::fixed;

  auto lines = read_lines_checked(args.input);
  std::vector<std::string> tree_lines;
  if (args.mode == "tree") {
    tree_lines = read_lines_checked(args.trees);
    if (tree_lines.size() != lines.size())
      throw prt::DataError("line-count mismatch: " + args.input + " has " +
                           std::to_string(lines.size()) + " lines, " + args.trees + " has " +
                           std::to_string(tree_lines.size()));
  }

  std::ostringstream out;
  for (size_t i = 0; i < lines.size(); ++i) {
    auto tokens = prt::split_tokens(lines[i]);
    if (tokens.empty())
      throw prt::DataError("line " + std::to_string(i + 1) + ": empty sentence");
    std::vector<std::vector<int>> phrases;
    if (args.mode == "ngram") {
      prt::PhrasePlan plan = prt::segment_ngram(static_cast<int>(tokens.size()));
      for (int p = 0; p < plan.n_phrases; ++p) {
        std::vector<int> phrase;
        for (int w = 0; w < plan.slot_width; ++w)
          if (plan.slot_valid(p, w)) phrase.push_back(plan.at(p, w));
        phrases.push_back(std::move(phrase));
      }
    } else {
      std::unique_ptr<prt::ParseTree> tree;
      try {
        tree = prt::parse_bracketed(tree_lines[i]);
      } catch (const prt::ParseError& e) {
        throw prt::DataError("line " + std::to_string(i + 1) + ": " + e.what());
      }
      if (tree->leaf_tokens() != tokens)
        throw prt::DataError("line " + std::to_string(i + 1) +
                             ": tree leaves do not match the token line");
      phrases = prt::extract_phrases_from_tree(
          *tree, prt::ntok_for_length(static_cast<int>(tokens.size())), budget);
    }
    for (size_t p = 0; p < phrases.size(); ++p) {
      if (p) out << " ||| ";
      for (size_t w = 0; w < phrases[p].size(); ++w) {
        if (w) out << ' ';
        out << tokens[phrases[p][w]];
      }
    }
    out << '\n';
  }
  write_text_atomic(args.output, out.str());
  return 0;
}

// --- train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config_path;
  std::string out_dir;
  std::vector<std::string> sets;  // key=value overrides
};

prt::KeyValueConfig resolve_train_config(const TrainArgs& args) {
  prt::KeyValueConfig cfg = prt::KeyValueConfig::load_file(args.config_path);
  for (const auto& kv : args.sets) {
    size_t eq = kv.find('=');
    if (eq == std::string::npos) throw UsageError("--set expects key=value, got: " + kv);
    cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  if (!args.out_dir.empty()) cfg.set("out_dir", args.out_dir);
  return cfg;
}

int cmd_train(const TrainArgs& args) {
  prt::KeyValueConfig kv = resolve_train_config(args);

  // Exhaustive validation before anything starts.
  std::vector<std::string> problems;
  prt::ModelConfig mcfg;
  try {
    mcfg = prt::ModelConfig::from_key_values(kv);
  } catch (const std::exception& e) {
    problems.push_back(e.what());
  }
  prt::TrainConfig tcfg;
  tcfg.warmup = kv.get_int("warmup", tcfg.warmup);
  tcfg.tokens_per_batch = kv.get_int("tokens_per_batch", tcfg.tokens_per_batch);
  tcfg.accum = kv.get_int("accum", tcfg.accum);
  tcfg.max_len = kv.get_int("max_len", tcfg.max_len);
  tcfg.label_smoothing = kv.get_double("label_smoothing", tcfg.label_smoothing);
  tcfg.total_steps = kv.get_int("total_steps", tcfg.total_steps);
  tcfg.checkpoint_interval = kv.get_int("checkpoint_interval", tcfg.checkpoint_interval);
  tcfg.log_interval = kv.get_int("log_interval", tcfg.log_interval);
  tcfg.seed = static_cast<uint64_t>(kv.get_int("seed", 1));

  std::string train_src = kv.get_string("train_src", "");
  std::string train_tgt = kv.get_string("train_tgt", "");
  std::string train_trees = kv.get_string("train_trees", "");
  std::string out_dir = kv.get_string("out_dir", "");
  int src_vocab_size = kv.get_int("src_vocab_size", 32000);
  int tgt_vocab_size = kv.get_int("tgt_vocab_size", 32000);

  if (train_src.empty()) problems.push_back("missing config key 'train_src'");
  else if (!fs::exists(train_src)) problems.push_back("train_src not found: " + train_src);
  if (train_tgt.empty()) problems.push_back("missing config key 'train_tgt'");
  else if (!fs::exists(train_tgt)) problems.push_back("train_tgt not found: " + train_tgt);
  if (mcfg.segmentation == prt::SegmentationMode::tree && mcfg.phrase_repr) {
    if (train_trees.empty())
      problems.push_back("tree segmentation requires config key 'train_trees'");
    else if (!fs::exists(train_trees))
      problems.push_back("train_trees not found: " + train_trees);
  }
  if (out_dir.empty()) problems.push_back("missing config key 'out_dir'");
  if (tcfg.warmup < 1) problems.push_back("warmup must be >= 1");
  if (tcfg.tokens_per_batch < 1) problems.push_back("tokens_per_batch must be >= 1");
  if (tcfg.accum < 1) problems.push_back("accum must be >= 1");
  if (tcfg.total_steps < 1) problems.push_back("total_steps must be >= 1");
  if (tcfg.max_len < 1) problems.push_back("max_len must be >= 1");
  if (tcfg.label_smoothing < 0 || tcfg.label_smoothing >= 1)
    problems.push_back("label_smoothing must be in [0, 1)");
  if (src_vocab_size <= prt::kReservedIds || tgt_vocab_size <= prt::kReservedIds)
    problems.push_back("vocab sizes must exceed the reserved ids");
  if (!problems.empty()) {
    std::string msg = "invalid training configuration:";
    for (const auto& p : problems) msg += "\n  - " + p;
    throw prt::ConfigError(msg);
  }

  bool want_trees =
      mcfg.phrase_repr && mcfg.segmentation == prt::SegmentationMode::tree;
  auto pairs =
      prt::load_parallel(train_src, train_tgt, want_trees ? train_trees : "", tcfg.max_len);
  if (pairs.empty()) throw prt::DataError("no usable sentence pairs after filtering");

  std::vector<std::vector<std::string>> src_text, tgt_text;
  for (const auto& p : pairs) {
    src_text.push_back(p.src);
    tgt_text.push_back(p.tgt);
  }
  prt::Vocab src_vocab = prt::Vocab::build(src_text, src_vocab_size);
  prt::Vocab tgt_vocab = prt::Vocab::build(tgt_text, tgt_vocab_size);
  mcfg.src_vocab = src_vocab.size();
  mcfg.tgt_vocab = tgt_vocab.size();
  mcfg.validate();

  fs::create_directories(out_dir);
  src_vocab.save(out_dir + "/vocab.src.txt");
  tgt_vocab.save(out_dir + "/vocab.tgt.txt");

  auto encoded = prt::encode_pairs(pairs, src_vocab, tgt_vocab, mcfg);

  // Resolved snapshot: model config plus the training keys.
  prt::KeyValueConfig resolved = mcfg.to_key_values();
  for (const auto& [k, v] : kv.entries())
    if (!resolved.has(k)) resolved.set(k, v);

  std::vector<std::string> inputs{train_src, train_tgt};
  if (want_trees) inputs.push_back(train_trees);
  write_manifest(out_dir + "/manifest.json", "train", tcfg.seed, resolved, inputs,
                 {out_dir + "/checkpoint_final.prt", out_dir + "/metrics.csv"});

  prt::Model model(mcfg, tcfg.seed);
  prt::Adam optimizer(model);

  std::ofstream metrics(out_dir + "/metrics.csv", std::ios::trunc);
  metrics << "step,loss,token_accuracy,lr,tokens_per_sec,target_tokens\n";

  prt::TrainHooks hooks;
  hooks.on_metrics = [&](const prt::TrainMetrics& m) {
    metrics << m.step << ',' << m.loss << ',' << m.token_accuracy << ',' << m.lr << ','
            << m.tokens_per_sec << ',' << m.target_tokens << '\n';
    metrics.flush();
    std::cout << "step " << m.step << "  loss " << m.loss << "  acc " << m.token_accuracy
              << "  lr " << m.lr << "  tok/s " << static_cast<int64_t>(m.tokens_per_sec)
              << std::endl;
  };
  hooks.on_checkpoint = [&](prt::Model& m, prt::Adam& opt, int64_t step) {
    auto state = opt.export_state();
    prt::save_checkpoint(out_dir + "/checkpoint_" + std::to_string(step) + ".prt",
                         m.params(), m.config(), &state);
  };
  prt::train_loop(model, optimizer, encoded, tcfg, hooks);

  auto state = optimizer.export_state();
  prt::save_checkpoint(out_dir + "/checkpoint_final.prt", model.params(), model.config(),
                       &state);
  std::cout << "wrote " << out_dir << "/checkpoint_final.prt" << std::endl;
  return 0;
}

// --- translate --------------------------------------------------------------------

struct TranslateArgs {
  std::string checkpoint, input, output, trees;
  std::string src_vocab, tgt_vocab;
  int beam = 4;
  int max_len = 256;
  bool length_norm = false;
};

prt::Vocab load_vocab_near(const std::string& explicit_path, const std::string& checkpoint,
                           const std::string& default_name) {
  if (!explicit_path.empty()) return prt::Vocab::load(explicit_path);
  fs::path p = fs::path(checkpoint).parent_path() / default_name;
  if (!fs::exists(p))
    throw prt::DataError("vocab file not found: " + p.string() +
                         " (pass --src-vocab/--tgt-vocab explicitly)");
  return prt::Vocab::load(p.string());
}

int cmd_translate(const TranslateArgs& args) {
  if (args.beam < 1) throw UsageError("--beam must be >= 1");
  if (args.max_len < 1) throw UsageError("--max-len must be >= 1");
  prt::LoadedCheckpoint ckpt = prt::load_checkpoint(args.checkpoint);
  bool tree_mode =
      ckpt.config.phrase_repr && ckpt.config.segmentation == prt::SegmentationMode::tree;
  if (tree_mode && args.trees.empty())
    throw UsageError("this checkpoint uses tree segmentation; pass --trees");

  prt::Vocab src_vocab = load_vocab_near(args.src_vocab, args.checkpoint, "vocab.src.txt");
  prt::Vocab tgt_vocab = load_vocab_near(args.tgt_vocab, args.checkpoint, "vocab.tgt.txt");
  if (src_vocab.size() != ckpt.config.src_vocab || tgt_vocab.size() != ckpt.config.tgt_vocab)
    throw prt::DataError("vocab sizes do not match the checkpoint (" +
                         std::to_string(src_vocab.size()) + "/" +
                         std::to_string(tgt_vocab.size()) + " vs " +
                         std::to_string(ckpt.config.src_vocab) + "/" +
                         std::to_string(ckpt.config.tgt_vocab) + ")");

  prt::Model model(ckpt.config, std::move(ckpt.params));
  model.set_train(false);

  auto lines = read_lines_checked(args.input);
  std::vector<std::string> tree_lines;
  if (tree_mode) {
    tree_lines = read_lines_checked(args.trees);
    if (tree_lines.size() != lines.size())
      throw prt::DataError("line-count mismatch between --input and --trees");
  }

  std::ostringstream out;
  for (size_t i = 0; i < lines.size(); ++i) {
    auto tokens = prt::split_tokens(lines[i]);
    if (tokens.empty()) {
      out << '\n';
      continue;
    }
    std::vector<int> ids = src_vocab.encode(tokens);
    prt::PhrasePlan plan;
    const prt::PhrasePlan* plan_ptr = nullptr;
    if (tree_mode) {
      std::unique_ptr<prt::ParseTree> tree;
      try {
        tree = prt::parse_bracketed(tree_lines[i]);
      } catch (const prt::ParseError& e) {
        throw prt::DataError("line " + std::to_string(i + 1) + ": " + e.what());
      }
      if (tree->leaf_tokens() != tokens)
        throw prt::DataError("line " + std::to_string(i + 1) +
                             ": tree leaves do not match the token line");
      plan = prt::plan_from_tree(*tree, static_cast<int>(ids.size()),
                                 model.config().tree_budget);
      plan_ptr = &plan;
    }
    prt::Hypothesis hyp = model.beam_search(
        ids, args.beam, args.max_len,
        args.length_norm ? prt::LengthHandling::average_logprob : prt::LengthHandling::none,
        plan_ptr);
    out << join_tokens(tgt_vocab.decode(hyp.tokens)) << '\n';
  }
  write_text_atomic(args.output, out.str());

  write_manifest(args.output + ".manifest.json", "translate", 0,
                 model.config().to_key_values(), {args.checkpoint, args.input}, {args.output});
  return 0;
}

// --- average -------------------------------------------------------------------------

struct AverageArgs {
  std::vector<std::string> checkpoints;
  std::string output;
};

int cmd_average(const AverageArgs& args) {
  prt::CheckpointData avg = prt::average_checkpoints(args.checkpoints);
  prt::write_checkpoint_raw(args.output, avg);
  std::cout << "averaged " << args.checkpoints.size() << " checkpoints into " << args.output
            << std::endl;
  return 0;
}

// --- eval ----------------------------------------------------------------------------

struct EvalArgs {
  std::string hypotheses, references, source, buckets, csv, manifest;
};

std::vector<int> parse_boundaries(const std::string& spec) {
  std::vector<int> out;
  std::istringstream in(spec);
  std::string item;
  while (std::getline(in, item, ',')) {
    try {
      out.push_back(std::stoi(item));
    } catch (const std::exception&) {
      throw UsageError("--buckets expects comma-separated integers, got: " + spec);
    }
  }
  return out;
}

int cmd_eval(const EvalArgs& args) {
  auto hyp_lines = read_lines_checked(args.hypotheses);
  auto ref_lines = read_lines_checked(args.references);
  if (hyp_lines.size() != ref_lines.size())
    throw prt::DataError("line-count mismatch: " + std::to_string(hyp_lines.size()) +
                         " hypotheses vs " + std::to_string(ref_lines.size()) + " references");
  std::vector<std::vector<std::string>> hyps, refs;
  for (const auto& l : hyp_lines) hyps.push_back(prt::split_tokens(l));
  for (const auto& l : ref_lines) refs.push_back(prt::split_tokens(l));

  prt::BleuReport rep = prt::bleu(hyps, refs);
  std::ostringstream table;
  table << std::fixed << std::setprecision(2);
  table << "BLEU = " << rep.score << "  (" << std::setprecision(1)
        << 100 * rep.precisions[0] << "/" << 100 * rep.precisions[1] << "/"
        << 100 * rep.precisions[2] << "/" << 100 * rep.precisions[3] << ", BP "
        << std::setprecision(3) << rep.brevity_penalty << ", hyp " << rep.candidate_tokens
        << " tokens, ref " << rep.reference_tokens << " tokens)";
  std::cout << table.str() << std::endl;

  std::ostringstream csv;
  csv << "bucket_lo,bucket_hi,sentences,bleu,p1,p2,p3,p4,bp\n";
  csv << "0,," << hyp_lines.size() << ',' << rep.score << ',' << rep.precisions[0] << ','
      << rep.precisions[1] << ',' << rep.precisions[2] << ',' << rep.precisions[3] << ','
      << rep.brevity_penalty << '\n';

  std::vector<std::string> inputs{args.hypotheses, args.references};
  if (!args.buckets.empty()) {
    if (args.source.empty())
      throw UsageError("--buckets needs --source to know the input lengths");
    auto src_lines = read_lines_checked(args.source);
    if (src_lines.size() != hyp_lines.size())
      throw prt::DataError("line-count mismatch between --source and hypotheses");
    std::vector<std::vector<std::string>> srcs;
    for (const auto& l : src_lines) srcs.push_back(prt::split_tokens(l));
    inputs.push_back(args.source);

    prt::LengthBucketReport buckets =
        prt::length_buckets(srcs, hyps, refs, parse_boundaries(args.buckets));
    std::cout << "by source length:" << std::endl;
    for (const auto& b : buckets.buckets) {
      std::ostringstream label;
      label << '[' << b.lo << ", " << (b.hi ? std::to_string(*b.hi) : "inf") << ')';
      std::cout << "  " << std::setw(10) << label.str() << "  n=" << std::setw(5)
                << b.sentences;
      if (b.bleu) {
        std::cout << "  BLEU = " << std::fixed << std::setprecision(2) << b.bleu->score;
      } else {
        std::cout << "  (empty)";
      }
      std::cout << std::endl;
      csv << b.lo << ',' << (b.hi ? std::to_string(*b.hi) : "") << ',' << b.sentences << ',';
      if (b.bleu)
        csv << b.bleu->score << ',' << b.bleu->precisions[0] << ',' << b.bleu->precisions[1]
            << ',' << b.bleu->precisions[2] << ',' << b.bleu->precisions[3] << ','
            << b.bleu->brevity_penalty;
      else
        csv << ",,,,,";
      csv << '\n';
    }
  }
  if (!args.csv.empty()) write_text_atomic(args.csv, csv.str());

  std::string manifest =
      args.manifest.empty() ? args.hypotheses + ".manifest.json" : args.manifest;
  prt::KeyValueConfig snapshot;
  snapshot.set("buckets", args.buckets);
  std::vector<std::string> outputs;
  if (!args.csv.empty()) outputs.push_back(args.csv);
  write_manifest(manifest, "eval", 0, snapshot, inputs, outputs);
  return 0;
}

// --- contrastive ------------------------------------------------------------------------

struct ContrastiveArgs {
  std::string checkpoint, pairs, src_vocab, tgt_vocab, csv, manifest;
};

int cmd_contrastive(const ContrastiveArgs& args) {
  prt::LoadedCheckpoint ckpt = prt::load_checkpoint(args.checkpoint);
  if (ckpt.config.phrase_repr && ckpt.config.segmentation == prt::SegmentationMode::tree)
    throw prt::ConfigError(
        "contrastive scoring needs an ngram-segmentation checkpoint; the pairs file carries "
        "no trees");
  prt::Vocab src_vocab = load_vocab_near(args.src_vocab, args.checkpoint, "vocab.src.txt");
  prt::Vocab tgt_vocab = load_vocab_near(args.tgt_vocab, args.checkpoint, "vocab.tgt.txt");
  prt::Model model(ckpt.config, std::move(ckpt.params));
  model.set_train(false);

  auto pairs = prt::load_contrastive(args.pairs);
  prt::SequenceScorer scorer = [&](const std::vector<std::string>& src,
                                   const std::vector<std::string>& tgt) {
    return model.score_sequence(src_vocab.encode(src), tgt_vocab.encode(tgt));
  };
  prt::ContrastiveReport rep = prt::contrastive_accuracy(scorer, pairs);

  std::cout << "contrastive accuracy = " << std::fixed << std::setprecision(4) << rep.accuracy
            << "  (" << rep.correct << "/" << rep.total << ")" << std::endl;
  std::ostringstream csv;
  csv << "distance,total,correct,accuracy\n";
  csv << "all," << rep.total << ',' << rep.correct << ',' << rep.accuracy << '\n';
  if (!rep.by_distance.empty()) {
    std::cout << "by subject-verb distance:" << std::endl;
    for (const auto& row : rep.by_distance) {
      std::string label = row.distance ? std::to_string(*row.distance) : "n/a";
      double acc = row.total ? static_cast<double>(row.correct) / row.total : 0.0;
      std::cout << "  " << std::setw(4) << label << "  " << row.correct << "/" << row.total
                << "  acc " << std::setprecision(4) << acc << std::endl;
      csv << label << ',' << row.total << ',' << row.correct << ',' << acc << '\n';
    }
  }
  if (!args.csv.empty()) write_text_atomic(args.csv, csv.str());

  std::string manifest = args.manifest.empty() ? args.pairs + ".manifest.json" : args.manifest;
  write_manifest(manifest, "contrastive", 0, ckpt.config.to_key_values(),
                 {args.checkpoint, args.pairs},
                 args.csv.empty() ? std::vector<std::string>{}
                                  : std::vector<std::string>{args.csv});
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"phrase-representation transformer toolkit"};
  app.require_subcommand(1);
  bool deterministic = false;
  app.add_flag("--deterministic", deterministic, "force single-threaded execution");

  SegmentArgs seg;
  auto* seg_cmd = app.add_subcommand("segment", "split token lines into phrases");
  seg_cmd->add_option("--input", seg.input, "token file, one sentence per line")->required();
  seg_cmd->add_option("--output", seg.output, "output file (phrases joined by ' ||| ')")
      ->required();
  seg_cmd->add_option("--mode", seg.mode, "ngram or tree (default ngram)");
  seg_cmd->add_option("--trees", seg.trees, "bracketed trees, line-aligned with --input");
  seg_cmd->add_option("--budget", seg.budget, "tree token budget: fixed or paper");

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "train a model from a config file");
  train_cmd->add_option("--config", train.config_path, "key = value config file")->required();
  train_cmd->add_option("--out", train.out_dir, "output directory (overrides out_dir)");
  train_cmd->add_option("--set", train.sets,
                        "override any config key, e.g. --set phrase_repr=false");

  TranslateArgs tr;
  auto* tr_cmd = app.add_subcommand("translate", "decode a token file with a checkpoint");
  tr_cmd->add_option("--checkpoint", tr.checkpoint, "model checkpoint")->required();
  tr_cmd->add_option("--input", tr.input, "source token file")->required();
  tr_cmd->add_option("--output", tr.output, "hypotheses file")->required();
  tr_cmd->add_option("--beam", tr.beam, "beam size (default 4)");
  tr_cmd->add_option("--max-len", tr.max_len, "maximum output length");
  tr_cmd->add_option("--trees", tr.trees, "bracketed trees for tree-segmentation models");
  tr_cmd->add_option("--src-vocab", tr.src_vocab, "source vocab (default: next to checkpoint)");
  tr_cmd->add_option("--tgt-vocab", tr.tgt_vocab, "target vocab (default: next to checkpoint)");
  tr_cmd->add_flag("--length-norm", tr.length_norm, "rank by average log-probability");

  AverageArgs avg;
  auto* avg_cmd = app.add_subcommand("average", "element-wise mean of checkpoints");
  avg_cmd->add_option("checkpoints", avg.checkpoints, "checkpoint files")->required();
  avg_cmd->add_option("--output", avg.output, "output checkpoint")->required();

  EvalArgs ev;
  auto* ev_cmd = app.add_subcommand("eval", "corpus BLEU, optionally by length bucket");
  ev_cmd->add_option("--hypotheses", ev.hypotheses, "hypotheses file")->required();
  ev_cmd->add_option("--references", ev.references, "reference file")->required();
  ev_cmd->add_option("--source", ev.source, "source file (needed for --buckets)");
  ev_cmd->add_option("--buckets", ev.buckets, "comma-separated boundaries, e.g. 15,30,45");
  ev_cmd->add_option("--csv", ev.csv, "write the report as CSV");
  ev_cmd->add_option("--manifest", ev.manifest,
                     "manifest path (default <hypotheses>.manifest.json)");

  ContrastiveArgs con;
  auto* con_cmd = app.add_subcommand("contrastive", "accuracy on contrastive pairs");
  con_cmd->add_option("--checkpoint", con.checkpoint, "model checkpoint")->required();
  con_cmd->add_option("--pairs", con.pairs, "TSV: source, reference, contrastive, distance?")
      ->required();
  con_cmd->add_option("--src-vocab", con.src_vocab, "source vocab");
  con_cmd->add_option("--tgt-vocab", con.tgt_vocab, "target vocab");
  con_cmd->add_option("--csv", con.csv, "write the report as CSV");
  con_cmd->add_option("--manifest", con.manifest,
                      "manifest path (default <pairs>.manifest.json)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << std::endl;
    return 1;
  }

#ifdef _OPENMP
  if (deterministic) omp_set_num_threads(1);
#endif

  try {
    if (*seg_cmd) return cmd_segment(seg);
    if (*train_cmd) return cmd_train(train);
    if (*tr_cmd) return cmd_translate(tr);
    if (*avg_cmd) return cmd_average(avg);
    if (*ev_cmd) return cmd_eval(ev);
    if (*con_cmd) return cmd_contrastive(con);
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << std::endl;
    return 1;
  } catch (const prt::DataError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 2;
  } catch (const prt::ParseError& e) {
    std::cerr << "data error: " << e.what() << std::endl;
    return 2;
  } catch (const prt::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const prt::CheckpointError& e) {
    std::cerr << "checkpoint error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 3;
  }
  return 0;
}
