#include "doctest.h"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "prt/model.hpp"

namespace fs = std::filesystem;

namespace {

const std::string kBin = PRT_BINARY;
const fs::path kDir = "/tmp/prt_cli_work";

int run(const std::string& args, const std::string& out_file = "") {
  std::string cmd = kBin + " " + args;
  if (!out_file.empty()) cmd += " >" + out_file + " 2>&1";
  else cmd += " >/dev/null 2>&1";
  int status = std::system(cmd.c_str());
  return WEXITSTATUS(status);
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream out(path, std::ios::trunc);
  out << content;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

struct Workspace {
  Workspace() {
    fs::remove_all(kDir);
    fs::create_directories(kDir);
  }
};

std::string p(const std::string& name) { return (kDir / name).string(); }

}  // namespace

TEST_CASE("cli segment") {
  Workspace ws;
  write_file(p("in.txt"), "t1 t2 t3 t4 t5 t6 t7\n");

  SUBCASE("seven tokens make three phrases") {
    CHECK(run("segment --input " + p("in.txt") + " --output " + p("out.txt")) == 0);
    CHECK(read_file(p("out.txt")) == "t1 t2 t3 ||| t4 t5 t6 ||| t7\n");
  }
  SUBCASE("idempotent byte-for-byte") {
    REQUIRE(run("segment --input " + p("in.txt") + " --output " + p("a.txt")) == 0);
    REQUIRE(run("segment --input " + p("in.txt") + " --output " + p("b.txt")) == 0);
    CHECK(read_file(p("a.txt")) == read_file(p("b.txt")));
  }
  SUBCASE("tree mode without trees is a usage error") {
    CHECK(run("segment --input " + p("in.txt") + " --mode tree --output " + p("x.txt")) == 1);
  }
  SUBCASE("missing input is a data error") {
    CHECK(run("segment --input " + p("nope.txt") + " --output " + p("x.txt")) == 2);
  }
  SUBCASE("unknown flags are errors") {
    CHECK(run("segment --input " + p("in.txt") + " --output " + p("x.txt") + " --bogus") == 1);
  }
  SUBCASE("tree mode emits constituent phrases") {
    write_file(p("toks.txt"), "a b c\n");
    write_file(p("trees.txt"), "(S (A a) (B b c))\n");
    CHECK(run("segment --input " + p("toks.txt") + " --trees " + p("trees.txt") +
              " --mode tree --output " + p("t.txt")) == 0);
    CHECK(read_file(p("t.txt")) == "a b c\n");
  }
}

TEST_CASE("cli train, translate, average, eval, contrastive") {
  Workspace ws;
  // tiny copy corpus
  {
    std::ostringstream src;
    prt::Rng rng(9);
    for (int i = 0; i < 60; ++i) {
      int len = rng.uniform_int(2, 6);
      for (int t = 0; t < len; ++t)
        src << "w" << rng.uniform_int(0, 7) << (t + 1 < len ? " " : "");
      src << "\n";
    }
    write_file(p("train.src"), src.str());
    write_file(p("train.tgt"), read_file(p("train.src")));
  }
  write_file(p("train.cfg"),
             "model_dim = 16\nffn_dim = 32\nn_heads = 2\nenc_layers = 1\ndec_layers = 1\n"
             "dropout = 0.0\ntrain_src = " + p("train.src") + "\ntrain_tgt = " + p("train.tgt") +
             "\ntokens_per_batch = 120\nwarmup = 20\ntotal_steps = 30\ncheckpoint_interval = 20\n"
             "log_interval = 10\nseed = 4\nout_dir = " + p("run") + "\n");

  SUBCASE("training writes checkpoints, metrics and a manifest") {
    REQUIRE(run("train --config " + p("train.cfg"), p("train.log")) == 0);
    CHECK(fs::exists(p("run") + "/checkpoint_final.prt"));
    CHECK(fs::exists(p("run") + "/checkpoint_20.prt"));
    CHECK(fs::exists(p("run") + "/metrics.csv"));
    CHECK(fs::exists(p("run") + "/manifest.json"));
    CHECK(fs::exists(p("run") + "/vocab.src.txt"));
    std::string metrics = read_file(p("run") + "/metrics.csv");
    CHECK(metrics.find("step,loss") != std::string::npos);

    SUBCASE("translate is byte-stable and handles empty lines") {
      write_file(p("dec.src"), "w1 w2 w3\nw4 w5\n\n");
      std::string base = "translate --checkpoint " + p("run") + "/checkpoint_final.prt" +
                         " --input " + p("dec.src") + " --max-len 12";
      REQUIRE(run(base + " --beam 1 --output " + p("hyp1.txt")) == 0);
      REQUIRE(run(base + " --beam 1 --output " + p("hyp1b.txt")) == 0);
      CHECK(read_file(p("hyp1.txt")) == read_file(p("hyp1b.txt")));
      REQUIRE(run(base + " --beam 4 --output " + p("hyp4.txt")) == 0);
      CHECK(fs::exists(p("hyp4.txt") + ".manifest.json"));
      // empty input line stays an empty output line
      std::string hyp = read_file(p("hyp1.txt"));
      CHECK(std::count(hyp.begin(), hyp.end(), '\n') == 3);
    }
    SUBCASE("empty input file gives an empty output file") {
      write_file(p("empty.src"), "");
      REQUIRE(run("translate --checkpoint " + p("run") + "/checkpoint_final.prt --input " +
                  p("empty.src") + " --output " + p("empty.hyp")) == 0);
      CHECK(read_file(p("empty.hyp")).empty());
    }
    SUBCASE("averaging one checkpoint keeps the parameter values") {
      REQUIRE(run("average " + p("run") + "/checkpoint_final.prt --output " + p("avg.prt")) ==
              0);
      prt::CheckpointData a = prt::read_checkpoint_raw(p("run") + "/checkpoint_final.prt");
      prt::CheckpointData b = prt::read_checkpoint_raw(p("avg.prt"));
      for (const auto& [name, shape, values] : b.tensors) {
        CHECK(name.rfind("opt.", 0) != 0);  // optimizer state dropped
        const auto* orig = a.find(name);
        REQUIRE(orig != nullptr);
        CHECK(*orig == values);
      }
    }
    SUBCASE("averaging mismatched configs fails") {
      REQUIRE(run("train --config " + p("train.cfg") + " --set model_dim=32 --set n_heads=4" +
                  " --out " + p("run32"), p("t32.log")) == 0);
      CHECK(run("average " + p("run") + "/checkpoint_final.prt " + p("run32") +
                "/checkpoint_final.prt --output " + p("bad.prt")) == 2);
    }
    SUBCASE("contrastive runs against a trained checkpoint") {
      write_file(p("pairs.tsv"), "w1 w2\tw1 w2\tw1 w7\t3\nw3\tw3\tw4\n");
      REQUIRE(run("contrastive --checkpoint " + p("run") + "/checkpoint_final.prt --pairs " +
                      p("pairs.tsv") + " --csv " + p("con.csv"),
                  p("con.log")) == 0);
      std::string csv = read_file(p("con.csv"));
      CHECK(csv.find("distance,total,correct,accuracy") != std::string::npos);
      CHECK(fs::exists(p("pairs.tsv") + ".manifest.json"));
    }
  }

  SUBCASE("baseline flag trains without phrase machinery") {
    REQUIRE(run("train --config " + p("train.cfg") + " --set phrase_repr=false" +
                    " --set attentive=false --set transparent=false --out " + p("base"),
                p("tb.log")) == 0);
    prt::LoadedCheckpoint ckpt = prt::load_checkpoint(p("base") + "/checkpoint_final.prt");
    CHECK_FALSE(ckpt.config.phrase_repr);
  }
  SUBCASE("missing corpus is reported before training starts") {
    write_file(p("bad.cfg"), "train_src = /nonexistent\ntrain_tgt = /nonexistent\nout_dir = " +
                                 p("x") + "\n");
    CHECK(run("train --config " + p("bad.cfg")) == 2);
  }
}

TEST_CASE("cli eval") {
  Workspace ws;
  write_file(p("ref.txt"), "the cat sat on the mat\ndogs bark loudly\n");

  SUBCASE("identical corpora score 100") {
    REQUIRE(run("eval --hypotheses " + p("ref.txt") + " --references " + p("ref.txt") +
                    " --csv " + p("eval.csv"),
                p("eval.out")) == 0);
    std::string out = read_file(p("eval.out"));
    CHECK(out.find("BLEU = 100.00") != std::string::npos);
    CHECK(fs::exists(p("ref.txt") + ".manifest.json"));
  }
  SUBCASE("bucket flag adds per-bucket rows and needs a source") {
    write_file(p("src.txt"), "a b c d e f g h i j k l m n o p q r s t\nkurz\n");
    REQUIRE(run("eval --hypotheses " + p("ref.txt") + " --references " + p("ref.txt") +
                    " --source " + p("src.txt") + " --buckets 15 --csv " + p("b.csv"),
                p("b.out")) == 0);
    std::string out = read_file(p("b.out"));
    CHECK(out.find("by source length:") != std::string::npos);
    CHECK(out.find("[0, 15)") != std::string::npos);
    CHECK(out.find("[15, inf)") != std::string::npos);
    CHECK(run("eval --hypotheses " + p("ref.txt") + " --references " + p("ref.txt") +
              " --buckets 15") == 1);
  }
  SUBCASE("misaligned files are a data error") {
    write_file(p("short.txt"), "one line\n");
    CHECK(run("eval --hypotheses " + p("ref.txt") + " --references " + p("short.txt")) == 2);
  }
}
