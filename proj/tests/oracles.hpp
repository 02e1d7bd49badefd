// Test-only reference implementations, written as straight-line loops so the
// production path is checked against an independent route:
//   - central finite differences for gradient checks
//   - a naive multi-head attention / combination / phrase pipeline
//   - a plain-array baseline transformer forward (bit-comparable)

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "prt/model.hpp"

namespace oracle {

// Scoped precision switch; gradient checks run in 64-bit mode.
struct PrecisionGuard {
  explicit PrecisionGuard(prt::Precision p) : prev_(prt::precision()) { prt::set_precision(p); }
  ~PrecisionGuard() { prt::set_precision(prev_); }
  PrecisionGuard(const PrecisionGuard&) = delete;

 private:
  prt::Precision prev_;
};

// --- finite differences ------------------------------------------------------

struct GradCheck {
  double max_rel_err = 0.0;
  std::string worst
      = "";  // "name[i]" of the worst element
  int64_t checked = 0;
};

// loss_fn rebuilds the computation from the current parameter values. For
// every listed parameter element (or a strided sample when stride > 1),
// compares the analytic gradient with (f(p+h) - f(p-h)) / 2h. Elements pass
// when |a-f| <= tol*max(|a|,|f|) or |a-f| <= 1e-8.
GradCheck finite_difference_check(const std::function<prt::Tensor()>& loss_fn,
                                  const std::vector<std::pair<std::string, prt::Tensor>>& params,
                                  double step = 1e-5, int64_t stride = 1);

// --- naive attention blocks ----------------------------------------------------

// Single-sequence multi-head attention on plain arrays; valid[q*Lk + k] = 1
// means position q may attend key k (empty = all valid).
std::vector<double> mha_forward(const std::vector<double>& q, int Lq,
                                const std::vector<double>& k, int Lk,
                                const std::vector<double>& v, int d, int heads,
                                const std::vector<uint8_t>& valid, prt::MultiHeadParams& p);

std::vector<double> layer_norm_rows(const std::vector<double>& x, int rows, int dim,
                                    const std::vector<double>& gain,
                                    const std::vector<double>& bias, double eps = 1e-6);

// Eq.-style attentive combination for one sequence.
std::vector<double> attentive_combination(const std::vector<double>& x, int len,
                                          const std::vector<double>& phrases, int n_phrases,
                                          int d, prt::CombinerParams& p);

// Per-phrase loop over a plan: glance, score, softmax, weighted sum.
std::vector<double> phrase_sequence(const std::vector<double>& x, int seql, int d,
                                    const prt::PhrasePlan& plan, prt::PhraseScorerParams* scorer,
                                    bool use_max, bool attentive);

// Baseline transformer forward for one sentence pair (no phrase machinery);
// identical arithmetic order to the production path, so outputs compare
// bit-for-bit in 64-bit mode.
std::vector<double> baseline_logits(prt::ModelParams& params, const prt::ModelConfig& cfg,
                                    const std::vector<int>& src_ids,
                                    const std::vector<int>& tgt_in_ids);

// Second from-scratch corpus BLEU (4-gram, clipped, brevity penalty) written
// without hash maps; cross-checks the production scorer.
double bleu_reference(const std::vector<std::vector<std::string>>& candidates,
                      const std::vector<std::vector<std::string>>& references);

// Random constituency tree over `leaves` tokens; root always internal, so
// serialize/parse round trips. `counter` numbers the leaf tokens.
std::unique_ptr<prt::ParseTree> random_tree(prt::Rng& rng, int leaves, int* counter);

}  // namespace oracle
