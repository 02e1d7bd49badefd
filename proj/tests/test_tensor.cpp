#include "doctest.h"
#include "oracles.hpp"
#include "prt/tensor.hpp"

#include <cmath>

using namespace prt;
using oracle::PrecisionGuard;

namespace {

Tensor rand_param(const Shape& s, Rng& rng, double scale = 1.0) {
  std::vector<double> v(numel(s));
  for (auto& x : v) x = rng.uniform(-scale, scale);
  return parameter(s, std::move(v));
}

// Weighted sum keeps gradients asymmetric across elements.
Tensor weighted_sum(const Tensor& t, Rng& rng) {
  std::vector<double> w(t.size());
  for (auto& x : w) x = rng.uniform(0.5, 1.5);
  return sum_all(mul(t, from_values(t.shape(), std::move(w))));
}

}  // namespace

TEST_CASE("tensor invariants") {
  PrecisionGuard guard(Precision::f64);
  CHECK_THROWS_AS(from_values({2, 3}, {1.0}), TensorError);
  CHECK_THROWS_AS(zeros({0, 3}), TensorError);

  Tensor t = from_values({2, 2}, {1, 2, 3, 4});
  CHECK(t.size() == 4);
  CHECK(t.at({1, 0}) == 3.0);

  Tensor p = parameter({3}, {1, 2, 3});
  backward(sum_all(p));
  CHECK(p.grad().size() == 3);  // grad matches the value shape
}

TEST_CASE("matmul identity and small case") {
  PrecisionGuard guard(Precision::f64);
  Tensor eye = from_values({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  Tensor m = from_values({3, 3}, {1, 2, 3, 4, 5, 6, 7, 8, 9});
  Tensor out = matmul(eye, m);
  for (int i = 0; i < 9; ++i) CHECK(out.data()[i] == m.data()[i]);

  Tensor a = from_values({2, 2}, {1, 2, 3, 4});
  Tensor b = from_values({2, 1}, {1, 1});
  Tensor c = matmul(a, b);
  CHECK(c.at({0, 0}) == 3.0);
  CHECK(c.at({1, 0}) == 7.0);

  CHECK_THROWS_WITH_AS(matmul(a, from_values({3, 1}, {1, 1, 1})),
                       doctest::Contains("[2x2]"), TensorError);
}

TEST_CASE("matmul gradient matches finite differences") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(7);
  Tensor a = rand_param({2, 3}, rng);
  Tensor b = rand_param({3, 4}, rng);
  auto loss = [&] { return sum_all(matmul(a, b)); };
  auto res = oracle::finite_difference_check(loss, {{"a", a}, {"b", b}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("batched matmul with broadcast gradient") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(11);
  Tensor a = rand_param({2, 3, 4, 5}, rng);
  Tensor b = rand_param({5, 6}, rng);
  auto loss = [&] { return weighted_sum(matmul(a, b), rng); };
  // weights must be stable across re-evaluation: freeze them once
  Rng wrng(3);
  std::vector<double> w(numel({2, 3, 4, 6}));
  for (auto& x : w) x = wrng.uniform(0.5, 1.5);
  Tensor weights = from_values({2, 3, 4, 6}, std::move(w));
  auto loss2 = [&] { return sum_all(mul(matmul(a, b), weights)); };
  auto res = oracle::finite_difference_check(loss2, {{"a", a}, {"b", b}});
  CHECK(res.max_rel_err < 1e-6);
  (void)loss;
}

TEST_CASE("masked_softmax values") {
  PrecisionGuard guard(Precision::f64);
  Tensor equal = from_values({4}, {2.0, 2.0, 2.0, 2.0});
  Tensor sm = masked_softmax(equal, AttentionMask::none());
  for (int i = 0; i < 4; ++i) CHECK(sm.data()[i] == doctest::Approx(0.25));

  Tensor two = from_values({2}, {std::log(2.0), 0.0});
  Tensor sm2 = masked_softmax(two, AttentionMask::none());
  CHECK(sm2.data()[0] == doctest::Approx(2.0 / 3.0));
  CHECK(sm2.data()[1] == doctest::Approx(1.0 / 3.0));

  AttentionMask m;
  m.kind = MaskKind::padding;
  m.shape = {2};
  m.valid = {1, 0};
  Tensor sm3 = masked_softmax(from_values({2}, {5.0, 100.0}), m);
  CHECK(sm3.data()[0] == 1.0);
  CHECK(sm3.data()[1] == 0.0);  // masked position is exactly zero

  AttentionMask all_invalid;
  all_invalid.kind = MaskKind::padding;
  all_invalid.shape = {2};
  all_invalid.valid = {0, 0};
  CHECK_THROWS_AS(masked_softmax(from_values({2}, {1.0, 2.0}), all_invalid), TensorError);
}

TEST_CASE("masked_softmax row sums and zeros over random rows") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(21);
  for (int trial = 0; trial < 200; ++trial) {
    int cols = rng.uniform_int(1, 9);
    std::vector<double> scores(cols);
    for (auto& s : scores) s = rng.uniform(-30.0, 30.0);
    std::vector<uint8_t> valid(cols);
    bool any = false;
    for (auto& v : valid) {
      v = rng.uniform(0.0, 1.0) < 0.7 ? 1 : 0;
      any = any || v;
    }
    if (!any) valid[rng.uniform_int(0, cols - 1)] = 1;
    AttentionMask m;
    m.kind = MaskKind::padding;
    m.shape = {cols};
    m.valid = valid;
    Tensor out = masked_softmax(from_values({cols}, scores), m);
    double sum = 0.0;
    for (int j = 0; j < cols; ++j) {
      if (!valid[j]) CHECK(out.data()[j] == 0.0);
      CHECK(out.data()[j] >= 0.0);
      sum += out.data()[j];
    }
    CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
  }
}

TEST_CASE("masked_softmax gradient") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(5);
  Tensor scores = rand_param({3, 5}, rng, 2.0);
  AttentionMask m;
  m.kind = MaskKind::padding;
  m.shape = {3, 5};
  m.valid = {1, 1, 0, 1, 1, 1, 1, 1, 1, 1, 0, 1, 1, 1, 0};
  Rng wrng(9);
  std::vector<double> w(15);
  for (auto& x : w) x = wrng.uniform(0.5, 1.5);
  Tensor weights = from_values({3, 5}, std::move(w));
  auto loss = [&] { return sum_all(mul(masked_softmax(scores, m), weights)); };
  auto res = oracle::finite_difference_check(loss, {{"scores", scores}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("layer_norm values") {
  PrecisionGuard guard(Precision::f64);
  Tensor gain = from_values({3}, {1, 1, 1});
  Tensor bias = from_values({3}, {0, 0, 0});
  Tensor constant = from_values({3}, {5, 5, 5});
  Tensor out = layer_norm(constant, gain, bias, 1e-6);
  for (int i = 0; i < 3; ++i) CHECK(out.data()[i] == doctest::Approx(0.0));

  Tensor x = from_values({2}, {1, 3});
  Tensor out2 = layer_norm(x, from_values({2}, {1, 1}), from_values({2}, {0, 0}), 1e-12);
  CHECK(out2.data()[0] == doctest::Approx(-1.0));
  CHECK(out2.data()[1] == doctest::Approx(1.0));
}

TEST_CASE("layer_norm normalizes each position") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(13);
  int rows = 6, dim = 8;
  Tensor x = rand_param({rows, dim}, rng, 3.0);
  Tensor out = layer_norm(x, full({dim}, 1.0), zeros({dim}), 1e-12);
  for (int r = 0; r < rows; ++r) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < dim; ++j) mean += out.data()[r * dim + j];
    mean /= dim;
    for (int j = 0; j < dim; ++j) {
      double d = out.data()[r * dim + j] - mean;
      var += d * d;
    }
    var /= dim;
    CHECK(std::fabs(mean) < 1e-5);
    CHECK(std::fabs(var - 1.0) < 1e-5);
  }
}

TEST_CASE("layer_norm gradient") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(17);
  Tensor x = rand_param({4, 6}, rng, 2.0);
  Tensor gain = rand_param({6}, rng);
  Tensor bias = rand_param({6}, rng);
  Rng wrng(2);
  std::vector<double> w(24);
  for (auto& v : w) v = wrng.uniform(0.5, 1.5);
  Tensor weights = from_values({4, 6}, std::move(w));
  auto loss = [&] { return sum_all(mul(layer_norm(x, gain, bias, 1e-6), weights)); };
  auto res = oracle::finite_difference_check(loss, {{"x", x}, {"gain", gain}, {"bias", bias}});
  CHECK(res.max_rel_err < 1e-6);
}

TEST_CASE("backward semantics") {
  PrecisionGuard guard(Precision::f64);
  Tensor p = parameter({4}, {1, -2, 3, 0.5});

  SUBCASE("sum gives ones") {
    backward(sum_all(p));
    for (double g : p.grad()) CHECK(g == 1.0);
  }
  SUBCASE("half sum of squares gives the parameter back") {
    backward(scalar_mul(sum_all(mul(p, p)), 0.5));
    auto g = p.grad();
    for (int i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(p.data()[i]));
  }
  SUBCASE("non-scalar loss rejected") {
    CHECK_THROWS_AS(backward(mul(p, p)), TensorError);
  }
  SUBCASE("repeated backward accumulates until cleared") {
    backward(sum_all(p));
    backward(sum_all(p));
    for (double g : p.grad()) CHECK(g == 2.0);
    p.zero_grad();
    for (double g : p.grad()) CHECK(g == 0.0);
  }
  SUBCASE("grads of parameters off the loss path stay exactly zero") {
    Tensor unused = parameter({3}, {9, 9, 9});
    backward(sum_all(p));
    for (double g : unused.grad()) CHECK(g == 0.0);
  }
}

TEST_CASE("elementwise broadcasting and gradients") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(23);
  Tensor a = rand_param({2, 3, 4}, rng);
  Tensor b = rand_param({4}, rng);
  Tensor c = rand_param({3, 1}, rng);

  Tensor s = add(a, b);
  CHECK(s.shape() == Shape{2, 3, 4});
  CHECK(s.at({1, 2, 3}) == doctest::Approx(a.at({1, 2, 3}) + b.at({3})));

  Rng wrng(4);
  std::vector<double> w(24);
  for (auto& v : w) v = wrng.uniform(0.5, 1.5);
  Tensor weights = from_values({2, 3, 4}, std::move(w));
  auto loss = [&] { return sum_all(mul(mul(add(a, b), c), weights)); };
  auto res = oracle::finite_difference_check(loss, {{"a", a}, {"b", b}, {"c", c}});
  CHECK(res.max_rel_err < 1e-6);

  CHECK_THROWS_AS(add(from_values({2}, {1, 2}), from_values({3}, {1, 2, 3})), TensorError);
}

TEST_CASE("layout ops and gradients") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(31);
  Tensor a = rand_param({2, 3, 4}, rng);
  Tensor b = rand_param({2, 3, 2}, rng);

  Rng wrng(6);
  auto frozen = [&](const Shape& s) {
    std::vector<double> w(numel(s));
    for (auto& v : w) v = wrng.uniform(0.5, 1.5);
    return from_values(s, std::move(w));
  };

  SUBCASE("permute") {
    Tensor weights = frozen({4, 2, 3});
    auto loss = [&] { return sum_all(mul(permute(a, {2, 0, 1}), weights)); };
    CHECK(oracle::finite_difference_check(loss, {{"a", a}}).max_rel_err < 1e-6);
    CHECK(permute(a, {2, 0, 1}).at({3, 1, 2}) == a.at({1, 2, 3}));
  }
  SUBCASE("reshape round-trips values") {
    Tensor r = reshape(a, {6, 4});
    CHECK(r.data() == a.data());
    Tensor weights = frozen({6, 4});
    auto loss = [&] { return sum_all(mul(reshape(a, {6, 4}), weights)); };
    CHECK(oracle::finite_difference_check(loss, {{"a", a}}).max_rel_err < 1e-6);
  }
  SUBCASE("concat_last") {
    Tensor cat = concat_last(a, b);
    CHECK(cat.shape() == Shape{2, 3, 6});
    CHECK(cat.at({1, 1, 4}) == b.at({1, 1, 0}));
    Tensor weights = frozen({2, 3, 6});
    auto loss = [&] { return sum_all(mul(concat_last(a, b), weights)); };
    CHECK(oracle::finite_difference_check(loss, {{"a", a}, {"b", b}}).max_rel_err < 1e-6);
  }
  SUBCASE("narrow and expand") {
    Tensor n = narrow(a, 1, 1, 2);
    CHECK(n.shape() == Shape{2, 2, 4});
    CHECK(n.at({0, 0, 0}) == a.at({0, 1, 0}));
    Tensor weights = frozen({2, 2, 4});
    auto loss = [&] { return sum_all(mul(narrow(a, 1, 1, 2), weights)); };
    CHECK(oracle::finite_difference_check(loss, {{"a", a}}).max_rel_err < 1e-6);

    Tensor e = rand_param({2, 1, 4}, rng);
    Tensor w2 = frozen({2, 5, 4});
    auto loss2 = [&] { return sum_all(mul(expand_axis(e, 1, 5), w2)); };
    CHECK(oracle::finite_difference_check(loss2, {{"e", e}}).max_rel_err < 1e-6);
  }
  SUBCASE("sum_axis") {
    Tensor sa = sum_axis(a, 1);
    CHECK(sa.shape() == Shape{2, 4});
    double manual = a.at({0, 0, 2}) + a.at({0, 1, 2}) + a.at({0, 2, 2});
    CHECK(sa.at({0, 2}) == doctest::Approx(manual));
    Tensor weights = frozen({2, 4});
    auto loss = [&] { return sum_all(mul(sum_axis(a, 1), weights)); };
    CHECK(oracle::finite_difference_check(loss, {{"a", a}}).max_rel_err < 1e-6);
  }
}

TEST_CASE("activations, log_softmax, pick_last gradients") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(37);
  Tensor a = rand_param({3, 5}, rng, 2.0);
  Rng wrng(8);
  std::vector<double> w(15);
  for (auto& v : w) v = wrng.uniform(0.5, 1.5);
  Tensor weights = from_values({3, 5}, std::move(w));

  auto relu_loss = [&] { return sum_all(mul(relu(a), weights)); };
  CHECK(oracle::finite_difference_check(relu_loss, {{"a", a}}).max_rel_err < 1e-6);

  auto sig_loss = [&] { return sum_all(mul(sigmoid(a), weights)); };
  CHECK(oracle::finite_difference_check(sig_loss, {{"a", a}}).max_rel_err < 1e-6);

  auto lsm_loss = [&] { return sum_all(mul(log_softmax(a), weights)); };
  CHECK(oracle::finite_difference_check(lsm_loss, {{"a", a}}).max_rel_err < 1e-6);

  std::vector<int> picks{1, 4, 0};
  auto pick_loss = [&] { return sum_all(pick_last(a, picks)); };
  CHECK(oracle::finite_difference_check(pick_loss, {{"a", a}}).max_rel_err < 1e-6);
  Tensor picked = pick_last(a, picks);
  CHECK(picked.data()[0] == a.at({0, 1}));
  CHECK(picked.data()[2] == a.at({2, 0}));
}

TEST_CASE("embedding and gather_slots") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(41);
  Tensor table = rand_param({6, 3}, rng);
  std::vector<int> ids{2, 0, 5, 2};

  Tensor emb = embedding(table, ids, {4});
  CHECK(emb.shape() == Shape{4, 3});
  CHECK(emb.at({0, 1}) == table.at({2, 1}));
  CHECK_THROWS_WITH_AS(embedding(table, {6}, {1}), doctest::Contains("out of range"),
                       TensorError);

  auto emb_loss = [&] { return sum_all(embedding(table, ids, {4})); };
  CHECK(oracle::finite_difference_check(emb_loss, {{"table", table}}).max_rel_err < 1e-6);

  // gather with a padding slot
  Tensor x = rand_param({1, 4, 3}, rng);
  std::vector<int> grid{0, 1, -1, 2, 3, -1};  // 1 sentence, 2 phrases, width 3
  Tensor g = gather_slots(x, grid, 1, 2, 3);
  CHECK(g.shape() == Shape{1, 2, 3, 3});
  CHECK(g.at({0, 0, 1, 2}) == x.at({0, 1, 2}));
  CHECK(g.at({0, 0, 2, 0}) == 0.0);  // pad slot is a zero row
  auto gather_loss = [&] { return sum_all(gather_slots(x, grid, 1, 2, 3)); };
  CHECK(oracle::finite_difference_check(gather_loss, {{"x", x}}).max_rel_err < 1e-6);
}

TEST_CASE("masked pooling") {
  PrecisionGuard guard(Precision::f64);
  Tensor x = from_values({2, 2}, {1, 3, 3, 1});
  std::vector<uint8_t> all{1, 1};
  Tensor mean = masked_mean(x, all);
  CHECK(mean.data()[0] == doctest::Approx(2.0));
  CHECK(mean.data()[1] == doctest::Approx(2.0));
  Tensor mx = masked_max(x, all);
  CHECK(mx.data()[0] == doctest::Approx(3.0));
  CHECK(mx.data()[1] == doctest::Approx(3.0));

  std::vector<uint8_t> first_only{1, 0};
  Tensor excl = masked_mean(from_values({2, 2}, {1, 3, 9, 9}), first_only);
  CHECK(excl.data()[0] == 1.0);
  CHECK(excl.data()[1] == 3.0);

  std::vector<uint8_t> none{0, 0};
  CHECK_THROWS_AS(masked_mean(x, none), TensorError);
  CHECK_THROWS_AS(masked_max(x, none), TensorError);

  Rng rng(43);
  Tensor big = rand_param({2, 3, 4, 5}, rng);
  std::vector<uint8_t> mask(2 * 3 * 4, 1);
  mask[3] = 0;
  mask[7] = 0;
  Rng wrng(12);
  std::vector<double> w(2 * 3 * 5);
  for (auto& v : w) v = wrng.uniform(0.5, 1.5);
  Tensor weights = from_values({2, 3, 5}, std::move(w));
  auto mean_loss = [&] { return sum_all(mul(masked_mean(big, mask), weights)); };
  CHECK(oracle::finite_difference_check(mean_loss, {{"big", big}}).max_rel_err < 1e-6);
  auto max_loss = [&] { return sum_all(mul(masked_max(big, mask), weights)); };
  CHECK(oracle::finite_difference_check(max_loss, {{"big", big}}).max_rel_err < 1e-6);
}

TEST_CASE("dropout") {
  PrecisionGuard guard(Precision::f64);
  Rng rng(47);
  Tensor a = from_values({1000}, std::vector<double>(1000, 1.0));

  Rng eval_rng(1);
  Tensor same = dropout(a, 0.5, /*train=*/false, eval_rng);
  CHECK(same.data() == a.data());  // evaluation mode is a no-op

  Tensor dropped = dropout(a, 0.5, /*train=*/true, rng);
  int zeros_count = 0;
  double sum = 0.0;
  for (double v : dropped.data()) {
    if (v == 0.0) ++zeros_count;
    else CHECK(v == doctest::Approx(2.0));  // inverted scaling
    sum += v;
  }
  CHECK(zeros_count > 350);
  CHECK(zeros_count < 650);
  CHECK(sum / 1000.0 == doctest::Approx(1.0).epsilon(0.15));

  CHECK_THROWS_AS(dropout(a, 1.0, true, rng), TensorError);
}

TEST_CASE("no-grad mode skips tape construction") {
  PrecisionGuard guard(Precision::f64);
  Tensor p = parameter({2}, {1, 2});
  {
    NoGradGuard ng;
    Tensor out = mul(p, p);
    CHECK_FALSE(out.requires_grad());
  }
  Tensor out = mul(p, p);
  CHECK(out.requires_grad());
}

TEST_CASE("32-bit mode rounds stored values") {
  PrecisionGuard guard(Precision::f32);
  double v = 0.1;  // not representable in binary32
  Tensor t = from_values({1}, {v});
  CHECK(t.data()[0] == static_cast<double>(static_cast<float>(v)));
  CHECK(t.data()[0] != v);
}
