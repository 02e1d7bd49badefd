#include "prt/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>
#include <unordered_set>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace prt {

namespace {

Precision g_precision = Precision::f32;
thread_local bool g_grad_enabled = true;

// In 32-bit mode every primitive squashes its outputs through float.
inline void round_outputs(std::vector<double>& v) {
  if (g_precision == Precision::f32) {
    for (double& x : v) x = static_cast<double>(static_cast<float>(x));
  }
}

constexpr int kMaxRank = 4;

using Strides = std::array<int64_t, kMaxRank>;

// Pads a shape to rank 4 with leading ones.
std::array<int, kMaxRank> pad4(const Shape& s) {
  if (s.size() > kMaxRank) throw TensorError("rank > 4 unsupported: " + shape_str(s));
  std::array<int, kMaxRank> out{1, 1, 1, 1};
  for (size_t i = 0; i < s.size(); ++i) out[kMaxRank - s.size() + i] = s[i];
  return out;
}

Strides strides4(const std::array<int, kMaxRank>& d) {
  Strides st{};
  st[kMaxRank - 1] = 1;
  for (int i = kMaxRank - 2; i >= 0; --i) st[i] = st[i + 1] * d[i + 1];
  return st;
}

// Strides for reading `from` at the index space of `to`; broadcast axes get
// stride zero. Throws if the shapes are not broadcast-compatible.
Strides bcast_strides(const Shape& from, const std::array<int, kMaxRank>& to,
                      const char* what) {
  auto f = pad4(from);
  auto st = strides4(f);
  for (int i = 0; i < kMaxRank; ++i) {
    if (f[i] == to[i]) continue;
    if (f[i] == 1) {
      st[i] = 0;
    } else {
      throw TensorError(std::string(what) + ": cannot broadcast " + shape_str(from));
    }
  }
  return st;
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* what) {
  size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (size_t i = 0; i < rank; ++i) {
    int da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1) {
      throw TensorError(std::string(what) + ": shapes " + shape_str(a) + " and " +
                        shape_str(b) + " do not broadcast");
    }
    out[i] = std::max(da, db);
  }
  return out;
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  return n;
}

// Builds the result node of an op: value already computed, parents attached
// only when the tape is live.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  round_outputs(value);
  auto n = make_node(std::move(shape), std::move(value));
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) needs = needs || t.node()->requires_grad;
  }
  if (needs) {
    n->requires_grad = true;
    n->is_leaf = false;
    for (auto& t : inputs) n->parents.push_back(t.node());
    n->backward = std::move(backward_fn);
  }
  return Tensor(n);
}

void check_defined(const Tensor& t, const char* what) {
  if (!t.defined()) throw TensorError(std::string(what) + ": undefined tensor");
}

int normalize_axis(int axis, int rank, const char* what) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) throw TensorError(std::string(what) + ": axis out of range");
  return a;
}

}  // namespace

void set_precision(Precision p) { g_precision = p; }
Precision precision() { return g_precision; }

void round_leaf_to_precision(Tensor& t) { round_outputs(t.mutable_data()); }

int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    if (d <= 0) throw TensorError("non-positive extent in shape " + shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << ']';
  return os.str();
}

int Tensor::extent(int axis) const {
  return node_->shape[normalize_axis(axis, rank(), "extent")];
}

std::vector<double>& Tensor::mutable_data() {
  if (!node_->is_leaf) throw TensorError("mutable_data: only leaves may be mutated");
  return node_->value;
}

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->value.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.assign(node_->value.size(), 0.0); }

double Tensor::item() const {
  if (size() != 1) throw TensorError("item: tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) throw TensorError("at: wrong index rank");
  int64_t flat = 0;
  int i = 0;
  for (int v : idx) {
    if (v < 0 || v >= node_->shape[i]) throw TensorError("at: index out of range");
    flat = flat * node_->shape[i] + v;
    ++i;
  }
  return node_->value[flat];
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor zeros(const Shape& s) { return from_values(s, std::vector<double>(numel(s), 0.0)); }
Tensor full(const Shape& s, double v) { return from_values(s, std::vector<double>(numel(s), v)); }

Tensor from_values(const Shape& s, std::vector<double> v) {
  if (static_cast<int64_t>(v.size()) != numel(s)) {
    throw TensorError("from_values: " + std::to_string(v.size()) + " values for shape " +
                      shape_str(s));
  }
  round_outputs(v);
  return Tensor(make_node(s, std::move(v)));
}

Tensor scalar(double v) { return from_values({1}, {v}); }

Tensor parameter(const Shape& s, std::vector<double> v) {
  Tensor t = from_values(s, std::move(v));
  t.node()->requires_grad = true;
  return t;
}

Tensor parameter_zeros(const Shape& s) {
  return parameter(s, std::vector<double>(numel(s), 0.0));
}

// --- masks -----------------------------------------------------------------

AttentionMask AttentionMask::none() { return AttentionMask{}; }

AttentionMask AttentionMask::padding(const std::vector<std::vector<uint8_t>>& key_valid) {
  AttentionMask m;
  m.kind = MaskKind::padding;
  int batch = static_cast<int>(key_valid.size());
  if (batch == 0) throw TensorError("padding mask: empty batch");
  int keys = static_cast<int>(key_valid[0].size());
  m.shape = {batch, 1, 1, keys};
  m.valid.reserve(static_cast<size_t>(batch) * keys);
  for (const auto& row : key_valid) {
    if (static_cast<int>(row.size()) != keys) throw TensorError("padding mask: ragged rows");
    m.valid.insert(m.valid.end(), row.begin(), row.end());
  }
  return m;
}

AttentionMask AttentionMask::causal(int len) {
  AttentionMask m;
  m.kind = MaskKind::causal;
  m.shape = {1, 1, len, len};
  m.valid.assign(static_cast<size_t>(len) * len, 0);
  for (int i = 0; i < len; ++i)
    for (int j = 0; j <= i; ++j) m.valid[static_cast<size_t>(i) * len + j] = 1;
  return m;
}

AttentionMask AttentionMask::padding_causal(const std::vector<std::vector<uint8_t>>& key_valid) {
  int batch = static_cast<int>(key_valid.size());
  if (batch == 0) throw TensorError("padding_causal mask: empty batch");
  int len = static_cast<int>(key_valid[0].size());
  AttentionMask m;
  m.kind = MaskKind::padding_causal;
  m.shape = {batch, 1, len, len};
  m.valid.assign(static_cast<size_t>(batch) * len * len, 0);
  for (int b = 0; b < batch; ++b) {
    if (static_cast<int>(key_valid[b].size()) != len)
      throw TensorError("padding_causal mask: ragged rows");
    for (int i = 0; i < len; ++i)
      for (int j = 0; j <= i; ++j)
        m.valid[(static_cast<size_t>(b) * len + i) * len + j] = key_valid[b][j];
  }
  return m;
}

// --- elementwise binaries ----------------------------------------------------

namespace {

enum class BinOp { add, sub, mul };

Tensor binary(const Tensor& a, const Tensor& b, BinOp op, const char* what) {
  check_defined(a, what);
  check_defined(b, what);
  Shape out_shape = broadcast_shape(a.shape(), b.shape(), what);
  auto od = pad4(out_shape);
  auto ost = strides4(od);
  Strides ast = bcast_strides(a.shape(), od, what);
  Strides bst = bcast_strides(b.shape(), od, what);
  int64_t n = numel(out_shape);
  std::vector<double> out(n);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t i0 = 0; i0 < od[0]; ++i0)
    for (int64_t i1 = 0; i1 < od[1]; ++i1)
      for (int64_t i2 = 0; i2 < od[2]; ++i2)
        for (int64_t i3 = 0; i3 < od[3]; ++i3) {
          int64_t oi = i0 * ost[0] + i1 * ost[1] + i2 * ost[2] + i3 * ost[3];
          double va = pa[i0 * ast[0] + i1 * ast[1] + i2 * ast[2] + i3 * ast[3]];
          double vb = pb[i0 * bst[0] + i1 * bst[1] + i2 * bst[2] + i3 * bst[3]];
          out[oi] = op == BinOp::add ? va + vb : op == BinOp::sub ? va - vb : va * vb;
        }

  return make_result(out_shape, std::move(out), {a, b}, [=](Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const double* g = self.grad.data();
    if (an.requires_grad) {
      an.ensure_grad();
      double* ga = an.grad.data();
      const double* pbv = bn.value.data();
      for (int64_t i0 = 0; i0 < od[0]; ++i0)
        for (int64_t i1 = 0; i1 < od[1]; ++i1)
          for (int64_t i2 = 0; i2 < od[2]; ++i2)
            for (int64_t i3 = 0; i3 < od[3]; ++i3) {
              int64_t oi = i0 * ost[0] + i1 * ost[1] + i2 * ost[2] + i3 * ost[3];
              int64_t ai = i0 * ast[0] + i1 * ast[1] + i2 * ast[2] + i3 * ast[3];
              double gv = g[oi];
              if (op == BinOp::mul)
                gv *= pbv[i0 * bst[0] + i1 * bst[1] + i2 * bst[2] + i3 * bst[3]];
              ga[ai] += gv;
            }
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      double* gb = bn.grad.data();
      const double* pav = an.value.data();
      for (int64_t i0 = 0; i0 < od[0]; ++i0)
        for (int64_t i1 = 0; i1 < od[1]; ++i1)
          for (int64_t i2 = 0; i2 < od[2]; ++i2)
            for (int64_t i3 = 0; i3 < od[3]; ++i3) {
              int64_t oi = i0 * ost[0] + i1 * ost[1] + i2 * ost[2] + i3 * ost[3];
              int64_t bi = i0 * bst[0] + i1 * bst[1] + i2 * bst[2] + i3 * bst[3];
              double gv = g[oi];
              if (op == BinOp::sub) gv = -gv;
              if (op == BinOp::mul)
                gv *= pav[i0 * ast[0] + i1 * ast[1] + i2 * ast[2] + i3 * ast[3]];
              gb[bi] += gv;
            }
    }
  });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinOp::mul, "mul"); }

Tensor neg(const Tensor& a) { return scalar_mul(a, -1.0); }

Tensor scalar_mul(const Tensor& a, double c) {
  check_defined(a, "scalar_mul");
  std::vector<double> out(a.data());
  for (double& x : out) x *= c;
  return make_result(a.shape(), std::move(out), {a}, [c](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += c * self.grad[i];
  });
}

Tensor scalar_add(const Tensor& a, double c) {
  check_defined(a, "scalar_add");
  std::vector<double> out(a.data());
  for (double& x : out) x += c;
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i];
  });
}

// --- matmul ------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2)
    throw TensorError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) +
                      " and " + shape_str(b.shape()));
  int m = a.shape()[a.rank() - 2];
  int ka = a.shape()[a.rank() - 1];
  int kb = b.shape()[b.rank() - 2];
  int n = b.shape()[b.rank() - 1];
  if (ka != kb)
    throw TensorError("matmul: inner extents disagree, " + shape_str(a.shape()) + " vs " +
                      shape_str(b.shape()));
  Shape a_lead(a.shape().begin(), a.shape().end() - 2);
  Shape b_lead(b.shape().begin(), b.shape().end() - 2);
  Shape lead = broadcast_shape(a_lead, b_lead, "matmul");
  Shape out_shape = lead;
  out_shape.push_back(m);
  out_shape.push_back(n);
  if (out_shape.size() > kMaxRank) throw TensorError("matmul: result rank > 4");

  // Flatten leading axes to one batch axis; broadcast handled per operand.
  int64_t batch = numel(lead.empty() ? Shape{1} : lead);
  auto lead4 = pad4(lead.empty() ? Shape{1} : lead);
  Strides a_bst = bcast_strides(a_lead.empty() ? Shape{1} : a_lead, lead4, "matmul");
  Strides b_bst = bcast_strides(b_lead.empty() ? Shape{1} : b_lead, lead4, "matmul");
  auto lead_st = strides4(lead4);

  // Per-batch matrix offsets for each operand (0-stride on broadcast axes).
  std::vector<int64_t> a_off(batch), b_off(batch);
  for (int64_t flat = 0; flat < batch; ++flat) {
    int64_t rem = flat, ao = 0, bo = 0;
    for (int i = 0; i < kMaxRank; ++i) {
      int64_t idx = rem / lead_st[i];
      rem -= idx * lead_st[i];
      ao += idx * a_bst[i];
      bo += idx * b_bst[i];
    }
    a_off[flat] = ao;
    b_off[flat] = bo;
  }

  int64_t a_mat = static_cast<int64_t>(m) * ka;
  int64_t b_mat = static_cast<int64_t>(kb) * n;
  int64_t o_mat = static_cast<int64_t>(m) * n;
  std::vector<double> out(batch * o_mat, 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();

#ifdef _OPENMP
#pragma omp parallel for schedule(static)
#endif
  for (int64_t bm = 0; bm < batch * m; ++bm) {
    int64_t bi = bm / m;
    int64_t i = bm % m;
    const double* arow = pa + a_off[bi] * a_mat + i * ka;
    const double* bmat = pb + b_off[bi] * b_mat;
    double* orow = out.data() + bi * o_mat + i * n;
    for (int k = 0; k < ka; ++k) {
      double av = arow[k];
      const double* brow = bmat + static_cast<int64_t>(k) * n;
      for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
    }
  }

  int K = ka;
  return make_result(out_shape, std::move(out), {a, b}, [=](Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const double* g = self.grad.data();
    const double* av = an.value.data();
    const double* bv = bn.value.data();
    if (an.requires_grad) {
      an.ensure_grad();
      double* ga = an.grad.data();
      // dA[i,k] += sum_j G[i,j] * B[k,j]; broadcast batches accumulate.
      for (int64_t bi = 0; bi < batch; ++bi) {
        const double* gm = g + bi * o_mat;
        const double* bm2 = bv + b_off[bi] * b_mat;
        double* gam = ga + a_off[bi] * a_mat;
        for (int i = 0; i < m; ++i)
          for (int k = 0; k < K; ++k) {
            const double* grow = gm + static_cast<int64_t>(i) * n;
            const double* brow = bm2 + static_cast<int64_t>(k) * n;
            double acc = 0.0;
            for (int j = 0; j < n; ++j) acc += grow[j] * brow[j];
            gam[static_cast<int64_t>(i) * K + k] += acc;
          }
      }
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      double* gb = bn.grad.data();
      // dB[k,j] += sum_i A[i,k] * G[i,j].
      for (int64_t bi = 0; bi < batch; ++bi) {
        const double* gm = g + bi * o_mat;
        const double* am = av + a_off[bi] * a_mat;
        double* gbm = gb + b_off[bi] * b_mat;
        for (int i = 0; i < m; ++i) {
          const double* grow = gm + static_cast<int64_t>(i) * n;
          for (int k = 0; k < K; ++k) {
            double a_ik = am[static_cast<int64_t>(i) * K + k];
            double* gbrow = gbm + static_cast<int64_t>(k) * n;
            for (int j = 0; j < n; ++j) gbrow[j] += a_ik * grow[j];
          }
        }
      }
    }
  });
}

// --- layout ops --------------------------------------------------------------

Tensor permute(const Tensor& a, const std::vector<int>& axes) {
  check_defined(a, "permute");
  int r = a.rank();
  if (static_cast<int>(axes.size()) != r) throw TensorError("permute: axes rank mismatch");
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (int i = 0; i < r; ++i) {
    int ax = normalize_axis(axes[i], r, "permute");
    if (seen[ax]) throw TensorError("permute: duplicate axis");
    seen[ax] = true;
    out_shape[i] = a.shape()[ax];
  }

  auto in4 = pad4(a.shape());
  auto in_st = strides4(in4);
  // Axis i of the output reads axis axes[i] of the input.
  std::array<int64_t, kMaxRank> rd{0, 0, 0, 0};
  auto out4 = pad4(out_shape);
  int off = kMaxRank - r;
  for (int i = 0; i < r; ++i) rd[off + i] = in_st[off + axes[i]];

  std::vector<double> out(a.size());
  const double* p = a.data().data();
  auto out_st = strides4(out4);
  for (int64_t i0 = 0; i0 < out4[0]; ++i0)
    for (int64_t i1 = 0; i1 < out4[1]; ++i1)
      for (int64_t i2 = 0; i2 < out4[2]; ++i2)
        for (int64_t i3 = 0; i3 < out4[3]; ++i3)
          out[i0 * out_st[0] + i1 * out_st[1] + i2 * out_st[2] + i3 * out_st[3]] =
              p[i0 * rd[0] + i1 * rd[1] + i2 * rd[2] + i3 * rd[3]];

  return make_result(out_shape, std::move(out), {a}, [=](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const double* g = self.grad.data();
    double* ga = an.grad.data();
    for (int64_t i0 = 0; i0 < out4[0]; ++i0)
      for (int64_t i1 = 0; i1 < out4[1]; ++i1)
        for (int64_t i2 = 0; i2 < out4[2]; ++i2)
          for (int64_t i3 = 0; i3 < out4[3]; ++i3)
            ga[i0 * rd[0] + i1 * rd[1] + i2 * rd[2] + i3 * rd[3]] +=
                g[i0 * out_st[0] + i1 * out_st[1] + i2 * out_st[2] + i3 * out_st[3]];
  });
}

Tensor transpose_last(const Tensor& a) {
  int r = a.rank();
  if (r < 2) throw TensorError("transpose_last: rank < 2");
  std::vector<int> axes(r);
  for (int i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 1], axes[r - 2]);
  return permute(a, axes);
}

Tensor reshape(const Tensor& a, const Shape& s) {
  check_defined(a, "reshape");
  if (numel(s) != a.size())
    throw TensorError("reshape: " + shape_str(a.shape()) + " to " + shape_str(s));
  std::vector<double> out(a.data());
  return make_result(s, std::move(out), {a}, [](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i];
  });
}

Tensor concat_last(const Tensor& a, const Tensor& b) {
  check_defined(a, "concat_last");
  check_defined(b, "concat_last");
  if (a.rank() != b.rank()) throw TensorError("concat_last: rank mismatch");
  int r = a.rank();
  for (int i = 0; i < r - 1; ++i)
    if (a.shape()[i] != b.shape()[i])
      throw TensorError("concat_last: leading extents disagree, " + shape_str(a.shape()) +
                        " vs " + shape_str(b.shape()));
  int la = a.shape()[r - 1], lb = b.shape()[r - 1];
  Shape out_shape = a.shape();
  out_shape[r - 1] = la + lb;
  int64_t rows = a.size() / la;
  std::vector<double> out(rows * (la + lb));
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  for (int64_t i = 0; i < rows; ++i) {
    std::memcpy(out.data() + i * (la + lb), pa + i * la, sizeof(double) * la);
    std::memcpy(out.data() + i * (la + lb) + la, pb + i * lb, sizeof(double) * lb);
  }
  return make_result(out_shape, std::move(out), {a, b}, [=](Node& self) {
    auto& an = *self.parents[0];
    auto& bn = *self.parents[1];
    const double* g = self.grad.data();
    if (an.requires_grad) {
      an.ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int j = 0; j < la; ++j) an.grad[i * la + j] += g[i * (la + lb) + j];
    }
    if (bn.requires_grad) {
      bn.ensure_grad();
      for (int64_t i = 0; i < rows; ++i)
        for (int j = 0; j < lb; ++j) bn.grad[i * lb + j] += g[i * (la + lb) + la + j];
    }
  });
}

Tensor narrow(const Tensor& a, int axis, int start, int len) {
  check_defined(a, "narrow");
  int ax = normalize_axis(axis, a.rank(), "narrow");
  int ext = a.shape()[ax];
  if (start < 0 || len <= 0 || start + len > ext) throw TensorError("narrow: range out of bounds");
  Shape out_shape = a.shape();
  out_shape[ax] = len;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.shape()[i];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= a.shape()[i];

  std::vector<double> out(numel(out_shape));
  const double* p = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int j = 0; j < len; ++j)
      std::memcpy(out.data() + (o * len + j) * inner,
                  p + (o * ext + start + j) * inner, sizeof(double) * inner);

  return make_result(out_shape, std::move(out), {a}, [=](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const double* g = self.grad.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int j = 0; j < len; ++j)
        for (int64_t k = 0; k < inner; ++k)
          an.grad[(o * ext + start + j) * inner + k] += g[(o * len + j) * inner + k];
  });
}

Tensor expand_axis(const Tensor& a, int axis, int n) {
  check_defined(a, "expand_axis");
  int ax = normalize_axis(axis, a.rank(), "expand_axis");
  if (a.shape()[ax] != 1) throw TensorError("expand_axis: axis extent must be 1");
  if (n <= 0) throw TensorError("expand_axis: non-positive target");
  Shape out_shape = a.shape();
  out_shape[ax] = n;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.shape()[i];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= a.shape()[i];

  std::vector<double> out(numel(out_shape));
  const double* p = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int j = 0; j < n; ++j)
      std::memcpy(out.data() + (o * n + j) * inner, p + o * inner, sizeof(double) * inner);

  return make_result(out_shape, std::move(out), {a}, [=](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const double* g = self.grad.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int j = 0; j < n; ++j)
        for (int64_t k = 0; k < inner; ++k)
          an.grad[o * inner + k] += g[(o * n + j) * inner + k];
  });
}

// --- activations ---------------------------------------------------------------

Tensor relu(const Tensor& a) {
  check_defined(a, "relu");
  std::vector<double> out(a.data());
  for (double& x : out) x = x > 0.0 ? x : 0.0;
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (an.value[i] > 0.0) an.grad[i] += self.grad[i];
  });
}

Tensor sigmoid(const Tensor& a) {
  check_defined(a, "sigmoid");
  std::vector<double> out(a.data());
  for (double& x : out) x = 1.0 / (1.0 + std::exp(-x));
  return make_result(a.shape(), std::move(out), {a}, [](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) {
      double y = self.value[i];
      an.grad[i] += self.grad[i] * y * (1.0 - y);
    }
  });
}

// --- reductions ------------------------------------------------------------------

Tensor sum_all(const Tensor& a) {
  check_defined(a, "sum_all");
  double acc = 0.0;
  for (double x : a.data()) acc += x;
  return make_result({1}, {acc}, {a}, [](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    double g = self.grad[0];
    for (double& gx : an.grad) gx += g;
  });
}

Tensor sum_axis(const Tensor& a, int axis) {
  check_defined(a, "sum_axis");
  int ax = normalize_axis(axis, a.rank(), "sum_axis");
  int ext = a.shape()[ax];
  Shape out_shape;
  for (int i = 0; i < a.rank(); ++i)
    if (i != ax) out_shape.push_back(a.shape()[i]);
  if (out_shape.empty()) out_shape = {1};

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < ax; ++i) outer *= a.shape()[i];
  for (int i = ax + 1; i < a.rank(); ++i) inner *= a.shape()[i];

  std::vector<double> out(outer * inner, 0.0);
  const double* p = a.data().data();
  for (int64_t o = 0; o < outer; ++o)
    for (int j = 0; j < ext; ++j)
      for (int64_t k = 0; k < inner; ++k) out[o * inner + k] += p[(o * ext + j) * inner + k];

  return make_result(out_shape, std::move(out), {a}, [=](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const double* g = self.grad.data();
    for (int64_t o = 0; o < outer; ++o)
      for (int j = 0; j < ext; ++j)
        for (int64_t k = 0; k < inner; ++k)
          an.grad[(o * ext + j) * inner + k] += g[o * inner + k];
  });
}

// --- softmax family -----------------------------------------------------------------

Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask, EmptyRowPolicy policy) {
  check_defined(scores, "masked_softmax");
  int64_t cols = scores.shape()[scores.rank() - 1];
  int64_t rows = scores.size() / cols;

  // Per-row pointer into the broadcast mask; null means everything valid.
  std::vector<const uint8_t*> mask_rows;
  if (!mask.is_none()) {
    auto sc4 = pad4(scores.shape());
    Strides mst = bcast_strides(mask.shape, sc4, "masked_softmax");
    if (mst[kMaxRank - 1] == 0 && pad4(mask.shape)[kMaxRank - 1] != 1)
      throw TensorError("masked_softmax: mask key axis does not line up");
    auto sst = strides4(sc4);
    mask_rows.resize(rows);
    for (int64_t r = 0; r < rows; ++r) {
      int64_t flat = r * cols;
      int64_t off = 0, rem = flat;
      for (int i = 0; i < kMaxRank; ++i) {
        int64_t idx = rem / sst[i];
        rem -= idx * sst[i];
        off += idx * mst[i];
      }
      mask_rows[r] = mask.valid.data() + off;
    }
    // The mask's last axis must span the key axis (stride 1) unless it is 1.
    if (pad4(mask.shape)[kMaxRank - 1] != sc4[kMaxRank - 1] &&
        pad4(mask.shape)[kMaxRank - 1] != 1)
      throw TensorError("masked_softmax: mask key extent mismatch");
  }

  std::vector<double> out(scores.size(), 0.0);
  std::vector<uint8_t> row_live(rows, 1);
  const double* p = scores.data().data();
  bool mask_bcast_keys = !mask.is_none() && pad4(mask.shape)[kMaxRank - 1] == 1;
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = p + r * cols;
    double* y = out.data() + r * cols;
    const uint8_t* mv = mask.is_none() ? nullptr : mask_rows[r];
    auto valid = [&](int64_t j) {
      if (!mv) return true;
      return (mask_bcast_keys ? mv[0] : mv[j]) != 0;
    };
    double mx = -std::numeric_limits<double>::infinity();
    for (int64_t j = 0; j < cols; ++j)
      if (valid(j) && x[j] > mx) mx = x[j];
    if (mx == -std::numeric_limits<double>::infinity()) {
      if (policy == EmptyRowPolicy::reject)
        throw TensorError("masked_softmax: row " + std::to_string(r) + " has no valid entry");
      row_live[r] = 0;
      continue;  // row stays exactly zero
    }
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) {
      if (valid(j)) {
        y[j] = std::exp(x[j] - mx);
        sum += y[j];
      }
    }
    for (int64_t j = 0; j < cols; ++j)
      if (valid(j)) y[j] /= sum;
  }

  return make_result(scores.shape(), std::move(out), {scores}, [=](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const double* g = self.grad.data();
    const double* y = self.value.data();
    for (int64_t r = 0; r < rows; ++r) {
      if (!row_live[r]) continue;
      double dot = 0.0;
      for (int64_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
      for (int64_t j = 0; j < cols; ++j) {
        double yj = y[r * cols + j];
        if (yj != 0.0) an.grad[r * cols + j] += yj * (g[r * cols + j] - dot);
      }
    }
  });
}

Tensor log_softmax(const Tensor& a) {
  check_defined(a, "log_softmax");
  int64_t cols = a.shape()[a.rank() - 1];
  int64_t rows = a.size() / cols;
  std::vector<double> out(a.size());
  const double* p = a.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* x = p + r * cols;
    double* y = out.data() + r * cols;
    double mx = x[0];
    for (int64_t j = 1; j < cols; ++j) mx = std::max(mx, x[j]);
    double sum = 0.0;
    for (int64_t j = 0; j < cols; ++j) sum += std::exp(x[j] - mx);
    double lse = mx + std::log(sum);
    for (int64_t j = 0; j < cols; ++j) y[j] = x[j] - lse;
  }
  return make_result(a.shape(), std::move(out), {a}, [=](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    const double* g = self.grad.data();
    const double* y = self.value.data();
    for (int64_t r = 0; r < rows; ++r) {
      double gsum = 0.0;
      for (int64_t j = 0; j < cols; ++j) gsum += g[r * cols + j];
      for (int64_t j = 0; j < cols; ++j)
        an.grad[r * cols + j] += g[r * cols + j] - std::exp(y[r * cols + j]) * gsum;
    }
  });
}

// --- layer norm --------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double epsilon) {
  check_defined(x, "layer_norm");
  check_defined(gain, "layer_norm");
  check_defined(bias, "layer_norm");
  int64_t n = x.shape()[x.rank() - 1];
  if (gain.size() != n || bias.size() != n)
    throw TensorError("layer_norm: gain/bias must match last extent " + std::to_string(n));
  int64_t rows = x.size() / n;

  std::vector<double> out(x.size());
  std::vector<double> rstds(rows), means(rows);
  const double* p = x.data().data();
  const double* g = gain.data().data();
  const double* b = bias.data().data();
  for (int64_t r = 0; r < rows; ++r) {
    const double* xr = p + r * n;
    double mean = 0.0;
    for (int64_t j = 0; j < n; ++j) mean += xr[j];
    mean /= static_cast<double>(n);
    double var = 0.0;
    for (int64_t j = 0; j < n; ++j) {
      double d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(n);
    double rstd = 1.0 / std::sqrt(var + epsilon);
    means[r] = mean;
    rstds[r] = rstd;
    double* yr = out.data() + r * n;
    for (int64_t j = 0; j < n; ++j) yr[j] = (xr[j] - mean) * rstd * g[j] + b[j];
  }

  return make_result(x.shape(), std::move(out), {x, gain, bias}, [=](Node& self) {
    auto& xn = *self.parents[0];
    auto& gn = *self.parents[1];
    auto& bn = *self.parents[2];
    const double* dy = self.grad.data();
    const double* xv = xn.value.data();
    const double* gv = gn.value.data();
    if (gn.requires_grad) gn.ensure_grad();
    if (bn.requires_grad) bn.ensure_grad();
    if (xn.requires_grad) xn.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) {
      const double* xr = xv + r * n;
      const double* dyr = dy + r * n;
      double mean = means[r], rstd = rstds[r];
      if (gn.requires_grad || bn.requires_grad) {
        for (int64_t j = 0; j < n; ++j) {
          double xhat = (xr[j] - mean) * rstd;
          if (gn.requires_grad) gn.grad[j] += dyr[j] * xhat;
          if (bn.requires_grad) bn.grad[j] += dyr[j];
        }
      }
      if (xn.requires_grad) {
        double m1 = 0.0, m2 = 0.0;
        for (int64_t j = 0; j < n; ++j) {
          double dxhat = dyr[j] * gv[j];
          double xhat = (xr[j] - mean) * rstd;
          m1 += dxhat;
          m2 += dxhat * xhat;
        }
        m1 /= static_cast<double>(n);
        m2 /= static_cast<double>(n);
        for (int64_t j = 0; j < n; ++j) {
          double dxhat = dyr[j] * gv[j];
          double xhat = (xr[j] - mean) * rstd;
          xn.grad[r * n + j] += (dxhat - m1 - xhat * m2) * rstd;
        }
      }
    }
  });
}

// --- lookups -----------------------------------------------------------------------

Tensor embedding(const Tensor& table, const std::vector<int>& ids, const Shape& id_shape) {
  check_defined(table, "embedding");
  if (table.rank() != 2) throw TensorError("embedding: table must be rank 2");
  if (static_cast<int64_t>(ids.size()) != numel(id_shape))
    throw TensorError("embedding: id count does not match id shape");
  int vocab = table.shape()[0];
  int dim = table.shape()[1];
  for (size_t i = 0; i < ids.size(); ++i)
    if (ids[i] < 0 || ids[i] >= vocab)
      throw TensorError("embedding: id " + std::to_string(ids[i]) + " out of range at position " +
                        std::to_string(i) + " (vocab " + std::to_string(vocab) + ")");
  Shape out_shape = id_shape;
  out_shape.push_back(dim);
  std::vector<double> out(ids.size() * dim);
  const double* t = table.data().data();
  for (size_t i = 0; i < ids.size(); ++i)
    std::memcpy(out.data() + i * dim, t + static_cast<int64_t>(ids[i]) * dim,
                sizeof(double) * dim);
  auto ids_copy = ids;
  return make_result(out_shape, std::move(out), {table}, [=](Node& self) {
    auto& tn = *self.parents[0];
    if (!tn.requires_grad) return;
    tn.ensure_grad();
    const double* g = self.grad.data();
    for (size_t i = 0; i < ids_copy.size(); ++i) {
      double* row = tn.grad.data() + static_cast<int64_t>(ids_copy[i]) * dim;
      for (int j = 0; j < dim; ++j) row[j] += g[i * dim + j];
    }
  });
}

Tensor gather_slots(const Tensor& x, const std::vector<int>& grid, int batch, int n_phrases,
                    int slot_width) {
  check_defined(x, "gather_slots");
  if (x.rank() != 3) throw TensorError("gather_slots: x must be [batch x len x dim]");
  int B = x.shape()[0], L = x.shape()[1], d = x.shape()[2];
  if (B != batch) throw TensorError("gather_slots: batch mismatch");
  if (static_cast<int64_t>(grid.size()) != static_cast<int64_t>(batch) * n_phrases * slot_width)
    throw TensorError("gather_slots: grid size mismatch");
  for (size_t i = 0; i < grid.size(); ++i)
    if (grid[i] >= L)
      throw TensorError("gather_slots: position " + std::to_string(grid[i]) +
                        " beyond sequence length " + std::to_string(L));

  Shape out_shape{batch, n_phrases, slot_width, d};
  std::vector<double> out(numel(out_shape), 0.0);
  const double* p = x.data().data();
  int64_t per_b = static_cast<int64_t>(n_phrases) * slot_width;
  for (int b = 0; b < batch; ++b)
    for (int64_t s = 0; s < per_b; ++s) {
      int idx = grid[b * per_b + s];
      if (idx < 0) continue;  // padding slot stays zero
      std::memcpy(out.data() + (b * per_b + s) * d,
                  p + (static_cast<int64_t>(b) * L + idx) * d, sizeof(double) * d);
    }

  auto grid_copy = grid;
  return make_result(out_shape, std::move(out), {x}, [=](Node& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const double* g = self.grad.data();
    for (int b = 0; b < batch; ++b)
      for (int64_t s = 0; s < per_b; ++s) {
        int idx = grid_copy[b * per_b + s];
        if (idx < 0) continue;
        double* row = xn.grad.data() + (static_cast<int64_t>(b) * L + idx) * d;
        for (int j = 0; j < d; ++j) row[j] += g[(b * per_b + s) * d + j];
      }
  });
}

// --- masked pooling -------------------------------------------------------------------

namespace {

void check_pool_mask(const Tensor& x, const std::vector<uint8_t>& mask, const char* what) {
  if (x.rank() < 2) throw TensorError(std::string(what) + ": rank < 2");
  int64_t lead = x.size() / x.shape()[x.rank() - 1];
  if (static_cast<int64_t>(mask.size()) != lead)
    throw TensorError(std::string(what) + ": mask must cover all axes but the last");
}

}  // namespace

Tensor masked_mean(const Tensor& x, const std::vector<uint8_t>& mask, EmptyRowPolicy policy) {
  check_defined(x, "masked_mean");
  check_pool_mask(x, mask, "masked_mean");
  int r = x.rank();
  int W = x.shape()[r - 2];
  int d = x.shape()[r - 1];
  int64_t groups = x.size() / (static_cast<int64_t>(W) * d);
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  out_shape.push_back(d);

  std::vector<double> out(groups * d, 0.0);
  std::vector<double> inv_counts(groups, 0.0);
  const double* p = x.data().data();
  for (int64_t gi = 0; gi < groups; ++gi) {
    int cnt = 0;
    for (int w = 0; w < W; ++w) cnt += mask[gi * W + w] ? 1 : 0;
    if (cnt == 0) {
      if (policy == EmptyRowPolicy::reject)
        throw TensorError("masked_mean: group " + std::to_string(gi) + " has no valid slot");
      continue;
    }
    double inv = 1.0 / static_cast<double>(cnt);
    inv_counts[gi] = inv;
    for (int w = 0; w < W; ++w) {
      if (!mask[gi * W + w]) continue;
      const double* row = p + (gi * W + w) * d;
      double* o = out.data() + gi * d;
      for (int j = 0; j < d; ++j) o[j] += row[j] * inv;
    }
  }

  auto mask_copy = mask;
  return make_result(out_shape, std::move(out), {x}, [=](Node& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const double* g = self.grad.data();
    for (int64_t gi = 0; gi < groups; ++gi) {
      double inv = inv_counts[gi];
      if (inv == 0.0) continue;
      for (int w = 0; w < W; ++w) {
        if (!mask_copy[gi * W + w]) continue;
        double* row = xn.grad.data() + (gi * W + w) * d;
        for (int j = 0; j < d; ++j) row[j] += g[gi * d + j] * inv;
      }
    }
  });
}

Tensor masked_max(const Tensor& x, const std::vector<uint8_t>& mask, EmptyRowPolicy policy) {
  check_defined(x, "masked_max");
  check_pool_mask(x, mask, "masked_max");
  int r = x.rank();
  int W = x.shape()[r - 2];
  int d = x.shape()[r - 1];
  int64_t groups = x.size() / (static_cast<int64_t>(W) * d);
  Shape out_shape(x.shape().begin(), x.shape().end() - 2);
  out_shape.push_back(d);

  std::vector<double> out(groups * d, 0.0);
  std::vector<int> argmax(groups * d, -1);
  const double* p = x.data().data();
  for (int64_t gi = 0; gi < groups; ++gi) {
    bool any = false;
    for (int w = 0; w < W; ++w) {
      if (!mask[gi * W + w]) continue;
      const double* row = p + (gi * W + w) * d;
      if (!any) {
        for (int j = 0; j < d; ++j) {
          out[gi * d + j] = row[j];
          argmax[gi * d + j] = w;
        }
        any = true;
      } else {
        for (int j = 0; j < d; ++j) {
          if (row[j] > out[gi * d + j]) {  // strict: ties keep the first slot
            out[gi * d + j] = row[j];
            argmax[gi * d + j] = w;
          }
        }
      }
    }
    if (!any && policy == EmptyRowPolicy::reject)
      throw TensorError("masked_max: group " + std::to_string(gi) + " has no valid slot");
  }

  return make_result(out_shape, std::move(out), {x}, [=](Node& self) {
    auto& xn = *self.parents[0];
    if (!xn.requires_grad) return;
    xn.ensure_grad();
    const double* g = self.grad.data();
    for (int64_t gi = 0; gi < groups; ++gi)
      for (int j = 0; j < d; ++j) {
        int w = argmax[gi * d + j];
        if (w >= 0) xn.grad[(gi * W + w) * d + j] += g[gi * d + j];
      }
  });
}

Tensor pick_last(const Tensor& a, const std::vector<int>& ids) {
  check_defined(a, "pick_last");
  if (a.rank() < 1) throw TensorError("pick_last: rank 0");
  int64_t cols = a.shape()[a.rank() - 1];
  int64_t rows = a.size() / cols;
  if (static_cast<int64_t>(ids.size()) != rows)
    throw TensorError("pick_last: need one index per row");
  for (int64_t r = 0; r < rows; ++r)
    if (ids[r] < 0 || ids[r] >= cols) throw TensorError("pick_last: index out of range");
  Shape out_shape(a.shape().begin(), a.shape().end() - 1);
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(rows);
  const double* p = a.data().data();
  for (int64_t r = 0; r < rows; ++r) out[r] = p[r * cols + ids[r]];
  auto ids_copy = ids;
  return make_result(out_shape, std::move(out), {a}, [=](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (int64_t r = 0; r < rows; ++r) an.grad[r * cols + ids_copy[r]] += self.grad[r];
  });
}

Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng) {
  check_defined(a, "dropout");
  if (rate < 0.0 || rate >= 1.0) throw TensorError("dropout: rate must be in [0,1)");
  if (!train || rate == 0.0) return a;
  double keep = 1.0 - rate;
  std::vector<double> scale(a.size());
  for (auto& s : scale) s = rng.uniform(0.0, 1.0) < keep ? 1.0 / keep : 0.0;
  std::vector<double> out(a.data());
  for (size_t i = 0; i < out.size(); ++i) out[i] *= scale[i];
  return make_result(a.shape(), std::move(out), {a}, [sc = std::move(scale)](Node& self) {
    auto& an = *self.parents[0];
    if (!an.requires_grad) return;
    an.ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) an.grad[i] += self.grad[i] * sc[i];
  });
}

// --- backward sweep ------------------------------------------------------------------

void backward(const Tensor& loss) {
  if (!loss.defined()) throw TensorError("backward: undefined tensor");
  if (loss.size() != 1) throw TensorError("backward: loss must be scalar, got " +
                                          shape_str(loss.shape()));
  if (!loss.node()->requires_grad)
    throw TensorError("backward: loss does not depend on any trainable tensor");

  // Iterative post-order topological sort (graphs can be deep).
  std::vector<Node*> order;
  std::vector<std::pair<Node*, size_t>> stack;
  std::unordered_set<Node*> seen;
  stack.emplace_back(loss.node().get(), 0);
  seen.insert(loss.node().get());
  while (!stack.empty()) {
    Node* node = stack.back().first;
    size_t next = stack.back().second;
    bool descended = false;
    while (next < node->parents.size()) {
      Node* p = node->parents[next].get();
      ++next;
      if (p->requires_grad && !seen.count(p)) {
        stack.back().second = next;
        seen.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (!descended) {
      order.push_back(node);
      stack.pop_back();
    }
  }

  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward) {
      n->ensure_grad();
      n->backward(*n);
    }
  }
}

}  // namespace prt
