// Dense tensors with reverse-mode automatic differentiation.
//
// Values are held as doubles; in 32-bit mode every primitive rounds its
// outputs through float so training numerics and checkpoints behave like a
// single-precision implementation, while the 64-bit mode keeps full doubles
// for finite-difference gradient checking.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace prt {

enum class Precision { f32, f64 };

void set_precision(Precision p);
Precision precision();

// Raised on every shape/contract violation; messages carry the offending
// shapes so callers can report them verbatim.
class TensorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

int64_t numel(const Shape& s);
std::string shape_str(const Shape& s);

// Single RNG type used everywhere (init, dropout, shuffling) so one seed
// drives a whole run.
class Rng {
 public:
  explicit Rng(uint64_t seed = 0) : gen_(seed) {}

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(gen_);
  }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(gen_);
  }
  // In [lo, hi] inclusive.
  int uniform_int(int lo, int hi) {
    return std::uniform_int_distribution<int>(lo, hi)(gen_);
  }
  uint64_t next_u64() { return gen_(); }

  template <class T>
  void shuffle(std::vector<T>& v) {
    std::shuffle(v.begin(), v.end(), gen_);
  }

 private:
  std::mt19937_64 gen_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on demand, same extent as value
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;  // reads this->grad, accumulates into parents

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Value-semantic handle to a graph node. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int rank() const { return static_cast<int>(node_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(node_->value.size()); }
  int extent(int axis) const;

  const std::vector<double>& data() const { return node_->value; }
  // In-place mutation is reserved for leaves (parameter updates, test setup).
  std::vector<double>& mutable_data();

  bool requires_grad() const { return node_->requires_grad; }
  bool is_leaf() const { return node_->is_leaf; }

  // Gradient accumulated by backward(); zeros if never touched.
  std::vector<double> grad() const;
  // Direct view of the accumulator; empty means never touched.
  const std::vector<double>& grad_ref() const { return node_->grad; }
  void zero_grad();

  double item() const;
  double at(std::initializer_list<int> idx) const;

  std::shared_ptr<Node>& node() { return node_; }
  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// --- graph mode ----------------------------------------------------------

bool grad_enabled();

// Disables tape construction in scope; forward results are identical.
struct NoGradGuard {
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// --- construction --------------------------------------------------------

Tensor zeros(const Shape& s);
Tensor full(const Shape& s, double v);
Tensor from_values(const Shape& s, std::vector<double> v);
Tensor scalar(double v);
// Trainable leaf.
Tensor parameter(const Shape& s, std::vector<double> v);
Tensor parameter_zeros(const Shape& s);

// --- attention masks ------------------------------------------------------

enum class MaskKind { none, padding, causal, padding_causal };

// Validity grid broadcastable to [batch x heads x queries x keys]; kind
// records how it was built. An all-invalid key row is rejected at use.
struct AttentionMask {
  MaskKind kind = MaskKind::none;
  Shape shape;                 // rank <= 4
  std::vector<uint8_t> valid;  // 1 = may attend

  bool is_none() const { return kind == MaskKind::none; }

  static AttentionMask none();
  // key_valid is [batch x keys]; broadcast over queries.
  static AttentionMask padding(const std::vector<std::vector<uint8_t>>& key_valid);
  static AttentionMask causal(int len);
  // Causal triangle intersected with per-key validity.
  static AttentionMask padding_causal(const std::vector<std::vector<uint8_t>>& key_valid);
};

// Behaviour of masked reductions on rows with no valid entry. The public
// contract rejects them; batch padding inside the model maps them to zero.
enum class EmptyRowPolicy { reject, zero };

// --- primitives (all participate in the gradient tape) --------------------

Tensor add(const Tensor& a, const Tensor& b);  // broadcasting, numpy rules
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, broadcasting
Tensor neg(const Tensor& a);
Tensor scalar_mul(const Tensor& a, double c);
Tensor scalar_add(const Tensor& a, double c);

// Matrix product over the last two axes; leading axes broadcast.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor permute(const Tensor& a, const std::vector<int>& axes);
Tensor transpose_last(const Tensor& a);
Tensor reshape(const Tensor& a, const Shape& s);
Tensor concat_last(const Tensor& a, const Tensor& b);
Tensor narrow(const Tensor& a, int axis, int start, int len);
// Repeats a size-1 axis n times.
Tensor expand_axis(const Tensor& a, int axis, int n);

Tensor relu(const Tensor& a);
Tensor sigmoid(const Tensor& a);

Tensor sum_all(const Tensor& a);
Tensor sum_axis(const Tensor& a, int axis);  // removes the axis

// Softmax along the last axis over mask-valid positions; invalid positions
// get exactly zero. Numerically stable (row max subtracted).
Tensor masked_softmax(const Tensor& scores, const AttentionMask& mask,
                      EmptyRowPolicy policy = EmptyRowPolicy::reject);
Tensor log_softmax(const Tensor& a);  // last axis, unmasked

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  double epsilon = 1e-6);

// Row lookup: ids indexes the first axis of table; output shape is
// id_shape + [row width]. Out-of-range ids are rejected.
Tensor embedding(const Tensor& table, const std::vector<int>& ids,
                 const Shape& id_shape);

// x: [B x L x d], grid: [B x P x W] of positions into L (negative = padding
// slot, yields a zero row). Output [B x P x W x d].
Tensor gather_slots(const Tensor& x, const std::vector<int>& grid, int batch,
                    int n_phrases, int slot_width);

// Reduce the second-to-last axis of x over mask-valid entries; mask covers
// all axes of x except the last.
Tensor masked_mean(const Tensor& x, const std::vector<uint8_t>& mask,
                   EmptyRowPolicy policy = EmptyRowPolicy::reject);
// Elementwise max over valid entries; ties route the gradient to the first
// occurrence.
Tensor masked_max(const Tensor& x, const std::vector<uint8_t>& mask,
                  EmptyRowPolicy policy = EmptyRowPolicy::reject);

// a: [... x V], ids: one index per leading position; output [...].
Tensor pick_last(const Tensor& a, const std::vector<int>& ids);

// Inverted dropout; identity when rate == 0 or !train.
Tensor dropout(const Tensor& a, double rate, bool train, Rng& rng);

// --- autodiff -------------------------------------------------------------

// Reverse-mode sweep from a scalar loss. Repeated calls accumulate into
// leaf gradients until zero_grad().
void backward(const Tensor& loss);

// Rounds a leaf's values to the active precision (no-op in 64-bit mode);
// used after in-place parameter updates.
void round_leaf_to_precision(Tensor& t);

}  // namespace prt
