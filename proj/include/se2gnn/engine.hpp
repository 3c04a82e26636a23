#pragma once

// Dense arrays with a reverse-mode gradient tape.
//
// Every array is viewed as rows x cols, where rows = shape[0] and cols is the
// product of the remaining dimensions (a rank-1 array of length n is n x 1).
// Rotational features of shape N x Nr x 2 are therefore N rows of Nr
// interleaved (x, y) pairs.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

namespace se2gnn::engine {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string to_string(const Shape& shape);
std::size_t rows_of(const Shape& shape);
std::size_t cols_of(const Shape& shape);

/// Plain value buffer, no gradient tracking.
template <class T>
struct Array {
  Shape shape;
  std::vector<T> data;

  static Array zeros(Shape s) {
    Array a{std::move(s), {}};
    a.data.assign(numel(a.shape), T(0));
    return a;
  }
  std::size_t rows() const { return rows_of(shape); }
  std::size_t cols() const { return cols_of(shape); }
  T& at(std::size_t r, std::size_t c) { return data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return data[r * cols() + c]; }
};

template <class T>
class Tape;

/// Handle to a value recorded on a tape. Cheap to copy; valid while the tape lives.
template <class T>
class Tensor {
 public:
  Tensor() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  std::size_t id() const { return id_; }

  const Shape& shape() const;
  std::span<const T> value() const;
  std::size_t rows() const { return rows_of(shape()); }
  std::size_t cols() const { return cols_of(shape()); }
  std::size_t numel() const { return value().size(); }
  bool requires_grad() const;
  T item() const;
  Array<T> to_array() const { return {shape(), {value().begin(), value().end()}}; }

 private:
  friend class Tape<T>;
  Tensor(Tape<T>* tape, std::size_t id) : tape_(tape), id_(id) {}
  Tape<T>* tape_ = nullptr;
  std::size_t id_ = 0;
};

/// Recording of operations in execution order. Single owner; not thread safe.
template <class T>
class Tape {
 public:
  /// Receives the gradient of the node's output and accumulates into its inputs.
  using BackwardFn = std::function<void(Tape&, std::span<const T>)>;

  explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<T> constant(Shape shape, std::vector<T> value);
  Tensor<T> constant(const Array<T>& a) { return constant(a.shape, a.data); }
  /// Leaf that receives a gradient.
  Tensor<T> variable(Shape shape, std::vector<T> value);
  Tensor<T> variable(const Array<T>& a) { return variable(a.shape, a.data); }

  /// Appends an op result. `backward` is dropped when no input needs gradients.
  Tensor<T> record(Shape shape, std::vector<T> value, bool requires_grad, BackwardFn backward);

  /// Seeds d(loss)/d(loss) = 1 and walks the tape strictly in reverse.
  /// Throws InvalidArgument if `loss` is not a single element.
  void backward(const Tensor<T>& loss);

  /// Gradient of a recorded value (zeros if it received none).
  std::vector<T> grad(const Tensor<T>& t) const;
  /// Accumulation buffer for node `id`, allocated on first use.
  std::vector<T>& grad_buffer(std::size_t id);

  bool grad_enabled() const { return grad_enabled_; }
  std::size_t size() const { return nodes_.size(); }

  const Shape& shape_of(std::size_t id) const { return nodes_[id].shape; }
  std::span<const T> value_of(std::size_t id) const { return nodes_[id].value; }
  bool requires_grad_of(std::size_t id) const { return nodes_[id].requires_grad; }

 private:
  struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
  };
  std::vector<Node> nodes_;
  bool grad_enabled_;
};

template <class T>
const Shape& Tensor<T>::shape() const {
  return tape_->shape_of(id_);
}
template <class T>
std::span<const T> Tensor<T>::value() const {
  return tape_->value_of(id_);
}
template <class T>
bool Tensor<T>::requires_grad() const {
  return tape_->requires_grad_of(id_);
}

// ---------------------------------------------------------------------------
// Primitives. Shape errors throw ShapeMismatch naming the primitive.
// ---------------------------------------------------------------------------

/// (n x k) . (k x m) -> n x m
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

/// Elementwise with broadcasting of `b`: same shape, 1 x cols, rows x 1, or a single element.
template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b);

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s);
template <class T>
Tensor<T> div_scalar(const Tensor<T>& a, T s);
template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s);

/// Concatenation of 2D views along columns; all parts share the row count.
template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts);
template <class T>
Tensor<T> concat(std::initializer_list<Tensor<T>> parts) {
  return concat<T>(std::span<const Tensor<T>>(parts.begin(), parts.size()));
}

/// Columns [begin, end) of the 2D view.
template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end);

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape);

/// out[k] = a[index[k]]
template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::uint32_t> index);

/// out[target[k]] += a[k], out has `n_out` rows.
template <class T>
Tensor<T> scatter_add_rows(const Tensor<T>& a, std::span<const std::uint32_t> target,
                           std::size_t n_out);

/// Softmax of a single-column array within groups sharing a segment id.
template <class T>
Tensor<T> segment_softmax(const Tensor<T>& a, std::span<const std::uint32_t> segment,
                          std::size_t n_segments);

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope);

template <class T>
Tensor<T> sum(const Tensor<T>& a);
template <class T>
Tensor<T> mean(const Tensor<T>& a);
/// Per-row reductions -> rows x 1.
template <class T>
Tensor<T> row_sum(const Tensor<T>& a);
template <class T>
Tensor<T> row_mean(const Tensor<T>& a);

template <class T>
Tensor<T> sqrt(const Tensor<T>& a);
template <class T>
Tensor<T> square(const Tensor<T>& a);

/// Rotates each consecutive (x, y) pair of row r by the angle with (cos[r], sin[r]).
template <class T>
Tensor<T> rotate_pairs(const Tensor<T>& a, std::span<const T> cos, std::span<const T> sin);

/// Row-wise log-softmax.
template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& a);

/// out[r] = a[r, index[r]] -> rows x 1.
template <class T>
Tensor<T> select_cols(const Tensor<T>& a, std::span<const std::uint32_t> index);

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

struct ParamId {
  std::size_t index = 0;
};

template <class T>
class ParamSet {
 public:
  struct Entry {
    std::string name;
    Shape shape;
    std::vector<T> value;
  };

  ParamId add(std::string name, Shape shape, std::vector<T> value);
  std::size_t size() const { return entries_.size(); }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }
  Entry& operator[](ParamId id) { return entries_[id.index]; }
  const Entry& operator[](ParamId id) const { return entries_[id.index]; }
  /// Index of the named parameter, or size() when absent.
  std::size_t find(const std::string& name) const;
  std::size_t total_count() const;

  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }

 private:
  std::vector<Entry> entries_;
};

/// One forward/backward pass: a tape plus lazily bound parameter leaves.
template <class T>
class Session {
 public:
  explicit Session(const ParamSet<T>& params, bool grad_enabled = true)
      : tape_(grad_enabled), params_(&params), bound_(params.size()) {}

  Tape<T>& tape() { return tape_; }
  Tensor<T> param(ParamId id);
  Tensor<T> constant(Shape shape, std::vector<T> value) {
    return tape_.constant(std::move(shape), std::move(value));
  }
  Tensor<T> constant(const Array<T>& a) { return tape_.constant(a); }

  void backward(const Tensor<T>& loss) { tape_.backward(loss); }
  /// d(loss)/d(param) for every parameter in set order; zeros for unreachable ones.
  std::vector<std::vector<T>> gradients() const;

 private:
  Tape<T> tape_;
  const ParamSet<T>* params_;
  std::vector<Tensor<T>> bound_;
};

/// Max over coordinates of |analytic - central difference| / max(1, |central difference|).
/// `f` must build a single-element result from its input on the given tape.
double grad_check(const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
                  const Array<double>& x, double h);

}  // namespace se2gnn::engine
