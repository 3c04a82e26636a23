#include "se2gnn/engine.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>
#include <type_traits>
#include <utility>

#include "se2gnn/errors.hpp"

namespace se2gnn::engine {

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t k = 0; k < shape.size(); ++k) os << (k ? "x" : "") << shape[k];
  os << ']';
  return os.str();
}

std::size_t rows_of(const Shape& shape) { return shape.empty() ? 1 : shape[0]; }

std::size_t cols_of(const Shape& shape) {
  std::size_t c = 1;
  for (std::size_t k = 1; k < shape.size(); ++k) c *= shape[k];
  return c;
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> Tape<T>::constant(Shape shape, std::vector<T> value) {
  return record(std::move(shape), std::move(value), false, nullptr);
}

template <class T>
Tensor<T> Tape<T>::variable(Shape shape, std::vector<T> value) {
  return record(std::move(shape), std::move(value), grad_enabled_, nullptr);
}

template <class T>
Tensor<T> Tape<T>::record(Shape shape, std::vector<T> value, bool requires_grad,
                          BackwardFn backward) {
  if (numel(shape) != value.size()) {
    throw ShapeMismatch("record: shape " + to_string(shape) + " does not hold " +
                        std::to_string(value.size()) + " values");
  }
  Node node;
  node.shape = std::move(shape);
  node.value = std::move(value);
  node.requires_grad = requires_grad && grad_enabled_;
  if (node.requires_grad) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return Tensor<T>(this, nodes_.size() - 1);
}

template <class T>
std::vector<T>& Tape<T>::grad_buffer(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), T(0));
  return n.grad;
}

template <class T>
void Tape<T>::backward(const Tensor<T>& loss) {
  if (loss.numel() != 1) {
    throw InvalidArgument("backward: loss must be a single element, got shape " +
                          to_string(loss.shape()));
  }
  if (&loss.tape() != this) throw InvalidArgument("backward: loss recorded on another tape");
  for (Node& n : nodes_) n.grad.clear();
  if (!nodes_[loss.id()].requires_grad) return;
  grad_buffer(loss.id())[0] = T(1);
  for (std::size_t k = loss.id() + 1; k-- > 0;) {
    Node& n = nodes_[k];
    if (!n.backward || n.grad.empty()) continue;
    n.backward(*this, n.grad);
  }
}

template <class T>
std::vector<T> Tape<T>::grad(const Tensor<T>& t) const {
  const Node& n = nodes_[t.id()];
  if (n.grad.empty()) return std::vector<T>(n.value.size(), T(0));
  return n.grad;
}

template <class T>
T Tensor<T>::item() const {
  if (numel() != 1) throw InvalidArgument("item: tensor has " + std::to_string(numel()) + " values");
  return value()[0];
}

// ---------------------------------------------------------------------------
// Primitives
// ---------------------------------------------------------------------------

namespace {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

template <class T>
void same_tape(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw InvalidArgument(std::string(op) + ": operands are not recorded on the same tape");
  }
}

[[noreturn]] void shape_error(const char* op, const Shape& a, const Shape& b) {
  throw ShapeMismatch(std::string(op) + ": incompatible shapes " + to_string(a) + " and " +
                      to_string(b));
}

enum class Bcast { kSame, kRow, kCol, kScalar };

template <class T>
Bcast broadcast_kind(const char* op, const Tensor<T>& a, const Tensor<T>& b) {
  same_tape(op, a, b);
  if (a.shape() == b.shape()) return Bcast::kSame;
  if (b.numel() == 1) return Bcast::kScalar;
  if (b.rows() == 1 && b.cols() == a.cols() && b.shape().size() <= 2) return Bcast::kRow;
  if (b.cols() == 1 && b.rows() == a.rows()) return Bcast::kCol;
  if (a.numel() == b.numel() && a.rows() == b.rows()) return Bcast::kSame;
  shape_error(op, a.shape(), b.shape());
}

inline std::size_t bindex(Bcast k, std::size_t r, std::size_t c, std::size_t cols) {
  switch (k) {
    case Bcast::kSame:
      return r * cols + c;
    case Bcast::kRow:
      return c;
    case Bcast::kCol:
      return r;
    case Bcast::kScalar:
      return 0;
  }
  return 0;
}

template <class T>
bool any_grad(std::initializer_list<Tensor<T>> ts) {
  for (const auto& t : ts) {
    if (t.requires_grad()) return true;
  }
  return false;
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

template <BinOp Op, Bcast K>
using OpKind = std::pair<std::integral_constant<BinOp, Op>, std::integral_constant<Bcast, K>>;

// Calls f(OpKind<op, k>{}) so the element loops below are specialized at compile time.
template <class F>
void dispatch(BinOp op, Bcast k, F&& f) {
  auto with_op = [&]<Bcast K>(std::integral_constant<Bcast, K>) {
    switch (op) {
      case BinOp::kAdd: f(OpKind<BinOp::kAdd, K>{}); break;
      case BinOp::kSub: f(OpKind<BinOp::kSub, K>{}); break;
      case BinOp::kMul: f(OpKind<BinOp::kMul, K>{}); break;
      case BinOp::kDiv: f(OpKind<BinOp::kDiv, K>{}); break;
    }
  };
  switch (k) {
    case Bcast::kSame: with_op(std::integral_constant<Bcast, Bcast::kSame>{}); break;
    case Bcast::kRow: with_op(std::integral_constant<Bcast, Bcast::kRow>{}); break;
    case Bcast::kCol: with_op(std::integral_constant<Bcast, Bcast::kCol>{}); break;
    case Bcast::kScalar: with_op(std::integral_constant<Bcast, Bcast::kScalar>{}); break;
  }
}

template <class T>
Tensor<T> binary(const char* name, BinOp op, const Tensor<T>& a, const Tensor<T>& b) {
  const Bcast k = broadcast_kind(name, a, b);
  const std::size_t rows = a.rows(), cols = a.cols();
  auto av = a.value();
  auto bv = b.value();
  std::vector<T> out(av.size());
  dispatch(op, k, [&]<class P>(P) {
    constexpr BinOp O = P::first_type::value;
    constexpr Bcast K = P::second_type::value;
    for (std::size_t r = 0; r < rows; ++r) {
      const T* x = av.data() + r * cols;
      T* o = out.data() + r * cols;
      for (std::size_t c = 0; c < cols; ++c) {
        const T y = bv[bindex(K, r, c, cols)];
        if constexpr (O == BinOp::kAdd) o[c] = x[c] + y;
        else if constexpr (O == BinOp::kSub) o[c] = x[c] - y;
        else if constexpr (O == BinOp::kMul) o[c] = x[c] * y;
        else o[c] = x[c] / y;
      }
    }
  });
  const std::size_t ia = a.id(), ib = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape().record(
      a.shape(), std::move(out), ga || gb,
      [=](Tape<T>& tape, std::span<const T> g) {
        auto av = tape.value_of(ia);
        auto bv = tape.value_of(ib);
        dispatch(op, k, [&]<class P>(P) {
          constexpr BinOp O = P::first_type::value;
          constexpr Bcast K = P::second_type::value;
          if (ga) {
            auto& da = tape.grad_buffer(ia);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t i = r * cols + c;
                if constexpr (O == BinOp::kAdd || O == BinOp::kSub) da[i] += g[i];
                else if constexpr (O == BinOp::kMul) da[i] += g[i] * bv[bindex(K, r, c, cols)];
                else da[i] += g[i] / bv[bindex(K, r, c, cols)];
              }
            }
          }
          if (gb) {
            auto& db = tape.grad_buffer(ib);
            for (std::size_t r = 0; r < rows; ++r) {
              for (std::size_t c = 0; c < cols; ++c) {
                const std::size_t i = r * cols + c;
                const std::size_t j = bindex(K, r, c, cols);
                if constexpr (O == BinOp::kAdd) db[j] += g[i];
                else if constexpr (O == BinOp::kSub) db[j] -= g[i];
                else if constexpr (O == BinOp::kMul) db[j] += g[i] * av[i];
                else db[j] -= g[i] * av[i] / (bv[j] * bv[j]);
              }
            }
          }
        });
      });
}

/// Elementwise unary op with derivative expressed through input x and output y.
template <class T, class F, class D>
Tensor<T> unary(const Tensor<T>& a, F f, D dfdx) {
  auto av = a.value();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const std::size_t ia = a.id();
  const std::size_t iy = a.tape().size();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [=](Tape<T>& tape, std::span<const T> g) {
                           auto x = tape.value_of(ia);
                           auto y = tape.value_of(iy);
                           auto& da = tape.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * dfdx(x[i], y[i]);
                         });
}

}  // namespace

template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  same_tape("matmul", a, b);
  const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
  if (b.rows() != k) shape_error("matmul", a.shape(), b.shape());
  std::vector<T> out(n * m, T(0));
  if (n && m && k) {
    MapM<T>(out.data(), n, m).noalias() =
        MapC<T>(a.value().data(), n, k) * MapC<T>(b.value().data(), k, m);
  }
  const std::size_t ia = a.id(), ib = b.id();
  const bool ga = a.requires_grad(), gb = b.requires_grad();
  return a.tape().record(Shape{n, m}, std::move(out), ga || gb,
                         [=](Tape<T>& tape, std::span<const T> g) {
                           if (!n || !m || !k) return;
                           MapC<T> G(g.data(), n, m);
                           if (ga) {
                             auto& da = tape.grad_buffer(ia);
                             MapM<T>(da.data(), n, k).noalias() +=
                                 G * MapC<T>(tape.value_of(ib).data(), k, m).transpose();
                           }
                           if (gb) {
                             auto& db = tape.grad_buffer(ib);
                             MapM<T>(db.data(), k, m).noalias() +=
                                 MapC<T>(tape.value_of(ia).data(), n, k).transpose() * G;
                           }
                         });
}

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("add", BinOp::kAdd, a, b);
}
template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("sub", BinOp::kSub, a, b);
}
template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("mul", BinOp::kMul, a, b);
}
template <class T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary("div", BinOp::kDiv, a, b);
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <class T>
Tensor<T> div_scalar(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return x / s; }, [s](T, T) { return T(1) / s; });
}

template <class T>
Tensor<T> add_scalar(const Tensor<T>& a, T s) {
  return unary(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <class T>
Tensor<T> concat(std::span<const Tensor<T>> parts) {
  if (parts.empty()) throw InvalidArgument("concat: no inputs");
  const std::size_t rows = parts[0].rows();
  std::vector<std::size_t> widths, ids;
  std::vector<bool> needs;
  std::size_t total = 0;
  bool any = false;
  for (const auto& p : parts) {
    same_tape("concat", parts[0], p);
    if (p.rows() != rows) shape_error("concat", parts[0].shape(), p.shape());
    widths.push_back(p.cols());
    ids.push_back(p.id());
    needs.push_back(p.requires_grad());
    any = any || p.requires_grad();
    total += p.cols();
  }
  std::vector<T> out(rows * total);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    auto v = parts[k].value();
    const std::size_t w = widths[k];
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(v.data() + r * w, w, out.data() + r * total + off);
    }
    off += w;
  }
  return parts[0].tape().record(Shape{rows, total}, std::move(out), any,
                                [=](Tape<T>& tape, std::span<const T> g) {
                                  std::size_t off = 0;
                                  for (std::size_t k = 0; k < ids.size(); ++k) {
                                    const std::size_t w = widths[k];
                                    if (needs[k] && w) {
                                      auto& d = tape.grad_buffer(ids[k]);
                                      for (std::size_t r = 0; r < rows; ++r) {
                                        for (std::size_t c = 0; c < w; ++c) {
                                          d[r * w + c] += g[r * total + off + c];
                                        }
                                      }
                                    }
                                    off += w;
                                  }
                                });
}

template <class T>
Tensor<T> slice_cols(const Tensor<T>& a, std::size_t begin, std::size_t end) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (begin > end || end > cols) {
    throw ShapeMismatch("slice_cols: range [" + std::to_string(begin) + ", " +
                        std::to_string(end) + ") outside " + to_string(a.shape()));
  }
  const std::size_t w = end - begin;
  std::vector<T> out(rows * w);
  auto v = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(v.data() + r * cols + begin, w, out.data() + r * w);
  }
  const std::size_t ia = a.id();
  return a.tape().record(Shape{rows, w}, std::move(out), a.requires_grad(),
                         [=](Tape<T>& tape, std::span<const T> g) {
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < w; ++c) d[r * cols + begin + c] += g[r * w + c];
                           }
                         });
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel(shape) != a.numel()) shape_error("reshape", a.shape(), shape);
  auto v = a.value();
  const std::size_t ia = a.id();
  return a.tape().record(std::move(shape), std::vector<T>(v.begin(), v.end()), a.requires_grad(),
                         [=](Tape<T>& tape, std::span<const T> g) {
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t i = 0; i < g.size(); ++i) d[i] += g[i];
                         });
}

template <class T>
Tensor<T> gather_rows(const Tensor<T>& a, std::span<const std::uint32_t> index) {
  const std::size_t rows = a.rows(), cols = a.cols(), m = index.size();
  std::vector<T> out(m * cols);
  auto v = a.value();
  for (std::size_t k = 0; k < m; ++k) {
    if (index[k] >= rows) {
      throw InvalidArgument("gather_rows: index " + std::to_string(index[k]) + " >= " +
                            std::to_string(rows) + " rows");
    }
    std::copy_n(v.data() + index[k] * cols, cols, out.data() + k * cols);
  }
  Shape shape = a.shape().empty() ? Shape{m} : a.shape();
  shape[0] = m;
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  const std::size_t ia = a.id();
  return a.tape().record(std::move(shape), std::move(out), a.requires_grad(),
                         [=, idx = std::move(idx)](Tape<T>& tape, std::span<const T> g) {
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t k = 0; k < idx.size(); ++k) {
                             T* dst = d.data() + idx[k] * cols;
                             const T* src = g.data() + k * cols;
                             for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                           }
                         });
}

template <class T>
Tensor<T> scatter_add_rows(const Tensor<T>& a, std::span<const std::uint32_t> target,
                           std::size_t n_out) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (target.size() != rows) {
    throw ShapeMismatch("scatter_add_rows: " + std::to_string(target.size()) +
                        " targets for shape " + to_string(a.shape()));
  }
  std::vector<T> out(n_out * cols, T(0));
  auto v = a.value();
  for (std::size_t k = 0; k < rows; ++k) {
    if (target[k] >= n_out) {
      throw InvalidArgument("scatter_add_rows: target " + std::to_string(target[k]) +
                            " >= " + std::to_string(n_out));
    }
    T* dst = out.data() + target[k] * cols;
    const T* src = v.data() + k * cols;
    for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
  }
  Shape shape = a.shape().empty() ? Shape{n_out} : a.shape();
  shape[0] = n_out;
  std::vector<std::uint32_t> idx(target.begin(), target.end());
  const std::size_t ia = a.id();
  return a.tape().record(std::move(shape), std::move(out), a.requires_grad(),
                         [=, idx = std::move(idx)](Tape<T>& tape, std::span<const T> g) {
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t k = 0; k < idx.size(); ++k) {
                             const T* src = g.data() + idx[k] * cols;
                             T* dst = d.data() + k * cols;
                             for (std::size_t c = 0; c < cols; ++c) dst[c] += src[c];
                           }
                         });
}

template <class T>
Tensor<T> segment_softmax(const Tensor<T>& a, std::span<const std::uint32_t> segment,
                          std::size_t n_segments) {
  const std::size_t n = a.numel();
  if (segment.size() != n || a.cols() != 1) {
    throw ShapeMismatch("segment_softmax: expects a single column matching " +
                        std::to_string(segment.size()) + " segment ids, got " +
                        to_string(a.shape()));
  }
  auto v = a.value();
  std::vector<T> mx(n_segments, -std::numeric_limits<T>::infinity());
  for (std::size_t k = 0; k < n; ++k) {
    if (segment[k] >= n_segments) throw InvalidArgument("segment_softmax: segment id out of range");
    mx[segment[k]] = std::max(mx[segment[k]], v[k]);
  }
  std::vector<T> out(n), denom(n_segments, T(0));
  for (std::size_t k = 0; k < n; ++k) {
    out[k] = std::exp(v[k] - mx[segment[k]]);
    denom[segment[k]] += out[k];
  }
  for (std::size_t k = 0; k < n; ++k) out[k] /= denom[segment[k]];
  std::vector<std::uint32_t> seg(segment.begin(), segment.end());
  const std::size_t ia = a.id();
  const std::size_t iy = a.tape().size();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [=, seg = std::move(seg)](Tape<T>& tape, std::span<const T> g) {
                           auto y = tape.value_of(iy);
                           std::vector<T> dot(n_segments, T(0));
                           for (std::size_t k = 0; k < seg.size(); ++k) dot[seg[k]] += y[k] * g[k];
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t k = 0; k < seg.size(); ++k) {
                             d[k] += y[k] * (g[k] - dot[seg[k]]);
                           }
                         });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& a, T slope) {
  return unary(
      a, [slope](T x) { return x > T(0) ? x : slope * x; },
      [slope](T x, T) { return x > T(0) ? T(1) : slope; });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = T(0);
  for (T x : a.value()) s += x;
  const std::size_t ia = a.id();
  return a.tape().record(Shape{1}, {s}, a.requires_grad(),
                         [=](Tape<T>& tape, std::span<const T> g) {
                           auto& d = tape.grad_buffer(ia);
                           for (T& x : d) x += g[0];
                         });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  const std::size_t n = a.numel();
  if (n == 0) throw InvalidArgument("mean: empty array");
  return div_scalar(sum(a), static_cast<T>(n));
}

template <class T>
Tensor<T> row_sum(const Tensor<T>& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<T> out(rows, T(0));
  auto v = a.value();
  for (std::size_t r = 0; r < rows; ++r) {
    T s = T(0);
    for (std::size_t c = 0; c < cols; ++c) s += v[r * cols + c];
    out[r] = s;
  }
  const std::size_t ia = a.id();
  return a.tape().record(Shape{rows, 1}, std::move(out), a.requires_grad(),
                         [=](Tape<T>& tape, std::span<const T> g) {
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t r = 0; r < rows; ++r) {
                             for (std::size_t c = 0; c < cols; ++c) d[r * cols + c] += g[r];
                           }
                         });
}

template <class T>
Tensor<T> row_mean(const Tensor<T>& a) {
  if (a.cols() == 0) throw InvalidArgument("row_mean: zero columns");
  return div_scalar(row_sum(a), static_cast<T>(a.cols()));
}

template <class T>
Tensor<T> sqrt(const Tensor<T>& a) {
  return unary(a, [](T x) { return std::sqrt(x); }, [](T, T y) { return T(0.5) / y; });
}

template <class T>
Tensor<T> square(const Tensor<T>& a) {
  return unary(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <class T>
Tensor<T> rotate_pairs(const Tensor<T>& a, std::span<const T> cos, std::span<const T> sin) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (cos.size() != rows || sin.size() != rows || cols % 2 != 0) {
    throw ShapeMismatch("rotate_pairs: " + std::to_string(cos.size()) + " angles for shape " +
                        to_string(a.shape()));
  }
  auto v = a.value();
  std::vector<T> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    const T c = cos[r], s = sin[r];
    for (std::size_t k = 0; k < cols; k += 2) {
      const T x = v[r * cols + k], y = v[r * cols + k + 1];
      out[r * cols + k] = c * x - s * y;
      out[r * cols + k + 1] = s * x + c * y;
    }
  }
  std::vector<T> cs(cos.begin(), cos.end()), sn(sin.begin(), sin.end());
  const std::size_t ia = a.id();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [=, cs = std::move(cs), sn = std::move(sn)](Tape<T>& tape,
                                                                     std::span<const T> g) {
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t r = 0; r < rows; ++r) {
                             const T c = cs[r], s = sn[r];
                             for (std::size_t k = 0; k < cols; k += 2) {
                               const T gx = g[r * cols + k], gy = g[r * cols + k + 1];
                               d[r * cols + k] += c * gx + s * gy;
                               d[r * cols + k + 1] += -s * gx + c * gy;
                             }
                           }
                         });
}

template <class T>
Tensor<T> log_softmax_rows(const Tensor<T>& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  auto v = a.value();
  std::vector<T> out(v.size());
  for (std::size_t r = 0; r < rows; ++r) {
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < cols; ++c) mx = std::max(mx, v[r * cols + c]);
    T s = T(0);
    for (std::size_t c = 0; c < cols; ++c) s += std::exp(v[r * cols + c] - mx);
    const T lse = mx + std::log(s);
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = v[r * cols + c] - lse;
  }
  const std::size_t ia = a.id();
  const std::size_t iy = a.tape().size();
  return a.tape().record(a.shape(), std::move(out), a.requires_grad(),
                         [=](Tape<T>& tape, std::span<const T> g) {
                           auto y = tape.value_of(iy);
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t r = 0; r < rows; ++r) {
                             T gs = T(0);
                             for (std::size_t c = 0; c < cols; ++c) gs += g[r * cols + c];
                             for (std::size_t c = 0; c < cols; ++c) {
                               d[r * cols + c] += g[r * cols + c] - std::exp(y[r * cols + c]) * gs;
                             }
                           }
                         });
}

template <class T>
Tensor<T> select_cols(const Tensor<T>& a, std::span<const std::uint32_t> index) {
  const std::size_t rows = a.rows(), cols = a.cols();
  if (index.size() != rows) {
    throw ShapeMismatch("select_cols: " + std::to_string(index.size()) + " indices for shape " +
                        to_string(a.shape()));
  }
  auto v = a.value();
  std::vector<T> out(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    if (index[r] >= cols) throw InvalidArgument("select_cols: column index out of range");
    out[r] = v[r * cols + index[r]];
  }
  std::vector<std::uint32_t> idx(index.begin(), index.end());
  const std::size_t ia = a.id();
  return a.tape().record(Shape{rows, 1}, std::move(out), a.requires_grad(),
                         [=, idx = std::move(idx)](Tape<T>& tape, std::span<const T> g) {
                           auto& d = tape.grad_buffer(ia);
                           for (std::size_t r = 0; r < rows; ++r) d[r * cols + idx[r]] += g[r];
                         });
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

template <class T>
ParamId ParamSet<T>::add(std::string name, Shape shape, std::vector<T> value) {
  if (numel(shape) != value.size()) {
    throw ShapeMismatch("ParamSet::add: " + name + " shape " + to_string(shape) +
                        " does not hold " + std::to_string(value.size()) + " values");
  }
  if (find(name) != entries_.size()) throw InvalidConfig("duplicate parameter name " + name);
  entries_.push_back({std::move(name), std::move(shape), std::move(value)});
  return ParamId{entries_.size() - 1};
}

template <class T>
std::size_t ParamSet<T>::find(const std::string& name) const {
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name == name) return i;
  }
  return entries_.size();
}

template <class T>
std::size_t ParamSet<T>::total_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

template <class T>
Tensor<T> Session<T>::param(ParamId id) {
  Tensor<T>& slot = bound_.at(id.index);
  if (!slot.valid()) {
    const auto& e = (*params_)[id];
    slot = tape_.variable(e.shape, e.value);
  }
  return slot;
}

template <class T>
std::vector<std::vector<T>> Session<T>::gradients() const {
  std::vector<std::vector<T>> out;
  out.reserve(bound_.size());
  for (std::size_t i = 0; i < bound_.size(); ++i) {
    if (bound_[i].valid()) {
      out.push_back(tape_.grad(bound_[i]));
    } else {
      out.emplace_back((*params_)[i].value.size(), T(0));
    }
  }
  return out;
}

double grad_check(const std::function<Tensor<double>(Tape<double>&, const Tensor<double>&)>& f,
                  const Array<double>& x, double h) {
  std::vector<double> analytic;
  {
    Tape<double> tape;
    auto xv = tape.variable(x);
    auto y = f(tape, xv);
    tape.backward(y);
    analytic = tape.grad(xv);
  }
  auto eval = [&](const std::vector<double>& v) {
    Tape<double> tape(false);
    auto xv = tape.constant(x.shape, v);
    return f(tape, xv).item();
  };
  double worst = 0.0;
  std::vector<double> probe = x.data;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const double x0 = probe[i];
    probe[i] = x0 + h;
    const double fp = eval(probe);
    probe[i] = x0 - h;
    const double fm = eval(probe);
    probe[i] = x0;
    const double numeric = (fp - fm) / (2.0 * h);
    worst = std::max(worst, std::fabs(analytic[i] - numeric) / std::max(1.0, std::fabs(numeric)));
  }
  return worst;
}

// ---------------------------------------------------------------------------
// Explicit instantiations
// ---------------------------------------------------------------------------

#define SE2GNN_INSTANTIATE(T)                                                                   \
  template class Tape<T>;                                                                      \
  template class Tensor<T>;                                                                    \
  template class ParamSet<T>;                                                                  \
  template class Session<T>;                                                                   \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                               \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> div(const Tensor<T>&, const Tensor<T>&);                                  \
  template Tensor<T> scale(const Tensor<T>&, T);                                               \
  template Tensor<T> div_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                          \
  template Tensor<T> concat(std::span<const Tensor<T>>);                                       \
  template Tensor<T> slice_cols(const Tensor<T>&, std::size_t, std::size_t);                   \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                         \
  template Tensor<T> gather_rows(const Tensor<T>&, std::span<const std::uint32_t>);            \
  template Tensor<T> scatter_add_rows(const Tensor<T>&, std::span<const std::uint32_t>,        \
                                      std::size_t);                                            \
  template Tensor<T> segment_softmax(const Tensor<T>&, std::span<const std::uint32_t>,         \
                                     std::size_t);                                             \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                    \
  template Tensor<T> mean(const Tensor<T>&);                                                   \
  template Tensor<T> row_sum(const Tensor<T>&);                                                \
  template Tensor<T> row_mean(const Tensor<T>&);                                               \
  template Tensor<T> sqrt(const Tensor<T>&);                                                   \
  template Tensor<T> square(const Tensor<T>&);                                                 \
  template Tensor<T> rotate_pairs(const Tensor<T>&, std::span<const T>, std::span<const T>);   \
  template Tensor<T> log_softmax_rows(const Tensor<T>&);                                       \
  template Tensor<T> select_cols(const Tensor<T>&, std::span<const std::uint32_t>);

SE2GNN_INSTANTIATE(float)
SE2GNN_INSTANTIATE(double)

#undef SE2GNN_INSTANTIATE

}  // namespace se2gnn::engine
