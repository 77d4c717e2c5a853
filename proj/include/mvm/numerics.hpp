#pragma once

// Dense row-major arrays with a reverse-mode tape and a central-difference
// gradient oracle. Every other mvm header is built on this one.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

namespace mvm {

using Shape = std::vector<std::size_t>;

/// Raised when a value that must be finite is not (NaN loss, bad gradient).
class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Raised by the finite-difference oracle when f cannot be evaluated.
class OracleFailure : public NumericalError {
 public:
  using NumericalError::NumericalError;
};

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Handle to a dense array. Copies share storage (like a tensor handle); use
/// clone() for an independent deep copy. The gradient buffer is allocated
/// only once the array takes part in a backward pass.
template <class T>
class Array {
 public:
  using value_type = T;

  Array() : s_(std::make_shared<Storage>()) {}

  explicit Array(Shape shape, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    for (auto d : shape)
      if (d == 0) throw std::invalid_argument("Array: zero-sized dimension in " + shape_str(shape));
    s_->data.assign(shape_size(shape), T{0});
    s_->shape = std::move(shape);
    s_->requires_grad = requires_grad;
  }

  Array(Shape shape, std::vector<T> data, bool requires_grad = false)
      : s_(std::make_shared<Storage>()) {
    if (shape_size(shape) != data.size())
      throw std::invalid_argument("Array: data length " + std::to_string(data.size()) +
                                  " does not match shape " + shape_str(shape));
    s_->shape = std::move(shape);
    s_->data = std::move(data);
    s_->requires_grad = requires_grad;
  }

  static Array scalar(T v, bool requires_grad = false) {
    return Array(Shape{1}, std::vector<T>{v}, requires_grad);
  }

  const Shape& shape() const { return s_->shape; }
  std::size_t size() const { return s_->data.size(); }
  std::size_t ndim() const { return s_->shape.size(); }
  std::size_t rows() const { return s_->shape.empty() ? 0 : s_->shape[0]; }
  std::size_t cols() const { return rows() == 0 ? 0 : size() / rows(); }

  std::span<T> data() { return s_->data; }
  std::span<const T> data() const { return s_->data; }
  T* ptr() { return s_->data.data(); }
  const T* ptr() const { return s_->data.data(); }

  T& operator[](std::size_t i) { return s_->data[i]; }
  const T& operator[](std::size_t i) const { return s_->data[i]; }
  T& at(std::size_t r, std::size_t c) { return s_->data[r * cols() + c]; }
  const T& at(std::size_t r, std::size_t c) const { return s_->data[r * cols() + c]; }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item(): array of shape " + shape_str(shape()) + " is not a scalar");
    return s_->data[0];
  }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<T> grad() { return s_->grad; }
  std::span<const T> grad() const { return s_->grad; }
  // Gradient storage is part of the shared handle state, so const handles
  // captured by adjoints can still accumulate into it.
  std::span<T> ensure_grad() const {
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T{0});
    return s_->grad;
  }
  void clear_grad() { std::vector<T>().swap(s_->grad); }

  bool same_storage(const Array& o) const { return s_ == o.s_; }

  Array clone() const {
    Array out;
    *out.s_ = *s_;
    return out;
  }

  template <class U>
  Array<U> cast() const {
    std::vector<U> d(s_->data.begin(), s_->data.end());
    return Array<U>(s_->shape, std::move(d), s_->requires_grad);
  }

 private:
  struct Storage {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> s_;
};

/// Ordered record of adjoint closures. Confined to one thread.
template <class T>
class Tape {
 public:
  void record(std::function<void()> adjoint) { adjoints_.push_back(std::move(adjoint)); }

  /// Seeds d(loss)/d(loss) = 1 and replays adjoints in reverse order.
  void backward(Array<T>& loss) {
    if (loss.size() != 1) throw std::invalid_argument("backward: loss must be a scalar, got " + shape_str(loss.shape()));
    loss.ensure_grad()[0] = T{1};
    for (auto it = adjoints_.rbegin(); it != adjoints_.rend(); ++it) (*it)();
  }

  void clear() { adjoints_.clear(); }
  std::size_t size() const { return adjoints_.size(); }

 private:
  std::vector<std::function<void()>> adjoints_;
};

namespace op {

namespace detail {

template <class T>
bool tracks(Tape<T>* tape, std::initializer_list<const Array<T>*> inputs) {
  if (tape == nullptr) return false;
  for (auto* a : inputs)
    if (a->requires_grad()) return true;
  return false;
}

inline void require(bool cond, const char* op, const std::string& what) {
  if (!cond) throw std::invalid_argument(std::string(op) + ": " + what);
}

template <class T>
void require_same_shape(const char* op, const Array<T>& a, const Array<T>& b) {
  require(a.shape() == b.shape(), op,
          "shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

template <class T>
void require_matrix(const char* op, const Array<T>& a) {
  require(a.ndim() == 2, op, "expected a matrix, got " + shape_str(a.shape()));
}

}  // namespace detail

template <class T>
Array<T> reshape(Tape<T>* tape, const Array<T>& a, Shape shape) {
  detail::require(shape_size(shape) == a.size(), "reshape",
                  "cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  Array<T> out(std::move(shape), std::vector<T>(a.data().begin(), a.data().end()));
  if (detail::tracks(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      auto ga = a.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
    });
  }
  return out;
}

template <class T>
Array<T> add(Tape<T>* tape, const Array<T>& a, const Array<T>& b) {
  detail::require_same_shape("add", a, b);
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] + b[i];
  if (detail::tracks(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
    });
  }
  return out;
}

/// out = a * mul + shift, elementwise.
template <class T>
Array<T> affine(Tape<T>* tape, const Array<T>& a, T mul, T shift = T{0}) {
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * mul + shift;
  if (detail::tracks(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out, mul]() mutable {
      if (!out.has_grad()) return;
      auto g = a.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i] * mul;
    });
  }
  return out;
}

template <class T>
Array<T> scale(Tape<T>* tape, const Array<T>& a, T s) {
  return affine(tape, a, s, T{0});
}

/// a [R x C] + bias [C] broadcast over rows.
template <class T>
Array<T> add_row(Tape<T>* tape, const Array<T>& a, const Array<T>& bias) {
  detail::require_matrix("add_row", a);
  detail::require(bias.size() == a.cols(), "add_row",
                  "bias length " + std::to_string(bias.size()) + " vs " + std::to_string(a.cols()) + " columns");
  const std::size_t R = a.rows(), C = a.cols();
  Array<T> out(a.shape());
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a[r * C + c] + bias[c];
  if (detail::tracks(tape, {&a, &bias})) {
    out.set_requires_grad(true);
    tape->record([a, bias, out, R, C]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) g[i] += go[i];
      }
      if (bias.requires_grad()) {
        auto g = bias.ensure_grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) g[c] += go[r * C + c];
      }
    });
  }
  return out;
}

namespace detail {

template <class T>
using RowMajor = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using ConstMap = Eigen::Map<const RowMajor<T>>;
template <class T>
using Map = Eigen::Map<RowMajor<T>>;

// c[MxN] += a[MxK] * b[KxN]
template <class T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
  Map<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, K, N);
}

// c[MxN] += a[MxK] * b[NxK]^T
template <class T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
  Map<T>(c, M, N).noalias() += ConstMap<T>(a, M, K) * ConstMap<T>(b, N, K).transpose();
}

// c[KxN] += a[MxK]^T * b[MxN]
template <class T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t M, std::size_t K, std::size_t N) {
  Map<T>(c, K, N).noalias() += ConstMap<T>(a, M, K).transpose() * ConstMap<T>(b, M, N);
}

}  // namespace detail

/// a [M x K] * b [K x N]
template <class T>
Array<T> matmul(Tape<T>* tape, const Array<T>& a, const Array<T>& b) {
  detail::require_matrix("matmul", a);
  detail::require_matrix("matmul", b);
  detail::require(a.cols() == b.rows(), "matmul",
                  "inner dimensions differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  const std::size_t M = a.rows(), K = a.cols(), N = b.cols();
  Array<T> out(Shape{M, N});
  detail::gemm_nn(a.ptr(), b.ptr(), out.ptr(), M, K, N);
  if (detail::tracks(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, M, K, N]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      if (a.requires_grad()) detail::gemm_nt(go, b.ptr(), a.ensure_grad().data(), M, N, K);
      if (b.requires_grad()) detail::gemm_tn(a.ptr(), go, b.ensure_grad().data(), M, K, N);
    });
  }
  return out;
}

/// a [M x K] * b[N x K]^T
template <class T>
Array<T> matmul_nt(Tape<T>* tape, const Array<T>& a, const Array<T>& b) {
  detail::require_matrix("matmul_nt", a);
  detail::require_matrix("matmul_nt", b);
  detail::require(a.cols() == b.cols(), "matmul_nt",
                  "inner dimensions differ: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) + "^T");
  const std::size_t M = a.rows(), K = a.cols(), N = b.rows();
  Array<T> out(Shape{M, N});
  detail::gemm_nt(a.ptr(), b.ptr(), out.ptr(), M, K, N);
  if (detail::tracks(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, M, K, N]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      if (a.requires_grad()) detail::gemm_nn(go, b.ptr(), a.ensure_grad().data(), M, N, K);
      if (b.requires_grad()) detail::gemm_tn(go, a.ptr(), b.ensure_grad().data(), M, N, K);
    });
  }
  return out;
}

template <class T>
Array<T> transpose(Tape<T>* tape, const Array<T>& a) {
  detail::require_matrix("transpose", a);
  const std::size_t R = a.rows(), C = a.cols();
  Array<T> out(Shape{C, R});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) out[c * R + r] = a[r * C + c];
  if (detail::tracks(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out, R, C]() mutable {
      if (!out.has_grad()) return;
      auto g = a.ensure_grad();
      auto go = out.grad();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t c = 0; c < C; ++c) g[r * C + c] += go[c * R + r];
    });
  }
  return out;
}

/// Concatenates matrices with equal row counts along the feature axis, in
/// argument order.
template <class T>
Array<T> concat_cols(Tape<T>* tape, const std::vector<Array<T>>& parts) {
  detail::require(!parts.empty(), "concat_cols", "no inputs");
  const std::size_t R = parts.front().rows();
  std::size_t C = 0;
  bool track = false;
  for (const auto& p : parts) {
    detail::require_matrix("concat_cols", p);
    detail::require(p.rows() == R, "concat_cols", "row counts differ");
    C += p.cols();
    track = track || (tape && p.requires_grad());
  }
  Array<T> out(Shape{R, C});
  std::size_t off = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < R; ++r)
      std::copy_n(p.ptr() + r * pc, pc, out.ptr() + r * C + off);
    off += pc;
  }
  if (track) {
    out.set_requires_grad(true);
    tape->record([parts, out, R, C]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      std::size_t off = 0;
      for (auto& p : parts) {
        const std::size_t pc = p.cols();
        if (p.requires_grad()) {
          auto g = p.ensure_grad();
          for (std::size_t r = 0; r < R; ++r)
            for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += go[r * C + off + c];
        }
        off += pc;
      }
    });
  }
  return out;
}

template <class T>
Array<T> sum(Tape<T>* tape, const Array<T>& a) {
  T acc{0};
  for (auto v : a.data()) acc += v;
  Array<T> out = Array<T>::scalar(acc);
  if (detail::tracks(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0];
      for (auto& g : a.ensure_grad()) g += go;
    });
  }
  return out;
}

template <class T>
Array<T> mean(Tape<T>* tape, const Array<T>& a) {
  return scale(tape, sum(tape, a), T{1} / static_cast<T>(a.size()));
}

template <class T>
Array<T> abs(Tape<T>* tape, const Array<T>& a) {
  Array<T> out(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = std::abs(a[i]);
  if (detail::tracks(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out]() mutable {
      if (!out.has_grad()) return;
      auto g = a.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i)
        g[i] += a[i] > T{0} ? go[i] : (a[i] < T{0} ? -go[i] : T{0});
    });
  }
  return out;
}

/// Sum of all off-diagonal entries of a square matrix.
template <class T>
Array<T> sum_offdiag(Tape<T>* tape, const Array<T>& a) {
  detail::require_matrix("sum_offdiag", a);
  detail::require(a.rows() == a.cols(), "sum_offdiag", "matrix is not square: " + shape_str(a.shape()));
  const std::size_t N = a.rows();
  T acc{0};
  for (std::size_t i = 0; i < N; ++i)
    for (std::size_t j = 0; j < N; ++j)
      if (i != j) acc += a[i * N + j];
  Array<T> out = Array<T>::scalar(acc);
  if (detail::tracks(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out, N]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0];
      auto g = a.ensure_grad();
      for (std::size_t i = 0; i < N; ++i)
        for (std::size_t j = 0; j < N; ++j)
          if (i != j) g[i * N + j] += go;
    });
  }
  return out;
}

/// GELU, tanh approximation.
template <class T>
Array<T> gelu(Tape<T>* tape, const Array<T>& a) {
  constexpr T k0 = T(0.7978845608028654);  // sqrt(2/pi)
  constexpr T k1 = T(0.044715);
  Array<T> out(a.shape());
  const bool track = detail::tracks(tape, {&a});
  std::vector<T> th(track ? a.size() : 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T x = a[i];
    const T t = std::tanh(k0 * (x + k1 * x * x * x));
    out[i] = T(0.5) * x * (T{1} + t);
    if (track) th[i] = t;
  }
  if (track) {
    out.set_requires_grad(true);
    tape->record([a, out, th = std::move(th)]() mutable {
      if (!out.has_grad()) return;
      auto g = a.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < go.size(); ++i) {
        const T x = a[i];
        const T d = T(0.5) * (T{1} + th[i]) +
                    T(0.5) * x * (T{1} - th[i] * th[i]) * k0 * (T{1} + T{3} * k1 * x * x);
        g[i] += go[i] * d;
      }
    });
  }
  return out;
}

/// Each row divided by max(||row||, eps). The clamp is treated as constant
/// (zero subgradient through the norm) where it is active.
template <class T>
Array<T> normalize_rows(Tape<T>* tape, const Array<T>& a, T eps = T(1e-8)) {
  detail::require_matrix("normalize_rows", a);
  const std::size_t R = a.rows(), C = a.cols();
  Array<T> out(a.shape());
  std::vector<T> denom(R);
  std::vector<char> clamped(R);
  for (std::size_t r = 0; r < R; ++r) {
    T ss{0};
    for (std::size_t c = 0; c < C; ++c) ss += a[r * C + c] * a[r * C + c];
    const T n = std::sqrt(ss);
    clamped[r] = n <= eps;
    denom[r] = clamped[r] ? eps : n;
    for (std::size_t c = 0; c < C; ++c) out[r * C + c] = a[r * C + c] / denom[r];
  }
  if (detail::tracks(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out, R, C, denom = std::move(denom), clamped = std::move(clamped)]() mutable {
      if (!out.has_grad()) return;
      auto g = a.ensure_grad();
      auto go = out.grad();
      for (std::size_t r = 0; r < R; ++r) {
        const T inv = T{1} / denom[r];
        T proj{0};
        if (!clamped[r])
          for (std::size_t c = 0; c < C; ++c) proj += go[r * C + c] * out[r * C + c];
        for (std::size_t c = 0; c < C; ++c)
          g[r * C + c] += (go[r * C + c] - proj * out[r * C + c]) * inv;
      }
    });
  }
  return out;
}

/// Row-wise dot products of two equally shaped matrices -> [R].
template <class T>
Array<T> rowwise_dot(Tape<T>* tape, const Array<T>& a, const Array<T>& b) {
  detail::require_matrix("rowwise_dot", a);
  detail::require_same_shape("rowwise_dot", a, b);
  const std::size_t R = a.rows(), C = a.cols();
  Array<T> out(Shape{R});
  for (std::size_t r = 0; r < R; ++r) {
    T acc{0};
    for (std::size_t c = 0; c < C; ++c) acc += a[r * C + c] * b[r * C + c];
    out[r] = acc;
  }
  if (detail::tracks(tape, {&a, &b})) {
    out.set_requires_grad(true);
    tape->record([a, b, out, R, C]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (a.requires_grad()) {
        auto g = a.ensure_grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) g[r * C + c] += go[r] * b[r * C + c];
      }
      if (b.requires_grad()) {
        auto g = b.ensure_grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) g[r * C + c] += go[r] * a[r * C + c];
      }
    });
  }
  return out;
}

/// Pairwise cosine similarities between the rows of a [M x D] and b [N x D].
template <class T>
Array<T> cosine_matrix(Tape<T>* tape, const Array<T>& a, const Array<T>& b, T eps = T(1e-8)) {
  detail::require(a.cols() == b.cols(), "cosine_matrix",
                  "feature dimensions differ: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return matmul_nt(tape, normalize_rows(tape, a, eps), normalize_rows(tape, b, eps));
}

/// Cosine similarity of matching rows -> [R].
template <class T>
Array<T> cosine_rows(Tape<T>* tape, const Array<T>& a, const Array<T>& b, T eps = T(1e-8)) {
  detail::require_same_shape("cosine_rows", a, b);
  return rowwise_dot(tape, normalize_rows(tape, a, eps), normalize_rows(tape, b, eps));
}

/// x.y / (max(|x|, eps) * max(|y|, eps)) for two vectors; returns a scalar.
template <class T>
Array<T> cosine_similarity(Tape<T>* tape, const Array<T>& x, const Array<T>& y, T eps = T(1e-8)) {
  detail::require(x.ndim() == 1 && y.ndim() == 1, "cosine_similarity", "expected vectors");
  detail::require_same_shape("cosine_similarity", x, y);
  const Shape row{1, x.size()};
  return cosine_rows(tape, reshape(tape, x, row), reshape(tape, y, row), eps);
}

/// softmax(alpha * row) for every row, max-subtracted.
template <class T>
Array<T> softmax_rows(Tape<T>* tape, const Array<T>& a, T alpha) {
  detail::require(a.ndim() == 1 || a.ndim() == 2, "softmax_rows", "expected a vector or matrix");
  detail::require(alpha >= T{0}, "softmax_rows", "alpha must be non-negative");
  const std::size_t R = a.ndim() == 1 ? 1 : a.rows();
  const std::size_t C = a.size() / R;
  Array<T> out(a.shape());
  for (std::size_t r = 0; r < R; ++r) {
    const T* x = a.ptr() + r * C;
    T* y = out.ptr() + r * C;
    T mx = -std::numeric_limits<T>::infinity();
    for (std::size_t c = 0; c < C; ++c) {
      if (!std::isfinite(x[c])) throw std::invalid_argument("softmax_rows: non-finite score");
      mx = std::max(mx, alpha * x[c]);
    }
    T z{0};
    for (std::size_t c = 0; c < C; ++c) z += (y[c] = std::exp(alpha * x[c] - mx));
    for (std::size_t c = 0; c < C; ++c) y[c] /= z;
  }
  if (detail::tracks(tape, {&a})) {
    out.set_requires_grad(true);
    tape->record([a, out, R, C, alpha]() mutable {
      if (!out.has_grad()) return;
      auto g = a.ensure_grad();
      auto go = out.grad();
      for (std::size_t r = 0; r < R; ++r) {
        T dot{0};
        for (std::size_t c = 0; c < C; ++c) dot += go[r * C + c] * out[r * C + c];
        for (std::size_t c = 0; c < C; ++c)
          g[r * C + c] += alpha * out[r * C + c] * (go[r * C + c] - dot);
      }
    });
  }
  return out;
}

/// Per-row (x - mean) / sqrt(var + eps) * gain + bias, population variance.
template <class T>
Array<T> layer_norm_rows(Tape<T>* tape, const Array<T>& x, const Array<T>& gain, const Array<T>& bias,
                         T eps = T(1e-5)) {
  detail::require(x.ndim() == 1 || x.ndim() == 2, "layer_norm", "expected a vector or matrix");
  const std::size_t R = x.ndim() == 1 ? 1 : x.rows();
  const std::size_t C = x.size() / R;
  detail::require(gain.size() == C && bias.size() == C, "layer_norm",
                  "gain/bias length must equal feature dimension " + std::to_string(C));
  Array<T> out(x.shape());
  std::vector<T> xhat(x.size());
  std::vector<T> inv_std(R);
  for (std::size_t r = 0; r < R; ++r) {
    const T* xr = x.ptr() + r * C;
    T mu{0};
    for (std::size_t c = 0; c < C; ++c) mu += xr[c];
    mu /= static_cast<T>(C);
    T var{0};
    for (std::size_t c = 0; c < C; ++c) var += (xr[c] - mu) * (xr[c] - mu);
    var /= static_cast<T>(C);
    inv_std[r] = T{1} / std::sqrt(var + eps);
    for (std::size_t c = 0; c < C; ++c) {
      xhat[r * C + c] = (xr[c] - mu) * inv_std[r];
      out[r * C + c] = xhat[r * C + c] * gain[c] + bias[c];
    }
  }
  if (detail::tracks(tape, {&x, &gain, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, gain, bias, out, R, C, xhat = std::move(xhat), inv_std = std::move(inv_std)]() mutable {
      if (!out.has_grad()) return;
      auto go = out.grad();
      if (gain.requires_grad()) {
        auto g = gain.ensure_grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) g[c] += go[r * C + c] * xhat[r * C + c];
      }
      if (bias.requires_grad()) {
        auto g = bias.ensure_grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < C; ++c) g[c] += go[r * C + c];
      }
      if (x.requires_grad()) {
        auto g = x.ensure_grad();
        const T n = static_cast<T>(C);
        for (std::size_t r = 0; r < R; ++r) {
          T s1{0}, s2{0};
          for (std::size_t c = 0; c < C; ++c) {
            const T dxh = go[r * C + c] * gain[c];
            s1 += dxh;
            s2 += dxh * xhat[r * C + c];
          }
          for (std::size_t c = 0; c < C; ++c) {
            const T dxh = go[r * C + c] * gain[c];
            g[r * C + c] += inv_std[r] / n * (n * dxh - s1 - xhat[r * C + c] * s2);
          }
        }
      }
    });
  }
  return out;
}

/// Mean over rows of -log softmax(logits[r])[labels[r]]. A vector of logits is
/// treated as a single row.
template <class T>
Array<T> cross_entropy(Tape<T>* tape, const Array<T>& logits, std::span<const int> labels) {
  detail::require(logits.ndim() == 1 || logits.ndim() == 2, "cross_entropy", "expected a vector or matrix");
  const std::size_t R = logits.ndim() == 1 ? 1 : logits.rows();
  const std::size_t K = logits.size() / R;
  detail::require(K >= 2, "cross_entropy", "need at least two classes");
  detail::require(labels.size() == R, "cross_entropy", "one label per row required");
  for (int y : labels)
    detail::require(y >= 0 && static_cast<std::size_t>(y) < K, "cross_entropy",
                    "label " + std::to_string(y) + " out of range [0, " + std::to_string(K) + ")");
  std::vector<T> prob(logits.size());
  T total{0};
  for (std::size_t r = 0; r < R; ++r) {
    const T* x = logits.ptr() + r * K;
    const T mx = *std::max_element(x, x + K);
    T z{0};
    for (std::size_t k = 0; k < K; ++k) z += (prob[r * K + k] = std::exp(x[k] - mx));
    for (std::size_t k = 0; k < K; ++k) prob[r * K + k] /= z;
    total += -(x[labels[r]] - mx - std::log(z));
  }
  Array<T> out = Array<T>::scalar(total / static_cast<T>(R));
  if (detail::tracks(tape, {&logits})) {
    out.set_requires_grad(true);
    std::vector<int> ys(labels.begin(), labels.end());
    tape->record([logits, out, R, K, prob = std::move(prob), ys = std::move(ys)]() mutable {
      if (!out.has_grad()) return;
      const T go = out.grad()[0] / static_cast<T>(R);
      auto g = logits.ensure_grad();
      for (std::size_t r = 0; r < R; ++r)
        for (std::size_t k = 0; k < K; ++k)
          g[r * K + k] += go * (prob[r * K + k] - (static_cast<int>(k) == ys[r] ? T{1} : T{0}));
    });
  }
  return out;
}

template <class T>
Array<T> cross_entropy(Tape<T>* tape, const Array<T>& logits, int label) {
  const int l[1] = {label};
  return cross_entropy(tape, logits, std::span<const int>(l, 1));
}

/// Rows of table selected by tokens -> [tokens x D].
template <class T>
Array<T> embedding(Tape<T>* tape, const Array<T>& table, std::span<const int> tokens) {
  detail::require_matrix("embedding", table);
  const std::size_t V = table.rows(), D = table.cols();
  for (int t : tokens)
    detail::require(t >= 0 && static_cast<std::size_t>(t) < V, "embedding",
                    "token " + std::to_string(t) + " out of range [0, " + std::to_string(V) + ")");
  detail::require(!tokens.empty(), "embedding", "empty token sequence");
  Array<T> out(Shape{tokens.size(), D});
  for (std::size_t i = 0; i < tokens.size(); ++i)
    std::copy_n(table.ptr() + static_cast<std::size_t>(tokens[i]) * D, D, out.ptr() + i * D);
  if (detail::tracks(tape, {&table})) {
    out.set_requires_grad(true);
    std::vector<int> toks(tokens.begin(), tokens.end());
    tape->record([table, out, D, toks = std::move(toks)]() mutable {
      if (!out.has_grad()) return;
      auto g = table.ensure_grad();
      auto go = out.grad();
      for (std::size_t i = 0; i < toks.size(); ++i)
        for (std::size_t d = 0; d < D; ++d) g[static_cast<std::size_t>(toks[i]) * D + d] += go[i * D + d];
    });
  }
  return out;
}

/// Dilated temporal convolution with zero "same" padding, lowered to one
/// matrix product over unfolded frame windows.
///   x:      [B*T x Cin], sequences of length T stacked along rows
///   weight: [kernel*Cin x Cout], tap-major
///   bias:   [Cout]
/// Kernel size must be odd.
template <class T>
Array<T> conv1d_time(Tape<T>* tape, const Array<T>& x, const Array<T>& weight, const Array<T>& bias,
                     std::size_t T_len, std::size_t kernel, std::size_t dilation = 1) {
  detail::require_matrix("conv1d_time", x);
  detail::require_matrix("conv1d_time", weight);
  detail::require(kernel % 2 == 1, "conv1d_time", "kernel size must be odd");
  detail::require(T_len > 0 && x.rows() % T_len == 0, "conv1d_time", "row count is not a multiple of T");
  const std::size_t Cin = x.cols(), Cout = weight.cols();
  detail::require(weight.rows() == kernel * Cin, "conv1d_time",
                  "weight shape " + shape_str(weight.shape()) + " does not match kernel*Cin");
  detail::require(bias.size() == Cout, "conv1d_time", "bias length mismatch");
  const std::size_t R = x.rows();
  const std::size_t W = kernel * Cin;
  const std::ptrdiff_t half = static_cast<std::ptrdiff_t>((kernel / 2) * dilation);
  // source row of (output row r, tap k), or -1 for padding
  auto source = [=](std::size_t r, std::size_t k) -> std::ptrdiff_t {
    const std::size_t t = r % T_len;
    const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(k * dilation) - half;
    if (src < 0 || src >= static_cast<std::ptrdiff_t>(T_len)) return -1;
    return static_cast<std::ptrdiff_t>(r - t) + src;
  };
  std::vector<T> cols(R * W, T{0});
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t k = 0; k < kernel; ++k)
      if (const auto src = source(r, k); src >= 0)
        std::copy_n(x.ptr() + static_cast<std::size_t>(src) * Cin, Cin, cols.data() + r * W + k * Cin);
  Array<T> out(Shape{R, Cout});
  for (std::size_t r = 0; r < R; ++r) std::copy_n(bias.ptr(), Cout, out.ptr() + r * Cout);
  detail::gemm_nn(cols.data(), weight.ptr(), out.ptr(), R, W, Cout);
  if (detail::tracks(tape, {&x, &weight, &bias})) {
    out.set_requires_grad(true);
    tape->record([x, weight, bias, out, R, W, Cin, Cout, kernel, source, cols = std::move(cols)]() mutable {
      if (!out.has_grad()) return;
      const T* go = out.grad().data();
      if (bias.requires_grad()) {
        auto gb = bias.ensure_grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t c = 0; c < Cout; ++c) gb[c] += go[r * Cout + c];
      }
      if (weight.requires_grad()) detail::gemm_tn(cols.data(), go, weight.ensure_grad().data(), R, W, Cout);
      if (x.requires_grad()) {
        std::vector<T> gcols(R * W, T{0});
        detail::gemm_nt(go, weight.ptr(), gcols.data(), R, Cout, W);
        auto gx = x.ensure_grad();
        for (std::size_t r = 0; r < R; ++r)
          for (std::size_t k = 0; k < kernel; ++k)
            if (const auto src = source(r, k); src >= 0) {
              T* dst = gx.data() + static_cast<std::size_t>(src) * Cin;
              const T* from = gcols.data() + r * W + k * Cin;
              for (std::size_t c = 0; c < Cin; ++c) dst[c] += from[c];
            }
      }
    });
  }
  return out;
}

/// Mean over the T frames of each sequence: [B*T x D] -> [B x D].
template <class T>
Array<T> mean_pool_time(Tape<T>* tape, const Array<T>& x, std::size_t T_len) {
  detail::require_matrix("mean_pool_time", x);
  detail::require(T_len > 0 && x.rows() % T_len == 0, "mean_pool_time", "row count is not a multiple of T");
  const std::size_t B = x.rows() / T_len, D = x.cols();
  const T inv = T{1} / static_cast<T>(T_len);
  Array<T> out(Shape{B, D});
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t t = 0; t < T_len; ++t)
      for (std::size_t d = 0; d < D; ++d) out[b * D + d] += x[(b * T_len + t) * D + d] * inv;
  if (detail::tracks(tape, {&x})) {
    out.set_requires_grad(true);
    tape->record([x, out, B, T_len, D, inv]() mutable {
      if (!out.has_grad()) return;
      auto g = x.ensure_grad();
      auto go = out.grad();
      for (std::size_t b = 0; b < B; ++b)
        for (std::size_t t = 0; t < T_len; ++t)
          for (std::size_t d = 0; d < D; ++d) g[(b * T_len + t) * D + d] += go[b * D + d] * inv;
    });
  }
  return out;
}

}  // namespace op

/// Central differences (f(p + eps e_i) - f(p - eps e_i)) / 2 eps for every
/// coordinate of every parameter. Parameters are restored afterwards.
template <class T>
std::vector<std::vector<T>> finite_diff_gradient(const std::function<T()>& f, std::vector<Array<T>> params,
                                                 T eps = T(1e-4)) {
  std::vector<std::vector<T>> grads;
  grads.reserve(params.size());
  for (auto& p : params) {
    std::vector<T> g(p.size());
    for (std::size_t i = 0; i < p.size(); ++i) {
      const T orig = p[i];
      p[i] = orig + eps;
      const T up = f();
      p[i] = orig - eps;
      const T down = f();
      p[i] = orig;
      if (!std::isfinite(up) || !std::isfinite(down))
        throw OracleFailure("finite_diff_gradient: non-finite evaluation at coordinate " + std::to_string(i));
      g[i] = (up - down) / (T{2} * eps);
    }
    grads.push_back(std::move(g));
  }
  return grads;
}

/// max_i |a_i - b_i| / max(|a_i|, |b_i|, floor). Coordinates where both values
/// are below floor are compared on the absolute scale of floor.
template <class T>
T max_relative_error(std::span<const T> a, std::span<const T> b, T floor = T(1e-7)) {
  if (a.size() != b.size()) throw std::invalid_argument("max_relative_error: length mismatch");
  T worst{0};
  for (std::size_t i = 0; i < a.size(); ++i) {
    const T denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

}  // namespace mvm
