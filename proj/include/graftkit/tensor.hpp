#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace graftkit {

enum class DType : std::uint8_t { kF32 = 1, kF64 = 2 };

using Shape = std::vector<std::int64_t>;
using Storage = std::variant<std::vector<float>, std::vector<double>>;

std::string to_string(const Shape& shape);
std::int64_t numel(const Shape& shape);
std::string_view dtype_name(DType dtype);

// Shape-rule violations. The message names the primitive and the offending shapes.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// NaN/Inf produced by a primitive, or a diverged optimisation.
class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Misuse of the gradient tape (non-scalar loss, loss not on the active tape, ...).
class AutogradError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

template <class F>
decltype(auto) dispatch(DType dtype, F&& fn) {
  if (dtype == DType::kF64) return fn(double{});
  return fn(float{});
}

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, double>) {
    return DType::kF64;
  } else {
    static_assert(std::is_same_v<T, float>);
    return DType::kF32;
  }
}

class Tape;

struct TensorImpl {
  Shape shape;
  DType dtype = DType::kF32;
  Storage data;
  bool requires_grad = false;
  std::optional<Storage> grad;
  // Producer node on a tape; null for leaves and untracked values.
  const Tape* tape = nullptr;
  std::int64_t node = -1;
};

// Dense row-major array. Copies are shallow handles onto the same storage; the
// values are treated as immutable after construction except by optimisers and
// explicit parameter assignment.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::kF32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::kF32);
  static Tensor from_values(const std::vector<double>& values, const Shape& shape,
                            DType dtype = DType::kF32);
  template <class T>
  static Tensor from_storage(std::vector<T> values, const Shape& shape);
  static Tensor from_storage(Storage values, const Shape& shape);
  static Tensor scalar(double value, DType dtype = DType::kF32);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const;
  DType dtype() const;

  template <class T>
  std::span<const T> data() const;
  // Write access for parameter updates and test fixtures. Not safe while a
  // tape that references this tensor is still going to be differentiated.
  template <class T>
  std::span<T> mutable_data();

  const Storage& storage() const;
  double item() const;
  double at(std::int64_t flat_index) const;
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on);
  bool has_grad() const;
  Tensor grad() const;
  template <class T>
  std::span<T> grad_data();
  void zero_grad();

  // Same values, no tape history, no gradient requirement.
  Tensor detach() const;
  // Deep copy of the values (and requires_grad flag), no history.
  Tensor clone() const;
  Tensor to(DType dtype) const;
  // Copies values from `other` (same shape) into this tensor's storage.
  void assign(const Tensor& other);

  bool on_tape(const Tape* tape) const;
  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<TensorImpl> impl_;
};

bool bit_identical(const Tensor& a, const Tensor& b);
double max_abs_diff(const Tensor& a, const Tensor& b);

// Accumulates gradient contributions into the grad buffers of a node's inputs.
// `grad_in[i]` is null when input i does not need a gradient.
using BackwardFn =
    std::function<void(const Storage& grad_out, std::span<Storage* const> grad_in)>;

// Ordered record of primitive applications. Nodes are appended in execution
// order, so every node's inputs precede it.
class Tape {
 public:
  struct Node {
    std::string op;
    std::vector<std::shared_ptr<TensorImpl>> inputs;
    Shape out_shape;
    DType dtype;
    BackwardFn backward;
  };

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_[i]; }

  // Populates d(loss)/d(leaf) into every requires_grad leaf reached from `loss`,
  // accumulating onto existing grads. Visits each node at most once.
  void backward(const Tensor& loss) const;

  std::int64_t append(Node node);

 private:
  std::vector<Node> nodes_;
};

// Installs a tape as the calling thread's active tape for the scope lifetime.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

void backward(const Tensor& loss);

namespace detail {

// True when `t` participates in differentiation on the active tape.
bool tracks_grad(const Tensor& t);

// Records a primitive application. `out` is returned with its producer set when
// any input tracks gradients on the active tape; otherwise it is returned as is.
Tensor record(std::string_view op, const std::vector<Tensor>& inputs, Tensor out,
              BackwardFn backward);

// Throws NumericError naming `op` if `t` holds NaN or Inf.
void check_finite(std::string_view op, const Tensor& t);

}  // namespace detail

}  // namespace graftkit
