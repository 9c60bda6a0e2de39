#include <bit>
#include "graftkit/tensor.hpp"

#include <cmath>
#include <cstring>
#include <sstream>

namespace graftkit {

namespace {

thread_local Tape* g_active_tape = nullptr;

Storage make_storage(DType dtype, std::size_t n) {
  if (dtype == DType::kF64) return std::vector<double>(n, 0.0);
  return std::vector<float>(n, 0.0f);
}

std::size_t storage_size(const Storage& s) {
  return std::visit([](const auto& v) { return v.size(); }, s);
}

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string_view dtype_name(DType dtype) { return dtype == DType::kF64 ? "f64" : "f32"; }

Tensor Tensor::zeros(const Shape& shape, DType dtype) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + to_string(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = dtype;
  impl->data = make_storage(dtype, static_cast<std::size_t>(graftkit::numel(shape)));
  return Tensor(std::move(impl));
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Tensor t = zeros(shape, dtype);
  std::visit([&](auto& v) {
    using T = typename std::decay_t<decltype(v)>::value_type;
    std::fill(v.begin(), v.end(), static_cast<T>(value));
  }, t.impl_->data);
  return t;
}

Tensor Tensor::from_values(const std::vector<double>& values, const Shape& shape, DType dtype) {
  if (static_cast<std::int64_t>(values.size()) != graftkit::numel(shape)) {
    throw ShapeError("tensor: " + std::to_string(values.size()) + " values for shape " +
                     to_string(shape));
  }
  Tensor t = zeros(shape, dtype);
  std::visit([&](auto& v) {
    using T = typename std::decay_t<decltype(v)>::value_type;
    for (std::size_t i = 0; i < values.size(); ++i) v[i] = static_cast<T>(values[i]);
  }, t.impl_->data);
  return t;
}

template <class T>
Tensor Tensor::from_storage(std::vector<T> values, const Shape& shape) {
  return from_storage(Storage(std::move(values)), shape);
}
template Tensor Tensor::from_storage<float>(std::vector<float>, const Shape&);
template Tensor Tensor::from_storage<double>(std::vector<double>, const Shape&);

Tensor Tensor::from_storage(Storage values, const Shape& shape) {
  for (auto d : shape) {
    if (d <= 0) throw ShapeError("tensor: non-positive dimension in shape " + to_string(shape));
  }
  if (static_cast<std::int64_t>(storage_size(values)) != graftkit::numel(shape)) {
    throw ShapeError("tensor: storage of " + std::to_string(storage_size(values)) +
                     " elements for shape " + to_string(shape));
  }
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = shape;
  impl->dtype = std::holds_alternative<std::vector<double>>(values) ? DType::kF64 : DType::kF32;
  impl->data = std::move(values);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

const Shape& Tensor::shape() const { return impl_->shape; }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape()));
  }
  return impl_->shape[static_cast<std::size_t>(axis)];
}

std::int64_t Tensor::numel() const { return graftkit::numel(impl_->shape); }
DType Tensor::dtype() const { return impl_->dtype; }
const Storage& Tensor::storage() const { return impl_->data; }

template <class T>
std::span<const T> Tensor::data() const {
  if (dtype() != dtype_of<T>()) {
    throw std::logic_error(std::string("tensor: requested ") +
                           std::string(dtype_name(dtype_of<T>())) + " view of " +
                           std::string(dtype_name(dtype())) + " tensor");
  }
  const auto& v = std::get<std::vector<T>>(impl_->data);
  return {v.data(), v.size()};
}
template std::span<const float> Tensor::data<float>() const;
template std::span<const double> Tensor::data<double>() const;

template <class T>
std::span<T> Tensor::mutable_data() {
  if (dtype() != dtype_of<T>()) throw std::logic_error("tensor: dtype mismatch in mutable_data");
  auto& v = std::get<std::vector<T>>(impl_->data);
  return {v.data(), v.size()};
}
template std::span<float> Tensor::mutable_data<float>();
template std::span<double> Tensor::mutable_data<double>();

double Tensor::at(std::int64_t flat_index) const {
  return std::visit([&](const auto& v) { return static_cast<double>(v.at(static_cast<std::size_t>(flat_index))); },
                    impl_->data);
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not a scalar");
  }
  return at(0);
}

std::vector<double> Tensor::to_vector() const {
  return std::visit([](const auto& v) { return std::vector<double>(v.begin(), v.end()); },
                    impl_->data);
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return impl_->grad.has_value(); }

Tensor Tensor::grad() const {
  if (!impl_->grad) return Tensor::zeros(shape(), dtype());
  return Tensor::from_storage(*impl_->grad, shape());
}

template <class T>
std::span<T> Tensor::grad_data() {
  if (!impl_->grad) impl_->grad = make_storage(dtype(), static_cast<std::size_t>(numel()));
  auto& v = std::get<std::vector<T>>(*impl_->grad);
  return {v.data(), v.size()};
}
template std::span<float> Tensor::grad_data<float>();
template std::span<double> Tensor::grad_data<double>();

void Tensor::zero_grad() { impl_->grad.reset(); }

Tensor Tensor::detach() const {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = impl_->shape;
  impl->dtype = impl_->dtype;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.impl_->requires_grad = impl_->requires_grad && impl_->tape == nullptr;
  return t;
}

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return detach();
  Storage out = make_storage(target, static_cast<std::size_t>(numel()));
  std::visit([&](auto& dst) {
    std::visit([&](const auto& src) {
      using T = typename std::decay_t<decltype(dst)>::value_type;
      for (std::size_t i = 0; i < src.size(); ++i) dst[i] = static_cast<T>(src[i]);
    }, impl_->data);
  }, out);
  return from_storage(std::move(out), shape());
}

void Tensor::assign(const Tensor& other) {
  if (other.shape() != shape()) {
    throw ShapeError("assign: shape " + to_string(other.shape()) + " into " + to_string(shape()));
  }
  Tensor converted = other.to(dtype());
  impl_->data = converted.impl_->data;
}

bool Tensor::on_tape(const Tape* tape) const {
  return impl_ && tape != nullptr && impl_->tape == tape && impl_->node >= 0;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
  return std::visit([&](const auto& va) {
    using V = std::decay_t<decltype(va)>;
    const auto& vb = std::get<V>(b.storage());
    return std::memcmp(va.data(), vb.data(), va.size() * sizeof(typename V::value_type)) == 0;
  }, a.storage());
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("max_abs_diff: shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const auto va = a.to_vector();
  const auto vb = b.to_vector();
  double m = 0.0;
  for (std::size_t i = 0; i < va.size(); ++i) m = std::max(m, std::abs(va[i] - vb[i]));
  return m;
}

std::int64_t Tape::append(Node node) {
  nodes_.push_back(std::move(node));
  return static_cast<std::int64_t>(nodes_.size()) - 1;
}

void Tape::backward(const Tensor& loss) const {
  if (!loss.defined()) throw AutogradError("backward: undefined loss");
  if (loss.numel() != 1) {
    throw AutogradError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  }
  if (!loss.on_tape(this)) {
    throw AutogradError("backward: loss was not produced on this tape (detached or untracked)");
  }
  const auto root = static_cast<std::size_t>(loss.impl()->node);
  std::vector<std::optional<Storage>> grads(root + 1);
  grads[root] = make_storage(loss.dtype(), 1);
  std::visit([](auto& v) { v[0] = 1; }, *grads[root]);

  std::vector<Storage*> grad_in;
  for (std::size_t i = root + 1; i-- > 0;) {
    if (!grads[i]) continue;
    const Node& n = nodes_[i];
    grad_in.assign(n.inputs.size(), nullptr);
    bool any = false;
    for (std::size_t j = 0; j < n.inputs.size(); ++j) {
      TensorImpl& in = *n.inputs[j];
      const std::size_t count = static_cast<std::size_t>(graftkit::numel(in.shape));
      if (in.tape == this && in.node >= 0) {
        auto& slot = grads[static_cast<std::size_t>(in.node)];
        if (!slot) slot = make_storage(in.dtype, count);
        grad_in[j] = &*slot;
        any = true;
      } else if (in.requires_grad && in.tape == nullptr) {
        if (!in.grad) in.grad = make_storage(in.dtype, count);
        grad_in[j] = &*in.grad;
        any = true;
      }
    }
    if (any) n.backward(*grads[i], grad_in);
    grads[i].reset();
  }
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.impl()->tape == nullptr) {
    throw AutogradError("backward: loss was not produced on an active tape");
  }
  loss.impl()->tape->backward(loss);
}

namespace detail {

bool tracks_grad(const Tensor& t) {
  const Tape* tape = g_active_tape;
  if (tape == nullptr || !t.defined()) return false;
  if (t.on_tape(tape)) return true;
  return t.requires_grad() && t.impl()->tape == nullptr;
}

void check_finite(std::string_view op, const Tensor& t) {
  // Exponent-all-ones test on the raw bits; branch-free so it vectorises.
  const bool ok = std::visit([](const auto& v) {
    using T = typename std::decay_t<decltype(v)>::value_type;
    using U = std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>;
    constexpr U mask = sizeof(T) == 4 ? U(0x7f800000u) : U(0x7ff0000000000000ull);
    U bad = 0;
    for (const T x : v) bad |= static_cast<U>((std::bit_cast<U>(x) & mask) == mask);
    return bad == 0;
  }, t.storage());
  if (!ok) {
    throw NumericError(std::string(op) + ": non-finite value in output of shape " +
                       to_string(t.shape()));
  }
}

Tensor record(std::string_view op, const std::vector<Tensor>& inputs, Tensor out,
              BackwardFn backward) {
  check_finite(op, out);
  Tape* tape = g_active_tape;
  if (tape == nullptr) return out;
  bool any = false;
  for (const auto& in : inputs) any = any || tracks_grad(in);
  if (!any) return out;
  Tape::Node node;
  node.op = std::string(op);
  node.inputs.reserve(inputs.size());
  for (const auto& in : inputs) node.inputs.push_back(in.impl());
  node.out_shape = out.shape();
  node.dtype = out.dtype();
  node.backward = std::move(backward);
  const auto id = tape->append(std::move(node));
  out.impl()->tape = tape;
  out.impl()->node = id;
  out.impl()->requires_grad = true;
  return out;
}

}  // namespace detail

}  // namespace graftkit
