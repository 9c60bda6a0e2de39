#include "graftkit/grad_check.hpp"

#include <cmath>
#include <numeric>

#include "graftkit/rng.hpp"

namespace graftkit {

namespace {

double eval_scalar(const std::function<Tensor()>& f) {
  const Tensor y = f();
  if (y.numel() != 1) {
    throw AutogradError("grad_check: function must be scalar-valued, got " + to_string(y.shape()));
  }
  const double v = y.item();
  if (!std::isfinite(v)) throw NumericError("grad_check: non-finite function value");
  return v;
}

}  // namespace

GradCheckResult grad_check_leaf(const std::function<Tensor()>& f, Tensor leaf, double h, double tol,
                                std::int64_t max_coords, std::uint64_t seed) {
  if (leaf.dtype() != DType::kF64) {
    throw std::invalid_argument("grad_check: requires a 64-bit tensor, got " +
                                std::string(dtype_name(leaf.dtype())));
  }
  const bool had_flag = leaf.requires_grad();
  leaf.set_requires_grad(true);
  leaf.zero_grad();
  {
    Tape tape;
    TapeScope scope(tape);
    const Tensor y = f();
    if (!std::isfinite(y.item())) throw NumericError("grad_check: non-finite function value");
    tape.backward(y);
  }
  const Tensor analytic = leaf.grad();
  leaf.zero_grad();
  leaf.set_requires_grad(had_flag);

  std::vector<std::int64_t> coords(static_cast<std::size_t>(leaf.numel()));
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && max_coords < leaf.numel()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < static_cast<std::size_t>(max_coords); ++i) {
      const auto j = i + rng.below(coords.size() - i);
      std::swap(coords[i], coords[j]);
    }
    coords.resize(static_cast<std::size_t>(max_coords));
  }

  auto values = leaf.mutable_data<double>();
  const auto grad = analytic.data<double>();
  GradCheckResult result;
  for (auto i : coords) {
    const double saved = values[i];
    values[i] = saved + h;
    const double fp = eval_scalar(f);
    values[i] = saved - h;
    const double fm = eval_scalar(f);
    values[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double a = grad[i];
    const double err = std::abs(a - numeric) / (std::abs(a) + std::abs(numeric) + 1e-12);
    if (err > result.max_error || result.worst_index < 0) {
      result.max_error = std::max(result.max_error, err);
      if (err >= result.max_error) result.worst_index = i;
    }
    ++result.checked;
  }
  result.pass = result.max_error <= tol;
  return result;
}

GradCheckResult grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double h,
                           double tol) {
  Tensor leaf = x.clone();
  return grad_check_leaf([&] { return f(leaf); }, leaf, h, tol);
}

}  // namespace graftkit
