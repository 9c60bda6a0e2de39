#include "graftkit/ops.hpp"

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>
#include <algorithm>
#include <array>
#include <cmath>
#include <numbers>
#include <string>

namespace graftkit::ops {

namespace {

template <class T>
using MatR = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapR = Eigen::Map<MatR<T>>;
template <class T>
using CMapR = Eigen::Map<const MatR<T>>;

template <class T>
std::vector<T>& vec(Storage& s) {
  return std::get<std::vector<T>>(s);
}
template <class T>
const std::vector<T>& vec(const Storage& s) {
  return std::get<std::vector<T>>(s);
}

[[noreturn]] void shape_fail(std::string_view op, const std::string& detail) {
  throw ShapeError(std::string(op) + ": " + detail);
}

void require_same_dtype(std::string_view op, const Tensor& a, const Tensor& b) {
  if (a.dtype() != b.dtype()) {
    shape_fail(op, "dtype mismatch " + std::string(dtype_name(a.dtype())) + " vs " +
                       std::string(dtype_name(b.dtype())));
  }
}

template <class T>
Tensor make_out(const Shape& shape, std::vector<T> values) {
  return Tensor::from_storage(std::move(values), shape);
}

// ---------------------------------------------------------------- broadcast

struct Broadcast {
  Shape shape;  // broadcast result shape
  Shape out;    // coalesced iteration extents
  std::vector<std::int64_t> stride_a;
  std::vector<std::int64_t> stride_b;
};

Broadcast plan_broadcast(std::string_view op, const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  auto dim_at = [r](const Shape& s, std::size_t i) -> std::int64_t {
    const std::size_t off = r - s.size();
    return i < off ? 1 : s[i - off];
  };
  for (std::size_t i = 0; i < r; ++i) {
    const auto da = dim_at(a, i);
    const auto db = dim_at(b, i);
    if (da != db && da != 1 && db != 1) {
      shape_fail(op, "cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    bc.out[i] = std::max(da, db);
  }
  std::int64_t sa = 1;
  std::int64_t sb = 1;
  for (std::size_t i = r; i-- > 0;) {
    const auto da = dim_at(a, i);
    const auto db = dim_at(b, i);
    bc.stride_a[i] = da == 1 ? 0 : sa;
    bc.stride_b[i] = db == 1 ? 0 : sb;
    sa *= da;
    sb *= db;
  }
  // Merge adjacent axes that walk both operands contiguously so the inner
  // loop of for_each_broadcast is as long as possible.
  Broadcast merged;
  for (std::size_t i = 0; i < r; ++i) {
    if (bc.out[i] == 1) continue;
    if (!merged.out.empty() && merged.stride_a.back() == bc.stride_a[i] * bc.out[i] &&
        merged.stride_b.back() == bc.stride_b[i] * bc.out[i]) {
      merged.out.back() *= bc.out[i];
      merged.stride_a.back() = bc.stride_a[i];
      merged.stride_b.back() = bc.stride_b[i];
      continue;
    }
    merged.out.push_back(bc.out[i]);
    merged.stride_a.push_back(bc.stride_a[i]);
    merged.stride_b.push_back(bc.stride_b[i]);
  }
  merged.shape = bc.out;
  return merged;
}

// Calls fn(out_index, a_index, b_index) in row-major output order.
template <class F>
void for_each_broadcast(const Broadcast& bc, F&& fn) {
  const std::size_t r = bc.out.size();
  if (r == 0) {
    fn(0, 0, 0);
    return;
  }
  const std::int64_t inner = bc.out[r - 1];
  const std::int64_t ia_step = bc.stride_a[r - 1];
  const std::int64_t ib_step = bc.stride_b[r - 1];
  const std::int64_t outer = numel(bc.out) / inner;
  std::vector<std::int64_t> idx(r - 1, 0);
  std::int64_t oa = 0;
  std::int64_t ob = 0;
  for (std::int64_t o = 0; o < outer; ++o) {
    const std::int64_t base = o * inner;
    for (std::int64_t j = 0; j < inner; ++j) fn(base + j, oa + j * ia_step, ob + j * ib_step);
    for (std::size_t d = r - 1; d-- > 0;) {
      ++idx[d];
      oa += bc.stride_a[d];
      ob += bc.stride_b[d];
      if (idx[d] < bc.out[d]) break;
      oa -= bc.stride_a[d] * bc.out[d];
      ob -= bc.stride_b[d] * bc.out[d];
      idx[d] = 0;
    }
  }
}

enum class Binary { kAdd, kSub, kMul };

template <Binary K, class T>
T apply_binary(T x, T z) {
  if constexpr (K == Binary::kAdd) return x + z;
  if constexpr (K == Binary::kSub) return x - z;
  if constexpr (K == Binary::kMul) return x * z;
}

template <Binary K, class T>
Tensor binary_impl(std::string_view op, const Tensor& a, const Tensor& b) {
  const bool same = a.shape() == b.shape();
  Broadcast bc;
  if (!same) bc = plan_broadcast(op, a.shape(), b.shape());
  const Shape out_shape = same ? a.shape() : bc.shape;
  const auto pa = a.data<T>();
  const auto pb = b.data<T>();
  std::vector<T> y(static_cast<std::size_t>(numel(out_shape)));
  if (same) {
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = apply_binary<K>(pa[i], pb[i]);
  } else {
    for_each_broadcast(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
      y[static_cast<std::size_t>(i)] = apply_binary<K>(pa[static_cast<std::size_t>(ia)], pb[static_cast<std::size_t>(ib)]);
    });
  }
  Tensor out = make_out(out_shape, std::move(y));
  return detail::record(op, {a, b}, out,
      [a, b, same, bc](const Storage& gs, std::span<Storage* const> gin) {
        const T* g = vec<T>(gs).data();
        const T* va = a.data<T>().data();
        const T* vb = b.data<T>().data();
        const auto n = static_cast<std::int64_t>(vec<T>(gs).size());
        if (gin[0]) {
          T* ga = vec<T>(*gin[0]).data();
          auto fa = [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
            if constexpr (K == Binary::kMul) {
              ga[ia] += g[i] * vb[ib];
            } else {
              (void)ib;
              ga[ia] += g[i];
            }
          };
          if (same) {
            for (std::int64_t i = 0; i < n; ++i) fa(i, i, i);
          } else {
            for_each_broadcast(bc, fa);
          }
        }
        if (gin[1]) {
          T* gb = vec<T>(*gin[1]).data();
          auto fb = [&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
            if constexpr (K == Binary::kMul) {
              gb[ib] += g[i] * va[ia];
            } else if constexpr (K == Binary::kSub) {
              (void)ia;
              gb[ib] -= g[i];
            } else {
              (void)ia;
              gb[ib] += g[i];
            }
          };
          if (same) {
            for (std::int64_t i = 0; i < n; ++i) fb(i, i, i);
          } else {
            for_each_broadcast(bc, fb);
          }
        }
      });
}

template <Binary K>
Tensor binary(std::string_view op, const Tensor& a, const Tensor& b) {
  require_same_dtype(op, a, b);
  if (a.dtype() == DType::kF32) return binary_impl<K, float>(op, a, b);
  return binary_impl<K, double>(op, a, b);
}

template <class T, class Fwd, class Deriv>
Tensor unary(std::string_view op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto pa = a.data<T>();
  std::vector<T> y(pa.size());
  for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(pa[i]);
  Tensor out = make_out(a.shape(), std::move(y));
  return detail::record(op, {a}, out, [a, deriv](const Storage& gs, std::span<Storage* const> gin) {
    const auto& g = vec<T>(gs);
    const auto x = a.data<T>();
    auto& ga = vec<T>(*gin[0]);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * deriv(x[i]);
  });
}


// Eigen peels unaligned heads of a Map through the scalar path, and scalar
// exp/erf round differently from the packet versions, so results would depend
// on where the allocator put the buffer. Evaluating in fixed, aligned chunks
// sends every element through the packet path.
constexpr Eigen::Index kChunk = 64;
template <class T>
using Chunk = Eigen::Array<T, kChunk, 1>;

// f(count, chunks...) sees `count` valid leading entries of each aligned chunk;
// `in` spans are copied in (tail zero-padded), `out` spans copied back.
template <class T, std::size_t NIn, std::size_t NOut, class F>
void chunked(Eigen::Index n, const std::array<const T*, NIn>& in, const std::array<T*, NOut>& out, F f) {
  std::array<Chunk<T>, NIn> ci;
  std::array<Chunk<T>, NOut> co;
  for (Eigen::Index start = 0; start < n; start += kChunk) {
    const Eigen::Index len = std::min(kChunk, n - start);
    for (std::size_t k = 0; k < NIn; ++k) {
      if (len < kChunk) ci[k].setZero();
      std::copy(in[k] + start, in[k] + start + len, ci[k].data());
    }
    for (std::size_t k = 0; k < NOut; ++k) {
      if (len < kChunk) co[k].setZero();
      std::copy(out[k] + start, out[k] + start + len, co[k].data());
    }
    f(ci, co);
    for (std::size_t k = 0; k < NOut; ++k) std::copy(co[k].data(), co[k].data() + len, out[k] + start);
  }
}

// Like unary(), but fwd/deriv act on Eigen arrays so that exp/erf vectorise.
// fwd(x, y) writes y; deriv(x, g, gx) accumulates into gx.
template <class T, class Fwd, class Deriv>
Tensor unary_array(std::string_view op, const Tensor& a, Fwd fwd, Deriv deriv) {
  const auto pa = a.data<T>();
  const auto n = static_cast<Eigen::Index>(pa.size());
  std::vector<T> y(pa.size());
  chunked<T, 1, 1>(n, {pa.data()}, {y.data()}, [&](auto& in, auto& out) { fwd(in[0], out[0]); });
  Tensor out = make_out(a.shape(), std::move(y));
  return detail::record(op, {a}, out, [a, deriv](const Storage& gs, std::span<Storage* const> gin) {
    const auto& g = vec<T>(gs);
    const auto n = static_cast<Eigen::Index>(g.size());
    chunked<T, 2, 1>(n, {a.data<T>().data(), g.data()}, {vec<T>(*gin[0]).data()},
                     [&](auto& in, auto& out) { deriv(in[0], in[1], out[0]); });
  });
}

}  // namespace

// ---------------------------------------------------------------- matmul

namespace {

Tensor matmul_bias(std::string_view op, const Tensor& a, const Tensor& b, const Tensor& bias) {
  require_same_dtype(op, a, b);
  if (a.rank() < 1 || b.rank() != 2 || a.dim(-1) != b.dim(0)) {
    shape_fail(op, "incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::int64_t k = b.dim(0);
  const std::int64_t m = b.dim(1);
  const std::int64_t rows = a.numel() / k;
  const bool has_bias = bias.defined();
  if (has_bias) {
    require_same_dtype(op, a, bias);
    if (bias.rank() != 1 || bias.dim(0) != m) {
      shape_fail(op, "bias " + to_string(bias.shape()) + " does not match output width " + std::to_string(m));
    }
  }
  Shape out_shape = a.shape();
  out_shape.back() = m;
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> y(static_cast<std::size_t>(rows * m));
    {
      CMapR<T> A(a.data<T>().data(), rows, k);
      CMapR<T> B(b.data<T>().data(), k, m);
      MapR<T> Y(y.data(), rows, m);
      Y.noalias() = A * B;
      if (has_bias) {
        Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.data<T>().data(), m);
        Y.rowwise() += bv;
      }
    }
    Tensor out = make_out(out_shape, std::move(y));
    std::vector<Tensor> inputs{a, b};
    if (has_bias) inputs.push_back(bias);
    return detail::record(op, inputs, out,
        [a, b, rows, k, m](const Storage& gs, std::span<Storage* const> gin) {
          CMapR<T> G(vec<T>(gs).data(), rows, m);
          if (gin[0]) {
            CMapR<T> B(b.data<T>().data(), k, m);
            MapR<T> GA(vec<T>(*gin[0]).data(), rows, k);
            GA.noalias() += G * B.transpose();
          }
          if (gin[1]) {
            CMapR<T> A(a.data<T>().data(), rows, k);
            MapR<T> GB(vec<T>(*gin[1]).data(), k, m);
            GB.noalias() += A.transpose() * G;
          }
          if (gin.size() > 2 && gin[2]) {
            // Row-ordered accumulation; Eigen's colwise redux order depends on alignment.
            std::vector<T> acc(static_cast<std::size_t>(m), T(0));
            const T* g = vec<T>(gs).data();
            for (std::int64_t r = 0; r < rows; ++r) {
              for (std::int64_t j = 0; j < m; ++j) acc[static_cast<std::size_t>(j)] += g[r * m + j];
            }
            T* gb = vec<T>(*gin[2]).data();
            for (std::int64_t j = 0; j < m; ++j) gb[j] += acc[static_cast<std::size_t>(j)];
          }
        });
  });
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) { return matmul_bias("matmul", a, b, Tensor{}); }

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) { return matmul_bias("linear", x, w, b); }

Tensor split_heads(const Tensor& x, std::int64_t start, std::int64_t heads, std::int64_t head_dim) {
  constexpr std::string_view op = "split_heads";
  if (x.rank() != 3 || heads < 1 || head_dim < 1 || start < 0 || start + heads * head_dim > x.dim(2)) {
    shape_fail(op, "cannot take " + std::to_string(heads) + "x" + std::to_string(head_dim) + " columns from " +
                       std::to_string(start) + " of " + to_string(x.shape()));
  }
  const std::int64_t b = x.dim(0), n = x.dim(1), c = x.dim(2);
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    std::vector<T> y(static_cast<std::size_t>(b * heads * n * head_dim));
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t h = 0; h < heads; ++h) {
        for (std::int64_t t = 0; t < n; ++t) {
          const T* src = px + (i * n + t) * c + start + h * head_dim;
          std::copy(src, src + head_dim, y.data() + ((i * heads + h) * n + t) * head_dim);
        }
      }
    }
    Tensor out = make_out({b, heads, n, head_dim}, std::move(y));
    return detail::record(op, {x}, out,
        [b, n, c, start, heads, head_dim](const Storage& gs, std::span<Storage* const> gin) {
          const T* g = vec<T>(gs).data();
          T* gx = vec<T>(*gin[0]).data();
          for (std::int64_t i = 0; i < b; ++i) {
            for (std::int64_t h = 0; h < heads; ++h) {
              for (std::int64_t t = 0; t < n; ++t) {
                const T* src = g + ((i * heads + h) * n + t) * head_dim;
                T* dst = gx + (i * n + t) * c + start + h * head_dim;
                for (std::int64_t e = 0; e < head_dim; ++e) dst[e] += src[e];
              }
            }
          }
        });
  });
}

Tensor merge_heads(const Tensor& x) {
  constexpr std::string_view op = "merge_heads";
  if (x.rank() != 4) shape_fail(op, "expected [B,H,N,dh], got " + to_string(x.shape()));
  const std::int64_t b = x.dim(0), heads = x.dim(1), n = x.dim(2), dh = x.dim(3);
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    std::vector<T> y(static_cast<std::size_t>(x.numel()));
    for (std::int64_t i = 0; i < b; ++i) {
      for (std::int64_t h = 0; h < heads; ++h) {
        for (std::int64_t t = 0; t < n; ++t) {
          const T* src = px + ((i * heads + h) * n + t) * dh;
          std::copy(src, src + dh, y.data() + (i * n + t) * heads * dh + h * dh);
        }
      }
    }
    Tensor out = make_out({b, n, heads * dh}, std::move(y));
    return detail::record(op, {x}, out, [b, heads, n, dh](const Storage& gs, std::span<Storage* const> gin) {
      const T* g = vec<T>(gs).data();
      T* gx = vec<T>(*gin[0]).data();
      for (std::int64_t i = 0; i < b; ++i) {
        for (std::int64_t h = 0; h < heads; ++h) {
          for (std::int64_t t = 0; t < n; ++t) {
            const T* src = g + (i * n + t) * heads * dh + h * dh;
            T* dst = gx + ((i * heads + h) * n + t) * dh;
            for (std::int64_t e = 0; e < dh; ++e) dst[e] += src[e];
          }
        }
      }
    });
  });
}

Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale) {
  constexpr std::string_view op = "modulate";
  require_same_dtype(op, x, shift);
  require_same_dtype(op, x, scale);
  if (x.rank() != 3 || shift.shape() != Shape{x.dim(0), x.dim(2)} || scale.shape() != shift.shape()) {
    shape_fail(op, "expected x [B,N,D] with shift/scale [B,D], got " + to_string(x.shape()) + ", " +
                       to_string(shift.shape()) + ", " + to_string(scale.shape()));
  }
  const std::int64_t b = x.dim(0), n = x.dim(1), d = x.dim(2);
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T* px = x.data<T>().data();
    const T* psh = shift.data<T>().data();
    const T* psc = scale.data<T>().data();
    std::vector<T> y(static_cast<std::size_t>(x.numel()));
    for (std::int64_t i = 0; i < b; ++i) {
      const T* sh = psh + i * d;
      const T* sc = psc + i * d;
      for (std::int64_t t = 0; t < n; ++t) {
        const T* xr = px + (i * n + t) * d;
        T* yr = y.data() + (i * n + t) * d;
        for (std::int64_t e = 0; e < d; ++e) yr[e] = xr[e] * (T(1) + sc[e]) + sh[e];
      }
    }
    Tensor out = make_out(x.shape(), std::move(y));
    return detail::record(op, {x, shift, scale}, out,
        [x, scale, b, n, d](const Storage& gs, std::span<Storage* const> gin) {
          const T* g = vec<T>(gs).data();
          const T* px = x.data<T>().data();
          const T* psc = scale.data<T>().data();
          for (std::int64_t i = 0; i < b; ++i) {
            for (std::int64_t t = 0; t < n; ++t) {
              const T* gr = g + (i * n + t) * d;
              const T* xr = px + (i * n + t) * d;
              if (gin[0]) {
                T* gx = vec<T>(*gin[0]).data() + (i * n + t) * d;
                for (std::int64_t e = 0; e < d; ++e) gx[e] += gr[e] * (T(1) + psc[i * d + e]);
              }
              if (gin[1]) {
                T* gsh = vec<T>(*gin[1]).data() + i * d;
                for (std::int64_t e = 0; e < d; ++e) gsh[e] += gr[e];
              }
              if (gin[2]) {
                T* gsc = vec<T>(*gin[2]).data() + i * d;
                for (std::int64_t e = 0; e < d; ++e) gsc[e] += gr[e] * xr[e];
              }
            }
          }
        });
  });
}

Tensor batched_matmul(const Tensor& a, const Tensor& b, bool transpose_a, bool transpose_b) {
  constexpr std::string_view op = "batched_matmul";
  require_same_dtype(op, a, b);
  const auto fail = [&] {
    shape_fail(op, "incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  };
  if (a.rank() < 2 || a.rank() != b.rank()) fail();
  for (int i = 0; i + 2 < a.rank(); ++i) {
    if (a.dim(i) != b.dim(i)) fail();
  }
  const std::int64_t ar = a.dim(-2), ac = a.dim(-1), br = b.dim(-2), bc = b.dim(-1);
  const std::int64_t n = transpose_a ? ac : ar;
  const std::int64_t k = transpose_a ? ar : ac;
  const std::int64_t kb = transpose_b ? bc : br;
  const std::int64_t m = transpose_b ? br : bc;
  if (k != kb) fail();
  const std::int64_t batch = a.numel() / (ar * ac);
  Shape out_shape = a.shape();
  out_shape[out_shape.size() - 2] = n;
  out_shape.back() = m;
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> y(static_cast<std::size_t>(batch * n * m));
    const T* pa = a.data<T>().data();
    const T* pb = b.data<T>().data();
    for (std::int64_t i = 0; i < batch; ++i) {
      CMapR<T> A(pa + i * ar * ac, ar, ac);
      CMapR<T> B(pb + i * br * bc, br, bc);
      MapR<T> Y(y.data() + i * n * m, n, m);
      if (!transpose_a && !transpose_b) Y.noalias() = A * B;
      else if (!transpose_a) Y.noalias() = A * B.transpose();
      else if (!transpose_b) Y.noalias() = A.transpose() * B;
      else Y.noalias() = A.transpose() * B.transpose();
    }
    Tensor out = make_out(out_shape, std::move(y));
    return detail::record(op, {a, b}, out,
        [a, b, batch, ar, ac, br, bc, n, m, transpose_a, transpose_b](
            const Storage& gs, std::span<Storage* const> gin) {
          const T* pg = vec<T>(gs).data();
          const T* pa = a.data<T>().data();
          const T* pb = b.data<T>().data();
          for (std::int64_t i = 0; i < batch; ++i) {
            CMapR<T> G(pg + i * n * m, n, m);
            CMapR<T> A(pa + i * ar * ac, ar, ac);
            CMapR<T> B(pb + i * br * bc, br, bc);
            if (gin[0]) {
              MapR<T> GA(vec<T>(*gin[0]).data() + i * ar * ac, ar, ac);
              // d op(A) = G * op(B)^T
              if (!transpose_a && !transpose_b) GA.noalias() += G * B.transpose();
              else if (!transpose_a) GA.noalias() += G * B;
              else if (!transpose_b) GA.noalias() += B * G.transpose();
              else GA.noalias() += B.transpose() * G.transpose();
            }
            if (gin[1]) {
              MapR<T> GB(vec<T>(*gin[1]).data() + i * br * bc, br, bc);
              // d op(B) = op(A)^T * G
              if (!transpose_a && !transpose_b) GB.noalias() += A.transpose() * G;
              else if (!transpose_a) GB.noalias() += G.transpose() * A;
              else if (!transpose_b) GB.noalias() += A * G;
              else GB.noalias() += G.transpose() * A.transpose();
            }
          }
        });
  });
}

// ---------------------------------------------------------------- convolution

Tensor depthwise_causal_conv1d(const Tensor& x, const Tensor& filter, const Tensor& bias) {
  constexpr std::string_view op = "depthwise_causal_conv1d";
  require_same_dtype(op, x, filter);
  if (x.rank() != 3 || filter.rank() != 2 || filter.dim(0) != x.dim(2)) {
    shape_fail(op, "input " + to_string(x.shape()) + " with filter " + to_string(filter.shape()));
  }
  const bool has_bias = bias.defined();
  if (has_bias) {
    require_same_dtype(op, x, bias);
    if (bias.rank() != 1 || bias.dim(0) != x.dim(2)) {
      shape_fail(op, "input " + to_string(x.shape()) + " with bias " + to_string(bias.shape()));
    }
  }
  const std::int64_t B = x.dim(0), S = x.dim(1), C = x.dim(2), K = filter.dim(1);
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto px = x.data<T>();
    const auto pf = filter.data<T>();
    // Tap-major copy so the channel loop is contiguous.
    std::vector<T> taps(static_cast<std::size_t>(K * C));
    for (std::int64_t c = 0; c < C; ++c)
      for (std::int64_t j = 0; j < K; ++j) taps[j * C + c] = pf[c * K + j];
    std::vector<T> y(px.size(), T(0));
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t s = 0; s < S; ++s) {
        T* row = y.data() + (b * S + s) * C;
        if (has_bias) {
          const auto pb = bias.data<T>();
          for (std::int64_t c = 0; c < C; ++c) row[c] = pb[c];
        }
        for (std::int64_t j = 0; j < K && j <= s; ++j) {
          const T* src = px.data() + (b * S + s - j) * C;
          const T* tap = taps.data() + j * C;
          for (std::int64_t c = 0; c < C; ++c) row[c] += tap[c] * src[c];
        }
      }
    }
    Tensor out = make_out(x.shape(), std::move(y));
    std::vector<Tensor> inputs{x, filter};
    if (has_bias) inputs.push_back(bias);
    return detail::record(op, inputs, out,
        [x, taps = std::move(taps), has_bias, B, S, C, K](const Storage& gs,
                                                        std::span<Storage* const> gin) {
          const auto& g = vec<T>(gs);
          const auto px = x.data<T>();
          std::vector<T> gtaps;
          if (gin[1]) gtaps.assign(static_cast<std::size_t>(K * C), T(0));
          for (std::int64_t b = 0; b < B; ++b) {
            for (std::int64_t s = 0; s < S; ++s) {
              const T* grow = g.data() + (b * S + s) * C;
              for (std::int64_t j = 0; j < K && j <= s; ++j) {
                const std::int64_t src_off = (b * S + s - j) * C;
                if (gin[0]) {
                  T* gx = vec<T>(*gin[0]).data() + src_off;
                  const T* tap = taps.data() + j * C;
                  for (std::int64_t c = 0; c < C; ++c) gx[c] += tap[c] * grow[c];
                }
                if (gin[1]) {
                  const T* src = px.data() + src_off;
                  T* gt = gtaps.data() + j * C;
                  for (std::int64_t c = 0; c < C; ++c) gt[c] += src[c] * grow[c];
                }
              }
            }
          }
          if (gin[1]) {
            auto& gf = vec<T>(*gin[1]);
            for (std::int64_t c = 0; c < C; ++c)
              for (std::int64_t j = 0; j < K; ++j) gf[c * K + j] += gtaps[j * C + c];
          }
          if (has_bias && gin[2]) {
            auto& gb = vec<T>(*gin[2]);
            for (std::int64_t r = 0; r < B * S; ++r)
              for (std::int64_t c = 0; c < C; ++c) gb[c] += g[r * C + c];
          }
        });
  });
}

// ---------------------------------------------------------------- normalisation

Tensor row_softmax(const Tensor& x, std::int64_t band) {
  constexpr std::string_view op = "row_softmax";
  if (x.rank() < 1) shape_fail(op, "scalar input");
  if (band >= 0 && x.rank() < 2) shape_fail(op, "banded softmax needs [..., N, M], got " + to_string(x.shape()));
  const std::int64_t m = x.dim(-1);
  const std::int64_t rows = x.numel() / m;
  const std::int64_t n = x.rank() >= 2 ? x.dim(-2) : 1;
  auto support = [band, m, n](std::int64_t row) {
    if (band < 0) return std::pair<std::int64_t, std::int64_t>{0, m};
    const std::int64_t i = row % n;
    return std::pair<std::int64_t, std::int64_t>{std::max<std::int64_t>(0, i - band),
                                                 std::min<std::int64_t>(m, i + band + 1)};
  };
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto px = x.data<T>();
    std::vector<T> y(px.size(), T(0));
    for (std::int64_t r = 0; r < rows; ++r) {
      const auto [lo, hi] = support(r);
      const T* src = px.data() + r * m;
      T* dst = y.data() + r * m;
      if (lo >= hi) shape_fail(op, "empty band support");
      T mx = src[lo];
      for (std::int64_t j = lo + 1; j < hi; ++j) mx = std::max(mx, src[j]);
      chunked<T, 1, 1>(hi - lo, {src + lo}, {dst + lo}, [mx](auto& in, auto& out) { out[0] = (in[0] - mx).exp(); });
      T total = 0;
      for (std::int64_t j = lo; j < hi; ++j) total += dst[j];
      const T inv = T(1) / total;
      for (std::int64_t j = lo; j < hi; ++j) dst[j] *= inv;
    }
    Tensor out = make_out(x.shape(), std::move(y));
    return detail::record(op, {x}, out, [out, rows, m, support](const Storage& gs,
                                                               std::span<Storage* const> gin) {
      const auto& g = vec<T>(gs);
      const auto py = out.data<T>();
      auto& gx = vec<T>(*gin[0]);
      for (std::int64_t r = 0; r < rows; ++r) {
        const auto [lo, hi] = support(r);
        const T* yr = py.data() + r * m;
        const T* gr = g.data() + r * m;
        T dot = 0;
        for (std::int64_t j = lo; j < hi; ++j) dot += yr[j] * gr[j];
        T* out_row = gx.data() + r * m;
        for (std::int64_t j = lo; j < hi; ++j) out_row[j] += yr[j] * (gr[j] - dot);
      }
    });
  });
}

Tensor layernorm(const Tensor& x, double eps) {
  constexpr std::string_view op = "layernorm";
  if (x.rank() < 1) shape_fail(op, "scalar input");
  const std::int64_t d = x.dim(-1);
  const std::int64_t rows = x.numel() / d;
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto px = x.data<T>();
    std::vector<T> y(px.size());
    std::vector<T> inv_std(static_cast<std::size_t>(rows));
    for (std::int64_t r = 0; r < rows; ++r) {
      const T* src = px.data() + r * d;
      T mu = 0;
      for (std::int64_t j = 0; j < d; ++j) mu += src[j];
      mu /= static_cast<T>(d);
      T var = 0;
      for (std::int64_t j = 0; j < d; ++j) var += (src[j] - mu) * (src[j] - mu);
      var /= static_cast<T>(d);
      const T is = T(1) / std::sqrt(var + static_cast<T>(eps));
      inv_std[static_cast<std::size_t>(r)] = is;
      T* dst = y.data() + r * d;
      for (std::int64_t j = 0; j < d; ++j) dst[j] = (src[j] - mu) * is;
    }
    Tensor out = make_out(x.shape(), std::move(y));
    return detail::record(op, {x}, out,
        [out, inv_std = std::move(inv_std), rows, d](const Storage& gs, std::span<Storage* const> gin) {
          const auto& g = vec<T>(gs);
          const auto py = out.data<T>();
          auto& gx = vec<T>(*gin[0]);
          for (std::int64_t r = 0; r < rows; ++r) {
            const T* yr = py.data() + r * d;
            const T* gr = g.data() + r * d;
            T mean_g = 0;
            T mean_gy = 0;
            for (std::int64_t j = 0; j < d; ++j) {
              mean_g += gr[j];
              mean_gy += gr[j] * yr[j];
            }
            mean_g /= static_cast<T>(d);
            mean_gy /= static_cast<T>(d);
            const T is = inv_std[static_cast<std::size_t>(r)];
            T* dst = gx.data() + r * d;
            for (std::int64_t j = 0; j < d; ++j) dst[j] += is * (gr[j] - mean_g - yr[j] * mean_gy);
          }
        });
  });
}

// ---------------------------------------------------------------- pointwise

Tensor gelu(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary_array<T>(
        "gelu", x,
        [](const auto& v, auto& y) { y = v * T(0.5) * (T(1) + (v * T(0.70710678118654752440)).erf()); },
        [](const auto& v, const auto& g, auto& gx) {
          const T inv_sqrt2pi = T(0.39894228040143267794);
          gx += g * (T(0.5) * (T(1) + (v * T(0.70710678118654752440)).erf()) +
                     v * inv_sqrt2pi * (T(-0.5) * v * v).exp());
        });
  });
}

Tensor silu(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary_array<T>(
        "silu", x, [](const auto& v, auto& y) { y = v / (T(1) + (-v).exp()); },
        [](const auto& v, const auto& g, auto& gx) {
          const auto s = (T(1) + (-v).exp()).inverse();
          gx += g * s * (T(1) + v * (T(1) - s));
        });
  });
}

Tensor abs(const Tensor& x) {
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    return unary<T>(
        "abs", x, [](T v) { return std::abs(v); },
        [](T v) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
  });
}

Tensor huber(const Tensor& x, double delta) {
  if (!(delta > 0)) throw std::invalid_argument("huber: delta must be positive");
  return dispatch(x.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T d = static_cast<T>(delta);
    return unary<T>(
        "huber", x,
        [d](T v) {
          const T a = std::abs(v);
          return a <= d ? T(0.5) * v * v : d * (a - T(0.5) * d);
        },
        [d](T v) {
          if (std::abs(v) <= d) return v;
          return v > 0 ? d : -d;
        });
  });
}

Tensor add(const Tensor& a, const Tensor& b) { return binary<Binary::kAdd>("add", a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary<Binary::kSub>("sub", a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary<Binary::kMul>("mul", a, b); }

Tensor scale(const Tensor& a, double factor) {
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const T f = static_cast<T>(factor);
    return unary<T>("scale", a, [f](T v) { return v * f; }, [f](T) { return f; });
  });
}

// ---------------------------------------------------------------- reductions

namespace {

Tensor reduce(std::string_view op, const Tensor& a, bool average) {
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto pa = a.data<T>();
    // Sequential accumulation in double; fixed order.
    double total = 0.0;
    for (auto v : pa) total += static_cast<double>(v);
    const double n = static_cast<double>(pa.size());
    const double value = average ? total / n : total;
    Tensor out = make_out<T>({}, std::vector<T>{static_cast<T>(value)});
    const T factor = average ? static_cast<T>(1.0 / n) : T(1);
    return detail::record(op, {a}, out, [factor](const Storage& gs, std::span<Storage* const> gin) {
      const T g = vec<T>(gs)[0] * factor;
      for (auto& v : vec<T>(*gin[0])) v += g;
    });
  });
}

}  // namespace

Tensor sum(const Tensor& a) { return reduce("sum", a, false); }
Tensor mean(const Tensor& a) { return reduce("mean", a, true); }

// ---------------------------------------------------------------- layout

Tensor reshape(const Tensor& a, const Shape& shape) {
  constexpr std::string_view op = "reshape";
  for (auto d : shape) {
    if (d <= 0) shape_fail(op, "non-positive target dimension in " + to_string(shape));
  }
  if (numel(shape) != a.numel()) {
    shape_fail(op, "cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  }
  Tensor out = Tensor::from_storage(a.storage(), shape);
  return detail::record(op, {a}, out, [dtype = a.dtype()](const Storage& gs, std::span<Storage* const> gin) {
    dispatch(dtype, [&](auto tag) {
      using T = decltype(tag);
      const auto& g = vec<T>(gs);
      auto& ga = vec<T>(*gin[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    });
  });
}

namespace {

struct SwapPlan {
  std::int64_t pre, d0, mid, d1, post;
};

// Copies src laid out as [pre, d0, mid, d1, post] into dst laid out as
// [pre, d1, mid, d0, post], optionally accumulating.
template <class T>
void swap_axes(const T* src, T* dst, const SwapPlan& p, bool accumulate) {
  for (std::int64_t a = 0; a < p.pre; ++a)
    for (std::int64_t i = 0; i < p.d1; ++i)
      for (std::int64_t m = 0; m < p.mid; ++m)
        for (std::int64_t j = 0; j < p.d0; ++j) {
          const T* s = src + ((((a * p.d0 + j) * p.mid + m) * p.d1 + i) * p.post);
          T* d = dst + ((((a * p.d1 + i) * p.mid + m) * p.d0 + j) * p.post);
          if (accumulate) {
            for (std::int64_t q = 0; q < p.post; ++q) d[q] += s[q];
          } else {
            std::copy(s, s + p.post, d);
          }
        }
}

}  // namespace

Tensor transpose(const Tensor& a, int axis0, int axis1) {
  constexpr std::string_view op = "transpose";
  const int r = a.rank();
  if (axis0 < 0) axis0 += r;
  if (axis1 < 0) axis1 += r;
  if (axis0 < 0 || axis1 < 0 || axis0 >= r || axis1 >= r) {
    shape_fail(op, "axes out of range for " + to_string(a.shape()));
  }
  if (axis0 == axis1) return reshape(a, a.shape());
  if (axis0 > axis1) std::swap(axis0, axis1);
  const Shape& s = a.shape();
  SwapPlan p{1, s[axis0], 1, s[axis1], 1};
  for (int i = 0; i < axis0; ++i) p.pre *= s[i];
  for (int i = axis0 + 1; i < axis1; ++i) p.mid *= s[i];
  for (int i = axis1 + 1; i < r; ++i) p.post *= s[i];
  Shape out_shape = s;
  std::swap(out_shape[axis0], out_shape[axis1]);
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> y(static_cast<std::size_t>(a.numel()));
    swap_axes(a.data<T>().data(), y.data(), p, false);
    Tensor out = make_out(out_shape, std::move(y));
    const SwapPlan back{p.pre, p.d1, p.mid, p.d0, p.post};
    return detail::record(op, {a}, out, [back](const Storage& gs, std::span<Storage* const> gin) {
      swap_axes(vec<T>(gs).data(), vec<T>(*gin[0]).data(), back, true);
    });
  });
}

Tensor concat_last(const std::vector<Tensor>& parts) {
  constexpr std::string_view op = "concat_last";
  if (parts.empty()) shape_fail(op, "no inputs");
  const Shape& first = parts.front().shape();
  if (first.empty()) shape_fail(op, "scalar input");
  std::int64_t width = 0;
  std::vector<std::int64_t> widths;
  for (const auto& t : parts) {
    require_same_dtype(op, parts.front(), t);
    if (t.rank() != static_cast<int>(first.size()) ||
        !std::equal(first.begin(), first.end() - 1, t.shape().begin())) {
      shape_fail(op, "leading dims differ: " + to_string(first) + " vs " + to_string(t.shape()));
    }
    widths.push_back(t.dim(-1));
    width += t.dim(-1);
  }
  const std::int64_t rows = parts.front().numel() / first.back();
  Shape out_shape = first;
  out_shape.back() = width;
  return dispatch(parts.front().dtype(), [&](auto tag) {
    using T = decltype(tag);
    std::vector<T> y(static_cast<std::size_t>(rows * width));
    std::int64_t offset = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      const auto src = parts[p].data<T>();
      const std::int64_t w = widths[p];
      for (std::int64_t r = 0; r < rows; ++r)
        std::copy(src.data() + r * w, src.data() + (r + 1) * w, y.data() + r * width + offset);
      offset += w;
    }
    Tensor out = make_out(out_shape, std::move(y));
    return detail::record(op, parts, out, [widths, rows, width](const Storage& gs,
                                                               std::span<Storage* const> gin) {
      const auto& g = vec<T>(gs);
      std::int64_t offset = 0;
      for (std::size_t p = 0; p < widths.size(); ++p) {
        const std::int64_t w = widths[p];
        if (gin[p]) {
          auto& gp = vec<T>(*gin[p]);
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < w; ++j) gp[r * w + j] += g[r * width + offset + j];
        }
        offset += w;
      }
    });
  });
}

Tensor slice_last(const Tensor& a, std::int64_t start, std::int64_t length) {
  constexpr std::string_view op = "slice_last";
  if (a.rank() < 1 || start < 0 || length <= 0 || start + length > a.dim(-1)) {
    shape_fail(op, "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                       ") of " + to_string(a.shape()));
  }
  const std::int64_t width = a.dim(-1);
  const std::int64_t rows = a.numel() / width;
  Shape out_shape = a.shape();
  out_shape.back() = length;
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto src = a.data<T>();
    std::vector<T> y(static_cast<std::size_t>(rows * length));
    for (std::int64_t r = 0; r < rows; ++r)
      std::copy(src.data() + r * width + start, src.data() + r * width + start + length,
                y.data() + r * length);
    Tensor out = make_out(out_shape, std::move(y));
    return detail::record(op, {a}, out, [rows, width, start, length](const Storage& gs,
                                                                    std::span<Storage* const> gin) {
      const auto& g = vec<T>(gs);
      auto& ga = vec<T>(*gin[0]);
      for (std::int64_t r = 0; r < rows; ++r)
        for (std::int64_t j = 0; j < length; ++j) ga[r * width + start + j] += g[r * length + j];
    });
  });
}

Tensor slice_first(const Tensor& a, std::int64_t start, std::int64_t length) {
  constexpr std::string_view op = "slice_first";
  if (a.rank() < 1 || start < 0 || length <= 0 || start + length > a.dim(0)) {
    shape_fail(op, "range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                       ") of " + to_string(a.shape()));
  }
  const std::int64_t row = a.numel() / a.dim(0);
  Shape out_shape = a.shape();
  out_shape.front() = length;
  return dispatch(a.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto src = a.data<T>();
    std::vector<T> y(src.begin() + start * row, src.begin() + (start + length) * row);
    Tensor out = make_out(out_shape, std::move(y));
    return detail::record(op, {a}, out, [row, start](const Storage& gs, std::span<Storage* const> gin) {
      const auto& g = vec<T>(gs);
      auto& ga = vec<T>(*gin[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[static_cast<std::size_t>(start * row) + i] += g[i];
    });
  });
}

Tensor embedding(const Tensor& table, std::span<const std::int64_t> indices) {
  constexpr std::string_view op = "embedding";
  if (table.rank() != 2 || indices.empty()) {
    shape_fail(op, "table " + to_string(table.shape()) + " with " + std::to_string(indices.size()) +
                       " indices");
  }
  const std::int64_t vocab = table.dim(0);
  const std::int64_t d = table.dim(1);
  for (auto i : indices) {
    if (i < 0 || i >= vocab) {
      shape_fail(op, "index " + std::to_string(i) + " outside table " + to_string(table.shape()));
    }
  }
  std::vector<std::int64_t> idx(indices.begin(), indices.end());
  return dispatch(table.dtype(), [&](auto tag) {
    using T = decltype(tag);
    const auto src = table.data<T>();
    std::vector<T> y(idx.size() * static_cast<std::size_t>(d));
    for (std::size_t r = 0; r < idx.size(); ++r)
      std::copy(src.data() + idx[r] * d, src.data() + (idx[r] + 1) * d, y.data() + r * d);
    Tensor out = make_out({static_cast<std::int64_t>(idx.size()), d}, std::move(y));
    return detail::record(op, {table}, out, [idx = std::move(idx), d](const Storage& gs,
                                                                      std::span<Storage* const> gin) {
      const auto& g = vec<T>(gs);
      auto& gt = vec<T>(*gin[0]);
      for (std::size_t r = 0; r < idx.size(); ++r)
        for (std::int64_t j = 0; j < d; ++j) gt[idx[r] * d + j] += g[r * d + j];
    });
  });
}

}  // namespace graftkit::ops
