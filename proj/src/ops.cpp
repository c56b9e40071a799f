#include "neft/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

namespace neft {

namespace {

template <typename Scalar>
using Storage = TensorStorage<Scalar>;
template <typename Scalar>
using StoragePtr = std::shared_ptr<TensorStorage<Scalar>>;

template <typename Scalar>
using RowMap = Eigen::Map<RowMatrix<Scalar>>;
template <typename Scalar>
using ConstRowMap = Eigen::Map<const RowMatrix<Scalar>>;

template <typename Scalar>
void require_defined(const Tensor<Scalar>& t, const char* op) {
  if (!t.defined()) throw ContractError(std::string(op) + ": undefined tensor argument");
}

// ---------------------------------------------------------------------------
// Suffix broadcasting for elementwise binary ops.

struct Layout {
  Shape shape;       // output shape
  bool a_small = false;
  bool b_small = false;
  Index rows = 1;    // repeats of the small operand
  Index cols = 1;    // size of the small operand
};

Shape strip_leading_ones(const Shape& s) {
  auto it = std::find_if(s.begin(), s.end(), [](Index e) { return e != 1; });
  return Shape(it, s.end());
}

bool is_suffix(const Shape& big, const Shape& small) {
  const Shape trimmed = strip_leading_ones(small);
  if (trimmed.size() > big.size()) return false;
  return std::equal(trimmed.rbegin(), trimmed.rend(), big.rbegin());
}

Layout broadcast_layout(const Shape& a, const Shape& b, const char* op) {
  Layout l;
  if (a == b) {
    l.shape = a;
    l.cols = shape_size(a);
    return l;
  }
  if (is_suffix(a, b)) {
    l.shape = a;
    l.b_small = true;
  } else if (is_suffix(b, a)) {
    l.shape = b;
    l.a_small = true;
  } else {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(a) + " with " +
                         shape_string(b));
  }
  l.cols = shape_size(l.a_small ? a : b);
  l.rows = l.cols == 0 ? 0 : shape_size(l.shape) / l.cols;
  return l;
}

// ---------------------------------------------------------------------------
// Batch broadcasting for matmul.

struct BatchPlan {
  Shape batch;                 // broadcast batch shape
  std::vector<Index> a_index;  // matrix index into a per output batch
  std::vector<Index> b_index;
};

BatchPlan plan_batches(const Shape& a, const Shape& b, const Shape& full_a, const Shape& full_b) {
  const std::size_t rank = std::max(a.size(), b.size());
  BatchPlan plan;
  plan.batch.assign(rank, 1);
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  for (std::size_t d = 0; d < rank; ++d) {
    if (pa[d] != pb[d] && pa[d] != 1 && pb[d] != 1) {
      throw DimensionError("matmul: batch extents of " + shape_string(full_a) + " and " +
                           shape_string(full_b) + " are not broadcastable");
    }
    plan.batch[d] = std::max(pa[d], pb[d]);
  }
  const Index total = shape_size(plan.batch);
  plan.a_index.resize(static_cast<std::size_t>(total));
  plan.b_index.resize(static_cast<std::size_t>(total));
  std::vector<Index> counter(rank, 0);
  for (Index o = 0; o < total; ++o) {
    Index ia = 0, ib = 0;
    for (std::size_t d = 0; d < rank; ++d) {
      ia = ia * pa[d] + (pa[d] == 1 ? 0 : counter[d]);
      ib = ib * pb[d] + (pb[d] == 1 ? 0 : counter[d]);
    }
    plan.a_index[static_cast<std::size_t>(o)] = ia;
    plan.b_index[static_cast<std::size_t>(o)] = ib;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < plan.batch[d]) break;
      counter[d] = 0;
    }
  }
  return plan;
}

template <typename Scalar>
Tensor<Scalar> matmul_impl(const Tensor<Scalar>& a, const Tensor<Scalar>& b, bool trans_b) {
  require_defined(a, "matmul");
  require_defined(b, "matmul");
  if (a.rank() < 2 || b.rank() < 2) {
    throw DimensionError("matmul: operands must have rank >= 2, got " + shape_string(a.shape()) +
                         " and " + shape_string(b.shape()));
  }
  const Index m = a.dim(-2), k = a.dim(-1);
  const Index kb = trans_b ? b.dim(-1) : b.dim(-2);
  const Index n = trans_b ? b.dim(-2) : b.dim(-1);
  if (k != kb) {
    throw DimensionError("matmul: inner extents differ for " + shape_string(a.shape()) +
                         (trans_b ? " x transpose of " : " x ") + shape_string(b.shape()));
  }
  const Shape ba(a.shape().begin(), a.shape().end() - 2);
  const Shape bb(b.shape().begin(), b.shape().end() - 2);

  // Shared right operand: one GEMM over all rows of a.
  if (bb.empty() && !trans_b) {
    Shape out_shape = a.shape();
    out_shape.back() = n;
    Tensor<Scalar> out(out_shape);
    const Index rows = shape_size(ba) * m;
    ConstRowMap<Scalar> A(a.values().data(), rows, k);
    ConstRowMap<Scalar> B(b.values().data(), k, n);
    RowMap<Scalar> C(out.values().data(), rows, n);
    C.noalias() = A * B;
    if (Tape<Scalar>::should_record({&a, &b})) {
      auto as = a.storage(), bs = b.storage();
      Tape<Scalar>::active().record(out, [as, bs, rows, k, n](const Storage<Scalar>& o) {
        ConstRowMap<Scalar> G(o.grad.data(), rows, n);
        ConstRowMap<Scalar> A(as->value.data(), rows, k);
        ConstRowMap<Scalar> B(bs->value.data(), k, n);
        if (as->requires_grad) {
          RowMap<Scalar> GA(grad_buffer(*as).data(), rows, k);
          GA.noalias() += G * B.transpose();
        }
        if (bs->requires_grad) {
          RowMap<Scalar> GB(grad_buffer(*bs).data(), k, n);
          GB.noalias() += A.transpose() * G;
        }
      });
    }
    return out;
  }

  BatchPlan plan = plan_batches(ba, bb, a.shape(), b.shape());
  Shape out_shape = plan.batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  Tensor<Scalar> out(out_shape);
  const Index b_rows = trans_b ? n : k;
  const Index b_cols = trans_b ? k : n;
  const Index batches = static_cast<Index>(plan.a_index.size());
  for (Index i = 0; i < batches; ++i) {
    ConstRowMap<Scalar> A(a.values().data() + plan.a_index[i] * m * k, m, k);
    ConstRowMap<Scalar> B(b.values().data() + plan.b_index[i] * b_rows * b_cols, b_rows, b_cols);
    RowMap<Scalar> C(out.values().data() + i * m * n, m, n);
    if (trans_b) {
      C.noalias() = A * B.transpose();
    } else {
      C.noalias() = A * B;
    }
  }
  if (Tape<Scalar>::should_record({&a, &b})) {
    auto as = a.storage(), bs = b.storage();
    Tape<Scalar>::active().record(out, [as, bs, plan = std::move(plan), m, k, n, b_rows, b_cols,
                                        trans_b](const Storage<Scalar>& o) {
      const Index batches = static_cast<Index>(plan.a_index.size());
      Vector<Scalar>* ga = as->requires_grad ? &grad_buffer(*as) : nullptr;
      Vector<Scalar>* gb = bs->requires_grad ? &grad_buffer(*bs) : nullptr;
      for (Index i = 0; i < batches; ++i) {
        ConstRowMap<Scalar> G(o.grad.data() + i * m * n, m, n);
        ConstRowMap<Scalar> A(as->value.data() + plan.a_index[i] * m * k, m, k);
        ConstRowMap<Scalar> B(bs->value.data() + plan.b_index[i] * b_rows * b_cols, b_rows,
                              b_cols);
        if (ga) {
          RowMap<Scalar> GA(ga->data() + plan.a_index[i] * m * k, m, k);
          if (trans_b) {
            GA.noalias() += G * B;
          } else {
            GA.noalias() += G * B.transpose();
          }
        }
        if (gb) {
          RowMap<Scalar> GB(gb->data() + plan.b_index[i] * b_rows * b_cols, b_rows, b_cols);
          if (trans_b) {
            GB.noalias() += G.transpose() * A;
          } else {
            GB.noalias() += A.transpose() * G;
          }
        }
      }
    });
  }
  return out;
}

template <typename Scalar, typename Forward, typename Derivative>
Tensor<Scalar> unary(const Tensor<Scalar>& x, Forward forward, Derivative derivative) {
  Tensor<Scalar> out(x.shape());
  out.values() = x.values().unaryExpr(forward);
  if (Tape<Scalar>::should_record({&x})) {
    auto xs = x.storage();
    Tape<Scalar>::active().record(out, [xs, derivative](const Storage<Scalar>& o) {
      grad_buffer(*xs).array() += o.grad.array() * xs->value.unaryExpr(derivative).array();
    });
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return matmul_impl(a, b, false);
}

template <typename Scalar>
Tensor<Scalar> matmul_transposed(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  return matmul_impl(a, b, true);
}

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "add");
  require_defined(b, "add");
  const Layout l = broadcast_layout(a.shape(), b.shape(), "add");
  Tensor<Scalar> out(l.shape);
  if (!l.a_small && !l.b_small) {
    out.values() = a.values() + b.values();
  } else {
    const Tensor<Scalar>& big = l.a_small ? b : a;
    const Tensor<Scalar>& small = l.a_small ? a : b;
    RowMap<Scalar>(out.values().data(), l.rows, l.cols) =
        ConstRowMap<Scalar>(big.values().data(), l.rows, l.cols).rowwise() +
        small.values().transpose();
  }
  if (Tape<Scalar>::should_record({&a, &b})) {
    auto as = a.storage(), bs = b.storage();
    Tape<Scalar>::active().record(out, [as, bs, l](const Storage<Scalar>& o) {
      for (const auto& [s, small] : {std::pair{as, l.a_small}, std::pair{bs, l.b_small}}) {
        if (!s->requires_grad) continue;
        if (small) {
          grad_buffer(*s) += ConstRowMap<Scalar>(o.grad.data(), l.rows, l.cols).colwise().sum().transpose();
        } else {
          grad_buffer(*s) += o.grad;
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "sub");
  require_defined(b, "sub");
  const Layout l = broadcast_layout(a.shape(), b.shape(), "sub");
  Tensor<Scalar> out(l.shape);
  if (!l.a_small && !l.b_small) {
    out.values() = a.values() - b.values();
  } else if (l.b_small) {
    RowMap<Scalar>(out.values().data(), l.rows, l.cols) =
        ConstRowMap<Scalar>(a.values().data(), l.rows, l.cols).rowwise() - b.values().transpose();
  } else {
    RowMap<Scalar>(out.values().data(), l.rows, l.cols) =
        (-ConstRowMap<Scalar>(b.values().data(), l.rows, l.cols)).rowwise() +
        a.values().transpose();
  }
  if (Tape<Scalar>::should_record({&a, &b})) {
    auto as = a.storage(), bs = b.storage();
    Tape<Scalar>::active().record(out, [as, bs, l](const Storage<Scalar>& o) {
      const Scalar signs[2] = {Scalar(1), Scalar(-1)};
      int i = 0;
      for (const auto& [s, small] : {std::pair{as, l.a_small}, std::pair{bs, l.b_small}}) {
        const Scalar sign = signs[i++];
        if (!s->requires_grad) continue;
        if (small) {
          grad_buffer(*s) +=
              sign * ConstRowMap<Scalar>(o.grad.data(), l.rows, l.cols).colwise().sum().transpose();
        } else {
          grad_buffer(*s) += sign * o.grad;
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "mul");
  require_defined(b, "mul");
  const Layout l = broadcast_layout(a.shape(), b.shape(), "mul");
  Tensor<Scalar> out(l.shape);
  if (!l.a_small && !l.b_small) {
    out.values() = a.values().cwiseProduct(b.values());
  } else {
    const Tensor<Scalar>& big = l.a_small ? b : a;
    const Tensor<Scalar>& small = l.a_small ? a : b;
    RowMap<Scalar>(out.values().data(), l.rows, l.cols) =
        ConstRowMap<Scalar>(big.values().data(), l.rows, l.cols).array().rowwise() *
        small.values().transpose().array();
  }
  if (Tape<Scalar>::should_record({&a, &b})) {
    auto as = a.storage(), bs = b.storage();
    Tape<Scalar>::active().record(out, [as, bs, l](const Storage<Scalar>& o) {
      if (!l.a_small && !l.b_small) {
        if (as->requires_grad) grad_buffer(*as) += o.grad.cwiseProduct(bs->value);
        if (bs->requires_grad) grad_buffer(*bs) += o.grad.cwiseProduct(as->value);
        return;
      }
      const auto& big = l.a_small ? bs : as;
      const auto& small = l.a_small ? as : bs;
      ConstRowMap<Scalar> G(o.grad.data(), l.rows, l.cols);
      if (big->requires_grad) {
        RowMap<Scalar>(grad_buffer(*big).data(), l.rows, l.cols).array() +=
            G.array().rowwise() * small->value.transpose().array();
      }
      if (small->requires_grad) {
        ConstRowMap<Scalar> X(big->value.data(), l.rows, l.cols);
        grad_buffer(*small) += G.cwiseProduct(X).colwise().sum().transpose();
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& a, Scalar factor) {
  require_defined(a, "scale");
  Tensor<Scalar> out(a.shape());
  out.values() = a.values() * factor;
  if (Tape<Scalar>::should_record({&a})) {
    auto as = a.storage();
    Tape<Scalar>::active().record(out, [as, factor](const Storage<Scalar>& o) {
      grad_buffer(*as) += o.grad * factor;
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> relu(const Tensor<Scalar>& x) {
  require_defined(x, "relu");
  return unary(
      x, [](Scalar v) { return v > Scalar(0) ? v : Scalar(0); },
      [](Scalar v) { return v > Scalar(0) ? Scalar(1) : Scalar(0); });
}

template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  require_defined(x, "gelu");
  constexpr Scalar inv_sqrt2 = Scalar(1) / std::numbers::sqrt2_v<Scalar>;
  constexpr Scalar inv_sqrt_2pi = std::numbers::inv_sqrtpi_v<Scalar> * inv_sqrt2;
  return unary(
      x, [](Scalar v) { return Scalar(0.5) * v * (Scalar(1) + std::erf(v * inv_sqrt2)); },
      [](Scalar v) {
        const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt_2pi * std::exp(Scalar(-0.5) * v * v);
      });
}

template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, Index axis) {
  require_defined(x, "softmax");
  const Index r = x.rank();
  const Index ax = axis < 0 ? axis + r : axis;
  if (ax < 0 || ax >= r) {
    throw BoundsError("softmax: axis " + std::to_string(axis) + " out of range for " +
                      shape_string(x.shape()));
  }
  const Shape& s = x.shape();
  Index outer = 1, inner = 1;
  for (Index d = 0; d < ax; ++d) outer *= s[d];
  for (Index d = ax + 1; d < r; ++d) inner *= s[d];
  const Index n = s[ax];

  Tensor<Scalar> out(s);
  const Scalar* in = x.values().data();
  Scalar* y = out.values().data();
  for (Index o = 0; o < outer; ++o) {
    for (Index i = 0; i < inner; ++i) {
      const Index base = o * n * inner + i;
      Scalar peak = in[base];
      for (Index j = 1; j < n; ++j) peak = std::max(peak, in[base + j * inner]);
      Scalar total = 0;
      for (Index j = 0; j < n; ++j) {
        const Scalar e = std::exp(in[base + j * inner] - peak);
        y[base + j * inner] = e;
        total += e;
      }
      const Scalar inv = Scalar(1) / total;
      for (Index j = 0; j < n; ++j) y[base + j * inner] *= inv;
    }
  }
  if (Tape<Scalar>::should_record({&x})) {
    auto xs = x.storage();
    Tape<Scalar>::active().record(out, [xs, outer, inner, n](const Storage<Scalar>& o) {
      Vector<Scalar>& gx = grad_buffer(*xs);
      const Scalar* y = o.value.data();
      const Scalar* gy = o.grad.data();
      for (Index p = 0; p < outer; ++p) {
        for (Index i = 0; i < inner; ++i) {
          const Index base = p * n * inner + i;
          Scalar dot = 0;
          for (Index j = 0; j < n; ++j) dot += gy[base + j * inner] * y[base + j * inner];
          for (Index j = 0; j < n; ++j) {
            gx[base + j * inner] += y[base + j * inner] * (gy[base + j * inner] - dot);
          }
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> layer_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gain,
                          const Tensor<Scalar>& bias, Scalar eps) {
  require_defined(x, "layer_norm");
  if (eps <= Scalar(0)) throw DomainError("layer_norm: eps must be positive");
  const Index n = x.dim(-1);
  if (gain.size() != n || bias.size() != n) {
    throw DimensionError("layer_norm: gain " + shape_string(gain.shape()) + " and bias " +
                         shape_string(bias.shape()) + " must match last axis of " +
                         shape_string(x.shape()));
  }
  const Index rows = x.size() / n;
  Tensor<Scalar> out(x.shape());
  RowMatrix<Scalar> xhat(rows, n);
  Vector<Scalar> inv_std(rows);
  ConstRowMap<Scalar> X(x.values().data(), rows, n);
  for (Index i = 0; i < rows; ++i) {
    const Scalar mu = X.row(i).mean();
    const Scalar var = (X.row(i).array() - mu).square().mean();
    inv_std[i] = Scalar(1) / std::sqrt(var + eps);
    xhat.row(i) = (X.row(i).array() - mu) * inv_std[i];
  }
  RowMap<Scalar>(out.values().data(), rows, n) =
      (xhat.array().rowwise() * gain.values().transpose().array()).rowwise() +
      bias.values().transpose().array();
  if (Tape<Scalar>::should_record({&x, &gain, &bias})) {
    auto xs = x.storage(), gs = gain.storage(), bs = bias.storage();
    Tape<Scalar>::active().record(
        out, [xs, gs, bs, xhat = std::move(xhat), inv_std = std::move(inv_std), rows,
              n](const Storage<Scalar>& o) {
          ConstRowMap<Scalar> G(o.grad.data(), rows, n);
          if (gs->requires_grad) grad_buffer(*gs) += G.cwiseProduct(xhat).colwise().sum().transpose();
          if (bs->requires_grad) grad_buffer(*bs) += G.colwise().sum().transpose();
          if (xs->requires_grad) {
            RowMap<Scalar> GX(grad_buffer(*xs).data(), rows, n);
            for (Index i = 0; i < rows; ++i) {
              const auto dxhat = (G.row(i).array() * gs->value.transpose().array()).eval();
              const Scalar m1 = dxhat.mean();
              const Scalar m2 = (dxhat * xhat.row(i).array()).mean();
              GX.row(i).array() += inv_std[i] * (dxhat - m1 - xhat.row(i).array() * m2);
            }
          }
        });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> batch_norm(const Tensor<Scalar>& x, const Tensor<Scalar>& gamma,
                          const Tensor<Scalar>& beta, BatchNormStats<Scalar>& stats,
                          bool training) {
  require_defined(x, "batch_norm");
  if (x.rank() < 2) throw DimensionError("batch_norm: expected [B, C, ...], got " + shape_string(x.shape()));
  const Index batch = x.dim(0), channels = x.dim(1);
  const Index spatial = x.size() / (batch * channels);
  if (gamma.size() != channels || beta.size() != channels || stats.mean.size() != channels ||
      stats.var.size() != channels) {
    throw DimensionError("batch_norm: parameter extents must equal channel count " +
                         std::to_string(channels));
  }
  const Index count = batch * spatial;
  Vector<Scalar> mu(channels), inv_std(channels);
  const Scalar* in = x.values().data();
  if (training) {
    if (count < 2) throw DimensionError("batch_norm: training needs more than one value per channel");
    for (Index c = 0; c < channels; ++c) {
      Scalar s = 0;
      for (Index b = 0; b < batch; ++b) {
        const Scalar* p = in + (b * channels + c) * spatial;
        for (Index j = 0; j < spatial; ++j) s += p[j];
      }
      const Scalar m = s / Scalar(count);
      Scalar v = 0;
      for (Index b = 0; b < batch; ++b) {
        const Scalar* p = in + (b * channels + c) * spatial;
        for (Index j = 0; j < spatial; ++j) v += (p[j] - m) * (p[j] - m);
      }
      const Scalar biased = v / Scalar(count);
      mu[c] = m;
      inv_std[c] = Scalar(1) / std::sqrt(biased + stats.eps);
      const Scalar unbiased = v / Scalar(count - 1);
      stats.mean.values()[c] = (Scalar(1) - stats.momentum) * stats.mean.values()[c] + stats.momentum * m;
      stats.var.values()[c] = (Scalar(1) - stats.momentum) * stats.var.values()[c] + stats.momentum * unbiased;
    }
  } else {
    mu = stats.mean.values();
    inv_std = (stats.var.values().array() + stats.eps).rsqrt().matrix();
  }

  Tensor<Scalar> out(x.shape());
  Vector<Scalar> xhat(x.size());
  for (Index b = 0; b < batch; ++b) {
    for (Index c = 0; c < channels; ++c) {
      const Index off = (b * channels + c) * spatial;
      for (Index j = 0; j < spatial; ++j) {
        xhat[off + j] = (in[off + j] - mu[c]) * inv_std[c];
        out.values()[off + j] = xhat[off + j] * gamma.values()[c] + beta.values()[c];
      }
    }
  }
  if (Tape<Scalar>::should_record({&x, &gamma, &beta})) {
    auto xs = x.storage(), gs = gamma.storage(), bs = beta.storage();
    Tape<Scalar>::active().record(
        out, [xs, gs, bs, xhat = std::move(xhat), inv_std = std::move(inv_std), batch, channels,
              spatial, count, training](const Storage<Scalar>& o) {
          const Scalar* g = o.grad.data();
          for (Index c = 0; c < channels; ++c) {
            Scalar sum_g = 0, sum_gx = 0;
            for (Index b = 0; b < batch; ++b) {
              const Index off = (b * channels + c) * spatial;
              for (Index j = 0; j < spatial; ++j) {
                sum_g += g[off + j];
                sum_gx += g[off + j] * xhat[off + j];
              }
            }
            if (gs->requires_grad) grad_buffer(*gs)[c] += sum_gx;
            if (bs->requires_grad) grad_buffer(*bs)[c] += sum_g;
            if (!xs->requires_grad) continue;
            Vector<Scalar>& gx = grad_buffer(*xs);
            const Scalar w = gs->value[c] * inv_std[c];
            const Scalar mean_g = sum_g / Scalar(count);
            const Scalar mean_gx = sum_gx / Scalar(count);
            for (Index b = 0; b < batch; ++b) {
              const Index off = (b * channels + c) * spatial;
              for (Index j = 0; j < spatial; ++j) {
                gx[off + j] += training ? w * (g[off + j] - mean_g - xhat[off + j] * mean_gx)
                                        : w * g[off + j];
              }
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeometry {
  Index batch, c_in, h, w, c_out, kh, kw, stride, pad, h_out, w_out;
};

template <typename Scalar>
void im2col(const Scalar* x, const ConvGeometry& g, Scalar* cols) {
  const Index plane = g.h_out * g.w_out;
  for (Index c = 0; c < g.c_in; ++c) {
    for (Index u = 0; u < g.kh; ++u) {
      for (Index v = 0; v < g.kw; ++v) {
        Scalar* row = cols + ((c * g.kh + u) * g.kw + v) * plane;
        for (Index i = 0; i < g.h_out; ++i) {
          const Index y = i * g.stride - g.pad + u;
          for (Index j = 0; j < g.w_out; ++j) {
            const Index xx = j * g.stride - g.pad + v;
            row[i * g.w_out + j] = (y >= 0 && y < g.h && xx >= 0 && xx < g.w)
                                       ? x[(c * g.h + y) * g.w + xx]
                                       : Scalar(0);
          }
        }
      }
    }
  }
}

template <typename Scalar>
void col2im_add(const Scalar* cols, const ConvGeometry& g, Scalar* x) {
  const Index plane = g.h_out * g.w_out;
  for (Index c = 0; c < g.c_in; ++c) {
    for (Index u = 0; u < g.kh; ++u) {
      for (Index v = 0; v < g.kw; ++v) {
        const Scalar* row = cols + ((c * g.kh + u) * g.kw + v) * plane;
        for (Index i = 0; i < g.h_out; ++i) {
          const Index y = i * g.stride - g.pad + u;
          if (y < 0 || y >= g.h) continue;
          for (Index j = 0; j < g.w_out; ++j) {
            const Index xx = j * g.stride - g.pad + v;
            if (xx < 0 || xx >= g.w) continue;
            x[(c * g.h + y) * g.w + xx] += row[i * g.w_out + j];
          }
        }
      }
    }
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar> conv2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel,
                      const Tensor<Scalar>& bias, Index stride, Index padding) {
  require_defined(x, "conv2d");
  require_defined(kernel, "conv2d");
  if (x.rank() == 3) {
    Shape batched{1, x.dim(0), x.dim(1), x.dim(2)};
    Tensor<Scalar> y = conv2d(reshape(x, batched), kernel, bias, stride, padding);
    return reshape(y, Shape{y.dim(1), y.dim(2), y.dim(3)});
  }
  if (x.rank() != 4 || kernel.rank() != 4) {
    throw DimensionError("conv2d: expected x [B, C, H, W] and kernel [C_out, C_in, K_h, K_w], got " +
                         shape_string(x.shape()) + " and " + shape_string(kernel.shape()));
  }
  if (kernel.dim(1) != x.dim(1)) {
    throw DimensionError("conv2d: kernel " + shape_string(kernel.shape()) +
                         " does not match input channels of " + shape_string(x.shape()));
  }
  if (stride < 1 || padding < 0) throw ConfigError("conv2d: stride must be >= 1 and padding >= 0");
  ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), kernel.dim(0), kernel.dim(2),
                 kernel.dim(3), stride, padding, 0, 0};
  const Index num_h = g.h + 2 * g.pad - g.kh;
  const Index num_w = g.w + 2 * g.pad - g.kw;
  if (num_h < 0 || num_w < 0) {
    throw ConfigError("conv2d: non-positive output extent for input " + shape_string(x.shape()) +
                      " and kernel " + shape_string(kernel.shape()));
  }
  g.h_out = num_h / stride + 1;
  g.w_out = num_w / stride + 1;
  if (bias.defined() && bias.size() != g.c_out) {
    throw DimensionError("conv2d: bias " + shape_string(bias.shape()) + " must have " +
                         std::to_string(g.c_out) + " elements");
  }

  const Index patch = g.c_in * g.kh * g.kw;
  const Index plane = g.h_out * g.w_out;
  Tensor<Scalar> out(Shape{g.batch, g.c_out, g.h_out, g.w_out});
  RowMatrix<Scalar> cols(patch, plane);
  ConstRowMap<Scalar> K(kernel.values().data(), g.c_out, patch);
  for (Index b = 0; b < g.batch; ++b) {
    im2col(x.values().data() + b * g.c_in * g.h * g.w, g, cols.data());
    RowMap<Scalar> Y(out.values().data() + b * g.c_out * plane, g.c_out, plane);
    Y.noalias() = K * cols;
    if (bias.defined()) Y.colwise() += bias.values();
  }
  if (Tape<Scalar>::should_record({&x, &kernel, &bias})) {
    auto xs = x.storage(), ks = kernel.storage();
    auto bs = bias.defined() ? bias.storage() : nullptr;
    Tape<Scalar>::active().record(out, [xs, ks, bs, g, patch, plane](const Storage<Scalar>& o) {
      RowMatrix<Scalar> cols(patch, plane);
      RowMatrix<Scalar> dcols(patch, plane);
      ConstRowMap<Scalar> K(ks->value.data(), g.c_out, patch);
      for (Index b = 0; b < g.batch; ++b) {
        ConstRowMap<Scalar> G(o.grad.data() + b * g.c_out * plane, g.c_out, plane);
        if (ks->requires_grad) {
          im2col(xs->value.data() + b * g.c_in * g.h * g.w, g, cols.data());
          RowMap<Scalar>(grad_buffer(*ks).data(), g.c_out, patch).noalias() += G * cols.transpose();
        }
        if (bs && bs->requires_grad) grad_buffer(*bs) += G.rowwise().sum();
        if (xs->requires_grad) {
          dcols.noalias() = K.transpose() * G;
          col2im_add(dcols.data(), g, grad_buffer(*xs).data() + b * g.c_in * g.h * g.w);
        }
      }
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> conv_transpose2d(const Tensor<Scalar>& x, const Tensor<Scalar>& kernel,
                                const Tensor<Scalar>& bias, Index stride) {
  require_defined(x, "conv_transpose2d");
  require_defined(kernel, "conv_transpose2d");
  if (x.rank() == 3) {
    Tensor<Scalar> y =
        conv_transpose2d(reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)}), kernel, bias, stride);
    return reshape(y, Shape{y.dim(1), y.dim(2), y.dim(3)});
  }
  if (x.rank() != 4 || kernel.rank() != 4) {
    throw DimensionError(
        "conv_transpose2d: expected x [B, C, H, W] and kernel [C_in, C_out, k, k], got " +
        shape_string(x.shape()) + " and " + shape_string(kernel.shape()));
  }
  const Index k = kernel.dim(2);
  if (kernel.dim(3) != k || k != stride) {
    throw ConfigError("conv_transpose2d: only square kernels with kernel size == stride are "
                      "supported, got kernel " + shape_string(kernel.shape()) + " and stride " +
                      std::to_string(stride));
  }
  if (kernel.dim(0) != x.dim(1)) {
    throw DimensionError("conv_transpose2d: kernel " + shape_string(kernel.shape()) +
                         " does not match input channels of " + shape_string(x.shape()));
  }
  const Index batch = x.dim(0), c_in = x.dim(1), h = x.dim(2), w = x.dim(3);
  const Index c_out = kernel.dim(1);
  if (bias.defined() && bias.size() != c_out) {
    throw DimensionError("conv_transpose2d: bias must have " + std::to_string(c_out) + " elements");
  }
  const Index hw = h * w;
  const Index fan = c_out * k * k;
  const Index ho = h * k, wo = w * k;
  Tensor<Scalar> out(Shape{batch, c_out, ho, wo});
  ConstRowMap<Scalar> K(kernel.values().data(), c_in, fan);
  RowMatrix<Scalar> Y(fan, hw);
  for (Index b = 0; b < batch; ++b) {
    ConstRowMap<Scalar> X(x.values().data() + b * c_in * hw, c_in, hw);
    Y.noalias() = K.transpose() * X;
    Scalar* dst = out.values().data() + b * c_out * ho * wo;
    for (Index co = 0; co < c_out; ++co) {
      const Scalar bv = bias.defined() ? bias.values()[co] : Scalar(0);
      for (Index u = 0; u < k; ++u) {
        for (Index v = 0; v < k; ++v) {
          const Scalar* row = Y.data() + ((co * k + u) * k + v) * hw;
          for (Index i = 0; i < h; ++i) {
            for (Index j = 0; j < w; ++j) {
              dst[(co * ho + i * k + u) * wo + j * k + v] = row[i * w + j] + bv;
            }
          }
        }
      }
    }
  }
  if (Tape<Scalar>::should_record({&x, &kernel, &bias})) {
    auto xs = x.storage(), ks = kernel.storage();
    auto bs = bias.defined() ? bias.storage() : nullptr;
    Tape<Scalar>::active().record(
        out, [xs, ks, bs, batch, c_in, c_out, h, w, k, hw, fan, ho, wo](const Storage<Scalar>& o) {
          RowMatrix<Scalar> dY(fan, hw);
          ConstRowMap<Scalar> K(ks->value.data(), c_in, fan);
          for (Index b = 0; b < batch; ++b) {
            const Scalar* src = o.grad.data() + b * c_out * ho * wo;
            for (Index co = 0; co < c_out; ++co) {
              for (Index u = 0; u < k; ++u) {
                for (Index v = 0; v < k; ++v) {
                  Scalar* row = dY.data() + ((co * k + u) * k + v) * hw;
                  for (Index i = 0; i < h; ++i) {
                    for (Index j = 0; j < w; ++j) {
                      row[i * w + j] = src[(co * ho + i * k + u) * wo + j * k + v];
                    }
                  }
                }
              }
            }
            if (bs && bs->requires_grad) {
              Vector<Scalar>& gb = grad_buffer(*bs);
              for (Index co = 0; co < c_out; ++co) {
                gb[co] += dY.middleRows(co * k * k, k * k).sum();
              }
            }
            ConstRowMap<Scalar> X(xs->value.data() + b * c_in * hw, c_in, hw);
            if (ks->requires_grad) {
              RowMap<Scalar>(grad_buffer(*ks).data(), c_in, fan).noalias() += X * dY.transpose();
            }
            if (xs->requires_grad) {
              RowMap<Scalar>(grad_buffer(*xs).data() + b * c_in * hw, c_in, hw).noalias() += K * dY;
            }
          }
        });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Shape manipulation

template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Shape shape) {
  require_defined(x, "reshape");
  if (shape_size(shape) != x.size()) {
    throw DimensionError("reshape: cannot view " + shape_string(x.shape()) + " as " +
                         shape_string(shape));
  }
  Tensor<Scalar> out(std::move(shape));
  out.values() = x.values();
  if (Tape<Scalar>::should_record({&x})) {
    auto xs = x.storage();
    Tape<Scalar>::active().record(out, [xs](const Storage<Scalar>& o) { grad_buffer(*xs) += o.grad; });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> flatten(const Tensor<Scalar>& x, Index start_axis) {
  require_defined(x, "flatten");
  const Index r = x.rank();
  const Index start = start_axis < 0 ? start_axis + r : start_axis;
  if (start < 0 || start >= r) {
    throw BoundsError("flatten: start axis out of range for " + shape_string(x.shape()));
  }
  Shape shape(x.shape().begin(), x.shape().begin() + start);
  Index tail = 1;
  for (Index d = start; d < r; ++d) tail *= x.dim(d);
  shape.push_back(tail);
  return reshape(x, std::move(shape));
}

template <typename Scalar>
Tensor<Scalar> permute(const Tensor<Scalar>& x, const std::vector<Index>& order) {
  require_defined(x, "permute");
  const Index r = x.rank();
  if (static_cast<Index>(order.size()) != r) {
    throw DimensionError("permute: order has " + std::to_string(order.size()) +
                         " axes for shape " + shape_string(x.shape()));
  }
  std::vector<bool> seen(static_cast<std::size_t>(r), false);
  for (Index a : order) {
    if (a < 0 || a >= r || seen[static_cast<std::size_t>(a)]) {
      throw DimensionError("permute: invalid axis order for shape " + shape_string(x.shape()));
    }
    seen[static_cast<std::size_t>(a)] = true;
  }
  Shape in_strides(static_cast<std::size_t>(r), 1);
  for (Index d = r - 1; d > 0; --d) in_strides[d - 1] = in_strides[d] * x.dim(d);
  Shape out_shape(static_cast<std::size_t>(r));
  Shape strides(static_cast<std::size_t>(r));
  for (Index d = 0; d < r; ++d) {
    out_shape[d] = x.dim(order[d]);
    strides[d] = in_strides[order[d]];
  }

  // Visits output elements in order, yielding the matching input offset.
  auto traverse = [out_shape, strides, r](auto&& visit) {
    const Index total = shape_size(out_shape);
    Shape counter(static_cast<std::size_t>(r), 0);
    Index in_off = 0;
    for (Index o = 0; o < total; ++o) {
      visit(o, in_off);
      for (Index d = r - 1; d >= 0; --d) {
        in_off += strides[d];
        if (++counter[d] < out_shape[d]) break;
        in_off -= strides[d] * out_shape[d];
        counter[d] = 0;
      }
    }
  };

  Tensor<Scalar> out(out_shape);
  const Scalar* src = x.values().data();
  Scalar* dst = out.values().data();
  traverse([&](Index o, Index i) { dst[o] = src[i]; });
  if (Tape<Scalar>::should_record({&x})) {
    auto xs = x.storage();
    Tape<Scalar>::active().record(out, [xs, traverse](const Storage<Scalar>& o) {
      Scalar* gx = grad_buffer(*xs).data();
      const Scalar* g = o.grad.data();
      traverse([&](Index oi, Index i) { gx[i] += g[oi]; });
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> index_select(const Tensor<Scalar>& table, const std::vector<Index>& indices) {
  require_defined(table, "index_select");
  const Index width = table.dim(-1);
  for (Index i : indices) {
    if (i < 0 || i >= width) {
      throw BoundsError("index_select: index " + std::to_string(i) + " out of range for " +
                        shape_string(table.shape()));
    }
  }
  const Index rows = table.size() / width;
  const Index n = static_cast<Index>(indices.size());
  Shape shape = table.shape();
  shape.back() = n;
  Tensor<Scalar> out(shape);
  for (Index r = 0; r < rows; ++r) {
    for (Index j = 0; j < n; ++j) out.values()[r * n + j] = table.values()[r * width + indices[j]];
  }
  if (Tape<Scalar>::should_record({&table})) {
    auto ts = table.storage();
    Tape<Scalar>::active().record(out, [ts, indices, rows, width, n](const Storage<Scalar>& o) {
      Vector<Scalar>& g = grad_buffer(*ts);
      for (Index r = 0; r < rows; ++r) {
        for (Index j = 0; j < n; ++j) g[r * width + indices[j]] += o.grad[r * n + j];
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Reductions

template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  require_defined(x, "sum");
  Tensor<Scalar> out = Tensor<Scalar>::scalar(x.values().sum());
  if (Tape<Scalar>::should_record({&x})) {
    auto xs = x.storage();
    Tape<Scalar>::active().record(out, [xs](const Storage<Scalar>& o) {
      grad_buffer(*xs).array() += o.grad[0];
    });
  }
  return out;
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  require_defined(x, "mean");
  if (x.size() == 0) throw DimensionError("mean of an empty tensor");
  return scale(sum(x), Scalar(1) / Scalar(x.size()));
}

template <typename Scalar>
Tensor<Scalar> mse(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  require_defined(a, "mse");
  require_defined(b, "mse");
  if (a.shape() != b.shape()) {
    throw DimensionError("mse: shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
  if (a.size() == 0) throw DimensionError("mse of empty tensors");
  const Scalar n = Scalar(a.size());
  Tensor<Scalar> out = Tensor<Scalar>::scalar((a.values() - b.values()).squaredNorm() / n);
  if (Tape<Scalar>::should_record({&a, &b})) {
    auto as = a.storage(), bs = b.storage();
    Tape<Scalar>::active().record(out, [as, bs, n](const Storage<Scalar>& o) {
      const Scalar f = Scalar(2) * o.grad[0] / n;
      if (as->requires_grad) grad_buffer(*as) += f * (as->value - bs->value);
      if (bs->requires_grad) grad_buffer(*bs) -= f * (as->value - bs->value);
    });
  }
  return out;
}

#define NEFT_INSTANTIATE_OPS(S)                                                                \
  template Tensor<S> matmul(const Tensor<S>&, const Tensor<S>&);                               \
  template Tensor<S> matmul_transposed(const Tensor<S>&, const Tensor<S>&);                    \
  template Tensor<S> add(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> sub(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> mul(const Tensor<S>&, const Tensor<S>&);                                  \
  template Tensor<S> scale(const Tensor<S>&, S);                                               \
  template Tensor<S> relu(const Tensor<S>&);                                                   \
  template Tensor<S> gelu(const Tensor<S>&);                                                   \
  template Tensor<S> softmax(const Tensor<S>&, Index);                                         \
  template Tensor<S> layer_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, S);      \
  template Tensor<S> batch_norm(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,          \
                                BatchNormStats<S>&, bool);                                     \
  template Tensor<S> conv2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&, Index, Index); \
  template Tensor<S> conv_transpose2d(const Tensor<S>&, const Tensor<S>&, const Tensor<S>&,    \
                                      Index);                                                  \
  template Tensor<S> reshape(const Tensor<S>&, Shape);                                         \
  template Tensor<S> flatten(const Tensor<S>&, Index);                                         \
  template Tensor<S> permute(const Tensor<S>&, const std::vector<Index>&);                     \
  template Tensor<S> index_select(const Tensor<S>&, const std::vector<Index>&);                \
  template Tensor<S> sum(const Tensor<S>&);                                                    \
  template Tensor<S> mean(const Tensor<S>&);                                                   \
  template Tensor<S> mse(const Tensor<S>&, const Tensor<S>&);

NEFT_INSTANTIATE_OPS(float)
NEFT_INSTANTIATE_OPS(double)

#undef NEFT_INSTANTIATE_OPS

}  // namespace neft
