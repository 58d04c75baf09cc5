#pragma once

#include <Eigen/Core>
#include <unsupported/Eigen/SpecialFunctions>

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "vtlm/error.hpp"
#include "vtlm/rng.hpp"
#include "vtlm/tensor.hpp"

namespace vtlm {

namespace detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MatMap = Eigen::Map<RowMat<T>>;
template <class T>
using ConstMatMap = Eigen::Map<const RowMat<T>>;
template <class T>
using StridedMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;
template <class T>
using ConstStridedMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;

template <class T>
ConstMatMap<T> as_matrix(const std::vector<T>& v, Index rows, Index cols) {
  return ConstMatMap<T>(v.data(), rows, cols);
}

template <class T>
MatMap<T> as_matrix(std::vector<T>& v, Index rows, Index cols) {
  return MatMap<T>(v.data(), rows, cols);
}

inline void require_same_shape(const Shape& a, const Shape& b, const char* op) {
  if (a != b) throw ShapeError(std::string(op) + ": " + shape_str(a) + " vs " + shape_str(b));
}

template <class T>
bool wants_grad(const TensorNode<T>& n) {
  return n.requires_grad;
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "add");
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    for (auto& p : n.parents) {
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
  });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "sub");
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    const T sign[2] = {T(1), T(-1)};
    for (std::size_t k = 0; k < 2; ++k) {
      auto& p = n.parents[k];
      if (!p->requires_grad) continue;
      auto& g = p->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += sign[k] * n.grad[i];
    }
  });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  detail::require_same_shape(a.shape(), b.shape(), "mul");
  std::vector<T> out(a.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.values()[i];
  return Tensor<T>::make_result(a.shape(), std::move(out), {a, b}, [](TensorNode<T>& n) {
    auto& pa = n.parents[0];
    auto& pb = n.parents[1];
    if (pa->requires_grad) {
      auto& g = pa->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pb->data[i];
    }
    if (pb->requires_grad) {
      auto& g = pb->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * pa->data[i];
    }
  });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.values());
  for (auto& x : out) x *= factor;
  return Tensor<T>::make_result(a.shape(), std::move(out), {a}, [factor](TensorNode<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += factor * n.grad[i];
  });
}

/// x + b where b broadcasts along the last axis of x.
template <class T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& b) {
  const Index cols = x.dim(-1);
  if (b.numel() != cols) throw ShapeError("add_bias: bias " + shape_str(b.shape()) + " vs " + shape_str(x.shape()));
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.values()[i % static_cast<std::size_t>(cols)];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x, b}, [cols](TensorNode<T>& n) {
    if (n.parents[0]->requires_grad) {
      auto& g = n.parents[0]->ensure_grad();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    }
    if (n.parents[1]->requires_grad) {
      auto& g = n.parents[1]->ensure_grad();
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[i % static_cast<std::size_t>(cols)] += n.grad[i];
    }
  });
}

template <class T>
Tensor<T> sum(const Tensor<T>& a) {
  T s = 0;
  for (T x : a.values()) s += x;
  return Tensor<T>::make_result({1}, {s}, {a}, [](TensorNode<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (auto& x : g) x += n.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
  return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

template <class T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (numel_of(shape) != a.numel()) throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  return Tensor<T>::make_result(std::move(shape), a.values(), {a}, [](TensorNode<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

/// a[M x K] . b[K x N]; leading axes of a are flattened into M.
template <class T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  const Index k = a.dim(-1);
  const Index m = a.rows();
  if (b.rank() != 2 || b.dim(0) != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
  const Index nc = b.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * nc));
  detail::as_matrix(out, m, nc).noalias() = detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), k, nc);
  Shape shape = a.shape();
  shape.back() = nc;
  return Tensor<T>::make_result(std::move(shape), std::move(out), {a, b}, [m, k, nc](TensorNode<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const auto dc = detail::as_matrix(n.grad, m, nc);
    if (pa.requires_grad) {
      detail::as_matrix(pa.ensure_grad(), m, k).noalias() += dc * detail::as_matrix(pb.data, k, nc).transpose();
    }
    if (pb.requires_grad) {
      detail::as_matrix(pb.ensure_grad(), k, nc).noalias() += detail::as_matrix(pa.data, m, k).transpose() * dc;
    }
  });
}

/// a[M x K] . b[N x K]^T, used by the tied output projections.
template <class T>
Tensor<T> matmul_bt(const Tensor<T>& a, const Tensor<T>& b) {
  const Index k = a.dim(-1);
  const Index m = a.rows();
  if (b.rank() != 2 || b.dim(1) != k) throw ShapeError("matmul_bt: " + shape_str(a.shape()) + " . " + shape_str(b.shape()) + "^T");
  const Index nr = b.dim(0);
  std::vector<T> out(static_cast<std::size_t>(m * nr));
  detail::as_matrix(out, m, nr).noalias() = detail::as_matrix(a.values(), m, k) * detail::as_matrix(b.values(), nr, k).transpose();
  Shape shape = a.shape();
  shape.back() = nr;
  return Tensor<T>::make_result(std::move(shape), std::move(out), {a, b}, [m, k, nr](TensorNode<T>& n) {
    auto& pa = *n.parents[0];
    auto& pb = *n.parents[1];
    const auto dc = detail::as_matrix(n.grad, m, nr);
    if (pa.requires_grad) {
      detail::as_matrix(pa.ensure_grad(), m, k).noalias() += dc * detail::as_matrix(pb.data, nr, k);
    }
    if (pb.requires_grad) {
      detail::as_matrix(pb.ensure_grad(), nr, k).noalias() += dc.transpose() * detail::as_matrix(pa.data, m, k);
    }
  });
}

/// x . W + b with W stored [in x out].
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
  const Index in = x.dim(-1);
  const Index m = x.rows();
  if (w.rank() != 2 || w.dim(0) != in || b.numel() != w.dim(1)) {
    throw ShapeError("linear: x" + shape_str(x.shape()) + " W" + shape_str(w.shape()) + " b" + shape_str(b.shape()));
  }
  const Index out_dim = w.dim(1);
  std::vector<T> out(static_cast<std::size_t>(m * out_dim));
  auto y = detail::as_matrix(out, m, out_dim);
  y.noalias() = detail::as_matrix(x.values(), m, in) * detail::as_matrix(w.values(), in, out_dim);
  y.rowwise() += Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>>(b.values().data(), out_dim);
  Shape shape = x.shape();
  shape.back() = out_dim;
  return Tensor<T>::make_result(std::move(shape), std::move(out), {x, w, b}, [m, in, out_dim](TensorNode<T>& n) {
    auto& px = *n.parents[0];
    auto& pw = *n.parents[1];
    auto& pb = *n.parents[2];
    const auto dy = detail::as_matrix(n.grad, m, out_dim);
    if (px.requires_grad) {
      detail::as_matrix(px.ensure_grad(), m, in).noalias() += dy * detail::as_matrix(pw.data, in, out_dim).transpose();
    }
    if (pw.requires_grad) {
      detail::as_matrix(pw.ensure_grad(), in, out_dim).noalias() += detail::as_matrix(px.data, m, in).transpose() * dy;
    }
    if (pb.requires_grad) {
      auto& gb = pb.ensure_grad();
      for (Index r = 0; r < m; ++r) {
        for (Index c = 0; c < out_dim; ++c) gb[static_cast<std::size_t>(c)] += dy(r, c);
      }
    }
  });
}

namespace detail {

/// Applies an Eigen array function in fixed, aligned blocks. Eigen's packet
/// and scalar transcendental paths differ in the last ulp, and on unaligned
/// maps the split between them depends on the heap address, so results would
/// vary from run to run.
template <class T, class F>
void blockwise(std::size_t n, F&& f) {
  constexpr std::size_t kBlock = 16;
  for (std::size_t i = 0; i < n; i += kBlock) f(i, std::min(kBlock, n - i));
}

}  // namespace detail

/// Exact (erf) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  using Block = Eigen::Array<T, 16, 1>;
  constexpr T kInvSqrt2 = T(0.70710678118654752440);
  const auto& xs = x.values();
  const std::size_t n = xs.size();
  std::vector<T> cdf(n);
  std::vector<T> out(n);
  detail::blockwise<T>(n, [&](std::size_t i, std::size_t m) {
    Block v = Block::Zero();
    std::copy_n(xs.data() + i, m, v.data());
    const Block c = T(0.5) * (T(1) + (v * kInvSqrt2).erf());
    const Block y = v * c;
    std::copy_n(c.data(), m, cdf.data() + i);
    std::copy_n(y.data(), m, out.data() + i);
  });
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [cdf = std::move(cdf)](TensorNode<T>& node) {
    constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
    auto& p = *node.parents[0];
    auto& g = p.ensure_grad();
    detail::blockwise<T>(cdf.size(), [&](std::size_t i, std::size_t m) {
      Block v = Block::Zero();
      Block c = Block::Zero();
      Block up = Block::Zero();
      std::copy_n(p.data.data() + i, m, v.data());
      std::copy_n(cdf.data() + i, m, c.data());
      std::copy_n(node.grad.data() + i, m, up.data());
      const Block d = up * (c + v * kInvSqrt2Pi * (T(-0.5) * v.square()).exp());
      for (std::size_t k = 0; k < m; ++k) g[i + k] += d[static_cast<Index>(k)];
    });
  });
}

/// Inverted dropout. Identity when rate is 0 or training is off.
template <class T>
Tensor<T> dropout(const Tensor<T>& x, double rate, Pcg32& rng, bool training = true) {
  if (!training || rate <= 0.0) return x;
  if (rate >= 1.0) throw UsageError("dropout rate must be < 1");
  const T keep_scale = static_cast<T>(1.0 / (1.0 - rate));
  // One 32-bit draw per element; drop when below rate * 2^32.
  const auto threshold = static_cast<std::uint64_t>(std::llround(rate * 4294967296.0));
  std::vector<T> mask(x.values().size());
  for (auto& m : mask) m = rng.next_u32() < threshold ? T(0) : keep_scale;
  std::vector<T> out(x.values());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
  return Tensor<T>::make_result(x.shape(), std::move(out), {x}, [mask = std::move(mask)](TensorNode<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * mask[i];
  });
}

/// Normalises over the last axis, then applies gain and bias.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, double eps = 1e-5) {
  const Index cols = x.dim(-1);
  const Index rows = x.rows();
  if (gain.numel() != cols || bias.numel() != cols) {
    throw ShapeError("layer_norm: gain/bias must match last axis of " + shape_str(x.shape()));
  }
  std::vector<T> out(x.values().size());
  std::vector<T> xhat(out.size());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  const auto& xv = x.values();
  for (Index r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * cols;
    double mu = 0;
    for (Index c = 0; c < cols; ++c) mu += row[c];
    mu /= static_cast<double>(cols);
    double var = 0;
    for (Index c = 0; c < cols; ++c) var += (row[c] - mu) * (row[c] - mu);
    var /= static_cast<double>(cols);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[static_cast<std::size_t>(r)] = static_cast<T>(rs);
    for (Index c = 0; c < cols; ++c) {
      const auto i = static_cast<std::size_t>(r * cols + c);
      xhat[i] = static_cast<T>((row[c] - mu) * rs);
      out[i] = xhat[i] * gain.values()[static_cast<std::size_t>(c)] + bias.values()[static_cast<std::size_t>(c)];
    }
  }
  return Tensor<T>::make_result(
      x.shape(), std::move(out), {x, gain, bias},
      [rows, cols, xhat = std::move(xhat), rstd = std::move(rstd)](TensorNode<T>& n) {
        auto& px = *n.parents[0];
        auto& pg = *n.parents[1];
        auto& pb = *n.parents[2];
        if (pg.requires_grad || pb.requires_grad) {
          auto& gg = pg.ensure_grad();
          auto& gb = pb.ensure_grad();
          for (Index r = 0; r < rows; ++r) {
            for (Index c = 0; c < cols; ++c) {
              const auto i = static_cast<std::size_t>(r * cols + c);
              gg[static_cast<std::size_t>(c)] += n.grad[i] * xhat[i];
              gb[static_cast<std::size_t>(c)] += n.grad[i];
            }
          }
        }
        if (!px.requires_grad) return;
        auto& gx = px.ensure_grad();
        std::vector<T> dxhat(static_cast<std::size_t>(cols));
        for (Index r = 0; r < rows; ++r) {
          double m1 = 0;
          double m2 = 0;
          for (Index c = 0; c < cols; ++c) {
            const auto i = static_cast<std::size_t>(r * cols + c);
            dxhat[static_cast<std::size_t>(c)] = n.grad[i] * pg.data[static_cast<std::size_t>(c)];
            m1 += dxhat[static_cast<std::size_t>(c)];
            m2 += dxhat[static_cast<std::size_t>(c)] * xhat[i];
          }
          m1 /= static_cast<double>(cols);
          m2 /= static_cast<double>(cols);
          for (Index c = 0; c < cols; ++c) {
            const auto i = static_cast<std::size_t>(r * cols + c);
            gx[i] += static_cast<T>(rstd[static_cast<std::size_t>(r)] * (dxhat[static_cast<std::size_t>(c)] - m1 - xhat[i] * m2));
          }
        }
      });
}

/// Softmax along `axis`, computed with max-subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x, Index axis = -1) {
  const Index r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: bad axis for " + shape_str(x.shape()));
  const Index len = x.dim(axis);
  Index inner = 1;
  for (Index i = axis + 1; i < r; ++i) inner *= x.dim(i);
  const Index outer = x.numel() / (len * inner);
  for (T v : x.values()) {
    if (!std::isfinite(v)) throw NumericDomainError("softmax: non-finite input");
  }
  std::vector<T> out(x.values().size());
  const auto& xv = x.values();
  for (Index o = 0; o < outer; ++o) {
    for (Index in = 0; in < inner; ++in) {
      const Index base = o * len * inner + in;
      T mx = xv[static_cast<std::size_t>(base)];
      for (Index j = 1; j < len; ++j) mx = std::max(mx, xv[static_cast<std::size_t>(base + j * inner)]);
      double z = 0;
      for (Index j = 0; j < len; ++j) {
        const auto i = static_cast<std::size_t>(base + j * inner);
        out[i] = static_cast<T>(std::exp(xv[i] - mx));
        z += out[i];
      }
      for (Index j = 0; j < len; ++j) out[static_cast<std::size_t>(base + j * inner)] /= static_cast<T>(z);
    }
  }
  return Tensor<T>::make_result(x.shape(), out, {x}, [outer, inner, len, y = out](TensorNode<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    for (Index o = 0; o < outer; ++o) {
      for (Index in = 0; in < inner; ++in) {
        const Index base = o * len * inner + in;
        double dot = 0;
        for (Index j = 0; j < len; ++j) {
          const auto i = static_cast<std::size_t>(base + j * inner);
          dot += n.grad[i] * y[i];
        }
        for (Index j = 0; j < len; ++j) {
          const auto i = static_cast<std::size_t>(base + j * inner);
          g[i] += static_cast<T>(y[i] * (n.grad[i] - dot));
        }
      }
    }
  });
}

/// Mean over rows of -log softmax(logits)[target].
template <class T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const Index> targets) {
  const Index vocab = logits.dim(-1);
  const Index rows = logits.rows();
  if (static_cast<Index>(targets.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " + std::to_string(rows) + " rows");
  }
  for (Index t : targets) {
    if (t < 0 || t >= vocab) throw IndexError("cross_entropy: target " + std::to_string(t) + " outside [0, " + std::to_string(vocab) + ")");
  }
  std::vector<T> probs(logits.values().size());
  const auto& lv = logits.values();
  double total = 0;
  for (Index r = 0; r < rows; ++r) {
    const T* row = lv.data() + r * vocab;
    const T mx = *std::max_element(row, row + vocab);
    double z = 0;
    for (Index c = 0; c < vocab; ++c) z += std::exp(static_cast<double>(row[c] - mx));
    const double lse = static_cast<double>(mx) + std::log(z);
    total += lse - row[targets[static_cast<std::size_t>(r)]];
    for (Index c = 0; c < vocab; ++c) {
      probs[static_cast<std::size_t>(r * vocab + c)] = static_cast<T>(std::exp(row[c] - lse));
    }
  }
  const T loss = static_cast<T>(total / static_cast<double>(rows));
  std::vector<Index> tgt(targets.begin(), targets.end());
  return Tensor<T>::make_result({1}, {loss}, {logits}, [rows, vocab, probs = std::move(probs), tgt = std::move(tgt)](TensorNode<T>& n) {
    auto& g = n.parents[0]->ensure_grad();
    const T s = n.grad[0] / static_cast<T>(rows);
    for (Index r = 0; r < rows; ++r) {
      for (Index c = 0; c < vocab; ++c) {
        const auto i = static_cast<std::size_t>(r * vocab + c);
        g[i] += s * (probs[i] - (c == tgt[static_cast<std::size_t>(r)] ? T(1) : T(0)));
      }
    }
  });
}

/// Row gather: out[i] = table[idx[i]]; idx -1 yields a zero row.
/// Embedding lookup is this op applied to an embedding table.
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, std::span<const Index> idx) {
  const Index cols = table.dim(-1);
  const Index rows = table.rows();
  if (idx.empty()) throw ShapeError("gather_rows: empty index list");
  std::vector<T> out(idx.size() * static_cast<std::size_t>(cols), T(0));
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const Index r = idx[i];
    if (r == -1) continue;
    if (r < 0 || r >= rows) throw IndexError("gather_rows: row " + std::to_string(r) + " outside [0, " + std::to_string(rows) + ")");
    std::copy_n(table.values().begin() + r * cols, cols, out.begin() + static_cast<Index>(i) * cols);
  }
  std::vector<Index> ids(idx.begin(), idx.end());
  return Tensor<T>::make_result({static_cast<Index>(idx.size()), cols}, std::move(out), {table},
                                [cols, ids = std::move(ids)](TensorNode<T>& n) {
                                  auto& g = n.parents[0]->ensure_grad();
                                  for (std::size_t i = 0; i < ids.size(); ++i) {
                                    if (ids[i] < 0) continue;
                                    for (Index c = 0; c < cols; ++c) {
                                      g[static_cast<std::size_t>(ids[i] * cols + c)] += n.grad[i * static_cast<std::size_t>(cols) + static_cast<std::size_t>(c)];
                                    }
                                  }
                                });
}

/// Stacks 2-D blocks with equal column counts.
template <class T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
  const Index cols = parts[0].dim(-1);
  std::vector<T> out;
  Index rows = 0;
  std::vector<std::size_t> sizes;
  for (const auto& p : parts) {
    if (p.dim(-1) != cols) throw ShapeError("concat_rows: column mismatch");
    out.insert(out.end(), p.values().begin(), p.values().end());
    rows += p.rows();
    sizes.push_back(p.values().size());
  }
  return Tensor<T>::make_result({rows, cols}, std::move(out), parts, [sizes = std::move(sizes)](TensorNode<T>& n) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < sizes.size(); ++k) {
      auto& p = *n.parents[k];
      if (p.requires_grad) {
        auto& g = p.ensure_grad();
        for (std::size_t i = 0; i < sizes[k]; ++i) g[i] += n.grad[off + i];
      }
      off += sizes[k];
    }
  });
}

/// Shape of a batched multi-head attention call. Queries and keys are laid
/// out as [batch * len, d_model] matrices; heads split the model axis.
struct AttentionSpec {
  Index batch = 1;
  Index q_len = 1;
  Index k_len = 1;
  Index heads = 1;
  bool causal = false;
  /// batch * k_len flags; nonzero keys receive -inf logits.
  std::vector<std::uint8_t> key_mask;
};

/// Scaled dot-product attention over all heads. When `probs_out` is given it
/// receives the post-softmax weights as [batch, heads, q_len, k_len].
template <class T>
Tensor<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, const AttentionSpec& spec,
                    std::vector<T>* probs_out = nullptr) {
  const Index d = q.dim(-1);
  const Index B = spec.batch;
  const Index Tq = spec.q_len;
  const Index Tk = spec.k_len;
  const Index H = spec.heads;
  if (d % H != 0) throw ShapeError("attention: d_model not divisible by heads");
  if (q.rows() != B * Tq || k.rows() != B * Tk || v.rows() != B * Tk || k.dim(-1) != d || v.dim(-1) != d) {
    throw ShapeError("attention: q" + shape_str(q.shape()) + " k" + shape_str(k.shape()) + " v" + shape_str(v.shape()));
  }
  if (!spec.key_mask.empty() && static_cast<Index>(spec.key_mask.size()) != B * Tk) {
    throw ShapeError("attention: key mask size");
  }
  const Index dh = d / H;
  const T inv_sqrt = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dh)));
  std::vector<T> probs(static_cast<std::size_t>(B * H * Tq * Tk));
  std::vector<T> out(static_cast<std::size_t>(B * Tq * d));
  const T neg_inf = -std::numeric_limits<T>::infinity();
  detail::RowMat<T> scores(Tq, Tk);
  for (Index b = 0; b < B; ++b) {
    for (Index h = 0; h < H; ++h) {
      detail::ConstStridedMap<T> Q(q.values().data() + b * Tq * d + h * dh, Tq, dh, Eigen::OuterStride<>(d));
      detail::ConstStridedMap<T> K(k.values().data() + b * Tk * d + h * dh, Tk, dh, Eigen::OuterStride<>(d));
      detail::ConstStridedMap<T> V(v.values().data() + b * Tk * d + h * dh, Tk, dh, Eigen::OuterStride<>(d));
      scores.noalias() = (Q * K.transpose()) * inv_sqrt;
      detail::MatMap<T> P(probs.data() + ((b * H + h) * Tq) * Tk, Tq, Tk);
      for (Index i = 0; i < Tq; ++i) {
        T mx = neg_inf;
        for (Index j = 0; j < Tk; ++j) {
          const bool masked = (spec.causal && j > i) || (!spec.key_mask.empty() && spec.key_mask[static_cast<std::size_t>(b * Tk + j)]);
          if (masked) scores(i, j) = neg_inf;
          mx = std::max(mx, scores(i, j));
        }
        if (mx == neg_inf) {
          P.row(i).setZero();
          continue;
        }
        T z = 0;
        for (Index j = 0; j < Tk; ++j) {
          const T e = scores(i, j) == neg_inf ? T(0) : std::exp(scores(i, j) - mx);
          P(i, j) = e;
          z += e;
        }
        P.row(i) /= z;
      }
      detail::StridedMap<T> O(out.data() + b * Tq * d + h * dh, Tq, dh, Eigen::OuterStride<>(d));
      O.noalias() = P * V;
    }
  }
  if (probs_out) *probs_out = probs;
  return Tensor<T>::make_result(
      q.shape(), std::move(out), {q, k, v},
      [B, Tq, Tk, H, d, dh, inv_sqrt, probs = std::move(probs)](TensorNode<T>& n) {
        auto& pq = *n.parents[0];
        auto& pk = *n.parents[1];
        auto& pv = *n.parents[2];
        auto& gq = pq.ensure_grad();
        auto& gk = pk.ensure_grad();
        auto& gv = pv.ensure_grad();
        detail::RowMat<T> dP(Tq, Tk);
        detail::RowMat<T> dS(Tq, Tk);
        for (Index b = 0; b < B; ++b) {
          for (Index h = 0; h < H; ++h) {
            const Index qoff = b * Tq * d + h * dh;
            const Index koff = b * Tk * d + h * dh;
            detail::ConstStridedMap<T> dO(n.grad.data() + qoff, Tq, dh, Eigen::OuterStride<>(d));
            detail::ConstStridedMap<T> Q(pq.data.data() + qoff, Tq, dh, Eigen::OuterStride<>(d));
            detail::ConstStridedMap<T> K(pk.data.data() + koff, Tk, dh, Eigen::OuterStride<>(d));
            detail::ConstStridedMap<T> V(pv.data.data() + koff, Tk, dh, Eigen::OuterStride<>(d));
            detail::ConstMatMap<T> P(probs.data() + ((b * H + h) * Tq) * Tk, Tq, Tk);
            detail::StridedMap<T> dV(gv.data() + koff, Tk, dh, Eigen::OuterStride<>(d));
            dV.noalias() += P.transpose() * dO;
            dP.noalias() = dO * V.transpose();
            for (Index i = 0; i < Tq; ++i) {
              // Plain loop: Eigen's vectorised dot peels by address, which makes the sum order vary.
              T dot = 0;
              for (Index j = 0; j < Tk; ++j) dot += P(i, j) * dP(i, j);
              dS.row(i) = (P.row(i).array() * (dP.row(i).array() - dot)).matrix() * inv_sqrt;
            }
            detail::StridedMap<T> dQ(gq.data() + qoff, Tq, dh, Eigen::OuterStride<>(d));
            detail::StridedMap<T> dK(gk.data() + koff, Tk, dh, Eigen::OuterStride<>(d));
            dQ.noalias() += dS * K;
            dK.noalias() += dS.transpose() * Q;
          }
        }
      });
}

/// Row-wise argmax of a [rows x cols] tensor; ties go to the lowest index.
template <class T>
std::vector<Index> argmax_rows(const Tensor<T>& x) {
  const Index cols = x.dim(-1);
  std::vector<Index> out(static_cast<std::size_t>(x.rows()));
  for (Index r = 0; r < x.rows(); ++r) {
    const T* row = x.values().data() + r * cols;
    out[static_cast<std::size_t>(r)] = std::max_element(row, row + cols) - row;
  }
  return out;
}

}  // namespace vtlm
