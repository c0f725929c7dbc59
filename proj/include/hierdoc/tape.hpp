#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "hierdoc/errors.hpp"
#include "hierdoc/rng.hpp"
#include "hierdoc/tensor.hpp"

namespace hierdoc {

namespace detail {

// Accumulating matmul kernels, fixed ikj/accumulation order so results are
// reproducible bit-for-bit across reruns.
template <typename T>
void mm_nn_acc(T* c, const T* a, const T* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    T* crow = c + static_cast<size_t>(i) * n;
    const T* arow = a + static_cast<size_t>(i) * k;
    for (int p = 0; p < k; ++p) {
      const T av = arow[p];
      const T* brow = b + static_cast<size_t>(p) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

// c[m,n] += a[m,k] · b[n,k]ᵀ
template <typename T>
void mm_nt_acc(T* c, const T* a, const T* b, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const T* arow = a + static_cast<size_t>(i) * k;
    T* crow = c + static_cast<size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const T* brow = b + static_cast<size_t>(j) * k;
      T acc = T(0);
      for (int p = 0; p < k; ++p) acc += arow[p] * brow[p];
      crow[j] += acc;
    }
  }
}

// c[m,n] += a[k,m]ᵀ · b[k,n]
template <typename T>
void mm_tn_acc(T* c, const T* a, const T* b, int m, int k, int n) {
  for (int p = 0; p < k; ++p) {
    const T* arow = a + static_cast<size_t>(p) * m;
    const T* brow = b + static_cast<size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const T av = arow[i];
      T* crow = c + static_cast<size_t>(i) * n;
      for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}

template <typename T>
T gelu_value(T x) {
  // Exact GELU, x·Φ(x) with the Gaussian CDF.
  return T(0.5) * x * (T(1) + std::erf(x * T(0.7071067811865475)));
}

template <typename T>
T gelu_derivative(T x) {
  const T phi = T(0.3989422804014327) * std::exp(T(-0.5) * x * x);
  const T Phi = T(0.5) * (T(1) + std::erf(x * T(0.7071067811865475)));
  return Phi + x * phi;
}

}  // namespace detail

// Reverse-mode autodiff tape. Operations append nodes in execution order,
// which is already a topological order; backward() replays the node list in
// reverse exactly once. A tape is single-writer and single-shot: after
// backward() it must be reset() before recording again.
//
// Leaf tensors (requires_grad, not produced by this tape) receive their
// gradient in Tensor::grad; intermediate gradients live in per-node
// accumulators owned by the tape.
template <typename T>
class Tape {
 public:
  explicit Tape(bool recording = true)
      : recording_(recording), id_(next_id()) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool recording() const { return recording_; }
  size_t size() const { return nodes_.size(); }

  bool tracked(const Tensor<T>& t) const {
    return t.tape_id == id_ && t.node >= 0;
  }

  // ---- arithmetic ----

  Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "add");
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + b.at(i);
    const int na = ensure_tracked(a), nb = ensure_tracked(b);
    if (na >= 0 || nb >= 0)
      record(out, [na, nb](Tape& tp, const std::vector<T>& g) {
        if (na >= 0) tp.add_into(na, g);
        if (nb >= 0) tp.add_into(nb, g);
      });
    return out;
  }

  Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "sub");
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) - b.at(i);
    const int na = ensure_tracked(a), nb = ensure_tracked(b);
    if (na >= 0 || nb >= 0)
      record(out, [na, nb](Tape& tp, const std::vector<T>& g) {
        if (na >= 0) tp.add_into(na, g);
        if (nb >= 0) {
          auto& acc = tp.accum(nb);
          for (size_t i = 0; i < g.size(); ++i) acc[i] -= g[i];
        }
      });
    return out;
  }

  Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    require_same_shape(a, b, "mul");
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * b.at(i);
    const int na = ensure_tracked(a), nb = ensure_tracked(b);
    if (na >= 0 || nb >= 0)
      record(out, [a, b, na, nb](Tape& tp, const std::vector<T>& g) {
        if (na >= 0) {
          auto& acc = tp.accum(na);
          for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * b.at(i);
        }
        if (nb >= 0) {
          auto& acc = tp.accum(nb);
          for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * a.at(i);
        }
      });
    return out;
  }

  Tensor<T> scale(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) * c;
    const int na = ensure_tracked(a);
    if (na >= 0)
      record(out, [na, c](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(na);
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * c;
      });
    return out;
  }

  Tensor<T> add_scalar(const Tensor<T>& a, T c) {
    Tensor<T> out = Tensor<T>::zeros(a.shape);
    const size_t n = out.numel();
    for (size_t i = 0; i < n; ++i) out.at(i) = a.at(i) + c;
    const int na = ensure_tracked(a);
    if (na >= 0)
      record(out, [na](Tape& tp, const std::vector<T>& g) {
        tp.add_into(na, g);
      });
    return out;
  }

  // x[n,d] + row vector b[d]
  Tensor<T> add_rowvec(const Tensor<T>& x, const Tensor<T>& b) {
    require_matrix(x, "add_rowvec");
    const int n = x.shape[0], d = x.shape[1];
    if (static_cast<int>(b.numel()) != d)
      throw ContractError("add_rowvec: vector length " +
                          std::to_string(b.numel()) + " vs width " +
                          std::to_string(d));
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) + b.at(j);
    const int nx = ensure_tracked(x), nb = ensure_tracked(b);
    if (nx >= 0 || nb >= 0)
      record(out, [nx, nb, n, d](Tape& tp, const std::vector<T>& g) {
        if (nx >= 0) tp.add_into(nx, g);
        if (nb >= 0) {
          auto& acc = tp.accum(nb);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              acc[j] += g[static_cast<size_t>(i) * d + j];
        }
      });
    return out;
  }

  // Scale row i of x by c[i]; c is [n] or [n,1].
  Tensor<T> mul_colvec(const Tensor<T>& x, const Tensor<T>& c) {
    require_matrix(x, "mul_colvec");
    const int n = x.shape[0], d = x.shape[1];
    if (static_cast<int>(c.numel()) != n)
      throw ContractError("mul_colvec: scaler length " +
                          std::to_string(c.numel()) + " vs rows " +
                          std::to_string(n));
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) * c.at(i);
    const int nx = ensure_tracked(x), nc = ensure_tracked(c);
    if (nx >= 0 || nc >= 0)
      record(out, [x, c, nx, nc, n, d](Tape& tp, const std::vector<T>& g) {
        if (nx >= 0) {
          auto& acc = tp.accum(nx);
          for (int i = 0; i < n; ++i)
            for (int j = 0; j < d; ++j)
              acc[static_cast<size_t>(i) * d + j] +=
                  g[static_cast<size_t>(i) * d + j] * c.at(i);
        }
        if (nc >= 0) {
          auto& acc = tp.accum(nc);
          for (int i = 0; i < n; ++i) {
            T s = T(0);
            for (int j = 0; j < d; ++j)
              s += g[static_cast<size_t>(i) * d + j] * x.at(i, j);
            acc[i] += s;
          }
        }
      });
    return out;
  }

  // ---- matrix products ----

  Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.shape[1] != b.shape[0])
      throw ContractError("matmul: inner dimensions differ, " +
                          Tensor<T>::shape_str(a.shape) + " x " +
                          Tensor<T>::shape_str(b.shape));
    const int m = a.shape[0], k = a.shape[1], n = b.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::mm_nn_acc(out.ptr(), a.ptr(), b.ptr(), m, k, n);
    const int na = ensure_tracked(a), nb = ensure_tracked(b);
    if (na >= 0 || nb >= 0)
      record(out, [a, b, na, nb, m, k, n](Tape& tp, const std::vector<T>& g) {
        // dA = g·Bᵀ, dB = Aᵀ·g
        if (na >= 0)
          detail::mm_nt_acc(tp.accum(na).data(), g.data(), b.ptr(), m, n, k);
        if (nb >= 0)
          detail::mm_tn_acc(tp.accum(nb).data(), a.ptr(), g.data(), k, m, n);
      });
    return out;
  }

  // a[m,k] · b[n,k]ᵀ -> [m,n]
  Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.shape[1] != b.shape[1])
      throw ContractError("matmul_nt: inner dimensions differ, " +
                          Tensor<T>::shape_str(a.shape) + " x " +
                          Tensor<T>::shape_str(b.shape) + "^T");
    const int m = a.shape[0], k = a.shape[1], n = b.shape[0];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::mm_nt_acc(out.ptr(), a.ptr(), b.ptr(), m, k, n);
    const int na = ensure_tracked(a), nb = ensure_tracked(b);
    if (na >= 0 || nb >= 0)
      record(out, [a, b, na, nb, m, k, n](Tape& tp, const std::vector<T>& g) {
        // dA = g·B, dB = gᵀ·A
        if (na >= 0)
          detail::mm_nn_acc(tp.accum(na).data(), g.data(), b.ptr(), m, n, k);
        if (nb >= 0)
          detail::mm_tn_acc(tp.accum(nb).data(), g.data(), a.ptr(), n, m, k);
      });
    return out;
  }

  // a[k,m]ᵀ · b[k,n] -> [m,n]
  Tensor<T> matmul_tn(const Tensor<T>& a, const Tensor<T>& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.shape[0] != b.shape[0])
      throw ContractError("matmul_tn: inner dimensions differ, " +
                          Tensor<T>::shape_str(a.shape) + "^T x " +
                          Tensor<T>::shape_str(b.shape));
    const int k = a.shape[0], m = a.shape[1], n = b.shape[1];
    Tensor<T> out = Tensor<T>::zeros({m, n});
    detail::mm_tn_acc(out.ptr(), a.ptr(), b.ptr(), m, k, n);
    const int na = ensure_tracked(a), nb = ensure_tracked(b);
    if (na >= 0 || nb >= 0)
      record(out, [a, b, na, nb, m, k, n](Tape& tp, const std::vector<T>& g) {
        // dA = B · gᵀ -> [k,m]
        if (na >= 0)
          detail::mm_nt_acc(tp.accum(na).data(), b.ptr(), g.data(), k, n, m);
        if (nb >= 0)
          detail::mm_nn_acc(tp.accum(nb).data(), a.ptr(), g.data(), k, m, n);
      });
    return out;
  }

  // ---- gather / scatter / layout ----

  // Row gather; the embedding lookup. Backward scatters into the table.
  Tensor<T> gather_rows(const Tensor<T>& x, const std::vector<int>& ids) {
    require_matrix(x, "gather_rows");
    const int v = x.shape[0], d = x.shape[1];
    for (int id : ids)
      if (id < 0 || id >= v)
        throw ContractError("gather_rows: id " + std::to_string(id) +
                            " outside [0, " + std::to_string(v) + ")");
    if (ids.empty()) throw ContractError("gather_rows: empty id list");
    Tensor<T> out = Tensor<T>::zeros({static_cast<int>(ids.size()), d});
    for (size_t i = 0; i < ids.size(); ++i)
      std::copy_n(x.ptr() + static_cast<size_t>(ids[i]) * d, d,
                  out.ptr() + i * d);
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, ids, d](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t i = 0; i < ids.size(); ++i)
          for (int j = 0; j < d; ++j)
            acc[static_cast<size_t>(ids[i]) * d + j] += g[i * d + j];
      });
    return out;
  }

  // out[n_rows, d], out[ids[i], :] += rows[i, :]. Transpose of gather_rows.
  Tensor<T> scatter_rows(int n_rows, const std::vector<int>& ids,
                         const Tensor<T>& rows) {
    require_matrix(rows, "scatter_rows");
    if (static_cast<int>(ids.size()) != rows.shape[0])
      throw ContractError("scatter_rows: id count mismatch");
    const int d = rows.shape[1];
    for (int id : ids)
      if (id < 0 || id >= n_rows)
        throw ContractError("scatter_rows: id " + std::to_string(id) +
                            " outside [0, " + std::to_string(n_rows) + ")");
    Tensor<T> out = Tensor<T>::zeros({n_rows, d});
    for (size_t i = 0; i < ids.size(); ++i)
      for (int j = 0; j < d; ++j)
        out.at(ids[i], j) += rows.at(static_cast<int>(i), j);
    const int nr = ensure_tracked(rows);
    if (nr >= 0)
      record(out, [nr, ids, d](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nr);
        for (size_t i = 0; i < ids.size(); ++i)
          for (int j = 0; j < d; ++j)
            acc[i * d + j] += g[static_cast<size_t>(ids[i]) * d + j];
      });
    return out;
  }

  Tensor<T> slice_cols(const Tensor<T>& x, int j0, int width) {
    require_matrix(x, "slice_cols");
    const int n = x.shape[0], d = x.shape[1];
    if (j0 < 0 || width <= 0 || j0 + width > d)
      throw ContractError("slice_cols: [" + std::to_string(j0) + ", " +
                          std::to_string(j0 + width) + ") outside width " +
                          std::to_string(d));
    Tensor<T> out = Tensor<T>::zeros({n, width});
    for (int i = 0; i < n; ++i)
      std::copy_n(x.ptr() + static_cast<size_t>(i) * d + j0, width,
                  out.ptr() + static_cast<size_t>(i) * width);
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, j0, width, n, d](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < width; ++j)
            acc[static_cast<size_t>(i) * d + j0 + j] +=
                g[static_cast<size_t>(i) * width + j];
      });
    return out;
  }

  Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_rows: no parts");
    int d = parts[0].cols(), total = 0;
    for (const auto& p : parts) {
      require_matrix(p, "concat_rows");
      if (p.shape[1] != d)
        throw ContractError("concat_rows: width mismatch");
      total += p.shape[0];
    }
    Tensor<T> out = Tensor<T>::zeros({total, d});
    int row = 0;
    std::vector<int> part_nodes(parts.size());
    std::vector<int> part_rows(parts.size());
    bool any = false;
    for (size_t i = 0; i < parts.size(); ++i) {
      std::copy_n(parts[i].ptr(), parts[i].numel(),
                  out.ptr() + static_cast<size_t>(row) * d);
      row += parts[i].shape[0];
      part_rows[i] = parts[i].shape[0];
      part_nodes[i] = ensure_tracked(parts[i]);
      any = any || part_nodes[i] >= 0;
    }
    if (any)
      record(out,
             [part_nodes, part_rows, d](Tape& tp, const std::vector<T>& g) {
               size_t off = 0;
               for (size_t i = 0; i < part_nodes.size(); ++i) {
                 const size_t n = static_cast<size_t>(part_rows[i]) * d;
                 if (part_nodes[i] >= 0) {
                   auto& acc = tp.accum(part_nodes[i]);
                   for (size_t j = 0; j < n; ++j) acc[j] += g[off + j];
                 }
                 off += n;
               }
             });
    return out;
  }

  // ---- reductions ----

  Tensor<T> sum_all(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros({1});
    T s = T(0);
    for (size_t i = 0; i < x.numel(); ++i) s += x.at(i);
    out.at(size_t{0}) = s;
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, n = x.numel()](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t i = 0; i < n; ++i) acc[i] += g[0];
      });
    return out;
  }

  Tensor<T> mean_all(const Tensor<T>& x) {
    const T inv = T(1) / static_cast<T>(x.numel());
    return scale(sum_all(x), inv);
  }

  // Row sums: x[n,k] -> [n,1]
  Tensor<T> sum_rows(const Tensor<T>& x) {
    require_matrix(x, "sum_rows");
    const int n = x.shape[0], k = x.shape[1];
    Tensor<T> out = Tensor<T>::zeros({n, 1});
    for (int i = 0; i < n; ++i) {
      T s = T(0);
      for (int j = 0; j < k; ++j) s += x.at(i, j);
      out.at(i, 0) = s;
    }
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, n, k](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < k; ++j)
            acc[static_cast<size_t>(i) * k + j] += g[i];
      });
    return out;
  }

  // ---- nonlinearities ----

  Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    if (x.shape.empty()) throw ContractError("softmax: undefined tensor");
    const int rank = static_cast<int>(x.shape.size());
    if (axis < 0) axis += rank;
    if (axis < 0 || axis >= rank) throw ContractError("softmax: bad axis");
    const int n = x.shape[axis];
    size_t inner = 1, outer = 1;
    for (int i = axis + 1; i < rank; ++i) inner *= x.shape[i];
    for (int i = 0; i < axis; ++i) outer *= x.shape[i];

    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (size_t o = 0; o < outer; ++o)
      for (size_t in = 0; in < inner; ++in) {
        const size_t base = o * n * inner + in;
        T mx = x.at(base);
        for (int j = 1; j < n; ++j)
          mx = std::max(mx, x.at(base + j * inner));
        T denom = T(0);
        for (int j = 0; j < n; ++j) {
          const T e = std::exp(x.at(base + j * inner) - mx);
          out.at(base + j * inner) = e;
          denom += e;
        }
        for (int j = 0; j < n; ++j) out.at(base + j * inner) /= denom;
      }
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, out, n, inner, outer](Tape& tp,
                                             const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t o = 0; o < outer; ++o)
          for (size_t in = 0; in < inner; ++in) {
            const size_t base = o * n * inner + in;
            T dot = T(0);
            for (int j = 0; j < n; ++j)
              dot += g[base + j * inner] * out.at(base + j * inner);
            for (int j = 0; j < n; ++j)
              acc[base + j * inner] += out.at(base + j * inner) *
                                       (g[base + j * inner] - dot);
          }
      });
    return out;
  }

  Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain,
                       const Tensor<T>& bias, T eps) {
    if (eps <= T(0)) throw ContractError("layer_norm: eps must be positive");
    const int d = x.shape.back();
    if (static_cast<int>(gain.numel()) != d ||
        static_cast<int>(bias.numel()) != d)
      throw ContractError("layer_norm: gain/bias length mismatch");
    const size_t rows = x.numel() / d;
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    auto xhat = std::make_shared<std::vector<T>>(x.numel());
    auto rstd = std::make_shared<std::vector<T>>(rows);
    for (size_t r = 0; r < rows; ++r) {
      const size_t base = r * d;
      T mean = T(0);
      for (int j = 0; j < d; ++j) mean += x.at(base + j);
      mean /= static_cast<T>(d);
      T var = T(0);
      for (int j = 0; j < d; ++j) {
        const T c = x.at(base + j) - mean;
        var += c * c;
      }
      var /= static_cast<T>(d);
      const T rs = T(1) / std::sqrt(var + eps);
      (*rstd)[r] = rs;
      for (int j = 0; j < d; ++j) {
        const T xh = (x.at(base + j) - mean) * rs;
        (*xhat)[base + j] = xh;
        out.at(base + j) = xh * gain.at(j) + bias.at(j);
      }
    }
    const int nx = ensure_tracked(x);
    const int ng = ensure_tracked(gain);
    const int nb = ensure_tracked(bias);
    if (nx >= 0 || ng >= 0 || nb >= 0)
      record(out, [nx, ng, nb, gain, xhat, rstd, rows, d](
                      Tape& tp, const std::vector<T>& g) {
        if (ng >= 0) {
          auto& acc = tp.accum(ng);
          for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j)
              acc[j] += g[r * d + j] * (*xhat)[r * d + j];
        }
        if (nb >= 0) {
          auto& acc = tp.accum(nb);
          for (size_t r = 0; r < rows; ++r)
            for (int j = 0; j < d; ++j) acc[j] += g[r * d + j];
        }
        if (nx >= 0) {
          auto& acc = tp.accum(nx);
          for (size_t r = 0; r < rows; ++r) {
            const size_t base = r * d;
            T mean_dxh = T(0), mean_dxh_xh = T(0);
            for (int j = 0; j < d; ++j) {
              const T dxh = g[base + j] * gain.at(j);
              mean_dxh += dxh;
              mean_dxh_xh += dxh * (*xhat)[base + j];
            }
            mean_dxh /= static_cast<T>(d);
            mean_dxh_xh /= static_cast<T>(d);
            for (int j = 0; j < d; ++j) {
              const T dxh = g[base + j] * gain.at(j);
              acc[base + j] += (*rstd)[r] * (dxh - mean_dxh -
                                             (*xhat)[base + j] * mean_dxh_xh);
            }
          }
        }
      });
    return out;
  }

  Tensor<T> gelu(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (size_t i = 0; i < x.numel(); ++i)
      out.at(i) = detail::gelu_value(x.at(i));
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, x](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t i = 0; i < g.size(); ++i)
          acc[i] += g[i] * detail::gelu_derivative(x.at(i));
      });
    return out;
  }

  Tensor<T> sigmoid(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (size_t i = 0; i < x.numel(); ++i) {
      const T v = x.at(i);
      out.at(i) = v >= T(0) ? T(1) / (T(1) + std::exp(-v))
                            : std::exp(v) / (T(1) + std::exp(v));
    }
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, out](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t i = 0; i < g.size(); ++i) {
          const T s = out.at(i);
          acc[i] += g[i] * s * (T(1) - s);
        }
      });
    return out;
  }

  Tensor<T> exp(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (size_t i = 0; i < x.numel(); ++i) out.at(i) = std::exp(x.at(i));
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, out](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * out.at(i);
      });
    return out;
  }

  Tensor<T> log(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (size_t i = 0; i < x.numel(); ++i) out.at(i) = std::log(x.at(i));
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, x](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] / x.at(i);
      });
    return out;
  }

  Tensor<T> abs(const Tensor<T>& x) {
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (size_t i = 0; i < x.numel(); ++i) out.at(i) = std::abs(x.at(i));
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, x](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t i = 0; i < g.size(); ++i) {
          const T v = x.at(i);
          acc[i] += v > T(0) ? g[i] : (v < T(0) ? -g[i] : T(0));
        }
      });
    return out;
  }

  // Row-wise L2 normalization (shared-QK convention).
  Tensor<T> unit_rows(const Tensor<T>& x) {
    require_matrix(x, "unit_rows");
    const int n = x.shape[0], d = x.shape[1];
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    auto norms = std::make_shared<std::vector<T>>(n);
    for (int i = 0; i < n; ++i) {
      T s = T(0);
      for (int j = 0; j < d; ++j) s += x.at(i, j) * x.at(i, j);
      const T r = std::sqrt(std::max(s, T(1e-24)));
      (*norms)[i] = r;
      for (int j = 0; j < d; ++j) out.at(i, j) = x.at(i, j) / r;
    }
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, out, norms, n, d](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (int i = 0; i < n; ++i) {
          T dot = T(0);
          for (int j = 0; j < d; ++j)
            dot += g[static_cast<size_t>(i) * d + j] * out.at(i, j);
          for (int j = 0; j < d; ++j)
            acc[static_cast<size_t>(i) * d + j] +=
                (g[static_cast<size_t>(i) * d + j] - out.at(i, j) * dot) /
                (*norms)[i];
        }
      });
    return out;
  }

  // Inverted dropout; the mask is drawn from the stream at call time, so a
  // recompute with an identically derived stream reproduces it bit-exactly.
  Tensor<T> dropout(const Tensor<T>& x, double rate, RngStream& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ContractError("dropout: rate must be < 1");
    auto mask = std::make_shared<std::vector<T>>(x.numel());
    const T keep_scale = T(1.0 / (1.0 - rate));
    for (auto& m : *mask) m = rng.uniform() < rate ? T(0) : keep_scale;
    Tensor<T> out = Tensor<T>::zeros(x.shape);
    for (size_t i = 0; i < x.numel(); ++i) out.at(i) = x.at(i) * (*mask)[i];
    const int nx = ensure_tracked(x);
    if (nx >= 0)
      record(out, [nx, mask](Tape& tp, const std::vector<T>& g) {
        auto& acc = tp.accum(nx);
        for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i] * (*mask)[i];
      });
    return out;
  }

  // ---- losses ----

  // Mean over rows of -log softmax(logits)[target].
  Tensor<T> cross_entropy(const Tensor<T>& logits,
                          const std::vector<int>& targets) {
    require_matrix(logits, "cross_entropy");
    const int n = logits.shape[0], v = logits.shape[1];
    if (static_cast<int>(targets.size()) != n)
      throw ContractError("cross_entropy: " + std::to_string(targets.size()) +
                          " targets for " + std::to_string(n) + " rows");
    for (int t : targets)
      if (t < 0 || t >= v)
        throw ContractError("cross_entropy: target id " + std::to_string(t) +
                            " outside [0, " + std::to_string(v) + ")");
    auto probs = std::make_shared<std::vector<T>>(logits.numel());
    T loss = T(0);
    for (int i = 0; i < n; ++i) {
      const size_t base = static_cast<size_t>(i) * v;
      T mx = logits.at(base);
      for (int j = 1; j < v; ++j) mx = std::max(mx, logits.at(base + j));
      T denom = T(0);
      for (int j = 0; j < v; ++j) {
        const T e = std::exp(logits.at(base + j) - mx);
        (*probs)[base + j] = e;
        denom += e;
      }
      for (int j = 0; j < v; ++j) (*probs)[base + j] /= denom;
      loss -= std::log((*probs)[base + targets[i]]);
    }
    loss /= static_cast<T>(n);
    Tensor<T> out = Tensor<T>::from({1}, {loss});
    const int nl = ensure_tracked(logits);
    if (nl >= 0)
      record(out, [nl, probs, targets, n, v](Tape& tp,
                                             const std::vector<T>& g) {
        auto& acc = tp.accum(nl);
        const T inv_n = T(1) / static_cast<T>(n);
        for (int i = 0; i < n; ++i) {
          const size_t base = static_cast<size_t>(i) * v;
          for (int j = 0; j < v; ++j)
            acc[base + j] += g[0] * inv_n *
                             ((*probs)[base + j] -
                              (j == targets[i] ? T(1) : T(0)));
        }
      });
    return out;
  }

  // p is a probability scalar; clamped to [eps, 1-eps] before the logs.
  Tensor<T> binary_cross_entropy(const Tensor<T>& p, int y,
                                 T eps = T(1e-7)) {
    if (p.numel() != 1)
      throw ContractError("binary_cross_entropy: p must be scalar");
    if (y != 0 && y != 1)
      throw ContractError("binary_cross_entropy: label must be 0 or 1");
    const T raw = p.at(size_t{0});
    const T ph = std::min(std::max(raw, eps), T(1) - eps);
    const T loss = -(y == 1 ? std::log(ph) : std::log(T(1) - ph));
    Tensor<T> out = Tensor<T>::from({1}, {loss});
    const int np = ensure_tracked(p);
    if (np >= 0) {
      const bool clamped = raw < eps || raw > T(1) - eps;
      record(out, [np, ph, y, clamped](Tape& tp, const std::vector<T>& g) {
        if (clamped) return;  // flat region of the clamp
        tp.accum(np)[0] += g[0] * (ph - static_cast<T>(y)) /
                           (ph * (T(1) - ph));
      });
    }
    return out;
  }

  // ---- custom nodes ----

  // Appends a node whose backward is supplied by the caller. `inputs` are
  // registered first so the closure can push gradients into them via
  // accum(); gradients of other leaves may be written straight into their
  // Tensor::grad buffers. Used by the memory-free reversible stack.
  Tensor<T> custom(const std::vector<Tensor<T>>& inputs, Tensor<T> out,
                   std::function<void(Tape&, const std::vector<T>&,
                                      const std::vector<int>&)>
                       back) {
    std::vector<int> input_nodes;
    input_nodes.reserve(inputs.size());
    bool any = false;
    for (const auto& in : inputs) {
      input_nodes.push_back(ensure_tracked(in));
      any = any || input_nodes.back() >= 0;
    }
    if (any || always_record_custom_)
      record(out, [back = std::move(back), input_nodes](
                      Tape& tp, const std::vector<T>& g) {
        back(tp, g, input_nodes);
      });
    return out;
  }

  // Custom nodes are normally skipped when no input is tracked; parameter
  // gradients inside them still matter during training, so training tapes
  // set this.
  void set_always_record_custom(bool b) { always_record_custom_ = b; }

  // ---- backward ----

  void backward(const Tensor<T>& out) {
    if (out.numel() != 1)
      throw ContractError("backward: loss must be scalar, got " +
                          Tensor<T>::shape_str(out.shape));
    backward(out, std::vector<T>{T(1)});
  }

  void backward(const Tensor<T>& out, std::vector<T> seed) {
    if (!recording_)
      throw ContractError("backward: tape is not recording");
    if (finished_)
      throw ContractError("backward: tape already used; reset() first");
    if (!tracked(out))
      throw ContractError("backward: output was not produced by this tape");
    if (seed.size() != out.numel())
      throw ContractError("backward: seed size mismatch");
    finished_ = true;
    grads_.resize(nodes_.size());
    grads_[out.node] = std::move(seed);
    for (int i = out.node; i >= 0; --i) {
      if (grads_[i].empty()) continue;
      Node& nd = nodes_[i];
      if (nd.back) {
        nd.back(*this, grads_[i]);
      } else if (nd.leaf_sink) {
        auto& sink = *nd.leaf_sink;
        for (size_t j = 0; j < grads_[i].size(); ++j)
          sink[j] += grads_[i][j];
      }
      grads_[i].clear();
      grads_[i].shrink_to_fit();
    }
  }

  // Tape-local accumulated gradient of a tracked tensor (valid only while
  // its node has not been consumed by the reverse sweep; intended for leaf
  // inspection right after backward or inside custom backward closures).
  std::vector<T>& accum(int node) {
    if (node < 0 || node >= static_cast<int>(nodes_.size()))
      throw ContractError("accum: bad node id");
    if (grads_.size() < nodes_.size()) grads_.resize(nodes_.size());
    if (grads_[node].empty()) grads_[node].assign(nodes_[node].out_numel, T(0));
    return grads_[node];
  }

  void add_into(int node, const std::vector<T>& g) {
    auto& acc = accum(node);
    for (size_t i = 0; i < g.size(); ++i) acc[i] += g[i];
  }

  void reset() {
    nodes_.clear();
    grads_.clear();
    finished_ = false;
    id_ = next_id();
  }

 private:
  struct Node {
    std::function<void(Tape&, const std::vector<T>&)> back;
    std::shared_ptr<std::vector<T>> leaf_sink;
    size_t out_numel = 0;
  };

  static uint64_t next_id() {
    static std::atomic<uint64_t> counter{1};
    return counter.fetch_add(1);
  }

  static void require_same_shape(const Tensor<T>& a, const Tensor<T>& b,
                                 const char* op) {
    if (a.shape != b.shape)
      throw ContractError(std::string(op) + ": shape mismatch " +
                          Tensor<T>::shape_str(a.shape) + " vs " +
                          Tensor<T>::shape_str(b.shape));
  }

  static void require_matrix(const Tensor<T>& t, const char* op) {
    if (t.shape.size() != 2)
      throw ContractError(std::string(op) + ": expected a matrix, got " +
                          Tensor<T>::shape_str(t.shape));
  }

  // Returns the node id of t on this tape, registering a leaf if t requires
  // gradients and has not been seen yet. Constants return -1.
  int ensure_tracked(const Tensor<T>& t) {
    if (!recording_) return -1;
    if (t.tape_id == id_) return t.node;
    if (!t.requires_grad) return -1;
    if (!t.grad)
      t.grad = std::make_shared<std::vector<T>>(t.numel(), T(0));
    Node nd;
    nd.leaf_sink = t.grad;
    nd.out_numel = t.numel();
    nodes_.push_back(std::move(nd));
    t.tape_id = id_;
    t.node = static_cast<int32_t>(nodes_.size() - 1);
    return t.node;
  }

  template <typename Back>
  void record(Tensor<T>& out, Back&& back) {
    if (!recording_) return;
    if (finished_)
      throw ContractError("tape already used for backward; reset() first");
    Node nd;
    nd.back = std::forward<Back>(back);
    nd.out_numel = out.numel();
    nodes_.push_back(std::move(nd));
    out.tape_id = id_;
    out.node = static_cast<int32_t>(nodes_.size() - 1);
    out.requires_grad = true;
  }

  bool recording_;
  bool finished_ = false;
  bool always_record_custom_ = false;
  uint64_t id_;
  std::vector<Node> nodes_;
  std::vector<std::vector<T>> grads_;
};

}  // namespace hierdoc
