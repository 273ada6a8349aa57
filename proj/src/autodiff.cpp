#include "rvit/autodiff.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

namespace rvit::nk {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;

thread_local std::uint64_t g_matmul_flops = 0;

Tape& tape_of(Var a, Var b) {
  if (a.tape == nullptr || a.tape != b.tape) {
    throw Error("operands recorded on different tapes");
  }
  return *a.tape;
}

Tape& tape_of(Var a) {
  if (a.tape == nullptr) throw Error("variable is not attached to a tape");
  return *a.tape;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                     " vs " + shape_str(b.shape()));
  }
}

std::size_t last_extent(const Tensor& t) {
  if (t.rank() == 0) throw ShapeError("expected a tensor of rank >= 1");
  return t.shape().back();
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }

const Tensor& Var::grad() const { return tape->grad(id); }

Var Tape::constant(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), false, nullptr});
  return Var{this, nodes_.size() - 1};
}

Var Tape::leaf(Tensor value) {
  nodes_.push_back(Node{std::move(value), Tensor(), true, nullptr});
  return Var{this, nodes_.size() - 1};
}

Tensor& Tape::grad_slot(std::size_t id) {
  Node& node = nodes_[id];
  if (node.grad.empty() && !node.value.empty()) node.grad = Tensor::zeros_like(node.value);
  return node.grad;
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, Backward backward) {
  bool needs = false;
  for (const Var& v : inputs) {
    if (v.tape != this) throw Error("operand recorded on a different tape");
    needs = needs || nodes_[v.id].needs_grad;
  }
  nodes_.push_back(Node{std::move(value), Tensor(), needs, needs ? std::move(backward) : nullptr});
  return Var{this, nodes_.size() - 1};
}

void Tape::backward(Var out) {
  if (out.tape != this) throw Error("backward: output belongs to a different tape");
  if (nodes_[out.id].value.size() != 1) {
    throw ShapeError("backward: output must hold a single element, got " +
                     shape_str(nodes_[out.id].value.shape()));
  }
  for (auto& node : nodes_) node.grad = Tensor();
  grad_slot(out.id)[0] = 1.0;
  for (std::size_t i = out.id + 1; i-- > 0;) {
    Node& node = nodes_[i];
    if (node.backward && !node.grad.empty()) node.backward(*this);
  }
}

std::uint64_t matmul_flops() { return g_matmul_flops; }
void reset_matmul_flops() { g_matmul_flops = 0; }

Var matmul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  MapMat(out.ptr(), m, n).noalias() = ConstMapMat(av.ptr(), m, k) * ConstMapMat(bv.ptr(), k, n);
  g_matmul_flops += 2ull * m * n * k;
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {a, b}, [a, b, self, m, k, n](Tape& t) {
    ConstMapMat dc(t.grad(self).ptr(), m, n);
    if (t.needs_grad(a.id)) {
      MapMat(t.grad_slot(a.id).ptr(), m, k).noalias() +=
          dc * ConstMapMat(t.value(b.id).ptr(), k, n).transpose();
    }
    if (t.needs_grad(b.id)) {
      MapMat(t.grad_slot(b.id).ptr(), k, n).noalias() +=
          ConstMapMat(t.value(a.id).ptr(), m, k).transpose() * dc;
    }
  });
}

Var batched_matmul(Var a, Var b, bool transpose_b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 3 || bv.rank() != 3 || av.dim(0) != bv.dim(0)) {
    throw ShapeError("batched_matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  const std::size_t g = av.dim(0), m = av.dim(1), k = av.dim(2);
  const std::size_t bk = transpose_b ? bv.dim(2) : bv.dim(1);
  const std::size_t n = transpose_b ? bv.dim(1) : bv.dim(2);
  if (bk != k) {
    throw ShapeError("batched_matmul: inner extents differ " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  Tensor out({g, m, n});
  const std::size_t bstride = k * n;
  for (std::size_t i = 0; i < g; ++i) {
    ConstMapMat ai(av.ptr() + i * m * k, m, k);
    MapMat oi(out.ptr() + i * m * n, m, n);
    if (transpose_b) {
      oi.noalias() = ai * ConstMapMat(bv.ptr() + i * bstride, n, k).transpose();
    } else {
      oi.noalias() = ai * ConstMapMat(bv.ptr() + i * bstride, k, n);
    }
  }
  g_matmul_flops += 2ull * g * m * n * k;
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {a, b}, [=](Tape& t) {
    const Tensor& dc = t.grad(self);
    const bool ga = t.needs_grad(a.id), gb = t.needs_grad(b.id);
    double* da = ga ? t.grad_slot(a.id).ptr() : nullptr;
    double* db = gb ? t.grad_slot(b.id).ptr() : nullptr;
    const double* ap = t.value(a.id).ptr();
    const double* bp = t.value(b.id).ptr();
    for (std::size_t i = 0; i < g; ++i) {
      ConstMapMat dci(dc.ptr() + i * m * n, m, n);
      if (transpose_b) {
        // C = A B^T with B stored [n,k].
        if (ga) MapMat(da + i * m * k, m, k).noalias() += dci * ConstMapMat(bp + i * bstride, n, k);
        if (gb) {
          MapMat(db + i * bstride, n, k).noalias() +=
              dci.transpose() * ConstMapMat(ap + i * m * k, m, k);
        }
      } else {
        if (ga) {
          MapMat(da + i * m * k, m, k).noalias() +=
              dci * ConstMapMat(bp + i * bstride, k, n).transpose();
        }
        if (gb) {
          MapMat(db + i * bstride, k, n).noalias() +=
              ConstMapMat(ap + i * m * k, m, k).transpose() * dci;
        }
      }
    }
  });
}

Var add(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {a, b}, [a, b, self](Tape& t) {
    const Tensor& g = t.grad(self);
    for (Var v : {a, b}) {
      if (!t.needs_grad(v.id)) continue;
      Tensor& dv = t.grad_slot(v.id);
      for (std::size_t i = 0; i < g.size(); ++i) dv[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  const Tensor& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {a, b}, [a, b, self](Tape& t) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a.id)) {
      Tensor& da = t.grad_slot(a.id);
      const Tensor& bv = t.value(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) da[i] += g[i] * bv[i];
    }
    if (t.needs_grad(b.id)) {
      Tensor& db = t.grad_slot(b.id);
      const Tensor& av = t.value(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) db[i] += g[i] * av[i];
    }
  });
}

Var scale(Var x, double factor) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v *= factor;
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x}, [x, self, factor](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_slot(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += factor * g[i];
  });
}

Var add_bias(Var x, Var bias) {
  Tape& tape = tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  const std::size_t n = last_extent(xv);
  if (bv.size() != n) {
    throw ShapeError("add_bias: bias of " + shape_str(bv.shape()) + " does not match " +
                     shape_str(xv.shape()));
  }
  Tensor out = xv;
  const std::size_t rows = out.size() / n;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = out.ptr() + r * n;
    for (std::size_t j = 0; j < n; ++j) row[j] += bv[j];
  }
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x, bias}, [x, bias, self, rows, n](Tape& t) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(x.id)) {
      Tensor& dx = t.grad_slot(x.id);
      for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
    }
    if (t.needs_grad(bias.id)) {
      Tensor& db = t.grad_slot(bias.id);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* row = g.ptr() + r * n;
        for (std::size_t j = 0; j < n; ++j) db[j] += row[j];
      }
    }
  });
}

Var layernorm(Var x, Var gain, Var bias, double eps) {
  Tape& tape = tape_of(x, gain);
  tape_of(x, bias);
  const Tensor& xv = x.value();
  const std::size_t n = last_extent(xv);
  if (gain.value().size() != n || bias.value().size() != n) {
    throw ShapeError("layernorm: gain/bias length must equal last extent of " +
                     shape_str(xv.shape()));
  }
  const std::size_t rows = xv.size() / n;
  const Tensor& gv = gain.value();
  const Tensor& bv = bias.value();
  Tensor out(xv.shape());
  std::vector<double> xhat(xv.size());
  std::vector<double> inv_std(rows);
  std::vector<std::uint8_t> floored(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* in = xv.ptr() + r * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += in[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (in[j] - mu) * (in[j] - mu);
    var /= static_cast<double>(n);
    floored[r] = var < eps;
    const double inv = 1.0 / std::sqrt(std::max(var, eps));
    inv_std[r] = inv;
    double* xh = xhat.data() + r * n;
    double* o = out.ptr() + r * n;
    for (std::size_t j = 0; j < n; ++j) {
      xh[j] = (in[j] - mu) * inv;
      o[j] = xh[j] * gv[j] + bv[j];
    }
  }
  const std::size_t self = tape.size();
  return tape.record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, self, rows, n, xhat = std::move(xhat), inv_std = std::move(inv_std),
       floored = std::move(floored)](Tape& t) {
        const Tensor& g = t.grad(self);
        const Tensor& gv = t.value(gain.id);
        if (t.needs_grad(gain.id) || t.needs_grad(bias.id)) {
          const bool gg = t.needs_grad(gain.id), gb = t.needs_grad(bias.id);
          Tensor* dg = gg ? &t.grad_slot(gain.id) : nullptr;
          Tensor* db = gb ? &t.grad_slot(bias.id) : nullptr;
          for (std::size_t r = 0; r < rows; ++r) {
            const double* gr = g.ptr() + r * n;
            const double* xh = xhat.data() + r * n;
            for (std::size_t j = 0; j < n; ++j) {
              if (gg) (*dg)[j] += gr[j] * xh[j];
              if (gb) (*db)[j] += gr[j];
            }
          }
        }
        if (!t.needs_grad(x.id)) return;
        Tensor& dx = t.grad_slot(x.id);
        std::vector<double> dxh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* gr = g.ptr() + r * n;
          const double* xh = xhat.data() + r * n;
          double mean_d = 0.0, mean_dx = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            dxh[j] = gr[j] * gv[j];
            mean_d += dxh[j];
            mean_dx += dxh[j] * xh[j];
          }
          mean_d /= static_cast<double>(n);
          mean_dx /= static_cast<double>(n);
          if (floored[r]) mean_dx = 0.0;
          double* d = dx.ptr() + r * n;
          for (std::size_t j = 0; j < n; ++j) {
            d[j] += inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
          }
        }
      });
}

Var gelu(Var x) {
  Tape& tape = tape_of(x);
  Tensor out = x.value();
  for (double& v : out.data()) v = 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x}, [x, self](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& xv = t.value(x.id);
    Tensor& dx = t.grad_slot(x.id);
    const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
      const double pdf = inv_sqrt_2pi * std::exp(-0.5 * v * v);
      dx[i] += g[i] * (cdf + v * pdf);
    }
  });
}

Var masked_softmax(Var logits, std::span<const std::uint8_t> mask) {
  Tape& tape = tape_of(logits);
  const Tensor& xv = logits.value();
  const std::size_t n = last_extent(xv);
  const std::size_t rows = xv.size() / n;
  if (mask.empty() || mask.size() % n != 0) {
    throw ShapeError("masked_softmax: mask length " + std::to_string(mask.size()) +
                     " is not a multiple of " + std::to_string(n));
  }
  const std::size_t groups = mask.size() / n;
  if (rows % groups != 0) {
    throw ShapeError("masked_softmax: " + std::to_string(rows) + " rows cannot be split into " +
                     std::to_string(groups) + " mask groups");
  }
  const std::size_t per_group = rows / groups;
  Tensor out(xv.shape());
  for (std::size_t r = 0; r < rows; ++r) {
    const std::uint8_t* m = mask.data() + (r / per_group) * n;
    const double* in = xv.ptr() + r * n;
    double* o = out.ptr() + r * n;
    double peak = -std::numeric_limits<double>::infinity();
    bool any = false;
    for (std::size_t j = 0; j < n; ++j) {
      if (m[j]) {
        any = true;
        peak = std::max(peak, in[j]);
      }
    }
    // Non-finite logits fall through and surface as a non-finite loss.
    if (!any) {
      throw Error("masked_softmax: row " + std::to_string(r) + " has no unmasked entry");
    }
    double total = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      o[j] = m[j] ? std::exp(in[j] - peak) : 0.0;
      total += o[j];
    }
    for (std::size_t j = 0; j < n; ++j) o[j] /= total;
  }
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {logits}, [logits, self, rows, n](Tape& t) {
    const Tensor& g = t.grad(self);
    const Tensor& y = t.value(self);
    Tensor& dx = t.grad_slot(logits.id);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* yr = y.ptr() + r * n;
      const double* gr = g.ptr() + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
      double* d = dx.ptr() + r * n;
      for (std::size_t j = 0; j < n; ++j) d[j] += yr[j] * (gr[j] - dot);
    }
  });
}

Var reshape(Var x, Shape shape) {
  Tape& tape = tape_of(x);
  Tensor out = x.value().reshaped(std::move(shape));
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x}, [x, self](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_slot(x.id);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i];
  });
}

namespace {

// For each output linear index, the matching input linear index.
std::vector<std::size_t> permutation_map(const Shape& in_shape, std::span<const std::size_t> axes,
                                         Shape& out_shape) {
  const std::size_t rank = in_shape.size();
  if (axes.size() != rank) throw ShapeError("permute: axis count does not match rank");
  std::vector<std::size_t> in_strides(rank, 1);
  for (std::size_t d = rank; d-- > 1;) in_strides[d - 1] = in_strides[d] * in_shape[d];
  std::vector<bool> seen(rank, false);
  out_shape.assign(rank, 0);
  std::vector<std::size_t> stride_of_out(rank);
  for (std::size_t d = 0; d < rank; ++d) {
    if (axes[d] >= rank || seen[axes[d]]) throw ShapeError("permute: invalid axis list");
    seen[axes[d]] = true;
    out_shape[d] = in_shape[axes[d]];
    stride_of_out[d] = in_strides[axes[d]];
  }
  const std::size_t total = shape_numel(in_shape);
  std::vector<std::size_t> map(total);
  std::vector<std::size_t> counter(rank, 0);
  std::size_t src = 0;
  for (std::size_t i = 0; i < total; ++i) {
    map[i] = src;
    for (std::size_t d = rank; d-- > 0;) {
      if (++counter[d] < out_shape[d]) {
        src += stride_of_out[d];
        break;
      }
      src -= stride_of_out[d] * (out_shape[d] - 1);
      counter[d] = 0;
    }
  }
  return map;
}

}  // namespace

Var permute(Var x, std::span<const std::size_t> axes) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  Shape out_shape;
  std::vector<std::size_t> map = permutation_map(xv.shape(), axes, out_shape);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < map.size(); ++i) out[i] = xv[map[i]];
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x}, [x, self, map = std::move(map)](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_slot(x.id);
    for (std::size_t i = 0; i < map.size(); ++i) dx[map[i]] += g[i];
  });
}

Var permute(Var x, std::initializer_list<std::size_t> axes) {
  return permute(x, std::span<const std::size_t>(axes.begin(), axes.size()));
}

Var gather_rows(Var x, std::span<const std::ptrdiff_t> rows) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 2) throw ShapeError("gather_rows: expected a matrix, got " + shape_str(xv.shape()));
  const std::size_t in_rows = xv.dim(0), cols = xv.dim(1);
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] < 0) continue;
    if (static_cast<std::size_t>(rows[i]) >= in_rows) {
      throw ShapeError("gather_rows: row " + std::to_string(rows[i]) + " out of range for " +
                       shape_str(xv.shape()));
    }
    std::copy_n(xv.ptr() + rows[i] * cols, cols, out.ptr() + i * cols);
  }
  const std::size_t self = tape.size();
  std::vector<std::ptrdiff_t> index(rows.begin(), rows.end());
  return tape.record(std::move(out), {x}, [x, self, cols, index = std::move(index)](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_slot(x.id);
    for (std::size_t i = 0; i < index.size(); ++i) {
      if (index[i] < 0) continue;
      double* d = dx.ptr() + index[i] * cols;
      const double* s = g.ptr() + i * cols;
      for (std::size_t j = 0; j < cols; ++j) d[j] += s[j];
    }
  });
}

Var concat_rows(Var a, Var b) {
  Tape& tape = tape_of(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(1)) {
    throw ShapeError("concat_rows: incompatible shapes " + shape_str(av.shape()) + " and " +
                     shape_str(bv.shape()));
  }
  std::vector<double> data(av.vec());
  data.insert(data.end(), bv.vec().begin(), bv.vec().end());
  const std::size_t split = av.size();
  Tensor out({av.dim(0) + bv.dim(0), av.dim(1)}, std::move(data));
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {a, b}, [a, b, self, split](Tape& t) {
    const Tensor& g = t.grad(self);
    if (t.needs_grad(a.id)) {
      Tensor& da = t.grad_slot(a.id);
      for (std::size_t i = 0; i < split; ++i) da[i] += g[i];
    }
    if (t.needs_grad(b.id)) {
      Tensor& db = t.grad_slot(b.id);
      for (std::size_t i = 0; i < db.size(); ++i) db[i] += g[split + i];
    }
  });
}

Var conv1x1(Var x, Var weight, Var bias) {
  Tape& tape = tape_of(x, weight);
  tape_of(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  if (xv.rank() != 4 || wv.rank() != 2 || wv.dim(1) != xv.dim(1) ||
      bias.value().size() != wv.dim(0)) {
    throw ShapeError("conv1x1: incompatible shapes " + shape_str(xv.shape()) + ", weight " +
                     shape_str(wv.shape()) + ", bias " + shape_str(bias.value().shape()));
  }
  const std::size_t batch = xv.dim(0), cin = xv.dim(1), cout = wv.dim(0);
  const std::size_t hw = xv.dim(2) * xv.dim(3);
  Tensor out({batch, cout, xv.dim(2), xv.dim(3)});
  const Tensor& bv = bias.value();
  for (std::size_t b = 0; b < batch; ++b) {
    MapMat ob(out.ptr() + b * cout * hw, cout, hw);
    ob.noalias() = ConstMapMat(wv.ptr(), cout, cin) * ConstMapMat(xv.ptr() + b * cin * hw, cin, hw);
    for (std::size_t c = 0; c < cout; ++c) ob.row(c).array() += bv[c];
  }
  g_matmul_flops += 2ull * batch * cout * cin * hw;
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x, weight, bias}, [=](Tape& t) {
    const Tensor& g = t.grad(self);
    const double* wp = t.value(weight.id).ptr();
    const double* xp = t.value(x.id).ptr();
    for (std::size_t b = 0; b < batch; ++b) {
      ConstMapMat gb(g.ptr() + b * cout * hw, cout, hw);
      if (t.needs_grad(x.id)) {
        MapMat(t.grad_slot(x.id).ptr() + b * cin * hw, cin, hw).noalias() +=
            ConstMapMat(wp, cout, cin).transpose() * gb;
      }
      if (t.needs_grad(weight.id)) {
        MapMat(t.grad_slot(weight.id).ptr(), cout, cin).noalias() +=
            gb * ConstMapMat(xp + b * cin * hw, cin, hw).transpose();
      }
      if (t.needs_grad(bias.id)) {
        Tensor& db = t.grad_slot(bias.id);
        for (std::size_t c = 0; c < cout; ++c) db[c] += gb.row(c).sum();
      }
    }
  });
}

Var upsample_nearest(Var x, std::size_t factor) {
  Tape& tape = tape_of(x);
  const Tensor& xv = x.value();
  if (xv.rank() != 4) throw ShapeError("upsample_nearest: expected [B,C,h,w], got " + shape_str(xv.shape()));
  if (factor == 0) throw ShapeError("upsample_nearest: factor must be positive");
  const std::size_t planes = xv.dim(0) * xv.dim(1), h = xv.dim(2), w = xv.dim(3);
  const std::size_t oh = h * factor, ow = w * factor;
  Tensor out({xv.dim(0), xv.dim(1), oh, ow});
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = xv.ptr() + p * h * w;
    double* o = out.ptr() + p * oh * ow;
    for (std::size_t y = 0; y < oh; ++y) {
      const double* src = in + (y / factor) * w;
      for (std::size_t xx = 0; xx < ow; ++xx) o[y * ow + xx] = src[xx / factor];
    }
  }
  const std::size_t self = tape.size();
  return tape.record(std::move(out), {x}, [=](Tape& t) {
    const Tensor& g = t.grad(self);
    Tensor& dx = t.grad_slot(x.id);
    for (std::size_t p = 0; p < planes; ++p) {
      double* d = dx.ptr() + p * h * w;
      const double* gp = g.ptr() + p * oh * ow;
      for (std::size_t y = 0; y < oh; ++y) {
        for (std::size_t xx = 0; xx < ow; ++xx) d[(y / factor) * w + xx / factor] += gp[y * ow + xx];
      }
    }
  });
}

Var upsample2x_nearest(Var x) { return upsample_nearest(x, 2); }

Var sum(Var x) {
  Tape& tape = tape_of(x);
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  const std::size_t self = tape.size();
  return tape.record(Tensor({}, std::vector<double>{total}), {x}, [x, self](Tape& t) {
    const double g = t.grad(self)[0];
    Tensor& dx = t.grad_slot(x.id);
    for (double& d : dx.data()) d += g;
  });
}

Var mean(Var x) {
  const std::size_t count = x.value().size();
  if (count == 0) throw ShapeError("mean: empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(count));
}

Var bce_with_logits(Var logits, const Tensor& targets) {
  Tape& tape = tape_of(logits);
  require_same_shape(logits.value(), targets, "bce_with_logits");
  const Tensor& xv = logits.value();
  const std::size_t count = xv.size();
  if (count == 0) throw ShapeError("bce_with_logits: empty input");
  double total = 0.0;
  for (std::size_t i = 0; i < count; ++i) {
    const double v = xv[i];
    total += std::max(v, 0.0) - v * targets[i] + std::log1p(std::exp(-std::abs(v)));
  }
  const std::size_t self = tape.size();
  return tape.record(Tensor({}, std::vector<double>{total / static_cast<double>(count)}), {logits},
                     [logits, self, targets, count](Tape& t) {
                       const double g = t.grad(self)[0] / static_cast<double>(count);
                       const Tensor& xv = t.value(logits.id);
                       Tensor& dx = t.grad_slot(logits.id);
                       for (std::size_t i = 0; i < count; ++i) {
                         const double p = 1.0 / (1.0 + std::exp(-xv[i]));
                         dx[i] += g * (p - targets[i]);
                       }
                     });
}

Var ce_pixelwise(Var logits, std::span<const int> labels) {
  Tape& tape = tape_of(logits);
  const Tensor& xv = logits.value();
  if (xv.rank() != 4) throw ShapeError("ce_pixelwise: expected [B,C,H,W], got " + shape_str(xv.shape()));
  const std::size_t batch = xv.dim(0), classes = xv.dim(1), hw = xv.dim(2) * xv.dim(3);
  if (labels.size() != batch * hw) {
    throw ShapeError("ce_pixelwise: " + std::to_string(labels.size()) + " labels for logits " +
                     shape_str(xv.shape()));
  }
  const std::size_t count = batch * hw;
  // Softmax probabilities kept for the backward sweep, laid out like logits.
  std::vector<double> prob(xv.size());
  double total = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* base = xv.ptr() + b * classes * hw;
    double* pb = prob.data() + b * classes * hw;
    for (std::size_t p = 0; p < hw; ++p) {
      const int label = labels[b * hw + p];
      if (label < 0 || static_cast<std::size_t>(label) >= classes) {
        throw ShapeError("ce_pixelwise: label " + std::to_string(label) + " outside [0, " +
                         std::to_string(classes) + ")");
      }
      double peak = -std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < classes; ++c) peak = std::max(peak, base[c * hw + p]);
      double z = 0.0;
      for (std::size_t c = 0; c < classes; ++c) {
        pb[c * hw + p] = std::exp(base[c * hw + p] - peak);
        z += pb[c * hw + p];
      }
      for (std::size_t c = 0; c < classes; ++c) pb[c * hw + p] /= z;
      total += std::log(z) + peak - base[static_cast<std::size_t>(label) * hw + p];
    }
  }
  const std::size_t self = tape.size();
  std::vector<int> target(labels.begin(), labels.end());
  return tape.record(
      Tensor({}, std::vector<double>{total / static_cast<double>(count)}), {logits},
      [=, prob = std::move(prob), target = std::move(target)](Tape& t) {
        const double g = t.grad(self)[0] / static_cast<double>(count);
        Tensor& dx = t.grad_slot(logits.id);
        for (std::size_t i = 0; i < prob.size(); ++i) dx[i] += g * prob[i];
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t p = 0; p < hw; ++p) {
            const auto c = static_cast<std::size_t>(target[b * hw + p]);
            dx[b * classes * hw + c * hw + p] -= g;
          }
        }
      });
}

}  // namespace rvit::nk
