#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <functional>
#include <span>
#include <vector>

#include "rvit/tensor.hpp"

// Reverse-mode automatic differentiation over dense f64 tensors.
//
// A Tape records every executed op in order. Inputs always precede the op
// that consumes them, so backward() is a single reverse sweep. Ops whose
// inputs carry no gradient are recorded without a backward closure, which
// makes inference on a tape of constants essentially free of bookkeeping.
namespace rvit::nk {

class Tape;

struct Var {
  Tape* tape = nullptr;
  std::size_t id = 0;

  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  // Gradient accumulated by the last backward(); empty when none reached it.
  const Tensor& grad() const;
};

class Tape {
 public:
  using Backward = std::function<void(Tape&)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Value that never receives a gradient.
  Var constant(Tensor value);
  // Value that accumulates a gradient on backward().
  Var leaf(Tensor value);

  // Seeds d(out)/d(out) = 1 for a single-element output and sweeps in reverse.
  void backward(Var out);

  const Tensor& value(std::size_t id) const { return nodes_[id].value; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  const Tensor& grad(std::size_t id) const { return nodes_[id].grad; }
  // Gradient slot for accumulation, allocated as zeros on first use.
  Tensor& grad_slot(std::size_t id);

  std::size_t size() const { return nodes_.size(); }

  // Used by op implementations.
  Var record(Tensor value, std::initializer_list<Var> inputs, Backward backward);

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    bool needs_grad = false;
    Backward backward;
  };
  std::deque<Node> nodes_;
};

// 2 * m * n * k for every forward matrix product executed on this thread.
std::uint64_t matmul_flops();
void reset_matmul_flops();

// Scoped reading of the matmul FLOP counter.
class MatmulFlopScope {
 public:
  MatmulFlopScope() : start_(matmul_flops()) {}
  std::uint64_t elapsed() const { return matmul_flops() - start_; }

 private:
  std::uint64_t start_;
};

Var matmul(Var a, Var b);
// [G,m,k] x [G,k,n] -> [G,m,n]; with transpose_b the right operand is [G,n,k].
Var batched_matmul(Var a, Var b, bool transpose_b = false);

Var add(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var x, double factor);
// Broadcasts bias over every leading index; bias length equals the last extent.
Var add_bias(Var x, Var bias);

// Normalizes over the last extent. Variance is floored at eps, so constant
// rows map to the bias.
Var layernorm(Var x, Var gain, Var bias, double eps = 1e-6);
Var gelu(Var x);

// Softmax over the last extent with masked entries excluded. The mask holds
// G rows of n flags; the logits' rows are split into G equal consecutive
// groups and group g uses mask row g. A row with no live entry is an error.
Var masked_softmax(Var logits, std::span<const std::uint8_t> mask);

Var reshape(Var x, Shape shape);
Var permute(Var x, std::span<const std::size_t> axes);
Var permute(Var x, std::initializer_list<std::size_t> axes);

// Output row i is x row rows[i], or a zero row when rows[i] < 0.
Var gather_rows(Var x, std::span<const std::ptrdiff_t> rows);
Var concat_rows(Var a, Var b);

// Per-position linear map on [B,Cin,h,w] with weight [Cout,Cin] and bias [Cout].
Var conv1x1(Var x, Var weight, Var bias);
// Nearest-neighbour upsampling of the two trailing extents of [B,C,h,w].
Var upsample_nearest(Var x, std::size_t factor);
Var upsample2x_nearest(Var x);

Var sum(Var x);
Var mean(Var x);

// Mean over all elements of the numerically stable sigmoid cross-entropy.
Var bce_with_logits(Var logits, const Tensor& targets);
// Mean softmax cross-entropy over every pixel of [B,C,H,W] logits;
// labels hold B*H*W class indices.
Var ce_pixelwise(Var logits, std::span<const int> labels);

}  // namespace rvit::nk
