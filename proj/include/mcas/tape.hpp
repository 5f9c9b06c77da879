#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "mcas/tensor.hpp"

namespace mcas {

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; only valid while the
// owning tape is alive.
class Var {
 public:
  Var() = default;

  const Shape& shape() const;
  std::span<const double> value() const;
  std::size_t size() const;
  bool requires_grad() const;
  std::size_t id() const { return id_; }
  Tape& tape() const { return *tape_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

// Reverse-mode recording. Nodes are appended in execution order, so the node
// vector is already a topological order and backward walks it in reverse.
// A tape supports exactly one backward pass.
class Tape {
 public:
  // Called with the tape and the id of the node being differentiated.
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Copies `t`; the node requires grad iff t.grad_enabled.
  Var variable(const Tensor& t);
  Var constant(Shape shape, std::vector<double> values);
  Var constant(const Tensor& t) { return constant(t.shape, t.data); }
  Var scalar(double v) { return constant({1}, {v}); }
  // References the parameter storage directly. Gradients reach p.grad only
  // through accumulate_param_grads(), so several tapes may read the same
  // parameters concurrently.
  Var param(Tensor& p);

  // Appends an op output. Rejects non-finite values. `fn` is dropped when no
  // input requires grad.
  Var record(const char* op, Shape shape, std::vector<double> value,
             std::initializer_list<Var> inputs, BackwardFn fn);
  Var record(const char* op, Shape shape, std::vector<double> value,
             std::span<const Var> inputs, BackwardFn fn);

  void backward(Var loss);
  bool consumed() const { return consumed_; }

  // Gradient of the backward root w.r.t. v; empty when none reached v.
  std::span<const double> grad(Var v) const;

  // p.grad += scale * dL/dp for every grad-enabled parameter node.
  void accumulate_param_grads(double scale = 1.0) const;

  // Multiply-accumulate counter, bumped by matmul/conv/mixing kernels.
  void add_macs(std::uint64_t n) { macs_ += n; }
  std::uint64_t macs() const { return macs_; }
  std::size_t node_count() const { return nodes_.size(); }

  // Accessors used by op backward closures.
  std::span<const double> value_of(std::size_t id) const;
  const Shape& shape_of(std::size_t id) const { return nodes_[id].shape; }
  bool needs_grad(std::size_t id) const { return nodes_[id].requires_grad; }
  std::span<const double> grad_of(std::size_t id) const { return nodes_[id].grad; }
  std::span<double> grad_buffer(std::size_t id);

 private:
  struct Node {
    const char* op = "";
    Shape shape;
    std::vector<double> own;
    const double* external = nullptr;
    Tensor* param = nullptr;
    bool requires_grad = false;
    bool leaf = false;
    std::vector<double> grad;
    BackwardFn backward;
  };

  Var push(Node node);

  std::vector<Node> nodes_;
  bool consumed_ = false;
  std::uint64_t macs_ = 0;
};

// ---------------------------------------------------------------------------
// Differentiable operations. Matrices are 2-D row-major; feature maps are
// H x W x C. Every op checks shapes and throws DimensionError on mismatch.

Var matmul(Var a, Var b);
Var transpose(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var scale(Var a, double s);
// a[..., C] + v[C] along the last axis.
Var broadcast_add(Var a, Var v);
Var reshape(Var a, Shape shape);
Var sin(Var a);
Var cos(Var a);
Var relu(Var a);
Var gelu(Var a);
Var sigmoid(Var a);
Var softplus(Var a);
// x viewed as [M x Cin]; w [Cin x Cout]; optional bias [Cout].
Var linear(Var x, Var w, Var bias = {});
// Mean over rows [y0,y1) x cols [x0,x1) of an H x W x C map -> 1 x 1 x C.
Var mean_pool(Var x, std::size_t y0, std::size_t x0, std::size_t y1, std::size_t x1);
// Non-overlapping factor x factor average pooling.
Var avg_pool(Var x, std::size_t factor);
// Zero-padded "same" convolution. Dense kernel k x k x Cin x Cout, or
// depthwise kernel k x k x C.
Var conv2d_same(Var x, Var w, bool depthwise);
// H x W x C -> H x W x (C*times); output channel c*times + j copies channel c.
Var repeat_channels(Var x, std::size_t times);
// Per-row normalisation over the last axis, then scale and offset.
Var layer_norm(Var x, Var scale, Var offset, double eps = 1e-5);
Var softmax(Var v);
Var sum(Var a);
Var mean(Var a);
Var gather(Var v, std::span<const std::size_t> indices);
Var element(Var v, std::size_t index);
Var stack(std::span<const Var> scalars);
// sum_k w[k] * items[k]
Var mix(Var weights, std::span<const Var> items);
// Selects rows of a [M x C] (row-major view of any tensor with last dim C).
Var gather_rows(Var a, std::span<const std::size_t> rows);

// Max-subtracted softmax over plain values; throws DimensionError when empty.
std::vector<double> softmax_values(std::span<const double> v);

}  // namespace mcas
