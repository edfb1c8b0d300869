#pragma once
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spt::ad {

using Shape = std::vector<int>;

inline std::size_t numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}
std::string shape_str(const Shape& s);

class Tape;

// Lightweight handle into a tape node. Values are immutable once created;
// gradients live in the node and are filled by Tape::backward.
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape* tape, int id) : tape_(tape), id_(id) {}

  bool valid() const { return tape_ != nullptr; }
  int id() const { return id_; }
  Tape* tape() const { return tape_; }

  const Shape& shape() const;
  std::size_t size() const;
  int rows() const;  // rank-2 helpers
  int cols() const;
  const std::vector<double>& values() const;
  bool requires_grad() const;

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

struct Node {
  Shape shape;
  std::vector<double> val;
  std::vector<double> grad;  // sized like val when requires_grad, else empty
  bool requires_grad = false;
  // Applies the chain rule for this node; null for leaves/constants/detach.
  std::function<void(Tape&)> back;
};

// One tape per forward pass. Nodes are appended in evaluation order, which
// is already a topological order, so backward is a single reverse sweep.
class Tape {
 public:
  Tape() { nodes_.reserve(4096); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  int size() const { return static_cast<int>(nodes_.size()); }
  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }

  // ---- tensor creation ----
  Tensor leaf(const Shape& shape, std::span<const double> values, bool requires_grad);
  Tensor constant(const Shape& shape, std::span<const double> values);
  Tensor scalar(double v);
  Tensor zeros(const Shape& shape);

  // ---- ops ----
  // Elementwise with limited broadcasting: equal shapes, a 1-element scalar
  // on either side, or a length-C row against an R x C matrix.
  Tensor add(Tensor a, Tensor b);
  Tensor sub(Tensor a, Tensor b);
  Tensor mul(Tensor a, Tensor b);
  Tensor div(Tensor a, Tensor b);

  Tensor matmul(Tensor a, Tensor b);
  Tensor transpose(Tensor a);

  Tensor sigmoid(Tensor a);
  Tensor relu(Tensor a);
  Tensor tanh(Tensor a);

  Tensor softmax_rows(Tensor a);  // softmax over the last dimension, rank >= 2
  Tensor layer_norm(Tensor a, Tensor gain, Tensor bias, double eps = 1e-5);

  Tensor detach(Tensor a);

  Tensor sum_all(Tensor a);
  Tensor mean_all(Tensor a);

  Tensor slice_rows(Tensor a, int r0, int r1);
  Tensor slice_cols(Tensor a, int c0, int c1);
  Tensor concat_rows(const std::vector<Tensor>& parts);
  Tensor concat_cols(const std::vector<Tensor>& parts);

  Tensor embedding(Tensor table, std::span<const int> ids);
  // Mean over contiguous row groups; sizes must sum to the row count.
  Tensor segment_mean_rows(Tensor a, const std::vector<int>& sizes);
  Tensor kron(Tensor a, Tensor b);  // Kronecker product of two matrices

  // Mean cross entropy of rows of logits against integer labels,
  // computed with the usual max-shift for stability.
  Tensor cross_entropy_mean(Tensor logits, std::span<const int> labels);

  // ---- backward ----
  // Zeroes all gradients, seeds d(loss)/d(loss) = 1 and sweeps the tape in
  // reverse. Loss must be a scalar. Running it twice gives identical results.
  void backward(Tensor loss);

  // Gradient of a tensor; zeros if it does not require grad.
  std::vector<double> grad(Tensor t) const;
  std::span<const double> grad_view(Tensor t) const;

 private:
  int push(Shape shape, bool requires_grad);
  Tensor check(Tensor t) const;

  std::vector<Node> nodes_;
  std::vector<double> empty_;
};

// Composite helpers built from primitives.
Tensor mse_all(Tape& t, Tensor a, Tensor b);      // mean((a-b)^2)
Tensor affine(Tape& t, Tensor x, Tensor w, Tensor b);  // x*w + b (row bias)

}  // namespace spt::ad
