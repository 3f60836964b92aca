#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "smdk/rng.hpp"

namespace smdk {

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ValueError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

// Value + optional gradient buffer + tape linkage. The tape is define-by-run:
// each op result holds its parents and a backward closure; backward() walks
// the graph in deterministic reverse-topological order. Values are immutable
// after construction except for grad buffers and explicit leaf updates
// (optimizer steps).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  // Gaussian init, zero mean, standard deviation `scale`.
  static Tensor randn(Shape shape, RngStream& stream, double scale,
                      bool requires_grad = false);

  bool defined() const { return n_ != nullptr; }

  const Shape& shape() const;
  int64_t numel() const;
  int rows() const;  // 2-D convenience
  int cols() const;

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // leaf updates only
  bool requires_grad() const;
  bool has_grad() const;
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();
  void zero_grad();
  void detach_tape();  // drop parents/backward, keep values (leaf-ify)

  double item() const;  // scalar tensors
  double at(int r, int c) const;

  uint64_t checksum() const;  // bitwise FNV over the value buffer

  // Identity of the underlying node, for visited-sets and aliasing checks.
  const void* id() const { return n_.get(); }

  struct Node;
  const std::shared_ptr<Node>& node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<Node> n) : n_(std::move(n)) {}
  std::shared_ptr<Node> n_;

  friend Tensor make_op(Shape shape, std::vector<double> values,
                        std::vector<Tensor> parents,
                        std::function<void(const std::vector<double>&)> back);
  friend void backward(const Tensor& loss);
};

struct Tensor::Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<Tensor> parents;
  // Receives d(loss)/d(this node); accumulates into parents' grads.
  std::function<void(const std::vector<double>&)> back;

  void ensure_grad();
};

// Builds an op-result node. `back` may be empty when no parent needs grad.
Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&)> back);

bool any_requires_grad(const std::vector<Tensor>& ts);

// Accumulate `delta` into t's grad buffer (no-op when !requires_grad).
void accumulate_grad(const Tensor& t, const std::vector<double>& delta);

// Reverse-mode sweep from a scalar loss. Deterministic traversal order.
void backward(const Tensor& loss);

}  // namespace smdk
