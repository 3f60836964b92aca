#include "smdk/tensor.hpp"

#include <algorithm>
#include <sstream>

namespace smdk {

int64_t numel_of(const Shape& s) {
  int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << "]";
  return os.str();
}

void Tensor::Node::ensure_grad() {
  if (grad.empty()) grad.assign(values.size(), 0.0);
}

namespace {
std::shared_ptr<Tensor::Node> make_leaf(Shape shape, std::vector<double> vals,
                                        bool requires_grad) {
  for (int d : shape) {
    if (d <= 0) throw ShapeError("empty shape: dimension " + std::to_string(d));
  }
  if (shape.empty()) throw ShapeError("empty shape");
  auto n = std::make_shared<Tensor::Node>();
  n->shape = std::move(shape);
  if (static_cast<int64_t>(vals.size()) != numel_of(n->shape))
    throw ShapeError("value count does not match shape " + shape_str(n->shape));
  n->values = std::move(vals);
  n->requires_grad = requires_grad;
  return n;
}
}  // namespace

Tensor make_op(Shape shape, std::vector<double> values,
               std::vector<Tensor> parents,
               std::function<void(const std::vector<double>&)> back) {
  auto n = make_leaf(std::move(shape), std::move(values), false);
  n->requires_grad = any_requires_grad(parents);
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->back = std::move(back);
  }
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = make_leaf(shape, std::vector<double>(numel_of(shape), 0.0),
                     requires_grad);
  return Tensor(std::move(n));
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  auto n =
      make_leaf(shape, std::vector<double>(numel_of(shape), v), requires_grad);
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  return Tensor(make_leaf(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({1}, {v}, requires_grad);
}

Tensor Tensor::randn(Shape shape, RngStream& stream, double scale,
                     bool requires_grad) {
  if (scale <= 0) throw ValueError("randn: scale must be > 0");
  int64_t n = numel_of(shape);
  std::vector<double> v(static_cast<size_t>(n));
  for (auto& x : v) x = stream.next_gauss() * scale;
  return from(std::move(shape), std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return n_->shape; }
int64_t Tensor::numel() const { return static_cast<int64_t>(n_->values.size()); }

int Tensor::rows() const {
  if (n_->shape.size() != 2) throw ShapeError("rows(): not 2-D " + shape_str(n_->shape));
  return n_->shape[0];
}
int Tensor::cols() const {
  if (n_->shape.size() != 2) throw ShapeError("cols(): not 2-D " + shape_str(n_->shape));
  return n_->shape[1];
}

const std::vector<double>& Tensor::values() const { return n_->values; }
std::vector<double>& Tensor::mutable_values() { return n_->values; }
bool Tensor::requires_grad() const { return n_->requires_grad; }
bool Tensor::has_grad() const { return !n_->grad.empty(); }

const std::vector<double>& Tensor::grad() const {
  if (n_->grad.empty()) throw ValueError("grad(): no gradient accumulated");
  return n_->grad;
}
std::vector<double>& Tensor::mutable_grad() {
  n_->ensure_grad();
  return n_->grad;
}

void Tensor::zero_grad() {
  if (!n_->grad.empty()) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

void Tensor::detach_tape() {
  n_->parents.clear();
  n_->back = nullptr;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor is not scalar " + shape_str(n_->shape));
  return n_->values[0];
}

double Tensor::at(int r, int c) const {
  return n_->values[static_cast<size_t>(r) * cols() + c];
}

uint64_t Tensor::checksum() const {
  return fnv1a64(n_->values.data(), n_->values.size() * sizeof(double));
}

bool any_requires_grad(const std::vector<Tensor>& ts) {
  for (const auto& t : ts)
    if (t.defined() && t.requires_grad()) return true;
  return false;
}

void accumulate_grad(const Tensor& t, const std::vector<double>& delta) {
  if (!t.requires_grad()) return;
  auto& g = t.node()->grad;
  if (g.empty()) g.assign(t.node()->values.size(), 0.0);
  for (size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

void backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1)
    throw ShapeError("backward: loss must be a scalar tensor");
  // Iterative post-order DFS; parents visited in insertion order so the
  // reverse sweep is bitwise reproducible.
  std::vector<Tensor::Node*> order;
  std::vector<std::pair<Tensor::Node*, size_t>> stack;
  std::vector<const void*> visited;
  auto seen = [&](Tensor::Node* n) {
    return std::find(visited.begin(), visited.end(), n) != visited.end();
  };
  stack.push_back({loss.node().get(), 0});
  visited.push_back(loss.node().get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Tensor::Node* p = node->parents[idx].node().get();
      ++idx;
      if (p->requires_grad && !seen(p)) {
        visited.push_back(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  loss.node()->ensure_grad();
  loss.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Tensor::Node* n = *it;
    if (n->back) {
      n->ensure_grad();
      n->back(n->grad);
    }
  }
}

}  // namespace smdk
