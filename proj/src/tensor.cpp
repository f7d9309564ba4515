#include "cpseg/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

namespace cpseg {

namespace {

thread_local bool g_grad_enabled = true;

}  // namespace

std::string to_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::int64_t numel_of(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) {
    if (d < 0) throw ShapeError("negative dimension in shape " + to_string(shape));
    n *= d;
  }
  return n;
}

Buffer::Buffer(DType dtype, std::size_t n) {
  if (dtype == DType::f32) {
    store_ = AlignedVector<float>(n, 0.0f);
  } else {
    store_ = AlignedVector<double>(n, 0.0);
  }
}

std::size_t Buffer::size() const {
  return std::visit([](const auto& v) { return v.size(); }, store_);
}

void Buffer::fill_zero() {
  std::visit([](auto& v) { std::fill(v.begin(), v.end(), 0); }, store_);
}

double Buffer::get(std::size_t i) const {
  return std::visit([i](const auto& v) { return static_cast<double>(v[i]); }, store_);
}

void Buffer::set(std::size_t i, double value) {
  std::visit(
      [i, value](auto& v) {
        using T = typename std::decay_t<decltype(v)>::value_type;
        v[i] = static_cast<T>(value);
      },
      store_);
}

void check_finite(const Buffer& buffer, const char* op) {
  const bool ok = dispatch(buffer.dtype(), [&](auto tag) {
    using T = decltype(tag);
    for (T v : buffer.as<T>()) {
      if (!std::isfinite(v)) return false;
    }
    return true;
  });
  if (!ok) throw NumericError(std::string("non-finite value produced by ") + op);
}

namespace detail {

Buffer& Node::grad_buffer() {
  if (!has_grad) {
    if (grad.size() != data.size() || grad.dtype() != data.dtype()) {
      grad = Buffer(data.dtype(), data.size());
    } else {
      grad.fill_zero();
    }
    has_grad = true;
  }
  return grad;
}

std::uint64_t next_seq() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

}  // namespace detail

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

Tensor Tensor::from_buffer(const Shape& shape, Buffer values) {
  if (static_cast<std::int64_t>(values.size()) != numel_of(shape)) {
    throw ShapeError("buffer of " + std::to_string(values.size()) + " values does not fit shape " +
                     to_string(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = shape;
  node->data = std::move(values);
  node->seq = detail::next_seq();
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(const Shape& shape, DType dtype) {
  return from_buffer(shape, Buffer(dtype, static_cast<std::size_t>(numel_of(shape))));
}

Tensor Tensor::full(const Shape& shape, double value, DType dtype) {
  Buffer b(dtype, static_cast<std::size_t>(numel_of(shape)));
  dispatch(dtype, [&](auto tag) {
    using T = decltype(tag);
    auto s = b.as<T>();
    std::fill(s.begin(), s.end(), static_cast<T>(value));
  });
  return from_buffer(shape, std::move(b));
}

Tensor Tensor::from(const Shape& shape, std::vector<float> values) {
  return from_buffer(shape, Buffer(std::move(values)));
}

Tensor Tensor::from(const Shape& shape, std::vector<double> values) {
  return from_buffer(shape, Buffer(std::move(values)));
}

Tensor Tensor::scalar(double value, DType dtype) { return full({}, value, dtype); }

const Shape& Tensor::shape() const {
  if (!node_) throw std::logic_error("use of undefined tensor");
  return node_->shape;
}

std::int64_t Tensor::dim(int axis) const {
  const auto& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + to_string(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

DType Tensor::dtype() const { return node_->dtype(); }

Buffer& Tensor::mutable_buffer() {
  check_mutable();
  return node_->data;
}

void Tensor::check_mutable() const {
  if (!node_->is_leaf) throw std::logic_error("in-place mutation of a non-leaf tensor");
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + to_string(shape()));
  return node_->data.get(0);
}

double Tensor::at(std::span<const std::int64_t> index) const {
  const auto& s = shape();
  if (index.size() != s.size()) throw ShapeError("index rank mismatch for shape " + to_string(s));
  std::int64_t off = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (index[i] < 0 || index[i] >= s[i]) throw ShapeError("index out of range in dim " + std::to_string(i));
    off = off * s[i] + index[i];
  }
  return node_->data.get(static_cast<std::size_t>(off));
}

std::vector<double> Tensor::to_vector() const {
  std::vector<double> out(static_cast<std::size_t>(numel()));
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = node_->data.get(i);
  return out;
}

bool Tensor::requires_grad() const { return node_ && node_->requires_grad; }

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw std::logic_error("requires_grad can only be set on leaves");
  node_->requires_grad = on;
  return *this;
}

bool Tensor::has_grad() const { return node_ && node_->has_grad; }

const Buffer* Tensor::grad_buffer() const { return node_ && node_->has_grad ? &node_->grad : nullptr; }

Tensor Tensor::grad() const {
  if (!has_grad()) return zeros(shape(), dtype());
  return from_buffer(shape(), node_->grad);
}

void Tensor::zero_grad() {
  if (node_) node_->has_grad = false;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar, got shape " + to_string(shape()));
  }
  if (!node_->requires_grad) throw std::logic_error("backward() on a tensor that is not on the graph");

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  while (!stack.empty()) {
    detail::Node* n = stack.back();
    stack.pop_back();
    if (!seen.insert(n).second) continue;
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (p->requires_grad) stack.push_back(p.get());
    }
  }
  // Creation order is a topological order; sweep it in reverse.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) { return a->seq > b->seq; });

  for (auto* n : order) {
    if (!n->is_leaf) n->has_grad = false;
  }
  node_->grad_buffer().set(0, node_->grad.get(0) + 1.0);

  for (auto* n : order) {
    if (n->is_leaf || !n->has_grad || !n->backward) continue;
    n->backward(*n);
  }
  for (auto* n : order) {
    if (!n->is_leaf) {
      n->has_grad = false;
      n->grad = Buffer();
    }
  }
}

Tensor Tensor::detach() const {
  auto node = std::make_shared<detail::Node>();
  node->shape = node_->shape;
  node->data = node_->data;
  node->seq = detail::next_seq();
  node->op = "detach";
  return Tensor(std::move(node));
}

Tensor Tensor::clone() const { return detach(); }

Tensor Tensor::to(DType target) const {
  if (target == dtype()) return clone();
  Buffer b(target, node_->data.size());
  for (std::size_t i = 0; i < b.size(); ++i) b.set(i, node_->data.get(i));
  return from_buffer(shape(), std::move(b));
}

const char* Tensor::op_name() const { return node_->op; }

std::size_t Tensor::parent_count() const { return node_->parents.size(); }

Tensor Tensor::make_result(const char* op, Shape shape, Buffer data, const std::vector<Tensor>& inputs,
                           detail::BackwardFn backward) {
  check_finite(data, op);
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = detail::next_seq();
  node->op = op;
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs) {
      if (t.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    node->requires_grad = true;
    node->is_leaf = false;
    node->parents.reserve(inputs.size());
    for (const auto& t : inputs) node->parents.push_back(t.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

}  // namespace cpseg
