#pragma once

// Dense tensors with reverse-mode automatic differentiation.
//
// A Tensor is a cheap handle onto a shared graph node. Values are immutable
// once an op has produced them; only leaves (parameters, inputs) may be
// mutated in place, and only outside of a live graph (the optimizer step).

#include <cstdint>
#include <functional>
#include <memory>
#include <new>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace cpseg {

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

using Shape = std::vector<std::int64_t>;

std::string to_string(const Shape& shape);
std::int64_t numel_of(const Shape& shape);

class ShapeError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

// 64-byte aligned storage. Vectorized kernels choose their code path from the
// data address, so a fixed alignment keeps results independent of where the
// allocator happens to place a buffer.
template <class T>
struct AlignedAllocator {
  using value_type = T;
  static constexpr std::align_val_t alignment{64};
  AlignedAllocator() = default;
  template <class U>
  AlignedAllocator(const AlignedAllocator<U>&) {}
  T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), alignment)); }
  void deallocate(T* p, std::size_t) { ::operator delete(p, alignment); }
  template <class U>
  bool operator==(const AlignedAllocator<U>&) const {
    return true;
  }
};

template <class T>
using AlignedVector = std::vector<T, AlignedAllocator<T>>;

class Buffer {
public:
  Buffer() = default;
  Buffer(DType dtype, std::size_t n);
  explicit Buffer(const std::vector<float>& v) : store_(AlignedVector<float>(v.begin(), v.end())) {}
  explicit Buffer(const std::vector<double>& v) : store_(AlignedVector<double>(v.begin(), v.end())) {}

  DType dtype() const { return store_.index() == 0 ? DType::f32 : DType::f64; }
  std::size_t size() const;

  template <class T>
  std::span<T> as() {
    return std::span<T>(std::get<AlignedVector<T>>(store_));
  }
  template <class T>
  std::span<const T> as() const {
    return std::span<const T>(std::get<AlignedVector<T>>(store_));
  }

  void fill_zero();
  double get(std::size_t i) const;
  void set(std::size_t i, double v);

private:
  std::variant<AlignedVector<float>, AlignedVector<double>> store_;
};

// Calls f(T{}) with T = float or double according to dtype.
template <class F>
decltype(auto) dispatch(DType dtype, F&& f) {
  if (dtype == DType::f32) {
    return f(float{});
  }
  return f(double{});
}

namespace detail {

struct Node;
using BackwardFn = std::function<void(Node& self)>;

struct Node {
  Shape shape;
  Buffer data;
  Buffer grad;
  bool has_grad = false;
  bool requires_grad = false;
  bool is_leaf = true;
  std::uint64_t seq = 0;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  DType dtype() const { return data.dtype(); }
  // Allocates a zeroed gradient on first use.
  Buffer& grad_buffer();
};

std::uint64_t next_seq();

}  // namespace detail

class Tensor {
public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, DType dtype = DType::f32);
  static Tensor full(const Shape& shape, double value, DType dtype = DType::f32);
  static Tensor from(const Shape& shape, std::vector<float> values);
  static Tensor from(const Shape& shape, std::vector<double> values);
  static Tensor from_buffer(const Shape& shape, Buffer values);
  static Tensor scalar(double value, DType dtype = DType::f32);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::int64_t dim(int axis) const;
  int ndim() const { return static_cast<int>(shape().size()); }
  std::int64_t numel() const { return numel_of(shape()); }
  DType dtype() const;

  template <class T>
  std::span<const T> data() const {
    return node_->data.as<T>();
  }
  // Only legal on leaves; used by optimizers and data loaders.
  template <class T>
  std::span<T> mutable_data() {
    check_mutable();
    return node_->data.as<T>();
  }
  const Buffer& buffer() const { return node_->data; }
  Buffer& mutable_buffer();

  double item() const;
  double at(std::span<const std::int64_t> index) const;
  double at(std::initializer_list<std::int64_t> index) const {
    return at(std::span<const std::int64_t>(index.begin(), index.size()));
  }
  double flat(std::size_t i) const { return node_->data.get(i); }
  std::vector<double> to_vector() const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const;
  // Snapshot of the accumulated gradient as a fresh leaf tensor.
  Tensor grad() const;
  const Buffer* grad_buffer() const;
  void zero_grad();

  // Reverse sweep from a scalar; accumulates into requires_grad leaves.
  void backward() const;

  Tensor detach() const;
  Tensor clone() const;
  Tensor to(DType dtype) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const char* op_name() const;
  std::size_t parent_count() const;

  // Internal: constructs a result node and wires it into the graph when any
  // input requires grad and recording is enabled.
  static Tensor make_result(const char* op, Shape shape, Buffer data,
                            const std::vector<Tensor>& inputs, detail::BackwardFn backward);
  const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  void check_mutable() const;

  std::shared_ptr<detail::Node> node_;
};

// Disables graph recording for its lifetime (inference, evaluation).
class NoGradGuard {
public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool previous_;
};

bool grad_enabled();

// Throws NumericError if any value is NaN or infinite.
void check_finite(const Buffer& buffer, const char* op);

}  // namespace cpseg
