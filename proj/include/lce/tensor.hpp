#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace lce {

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : Error { using Error::Error; };
struct BoundsError : Error { using Error::Error; };
struct ValueError : Error { using Error::Error; };
struct DegenerateRowError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct DataError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };

// Additive attention-mask convention: entries are either 0 (allowed) or the
// forbidden sentinel. Anything at or below the threshold is treated as
// forbidden and its post-softmax probability is hard-zeroed.
constexpr double kMaskForbidden = -1e9;
constexpr double kMaskForbiddenThreshold = -1e8;

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until the first accumulation reaches it
  bool requires_grad = false;

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), T(0));
  }
};

// Value-semantic handle to a shared tensor node; copies alias the same
// storage. Values are immutable once produced by an op, except for grad
// accumulation during a single-threaded backward pass.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<TensorNode<T>>()) {
    node_->shape = std::move(shape);
    node_->value.assign(size_t(shape_numel(node_->shape)), fill);
  }

  Tensor(Shape shape, std::vector<T> data) : node_(std::make_shared<TensorNode<T>>()) {
    if (shape_numel(shape) != int64_t(data.size()))
      throw ShapeError("tensor: shape " + shape_str(shape) + " does not match data length " +
                       std::to_string(data.size()));
    node_->shape = std::move(shape);
    node_->value = std::move(data);
  }

  static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int64_t size() const { return int64_t(node_->value.size()); }

  std::vector<T>& data() { return node_->value; }
  const std::vector<T>& data() const { return node_->value; }

  // Gradient buffer; allocated zero-filled on first access.
  std::vector<T>& grad() {
    node_->ensure_grad();
    return node_->grad;
  }
  const std::vector<T>& grad_raw() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  void clear_grad() { node_->grad.clear(); }

  bool requires_grad() const { return node_->requires_grad; }
  Tensor& set_requires_grad(bool rg = true) {
    node_->requires_grad = rg;
    return *this;
  }

  T item() const {
    if (size() != 1)
      throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node_->value[0];
  }

  const std::shared_ptr<TensorNode<T>>& node() const { return node_; }

  // Deep copy of values; grad not copied.
  Tensor clone() const {
    Tensor out(node_->shape, node_->value);
    out.node_->requires_grad = node_->requires_grad;
    return out;
  }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

// Reverse-mode tape. Ops append their backward closure as they execute, so
// the record is topologically ordered by construction; backward() seeds the
// loss gradient with 1 and replays newest-first. Gradients from multiple
// uses of a tensor accumulate by summation.
template <typename T>
class Tape {
 public:
  void record(std::function<void()> fn) { ops_.push_back(std::move(fn)); }
  size_t num_ops() const { return ops_.size(); }

  void backward(Tensor<T>& loss) {
    if (loss.size() != 1)
      throw ShapeError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
    if (!loss.requires_grad())
      throw ValueError("backward: loss does not require grad; it was not produced through a recorded op");
    loss.grad()[0] += T(1);
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

}  // namespace lce
