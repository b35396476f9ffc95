#pragma once

// Dense N-d tensor with reverse-mode autodiff. Feature maps use N,C,H,W
// layout; detect-head outputs are permuted to N,S,S,(B*5+C) before decoding.
// Instantiated with double for gradient checks and float for training.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <vector>

namespace gridsight {

// CLI exit-code contract: input errors -> 2, numeric failures -> 3.
struct input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct numeric_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<int>;

inline int64_t numel(const Shape& s) {
  int64_t n = 1;
  for (int e : s) {
    if (e <= 0) throw input_error("tensor: non-positive extent " + std::to_string(e));
    n *= e;
  }
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

// Graph recording switch, one per thread. Forward passes under NoGradGuard
// build no graph and keep no activations.
class GradMode {
 public:
  static bool enabled() { return flag(); }
  static void set(bool v) { flag() = v; }

 private:
  static bool& flag() {
    thread_local bool f = true;
    return f;
  }
};

class NoGradGuard {
 public:
  NoGradGuard() : prev_(GradMode::enabled()) { GradMode::set(false); }
  ~NoGradGuard() { GradMode::set(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// Forward kernel invocations on this thread; used to compare the cost of
// train-mode and stripped-model forwards.
inline uint64_t& op_counter_ref() {
  thread_local uint64_t n = 0;
  return n;
}
inline uint64_t op_count() { return op_counter_ref(); }
inline void reset_op_count() { op_counter_ref() = 0; }
inline void count_op() { ++op_counter_ref(); }

template <typename T>
class Tensor;

template <typename T>
struct TensorData;

// One backward-graph record: the op name, the inputs, and a closure that
// reads the output's grad and accumulates into the inputs' grads.
template <typename T>
struct Node {
  const char* op;
  std::vector<Tensor<T>> parents;
  std::function<void(const TensorData<T>& out)> backprop;
};

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;  // empty until first accumulation
  std::unique_ptr<Node<T>> node;
  bool requires_grad = false;

  bool tracked() const { return requires_grad || node != nullptr; }
  void ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), T(0));
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  static Tensor zeros(Shape shape) {
    auto d = std::make_shared<TensorData<T>>();
    d->value.assign(static_cast<size_t>(numel(shape)), T(0));
    d->shape = std::move(shape);
    return Tensor(std::move(d));
  }

  static Tensor full(Shape shape, T v) {
    Tensor t = zeros(std::move(shape));
    for (T& x : t.data()) x = v;
    return t;
  }

  static Tensor scalar(T v) { return full({1}, v); }

  static Tensor from(Shape shape, std::vector<T> values) {
    if (static_cast<int64_t>(values.size()) != numel(shape))
      throw input_error("tensor: " + std::to_string(values.size()) +
                        " values for shape " + shape_str(shape));
    auto d = std::make_shared<TensorData<T>>();
    d->shape = std::move(shape);
    d->value = std::move(values);
    return Tensor(std::move(d));
  }

  bool defined() const { return d_ != nullptr; }
  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape.at(static_cast<size_t>(i)); }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(d_->value.size()); }

  std::span<T> data() { return d_->value; }
  std::span<const T> data() const { return d_->value; }

  T item() const {
    if (size() != 1) throw input_error("item: tensor has " + std::to_string(size()) + " elements");
    return d_->value[0];
  }

  bool requires_grad() const { return d_->requires_grad; }
  Tensor& set_requires_grad(bool v) {
    d_->requires_grad = v;
    return *this;
  }

  bool has_grad() const { return !d_->grad.empty(); }
  std::span<T> grad() {
    d_->ensure_grad();
    return d_->grad;
  }
  std::span<const T> grad() const {
    const_cast<TensorData<T>*>(d_.get())->ensure_grad();
    return d_->grad;
  }
  void zero_grad() {
    for (T& g : d_->grad) g = T(0);
  }

  // Shallow view with a new shape over the same storage (no graph record;
  // used only on leaves / constants).
  Tensor reshaped(Shape shape) const {
    if (numel(shape) != size())
      throw input_error("reshape: " + shape_str(shape) + " incompatible with " +
                        shape_str(d_->shape));
    auto d = std::make_shared<TensorData<T>>(*d_);
    d->shape = std::move(shape);
    d->node = nullptr;
    return Tensor(std::move(d));
  }

  TensorData<T>* impl() const { return d_.get(); }

  bool same_storage(const Tensor& o) const { return d_ == o.d_; }

 private:
  explicit Tensor(std::shared_ptr<TensorData<T>> d) : d_(std::move(d)) {}
  std::shared_ptr<TensorData<T>> d_;

  template <typename U>
  friend Tensor<U> make_tracked(const char* op, Shape shape, std::vector<U> value,
                                std::vector<Tensor<U>> parents,
                                std::function<void(const TensorData<U>&)> backprop);
};

// Wraps an op result: records a graph node when grad mode is on and any
// input is tracked.
template <typename T>
Tensor<T> make_tracked(const char* op, Shape shape, std::vector<T> value,
                       std::vector<Tensor<T>> parents,
                       std::function<void(const TensorData<T>&)> backprop) {
  count_op();
  auto d = std::make_shared<TensorData<T>>();
  d->shape = std::move(shape);
  d->value = std::move(value);
  if (GradMode::enabled()) {
    bool any = false;
    for (const auto& p : parents)
      if (p.impl()->tracked()) any = true;
    if (any) {
      d->node = std::make_unique<Node<T>>();
      d->node->op = op;
      d->node->parents = std::move(parents);
      d->node->backprop = std::move(backprop);
    }
  }
  return Tensor<T>(std::move(d));
}

// Reverse-mode sweep from a scalar loss. Gradients accumulate into every
// reachable tracked tensor; call again to add another pass.
template <typename T>
void backward(const Tensor<T>& loss) {
  if (loss.size() != 1)
    throw input_error("backward: loss must be a scalar, got " + shape_str(loss.shape()));
  if (!std::isfinite(static_cast<double>(loss.data()[0])))
    throw numeric_error("backward: loss is not finite");

  // Post-order DFS over the node graph (iterative; graphs can be deep).
  std::vector<TensorData<T>*> order;
  std::unordered_set<TensorData<T>*> seen;
  std::vector<std::pair<TensorData<T>*, size_t>> stack;
  if (loss.impl()->node) {
    stack.emplace_back(loss.impl(), 0);
    seen.insert(loss.impl());
  }
  while (!stack.empty()) {
    auto& [td, next] = stack.back();
    const auto& parents = td->node->parents;
    bool descended = false;
    while (next < parents.size()) {
      TensorData<T>* p = parents[next++].impl();
      if (p->node && !seen.count(p)) {
        seen.insert(p);
        stack.emplace_back(p, 0);
        descended = true;
        break;
      }
    }
    if (descended) continue;
    order.push_back(td);
    stack.pop_back();
  }

  loss.impl()->ensure_grad();
  loss.impl()->grad[0] += T(1);

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorData<T>* td = *it;
    td->ensure_grad();
    for (T g : td->grad)
      if (std::isnan(static_cast<double>(g)))
        throw numeric_error(std::string("backward: NaN gradient at op ") + td->node->op);
    td->node->backprop(*td);
  }
}

}  // namespace gridsight
