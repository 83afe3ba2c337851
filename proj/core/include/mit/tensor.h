#pragma once

// Dense float64 tensors with tape-based reverse-mode differentiation.
//
// A Tensor is a cheap handle to shared storage. Operations on tensors that
// require gradients record a node holding their inputs and a local gradient
// rule; `backward()` walks those nodes in reverse topological order.
// Tensors that do not require gradients record nothing and are immutable
// once built, so frozen weights can be shared read-only across threads.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mit {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class Tensor;

namespace detail {

struct TensorImpl;

using BackwardFn = std::function<void(std::span<const double> grad_out)>;

struct Node {
  const char* kind = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;
  std::uint64_t probe_id = 0;

  TensorImpl(Shape s, std::vector<double> d, bool rg);
  ~TensorImpl();
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;
};

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::ptrdiff_t axis) const;
  std::size_t numel() const;

  std::span<const double> data() const;
  // Writable view of a leaf's storage. Throws for op results so recorded
  // graphs can never be invalidated behind the tape's back.
  std::span<double> mutable_data();
  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;
  bool has_grad() const;
  // Empty when no gradient has been accumulated.
  std::span<const double> grad() const;
  void zero_grad();

  // Reverse-mode sweep from a scalar. Accumulates into every reachable
  // leaf that requires grad; intermediate gradients are released.
  void backward() const;

  // Same data, no history, requires_grad=false.
  Tensor detach() const;
  // Deep copy of data as a fresh leaf.
  Tensor clone(bool requires_grad = false) const;

  const char* op_kind() const;

  detail::TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<detail::TensorImpl>& impl_ptr() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_op_result(Shape, std::vector<double>, std::initializer_list<const Tensor*>,
                               const char*, detail::BackwardFn);
  friend Tensor make_op_result(Shape, std::vector<double>, const std::vector<Tensor>&, const char*,
                               detail::BackwardFn);
};

// Creates the output of an op, wiring a graph node when any input requires
// grad. `backward` may be empty when no input requires grad.
Tensor make_op_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                      const char* kind, detail::BackwardFn backward);
Tensor make_op_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs,
                      const char* kind, detail::BackwardFn backward);

// Gradient buffer of `t` for accumulation, or nullptr when t does not
// require grad. Allocates zeros on first use.
std::vector<double>* grad_sink(const Tensor& t);

bool any_requires_grad(std::initializer_list<const Tensor*> inputs);

// Scoped gradient recording switch. Inside a NoGradGuard every op result is
// a plain constant even when inputs require grad.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_mode_enabled();

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

// ---------------------------------------------------------------------------
// Allocation instrumentation.
//
// While an AllocationProbe is alive on a thread, every tensor data
// allocation on that thread is counted, optionally attributed to the tag of
// the innermost AllocationTag scope.

struct AllocationStats {
  std::size_t allocated_floats = 0;  // cumulative
  std::size_t live_floats = 0;       // allocated minus released, since probe start
  std::size_t peak_live_floats = 0;
  std::map<std::string, std::size_t> by_tag;
};

class AllocationProbe {
 public:
  AllocationProbe();
  ~AllocationProbe();
  AllocationProbe(const AllocationProbe&) = delete;
  AllocationProbe& operator=(const AllocationProbe&) = delete;
  const AllocationStats& stats() const;

 private:
  AllocationStats* previous_;
  std::uint64_t previous_id_;
  AllocationStats stats_;
};

class AllocationTag {
 public:
  explicit AllocationTag(const char* tag);
  ~AllocationTag();
  AllocationTag(const AllocationTag&) = delete;
  AllocationTag& operator=(const AllocationTag&) = delete;

 private:
  const char* previous_;
};

}  // namespace mit
