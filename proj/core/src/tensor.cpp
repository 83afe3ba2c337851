#include "mit/tensor.h"

#include <algorithm>
#include <sstream>
#include <unordered_set>

namespace mit {

namespace {

thread_local bool t_grad_mode = true;
thread_local AllocationStats* t_probe = nullptr;
thread_local std::uint64_t t_probe_id = 0;
thread_local std::uint64_t t_next_probe_id = 1;
thread_local const char* t_tag = nullptr;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

TensorImpl::TensorImpl(Shape s, std::vector<double> d, bool rg)
    : shape(std::move(s)), data(std::move(d)), requires_grad(rg) {
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("tensor: shape " + shape_str(shape) + " holds " + std::to_string(shape_numel(shape)) +
                     " elements but data has " + std::to_string(data.size()));
  }
  for (std::size_t dim : shape) {
    if (dim == 0) throw ShapeError("tensor: zero-sized axis in shape " + shape_str(shape));
  }
  if (t_probe != nullptr) {
    probe_id = t_probe_id;
    t_probe->allocated_floats += data.size();
    t_probe->live_floats += data.size();
    t_probe->peak_live_floats = std::max(t_probe->peak_live_floats, t_probe->live_floats);
    if (t_tag != nullptr) t_probe->by_tag[t_tag] += data.size();
  }
}

TensorImpl::~TensorImpl() {
  if (t_probe != nullptr && probe_id == t_probe_id) t_probe->live_floats -= data.size();
  // Long chains of nodes would otherwise recurse once per link on release.
  std::vector<std::shared_ptr<Node>> pending;
  if (grad_fn && grad_fn.use_count() == 1) pending.push_back(std::move(grad_fn));
  while (!pending.empty()) {
    std::shared_ptr<Node> node = std::move(pending.back());
    pending.pop_back();
    // Closures hold their own references to inputs; drop them first.
    node->backward = nullptr;
    for (auto& input : node->inputs) {
      if (input && input.use_count() == 1 && input->grad_fn && input->grad_fn.use_count() == 1) {
        pending.push_back(std::move(input->grad_fn));
      }
    }
    node->inputs.clear();
  }
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::ones(Shape shape, bool requires_grad) { return full(std::move(shape), 1.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> data(shape_numel(shape), value);
  return from(std::move(shape), std::move(data), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  return Tensor(std::make_shared<detail::TensorImpl>(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

const Shape& Tensor::shape() const {
  if (!impl_) throw std::logic_error("tensor: access to undefined tensor");
  return impl_->shape;
}

std::size_t Tensor::dim(std::ptrdiff_t axis) const {
  const auto r = static_cast<std::ptrdiff_t>(rank());
  const std::ptrdiff_t a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw ShapeError("tensor: axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return shape()[static_cast<std::size_t>(a)];
}

std::size_t Tensor::numel() const { return impl_ ? impl_->data.size() : 0; }

std::span<const double> Tensor::data() const {
  if (!impl_) throw std::logic_error("tensor: access to undefined tensor");
  return impl_->data;
}

std::span<double> Tensor::mutable_data() {
  if (!impl_) throw std::logic_error("tensor: access to undefined tensor");
  if (impl_->grad_fn) throw std::logic_error("tensor: cannot mutate the result of a recorded op");
  return impl_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw ShapeError("at: index rank mismatch for shape " + shape_str(s));
  std::size_t flat = 0;
  std::size_t d = 0;
  for (std::size_t i : index) {
    if (i >= s[d]) throw ShapeError("at: index out of range for shape " + shape_str(s));
    flat = flat * s[d] + i;
    ++d;
  }
  return impl_->data[flat];
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!impl_) throw std::logic_error("tensor: access to undefined tensor");
  if (impl_->grad_fn && !flag) throw std::logic_error("tensor: cannot clear requires_grad on an op result");
  impl_->requires_grad = flag;
}

bool Tensor::is_leaf() const { return impl_ && !impl_->grad_fn; }

bool Tensor::has_grad() const { return impl_ && !impl_->grad.empty(); }

std::span<const double> Tensor::grad() const {
  if (!impl_) throw std::logic_error("tensor: access to undefined tensor");
  return impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_) {
    impl_->grad.clear();
    impl_->grad.shrink_to_fit();
  }
}

const char* Tensor::op_kind() const { return impl_ && impl_->grad_fn ? impl_->grad_fn->kind : "leaf"; }

Tensor Tensor::detach() const {
  if (!impl_) return {};
  auto copy = std::make_shared<detail::TensorImpl>(impl_->shape, impl_->data, false);
  return Tensor(std::move(copy));
}

Tensor Tensor::clone(bool requires_grad) const {
  if (!impl_) return {};
  return Tensor(std::make_shared<detail::TensorImpl>(impl_->shape, impl_->data, requires_grad));
}

void Tensor::backward() const {
  if (!impl_) throw std::logic_error("backward: undefined tensor");
  if (impl_->data.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(impl_->shape));
  }
  if (!impl_->requires_grad) return;

  // Iterative post-order DFS; reversing it gives a topological order where
  // every node is processed after all of its consumers.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  std::vector<std::pair<detail::TensorImpl*, std::size_t>> stack;
  stack.emplace_back(impl_.get(), 0);
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    const auto* fn = node->grad_fn.get();
    if (fn != nullptr && next < fn->inputs.size()) {
      detail::TensorImpl* child = fn->inputs[next++].get();
      if (child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
      continue;
    }
    order.push_back(node);
    stack.pop_back();
  }

  impl_->grad.assign(1, 1.0);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::TensorImpl* node = *it;
    if (!node->grad_fn) continue;
    if (!node->grad.empty() && node->grad_fn->backward) node->grad_fn->backward(node->grad);
    node->grad.clear();
    node->grad.shrink_to_fit();
  }
}

namespace {

template <class Inputs>
Tensor make_result_impl(Shape shape, std::vector<double> data, const Inputs& inputs, const char* kind,
                        detail::BackwardFn backward, bool needs_grad) {
  Tensor out = Tensor::from(std::move(shape), std::move(data), false);
  if (!needs_grad || !grad_mode_enabled()) return out;
  auto node = std::make_shared<detail::Node>();
  node->kind = kind;
  for (const auto& t : inputs) {
    const Tensor& ref = *t;
    if (ref.requires_grad()) node->inputs.push_back(ref.impl_ptr());
  }
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

}  // namespace

Tensor make_op_result(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
                      const char* kind, detail::BackwardFn backward) {
  const bool needs = any_requires_grad(inputs);
  return make_result_impl(std::move(shape), std::move(data), inputs, kind, std::move(backward), needs);
}

Tensor make_op_result(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, const char* kind,
                      detail::BackwardFn backward) {
  bool needs = false;
  std::vector<const Tensor*> ptrs;
  ptrs.reserve(inputs.size());
  for (const auto& t : inputs) {
    needs = needs || t.requires_grad();
    ptrs.push_back(&t);
  }
  return make_result_impl(std::move(shape), std::move(data), ptrs, kind, std::move(backward), needs);
}

std::vector<double>* grad_sink(const Tensor& t) {
  if (!t.requires_grad()) return nullptr;
  auto* impl = t.impl();
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return &impl->grad;
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t != nullptr && t->requires_grad()) return true;
  }
  return false;
}

NoGradGuard::NoGradGuard() : previous_(t_grad_mode) { t_grad_mode = false; }
NoGradGuard::~NoGradGuard() { t_grad_mode = previous_; }
bool grad_mode_enabled() { return t_grad_mode; }

AllocationProbe::AllocationProbe() : previous_(t_probe), previous_id_(t_probe_id) {
  t_probe = &stats_;
  t_probe_id = t_next_probe_id++;
}

AllocationProbe::~AllocationProbe() {
  t_probe = previous_;
  t_probe_id = previous_id_;
}

const AllocationStats& AllocationProbe::stats() const { return stats_; }

AllocationTag::AllocationTag(const char* tag) : previous_(t_tag) { t_tag = tag; }
AllocationTag::~AllocationTag() { t_tag = previous_; }

}  // namespace mit
