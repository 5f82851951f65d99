#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace botmoe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  // Allocated (same size as data) iff requires_grad.
  std::vector<double> grad;
  bool requires_grad = false;
  // True for tensors not produced by a recorded op (parameters, inputs).
  bool is_leaf = true;
};

/// Dense row-major tensor of doubles. Copies share storage; an op never
/// mutates its inputs, so a Tensor referenced by the tape stays valid until
/// the tape is reset.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  bool requires_grad() const { return impl_->requires_grad; }
  bool is_leaf() const { return impl_->is_leaf; }

  std::span<const double> data() const { return impl_->data; }
  std::span<const double> grad() const { return impl_->grad; }
  // Writable access is only meant for leaves (optimizer updates, test setup).
  std::span<double> mutable_data() { return impl_->data; }
  std::span<double> mutable_grad() { return impl_->grad; }

  double item() const;
  double operator[](std::size_t flat) const { return impl_->data[flat]; }
  double at(std::size_t row, std::size_t col) const;

  void zero_grad();
  // Detached copy of the values (never requires grad).
  Tensor detach() const;
  // Deep copy that keeps requires_grad (used to snapshot parameters).
  Tensor clone() const;

  TensorImpl* impl() const { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& shared() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

/// Ordered record of differentiable ops executed on the current thread.
/// Recording order is a topological order, so replaying it backwards is a
/// valid reverse-mode sweep.
class Tape {
 public:
  struct Record {
    std::string op;
    std::vector<Tensor> inputs;
    Tensor output;
    std::function<void()> backward;
  };

  static Tape& current();

  bool enabled() const { return enabled_; }
  void set_enabled(bool on) { enabled_ = on; }
  std::size_t size() const { return records_.size(); }
  const std::vector<Record>& records() const { return records_; }

  void record(std::string_view op, std::vector<Tensor> inputs, Tensor output,
              std::function<void()> backward);

  // Populates grads of every requires_grad ancestor of `loss`. Leaf grads
  // accumulate across calls; intermediate grads are recomputed.
  void backward(const Tensor& loss);

  // Drops all records (and the activations they keep alive).
  void reset();

 private:
  std::vector<Record> records_;
  bool enabled_ = true;
};

/// Disables recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape::current().enabled()) { Tape::current().set_enabled(false); }
  ~NoGradGuard() { Tape::current().set_enabled(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

void backward(const Tensor& loss);

}  // namespace botmoe
