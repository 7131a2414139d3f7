#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "stmoge/errors.hpp"

namespace stmoge {

/// Dense row-major double tensor. Copies are shallow: two Tensor handles may
/// share the same storage, which is how the universal and auxiliary experts
/// alias one parameter set. Gradient storage lives next to the values and is
/// allocated lazily on the first accumulation.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int64_t> shape, bool requires_grad = false);

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<int64_t> shape, double value, bool requires_grad = false);
  static Tensor from_values(std::vector<int64_t> shape, std::vector<double> values,
                            bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return d_ != nullptr; }
  const std::vector<int64_t>& shape() const { return d_->shape; }
  int64_t rank() const { return static_cast<int64_t>(d_->shape.size()); }
  int64_t size() const { return static_cast<int64_t>(d_->values.size()); }
  int64_t extent(int64_t axis) const { return d_->shape[static_cast<size_t>(axis)]; }
  bool is_scalar() const { return d_ && d_->values.size() == 1; }

  double* data() { return d_->values.data(); }
  const double* data() const { return d_->values.data(); }
  std::vector<double>& values() { return d_->values; }
  const std::vector<double>& values() const { return d_->values; }

  bool requires_grad() const { return d_ && d_->requires_grad; }
  void set_requires_grad(bool b);
  /// Gradient buffer, allocated zero on first access. Same shape as values.
  /// Const on the handle: gradients live in the shared storage.
  double* grad() const;
  const std::vector<double>& grad_values() const;
  bool has_grad() const { return d_ && !d_->grad.empty(); }
  void zero_grad() const;
  void accumulate_grad(std::span<const double> g) const;

  double value() const;       // scalar accessor
  double grad_value() const;  // scalar gradient accessor

  // Row-major element access.
  double& at(int64_t i) { return d_->values[static_cast<size_t>(i)]; }
  double at(int64_t i) const { return d_->values[static_cast<size_t>(i)]; }
  double& at(int64_t i, int64_t j) { return d_->values[static_cast<size_t>(i * extent(1) + j)]; }
  double at(int64_t i, int64_t j) const {
    return d_->values[static_cast<size_t>(i * extent(1) + j)];
  }
  double& at(int64_t i, int64_t j, int64_t k) {
    return d_->values[static_cast<size_t>((i * extent(1) + j) * extent(2) + k)];
  }
  double at(int64_t i, int64_t j, int64_t k) const {
    return d_->values[static_cast<size_t>((i * extent(1) + j) * extent(2) + k)];
  }
  double& at(int64_t i, int64_t j, int64_t k, int64_t l) {
    return d_->values[static_cast<size_t>(((i * extent(1) + j) * extent(2) + k) * extent(3) + l)];
  }
  double at(int64_t i, int64_t j, int64_t k, int64_t l) const {
    return d_->values[static_cast<size_t>(((i * extent(1) + j) * extent(2) + k) * extent(3) + l)];
  }

  bool all_finite() const;
  bool same_storage(const Tensor& other) const { return d_ == other.d_; }
  Tensor clone() const;  // deep copy of values, detached (no grad flag carry)

  std::string shape_string() const;
  static std::string shape_string(const std::vector<int64_t>& shape);

 private:
  struct Data {
    std::vector<int64_t> shape;
    std::vector<double> values;
    std::vector<double> grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Data> d_;
};

/// Named trainable tensor. Identifiers are unique within one ParamStore.
struct Parameter {
  std::string name;
  Tensor value;
};

/// Ordered registry of parameters; iteration order is registration order,
/// which keeps optimizer updates and checkpoints deterministic.
class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor t);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const { return index_.count(name) > 0; }
  std::span<const Parameter> all() const { return params_; }
  std::span<Parameter> all() { return params_; }
  size_t count() const { return params_.size(); }
  void zero_grads();
  int64_t total_size() const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, size_t> index_;
};

/// Ordered record of primitive applications. Each forward primitive appends
/// one entry; backward() replays the adjoints once each, in reverse order.
class Tape {
 public:
  void record(const char* op, Tensor output, std::function<void()> adjoint);

  /// Seeds d(loss)/d(loss) = 1 and replays all recorded adjoints in reverse.
  /// The loss must be scalar.
  void backward(const Tensor& loss);

  void clear();
  size_t size() const { return entries_.size(); }

  /// Op tag of the first recorded output holding a non-finite value, or
  /// empty string when everything is finite. Used for divergence diagnostics.
  std::string first_nonfinite() const;

 private:
  struct Entry {
    const char* op;
    Tensor output;
    std::function<void()> adjoint;
  };
  std::vector<Entry> entries_;
};

/// Writes d(loss)/d(param) into every parameter of the store: parameters not
/// reached by the tape receive exactly zero.
void backward(Tape& tape, const Tensor& loss, ParamStore& params);

}  // namespace stmoge
