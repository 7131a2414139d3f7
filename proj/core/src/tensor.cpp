#include "stmoge/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>
#include <utility>

namespace stmoge {

namespace {
int64_t shape_product(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t e : shape) n *= e;
  return n;
}
}  // namespace

Tensor::Tensor(std::vector<int64_t> shape, bool requires_grad) {
  d_ = std::make_shared<Data>();
  const int64_t n = shape_product(shape);
  d_->shape = std::move(shape);
  d_->values.assign(static_cast<size_t>(n), 0.0);
  d_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(std::vector<int64_t> shape, bool requires_grad) {
  return Tensor(std::move(shape), requires_grad);
}

Tensor Tensor::full(std::vector<int64_t> shape, double value, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.d_->values.begin(), t.d_->values.end(), value);
  return t;
}

Tensor Tensor::from_values(std::vector<int64_t> shape, std::vector<double> values,
                           bool requires_grad) {
  const int64_t n = shape_product(shape);
  if (n != static_cast<int64_t>(values.size())) {
    throw DimensionError("from_values: shape " + shape_string(shape) + " holds " +
                         std::to_string(n) + " elements but " + std::to_string(values.size()) +
                         " values were given");
  }
  Tensor t;
  t.d_ = std::make_shared<Data>();
  t.d_->shape = std::move(shape);
  t.d_->values = std::move(values);
  t.d_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_values({}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool b) { d_->requires_grad = b; }

double* Tensor::grad() const {
  if (d_->grad.empty()) d_->grad.assign(d_->values.size(), 0.0);
  return d_->grad.data();
}

const std::vector<double>& Tensor::grad_values() const {
  static const std::vector<double> empty;
  return d_ && !d_->grad.empty() ? d_->grad : empty;
}

void Tensor::zero_grad() const {
  if (!d_->grad.empty()) std::fill(d_->grad.begin(), d_->grad.end(), 0.0);
}

void Tensor::accumulate_grad(std::span<const double> g) const {
  double* gp = grad();
  for (size_t i = 0; i < g.size(); ++i) gp[i] += g[i];
}

double Tensor::value() const {
  if (!is_scalar()) {
    throw ContractError("value(): tensor of shape " + shape_string() + " is not scalar");
  }
  return d_->values[0];
}

double Tensor::grad_value() const {
  if (!is_scalar()) {
    throw ContractError("grad_value(): tensor of shape " + shape_string() + " is not scalar");
  }
  return d_->grad.empty() ? 0.0 : d_->grad[0];
}

bool Tensor::all_finite() const {
  for (double v : d_->values) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.d_ = std::make_shared<Data>();
  t.d_->shape = d_->shape;
  t.d_->values = d_->values;
  t.d_->requires_grad = false;
  return t;
}

std::string Tensor::shape_string(const std::vector<int64_t>& shape) {
  std::ostringstream out;
  out << "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) out << "x";
    out << shape[i];
  }
  out << "]";
  return out.str();
}

std::string Tensor::shape_string() const { return shape_string(d_->shape); }

Tensor ParamStore::add(const std::string& name, Tensor t) {
  if (index_.count(name)) {
    throw ContractError("parameter identifier not unique: " + name);
  }
  t.set_requires_grad(true);
  index_[name] = params_.size();
  params_.push_back(Parameter{name, t});
  return t;
}

const Tensor& ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ContractError("unknown parameter: " + name);
  return params_[it->second].value;
}

void ParamStore::zero_grads() {
  for (auto& p : params_) {
    p.value.grad();  // ensure allocated so backward always leaves a defined gradient
    p.value.zero_grad();
  }
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void Tape::record(const char* op, Tensor output, std::function<void()> adjoint) {
  entries_.push_back(Entry{op, std::move(output), std::move(adjoint)});
}

void Tape::backward(const Tensor& loss) {
  if (!loss.is_scalar()) {
    throw ContractError("backward: loss must be scalar, got shape " + loss.shape_string());
  }
  Tensor seed = loss;
  seed.grad()[0] = 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    if (it->adjoint) it->adjoint();
  }
}

void Tape::clear() { entries_.clear(); }

std::string Tape::first_nonfinite() const {
  for (const auto& e : entries_) {
    if (!e.output.all_finite()) return e.op;
  }
  return {};
}

void backward(Tape& tape, const Tensor& loss, ParamStore& params) {
  params.zero_grads();
  tape.backward(loss);
}

}  // namespace stmoge
