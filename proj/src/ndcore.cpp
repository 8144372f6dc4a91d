#include "uch/ndcore.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include <Eigen/Core>

#include "uch/errors.hpp"

namespace uch {

namespace {

using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstMap = Eigen::Map<const RowMajor>;
using MutMap = Eigen::Map<RowMajor>;

ConstMap view(const Matrix& m) { return ConstMap(m.values().data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())); }
MutMap view(Matrix& m) { return MutMap(m.values().data(), Eigen::Index(m.rows()), Eigen::Index(m.cols())); }

void require_same_shape(const char* op, const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b))
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_string(a) + " vs " + shape_string(b));
}

template <typename F>
Matrix map_values(const Matrix& x, F&& f) {
  Matrix out(x.rows(), x.cols());
  auto src = x.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = f(src[i]);
  return out;
}

template <typename F>
Matrix zip_values(const Matrix& a, const Matrix& b, F&& f) {
  Matrix out(a.rows(), a.cols());
  auto x = a.values();
  auto y = b.values();
  auto dst = out.values();
  for (std::size_t i = 0; i < x.size(); ++i) dst[i] = f(x[i], y[i]);
  return out;
}

double sigmoid_value(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

Tape& tape_of(const Var& v) {
  if (!v.valid()) throw ContractError("operation on an unbound Var");
  return *v.tape();
}

Tape& common_tape(const Var& a, const Var& b) {
  Tape& t = tape_of(a);
  if (&t != &tape_of(b)) throw ContractError("operands recorded on different tapes");
  return t;
}

}  // namespace

// ---------------------------------------------------------------------------
// Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill) : rows_(rows), cols_(cols), values_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
    : rows_(rows), cols_(cols), values_(std::move(values)) {
  if (values_.size() != rows * cols) {
    throw ShapeError("matrix " + std::to_string(rows) + "x" + std::to_string(cols) + " given " +
                     std::to_string(values_.size()) + " values");
  }
}

Matrix Matrix::from_rows(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r == 0 ? 0 : rows.begin()->size();
  std::vector<double> values;
  values.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) throw ShapeError("from_rows: ragged initializer");
    values.insert(values.end(), row.begin(), row.end());
  }
  return Matrix(r, c, std::move(values));
}

Matrix Matrix::identity(std::size_t n) {
  Matrix m(n, n);
  for (std::size_t i = 0; i < n; ++i) m(i, i) = 1.0;
  return m;
}

bool Matrix::all_finite() const noexcept {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Matrix Matrix::gather_rows(std::span<const std::size_t> indices) const {
  Matrix out(indices.size(), cols_);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= rows_) throw ContractError("gather_rows: row index out of range");
    std::copy_n(values_.begin() + std::ptrdiff_t(indices[i] * cols_), cols_, out.values_.begin() + std::ptrdiff_t(i * cols_));
  }
  return out;
}

std::string shape_string(const Matrix& m) {
  std::ostringstream os;
  os << '[' << m.rows() << 'x' << m.cols() << ']';
  return os.str();
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ, " + shape_string(a) + " x " + shape_string(b));
  Matrix out(a.rows(), b.cols());
  if (a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b);
  return out;
}

Matrix matmul_transpose_a(const Matrix& a, const Matrix& b) {
  if (a.rows() != b.rows()) throw ShapeError("matmul_transpose_a: " + shape_string(a) + "^T x " + shape_string(b));
  Matrix out(a.cols(), b.cols());
  if (a.rows() == 0) return out;
  view(out).noalias() = view(a).transpose() * view(b);
  return out;
}

Matrix matmul_transpose_b(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) throw ShapeError("matmul_transpose_b: " + shape_string(a) + " x " + shape_string(b) + "^T");
  Matrix out(a.rows(), b.rows());
  if (a.cols() == 0) return out;
  view(out).noalias() = view(a) * view(b).transpose();
  return out;
}

const char* op_name(OpKind kind) {
  switch (kind) {
    case OpKind::leaf: return "leaf";
    case OpKind::matmul: return "matmul";
    case OpKind::add: return "add";
    case OpKind::add_row: return "add_row";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scale: return "scale";
    case OpKind::add_scalar: return "add_scalar";
    case OpKind::tanh: return "tanh";
    case OpKind::relu: return "relu";
    case OpKind::sigmoid: return "sigmoid";
    case OpKind::square: return "square";
    case OpKind::log: return "log";
    case OpKind::clamp: return "clamp";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
  }
  return "?";
}

// ---------------------------------------------------------------------------
// Var / Gradients

const Matrix& Var::value() const { return tape_of(*this).value(*this); }

double Var::scalar() const {
  const Matrix& v = value();
  if (v.rows() != 1 || v.cols() != 1) throw ContractError("scalar(): node has shape " + shape_string(v));
  return v(0, 0);
}

Matrix Gradients::of(const Var& v) const {
  if (tape_ == nullptr || v.tape() != tape_) throw ContractError("gradient requested for a Var from another tape");
  if (v.id() < adjoints_.size() && !adjoints_[v.id()].empty()) return adjoints_[v.id()];
  const Matrix& value = tape_->value(v);
  return Matrix(value.rows(), value.cols());
}

// ---------------------------------------------------------------------------
// Tape

void Tape::check_owner(const Var& v) const {
  if (v.tape() != this || v.id() >= nodes_.size()) throw ContractError("Var does not belong to this tape");
}

Var Tape::variable(Matrix value) {
  Node node;
  node.value = std::move(value);
  node.requires_grad = true;
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

Var Tape::constant(Matrix value) {
  Node node;
  node.value = std::move(value);
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

const Matrix& Tape::value(const Var& v) const {
  check_owner(v);
  return nodes_[v.id()].value;
}

bool Tape::requires_grad(const Var& v) const {
  check_owner(v);
  return nodes_[v.id()].requires_grad;
}

void Tape::inject_fault(OpKind kind, double factor) {
  fault_kind_ = kind;
  fault_factor_ = factor;
}

std::vector<bool> Tape::branch_pattern() const {
  std::vector<bool> pattern;
  for (const Node& node : nodes_) {
    if (node.kind != OpKind::relu && node.kind != OpKind::clamp) continue;
    for (double v : nodes_[node.inputs[0]].value.values()) {
      if (node.kind == OpKind::relu) {
        pattern.push_back(v > 0.0);
      } else {
        pattern.push_back(v < node.p0);
        pattern.push_back(v > node.p1);
      }
    }
  }
  return pattern;
}

Var Tape::record(OpKind kind, Matrix value, std::initializer_list<Var> inputs, double p0, double p1) {
  Node node;
  node.kind = kind;
  node.value = std::move(value);
  node.p0 = p0;
  node.p1 = p1;
  for (const Var& in : inputs) {
    check_owner(in);
    node.inputs[node.arity++] = in.id();
    node.requires_grad = node.requires_grad || nodes_[in.id()].requires_grad;
  }
  nodes_.push_back(std::move(node));
  return Var(this, nodes_.size() - 1);
}

void Tape::accumulate(std::vector<Matrix>& adjoints, std::size_t target, Matrix contribution) const {
  if (!nodes_[target].requires_grad) return;
  Matrix& slot = adjoints[target];
  if (slot.empty()) {
    slot = std::move(contribution);
    return;
  }
  auto dst = slot.values();
  auto src = contribution.values();
  for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
}

void Tape::propagate(const Node& node, const Matrix& upstream, std::vector<Matrix>& adjoints) const {
  const double fault = node.kind == fault_kind_ ? fault_factor_ : 1.0;
  auto emit = [&](std::size_t target, Matrix contribution) {
    if (fault != 1.0)
      for (double& v : contribution.values()) v *= fault;
    accumulate(adjoints, target, std::move(contribution));
  };
  const std::size_t in0 = node.inputs[0];
  const std::size_t in1 = node.inputs[1];
  const Matrix& y = node.value;

  switch (node.kind) {
    case OpKind::leaf:
      return;
    case OpKind::matmul:
      if (nodes_[in0].requires_grad) emit(in0, matmul_transpose_b(upstream, nodes_[in1].value));
      if (nodes_[in1].requires_grad) emit(in1, matmul_transpose_a(nodes_[in0].value, upstream));
      return;
    case OpKind::add:
      emit(in0, upstream);
      emit(in1, upstream);
      return;
    case OpKind::add_row: {
      emit(in0, upstream);
      if (nodes_[in1].requires_grad) {
        Matrix col_sums(1, upstream.cols());
        for (std::size_t r = 0; r < upstream.rows(); ++r)
          for (std::size_t c = 0; c < upstream.cols(); ++c) col_sums(0, c) += upstream(r, c);
        emit(in1, std::move(col_sums));
      }
      return;
    }
    case OpKind::sub:
      emit(in0, upstream);
      if (nodes_[in1].requires_grad) emit(in1, map_values(upstream, [](double g) { return -g; }));
      return;
    case OpKind::mul:
      if (nodes_[in0].requires_grad) emit(in0, zip_values(upstream, nodes_[in1].value, [](double g, double b) { return g * b; }));
      if (nodes_[in1].requires_grad) emit(in1, zip_values(upstream, nodes_[in0].value, [](double g, double a) { return g * a; }));
      return;
    case OpKind::scale: {
      const double c = node.p0;
      emit(in0, map_values(upstream, [c](double g) { return g * c; }));
      return;
    }
    case OpKind::add_scalar:
      emit(in0, upstream);
      return;
    case OpKind::tanh:
      emit(in0, zip_values(upstream, y, [](double g, double t) { return g * (1.0 - t * t); }));
      return;
    case OpKind::relu:
      emit(in0, zip_values(upstream, nodes_[in0].value, [](double g, double x) { return x > 0.0 ? g : 0.0; }));
      return;
    case OpKind::sigmoid:
      emit(in0, zip_values(upstream, y, [](double g, double s) { return g * s * (1.0 - s); }));
      return;
    case OpKind::square:
      emit(in0, zip_values(upstream, nodes_[in0].value, [](double g, double x) { return 2.0 * g * x; }));
      return;
    case OpKind::log:
      emit(in0, zip_values(upstream, nodes_[in0].value, [](double g, double x) { return g / x; }));
      return;
    case OpKind::clamp: {
      const double lo = node.p0;
      const double hi = node.p1;
      emit(in0, zip_values(upstream, nodes_[in0].value, [lo, hi](double g, double x) { return x >= lo && x <= hi ? g : 0.0; }));
      return;
    }
    case OpKind::sum: {
      const Matrix& x = nodes_[in0].value;
      emit(in0, Matrix(x.rows(), x.cols(), upstream(0, 0)));
      return;
    }
    case OpKind::mean: {
      const Matrix& x = nodes_[in0].value;
      emit(in0, Matrix(x.rows(), x.cols(), upstream(0, 0) / static_cast<double>(x.size())));
      return;
    }
  }
}

Gradients Tape::backward(const Var& loss) const {
  check_owner(loss);
  const Matrix& lv = nodes_[loss.id()].value;
  if (lv.rows() != 1 || lv.cols() != 1) throw ContractError("backward: loss must be 1x1, got " + shape_string(lv));

  Gradients grads;
  grads.tape_ = this;
  grads.adjoints_.resize(loss.id() + 1);
  if (!nodes_[loss.id()].requires_grad) return grads;
  grads.adjoints_[loss.id()] = Matrix(1, 1, 1.0);

  for (std::size_t i = loss.id() + 1; i-- > 0;) {
    const Node& node = nodes_[i];
    if (!node.requires_grad || grads.adjoints_[i].empty() || node.arity == 0) continue;
    propagate(node, grads.adjoints_[i], grads.adjoints_);
  }
  return grads;
}

// ---------------------------------------------------------------------------
// Recorded ops

Var matmul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  return t.record(OpKind::matmul, matmul(a.value(), b.value()), {a, b});
}

Var add(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  return t.record(OpKind::add, zip_values(a.value(), b.value(), std::plus<>{}), {a, b});
}

Var add_row(const Var& x, const Var& row) {
  Tape& t = common_tape(x, row);
  const Matrix& xv = x.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != xv.cols())
    throw ShapeError("add_row: " + shape_string(xv) + " + broadcast " + shape_string(rv));
  Matrix out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r)
    for (std::size_t c = 0; c < out.cols(); ++c) out(r, c) += rv(0, c);
  return t.record(OpKind::add_row, std::move(out), {x, row});
}

Var sub(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("sub", a.value(), b.value());
  return t.record(OpKind::sub, zip_values(a.value(), b.value(), std::minus<>{}), {a, b});
}

Var mul(const Var& a, const Var& b) {
  Tape& t = common_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  return t.record(OpKind::mul, zip_values(a.value(), b.value(), std::multiplies<>{}), {a, b});
}

Var scale(const Var& x, double factor) {
  return tape_of(x).record(OpKind::scale, map_values(x.value(), [factor](double v) { return v * factor; }), {x}, factor);
}

Var add_scalar(const Var& x, double offset) {
  return tape_of(x).record(OpKind::add_scalar, map_values(x.value(), [offset](double v) { return v + offset; }), {x}, offset);
}

Var tanh(const Var& x) {
  return tape_of(x).record(OpKind::tanh, map_values(x.value(), [](double v) { return std::tanh(v); }), {x});
}

Var relu(const Var& x) {
  return tape_of(x).record(OpKind::relu, map_values(x.value(), [](double v) { return v < 0.0 ? 0.0 : v; }), {x});
}

Var sigmoid(const Var& x) {
  return tape_of(x).record(OpKind::sigmoid, map_values(x.value(), sigmoid_value), {x});
}

Var square(const Var& x) {
  return tape_of(x).record(OpKind::square, map_values(x.value(), [](double v) { return v * v; }), {x});
}

Var log(const Var& x) {
  const Matrix& v = x.value();
  for (std::size_t r = 0; r < v.rows(); ++r)
    for (std::size_t c = 0; c < v.cols(); ++c)
      if (v(r, c) <= 0.0)
        throw DomainError("log: non-positive entry " + std::to_string(v(r, c)) + " at row " + std::to_string(r) +
                          ", col " + std::to_string(c));
  return tape_of(x).record(OpKind::log, map_values(v, [](double e) { return std::log(e); }), {x});
}

Var clamp(const Var& x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lower bound exceeds upper bound");
  return tape_of(x).record(OpKind::clamp, map_values(x.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); }), {x}, lo,
                           hi);
}

Var reduce_sum(const Var& x) {
  double total = 0.0;
  for (double v : x.value().values()) total += v;
  return tape_of(x).record(OpKind::sum, Matrix(1, 1, total), {x});
}

Var reduce_mean(const Var& x) {
  const Matrix& v = x.value();
  double total = 0.0;
  for (double e : v.values()) total += e;
  const double mean = v.size() == 0 ? 0.0 : total / static_cast<double>(v.size());
  return tape_of(x).record(OpKind::mean, Matrix(1, 1, mean), {x});
}

}  // namespace uch
