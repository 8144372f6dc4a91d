#pragma once

// Dense matrices and a whole-matrix reverse-mode tape.
//
// Values are stored in double precision, which also covers the requirement that
// dot products and reductions accumulate in at least 64 bits.

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace uch {

class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

  static Matrix from_rows(std::initializer_list<std::initializer_list<double>> rows);
  static Matrix identity(std::size_t n);

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return values_.size(); }
  bool empty() const noexcept { return values_.empty(); }

  double operator()(std::size_t r, std::size_t c) const { return values_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return values_[r * cols_ + c]; }

  std::span<const double> values() const noexcept { return values_; }
  std::span<double> values() noexcept { return values_; }
  std::span<const double> row(std::size_t r) const { return {values_.data() + r * cols_, cols_}; }
  std::span<double> row(std::size_t r) { return {values_.data() + r * cols_, cols_}; }

  bool same_shape(const Matrix& other) const noexcept { return rows_ == other.rows_ && cols_ == other.cols_; }
  bool all_finite() const noexcept;

  // Copy of the listed rows, in the order given.
  Matrix gather_rows(std::span<const std::size_t> indices) const;

  bool operator==(const Matrix&) const = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> values_;
};

std::string shape_string(const Matrix& m);

// Plain value kernels, shared by the tape's forward and adjoint rules.
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_transpose_a(const Matrix& a, const Matrix& b);  // aᵀ·b
Matrix matmul_transpose_b(const Matrix& a, const Matrix& b);  // a·bᵀ

enum class OpKind {
  leaf,
  matmul,
  add,
  add_row,  // matrix + broadcast 1×c row
  sub,
  mul,
  scale,
  add_scalar,
  tanh,
  relu,
  sigmoid,
  square,
  log,
  clamp,
  sum,
  mean,
};

const char* op_name(OpKind kind);

class Tape;

// Handle to a value recorded on a Tape. Cheap to copy; valid while the tape lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  // Value of a 1×1 node.
  double scalar() const;

  Tape* tape() const noexcept { return tape_; }
  std::size_t id() const noexcept { return id_; }
  bool valid() const noexcept { return tape_ != nullptr; }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Gradients {
 public:
  // Adjoint of `v`; an all-zero matrix of v's shape when v was not reached from the loss.
  Matrix of(const Var& v) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<Matrix> adjoints_;
};

class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // Leaf whose gradient is tracked.
  Var variable(Matrix value);
  // Leaf treated as a fixed input; nothing downstream of constants alone is differentiated.
  Var constant(Matrix value);

  const Matrix& value(const Var& v) const;
  bool requires_grad(const Var& v) const;
  std::size_t size() const noexcept { return nodes_.size(); }

  // Reverse sweep from a 1×1 loss. Does not modify the tape, so repeated calls are bit-identical.
  Gradients backward(const Var& loss) const;

  // Test hook: every adjoint contribution emitted by ops of `kind` is multiplied by `factor`.
  void inject_fault(OpKind kind, double factor);

  // Which side of its kink every relu and clamp input lies on, in recording order.
  std::vector<bool> branch_pattern() const;

  // Op recording; the free functions below are the intended entry points.
  Var record(OpKind kind, Matrix value, std::initializer_list<Var> inputs, double p0 = 0.0, double p1 = 0.0);

 private:
  struct Node {
    OpKind kind = OpKind::leaf;
    Matrix value;
    std::size_t inputs[2] = {0, 0};
    std::size_t arity = 0;
    bool requires_grad = false;
    double p0 = 0.0;  // op parameter: scale factor, scalar offset, clamp lower bound
    double p1 = 0.0;  // clamp upper bound
  };

  void accumulate(std::vector<Matrix>& adjoints, std::size_t target, Matrix contribution) const;
  void propagate(const Node& node, const Matrix& upstream, std::vector<Matrix>& adjoints) const;
  void check_owner(const Var& v) const;

  std::vector<Node> nodes_;
  OpKind fault_kind_ = OpKind::leaf;
  double fault_factor_ = 1.0;
};

Var matmul(const Var& a, const Var& b);
Var add(const Var& a, const Var& b);
Var add_row(const Var& x, const Var& row);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
Var add_scalar(const Var& x, double offset);
Var tanh(const Var& x);
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var square(const Var& x);
Var log(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var reduce_sum(const Var& x);
Var reduce_mean(const Var& x);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(double c, const Var& x) { return scale(x, c); }

}  // namespace uch
