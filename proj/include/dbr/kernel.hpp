#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dbr/tensor.hpp"

// User-defined element-wise and reduction kernels built from a typed
// parameter list and a one-line arithmetic body, e.g.
//
//   auto mad = kernel::compile_elementwise("float32 x, float32 y, float32 z",
//                                          "float32 w", "w = x * y + z", "my_mad");
//   auto w = (*mad)({x, y, z})[0];
//
// Bodies are parsed once and interpreted; compiled kernels are cached.
namespace dbr::kernel {

// A concrete dtype or a single-letter generic placeholder such as `T`.
struct TypeSpec {
  std::optional<DType> concrete;
  char generic = 0;

  bool is_generic() const noexcept { return !concrete; }
  std::string str() const;
  friend bool operator==(const TypeSpec&, const TypeSpec&) = default;
};

struct ParamDecl {
  TypeSpec type;
  std::string name;
  friend bool operator==(const ParamDecl&, const ParamDecl&) = default;
};

std::vector<ParamDecl> parse_signature(std::string_view text);

struct Expr {
  enum class Kind { number, identifier, negate, binary, call };

  Kind kind = Kind::number;
  double number = 0.0;
  std::string name;  // identifier or callee
  char op = 0;       // + - * / for binary
  std::vector<Expr> args;

  friend bool operator==(const Expr&, const Expr&) = default;
};

struct Assignment {
  std::string target;
  Expr value;
  friend bool operator==(const Assignment&, const Assignment&) = default;
};

// Grammar: ident '=' expr [';']. Precedence: unary minus, then * /, then + -,
// all binary operators left associative. Calls: abs exp log tanh (1 argument),
// min max (2 arguments).
Assignment parse_expr(std::string_view text);

// Fully parenthesized rendering that reparses to an equal tree.
std::string to_string(const Expr& expr);
std::string to_string(const Assignment& assignment);

enum class KernelKind { elementwise, reduction };
enum class FoldOp { add, max };

class Kernel;
using KernelPtr = std::shared_ptr<const Kernel>;

// One step of the stack program a concrete kernel body compiles to. Each
// result is rounded to `dtype`.
struct Instruction {
  enum class Op : std::uint8_t { constant, load, negate, add, sub, mul, div, abs, exp, log, tanh, min, max };
  Op op = Op::constant;
  std::size_t operand = 0;
  double value = 0.0;
  DType dtype = DType::f64;
};

class Kernel : public std::enable_shared_from_this<Kernel> {
 public:
  KernelKind kind() const noexcept { return kind_; }
  const std::string& name() const noexcept { return name_; }
  const std::vector<ParamDecl>& inputs() const noexcept { return inputs_; }
  const std::vector<ParamDecl>& outputs() const noexcept { return outputs_; }
  const Assignment& body() const noexcept { return body_; }
  FoldOp fold_op() const noexcept { return fold_op_; }
  double identity() const noexcept { return identity_; }
  bool is_generic() const noexcept;

  // Element-wise application with full broadcasting across inputs. Generic
  // kernels are resolved from the input dtypes first.
  std::vector<Tensor> operator()(std::span<const Tensor> inputs) const;
  std::vector<Tensor> operator()(std::initializer_list<Tensor> inputs) const {
    return (*this)(std::span<const Tensor>(inputs.begin(), inputs.size()));
  }

  // Maps each broadcast element through the body, then folds along `axes`
  // (all axes when nullopt).
  Tensor reduce(std::span<const Tensor> inputs, const std::optional<std::vector<std::size_t>>& axes = std::nullopt,
                bool keepdims = false) const;

 private:
  friend struct KernelFactory;
  Kernel() = default;

  std::vector<Tensor> evaluate(std::span<const Tensor> inputs) const;

  KernelKind kind_ = KernelKind::elementwise;
  std::string name_;
  std::string cache_key_;
  std::vector<ParamDecl> inputs_;
  std::vector<ParamDecl> outputs_;
  Assignment body_;
  FoldOp fold_op_ = FoldOp::add;
  double identity_ = 0.0;
  std::size_t output_index_ = 0;
  std::vector<Instruction> program_;
};

KernelPtr compile_elementwise(std::string_view in_sig, std::string_view out_sig, std::string_view expr,
                              std::string_view name);

// fold_op add requires identity 0, max requires -infinity.
KernelPtr compile_reduction(std::string_view in_sig, std::string_view out_sig, std::string_view map_expr,
                            FoldOp fold_op, double identity, std::string_view name);

// Specializes a generic kernel for the given input dtypes. Every input bound
// to the same letter must share one dtype. Concrete kernels return themselves.
KernelPtr resolve_generic(const KernelPtr& kernel, std::span<const DType> input_dtypes);

struct CacheStats {
  std::size_t entries = 0;
  std::size_t hits = 0;
  std::size_t misses = 0;
};

CacheStats cache_stats();
void clear_cache();

}  // namespace dbr::kernel
