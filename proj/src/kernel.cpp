#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <unordered_map>

#include "dbr/kernel.hpp"
#include "dbr/ops.hpp"

namespace dbr::kernel {

struct KernelFactory {
  static std::shared_ptr<Kernel> make() { return std::shared_ptr<Kernel>(new Kernel()); }
  static std::shared_ptr<Kernel> copy(const Kernel& k) { return std::shared_ptr<Kernel>(new Kernel(k)); }
  static void set_fields(Kernel& k, KernelKind kind, std::string name, std::string key, std::vector<ParamDecl> in,
                         std::vector<ParamDecl> out, Assignment body, FoldOp fold, double identity,
                         std::size_t output_index) {
    k.kind_ = kind;
    k.name_ = std::move(name);
    k.cache_key_ = std::move(key);
    k.inputs_ = std::move(in);
    k.outputs_ = std::move(out);
    k.body_ = std::move(body);
    k.fold_op_ = fold;
    k.identity_ = identity;
    k.output_index_ = output_index;
  }

  static std::vector<ParamDecl>& inputs(Kernel& k) { return k.inputs_; }
  static std::vector<ParamDecl>& outputs(Kernel& k) { return k.outputs_; }
  static std::string& key(Kernel& k) { return k.cache_key_; }
  static const std::string& key(const Kernel& k) { return k.cache_key_; }
  static std::vector<Instruction>& program(Kernel& k) { return k.program_; }
};

namespace {

struct Cache {
  std::mutex mutex;
  std::unordered_map<std::string, KernelPtr> entries;
  std::size_t hits = 0;
  std::size_t misses = 0;
};

Cache& cache() {
  static Cache c;
  return c;
}

// Static result dtype of a subexpression; nullopt marks a literal-only
// subtree that adopts the dtype of whatever it combines with.
using Inferred = std::optional<DType>;

Inferred combine(Inferred a, Inferred b) {
  if (!a) return b;
  if (!b) return a;
  return promote(*a, *b);
}

class Emitter {
 public:
  Emitter(const std::vector<ParamDecl>& inputs, std::vector<Instruction>& program)
      : inputs_(inputs), program_(program) {}

  Inferred emit(const Expr& e) {
    using Op = Instruction::Op;
    switch (e.kind) {
      case Expr::Kind::number:
        push({Op::constant, 0, e.number, DType::f64});
        return std::nullopt;
      case Expr::Kind::identifier: {
        const auto it = std::find_if(inputs_.begin(), inputs_.end(), [&](const ParamDecl& p) { return p.name == e.name; });
        const DType dt = *it->type.concrete;
        push({Op::load, static_cast<std::size_t>(it - inputs_.begin()), 0.0, dt});
        return dt;
      }
      case Expr::Kind::negate: {
        const Inferred t = emit(e.args[0]);
        pop(1);
        push({Op::negate, 0, 0.0, t.value_or(DType::f64)});
        return t;
      }
      case Expr::Kind::binary: {
        // Left operand must be emitted first.
        const Inferred lhs = emit(e.args[0]);
        const Inferred rhs = emit(e.args[1]);
        const Inferred t = combine(lhs, rhs);
        const Op op = e.op == '+' ? Op::add : e.op == '-' ? Op::sub : e.op == '*' ? Op::mul : Op::div;
        pop(2);
        push({op, 0, 0.0, t.value_or(DType::f64)});
        return t;
      }
      case Expr::Kind::call: {
        Inferred t;
        for (const auto& a : e.args) t = combine(t, emit(a));
        Op op = Op::abs;
        if (e.name == "exp") op = Op::exp;
        else if (e.name == "log") op = Op::log;
        else if (e.name == "tanh") op = Op::tanh;
        else if (e.name == "min") op = Op::min;
        else if (e.name == "max") op = Op::max;
        pop(e.args.size());
        push({op, 0, 0.0, t.value_or(DType::f64)});
        return t;
      }
    }
    return std::nullopt;
  }

  std::size_t max_depth() const { return max_depth_; }

 private:
  void push(Instruction ins) {
    program_.push_back(ins);
    max_depth_ = std::max(max_depth_, ++depth_);
  }
  void pop(std::size_t n) { depth_ -= n; }

  const std::vector<ParamDecl>& inputs_;
  std::vector<Instruction>& program_;
  std::size_t depth_ = 0;
  std::size_t max_depth_ = 0;
};

void collect_identifiers(const Expr& e, std::vector<std::string>& out) {
  if (e.kind == Expr::Kind::identifier) out.push_back(e.name);
  for (const auto& a : e.args) collect_identifiers(a, out);
}

double run(const std::vector<Instruction>& program, std::span<const double> args, std::vector<double>& stack) {
  using Op = Instruction::Op;
  std::size_t sp = 0;
  for (const auto& ins : program) {
    double r = 0.0;
    switch (ins.op) {
      case Op::constant: r = ins.value; break;
      case Op::load: r = args[ins.operand]; break;
      case Op::negate: r = -stack[--sp]; break;
      case Op::abs: r = std::fabs(stack[--sp]); break;
      case Op::exp: r = std::exp(stack[--sp]); break;
      case Op::log: r = std::log(stack[--sp]); break;
      case Op::tanh: r = std::tanh(stack[--sp]); break;
      default: {
        const double b = stack[--sp];
        const double a = stack[--sp];
        switch (ins.op) {
          case Op::add: r = a + b; break;
          case Op::sub: r = a - b; break;
          case Op::mul: r = a * b; break;
          case Op::div: r = a / b; break;
          case Op::min: r = (a != a || b != b) ? std::numeric_limits<double>::quiet_NaN() : std::min(a, b); break;
          case Op::max: r = (a != a || b != b) ? std::numeric_limits<double>::quiet_NaN() : std::max(a, b); break;
          default: break;
        }
      }
    }
    stack[sp++] = round_to(ins.dtype, r);
  }
  return stack[0];
}

void compile_program(Kernel& k) {
  auto& program = KernelFactory::program(k);
  program.clear();
  Emitter emitter(k.inputs(), program);
  emitter.emit(k.body().value);
}

KernelPtr build(KernelKind kind, std::string key, std::string_view in_sig, std::string_view out_sig,
                std::string_view expr, std::string_view name, FoldOp fold, double identity) {
  auto inputs = parse_signature(in_sig);
  auto outputs = parse_signature(out_sig);
  auto body = parse_expr(expr);

  std::set<std::string> input_names;
  std::set<char> input_letters;
  for (const auto& p : inputs) {
    input_names.insert(p.name);
    if (p.type.is_generic()) input_letters.insert(p.type.generic);
  }
  for (const auto& p : outputs) {
    if (input_names.contains(p.name)) throw KernelError("parameter '" + p.name + "' declared as both input and output");
    if (p.type.is_generic() && !input_letters.contains(p.type.generic)) {
      throw KernelError("output type " + p.type.str() + " is not bound by any input");
    }
  }
  if (outputs.empty()) throw KernelError("kernel '" + std::string(name) + "' declares no outputs");
  const auto target = std::find_if(outputs.begin(), outputs.end(),
                                   [&](const ParamDecl& p) { return p.name == body.target; });
  if (target == outputs.end()) {
    if (input_names.contains(body.target)) {
      throw KernelError("assignment target '" + body.target + "' is an input parameter");
    }
    throw KernelError("unresolved identifier '" + body.target + "'");
  }
  for (const auto& p : outputs) {
    if (p.name != body.target) throw KernelError("output '" + p.name + "' is never assigned");
  }
  std::vector<std::string> idents;
  collect_identifiers(body.value, idents);
  for (const auto& id : idents) {
    if (input_names.contains(id)) continue;
    if (id == body.target) throw KernelError("output '" + id + "' is read before it is assigned");
    throw KernelError("unresolved identifier '" + id + "'");
  }

  auto k = KernelFactory::make();
  KernelFactory::set_fields(*k, kind, std::string(name), std::move(key), std::move(inputs), std::move(outputs),
                            std::move(body), fold, identity, 0);
  if (!k->is_generic()) compile_program(*k);
  return k;
}

KernelPtr lookup_or_build(const std::string& key, const std::function<KernelPtr()>& make) {
  auto& c = cache();
  std::lock_guard lock(c.mutex);
  if (auto it = c.entries.find(key); it != c.entries.end()) {
    ++c.hits;
    return it->second;
  }
  auto k = make();
  c.entries.emplace(key, k);
  ++c.misses;
  return k;
}

}  // namespace

bool Kernel::is_generic() const noexcept {
  auto generic = [](const ParamDecl& p) { return p.type.is_generic(); };
  return std::any_of(inputs_.begin(), inputs_.end(), generic) || std::any_of(outputs_.begin(), outputs_.end(), generic);
}

std::vector<Tensor> Kernel::evaluate(std::span<const Tensor> inputs) const {
  if (inputs.size() != inputs_.size()) {
    throw KernelError("kernel '" + name_ + "' expects " + std::to_string(inputs_.size()) + " inputs, got " +
                      std::to_string(inputs.size()));
  }
  if (is_generic()) {
    std::vector<DType> dtypes;
    for (const auto& t : inputs) dtypes.push_back(t.dtype());
    return resolve_generic(shared_from_this(), dtypes)->evaluate(inputs);
  }
  std::vector<Shape> shapes;
  for (const auto& t : inputs) shapes.push_back(t.shape());
  const Shape out_shape = ops::broadcast_shapes(shapes);
  const DType out_dtype = *outputs_[output_index_].type.concrete;

  std::vector<std::span<const double>> views;
  for (const auto& t : inputs) views.push_back(t.values());
  std::vector<double> args(inputs.size());
  std::vector<double> stack(program_.size() + 1);
  std::vector<double> out(out_shape.numel());
  ops::for_each_broadcast(out_shape, shapes, [&](std::size_t lin, std::span<const std::size_t> offs) {
    for (std::size_t i = 0; i < args.size(); ++i) args[i] = views[i][offs[i]];
    out[lin] = round_to(out_dtype, run(program_, args, stack));
  });
  std::vector<Tensor> result;
  result.push_back(Tensor::from_values(out_shape, std::move(out), out_dtype));
  return result;
}

std::vector<Tensor> Kernel::operator()(std::span<const Tensor> inputs) const {
  if (kind_ != KernelKind::elementwise) throw KernelError("kernel '" + name_ + "' is a reduction kernel; use reduce()");
  return evaluate(inputs);
}

Tensor Kernel::reduce(std::span<const Tensor> inputs, const std::optional<std::vector<std::size_t>>& axes,
                      bool keepdims) const {
  if (kind_ != KernelKind::reduction) throw KernelError("kernel '" + name_ + "' is not a reduction kernel");
  const Tensor mapped = evaluate(inputs).front();
  return ops::reduce(fold_op_ == FoldOp::add ? ops::ReduceOp::sum : ops::ReduceOp::max, mapped, axes, keepdims);
}

KernelPtr compile_elementwise(std::string_view in_sig, std::string_view out_sig, std::string_view expr,
                              std::string_view name) {
  std::string key = "elementwise\x1f" + std::string(in_sig) + "\x1f" + std::string(out_sig) + "\x1f" +
                    std::string(expr) + "\x1f" + std::string(name);
  return lookup_or_build(key, [&] {
    return build(KernelKind::elementwise, key, in_sig, out_sig, expr, name, FoldOp::add, 0.0);
  });
}

KernelPtr compile_reduction(std::string_view in_sig, std::string_view out_sig, std::string_view map_expr,
                            FoldOp fold_op, double identity, std::string_view name) {
  const double expected = fold_op == FoldOp::add ? 0.0 : -std::numeric_limits<double>::infinity();
  if (identity != expected) {
    throw KernelError(std::string("identity for fold '") + (fold_op == FoldOp::add ? "+" : "max") + "' must be " +
                      (fold_op == FoldOp::add ? "0" : "-inf"));
  }
  if (parse_signature(out_sig).size() != 1) throw KernelError("reduction kernels have exactly one output");
  std::string key = "reduction\x1f" + std::string(in_sig) + "\x1f" + std::string(out_sig) + "\x1f" +
                    std::string(map_expr) + "\x1f" + std::string(name) + "\x1f" +
                    (fold_op == FoldOp::add ? "+" : "max");
  return lookup_or_build(key, [&] {
    return build(KernelKind::reduction, key, in_sig, out_sig, map_expr, name, fold_op, identity);
  });
}

KernelPtr resolve_generic(const KernelPtr& kernel, std::span<const DType> input_dtypes) {
  if (!kernel->is_generic()) return kernel;
  const auto& inputs = kernel->inputs();
  if (input_dtypes.size() != inputs.size()) {
    throw KernelError("kernel '" + kernel->name() + "' expects " + std::to_string(inputs.size()) + " inputs, got " +
                      std::to_string(input_dtypes.size()));
  }
  std::map<char, DType> bindings;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    if (!inputs[i].type.is_generic()) continue;
    const char letter = inputs[i].type.generic;
    auto [it, inserted] = bindings.emplace(letter, input_dtypes[i]);
    if (!inserted && it->second != input_dtypes[i]) {
      throw KernelError(std::string("conflicting bindings for ") + letter + ": " + dtype_name(it->second) + " and " +
                        dtype_name(input_dtypes[i]));
    }
  }
  std::string key = KernelFactory::key(*kernel) + "\x1fresolve";
  for (const auto& [letter, dt] : bindings) key += std::string("\x1f") + letter + "=" + dtype_name(dt);
  return lookup_or_build(key, [&] {
    auto k = KernelFactory::copy(*kernel);
    KernelFactory::key(*k) = key;
    for (auto* params : {&KernelFactory::inputs(*k), &KernelFactory::outputs(*k)}) {
      for (auto& p : *params) {
        if (p.type.is_generic()) {
          p.type.concrete = bindings.at(p.type.generic);
          p.type.generic = 0;
        }
      }
    }
    compile_program(*k);
    return KernelPtr(k);
  });
}

CacheStats cache_stats() {
  auto& c = cache();
  std::lock_guard lock(c.mutex);
  return {c.entries.size(), c.hits, c.misses};
}

void clear_cache() {
  auto& c = cache();
  std::lock_guard lock(c.mutex);
  c.entries.clear();
  c.hits = 0;
  c.misses = 0;
}

}  // namespace dbr::kernel
