#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dbr/tensor.hpp"

namespace dbr {

class FunctionNode;
class VariableNode;
struct VariableState;

// User-facing differentiable value. A Variable is a shared handle: copies refer
// to the same variable, so a gradient set through one copy is visible through
// all of them. The array data lives here; the graph node only holds data when
// some recorded operation retains it.
class Variable {
 public:
  Variable() = default;
  explicit Variable(Tensor data, bool requires_grad = true);

  // A leaf that never receives gradients.
  static Variable constant(Tensor data) { return Variable(std::move(data), false); }

  bool defined() const noexcept { return state_ != nullptr; }
  const Tensor& data() const;
  // In-place access for optimizers; the buffer is shared with every retention.
  Tensor& mutable_data();
  const Shape& shape() const { return data().shape(); }
  DType dtype() const { return data().dtype(); }
  bool requires_grad() const;

  const std::string& name() const;
  void set_name(std::string name);

  bool has_grad() const;
  const Variable& grad() const;
  void set_grad(Variable grad);
  void cleargrad();

  const std::shared_ptr<VariableNode>& node() const;
  std::shared_ptr<FunctionNode> creator() const;
  std::size_t rank() const;

  // Backpropagates from this variable. Scalars are seeded with 1; other
  // shapes need a gradient set beforehand. Leaf gradients accumulate into
  // grad().
  void backward(bool retain_intermediate_grads = false, bool enable_double_backprop = false) const;

  bool is(const Variable& other) const noexcept { return state_ == other.state_; }

 private:
  friend class VariableNode;
  explicit Variable(std::shared_ptr<VariableState> state) : state_(std::move(state)) {}

  std::shared_ptr<VariableState> state_;
};

struct VariableState {
  Tensor data;
  std::shared_ptr<VariableNode> node;
  Variable grad;
  std::string name;
};

// A variable's vertex in the computational graph. It references its creator
// strongly and its user-facing Variable weakly; it owns array data only while
// at least one recorded operation retains it.
class VariableNode : public std::enable_shared_from_this<VariableNode> {
 public:
  VariableNode(Shape shape, DType dtype, bool requires_grad)
      : shape_(std::move(shape)), dtype_(dtype), requires_grad_(requires_grad) {}

  const std::shared_ptr<FunctionNode>& creator() const noexcept { return creator_; }
  std::size_t output_index() const noexcept { return output_index_; }
  std::size_t rank() const noexcept { return rank_; }
  const Shape& shape() const noexcept { return shape_; }
  DType dtype() const noexcept { return dtype_; }
  bool requires_grad() const noexcept { return requires_grad_; }

  bool has_retained_data() const noexcept { return retained_.has_value(); }
  const std::optional<Tensor>& retained_data() const noexcept { return retained_; }
  std::size_t retention_count() const noexcept { return retention_count_; }

  // The live user Variable, or a fresh one over the retained data.
  Variable as_variable();
  std::optional<Variable> live_variable() const;

 private:
  friend class FunctionNode;
  friend class Variable;
  friend std::vector<Variable> apply(std::shared_ptr<FunctionNode>, std::span<const Variable>);

  void retain(const Tensor& data);
  void release();

  std::shared_ptr<FunctionNode> creator_;
  std::size_t output_index_ = 0;
  std::size_t rank_ = 0;
  Shape shape_;
  DType dtype_;
  bool requires_grad_;
  std::optional<Tensor> retained_;
  std::size_t retention_count_ = 0;
  std::weak_ptr<VariableState> variable_;
};

// A recorded application of a differentiable operation. Subclasses implement
// forward on raw tensors and backward on Variables (so backward itself can be
// recorded), declaring in forward which inputs and outputs backward needs.
//
// The node holds its inputs strongly and its outputs only weakly. Retained
// outputs are backed up here so that a released output node can be rebuilt
// on demand during backpropagation.
class FunctionNode : public std::enable_shared_from_this<FunctionNode> {
 public:
  virtual ~FunctionNode();

  virtual std::string_view label() const = 0;

  virtual std::vector<Tensor> forward(std::span<const Tensor> inputs) = 0;

  // Returns one entry per input; entries not listed in `targets` may be left
  // undefined.
  virtual std::vector<Variable> backward(std::span<const std::size_t> targets,
                                         std::span<const Variable> grad_outputs) = 0;

  std::size_t rank() const noexcept { return rank_; }
  std::size_t num_inputs() const noexcept { return input_shapes_.size(); }
  std::size_t num_outputs() const noexcept { return output_shapes_.size(); }
  const std::vector<std::shared_ptr<VariableNode>>& inputs() const noexcept { return inputs_; }
  const Shape& input_shape(std::size_t i) const { return input_shapes_.at(i); }
  DType input_dtype(std::size_t i) const { return input_dtypes_.at(i); }
  const Shape& output_shape(std::size_t i) const { return output_shapes_.at(i); }
  DType output_dtype(std::size_t i) const { return output_dtypes_.at(i); }
  const std::vector<std::size_t>& retained_input_indices() const noexcept { return retained_inputs_; }
  const std::vector<std::size_t>& retained_output_indices() const noexcept { return retained_outputs_; }
  std::shared_ptr<VariableNode> output_node(std::size_t i) const { return outputs_.at(i).lock(); }
  bool has_backup(std::size_t i) const { return i < backups_.size() && backups_[i].defined(); }

  // True once backpropagation severed this node's edges.
  bool released() const noexcept { return released_; }

  // Declared retained input `i` as a Variable attached to the graph. Throws
  // RetentionError for undeclared indices.
  Variable retained_input(std::size_t i);

  // Declared retained output `i`. If the output node is gone, a fresh node is
  // rebuilt from the backup and wired as this function's output.
  Variable retained_output(std::size_t i);

  // Drops input edges, retentions and backups.
  void sever();

 protected:
  // Called from forward().
  void retain_inputs(std::initializer_list<std::size_t> indices) { retained_inputs_.assign(indices); }
  void retain_outputs(std::initializer_list<std::size_t> indices) { retained_outputs_.assign(indices); }

 private:
  friend std::vector<Variable> apply(std::shared_ptr<FunctionNode>, std::span<const Variable>);

  void release_retentions();

  std::size_t rank_ = 0;
  std::vector<std::shared_ptr<VariableNode>> inputs_;
  std::vector<std::weak_ptr<VariableNode>> outputs_;
  std::vector<Tensor> backups_;
  std::vector<Shape> input_shapes_;
  std::vector<DType> input_dtypes_;
  std::vector<Shape> output_shapes_;
  std::vector<DType> output_dtypes_;
  std::vector<std::size_t> retained_inputs_;
  std::vector<std::size_t> retained_outputs_;
  bool released_ = false;
};

// Runs fn's forward on the input data and, when recording is enabled and some
// input requires a gradient, records fn in the graph.
std::vector<Variable> apply(std::shared_ptr<FunctionNode> fn, std::span<const Variable> inputs);
inline std::vector<Variable> apply(std::shared_ptr<FunctionNode> fn, std::initializer_list<Variable> inputs) {
  return apply(std::move(fn), std::span<const Variable>(inputs.begin(), inputs.size()));
}

inline Variable retrieve_retained_output(FunctionNode& fn, std::size_t index) { return fn.retained_output(index); }

bool recording_enabled() noexcept;

// Disables graph recording on this thread for the scope's lifetime.
class NoBackpropScope {
 public:
  NoBackpropScope();
  ~NoBackpropScope();
  NoBackpropScope(const NoBackpropScope&) = delete;
  NoBackpropScope& operator=(const NoBackpropScope&) = delete;

 private:
  bool previous_;
};

// Snapshot handed to a backward observer after each function node.
struct BackwardProgress {
  const FunctionNode& node;
  std::size_t processed = 0;
  // Buffers of gradients still waiting for their consumer to run.
  std::vector<std::uint64_t> pending_gradient_buffers;
};

struct BackwardOptions {
  bool retain_intermediate_grads = false;
  bool enable_double_backprop = false;
  std::function<void(const BackwardProgress&)> observer;
};

void backward(const Variable& output, const BackwardOptions& options);

// Gradients of sum(outputs[k] * grad_outputs[k]) with respect to each input.
// Nothing is stored on any Variable. Inputs unreachable from the outputs get
// zeros.
std::vector<Variable> grad(std::span<const Variable> outputs, std::span<const Variable> inputs,
                           std::span<const Variable> grad_outputs = {}, const BackwardOptions& options = {});
inline std::vector<Variable> grad(std::initializer_list<Variable> outputs, std::initializer_list<Variable> inputs,
                                  std::initializer_list<Variable> grad_outputs = {},
                                  const BackwardOptions& options = {}) {
  return grad(std::span<const Variable>(outputs.begin(), outputs.size()),
              std::span<const Variable>(inputs.begin(), inputs.size()),
              std::span<const Variable>(grad_outputs.begin(), grad_outputs.size()), options);
}
inline std::vector<Variable> grad(const Variable& output, std::span<const Variable> inputs,
                                  const BackwardOptions& options = {}) {
  return grad(std::span<const Variable>(&output, 1), inputs, {}, options);
}

}  // namespace dbr
