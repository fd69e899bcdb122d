#include "dbr/variable.hpp"

#include <algorithm>
#include <queue>
#include <unordered_map>
#include <unordered_set>

#include "dbr/functions.hpp"

namespace dbr {
namespace {

thread_local bool g_recording = true;

const std::string& empty_name() {
  static const std::string s;
  return s;
}

}  // namespace

// ---------------------------------------------------------------------------
// Variable

Variable::Variable(Tensor data, bool requires_grad) {
  if (!data.defined()) throw Error("Variable requires defined data");
  auto node = std::make_shared<VariableNode>(data.shape(), data.dtype(), requires_grad);
  state_ = std::make_shared<VariableState>();
  state_->data = std::move(data);
  state_->node = node;
  node->variable_ = state_;
}

const Tensor& Variable::data() const {
  if (!state_) throw Error("access to an undefined Variable");
  return state_->data;
}

Tensor& Variable::mutable_data() {
  if (!state_) throw Error("access to an undefined Variable");
  return state_->data;
}

bool Variable::requires_grad() const { return node()->requires_grad(); }

const std::string& Variable::name() const { return state_ ? state_->name : empty_name(); }

void Variable::set_name(std::string name) {
  if (!state_) throw Error("access to an undefined Variable");
  state_->name = std::move(name);
}

bool Variable::has_grad() const { return state_ && state_->grad.defined(); }

const Variable& Variable::grad() const {
  if (!state_) throw Error("access to an undefined Variable");
  return state_->grad;
}

void Variable::set_grad(Variable grad) {
  if (!state_) throw Error("access to an undefined Variable");
  if (grad.defined() && (grad.shape() != shape() || grad.dtype() != dtype())) {
    throw ShapeError("gradient " + grad.shape().str() + " does not match variable " + shape().str());
  }
  state_->grad = std::move(grad);
}

void Variable::cleargrad() {
  if (state_) state_->grad = Variable();
}

const std::shared_ptr<VariableNode>& Variable::node() const {
  if (!state_) throw Error("access to an undefined Variable");
  return state_->node;
}

std::shared_ptr<FunctionNode> Variable::creator() const { return node()->creator(); }

std::size_t Variable::rank() const { return node()->rank(); }

void Variable::backward(bool retain_intermediate_grads, bool enable_double_backprop) const {
  BackwardOptions options;
  options.retain_intermediate_grads = retain_intermediate_grads;
  options.enable_double_backprop = enable_double_backprop;
  dbr::backward(*this, options);
}

// ---------------------------------------------------------------------------
// VariableNode

Variable VariableNode::as_variable() {
  if (auto state = variable_.lock()) return Variable(std::move(state));
  if (!retained_) {
    throw RetentionError("variable node data was not retained by any operation");
  }
  auto state = std::make_shared<VariableState>();
  state->data = *retained_;
  state->node = shared_from_this();
  variable_ = state;
  return Variable(std::move(state));
}

std::optional<Variable> VariableNode::live_variable() const {
  if (auto state = variable_.lock()) return Variable(std::move(state));
  return std::nullopt;
}

void VariableNode::retain(const Tensor& data) {
  if (!retained_) retained_ = data;
  ++retention_count_;
}

void VariableNode::release() {
  if (retention_count_ == 0) return;
  if (--retention_count_ == 0) retained_.reset();
}

// ---------------------------------------------------------------------------
// FunctionNode

FunctionNode::~FunctionNode() {
  if (!released_) release_retentions();
}

void FunctionNode::release_retentions() {
  for (auto i : retained_inputs_) {
    if (i < inputs_.size() && inputs_[i]) inputs_[i]->release();
  }
  for (auto i : retained_outputs_) {
    if (i < outputs_.size()) {
      if (auto node = outputs_[i].lock()) node->release();
    }
  }
}

void FunctionNode::sever() {
  if (released_) return;
  release_retentions();
  inputs_.clear();
  backups_.clear();
  released_ = true;
}

Variable FunctionNode::retained_input(std::size_t i) {
  if (std::find(retained_inputs_.begin(), retained_inputs_.end(), i) == retained_inputs_.end()) {
    throw RetentionError(std::string(label()) + ": backward accessed input " + std::to_string(i) +
                         " which was not declared retained");
  }
  if (released_) throw GraphReleasedError(std::string(label()) + ": graph already released");
  return inputs_[i]->as_variable();
}

Variable FunctionNode::retained_output(std::size_t i) {
  if (std::find(retained_outputs_.begin(), retained_outputs_.end(), i) == retained_outputs_.end()) {
    throw RetentionError(std::string(label()) + ": output " + std::to_string(i) + " was not declared retained");
  }
  if (auto node = outputs_[i].lock()) return node->as_variable();
  if (released_ || !has_backup(i)) throw GraphReleasedError(std::string(label()) + ": output backup released");

  // Replay: the original output node is gone, so nothing else refers to it.
  // Rebuild it from the backup as if this function had just produced it.
  auto node = std::make_shared<VariableNode>(output_shapes_[i], output_dtypes_[i], true);
  node->creator_ = shared_from_this();
  node->output_index_ = i;
  node->rank_ = rank_ + 1;
  node->retain(backups_[i]);
  outputs_[i] = node;
  return node->as_variable();
}

// ---------------------------------------------------------------------------
// Recording

bool recording_enabled() noexcept { return g_recording; }

NoBackpropScope::NoBackpropScope() : previous_(g_recording) { g_recording = false; }
NoBackpropScope::~NoBackpropScope() { g_recording = previous_; }

std::vector<Variable> apply(std::shared_ptr<FunctionNode> fn, std::span<const Variable> inputs) {
  std::vector<Tensor> in;
  in.reserve(inputs.size());
  bool any_requires_grad = false;
  for (const auto& v : inputs) {
    in.push_back(v.data());
    any_requires_grad = any_requires_grad || v.requires_grad();
  }
  std::vector<Tensor> out = fn->forward(in);

  std::vector<Variable> result;
  result.reserve(out.size());
  if (!g_recording || !any_requires_grad) {
    for (auto& t : out) result.emplace_back(std::move(t), false);
    return result;
  }

  for (auto i : fn->retained_inputs_) {
    if (i >= in.size()) throw RetentionError(std::string(fn->label()) + ": retained input index out of range");
  }
  for (auto i : fn->retained_outputs_) {
    if (i >= out.size()) throw RetentionError(std::string(fn->label()) + ": retained output index out of range");
  }

  std::size_t rank = 0;
  for (const auto& v : inputs) {
    fn->inputs_.push_back(v.node());
    fn->input_shapes_.push_back(v.shape());
    fn->input_dtypes_.push_back(v.dtype());
    rank = std::max(rank, v.node()->rank());
  }
  fn->rank_ = rank;
  for (auto i : fn->retained_inputs_) fn->inputs_[i]->retain(in[i]);

  fn->backups_.resize(out.size());
  for (std::size_t k = 0; k < out.size(); ++k) {
    fn->output_shapes_.push_back(out[k].shape());
    fn->output_dtypes_.push_back(out[k].dtype());
    Variable v(out[k], true);
    auto node = v.node();
    node->creator_ = fn;
    node->output_index_ = k;
    node->rank_ = rank + 1;
    fn->outputs_.push_back(node);
    if (std::find(fn->retained_outputs_.begin(), fn->retained_outputs_.end(), k) != fn->retained_outputs_.end()) {
      fn->backups_[k] = out[k];
      node->retain(out[k]);
    }
    result.push_back(std::move(v));
  }
  return result;
}

// ---------------------------------------------------------------------------
// Backpropagation

namespace {

struct QueueEntry {
  std::size_t rank;
  std::uint64_t order;
  std::shared_ptr<FunctionNode> fn;
};

struct QueueCompare {
  bool operator()(const QueueEntry& a, const QueueEntry& b) const {
    if (a.rank != b.rank) return a.rank < b.rank;
    return a.order > b.order;
  }
};

class BackwardDriver {
 public:
  // With grad_mode set, only paths reaching `targets` are visited and
  // nothing is written to Variables.
  BackwardDriver(const BackwardOptions& options, bool grad_mode, std::span<const Variable> targets = {})
      : options_(options), grad_mode_(grad_mode) {
    for (const auto& t : targets) targets_.insert(t.node().get());
  }

  void seed(const std::shared_ptr<VariableNode>& node, const Variable& g) { accumulate(node, g); }

  void run() {
    std::size_t processed = 0;
    while (!queue_.empty()) {
      auto fn = queue_.top().fn;
      queue_.pop();
      process(*fn);
      ++processed;
      if (!options_.enable_double_backprop) fn->sever();
      if (options_.observer) {
        BackwardProgress progress{*fn, processed, {}};
        for (const auto& [f, grads] : pending_) {
          for (const auto& g : grads) {
            if (g.defined()) progress.pending_gradient_buffers.push_back(g.data().buffer_id());
          }
        }
        options_.observer(progress);
      }
    }
  }

  // Gradients that reached a leaf, or a node whose creator was not visited.
  std::unordered_map<VariableNode*, std::pair<std::shared_ptr<VariableNode>, Variable>>& sinks() { return sinks_; }
  std::unordered_map<VariableNode*, Variable>& target_grads() { return target_grads_; }

 private:
  bool relevant(FunctionNode* fn) {
    if (!grad_mode_) return true;
    if (auto it = relevance_.find(fn); it != relevance_.end()) return it->second;
    bool r = false;
    relevance_[fn] = false;
    for (const auto& in : fn->inputs()) {
      if (!in->requires_grad()) continue;
      if (targets_.contains(in.get())) {
        r = true;
      } else if (const auto& c = in->creator()) {
        if (c->released()) {
          throw GraphReleasedError(std::string(c->label()) + ": graph already released by an earlier backward");
        }
        r = relevant(c.get()) || r;
      }
    }
    relevance_[fn] = r;
    return r;
  }

  bool wants(const std::shared_ptr<VariableNode>& node) {
    if (!node->requires_grad()) return false;
    if (!grad_mode_) return true;
    if (targets_.contains(node.get())) return true;
    return node->creator() && relevant(node->creator().get());
  }

  static Variable sum(const Variable& acc, const Variable& g) { return acc.defined() ? fn::add(acc, g) : g; }

  void accumulate(const std::shared_ptr<VariableNode>& node, const Variable& g) {
    if (!wants(node)) return;
    const auto& creator = node->creator();
    if (creator && relevant(creator.get())) {
      if (creator->released()) {
        throw GraphReleasedError(std::string(creator->label()) + ": graph already released by an earlier backward");
      }
      auto& slots = pending_[creator.get()];
      if (slots.empty()) {
        slots.resize(creator->num_outputs());
        queue_.push({creator->rank(), order_++, creator});
      }
      slots[node->output_index()] = sum(slots[node->output_index()], g);
      return;
    }
    auto& entry = sinks_[node.get()];
    entry.first = node;
    entry.second = sum(entry.second, g);
  }

  void process(FunctionNode& fn) {
    auto it = pending_.find(&fn);
    std::vector<Variable> gys = std::move(it->second);
    pending_.erase(it);
    for (std::size_t i = 0; i < gys.size(); ++i) {
      if (!gys[i].defined()) gys[i] = Variable::constant(Tensor::zeros(fn.output_shape(i), fn.output_dtype(i)));
      auto out = fn.output_node(i);
      if (!out) continue;
      if (grad_mode_ && targets_.contains(out.get())) target_grads_[out.get()] = gys[i];
      if (options_.retain_intermediate_grads && !grad_mode_) {
        // Only a live user handle can receive the gradient.
        if (auto var = out->live_variable()) var->set_grad(gys[i]);
      }
    }

    std::vector<std::size_t> targets;
    for (std::size_t j = 0; j < fn.inputs().size(); ++j) {
      if (wants(fn.inputs()[j])) targets.push_back(j);
    }
    if (targets.empty()) return;

    std::vector<Variable> gxs = fn.backward(targets, gys);
    gys.clear();
    if (gxs.size() != fn.num_inputs()) {
      throw Error(std::string(fn.label()) + ": backward returned " + std::to_string(gxs.size()) +
                  " gradients for " + std::to_string(fn.num_inputs()) + " inputs");
    }
    const auto& inputs = fn.inputs();
    for (auto j : targets) {
      if (!gxs[j].defined()) continue;
      if (gxs[j].shape() != fn.input_shape(j)) {
        throw ShapeError(std::string(fn.label()) + ": gradient shape " + gxs[j].shape().str() +
                         " does not match input shape " + fn.input_shape(j).str());
      }
      accumulate(inputs[j], gxs[j]);
    }
  }

  const BackwardOptions& options_;
  bool grad_mode_;
  std::unordered_set<VariableNode*> targets_;
  std::unordered_map<FunctionNode*, bool> relevance_;
  std::priority_queue<QueueEntry, std::vector<QueueEntry>, QueueCompare> queue_;
  std::uint64_t order_ = 0;
  std::unordered_map<FunctionNode*, std::vector<Variable>> pending_;
  std::unordered_map<VariableNode*, std::pair<std::shared_ptr<VariableNode>, Variable>> sinks_;
  std::unordered_map<VariableNode*, Variable> target_grads_;
};

Variable make_seed(const Variable& output, const Variable* explicit_seed) {
  if (explicit_seed && explicit_seed->defined()) {
    if (explicit_seed->shape() != output.shape()) {
      throw ShapeError("seed gradient " + explicit_seed->shape().str() + " does not match output " +
                       output.shape().str());
    }
    return *explicit_seed;
  }
  if (output.data().numel() != 1) {
    throw ShapeError("backward from a non-scalar output " + output.shape().str() + " needs an explicit seed gradient");
  }
  return Variable::constant(Tensor::ones(output.shape(), output.dtype()));
}

}  // namespace

void backward(const Variable& output, const BackwardOptions& options) {
  std::optional<NoBackpropScope> no_record;
  if (!options.enable_double_backprop) no_record.emplace();

  BackwardDriver driver(options, false);
  const Variable seed = make_seed(output, output.has_grad() ? &output.grad() : nullptr);
  driver.seed(output.node(), seed);
  driver.run();

  for (auto& [raw, entry] : driver.sinks()) {
    auto& [node, g] = entry;
    auto var = node->live_variable();
    if (!var) continue;
    // The seed itself is not a gradient flowing into the output.
    if (var->is(output)) continue;
    var->set_grad(var->has_grad() ? fn::add(var->grad(), g) : g);
  }
}

std::vector<Variable> grad(std::span<const Variable> outputs, std::span<const Variable> inputs,
                           std::span<const Variable> grad_outputs, const BackwardOptions& options) {
  if (!grad_outputs.empty() && grad_outputs.size() != outputs.size()) {
    throw Error("grad: grad_outputs must match outputs in length");
  }
  std::optional<NoBackpropScope> no_record;
  if (!options.enable_double_backprop) no_record.emplace();

  BackwardDriver driver(options, true, inputs);
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    driver.seed(outputs[k].node(), make_seed(outputs[k], grad_outputs.empty() ? nullptr : &grad_outputs[k]));
  }
  driver.run();

  std::vector<Variable> result;
  result.reserve(inputs.size());
  for (const auto& x : inputs) {
    VariableNode* key = x.node().get();
    Variable g;
    if (auto it = driver.target_grads().find(key); it != driver.target_grads().end()) g = it->second;
    if (auto it = driver.sinks().find(key); it != driver.sinks().end()) {
      g = g.defined() ? fn::add(g, it->second.second) : it->second.second;
    }
    if (!g.defined()) g = Variable::constant(Tensor::zeros(x.shape(), x.dtype()));
    result.push_back(std::move(g));
  }
  return result;
}

}  // namespace dbr
