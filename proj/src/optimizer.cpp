#include "dbr/optimizer.hpp"

#include <cmath>

namespace dbr {

void Optimizer::setup(Link& model) {
  target_ = &model;
  t_ = 0;
  state_.clear();
}

std::size_t Optimizer::state_size() const {
  std::size_t n = 0;
  for (const auto& [path, slots] : state_) n += slots.size();
  return n;
}

void Optimizer::update() {
  if (target_ == nullptr) throw Error("optimizer update() called before setup()");
  auto params = target_->namedparams();
  for (const auto& [path, p] : params) {
    if (!p.has_grad()) throw Error("parameter " + path + " has no gradient");
  }
  ++t_;
  for (auto& [path, p] : params) {
    update_one(p.mutable_data(), p.grad().data(), state_[path]);
  }
}

void SGD::update_one(Tensor& param, const Tensor& grad, std::vector<Tensor>&) {
  const DType dt = param.dtype();
  auto w = param.mutable_values();
  auto g = grad.values();
  for (std::size_t i = 0; i < w.size(); ++i) w[i] = round_to(dt, w[i] - lr * g[i]);
}

void MomentumSGD::update_one(Tensor& param, const Tensor& grad, std::vector<Tensor>& slots) {
  const DType dt = param.dtype();
  if (slots.empty()) slots.push_back(Tensor::zeros_like(param));
  auto w = param.mutable_values();
  auto v = slots[0].mutable_values();
  auto g = grad.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    v[i] = round_to(dt, momentum * v[i] + g[i]);
    w[i] = round_to(dt, w[i] - lr * v[i]);
  }
}

void Adam::update_one(Tensor& param, const Tensor& grad, std::vector<Tensor>& slots) {
  const DType dt = param.dtype();
  if (slots.empty()) {
    slots.push_back(Tensor::zeros_like(param));
    slots.push_back(Tensor::zeros_like(param));
  }
  const double t = static_cast<double>(this->t());
  const double c1 = 1.0 - std::pow(beta1, t);
  const double c2 = 1.0 - std::pow(beta2, t);
  auto w = param.mutable_values();
  auto m = slots[0].mutable_values();
  auto v = slots[1].mutable_values();
  auto g = grad.values();
  for (std::size_t i = 0; i < w.size(); ++i) {
    m[i] = round_to(dt, beta1 * m[i] + (1.0 - beta1) * g[i]);
    v[i] = round_to(dt, beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]);
    const double mhat = m[i] / c1;
    const double vhat = v[i] / c2;
    w[i] = round_to(dt, w[i] - alpha * mhat / (std::sqrt(vhat) + eps));
  }
}

std::unique_ptr<Optimizer> make_optimizer(const OptimizerSpec& spec) {
  if (spec.name == "sgd") return std::make_unique<SGD>(spec.lr);
  if (spec.name == "momentum") return std::make_unique<MomentumSGD>(spec.lr, spec.momentum);
  if (spec.name == "adam") return std::make_unique<Adam>(spec.lr, spec.beta1, spec.beta2, spec.eps);
  throw Error("unknown optimizer '" + spec.name + "' (expected sgd, momentum or adam)");
}

}  // namespace dbr
