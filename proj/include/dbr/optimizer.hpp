#pragma once

#include <cstddef>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "dbr/link.hpp"

namespace dbr {

class Optimizer {
 public:
  virtual ~Optimizer() = default;

  // Binds the optimizer to `model` and drops all state.
  virtual void setup(Link& model);
  // Updates every parameter in place from its gradient. Gradients are left
  // as they are.
  virtual void update();

  Link* target() const noexcept { return target_; }
  std::size_t t() const noexcept { return t_; }
  // Total number of allocated state tensors.
  std::size_t state_size() const;

 protected:
  // `slots` starts empty the first time a parameter is updated.
  virtual void update_one(Tensor& param, const Tensor& grad, std::vector<Tensor>& slots) = 0;

  Link* target_ = nullptr;
  std::size_t t_ = 0;
  std::map<std::string, std::vector<Tensor>> state_;
};

class SGD final : public Optimizer {
 public:
  explicit SGD(double lr = 0.01) : lr(lr) {}
  double lr;

 protected:
  void update_one(Tensor& param, const Tensor& grad, std::vector<Tensor>& slots) override;
};

// v = mu * v + g; w -= lr * v
class MomentumSGD final : public Optimizer {
 public:
  explicit MomentumSGD(double lr = 0.01, double momentum = 0.9) : lr(lr), momentum(momentum) {}
  double lr;
  double momentum;

 protected:
  void update_one(Tensor& param, const Tensor& grad, std::vector<Tensor>& slots) override;
};

// Bias-corrected Adam.
class Adam final : public Optimizer {
 public:
  explicit Adam(double alpha = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : alpha(alpha), beta1(beta1), beta2(beta2), eps(eps) {}
  double alpha;
  double beta1;
  double beta2;
  double eps;

 protected:
  void update_one(Tensor& param, const Tensor& grad, std::vector<Tensor>& slots) override;
};

struct OptimizerSpec {
  std::string name = "sgd";  // sgd, momentum, adam
  double lr = 0.01;
  double momentum = 0.9;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

std::unique_ptr<Optimizer> make_optimizer(const OptimizerSpec& spec);

}  // namespace dbr
