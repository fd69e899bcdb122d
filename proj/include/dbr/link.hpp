#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dbr/variable.hpp"

namespace dbr {

struct Initializer {
  enum class Kind { he_normal, constant };
  Kind kind = Kind::constant;
  double value = 0.0;

  static Initializer he_normal() { return {Kind::he_normal, 0.0}; }
  static Initializer constant(double c) { return {Kind::constant, c}; }
};

// Fills `shape` according to `init`. He-normal draws N(0, 2/fan_in) with
// fan_in the second extent (the first for vectors), from a generator seeded by
// (seed, path).
Tensor initialize(const Initializer& init, const Shape& shape, DType dtype, std::uint64_t seed,
                  const std::string& path);

struct Parameter {
  Variable variable;
  Initializer init;
};

class Link;
using LinkPtr = std::shared_ptr<Link>;

// A model fragment owning named parameters and, for chains, child links.
// Registration only happens while an InitScope is open; parameters created
// outside one stay plain unregistered variables.
class Link {
 public:
  Link() = default;
  virtual ~Link() = default;
  Link(const Link&) = delete;
  Link& operator=(const Link&) = delete;

  class InitScope {
   public:
    explicit InitScope(Link& link) : link_(link), previous_(link.in_scope_) { link_.in_scope_ = true; }
    ~InitScope() { link_.in_scope_ = previous_; }
    InitScope(const InitScope&) = delete;
    InitScope& operator=(const InitScope&) = delete;

   private:
    Link& link_;
    bool previous_;
  };

  [[nodiscard]] InitScope init_scope() { return InitScope(*this); }
  bool in_init_scope() const noexcept { return in_scope_; }

  // Creates a parameter; registers it under `name` if a scope is open.
  Variable param(const std::string& name, const Shape& shape, Initializer init, DType dtype = DType::f64);

  const std::vector<std::pair<std::string, Parameter>>& own_params() const noexcept { return params_; }

  // Depth-first, parameters before children, children in registration order.
  std::vector<std::pair<std::string, Variable>> namedparams() const;
  std::vector<Variable> params() const;

  void cleargrads();

  // Redraws every parameter from its initializer, keyed by its path.
  void reseed(std::uint64_t seed);

  virtual Variable forward(const Variable& x);
  Variable operator()(const Variable& x) { return forward(x); }

 protected:
  virtual void check_fresh_name(const std::string& name) const;
  virtual void collect(const std::string& prefix, std::vector<std::pair<std::string, Variable>>& out) const;
  virtual void collect_params(const std::string& prefix,
                              std::vector<std::pair<std::string, Parameter*>>& out);

  friend class Chain;
  Link* parent_ = nullptr;

 private:
  bool in_scope_ = false;
  std::vector<std::pair<std::string, Parameter>> params_;
};

// A link with child links. Children form a tree: a link can have at most one
// parent.
class Chain : public Link {
 public:
  // Registers `child` under `name` if a scope is open and returns it.
  template <typename L>
  std::shared_ptr<L> link(const std::string& name, std::shared_ptr<L> child) {
    add_child(name, child);
    return child;
  }

  const std::vector<std::pair<std::string, LinkPtr>>& children() const noexcept { return children_; }

 protected:
  void check_fresh_name(const std::string& name) const override;
  void collect(const std::string& prefix, std::vector<std::pair<std::string, Variable>>& out) const override;
  void collect_params(const std::string& prefix, std::vector<std::pair<std::string, Parameter*>>& out) override;

 private:
  void add_child(const std::string& name, LinkPtr child);

  std::vector<std::pair<std::string, LinkPtr>> children_;
};

class Linear : public Link {
 public:
  Linear(std::size_t n_in, std::size_t n_out, std::uint64_t seed = 0, DType dtype = DType::f64);
  Variable forward(const Variable& x) override;

  Variable W;
  Variable b;
};

// l2(relu(l1(x))).
class MLP : public Chain {
 public:
  MLP(std::size_t n_in, std::size_t n_hid, std::size_t n_out, std::uint64_t seed = 0, DType dtype = DType::f64);
  Variable forward(const Variable& x) override;

  std::shared_ptr<Linear> l1;
  std::shared_ptr<Linear> l2;
};

void save(const Link& root, const std::filesystem::path& file);
void load(Link& root, const std::filesystem::path& file);
void save(const Link& root, std::ostream& out);
void load(Link& root, std::istream& in);

}  // namespace dbr
