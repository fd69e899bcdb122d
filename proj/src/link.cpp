#include "dbr/link.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <random>

#include "dbr/functions.hpp"
#include "dbr/snapshot.hpp"

namespace dbr {
namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

}  // namespace

Tensor initialize(const Initializer& init, const Shape& shape, DType dtype, std::uint64_t seed,
                  const std::string& path) {
  if (init.kind == Initializer::Kind::constant) return Tensor::full(shape, dtype, init.value);
  const std::size_t fan_in = shape.rank() >= 2 ? shape[1] : (shape.rank() == 1 ? shape[0] : 1);
  std::mt19937_64 rng(splitmix64(seed ^ fnv1a(path)));
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(std::max<std::size_t>(fan_in, 1))));
  std::vector<double> v(shape.numel());
  for (auto& x : v) x = dist(rng);
  return Tensor::from_values(shape, std::move(v), dtype);
}

void Link::check_fresh_name(const std::string& name) const {
  if (name.empty() || name.find('/') != std::string::npos) throw Error("invalid link attribute name '" + name + "'");
  for (const auto& [n, p] : params_) {
    if (n == name) throw Error("duplicate name '" + name + "'");
  }
}

Variable Link::param(const std::string& name, const Shape& shape, Initializer init, DType dtype) {
  Variable v(initialize(init, shape, dtype, 0, "/" + name));
  v.set_name(name);
  if (in_scope_) {
    check_fresh_name(name);
    params_.push_back({name, Parameter{v, init}});
  }
  return v;
}

void Link::collect(const std::string& prefix, std::vector<std::pair<std::string, Variable>>& out) const {
  for (const auto& [name, p] : params_) out.emplace_back(prefix + "/" + name, p.variable);
}

void Link::collect_params(const std::string& prefix, std::vector<std::pair<std::string, Parameter*>>& out) {
  for (auto& [name, p] : params_) out.emplace_back(prefix + "/" + name, &p);
}

std::vector<std::pair<std::string, Variable>> Link::namedparams() const {
  std::vector<std::pair<std::string, Variable>> out;
  collect("", out);
  return out;
}

std::vector<Variable> Link::params() const {
  std::vector<Variable> out;
  for (auto& [path, v] : namedparams()) out.push_back(v);
  return out;
}

void Link::cleargrads() {
  for (auto& [path, v] : namedparams()) v.cleargrad();
}

void Link::reseed(std::uint64_t seed) {
  std::vector<std::pair<std::string, Parameter*>> all;
  collect_params("", all);
  for (auto& [path, p] : all) {
    p->variable.mutable_data() = initialize(p->init, p->variable.shape(), p->variable.dtype(), seed, path);
  }
}

Variable Link::forward(const Variable&) { throw Error("this link does not define forward"); }

void Chain::add_child(const std::string& name, LinkPtr child) {
  if (!in_init_scope()) return;
  if (!child) throw Error("cannot register a null link as '" + name + "'");
  check_fresh_name(name);
  if (child->parent_ != nullptr) throw Error("link '" + name + "' already belongs to another chain");
  for (const Link* a = this; a != nullptr; a = a->parent_) {
    if (a == child.get()) throw Error("registering '" + name + "' would create a cycle");
  }
  child->parent_ = this;
  children_.emplace_back(name, std::move(child));
}

void Chain::check_fresh_name(const std::string& name) const {
  Link::check_fresh_name(name);
  for (const auto& [n, c] : children_) {
    if (n == name) throw Error("duplicate name '" + name + "'");
  }
}

void Chain::collect(const std::string& prefix, std::vector<std::pair<std::string, Variable>>& out) const {
  Link::collect(prefix, out);
  for (const auto& [name, c] : children_) c->collect(prefix + "/" + name, out);
}

void Chain::collect_params(const std::string& prefix, std::vector<std::pair<std::string, Parameter*>>& out) {
  Link::collect_params(prefix, out);
  for (auto& [name, c] : children_) c->collect_params(prefix + "/" + name, out);
}

Linear::Linear(std::size_t n_in, std::size_t n_out, std::uint64_t seed, DType dtype) {
  if (n_in == 0 || n_out == 0) throw ShapeError("Linear: n_in and n_out must be at least 1");
  auto scope = init_scope();
  W = param("W", Shape{n_out, n_in}, Initializer::he_normal(), dtype);
  b = param("b", Shape{n_out}, Initializer::constant(0.0), dtype);
  reseed(seed);
}

Variable Linear::forward(const Variable& x) { return fn::linear(x, W, b); }

MLP::MLP(std::size_t n_in, std::size_t n_hid, std::size_t n_out, std::uint64_t seed, DType dtype) {
  auto scope = init_scope();
  l1 = link("l1", std::make_shared<Linear>(n_in, n_hid, seed, dtype));
  l2 = link("l2", std::make_shared<Linear>(n_hid, n_out, seed, dtype));
  reseed(seed);
}

Variable MLP::forward(const Variable& x) { return l2->forward(fn::relu(l1->forward(x))); }

void save(const Link& root, std::ostream& out) {
  std::vector<SnapshotRecord> records;
  for (const auto& [path, v] : root.namedparams()) records.push_back({path, v.data()});
  write_snapshot(out, records);
}

void load(Link& root, std::istream& in) {
  std::map<std::string, Tensor> by_path;
  for (auto& r : read_snapshot(in)) by_path[r.path] = r.tensor;
  auto targets = root.namedparams();
  // Validate everything before touching any parameter.
  for (const auto& [path, v] : targets) {
    auto it = by_path.find(path);
    if (it == by_path.end()) throw SerializationError("snapshot has no entry for " + path);
    if (it->second.shape() != v.shape()) {
      throw ShapeError("snapshot entry " + path + " has shape " + it->second.shape().str() + ", expected " +
                       v.shape().str());
    }
    if (it->second.dtype() != v.dtype()) {
      throw DTypeError("snapshot entry " + path + " has dtype " + dtype_name(it->second.dtype()));
    }
  }
  for (auto& [path, v] : targets) v.mutable_data() = by_path.at(path);
}

void save(const Link& root, const std::filesystem::path& file) {
  std::ofstream out(file, std::ios::binary);
  if (!out) throw SerializationError("cannot open " + file.string() + " for writing");
  save(root, out);
}

void load(Link& root, const std::filesystem::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw SerializationError("cannot open " + file.string());
  load(root, in);
}

}  // namespace dbr
