#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <sstream>

#include "dbr/functions.hpp"
#include "dbr/link.hpp"
#include "dbr/snapshot.hpp"

using namespace dbr;

namespace {

class Pair : public Link {
 public:
  Pair() {
    auto scope = init_scope();
    W = param("W", Shape{2, 3}, Initializer::he_normal());
    b = param("b", Shape{2}, Initializer::constant(0));
  }
  Variable W, b;
};

bool param_values_equal(const Link& a, const Link& b) {
  const auto pa = a.namedparams(), pb = b.namedparams();
  if (pa.size() != pb.size()) return false;
  for (std::size_t i = 0; i < pa.size(); ++i) {
    const auto x = pa[i].second.data().values(), y = pb[i].second.data().values();
    if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) return false;
  }
  return true;
}

std::vector<std::string> paths(const Link& l) {
  std::vector<std::string> out;
  for (const auto& [p, v] : l.namedparams()) out.push_back(p);
  return out;
}

}  // namespace

TEST(Link, InitScopeRegisters) {
  Pair p;
  EXPECT_EQ(p.params().size(), 2u);
  EXPECT_EQ(paths(p), (std::vector<std::string>{"/W", "/b"}));
}

TEST(Link, DuplicateNameRejected) {
  Link l;
  auto scope = l.init_scope();
  l.param("W", Shape{1}, Initializer::constant(0));
  EXPECT_THROW(l.param("W", Shape{1}, Initializer::constant(0)), Error);
  EXPECT_THROW(l.param("a/b", Shape{1}, Initializer::constant(0)), Error);
}

TEST(Link, OutsideScopeIsUnregistered) {
  Link l;
  const Variable v = l.param("W", Shape{2}, Initializer::constant(1));
  EXPECT_EQ(v.shape(), (Shape{2}));
  EXPECT_TRUE(l.params().empty());
}

TEST(Link, HeNormalStd) {
  const Tensor t = initialize(Initializer::he_normal(), Shape{25000, 4}, DType::f64, 3, "/W");
  double sum = 0, sq = 0;
  for (double v : t.values()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(t.numel());
  const double sd = std::sqrt(sq / n - (sum / n) * (sum / n));
  EXPECT_NEAR(sd, std::sqrt(2.0 / 4.0), 0.05 * std::sqrt(2.0 / 4.0));
}

TEST(Link, LinearLayer) {
  Linear l(4, 3, 9);
  EXPECT_EQ(l.W.shape(), (Shape{3, 4}));
  for (double v : l.b.data().values()) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(l(Variable(Tensor::ones(Shape{5, 4}))).shape(), (Shape{5, 3}));
}

TEST(Link, MLPStructure) {
  MLP m(2, 4, 3, 1);
  EXPECT_EQ(m.params().size(), 4u);
  EXPECT_EQ(paths(m), (std::vector<std::string>{"/l1/W", "/l1/b", "/l2/W", "/l2/b"}));
  EXPECT_EQ(m.l1->params().size(), 2u);
  EXPECT_EQ(paths(m), paths(m));

  m.l2->b.mutable_data() = Tensor::from_values(Shape{3}, {1, 2, 3});
  const Variable y = m(Variable(Tensor::zeros(Shape{1, 2})));
  EXPECT_EQ(std::vector<double>(y.data().values().begin(), y.data().values().end()), (std::vector<double>{1, 2, 3}));
}

TEST(Link, EmptyChain) {
  Chain c;
  EXPECT_TRUE(c.namedparams().empty());
}

TEST(Link, ChildSharingRejected) {
  Chain a, b;
  auto child = std::make_shared<Linear>(2, 2);
  {
    auto s = a.init_scope();
    a.link("c", child);
  }
  auto s = b.init_scope();
  EXPECT_THROW(b.link("c", child), Error);
}

TEST(Link, RandomTreeTraversal) {
  // Builds random trees and compares namedparams with a depth-first oracle
  // over a parallel description of the same tree.
  struct Desc {
    std::vector<std::string> params;
    std::vector<std::pair<std::string, Desc>> children;
  };
  std::mt19937_64 rng(12);
  std::function<std::shared_ptr<Chain>(Desc&, int)> build = [&](Desc& d, int depth) {
    auto c = std::make_shared<Chain>();
    auto scope = c->init_scope();
    const int np = static_cast<int>(rng() % 3);
    for (int i = 0; i < np; ++i) {
      d.params.push_back("p" + std::to_string(i));
      c->param(d.params.back(), Shape{1}, Initializer::constant(i));
    }
    const int nc = depth < 3 ? static_cast<int>(rng() % 3) : 0;
    for (int i = 0; i < nc; ++i) {
      d.children.emplace_back("c" + std::to_string(i), Desc{});
      c->link(d.children.back().first, build(d.children.back().second, depth + 1));
    }
    return c;
  };
  std::function<void(const Desc&, const std::string&, std::vector<std::string>&)> walk =
      [&](const Desc& d, const std::string& prefix, std::vector<std::string>& out) {
        for (const auto& p : d.params) out.push_back(prefix + "/" + p);
        for (const auto& [name, child] : d.children) walk(child, prefix + "/" + name, out);
      };
  for (int trial = 0; trial < 20; ++trial) {
    Desc d;
    auto root = build(d, 0);
    std::vector<std::string> expected;
    walk(d, "", expected);
    EXPECT_EQ(paths(*root), expected);
  }
}

TEST(Link, SaveLoadRoundTrip) {
  MLP a(3, 5, 2, 1), b(3, 5, 2, 2);
  std::stringstream buf;
  save(a, buf);
  load(b, buf);
  EXPECT_TRUE(param_values_equal(a, b));
  const auto file = std::filesystem::temp_directory_path() / "dbr_link_test.snap";
  save(a, file);
  MLP c(3, 5, 2, 3);
  load(c, file);
  EXPECT_TRUE(param_values_equal(a, c));
  std::filesystem::remove(file);
}

TEST(Link, LoadMissingPath) {
  Linear small(3, 2);
  std::stringstream buf;
  save(small, buf);
  MLP m(3, 5, 2);
  EXPECT_THROW(load(m, buf), SerializationError);
}

TEST(Link, LoadTransposedShape) {
  Linear a(3, 2), b(2, 3);
  std::stringstream buf;
  save(a, buf);
  const auto before = std::vector<double>(b.W.data().values().begin(), b.W.data().values().end());
  EXPECT_THROW(load(b, buf), ShapeError);
  EXPECT_EQ(std::vector<double>(b.W.data().values().begin(), b.W.data().values().end()), before);
}

TEST(Link, LoadDTypeMismatch) {
  Linear a(2, 2, 0, DType::f32), b(2, 2, 0, DType::f64);
  std::stringstream buf;
  save(a, buf);
  EXPECT_THROW(load(b, buf), DTypeError);
}

TEST(Link, ReseedIsReproducible) {
  MLP a(2, 3, 2, 0), b(2, 3, 2, 0);
  a.reseed(44);
  b.reseed(44);
  EXPECT_TRUE(param_values_equal(a, b));
}
