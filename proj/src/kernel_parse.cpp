#include <cctype>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <set>

#include "dbr/kernel.hpp"

namespace dbr::kernel {
namespace {

enum class Tok { ident, number, plus, minus, star, slash, lparen, rparen, comma, assign, semicolon, end };

struct Token {
  Tok kind;
  std::size_t offset;
  std::string_view text;
  double number = 0.0;
};

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

class Lexer {
 public:
  explicit Lexer(std::string_view src) : src_(src) {}

  Token next() {
    while (pos_ < src_.size() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    const std::size_t start = pos_;
    if (pos_ >= src_.size()) return {Tok::end, start, {}};
    const char c = src_[pos_];
    if (ident_start(c)) {
      while (pos_ < src_.size() && ident_char(src_[pos_])) ++pos_;
      return {Tok::ident, start, src_.substr(start, pos_ - start)};
    }
    if (std::isdigit(static_cast<unsigned char>(c)) || c == '.') return number(start);
    ++pos_;
    switch (c) {
      case '+': return {Tok::plus, start, src_.substr(start, 1)};
      case '-': return {Tok::minus, start, src_.substr(start, 1)};
      case '*': return {Tok::star, start, src_.substr(start, 1)};
      case '/': return {Tok::slash, start, src_.substr(start, 1)};
      case '(': return {Tok::lparen, start, src_.substr(start, 1)};
      case ')': return {Tok::rparen, start, src_.substr(start, 1)};
      case ',': return {Tok::comma, start, src_.substr(start, 1)};
      case '=': return {Tok::assign, start, src_.substr(start, 1)};
      case ';': return {Tok::semicolon, start, src_.substr(start, 1)};
      default: throw ParseError(start, std::string("unexpected character '") + c + "'");
    }
  }

 private:
  Token number(std::size_t start) {
    auto digits = [&] {
      std::size_t n = 0;
      while (pos_ < src_.size() && std::isdigit(static_cast<unsigned char>(src_[pos_]))) ++pos_, ++n;
      return n;
    };
    std::size_t n = digits();
    if (pos_ < src_.size() && src_[pos_] == '.') {
      ++pos_;
      n += digits();
    }
    if (n == 0) throw ParseError(start, "malformed number");
    if (pos_ < src_.size() && (src_[pos_] == 'e' || src_[pos_] == 'E')) {
      ++pos_;
      if (pos_ < src_.size() && (src_[pos_] == '+' || src_[pos_] == '-')) ++pos_;
      if (digits() == 0) throw ParseError(start, "malformed exponent");
    }
    if (pos_ < src_.size() && ident_char(src_[pos_])) throw ParseError(pos_, "malformed number");
    const std::string text(src_.substr(start, pos_ - start));
    const double value = std::strtod(text.c_str(), nullptr);
    if (!std::isfinite(value)) throw ParseError(start, "literal out of range");
    return {Tok::number, start, src_.substr(start, pos_ - start), value};
  }

  std::string_view src_;
  std::size_t pos_ = 0;
};

std::string describe(const Token& t) {
  if (t.kind == Tok::end) return "end of input";
  return "'" + std::string(t.text) + "'";
}

int call_arity(std::string_view name) {
  if (name == "abs" || name == "exp" || name == "log" || name == "tanh") return 1;
  if (name == "min" || name == "max") return 2;
  return 0;
}

class Parser {
 public:
  explicit Parser(std::string_view src) : lex_(src) { advance(); }

  Assignment assignment() {
    if (cur_.kind != Tok::ident) throw ParseError(cur_.offset, "expected assignment target, got " + describe(cur_));
    Assignment a;
    a.target = std::string(cur_.text);
    advance();
    expect(Tok::assign, "'='");
    a.value = expr();
    if (cur_.kind == Tok::semicolon) advance();
    if (cur_.kind != Tok::end) {
      if (cur_.kind == Tok::ident) {
        Token save = cur_;
        advance();
        if (cur_.kind == Tok::assign) throw ParseError(save.offset, "multiple assignments are not supported");
        throw ParseError(save.offset, "unexpected " + describe(save));
      }
      throw ParseError(cur_.offset, "unexpected " + describe(cur_));
    }
    return a;
  }

 private:
  void advance() { cur_ = lex_.next(); }

  void expect(Tok kind, const char* what) {
    if (cur_.kind != kind) throw ParseError(cur_.offset, std::string("expected ") + what + ", got " + describe(cur_));
    advance();
  }

  Expr binary(char op, Expr lhs, Expr rhs) {
    Expr e;
    e.kind = Expr::Kind::binary;
    e.op = op;
    e.args.push_back(std::move(lhs));
    e.args.push_back(std::move(rhs));
    return e;
  }

  Expr expr() {
    Expr lhs = term();
    while (cur_.kind == Tok::plus || cur_.kind == Tok::minus) {
      const char op = cur_.kind == Tok::plus ? '+' : '-';
      advance();
      lhs = binary(op, std::move(lhs), term());
    }
    return lhs;
  }

  Expr term() {
    Expr lhs = unary();
    while (cur_.kind == Tok::star || cur_.kind == Tok::slash) {
      const char op = cur_.kind == Tok::star ? '*' : '/';
      advance();
      lhs = binary(op, std::move(lhs), unary());
    }
    return lhs;
  }

  Expr unary() {
    if (cur_.kind == Tok::minus) {
      advance();
      Expr e;
      e.kind = Expr::Kind::negate;
      e.args.push_back(unary());
      return e;
    }
    return primary();
  }

  Expr primary() {
    Expr e;
    switch (cur_.kind) {
      case Tok::number:
        e.kind = Expr::Kind::number;
        e.number = cur_.number;
        advance();
        return e;
      case Tok::ident: {
        const Token name = cur_;
        advance();
        if (cur_.kind != Tok::lparen) {
          e.kind = Expr::Kind::identifier;
          e.name = std::string(name.text);
          return e;
        }
        const int arity = call_arity(name.text);
        if (arity == 0) throw ParseError(name.offset, "unknown function '" + std::string(name.text) + "'");
        advance();
        e.kind = Expr::Kind::call;
        e.name = std::string(name.text);
        e.args.push_back(expr());
        while (cur_.kind == Tok::comma) {
          advance();
          e.args.push_back(expr());
        }
        if (static_cast<int>(e.args.size()) != arity) {
          throw ParseError(name.offset, e.name + " takes " + std::to_string(arity) + " argument(s)");
        }
        expect(Tok::rparen, "')'");
        return e;
      }
      case Tok::lparen:
        advance();
        e = expr();
        expect(Tok::rparen, "')'");
        return e;
      default:
        throw ParseError(cur_.offset, "expected operand, got " + describe(cur_));
    }
  }

  Lexer lex_;
  Token cur_{Tok::end, 0, {}};
};

}  // namespace

std::string TypeSpec::str() const {
  if (concrete) return *concrete == DType::f32 ? "float32" : "float64";
  return std::string(1, generic);
}

std::vector<ParamDecl> parse_signature(std::string_view text) {
  Lexer lex(text);
  std::vector<ParamDecl> out;
  std::set<std::string, std::less<>> names;
  Token t = lex.next();
  if (t.kind == Tok::end) return out;
  while (true) {
    if (t.kind != Tok::ident) throw ParseError(t.offset, "expected type specifier, got " + describe(t));
    ParamDecl decl;
    if (t.text == "float32") {
      decl.type.concrete = DType::f32;
    } else if (t.text == "float64") {
      decl.type.concrete = DType::f64;
    } else if (t.text.size() == 1 && std::isupper(static_cast<unsigned char>(t.text[0]))) {
      decl.type.generic = t.text[0];
    } else {
      throw ParseError(t.offset, "unknown type specifier '" + std::string(t.text) + "'");
    }
    t = lex.next();
    if (t.kind != Tok::ident) throw ParseError(t.offset, "expected parameter name, got " + describe(t));
    decl.name = std::string(t.text);
    if (!names.insert(decl.name).second) throw ParseError(t.offset, "duplicate parameter name '" + decl.name + "'");
    out.push_back(std::move(decl));
    t = lex.next();
    if (t.kind == Tok::end) return out;
    if (t.kind != Tok::comma) throw ParseError(t.offset, "expected ',' between parameters, got " + describe(t));
    t = lex.next();
  }
}

Assignment parse_expr(std::string_view text) { return Parser(text).assignment(); }

std::string to_string(const Expr& expr) {
  switch (expr.kind) {
    case Expr::Kind::number: {
      char buf[64];
      std::snprintf(buf, sizeof buf, "%.17g", expr.number);
      return buf;
    }
    case Expr::Kind::identifier:
      return expr.name;
    case Expr::Kind::negate:
      return "-" + to_string(expr.args[0]);
    case Expr::Kind::binary:
      return "(" + to_string(expr.args[0]) + " " + expr.op + " " + to_string(expr.args[1]) + ")";
    case Expr::Kind::call: {
      std::string s = expr.name + "(";
      for (std::size_t i = 0; i < expr.args.size(); ++i) {
        if (i) s += ", ";
        s += to_string(expr.args[i]);
      }
      return s + ")";
    }
  }
  return {};
}

std::string to_string(const Assignment& assignment) {
  return assignment.target + " = " + to_string(assignment.value);
}

}  // namespace dbr::kernel
