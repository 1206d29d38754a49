#include "bbdse/term.hpp"

#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace bbdse {

unsigned Node::arity() const {
  switch (op) {
  case Op::Const: case Op::Var: return 0;
  case Op::Not: case Op::Extract: case Op::ZExt: return 1;
  case Op::Ite: return 3;
  default: return 2;
  }
}

bool isComparison(Op op) {
  return op == Op::Eq || op == Op::Ne || op == Op::Ult || op == Op::Uge || op == Op::Slt ||
         op == Op::Sge;
}

const char *opName(Op op) {
  switch (op) {
  case Op::Const: return "const";
  case Op::Var: return "var";
  case Op::Add: return "bvadd";
  case Op::Sub: return "bvsub";
  case Op::Mul: return "bvmul";
  case Op::UDiv: return "bvudiv";
  case Op::And: return "bvand";
  case Op::Or: return "bvor";
  case Op::Xor: return "bvxor";
  case Op::Shl: return "bvshl";
  case Op::LShr: return "bvlshr";
  case Op::Eq: return "=";
  case Op::Ne: return "distinct";
  case Op::Ult: return "bvult";
  case Op::Uge: return "bvuge";
  case Op::Slt: return "bvslt";
  case Op::Sge: return "bvsge";
  case Op::Not: return "not";
  case Op::LAnd: return "and";
  case Op::LOr: return "or";
  case Op::Ite: return "ite";
  case Op::Extract: return "extract";
  case Op::Concat: return "concat";
  case Op::ZExt: return "zero_extend";
  }
  return "?";
}

size_t TermStore::KeyHash::operator()(const Key &k) const {
  size_t h = std::hash<Word>()(k.value);
  auto mix = [&h](size_t v) { h ^= v + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2); };
  mix(static_cast<size_t>(k.op));
  mix(k.width);
  mix(std::hash<const void *>()(k.k0));
  mix(std::hash<const void *>()(k.k1));
  mix(std::hash<const void *>()(k.k2));
  if (!k.name.empty())
    mix(std::hash<std::string>()(k.name));
  return h;
}

Term TermStore::intern(Op op, unsigned width, Word value, const std::string &name, Term a, Term b,
                       Term c) {
  Key key{op, width, value, name, a, b, c};
  auto it = table_.find(key);
  if (it != table_.end())
    return it->second;
  nodes_.push_back(Node{op, width, value, static_cast<uint32_t>(nodes_.size()), name, {a, b, c}});
  const Node *n = &nodes_.back();
  table_.emplace(std::move(key), n);
  return n;
}

Term TermStore::constant(Word v, unsigned width) {
  return node(Op::Const, width, v & widthMask(width));
}

Term TermStore::var(const std::string &name, unsigned width) {
  auto it = vars_.find(name);
  if (it != vars_.end()) {
    if (it->second->width != width)
      throw std::logic_error("variable " + name + " redeclared with another width");
    return it->second;
  }
  Term t = intern(Op::Var, width, 0, name, nullptr, nullptr, nullptr);
  vars_[name] = t;
  return t;
}

Term TermStore::findVar(const std::string &name) const {
  auto it = vars_.find(name);
  return it == vars_.end() ? nullptr : it->second;
}

namespace {

int64_t sext(Word v, unsigned w) {
  if (w >= 64)
    return static_cast<int64_t>(v);
  Word sign = Word(1) << (w - 1);
  return (v & sign) ? static_cast<int64_t>(v | ~widthMask(w)) : static_cast<int64_t>(v);
}

bool commutative(Op op) {
  return op == Op::Add || op == Op::Mul || op == Op::And || op == Op::Or || op == Op::Xor;
}

// Splits t into base + offset when t is (x + c); otherwise (t, 0).
std::pair<Term, Word> affine(Term t) {
  if (t->op == Op::Add && t->kid[1]->isConst())
    return {t->kid[0], t->kid[1]->value};
  return {t, 0};
}

Op negated(Op op) {
  switch (op) {
  case Op::Eq: return Op::Ne;
  case Op::Ne: return Op::Eq;
  case Op::Ult: return Op::Uge;
  case Op::Uge: return Op::Ult;
  case Op::Slt: return Op::Sge;
  case Op::Sge: return Op::Slt;
  default: return op;
  }
}

} // namespace

Word applyOp(Op op, unsigned w, Word a, Word b, Word c, unsigned argWidth, Word aux) {
  Word m = widthMask(w);
  switch (op) {
  case Op::Add: return (a + b) & m;
  case Op::Sub: return (a - b) & m;
  case Op::Mul: return (a * b) & m;
  case Op::UDiv: return b == 0 ? m : a / b;
  case Op::And: return a & b;
  case Op::Or: return a | b;
  case Op::Xor: return a ^ b;
  case Op::Shl: return b >= w ? 0 : (a << b) & m;
  case Op::LShr: return b >= w ? 0 : a >> b;
  case Op::Eq: return a == b;
  case Op::Ne: return a != b;
  case Op::Ult: return a < b;
  case Op::Uge: return a >= b;
  case Op::Slt: return sext(a, argWidth) < sext(b, argWidth);
  case Op::Sge: return sext(a, argWidth) >= sext(b, argWidth);
  case Op::Not: return !a;
  case Op::LAnd: return a && b;
  case Op::LOr: return a || b;
  case Op::Ite: return a ? b : c;
  case Op::Extract: return (a >> aux) & m;
  case Op::Concat: return ((a << argWidth) | b) & m;
  case Op::ZExt: return a;
  default: throw std::logic_error("applyOp on leaf");
  }
}

Term TermStore::binary(Op op, Term a, Term b) {
  if (a->width != b->width || a->isBool())
    throw std::logic_error(std::string("ill-sorted ") + opName(op));
  unsigned w = a->width;
  Word m = widthMask(w);
  if (a->isConst() && b->isConst())
    return constant(applyOp(op, w, a->value, b->value, 0, w, 0), w);
  if (commutative(op) && (a->isConst() || (!b->isConst() && b->id < a->id)))
    std::swap(a, b);
  // Push operations with a constant into ite with constant arms.
  if (b->isConst() && a->op == Op::Ite && a->kid[1]->isConst() && a->kid[2]->isConst())
    return ite(a->kid[0], binary(op, a->kid[1], b), binary(op, a->kid[2], b));
  switch (op) {
  case Op::Sub:
    if (a == b)
      return constant(0, w);
    if (b->isConst())
      return binary(Op::Add, a, constant(0 - b->value, w));
    break;
  case Op::Add:
    if (b->isConst()) {
      if (b->value == 0)
        return a;
      if (a->op == Op::Add && a->kid[1]->isConst())
        return binary(Op::Add, a->kid[0], constant(a->kid[1]->value + b->value, w));
    }
    break;
  case Op::Mul:
    if (b->isConst()) {
      if (b->value == 0)
        return b;
      if (b->value == 1)
        return a;
      if (a->op == Op::Mul && a->kid[1]->isConst())
        return binary(Op::Mul, a->kid[0], constant(a->kid[1]->value * b->value, w));
    }
    break;
  case Op::UDiv:
    if (b->isConst() && b->value == 1)
      return a;
    break;
  case Op::And:
    if (b->isConst() && b->value == 0)
      return b;
    if (b->isConst() && b->value == m)
      return a;
    if (a == b)
      return a;
    break;
  case Op::Or:
    if (b->isConst() && b->value == 0)
      return a;
    if (b->isConst() && b->value == m)
      return b;
    if (a == b)
      return a;
    break;
  case Op::Xor:
    if (b->isConst() && b->value == 0)
      return a;
    if (a == b)
      return constant(0, w);
    break;
  case Op::Shl:
  case Op::LShr:
    if (b->isConst() && b->value == 0)
      return a;
    if (b->isConst() && b->value >= w)
      return constant(0, w);
    break;
  default:
    throw std::logic_error(std::string("not a binary bitvector op: ") + opName(op));
  }
  return node(op, w, 0, a, b);
}

Term TermStore::compare(Op op, Term a, Term b) {
  if (a->width != b->width)
    throw std::logic_error(std::string("ill-sorted ") + opName(op));
  if (a->isBool() && op != Op::Eq && op != Op::Ne)
    throw std::logic_error("ordered comparison on booleans");
  unsigned w = a->width;
  if (a->isConst() && b->isConst())
    return boolean(applyOp(op, 1, a->value, b->value, 0, w, 0));
  if (a == b)
    return boolean(op == Op::Eq || op == Op::Uge || op == Op::Sge);
  if (op == Op::Eq || op == Op::Ne) {
    if (a->isBool()) {
      if (b->isConst())
        std::swap(a, b);
      if (a->isConst())
        return (a->value != 0) == (op == Op::Eq) ? b : lnot(b);
    } else {
      if (a->isConst() || (!b->isConst() && b->id < a->id))
        std::swap(a, b);
      auto [xa, ca] = affine(a);
      auto [xb, cb] = affine(b);
      if (xa == xb)
        return boolean((ca == cb) == (op == Op::Eq));
      if (b->isConst() && ca != 0)
        return compare(op, xa, constant(b->value - ca, w));
    }
  }
  if (!a->isBool() && b->isConst() && a->op == Op::Ite && a->kid[1]->isConst() &&
      a->kid[2]->isConst())
    return ite(a->kid[0], compare(op, a->kid[1], b), compare(op, a->kid[2], b));
  return node(op, 1, 0, a, b);
}

Term TermStore::lnot(Term a) {
  if (!a->isBool())
    throw std::logic_error("not on bitvector");
  if (a->isConst())
    return boolean(a->value == 0);
  if (a->op == Op::Not)
    return a->kid[0];
  if (isComparison(a->op))
    return node(negated(a->op), 1, 0, a->kid[0], a->kid[1]);
  return node(Op::Not, 1, 0, a);
}

Term TermStore::land(Term a, Term b) {
  if (a->isConst())
    return a->value ? b : a;
  if (b->isConst())
    return b->value ? a : b;
  if (a == b)
    return a;
  if (b->id < a->id)
    std::swap(a, b);
  return node(Op::LAnd, 1, 0, a, b);
}

Term TermStore::lor(Term a, Term b) {
  if (a->isConst())
    return a->value ? a : b;
  if (b->isConst())
    return b->value ? b : a;
  if (a == b)
    return a;
  if (b->id < a->id)
    std::swap(a, b);
  return node(Op::LOr, 1, 0, a, b);
}

Term TermStore::ite(Term c, Term a, Term b) {
  if (!c->isBool() || a->width != b->width)
    throw std::logic_error("ill-sorted ite");
  if (c->isConst())
    return c->value ? a : b;
  if (a == b)
    return a;
  if (a->isBool() && a->isConst() && b->isConst())
    return a->value ? c : lnot(c);
  if (c->op == Op::Not)
    return ite(c->kid[0], b, a);
  return node(Op::Ite, a->width, 0, c, a, b);
}

Term TermStore::extract(unsigned hi, unsigned lo, Term a) {
  if (hi < lo || hi >= a->width)
    throw std::logic_error("bad extract");
  unsigned w = hi - lo + 1;
  if (lo == 0 && hi == a->width - 1)
    return a;
  if (a->isConst())
    return constant(a->value >> lo, w);
  if (a->op == Op::Extract)
    return extract(hi + static_cast<unsigned>(a->value), lo + static_cast<unsigned>(a->value),
                   a->kid[0]);
  if (a->op == Op::Concat) {
    unsigned wl = a->kid[1]->width;
    if (hi < wl)
      return extract(hi, lo, a->kid[1]);
    if (lo >= wl)
      return extract(hi - wl, lo - wl, a->kid[0]);
  }
  if (a->op == Op::ZExt) {
    unsigned wx = a->kid[0]->width;
    if (hi < wx)
      return extract(hi, lo, a->kid[0]);
    if (lo >= wx)
      return constant(0, w);
  }
  if (a->op == Op::Ite && a->kid[1]->isConst() && a->kid[2]->isConst())
    return ite(a->kid[0], extract(hi, lo, a->kid[1]), extract(hi, lo, a->kid[2]));
  return node(Op::Extract, w, lo, a);
}

Term TermStore::concat(Term hi, Term lo) {
  if (hi->isBool() || lo->isBool())
    throw std::logic_error("concat on booleans");
  unsigned w = hi->width + lo->width;
  if (w > 64)
    throw std::logic_error("concat wider than 64 bits");
  if (hi->isConst() && lo->isConst())
    return constant((hi->value << lo->width) | lo->value, w);
  if (hi->op == Op::Extract && lo->op == Op::Extract && hi->kid[0] == lo->kid[0] &&
      hi->value == lo->value + lo->width)
    return extract(static_cast<unsigned>(hi->value) + hi->width - 1,
                   static_cast<unsigned>(lo->value), lo->kid[0]);
  if (hi->isConst() && hi->value == 0)
    return zext(lo, w);
  return node(Op::Concat, w, 0, hi, lo);
}

Term TermStore::zext(Term a, unsigned width) {
  if (a->isBool() || width < a->width)
    throw std::logic_error("bad zero_extend");
  if (width == a->width)
    return a;
  if (a->isConst())
    return constant(a->value, width);
  return node(Op::ZExt, width, 0, a);
}

Term TermStore::boolToWord(Term c, unsigned width) {
  return ite(c, constant(1, width), constant(0, width));
}

Term TermStore::rebuild(Term t, std::unordered_map<uint32_t, Term> &memo,
                        const std::function<Term(Term)> &leaf) {
  // Iterative post-order to survive deep chains.
  std::vector<std::pair<Term, bool>> stack{{t, false}};
  while (!stack.empty()) {
    auto [n, expanded] = stack.back();
    stack.pop_back();
    if (memo.count(n->id))
      continue;
    if (n->arity() == 0) {
      memo[n->id] = n->isVar() ? leaf(n) : n;
      continue;
    }
    if (!expanded) {
      stack.push_back({n, true});
      for (unsigned i = 0; i < n->arity(); ++i)
        if (!memo.count(n->kid[i]->id))
          stack.push_back({n->kid[i], false});
      continue;
    }
    Term k[3] = {nullptr, nullptr, nullptr};
    for (unsigned i = 0; i < n->arity(); ++i)
      k[i] = memo.at(n->kid[i]->id);
    Term r;
    switch (n->op) {
    case Op::Not: r = lnot(k[0]); break;
    case Op::LAnd: r = land(k[0], k[1]); break;
    case Op::LOr: r = lor(k[0], k[1]); break;
    case Op::Ite: r = ite(k[0], k[1], k[2]); break;
    case Op::Extract:
      r = extract(static_cast<unsigned>(n->value) + n->width - 1, static_cast<unsigned>(n->value), k[0]);
      break;
    case Op::Concat: r = concat(k[0], k[1]); break;
    case Op::ZExt: r = zext(k[0], n->width); break;
    default:
      r = isComparison(n->op) ? compare(n->op, k[0], k[1]) : binary(n->op, k[0], k[1]);
    }
    memo[n->id] = r;
  }
  return memo.at(t->id);
}

Word evaluate(Term t, const std::function<Word(Term)> &lookup) {
  std::unordered_map<uint32_t, Word> val;
  std::vector<std::pair<Term, bool>> stack{{t, false}};
  while (!stack.empty()) {
    auto [n, expanded] = stack.back();
    stack.pop_back();
    if (val.count(n->id))
      continue;
    if (n->isConst()) {
      val[n->id] = n->value;
      continue;
    }
    if (n->isVar()) {
      val[n->id] = lookup(n) & widthMask(n->width);
      continue;
    }
    if (!expanded) {
      stack.push_back({n, true});
      for (unsigned i = 0; i < n->arity(); ++i)
        stack.push_back({n->kid[i], false});
      continue;
    }
    Word a = val.at(n->kid[0]->id);
    Word b = n->arity() > 1 ? val.at(n->kid[1]->id) : 0;
    Word c = n->arity() > 2 ? val.at(n->kid[2]->id) : 0;
    unsigned aw = n->op == Op::Concat ? n->kid[1]->width : n->kid[0]->width;
    val[n->id] = applyOp(n->op, n->width, a, b, c, aw, n->value);
  }
  return val.at(t->id);
}

void collectVars(Term t, std::vector<Term> &out) {
  std::unordered_set<uint32_t> seen;
  std::vector<Term> stack{t};
  while (!stack.empty()) {
    Term n = stack.back();
    stack.pop_back();
    if (!seen.insert(n->id).second)
      continue;
    if (n->isVar())
      out.push_back(n);
    for (unsigned i = 0; i < n->arity(); ++i)
      stack.push_back(n->kid[i]);
  }
}

namespace {

void smt(Term t, std::ostream &os) {
  switch (t->op) {
  case Op::Const:
    if (t->isBool())
      os << (t->value ? "true" : "false");
    else
      os << "(_ bv" << t->value << " " << t->width << ")";
    return;
  case Op::Var:
    os << t->name;
    return;
  case Op::Extract:
    os << "((_ extract " << t->value + t->width - 1 << " " << t->value << ") ";
    smt(t->kid[0], os);
    os << ")";
    return;
  case Op::ZExt:
    os << "((_ zero_extend " << t->width - t->kid[0]->width << ") ";
    smt(t->kid[0], os);
    os << ")";
    return;
  default:
    os << "(" << opName(t->op);
    for (unsigned i = 0; i < t->arity(); ++i) {
      os << " ";
      smt(t->kid[i], os);
    }
    os << ")";
  }
}

const char *infix(Op op) {
  switch (op) {
  case Op::Add: return "+";
  case Op::Sub: return "-";
  case Op::Mul: return "*";
  case Op::UDiv: return "/";
  case Op::And: return "&";
  case Op::Or: return "|";
  case Op::Xor: return "^";
  case Op::Shl: return "<<";
  case Op::LShr: return ">>";
  case Op::Eq: return "==";
  case Op::Ne: return "!=";
  case Op::Ult: return "<u";
  case Op::Uge: return ">=u";
  case Op::Slt: return "<s";
  case Op::Sge: return ">=s";
  case Op::LAnd: return "&&";
  case Op::LOr: return "||";
  case Op::Concat: return "::";
  default: return "?";
  }
}

void pretty(Term t, std::ostream &os) {
  switch (t->op) {
  case Op::Const:
    if (t->isBool())
      os << (t->value ? "true" : "false");
    else
      os << t->value;
    return;
  case Op::Var:
    os << t->name;
    return;
  case Op::Not:
    os << "!";
    pretty(t->kid[0], os);
    return;
  case Op::Ite:
    os << "(";
    pretty(t->kid[0], os);
    os << " ? ";
    pretty(t->kid[1], os);
    os << " : ";
    pretty(t->kid[2], os);
    os << ")";
    return;
  case Op::Extract:
    pretty(t->kid[0], os);
    os << "[" << t->value + t->width - 1 << ":" << t->value << "]";
    return;
  case Op::ZExt:
    os << "zext" << t->width << "(";
    pretty(t->kid[0], os);
    os << ")";
    return;
  default:
    os << "(";
    pretty(t->kid[0], os);
    os << " " << infix(t->op) << " ";
    pretty(t->kid[1], os);
    os << ")";
  }
}

} // namespace

std::string toSmt(Term t) {
  std::ostringstream os;
  smt(t, os);
  return os.str();
}

std::string termToString(Term t) {
  std::ostringstream os;
  pretty(t, os);
  return os.str();
}

} // namespace bbdse
