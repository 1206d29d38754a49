// Hash-consed bitvector term DAG. Width-1 terms are booleans.
#pragma once

#include "bbdse/isa.hpp"

#include <deque>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

namespace bbdse {

enum class Op : uint8_t {
  Const, Var,
  Add, Sub, Mul, UDiv, And, Or, Xor, Shl, LShr,
  Eq, Ne, Ult, Uge, Slt, Sge,
  Not, LAnd, LOr,
  Ite, Extract, Concat, ZExt,
};

struct Node {
  Op op;
  unsigned width;
  // Constant value, or low bit for Extract.
  Word value;
  uint32_t id;
  std::string name;
  const Node *kid[3];

  bool isConst() const { return op == Op::Const; }
  bool isVar() const { return op == Op::Var; }
  bool isBool() const { return width == 1; }
  unsigned arity() const;
};

using Term = const Node *;

bool isComparison(Op op);
const char *opName(Op op);

class TermStore {
public:
  TermStore() = default;
  TermStore(const TermStore &) = delete;
  TermStore &operator=(const TermStore &) = delete;

  Term constant(Word v, unsigned width);
  Term boolean(bool b) { return constant(b ? 1 : 0, 1); }
  Term var(const std::string &name, unsigned width);
  Term findVar(const std::string &name) const;

  Term add(Term a, Term b) { return binary(Op::Add, a, b); }
  Term sub(Term a, Term b) { return binary(Op::Sub, a, b); }
  Term mul(Term a, Term b) { return binary(Op::Mul, a, b); }
  Term binary(Op op, Term a, Term b);
  Term compare(Op op, Term a, Term b);
  Term eq(Term a, Term b) { return compare(Op::Eq, a, b); }
  Term ne(Term a, Term b) { return compare(Op::Ne, a, b); }
  Term lnot(Term a);
  Term land(Term a, Term b);
  Term lor(Term a, Term b);
  Term ite(Term c, Term a, Term b);
  Term extract(unsigned hi, unsigned lo, Term a);
  Term concat(Term hi, Term lo);
  Term zext(Term a, unsigned width);
  // Boolean to 0/1 word.
  Term boolToWord(Term c, unsigned width);

  // Rebuilds t with the given node-level substitution (memoized by the caller
  // through the map); nodes absent from the map are rebuilt from their kids.
  Term rebuild(Term t, std::unordered_map<uint32_t, Term> &memo,
               const std::function<Term(Term)> &leaf);

  size_t size() const { return nodes_.size(); }

private:
  struct Key {
    Op op;
    unsigned width;
    Word value;
    std::string name;
    const Node *k0, *k1, *k2;
    bool operator==(const Key &o) const {
      return op == o.op && width == o.width && value == o.value && k0 == o.k0 && k1 == o.k1 &&
             k2 == o.k2 && name == o.name;
    }
  };
  struct KeyHash {
    size_t operator()(const Key &k) const;
  };
  Term intern(Op op, unsigned width, Word value, const std::string &name, Term a, Term b, Term c);
  Term node(Op op, unsigned width, Word value, Term a = nullptr, Term b = nullptr, Term c = nullptr) {
    return intern(op, width, value, std::string(), a, b, c);
  }

  std::deque<Node> nodes_;
  std::unordered_map<Key, const Node *, KeyHash> table_;
  std::unordered_map<std::string, const Node *> vars_;
};

// Concrete semantics of one operator (operands already masked).
Word applyOp(Op op, unsigned width, Word a, Word b, Word c, unsigned argWidth, Word aux);

// Evaluates t; vars are looked up through `lookup`.
Word evaluate(Term t, const std::function<Word(Term)> &lookup);

// Collects the variables of t.
void collectVars(Term t, std::vector<Term> &out);

std::string toSmt(Term t);
std::string termToString(Term t);

} // namespace bbdse
