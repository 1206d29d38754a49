// Satisfiability checking: external SMT-LIB2 solver plus an exhaustive oracle.
#pragma once

#include "bbdse/formula.hpp"

#include <mutex>

namespace bbdse {

enum class VerdictKind { SAT, UNSAT, TIMEOUT, UNKNOWN };
const char *verdictName(VerdictKind k);

struct Verdict {
  VerdictKind kind = VerdictKind::UNKNOWN;
  // Values of the formula's free variables (SAT only).
  std::map<std::string, Word> model;
  double elapsed = 0; // seconds
  std::string diagnostic;
  // Which stage produced the answer: fold, sample, cache, solver, brute.
  std::string source;

  bool sat() const { return kind == VerdictKind::SAT; }
  bool unsat() const { return kind == VerdictKind::UNSAT; }
};

// Optional known value of a free variable, e.g. the one seen on the trace.
using Hint = std::function<std::optional<Word>(Term)>;

struct SolverConfig {
  std::string path;
  unsigned timeoutMs = 5000;
  // Answer by constant folding / concrete sampling before calling the solver.
  bool fastPaths = true;
  bool cache = true;
  // Drop constraints not connected to the goal; only valid when every branch
  // condition was observed on a real execution.
  bool pruneUnrelated = false;
  // When non-empty, every script sent to the solver is written here.
  std::string dumpDir;
};

// BBDSE_SOLVER, else z3 found on PATH, else "z3".
std::string defaultSolverPath();

// Flattened evaluator over the free variables of a formula.
class CompiledFormula {
public:
  explicit CompiledFormula(const SliceFormula &f);
  const std::vector<Term> &inputs() const { return inputs_; }
  // Evaluates with inputs given in inputs() order. Returns true when every
  // branch condition (and the goal, if requested) holds.
  bool run(const std::vector<Word> &in, bool withGoal = true);
  unsigned inputBits() const;

private:
  struct Ins {
    Op op;
    unsigned width;
    Word aux;
    int a, b, c;
    unsigned argWidth;
    int dst;
  };
  std::vector<Term> inputs_;
  std::vector<Ins> code_;
  std::vector<Word> vals_;
  std::vector<int> inputSlot_;
  std::vector<int> condSlot_;
  int goalSlot_ = -1;
};

// SMT-LIB2 (QF_BV) script: declarations, one assert per constraint plus one
// for the goal, check-sat. With `canonical`, variables are renamed v0, v1, ...
// in order of first use so that isomorphic slices produce identical text.
struct SmtScript {
  std::string text;
  // canonical name -> original variable name (identity when not canonical)
  std::vector<std::pair<std::string, std::string>> names;
};
SmtScript emitSmt(const SliceFormula &f, bool canonical = false);
std::string emitSmtlib(const SliceFormula &f);

// Exhaustive enumeration of the free variables; at most 24 bits in total.
Verdict bruteCheck(const SliceFormula &f);

// Restricts f to the constraints sharing variables with the goal.
SliceFormula pruneToGoal(const SliceFormula &f);

struct SolverStats {
  size_t queries = 0;
  size_t solverCalls = 0;
  size_t cacheHits = 0;
  size_t folded = 0;
  size_t sampled = 0;
  double solverSeconds = 0;
};

class Solver {
public:
  explicit Solver(SolverConfig cfg = {});
  Verdict check(const SliceFormula &f, const Hint &hint = nullptr);
  // Runs a raw script through the external solver.
  Verdict runScript(const std::string &script, const std::vector<std::string> &varNames);
  const SolverConfig &config() const { return cfg_; }
  SolverConfig &config() { return cfg_; }
  SolverStats stats() const;
  void clearCache();

private:
  struct CacheEntry {
    VerdictKind kind;
    std::map<std::string, Word> model; // canonical names
  };
  SolverConfig cfg_;
  mutable std::mutex mu_;
  std::unordered_map<std::string, CacheEntry> cache_;
  SolverStats stats_;
  size_t dumpSeq_ = 0;
};

} // namespace bbdse
