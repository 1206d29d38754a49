// Path predicates over traces: bounded backward slices and the full forward
// path predicate.
#pragma once

#include "bbdse/term.hpp"
#include "bbdse/tracer.hpp"

#include <unordered_set>

namespace bbdse {

// Transfer equation var = rhs, introduced by trace step `step`.
struct Def {
  Term var;
  Term rhs;
  size_t step;
};

// Branch condition observed at a conditional jump.
struct BranchCond {
  Term cond;
  size_t step;
};

struct SliceFormula {
  std::shared_ptr<TermStore> store;
  unsigned width = 32;
  std::vector<Def> defs;
  std::vector<BranchCond> conds;
  Term goal = nullptr;
  // Free variables, sorted by name.
  std::vector<Term> cutInputs;
  // Window of trace steps [spanLo, spanHi); spanHi is the occurrence.
  size_t spanLo = 0, spanHi = 0;
  unsigned kUsed = 0;

  size_t constraintCount() const { return defs.size() + conds.size(); }
  // Every constraint as a boolean term (defs as equalities, then conditions).
  std::vector<Term> constraints() const;
};

struct ReachabilityCondition {
  Addr addr = 0;
  size_t occurrence = 0;
  Term goal = nullptr;
};

enum class BoundMetric { Steps, DefUse };

// SSA view of a trace. Every register or memory-word definition is named
// after the step that performs it (r3_12, sp_40, m1000_7), values never
// defined inside the trace are inputs (r3_in, m2000_in), so transfer
// equations do not depend on the slicing bound.
class TraceSSA {
public:
  explicit TraceSSA(const Trace &trace, std::shared_ptr<TermStore> store = nullptr);

  const Trace &trace() const { return *trace_; }
  TermStore &store() { return *store_; }
  std::shared_ptr<TermStore> storePtr() const { return store_; }
  unsigned width() const { return trace_->width(); }
  size_t size() const { return trace_->steps.size(); }

  // Pre-state value of register r at step i.
  Term reg(size_t step, unsigned r) const;
  // Word read from memory by LOAD/POP/RET at step i.
  Term memRead(size_t step) const;
  // Stack pointer after step i executes.
  Term spAfter(size_t step) const;
  // Condition under which the conditional jump at step i is taken.
  Term takenCond(size_t step) const;
  // Branch condition as observed at step i (true on the trace).
  Term observedCond(size_t step) const;
  // Jump target term of JMPR/CALLR (register) or RET (memory word).
  Term targetTerm(size_t step) const;

  const std::vector<Def> &defsAt(size_t step) const { return steps_[step].defs; }
  const Def *defOf(Term var) const;
  bool isInput(Term var) const;
  // Operand variables of a definition or branch condition, cached.
  const std::vector<Term> &varsOf(Term t) const;

  // Value the variable takes on the recorded execution.
  Word concreteValue(Term var) const;
  bool hasConcreteValue(Term var) const { return concrete_.count(var->id) != 0; }
  // Term over inputs only, obtained by substituting every definition.
  Term inlined(Term t);

private:
  struct StepInfo {
    std::array<int64_t, kNumRegs> regVer;
    std::vector<Def> defs;
    Term read = nullptr;
    Term spPost = nullptr;
  };

  Term regVar(unsigned r, int64_t ver);
  Term memTerm(size_t step, Addr ea, Term addrTerm);
  Term defineWord(size_t step, const std::string &name, Term rhs, Word concrete);

  const Trace *trace_;
  std::shared_ptr<TermStore> store_;
  std::vector<StepInfo> steps_;
  std::unordered_map<uint32_t, Def> defOf_;
  std::unordered_set<uint32_t> inputs_;
  std::unordered_map<uint32_t, Word> concrete_;
  std::unordered_map<uint32_t, Term> inl_;
  std::unordered_map<uint32_t, Term> inlMemo_;
  mutable std::unordered_map<uint32_t, std::vector<Term>> varsCache_;
  // byte address -> (defining step, word address)
  std::unordered_map<Addr, std::pair<size_t, Addr>> writer_;
  std::unordered_map<Addr, Addr> inputByte_;
};

// occurrence may equal the trace size (state after the last step).
SliceFormula backwardSlice(TraceSSA &ssa, size_t occurrence, Term goal, unsigned k,
                           BoundMetric metric = BoundMetric::Steps);
SliceFormula backwardSlice(TraceSSA &ssa, const ReachabilityCondition &cond, unsigned k,
                           BoundMetric metric = BoundMetric::Steps);
// Every definition and branch condition of steps [0, upto), goal at `upto`.
SliceFormula forwardPathPredicate(TraceSSA &ssa, size_t upto, Term goal);
SliceFormula negateGoal(const SliceFormula &f);

// Evaluates constraints under a valuation of every variable (defined ones
// included). Returns false on the first violated constraint.
bool constraintsHold(const SliceFormula &f, const std::function<Word(Term)> &value);
// Same but only the free variables are given; defined ones are computed.
bool satisfiedBy(const SliceFormula &f, const std::function<Word(Term)> &inputValue,
                 bool includeGoal = true);

} // namespace bbdse
