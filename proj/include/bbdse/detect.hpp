// Infeasibility analyses built on backward slices.
#pragma once

#include "bbdse/solver.hpp"

#include <iosfwd>
#include <set>

namespace bbdse {

struct OccurrenceVerdict {
  size_t occurrence = 0;
  VerdictKind kind = VerdictKind::UNKNOWN;
  double seconds = 0;
  std::string source;
};

enum class Opacity { COVERED, GENUINE, OPAQUE, LIKELY_DEAD, UNKNOWN };
const char *opacityName(Opacity o);

struct OpacityStatus {
  Addr addr = 0;
  Opacity status = Opacity::UNKNOWN;
  // For OPAQUE: true when the taken direction is the infeasible one.
  bool deadIsTaken = false;
  bool takenSeen = false, fallthroughSeen = false;
  std::vector<OccurrenceVerdict> perOccurrence;
};

struct DetectConfig {
  unsigned k = 16;
  BoundMetric metric = BoundMetric::Steps;
  // Stop querying occurrences of an address after the first SAT.
  bool stopAtFirstSat = true;
};

// Hint giving trace values for every variable the trace defines.
Hint traceHint(const TraceSSA &ssa);

OpacityStatus detectOpaque(TraceSSA &ssa, Solver &solver, Addr addr, const DetectConfig &cfg);
// Every conditional jump executed in the trace, by address.
std::map<Addr, OpacityStatus> detectAllOpaque(TraceSSA &ssa, Solver &solver,
                                              const DetectConfig &cfg);

enum class Integrity { GENUINE, VIOLATED, UNKNOWN };
enum class Alignment { ALIGNED, DISALIGNED, UNKNOWN };
enum class Multiplicity { SINGLE, MULTIPLE, UNKNOWN };
const char *integrityName(Integrity v);
const char *alignmentName(Alignment v);
const char *multiplicityName(Multiplicity v);

struct TamperingLabel {
  Integrity integrity = Integrity::UNKNOWN;
  Alignment alignment = Alignment::UNKNOWN;
  Multiplicity multiplicity = Multiplicity::UNKNOWN;
  bool operator==(const TamperingLabel &o) const {
    return integrity == o.integrity && alignment == o.alignment && multiplicity == o.multiplicity;
  }
};

struct FormalStackEntry {
  size_t callStep;
  Word spBeforeCall;
  Addr returnSite;
};

struct RetOccurrence {
  size_t retStep = 0;
  std::optional<size_t> callStep;
  Addr callAddr = 0;
  Addr pushedSite = 0;
  Addr target = 0;
  unsigned k = 0;
  TamperingLabel label;
  std::vector<OccurrenceVerdict> verdicts;
};

struct RetReport {
  Addr addr = 0;
  TamperingLabel label;
  std::set<Addr> targets;
  std::vector<RetOccurrence> occurrences;
};

// Call/ret pairing from the formal stack walk: a RET pairs with the topmost
// call whose return slot it reads, dropping the calls above; with no slot
// match it pairs with the top call, which stays on the stack.
struct CallPairing {
  size_t retStep;
  std::optional<FormalStackEntry> call;
  bool slotMatched = false;
};
std::vector<CallPairing> formalStackWalk(const Trace &trace);

struct StackConfig {
  unsigned kMax = 10000;
};

// Recomputes the address label from the occurrences and targets.
void aggregateRet(RetReport &rep);
std::map<Addr, RetReport> classifyRets(TraceSSA &ssa, Solver &solver, const StackConfig &cfg = {});

enum class ConstStatus { OPAQUE_CONST, VARIABLE, UNKNOWN };
const char *constStatusName(ConstStatus s);
struct ConstResult {
  ConstStatus status = ConstStatus::UNKNOWN;
  Word value = 0;
  Verdict verdict;
};
// Is `expr` (over the pre-state of step `occurrence`) always equal to the
// value it had on the trace?
ConstResult opaqueConstant(TraceSSA &ssa, Solver &solver, size_t occurrence, Term expr,
                           unsigned k);

enum class Closure { CLOSED, OPEN, UNKNOWN };
const char *closureName(Closure c);
struct ClosureResult {
  Closure status = Closure::UNKNOWN;
  std::set<Addr> observed;
  // A further target value allowed by the slice (OPEN only).
  std::optional<Word> witness;
  std::vector<OccurrenceVerdict> verdicts;
};
// Targets default to every target observed at addr.
ClosureResult jumpClosure(TraceSSA &ssa, Solver &solver, Addr addr, unsigned k,
                          std::optional<std::set<Addr>> targets = std::nullopt);

enum class SelfMod { UNCONDITIONAL, CONDITIONAL, UNKNOWN };
const char *selfModName(SelfMod s);
struct SelfModResult {
  SelfMod status = SelfMod::UNKNOWN;
  Word written = 0;
  std::optional<Word> witness;
  Verdict verdict;
};
SelfModResult selfmodConditional(TraceSSA &ssa, Solver &solver, size_t storeStep, unsigned k);

// Per-address results of every analysis that ran.
struct AnalysisReport {
  std::map<Addr, OpacityStatus> opaque;
  std::map<Addr, RetReport> rets;
  std::map<Addr, ClosureResult> jumps;
  std::map<Addr, ConstResult> consts;
  std::map<Addr, SelfModResult> selfmods;
};

// Line records: `OP addr status ...`, `RET addr integrity alignment
// multiplicity ...`, `JUMP`, `CONST`, `SELFMOD`; key=value fields follow.
void writeReport(const AnalysisReport &r, unsigned width, std::ostream &os);
AnalysisReport readReport(std::istream &is);

} // namespace bbdse
