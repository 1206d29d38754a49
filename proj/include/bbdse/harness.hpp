// Experiment drivers: multi-trace analysis, k sweeps over a labeled corpus
// and the forward / backward / bounded comparison.
#pragma once

#include "bbdse/detect.hpp"
#include "bbdse/obfuscate.hpp"

#include <iosfwd>

namespace bbdse {

struct ExperimentConfig {
  std::vector<unsigned> ks = {2, 4, 8, 12, 16, 24, 32};
  unsigned timeoutMs = 5000;
  unsigned width = 32;
  std::string corpus;
  std::string solver;
  unsigned jobs = 1;
  BoundMetric metric = BoundMetric::Steps;

  // Throws std::invalid_argument unless the k values are positive and sorted.
  void validate() const;
  SolverConfig solverConfig() const;
};

// Joins per-trace results for the same program.
OpacityStatus mergeOpacity(const std::vector<OpacityStatus> &perTrace);
RetReport mergeRets(const std::vector<RetReport> &perTrace);

struct AnalyzeOptions {
  DetectConfig detect;
  StackConfig stack;
  bool opaque = true;
  bool rets = true;
};
AnalysisReport analyzeTraces(const std::vector<const Trace *> &traces, Solver &solver,
                             const AnalyzeOptions &opt = {});

struct OpaqueScore {
  size_t positives = 0, detected = 0, fn = 0, fp = 0, genuine = 0;
  size_t timeouts = 0, queries = 0;
  double solverSeconds = 0;

  OpaqueScore &operator+=(const OpaqueScore &o);
};
// Joins detection results with the truth records; OPAQUE and LIKELY_DEAD
// count as detections.
OpaqueScore scoreOpaque(const std::map<Addr, OpacityStatus> &res, const std::vector<ObfuscationRecord> &truth);

struct KsweepRow {
  unsigned k = 0;
  OpaqueScore score;
  double avgQuery() const { return score.queries ? score.solverSeconds / score.queries : 0; }
};
// Opaque-predicate samples of the corpus, first `tracesPerSample` inputs each.
std::vector<KsweepRow> ksweep(const std::vector<CorpusSample> &corpus, const ExperimentConfig &cfg,
                              unsigned tracesPerSample = 1);
void writeKsweep(const std::vector<KsweepRow> &rows, std::ostream &os);

struct TamperScore {
  size_t tampered = 0, tamperedOk = 0, untouched = 0, untouchedOk = 0;
  size_t fn() const { return tampered - tamperedOk; }
  size_t fp() const { return untouched - untouchedOk; }
};
// Tampered rets must be VIOLATED+SINGLE and every other ret GENUINE+ALIGNED.
TamperScore scoreTampering(const std::map<Addr, RetReport> &rets, const std::vector<ObfuscationRecord> &truth);

enum class DseMethod { Forward, Backward, Bounded };
const char *dseMethodName(DseMethod m);

struct DseRow {
  DseMethod method = DseMethod::Bounded;
  unsigned k = 0; // Bounded only
  size_t sat = 0, unsat = 0, timeouts = 0, unknown = 0;
  double seconds = 0;
  size_t queries() const { return sat + unsat + timeouts + unknown; }
};

struct CompareConfig {
  unsigned k = 16;
  BoundMetric metric = BoundMetric::Steps;
  // Query at most this many conditional occurrences, evenly spread; 0 = all.
  size_t maxQueries = 0;
  bool forward = true;
  bool backward = true;
};
// Each method asks whether the direction not taken at a conditional
// occurrence is feasible; UNSAT marks it infeasible.
std::vector<DseRow> compareDse(TraceSSA &ssa, Solver &solver, const CompareConfig &cfg);
// Infeasibility query of one occurrence with one method.
Verdict dseQuery(TraceSSA &ssa, Solver &solver, size_t step, DseMethod m, unsigned k,
                 BoundMetric metric = BoundMetric::Steps);
void writeCompare(const std::vector<DseRow> &rows, std::ostream &os);

// Conditional-jump steps of the trace.
std::vector<size_t> conditionalSteps(const Trace &t);

} // namespace bbdse
