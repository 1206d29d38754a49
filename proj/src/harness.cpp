#include "bbdse/harness.hpp"

#include <algorithm>
#include <atomic>
#include <iomanip>
#include <ostream>
#include <thread>

namespace bbdse {

void ExperimentConfig::validate() const {
  if (ks.empty()) throw std::invalid_argument("no k values");
  for (size_t i = 0; i < ks.size(); ++i) {
    if (ks[i] == 0) throw std::invalid_argument("k values must be positive");
    if (i && ks[i] <= ks[i - 1]) throw std::invalid_argument("k values must be sorted");
  }
  if (width != 8 && width != 16 && width != 32) throw std::invalid_argument("width must be 8, 16 or 32");
  if (jobs == 0) throw std::invalid_argument("jobs must be positive");
}

SolverConfig ExperimentConfig::solverConfig() const {
  SolverConfig c;
  c.path = solver.empty() ? defaultSolverPath() : solver;
  c.timeoutMs = timeoutMs;
  c.pruneUnrelated = true;
  return c;
}

OpacityStatus mergeOpacity(const std::vector<OpacityStatus> &per) {
  if (per.empty()) throw std::invalid_argument("nothing to merge");
  OpacityStatus m;
  m.addr = per.front().addr;
  bool genuine = false, unknown = false, likely = false;
  std::optional<bool> deadTaken;
  for (const auto &p : per) {
    m.takenSeen |= p.takenSeen;
    m.fallthroughSeen |= p.fallthroughSeen;
    m.perOccurrence.insert(m.perOccurrence.end(), p.perOccurrence.begin(), p.perOccurrence.end());
    genuine |= p.status == Opacity::GENUINE;
    unknown |= p.status == Opacity::UNKNOWN;
    likely |= p.status == Opacity::LIKELY_DEAD;
    if (p.status == Opacity::OPAQUE || p.status == Opacity::LIKELY_DEAD) {
      if (deadTaken && *deadTaken != p.deadIsTaken) genuine = true;
      deadTaken = p.deadIsTaken;
    }
  }
  if (m.takenSeen && m.fallthroughSeen) m.status = Opacity::COVERED;
  else if (genuine) m.status = Opacity::GENUINE;
  else if (unknown) m.status = Opacity::UNKNOWN;
  else m.status = likely ? Opacity::LIKELY_DEAD : Opacity::OPAQUE;
  if (m.status == Opacity::OPAQUE || m.status == Opacity::LIKELY_DEAD) m.deadIsTaken = *deadTaken;
  return m;
}

RetReport mergeRets(const std::vector<RetReport> &per) {
  if (per.empty()) throw std::invalid_argument("nothing to merge");
  RetReport m;
  m.addr = per.front().addr;
  for (const auto &p : per) {
    m.targets.insert(p.targets.begin(), p.targets.end());
    m.occurrences.insert(m.occurrences.end(), p.occurrences.begin(), p.occurrences.end());
  }
  aggregateRet(m);
  return m;
}

AnalysisReport analyzeTraces(const std::vector<const Trace *> &traces, Solver &solver, const AnalyzeOptions &opt) {
  std::map<Addr, std::vector<OpacityStatus>> ops;
  std::map<Addr, std::vector<RetReport>> rets;
  for (const Trace *t : traces) {
    TraceSSA ssa(*t);
    if (opt.opaque)
      for (auto &[a, st] : detectAllOpaque(ssa, solver, opt.detect)) ops[a].push_back(std::move(st));
    if (opt.rets)
      for (auto &[a, rr] : classifyRets(ssa, solver, opt.stack)) rets[a].push_back(std::move(rr));
  }
  AnalysisReport r;
  for (const auto &[a, v] : ops) r.opaque[a] = mergeOpacity(v);
  for (const auto &[a, v] : rets) r.rets[a] = mergeRets(v);
  return r;
}

OpaqueScore &OpaqueScore::operator+=(const OpaqueScore &o) {
  positives += o.positives;
  detected += o.detected;
  fn += o.fn;
  fp += o.fp;
  genuine += o.genuine;
  timeouts += o.timeouts;
  queries += o.queries;
  solverSeconds += o.solverSeconds;
  return *this;
}

OpaqueScore scoreOpaque(const std::map<Addr, OpacityStatus> &res, const std::vector<ObfuscationRecord> &truth) {
  std::set<Addr> sites;
  for (const auto &r : truth)
    if (r.kind == RecordKind::OP) sites.insert(r.site);
  OpaqueScore s;
  s.positives = sites.size();
  for (const auto &[a, st] : res) {
    bool op = st.status == Opacity::OPAQUE || st.status == Opacity::LIKELY_DEAD;
    if (sites.count(a)) s.detected += op;
    else {
      ++s.genuine;
      s.fp += op;
    }
    for (const auto &v : st.perOccurrence) {
      ++s.queries;
      s.timeouts += v.kind == VerdictKind::TIMEOUT;
      s.solverSeconds += v.seconds;
    }
  }
  s.fn = s.positives - s.detected;
  return s;
}

namespace {

// Runs body(i) for i in [0, n) on `jobs` threads.
template <class F>
void parallelFor(size_t n, unsigned jobs, F body) {
  if (jobs <= 1 || n <= 1) {
    for (size_t i = 0; i < n; ++i) body(i, 0u);
    return;
  }
  std::atomic<size_t> next{0};
  std::vector<std::thread> pool;
  for (unsigned j = 0; j < jobs; ++j)
    pool.emplace_back([&, j] {
      for (size_t i; (i = next++) < n;) body(i, j);
    });
  for (auto &t : pool) t.join();
}

} // namespace

std::vector<KsweepRow> ksweep(const std::vector<CorpusSample> &corpus, const ExperimentConfig &cfg,
                              unsigned tracesPerSample) {
  cfg.validate();
  std::vector<const CorpusSample *> samples;
  for (const auto &c : corpus)
    if (c.kind == RecordKind::OP) samples.push_back(&c);
  std::vector<std::unique_ptr<Solver>> solvers;
  for (unsigned j = 0; j < cfg.jobs; ++j) solvers.push_back(std::make_unique<Solver>(cfg.solverConfig()));

  std::vector<std::vector<OpaqueScore>> per(samples.size(), std::vector<OpaqueScore>(cfg.ks.size()));
  parallelFor(samples.size(), cfg.jobs, [&](size_t i, unsigned j) {
    const CorpusSample &c = *samples[i];
    auto img = std::make_shared<ProgramImage>(c.obf.image);
    std::vector<Trace> traces;
    for (size_t n = 0; n < c.inputs.size() && n < tracesPerSample; ++n) traces.push_back(run(img, c.inputs[n]));
    std::vector<const Trace *> ptrs;
    for (const auto &t : traces) ptrs.push_back(&t);
    for (size_t ki = 0; ki < cfg.ks.size(); ++ki) {
      AnalyzeOptions opt;
      opt.detect.k = cfg.ks[ki];
      opt.detect.metric = cfg.metric;
      opt.rets = false;
      per[i][ki] = scoreOpaque(analyzeTraces(ptrs, *solvers[j], opt).opaque, c.obf.records);
    }
  });
  std::vector<KsweepRow> rows;
  for (size_t ki = 0; ki < cfg.ks.size(); ++ki) {
    KsweepRow r;
    r.k = cfg.ks[ki];
    for (const auto &p : per) r.score += p[ki];
    rows.push_back(r);
  }
  return rows;
}

void writeKsweep(const std::vector<KsweepRow> &rows, std::ostream &os) {
  os << "# k positives detected fn fp genuine timeouts queries solver_s avg_query_s\n";
  for (const auto &r : rows) {
    const auto &s = r.score;
    os << "KSWEEP k=" << r.k << " positives=" << s.positives << " detected=" << s.detected << " fn=" << s.fn
       << " fp=" << s.fp << " genuine=" << s.genuine << " timeouts=" << s.timeouts << " queries=" << s.queries
       << std::fixed << std::setprecision(6) << " solver_s=" << s.solverSeconds << " avg_query_s=" << r.avgQuery()
       << std::defaultfloat << '\n';
  }
}

TamperScore scoreTampering(const std::map<Addr, RetReport> &rets, const std::vector<ObfuscationRecord> &truth) {
  std::set<Addr> sites;
  for (const auto &r : truth)
    if (r.kind == RecordKind::TAMPER) sites.insert(r.site);
  TamperScore s;
  for (const auto &[a, rr] : rets) {
    if (sites.count(a)) {
      ++s.tampered;
      s.tamperedOk += rr.label.integrity == Integrity::VIOLATED && rr.label.multiplicity == Multiplicity::SINGLE;
    } else {
      ++s.untouched;
      s.untouchedOk += rr.label.integrity == Integrity::GENUINE && rr.label.alignment == Alignment::ALIGNED;
    }
  }
  // Sites that never executed count as misses.
  for (Addr a : sites) s.tampered += !rets.count(a);
  return s;
}

const char *dseMethodName(DseMethod m) {
  switch (m) {
  case DseMethod::Forward: return "forward";
  case DseMethod::Backward: return "backward";
  case DseMethod::Bounded: return "bbdse";
  }
  return "?";
}

std::vector<size_t> conditionalSteps(const Trace &t) {
  std::vector<size_t> out;
  for (const auto &s : t.steps)
    if (s.ins.isCondJump()) out.push_back(s.index);
  return out;
}

Verdict dseQuery(TraceSSA &ssa, Solver &solver, size_t step, DseMethod m, unsigned k, BoundMetric metric) {
  Term goal = ssa.store().lnot(ssa.observedCond(step));
  switch (m) {
  case DseMethod::Forward: return solver.check(forwardPathPredicate(ssa, step, goal));
  case DseMethod::Backward:
    return solver.check(backwardSlice(ssa, step, goal, static_cast<unsigned>(ssa.size()) + 1, metric),
                        traceHint(ssa));
  case DseMethod::Bounded: return solver.check(backwardSlice(ssa, step, goal, k, metric), traceHint(ssa));
  }
  return {};
}

std::vector<DseRow> compareDse(TraceSSA &ssa, Solver &solver, const CompareConfig &cfg) {
  std::vector<size_t> steps = conditionalSteps(ssa.trace());
  if (cfg.maxQueries && steps.size() > cfg.maxQueries) {
    std::vector<size_t> picked;
    for (size_t i = 0; i < cfg.maxQueries; ++i) picked.push_back(steps[i * steps.size() / cfg.maxQueries]);
    steps = std::move(picked);
  }
  std::vector<DseRow> rows;
  if (steps.empty()) return rows;
  std::vector<DseMethod> methods;
  if (cfg.forward) methods.push_back(DseMethod::Forward);
  if (cfg.backward) methods.push_back(DseMethod::Backward);
  methods.push_back(DseMethod::Bounded);
  for (DseMethod m : methods) {
    DseRow r;
    r.method = m;
    r.k = m == DseMethod::Bounded ? cfg.k : 0;
    for (size_t s : steps) {
      Verdict v = dseQuery(ssa, solver, s, m, cfg.k, cfg.metric);
      r.seconds += v.elapsed;
      switch (v.kind) {
      case VerdictKind::SAT: ++r.sat; break;
      case VerdictKind::UNSAT: ++r.unsat; break;
      case VerdictKind::TIMEOUT: ++r.timeouts; break;
      case VerdictKind::UNKNOWN: ++r.unknown; break;
      }
    }
    rows.push_back(r);
  }
  return rows;
}

void writeCompare(const std::vector<DseRow> &rows, std::ostream &os) {
  os << "# method k sat unsat timeout unknown seconds\n";
  for (const auto &r : rows)
    os << "DSE method=" << dseMethodName(r.method) << " k=" << r.k << " sat=" << r.sat << " unsat=" << r.unsat
       << " timeout=" << r.timeouts << " unknown=" << r.unknown << std::fixed << std::setprecision(6)
       << " seconds=" << r.seconds << std::defaultfloat << '\n';
}

} // namespace bbdse
