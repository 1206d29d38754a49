#include "bbdse/detect.hpp"

#include <cstdio>
#include <functional>
#include <istream>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace bbdse {

const char *opacityName(Opacity o) {
  switch (o) {
  case Opacity::COVERED: return "COVERED";
  case Opacity::GENUINE: return "GENUINE";
  case Opacity::OPAQUE: return "OPAQUE";
  case Opacity::LIKELY_DEAD: return "LIKELY_DEAD";
  case Opacity::UNKNOWN: return "UNKNOWN";
  }
  return "?";
}
const char *integrityName(Integrity v) {
  switch (v) {
  case Integrity::GENUINE: return "GENUINE";
  case Integrity::VIOLATED: return "VIOLATED";
  default: return "UNKNOWN";
  }
}
const char *alignmentName(Alignment v) {
  switch (v) {
  case Alignment::ALIGNED: return "ALIGNED";
  case Alignment::DISALIGNED: return "DISALIGNED";
  default: return "UNKNOWN";
  }
}
const char *multiplicityName(Multiplicity v) {
  switch (v) {
  case Multiplicity::SINGLE: return "SINGLE";
  case Multiplicity::MULTIPLE: return "MULTIPLE";
  default: return "UNKNOWN";
  }
}
const char *constStatusName(ConstStatus s) {
  switch (s) {
  case ConstStatus::OPAQUE_CONST: return "OPAQUE_CONST";
  case ConstStatus::VARIABLE: return "VARIABLE";
  default: return "UNKNOWN";
  }
}
const char *closureName(Closure c) {
  switch (c) {
  case Closure::CLOSED: return "CLOSED";
  case Closure::OPEN: return "OPEN";
  default: return "UNKNOWN";
  }
}
const char *selfModName(SelfMod s) {
  switch (s) {
  case SelfMod::UNCONDITIONAL: return "UNCONDITIONAL";
  case SelfMod::CONDITIONAL: return "CONDITIONAL";
  default: return "UNKNOWN";
  }
}

Hint traceHint(const TraceSSA &ssa) {
  return [&ssa](Term v) -> std::optional<Word> {
    if (ssa.hasConcreteValue(v)) return ssa.concreteValue(v);
    return std::nullopt;
  };
}

namespace {

OccurrenceVerdict record(size_t occ, const Verdict &v) {
  return {occ, v.kind, v.elapsed, v.source};
}

std::vector<size_t> occurrencesOf(const Trace &t, Addr addr) {
  std::vector<size_t> out;
  for (const auto &s : t.steps)
    if (s.addr == addr) out.push_back(s.index);
  return out;
}

Word evalConcrete(const TraceSSA &ssa, Term t) {
  return evaluate(t, [&](Term v) { return ssa.concreteValue(v); });
}

// Evaluates `t` under a solver model of `f`: defined variables of the slice
// are recomputed from the model, anything else keeps its trace value.
Word evalModel(const SliceFormula &f, const TraceSSA &ssa, Term t,
               const std::map<std::string, Word> &model) {
  std::unordered_map<uint32_t, Word> val;
  std::function<Word(Term)> look = [&](Term v) -> Word {
    auto it = val.find(v->id);
    if (it != val.end()) return it->second;
    auto m = model.find(v->name);
    if (m != model.end()) return m->second;
    return ssa.hasConcreteValue(v) ? ssa.concreteValue(v) : 0;
  };
  for (const auto &d : f.defs) val[d.var->id] = evaluate(d.rhs, look);
  return evaluate(t, look);
}

} // namespace

OpacityStatus detectOpaque(TraceSSA &ssa, Solver &solver, Addr addr, const DetectConfig &cfg) {
  const Trace &tr = ssa.trace();
  auto occ = occurrencesOf(tr, addr);
  if (occ.empty()) throw std::invalid_argument("address " + hexWord(addr, tr.width()) + " never executed");
  if (!tr.steps[occ.front()].ins.isCondJump())
    throw std::invalid_argument("address " + hexWord(addr, tr.width()) + " is not a conditional jump");

  OpacityStatus st;
  st.addr = addr;
  for (size_t o : occ) (*tr.steps[o].branchTaken ? st.takenSeen : st.fallthroughSeen) = true;
  if (st.takenSeen && st.fallthroughSeen) {
    st.status = Opacity::COVERED;
    return st;
  }

  bool wantTaken = !st.takenSeen;
  Hint hint = traceHint(ssa);
  bool undecided = false;
  for (size_t o : occ) {
    Term taken = ssa.takenCond(o);
    Term goal = wantTaken ? taken : ssa.store().lnot(taken);
    Verdict v = solver.check(backwardSlice(ssa, o, goal, cfg.k, cfg.metric), hint);
    st.perOccurrence.push_back(record(o, v));
    if (v.sat()) {
      st.status = Opacity::GENUINE;
      if (cfg.stopAtFirstSat) return st;
    } else if (!v.unsat()) {
      undecided = true;
    }
  }
  if (st.status == Opacity::GENUINE) return st;
  if (undecided) {
    st.status = Opacity::UNKNOWN;
    return st;
  }
  st.deadIsTaken = wantTaken;
  st.status = Opacity::OPAQUE;

  // The observed direction is normally satisfiable; if it is not either, the
  // whole branch sits in a region the slice cannot reach.
  bool observedUnsat = true;
  for (size_t o : occ) {
    Verdict v = solver.check(backwardSlice(ssa, o, ssa.observedCond(o), cfg.k, cfg.metric), hint);
    if (!v.unsat()) {
      observedUnsat = false;
      break;
    }
  }
  if (observedUnsat) st.status = Opacity::LIKELY_DEAD;
  return st;
}

std::map<Addr, OpacityStatus> detectAllOpaque(TraceSSA &ssa, Solver &solver,
                                              const DetectConfig &cfg) {
  std::map<Addr, OpacityStatus> out;
  for (const auto &s : ssa.trace().steps)
    if (s.ins.isCondJump() && !out.count(s.addr)) out.emplace(s.addr, detectOpaque(ssa, solver, s.addr, cfg));
  return out;
}

std::vector<CallPairing> formalStackWalk(const Trace &tr) {
  const Word mask = tr.program->mask();
  const Word nb = tr.program->wordBytes();
  std::vector<FormalStackEntry> stack;
  std::vector<CallPairing> out;
  for (const auto &s : tr.steps) {
    if (s.ins.isCall()) {
      stack.push_back({s.index, s.regsBefore[kSP], (s.addr + s.ins.length) & mask});
      continue;
    }
    if (s.ins.op != Opcode::RET) continue;
    CallPairing p{s.index, std::nullopt, false};
    if (!stack.empty()) {
      Addr slot = s.effectiveAddrs.empty() ? s.regsBefore[kSP] : s.effectiveAddrs.front();
      size_t idx = stack.size() - 1;
      for (size_t i = stack.size(); i-- > 0;) {
        if (((stack[i].spBeforeCall - nb) & mask) == slot) {
          idx = i;
          p.slotMatched = true;
          break;
        }
      }
      p.call = stack[idx];
      if (p.slotMatched) stack.resize(idx);
    }
    out.push_back(p);
  }
  return out;
}

void aggregateRet(RetReport &rep) {
  bool anyViol = false, allGen = true, anyDis = false, allAl = true, allSingle = true;
  for (const auto &o : rep.occurrences) {
    anyViol |= o.label.integrity == Integrity::VIOLATED;
    allGen &= o.label.integrity == Integrity::GENUINE;
    anyDis |= o.label.alignment == Alignment::DISALIGNED;
    allAl &= o.label.alignment == Alignment::ALIGNED;
    allSingle &= o.label.multiplicity == Multiplicity::SINGLE;
  }
  rep.label.integrity = anyViol ? Integrity::VIOLATED : allGen ? Integrity::GENUINE : Integrity::UNKNOWN;
  rep.label.alignment = anyDis ? Alignment::DISALIGNED : allAl ? Alignment::ALIGNED : Alignment::UNKNOWN;
  rep.label.multiplicity = rep.targets.size() > 1 ? Multiplicity::MULTIPLE
                           : allSingle            ? Multiplicity::SINGLE
                                                  : Multiplicity::UNKNOWN;
}

std::map<Addr, RetReport> classifyRets(TraceSSA &ssa, Solver &solver, const StackConfig &cfg) {
  const Trace &tr = ssa.trace();
  const ProgramImage &img = *tr.program;
  const Word mask = img.mask();
  const Word nb = img.wordBytes();
  Hint hint = traceHint(ssa);
  TermStore &S = ssa.store();
  std::map<Addr, RetReport> out;

  for (const CallPairing &p : formalStackWalk(tr)) {
    const TraceStep &s = tr.steps[p.retStep];
    RetReport &rep = out[s.addr];
    rep.addr = s.addr;
    RetOccurrence ro;
    ro.retStep = s.index;
    ro.target = *s.jumpTarget;
    rep.targets.insert(ro.target);

    if (!p.call) {
      rep.occurrences.push_back(ro);
      continue;
    }
    const FormalStackEntry &e = *p.call;
    ro.callStep = e.callStep;
    ro.callAddr = tr.steps[e.callStep].addr;
    ro.pushedSite = e.returnSite;
    size_t d = s.index - e.callStep;
    ro.k = unsigned(std::min<size_t>(d, cfg.kMax));

    Word spAfterRet = (s.regsBefore[kSP] + nb) & mask;
    bool rtViolated = ro.target != e.returnSite;
    bool rtDisaligned = spAfterRet != e.spBeforeCall;
    if (rtViolated) ro.label.integrity = Integrity::VIOLATED;
    if (rtDisaligned) ro.label.alignment = Alignment::DISALIGNED;

    if (d <= cfg.kMax) {
      auto ask = [&](Term goal, size_t occ) {
        Verdict v = solver.check(backwardSlice(ssa, occ, goal, ro.k), hint);
        ro.verdicts.push_back(record(s.index, v));
        return v.unsat();
      };
      Term read = ssa.memRead(s.index);
      if (!rtViolated && ask(S.ne(read, S.constant(e.returnSite, img.width)), s.index))
        ro.label.integrity = Integrity::GENUINE;
      if (!rtDisaligned) {
        // Window extends one step past the ret so its sp update is included.
        Verdict v = solver.check(
            backwardSlice(ssa, s.index + 1,
                          S.ne(ssa.reg(e.callStep, kSP), ssa.spAfter(s.index)), ro.k + 1),
            hint);
        ro.verdicts.push_back(record(s.index, v));
        if (v.unsat()) ro.label.alignment = Alignment::ALIGNED;
      }
      if (ask(S.ne(read, S.constant(ro.target, img.width)), s.index))
        ro.label.multiplicity = Multiplicity::SINGLE;
    }
    rep.occurrences.push_back(ro);
  }

  for (auto &[addr, rep] : out)
    aggregateRet(rep);
  return out;
}

ConstResult opaqueConstant(TraceSSA &ssa, Solver &solver, size_t occurrence, Term expr,
                           unsigned k) {
  ConstResult r;
  r.value = evalConcrete(ssa, expr);
  Term goal = ssa.store().ne(expr, ssa.store().constant(r.value, expr->width));
  r.verdict = solver.check(backwardSlice(ssa, occurrence, goal, k), traceHint(ssa));
  r.status = r.verdict.unsat() ? ConstStatus::OPAQUE_CONST
             : r.verdict.sat() ? ConstStatus::VARIABLE
                               : ConstStatus::UNKNOWN;
  return r;
}

ClosureResult jumpClosure(TraceSSA &ssa, Solver &solver, Addr addr, unsigned k,
                          std::optional<std::set<Addr>> targets) {
  const Trace &tr = ssa.trace();
  auto occ = occurrencesOf(tr, addr);
  if (occ.empty()) throw std::invalid_argument("address " + hexWord(addr, tr.width()) + " never executed");
  if (!tr.steps[occ.front()].ins.isIndirect())
    throw std::invalid_argument("address " + hexWord(addr, tr.width()) + " is not an indirect jump");

  ClosureResult r;
  for (size_t o : occ) r.observed.insert(*tr.steps[o].jumpTarget);
  const std::set<Addr> &vs = targets ? *targets : r.observed;
  TermStore &S = ssa.store();
  bool undecided = false;
  for (size_t o : occ) {
    Term t = ssa.targetTerm(o);
    Term goal = S.boolean(true);
    for (Addr v : vs) goal = S.land(goal, S.ne(t, S.constant(v, t->width)));
    SliceFormula f = backwardSlice(ssa, o, goal, k);
    Verdict v = solver.check(f, traceHint(ssa));
    r.verdicts.push_back(record(o, v));
    if (v.sat()) {
      r.status = Closure::OPEN;
      r.witness = evalModel(f, ssa, t, v.model);
      return r;
    }
    if (!v.unsat()) undecided = true;
  }
  r.status = undecided ? Closure::UNKNOWN : Closure::CLOSED;
  return r;
}

SelfModResult selfmodConditional(TraceSSA &ssa, Solver &solver, size_t storeStep, unsigned k) {
  const Trace &tr = ssa.trace();
  if (storeStep >= tr.size() || !tr.steps[storeStep].writtenValue)
    throw std::invalid_argument("step is not a code-region store");
  const TraceStep &s = tr.steps[storeStep];
  SelfModResult r;
  r.written = *s.writtenValue;
  Term val = ssa.reg(storeStep, s.ins.r[1]);
  Term goal = ssa.store().ne(val, ssa.store().constant(r.written, val->width));
  SliceFormula f = backwardSlice(ssa, storeStep, goal, k);
  r.verdict = solver.check(f, traceHint(ssa));
  if (r.verdict.unsat()) {
    r.status = SelfMod::UNCONDITIONAL;
  } else if (r.verdict.sat()) {
    r.status = SelfMod::CONDITIONAL;
    r.witness = evalModel(f, ssa, val, r.verdict.model);
  }
  return r;
}

namespace {

void writeOcc(std::ostream &os, const std::vector<OccurrenceVerdict> &v) {
  os << " occ=";
  if (v.empty()) {
    os << '-';
    return;
  }
  for (size_t i = 0; i < v.size(); ++i) {
    char secs[32];
    std::snprintf(secs, sizeof secs, "%.4f", v[i].seconds);
    os << (i ? "," : "") << v[i].occurrence << ':' << verdictName(v[i].kind) << ':' << secs << ':'
       << (v[i].source.empty() ? "-" : v[i].source);
  }
}

template <class Set> void writeAddrs(std::ostream &os, const char *key, const Set &s, unsigned w) {
  os << ' ' << key << '=';
  if (s.empty()) os << '-';
  size_t i = 0;
  for (Addr a : s) os << (i++ ? "," : "") << hexWord(a, w);
}

std::vector<std::string> split(const std::string &s, char c) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream is(s);
  while (std::getline(is, cur, c)) out.push_back(cur);
  return out;
}

VerdictKind verdictByName(const std::string &s) {
  for (auto k : {VerdictKind::SAT, VerdictKind::UNSAT, VerdictKind::TIMEOUT, VerdictKind::UNKNOWN})
    if (s == verdictName(k)) return k;
  throw std::runtime_error("bad verdict: " + s);
}

std::vector<OccurrenceVerdict> parseOcc(const std::string &s) {
  std::vector<OccurrenceVerdict> out;
  if (s == "-") return out;
  for (const auto &item : split(s, ',')) {
    auto f = split(item, ':');
    if (f.size() != 4) throw std::runtime_error("bad occurrence record: " + item);
    out.push_back({std::stoul(f[0]), verdictByName(f[1]), std::stod(f[2]), f[3] == "-" ? "" : f[3]});
  }
  return out;
}

std::set<Addr> parseAddrs(const std::string &s) {
  std::set<Addr> out;
  if (s == "-") return out;
  for (const auto &a : split(s, ',')) out.insert(std::stoull(a, nullptr, 16));
  return out;
}

template <class E> E byName(const std::string &s, std::initializer_list<E> all, const char *(*name)(E)) {
  for (E e : all)
    if (s == name(e)) return e;
  throw std::runtime_error("bad label: " + s);
}

} // namespace

void writeReport(const AnalysisReport &r, unsigned w, std::ostream &os) {
  for (const auto &[a, o] : r.opaque) {
    os << "OP " << hexWord(a, w) << ' ' << opacityName(o.status);
    if (o.status == Opacity::OPAQUE || o.status == Opacity::LIKELY_DEAD)
      os << " dead=" << (o.deadIsTaken ? "taken" : "fallthrough");
    writeOcc(os, o.perOccurrence);
    os << '\n';
  }
  for (const auto &[a, rr] : r.rets) {
    os << "RET " << hexWord(a, w) << ' ' << integrityName(rr.label.integrity) << ' '
       << alignmentName(rr.label.alignment) << ' ' << multiplicityName(rr.label.multiplicity);
    writeAddrs(os, "targets", rr.targets, w);
    std::vector<OccurrenceVerdict> all;
    for (const auto &o : rr.occurrences) all.insert(all.end(), o.verdicts.begin(), o.verdicts.end());
    writeOcc(os, all);
    os << '\n';
  }
  for (const auto &[a, j] : r.jumps) {
    os << "JUMP " << hexWord(a, w) << ' ' << closureName(j.status);
    writeAddrs(os, "targets", j.observed, w);
    if (j.witness) os << " witness=" << hexWord(*j.witness, w);
    writeOcc(os, j.verdicts);
    os << '\n';
  }
  for (const auto &[a, c] : r.consts) {
    os << "CONST " << hexWord(a, w) << ' ' << constStatusName(c.status) << " value=" << hexWord(c.value, w);
    writeOcc(os, {record(0, c.verdict)});
    os << '\n';
  }
  for (const auto &[a, m] : r.selfmods) {
    os << "SELFMOD " << hexWord(a, w) << ' ' << selfModName(m.status) << " written=" << hexWord(m.written, w);
    if (m.witness) os << " witness=" << hexWord(*m.witness, w);
    writeOcc(os, {record(0, m.verdict)});
    os << '\n';
  }
}

AnalysisReport readReport(std::istream &is) {
  AnalysisReport r;
  std::string line;
  size_t lineNo = 0;
  while (std::getline(is, line)) {
    ++lineNo;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::string kind, addrS;
    ls >> kind >> addrS;
    Addr a = std::stoull(addrS, nullptr, 16);
    std::vector<std::string> pos;
    std::map<std::string, std::string> kv;
    for (std::string tok; ls >> tok;) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) pos.push_back(tok);
      else kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    auto need = [&](size_t n) {
      if (pos.size() < n) throw std::runtime_error("report line " + std::to_string(lineNo) + ": missing fields");
    };
    auto occ = kv.count("occ") ? parseOcc(kv["occ"]) : std::vector<OccurrenceVerdict>{};
    if (kind == "OP") {
      need(1);
      OpacityStatus o;
      o.addr = a;
      o.status = byName(pos[0], {Opacity::COVERED, Opacity::GENUINE, Opacity::OPAQUE, Opacity::LIKELY_DEAD, Opacity::UNKNOWN}, opacityName);
      o.deadIsTaken = kv["dead"] == "taken";
      o.perOccurrence = occ;
      r.opaque[a] = o;
    } else if (kind == "RET") {
      need(3);
      RetReport rr;
      rr.addr = a;
      rr.label.integrity = byName(pos[0], {Integrity::GENUINE, Integrity::VIOLATED, Integrity::UNKNOWN}, integrityName);
      rr.label.alignment = byName(pos[1], {Alignment::ALIGNED, Alignment::DISALIGNED, Alignment::UNKNOWN}, alignmentName);
      rr.label.multiplicity = byName(pos[2], {Multiplicity::SINGLE, Multiplicity::MULTIPLE, Multiplicity::UNKNOWN}, multiplicityName);
      rr.targets = parseAddrs(kv["targets"]);
      r.rets[a] = rr;
    } else if (kind == "JUMP") {
      need(1);
      ClosureResult j;
      j.status = byName(pos[0], {Closure::CLOSED, Closure::OPEN, Closure::UNKNOWN}, closureName);
      j.observed = parseAddrs(kv["targets"]);
      if (kv.count("witness")) j.witness = std::stoull(kv["witness"], nullptr, 16);
      j.verdicts = occ;
      r.jumps[a] = j;
    } else if (kind == "CONST") {
      need(1);
      ConstResult c;
      c.status = byName(pos[0], {ConstStatus::OPAQUE_CONST, ConstStatus::VARIABLE, ConstStatus::UNKNOWN}, constStatusName);
      c.value = std::stoull(kv["value"], nullptr, 16);
      if (!occ.empty()) c.verdict.kind = occ[0].kind;
      r.consts[a] = c;
    } else if (kind == "SELFMOD") {
      need(1);
      SelfModResult m;
      m.status = byName(pos[0], {SelfMod::UNCONDITIONAL, SelfMod::CONDITIONAL, SelfMod::UNKNOWN}, selfModName);
      m.written = std::stoull(kv["written"], nullptr, 16);
      if (kv.count("witness")) m.witness = std::stoull(kv["witness"], nullptr, 16);
      if (!occ.empty()) m.verdict.kind = occ[0].kind;
      r.selfmods[a] = m;
    } else {
      throw std::runtime_error("report line " + std::to_string(lineNo) + ": unknown record " + kind);
    }
  }
  return r;
}

} // namespace bbdse
