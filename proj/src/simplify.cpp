#include "bbdse/simplify.hpp"

#include "bbdse/obfuscate.hpp"

#include <algorithm>
#include <mutex>
#include <sstream>

namespace bbdse {

const char *liveTagName(LiveTag t) {
  switch (t) {
  case LiveTag::ALIVE: return "ALIVE";
  case LiveTag::DEAD: return "DEAD";
  case LiveTag::SPURIOUS: return "SPURIOUS";
  }
  return "?";
}

size_t Liveness::count(LiveTag t) const {
  return std::count_if(tags.begin(), tags.end(), [t](const auto &kv) { return kv.second == t; });
}

namespace {

// ---------------------------------------------------------------------------
// Dynamic def-use chains over registers and memory bytes.

using Loc = uint64_t;
constexpr Loc kMem = Loc(1) << 40;

struct StepFlow {
  // (location, producing step or -1)
  std::vector<std::pair<Loc, int64_t>> uses;
  std::vector<size_t> consumers;
  // Defines an output register that is still live when the trace ends.
  bool liveOut = false;
};

void usesDefs(const TraceStep &s, unsigned nb, std::vector<Loc> &uses, std::vector<Loc> &defs) {
  const Instruction &i = s.ins;
  auto mem = [&](std::vector<Loc> &v) {
    for (unsigned b = 0; b < nb; ++b) v.push_back(kMem + s.effectiveAddrs.at(0) + b);
  };
  switch (i.op) {
  case Opcode::HALT: case Opcode::JMP: break;
  case Opcode::MOVI: defs.push_back(i.r[0]); break;
  case Opcode::MOV: uses.push_back(i.r[1]); defs.push_back(i.r[0]); break;
  case Opcode::ADD: case Opcode::SUB: case Opcode::MUL: case Opcode::UDIV: case Opcode::AND:
  case Opcode::OR: case Opcode::XOR: case Opcode::SHL: case Opcode::SHR:
    uses.push_back(i.r[0]);
    uses.push_back(i.r[1]);
    defs.push_back(i.r[0]);
    break;
  case Opcode::ADDI: case Opcode::SUBI: case Opcode::MULI: case Opcode::ANDI: case Opcode::ORI:
  case Opcode::XORI: case Opcode::SHLI: case Opcode::SHRI:
    uses.push_back(i.r[0]);
    defs.push_back(i.r[0]);
    break;
  case Opcode::EQ: case Opcode::NE: case Opcode::ULT: case Opcode::UGE: case Opcode::SLT: case Opcode::SGE:
    uses.push_back(i.r[1]);
    uses.push_back(i.r[2]);
    defs.push_back(i.r[0]);
    break;
  case Opcode::LOAD: uses.push_back(i.r[1]); mem(uses); defs.push_back(i.r[0]); break;
  case Opcode::STORE: uses.push_back(i.r[0]); uses.push_back(i.r[1]); mem(defs); break;
  case Opcode::PUSH: case Opcode::CALLR:
    uses.push_back(i.r[0]);
    [[fallthrough]];
  case Opcode::PUSHI: case Opcode::CALL:
    uses.push_back(kSP);
    defs.push_back(kSP);
    mem(defs);
    break;
  case Opcode::POP: case Opcode::RET:
    uses.push_back(kSP);
    mem(uses);
    defs.push_back(kSP);
    if (i.op == Opcode::POP) defs.push_back(i.r[0]);
    break;
  case Opcode::JMPR: case Opcode::JZ: case Opcode::JNZ: uses.push_back(i.r[0]); break;
  }
}

std::vector<StepFlow> buildFlow(const Trace &t, const std::vector<unsigned> &outputs) {
  const unsigned nb = t.width() / 8;
  std::vector<StepFlow> flow(t.steps.size());
  std::unordered_map<Loc, int64_t> last;
  std::vector<Loc> uses, defs;
  for (size_t i = 0; i < t.steps.size(); ++i) {
    uses.clear();
    defs.clear();
    usesDefs(t.steps[i], nb, uses, defs);
    for (Loc l : uses) {
      auto it = last.find(l);
      int64_t p = it == last.end() ? -1 : it->second;
      flow[i].uses.emplace_back(l, p);
      if (p >= 0 && (flow[p].consumers.empty() || flow[p].consumers.back() != i)) flow[p].consumers.push_back(i);
    }
    for (Loc l : defs) last[l] = static_cast<int64_t>(i);
  }
  for (unsigned r : outputs) {
    auto it = last.find(r);
    if (it != last.end()) flow[it->second].liveOut = true;
  }
  return flow;
}

// Steps inside [s - k, s) that the uses of step s depend on.
void coneSteps(const std::vector<StepFlow> &flow, size_t s, unsigned k, std::set<size_t> &out) {
  size_t lo = s > k ? s - k : 0;
  std::vector<size_t> work;
  for (const auto &[loc, p] : flow[s].uses)
    if (p >= 0 && static_cast<size_t>(p) >= lo) work.push_back(p);
  while (!work.empty()) {
    size_t q = work.back();
    work.pop_back();
    if (!out.insert(q).second) continue;
    for (const auto &[loc, p] : flow[q].uses)
      if (p >= 0 && static_cast<size_t>(p) >= lo) work.push_back(p);
  }
}

struct FlowTrace {
  const Trace *trace;
  std::vector<StepFlow> flow;
};

// Largest subset of `cand` whose every executed result is consumed only by
// members of cand or by the sinks.
std::set<Addr> spuriousFixpoint(const std::vector<FlowTrace> &traces, std::set<Addr> cand,
                                const std::set<Addr> &sinks) {
  for (Addr a : sinks) cand.erase(a);
  for (bool changed = true; changed;) {
    changed = false;
    for (const auto &ft : traces) {
      const auto &steps = ft.trace->steps;
      for (size_t i = 0; i < steps.size(); ++i) {
        Addr a = steps[i].addr;
        if (!cand.count(a)) continue;
        bool alive = ft.flow[i].liveOut || steps[i].layer > 0;
        for (size_t c : ft.flow[i].consumers) {
          if (alive) break;
          Addr ca = steps[c].addr;
          alive = !cand.count(ca) && !sinks.count(ca);
        }
        if (alive) {
          cand.erase(a);
          changed = true;
        }
      }
    }
  }
  return cand;
}

// ---------------------------------------------------------------------------
// Canonical predicate rendering.

bool symmetric(Op op) {
  return op == Op::Add || op == Op::Mul || op == Op::And || op == Op::Or || op == Op::Xor || op == Op::Eq ||
         op == Op::Ne || op == Op::LAnd || op == Op::LOr;
}

std::string canonicalOf(Term t, std::unordered_map<uint32_t, std::string> &memo) {
  auto it = memo.find(t->id);
  if (it != memo.end()) return it->second;
  std::string s;
  if (t->isConst()) {
    s = std::to_string(t->value) + ":" + std::to_string(t->width);
  } else if (t->isVar()) {
    s = t->name;
  } else {
    std::vector<std::string> kids;
    for (unsigned i = 0; i < t->arity(); ++i) kids.push_back(canonicalOf(t->kid[i], memo));
    if (symmetric(t->op)) std::sort(kids.begin(), kids.end());
    s = std::string("(") + opName(t->op);
    if (t->op == Op::Extract) s += "_" + std::to_string(t->value + t->width - 1) + "_" + std::to_string(t->value);
    if (t->op == Op::ZExt) s += "_" + std::to_string(t->width);
    for (auto &k : kids) s += " " + k;
    s += ")";
  }
  memo.emplace(t->id, s);
  return s;
}

// Sort key for cut inputs: memory words by address first, then registers.
std::pair<int, Addr> varKey(Term v) {
  const std::string &n = v->name;
  if (!n.empty() && n[0] == 'm') return {0, std::stoull(n.substr(1, n.find('_') - 1), nullptr, 16)};
  if (n.rfind("sp", 0) == 0) return {1, kSP};
  if (!n.empty() && n[0] == 'r') return {1, std::stoull(n.substr(1, n.find('_') - 1))};
  return {2, 0};
}

struct Rendered {
  std::shared_ptr<TermStore> store;
  Term term;
  std::string canonical;
};

// Inlines definitions from steps >= lo into the condition, renames the cut
// inputs and rebuilds the result in a fresh store.
Rendered render(TraceSSA &ssa, Term cond, size_t lo) {
  std::unordered_map<uint32_t, Term> memo;
  std::vector<Term> cuts;
  std::function<Term(Term)> leaf;
  std::function<Term(Term)> inl = [&](Term t) {
    return ssa.store().rebuild(t, memo, leaf);
  };
  leaf = [&](Term v) -> Term {
    const Def *d = ssa.defOf(v);
    if (d && d->step >= lo) return inl(d->rhs);
    if (std::find(cuts.begin(), cuts.end(), v) == cuts.end()) cuts.push_back(v);
    return v;
  };
  Term t = inl(cond);
  std::sort(cuts.begin(), cuts.end(), [](Term a, Term b) { return varKey(a) < varKey(b); });
  static const char *names[] = {"x", "y", "z", "u", "v", "w"};
  Rendered r;
  r.store = std::make_shared<TermStore>();
  std::unordered_map<uint32_t, Term> memo2;
  r.term = r.store->rebuild(t, memo2, [&](Term v) -> Term {
    if (v->isConst()) return r.store->constant(v->value, v->width);
    size_t i = std::find(cuts.begin(), cuts.end(), v) - cuts.begin();
    std::string n = i < 6 ? names[i] : "v" + std::to_string(i);
    return r.store->var(n, v->width);
  });
  std::unordered_map<uint32_t, std::string> cm;
  r.canonical = canonicalOf(r.term, cm);
  return r;
}

size_t firstOccurrence(const Trace &t, Addr a) {
  for (const auto &s : t.steps)
    if (s.addr == a && s.layer == 0) return s.index;
  throw std::invalid_argument("site never executed");
}

} // namespace

const std::string &familyCanonical(unsigned family, unsigned width) {
  static std::mutex mu;
  static std::map<std::pair<unsigned, unsigned>, std::string> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_pair(family, width);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto img = std::make_shared<ProgramImage>(assemble(
      "_start: " + familyCode(family, "dead") + "HALT\ndead: HALT\n.code_end\ngx: .word 0\ngy: .word 0\n.global gx\n.global gy\n",
      {width, 0}));
  Inputs in;
  in.globals = {{"gx", 3}, {"gy", 5}};
  Trace t = run(img, in);
  TraceSSA ssa(t);
  size_t jump = t.steps.size() - 2;
  Rendered r = render(ssa, ssa.takenCond(jump), 0);
  return cache.emplace(key, r.canonical).first->second;
}

SynthesizedPredicate synthesize(TraceSSA &ssa, const OpacityStatus &st, const SimplifyConfig &cfg) {
  if (st.status != Opacity::OPAQUE && st.status != Opacity::LIKELY_DEAD)
    throw std::invalid_argument("site " + hexWord(st.addr, ssa.width()) + " is not opaque");
  const Trace &t = ssa.trace();
  size_t s = firstOccurrence(t, st.addr);
  if (!t.steps[s].ins.isCondJump()) throw std::invalid_argument("site is not a conditional jump");
  SynthesizedPredicate out;
  out.site = st.addr;
  size_t lo = s > cfg.k ? s - cfg.k : 0;
  Rendered r = render(ssa, ssa.takenCond(s), lo);
  out.store = r.store;
  out.term = r.term;
  out.canonical = r.canonical;
  for (unsigned f = 1; f <= kNumFamilies; ++f)
    if (familyCanonical(f, ssa.width()) == out.canonical) {
      out.family = f;
      break;
    }

  std::vector<FlowTrace> ft{{&t, buildFlow(t, cfg.outputs)}};
  std::set<size_t> steps;
  for (const auto &step : t.steps)
    if (step.addr == st.addr && step.layer == 0) coneSteps(ft[0].flow, step.index, cfg.k, steps);
  for (size_t q : steps) out.cone.insert(t.steps[q].addr);
  out.contributing = spuriousFixpoint(ft, out.cone, {st.addr});
  return out;
}

Liveness propagateLiveness(const ProgramImage &img, const std::vector<const Trace *> &traces,
                           const AnalysisReport &report, const std::vector<SynthesizedPredicate> &syntheses,
                           const SimplifyConfig &cfg) {
  Liveness L;
  L.live = sparse(img, traces, report);
  DisasmResult all = sparse(img, traces, {});
  for (const auto &[a, st] : report.opaque)
    if (st.status == Opacity::OPAQUE || st.status == Opacity::LIKELY_DEAD) L.opaqueDirection[a] = !st.deadIsTaken;

  std::vector<FlowTrace> flows;
  for (const Trace *t : traces) flows.push_back({t, buildFlow(*t, cfg.outputs)});

  std::set<Addr> opSinks, cand;
  for (const auto &sp : syntheses) {
    if (!L.opaqueDirection.count(sp.site)) continue;
    opSinks.insert(sp.site);
    cand.insert(sp.contributing.begin(), sp.contributing.end());
  }
  std::map<Addr, Addr> redirect;
  std::map<Addr, std::set<Addr>> retCone;
  for (const auto &[a, rr] : report.rets) {
    if (rr.label.integrity != Integrity::VIOLATED || rr.label.multiplicity != Multiplicity::SINGLE ||
        rr.targets.size() != 1)
      continue;
    redirect[a] = *rr.targets.begin();
    for (const auto &ft : flows) {
      std::set<size_t> steps;
      for (const auto &s : ft.trace->steps)
        if (s.addr == a) coneSteps(ft.flow, s.index, cfg.k, steps);
      for (size_t q : steps) retCone[a].insert(ft.trace->steps[q].addr);
    }
  }

  std::map<Addr, std::vector<Edge>> out;
  for (const Edge &e : L.live.edges) out[e.from].push_back(e);

  std::set<Addr> forced, spurious;
  for (;;) {
    std::set<Addr> sinks = opSinks, c = cand;
    for (const auto &[a, t] : redirect) {
      sinks.insert(a);
      c.insert(retCone[a].begin(), retCone[a].end());
    }
    for (Addr a : forced) c.erase(a);
    spurious = spuriousFixpoint(flows, c, sinks);

    bool retry = false;
    // Removed instructions need a unique control successor to bridge over.
    for (Addr a : spurious) {
      auto ins = L.live.instructions.find({a, 0});
      const auto &es = out[a];
      bool ok = ins != L.live.instructions.end();
      if (ok && ins->second.isCall())
        ok = std::count_if(es.begin(), es.end(), [](const Edge &e) { return e.kind == EdgeKind::Call; }) == 1;
      else
        ok = ok && es.size() == 1;
      if (!ok) {
        forced.insert(a);
        retry = true;
      }
    }
    // A rewritten ret must leave the stack pointer where the removed code found it.
    for (auto it = redirect.begin(); !retry && it != redirect.end();) {
      bool balanced = true;
      for (const auto &ft : flows) {
        const auto &steps = ft.trace->steps;
        for (size_t i = 0; i < steps.size() && balanced; ++i) {
          if (steps[i].addr != it->first) continue;
          Word want = (steps[i].regsBefore[kSP] + img.wordBytes()) & img.mask();
          Word have = ft.trace->initialRegs[kSP];
          for (size_t j = i; j-- > 0;) {
            Addr pa = steps[j].addr;
            std::vector<Loc> u, d;
            usesDefs(steps[j], img.wordBytes(), u, d);
            if (std::find(d.begin(), d.end(), Loc(kSP)) == d.end() || spurious.count(pa) || redirect.count(pa))
              continue;
            have = steps[j + 1].regsBefore[kSP];
            break;
          }
          balanced = have == want;
        }
      }
      if (balanced) {
        ++it;
      } else {
        it = redirect.erase(it);
        retry = true;
      }
    }
    if (!retry) break;
  }
  L.retRedirect = redirect;

  std::set<Addr> live = L.live.addresses();
  for (Addr a : all.addresses()) L.tags[a] = live.count(a) ? LiveTag::ALIVE : LiveTag::DEAD;
  for (Addr a : spurious) L.tags[a] = LiveTag::SPURIOUS;
  for (Addr a : opSinks) L.tags[a] = LiveTag::SPURIOUS;
  return L;
}

namespace {

LiveTag tagOf(const Liveness &L, Addr a) {
  auto it = L.tags.find(a);
  return it == L.tags.end() ? LiveTag::ALIVE : it->second;
}

// First ALIVE instruction reached from `a` across removed ones.
std::optional<Addr> resolveAlive(const Liveness &L, const std::map<Addr, std::vector<Edge>> &out, Addr a) {
  std::set<Addr> seen;
  while (tagOf(L, a) == LiveTag::SPURIOUS) {
    if (!seen.insert(a).second) return std::nullopt;
    auto it = out.find(a);
    if (it == out.end()) return std::nullopt;
    const auto &es = it->second;
    auto call = std::find_if(es.begin(), es.end(), [](const Edge &e) { return e.kind == EdgeKind::Call; });
    if (call != es.end()) a = call->to;
    else if (es.size() == 1) a = es[0].to;
    else return std::nullopt;
  }
  return a;
}

std::map<Addr, std::vector<Edge>> outEdges(const DisasmResult &r) {
  std::map<Addr, std::vector<Edge>> out;
  for (const Edge &e : r.edges) out[e.from].push_back(e);
  return out;
}

} // namespace

DisasmResult extractReducedCfg(const ProgramImage &img, const Liveness &L) {
  (void)img;
  DisasmResult r;
  r.method = DisasmMethod::Reduced;
  auto out = outEdges(L.live);
  auto resolve = [&](Addr a) { return resolveAlive(L, out, a); };
  auto tag = [&](Addr a) { return tagOf(L, a); };
  for (const auto &[k, ins] : L.live.instructions) {
    if (tag(k.addr) != LiveTag::ALIVE) continue;
    r.instructions[k] = ins;
    if (k.layer) continue;
    auto rd = L.retRedirect.find(k.addr);
    if (rd != L.retRedirect.end()) {
      if (auto to = resolve(rd->second)) r.edges.insert({k.addr, *to, EdgeKind::Jump});
      continue;
    }
    auto od = L.opaqueDirection.find(k.addr);
    for (const Edge &e : out[k.addr]) {
      auto to = resolve(e.to);
      if (!to) continue;
      r.edges.insert({k.addr, *to, od != L.opaqueDirection.end() ? EdgeKind::Jump : e.kind});
    }
  }
  return r;
}

std::string reassemble(const ProgramImage &img, const DisasmResult &reduced, const Liveness &L) {
  const unsigned w = img.width;
  auto lbl = [&](Addr a) { return "L_" + hexWord(a, w); };
  std::map<Addr, std::vector<Edge>> out;
  for (const Edge &e : reduced.edges) out[e.from].push_back(e);
  auto edgeTo = [&](Addr a, EdgeKind k) -> std::optional<Addr> {
    for (const Edge &e : out[a])
      if (e.kind == k) return e.to;
    return std::nullopt;
  };
  std::vector<std::pair<Addr, Instruction>> code;
  for (const auto &[k, ins] : reduced.instructions)
    if (k.layer == 0) code.emplace_back(k.addr, ins);

  std::ostringstream s;
  for (size_t i = 0; i < code.size(); ++i) {
    auto [a, ins] = code[i];
    s << lbl(a) << ": ";
    std::optional<Addr> fall;
    bool terminal = false;
    if (L.retRedirect.count(a) || L.opaqueDirection.count(a)) {
      auto to = edgeTo(a, EdgeKind::Jump);
      if (!to) throw std::runtime_error("reduced node without successor at " + hexWord(a, w));
      s << "JMP " << lbl(*to) << '\n';
      terminal = true;
    } else {
      switch (ins.op) {
      case Opcode::JMP: s << "JMP " << lbl(*edgeTo(a, EdgeKind::Jump)) << '\n'; terminal = true; break;
      case Opcode::JZ:
      case Opcode::JNZ:
        s << (ins.op == Opcode::JZ ? "JZ " : "JNZ ") << regName(ins.r[0]) << ", " << lbl(*edgeTo(a, EdgeKind::Jump))
          << '\n';
        break;
      case Opcode::CALL: s << "CALL " << lbl(*edgeTo(a, EdgeKind::Call)) << '\n'; break;
      default:
        s << formatInstruction(ins, w) << '\n';
        terminal = ins.op == Opcode::HALT || ins.op == Opcode::RET || ins.op == Opcode::JMPR;
      }
    }
    if (!terminal) fall = edgeTo(a, EdgeKind::Fallthrough);
    if (fall && (i + 1 == code.size() || code[i + 1].first != *fall)) s << "JMP " << lbl(*fall) << '\n';
  }
  std::string body = s.str();
  ProgramImage probe = assemble(body, {w, img.codeLo});
  Addr end = img.codeLo + probe.bytes.size();
  if (end > img.codeHi) throw std::runtime_error("reduced code does not fit the original code region");

  std::ostringstream o;
  auto entry = resolveAlive(L, outEdges(L.live), img.entry);
  if (!entry) throw std::runtime_error("entry point has no live successor");
  o << ".entry " << lbl(*entry) << '\n' << body;
  if (img.codeHi > end) o << ".zero " << img.codeHi - end << '\n';
  o << ".code_end\n";
  std::multimap<Addr, std::string> labels;
  for (const auto &[n, a] : img.labels)
    if (a >= img.codeHi) labels.emplace(a, n);
  const Addr limit = img.base + img.bytes.size();
  for (Addr a = img.codeHi; a < limit;) {
    auto [lo, hi] = labels.equal_range(a);
    for (auto it = lo; it != hi; ++it) o << it->second << ": ";
    Addr b = a;
    while (b < limit && img.bytes[b - img.base] == 0 && (b == a || !labels.count(b))) ++b;
    if (b > a) {
      o << ".zero " << b - a << '\n';
      a = b;
    } else {
      o << ".byte " << unsigned(img.bytes[a - img.base]) << '\n';
      ++a;
    }
  }
  for (const auto &[n, a] : img.globals) o << ".global " << n << '\n';
  return o.str();
}

std::string livenessDotAttrs(const Liveness &L, Addr a) {
  auto it = L.tags.find(a);
  if (it == L.tags.end()) return "";
  switch (it->second) {
  case LiveTag::ALIVE: return "style=filled, fillcolor=palegreen";
  case LiveTag::DEAD: return "style=filled, fillcolor=lightcoral";
  case LiveTag::SPURIOUS: return "style=filled, fillcolor=khaki";
  }
  return "";
}

} // namespace bbdse
