#include "bbdse/disasm.hpp"

#include <deque>
#include <ostream>

namespace bbdse {

const char *edgeKindName(EdgeKind k) {
  switch (k) {
  case EdgeKind::Fallthrough: return "fallthrough";
  case EdgeKind::Jump: return "jump";
  case EdgeKind::Call: return "call";
  case EdgeKind::Ret: return "ret";
  }
  return "?";
}

const char *methodName(DisasmMethod m) {
  switch (m) {
  case DisasmMethod::Linear: return "linear";
  case DisasmMethod::Recursive: return "recursive";
  case DisasmMethod::Dynamic: return "dynamic";
  case DisasmMethod::Sparse: return "sparse";
  case DisasmMethod::Reduced: return "reduced";
  }
  return "?";
}

std::optional<DisasmMethod> methodByName(const std::string &s) {
  for (auto m : {DisasmMethod::Linear, DisasmMethod::Recursive, DisasmMethod::Dynamic,
                 DisasmMethod::Sparse, DisasmMethod::Reduced})
    if (s == methodName(m)) return m;
  return std::nullopt;
}

std::set<Addr> DisasmResult::addresses() const {
  std::set<Addr> out;
  for (const auto &[k, ins] : instructions) out.insert(k.addr);
  return out;
}

namespace {

Addr next(const ProgramImage &img, Addr a, const Instruction &ins) { return (a + ins.length) & img.mask(); }

// Static successors; conditional jumps list the taken edge first.
std::vector<Edge> successors(const ProgramImage &img, Addr a, const Instruction &ins) {
  std::vector<Edge> out;
  Addr ft = next(img, a, ins);
  switch (ins.op) {
  case Opcode::HALT:
  case Opcode::JMPR:
  case Opcode::RET: break;
  case Opcode::JMP: out.push_back({a, ins.imm, EdgeKind::Jump}); break;
  case Opcode::JZ:
  case Opcode::JNZ:
    out.push_back({a, ins.imm, EdgeKind::Jump});
    out.push_back({a, ft, EdgeKind::Fallthrough});
    break;
  case Opcode::CALL:
    out.push_back({a, ins.imm, EdgeKind::Call});
    out.push_back({a, ft, EdgeKind::Fallthrough});
    break;
  case Opcode::CALLR: out.push_back({a, ft, EdgeKind::Fallthrough}); break;
  default: out.push_back({a, ft, EdgeKind::Fallthrough}); break;
  }
  return out;
}

EdgeKind dynamicKind(const TraceStep &s, Addr to) {
  if (s.ins.op == Opcode::RET) return EdgeKind::Ret;
  if (s.ins.isCall()) return EdgeKind::Call;
  if (s.jumpTarget && (s.ins.op == Opcode::JMP || s.ins.op == Opcode::JMPR)) return EdgeKind::Jump;
  if (s.ins.isCondJump() && *s.branchTaken && to == s.ins.imm) return EdgeKind::Jump;
  return EdgeKind::Fallthrough;
}

// Worklist traversal over layer 0; `succ` decides which edges to follow.
template <class Succ>
void traverse(const ProgramImage &img, const std::vector<Addr> &entries, DisasmResult &r, Succ succ) {
  std::deque<Addr> work(entries.begin(), entries.end());
  std::set<Addr> seen;
  while (!work.empty()) {
    Addr a = work.front();
    work.pop_front();
    if (!seen.insert(a).second || !img.contains(a)) continue;
    auto d = decode(img, a);
    if (!d.ins) continue;
    r.instructions[{a, 0}] = *d.ins;
    for (const Edge &e : succ(a, *d.ins)) {
      if (!img.contains(e.to)) continue;
      r.edges.insert(e);
      work.push_back(e.to);
    }
  }
}

} // namespace

DisasmResult linearSweep(const ProgramImage &img) {
  DisasmResult r;
  r.method = DisasmMethod::Linear;
  Addr a = img.codeLo;
  while (a < img.codeHi) {
    auto d = decode(img, a);
    if (!d.ins || a + d.ins->length > img.codeHi) {
      ++a;
      continue;
    }
    r.instructions[{a, 0}] = *d.ins;
    for (const Edge &e : successors(img, a, *d.ins))
      if (img.contains(e.to)) r.edges.insert(e);
    a += d.ins->length;
  }
  return r;
}

DisasmResult recursive(const ProgramImage &img, const std::vector<Addr> &entries) {
  DisasmResult r;
  r.method = DisasmMethod::Recursive;
  traverse(img, entries, r, [&](Addr a, const Instruction &ins) { return successors(img, a, ins); });
  return r;
}

DisasmResult dynamicDisasm(const std::vector<const Trace *> &traces) {
  DisasmResult r;
  r.method = DisasmMethod::Dynamic;
  for (const Trace *t : traces) {
    for (size_t i = 0; i < t->steps.size(); ++i) {
      const TraceStep &s = t->steps[i];
      r.instructions[{s.addr, s.layer}] = s.ins;
      if (i + 1 < t->steps.size()) {
        Addr to = t->steps[i + 1].addr;
        r.edges.insert({s.addr, to, dynamicKind(s, to)});
      }
    }
  }
  return r;
}

DisasmResult sparse(const ProgramImage &img, const std::vector<const Trace *> &traces,
                    const AnalysisReport &report) {
  DisasmResult r;
  r.method = DisasmMethod::Sparse;
  std::vector<Addr> entries;
  std::map<Addr, std::set<Addr>> dynTargets; // indirect jumps and rets
  std::map<Addr, bool> followReturn;         // executed calls
  for (const Trace *t : traces) {
    if (t->program->bytes != img.bytes) throw std::invalid_argument("trace does not belong to the image");
    if (t->steps.empty()) continue;
    entries.push_back(t->steps.front().addr);
    for (const auto &s : t->steps) {
      if (s.ins.isCall()) followReturn.emplace(s.addr, false);
      if ((s.ins.isIndirect() || s.ins.op == Opcode::RET) && s.jumpTarget)
        dynTargets[s.addr].insert(*s.jumpTarget);
    }
    for (const CallPairing &p : formalStackWalk(*t)) {
      if (!p.call) continue;
      Addr ret = t->steps[p.retStep].addr;
      auto it = report.rets.find(ret);
      bool violated = it != report.rets.end() && it->second.label.integrity == Integrity::VIOLATED &&
                      t->steps[p.retStep].jumpTarget != p.call->returnSite;
      if (!violated) followReturn[t->steps[p.call->callStep].addr] = true;
    }
  }
  // Calls that never returned on the traces keep their return site.
  for (const Trace *t : traces) {
    std::set<Addr> paired;
    for (const CallPairing &p : formalStackWalk(*t))
      if (p.call) paired.insert(t->steps[p.call->callStep].addr);
    for (auto &[c, f] : followReturn)
      if (!paired.count(c)) f = true;
  }
  traverse(img, entries, r, [&](Addr a, const Instruction &ins) {
    std::vector<Edge> out = successors(img, a, ins);
    if (ins.isCondJump()) {
      auto it = report.opaque.find(a);
      if (it != report.opaque.end() &&
          (it->second.status == Opacity::OPAQUE || it->second.status == Opacity::LIKELY_DEAD))
        out.erase(out.begin() + (it->second.deadIsTaken ? 0 : 1));
    }
    if (ins.isCall()) {
      auto it = followReturn.find(a);
      if (it != followReturn.end() && !it->second)
        out.erase(std::remove_if(out.begin(), out.end(),
                                 [](const Edge &e) { return e.kind == EdgeKind::Fallthrough; }),
                  out.end());
    }
    auto dt = dynTargets.find(a);
    if (dt != dynTargets.end())
      for (Addr to : dt->second)
        out.push_back({a, to, ins.op == Opcode::RET ? EdgeKind::Ret
                              : ins.isCall()        ? EdgeKind::Call
                                                    : EdgeKind::Jump});
    return out;
  });
  // Code only present in later self-modification layers.
  for (const Trace *t : traces)
    for (const auto &s : t->steps)
      if (s.layer > 0) r.instructions[{s.addr, s.layer}] = s.ins;
  return r;
}

DisasmScore score(const DisasmResult &r, const std::set<Addr> &perfect) {
  DisasmScore s;
  std::set<Addr> got = r.addresses();
  s.recovered = got.size();
  s.perfect = perfect.size();
  for (Addr a : got) s.over += !perfect.count(a);
  for (Addr a : perfect) s.under += !got.count(a);
  return s;
}

std::set<Addr> perfectSet(const ProgramImage &img, const std::vector<std::pair<Addr, Addr>> &dead,
                          const std::vector<const Trace *> &traces) {
  std::set<Addr> out;
  for (Addr a : img.instrStarts) {
    bool isDead = false;
    for (const auto &[lo, hi] : dead) isDead |= a >= lo && a < hi;
    if (!isDead) out.insert(a);
  }
  for (const Trace *t : traces)
    for (const auto &s : t->steps) out.insert(s.addr);
  return out;
}

void writeDot(const DisasmResult &r, unsigned w, std::ostream &os,
              const std::function<std::string(Addr)> &attrs) {
  os << "digraph " << methodName(r.method) << " {\n  node [shape=box, fontname=monospace];\n";
  for (const auto &[k, ins] : r.instructions) {
    os << "  \"" << hexWord(k.addr, w) << (k.layer ? "_" + std::to_string(k.layer) : "") << "\" [label=\""
       << hexWord(k.addr, w) << ": " << formatInstruction(ins, w) << "\"";
    if (attrs) {
      std::string a = attrs(k.addr);
      if (!a.empty()) os << ", " << a;
    }
    os << "];\n";
  }
  for (const Edge &e : r.edges)
    os << "  \"" << hexWord(e.from, w) << "\" -> \"" << hexWord(e.to, w) << "\" [label=\"" << edgeKindName(e.kind)
       << "\"];\n";
  os << "}\n";
}

void writeMetrics(const std::string &sample, DisasmMethod m, const DisasmScore &s, std::ostream &os) {
  os << "METRIC sample=" << sample << " method=" << methodName(m) << " recovered=" << s.recovered
     << " perfect=" << s.perfect << " over=" << s.over << " under=" << s.under << '\n';
}

} // namespace bbdse
