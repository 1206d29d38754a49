// Code simplification: opaque-predicate synthesis, alive/dead/spurious
// liveness tags, reduced CFG extraction and reassembly.
#pragma once

#include "bbdse/disasm.hpp"

namespace bbdse {

struct SynthesizedPredicate {
  Addr site = 0;
  std::shared_ptr<TermStore> store;
  // Taken condition over cut inputs renamed x, y, z...
  Term term = nullptr;
  // Operand order independent rendering used for family matching.
  std::string canonical;
  std::optional<unsigned> family;
  // Backward dataflow cone of the condition inside the k window.
  std::set<Addr> cone;
  // Cone instructions whose results feed nothing but the predicate.
  std::set<Addr> contributing;
};

struct SimplifyConfig {
  unsigned k = 16;
  // Registers observed after the program halts.
  std::vector<unsigned> outputs = {0, 1, 2, 3, 4, 5, 6, 7};
};

// Synthesizes the predicate at the first occurrence of `st.addr`; throws
// std::invalid_argument when the site is not OPAQUE or LIKELY_DEAD.
SynthesizedPredicate synthesize(TraceSSA &ssa, const OpacityStatus &st, const SimplifyConfig &cfg = {});
// Canonical form of the family template, for width w.
const std::string &familyCanonical(unsigned family, unsigned width);

enum class LiveTag { ALIVE, DEAD, SPURIOUS };
const char *liveTagName(LiveTag t);

struct Liveness {
  std::map<Addr, LiveTag> tags;
  // Code reached through feasible edges (sparse disassembly).
  DisasmResult live;
  // Feasible direction of each opaque conditional (true = taken).
  std::map<Addr, bool> opaqueDirection;
  // Tampered single-target rets rewritten as direct jumps.
  std::map<Addr, Addr> retRedirect;

  size_t count(LiveTag t) const;
};

Liveness propagateLiveness(const ProgramImage &img, const std::vector<const Trace *> &traces,
                           const AnalysisReport &report, const std::vector<SynthesizedPredicate> &syntheses,
                           const SimplifyConfig &cfg = {});

// ALIVE instructions only, with edges bridged across removed ones.
DisasmResult extractReducedCfg(const ProgramImage &img, const Liveness &live);

// Assembly source of the reduced program. Code is laid out in address order
// and padded to the original code end so data addresses are unchanged.
std::string reassemble(const ProgramImage &img, const DisasmResult &reduced, const Liveness &live);

// DOT node attributes coloring ALIVE, DEAD and SPURIOUS instructions.
std::string livenessDotAttrs(const Liveness &live, Addr a);

} // namespace bbdse
