// Linear sweep, recursive traversal, dynamic and sparse disassembly, with
// precision scoring against a reference instruction set.
#pragma once

#include "bbdse/detect.hpp"

#include <iosfwd>
#include <set>

namespace bbdse {

enum class EdgeKind { Fallthrough, Jump, Call, Ret };
enum class DisasmMethod { Linear, Recursive, Dynamic, Sparse, Reduced };
const char *edgeKindName(EdgeKind k);
const char *methodName(DisasmMethod m);
std::optional<DisasmMethod> methodByName(const std::string &s);

struct Edge {
  Addr from, to;
  EdgeKind kind;
  auto operator<=>(const Edge &) const = default;
};

struct InstrKey {
  Addr addr;
  unsigned layer;
  auto operator<=>(const InstrKey &) const = default;
};

struct DisasmResult {
  DisasmMethod method = DisasmMethod::Linear;
  std::map<InstrKey, Instruction> instructions;
  std::set<Edge> edges;

  std::set<Addr> addresses() const;
  size_t size() const { return instructions.size(); }
};

DisasmResult linearSweep(const ProgramImage &img);
DisasmResult recursive(const ProgramImage &img, const std::vector<Addr> &entries);
DisasmResult dynamicDisasm(const std::vector<const Trace *> &traces);
// Recursive traversal from the trace entries steered by the traces (indirect
// targets, ret targets) and by the analysis report (opaque directions and
// tampered returns are not followed).
DisasmResult sparse(const ProgramImage &img, const std::vector<const Trace *> &traces,
                    const AnalysisReport &report);

struct DisasmScore {
  size_t recovered = 0;
  size_t perfect = 0;
  // recovered \ perfect and perfect \ recovered, by address.
  size_t over = 0;
  size_t under = 0;
};
DisasmScore score(const DisasmResult &r, const std::set<Addr> &perfect);
// Assembled instructions outside the dead intervals, plus executed ones.
std::set<Addr> perfectSet(const ProgramImage &img,
                          const std::vector<std::pair<Addr, Addr>> &deadIntervals,
                          const std::vector<const Trace *> &traces);

// Instruction-level CFG; node attributes come from `attrs` when given.
void writeDot(const DisasmResult &r, unsigned width, std::ostream &os,
              const std::function<std::string(Addr)> &attrs = nullptr);
// `METRIC name=value ...` line.
void writeMetrics(const std::string &sample, DisasmMethod m, const DisasmScore &s, std::ostream &os);

} // namespace bbdse
