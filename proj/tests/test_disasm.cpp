#include "bbdse/disasm.hpp"
#include "bbdse/obfuscate.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace bbdse;

namespace {

Solver &solver() {
  static Solver s;
  return s;
}

std::set<Addr> addrs(const ProgramImage &img, std::initializer_list<const char *> labels) {
  std::set<Addr> out;
  for (auto l : labels) out.insert(img.label(l));
  return out;
}

AnalysisReport analyzeOne(const Trace &t) {
  TraceSSA ssa(t);
  AnalysisReport r;
  r.opaque = detectAllOpaque(ssa, solver(), {16});
  r.rets = classifyRets(ssa, solver());
  return r;
}

struct Sample {
  std::shared_ptr<ProgramImage> img;
  std::vector<ObfuscationRecord> records;
  std::vector<Trace> traces;
  std::vector<const Trace *> ptrs() const {
    std::vector<const Trace *> out;
    for (const auto &t : traces) out.push_back(&t);
    return out;
  }
};

Sample obfuscated(const std::string &prog, bool tamper, uint64_t seed) {
  const BaseProgram &p = baseProgram(prog);
  ObfuscateOptions opt;
  opt.inputs = canonicalInputs(p, 32, 1);
  Obfuscated o = tamper ? injectTampering(p.source(32), TamperScheme::PUSH_RET, 2, seed, opt)
                        : injectOpaque(p.source(32), 2, 3, seed, opt);
  Sample s;
  s.img = std::make_shared<ProgramImage>(o.image);
  s.records = o.records;
  s.traces.push_back(run(s.img, opt.inputs.front()));
  return s;
}

} // namespace

TEST(Linear, StraightLine) {
  ProgramImage img = assemble("a: MOVI r0, 1\nb: ADDI r0, 2\nc: HALT\n");
  DisasmResult r = linearSweep(img);
  EXPECT_EQ(r.addresses(), addrs(img, {"a", "b", "c"}));
  EXPECT_TRUE(r.edges.count({img.label("a"), img.label("b"), EdgeKind::Fallthrough}));
  EXPECT_EQ(r.edges.size(), 2u);
}

TEST(Linear, DecodesJunkRecursiveDoesNot) {
  ProgramImage img = assemble("a: JMP over\n"
                              "junk: MOVI r1, 3\n"
                              ".byte 0xff\n"
                              "over: HALT\n");
  DisasmResult lin = linearSweep(img);
  DisasmResult rec = recursive(img, {img.label("a")});
  EXPECT_EQ(lin.addresses(), addrs(img, {"a", "junk", "over"}));
  EXPECT_EQ(rec.addresses(), addrs(img, {"a", "over"}));
  EXPECT_TRUE(rec.edges.count({img.label("a"), img.label("over"), EdgeKind::Jump}));
}

TEST(Recursive, StopsAtComputedJump) {
  auto img = std::make_shared<ProgramImage>(assemble("a: MOVI r1, t\n"
                                                     "j: JMPR r1\n"
                                                     ".byte 0xff\n"
                                                     "t: HALT\n"));
  Trace t = run(img, {});
  EXPECT_EQ(recursive(*img, {img->label("a")}).addresses(), addrs(*img, {"a", "j"}));
  DisasmResult dyn = dynamicDisasm({&t});
  EXPECT_EQ(dyn.addresses(), addrs(*img, {"a", "j", "t"}));
  EXPECT_TRUE(dyn.edges.count({img->label("j"), img->label("t"), EdgeKind::Jump}));
  EXPECT_EQ(sparse(*img, {&t}, {}).addresses(), addrs(*img, {"a", "j", "t"}));
}

TEST(Dynamic, UnionOfTraces) {
  auto img = std::make_shared<ProgramImage>(assemble("a: JZ r0, z\n"
                                                     "nz: MOVI r1, 1\n"
                                                     "HALT\n"
                                                     "z: MOVI r1, 2\n"
                                                     "h: HALT\n"));
  Inputs zero, one;
  one.regs[0] = 1;
  Trace t0 = run(img, zero), t1 = run(img, one);
  EXPECT_EQ(dynamicDisasm({&t0}).addresses(), addrs(*img, {"a", "z", "h"}));
  EXPECT_EQ(dynamicDisasm({&t0, &t1}).size(), 5u);
}

TEST(Dynamic, SelfModifiedCodeGetsLayers) {
  auto img = std::make_shared<ProgramImage>(assemble("_start: MOVI r1, patch+2\n"
                                                     "MOVI r2, 1\n"
                                                     "STORE [r1+0], r2\n"
                                                     "patch: MOVI r0, 0\n"
                                                     "HALT\n"));
  Trace t = run(img, {});
  DisasmResult dyn = dynamicDisasm({&t});
  Addr patch = img->label("patch");
  EXPECT_FALSE(dyn.instructions.count({patch, 0}));
  ASSERT_TRUE(dyn.instructions.count({patch, 1}));
  EXPECT_EQ(dyn.instructions.at({patch, 1}).imm, 1u);
  DisasmResult sp = sparse(*img, {&t}, {});
  EXPECT_TRUE(sp.instructions.count({patch, 0}));
  EXPECT_TRUE(sp.instructions.count({patch, 1}));
}

TEST(Sparse, OpaquePredicatesMatchPerfect) {
  for (uint64_t seed : {1u, 2u, 3u}) {
    Sample s = obfuscated("simple_if", false, seed);
    auto perfect = perfectSet(*s.img, deadIntervals(s.records), s.ptrs());
    DisasmScore sp = score(sparse(*s.img, s.ptrs(), analyzeOne(s.traces[0])), perfect);
    DisasmScore rec = score(recursive(*s.img, {s.traces[0].steps[0].addr}), perfect);
    EXPECT_EQ(sp.over, 0u) << seed;
    EXPECT_EQ(sp.under, 0u) << seed;
    EXPECT_GT(rec.over, 0u) << seed;
    EXPECT_EQ(rec.under, 0u) << seed;
  }
}

TEST(Sparse, TamperedReturnsMatchPerfect) {
  for (uint64_t seed : {1u, 2u}) {
    Sample s = obfuscated("bubble_sort", true, seed);
    auto perfect = perfectSet(*s.img, deadIntervals(s.records), s.ptrs());
    DisasmScore sp = score(sparse(*s.img, s.ptrs(), analyzeOne(s.traces[0])), perfect);
    EXPECT_EQ(sp.over, 0u) << seed;
    EXPECT_EQ(sp.under, 0u) << seed;
  }
}

TEST(Sparse, EqualsRecursiveOnPlainCode) {
  for (const auto &p : basePrograms()) {
    auto img = std::make_shared<ProgramImage>(assemble(p.source(32), {32, 0}));
    Trace t = run(img, canonicalInputs(p, 32, 1).front());
    DisasmResult rec = recursive(*img, {t.steps[0].addr});
    EXPECT_EQ(sparse(*img, {&t}, analyzeOne(t)).addresses(), rec.addresses()) << p.name;
  }
}

TEST(Sparse, RejectsForeignTrace) {
  auto a = std::make_shared<ProgramImage>(assemble("HALT\n"));
  ProgramImage b = assemble("MOVI r0, 1\nHALT\n");
  Trace t = run(a, {});
  EXPECT_THROW(sparse(b, {&t}, {}), std::invalid_argument);
}

TEST(Score, CountsBothDirections) {
  DisasmResult r;
  r.instructions[{1, 0}] = {};
  r.instructions[{2, 0}] = {};
  r.instructions[{2, 1}] = {};
  DisasmScore s = score(r, {2, 3, 4});
  EXPECT_EQ(s.recovered, 2u);
  EXPECT_EQ(s.over, 1u);
  EXPECT_EQ(s.under, 2u);
  std::ostringstream os;
  writeMetrics("x", DisasmMethod::Sparse, s, os);
  EXPECT_EQ(os.str(), "METRIC sample=x method=sparse recovered=2 perfect=3 over=1 under=2\n");
}

TEST(Dot, ListsNodesAndEdges) {
  ProgramImage img = assemble("a: JZ r0, a\nHALT\n", {8, 0});
  std::ostringstream os;
  writeDot(recursive(img, {0}), 8, os, [](Addr a) { return a == 0 ? std::string("color=red") : ""; });
  std::string d = os.str();
  EXPECT_NE(d.find("digraph recursive"), std::string::npos);
  EXPECT_NE(d.find("color=red"), std::string::npos);
  EXPECT_NE(d.find("[label=\"jump\"]"), std::string::npos);
  EXPECT_NE(d.find("[label=\"fallthrough\"]"), std::string::npos);
}

TEST(Method, Names) {
  for (auto m : {DisasmMethod::Linear, DisasmMethod::Recursive, DisasmMethod::Dynamic, DisasmMethod::Sparse})
    EXPECT_EQ(methodByName(methodName(m)), m);
  EXPECT_FALSE(methodByName("bogus"));
}
