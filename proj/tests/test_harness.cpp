#include "bbdse/harness.hpp"
#include "test_programs.hpp"

#include <gtest/gtest.h>

#include <sstream>

using namespace bbdse;

namespace {

OpacityStatus status(Opacity o, bool taken, bool fall, bool deadTaken = false) {
  OpacityStatus s;
  s.addr = 4;
  s.status = o;
  s.takenSeen = taken;
  s.fallthroughSeen = fall;
  s.deadIsTaken = deadTaken;
  return s;
}

} // namespace

TEST(Config, Validation) {
  ExperimentConfig c;
  EXPECT_NO_THROW(c.validate());
  c.ks = {4, 2};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.ks = {0, 2};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.ks = {};
  EXPECT_THROW(c.validate(), std::invalid_argument);
  c.ks = {16};
  c.width = 12;
  EXPECT_THROW(c.validate(), std::invalid_argument);
}

TEST(Merge, OpacityAcrossTraces) {
  // Opposite directions seen on two traces.
  EXPECT_EQ(mergeOpacity({status(Opacity::OPAQUE, true, false, false), status(Opacity::OPAQUE, false, true, true)})
                .status,
            Opacity::COVERED);
  EXPECT_EQ(mergeOpacity({status(Opacity::OPAQUE, false, true, true), status(Opacity::GENUINE, false, true)}).status,
            Opacity::GENUINE);
  EXPECT_EQ(mergeOpacity({status(Opacity::OPAQUE, false, true, true), status(Opacity::UNKNOWN, false, true)}).status,
            Opacity::UNKNOWN);
  OpacityStatus m = mergeOpacity({status(Opacity::OPAQUE, false, true, true), status(Opacity::OPAQUE, false, true, true)});
  EXPECT_EQ(m.status, Opacity::OPAQUE);
  EXPECT_TRUE(m.deadIsTaken);
  EXPECT_EQ(mergeOpacity({status(Opacity::OPAQUE, false, true, true), status(Opacity::LIKELY_DEAD, false, true, true)})
                .status,
            Opacity::LIKELY_DEAD);
  EXPECT_THROW(mergeOpacity({}), std::invalid_argument);
}

TEST(Merge, RetsAcrossTraces) {
  RetReport a, b;
  a.addr = b.addr = 9;
  RetOccurrence o;
  o.label = {Integrity::GENUINE, Alignment::ALIGNED, Multiplicity::SINGLE};
  a.occurrences = {o};
  a.targets = {1};
  b.occurrences = {o};
  b.targets = {2};
  RetReport m = mergeRets({a, b});
  EXPECT_EQ(m.label.integrity, Integrity::GENUINE);
  EXPECT_EQ(m.label.multiplicity, Multiplicity::MULTIPLE);
  b.targets = {1};
  b.occurrences[0].label.integrity = Integrity::VIOLATED;
  EXPECT_EQ(mergeRets({a, b}).label.integrity, Integrity::VIOLATED);
  EXPECT_EQ(mergeRets({a, b}).label.multiplicity, Multiplicity::SINGLE);
}

TEST(Analyze, Fig2OverSeveralInputs) {
  auto base = testprog::fig2();
  auto img = std::make_shared<ProgramImage>(base.image);
  std::vector<Trace> ts;
  for (Word x : {1, 2, 3}) {
    Inputs in = base.inputs;
    in.globals["gx"] = x;
    ts.push_back(run(img, in));
  }
  Solver solver;
  AnalysisReport r = analyzeTraces({&ts[0], &ts[1], &ts[2]}, solver);
  ASSERT_TRUE(r.opaque.count(img->label("opjz")));
  EXPECT_EQ(r.opaque.at(img->label("opjz")).status, Opacity::OPAQUE);
  EXPECT_EQ(r.opaque.at(img->label("opjz")).perOccurrence.size(), 3u);
}

TEST(Score, OpaqueJoin) {
  std::map<Addr, OpacityStatus> res;
  res[1] = status(Opacity::OPAQUE, false, true, true);
  res[2] = status(Opacity::GENUINE, false, true);
  res[3] = status(Opacity::LIKELY_DEAD, false, true);
  res[4] = status(Opacity::COVERED, true, true);
  res[2].perOccurrence = {{0, VerdictKind::TIMEOUT, 5.0, "solver"}, {1, VerdictKind::SAT, 1.0, "solver"}};
  std::vector<ObfuscationRecord> truth(2);
  truth[0].site = 1;
  truth[1].site = 2;
  OpaqueScore s = scoreOpaque(res, truth);
  EXPECT_EQ(s.positives, 2u);
  EXPECT_EQ(s.detected, 1u);
  EXPECT_EQ(s.fn, 1u);
  EXPECT_EQ(s.genuine, 2u);
  EXPECT_EQ(s.fp, 1u);
  EXPECT_EQ(s.timeouts, 1u);
  EXPECT_EQ(s.queries, 2u);
  EXPECT_DOUBLE_EQ(s.solverSeconds, 6.0);
}

TEST(Score, TamperJoin) {
  std::map<Addr, RetReport> rets;
  rets[1].label = {Integrity::VIOLATED, Alignment::DISALIGNED, Multiplicity::SINGLE};
  rets[2].label = {Integrity::GENUINE, Alignment::ALIGNED, Multiplicity::MULTIPLE};
  rets[3].label = {Integrity::UNKNOWN, Alignment::ALIGNED, Multiplicity::SINGLE};
  std::vector<ObfuscationRecord> truth(2);
  truth[0].kind = truth[1].kind = RecordKind::TAMPER;
  truth[0].site = 1;
  truth[1].site = 7;
  TamperScore s = scoreTampering(rets, truth);
  EXPECT_EQ(s.tampered, 2u);
  EXPECT_EQ(s.fn(), 1u);
  EXPECT_EQ(s.untouched, 2u);
  EXPECT_EQ(s.fp(), 1u);
}

TEST(Ksweep, SmallCorpusShape) {
  CorpusConfig cc;
  cc.seeds = 3;
  cc.families = {2, 7};
  auto corpus = buildCorpus({baseProgram("simple_if"), baseProgram("bubble_sort")}, cc);
  ExperimentConfig cfg;
  cfg.ks = {2, 4, 16, 32};
  auto rows = ksweep(corpus, cfg);
  ASSERT_EQ(rows.size(), 4u);
  for (size_t i = 1; i < rows.size(); ++i) EXPECT_LE(rows[i].score.fn, rows[i - 1].score.fn);
  EXPECT_EQ(rows[0].score.detected, 0u);
  EXPECT_EQ(rows[2].score.fn, 0u);
  EXPECT_EQ(rows[2].score.positives, corpus.size() * cc.opCount);
  std::ostringstream os;
  writeKsweep(rows, os);
  EXPECT_NE(os.str().find("KSWEEP k=16 positives=36 detected=36 fn=0"), std::string::npos) << os.str();
}

TEST(Compare, EmptyTraceGivesEmptyTable) {
  auto img = std::make_shared<ProgramImage>(assemble("HALT\n"));
  Trace t = run(img, {});
  TraceSSA ssa(t);
  Solver solver;
  EXPECT_TRUE(compareDse(ssa, solver, {}).empty());
}

TEST(Compare, BoundedNeverMoreUnsatThanForward) {
  Solver solver(ExperimentConfig().solverConfig());
  for (unsigned seed = 0; seed < 6; ++seed) {
    auto p = testprog::random(seed, 32);
    auto img = std::make_shared<ProgramImage>(p.image);
    Trace t = run(img, p.inputs);
    TraceSSA ssa(t);
    auto rows = compareDse(ssa, solver, {4});
    if (rows.empty()) continue;
    ASSERT_EQ(rows.size(), 3u);
    EXPECT_EQ(rows[0].method, DseMethod::Forward);
    EXPECT_LE(rows[2].unsat, rows[1].unsat) << seed;
    EXPECT_LE(rows[1].unsat, rows[0].unsat) << seed;
    for (const auto &r : rows) EXPECT_EQ(r.queries(), conditionalSteps(t).size());
  }
}

TEST(Compare, QueryCap) {
  auto p = testprog::longLoop(50);
  auto img = std::make_shared<ProgramImage>(p.image);
  Trace t = run(img, p.inputs);
  TraceSSA ssa(t);
  Solver solver;
  CompareConfig cfg;
  cfg.maxQueries = 7;
  cfg.backward = false;
  auto rows = compareDse(ssa, solver, cfg);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].queries(), 7u);
  // Loop exits are fixed by the constant bound on the full path only.
  EXPECT_EQ(rows[0].unsat, 7u);
  EXPECT_EQ(rows[1].method, DseMethod::Bounded);
}
