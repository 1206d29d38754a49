#include "bbdse/formula.hpp"
#include "test_programs.hpp"

#include <gtest/gtest.h>

using namespace bbdse;

TEST(Term, FoldingAndNegation) {
  TermStore S;
  Term x = S.var("x", 8);
  EXPECT_EQ(S.add(S.constant(200, 8), S.constant(100, 8))->value, 44u);
  EXPECT_EQ(S.sub(x, x), S.constant(0, 8));
  Term e = S.eq(x, S.constant(3, 8));
  EXPECT_EQ(S.lnot(S.lnot(e)), e);
  EXPECT_EQ(S.lnot(e), S.ne(x, S.constant(3, 8)));
  // (x - 4) + 4 == x
  EXPECT_EQ(S.add(S.sub(x, S.constant(4, 8)), S.constant(4, 8)), x);
  EXPECT_EQ(S.eq(S.add(x, S.constant(4, 8)), S.add(x, S.constant(4, 8))), S.boolean(true));
  // Byte reassembly of a word folds back to the word.
  Term y = S.var("y", 32);
  Term acc = S.extract(7, 0, y);
  for (unsigned i = 1; i < 4; ++i)
    acc = S.concat(S.extract(8 * i + 7, 8 * i, y), acc);
  EXPECT_EQ(acc, y);
  // 0/1 word compared with zero collapses to the condition.
  Term c = S.compare(Op::Ult, x, S.constant(10, 8));
  EXPECT_EQ(S.eq(S.boolToWord(c, 8), S.constant(0, 8)), S.lnot(c));
}

TEST(Term, EvaluateMatchesSemantics) {
  TermStore S;
  Term x = S.var("x", 8);
  Term t = S.binary(Op::UDiv, x, S.constant(0, 8));
  EXPECT_EQ(evaluate(t, [](Term) { return Word(5); }), 0xffu);
  Term s = S.compare(Op::Slt, x, S.constant(0, 8));
  EXPECT_EQ(evaluate(s, [](Term) { return Word(0x80); }), 1u);
  Term sh = S.binary(Op::Shl, x, S.var("n", 8));
  EXPECT_EQ(evaluate(sh, [](Term v) { return v->name == "x" ? Word(1) : Word(9); }), 0u);
}

TEST(Slice, MoviThenGoal) {
  Trace t = run(assemble("MOVI r0, 0\nHALT\n"), {});
  TraceSSA ssa(t);
  Term goal = ssa.store().ne(ssa.reg(1, 0), ssa.store().constant(0, 32));
  SliceFormula f = backwardSlice(ssa, 1, goal, 1);
  ASSERT_EQ(f.defs.size(), 1u);
  EXPECT_EQ(f.defs[0].rhs, ssa.store().constant(0, 32));
  EXPECT_TRUE(f.cutInputs.empty());
  EXPECT_TRUE(f.conds.empty());
  EXPECT_EQ(f.constraintCount(), 1u);
}

TEST(Slice, OpaquePredicateCutsAtGlobals) {
  auto p = testprog::fig2();
  Trace t = run(p.image, p.inputs);
  TraceSSA ssa(t);
  size_t jz = testprog::firstStepAt(t, p.image.label("opjz"));
  Term goal = ssa.takenCond(jz);
  SliceFormula f16 = backwardSlice(ssa, jz, goal, 16);
  ASSERT_EQ(f16.cutInputs.size(), 2u);
  EXPECT_EQ(f16.cutInputs[0]->name.substr(0, 1), "m");
  EXPECT_EQ(f16.cutInputs[0]->name.substr(f16.cutInputs[0]->name.size() - 3), "_in");
  EXPECT_EQ(f16.cutInputs[1]->name.substr(f16.cutInputs[1]->name.size() - 3), "_in");
  SliceFormula f2 = backwardSlice(ssa, jz, goal, 2);
  EXPECT_LT(f2.defs.size(), f16.defs.size());
  for (Term v : f2.cutInputs)
    EXPECT_EQ(v->name.find("_in"), std::string::npos) << v->name;
}

TEST(Forward, NoConditionals) {
  Trace t = run(assemble("MOVI r0, 1\nADDI r0, 2\nHALT\n"), {});
  TraceSSA ssa(t);
  SliceFormula f = forwardPathPredicate(ssa, 2, nullptr);
  EXPECT_EQ(f.defs.size(), 2u);
  EXPECT_TRUE(f.conds.empty());
  EXPECT_TRUE(satisfiedBy(f, [](Term) { return Word(0); }));
}

TEST(Forward, ContainsTakenCondition) {
  Trace t = run(assemble("MOVI r0, 1\nJNZ r0, x\nx: HALT\n"), {});
  TraceSSA ssa(t);
  SliceFormula f = forwardPathPredicate(ssa, 2, nullptr);
  ASSERT_EQ(f.conds.size(), 1u);
  EXPECT_EQ(f.conds[0].cond, ssa.takenCond(1));
}

TEST(Forward, GrowsLinearlyWhileSliceStaysBounded) {
  auto p = testprog::longLoop(2000);
  Trace t = run(p.image, p.inputs, {100000, 0});
  ASSERT_GT(t.size(), 5000u);
  TraceSSA ssa(t);
  std::vector<size_t> jumps;
  for (const auto &s : t.steps)
    if (s.branchTaken)
      jumps.push_back(s.index);
  size_t a = jumps[10], b = jumps[jumps.size() - 10];
  auto fa = forwardPathPredicate(ssa, a, ssa.takenCond(a));
  auto fb = forwardPathPredicate(ssa, b, ssa.takenCond(b));
  EXPECT_GT(fb.constraintCount(), 10 * fa.constraintCount());
  auto sa = backwardSlice(ssa, a, ssa.takenCond(a), 16);
  auto sb = backwardSlice(ssa, b, ssa.takenCond(b), 16);
  EXPECT_LE(sb.constraintCount(), 16u * 3);
  EXPECT_EQ(sa.constraintCount(), sb.constraintCount());
}

TEST(Negate, Goal) {
  TermStore S;
  auto store = std::make_shared<TermStore>();
  SliceFormula f;
  f.store = store;
  Term a = store->var("a", 8), b = store->var("b", 8);
  f.goal = store->eq(a, b);
  EXPECT_EQ(negateGoal(f).goal, store->ne(a, b));
  EXPECT_EQ(negateGoal(negateGoal(f)).goal, f.goal);
}

// Every slice over random programs is satisfied by the recorded execution,
// and constraints only grow with the bound.
TEST(Property, SoundnessAndMonotonicity) {
  for (unsigned seed = 0; seed < 40; ++seed) {
    auto p = testprog::random(seed, 32);
    Trace t = run(p.image, p.inputs, {3000, 0});
    TraceSSA ssa(t);
    auto value = [&](Term v) { return ssa.concreteValue(v); };
    for (const auto &s : t.steps) {
      if (!s.branchTaken)
        continue;
      Term goal = ssa.store().lnot(ssa.observedCond(s.index));
      std::vector<std::set<std::string>> prevDefs;
      std::set<std::string> lastD, lastC;
      for (unsigned k : {0u, 1u, 2u, 4u, 8u, 16u, 32u, 64u}) {
        SliceFormula f = backwardSlice(ssa, s.index, goal, k);
        EXPECT_TRUE(constraintsHold(f, value));
        std::set<std::string> d, c;
        for (auto &x : f.defs)
          d.insert(x.var->name);
        for (auto &x : f.conds)
          c.insert(std::to_string(x.step));
        EXPECT_TRUE(std::includes(d.begin(), d.end(), lastD.begin(), lastD.end()));
        EXPECT_TRUE(std::includes(c.begin(), c.end(), lastC.begin(), lastC.end()));
        lastD = d;
        lastC = c;
      }
    }
  }
}
