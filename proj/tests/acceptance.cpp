// End-to-end acceptance run: one PASS/FAIL line per criterion, exit status 1
// when any criterion fails.
#include "bbdse/harness.hpp"
#include "bbdse/simplify.hpp"
#include "test_programs.hpp"

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <random>
#include <sstream>

using namespace bbdse;

namespace {

// Pinned tolerances.
constexpr size_t kOracleFormulas = 1000;
constexpr unsigned kOracleMaxBits = 16;
constexpr double kMaxFpRate = 0.05;
constexpr double kFlatnessRatio = 2.0;
constexpr double kForwardGrowth = 1.5;
constexpr size_t kCompareCap = 64;
constexpr size_t kLongTrace = 5000;
constexpr double kLongTraceBias = 10.0;
constexpr double kRecursiveOver = 0.10;
constexpr double kDynamicEnlargement = 3.0;
constexpr double kReducedSlack = 0.05;
constexpr size_t kSoundnessSlices = 100;

using Clock = std::chrono::steady_clock;

int failures = 0;

void report(int n, bool ok, const std::string &detail, Clock::time_point start) {
  double s = std::chrono::duration<double>(Clock::now() - start).count();
  std::printf("CRITERION %d %s %s (%.1fs)\n", n, ok ? "PASS" : "FAIL", detail.c_str(), s);
  std::fflush(stdout);
  failures += !ok;
}

SolverConfig rawConfig() {
  SolverConfig c;
  c.fastPaths = false;
  c.cache = false;
  return c;
}

bool haveSolver() {
  SliceFormula f;
  f.store = std::make_shared<TermStore>();
  f.goal = f.store->boolean(true);
  return Solver(rawConfig()).check(f).kind == VerdictKind::SAT;
}

// Everything the later criteria need about one corpus sample.
struct Processed {
  const CorpusSample *sample;
  std::shared_ptr<ProgramImage> img;
  Trace trace;
  AnalysisReport rep;
};

void criterion1() {
  auto start = Clock::now();
  Solver solver(rawConfig());
  size_t compared = 0, agree = 0, timeouts = 0;
  std::string firstMismatch;
  for (unsigned seed = 0; compared < kOracleFormulas && seed < 5000; ++seed) {
    auto p = testprog::random(seed, 8, 5);
    Trace t = run(p.image, p.inputs, {400, 0});
    TraceSSA ssa(t);
    for (const auto &s : t.steps) {
      if (!s.branchTaken || compared >= kOracleFormulas) continue;
      for (unsigned k : {4u, 10u}) {
        SliceFormula f = backwardSlice(ssa, s.index, ssa.store().lnot(ssa.observedCond(s.index)), k);
        unsigned bits = 0;
        for (Term v : f.cutInputs) bits += v->width;
        if (bits > kOracleMaxBits) continue;
        Verdict z = solver.check(f);
        if (z.kind == VerdictKind::TIMEOUT) {
          ++timeouts;
          continue;
        }
        ++compared;
        if (bruteCheck(f).kind == z.kind) ++agree;
        else if (firstMismatch.empty()) firstMismatch = " first_mismatch_seed=" + std::to_string(seed);
      }
    }
  }
  std::ostringstream d;
  d << "oracle agreement " << agree << "/" << compared << " timeouts=" << timeouts << firstMismatch;
  report(1, compared >= kOracleFormulas && agree == compared, d.str(), start);
}

void criterion2(const std::vector<CorpusSample> &corpus) {
  auto start = Clock::now();
  ExperimentConfig cfg;
  auto rows = ksweep(corpus, cfg);
  std::ostringstream d;
  bool monotone = true;
  const KsweepRow *at16 = nullptr;
  for (size_t i = 0; i < rows.size(); ++i) {
    if (i && rows[i].score.fn > rows[i - 1].score.fn) monotone = false;
    if (rows[i].k == 16) at16 = &rows[i];
    d << "k" << rows[i].k << ":fn=" << rows[i].score.fn << ",fp=" << rows[i].score.fp << " ";
  }
  bool ok = monotone && at16;
  if (at16) {
    const auto &s = at16->score;
    double rate = s.genuine ? double(s.fp) / s.genuine : 0;
    d << "k16 positives=" << s.positives << " fp_rate=" << rate;
    ok = ok && s.fn == 0 && rate <= kMaxFpRate && s.positives > 0;
  }
  d << (monotone ? " monotone" : " not-monotone");
  report(2, ok, d.str(), start);
}

// Mean query time of `m` over the conditional occurrences closest to `pos`.
double meanQuery(TraceSSA &ssa, const std::vector<size_t> &conds, size_t pos, DseMethod m) {
  Solver solver(rawConfig());
  auto it = std::lower_bound(conds.begin(), conds.end(), pos);
  size_t i = it - conds.begin();
  size_t lo = i >= 3 ? i - 3 : 0;
  size_t hi = std::min(conds.size(), lo + 6);
  double total = 0;
  size_t n = 0;
  for (int rep = 0; rep < 3; ++rep)
    for (size_t j = lo; j < hi; ++j) {
      Verdict v = dseQuery(ssa, solver, conds[j], m, 16);
      total += v.elapsed;
      ++n;
    }
  return n ? total / n : 0;
}

void criterion3() {
  auto start = Clock::now();
  const BaseProgram &p = baseProgram("crc_long");
  auto img = std::make_shared<ProgramImage>(assemble(p.source(32), {32, 0}));
  Trace t = run(img, canonicalInputs(p, 32, 1).front());
  TraceSSA ssa(t);
  auto conds = conditionalSteps(t);
  if (t.size() < 10000 || conds.empty()) {
    report(3, false, "crc_long trace shorter than 10000 steps", start);
    return;
  }
  double b100 = meanQuery(ssa, conds, 100, DseMethod::Bounded);
  double b10k = meanQuery(ssa, conds, 10000, DseMethod::Bounded);
  double f100 = meanQuery(ssa, conds, 100, DseMethod::Forward);
  double f10k = meanQuery(ssa, conds, 10000, DseMethod::Forward);
  double ratio = std::max(b100, b10k) / std::max(1e-9, std::min(b100, b10k));
  std::ostringstream d;
  d << "bbdse@100=" << b100 << "s bbdse@10000=" << b10k << "s ratio=" << ratio << " forward@100=" << f100
    << "s forward@10000=" << f10k << "s";
  report(3, ratio < kFlatnessRatio && f10k > kForwardGrowth * f100, d.str(), start);
}

void criterion4(const std::vector<Processed> &all) {
  auto start = Clock::now();
  Solver solver(SolverConfig{});
  CompareConfig cc;
  cc.maxQueries = kCompareCap;
  cc.backward = false;
  size_t traces = 0, violations = 0, longTraces = 0, longBiasMiss = 0;
  size_t fwdTotal = 0, bbTotal = 0;
  std::string first;
  for (const auto &p : all) {
    TraceSSA ssa(p.trace);
    auto rows = compareDse(ssa, solver, cc);
    if (rows.empty()) continue;
    ++traces;
    size_t fwd = 0, bb = 0;
    for (const auto &r : rows) (r.method == DseMethod::Forward ? fwd : bb) = r.unsat;
    fwdTotal += fwd;
    bbTotal += bb;
    bool bad = bb > fwd;
    if (p.trace.size() >= kLongTrace) {
      ++longTraces;
      if (double(fwd) < kLongTraceBias * double(bb)) {
        ++longBiasMiss;
        bad = true;
      }
    }
    violations += bb > fwd;
    if (bad && first.empty())
      first = " first_violation=" + p.sample->name + "(fwd=" + std::to_string(fwd) + ",bbdse=" + std::to_string(bb) + ")";
  }
  std::ostringstream d;
  d << "traces=" << traces << " unsat forward=" << fwdTotal << " bbdse=" << bbTotal << " bbdse>forward=" << violations
    << " long_traces=" << longTraces << " below_10x=" << longBiasMiss << first;
  report(4, traces > 0 && violations == 0 && longBiasMiss == 0 && longTraces > 0, d.str(), start);
}

void criterion5(const std::vector<Processed> &all) {
  auto start = Clock::now();
  TamperScore total;
  size_t samples = 0;
  std::string first;
  for (const auto &p : all) {
    if (p.sample->kind != RecordKind::TAMPER) continue;
    ++samples;
    TamperScore s = scoreTampering(p.rep.rets, p.sample->obf.records);
    if ((s.fn() || s.fp()) && first.empty()) first = " first_miss=" + p.sample->name;
    total.tampered += s.tampered;
    total.tamperedOk += s.tamperedOk;
    total.untouched += s.untouched;
    total.untouchedOk += s.untouchedOk;
  }
  std::ostringstream d;
  d << "samples=" << samples << " tampered=" << total.tampered << " fn=" << total.fn() << " untouched=" << total.untouched
    << " fp=" << total.fp() << first;
  report(5, samples > 0 && total.tampered > 0 && total.fn() == 0 && total.fp() == 0, d.str(), start);
}

void criterion6() {
  auto start = Clock::now();
  auto img = std::make_shared<ProgramImage>(aspackDecoy());
  Trace t = run(img, Inputs{});
  TraceSSA ssa(t);
  Solver solver;
  AnalysisReport rep = analyzeTraces({&t}, solver);
  Opacity op = rep.opaque.count(img->label("decoy")) ? rep.opaque.at(img->label("decoy")).status : Opacity::UNKNOWN;
  auto store = testprog::firstStepAt(t, img->label("store"));
  SelfMod sm = selfmodConditional(ssa, solver, store, 16).status;
  std::ostringstream d;
  d << "decoy=" << opacityName(op) << " store=" << selfModName(sm);
  report(6, op == Opacity::COVERED && sm == SelfMod::UNCONDITIONAL, d.str(), start);
}

void criterion7(const std::vector<Processed> &all) {
  auto start = Clock::now();
  size_t samples = 0, exact = 0, opSamples = 0, recOk = 0;
  std::string first;
  for (const auto &p : all) {
    ++samples;
    auto perfect = perfectSet(*p.img, deadIntervals(p.sample->obf.records), {&p.trace});
    DisasmScore sp = score(sparse(*p.img, {&p.trace}, p.rep), perfect);
    if (sp.over == 0 && sp.under == 0) ++exact;
    else if (first.empty()) first = " first_inexact=" + p.sample->name;
    if (p.sample->kind == RecordKind::OP) {
      ++opSamples;
      DisasmScore rec = score(recursive(*p.img, {p.trace.steps.at(0).addr}), perfect);
      if (rec.over >= kRecursiveOver * perfect.size()) ++recOk;
      else if (first.empty()) first = " first_recursive_short=" + p.sample->name;
    }
  }

  size_t plainOk = 0;
  double worstEnlarge = 1e9;
  bool dynOver = false;
  Solver solver;
  for (const auto &bp : basePrograms()) {
    auto img = std::make_shared<ProgramImage>(assemble(bp.source(32), {32, 0}));
    Trace t = run(img, canonicalInputs(bp, 32, 1).front());
    AnalysisReport rep = analyzeTraces({&t}, solver);
    DisasmResult sp = sparse(*img, {&t}, rep);
    plainOk += sp.addresses() == recursive(*img, {t.steps.at(0).addr}).addresses();
    if (bp.multiPath) {
      DisasmScore s = score(sp, perfectSet(*img, {}, {&t}));
      worstEnlarge = std::min(worstEnlarge, double(sp.size()) / dynamicDisasm({&t}).size());
      dynOver |= s.over != 0;
    }
  }
  std::ostringstream d;
  d << "sparse_exact=" << exact << "/" << samples << " recursive_over>=10%=" << recOk << "/" << opSamples
    << " plain_sparse=recursive=" << plainOk << "/" << basePrograms().size() << " multipath_enlargement=" << worstEnlarge
    << (dynOver ? " multipath_over" : "") << first;
  report(7,
         samples > 0 && exact == samples && recOk == opSamples && plainOk == basePrograms().size() &&
             worstEnlarge >= kDynamicEnlargement && !dynOver,
         d.str(), start);
}

void criterion8(const std::vector<Processed> &all) {
  auto start = Clock::now();
  size_t samples = 0, countOk = 0, outputsOk = 0;
  double worst = 0;
  std::string first;
  for (const auto &p : all) {
    const CorpusSample &c = *p.sample;
    ++samples;
    SimplifyConfig sc;
    sc.outputs = c.outputs;
    TraceSSA ssa(p.trace);
    std::vector<SynthesizedPredicate> syn;
    bool ok = true;
    try {
      for (const auto &[a, st] : p.rep.opaque)
        if (st.status == Opacity::OPAQUE || st.status == Opacity::LIKELY_DEAD) syn.push_back(synthesize(ssa, st, sc));
      Liveness live = propagateLiveness(*p.img, {&p.trace}, p.rep, syn, sc);
      DisasmResult reduced = extractReducedCfg(*p.img, live);
      size_t base = assemble(c.baseSource, {32, 0}).instrStarts.size();
      double dev = std::abs(double(reduced.size()) - double(base)) / base;
      worst = std::max(worst, dev);
      countOk += dev <= kReducedSlack;
      ok = dev <= kReducedSlack;

      ProgramImage red = assemble(reassemble(*p.img, reduced, live), {32, 0});
      ProgramImage orig = assemble(c.baseSource, {32, 0});
      bool same = true;
      for (const auto &in : c.inputs) {
        Trace a = run(orig, in), b = run(red, in);
        same = same && b.end == TraceEnd::Halt;
        for (unsigned r : c.outputs) same = same && a.finalRegs[r] == b.finalRegs[r];
      }
      outputsOk += same;
      ok = ok && same;
    } catch (const std::exception &e) {
      ok = false;
      if (first.empty()) first = " first_error=" + c.name + ":" + e.what();
    }
    if (!ok && first.empty()) first = " first_miss=" + c.name;
  }
  std::ostringstream d;
  d << "count_within_5%=" << countOk << "/" << samples << " worst_deviation=" << worst << " outputs_reproduced=" << outputsOk
    << "/" << samples << first;
  report(8, samples > 0 && countOk == samples && outputsOk == samples, d.str(), start);
}

void criterion9() {
  auto start = Clock::now();
  std::mt19937 rng(9);
  size_t slices = 0, holds = 0;
  for (unsigned seed = 0; slices < kSoundnessSlices; ++seed) {
    auto p = testprog::random(seed, 32);
    Trace t = run(p.image, p.inputs, {3000, 0});
    auto conds = conditionalSteps(t);
    if (conds.empty()) continue;
    TraceSSA ssa(t);
    size_t step = conds[rng() % conds.size()];
    unsigned k = 1 + rng() % 64;
    SliceFormula f = backwardSlice(ssa, step, ssa.store().lnot(ssa.observedCond(step)), k);
    ++slices;
    holds += constraintsHold(f, [&](Term v) { return ssa.concreteValue(v); });
  }
  report(9, holds == slices, "concrete valuation satisfies " + std::to_string(holds) + "/" + std::to_string(slices) +
                                 " random slices",
         start);
}

} // namespace

int main() {
  auto start = Clock::now();
  bool solver = haveSolver();
  if (!solver) std::printf("no SMT solver found (set BBDSE_SOLVER); solver-dependent criteria will fail\n");

  CorpusConfig cc;
  cc.schemes = {TamperScheme::PUSH_RET, TamperScheme::PUSH_CALL_RET_RET};
  std::vector<CorpusSample> corpus = buildCorpus(basePrograms(), cc);
  std::printf("corpus: %zu samples built in %.1fs\n", corpus.size(),
              std::chrono::duration<double>(Clock::now() - start).count());

  criterion1();
  criterion2(corpus);
  criterion3();

  std::vector<Processed> all;
  {
    Solver solver;
    for (const auto &c : corpus) {
      Processed p{&c, std::make_shared<ProgramImage>(c.obf.image), {}, {}};
      p.trace = run(p.img, c.inputs.front());
      p.rep = analyzeTraces({&p.trace}, solver);
      all.push_back(std::move(p));
    }
  }
  criterion4(all);
  criterion5(all);
  criterion6();
  criterion7(all);
  criterion8(all);
  criterion9();

  std::printf("acceptance: %d failing criteria, %.1fs total\n", failures,
              std::chrono::duration<double>(Clock::now() - start).count());
  return failures ? 1 : 0;
}
