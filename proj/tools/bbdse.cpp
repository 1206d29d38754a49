// Command-line driver. Exit codes: 0 success, 1 operational failure,
// 2 usage error (bad flags or paths).
#include "bbdse/harness.hpp"
#include "bbdse/simplify.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

using namespace bbdse;
namespace fs = std::filesystem;

namespace {

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct Common {
  unsigned k = 16;
  unsigned timeoutMs = 5000;
  unsigned width = 32;
  std::string solver;
  unsigned jobs = 1;
  uint64_t seed = 1;
  std::string mode = "sparse";
  std::string metric = "steps";
  std::string out;

  BoundMetric boundMetric() const { return metric == "defuse" ? BoundMetric::DefUse : BoundMetric::Steps; }
  SolverConfig solverConfig() const {
    ExperimentConfig e;
    e.timeoutMs = timeoutMs;
    e.solver = solver;
    return e.solverConfig();
  }
};

// Writes to -o when given, else stdout.
class Output {
public:
  explicit Output(const std::string &path) {
    if (path.empty()) return;
    file_.open(path);
    if (!file_) throw UsageError("cannot write " + path);
  }
  std::ostream &os() { return file_.is_open() ? file_ : std::cout; }

private:
  std::ofstream file_;
};

std::string slurp(const std::string &path) {
  std::ifstream f(path);
  if (!f) throw UsageError("cannot read " + path);
  std::ostringstream s;
  s << f.rdbuf();
  return s.str();
}

std::shared_ptr<ProgramImage> loadImage(const std::string &path) {
  return std::make_shared<ProgramImage>(readImage(path));
}

std::vector<Trace> loadTraces(const std::shared_ptr<ProgramImage> &img, const std::vector<std::string> &paths) {
  std::vector<Trace> out;
  for (const auto &p : paths) out.push_back(readTraceFile(img, p));
  return out;
}

std::vector<const Trace *> ptrs(const std::vector<Trace> &ts) {
  std::vector<const Trace *> v;
  for (const auto &t : ts) v.push_back(&t);
  return v;
}

std::vector<Inputs> loadInputs(const std::string &path, std::vector<unsigned> *outputs = nullptr) {
  std::istringstream s(slurp(path));
  return readInputs(s, outputs);
}

std::vector<unsigned> parseRegs(const std::string &list) {
  std::vector<unsigned> out;
  std::stringstream s(list);
  for (std::string tok; std::getline(s, tok, ',');) {
    auto r = parseReg(tok);
    if (!r) throw UsageError("bad register " + tok);
    out.push_back(*r);
  }
  return out;
}

Addr parseAddr(const std::string &s) {
  try {
    return std::stoull(s, nullptr, 0);
  } catch (const std::exception &) {
    throw UsageError("bad address " + s);
  }
}

void addSolverFlags(CLI::App *c, Common &o) {
  c->add_option("-k", o.k, "Slice bound")->check(CLI::PositiveNumber);
  c->add_option("--timeout-ms", o.timeoutMs, "Per-query solver timeout");
  c->add_option("--solver", o.solver, "SMT-LIB2 solver executable");
  c->add_option("--bound-metric", o.metric, "Bound metric")->check(CLI::IsMember({"steps", "defuse"}));
}

void addTraceFlags(CLI::App *c, std::string &image, std::vector<std::string> &traces, bool required = true) {
  c->add_option("image", image, "Program image")->required()->check(CLI::ExistingFile);
  auto *t = c->add_option("--trace", traces, "Trace file (repeatable)")->check(CLI::ExistingFile);
  if (required) t->required();
}

} // namespace

int main(int argc, char **argv) {
  CLI::App app{"Backward-bounded dynamic symbolic execution toolkit"};
  app.require_subcommand(1);
  Common o;
  std::string image, source, inputsPath, truthPath, reportPath, dotPath, metricsPath, corpusDir, name, outputs;
  std::vector<std::string> traces, sets;
  std::vector<unsigned> ks = {2, 4, 8, 12, 16, 24, 32};
  unsigned index = 0, count = 3, family = 0, seeds = 20, tamperCount = 2, kMax = 10000, perSample = 1;
  size_t step = 0, maxQueries = 0;
  std::string tamper, reg, addr;
  std::vector<unsigned> families;
  std::vector<std::string> schemes;
  Addr base = 0;

  auto *cAsm = app.add_subcommand("asm", "Assemble a source file into an image");
  cAsm->add_option("source", source)->required()->check(CLI::ExistingFile);
  cAsm->add_option("-o", o.out, "Image path")->required();
  cAsm->add_option("--width", o.width)->check(CLI::IsMember({8, 16, 32}));
  cAsm->add_option("--base", base);

  auto *cRun = app.add_subcommand("run", "Execute an image and record a trace");
  cRun->add_option("image", image)->required()->check(CLI::ExistingFile);
  cRun->add_option("--inputs", inputsPath, "Inputs file")->check(CLI::ExistingFile);
  cRun->add_option("--index", index, "Line of the inputs file");
  cRun->add_option("--set", sets, "name=hexvalue (register, global or @addr)");
  cRun->add_option("-o", o.out, "Trace path");

  auto *cObf = app.add_subcommand("obfuscate", "Inject opaque predicates or stack tampering");
  cObf->add_option("source", source)->check(CLI::ExistingFile);
  cObf->add_option("--family", family, "Opaque predicate family 1-8")->check(CLI::Range(1u, kNumFamilies));
  cObf->add_option("--tamper", tamper)->check(CLI::IsMember({"PUSH_RET", "PUSH_CALL_RET_RET"}));
  cObf->add_option("--count", count);
  cObf->add_option("--seed", o.seed);
  cObf->add_option("--width", o.width)->check(CLI::IsMember({8, 16, 32}));
  cObf->add_option("--inputs", inputsPath)->check(CLI::ExistingFile);
  cObf->add_option("-o", o.out, "Obfuscated source");
  cObf->add_option("--image", metricsPath, "Obfuscated image");
  cObf->add_option("--truth", truthPath, "Truth sidecar");
  cObf->add_option("--corpus-out", corpusDir, "Build the whole corpus into this directory");
  cObf->add_option("--seeds", seeds);
  cObf->add_option("--families", families)->delimiter(',');
  cObf->add_option("--schemes", schemes)->delimiter(',');
  cObf->add_option("--tamper-count", tamperCount);

  auto *cOp = app.add_subcommand("analyze-op", "Opaque predicate detection");
  addTraceFlags(cOp, image, traces);
  addSolverFlags(cOp, o);
  cOp->add_option("-o", o.out);

  auto *cStack = app.add_subcommand("analyze-stack", "Call stack tampering detection");
  addTraceFlags(cStack, image, traces);
  addSolverFlags(cStack, o);
  cStack->add_option("--k-max", kMax);
  cStack->add_option("-o", o.out);

  auto *cConst = app.add_subcommand("analyze-const", "Opaque constant check of a register");
  addTraceFlags(cConst, image, traces);
  addSolverFlags(cConst, o);
  cConst->add_option("--step", step)->required();
  cConst->add_option("--reg", reg)->required();
  cConst->add_option("-o", o.out);

  auto *cJumps = app.add_subcommand("analyze-jumps", "Indirect jump closure");
  addTraceFlags(cJumps, image, traces);
  addSolverFlags(cJumps, o);
  cJumps->add_option("--addr", addr, "Only this jump");
  cJumps->add_option("-o", o.out);

  auto *cSelf = app.add_subcommand("analyze-selfmod", "Conditional self-modification");
  addTraceFlags(cSelf, image, traces);
  addSolverFlags(cSelf, o);
  cSelf->add_option("-o", o.out);

  auto *cDis = app.add_subcommand("disasm", "Disassemble and score");
  addTraceFlags(cDis, image, traces, false);
  addSolverFlags(cDis, o);
  cDis->add_option("--mode", o.mode)->check(CLI::IsMember({"linear", "recursive", "dynamic", "sparse"}));
  cDis->add_option("--report", reportPath, "Analysis results for sparse mode")->check(CLI::ExistingFile);
  cDis->add_option("--truth", truthPath, "Truth sidecar for scoring")->check(CLI::ExistingFile);
  cDis->add_option("--dot", dotPath);
  cDis->add_option("--metrics", metricsPath);
  cDis->add_option("--name", name);

  auto *cSimp = app.add_subcommand("simplify", "Liveness tagging and reduced CFG");
  addTraceFlags(cSimp, image, traces);
  addSolverFlags(cSimp, o);
  cSimp->add_option("--outputs", outputs, "Observed registers, e.g. r0,r1");
  cSimp->add_option("--dot", dotPath);
  cSimp->add_option("-o", o.out, "Reassembled reduced source");

  auto *cSweep = app.add_subcommand("ksweep", "Opaque detection over a corpus for several k");
  cSweep->add_option("--corpus", corpusDir)->required()->check(CLI::ExistingDirectory);
  cSweep->add_option("-k", ks)->delimiter(',');
  cSweep->add_option("--timeout-ms", o.timeoutMs);
  cSweep->add_option("--solver", o.solver);
  cSweep->add_option("--jobs", o.jobs)->check(CLI::PositiveNumber);
  cSweep->add_option("--traces", perSample, "Inputs analysed per sample")->check(CLI::PositiveNumber);
  cSweep->add_option("--bound-metric", o.metric)->check(CLI::IsMember({"steps", "defuse"}));
  cSweep->add_option("-o", o.out);

  auto *cCmp = app.add_subcommand("compare-dse", "Forward, backward and bounded infeasibility checks");
  addTraceFlags(cCmp, image, traces);
  addSolverFlags(cCmp, o);
  cCmp->add_option("--max-queries", maxQueries);
  cCmp->add_option("-o", o.out);

  auto *cRep = app.add_subcommand("report", "Summarize a results file");
  cRep->add_option("results", reportPath)->required()->check(CLI::ExistingFile);
  cRep->add_option("--truth", truthPath)->check(CLI::ExistingFile);
  cRep->add_option("-o", o.out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError &e) {
    app.exit(e);
    return e.get_exit_code() == 0 ? 0 : 2;
  }

  try {
    if (*cAsm) {
      writeImage(assemble(slurp(source), {o.width, base}), o.out);
      return 0;
    }

    if (*cRun) {
      auto img = loadImage(image);
      Inputs in;
      if (!inputsPath.empty()) {
        auto all = loadInputs(inputsPath);
        if (index >= all.size()) throw UsageError("inputs file has no line " + std::to_string(index));
        in = all[index];
      }
      if (!sets.empty()) {
        std::string line;
        for (const auto &s : sets) line += s + " ";
        std::istringstream ls(line);
        Inputs extra;
        try {
          extra = readInputs(ls).at(0);
        } catch (const std::exception &e) {
          throw UsageError(std::string("bad --set: ") + e.what());
        }
        for (auto &[r, v] : extra.regs) in.regs[r] = v;
        for (auto &[g, v] : extra.globals) in.globals[g] = v;
        for (auto &[a, v] : extra.words) in.words[a] = v;
      }
      Trace t = run(*img, in);
      if (!o.out.empty()) writeTraceFile(t, o.out);
      static const char *ends[] = {"halt", "fault", "limit"};
      std::cout << "END " << ends[int(t.end)] << " steps=" << t.size();
      if (!t.faultReason.empty()) std::cout << " reason=\"" << t.faultReason << '"';
      std::cout << '\n';
      for (unsigned r = 0; r < kNumRegs; ++r) std::cout << regName(r) << '=' << hexWord(t.finalRegs[r], img->width) << '\n';
      return 0;
    }

    if (*cObf) {
      if (!corpusDir.empty()) {
        CorpusConfig cc;
        cc.width = o.width;
        cc.seeds = seeds;
        cc.baseSeed = o.seed;
        if (!families.empty()) cc.families = families;
        cc.opCount = o.width == 8 && !cObf->count("--count") ? 1 : count;
        cc.tamperCount = tamperCount;
        for (const auto &s : schemes) {
          if (s == "PUSH_RET") cc.schemes.push_back(TamperScheme::PUSH_RET);
          else if (s == "PUSH_CALL_RET_RET") cc.schemes.push_back(TamperScheme::PUSH_CALL_RET_RET);
          else throw UsageError("unknown scheme " + s);
        }
        std::vector<BaseProgram> progs = basePrograms();
        if (o.width == 8) progs = {baseProgram("simple_if")};
        auto corpus = buildCorpus(progs, cc);
        writeCorpus(corpus, corpusDir);
        std::cout << "corpus samples=" << corpus.size() << " dir=" << corpusDir << '\n';
        return 0;
      }
      if (source.empty()) throw UsageError("obfuscate needs a source file or --corpus-out");
      if ((family == 0) == tamper.empty()) throw UsageError("give exactly one of --family and --tamper");
      ObfuscateOptions opt;
      opt.width = o.width;
      opt.inputs = inputsPath.empty() ? std::vector<Inputs>{Inputs{}} : loadInputs(inputsPath);
      Obfuscated ob = family ? injectOpaque(slurp(source), family, count, o.seed, opt)
                             : injectTampering(slurp(source), tamper == "PUSH_RET" ? TamperScheme::PUSH_RET
                                                                                   : TamperScheme::PUSH_CALL_RET_RET,
                                               count, o.seed, opt);
      Output(o.out).os() << ob.source;
      if (!metricsPath.empty()) writeImage(ob.image, metricsPath);
      if (!truthPath.empty()) {
        Output tr(truthPath);
        writeTruth(ob.records, o.width, tr.os());
      }
      return 0;
    }

    if (*cOp || *cStack || *cConst || *cJumps || *cSelf) {
      auto img = loadImage(image);
      auto ts = loadTraces(img, traces);
      Solver solver(o.solverConfig());
      AnalysisReport r;
      if (*cOp || *cStack) {
        AnalyzeOptions opt;
        opt.detect.k = o.k;
        opt.detect.metric = o.boundMetric();
        opt.stack.kMax = kMax;
        opt.opaque = bool(*cOp);
        opt.rets = bool(*cStack);
        r = analyzeTraces(ptrs(ts), solver, opt);
      }
      for (auto &t : ts) {
        TraceSSA ssa(t);
        if (*cConst) {
          auto rr = parseReg(reg);
          if (!rr) throw UsageError("bad register " + reg);
          if (step >= t.size()) throw UsageError("step out of range");
          r.consts[t.steps[step].addr] = opaqueConstant(ssa, solver, step, ssa.reg(step, *rr), o.k);
          break;
        }
        if (*cJumps) {
          std::set<Addr> sites;
          for (const auto &s : t.steps)
            if (s.ins.isIndirect()) sites.insert(s.addr);
          if (!addr.empty()) sites = {parseAddr(addr)};
          for (Addr a : sites) r.jumps[a] = jumpClosure(ssa, solver, a, o.k);
        }
        if (*cSelf) {
          for (const auto &s : t.steps)
            if (s.writtenValue && !r.selfmods.count(s.addr))
              r.selfmods[s.addr] = selfmodConditional(ssa, solver, s.index, o.k);
        }
      }
      Output out(o.out);
      writeReport(r, img->width, out.os());
      return 0;
    }

    if (*cDis) {
      auto img = loadImage(image);
      auto ts = loadTraces(img, traces);
      DisasmMethod m = *methodByName(o.mode);
      if ((m == DisasmMethod::Dynamic || m == DisasmMethod::Sparse) && ts.empty())
        throw UsageError(o.mode + " disassembly needs --trace");
      DisasmResult r;
      std::vector<Addr> entries{img->entry};
      switch (m) {
      case DisasmMethod::Linear: r = linearSweep(*img); break;
      case DisasmMethod::Recursive:
        for (const auto &t : ts)
          if (!t.steps.empty()) entries.push_back(t.steps[0].addr);
        r = recursive(*img, entries);
        break;
      case DisasmMethod::Dynamic: r = dynamicDisasm(ptrs(ts)); break;
      default: {
        AnalysisReport rep;
        if (!reportPath.empty()) {
          std::istringstream s(slurp(reportPath));
          rep = readReport(s);
        } else {
          Solver solver(o.solverConfig());
          AnalyzeOptions opt;
          opt.detect.k = o.k;
          opt.detect.metric = o.boundMetric();
          rep = analyzeTraces(ptrs(ts), solver, opt);
        }
        r = sparse(*img, ptrs(ts), rep);
      }
      }
      if (!dotPath.empty()) {
        Output d(dotPath);
        writeDot(r, img->width, d.os());
      }
      std::vector<std::pair<Addr, Addr>> dead;
      if (!truthPath.empty()) {
        std::istringstream s(slurp(truthPath));
        dead = deadIntervals(readTruth(s));
      }
      Output met(metricsPath);
      writeMetrics(name.empty() ? fs::path(image).stem().string() : name, m, score(r, perfectSet(*img, dead, ptrs(ts))),
                   met.os());
      return 0;
    }

    if (*cSimp) {
      auto img = loadImage(image);
      auto ts = loadTraces(img, traces);
      Solver solver(o.solverConfig());
      AnalyzeOptions opt;
      opt.detect.k = o.k;
      opt.detect.metric = o.boundMetric();
      AnalysisReport rep = analyzeTraces(ptrs(ts), solver, opt);
      SimplifyConfig sc;
      sc.k = o.k;
      if (!outputs.empty()) sc.outputs = parseRegs(outputs);
      std::vector<SynthesizedPredicate> syn;
      TraceSSA ssa(ts.front());
      for (const auto &[a, st] : rep.opaque) {
        if (st.status != Opacity::OPAQUE && st.status != Opacity::LIKELY_DEAD) continue;
        for (const auto &t : ts) {
          TraceSSA s(t);
          bool executed = std::any_of(t.steps.begin(), t.steps.end(), [&](const TraceStep &x) { return x.addr == a; });
          if (!executed) continue;
          SynthesizedPredicate sp = synthesize(s, st, sc);
          std::cout << "SYNTH " << hexWord(a, img->width)
                    << " family=" << (sp.family ? std::to_string(*sp.family) : "-") << " contributing="
                    << sp.contributing.size() << " term=" << termToString(sp.term) << '\n';
          syn.push_back(std::move(sp));
          break;
        }
      }
      Liveness live = propagateLiveness(*img, ptrs(ts), rep, syn, sc);
      DisasmResult reduced = extractReducedCfg(*img, live);
      std::cout << "LIVENESS alive=" << live.count(LiveTag::ALIVE) << " dead=" << live.count(LiveTag::DEAD)
                << " spurious=" << live.count(LiveTag::SPURIOUS) << " reduced=" << reduced.size()
                << " redirected_rets=" << live.retRedirect.size() << '\n';
      if (!dotPath.empty()) {
        Output d(dotPath);
        writeDot(live.live, img->width, d.os(), [&](Addr a) { return livenessDotAttrs(live, a); });
      }
      if (!o.out.empty()) Output(o.out).os() << reassemble(*img, reduced, live);
      return 0;
    }

    if (*cSweep) {
      ExperimentConfig cfg;
      cfg.ks = ks;
      cfg.timeoutMs = o.timeoutMs;
      cfg.solver = o.solver;
      cfg.jobs = o.jobs;
      cfg.metric = o.boundMetric();
      cfg.corpus = corpusDir;
      try {
        cfg.validate();
      } catch (const std::invalid_argument &e) {
        throw UsageError(e.what());
      }
      auto corpus = readCorpus(corpusDir);
      Output out(o.out);
      writeKsweep(ksweep(corpus, cfg, perSample), out.os());
      return 0;
    }

    if (*cCmp) {
      auto img = loadImage(image);
      auto ts = loadTraces(img, traces);
      Solver solver(o.solverConfig());
      CompareConfig cc;
      cc.k = o.k;
      cc.metric = o.boundMetric();
      cc.maxQueries = maxQueries;
      Output out(o.out);
      for (auto &t : ts) {
        TraceSSA ssa(t);
        writeCompare(compareDse(ssa, solver, cc), out.os());
      }
      return 0;
    }

    if (*cRep) {
      std::istringstream s(slurp(reportPath));
      AnalysisReport r = readReport(s);
      Output out(o.out);
      std::map<std::string, size_t> counts;
      for (const auto &[a, st] : r.opaque) ++counts[std::string("op.") + opacityName(st.status)];
      for (const auto &[a, rr] : r.rets)
        ++counts[std::string("ret.") + integrityName(rr.label.integrity) + "+" + alignmentName(rr.label.alignment) +
                 "+" + multiplicityName(rr.label.multiplicity)];
      for (const auto &[a, c] : r.jumps) ++counts[std::string("jump.") + closureName(c.status)];
      for (const auto &[a, c] : r.consts) ++counts[std::string("const.") + constStatusName(c.status)];
      for (const auto &[a, c] : r.selfmods) ++counts[std::string("selfmod.") + selfModName(c.status)];
      for (const auto &[k, n] : counts) out.os() << "COUNT " << k << '=' << n << '\n';
      if (!truthPath.empty()) {
        std::istringstream ts(slurp(truthPath));
        auto truth = readTruth(ts);
        OpaqueScore os = scoreOpaque(r.opaque, truth);
        TamperScore tsc = scoreTampering(r.rets, truth);
        out.os() << "SCORE op_positives=" << os.positives << " op_detected=" << os.detected << " op_fn=" << os.fn
                 << " op_fp=" << os.fp << " op_genuine=" << os.genuine << " tamper_sites=" << tsc.tampered
                 << " tamper_fn=" << tsc.fn() << " untouched=" << tsc.untouched << " untouched_fp=" << tsc.fp() << '\n';
      }
      return 0;
    }
  } catch (const UsageError &e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception &e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
