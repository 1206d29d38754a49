#include "bbdse/detect.hpp"
#include "bbdse/obfuscate.hpp"
#include "test_programs.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <sstream>

using namespace bbdse;

namespace {

// Direct arithmetic for each family at width w; true when the taken
// (dead) direction would be chosen.
bool familyTaken(unsigned f, Word x, Word y, unsigned w) {
  Word m = widthMask(w);
  Word x2 = (x * x) & m, y2 = (y * y) & m;
  switch (f) {
  case 1: return !(y < 10 || ((x * ((x - 1) & m)) & m) % 2 == 0);
  case 2:
  case 7: return ((7 * y2 - 1) & m) == x2;
  case 3: return ((x + x2) & m) % 2 != 0;
  case 4: return (x2 >> 1) % 2 != 0;
  case 5: return ((x2 + (((x + 1) & m) * ((x + 1) & m))) & m) % 4 == 0;
  case 6: return ((x * ((x + 1) & m)) & m) % 2 != 0;
  case 8: {
    Word d = (x2 + 1) & m;
    Word q = d == 0 ? m : 2 / d;
    return q == ((y2 + 3) & m);
  }
  }
  return true;
}

std::string familyProbe(unsigned f) {
  return "_start:\n" + familyCode(f, "dead") + "HALT\ndead: HALT\n.code_end\n"
         "gx: .word 0\ngy: .word 0\n.global gx\n.global gy\n";
}

std::vector<std::string> mnemonics(const std::string &code) {
  std::vector<std::string> out;
  std::istringstream is(code);
  for (std::string l; std::getline(is, l);) out.push_back(l.substr(0, l.find(' ')));
  return out;
}

std::string readAll(const ProgramImage &img) {
  std::ostringstream os;
  for (auto b : img.bytes) os << int(b) << ',';
  return os.str();
}

} // namespace

// Every family never takes its jump, and the emitted code computes the
// stated predicate, over all 8-bit x and y.
TEST(Families, ExhaustiveAtWidth8) {
  for (unsigned f = 1; f <= kNumFamilies; ++f) {
    ProgramImage img = assemble(familyProbe(f), {8, 0});
    Addr dead = img.label("dead");
    for (Word x = 0; x < 256; ++x) {
      for (Word y = 0; y < 256; ++y) {
        ASSERT_FALSE(familyTaken(f, x, y, 8)) << "family " << f << " x=" << x << " y=" << y;
        Inputs in;
        in.globals["gx"] = x;
        in.globals["gy"] = y;
        Trace t = run(img, in);
        ASSERT_NE(t.steps.back().addr, dead) << "family " << f << " x=" << x << " y=" << y;
      }
    }
  }
}

TEST(Families, SampledAtWidth32) {
  std::mt19937_64 rng(3);
  for (unsigned f = 1; f <= kNumFamilies; ++f) {
    ProgramImage img = assemble(familyProbe(f), {32, 0});
    for (int i = 0; i < 300; ++i) {
      Word x = rng() & 0xffffffff, y = rng() & 0xffffffff;
      if (i < 4) x = y = Word(i);
      EXPECT_FALSE(familyTaken(f, x, y, 32));
      Inputs in;
      in.globals["gx"] = x;
      in.globals["gy"] = y;
      EXPECT_NE(run(img, in).steps.back().addr, img.label("dead"));
    }
  }
}

TEST(Families, Family2MirrorsFig2Listing) {
  std::vector<std::string> expect = {"MOVI", "LOAD", "MOVI", "LOAD", "MUL", "MULI", "SUBI", "MUL", "NE", "JZ"};
  EXPECT_EQ(mnemonics(familyCode(2, "trap")), expect);
  EXPECT_NE(familyCode(2, "trap").find("MULI r6, 7"), std::string::npos);
}

TEST(Families, Unknown) {
  EXPECT_THROW(familyCode(9, "x"), std::invalid_argument);
  EXPECT_THROW(familyFormula(0), std::invalid_argument);
}

TEST(Inject, CountZeroIsIdentity) {
  const auto &bp = baseProgram("simple_if");
  std::string src = bp.source(32);
  auto r = injectOpaque(src, 2, 0, 1, {32, canonicalInputs(bp, 32)});
  EXPECT_EQ(r.source, src);
  EXPECT_TRUE(r.records.empty());
  auto t = injectTampering(src, TamperScheme::PUSH_RET, 0, 1, {32, canonicalInputs(bp, 32)});
  EXPECT_EQ(t.source, src);
  EXPECT_TRUE(t.records.empty());
}

TEST(Inject, OpaqueRecordsPointAtJumpsAndJunk) {
  const auto &bp = baseProgram("bubble_sort");
  auto in = canonicalInputs(bp, 32);
  auto r = injectOpaque(bp.source(32), 5, 3, 42, {32, in});
  ASSERT_EQ(r.records.size(), 3u);
  for (const auto &rec : r.records) {
    auto d = decode(r.image, rec.site);
    ASSERT_TRUE(d.ins);
    EXPECT_EQ(d.ins->op, Opcode::JNZ);
    EXPECT_EQ(d.ins->imm, rec.deadLo);
    EXPECT_LT(rec.deadLo, rec.deadHi);
    EXPECT_LE(rec.deadHi, r.image.codeHi);
  }
}

TEST(Inject, NotEnoughPoints) {
  const auto &bp = baseProgram("simple_if");
  EXPECT_THROW(injectOpaque(bp.source(32), 1, 1000, 1, {32, canonicalInputs(bp, 32)}), std::runtime_error);
}

TEST(Inject, PushRetScheme) {
  std::string src = "_start: MOVI r0, 1\nJMP L\nHALT\nL: ADDI r0, 1\nHALT\n.code_end\n";
  Inputs none;
  auto r = injectTampering(src, TamperScheme::PUSH_RET, 1, 5, {32, {none}});
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_NE(r.source.find("PUSHI L\n__t0_ret: RET"), std::string::npos);
  EXPECT_EQ(r.source.find("JMP L\nHALT"), std::string::npos);
  const auto &rec = r.records[0];
  EXPECT_EQ(rec.target, r.image.label("L"));
  EXPECT_EQ(decode(r.image, rec.site).ins->op, Opcode::RET);
  Trace t = run(r.image, none);
  EXPECT_EQ(t.finalRegs[0], 2u);
}

TEST(Inject, PushCallRetRetScheme) {
  std::string src = "_start: CALL f\nHALT\nf: MOVI r0, 1\nJMP L\nHALT\nL: ADDI r0, 1\nRET\n.code_end\n";
  Inputs none;
  auto r = injectTampering(src, TamperScheme::PUSH_CALL_RET_RET, 1, 5, {32, {none}});
  ASSERT_EQ(r.records.size(), 1u);
  EXPECT_NE(r.source.find("PUSHI L\nCALL __t0_g\n__t0_ret: RET"), std::string::npos);
  EXPECT_NE(r.source.find("__t0_g: RET"), std::string::npos);
  Trace t = run(r.image, none);
  EXPECT_EQ(t.end, TraceEnd::Halt);
  EXPECT_EQ(t.finalRegs[0], 2u);
  TraceSSA ssa(t);
  Solver s;
  auto rets = classifyRets(ssa, s);
  ASSERT_EQ(rets.size(), 3u);
  EXPECT_EQ(rets.at(r.records[0].site).label.integrity, Integrity::VIOLATED);
  EXPECT_EQ(rets.at(r.records[0].site).label.multiplicity, Multiplicity::SINGLE);
  EXPECT_EQ(rets.at(r.image.label("__t0_g")).label,
            (TamperingLabel{Integrity::GENUINE, Alignment::ALIGNED, Multiplicity::SINGLE}));
}

TEST(Inject, NoRewritableSite) {
  Inputs none;
  EXPECT_THROW(injectTampering("_start: HALT\n", TamperScheme::PUSH_RET, 1, 1, {32, {none}}),
               std::runtime_error);
}

TEST(Corpus, ShapeAndDeterminism) {
  CorpusConfig cfg;
  cfg.families = {2};
  auto a = buildCorpus(basePrograms(), cfg);
  EXPECT_EQ(a.size(), 100u);
  auto b = buildCorpus(basePrograms(), cfg);
  for (size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].name, b[i].name);
    EXPECT_EQ(readAll(a[i].obf.image), readAll(b[i].obf.image));
    EXPECT_EQ(a[i].obf.records, b[i].obf.records);
  }
  std::set<std::string> distinct;
  for (const auto &c : a) distinct.insert(readAll(c.obf.image));
  EXPECT_GT(distinct.size(), 90u);
  EXPECT_TRUE(buildCorpus({}, cfg).empty());
}

// Outputs match the base program on every canonical input, and no dead byte
// is ever executed.
TEST(Corpus, SemanticsAndTruthSoundness) {
  for (unsigned w : {16u, 32u}) {
    CorpusConfig cfg;
    cfg.width = w;
    cfg.seeds = 3;
    cfg.schemes = {TamperScheme::PUSH_RET, TamperScheme::PUSH_CALL_RET_RET};
    for (const auto &c : buildCorpus(basePrograms(), cfg)) {
      ProgramImage base = assemble(c.baseSource, {w, 0});
      ASSERT_FALSE(c.obf.records.empty()) << c.name;
      for (const auto &in : c.inputs) {
        Trace a = run(base, in), b = run(c.obf.image, in);
        ASSERT_EQ(b.end, TraceEnd::Halt) << c.name;
        for (unsigned r : c.outputs) EXPECT_EQ(a.finalRegs[r], b.finalRegs[r]) << c.name;
        for (const auto &s : b.steps)
          for (const auto &rec : c.obf.records)
            ASSERT_FALSE(s.addr >= rec.deadLo && s.addr < rec.deadHi) << c.name;
      }
      if (c.kind == RecordKind::OP) {
        Trace t = run(c.obf.image, c.inputs[0]);
        for (const auto &rec : c.obf.records) EXPECT_FALSE(testprog::stepsAt(t, rec.site).empty()) << c.name;
      }
    }
  }
}

TEST(Files, TruthInputsAndCorpusRoundTrip) {
  CorpusConfig cfg;
  cfg.seeds = 1;
  cfg.families = {1, 8};
  cfg.schemes = {TamperScheme::PUSH_CALL_RET_RET};
  auto corpus = buildCorpus(basePrograms(), cfg);
  auto dir = std::filesystem::temp_directory_path() / "bbdse_corpus_test";
  std::filesystem::remove_all(dir);
  writeCorpus(corpus, dir.string());
  auto back = readCorpus(dir.string());
  ASSERT_EQ(back.size(), corpus.size());
  for (size_t i = 0; i < corpus.size(); ++i) {
    EXPECT_EQ(back[i].name, corpus[i].name);
    EXPECT_EQ(back[i].kind, corpus[i].kind);
    EXPECT_EQ(back[i].obf.records, corpus[i].obf.records);
    EXPECT_EQ(readAll(back[i].obf.image), readAll(corpus[i].obf.image));
    EXPECT_EQ(back[i].outputs, corpus[i].outputs);
    ASSERT_EQ(back[i].inputs.size(), corpus[i].inputs.size());
    EXPECT_EQ(back[i].inputs[0].regs, corpus[i].inputs[0].regs);
    EXPECT_EQ(back[i].inputs[0].globals, corpus[i].inputs[0].globals);
    EXPECT_EQ(back[i].baseSource, corpus[i].baseSource);
  }
  std::filesystem::remove_all(dir);
  std::istringstream bad("OP x\n");
  EXPECT_THROW(readTruth(bad), std::exception);
}

TEST(Samples, AspackDecoy) {
  ProgramImage img = aspackDecoy();
  Trace t = run(img, {});
  ASSERT_EQ(t.end, TraceEnd::Halt);
  TraceSSA ssa(t);
  Solver s;
  EXPECT_EQ(detectOpaque(ssa, s, img.label("decoy"), {16}).status, Opacity::COVERED);
  // Judged on the first pass alone, the decoy looks opaque.
  EXPECT_EQ(t.steps.at(testprog::firstStepAt(t, img.label("decoy"))).layer, 0u);
  auto r = selfmodConditional(ssa, s, testprog::firstStepAt(t, img.label("store")), 16);
  EXPECT_EQ(r.status, SelfMod::UNCONDITIONAL);
  EXPECT_EQ(r.written, 1u);
}

TEST(Samples, AcprotectTamper) {
  ProgramImage img = acprotectTamper();
  Trace t = run(img, {});
  ASSERT_EQ(t.end, TraceEnd::Halt);
  TraceSSA ssa(t);
  Solver s;
  auto rets = classifyRets(ssa, s);
  EXPECT_EQ(rets.at(img.label("ret")).label,
            (TamperingLabel{Integrity::VIOLATED, Alignment::ALIGNED, Multiplicity::SINGLE}));
  EXPECT_EQ(*rets.at(img.label("ret")).targets.begin(), img.label("target"));
}
