#include "bbdse/obfuscate.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>
#include <stdexcept>

namespace bbdse {

const char *schemeName(TamperScheme s) {
  return s == TamperScheme::PUSH_RET ? "PUSH_RET" : "PUSH_CALL_RET_RET";
}

bool ObfuscationRecord::operator==(const ObfuscationRecord &o) const {
  return kind == o.kind && family == o.family && (kind == RecordKind::OP || scheme == o.scheme) &&
         site == o.site && target == o.target && deadLo == o.deadLo && deadHi == o.deadHi;
}

const char *familyFormula(unsigned family) {
  switch (family) {
  case 1: return "y<10 || 2|x(x-1)";
  case 2: return "7y^2-1 != x^2";
  case 3: return "2|(x+x^2)";
  case 4: return "2|floor(x^2/2)";
  case 5: return "4|(x^2+(x+1)^2)";
  case 6: return "2|x(x+1)";
  case 7: return "7y^2-1 != x^2 (shift form)";
  case 8: return "2/(x^2+1) != y^2+3";
  }
  throw std::invalid_argument("unknown family " + std::to_string(family));
}

std::string familyCode(unsigned family, const std::string &dead) {
  const char *load = "MOVI r5, gx\nLOAD r5, [r5+0]\n";
  const char *loadY = "MOVI r6, gy\nLOAD r6, [r6+0]\n";
  std::string c;
  switch (family) {
  case 1:
    c = std::string(load) + "MOV r7, r5\nSUBI r7, 1\nMUL r7, r5\nANDI r7, 1\nXORI r7, 1\n" + loadY +
        "MOVI r5, 10\nULT r6, r6, r5\nOR r7, r6\nJZ r7, ";
    break;
  case 2:
    c = std::string(load) + loadY + "MUL r6, r6\nMULI r6, 7\nSUBI r6, 1\nMUL r5, r5\nNE r7, r6, r5\nJZ r7, ";
    break;
  case 3: c = std::string(load) + "MOV r6, r5\nMUL r6, r5\nADD r6, r5\nANDI r6, 1\nJNZ r6, "; break;
  case 4: c = std::string(load) + "MUL r5, r5\nSHRI r5, 1\nANDI r5, 1\nJNZ r5, "; break;
  case 5:
    c = std::string(load) +
        "MOV r6, r5\nADDI r6, 1\nMUL r6, r6\nMUL r5, r5\nADD r5, r6\nANDI r5, 3\nMOVI r7, 0\nEQ r7, r5, r7\nJNZ r7, ";
    break;
  case 6: c = std::string(load) + "MOV r6, r5\nADDI r6, 1\nMUL r6, r5\nANDI r6, 1\nJNZ r6, "; break;
  case 7:
    c = std::string(loadY) + "MUL r6, r6\nMOV r7, r6\nSHLI r7, 3\nSUB r7, r6\nSUBI r7, 1\n" + load +
        "MUL r5, r5\nEQ r7, r7, r5\nJNZ r7, ";
    break;
  case 8:
    c = std::string(load) + "MUL r5, r5\nADDI r5, 1\nMOVI r7, 2\nUDIV r7, r5\n" + loadY +
        "MUL r6, r6\nADDI r6, 3\nNE r7, r7, r6\nJZ r7, ";
    break;
  default: throw std::invalid_argument("unknown family " + std::to_string(family));
  }
  return c + dead + "\n";
}

namespace {

struct Line {
  std::string labels; // "a: b:" prefix, may be empty
  std::string body;   // instruction or directive without comment
  std::string raw;
};

std::string trim(const std::string &s) {
  size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t\r") - a + 1);
}

std::vector<Line> splitLines(const std::string &src) {
  std::vector<Line> out;
  std::istringstream in(src);
  std::string raw;
  while (std::getline(in, raw)) {
    Line l;
    l.raw = raw;
    std::string s = trim(raw.substr(0, raw.find(';')));
    for (;;) {
      size_t colon = s.find(':');
      if (colon == std::string::npos) break;
      std::string lbl = trim(s.substr(0, colon));
      if (lbl.empty() || lbl.find_first_of(" \t[],") != std::string::npos) break;
      l.labels += lbl + ": ";
      s = trim(s.substr(colon + 1));
    }
    l.body = s;
    out.push_back(l);
  }
  return out;
}

std::string mnemonic(const std::string &body) { return body.substr(0, body.find_first_of(" \t")); }

// Analysis of a source: instruction lines, their addresses and hit counts.
struct SourceInfo {
  std::vector<Line> lines;
  ProgramImage image;
  std::map<int, Addr> addrOfLine; // 0-based line index
  std::map<Addr, size_t> hits;
  int codeEndLine = -1;
  // Instruction lines that start a basic block.
  std::vector<int> blockStarts;
};

SourceInfo study(const std::string &source, const ObfuscateOptions &opt) {
  SourceInfo si;
  si.lines = splitLines(source);
  std::vector<int> lineNos;
  si.image = assemble(source, {opt.width, 0}, &lineNos);
  for (size_t i = 0; i < lineNos.size(); ++i) si.addrOfLine[lineNos[i] - 1] = si.image.instrStarts[i];
  for (size_t i = 0; i < si.lines.size(); ++i)
    if (mnemonic(si.lines[i].body) == ".code_end") si.codeEndLine = int(i);
  if (opt.inputs.empty()) throw std::invalid_argument("obfuscation needs at least one input");
  Trace t = run(si.image, opt.inputs.front());
  if (t.end != TraceEnd::Halt) throw std::runtime_error("source does not halt on its first input");
  for (const auto &s : t.steps) ++si.hits[s.addr];

  bool pendingLabel = false, prevEnds = true;
  for (size_t i = 0; i < si.lines.size(); ++i) {
    const Line &l = si.lines[i];
    if (si.codeEndLine >= 0 && int(i) >= si.codeEndLine) break;
    if (!l.labels.empty()) pendingLabel = true;
    if (!si.addrOfLine.count(int(i))) continue;
    if (pendingLabel || prevEnds) si.blockStarts.push_back(int(i));
    pendingLabel = false;
    auto d = decode(si.image, si.addrOfLine[int(i)]);
    prevEnds = d.ins && (d.ins->endsBlock() || d.ins->isCall());
  }
  return si;
}

// Random instructions without control flow, then a jump, then reserved bytes.
std::string junk(std::mt19937_64 &rng, unsigned width, const std::string &jumpTo) {
  auto R = [&](unsigned n) { return unsigned(rng() % n); };
  Word m = widthMask(width);
  static const char *alu[] = {"ADD", "SUB", "MUL", "AND", "OR", "XOR", "SHL", "SHR", "UDIV"};
  static const char *alui[] = {"ADDI", "SUBI", "MULI", "ANDI", "ORI", "XORI", "SHLI", "SHRI"};
  static const char *cmp[] = {"EQ", "NE", "ULT", "UGE", "SLT", "SGE"};
  auto reg = [&] { return "r" + std::to_string(R(8)); };
  std::ostringstream s;
  unsigned n = 10 + R(7);
  for (unsigned i = 0; i < n; ++i) {
    switch (R(7)) {
    case 0: s << "MOVI " << reg() << ", " << (rng() & m) << "\n"; break;
    case 1: s << alu[R(9)] << " " << reg() << ", " << reg() << "\n"; break;
    case 2: s << alui[R(8)] << " " << reg() << ", " << (rng() & m) << "\n"; break;
    case 3: s << cmp[R(6)] << " " << reg() << ", " << reg() << ", " << reg() << "\n"; break;
    case 4: s << "LOAD " << reg() << ", [" << reg() << "+" << R(64) << "]\n"; break;
    case 5: s << "STORE [" << reg() << "+" << R(64) << "], " << reg() << "\n"; break;
    default: s << (R(2) ? "PUSH " : "POP ") << reg() << "\n"; break;
    }
  }
  s << "JMP " << jumpTo << "\n.byte ";
  unsigned nb = 1 + R(3);
  for (unsigned i = 0; i < nb; ++i) s << (i ? ", " : "") << 0xf0 + R(16);
  s << "\n";
  return s.str();
}

std::string join(const std::vector<std::string> &parts) {
  std::string out;
  for (const auto &p : parts) out += p;
  return out;
}

Addr labelAddr(const ProgramImage &img, const std::string &name) {
  auto it = img.labels.find(name);
  if (it == img.labels.end()) throw std::logic_error("missing generated label " + name);
  return it->second;
}

// Picks `count` block starts, preferring rarely executed ones.
std::vector<int> choose(const SourceInfo &si, const std::vector<int> &cands, unsigned count,
                        size_t maxHits, std::mt19937_64 &rng) {
  std::vector<int> cold, hot;
  for (int l : cands) (si.hits.at(si.addrOfLine.at(l)) <= maxHits ? cold : hot).push_back(l);
  std::shuffle(cold.begin(), cold.end(), rng);
  std::shuffle(hot.begin(), hot.end(), rng);
  cold.insert(cold.end(), hot.begin(), hot.end());
  if (cold.size() < count) throw std::runtime_error("not enough insertion points");
  cold.resize(count);
  std::sort(cold.begin(), cold.end());
  return cold;
}

} // namespace

Obfuscated injectOpaque(const std::string &source, unsigned family, unsigned count, uint64_t seed,
                        const ObfuscateOptions &opt) {
  familyFormula(family);
  if (count == 0) return {source, assemble(source, {opt.width, 0}), {}};
  SourceInfo si = study(source, opt);
  std::vector<int> cands;
  for (int l : si.blockStarts)
    if (si.hits.count(si.addrOfLine.at(l))) cands.push_back(l);
  std::mt19937_64 rng(seed);
  std::vector<int> sites = choose(si, cands, count, opt.maxHits, rng);

  std::vector<std::string> out;
  for (const auto &l : si.lines) out.push_back(l.raw + "\n");
  std::string junkBlocks;
  for (unsigned n = 0; n < sites.size(); ++n) {
    std::string p = "__o" + std::to_string(n) + "_";
    const Line &l = si.lines[sites[n]];
    std::string code = familyCode(family, p + "junk");
    // The conditional jump is the last line of the family code.
    size_t lastNl = code.rfind('\n', code.size() - 2);
    code.insert(lastNl == std::string::npos ? 0 : lastNl + 1, p + "jump: ");
    out[sites[n]] = l.labels + "\n" + code + p + "cont: " + l.body + "\n";
    std::string back = p + "cont";
    if (sites.size() > 1 && rng() % 2) {
      unsigned other = (n + 1 + rng() % (sites.size() - 1)) % sites.size();
      back = "__o" + std::to_string(other) + "_junk";
    }
    junkBlocks += p + "junk:\n" + junk(rng, opt.width, back) + p + "junk_end:\n";
  }
  if (si.codeEndLine >= 0) out[si.codeEndLine] = junkBlocks + out[si.codeEndLine];
  else out.push_back(junkBlocks);

  Obfuscated r;
  r.source = join(out);
  r.image = assemble(r.source, {opt.width, 0});
  for (unsigned n = 0; n < sites.size(); ++n) {
    std::string p = "__o" + std::to_string(n) + "_";
    ObfuscationRecord rec;
    rec.kind = RecordKind::OP;
    rec.family = family;
    rec.site = labelAddr(r.image, p + "jump");
    rec.deadLo = labelAddr(r.image, p + "junk");
    rec.deadHi = labelAddr(r.image, p + "junk_end");
    rec.seed = seed;
    r.records.push_back(rec);
  }
  return r;
}

Obfuscated injectTampering(const std::string &source, TamperScheme scheme, unsigned count,
                           uint64_t seed, const ObfuscateOptions &opt) {
  if (count == 0) return {source, assemble(source, {opt.width, 0}), {}};
  SourceInfo si = study(source, opt);
  std::vector<int> cands;
  for (const auto &[line, addr] : si.addrOfLine) {
    if (si.codeEndLine >= 0 && line >= si.codeEndLine) continue;
    if (mnemonic(si.lines[line].body) == "JMP" && si.hits.count(addr)) cands.push_back(line);
  }
  if (cands.empty()) throw std::runtime_error("no rewritable site");
  std::mt19937_64 rng(seed);
  std::vector<int> sites = choose(si, cands, std::min<unsigned>(count, cands.size()), SIZE_MAX, rng);

  std::vector<std::string> out;
  for (const auto &l : si.lines) out.push_back(l.raw + "\n");
  std::string tail;
  for (unsigned n = 0; n < sites.size(); ++n) {
    std::string p = "__t" + std::to_string(n) + "_";
    const Line &l = si.lines[sites[n]];
    std::string target = trim(l.body.substr(3));
    std::string code = l.labels + "\n" + p + "push: PUSHI " + target + "\n";
    if (scheme == TamperScheme::PUSH_CALL_RET_RET) {
      code += "CALL " + p + "g\n";
      tail += p + "g: RET\n";
    }
    code += p + "ret: RET\n" + p + "dead:\n" + junk(rng, opt.width, target) + p + "dead_end:\n";
    out[sites[n]] = code;
  }
  if (si.codeEndLine >= 0) out[si.codeEndLine] = tail + out[si.codeEndLine];
  else out.push_back(tail);

  Obfuscated r;
  r.source = join(out);
  r.image = assemble(r.source, {opt.width, 0});
  for (unsigned n = 0; n < sites.size(); ++n) {
    std::string p = "__t" + std::to_string(n) + "_";
    ObfuscationRecord rec;
    rec.kind = RecordKind::TAMPER;
    rec.scheme = scheme;
    rec.site = labelAddr(r.image, p + "ret");
    auto push = decode(r.image, labelAddr(r.image, p + "push"));
    rec.target = push.ins->imm;
    rec.deadLo = labelAddr(r.image, p + "dead");
    rec.deadHi = labelAddr(r.image, p + "dead_end");
    rec.seed = seed;
    r.records.push_back(rec);
  }
  return r;
}

std::vector<std::pair<Addr, Addr>> deadIntervals(const std::vector<ObfuscationRecord> &recs) {
  std::vector<std::pair<Addr, Addr>> out;
  for (const auto &r : recs)
    if (r.deadHi > r.deadLo) out.emplace_back(r.deadLo, r.deadHi);
  return out;
}

void writeTruth(const std::vector<ObfuscationRecord> &recs, unsigned w, std::ostream &os) {
  for (const auto &r : recs) {
    if (r.kind == RecordKind::OP)
      os << "OP " << r.family << ' ' << hexWord(r.site, w);
    else
      os << "TAMPER " << schemeName(r.scheme) << ' ' << hexWord(r.site, w) << ' ' << hexWord(r.target, w);
    os << ' ' << hexWord(r.deadLo, w) << ' ' << hexWord(r.deadHi, w) << '\n';
  }
}

std::vector<ObfuscationRecord> readTruth(std::istream &is) {
  std::vector<ObfuscationRecord> out;
  std::string line;
  auto hex = [](const std::string &s) { return Addr(std::stoull(s, nullptr, 16)); };
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string kind;
    if (!(ls >> kind) || kind[0] == '#') continue;
    ObfuscationRecord r;
    std::string a, b, c, d;
    if (kind == "OP") {
      r.kind = RecordKind::OP;
      if (!(ls >> r.family >> a >> b >> c)) throw std::runtime_error("bad truth line: " + line);
      r.site = hex(a);
      r.deadLo = hex(b);
      r.deadHi = hex(c);
    } else if (kind == "TAMPER") {
      r.kind = RecordKind::TAMPER;
      std::string sch;
      if (!(ls >> sch >> a >> b >> c >> d)) throw std::runtime_error("bad truth line: " + line);
      if (sch == "PUSH_RET") r.scheme = TamperScheme::PUSH_RET;
      else if (sch == "PUSH_CALL_RET_RET") r.scheme = TamperScheme::PUSH_CALL_RET_RET;
      else throw std::runtime_error("bad scheme: " + sch);
      r.site = hex(a);
      r.target = hex(b);
      r.deadLo = hex(c);
      r.deadHi = hex(d);
    } else {
      throw std::runtime_error("bad truth line: " + line);
    }
    out.push_back(r);
  }
  return out;
}

void writeInputs(const std::vector<Inputs> &in, const std::vector<unsigned> &outputs, unsigned w,
                 std::ostream &os) {
  os << "# outputs";
  for (unsigned r : outputs) os << ' ' << regName(r);
  os << '\n';
  for (const auto &i : in) {
    bool first = true;
    auto sep = [&] { os << (first ? "" : " "); first = false; };
    for (const auto &[r, v] : i.regs) { sep(); os << regName(r) << '=' << hexWord(v, w); }
    for (const auto &[g, v] : i.globals) { sep(); os << g << '=' << hexWord(v, w); }
    for (const auto &[a, v] : i.words) { sep(); os << '@' << hexWord(a, w) << '=' << hexWord(v, w); }
    os << '\n';
  }
}

std::vector<Inputs> readInputs(std::istream &is, std::vector<unsigned> *outputs) {
  std::vector<Inputs> out;
  std::string line;
  while (std::getline(is, line)) {
    std::istringstream ls(line);
    std::string tok;
    if (line.rfind("# outputs", 0) == 0) {
      ls >> tok >> tok;
      while (ls >> tok) {
        auto r = parseReg(tok);
        if (!r) throw std::runtime_error("bad output register " + tok);
        if (outputs) outputs->push_back(*r);
      }
      continue;
    }
    if (line.empty() || line[0] == '#') continue;
    Inputs in;
    while (ls >> tok) {
      auto eq = tok.find('=');
      if (eq == std::string::npos) throw std::runtime_error("bad input token " + tok);
      std::string k = tok.substr(0, eq);
      Word v = std::stoull(tok.substr(eq + 1), nullptr, 16);
      if (k[0] == '@') in.words[std::stoull(k.substr(1), nullptr, 16)] = v;
      else if (auto r = parseReg(k)) in.regs[*r] = v;
      else in.globals[k] = v;
    }
    out.push_back(in);
  }
  return out;
}

namespace {

uint64_t mixSeed(uint64_t a, uint64_t b) {
  uint64_t z = a * 0x9e3779b97f4a7c15ull + b + 0x632be59bd9b4e019ull;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

} // namespace

std::vector<CorpusSample> buildCorpus(const std::vector<BaseProgram> &programs,
                                      const CorpusConfig &cfg) {
  std::vector<CorpusSample> out;
  for (size_t pi = 0; pi < programs.size(); ++pi) {
    const BaseProgram &bp = programs[pi];
    CorpusSample proto;
    proto.program = bp.name;
    proto.baseSource = bp.source(cfg.width);
    proto.inputs = canonicalInputs(bp, cfg.width, cfg.inputsPerSample);
    proto.outputs = bp.outputs;
    ObfuscateOptions opt{cfg.width, proto.inputs};
    for (unsigned s = 0; s < cfg.seeds; ++s) {
      for (unsigned fam : cfg.families) {
        CorpusSample c = proto;
        c.kind = RecordKind::OP;
        c.family = fam;
        c.seed = mixSeed(mixSeed(cfg.baseSeed, pi * 100 + fam), s);
        c.name = bp.name + "_f" + std::to_string(fam) + "_s" + std::to_string(s);
        c.obf = injectOpaque(c.baseSource, fam, cfg.opCount, c.seed, opt);
        out.push_back(std::move(c));
      }
      for (TamperScheme sch : cfg.schemes) {
        CorpusSample c = proto;
        c.kind = RecordKind::TAMPER;
        c.scheme = sch;
        c.seed = mixSeed(mixSeed(cfg.baseSeed, pi * 100 + 50 + unsigned(sch)), s);
        c.name = bp.name + (sch == TamperScheme::PUSH_RET ? "_pr" : "_pcrr") + "_s" + std::to_string(s);
        c.obf = injectTampering(c.baseSource, sch, cfg.tamperCount, c.seed, opt);
        out.push_back(std::move(c));
      }
    }
  }
  return out;
}

namespace fs = std::filesystem;

void writeCorpus(const std::vector<CorpusSample> &corpus, const std::string &dir) {
  fs::create_directories(dir);
  std::ofstream index(fs::path(dir) / "index");
  for (const auto &c : corpus) {
    fs::path base = fs::path(dir) / c.name;
    unsigned w = c.obf.image.width;
    writeImage(c.obf.image, base.string() + ".img");
    std::ofstream(base.string() + ".s") << c.obf.source;
    std::ofstream(base.string() + ".base.s") << c.baseSource;
    std::ofstream truth(base.string() + ".truth");
    writeTruth(c.obf.records, w, truth);
    std::ofstream inputs(base.string() + ".inputs");
    writeInputs(c.inputs, c.outputs, w, inputs);
    index << c.name << ' ' << c.program << ' ';
    if (c.kind == RecordKind::OP) index << "OP " << c.family;
    else index << "TAMPER " << schemeName(c.scheme);
    index << ' ' << c.seed << '\n';
  }
  if (!index) throw std::runtime_error("cannot write corpus index in " + dir);
}

std::vector<CorpusSample> readCorpus(const std::string &dir) {
  std::ifstream index(fs::path(dir) / "index");
  if (!index) throw std::runtime_error("no corpus index in " + dir);
  std::vector<CorpusSample> out;
  std::string line;
  auto slurp = [](const std::string &p) {
    std::ifstream f(p);
    if (!f) throw std::runtime_error("cannot read " + p);
    std::ostringstream s;
    s << f.rdbuf();
    return s.str();
  };
  while (std::getline(index, line)) {
    std::istringstream ls(line);
    CorpusSample c;
    std::string kind, tag;
    if (!(ls >> c.name >> c.program >> kind >> tag >> c.seed)) continue;
    if (kind == "OP") {
      c.kind = RecordKind::OP;
      c.family = std::stoul(tag);
    } else {
      c.kind = RecordKind::TAMPER;
      c.scheme = tag == "PUSH_RET" ? TamperScheme::PUSH_RET : TamperScheme::PUSH_CALL_RET_RET;
    }
    std::string base = (fs::path(dir) / c.name).string();
    c.obf.image = readImage(base + ".img");
    c.obf.source = slurp(base + ".s");
    c.baseSource = slurp(base + ".base.s");
    std::istringstream truth(slurp(base + ".truth"));
    c.obf.records = readTruth(truth);
    std::istringstream inputs(slurp(base + ".inputs"));
    c.inputs = readInputs(inputs, &c.outputs);
    out.push_back(std::move(c));
  }
  return out;
}

ProgramImage aspackDecoy(unsigned width) {
  return assemble("_start: MOVI r1, 0\n"
                  "patch: MOVI r0, 0\n"
                  "decoy: JZ r0, first\n"
                  "HALT\n"
                  "first: MOVI r2, patch+2\n"
                  "MOVI r3, 1\n"
                  "store: STORE [r2+0], r3\n"
                  "JMP patch\n",
                  {width, 0});
}

ProgramImage acprotectTamper(unsigned width) {
  return assemble("_start: CALL f\n"
                  ".byte 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff, 0xff\n"
                  "target: HALT\n"
                  "f: LOAD r1, [sp+0]\n"
                  "ADDI r1, 9\n"
                  "STORE [sp+0], r1\n"
                  "ret: RET\n",
                  {width, 0});
}

} // namespace bbdse
