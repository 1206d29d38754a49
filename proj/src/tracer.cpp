#include "bbdse/tracer.hpp"

#include <fstream>
#include <sstream>

namespace bbdse {

uint8_t Memory::get(Addr a) const {
  auto it = pages_.find(a >> kPageBits);
  if (it == pages_.end())
    return 0;
  return (*it->second)[a & ((1u << kPageBits) - 1)];
}

void Memory::set(Addr a, uint8_t v) {
  auto &p = pages_[a >> kPageBits];
  if (!p)
    p = std::make_shared<std::array<uint8_t, 1u << kPageBits>>();
  else if (p.use_count() > 1)
    p = std::make_shared<std::array<uint8_t, 1u << kPageBits>>(*p);
  (*p)[a & ((1u << kPageBits) - 1)] = v;
}

Word Memory::load(Addr a, unsigned nbytes) const {
  Word v = 0;
  for (unsigned i = 0; i < nbytes; ++i)
    v |= Word(get(a + i)) << (8 * i);
  return v;
}

void Memory::store(Addr a, Word v, unsigned nbytes) {
  for (unsigned i = 0; i < nbytes; ++i)
    set(a + i, static_cast<uint8_t>(v >> (8 * i)));
}

namespace {

Word aluOp(Opcode op, Word a, Word b, unsigned w) {
  Word m = widthMask(w);
  switch (op) {
  case Opcode::ADD: case Opcode::ADDI: return (a + b) & m;
  case Opcode::SUB: case Opcode::SUBI: return (a - b) & m;
  case Opcode::MUL: case Opcode::MULI: return (a * b) & m;
  case Opcode::UDIV: return b == 0 ? m : (a / b) & m;
  case Opcode::AND: case Opcode::ANDI: return a & b;
  case Opcode::OR: case Opcode::ORI: return a | b;
  case Opcode::XOR: case Opcode::XORI: return a ^ b;
  case Opcode::SHL: case Opcode::SHLI: return b >= w ? 0 : (a << b) & m;
  case Opcode::SHR: case Opcode::SHRI: return b >= w ? 0 : a >> b;
  default: return 0;
  }
}

int64_t toSigned(Word v, unsigned w) {
  Word sign = Word(1) << (w - 1);
  return (v & sign) ? static_cast<int64_t>(v | ~widthMask(w)) : static_cast<int64_t>(v);
}

bool cmpOp(Opcode op, Word a, Word b, unsigned w) {
  switch (op) {
  case Opcode::EQ: return a == b;
  case Opcode::NE: return a != b;
  case Opcode::ULT: return a < b;
  case Opcode::UGE: return a >= b;
  case Opcode::SLT: return toSigned(a, w) < toSigned(b, w);
  case Opcode::SGE: return toSigned(a, w) >= toSigned(b, w);
  default: return false;
  }
}

} // namespace

Trace run(const ProgramImage &image, const Inputs &inputs, const RunConfig &cfg) {
  return run(std::make_shared<const ProgramImage>(image), inputs, cfg);
}

Trace run(std::shared_ptr<const ProgramImage> image, const Inputs &inputs, const RunConfig &cfg) {
  const ProgramImage &img = *image;
  const unsigned w = img.width;
  const unsigned nb = w / 8;
  const Word m = img.mask();

  Trace t;
  t.program = image;
  MachineState st;
  for (size_t i = 0; i < img.bytes.size(); ++i)
    st.mem.set(img.base + i, img.bytes[i]);
  st.regs[kSP] = cfg.spInit & m;
  for (auto &[r, v] : inputs.regs)
    if (r < kNumRegs)
      st.regs[r] = v & m;
  for (auto &[name, v] : inputs.globals) {
    auto it = img.globals.find(name);
    if (it == img.globals.end())
      throw std::invalid_argument("unknown global " + name);
    t.initialWords[it->second] = v & m;
  }
  for (auto &[a, v] : inputs.words)
    t.initialWords[a] = v & m;
  for (auto &[a, v] : t.initialWords)
    st.mem.store(a, v, nb);
  st.pc = img.entry;
  t.initialRegs = st.regs;

  auto fault = [&](const std::string &why) {
    t.end = TraceEnd::Fault;
    t.faultReason = why;
  };
  auto inRange = [&](Addr a) { return a + nb - 1 <= m; };

  t.end = TraceEnd::Limit;
  unsigned pendingBump = 0;
  while (t.steps.size() < cfg.maxSteps) {
    st.layer += pendingBump;
    pendingBump = 0;
    if (!img.contains(st.pc)) {
      fault("pc outside image at " + hexWord(st.pc, w));
      break;
    }
    uint8_t buf[16];
    size_t avail = std::min<size_t>(sizeof buf, img.base + img.bytes.size() - st.pc);
    for (size_t i = 0; i < avail; ++i)
      buf[i] = st.mem.get(st.pc + i);
    DecodeResult d = decodeBytes(buf, avail, w, st.pc);
    if (!d) {
      fault("decode failure at " + hexWord(st.pc, w) + ": " + d.failure.reason);
      break;
    }
    const Instruction &ins = *d.ins;
    TraceStep s;
    s.index = t.steps.size();
    s.addr = st.pc;
    s.layer = st.layer;
    s.bytes.assign(buf, buf + ins.length);
    s.ins = ins;
    s.regsBefore = st.regs;
    Addr next = (st.pc + ins.length) & m;
    Addr pc = next;
    auto &R = st.regs;
    bool halt = false;
    bool bad = false;
    std::string badWhy;

    switch (ins.op) {
    case Opcode::HALT:
      halt = true;
      break;
    case Opcode::MOVI:
      R[ins.r[0]] = ins.imm & m;
      break;
    case Opcode::MOV:
      R[ins.r[0]] = R[ins.r[1]];
      break;
    case Opcode::ADD: case Opcode::SUB: case Opcode::MUL: case Opcode::UDIV:
    case Opcode::AND: case Opcode::OR: case Opcode::XOR: case Opcode::SHL: case Opcode::SHR:
      R[ins.r[0]] = aluOp(ins.op, R[ins.r[0]], R[ins.r[1]], w);
      break;
    case Opcode::ADDI: case Opcode::SUBI: case Opcode::MULI: case Opcode::ANDI:
    case Opcode::ORI: case Opcode::XORI: case Opcode::SHLI: case Opcode::SHRI:
      R[ins.r[0]] = aluOp(ins.op, R[ins.r[0]], ins.imm, w);
      break;
    case Opcode::EQ: case Opcode::NE: case Opcode::ULT:
    case Opcode::UGE: case Opcode::SLT: case Opcode::SGE:
      R[ins.r[0]] = cmpOp(ins.op, R[ins.r[1]], R[ins.r[2]], w) ? 1 : 0;
      break;
    case Opcode::LOAD: {
      Addr ea = (R[ins.r[1]] + ins.imm) & m;
      if (!inRange(ea)) { bad = true; badWhy = "load out of range"; break; }
      s.effectiveAddrs.push_back(ea);
      s.memValue = st.mem.load(ea, nb);
      R[ins.r[0]] = s.memValue;
      break;
    }
    case Opcode::STORE: {
      Addr ea = (R[ins.r[0]] + ins.imm) & m;
      if (!inRange(ea)) { bad = true; badWhy = "store out of range"; break; }
      s.effectiveAddrs.push_back(ea);
      s.memValue = R[ins.r[1]];
      st.mem.store(ea, s.memValue, nb);
      if (ea < img.codeHi && ea + nb > img.codeLo) {
        s.writtenValue = s.memValue;
        pendingBump = 1;
      }
      break;
    }
    case Opcode::PUSH: case Opcode::PUSHI: case Opcode::CALL: case Opcode::CALLR: {
      Word v = ins.op == Opcode::PUSH ? R[ins.r[0]]
               : ins.op == Opcode::PUSHI ? (ins.imm & m)
                                         : next;
      Addr target = ins.op == Opcode::CALL ? ins.imm & m : R[ins.r[0]];
      Addr ea = (R[kSP] - nb) & m;
      if (!inRange(ea)) { bad = true; badWhy = "stack out of range"; break; }
      R[kSP] = ea;
      s.effectiveAddrs.push_back(ea);
      s.memValue = v;
      st.mem.store(ea, v, nb);
      if (ins.isCall()) {
        pc = target;
        if (ins.op == Opcode::CALLR)
          s.jumpTarget = target;
      }
      break;
    }
    case Opcode::POP: case Opcode::RET: {
      Addr ea = R[kSP];
      if (!inRange(ea)) { bad = true; badWhy = "stack out of range"; break; }
      s.effectiveAddrs.push_back(ea);
      s.memValue = st.mem.load(ea, nb);
      R[kSP] = (ea + nb) & m;
      if (ins.op == Opcode::POP) {
        R[ins.r[0]] = s.memValue;
      } else {
        pc = s.memValue;
        s.jumpTarget = pc;
      }
      break;
    }
    case Opcode::JMP:
      pc = ins.imm & m;
      break;
    case Opcode::JMPR:
      pc = R[ins.r[0]];
      s.jumpTarget = pc;
      break;
    case Opcode::JZ: case Opcode::JNZ: {
      bool zero = R[ins.r[0]] == 0;
      bool taken = ins.op == Opcode::JZ ? zero : !zero;
      s.branchTaken = taken;
      if (taken)
        pc = ins.imm & m;
      break;
    }
    }
    if (bad) {
      st.regs = s.regsBefore;
      fault(badWhy + " at " + hexWord(s.addr, w));
      break;
    }
    t.steps.push_back(std::move(s));
    st.pc = pc;
    if (halt) {
      t.end = TraceEnd::Halt;
      break;
    }
  }
  t.finalRegs = st.regs;
  return t;
}

std::map<Addr, Coverage> branchCoverage(const Trace &trace) {
  std::map<Addr, Coverage> cov;
  for (const auto &s : trace.steps) {
    if (!s.branchTaken)
      continue;
    auto &c = cov[s.addr];
    (*s.branchTaken ? c.takenSeen : c.fallthroughSeen) = true;
  }
  return cov;
}

// ---------------------------------------------------------------------------
// Trace files

std::string formatStep(const TraceStep &s, unsigned w) {
  static const char *digits = "0123456789abcdef";
  std::ostringstream os;
  os << s.index << " " << s.layer << " " << hexWord(s.addr, w) << " ";
  for (uint8_t b : s.bytes)
    os << digits[b >> 4] << digits[b & 15];
  os << " " << opcodeInfo(static_cast<uint8_t>(s.ins.op))->name;
  if (!s.effectiveAddrs.empty()) {
    os << " ea=";
    for (size_t i = 0; i < s.effectiveAddrs.size(); ++i)
      os << (i ? "," : "") << hexWord(s.effectiveAddrs[i], w);
  }
  if (s.jumpTarget)
    os << " tgt=" << hexWord(*s.jumpTarget, w);
  if (s.branchTaken)
    os << " br=" << (*s.branchTaken ? 1 : 0);
  if (s.writtenValue)
    os << " wv=" << hexWord(*s.writtenValue, w);
  return os.str();
}

void writeTrace(const Trace &trace, std::ostream &os) {
  unsigned w = trace.width();
  os << "# width " << w << "\n";
  for (unsigned r = 0; r < kNumRegs; ++r)
    os << "# reg " << regName(r) << " " << hexWord(trace.initialRegs[r], w) << "\n";
  for (auto &[a, v] : trace.initialWords)
    os << "# init " << hexWord(a, w) << " " << hexWord(v, w) << "\n";
  os << "# steps " << trace.steps.size() << "\n";
  for (const auto &s : trace.steps)
    os << formatStep(s, w) << "\n";
  const char *end = trace.end == TraceEnd::Halt ? "halt" : trace.end == TraceEnd::Fault ? "fault" : "limit";
  os << "# end " << end << "\n";
}

void writeTraceFile(const Trace &trace, const std::string &path) {
  std::ofstream f(path);
  if (!f)
    throw std::runtime_error("cannot write " + path);
  writeTrace(trace, f);
}

Trace readTrace(std::shared_ptr<const ProgramImage> image, std::istream &is) {
  Inputs in;
  RunConfig cfg;
  size_t nsteps = 0;
  std::vector<std::string> lines;
  std::string line;
  unsigned w = image->width;
  while (std::getline(is, line)) {
    if (line.empty())
      continue;
    if (line[0] != '#') {
      lines.push_back(line);
      continue;
    }
    std::istringstream ls(line.substr(1));
    std::string key;
    ls >> key;
    if (key == "width") {
      ls >> w;
      if (w != image->width)
        throw std::runtime_error("trace width does not match image");
    } else if (key == "reg") {
      std::string r, v;
      ls >> r >> v;
      auto idx = parseReg(r);
      if (!idx)
        throw std::runtime_error("bad register in trace header: " + r);
      in.regs[*idx] = std::stoull(v, nullptr, 16);
    } else if (key == "init") {
      std::string a, v;
      ls >> a >> v;
      in.words[std::stoull(a, nullptr, 16)] = std::stoull(v, nullptr, 16);
    } else if (key == "steps") {
      ls >> nsteps;
    }
  }
  cfg.spInit = in.regs.count(kSP) ? in.regs[kSP] : 0;
  cfg.maxSteps = nsteps;
  Trace t = run(image, in, cfg);
  if (t.steps.size() != lines.size())
    throw std::runtime_error("trace replay length mismatch");
  for (size_t i = 0; i < lines.size(); ++i)
    if (formatStep(t.steps[i], w) != lines[i])
      throw std::runtime_error("trace replay mismatch at step " + std::to_string(i));
  return t;
}

Trace readTraceFile(std::shared_ptr<const ProgramImage> image, const std::string &path) {
  std::ifstream f(path);
  if (!f)
    throw std::runtime_error("cannot read " + path);
  return readTrace(std::move(image), f);
}

} // namespace bbdse
