#include "bbdse/isa.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <sstream>

namespace bbdse {

namespace {

using K = OperandKind;

std::vector<OpcodeInfo> buildTable() {
  std::vector<OpcodeInfo> t = {
      {Opcode::HALT, "HALT", {}},
      {Opcode::MOVI, "MOVI", {K::Reg, K::Imm}},
      {Opcode::MOV, "MOV", {K::Reg, K::Reg}},
      {Opcode::ADD, "ADD", {K::Reg, K::Reg}},
      {Opcode::SUB, "SUB", {K::Reg, K::Reg}},
      {Opcode::MUL, "MUL", {K::Reg, K::Reg}},
      {Opcode::UDIV, "UDIV", {K::Reg, K::Reg}},
      {Opcode::AND, "AND", {K::Reg, K::Reg}},
      {Opcode::OR, "OR", {K::Reg, K::Reg}},
      {Opcode::XOR, "XOR", {K::Reg, K::Reg}},
      {Opcode::SHL, "SHL", {K::Reg, K::Reg}},
      {Opcode::SHR, "SHR", {K::Reg, K::Reg}},
      {Opcode::ADDI, "ADDI", {K::Reg, K::Imm}},
      {Opcode::SUBI, "SUBI", {K::Reg, K::Imm}},
      {Opcode::MULI, "MULI", {K::Reg, K::Imm}},
      {Opcode::ANDI, "ANDI", {K::Reg, K::Imm}},
      {Opcode::ORI, "ORI", {K::Reg, K::Imm}},
      {Opcode::XORI, "XORI", {K::Reg, K::Imm}},
      {Opcode::SHLI, "SHLI", {K::Reg, K::Imm}},
      {Opcode::SHRI, "SHRI", {K::Reg, K::Imm}},
      {Opcode::EQ, "EQ", {K::Reg, K::Reg, K::Reg}},
      {Opcode::NE, "NE", {K::Reg, K::Reg, K::Reg}},
      {Opcode::ULT, "ULT", {K::Reg, K::Reg, K::Reg}},
      {Opcode::UGE, "UGE", {K::Reg, K::Reg, K::Reg}},
      {Opcode::SLT, "SLT", {K::Reg, K::Reg, K::Reg}},
      {Opcode::SGE, "SGE", {K::Reg, K::Reg, K::Reg}},
      // LOAD rd, [rs+off]
      {Opcode::LOAD, "LOAD", {K::Reg, K::Reg, K::Imm}},
      // STORE [rs+off], rs2
      {Opcode::STORE, "STORE", {K::Reg, K::Imm, K::Reg}},
      {Opcode::PUSH, "PUSH", {K::Reg}},
      {Opcode::PUSHI, "PUSHI", {K::Imm}},
      {Opcode::POP, "POP", {K::Reg}},
      {Opcode::JMP, "JMP", {K::Addr}},
      {Opcode::JMPR, "JMPR", {K::Reg}},
      {Opcode::JZ, "JZ", {K::Reg, K::Addr}},
      {Opcode::JNZ, "JNZ", {K::Reg, K::Addr}},
      {Opcode::CALL, "CALL", {K::Addr}},
      {Opcode::CALLR, "CALLR", {K::Reg}},
      {Opcode::RET, "RET", {}},
  };
  return t;
}

const std::vector<OpcodeInfo> &table() {
  static const std::vector<OpcodeInfo> t = buildTable();
  return t;
}

const std::array<const OpcodeInfo *, 256> &byteIndex() {
  static const std::array<const OpcodeInfo *, 256> idx = [] {
    std::array<const OpcodeInfo *, 256> a{};
    for (const auto &i : table())
      a[static_cast<uint8_t>(i.op)] = &i;
    return a;
  }();
  return idx;
}

std::string upper(std::string s) {
  for (auto &c : s)
    c = static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  return s;
}

std::string trim(const std::string &s) {
  size_t b = s.find_first_not_of(" \t\r\n");
  if (b == std::string::npos)
    return "";
  size_t e = s.find_last_not_of(" \t\r\n");
  return s.substr(b, e - b + 1);
}

void putLE(std::vector<uint8_t> &out, Word v, unsigned nbytes) {
  for (unsigned i = 0; i < nbytes; ++i)
    out.push_back(static_cast<uint8_t>(v >> (8 * i)));
}

Word getLE(const uint8_t *p, unsigned nbytes) {
  Word v = 0;
  for (unsigned i = 0; i < nbytes; ++i)
    v |= Word(p[i]) << (8 * i);
  return v;
}

} // namespace

const OpcodeInfo *opcodeInfo(uint8_t byte) { return byteIndex()[byte]; }

const OpcodeInfo *opcodeByName(const std::string &name) {
  std::string u = upper(name);
  for (const auto &i : table())
    if (u == i.name)
      return &i;
  return nullptr;
}

const std::vector<OpcodeInfo> &allOpcodes() { return table(); }

bool Instruction::endsBlock() const {
  switch (op) {
  case Opcode::HALT:
  case Opcode::JMP:
  case Opcode::JMPR:
  case Opcode::JZ:
  case Opcode::JNZ:
  case Opcode::CALL:
  case Opcode::CALLR:
  case Opcode::RET:
    return true;
  default:
    return false;
  }
}

bool Instruction::operator==(const Instruction &o) const {
  return op == o.op && r[0] == o.r[0] && r[1] == o.r[1] && r[2] == o.r[2] && imm == o.imm &&
         length == o.length;
}

std::string regName(unsigned r) { return r == kSP ? "sp" : "r" + std::to_string(r); }

std::optional<unsigned> parseReg(const std::string &s) {
  std::string t = trim(s);
  for (auto &c : t)
    c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (t == "sp")
    return kSP;
  if (t.size() == 2 && t[0] == 'r' && t[1] >= '0' && t[1] <= '7')
    return static_cast<unsigned>(t[1] - '0');
  return std::nullopt;
}

unsigned encodedLength(Opcode op, unsigned w) {
  const OpcodeInfo *info = opcodeInfo(static_cast<uint8_t>(op));
  unsigned len = 1;
  for (auto k : info->operands)
    len += k == K::Reg ? 1 : w / 8;
  return len;
}

std::vector<uint8_t> encode(const Instruction &ins, unsigned w) {
  const OpcodeInfo *info = opcodeInfo(static_cast<uint8_t>(ins.op));
  std::vector<uint8_t> out;
  out.push_back(static_cast<uint8_t>(ins.op));
  unsigned ri = 0;
  for (auto k : info->operands) {
    if (k == K::Reg)
      out.push_back(ins.r[ri++]);
    else
      putLE(out, ins.imm, w / 8);
  }
  return out;
}

std::string hexWord(Word v, unsigned w) {
  static const char *digits = "0123456789abcdef";
  std::string s(w / 4, '0');
  for (unsigned i = 0; i < w / 4; ++i)
    s[w / 4 - 1 - i] = digits[(v >> (4 * i)) & 0xf];
  return s;
}

std::string formatInstruction(const Instruction &ins, unsigned w) {
  const OpcodeInfo *info = opcodeInfo(static_cast<uint8_t>(ins.op));
  std::ostringstream os;
  os << info->name;
  auto imm = [&] { return "0x" + hexWord(ins.imm, w); };
  switch (ins.op) {
  case Opcode::LOAD:
    os << " " << regName(ins.r[0]) << ", [" << regName(ins.r[1]) << "+" << imm() << "]";
    return os.str();
  case Opcode::STORE:
    os << " [" << regName(ins.r[0]) << "+" << imm() << "], " << regName(ins.r[1]);
    return os.str();
  default:
    break;
  }
  unsigned ri = 0;
  bool first = true;
  for (auto k : info->operands) {
    os << (first ? " " : ", ");
    first = false;
    if (k == K::Reg)
      os << regName(ins.r[ri++]);
    else
      os << imm();
  }
  return os.str();
}

std::optional<uint8_t> ProgramImage::byteAt(Addr a) const {
  if (!contains(a))
    return std::nullopt;
  return bytes[a - base];
}

Addr ProgramImage::label(const std::string &name) const {
  auto it = labels.find(name);
  if (it == labels.end())
    throw std::out_of_range("unknown label " + name);
  return it->second;
}

DecodeResult decodeBytes(const uint8_t *data, size_t size, unsigned w, Addr addr) {
  DecodeResult res;
  res.failure.addr = addr;
  if (size == 0) {
    res.failure.reason = "out of image";
    return res;
  }
  const OpcodeInfo *info = opcodeInfo(data[0]);
  if (!info) {
    res.failure.reason = data[0] >= 0xF0 ? "reserved opcode" : "unknown opcode";
    return res;
  }
  Instruction ins;
  ins.op = info->op;
  size_t pos = 1;
  unsigned ri = 0;
  for (auto k : info->operands) {
    if (k == K::Reg) {
      if (pos >= size) {
        res.failure.reason = "truncated operand";
        return res;
      }
      if (data[pos] >= kNumRegs) {
        res.failure.reason = "bad register";
        return res;
      }
      ins.r[ri++] = data[pos++];
    } else {
      if (pos + w / 8 > size) {
        res.failure.reason = "truncated operand";
        return res;
      }
      ins.imm = getLE(data + pos, w / 8);
      pos += w / 8;
    }
  }
  ins.length = static_cast<unsigned>(pos);
  res.ins = ins;
  return res;
}

DecodeResult decode(const ProgramImage &img, Addr addr) {
  if (!img.contains(addr)) {
    DecodeResult r;
    r.failure = {addr, "out of image"};
    return r;
  }
  size_t off = addr - img.base;
  return decodeBytes(img.bytes.data() + off, img.bytes.size() - off, img.width, addr);
}

// ---------------------------------------------------------------------------
// Assembler

namespace {

struct PendingRef {
  size_t offset; // byte offset of the operand in the image
  unsigned nbytes;
  std::string expr;
  int line;
};

struct Assembler {
  std::vector<int> *lines = nullptr;
  AsmOptions opts;
  ProgramImage img;
  std::vector<PendingRef> refs;
  std::vector<std::string> globalNames;
  std::optional<Addr> codeEnd;

  Addr here() const { return opts.base + img.bytes.size(); }

  [[noreturn]] void fail(int line, const std::string &msg) {
    throw AsmError("line " + std::to_string(line) + ": " + msg);
  }

  static bool isNumber(const std::string &s) {
    if (s.empty())
      return false;
    size_t i = (s[0] == '-' || s[0] == '+') ? 1 : 0;
    return i < s.size() && std::isdigit(static_cast<unsigned char>(s[i]));
  }

  // Parses a literal; returns false if it is not numeric.
  bool parseNumber(const std::string &s, int line, Word &out) {
    if (!isNumber(s))
      return false;
    bool neg = s[0] == '-';
    std::string body = (s[0] == '-' || s[0] == '+') ? s.substr(1) : s;
    unsigned long long v;
    try {
      size_t used = 0;
      v = std::stoull(body, &used, 0);
      if (used != body.size())
        fail(line, "bad number '" + s + "'");
    } catch (const std::logic_error &) {
      fail(line, "bad number '" + s + "'");
    }
    unsigned w = opts.width;
    if (neg) {
      if (w < 64 && v > (1ull << (w - 1)))
        fail(line, "immediate out of range: " + s);
      out = (0 - v) & widthMask(w);
    } else {
      if (w < 64 && v > widthMask(w))
        fail(line, "immediate out of range: " + s);
      out = v;
    }
    return true;
  }

  // Evaluates `num`, `label`, `label+num`, `label-num`.
  Word evalExpr(const std::string &raw, int line) {
    std::string e = trim(raw);
    Word v;
    if (parseNumber(e, line, v))
      return v;
    size_t op = e.find_first_of("+-", 1);
    std::string name = trim(e.substr(0, op));
    auto it = img.labels.find(name);
    if (it == img.labels.end())
      fail(line, "unresolved label '" + name + "'");
    Word base = it->second;
    if (op == std::string::npos)
      return base & widthMask(opts.width);
    Word off;
    std::string rest = trim(e.substr(op + 1));
    if (!parseNumber(rest, line, off))
      fail(line, "bad offset in '" + e + "'");
    Word r = e[op] == '+' ? base + off : base - off;
    return r & widthMask(opts.width);
  }

  void emitWord(const std::string &expr, unsigned nbytes, int line) {
    Word v;
    std::string e = trim(expr);
    if (parseNumber(e, line, v)) {
      putLE(img.bytes, v, nbytes);
      return;
    }
    refs.push_back({img.bytes.size(), nbytes, e, line});
    putLE(img.bytes, 0, nbytes);
  }

  static std::vector<std::string> splitOperands(const std::string &s) {
    std::vector<std::string> out;
    std::string cur;
    int depth = 0;
    for (char c : s) {
      if (c == '[')
        ++depth;
      if (c == ']')
        --depth;
      if (c == ',' && depth == 0) {
        out.push_back(trim(cur));
        cur.clear();
      } else {
        cur += c;
      }
    }
    if (!trim(cur).empty())
      out.push_back(trim(cur));
    return out;
  }

  unsigned reg(const std::string &s, int line) {
    auto r = parseReg(s);
    if (!r)
      fail(line, "bad register '" + s + "'");
    return *r;
  }

  // Parses "[rs+off]" into register and offset expression.
  std::pair<unsigned, std::string> memOperand(const std::string &s, int line) {
    std::string t = trim(s);
    if (t.size() < 3 || t.front() != '[' || t.back() != ']')
      fail(line, "bad memory operand '" + s + "'");
    t = trim(t.substr(1, t.size() - 2));
    size_t op = t.find_first_of("+-");
    if (op == std::string::npos)
      return {reg(t, line), "0"};
    std::string off = trim(t.substr(op + 1));
    if (t[op] == '-')
      off = "-" + off;
    return {reg(t.substr(0, op), line), off};
  }

  void instruction(const std::string &mn, const std::string &rest, int line) {
    const OpcodeInfo *info = opcodeByName(mn);
    if (!info)
      fail(line, "unknown mnemonic '" + mn + "'");
    auto ops = splitOperands(rest);
    Addr start = here();
    img.instrStarts.push_back(start);
    if (lines)
      lines->push_back(line);
    img.bytes.push_back(static_cast<uint8_t>(info->op));
    unsigned nb = opts.width / 8;
    if (info->op == Opcode::LOAD) {
      if (ops.size() != 2)
        fail(line, "LOAD expects rd, [rs+off]");
      auto [rs, off] = memOperand(ops[1], line);
      img.bytes.push_back(static_cast<uint8_t>(reg(ops[0], line)));
      img.bytes.push_back(static_cast<uint8_t>(rs));
      emitWord(off, nb, line);
      return;
    }
    if (info->op == Opcode::STORE) {
      if (ops.size() != 2)
        fail(line, "STORE expects [rs+off], rs2");
      auto [rs, off] = memOperand(ops[0], line);
      img.bytes.push_back(static_cast<uint8_t>(rs));
      emitWord(off, nb, line);
      img.bytes.push_back(static_cast<uint8_t>(reg(ops[1], line)));
      return;
    }
    if (ops.size() != info->operands.size())
      fail(line, std::string("wrong operand count for ") + info->name);
    for (size_t i = 0; i < ops.size(); ++i) {
      if (info->operands[i] == K::Reg)
        img.bytes.push_back(static_cast<uint8_t>(reg(ops[i], line)));
      else
        emitWord(ops[i], nb, line);
    }
  }

  void directive(const std::string &name, const std::string &rest, int line) {
    if (name == ".byte") {
      for (auto &e : splitOperands(rest)) {
        Word v;
        if (!parseNumber(e, line, v) || v > 0xff)
          fail(line, "bad byte '" + e + "'");
        img.bytes.push_back(static_cast<uint8_t>(v));
      }
    } else if (name == ".word") {
      for (auto &e : splitOperands(rest))
        emitWord(e, opts.width / 8, line);
    } else if (name == ".zero") {
      Word n;
      if (!parseNumber(trim(rest), line, n))
        fail(line, "bad .zero count");
      img.bytes.insert(img.bytes.end(), n, 0);
    } else if (name == ".global") {
      for (auto &e : splitOperands(rest))
        globalNames.push_back(e);
    } else if (name == ".code_end") {
      codeEnd = here();
    } else if (name == ".entry") {
      refs.push_back({SIZE_MAX, 0, trim(rest), line});
    } else {
      fail(line, "unknown directive " + name);
    }
  }

  ProgramImage run(const std::string &src) {
    img.width = opts.width;
    img.base = opts.base;
    // Labels are resolved in a second pass, so first collect definitions.
    std::istringstream in(src);
    std::string raw;
    int line = 0;
    std::optional<std::string> entryExpr;
    while (std::getline(in, raw)) {
      ++line;
      std::string s = raw.substr(0, raw.find(';'));
      s = trim(s);
      // Peel off any number of labels.
      for (;;) {
        size_t colon = s.find(':');
        if (colon == std::string::npos)
          break;
        std::string lbl = trim(s.substr(0, colon));
        if (lbl.empty() || lbl.find_first_of(" \t[],") != std::string::npos)
          break;
        if (img.labels.count(lbl))
          fail(line, "duplicate label '" + lbl + "'");
        img.labels[lbl] = here();
        s = trim(s.substr(colon + 1));
      }
      if (s.empty())
        continue;
      size_t sp = s.find_first_of(" \t");
      std::string head = s.substr(0, sp);
      std::string rest = sp == std::string::npos ? "" : s.substr(sp + 1);
      if (head[0] == '.')
        directive(head, rest, line);
      else
        instruction(head, rest, line);
      if (opts.width < 64 && here() > widthMask(opts.width) + 1)
        fail(line, "program exceeds address space");
    }
    for (auto &r : refs) {
      Word v = evalExpr(r.expr, r.line);
      if (r.offset == SIZE_MAX) {
        entryExpr = r.expr;
        img.entry = v;
        continue;
      }
      for (unsigned i = 0; i < r.nbytes; ++i)
        img.bytes[r.offset + i] = static_cast<uint8_t>(v >> (8 * i));
    }
    if (!entryExpr)
      img.entry = img.labels.count("_start") ? img.labels["_start"] : opts.base;
    for (auto &g : globalNames) {
      auto it = img.labels.find(g);
      if (it == img.labels.end())
        throw AsmError("global '" + g + "' has no label");
      img.globals[g] = it->second;
    }
    img.codeLo = opts.base;
    img.codeHi = codeEnd ? *codeEnd : here();
    if (img.codeHi == img.codeLo && !img.bytes.empty())
      img.codeHi = here();
    return img;
  }
};

} // namespace

ProgramImage assemble(const std::string &source, const AsmOptions &opts,
                      std::vector<int> *instrLines) {
  if (opts.width != 8 && opts.width != 16 && opts.width != 32)
    throw AsmError("unsupported width " + std::to_string(opts.width));
  Assembler a;
  a.opts = opts;
  a.lines = instrLines;
  return a.run(source);
}

// ---------------------------------------------------------------------------
// Image files

std::vector<uint8_t> serializeImage(const ProgramImage &img) {
  std::vector<uint8_t> out = {'B', 'B', 'D', 'L'};
  putLE(out, img.base, 4);
  putLE(out, img.entry, 4);
  putLE(out, (img.bytes.size() & 0xffffff) | (Word(img.width) << 24), 4);
  out.insert(out.end(), img.bytes.begin(), img.bytes.end());
  std::ostringstream tr;
  tr << "code " << img.codeLo << " " << img.codeHi << "\n";
  for (auto &[n, a] : img.globals)
    tr << "global " << n << " " << a << "\n";
  for (auto &[n, a] : img.labels)
    tr << "label " << n << " " << a << "\n";
  tr << "starts";
  for (Addr a : img.instrStarts)
    tr << " " << a;
  tr << "\n";
  std::string t = tr.str();
  out.insert(out.end(), t.begin(), t.end());
  return out;
}

ProgramImage deserializeImage(const std::vector<uint8_t> &data) {
  if (data.size() < 16 || std::string(data.begin(), data.begin() + 4) != "BBDL")
    throw std::runtime_error("not a BBDL image");
  ProgramImage img;
  img.base = getLE(&data[4], 4);
  img.entry = getLE(&data[8], 4);
  Word lw = getLE(&data[12], 4);
  size_t len = lw & 0xffffff;
  img.width = static_cast<unsigned>(lw >> 24);
  if (img.width != 8 && img.width != 16 && img.width != 32)
    throw std::runtime_error("bad image width");
  if (data.size() < 16 + len)
    throw std::runtime_error("truncated image");
  img.bytes.assign(data.begin() + 16, data.begin() + 16 + static_cast<long>(len));
  img.codeLo = img.base;
  img.codeHi = img.base + len;
  std::istringstream tr(std::string(data.begin() + 16 + static_cast<long>(len), data.end()));
  std::string line;
  while (std::getline(tr, line)) {
    std::istringstream ls(line);
    std::string kind;
    ls >> kind;
    if (kind == "code") {
      ls >> img.codeLo >> img.codeHi;
    } else if (kind == "global" || kind == "label") {
      std::string n;
      Addr a;
      ls >> n >> a;
      (kind == "global" ? img.globals : img.labels)[n] = a;
    } else if (kind == "starts") {
      Addr a;
      while (ls >> a)
        img.instrStarts.push_back(a);
    }
  }
  return img;
}

void writeImage(const ProgramImage &img, const std::string &path) {
  auto data = serializeImage(img);
  std::ofstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot write " + path);
  f.write(reinterpret_cast<const char *>(data.data()), static_cast<std::streamsize>(data.size()));
}

ProgramImage readImage(const std::string &path) {
  std::ifstream f(path, std::ios::binary);
  if (!f)
    throw std::runtime_error("cannot read " + path);
  std::vector<uint8_t> data((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return deserializeImage(data);
}

} // namespace bbdse
