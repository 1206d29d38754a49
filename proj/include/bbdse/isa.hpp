// Toy instruction set: encoding, decoding, program images and the assembler.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace bbdse {

using Word = uint64_t;
using Addr = uint64_t;

constexpr unsigned kNumRegs = 9;
constexpr unsigned kSP = 8;

inline Word widthMask(unsigned w) { return w >= 64 ? ~Word(0) : ((Word(1) << w) - 1); }

enum class Opcode : uint8_t {
  HALT = 0x00,
  MOVI = 0x01,
  MOV = 0x02,
  ADD = 0x10, SUB, MUL, UDIV, AND, OR, XOR, SHL, SHR,
  ADDI = 0x20, SUBI, MULI, ANDI, ORI, XORI, SHLI, SHRI,
  EQ = 0x30, NE, ULT, UGE, SLT, SGE,
  LOAD = 0x40, STORE, PUSH, PUSHI, POP,
  JMP = 0x50, JMPR, JZ, JNZ, CALL, CALLR, RET,
};

// Operand kinds, in encoding order.
enum class OperandKind : uint8_t { Reg, Imm, Addr };

struct OpcodeInfo {
  Opcode op;
  const char *name;
  std::vector<OperandKind> operands;
};

const OpcodeInfo *opcodeInfo(uint8_t byte);
const OpcodeInfo *opcodeByName(const std::string &name);
const std::vector<OpcodeInfo> &allOpcodes();

struct Instruction {
  Opcode op = Opcode::HALT;
  // Register operands in encoding order; unused slots are 0.
  uint8_t r[3] = {0, 0, 0};
  // The single immediate or address operand, if the format has one.
  Word imm = 0;
  unsigned length = 1;

  bool isCondJump() const { return op == Opcode::JZ || op == Opcode::JNZ; }
  bool isIndirect() const { return op == Opcode::JMPR || op == Opcode::CALLR; }
  bool isCall() const { return op == Opcode::CALL || op == Opcode::CALLR; }
  bool endsBlock() const;
  bool operator==(const Instruction &o) const;
};

std::string regName(unsigned r);
std::optional<unsigned> parseReg(const std::string &s);

// Instruction size in bytes for word width w.
unsigned encodedLength(Opcode op, unsigned w);
std::vector<uint8_t> encode(const Instruction &ins, unsigned w);
std::string formatInstruction(const Instruction &ins, unsigned w);

struct DecodeFailure {
  Addr addr;
  std::string reason;
};

struct ProgramImage {
  unsigned width = 32;
  Addr base = 0;
  Addr entry = 0;
  std::vector<uint8_t> bytes;
  // Half-open code interval [codeLo, codeHi).
  Addr codeLo = 0, codeHi = 0;
  std::map<std::string, Addr> globals;
  std::map<std::string, Addr> labels;
  // Start addresses of instructions the assembler emitted (not .byte/.word data).
  std::vector<Addr> instrStarts;

  Word mask() const { return widthMask(width); }
  unsigned wordBytes() const { return width / 8; }
  bool contains(Addr a) const { return a >= base && a < base + bytes.size(); }
  bool inCode(Addr a) const { return a >= codeLo && a < codeHi; }
  std::optional<uint8_t> byteAt(Addr a) const;
  Addr label(const std::string &name) const;
};

// Decodes the instruction at addr. Reserved/unknown opcodes, bad register
// numbers and truncated operands produce a DecodeFailure value.
struct DecodeResult {
  std::optional<Instruction> ins;
  DecodeFailure failure;
  explicit operator bool() const { return ins.has_value(); }
};
DecodeResult decode(const ProgramImage &img, Addr addr);
// Decodes from a raw byte buffer starting at offset.
DecodeResult decodeBytes(const uint8_t *data, size_t size, unsigned w, Addr addr = 0);

struct AsmError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct AsmOptions {
  unsigned width = 32;
  Addr base = 0;
};

// Assembles the textual format: one instruction per line, `label:` prefixes,
// `.byte`/`.word` directives, `.global name` (label is also a global),
// `.code_end` marks the end of the code region, `;` starts a comment.
// When instrLines is given, receives the 1-based source line of every
// emitted instruction, parallel to instrStarts.
ProgramImage assemble(const std::string &source, const AsmOptions &opts = {},
                      std::vector<int> *instrLines = nullptr);

// Binary image file: 16-byte header (magic "BBDL", base u32, entry u32,
// u32 length | W<<24) followed by the raw bytes, then a text trailer with
// code region, globals, labels and instruction starts.
void writeImage(const ProgramImage &img, const std::string &path);
ProgramImage readImage(const std::string &path);
std::vector<uint8_t> serializeImage(const ProgramImage &img);
ProgramImage deserializeImage(const std::vector<uint8_t> &data);

std::string hexWord(Word v, unsigned w);

} // namespace bbdse
