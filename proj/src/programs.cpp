#include "bbdse/obfuscate.hpp"

#include <random>
#include <regex>
#include <sstream>
#include <stdexcept>

namespace bbdse {

namespace {

// Replaces {N}, {2N}, ... by multiples of the word size.
std::string words(const std::string &src, unsigned width) {
  static const std::regex re(R"(\{(\d*)N\})");
  std::string out;
  auto it = std::sregex_iterator(src.begin(), src.end(), re);
  size_t last = 0;
  for (; it != std::sregex_iterator(); ++it) {
    out += src.substr(last, it->position() - last);
    unsigned k = (*it)[1].length() ? std::stoul((*it)[1].str()) : 1;
    out += std::to_string(k * (width / 8));
    last = it->position() + it->length();
  }
  return out + src.substr(last);
}

const char *kGlobals = "gx: .word 0\n"
                       "gy: .word 0\n"
                       ".global gx\n"
                       ".global gy\n";

std::string simpleIf(unsigned w) {
  return words(R"(_start:
    CALL main
    HALT
main:
    MOV r2, r0
    ANDI r2, 15
    MOVI r3, 8
    ULT r4, r2, r3
    JZ r4, big
    ADDI r0, 3
    MUL r0, r2
    JMP join
big:
    SUBI r0, 5
    XOR r0, r1
    JMP join
join:
    MOV r3, r1
    ANDI r3, 1
    JNZ r3, odd
    SHRI r1, 1
    JMP done
odd:
    MULI r1, 3
    ADDI r1, 1
    JMP done
done:
    ADD r0, r1
    MOV r2, r0
    ANDI r2, 64
    JZ r2, out
    XORI r0, 85
out:
    RET
.code_end
)", w) + kGlobals;
}

std::string bubbleSort(unsigned w) {
  return words(R"(_start:
    CALL fill
    CALL sort
    CALL summarize
    HALT
fill:
    MOVI r4, arr
    MOVI r3, 8
fill_loop:
    MOV r2, r0
    MUL r2, r3
    XOR r2, r1
    ANDI r2, 127
    STORE [r4+0], r2
    ADDI r4, {N}
    ADDI r1, 37
    SUBI r3, 1
    JNZ r3, fill_loop
    RET
sort:
    MOVI r3, 7
    MOVI r4, ocnt
    STORE [r4+0], r3
outer:
    MOVI r4, arr
    MOVI r3, ocnt
    LOAD r2, [r3+0]
inner:
    LOAD r0, [r4+0]
    LOAD r1, [r4+{N}]
    ULT r3, r1, r0
    JNZ r3, swap
    JMP next
swap:
    STORE [r4+0], r1
    STORE [r4+{N}], r0
next:
    ADDI r4, {N}
    SUBI r2, 1
    JNZ r2, inner
    MOVI r3, ocnt
    LOAD r2, [r3+0]
    SUBI r2, 1
    STORE [r3+0], r2
    JNZ r2, outer
    RET
summarize:
    MOVI r4, arr
    MOVI r2, 8
    MOVI r0, 0
sum_loop:
    LOAD r3, [r4+0]
    MULI r0, 3
    ADD r0, r3
    ADDI r4, {N}
    SUBI r2, 1
    JNZ r2, sum_loop
    MOVI r4, arr
    LOAD r1, [r4+0]
    RET
.code_end
ocnt: .word 0
arr: .zero {8N}
)", w) + kGlobals;
}

std::string cmdproc(unsigned w) {
  const unsigned kHandlers = 12;
  std::mt19937 rng(7);
  auto R = [&](unsigned n) { return unsigned(rng() % n); };
  std::ostringstream s;
  s << "_start:\n    CALL main\n    HALT\nmain:\n    MOV r4, r0\n    ANDI r4, 15\n";
  for (unsigned k = 0; k < kHandlers; ++k)
    s << "    MOVI r3, " << k << "\n    EQ r2, r4, r3\n    JNZ r2, h" << k << "\n";
  s << "    JMP hdef\n";
  static const char *alu[] = {"ADD", "SUB", "XOR", "OR", "AND", "MUL"};
  static const char *alui[] = {"ADDI", "SUBI", "XORI", "ORI", "MULI", "SHLI", "SHRI"};
  for (unsigned k = 0; k < kHandlers; ++k) {
    s << "h" << k << ":\n    MOV r2, r1\n";
    unsigned n = 6 + R(4);
    for (unsigned i = 0; i < n; ++i) {
      if (i == n / 2 && k % 3 == 0) {
        s << "    MOV r3, r2\n    ANDI r3, 2\n    JZ r3, h" << k << "_s\n    XORI r2, 5\nh" << k
          << "_s:\n";
        continue;
      }
      switch (R(3)) {
      case 0: s << "    " << alu[R(6)] << " r2, r" << (1 + R(2)) << "\n"; break;
      case 1: {
        const char *op = alui[R(7)];
        unsigned imm = (op[0] == 'S' && op[1] == 'H') ? 1 + R(3) : 1 + R(60);
        s << "    " << op << " r2, " << imm << "\n";
        break;
      }
      default: s << "    MOV r3, r2\n    ADDI r3, " << 1 + R(30) << "\n    XOR r2, r3\n"; break;
      }
    }
    s << "    MOVI r3, res\n    STORE [r3+0], r2\n    JMP done\n";
  }
  s << "hdef:\n    MOVI r3, res\n    STORE [r3+0], r1\n    JMP done\n"
    << "done:\n    MOVI r3, res\n    LOAD r0, [r3+0]\n    ADD r0, r1\n    RET\n"
    << ".code_end\nres: .word 0\n";
  (void)w;
  return s.str() + kGlobals;
}

std::string crcLong(unsigned w) {
  std::ostringstream s;
  const unsigned kPhases = 5;
  s << "_start:\n";
  for (unsigned k = 0; k < kPhases; ++k) s << "    CALL phase" << k << "\n";
  s << "    HALT\n";
  static const char *mix[] = {"ADD r1, r0", "XOR r1, r0", "SUB r1, r0", "ADD r1, r0", "OR r1, r0"};
  for (unsigned k = 0; k < kPhases; ++k) {
    std::string p = "p" + std::to_string(k);
    s << "phase" << k << ":\n    MOVI r4, 18\n"
      << p << "_round:\n    MOVI r3, 16\n"
      << p << "_bit:\n    MOV r2, r0\n    ANDI r2, 1\n    SHRI r0, 1\n    MULI r2, " << widthMask(w)
      << "\n    AND r2, r1\n    XOR r0, r2\n    ADDI r0, " << k + 1 << "\n    SUBI r3, 1\n    JNZ r3, " << p << "_bit\n"
      << "    " << mix[k] << "\n    SUBI r4, 1\n    JNZ r4, " << p << "_round\n    JMP " << p
      << "_done\n" << p << "_done:\n    RET\n";
  }
  s << ".code_end\n";
  return s.str() + kGlobals;
}

std::string sboxHash(unsigned w) {
  std::mt19937 rng(11);
  std::ostringstream tbl;
  tbl << "sbox: .word ";
  for (unsigned i = 0; i < 16; ++i) tbl << (i ? ", " : "") << (rng() & 0x7f);
  return words(R"(_start:
    CALL init
    CALL hash
    HALT
init:
    MOV r2, r0
    XOR r2, r1
    MOVI r3, hstate
    STORE [r3+0], r2
    RET
hash:
    MOVI r4, 24
hloop:
    MOVI r3, hstate
    LOAD r2, [r3+0]
    MOV r0, r2
    SHRI r0, 3
    ANDI r0, 15
    MULI r0, {N}
    MOVI r1, sbox
    ADD r1, r0
    LOAD r0, [r1+0]
    XOR r2, r0
    MOV r1, r2
    ANDI r1, 64
    JZ r1, hskip
    MULI r2, 5
    JMP hnext
hskip:
    ADDI r2, 77
hnext:
    STORE [r3+0], r2
    SUBI r4, 1
    JNZ r4, hloop
    MOVI r3, hstate
    LOAD r0, [r3+0]
    MOV r1, r0
    SHRI r1, 4
    RET
.code_end
hstate: .word 0
)", w) + tbl.str() + "\n" + kGlobals;
}

} // namespace

const std::vector<BaseProgram> &basePrograms() {
  static const std::vector<BaseProgram> progs = {
      {"simple_if", simpleIf, {0, 1}, false},
      {"bubble_sort", bubbleSort, {0, 1}, false},
      {"cmdproc", cmdproc, {0}, true},
      {"crc_long", crcLong, {0, 1}, false},
      {"sbox_hash", sboxHash, {0, 1}, false},
  };
  return progs;
}

const BaseProgram &baseProgram(const std::string &name) {
  for (const auto &p : basePrograms())
    if (p.name == name) return p;
  throw std::invalid_argument("unknown base program '" + name + "'");
}

std::vector<Inputs> canonicalInputs(const BaseProgram &p, unsigned width, unsigned count) {
  std::seed_seq seq(p.name.begin(), p.name.end());
  std::mt19937_64 rng(seq);
  Word m = widthMask(width);
  std::vector<Inputs> out;
  for (unsigned i = 0; i < count; ++i) {
    Inputs in;
    for (unsigned r = 0; r < 5; ++r) in.regs[r] = rng() & m;
    in.globals["gx"] = rng() & m;
    in.globals["gy"] = rng() & m;
    out.push_back(in);
  }
  // The analysis input of cmdproc takes an early handler.
  if (p.name == "cmdproc" && !out.empty()) out[0].regs[0] = (out[0].regs[0] & ~Word(15)) | 1;
  return out;
}

} // namespace bbdse
