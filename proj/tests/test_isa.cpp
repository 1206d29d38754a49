#include "bbdse/isa.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace bbdse;

TEST(Assemble, MoviHaltIsSevenBytes) {
  ProgramImage img = assemble("MOVI r0, 5\nHALT\n");
  ASSERT_EQ(img.bytes.size(), 7u);
  EXPECT_EQ(img.bytes[0], static_cast<uint8_t>(Opcode::MOVI));
  EXPECT_EQ(img.bytes[1], 0);
  EXPECT_EQ(img.bytes[2], 5);
  EXPECT_EQ(img.bytes[3], 0);
  EXPECT_EQ(img.bytes[6], static_cast<uint8_t>(Opcode::HALT));
}

TEST(Assemble, TamperGadgetEncodesPushRet) {
  ProgramImage img = assemble("CALL fun\n"
                              ".byte 0xff\n"
                              "fun: PUSHI X\n"
                              "RET\n"
                              "X: HALT\n");
  Addr fun = img.label("fun");
  auto push = decode(img, fun);
  ASSERT_TRUE(push);
  EXPECT_EQ(push.ins->op, Opcode::PUSHI);
  EXPECT_EQ(push.ins->imm, img.label("X"));
  auto ret = decode(img, fun + push.ins->length);
  ASSERT_TRUE(ret);
  EXPECT_EQ(ret.ins->op, Opcode::RET);
}

TEST(Assemble, ReservedByteFailsDecode) {
  ProgramImage img = assemble(".byte 0xFF\n");
  ASSERT_EQ(img.bytes.size(), 1u);
  auto d = decode(img, 0);
  EXPECT_FALSE(d);
  EXPECT_EQ(d.failure.reason, "reserved opcode");
}

TEST(Assemble, Errors) {
  EXPECT_THROW(assemble("JMP nowhere\n"), AsmError);
  EXPECT_THROW(assemble("MOVI r0, 256\n", {8, 0}), AsmError);
  EXPECT_THROW(assemble("MOVI r9, 1\n"), AsmError);
  EXPECT_NO_THROW(assemble("MOVI r0, -128\n", {8, 0}));
  EXPECT_THROW(assemble("MOVI r0, -129\n", {8, 0}), AsmError);
}

TEST(Assemble, MemoryOperandsAndLabels) {
  ProgramImage img = assemble("LOAD r1, [r2+4]\nSTORE [sp-8], r3\nMOVI r0, tbl+4\nHALT\n"
                              ".code_end\ntbl: .word 1, 2\n.global tbl\n",
                              {16, 0x100});
  auto l = decode(img, 0x100);
  ASSERT_TRUE(l);
  EXPECT_EQ(l.ins->op, Opcode::LOAD);
  EXPECT_EQ(l.ins->r[0], 1);
  EXPECT_EQ(l.ins->r[1], 2);
  EXPECT_EQ(l.ins->imm, 4u);
  auto s = decode(img, 0x100 + l.ins->length);
  ASSERT_TRUE(s);
  EXPECT_EQ(s.ins->r[0], kSP);
  EXPECT_EQ(s.ins->imm, 0xfff8u);
  EXPECT_EQ(s.ins->r[1], 3);
  EXPECT_EQ(img.globals.at("tbl"), img.label("tbl"));
  EXPECT_TRUE(img.inCode(0x100));
  EXPECT_FALSE(img.inCode(img.label("tbl")));
  auto m = decode(img, 0x100 + l.ins->length + s.ins->length);
  EXPECT_EQ(m.ins->imm, img.label("tbl") + 4);
}

TEST(Decode, HaltAtEntry) {
  ProgramImage img = assemble("HALT\n");
  auto d = decode(img, img.entry);
  ASSERT_TRUE(d);
  EXPECT_EQ(d.ins->op, Opcode::HALT);
  EXPECT_EQ(d.ins->length, 1u);
}

TEST(Decode, TruncatedOperand) {
  ProgramImage img = assemble(".byte 0x01, 0x00, 0x05\n");
  auto d = decode(img, 0);
  EXPECT_FALSE(d);
  EXPECT_EQ(d.failure.reason, "truncated operand");
}

TEST(Decode, AllReservedOpcodesFail) {
  for (unsigned b = 0xF0; b <= 0xFF; ++b) {
    uint8_t buf[8] = {static_cast<uint8_t>(b), 0, 0, 0, 0, 0, 0, 0};
    EXPECT_FALSE(decodeBytes(buf, sizeof buf, 32));
  }
}

// Every opcode, random operands, all widths: encode then decode is identity.
TEST(Property, EncodeDecodeIdentity) {
  std::mt19937 rng(1);
  for (unsigned w : {8u, 16u, 32u}) {
    for (const auto &info : allOpcodes()) {
      for (int rep = 0; rep < 50; ++rep) {
        Instruction ins;
        ins.op = info.op;
        unsigned nregs = 0;
        bool hasImm = false;
        for (auto k : info.operands) {
          if (k == OperandKind::Reg)
            ins.r[nregs++] = static_cast<uint8_t>(rng() % kNumRegs);
          else
            hasImm = true;
        }
        if (hasImm)
          ins.imm = rng() & widthMask(w);
        ins.length = encodedLength(ins.op, w);
        auto bytes = encode(ins, w);
        ASSERT_EQ(bytes.size(), ins.length);
        auto d = decodeBytes(bytes.data(), bytes.size(), w);
        ASSERT_TRUE(d);
        EXPECT_EQ(*d.ins, ins) << info.name;
      }
    }
  }
}

// Random buffers: whenever decode succeeds, re-encoding reproduces the bytes.
TEST(Property, RandomBytesRoundTrip) {
  std::mt19937 rng(7);
  int ok = 0;
  for (int rep = 0; rep < 20000; ++rep) {
    uint8_t buf[12];
    for (auto &b : buf)
      b = static_cast<uint8_t>(rng());
    buf[0] = static_cast<uint8_t>(rng() % 0x60);
    for (size_t i = 1; i < sizeof buf; ++i)
      if (rng() % 2)
        buf[i] = static_cast<uint8_t>(rng() % kNumRegs);
    auto d = decodeBytes(buf, sizeof buf, 32);
    if (!d)
      continue;
    ++ok;
    auto re = encode(*d.ins, 32);
    ASSERT_EQ(re.size(), d.ins->length);
    EXPECT_TRUE(std::equal(re.begin(), re.end(), buf));
  }
  EXPECT_GT(ok, 1000);
}

// Overlapping decodes: the bytes of a MOVI also decode from its second byte.
TEST(Property, OverlappingInstructionStreams) {
  ProgramImage img = assemble("MOVI r2, 0x00020000\nHALT\n");
  auto a = decode(img, 0);
  auto b = decode(img, 1);
  ASSERT_TRUE(a);
  ASSERT_TRUE(b);
  EXPECT_NE(a.ins->op, b.ins->op);
}

TEST(ImageFile, RoundTrip) {
  ProgramImage img = assemble("_start: MOVI r0, 1\nHALT\n.code_end\ngx: .word 3\n.global gx\n",
                              {16, 0x40});
  auto data = serializeImage(img);
  ASSERT_GE(data.size(), 16u);
  EXPECT_EQ(std::string(data.begin(), data.begin() + 4), "BBDL");
  ProgramImage back = deserializeImage(data);
  EXPECT_EQ(back.width, 16u);
  EXPECT_EQ(back.base, 0x40u);
  EXPECT_EQ(back.entry, img.entry);
  EXPECT_EQ(back.bytes, img.bytes);
  EXPECT_EQ(back.codeHi, img.codeHi);
  EXPECT_EQ(back.globals, img.globals);
  EXPECT_EQ(back.labels, img.labels);
  EXPECT_EQ(back.instrStarts, img.instrStarts);
}
