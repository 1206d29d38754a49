// Concrete execution of program images, producing dynamic traces.
#pragma once

#include "bbdse/isa.hpp"

#include <array>
#include <memory>
#include <unordered_map>

namespace bbdse {

// Sparse byte-addressable memory, paged.
class Memory {
public:
  uint8_t get(Addr a) const;
  void set(Addr a, uint8_t v);
  Word load(Addr a, unsigned nbytes) const;
  void store(Addr a, Word v, unsigned nbytes);

private:
  static constexpr unsigned kPageBits = 12;
  std::unordered_map<Addr, std::shared_ptr<std::array<uint8_t, 1u << kPageBits>>> pages_;
};

using RegFile = std::array<Word, kNumRegs>;

struct MachineState {
  Addr pc = 0;
  RegFile regs{};
  Memory mem;
  unsigned layer = 0;
};

struct TraceStep {
  size_t index = 0;
  Addr addr = 0;
  unsigned layer = 0;
  std::vector<uint8_t> bytes;
  Instruction ins;
  std::vector<Addr> effectiveAddrs;
  std::optional<bool> branchTaken;
  // Set for STOREs into the code region.
  std::optional<Word> writtenValue;
  std::optional<Addr> jumpTarget;
  // Register file before the step executes.
  RegFile regsBefore{};
  // Word read or written by the memory access, if any.
  Word memValue = 0;
};

enum class TraceEnd { Halt, Fault, Limit };

// Initial assignment: registers and words written before execution starts.
struct Inputs {
  std::map<unsigned, Word> regs;
  std::map<std::string, Word> globals;
  std::map<Addr, Word> words;
};

struct RunConfig {
  size_t maxSteps = 1000000;
  // Initial stack pointer; 0 means top of the address space (first push wraps).
  Word spInit = 0;
};

struct Trace {
  std::shared_ptr<const ProgramImage> program;
  RegFile initialRegs{};
  // Words written into memory before the first step (resolved inputs).
  std::map<Addr, Word> initialWords;
  std::vector<TraceStep> steps;
  TraceEnd end = TraceEnd::Halt;
  std::string faultReason;
  RegFile finalRegs{};

  unsigned width() const { return program->width; }
  size_t size() const { return steps.size(); }
};

Trace run(const ProgramImage &image, const Inputs &inputs, const RunConfig &cfg = {});
Trace run(std::shared_ptr<const ProgramImage> image, const Inputs &inputs,
          const RunConfig &cfg = {});

struct Coverage {
  bool takenSeen = false;
  bool fallthroughSeen = false;
};
std::map<Addr, Coverage> branchCoverage(const Trace &trace);

// Line-oriented trace file. The header carries the width, initial registers
// and initial words; reading re-simulates the image and checks each line.
void writeTrace(const Trace &trace, std::ostream &os);
void writeTraceFile(const Trace &trace, const std::string &path);
Trace readTrace(std::shared_ptr<const ProgramImage> image, std::istream &is);
Trace readTraceFile(std::shared_ptr<const ProgramImage> image, const std::string &path);
std::string formatStep(const TraceStep &s, unsigned w);

} // namespace bbdse
