// Ground-truth obfuscator: opaque predicates and call-stack tampering
// injected into assembly sources, with a truth sidecar.
#pragma once

#include "bbdse/tracer.hpp"

#include <functional>
#include <iosfwd>

namespace bbdse {

struct BaseProgram {
  std::string name;
  // Source for the given width (word offsets are width dependent).
  std::function<std::string(unsigned width)> source;
  // Registers holding the result at HALT.
  std::vector<unsigned> outputs;
  // Most of the code is off the path of any single input.
  bool multiPath = false;
};

// simple_if, bubble_sort, cmdproc, crc_long, sbox_hash.
const std::vector<BaseProgram> &basePrograms();
const BaseProgram &baseProgram(const std::string &name);
// Deterministic input sets; the first one is the analysis input.
std::vector<Inputs> canonicalInputs(const BaseProgram &p, unsigned width, unsigned count = 4);

enum class RecordKind { OP, TAMPER };
enum class TamperScheme { PUSH_RET, PUSH_CALL_RET_RET };
const char *schemeName(TamperScheme s);

struct ObfuscationRecord {
  RecordKind kind = RecordKind::OP;
  unsigned family = 0; // OP only
  TamperScheme scheme = TamperScheme::PUSH_RET;
  // OP: the conditional jump. TAMPER: the tampered RET.
  Addr site = 0;
  // TAMPER: the single intended target.
  Addr target = 0;
  // Never-executed bytes [deadLo, deadHi).
  Addr deadLo = 0, deadHi = 0;
  uint64_t seed = 0;

  bool operator==(const ObfuscationRecord &o) const;
};

struct Obfuscated {
  std::string source;
  ProgramImage image;
  std::vector<ObfuscationRecord> records;
};

struct ObfuscateOptions {
  unsigned width = 32;
  // Insertion points are chosen among code executed by inputs.front().
  std::vector<Inputs> inputs;
  // Prefer points executed at most this many times.
  size_t maxHits = 16;
};

constexpr unsigned kNumFamilies = 8;
// Predicate in readable form, e.g. "7y^2-1 != x^2".
const char *familyFormula(unsigned family);
// Emitted computation and conditional jump; taken direction goes to `dead`.
std::string familyCode(unsigned family, const std::string &dead);

Obfuscated injectOpaque(const std::string &source, unsigned family, unsigned count, uint64_t seed,
                        const ObfuscateOptions &opt);
Obfuscated injectTampering(const std::string &source, TamperScheme scheme, unsigned count,
                           uint64_t seed, const ObfuscateOptions &opt);

std::vector<std::pair<Addr, Addr>> deadIntervals(const std::vector<ObfuscationRecord> &recs);

// Sidecar lines: `OP family addr dead_lo dead_hi` and
// `TAMPER scheme ret_addr target dead_lo dead_hi`, hex addresses.
void writeTruth(const std::vector<ObfuscationRecord> &recs, unsigned width, std::ostream &os);
std::vector<ObfuscationRecord> readTruth(std::istream &is);

// One `name=value` list per line; `# outputs r0 r1` header.
void writeInputs(const std::vector<Inputs> &in, const std::vector<unsigned> &outputs,
                 unsigned width, std::ostream &os);
std::vector<Inputs> readInputs(std::istream &is, std::vector<unsigned> *outputs = nullptr);

struct CorpusConfig {
  unsigned width = 32;
  unsigned seeds = 20;
  uint64_t baseSeed = 1;
  std::vector<unsigned> families = {1, 2, 3, 4, 5, 6, 7, 8};
  unsigned opCount = 3;
  // When non-empty, also produce tampering samples.
  std::vector<TamperScheme> schemes;
  unsigned tamperCount = 2;
  unsigned inputsPerSample = 4;
};

struct CorpusSample {
  std::string name;
  std::string program;
  RecordKind kind = RecordKind::OP;
  unsigned family = 0;
  TamperScheme scheme = TamperScheme::PUSH_RET;
  uint64_t seed = 0;
  std::string baseSource;
  Obfuscated obf;
  std::vector<Inputs> inputs;
  std::vector<unsigned> outputs;
};

std::vector<CorpusSample> buildCorpus(const std::vector<BaseProgram> &programs,
                                      const CorpusConfig &cfg);
// <dir>/<name>.img, .s, .base.s, .truth, .inputs and an index file.
void writeCorpus(const std::vector<CorpusSample> &corpus, const std::string &dir);
std::vector<CorpusSample> readCorpus(const std::string &dir);

// Rebuilt ASPack decoy: a JZ that looks opaque until a store patches the
// immediate of the instruction feeding it. Labels: patch, decoy, store.
ProgramImage aspackDecoy(unsigned width = 32);
// In-place return-address tamper (load [sp], add 9, store back, ret).
// Labels: f, ret, target.
ProgramImage acprotectTamper(unsigned width = 32);

} // namespace bbdse
