#include "bbdse/formula.hpp"

#include <algorithm>
#include <sstream>

namespace bbdse {

std::vector<Term> SliceFormula::constraints() const {
  std::vector<Term> out;
  out.reserve(constraintCount());
  for (const auto &d : defs)
    out.push_back(store->eq(d.var, d.rhs));
  for (const auto &c : conds)
    out.push_back(c.cond);
  return out;
}

namespace {

std::string hexAddr(Addr a) {
  std::ostringstream os;
  os << std::hex << a;
  return os.str();
}

} // namespace

TraceSSA::TraceSSA(const Trace &t, std::shared_ptr<TermStore> store)
    : trace_(&t), store_(store ? std::move(store) : std::make_shared<TermStore>()) {
  const unsigned w = t.width();
  const unsigned nb = w / 8;
  TermStore &S = *store_;
  for (unsigned r = 0; r < kNumRegs; ++r) {
    Term v = S.var(regName(r) + "_in", w);
    inputs_.insert(v->id);
    concrete_[v->id] = t.initialRegs[r];
  }
  for (auto &[a, v] : t.initialWords)
    for (unsigned i = 0; i < nb; ++i)
      inputByte_[a + i] = a;

  std::array<int64_t, kNumRegs> ver;
  ver.fill(-1);
  steps_.resize(t.steps.size());
  for (size_t s = 0; s < t.steps.size(); ++s) {
    const TraceStep &st = t.steps[s];
    const Instruction &ins = st.ins;
    StepInfo &info = steps_[s];
    info.regVer = ver;
    auto R = [&](unsigned r) { return regVar(r, ver[r]); };
    std::vector<std::pair<unsigned, Term>> regDefs;
    auto imm = [&] { return S.constant(ins.imm, w); };
    Term sp = R(kSP);
    Term spPost = sp;

    switch (ins.op) {
    case Opcode::MOVI:
      regDefs.push_back({ins.r[0], imm()});
      break;
    case Opcode::MOV:
      regDefs.push_back({ins.r[0], R(ins.r[1])});
      break;
    case Opcode::ADD: case Opcode::SUB: case Opcode::MUL: case Opcode::UDIV:
    case Opcode::AND: case Opcode::OR: case Opcode::XOR: case Opcode::SHL: case Opcode::SHR:
    case Opcode::ADDI: case Opcode::SUBI: case Opcode::MULI: case Opcode::ANDI:
    case Opcode::ORI: case Opcode::XORI: case Opcode::SHLI: case Opcode::SHRI: {
      static const std::map<Opcode, Op> ops = {
          {Opcode::ADD, Op::Add}, {Opcode::SUB, Op::Sub}, {Opcode::MUL, Op::Mul},
          {Opcode::UDIV, Op::UDiv}, {Opcode::AND, Op::And}, {Opcode::OR, Op::Or},
          {Opcode::XOR, Op::Xor}, {Opcode::SHL, Op::Shl}, {Opcode::SHR, Op::LShr},
          {Opcode::ADDI, Op::Add}, {Opcode::SUBI, Op::Sub}, {Opcode::MULI, Op::Mul},
          {Opcode::ANDI, Op::And}, {Opcode::ORI, Op::Or}, {Opcode::XORI, Op::Xor},
          {Opcode::SHLI, Op::Shl}, {Opcode::SHRI, Op::LShr}};
      bool isImm = static_cast<uint8_t>(ins.op) >= static_cast<uint8_t>(Opcode::ADDI);
      Term rhs = S.binary(ops.at(ins.op), R(ins.r[0]), isImm ? imm() : R(ins.r[1]));
      regDefs.push_back({ins.r[0], rhs});
      break;
    }
    case Opcode::EQ: case Opcode::NE: case Opcode::ULT:
    case Opcode::UGE: case Opcode::SLT: case Opcode::SGE: {
      static const std::map<Opcode, Op> ops = {{Opcode::EQ, Op::Eq},   {Opcode::NE, Op::Ne},
                                               {Opcode::ULT, Op::Ult}, {Opcode::UGE, Op::Uge},
                                               {Opcode::SLT, Op::Slt}, {Opcode::SGE, Op::Sge}};
      Term c = S.compare(ops.at(ins.op), R(ins.r[1]), R(ins.r[2]));
      regDefs.push_back({ins.r[0], S.boolToWord(c, w)});
      break;
    }
    case Opcode::LOAD: {
      Term a = S.add(R(ins.r[1]), imm());
      info.read = memTerm(s, st.effectiveAddrs.at(0), a);
      regDefs.push_back({ins.r[0], info.read});
      break;
    }
    case Opcode::STORE: {
      Addr ea = st.effectiveAddrs.at(0);
      defineWord(s, "m" + hexAddr(ea) + "_" + std::to_string(s), R(ins.r[1]), st.memValue);
      break;
    }
    case Opcode::PUSH: case Opcode::PUSHI: case Opcode::CALL: case Opcode::CALLR: {
      Addr ea = st.effectiveAddrs.at(0);
      Term v = ins.op == Opcode::PUSH    ? R(ins.r[0])
               : ins.op == Opcode::PUSHI ? imm()
                                         : S.constant(st.addr + ins.length, w);
      spPost = S.sub(sp, S.constant(nb, w));
      regDefs.push_back({kSP, spPost});
      defineWord(s, "m" + hexAddr(ea) + "_" + std::to_string(s), v, st.memValue);
      break;
    }
    case Opcode::POP: case Opcode::RET: {
      info.read = memTerm(s, st.effectiveAddrs.at(0), sp);
      spPost = S.add(sp, S.constant(nb, w));
      if (ins.op == Opcode::POP && ins.r[0] == kSP) {
        spPost = info.read;
        regDefs.push_back({kSP, info.read});
      } else {
        regDefs.push_back({kSP, spPost});
        if (ins.op == Opcode::POP)
          regDefs.push_back({ins.r[0], info.read});
      }
      break;
    }
    default:
      break;
    }
    for (auto &[r, rhs] : regDefs) {
      Term v = S.var(regName(r) + "_" + std::to_string(s), w);
      Word cv = s + 1 < t.steps.size() ? t.steps[s + 1].regsBefore[r] : t.finalRegs[r];
      Def d{v, rhs, s};
      info.defs.push_back(d);
      defOf_[v->id] = d;
      concrete_[v->id] = cv;
      inl_[v->id] = inlined(rhs);
      ver[r] = static_cast<int64_t>(s);
    }
    info.spPost = spPost;
  }
}

Term TraceSSA::regVar(unsigned r, int64_t v) {
  if (v < 0)
    return store_->var(regName(r) + "_in", width());
  return store_->var(regName(r) + "_" + std::to_string(v), width());
}

Term TraceSSA::defineWord(size_t step, const std::string &name, Term rhs, Word concrete) {
  const unsigned nb = width() / 8;
  Term v = store_->var(name, width());
  Def d{v, rhs, step};
  steps_[step].defs.push_back(d);
  defOf_[v->id] = d;
  concrete_[v->id] = concrete;
  inl_[v->id] = inlined(rhs);
  Addr ea = trace_->steps[step].effectiveAddrs.at(0);
  for (unsigned i = 0; i < nb; ++i)
    writer_[ea + i] = {step, ea};
  return v;
}

Term TraceSSA::memTerm(size_t step, Addr ea, Term addrTerm) {
  const unsigned w = width();
  const unsigned nb = w / 8;
  const ProgramImage &img = *trace_->program;
  TermStore &S = *store_;
  std::vector<Term> parts(nb);
  bool dynamicBytes = false;
  for (unsigned i = 0; i < nb; ++i) {
    Addr b = ea + i;
    auto wi = writer_.find(b);
    if (wi != writer_.end()) {
      auto [ws, wa] = wi->second;
      Term wv = S.var("m" + hexAddr(wa) + "_" + std::to_string(ws), w);
      unsigned lo = static_cast<unsigned>(8 * (b - wa));
      parts[i] = S.extract(lo + 7, lo, wv);
      dynamicBytes = true;
      continue;
    }
    auto ii = inputByte_.find(b);
    if (ii != inputByte_.end()) {
      Addr wa = ii->second;
      Term iv = S.var("m" + hexAddr(wa) + "_in", w);
      inputs_.insert(iv->id);
      concrete_[iv->id] = trace_->initialWords.at(wa);
      unsigned lo = static_cast<unsigned>(8 * (b - wa));
      parts[i] = S.extract(lo + 7, lo, iv);
      dynamicBytes = true;
      continue;
    }
    parts[i] = S.constant(img.byteAt(b).value_or(0), 8);
  }
  if (!dynamicBytes && !inlined(addrTerm)->isConst()) {
    // Static data reached through an input-dependent address: model the
    // read as a lookup over the untouched data words of the image.
    std::vector<Addr> cands;
    for (Addr a = img.base; a + nb <= img.base + img.bytes.size(); ++a) {
      if (a % nb != ea % nb)
        continue;
      bool ok = true;
      for (unsigned i = 0; i < nb && ok; ++i)
        ok = !img.inCode(a + i) && !writer_.count(a + i) && !inputByte_.count(a + i);
      if (ok)
        cands.push_back(a);
      if (cands.size() > 64)
        break;
    }
    if (!cands.empty() && cands.size() <= 64) {
      Term dflt = S.var("ld_" + std::to_string(step), w);
      inputs_.insert(dflt->id);
      concrete_[dflt->id] = trace_->steps[step].memValue;
      Term acc = dflt;
      for (auto it = cands.rbegin(); it != cands.rend(); ++it) {
        Word v = 0;
        for (unsigned i = 0; i < nb; ++i)
          v |= Word(*img.byteAt(*it + i)) << (8 * i);
        acc = S.ite(S.eq(addrTerm, S.constant(*it, w)), S.constant(v, w), acc);
      }
      return acc;
    }
  }
  Term acc = parts[0];
  for (unsigned i = 1; i < nb; ++i)
    acc = S.concat(parts[i], acc);
  return acc;
}

Term TraceSSA::reg(size_t step, unsigned r) const {
  int64_t v = steps_.at(step).regVer[r];
  return v < 0 ? store_->var(regName(r) + "_in", width())
               : store_->var(regName(r) + "_" + std::to_string(v), width());
}

Term TraceSSA::memRead(size_t step) const { return steps_.at(step).read; }

Term TraceSSA::spAfter(size_t step) const { return steps_.at(step).spPost; }

Term TraceSSA::takenCond(size_t step) const {
  const TraceStep &st = trace_->steps.at(step);
  if (!st.ins.isCondJump())
    throw std::invalid_argument("step " + std::to_string(step) + " is not a conditional jump");
  Term v = reg(step, st.ins.r[0]);
  Term zero = store_->constant(0, width());
  return st.ins.op == Opcode::JZ ? store_->eq(v, zero) : store_->ne(v, zero);
}

Term TraceSSA::observedCond(size_t step) const {
  Term c = takenCond(step);
  return *trace_->steps[step].branchTaken ? c : store_->lnot(c);
}

Term TraceSSA::targetTerm(size_t step) const {
  const TraceStep &st = trace_->steps.at(step);
  if (st.ins.op == Opcode::RET)
    return memRead(step);
  if (st.ins.isIndirect())
    return reg(step, st.ins.r[0]);
  throw std::invalid_argument("step has no computed target");
}

const Def *TraceSSA::defOf(Term var) const {
  auto it = defOf_.find(var->id);
  return it == defOf_.end() ? nullptr : &it->second;
}

bool TraceSSA::isInput(Term var) const { return inputs_.count(var->id) != 0; }

const std::vector<Term> &TraceSSA::varsOf(Term t) const {
  auto it = varsCache_.find(t->id);
  if (it != varsCache_.end())
    return it->second;
  std::vector<Term> vs;
  collectVars(t, vs);
  std::sort(vs.begin(), vs.end(), [](Term a, Term b) { return a->id < b->id; });
  return varsCache_.emplace(t->id, std::move(vs)).first->second;
}

Word TraceSSA::concreteValue(Term var) const {
  auto it = concrete_.find(var->id);
  if (it == concrete_.end())
    throw std::out_of_range("no concrete value for " + var->name);
  return it->second;
}

Term TraceSSA::inlined(Term t) {
  return store_->rebuild(t, inlMemo_, [this](Term v) {
    auto it = inl_.find(v->id);
    return it == inl_.end() ? v : it->second;
  });
}

// ---------------------------------------------------------------------------

namespace {

void finish(SliceFormula &f, std::vector<const Def *> &defs, std::vector<BranchCond> &conds,
            std::vector<Term> &cuts) {
  std::sort(defs.begin(), defs.end(), [](const Def *a, const Def *b) {
    return a->step != b->step ? a->step < b->step : a->var->name < b->var->name;
  });
  for (auto *d : defs)
    f.defs.push_back(*d);
  std::sort(conds.begin(), conds.end(),
            [](const BranchCond &a, const BranchCond &b) { return a.step < b.step; });
  f.conds = std::move(conds);
  std::sort(cuts.begin(), cuts.end(), [](Term a, Term b) { return a->name < b->name; });
  f.cutInputs = std::move(cuts);
}

} // namespace

SliceFormula backwardSlice(TraceSSA &ssa, size_t occurrence, Term goal, unsigned k,
                           BoundMetric metric) {
  if (occurrence > ssa.size())
    throw std::out_of_range("occurrence out of range");
  if (!goal->isBool())
    throw std::invalid_argument("goal must be boolean");
  SliceFormula f;
  f.store = ssa.storePtr();
  f.width = ssa.width();
  f.goal = goal;
  const size_t o = occurrence;
  const size_t lo = metric == BoundMetric::Steps ? (o >= k ? o - k : 0) : 0;
  f.spanLo = lo;
  f.spanHi = o;

  std::unordered_set<uint32_t> support;
  std::vector<const Def *> defs;
  std::vector<Term> cuts;
  size_t earliest = o;

  // Breadth-first so that, in def-use mode, depth equals chain length.
  auto absorb = [&](const std::vector<Term> &seed, unsigned depth0) {
    std::vector<std::pair<Term, unsigned>> queue;
    for (Term v : seed)
      queue.push_back({v, depth0});
    for (size_t qi = 0; qi < queue.size(); ++qi) {
      auto [v, depth] = queue[qi];
      if (!support.insert(v->id).second)
        continue;
      const Def *d = ssa.defOf(v);
      bool inside = d && d->step < o &&
                    (metric == BoundMetric::Steps ? d->step >= lo : depth < k);
      if (!inside) {
        cuts.push_back(v);
        continue;
      }
      defs.push_back(d);
      earliest = std::min(earliest, d->step);
      for (Term u : ssa.varsOf(d->rhs))
        queue.push_back({u, depth + 1});
    }
  };
  absorb(ssa.varsOf(goal), 0);

  // Branch conditions whose cone of influence meets the support set.
  const auto &steps = ssa.trace().steps;
  std::vector<size_t> condSteps;
  size_t condLo = metric == BoundMetric::Steps ? lo : earliest;
  for (size_t j = condLo; j < o; ++j)
    if (steps[j].branchTaken)
      condSteps.push_back(j);
  std::vector<bool> taken(condSteps.size(), false);
  std::vector<BranchCond> conds;
  for (bool grew = true; grew;) {
    grew = false;
    // Operands are always defined at earlier steps, so one forward pass over
    // the window decides which variables reach the support set.
    std::unordered_map<uint32_t, bool> reaches;
    auto meets = [&](Term v) {
      if (support.count(v->id))
        return true;
      auto it = reaches.find(v->id);
      return it != reaches.end() && it->second;
    };
    if (metric == BoundMetric::Steps)
      for (size_t j = lo; j < o; ++j)
        for (const auto &d : ssa.defsAt(j)) {
          bool r = false;
          for (Term u : ssa.varsOf(d.rhs))
            if ((r = meets(u)))
              break;
          reaches[d.var->id] = r;
        }
    std::vector<size_t> newly;
    for (size_t i = 0; i < condSteps.size(); ++i) {
      if (taken[i])
        continue;
      Term c = ssa.observedCond(condSteps[i]);
      for (Term v : ssa.varsOf(c))
        if (meets(v)) {
          newly.push_back(i);
          break;
        }
    }
    for (size_t i : newly) {
      taken[i] = true;
      grew = true;
      Term c = ssa.observedCond(condSteps[i]);
      conds.push_back({c, condSteps[i]});
      if (metric == BoundMetric::Steps) {
        absorb(ssa.varsOf(c), 0);
      } else {
        for (Term v : ssa.varsOf(c))
          if (support.insert(v->id).second)
            cuts.push_back(v);
      }
    }
  }
  if (metric == BoundMetric::DefUse)
    f.spanLo = std::min(earliest, conds.empty() ? o : conds.front().step);
  f.kUsed = static_cast<unsigned>(o - f.spanLo);
  finish(f, defs, conds, cuts);
  if (metric == BoundMetric::DefUse)
    for (auto &c : f.conds)
      f.spanLo = std::min(f.spanLo, c.step);
  return f;
}

SliceFormula backwardSlice(TraceSSA &ssa, const ReachabilityCondition &cond, unsigned k,
                           BoundMetric metric) {
  if (cond.occurrence >= ssa.size() || ssa.trace().steps[cond.occurrence].addr != cond.addr)
    throw std::out_of_range("reachability condition does not match the trace");
  return backwardSlice(ssa, cond.occurrence, cond.goal, k, metric);
}

SliceFormula forwardPathPredicate(TraceSSA &ssa, size_t upto, Term goal) {
  if (upto > ssa.size())
    throw std::out_of_range("upto out of range");
  SliceFormula f;
  f.store = ssa.storePtr();
  f.width = ssa.width();
  f.goal = goal ? goal : f.store->boolean(true);
  f.spanLo = 0;
  f.spanHi = upto;
  f.kUsed = static_cast<unsigned>(upto);
  std::vector<const Def *> defs;
  std::vector<BranchCond> conds;
  std::unordered_set<uint32_t> defined, seen;
  std::vector<Term> cuts;
  for (size_t s = 0; s < upto; ++s) {
    for (const auto &d : ssa.defsAt(s)) {
      defs.push_back(&d);
      defined.insert(d.var->id);
    }
    if (ssa.trace().steps[s].branchTaken)
      conds.push_back({ssa.observedCond(s), s});
  }
  auto note = [&](Term t) {
    for (Term v : ssa.varsOf(t))
      if (!defined.count(v->id) && seen.insert(v->id).second)
        cuts.push_back(v);
  };
  for (auto *d : defs)
    note(d->rhs);
  for (auto &c : conds)
    note(c.cond);
  note(f.goal);
  finish(f, defs, conds, cuts);
  return f;
}

SliceFormula negateGoal(const SliceFormula &f) {
  SliceFormula g = f;
  g.goal = f.store->lnot(f.goal);
  return g;
}

bool constraintsHold(const SliceFormula &f, const std::function<Word(Term)> &value) {
  for (const auto &d : f.defs)
    if (evaluate(d.rhs, value) != (value(d.var) & widthMask(d.var->width)))
      return false;
  for (const auto &c : f.conds)
    if (!evaluate(c.cond, value))
      return false;
  return true;
}

bool satisfiedBy(const SliceFormula &f, const std::function<Word(Term)> &inputValue,
                 bool includeGoal) {
  std::unordered_map<uint32_t, Word> defined;
  auto lookup = [&](Term v) -> Word {
    auto it = defined.find(v->id);
    return it != defined.end() ? it->second : inputValue(v);
  };
  for (const auto &d : f.defs)
    defined[d.var->id] = evaluate(d.rhs, lookup);
  for (const auto &c : f.conds)
    if (!evaluate(c.cond, lookup))
      return false;
  return !includeGoal || evaluate(f.goal, lookup) != 0;
}

} // namespace bbdse
