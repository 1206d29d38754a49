#include "bbdse/solver.hpp"

#include <algorithm>
#include <chrono>
#include <csignal>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <poll.h>
#include <random>
#include <regex>
#include <sstream>
#include <sys/wait.h>
#include <unistd.h>

namespace bbdse {

const char *verdictName(VerdictKind k) {
  switch (k) {
  case VerdictKind::SAT: return "SAT";
  case VerdictKind::UNSAT: return "UNSAT";
  case VerdictKind::TIMEOUT: return "TIMEOUT";
  case VerdictKind::UNKNOWN: return "UNKNOWN";
  }
  return "?";
}

std::string defaultSolverPath() {
  if (const char *env = std::getenv("BBDSE_SOLVER"); env && *env)
    return env;
  if (const char *path = std::getenv("PATH")) {
    std::istringstream ps(path);
    std::string dir;
    while (std::getline(ps, dir, ':')) {
      auto cand = std::filesystem::path(dir) / "z3";
      if (!dir.empty() && ::access(cand.c_str(), X_OK) == 0)
        return cand.string();
    }
  }
  return "z3";
}

namespace {

double since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

} // namespace

// ---------------------------------------------------------------------------
// CompiledFormula

CompiledFormula::CompiledFormula(const SliceFormula &f) : inputs_(f.cutInputs) {
  std::unordered_map<uint32_t, Term> defRhs;
  for (const auto &d : f.defs)
    defRhs[d.var->id] = d.rhs;
  std::unordered_map<uint32_t, int> slot;
  auto alloc = [&](Word init) {
    vals_.push_back(init);
    return static_cast<int>(vals_.size() - 1);
  };
  for (Term v : inputs_) {
    int s = alloc(0);
    slot[v->id] = s;
    inputSlot_.push_back(s);
  }
  auto compile = [&](Term root) -> int {
    std::vector<std::pair<Term, bool>> st{{root, false}};
    while (!st.empty()) {
      auto [n, expanded] = st.back();
      st.pop_back();
      if (slot.count(n->id))
        continue;
      if (n->isConst()) {
        slot[n->id] = alloc(n->value);
        continue;
      }
      if (n->isVar()) {
        auto it = defRhs.find(n->id);
        if (it == defRhs.end())
          throw std::invalid_argument("variable " + n->name + " is neither defined nor free");
        if (expanded) {
          slot[n->id] = slot.at(it->second->id);
        } else {
          st.push_back({n, true});
          st.push_back({it->second, false});
        }
        continue;
      }
      if (!expanded) {
        st.push_back({n, true});
        for (unsigned i = 0; i < n->arity(); ++i)
          st.push_back({n->kid[i], false});
        continue;
      }
      Ins ins{n->op,
              n->width,
              n->value,
              slot.at(n->kid[0]->id),
              n->arity() > 1 ? slot.at(n->kid[1]->id) : 0,
              n->arity() > 2 ? slot.at(n->kid[2]->id) : 0,
              n->op == Op::Concat ? n->kid[1]->width : n->kid[0]->width,
              alloc(0)};
      slot[n->id] = ins.dst;
      code_.push_back(ins);
    }
    return slot.at(root->id);
  };
  for (const auto &c : f.conds)
    condSlot_.push_back(compile(c.cond));
  goalSlot_ = compile(f.goal);
}

bool CompiledFormula::run(const std::vector<Word> &in, bool withGoal) {
  for (size_t i = 0; i < inputSlot_.size(); ++i)
    vals_[inputSlot_[i]] = in[i] & widthMask(inputs_[i]->width);
  for (const auto &ins : code_)
    vals_[ins.dst] =
        applyOp(ins.op, ins.width, vals_[ins.a], vals_[ins.b], vals_[ins.c], ins.argWidth, ins.aux);
  for (int s : condSlot_)
    if (!vals_[s])
      return false;
  return !withGoal || vals_[goalSlot_] != 0;
}

unsigned CompiledFormula::inputBits() const {
  unsigned b = 0;
  for (Term v : inputs_)
    b += v->width;
  return b;
}

// ---------------------------------------------------------------------------
// SMT-LIB emission

namespace {

struct Emitter {
  bool canonical;
  std::unordered_map<uint32_t, std::string> names;
  std::vector<Term> order;

  const std::string &name(Term v) {
    auto it = names.find(v->id);
    if (it != names.end())
      return it->second;
    order.push_back(v);
    std::string n = canonical ? "v" + std::to_string(names.size()) : v->name;
    return names.emplace(v->id, n).first->second;
  }

  void term(Term t, std::ostream &os) {
    switch (t->op) {
    case Op::Const:
      if (t->isBool())
        os << (t->value ? "true" : "false");
      else
        os << "(_ bv" << t->value << " " << t->width << ")";
      return;
    case Op::Var:
      os << name(t);
      return;
    case Op::Extract:
      os << "((_ extract " << t->value + t->width - 1 << " " << t->value << ") ";
      term(t->kid[0], os);
      os << ")";
      return;
    case Op::ZExt:
      os << "((_ zero_extend " << t->width - t->kid[0]->width << ") ";
      term(t->kid[0], os);
      os << ")";
      return;
    default:
      os << "(" << opName(t->op);
      for (unsigned i = 0; i < t->arity(); ++i) {
        os << " ";
        term(t->kid[i], os);
      }
      os << ")";
    }
  }
};

} // namespace

SmtScript emitSmt(const SliceFormula &f, bool canonical) {
  Emitter e{canonical, {}, {}};
  std::ostringstream body;
  for (const auto &d : f.defs) {
    body << "(assert (= ";
    e.term(d.var, body);
    body << " ";
    e.term(d.rhs, body);
    body << "))\n";
  }
  for (const auto &c : f.conds) {
    body << "(assert ";
    e.term(c.cond, body);
    body << ")\n";
  }
  body << "(assert ";
  e.term(f.goal, body);
  body << ")\n";
  for (Term v : f.cutInputs)
    e.name(v);
  std::ostringstream os;
  os << "(set-logic QF_BV)\n";
  SmtScript s;
  for (Term v : e.order) {
    const std::string &n = e.names.at(v->id);
    if (v->isBool())
      os << "(declare-const " << n << " Bool)\n";
    else
      os << "(declare-const " << n << " (_ BitVec " << v->width << "))\n";
    s.names.push_back({n, v->name});
  }
  os << body.str() << "(check-sat)\n";
  s.text = os.str();
  return s;
}

std::string emitSmtlib(const SliceFormula &f) { return emitSmt(f, false).text; }

// ---------------------------------------------------------------------------
// Oracle

Verdict bruteCheck(const SliceFormula &f) {
  auto t0 = std::chrono::steady_clock::now();
  CompiledFormula cf(f);
  unsigned bits = cf.inputBits();
  if (bits > 24)
    throw std::invalid_argument("brute_check: " + std::to_string(bits) +
                                " free bits exceed the 24-bit budget");
  const auto &ins = cf.inputs();
  std::vector<Word> vals(ins.size(), 0);
  Verdict v;
  v.source = "brute";
  v.kind = VerdictKind::UNSAT;
  const uint64_t total = uint64_t(1) << bits;
  for (uint64_t x = 0; x < total; ++x) {
    uint64_t rest = x;
    for (size_t i = 0; i < ins.size(); ++i) {
      vals[i] = rest & widthMask(ins[i]->width);
      rest >>= ins[i]->width;
    }
    if (cf.run(vals)) {
      v.kind = VerdictKind::SAT;
      for (size_t i = 0; i < ins.size(); ++i)
        v.model[ins[i]->name] = vals[i];
      break;
    }
  }
  v.elapsed = since(t0);
  return v;
}

SliceFormula pruneToGoal(const SliceFormula &f) {
  // Union-find over variables; each constraint joins all of its variables.
  std::unordered_map<uint32_t, uint32_t> parent;
  std::function<uint32_t(uint32_t)> find = [&](uint32_t x) {
    auto it = parent.find(x);
    if (it == parent.end()) {
      parent[x] = x;
      return x;
    }
    uint32_t r = x;
    while (parent[r] != r)
      r = parent[r];
    while (parent[x] != r) {
      uint32_t n = parent[x];
      parent[x] = r;
      x = n;
    }
    return r;
  };
  auto unite = [&](const std::vector<Term> &vs) {
    for (size_t i = 1; i < vs.size(); ++i) {
      uint32_t a = find(vs[0]->id), b = find(vs[i]->id);
      if (a != b)
        parent[a] = b;
    }
  };
  std::vector<std::vector<Term>> defVars(f.defs.size()), condVars(f.conds.size());
  for (size_t i = 0; i < f.defs.size(); ++i) {
    defVars[i].push_back(f.defs[i].var);
    collectVars(f.defs[i].rhs, defVars[i]);
    unite(defVars[i]);
  }
  for (size_t i = 0; i < f.conds.size(); ++i) {
    collectVars(f.conds[i].cond, condVars[i]);
    unite(condVars[i]);
  }
  std::vector<Term> gv;
  collectVars(f.goal, gv);
  std::unordered_set<uint32_t> roots;
  for (Term v : gv)
    roots.insert(find(v->id));
  SliceFormula g = f;
  g.defs.clear();
  g.conds.clear();
  g.cutInputs.clear();
  std::unordered_set<uint32_t> defined, used;
  for (size_t i = 0; i < f.defs.size(); ++i)
    if (roots.count(find(f.defs[i].var->id))) {
      g.defs.push_back(f.defs[i]);
      defined.insert(f.defs[i].var->id);
      for (Term v : defVars[i])
        used.insert(v->id);
    }
  for (size_t i = 0; i < f.conds.size(); ++i)
    if (!condVars[i].empty() && roots.count(find(condVars[i][0]->id))) {
      g.conds.push_back(f.conds[i]);
      for (Term v : condVars[i])
        used.insert(v->id);
    } else if (condVars[i].empty()) {
      g.conds.push_back(f.conds[i]);
    }
  for (Term v : gv)
    used.insert(v->id);
  for (Term v : f.cutInputs)
    if (used.count(v->id) && !defined.count(v->id))
      g.cutInputs.push_back(v);
  return g;
}

// ---------------------------------------------------------------------------
// Solver

Solver::Solver(SolverConfig cfg) : cfg_(std::move(cfg)) {
  if (cfg_.path.empty())
    cfg_.path = defaultSolverPath();
}

SolverStats Solver::stats() const {
  std::lock_guard<std::mutex> lk(mu_);
  return stats_;
}

void Solver::clearCache() {
  std::lock_guard<std::mutex> lk(mu_);
  cache_.clear();
}

namespace {

struct ProcessResult {
  std::string out;
  bool timedOut = false;
  bool failed = false;
  std::string error;
};

ProcessResult runProcess(const std::vector<std::string> &argv, const std::string &input,
                         unsigned hardMs) {
  ProcessResult res;
  int in[2], out[2];
  if (pipe(in) != 0 || pipe(out) != 0) {
    res.failed = true;
    res.error = "pipe failed";
    return res;
  }
  pid_t pid = fork();
  if (pid < 0) {
    res.failed = true;
    res.error = "fork failed";
    return res;
  }
  if (pid == 0) {
    dup2(in[0], 0);
    dup2(out[1], 1);
    dup2(out[1], 2);
    close(in[0]);
    close(in[1]);
    close(out[0]);
    close(out[1]);
    std::vector<char *> args;
    for (auto &a : argv)
      args.push_back(const_cast<char *>(a.c_str()));
    args.push_back(nullptr);
    execvp(args[0], args.data());
    _exit(127);
  }
  close(in[0]);
  close(out[1]);
  // Solvers parse their input incrementally, so a blocking write is fine.
  signal(SIGPIPE, SIG_IGN);
  size_t off = 0;
  while (off < input.size()) {
    ssize_t n = write(in[1], input.data() + off, input.size() - off);
    if (n <= 0)
      break;
    off += static_cast<size_t>(n);
  }
  close(in[1]);
  auto t0 = std::chrono::steady_clock::now();
  char buf[4096];
  for (;;) {
    int remain = static_cast<int>(hardMs) - static_cast<int>(since(t0) * 1000);
    if (remain <= 0) {
      kill(pid, SIGKILL);
      res.timedOut = true;
      break;
    }
    pollfd p{out[0], POLLIN, 0};
    int r = poll(&p, 1, remain);
    if (r <= 0)
      continue;
    ssize_t n = read(out[0], buf, sizeof buf);
    if (n <= 0)
      break;
    res.out.append(buf, static_cast<size_t>(n));
  }
  close(out[0]);
  int status = 0;
  waitpid(pid, &status, 0);
  if (!res.timedOut && WIFEXITED(status) && WEXITSTATUS(status) == 127) {
    res.failed = true;
    res.error = "cannot execute solver " + argv[0];
  }
  return res;
}

Word parseSmtValue(const std::string &s) {
  if (s.rfind("#x", 0) == 0)
    return std::stoull(s.substr(2), nullptr, 16);
  if (s.rfind("#b", 0) == 0)
    return std::stoull(s.substr(2), nullptr, 2);
  static const std::regex bv(R"(\(_\s+bv(\d+)\s+\d+\))");
  std::smatch m;
  if (std::regex_match(s, m, bv))
    return std::stoull(m[1]);
  throw std::runtime_error("cannot parse solver value " + s);
}

} // namespace

Verdict Solver::runScript(const std::string &script, const std::vector<std::string> &varNames) {
  auto t0 = std::chrono::steady_clock::now();
  std::string full = script;
  if (!varNames.empty()) {
    full += "(get-value (";
    for (size_t i = 0; i < varNames.size(); ++i)
      full += (i ? " " : "") + varNames[i];
    full += "))\n";
  }
  if (!cfg_.dumpDir.empty()) {
    size_t seq;
    {
      std::lock_guard<std::mutex> lk(mu_);
      seq = dumpSeq_++;
    }
    std::filesystem::create_directories(cfg_.dumpDir);
    std::ofstream(std::filesystem::path(cfg_.dumpDir) / ("q" + std::to_string(seq) + ".smt2"))
        << full;
  }
  std::string base = std::filesystem::path(cfg_.path).filename().string();
  std::vector<std::string> argv;
  std::string tmp;
  unsigned hard = cfg_.timeoutMs + 2000;
  if (base.find("z3") != std::string::npos) {
    argv = {cfg_.path, "-in", "-smt2", "-t:" + std::to_string(cfg_.timeoutMs)};
  } else {
    char path[] = "/tmp/bbdse-XXXXXX.smt2";
    int fd = mkstemps(path, 5);
    if (fd < 0) {
      Verdict v;
      v.diagnostic = "cannot create temp file";
      return v;
    }
    ssize_t n = write(fd, full.data(), full.size());
    (void)n;
    close(fd);
    tmp = path;
    argv = {cfg_.path, tmp};
  }
  ProcessResult pr = runProcess(argv, tmp.empty() ? full : std::string(), hard);
  if (!tmp.empty())
    std::filesystem::remove(tmp);
  Verdict v;
  v.source = "solver";
  v.elapsed = since(t0);
  if (pr.failed) {
    v.kind = VerdictKind::UNKNOWN;
    v.diagnostic = pr.error;
    return v;
  }
  std::istringstream os(pr.out);
  std::string first;
  os >> first;
  if (pr.timedOut || first == "timeout") {
    v.kind = VerdictKind::TIMEOUT;
  } else if (first == "sat") {
    v.kind = VerdictKind::SAT;
    static const std::regex pair(R"(\(\s*([A-Za-z_][A-Za-z0-9_]*)\s+(#x[0-9a-fA-F]+|#b[01]+|\(_\s+bv\d+\s+\d+\))\s*\))");
    for (std::sregex_iterator it(pr.out.begin(), pr.out.end(), pair), end; it != end; ++it)
      v.model[(*it)[1]] = parseSmtValue((*it)[2]);
  } else if (first == "unsat") {
    v.kind = VerdictKind::UNSAT;
  } else if (first == "unknown") {
    v.kind = v.elapsed * 1000 >= cfg_.timeoutMs * 0.9 ? VerdictKind::TIMEOUT : VerdictKind::UNKNOWN;
  } else {
    v.kind = VerdictKind::UNKNOWN;
    v.diagnostic = "unexpected solver output: " + pr.out.substr(0, 200);
  }
  return v;
}

Verdict Solver::check(const SliceFormula &f0, const Hint &hint) {
  auto t0 = std::chrono::steady_clock::now();
  {
    std::lock_guard<std::mutex> lk(mu_);
    ++stats_.queries;
  }
  const SliceFormula f = cfg_.pruneUnrelated ? pruneToGoal(f0) : f0;
  auto finish = [&](Verdict v, const char *src) {
    v.source = src;
    v.elapsed = since(t0);
    return v;
  };

  if (cfg_.fastPaths) {
    TermStore &S = *f.store;
    std::unordered_map<uint32_t, Term> sub, memo;
    auto leaf = [&](Term v) {
      auto it = sub.find(v->id);
      return it == sub.end() ? v : it->second;
    };
    for (const auto &d : f.defs)
      sub[d.var->id] = S.rebuild(d.rhs, memo, leaf);
    bool folded = S.rebuild(f.goal, memo, leaf)->isConst() &&
                  S.rebuild(f.goal, memo, leaf)->value == 0;
    for (size_t i = 0; i < f.conds.size() && !folded; ++i) {
      Term c = S.rebuild(f.conds[i].cond, memo, leaf);
      folded = c->isConst() && c->value == 0;
    }
    if (folded) {
      std::lock_guard<std::mutex> lk(mu_);
      ++stats_.folded;
      Verdict v;
      v.kind = VerdictKind::UNSAT;
      return finish(v, "fold");
    }
    CompiledFormula cf(f);
    const auto &ins = cf.inputs();
    std::vector<Word> seen(ins.size(), 0), vals(ins.size());
    for (size_t i = 0; i < ins.size(); ++i)
      if (hint)
        if (auto h = hint(ins[i]))
          seen[i] = *h;
    std::mt19937_64 rng(0x5eed + ins.size() * 7919 + f.constraintCount());
    for (int trial = 0; trial < 48; ++trial) {
      for (size_t i = 0; i < ins.size(); ++i) {
        Word m = widthMask(ins[i]->width);
        if (trial == 0) {
          vals[i] = seen[i];
          continue;
        }
        switch (rng() % 6) {
        case 0: vals[i] = seen[i]; break;
        case 1: vals[i] = 0; break;
        case 2: vals[i] = 1; break;
        case 3: vals[i] = m; break;
        case 4: vals[i] = seen[i] + (rng() % 2 ? 1 : -1); break;
        default: vals[i] = rng(); break;
        }
        vals[i] &= m;
      }
      if (cf.run(vals)) {
        std::lock_guard<std::mutex> lk(mu_);
        ++stats_.sampled;
        Verdict v;
        v.kind = VerdictKind::SAT;
        for (size_t i = 0; i < ins.size(); ++i)
          v.model[ins[i]->name] = vals[i];
        return finish(v, "sample");
      }
    }
  }

  SmtScript script = emitSmt(f, true);
  std::map<std::string, std::string> toOrig(script.names.begin(), script.names.end());
  std::unordered_set<std::string> cutNames;
  for (Term v : f.cutInputs)
    cutNames.insert(v->name);
  std::vector<std::string> query;
  for (auto &[canon, orig] : script.names)
    if (cutNames.count(orig))
      query.push_back(canon);

  if (cfg_.cache) {
    std::lock_guard<std::mutex> lk(mu_);
    auto it = cache_.find(script.text);
    if (it != cache_.end()) {
      ++stats_.cacheHits;
      Verdict v;
      v.kind = it->second.kind;
      for (auto &[n, val] : it->second.model)
        v.model[toOrig.at(n)] = val;
      return finish(v, "cache");
    }
  }

  Verdict v = runScript(script.text, query);
  {
    std::lock_guard<std::mutex> lk(mu_);
    ++stats_.solverCalls;
    stats_.solverSeconds += v.elapsed;
  }
  std::map<std::string, Word> canonModel = v.model;
  if (v.sat()) {
    std::map<std::string, Word> m;
    for (auto &[n, val] : v.model)
      if (toOrig.count(n))
        m[toOrig.at(n)] = val;
    v.model = m;
    CompiledFormula cf(f);
    std::vector<Word> vals;
    for (Term in : cf.inputs())
      vals.push_back(v.model.count(in->name) ? v.model.at(in->name) : 0);
    if (!cf.run(vals)) {
      v.kind = VerdictKind::UNKNOWN;
      v.diagnostic = "solver model does not satisfy the formula";
    }
  }
  if (cfg_.cache && (v.sat() || v.unsat())) {
    std::lock_guard<std::mutex> lk(mu_);
    cache_[script.text] = {v.kind, canonModel};
  }
  v.elapsed = since(t0);
  return v;
}

} // namespace bbdse
