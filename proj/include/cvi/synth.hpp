#pragma once
// Synthetic toy-program generator and interpreter. Programs plant critical
// variables whose guarding branch arms differ by tens of thousands of basic
// blocks under a value flip, next to several decoy families that are
// structurally near-identical but either lack the far opcode signature,
// carry a different near marker, or control no blocks at all. The
// interpreter replays a program on an input vector, optionally flipping one
// variable's value just before its first read, and emits the trace-event
// stream (or just the executed basic-block set, for cheap flip runs).
#include <array>
#include <bit>
#include <cstdint>
#include <fstream>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rng.hpp"
#include "trace.hpp"

namespace cvi::synth {

// ---------------------------------------------------------------------------
// flips

enum class FlipPolicy { BitwiseNot, XorOne, ZeroOne };

inline constexpr std::array<FlipPolicy, 3> kAllFlipPolicies = {
    FlipPolicy::BitwiseNot, FlipPolicy::XorOne, FlipPolicy::ZeroOne};

inline const char* flip_policy_name(FlipPolicy p) {
  switch (p) {
    case FlipPolicy::BitwiseNot: return "bitwise_not";
    case FlipPolicy::XorOne: return "xor_one";
    case FlipPolicy::ZeroOne: return "zero_one";
  }
  return "?";
}

inline FlipPolicy flip_policy_from(const std::string& s) {
  if (s == "bitwise_not") return FlipPolicy::BitwiseNot;
  if (s == "xor_one") return FlipPolicy::XorOne;
  if (s == "zero_one") return FlipPolicy::ZeroOne;
  throw std::runtime_error("unknown flip policy: " + s);
}

inline uint64_t apply_flip(FlipPolicy p, uint64_t v) {
  switch (p) {
    case FlipPolicy::BitwiseNot: return ~v;
    case FlipPolicy::XorOne: return v ^ 1u;
    case FlipPolicy::ZeroOne: return v == 0 ? 1 : 0;
  }
  return v;
}

// Flip one variable's value immediately before its first read.
struct FlipDirective {
  int target_var = -1;
  FlipPolicy policy = FlipPolicy::BitwiseNot;
};

// ---------------------------------------------------------------------------
// program IR

// Role a variable plays in the planted corpus:
//   Critical    labeled 1; far signature opcode, huge block diff under flip
//   Twin        labeled 0; same near neighborhood as its template critical,
//               bland far chain, small block diff
//   FarDecoy    labeled 0; same near neighborhood, bland far chain, huge diff
//   MarkerDecoy labeled 0; different near marker opcode, huge diff
//   Ghost       labeled 0; full structural copy of its template critical but
//               its branch guards no blocks (diff = 0)
//   Pure        labeled 0; plain data flow, no branch at all (diff = 0)
//   Infra       unlabeled plumbing (inputs, hubs, scratch, flags, sinks)
enum class Archetype { Critical, Twin, FarDecoy, MarkerDecoy, Ghost, Pure, Infra };

inline const char* archetype_name(Archetype a) {
  switch (a) {
    case Archetype::Critical: return "critical";
    case Archetype::Twin: return "twin";
    case Archetype::FarDecoy: return "far_decoy";
    case Archetype::MarkerDecoy: return "marker_decoy";
    case Archetype::Ghost: return "ghost";
    case Archetype::Pure: return "pure";
    case Archetype::Infra: return "infra";
  }
  return "?";
}

inline Archetype archetype_from(const std::string& s) {
  if (s == "critical") return Archetype::Critical;
  if (s == "twin") return Archetype::Twin;
  if (s == "far_decoy") return Archetype::FarDecoy;
  if (s == "marker_decoy") return Archetype::MarkerDecoy;
  if (s == "ghost") return Archetype::Ghost;
  if (s == "pure") return Archetype::Pure;
  if (s == "infra") return Archetype::Infra;
  throw std::runtime_error("unknown archetype: " + s);
}

inline const char* storage_class_name(StorageClass s) {
  switch (s) {
    case StorageClass::Global: return "global";
    case StorageClass::Stack: return "stack";
    case StorageClass::Heap: return "heap";
  }
  return "?";
}

inline StorageClass storage_class_from(const std::string& s) {
  if (s == "global") return StorageClass::Global;
  if (s == "stack") return StorageClass::Stack;
  if (s == "heap") return StorageClass::Heap;
  throw std::runtime_error("unknown storage class: " + s);
}

struct VarDecl {
  int id = -1;
  std::string name;
  StorageClass storage = StorageClass::Global;
  uint64_t addr = 0;
  uint64_t size = 8;
  bool labeled = false;
  bool critical = false;  // ground truth for labeled variables
  Archetype archetype = Archetype::Infra;
  int template_of = -1;  // labeled var whose near neighborhood this one copies
};

// A contiguous run of filler blocks [first_bb, first_bb + count).
struct ArmSpec {
  uint64_t first_bb = 0;
  uint32_t count = 0;
};

struct Step {
  enum class Kind { Op, Guard, Enter, Exit, Alloc, Free, Label };
  Kind kind = Kind::Op;
  uint64_t bb = 0;
  // Op: dst = opcode(srcs); input_slot >= 0 loads from the run input instead
  std::string opcode;
  int dst = -1;
  std::vector<int> srcs;
  int input_slot = -1;
  // Guard: flag = guard_var & 1, then branch; odd takes the flipped arm
  int guard_var = -1;
  int flag_var = -1;
  ArmSpec normal_arm, flipped_arm;
  // Enter / Exit
  std::string fn;
  uint64_t sp = 0;
  // Alloc / Free / Label
  int var = -1;
};

struct ToyProgram {
  std::string name;
  std::vector<VarDecl> vars;
  std::vector<Step> steps;
  int n_inputs = 0;
  uint64_t entry_sp = 0;
  uint64_t n_blocks = 0;  // block ids are fixed at generation: [0, n_blocks)
};

// ---------------------------------------------------------------------------
// interpreter

inline uint64_t eval_op(const std::string& op, uint64_t a, uint64_t b) {
  if (op == "mov") return a;
  if (op == "add") return a + b;
  if (op == "sub") return a - b;
  if (op == "xor") return a ^ b;
  if (op == "and") return a & b;
  if (op == "or") return a | b;
  if (op == "shl") return a << 1;
  if (op == "shr") return a >> 1;
  if (op == "mul") return a * b;
  if (op == "lea") return a + 2 * b;
  if (op == "sbb") return a - b - 1;
  if (op == "adc") return a + b + 1;
  if (op == "bt") return (a >> 1) | (a << 63);
  if (op == "rcl") return (a << 1) | (a >> 63);
  if (op == "rcr") return (a >> 2) | (a << 62);
  if (op == "bsf") return static_cast<uint64_t>(std::countr_zero(a));
  if (op == "bsr") return static_cast<uint64_t>(std::bit_width(a));
  if (op == "popcnt") return static_cast<uint64_t>(std::popcount(a));
  if (op == "btc") return a ^ 1;
  throw std::runtime_error("eval_op: unknown opcode: " + op);
}

// Replays the program, streaming every trace event to `sink`. The flip, if
// any, rewrites the target variable's value at its first read; a target that
// is never read leaves the event stream untouched.
template <class SinkFn>
inline void execute(const ToyProgram& p, const std::vector<uint64_t>& input,
                    const std::optional<FlipDirective>& flip, SinkFn&& sink) {
  if (p.n_inputs > 0 && input.empty())
    throw std::invalid_argument("execute: program expects a non-empty input vector");
  if (flip && (flip->target_var < 0 ||
               flip->target_var >= static_cast<int>(p.vars.size())))
    throw std::invalid_argument("execute: flip target out of range");

  std::vector<uint64_t> vals(p.vars.size(), 0);
  bool flip_pending = flip.has_value();
  const auto read_var = [&](int v) -> uint64_t {
    if (flip_pending && v == flip->target_var) {
      vals[v] = apply_flip(flip->policy, vals[v]);
      flip_pending = false;
    }
    return vals[v];
  };
  const auto mem = [&](int v) {
    Operand op;
    op.kind = OperandKind::Mem;
    op.addr = p.vars[v].addr;
    op.size = p.vars[v].size;
    return op;
  };
  const auto pc_of = [](uint64_t bb) { return 0x400000 + 4 * bb; };

  // Reused buffer for arm filler instructions: register-only, so flip runs
  // through huge arms allocate nothing per event.
  TraceEvent filler;
  filler.kind = EventKind::Ins;
  filler.opcode = "mov";
  filler.writes.resize(1);
  filler.writes[0].kind = OperandKind::Reg;
  filler.writes[0].name = "rt";

  for (const auto& st : p.steps) {
    switch (st.kind) {
      case Step::Kind::Op: {
        uint64_t out;
        if (st.input_slot >= 0) {
          out = input[static_cast<size_t>(st.input_slot) % input.size()];
        } else {
          const uint64_t a = read_var(st.srcs.at(0));
          const uint64_t b = st.srcs.size() > 1 ? read_var(st.srcs[1]) : 0;
          out = eval_op(st.opcode, a, b);
        }
        TraceEvent ev;
        ev.kind = EventKind::Ins;
        ev.pc = pc_of(st.bb);
        ev.bb = st.bb;
        ev.opcode = st.opcode;
        if (st.input_slot < 0)
          for (int s : st.srcs) ev.reads.push_back(mem(s));
        ev.writes.push_back(mem(st.dst));
        vals[st.dst] = out;
        sink(ev);
        break;
      }
      case Step::Kind::Guard: {
        const uint64_t v = read_var(st.guard_var);
        vals[st.flag_var] = v & 1;
        TraceEvent cmp;
        cmp.kind = EventKind::Ins;
        cmp.pc = pc_of(st.bb);
        cmp.bb = st.bb;
        cmp.opcode = "cmp";
        cmp.reads.push_back(mem(st.guard_var));
        cmp.writes.push_back(mem(st.flag_var));
        sink(cmp);
        const uint64_t fl = read_var(st.flag_var);
        TraceEvent jnz;
        jnz.kind = EventKind::Ins;
        jnz.pc = pc_of(st.bb) + 1;
        jnz.bb = st.bb;
        jnz.opcode = "jnz";
        jnz.reads.push_back(mem(st.flag_var));
        sink(jnz);
        const ArmSpec& arm = (fl & 1) ? st.flipped_arm : st.normal_arm;
        for (uint32_t i = 0; i < arm.count; ++i) {
          filler.bb = arm.first_bb + i;
          filler.pc = pc_of(filler.bb);
          sink(filler);
        }
        break;
      }
      case Step::Kind::Enter: {
        TraceEvent ev;
        ev.kind = EventKind::Enter;
        ev.fn = st.fn;
        ev.sp = st.sp;
        sink(ev);
        break;
      }
      case Step::Kind::Exit: {
        TraceEvent ev;
        ev.kind = EventKind::Exit;
        ev.fn = st.fn;
        sink(ev);
        break;
      }
      case Step::Kind::Alloc: {
        TraceEvent ev;
        ev.kind = EventKind::Alloc;
        ev.base = p.vars[st.var].addr;
        ev.size = p.vars[st.var].size;
        sink(ev);
        break;
      }
      case Step::Kind::Free: {
        TraceEvent ev;
        ev.kind = EventKind::Free;
        ev.base = p.vars[st.var].addr;
        sink(ev);
        break;
      }
      case Step::Kind::Label: {
        TraceEvent ev;
        ev.kind = EventKind::Label;
        ev.addr = p.vars[st.var].addr;
        ev.size = p.vars[st.var].size;
        ev.name = p.vars[st.var].name;
        ev.critical = p.vars[st.var].critical;
        sink(ev);
        break;
      }
    }
  }
}

inline Trace run(const ToyProgram& p, const std::vector<uint64_t>& input,
                 const std::optional<FlipDirective>& flip = std::nullopt,
                 const std::string& input_id = "i0") {
  Trace t;
  t.program = p.name;
  t.input_id = input_id;
  execute(p, input, flip, [&](const TraceEvent& ev) { t.events.push_back(ev); });
  return t;
}

// Cheap variant for flip measurements: only the set of executed block ids.
inline std::set<uint64_t> run_bb_set(
    const ToyProgram& p, const std::vector<uint64_t>& input,
    const std::optional<FlipDirective>& flip = std::nullopt) {
  std::set<uint64_t> bbs;
  execute(p, input, flip, [&](const TraceEvent& ev) {
    if (ev.kind == EventKind::Ins) bbs.insert(ev.bb);
  });
  return bbs;
}

inline std::vector<uint64_t> default_input(const ToyProgram& p, uint64_t seed = 0) {
  Rng rng(derive_seed(seed, 0xD0, p.vars.empty() ? 0 : p.vars.size()));
  std::vector<uint64_t> in(static_cast<size_t>(p.n_inputs > 0 ? p.n_inputs : 1));
  for (auto& v : in) v = rng.next_u64();
  return in;
}

// ---------------------------------------------------------------------------
// generator

namespace detail {

// Per-write recipe: opcode[i] is the i-th operation upstream of the variable
// write (1 = the write itself), so opcode[i] sits 2i-1 edges from the
// variable's node in the flow graph. Index 1 is always "shl" (forcing the
// guarded value even so the dry run takes the normal arm), index 2 the near
// marker, index 3 mixes in a hub, index 8 loads from an input. A signature
// index in [5,7] places the far opcode 9-13 edges out; only the first write
// of a variable carries it, so one redefinition is informative and the rest
// are filler. Critical templates additionally carry the program's dialect
// opcode at index 4 (7 edges out) on every write after the first, keeping
// the signature write clean: within a program the dialect marks critical and
// ghost chains, but the token differs from program to program, so context
// absorbed that far out does not transfer to an unseen program.
struct WriteChain {
  std::array<std::string, 9> opcode;
  int sig_idx = -1;
};

struct ChainTemplate {
  int w = 0;  // number of redefinitions (live-variables) of the variable
  std::vector<WriteChain> writes;
};

inline const std::vector<std::string>& bland_ops() {
  static const std::vector<std::string> ops = {"mov", "add", "xor", "lea",
                                               "sub", "or",  "shr", "mul"};
  return ops;
}

inline ChainTemplate draw_template(Rng& rng, bool with_signature,
                                   const std::string& dialect = {}) {
  ChainTemplate t;
  t.w = 2 + static_cast<int>(rng.below(5));
  t.writes.resize(static_cast<size_t>(t.w));
  for (size_t wi = 0; wi < t.writes.size(); ++wi) {
    auto& wc = t.writes[wi];
    wc.opcode[1] = "shl";
    wc.opcode[2] = "bt";
    for (int i = 3; i <= 7; ++i) wc.opcode[i] = rng.pick(bland_ops());
    if (!dialect.empty() && wi > 0) wc.opcode[4] = dialect;
    wc.opcode[8] = "mov";
  }
  if (with_signature) {
    auto& wc = t.writes[0];
    wc.sig_idx = 5 + static_cast<int>(rng.below(3));
    wc.opcode[static_cast<size_t>(wc.sig_idx)] = rng.below(2) ? "adc" : "sbb";
  }
  return t;
}

// Twin / FarDecoy / MarkerDecoy keep the template's near half (indices <= 3,
// within any 6-edge ball around the variable) and redraw the far half,
// dialect included, with bland opcodes only; MarkerDecoy also swaps the near
// marker. Ghost copies everything.
inline ChainTemplate derive_template(const ChainTemplate& base, Archetype a, Rng& rng) {
  ChainTemplate t = base;
  if (a == Archetype::Ghost) return t;
  for (auto& wc : t.writes) {
    for (int i = 4; i <= 7; ++i) wc.opcode[i] = rng.pick(bland_ops());
    wc.opcode[8] = "mov";
    wc.sig_idx = -1;
    if (a == Archetype::MarkerDecoy) wc.opcode[2] = "and";
  }
  return t;
}

inline const std::array<Archetype, 34>& group_pattern() {
  using A = Archetype;
  static const std::array<Archetype, 34> p = {
      A::Critical, A::Twin,     A::FarDecoy,    A::Ghost,    A::Pure,
      A::Critical, A::FarDecoy, A::MarkerDecoy, A::Critical, A::Twin,
      A::Ghost,    A::Critical, A::FarDecoy,    A::Pure,     A::Critical,
      A::MarkerDecoy, A::Twin,  A::Critical,    A::FarDecoy, A::Ghost,
      A::Critical, A::Pure,     A::FarDecoy,    A::Critical, A::Twin,
      A::MarkerDecoy, A::Ghost, A::Critical,    A::FarDecoy, A::Twin,
      A::Critical, A::MarkerDecoy, A::Ghost,    A::Pure};
  return p;
}

}  // namespace detail

// Generates `n_programs` toy programs, each declaring `n_vars` labeled
// variables drawn round-robin from the archetype mix (roughly 29% critical).
// All structure, addresses and block ids are fixed here; the interpreter
// only replays them.
inline std::vector<ToyProgram> generate(uint64_t seed, int n_programs, int n_vars) {
  if (n_programs < 1) throw std::invalid_argument("generate: n_programs must be >= 1");
  if (n_vars < 4) throw std::invalid_argument("generate: n_vars must be >= 4");

  constexpr int kInputs = 8;
  constexpr int kHubs = 12;
  const std::array<StorageClass, 6> storage_cycle = {
      StorageClass::Global, StorageClass::Stack, StorageClass::Global,
      StorageClass::Heap,   StorageClass::Global, StorageClass::Stack};
  // One dialect opcode per program, round-robin.
  const std::array<const char*, 6> dialect_pool = {"rcl",    "rcr", "bsf",
                                                   "bsr", "popcnt", "btc"};

  std::vector<ToyProgram> out;
  out.reserve(static_cast<size_t>(n_programs));
  for (int pi = 0; pi < n_programs; ++pi) {
    Rng rng(derive_seed(seed, static_cast<uint64_t>(pi), 0x5EED));
    ToyProgram p;
    p.name = "prog" + std::to_string(pi);
    p.entry_sp = 0x7FFF0000;
    p.n_inputs = kInputs;

    uint64_t global_next = 0x10000;
    uint64_t heap_next = 0x40000000;
    int stack_slots = 0;
    uint64_t bb = 0;
    int scratch_n = 0;

    const auto add_var = [&](std::string name, StorageClass sc, Archetype at,
                             bool labeled, bool critical) {
      // The callee frame window holds at most 500 slots; past that, spill
      // labeled variables to globals.
      if (sc == StorageClass::Stack && stack_slots >= 500) sc = StorageClass::Global;
      VarDecl d;
      d.id = static_cast<int>(p.vars.size());
      d.name = std::move(name);
      d.storage = sc;
      d.labeled = labeled;
      d.critical = critical;
      d.archetype = at;
      switch (sc) {
        case StorageClass::Global: d.addr = global_next; global_next += 8; break;
        case StorageClass::Stack:
          ++stack_slots;
          d.addr = (p.entry_sp - 0x1000) - 8 * static_cast<uint64_t>(stack_slots);
          break;
        case StorageClass::Heap: d.addr = heap_next; heap_next += 16; break;
      }
      p.vars.push_back(d);
      return d.id;
    };
    const auto scratch = [&](const char* prefix) {
      return add_var(prefix + std::to_string(scratch_n++), StorageClass::Global,
                     Archetype::Infra, false, false);
    };
    const auto op_step = [&](std::string opcode, int dst, std::vector<int> srcs,
                             int input_slot = -1) {
      Step st;
      st.kind = Step::Kind::Op;
      st.opcode = std::move(opcode);
      st.dst = dst;
      st.srcs = std::move(srcs);
      st.input_slot = input_slot;
      st.bb = bb++;
      p.steps.push_back(std::move(st));
    };

    Step enter_main;
    enter_main.kind = Step::Kind::Enter;
    enter_main.fn = "main";
    enter_main.sp = p.entry_sp;
    p.steps.push_back(enter_main);

    std::array<int, kInputs> inputs{};
    for (int j = 0; j < kInputs; ++j) {
      inputs[static_cast<size_t>(j)] =
          add_var("in" + std::to_string(j), StorageClass::Global, Archetype::Infra,
                  false, false);
      op_step("mov", inputs[static_cast<size_t>(j)], {}, j);
    }
    std::array<int, kHubs> hubs{};
    for (int h = 0; h < kHubs; ++h) {
      hubs[static_cast<size_t>(h)] =
          add_var("hub" + std::to_string(h), StorageClass::Global, Archetype::Infra,
                  false, false);
      op_step("mov", hubs[static_cast<size_t>(h)], {inputs[static_cast<size_t>(h % kInputs)]});
    }

    detail::ChainTemplate last_critical;
    int last_critical_var = -1;
    std::vector<int> heap_vars;

    for (int i = 0; i < n_vars; ++i) {
      const Archetype tag = detail::group_pattern()[static_cast<size_t>(i) % 34];
      const StorageClass sc = storage_cycle[static_cast<size_t>(i) % 6];
      const bool derived = tag == Archetype::Twin || tag == Archetype::FarDecoy ||
                           tag == Archetype::MarkerDecoy || tag == Archetype::Ghost;

      detail::ChainTemplate tmpl;
      if (tag == Archetype::Critical) {
        tmpl = detail::draw_template(
            rng, true, dialect_pool[static_cast<size_t>(pi) % dialect_pool.size()]);
      } else if (tag == Archetype::Pure || last_critical_var < 0) {
        tmpl = detail::draw_template(rng, false);
      } else {
        tmpl = detail::derive_template(last_critical, tag, rng);
      }

      const int X = add_var("v" + std::to_string(i), sc, tag, true,
                            tag == Archetype::Critical);
      if (derived && last_critical_var >= 0) p.vars[static_cast<size_t>(X)].template_of = last_critical_var;
      if (tag == Archetype::Critical) {
        last_critical = tmpl;
        last_critical_var = X;
      }

      const bool framed = p.vars[static_cast<size_t>(X)].storage == StorageClass::Stack;
      if (framed) {
        Step en;
        en.kind = Step::Kind::Enter;
        en.fn = "fn" + std::to_string(i);
        en.sp = p.entry_sp - 0x1000;
        p.steps.push_back(en);
      }
      if (p.vars[static_cast<size_t>(X)].storage == StorageClass::Heap) {
        Step al;
        al.kind = Step::Kind::Alloc;
        al.var = X;
        p.steps.push_back(al);
        heap_vars.push_back(X);
      }
      Step lb;
      lb.kind = Step::Kind::Label;
      lb.var = X;
      p.steps.push_back(lb);

      for (int wi = 0; wi < tmpl.w; ++wi) {
        const auto& wc = tmpl.writes[static_cast<size_t>(wi)];
        int prev = scratch("c");
        op_step("mov", prev, {}, (i * 7 + wi * 3 + pi) % kInputs);
        for (int idx = 7; idx >= 2; --idx) {
          std::vector<int> srcs = {prev};
          // Marker decoys drain a hub through the swapped marker itself, so
          // the opposing marker sits one hop past the hub and leaks into
          // other chains' neighborhoods only at radius 7 and beyond.
          if (idx == 3 || (idx == 2 && tag == Archetype::MarkerDecoy)) {
            srcs.push_back(hubs[static_cast<size_t>(i + wi) % kHubs]);
          } else if (idx == wc.sig_idx) {
            const int s = scratch("s");
            op_step("mov", s, {}, (i + wi + 1) % kInputs);
            srcs.push_back(s);
          }
          const int next_c = scratch("c");
          op_step(wc.opcode[static_cast<size_t>(idx)], next_c, std::move(srcs));
          prev = next_c;
        }
        op_step(wc.opcode[1], X, {prev});
      }

      if (tag == Archetype::Pure) {
        op_step("mov", scratch("k"), {X});
      } else {
        Step g;
        g.kind = Step::Kind::Guard;
        g.guard_var = X;
        g.flag_var = scratch("f");
        g.bb = bb++;
        uint32_t flip_blocks = 0;
        uint32_t normal_blocks = 0;
        if (tag == Archetype::Twin) {
          flip_blocks = 400 + static_cast<uint32_t>(rng.below(2101));
          normal_blocks = 3;
        } else if (tag != Archetype::Ghost) {
          flip_blocks = 53000 + static_cast<uint32_t>(rng.below(12001));
          normal_blocks = 3;
        }
        g.normal_arm = {bb, normal_blocks};
        bb += normal_blocks;
        g.flipped_arm = {bb, flip_blocks};
        bb += flip_blocks;
        p.steps.push_back(g);
      }

      if (framed) {
        Step ex;
        ex.kind = Step::Kind::Exit;
        ex.fn = "fn" + std::to_string(i);
        p.steps.push_back(ex);
      }
    }

    for (int hv : heap_vars) {
      Step fr;
      fr.kind = Step::Kind::Free;
      fr.var = hv;
      p.steps.push_back(fr);
    }
    Step exit_main;
    exit_main.kind = Step::Kind::Exit;
    exit_main.fn = "main";
    p.steps.push_back(exit_main);

    p.n_blocks = bb;
    out.push_back(std::move(p));
  }
  return out;
}

// ---------------------------------------------------------------------------
// serialization

inline nlohmann::json program_to_json(const ToyProgram& p) {
  nlohmann::json j;
  j["name"] = p.name;
  j["n_inputs"] = p.n_inputs;
  j["entry_sp"] = p.entry_sp;
  j["n_blocks"] = p.n_blocks;
  nlohmann::json vars = nlohmann::json::array();
  for (const auto& v : p.vars) {
    nlohmann::json vj;
    vj["id"] = v.id;
    vj["name"] = v.name;
    vj["storage"] = storage_class_name(v.storage);
    vj["addr"] = v.addr;
    vj["size"] = v.size;
    vj["labeled"] = v.labeled;
    vj["critical"] = v.critical;
    vj["archetype"] = archetype_name(v.archetype);
    vj["template_of"] = v.template_of;
    vars.push_back(std::move(vj));
  }
  j["vars"] = std::move(vars);
  nlohmann::json steps = nlohmann::json::array();
  for (const auto& st : p.steps) {
    nlohmann::json sj;
    switch (st.kind) {
      case Step::Kind::Op:
        sj["kind"] = "op";
        sj["bb"] = st.bb;
        sj["op"] = st.opcode;
        sj["dst"] = st.dst;
        sj["srcs"] = st.srcs;
        if (st.input_slot >= 0) sj["input_slot"] = st.input_slot;
        break;
      case Step::Kind::Guard:
        sj["kind"] = "guard";
        sj["bb"] = st.bb;
        sj["guard"] = st.guard_var;
        sj["flag"] = st.flag_var;
        sj["normal"] = {st.normal_arm.first_bb, st.normal_arm.count};
        sj["flipped"] = {st.flipped_arm.first_bb, st.flipped_arm.count};
        break;
      case Step::Kind::Enter:
        sj["kind"] = "enter";
        sj["fn"] = st.fn;
        sj["sp"] = st.sp;
        break;
      case Step::Kind::Exit:
        sj["kind"] = "exit";
        sj["fn"] = st.fn;
        break;
      case Step::Kind::Alloc:
        sj["kind"] = "alloc";
        sj["var"] = st.var;
        break;
      case Step::Kind::Free:
        sj["kind"] = "free";
        sj["var"] = st.var;
        break;
      case Step::Kind::Label:
        sj["kind"] = "label";
        sj["var"] = st.var;
        break;
    }
    steps.push_back(std::move(sj));
  }
  j["steps"] = std::move(steps);
  return j;
}

inline ToyProgram program_from_json(const nlohmann::json& j) {
  ToyProgram p;
  p.name = j.at("name").get<std::string>();
  p.n_inputs = j.at("n_inputs").get<int>();
  p.entry_sp = j.at("entry_sp").get<uint64_t>();
  p.n_blocks = j.at("n_blocks").get<uint64_t>();
  for (const auto& vj : j.at("vars")) {
    VarDecl v;
    v.id = vj.at("id").get<int>();
    if (v.id != static_cast<int>(p.vars.size()))
      throw std::runtime_error("program_from_json: variable ids must be contiguous");
    v.name = vj.at("name").get<std::string>();
    v.storage = storage_class_from(vj.at("storage").get<std::string>());
    v.addr = vj.at("addr").get<uint64_t>();
    v.size = vj.at("size").get<uint64_t>();
    v.labeled = vj.at("labeled").get<bool>();
    v.critical = vj.at("critical").get<bool>();
    v.archetype = archetype_from(vj.at("archetype").get<std::string>());
    v.template_of = vj.at("template_of").get<int>();
    p.vars.push_back(std::move(v));
  }
  const auto check_var = [&](int v) {
    if (v < 0 || v >= static_cast<int>(p.vars.size()))
      throw std::runtime_error("program_from_json: variable reference out of range");
    return v;
  };
  for (const auto& sj : j.at("steps")) {
    Step st;
    const std::string kind = sj.at("kind").get<std::string>();
    if (kind == "op") {
      st.kind = Step::Kind::Op;
      st.bb = sj.at("bb").get<uint64_t>();
      st.opcode = sj.at("op").get<std::string>();
      st.dst = check_var(sj.at("dst").get<int>());
      for (const auto& s : sj.at("srcs")) st.srcs.push_back(check_var(s.get<int>()));
      if (sj.contains("input_slot")) st.input_slot = sj.at("input_slot").get<int>();
    } else if (kind == "guard") {
      st.kind = Step::Kind::Guard;
      st.bb = sj.at("bb").get<uint64_t>();
      st.guard_var = check_var(sj.at("guard").get<int>());
      st.flag_var = check_var(sj.at("flag").get<int>());
      st.normal_arm = {sj.at("normal").at(0).get<uint64_t>(),
                       sj.at("normal").at(1).get<uint32_t>()};
      st.flipped_arm = {sj.at("flipped").at(0).get<uint64_t>(),
                        sj.at("flipped").at(1).get<uint32_t>()};
    } else if (kind == "enter") {
      st.kind = Step::Kind::Enter;
      st.fn = sj.at("fn").get<std::string>();
      st.sp = sj.at("sp").get<uint64_t>();
    } else if (kind == "exit") {
      st.kind = Step::Kind::Exit;
      st.fn = sj.at("fn").get<std::string>();
    } else if (kind == "alloc") {
      st.kind = Step::Kind::Alloc;
      st.var = check_var(sj.at("var").get<int>());
    } else if (kind == "free") {
      st.kind = Step::Kind::Free;
      st.var = check_var(sj.at("var").get<int>());
    } else if (kind == "label") {
      st.kind = Step::Kind::Label;
      st.var = check_var(sj.at("var").get<int>());
    } else {
      throw std::runtime_error("program_from_json: unknown step kind: " + kind);
    }
    p.steps.push_back(std::move(st));
  }
  return p;
}

inline void save_program(const ToyProgram& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("save_program: cannot open " + path);
  out << program_to_json(p).dump(1) << "\n";
}

inline ToyProgram load_program(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("load_program: cannot open " + path);
  nlohmann::json j;
  in >> j;
  return program_from_json(j);
}

}  // namespace cvi::synth
