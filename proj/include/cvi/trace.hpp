#pragma once
// Trace file format (one JSON object per line), parser/serializer, and the
// liveness analysis that turns raw events into live-variables and variable
// instances. A live-variable is one memory region holding one value between
// its defining write (or lifetime start, for read-before-write) and its
// redefinition or death; a variable instance groups the live-variables of
// one region over one lifetime (whole trace for globals, Enter..Exit for
// stack, Alloc..Free for heap).
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <istream>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

namespace cvi {

enum class EventKind { Ins, Enter, Exit, Alloc, Free, Label };
enum class OperandKind { Reg, Mem };
enum class StorageClass { Global, Stack, Heap };

struct Operand {
  OperandKind kind = OperandKind::Reg;
  std::string name;          // Reg: register token
  uint64_t addr = 0;         // Mem
  uint64_t size = 0;         // Mem
  std::string via;           // Mem: register used to compute the address ("" = none)
};

struct TraceEvent {
  EventKind kind = EventKind::Ins;
  // Ins
  uint64_t pc = 0;
  uint64_t bb = 0;
  std::string opcode;
  std::vector<Operand> reads, writes;
  // Enter / Exit
  std::string fn;
  uint64_t sp = 0;
  // Alloc / Free
  uint64_t base = 0;
  // Label
  uint64_t addr = 0;
  std::string name;
  bool critical = false;
  // Alloc and Label share a byte count
  uint64_t size = 0;
};

struct Trace {
  std::string program;
  std::string input_id;
  std::vector<TraceEvent> events;
};

struct LiveVariable {
  int id = -1;
  uint64_t base = 0, size = 0;
  size_t defined_at = 0;
  std::optional<size_t> dead_at;
  StorageClass storage = StorageClass::Global;
  int instance = -1;
};

struct VariableInstance {
  int id = -1;
  uint64_t base = 0, size = 0;
  size_t lifetime_start = 0;
  size_t lifetime_end = 0;  // exclusive; events.size() when open at trace end
  std::vector<int> live_vars;  // definition order
  std::optional<bool> label;
  std::string name;
  StorageClass storage = StorageClass::Global;
};

// Per-Ins resolution of memory operands to live-variable ids, in operand
// order: read_lvs[i] is the live-variable read by the i-th Mem read,
// write_lvs[i] the live-variable created by the i-th Mem write. Graph
// construction consumes this instead of re-running the region bookkeeping.
struct InsAccess {
  std::vector<int> read_lvs;
  std::vector<int> write_lvs;
};

struct LivenessResult {
  std::vector<LiveVariable> live_vars;
  std::vector<VariableInstance> instances;
  std::vector<InsAccess> per_event;  // parallel to trace.events
};

// ---------------------------------------------------------------------------
// parsing / serialization

inline TraceEvent parse_event_json(const nlohmann::json& j) {
  TraceEvent ev;
  const std::string k = j.at("k").get<std::string>();
  if (k == "ins") {
    ev.kind = EventKind::Ins;
    ev.pc = j.at("pc").get<uint64_t>();
    ev.bb = j.at("bb").get<uint64_t>();
    ev.opcode = j.at("op").get<std::string>();
    if (ev.opcode.empty()) throw std::runtime_error("empty opcode");
    const auto parse_ops = [](const nlohmann::json& arr) {
      std::vector<Operand> ops;
      for (const auto& oj : arr) {
        Operand op;
        const std::string t = oj.at("t").get<std::string>();
        if (t == "reg") {
          op.kind = OperandKind::Reg;
          op.name = oj.at("name").get<std::string>();
        } else if (t == "mem") {
          op.kind = OperandKind::Mem;
          op.addr = oj.at("addr").get<uint64_t>();
          op.size = oj.at("size").get<uint64_t>();
          if (op.size == 0) throw std::runtime_error("mem operand size 0");
          if (oj.contains("via")) op.via = oj.at("via").get<std::string>();
        } else {
          throw std::runtime_error("unknown operand kind: " + t);
        }
        ops.push_back(std::move(op));
      }
      return ops;
    };
    if (j.contains("reads")) ev.reads = parse_ops(j.at("reads"));
    if (j.contains("writes")) ev.writes = parse_ops(j.at("writes"));
  } else if (k == "enter" || k == "exit") {
    ev.kind = k == "enter" ? EventKind::Enter : EventKind::Exit;
    ev.fn = j.at("fn").get<std::string>();
    if (j.contains("sp")) ev.sp = j.at("sp").get<uint64_t>();
  } else if (k == "alloc") {
    ev.kind = EventKind::Alloc;
    ev.base = j.at("base").get<uint64_t>();
    ev.size = j.at("size").get<uint64_t>();
  } else if (k == "free") {
    ev.kind = EventKind::Free;
    ev.base = j.at("base").get<uint64_t>();
  } else if (k == "label") {
    ev.kind = EventKind::Label;
    ev.addr = j.at("addr").get<uint64_t>();
    ev.size = j.at("size").get<uint64_t>();
    ev.name = j.at("name").get<std::string>();
    ev.critical = j.at("critical").get<bool>();
  } else {
    throw std::runtime_error("unknown event kind: " + k);
  }
  return ev;
}

inline Trace parse_trace(std::istream& in) {
  Trace tr;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      tr.events.push_back(parse_event_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error("trace parse error at line " +
                               std::to_string(lineno) + ": " + e.what());
    }
  }
  return tr;
}

inline Trace parse_trace(const std::string& text) {
  std::istringstream in(text);
  return parse_trace(in);
}

inline Trace parse_trace_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open trace file: " + path);
  Trace tr = parse_trace(in);
  return tr;
}

inline nlohmann::json event_to_json(const TraceEvent& ev) {
  nlohmann::json j;
  const auto ops_json = [](const std::vector<Operand>& ops) {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& op : ops) {
      if (op.kind == OperandKind::Reg) {
        arr.push_back({{"t", "reg"}, {"name", op.name}});
      } else {
        nlohmann::json oj{{"t", "mem"}, {"addr", op.addr}, {"size", op.size}};
        if (!op.via.empty()) oj["via"] = op.via;
        arr.push_back(std::move(oj));
      }
    }
    return arr;
  };
  switch (ev.kind) {
    case EventKind::Ins:
      j["k"] = "ins";
      j["pc"] = ev.pc;
      j["bb"] = ev.bb;
      j["op"] = ev.opcode;
      j["reads"] = ops_json(ev.reads);
      j["writes"] = ops_json(ev.writes);
      break;
    case EventKind::Enter:
      j["k"] = "enter";
      j["fn"] = ev.fn;
      j["sp"] = ev.sp;
      break;
    case EventKind::Exit:
      j["k"] = "exit";
      j["fn"] = ev.fn;
      j["sp"] = ev.sp;
      break;
    case EventKind::Alloc:
      j["k"] = "alloc";
      j["base"] = ev.base;
      j["size"] = ev.size;
      break;
    case EventKind::Free:
      j["k"] = "free";
      j["base"] = ev.base;
      break;
    case EventKind::Label:
      j["k"] = "label";
      j["addr"] = ev.addr;
      j["size"] = ev.size;
      j["name"] = ev.name;
      j["critical"] = ev.critical;
      break;
  }
  return j;
}

inline void serialize_trace(const Trace& tr, std::ostream& out) {
  for (const auto& ev : tr.events) out << event_to_json(ev).dump() << '\n';
}

inline std::string serialize_trace(const Trace& tr) {
  std::ostringstream out;
  serialize_trace(tr, out);
  return out.str();
}

// ---------------------------------------------------------------------------
// liveness

// Stack attribution window: a write at addr belongs to the innermost active
// frame whose entry sp satisfies addr < sp && sp - addr <= this many bytes.
inline constexpr uint64_t kStackWindow = 4096;

namespace detail {

struct RegionKey {
  uint64_t addr, size;
  bool operator<(const RegionKey& o) const {
    return addr != o.addr ? addr < o.addr : size < o.size;
  }
};

}  // namespace detail

inline LivenessResult analyze_liveness(const Trace& trace) {
  using detail::RegionKey;
  LivenessResult res;
  res.per_event.resize(trace.events.size());

  struct Frame {
    std::string fn;
    uint64_t sp;
    size_t enter_idx;
    std::vector<RegionKey> owned;
  };
  struct HeapAlloc {
    uint64_t base, size;
    size_t alloc_idx;
    std::vector<RegionKey> owned;
  };
  struct RegionState {
    int instance = -1;  // open instance, -1 if none
    int live = -1;      // open live-variable, -1 if none
  };

  std::vector<Frame> frames;
  std::map<uint64_t, HeapAlloc> heap;          // active allocations by base
  std::map<uint64_t, uint64_t> freed;          // past allocations base -> size
  std::map<RegionKey, RegionState> regions;
  std::map<RegionKey, std::pair<std::string, bool>> pending_labels;

  const auto close_region = [&](const RegionKey& key, size_t at) {
    RegionState& st = regions[key];
    if (st.live >= 0) {
      res.live_vars[static_cast<size_t>(st.live)].dead_at = at;
      st.live = -1;
    }
    if (st.instance >= 0) {
      res.instances[static_cast<size_t>(st.instance)].lifetime_end = at;
      st.instance = -1;
    }
  };

  // classification of an address at the current point of the walk
  struct Placement {
    StorageClass storage;
    size_t lifetime_start;
    int owner_frame = -1;   // index into frames
    uint64_t owner_heap = 0;
    bool heap_owned = false;
  };
  const auto classify = [&](uint64_t addr, size_t now) -> Placement {
    auto it = heap.upper_bound(addr);
    if (it != heap.begin()) {
      --it;
      if (addr < it->second.base + it->second.size)
        return {StorageClass::Heap, it->second.alloc_idx, -1, it->first, true};
    }
    for (int i = static_cast<int>(frames.size()) - 1; i >= 0; --i) {
      const Frame& f = frames[static_cast<size_t>(i)];
      if (addr < f.sp && f.sp - addr <= kStackWindow)
        return {StorageClass::Stack, f.enter_idx, i, 0, false};
    }
    auto ft = freed.upper_bound(addr);
    if (ft != freed.begin()) {
      --ft;
      if (addr < ft->first + ft->second)
        // region of a freed allocation: future accesses open a fresh heap
        // instance starting now
        return {StorageClass::Heap, now, -1, 0, false};
    }
    return {StorageClass::Global, 0, -1, 0, false};
  };

  const auto open_instance = [&](const RegionKey& key, size_t now) -> int {
    const Placement pl = classify(key.addr, now);
    VariableInstance inst;
    inst.id = static_cast<int>(res.instances.size());
    inst.base = key.addr;
    inst.size = key.size;
    inst.storage = pl.storage;
    inst.lifetime_start = pl.lifetime_start;
    inst.lifetime_end = trace.events.size();
    if (auto it = pending_labels.find(key); it != pending_labels.end()) {
      inst.name = it->second.first;
      inst.label = it->second.second;
      pending_labels.erase(it);
    }
    res.instances.push_back(inst);
    if (pl.owner_frame >= 0)
      frames[static_cast<size_t>(pl.owner_frame)].owned.push_back(key);
    if (pl.heap_owned) heap[pl.owner_heap].owned.push_back(key);
    regions[key].instance = inst.id;
    return inst.id;
  };

  const auto new_live_var = [&](const RegionKey& key, size_t defined_at,
                                size_t now) -> int {
    RegionState& st = regions[key];
    if (st.instance < 0) open_instance(key, now);
    VariableInstance& inst = res.instances[static_cast<size_t>(st.instance)];
    LiveVariable lv;
    lv.id = static_cast<int>(res.live_vars.size());
    lv.base = key.addr;
    lv.size = key.size;
    lv.defined_at = defined_at;
    lv.storage = inst.storage;
    lv.instance = inst.id;
    res.live_vars.push_back(lv);
    inst.live_vars.push_back(lv.id);
    st.live = lv.id;
    return lv.id;
  };

  for (size_t i = 0; i < trace.events.size(); ++i) {
    const TraceEvent& ev = trace.events[i];
    switch (ev.kind) {
      case EventKind::Enter:
        frames.push_back(Frame{ev.fn, ev.sp, i, {}});
        break;
      case EventKind::Exit: {
        if (frames.empty())
          throw std::runtime_error("exit without matching enter: " + ev.fn +
                                   " at event " + std::to_string(i));
        if (frames.back().fn != ev.fn)
          throw std::runtime_error("mismatched exit: expected " +
                                   frames.back().fn + ", got " + ev.fn);
        for (const auto& key : frames.back().owned) close_region(key, i);
        frames.pop_back();
        break;
      }
      case EventKind::Alloc: {
        // a fresh allocation over previously used addresses starts fresh
        // lifetimes: close any open region inside the new range
        for (auto it = regions.lower_bound(detail::RegionKey{ev.base, 0});
             it != regions.end() && it->first.addr < ev.base + ev.size; ++it)
          close_region(it->first, i);
        heap[ev.base] = HeapAlloc{ev.base, ev.size, i, {}};
        break;
      }
      case EventKind::Free: {
        auto it = heap.find(ev.base);
        if (it == heap.end())
          throw std::runtime_error("free of unknown allocation at event " +
                                   std::to_string(i));
        for (const auto& key : it->second.owned) close_region(key, i);
        freed[it->second.base] = it->second.size;  // mark for later accesses
        heap.erase(it);
        break;
      }
      case EventKind::Label: {
        const RegionKey key{ev.addr, ev.size};
        const RegionState& st = regions[key];
        if (st.instance >= 0) {
          res.instances[static_cast<size_t>(st.instance)].name = ev.name;
          res.instances[static_cast<size_t>(st.instance)].label = ev.critical;
        } else {
          pending_labels[key] = {ev.name, ev.critical};
        }
        break;
      }
      case EventKind::Ins: {
        InsAccess& acc = res.per_event[i];
        // reads first: a read-before-write defines a live-variable at the
        // lifetime start (uninitialized input data needs a source node)
        for (const auto& op : ev.reads) {
          if (op.kind != OperandKind::Mem) continue;
          const RegionKey key{op.addr, op.size};
          RegionState& st = regions[key];
          if (st.live < 0) {
            const size_t start = st.instance >= 0
                ? res.instances[static_cast<size_t>(st.instance)].lifetime_start
                : classify(op.addr, i).lifetime_start;
            new_live_var(key, start, i);
          }
          acc.read_lvs.push_back(regions[key].live);
        }
        std::vector<RegionKey> written;
        for (const auto& op : ev.writes) {
          if (op.kind != OperandKind::Mem) continue;
          const RegionKey key{op.addr, op.size};
          // duplicate writes to one region within a single instruction
          // collapse into one definition
          if (std::find_if(written.begin(), written.end(), [&](auto& k) {
                return !(k < key) && !(key < k);
              }) != written.end())
            continue;
          written.push_back(key);
          RegionState& st = regions[key];
          if (st.live >= 0) {
            // redefinition kills the prior live-variable
            res.live_vars[static_cast<size_t>(st.live)].dead_at = i;
            st.live = -1;
          }
          acc.write_lvs.push_back(new_live_var(key, i, i));
        }
        break;
      }
    }
  }
  return res;
}

}  // namespace cvi
