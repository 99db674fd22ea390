#pragma once
// Enhanced data-flow graph: o-nodes for instructions touching memory, v-nodes
// for live-variables, with d (explicit data), i (implicit/pointer), c (local
// control) and r (redefinition) edges. Register flow is bridged by
// provenance (o-node -> o-node d edges) instead of materializing registers.
// Node ids are explicit: built graphs use dense 0..N-1, loaded graphs keep
// whatever ids the file carries.
#include <algorithm>
#include <cstdint>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cvi/trace.hpp"

namespace cvi {

enum class EdgeKind : uint8_t { D = 0, I = 1, C = 2, R = 3 };
inline constexpr int kNumEdgeKinds = 4;

inline char edge_kind_char(EdgeKind k) {
  switch (k) {
    case EdgeKind::D: return 'd';
    case EdgeKind::I: return 'i';
    case EdgeKind::C: return 'c';
    case EdgeKind::R: return 'r';
  }
  return '?';
}

inline EdgeKind edge_kind_from_char(char c) {
  switch (c) {
    case 'd': return EdgeKind::D;
    case 'i': return EdgeKind::I;
    case 'c': return EdgeKind::C;
    case 'r': return EdgeKind::R;
  }
  throw std::runtime_error(std::string("unknown edge kind: ") + c);
}

struct GraphNode {
  int id = -1;          // external id
  bool is_onode = false;
  std::string opcode;   // o-nodes
  int live_var = -1;    // v-nodes
  int instance = -1;    // v-nodes: owning VariableInstance
  size_t event = 0;     // o-nodes: trace event index
  int cdp = -1;         // v-nodes: measured n in [-1, 65535]
};

struct GraphEdge {
  int src = -1, dst = -1;  // external node ids
  EdgeKind kind = EdgeKind::D;
};

// (neighbor node index, edge kind); adjacency is sorted by
// (neighbor external id, kind) so every traversal is deterministic
struct AdjEntry {
  int node;
  EdgeKind kind;
};

class EnhancedDFG {
 public:
  std::vector<GraphNode> nodes;
  std::vector<GraphEdge> edges;
  std::map<std::string, int> opcode_vocab;

  int index_of(int external_id) const {
    auto it = id_to_index_.find(external_id);
    if (it == id_to_index_.end())
      throw std::runtime_error("unknown node id: " + std::to_string(external_id));
    return it->second;
  }
  bool has_node(int external_id) const {
    return id_to_index_.count(external_id) > 0;
  }

  const std::vector<AdjEntry>& out_edges(int index) const { return out_[static_cast<size_t>(index)]; }
  const std::vector<AdjEntry>& in_edges(int index) const { return in_[static_cast<size_t>(index)]; }

  // Rebuild the index and sorted adjacency; call after nodes/edges change.
  void finalize() {
    id_to_index_.clear();
    for (size_t i = 0; i < nodes.size(); ++i) {
      if (!id_to_index_.emplace(nodes[i].id, static_cast<int>(i)).second)
        throw std::runtime_error("duplicate node id: " + std::to_string(nodes[i].id));
    }
    out_.assign(nodes.size(), {});
    in_.assign(nodes.size(), {});
    for (const auto& e : edges) {
      const int s = index_of(e.src), d = index_of(e.dst);
      out_[static_cast<size_t>(s)].push_back({d, e.kind});
      in_[static_cast<size_t>(d)].push_back({s, e.kind});
    }
    const auto by_id_then_kind = [&](const AdjEntry& a, const AdjEntry& b) {
      const int ia = nodes[static_cast<size_t>(a.node)].id;
      const int ib = nodes[static_cast<size_t>(b.node)].id;
      return ia != ib ? ia < ib
                      : static_cast<int>(a.kind) < static_cast<int>(b.kind);
    };
    for (auto& v : out_) std::sort(v.begin(), v.end(), by_id_then_kind);
    for (auto& v : in_) std::sort(v.begin(), v.end(), by_id_then_kind);
  }

 private:
  std::map<int, int> id_to_index_;
  std::vector<std::vector<AdjEntry>> out_, in_;
};

struct DfgConfig {
  std::set<std::string> comparison_ops = {"cmp", "test"};
};

inline EnhancedDFG build_dfg(const Trace& trace, const LivenessResult& liveness,
                             const DfgConfig& cfg = {}) {
  EnhancedDFG g;
  std::vector<int> lv_node(liveness.live_vars.size(), -1);
  std::set<std::tuple<int, int, int>> seen_edges;

  const auto add_node_for_lv = [&](int lv) {
    if (lv_node[static_cast<size_t>(lv)] >= 0) return lv_node[static_cast<size_t>(lv)];
    GraphNode n;
    n.id = static_cast<int>(g.nodes.size());
    n.is_onode = false;
    n.live_var = lv;
    n.instance = liveness.live_vars[static_cast<size_t>(lv)].instance;
    g.nodes.push_back(n);
    lv_node[static_cast<size_t>(lv)] = n.id;
    return n.id;
  };
  const auto add_edge = [&](int src, int dst, EdgeKind k) {
    if (seen_edges.emplace(src, dst, static_cast<int>(k)).second)
      g.edges.push_back({src, dst, k});
  };

  // register provenance: the o-nodes that last defined each register, plus
  // the v-node whose value the register holds after a copy-like load
  struct RegState {
    std::vector<int> def_onodes;
    int src_vnode = -1;
  };
  std::map<std::string, RegState> regs;

  for (size_t ei = 0; ei < trace.events.size(); ++ei) {
    const TraceEvent& ev = trace.events[ei];
    if (ev.kind != EventKind::Ins) continue;
    const InsAccess& acc = liveness.per_event[ei];

    bool touches_mem = !acc.read_lvs.empty() || !acc.write_lvs.empty();
    if (!touches_mem) {
      // register-only instruction: no o-node, provenance flows through
      RegState merged;
      size_t reg_reads = 0;
      for (const auto& op : ev.reads) {
        if (op.kind != OperandKind::Reg) continue;
        ++reg_reads;
        const auto it = regs.find(op.name);
        if (it == regs.end()) continue;
        for (int o : it->second.def_onodes)
          if (std::find(merged.def_onodes.begin(), merged.def_onodes.end(), o) ==
              merged.def_onodes.end())
            merged.def_onodes.push_back(o);
        if (reg_reads == 1) merged.src_vnode = it->second.src_vnode;
      }
      if (reg_reads != 1) merged.src_vnode = -1;  // copy-like only
      for (const auto& op : ev.writes)
        if (op.kind == OperandKind::Reg) regs[op.name] = merged;
      continue;
    }

    // v-nodes for reads first (first touch materializes), then the o-node,
    // then v-nodes for writes — creation order pins the dense ids
    size_t mem_read_i = 0;
    for (const auto& op : ev.reads)
      if (op.kind == OperandKind::Mem)
        add_node_for_lv(acc.read_lvs[mem_read_i++]);

    GraphNode o;
    o.id = static_cast<int>(g.nodes.size());
    o.is_onode = true;
    o.opcode = ev.opcode;
    o.event = ei;
    g.nodes.push_back(o);
    const int onode = o.id;
    const bool is_cmp = cfg.comparison_ops.count(ev.opcode) > 0;

    mem_read_i = 0;
    for (const auto& op : ev.reads) {
      if (op.kind == OperandKind::Mem) {
        const int v = lv_node[static_cast<size_t>(acc.read_lvs[mem_read_i++])];
        add_edge(v, onode, EdgeKind::D);
        if (is_cmp) add_edge(v, onode, EdgeKind::C);
        if (!op.via.empty()) {
          const auto it = regs.find(op.via);
          if (it != regs.end() && it->second.src_vnode >= 0)
            add_edge(it->second.src_vnode, onode, EdgeKind::I);
        }
      } else {
        const auto it = regs.find(op.name);
        if (it == regs.end()) continue;  // dangling register read
        for (int p : it->second.def_onodes) add_edge(p, onode, EdgeKind::D);
        if (is_cmp && it->second.src_vnode >= 0)
          add_edge(it->second.src_vnode, onode, EdgeKind::C);
      }
    }

    size_t mem_write_i = 0;
    size_t mem_reads_total = 0;
    for (const auto& op : ev.reads)
      if (op.kind == OperandKind::Mem) ++mem_reads_total;
    const bool copy_like = mem_reads_total == 1 && ev.reads.size() == 1;
    std::set<std::pair<uint64_t, uint64_t>> written;  // mirrors liveness dedupe
    for (const auto& op : ev.writes) {
      if (op.kind == OperandKind::Mem) {
        if (!written.emplace(op.addr, op.size).second) continue;
        const int v = add_node_for_lv(acc.write_lvs[mem_write_i++]);
        add_edge(onode, v, EdgeKind::D);
      } else {
        RegState st;
        st.def_onodes = {onode};
        st.src_vnode = copy_like ? lv_node[static_cast<size_t>(acc.read_lvs[0])] : -1;
        regs[op.name] = st;
      }
    }
  }

  // redefinition edges between consecutive live-variables of each instance
  for (const auto& inst : liveness.instances)
    for (size_t i = 0; i + 1 < inst.live_vars.size(); ++i) {
      const int a = lv_node[static_cast<size_t>(inst.live_vars[i])];
      const int b = lv_node[static_cast<size_t>(inst.live_vars[i + 1])];
      if (a >= 0 && b >= 0) add_edge(a, b, EdgeKind::R);
    }

  g.finalize();
  return g;
}

// Attaches CDP measurements (instance id -> n) to every v-node of each
// measured instance; all other nodes keep -1.
inline void attach_cdp(EnhancedDFG& g, const std::map<int, int>& measurements) {
  std::set<int> present;
  for (const auto& n : g.nodes)
    if (!n.is_onode && n.instance >= 0) present.insert(n.instance);
  for (const auto& [inst, n] : measurements)
    if (!present.count(inst))
      throw std::runtime_error("attach_cdp: unknown instance id " +
                               std::to_string(inst));
  for (auto& node : g.nodes) {
    if (node.is_onode) continue;
    const auto it = measurements.find(node.instance);
    if (it != measurements.end()) node.cdp = it->second;
  }
}

// ---------------------------------------------------------------------------
// node features

inline constexpr int kCdpMax = 65535;

struct NodeFeature {
  int onehot_index = 0;    // slot in [opcode vocab..., LIVEVAR, UNK]
  double cdp_scaled = -1;  // n / 65535 for measured v-nodes, else -1
};

// vocab layout: tokens 0..V-1, LIVEVAR = V, UNK = V+1
inline int livevar_slot(const std::map<std::string, int>& vocab) {
  return static_cast<int>(vocab.size());
}
inline int unk_slot(const std::map<std::string, int>& vocab) {
  return static_cast<int>(vocab.size()) + 1;
}
inline int onehot_width(const std::map<std::string, int>& vocab) {
  return static_cast<int>(vocab.size()) + 2;
}

inline std::map<std::string, int> build_vocab(
    const std::vector<const EnhancedDFG*>& graphs) {
  std::set<std::string> tokens;
  for (const auto* g : graphs)
    for (const auto& n : g->nodes)
      if (n.is_onode) tokens.insert(n.opcode);
  std::map<std::string, int> vocab;
  for (const auto& t : tokens) vocab.emplace(t, static_cast<int>(vocab.size()));
  return vocab;
}

inline NodeFeature node_feature(const GraphNode& n,
                                const std::map<std::string, int>& vocab) {
  NodeFeature f;
  if (n.is_onode) {
    const auto it = vocab.find(n.opcode);
    f.onehot_index = it != vocab.end() ? it->second : unk_slot(vocab);
    f.cdp_scaled = -1.0;
  } else {
    f.onehot_index = livevar_slot(vocab);
    f.cdp_scaled = n.cdp >= 0 ? static_cast<double>(n.cdp) / kCdpMax : -1.0;
  }
  return f;
}

inline std::map<int, NodeFeature> node_features(const EnhancedDFG& g) {
  std::map<int, NodeFeature> out;
  for (const auto& n : g.nodes) out[n.id] = node_feature(n, g.opcode_vocab);
  return out;
}

// ---------------------------------------------------------------------------
// serialization

inline nlohmann::json dfg_to_json(const EnhancedDFG& g) {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : g.nodes) {
    nlohmann::json nj{{"id", n.id}, {"kind", n.is_onode ? "o" : "v"}};
    if (n.is_onode) {
      nj["opcode"] = n.opcode;
    } else {
      nj["live_var"] = n.live_var;
      nj["cdp"] = n.cdp;
      if (n.instance >= 0) nj["instance"] = n.instance;
    }
    nodes.push_back(std::move(nj));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& e : g.edges)
    edges.push_back({{"src", e.src},
                     {"dst", e.dst},
                     {"kind", std::string(1, edge_kind_char(e.kind))}});
  return nlohmann::json{{"nodes", nodes}, {"edges", edges}};
}

inline EnhancedDFG dfg_from_json(const nlohmann::json& j) {
  EnhancedDFG g;
  for (const auto& nj : j.at("nodes")) {
    GraphNode n;
    n.id = nj.at("id").get<int>();
    const std::string kind = nj.at("kind").get<std::string>();
    if (kind == "o") {
      n.is_onode = true;
      n.opcode = nj.at("opcode").get<std::string>();
    } else if (kind == "v") {
      n.is_onode = false;
      n.live_var = nj.at("live_var").get<int>();
      n.cdp = nj.value("cdp", -1);
      n.instance = nj.value("instance", -1);
    } else {
      throw std::runtime_error("unknown node kind: " + kind);
    }
    g.nodes.push_back(std::move(n));
  }
  for (const auto& ej : j.at("edges")) {
    GraphEdge e;
    e.src = ej.at("src").get<int>();
    e.dst = ej.at("dst").get<int>();
    const std::string k = ej.at("kind").get<std::string>();
    if (k.size() != 1) throw std::runtime_error("unknown edge kind: " + k);
    e.kind = edge_kind_from_char(k[0]);
    g.edges.push_back(e);
  }
  g.finalize();  // also validates edge endpoints and id uniqueness
  return g;
}

inline void save_dfg(const EnhancedDFG& g, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write graph: " + path);
  out << dfg_to_json(g).dump(1);
}

inline EnhancedDFG load_dfg(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open graph: " + path);
  nlohmann::json j;
  in >> j;
  return dfg_from_json(j);
}

}  // namespace cvi
