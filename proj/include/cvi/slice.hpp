#pragma once
// Depth-bounded data-flow slicing around a live-variable and the fold into a
// loop-free tree: forward (use-flow) BFS first, then backward (define-flow)
// BFS, sharing one visited set so every node gets exactly one parent.
// Use-flow edges are rotated to point at the root and tagged Use; define-flow
// edges already point rootward and are tagged Define.
#include <algorithm>
#include <deque>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "cvi/dfg.hpp"

namespace cvi {

enum class TreeEdgeType : uint8_t {
  Root = 0,
  DDefine = 1,
  IDefine = 2,
  CDefine = 3,
  RDefine = 4,
  DUse = 5,
  IUse = 6,
  CUse = 7,
  RUse = 8,
};
inline constexpr int kNumTreeEdgeTypes = 9;

inline int tree_edge_slot(TreeEdgeType t) { return static_cast<int>(t); }

inline TreeEdgeType make_tree_edge(EdgeKind k, bool use_flow) {
  const int base = use_flow ? static_cast<int>(TreeEdgeType::DUse)
                            : static_cast<int>(TreeEdgeType::DDefine);
  return static_cast<TreeEdgeType>(base + static_cast<int>(k));
}

inline std::string tree_edge_name(TreeEdgeType t) {
  switch (t) {
    case TreeEdgeType::Root: return "root";
    case TreeEdgeType::DDefine: return "d_define";
    case TreeEdgeType::IDefine: return "i_define";
    case TreeEdgeType::CDefine: return "c_define";
    case TreeEdgeType::RDefine: return "r_define";
    case TreeEdgeType::DUse: return "d_use";
    case TreeEdgeType::IUse: return "i_use";
    case TreeEdgeType::CUse: return "c_use";
    case TreeEdgeType::RUse: return "r_use";
  }
  return "?";
}

struct SliceConfig {
  int k = 15;
  bool follow_c_backward = true;
};

// one discovered node: tree edge child -> parent
struct SliceStep {
  int node = -1;    // external id of the discovered node
  int parent = -1;  // external id of the node it was discovered from
  EdgeKind kind = EdgeKind::D;
  int depth = 0;
};

// Forward BFS from root along edge direction; edges into already-visited
// nodes are dropped. Expansion order is the graph's sorted adjacency
// (ascending neighbor id, then kind), which makes edge-drop ties
// deterministic. `visited` holds external ids and is updated in place.
inline std::vector<SliceStep> slice_use_flow(const EnhancedDFG& g, int root,
                                             int k, std::set<int>& visited) {
  visited.insert(root);
  std::vector<SliceStep> steps;
  std::deque<std::pair<int, int>> frontier{{root, 0}};  // (external id, depth)
  while (!frontier.empty()) {
    const auto [u, d] = frontier.front();
    frontier.pop_front();
    if (d >= k) continue;
    for (const auto& [vi, kind] : g.out_edges(g.index_of(u))) {
      const int v = g.nodes[static_cast<size_t>(vi)].id;
      if (!visited.insert(v).second) continue;  // loop-avoiding edge drop
      steps.push_back({v, u, kind, d + 1});
      frontier.emplace_back(v, d + 1);
    }
  }
  return steps;
}

// Backward BFS from root along reversed edges, sharing the caller's visited
// set so nodes claimed by a previous slice keep their first parent.
inline std::vector<SliceStep> slice_define_flow(const EnhancedDFG& g, int root,
                                                int k, std::set<int>& visited,
                                                bool follow_c = true) {
  visited.insert(root);
  std::vector<SliceStep> steps;
  std::deque<std::pair<int, int>> frontier{{root, 0}};
  while (!frontier.empty()) {
    const auto [u, d] = frontier.front();
    frontier.pop_front();
    if (d >= k) continue;
    for (const auto& [si, kind] : g.in_edges(g.index_of(u))) {
      if (!follow_c && kind == EdgeKind::C) continue;
      const int s = g.nodes[static_cast<size_t>(si)].id;
      if (!visited.insert(s).second) continue;
      steps.push_back({s, u, kind, d + 1});
      frontier.emplace_back(s, d + 1);
    }
  }
  return steps;
}

struct TreeNode {
  int id = -1;      // graph node external id
  int parent = -1;  // external id, -1 for the root
  TreeEdgeType edge = TreeEdgeType::Root;
  int depth = 0;
};

struct DataFlowTree {
  int root = -1;
  int k = 0;
  std::vector<TreeNode> nodes;  // discovery order, root first

  const TreeNode& node_by_id(int id) const {
    for (const auto& n : nodes)
      if (n.id == id) return n;
    throw std::runtime_error("tree has no node " + std::to_string(id));
  }
  bool contains(int id) const {
    for (const auto& n : nodes)
      if (n.id == id) return true;
    return false;
  }
};

inline DataFlowTree build_tree(const EnhancedDFG& g, int root,
                               const SliceConfig& cfg = {}) {
  const GraphNode& rn = g.nodes[static_cast<size_t>(g.index_of(root))];
  if (rn.is_onode)
    throw std::runtime_error("tree root must be a live-variable node, got " +
                             std::to_string(root));
  DataFlowTree tree;
  tree.root = root;
  tree.k = cfg.k;
  tree.nodes.push_back({root, -1, TreeEdgeType::Root, 0});

  std::set<int> visited{root};
  for (const auto& s : slice_use_flow(g, root, cfg.k, visited))
    tree.nodes.push_back({s.node, s.parent, make_tree_edge(s.kind, true),
                          s.depth});
  for (const auto& s :
       slice_define_flow(g, root, cfg.k, visited, cfg.follow_c_backward))
    tree.nodes.push_back({s.node, s.parent, make_tree_edge(s.kind, false),
                          s.depth});
  return tree;
}

struct TreeSet {
  int instance = -1;
  std::vector<DataFlowTree> trees;  // one per live-variable, definition order
  std::optional<bool> label;
};

inline TreeSet trees_for_instance(const EnhancedDFG& g, int instance,
                                  const SliceConfig& cfg = {}) {
  // live-variable ids ascend in definition order, so sorting recovers it
  std::vector<std::pair<int, int>> lvs;  // (live_var, node id)
  for (const auto& n : g.nodes)
    if (!n.is_onode && n.instance == instance) lvs.emplace_back(n.live_var, n.id);
  if (lvs.empty())
    throw std::runtime_error("instance " + std::to_string(instance) +
                             " has no live-variables in the graph");
  std::sort(lvs.begin(), lvs.end());
  TreeSet set;
  set.instance = instance;
  for (const auto& [lv, node] : lvs) set.trees.push_back(build_tree(g, node, cfg));
  return set;
}

// ---------------------------------------------------------------------------
// serialization

inline nlohmann::json tree_to_json(const DataFlowTree& tree,
                                   const EnhancedDFG& g,
                                   const std::map<std::string, int>& vocab) {
  nlohmann::json nodes = nlohmann::json::array();
  nlohmann::json parent = nlohmann::json::object();
  for (const auto& n : tree.nodes) {
    const GraphNode& gn = g.nodes[static_cast<size_t>(g.index_of(n.id))];
    const NodeFeature f = node_feature(gn, vocab);
    nodes.push_back({{"id", n.id},
                     {"feature_onehot_index", f.onehot_index},
                     {"cdp", f.cdp_scaled},
                     {"edge_type", tree_edge_name(n.edge)}});
    if (n.parent >= 0) parent[std::to_string(n.id)] = n.parent;
  }
  return nlohmann::json{
      {"root", tree.root}, {"k", tree.k}, {"nodes", nodes}, {"parent", parent}};
}

}  // namespace cvi
