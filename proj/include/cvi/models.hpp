#pragma once
// Model zoo over the autodiff tape: Child-Sum Tree-LSTM evaluated leaves to
// root, bi-directional relational GCN (per-relation in/out weights plus a
// self matrix, simultaneous layer updates), its single-weight incoming-only
// restriction, an MLP baseline on raw live-variable features, pooling and the
// sigmoid output layer, plus the walk-count diagnostic that explains why deep
// graph propagation dilutes distant features.
#include <array>
#include <cstdint>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "cvi/autodiff.hpp"
#include "cvi/dfg.hpp"
#include "cvi/rng.hpp"
#include "cvi/slice.hpp"

namespace cvi::models {

// ---------------------------------------------------------------------------
// configuration

enum class PoolMode { Max, Avg, Sum };
enum class ModelKind { TreeLstm, Brgcn, ConvGnn, Mlp };

struct ModelConfig {
  ModelKind model = ModelKind::TreeLstm;
  int layers = 2;
  int hidden = 64;
  PoolMode pooling = PoolMode::Max;
  bool use_mcd = true;
  int k = 15;
};

inline std::string to_string(ModelKind m) {
  switch (m) {
    case ModelKind::TreeLstm: return "treelstm";
    case ModelKind::Brgcn: return "brgcn";
    case ModelKind::ConvGnn: return "convgnn";
    case ModelKind::Mlp: return "mlp";
  }
  return "?";
}

inline std::string to_string(PoolMode p) {
  switch (p) {
    case PoolMode::Max: return "max";
    case PoolMode::Avg: return "avg";
    case PoolMode::Sum: return "sum";
  }
  return "?";
}

inline ModelKind model_kind_from(const std::string& s) {
  if (s == "treelstm") return ModelKind::TreeLstm;
  if (s == "brgcn") return ModelKind::Brgcn;
  if (s == "convgnn") return ModelKind::ConvGnn;
  if (s == "mlp") return ModelKind::Mlp;
  throw std::runtime_error("unknown model: " + s);
}

inline PoolMode pool_mode_from(const std::string& s) {
  if (s == "max") return PoolMode::Max;
  if (s == "avg") return PoolMode::Avg;
  if (s == "sum") return PoolMode::Sum;
  throw std::runtime_error("unknown pooling: " + s);
}

inline ModelConfig parse_model_config(std::istream& in) {
  ModelConfig cfg;
  std::string line;
  size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto strip = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    line = strip(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos)
      throw std::runtime_error("config line " + std::to_string(lineno) +
                               ": expected key=value");
    const std::string key = strip(line.substr(0, eq));
    const std::string value = strip(line.substr(eq + 1));
    const auto parse_int = [&](int lo) {
      const int v = std::stoi(value);
      if (v < lo)
        throw std::runtime_error("config key " + key + ": value out of range");
      return v;
    };
    if (key == "model") {
      cfg.model = model_kind_from(value);
    } else if (key == "layers") {
      cfg.layers = parse_int(1);
    } else if (key == "hidden") {
      cfg.hidden = parse_int(1);
    } else if (key == "pooling") {
      cfg.pooling = pool_mode_from(value);
    } else if (key == "use_mcd") {
      if (value == "true")
        cfg.use_mcd = true;
      else if (value == "false")
        cfg.use_mcd = false;
      else
        throw std::runtime_error("config key use_mcd: expected true|false");
    } else if (key == "k") {
      cfg.k = parse_int(0);
    } else {
      throw std::runtime_error("unknown config key: " + key);
    }
  }
  return cfg;
}

inline ModelConfig parse_model_config_text(const std::string& text) {
  std::istringstream in(text);
  return parse_model_config(in);
}

inline std::string serialize_model_config(const ModelConfig& c) {
  std::ostringstream out;
  out << "model=" << to_string(c.model) << "\nlayers=" << c.layers
      << "\nhidden=" << c.hidden << "\npooling=" << to_string(c.pooling)
      << "\nuse_mcd=" << (c.use_mcd ? "true" : "false") << "\nk=" << c.k
      << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------
// feature assembly
// graph features: [opcode one-hot | LIVEVAR | UNK] ++ [cdp]
// tree features:  [opcode one-hot | LIVEVAR | UNK] ++ [9 tree-edge one-hot] ++ [cdp]

using Feature = std::vector<ad::SparseFeat>;
using FeatureMap = std::map<int, Feature>;

inline int graph_feature_dim(const std::map<std::string, int>& vocab) {
  return onehot_width(vocab) + 1;
}
inline int tree_feature_dim(const std::map<std::string, int>& vocab) {
  return onehot_width(vocab) + kNumTreeEdgeTypes + 1;
}

inline Feature graph_node_feature(const GraphNode& n,
                                  const std::map<std::string, int>& vocab,
                                  bool use_mcd) {
  const NodeFeature f = node_feature(n, vocab);
  return {{f.onehot_index, 1.0},
          {onehot_width(vocab), use_mcd ? f.cdp_scaled : -1.0}};
}

inline FeatureMap graph_features(const EnhancedDFG& g,
                                 const std::map<std::string, int>& vocab,
                                 bool use_mcd) {
  FeatureMap out;
  for (const auto& n : g.nodes) out[n.id] = graph_node_feature(n, vocab, use_mcd);
  return out;
}

inline FeatureMap tree_features(const EnhancedDFG& g, const DataFlowTree& tree,
                                const std::map<std::string, int>& vocab,
                                bool use_mcd) {
  FeatureMap out;
  for (const auto& tn : tree.nodes) {
    const GraphNode& gn = g.nodes[static_cast<size_t>(g.index_of(tn.id))];
    const NodeFeature f = node_feature(gn, vocab);
    out[tn.id] = {{f.onehot_index, 1.0},
                  {onehot_width(vocab) + tree_edge_slot(tn.edge), 1.0},
                  {onehot_width(vocab) + kNumTreeEdgeTypes,
                   use_mcd ? f.cdp_scaled : -1.0}};
  }
  return out;
}

// ---------------------------------------------------------------------------
// pooling and output layer

inline int pool(ad::Tape& t, const std::vector<int>& rows, PoolMode mode) {
  if (rows.empty()) throw std::runtime_error("pool: empty input");
  const int all = t.concat_rows(rows);
  switch (mode) {
    case PoolMode::Max: return t.max_rows(all);
    case PoolMode::Avg: return t.mean_rows(all);
    case PoolMode::Sum: return t.sum_rows(all);
  }
  throw std::runtime_error("pool: bad mode");
}

struct OutputLayer {
  ad::Param* A;
  ad::Param* b;
  OutputLayer(ad::ParamStore& ps, int hidden, Rng& rng)
      : A(&ps.add("out.A", hidden, 1, rng)), b(&ps.add_zeros("out.b", 1, 1)) {}

  int logit(ad::Tape& t, int pooled) const {
    return t.add(t.matmul(pooled, t.leaf(*A)), t.leaf(*b));
  }
  int probability(ad::Tape& t, int pooled) const {
    return t.sigmoid(logit(t, pooled));
  }
};

inline bool threshold_label(double y) { return y >= 0.5; }

// ---------------------------------------------------------------------------
// Child-Sum Tree-LSTM

struct TreeLstm {
  int feat, hidden;
  ad::Param *Wi, *Wf, *Wo, *Wu;  // feat x hidden
  ad::Param *Ui, *Uf, *Uo, *Uu;  // hidden x hidden
  ad::Param *bi, *bf, *bo, *bu;  // 1 x hidden

  TreeLstm(ad::ParamStore& ps, int feat_dim, int hidden_dim, Rng& rng)
      : feat(feat_dim),
        hidden(hidden_dim),
        Wi(&ps.add("tlstm.Wi", feat, hidden, rng)),
        Wf(&ps.add("tlstm.Wf", feat, hidden, rng)),
        Wo(&ps.add("tlstm.Wo", feat, hidden, rng)),
        Wu(&ps.add("tlstm.Wu", feat, hidden, rng)),
        Ui(&ps.add("tlstm.Ui", hidden, hidden, rng)),
        Uf(&ps.add("tlstm.Uf", hidden, hidden, rng)),
        Uo(&ps.add("tlstm.Uo", hidden, hidden, rng)),
        Uu(&ps.add("tlstm.Uu", hidden, hidden, rng)),
        bi(&ps.add_zeros("tlstm.bi", 1, hidden)),
        bf(&ps.add_zeros("tlstm.bf", 1, hidden)),
        bo(&ps.add_zeros("tlstm.bo", 1, hidden)),
        bu(&ps.add_zeros("tlstm.bu", 1, hidden)) {}

  // hidden state of the root after a leaves-to-root sweep
  int root_hidden(ad::Tape& t, const DataFlowTree& tree,
                  const FeatureMap& feats) const {
    std::map<int, std::vector<int>> kids;  // parent id -> child ids
    for (const auto& n : tree.nodes)
      if (n.parent >= 0) kids[n.parent].push_back(n.id);

    std::map<int, int> h, c;  // node id -> tape ids
    // discovery order puts parents before children; walk it backwards
    for (auto it = tree.nodes.rbegin(); it != tree.nodes.rend(); ++it) {
      const Feature& x = feats.at(it->id);
      const auto kit = kids.find(it->id);
      const bool has_kids = kit != kids.end() && !kit->second.empty();

      int hsum = -1;
      if (has_kids) {
        std::vector<int> rows;
        for (int kid : kit->second) rows.push_back(h.at(kid));
        hsum = t.sum_rows(t.concat_rows(rows));  // child-sum, order-canonical
      }
      const auto gate = [&](ad::Param* W, ad::Param* U, ad::Param* b) {
        int z = t.sparse_affine(*W, x);
        if (hsum >= 0) z = t.add(z, t.matmul(hsum, t.leaf(*U)));
        return t.add(z, t.leaf(*b));
      };
      const int i_g = t.sigmoid(gate(Wi, Ui, bi));
      const int o_g = t.sigmoid(gate(Wo, Uo, bo));
      const int u_g = t.tanh_(gate(Wu, Uu, bu));

      int c_j = t.hadamard(i_g, u_g);
      if (has_kids) {
        const int xWf = t.sparse_affine(*Wf, x);
        std::vector<int> fc_rows;
        for (int kid : kit->second) {
          const int f = t.sigmoid(t.add(
              t.add(xWf, t.matmul(h.at(kid), t.leaf(*Uf))), t.leaf(*bf)));
          fc_rows.push_back(t.hadamard(f, c.at(kid)));
        }
        c_j = t.add(c_j, t.sum_rows(t.concat_rows(fc_rows)));
      }
      h[it->id] = t.hadamard(o_g, t.tanh_(c_j));
      c[it->id] = c_j;
    }
    return h.at(tree.root);
  }
};

// ---------------------------------------------------------------------------
// BRGCN

// L-hop receptive field around the given nodes; returns external ids sorted
// ascending. Computing the forward pass on this ball reproduces the full-graph
// hiddens of the seed nodes exactly.
inline std::vector<int> receptive_ball(const EnhancedDFG& g,
                                       const std::vector<int>& seeds, int hops) {
  std::set<int> ball(seeds.begin(), seeds.end());
  std::set<int> frontier = ball;
  for (int h = 0; h < hops; ++h) {
    std::set<int> next;
    for (int id : frontier) {
      const int idx = g.index_of(id);
      for (const auto& e : g.in_edges(idx)) {
        const int nid = g.nodes[static_cast<size_t>(e.node)].id;
        if (ball.insert(nid).second) next.insert(nid);
      }
      for (const auto& e : g.out_edges(idx)) {
        const int nid = g.nodes[static_cast<size_t>(e.node)].id;
        if (ball.insert(nid).second) next.insert(nid);
      }
    }
    frontier.swap(next);
    if (frontier.empty()) break;
  }
  return {ball.begin(), ball.end()};
}

struct Brgcn {
  int feat, hidden, layers;
  bool relu;
  std::vector<std::array<ad::Param*, kNumEdgeKinds>> Win, Wout;
  std::vector<ad::Param*> W0;

  Brgcn(ad::ParamStore& ps, int feat_dim, int hidden_dim, int n_layers,
        Rng& rng, bool use_relu = true)
      : feat(feat_dim), hidden(hidden_dim), layers(n_layers), relu(use_relu) {
    if (layers < 1) throw std::runtime_error("brgcn: layers must be >= 1");
    const char* rel = "dicr";
    for (int l = 0; l < layers; ++l) {
      const int in_dim = l == 0 ? feat : hidden;
      std::array<ad::Param*, kNumEdgeKinds> win{}, wout{};
      for (int r = 0; r < kNumEdgeKinds; ++r) {
        const std::string base =
            "brgcn.l" + std::to_string(l) + "." + std::string(1, rel[r]);
        win[static_cast<size_t>(r)] = &ps.add(base + ".in", in_dim, hidden, rng);
        wout[static_cast<size_t>(r)] = &ps.add(base + ".out", in_dim, hidden, rng);
      }
      Win.push_back(win);
      Wout.push_back(wout);
      W0.push_back(&ps.add("brgcn.l" + std::to_string(l) + ".self", in_dim,
                           hidden, rng));
    }
  }

  // hiddens after the last layer for every node in `nodes` (external ids);
  // neighbors outside `nodes` are ignored, which is exact when `nodes` is a
  // receptive ball of radius >= layers around the nodes that are consumed
  std::map<int, int> forward(ad::Tape& t, const EnhancedDFG& g,
                             const FeatureMap& feats,
                             const std::vector<int>& nodes) const {
    const std::set<int> in_scope(nodes.begin(), nodes.end());
    std::map<int, int> h;  // external id -> tape id of current layer hidden

    for (int l = 0; l < layers; ++l) {
      std::map<int, int> next;
      for (int id : nodes) {
        const int idx = g.index_of(id);
        // group in/out neighbors by relation, preserving sorted-id order
        std::array<std::vector<int>, kNumEdgeKinds> nin, nout;
        for (const auto& e : g.in_edges(idx)) {
          const int nid = g.nodes[static_cast<size_t>(e.node)].id;
          if (in_scope.count(nid))
            nin[static_cast<size_t>(e.kind)].push_back(nid);
        }
        for (const auto& e : g.out_edges(idx)) {
          const int nid = g.nodes[static_cast<size_t>(e.node)].id;
          if (in_scope.count(nid))
            nout[static_cast<size_t>(e.kind)].push_back(nid);
        }

        std::vector<int> terms;
        for (int r = 0; r < kNumEdgeKinds; ++r) {
          const auto& ins = nin[static_cast<size_t>(r)];
          const auto& outs = nout[static_cast<size_t>(r)];
          const size_t c = ins.size() + outs.size();
          if (c == 0) continue;
          const double norm = 1.0 / static_cast<double>(c);
          if (!ins.empty())
            terms.push_back(t.scale(
                transform(t, feats, h, ins, *Win[static_cast<size_t>(l)]
                                                 [static_cast<size_t>(r)],
                          l),
                norm));
          if (!outs.empty())
            terms.push_back(t.scale(
                transform(t, feats, h, outs, *Wout[static_cast<size_t>(l)]
                                                  [static_cast<size_t>(r)],
                          l),
                norm));
        }
        terms.push_back(self_term(t, feats, h, id, *W0[static_cast<size_t>(l)], l));

        int z = terms[0];
        for (size_t i = 1; i < terms.size(); ++i) z = t.add(z, terms[i]);
        next[id] = relu ? t.relu(z) : z;
      }
      h.swap(next);
    }
    return h;
  }

 private:
  // sum of transformed neighbor states: layer 0 reads sparse input features,
  // later layers fold hidden rows first and apply one matmul
  int transform(ad::Tape& t, const FeatureMap& feats,
                const std::map<int, int>& h, const std::vector<int>& nbrs,
                ad::Param& W, int layer) const {
    if (layer == 0) {
      std::vector<int> rows;
      rows.reserve(nbrs.size());
      for (int id : nbrs) rows.push_back(t.sparse_affine(W, feats.at(id)));
      return rows.size() == 1 ? rows[0] : t.sum_rows(t.concat_rows(rows));
    }
    std::vector<int> rows;
    rows.reserve(nbrs.size());
    for (int id : nbrs) rows.push_back(h.at(id));
    const int folded =
        rows.size() == 1 ? rows[0] : t.sum_rows(t.concat_rows(rows));
    return t.matmul(folded, t.leaf(W));
  }

  int self_term(ad::Tape& t, const FeatureMap& feats,
                const std::map<int, int>& h, int id, ad::Param& W,
                int layer) const {
    if (layer == 0) return t.sparse_affine(W, feats.at(id));
    return t.matmul(h.at(id), t.leaf(W));
  }
};

// single shared weight over incoming edges only, plus the self matrix
struct ConvGnn {
  int feat, hidden, layers;
  bool relu;
  std::vector<ad::Param*> W, W0;

  ConvGnn(ad::ParamStore& ps, int feat_dim, int hidden_dim, int n_layers,
          Rng& rng, bool use_relu = true)
      : feat(feat_dim), hidden(hidden_dim), layers(n_layers), relu(use_relu) {
    if (layers < 1) throw std::runtime_error("convgnn: layers must be >= 1");
    for (int l = 0; l < layers; ++l) {
      const int in_dim = l == 0 ? feat : hidden;
      W.push_back(&ps.add("conv.l" + std::to_string(l) + ".W", in_dim, hidden,
                          rng));
      W0.push_back(&ps.add("conv.l" + std::to_string(l) + ".self", in_dim,
                           hidden, rng));
    }
  }

  std::map<int, int> forward(ad::Tape& t, const EnhancedDFG& g,
                             const FeatureMap& feats,
                             const std::vector<int>& nodes) const {
    const std::set<int> in_scope(nodes.begin(), nodes.end());
    std::map<int, int> h;
    for (int l = 0; l < layers; ++l) {
      std::map<int, int> next;
      for (int id : nodes) {
        const int idx = g.index_of(id);
        std::vector<int> ins;
        std::set<int> seen;  // multi-edges collapse: one message per neighbor
        for (const auto& e : g.in_edges(idx)) {
          const int nid = g.nodes[static_cast<size_t>(e.node)].id;
          if (in_scope.count(nid) && seen.insert(nid).second)
            ins.push_back(nid);
        }
        std::vector<int> terms;
        if (!ins.empty()) {
          const double norm = 1.0 / static_cast<double>(ins.size());
          std::vector<int> rows;
          for (int nid : ins)
            rows.push_back(l == 0 ? t.sparse_affine(*W[static_cast<size_t>(l)],
                                                    feats.at(nid))
                                  : h.at(nid));
          int folded = rows.size() == 1 ? rows[0]
                                        : t.sum_rows(t.concat_rows(rows));
          if (l > 0) folded = t.matmul(folded, t.leaf(*W[static_cast<size_t>(l)]));
          terms.push_back(t.scale(folded, norm));
        }
        terms.push_back(l == 0
                            ? t.sparse_affine(*W0[static_cast<size_t>(l)],
                                              feats.at(id))
                            : t.matmul(h.at(id), t.leaf(*W0[static_cast<size_t>(l)])));
        int z = terms[0];
        for (size_t i = 1; i < terms.size(); ++i) z = t.add(z, terms[i]);
        next[id] = relu ? t.relu(z) : z;
      }
      h.swap(next);
    }
    return h;
  }
};

// ---------------------------------------------------------------------------
// MLP baseline: two affine+ReLU layers on raw live-variable features

struct Mlp {
  int feat, hidden;
  ad::Param *W1, *b1, *W2, *b2;

  Mlp(ad::ParamStore& ps, int feat_dim, int hidden_dim, Rng& rng)
      : feat(feat_dim),
        hidden(hidden_dim),
        W1(&ps.add("mlp.W1", feat, hidden, rng)),
        b1(&ps.add_zeros("mlp.b1", 1, hidden)),
        W2(&ps.add("mlp.W2", hidden, hidden, rng)),
        b2(&ps.add_zeros("mlp.b2", 1, hidden)) {}

  int forward(ad::Tape& t, const Feature& x) const {
    const int h1 = t.relu(t.add(t.sparse_affine(*W1, x), t.leaf(*b1)));
    return t.relu(t.add(t.matmul(h1, t.leaf(*W2)), t.leaf(*b2)));
  }
};

// ---------------------------------------------------------------------------
// propagation-path diagnostic: length-L walk counts into `target` over the
// undirected adjacency with self-loops, i.e. entries of (A+I)^L

inline std::map<int, uint64_t> count_propagation_paths(const EnhancedDFG& g,
                                                       int target, int L) {
  if (L < 1) throw std::invalid_argument("count_propagation_paths: L must be >= 1");
  const size_t n = g.nodes.size();
  // undirected 0/1 adjacency: parallel edges collapse; explicit self edges
  // collapse into the identity term added below
  std::vector<std::set<int>> adj(n);
  for (const auto& e : g.edges) {
    const int a = g.index_of(e.src), b = g.index_of(e.dst);
    if (a == b) continue;
    adj[static_cast<size_t>(a)].insert(b);
    adj[static_cast<size_t>(b)].insert(a);
  }
  std::vector<uint64_t> count(n, 0);
  count[static_cast<size_t>(g.index_of(target))] = 1;
  for (int step = 0; step < L; ++step) {
    std::vector<uint64_t> next(n, 0);
    for (size_t i = 0; i < n; ++i) {
      next[i] = count[i];  // self-loop
      for (int j : adj[i]) next[i] += count[static_cast<size_t>(j)];
    }
    count.swap(next);
  }
  std::map<int, uint64_t> out;
  for (size_t i = 0; i < n; ++i) out[g.nodes[i].id] = count[i];
  return out;
}

}  // namespace cvi::models
