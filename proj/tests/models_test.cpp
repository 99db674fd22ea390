#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <tuple>
#include <vector>

#include "cvi/autodiff.hpp"
#include "cvi/dfg.hpp"
#include "cvi/models.hpp"
#include "cvi/rng.hpp"
#include "cvi/slice.hpp"

namespace {

using namespace cvi;
using namespace cvi::models;

EnhancedDFG make_graph(const std::vector<int>& ids,
                       const std::vector<std::tuple<int, int, char>>& edges,
                       const std::set<int>& onodes = {}) {
  EnhancedDFG g;
  for (int id : ids) {
    GraphNode n;
    n.id = id;
    n.is_onode = onodes.count(id) > 0;
    if (n.is_onode)
      n.opcode = "op";
    else
      n.live_var = id;
    g.nodes.push_back(n);
  }
  for (const auto& [s, d, k] : edges)
    g.edges.push_back({s, d, edge_kind_from_char(k)});
  g.finalize();
  return g;
}

ad::Param& find_param(ad::ParamStore& ps, const std::string& name) {
  for (auto& p : ps.params())
    if (p.name == name) return p;
  throw std::runtime_error("no param " + name);
}

void zero_all(ad::ParamStore& ps) {
  for (auto& p : ps.params()) std::fill(p.t.v.begin(), p.t.v.end(), 0.0);
}

void set_identity(ad::Param& p) {
  std::fill(p.t.v.begin(), p.t.v.end(), 0.0);
  for (int i = 0; i < std::min(p.t.rows, p.t.cols); ++i)
    p.t.v[static_cast<size_t>(i * p.t.cols + i)] = 1.0;
}

std::vector<double> densify(const Feature& f, int dim) {
  std::vector<double> x(static_cast<size_t>(dim), 0.0);
  for (const auto& s : f) x[static_cast<size_t>(s.index)] += s.value;
  return x;
}

std::vector<double> row_of(const ad::Tape& t, int id) { return t.val(id).v; }

double sigmoid_d(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// y = x * W for a 1 x rows input against a rows x cols matrix
std::vector<double> matvec(const std::vector<double>& x, const ad::Param& W) {
  std::vector<double> y(static_cast<size_t>(W.t.cols), 0.0);
  for (int i = 0; i < W.t.rows; ++i)
    for (int j = 0; j < W.t.cols; ++j)
      y[static_cast<size_t>(j)] +=
          x[static_cast<size_t>(i)] * W.t.v[static_cast<size_t>(i * W.t.cols + j)];
  return y;
}

void add_into(std::vector<double>& a, const std::vector<double>& b,
              double s = 1.0) {
  for (size_t i = 0; i < a.size(); ++i) a[i] += s * b[i];
}

// ---------------------------------------------------------------------------
// Tree-LSTM

TEST(TreeLstmTest, ZeroParamsSingleNodeIsZero) {
  ad::ParamStore ps;
  Rng rng(1);
  TreeLstm m(ps, 4, 3, rng);
  zero_all(ps);

  DataFlowTree tree;
  tree.root = 0;
  tree.k = 15;
  tree.nodes.push_back({0, -1, TreeEdgeType::Root, 0});
  FeatureMap feats{{0, Feature{{0, 1.0}, {3, -1.0}}}};

  ad::Tape t;
  const int h = m.root_hidden(t, tree, feats);
  for (double v : row_of(t, h)) EXPECT_DOUBLE_EQ(v, 0.0);
}

TEST(TreeLstmTest, ChildOrderDoesNotChangeRoot) {
  ad::ParamStore ps;
  Rng rng(7);
  TreeLstm m(ps, 5, 4, rng);

  FeatureMap feats{{0, Feature{{0, 1.0}, {4, 0.3}}},
                   {1, Feature{{1, 1.0}, {4, -1.0}}},
                   {2, Feature{{2, 1.0}, {4, 0.9}}}};
  DataFlowTree ab, ba;
  ab.root = ba.root = 0;
  ab.k = ba.k = 15;
  ab.nodes = {{0, -1, TreeEdgeType::Root, 0},
              {1, 0, TreeEdgeType::DDefine, 1},
              {2, 0, TreeEdgeType::DUse, 1}};
  ba.nodes = {{0, -1, TreeEdgeType::Root, 0},
              {2, 0, TreeEdgeType::DUse, 1},
              {1, 0, TreeEdgeType::DDefine, 1}};

  ad::Tape ta, tb;
  const auto ha = row_of(ta, m.root_hidden(ta, ab, feats));
  const auto hb = row_of(tb, m.root_hidden(tb, ba, feats));
  ASSERT_EQ(ha.size(), hb.size());
  for (size_t i = 0; i < ha.size(); ++i) EXPECT_EQ(ha[i], hb[i]);  // bitwise
}

// independent straight-line evaluation of the recurrence
std::vector<double> oracle_tlstm(ad::ParamStore& ps, const DataFlowTree& tree,
                                 const FeatureMap& feats, int hidden,
                                 int node_id, std::map<int, std::vector<double>>& cs) {
  std::map<int, std::vector<int>> kids;
  for (const auto& n : tree.nodes)
    if (n.parent >= 0) kids[n.parent].push_back(n.id);

  std::vector<std::vector<double>> child_h, child_c;
  for (int kid : kids[node_id]) {
    child_h.push_back(oracle_tlstm(ps, tree, feats, hidden, kid, cs));
    child_c.push_back(cs.at(kid));
  }
  const int H = hidden;
  std::vector<double> hsum(static_cast<size_t>(H), 0.0);
  for (const auto& ch : child_h) add_into(hsum, ch);

  const auto dense_x = [&] {
    const ad::Param& W = find_param(ps, "tlstm.Wi");
    return densify(feats.at(node_id), W.t.rows);
  }();
  const auto gate = [&](const char* Wn, const char* Un, const char* bn,
                        bool tanh_act) {
    std::vector<double> z = matvec(dense_x, find_param(ps, Wn));
    add_into(z, matvec(hsum, find_param(ps, Un)));
    add_into(z, find_param(ps, bn).t.v);
    for (double& v : z) v = tanh_act ? std::tanh(v) : sigmoid_d(v);
    return z;
  };
  const auto ig = gate("tlstm.Wi", "tlstm.Ui", "tlstm.bi", false);
  const auto og = gate("tlstm.Wo", "tlstm.Uo", "tlstm.bo", false);
  const auto ug = gate("tlstm.Wu", "tlstm.Uu", "tlstm.bu", true);

  std::vector<double> c(static_cast<size_t>(H), 0.0);
  for (int j = 0; j < H; ++j)
    c[static_cast<size_t>(j)] =
        ig[static_cast<size_t>(j)] * ug[static_cast<size_t>(j)];
  for (size_t kidx = 0; kidx < child_h.size(); ++kidx) {
    std::vector<double> fz = matvec(dense_x, find_param(ps, "tlstm.Wf"));
    add_into(fz, matvec(child_h[kidx], find_param(ps, "tlstm.Uf")));
    add_into(fz, find_param(ps, "tlstm.bf").t.v);
    for (int j = 0; j < H; ++j)
      c[static_cast<size_t>(j)] += sigmoid_d(fz[static_cast<size_t>(j)]) *
                                   child_c[kidx][static_cast<size_t>(j)];
  }
  std::vector<double> h(static_cast<size_t>(H), 0.0);
  for (int j = 0; j < H; ++j)
    h[static_cast<size_t>(j)] =
        og[static_cast<size_t>(j)] * std::tanh(c[static_cast<size_t>(j)]);
  cs[node_id] = c;
  return h;
}

TEST(TreeLstmTest, SevenNodeTreeMatchesStraightLineOracle) {
  ad::ParamStore ps;
  Rng rng(99);
  const int F = 6, H = 5;
  TreeLstm m(ps, F, H, rng);
  for (auto& p : ps.params())  // nonzero biases exercise every term
    if (p.t.rows == 1)
      for (auto& v : p.t.v) v = rng.uniform(-0.5, 0.5);

  DataFlowTree tree;
  tree.root = 10;
  tree.k = 15;
  tree.nodes = {{10, -1, TreeEdgeType::Root, 0}, {11, 10, TreeEdgeType::DUse, 1},
                {12, 10, TreeEdgeType::DDefine, 1}, {13, 11, TreeEdgeType::CUse, 2},
                {14, 12, TreeEdgeType::IDefine, 2}, {15, 12, TreeEdgeType::RDefine, 2},
                {16, 15, TreeEdgeType::DDefine, 3}};
  FeatureMap feats;
  for (const auto& n : tree.nodes)
    feats[n.id] = Feature{{static_cast<int>(rng.below(F - 1)), 1.0},
                          {F - 1, rng.uniform(-1.0, 1.0)}};

  ad::Tape t;
  const auto got = row_of(t, m.root_hidden(t, tree, feats));
  std::map<int, std::vector<double>> cs;
  const auto want = oracle_tlstm(ps, tree, feats, H, 10, cs);
  ASSERT_EQ(got.size(), want.size());
  for (size_t i = 0; i < got.size(); ++i) EXPECT_NEAR(got[i], want[i], 1e-9);
}

// ---------------------------------------------------------------------------
// BRGCN

TEST(BrgcnTest, IsolatedNodeWithIdentitySelfIsInput) {
  ad::ParamStore ps;
  Rng rng(3);
  const int F = 4;
  Brgcn m(ps, F, F, 1, rng, /*use_relu=*/false);
  zero_all(ps);
  set_identity(find_param(ps, "brgcn.l0.self"));

  EnhancedDFG g = make_graph({5}, {});
  FeatureMap feats{{5, Feature{{1, 1.0}, {3, -1.0}}}};
  ad::Tape t;
  const auto h = m.forward(t, g, feats, {5});
  const auto got = row_of(t, h.at(5));
  const auto want = densify(feats.at(5), F);
  for (size_t i = 0; i < got.size(); ++i) EXPECT_DOUBLE_EQ(got[i], want[i]);
}

TEST(BrgcnTest, SingleEdgeIdentityWeightsAddNeighbors) {
  ad::ParamStore ps;
  Rng rng(3);
  const int F = 4;
  Brgcn m(ps, F, F, 1, rng, /*use_relu=*/false);
  zero_all(ps);
  set_identity(find_param(ps, "brgcn.l0.self"));
  set_identity(find_param(ps, "brgcn.l0.d.in"));
  set_identity(find_param(ps, "brgcn.l0.d.out"));

  EnhancedDFG g = make_graph({0, 1}, {{0, 1, 'd'}}, {0});
  FeatureMap feats{{0, Feature{{0, 1.0}, {3, 0.5}}},
                   {1, Feature{{1, 1.0}, {3, -1.0}}}};
  ad::Tape t;
  const auto h = m.forward(t, g, feats, {0, 1});

  const auto x0 = densify(feats.at(0), F), x1 = densify(feats.at(1), F);
  const auto h1 = row_of(t, h.at(1));  // c = 1: h_dst = h_src + h_dst
  const auto h0 = row_of(t, h.at(0));  // symmetric via the out term
  for (int j = 0; j < F; ++j) {
    EXPECT_DOUBLE_EQ(h1[static_cast<size_t>(j)],
                     x0[static_cast<size_t>(j)] + x1[static_cast<size_t>(j)]);
    EXPECT_DOUBLE_EQ(h0[static_cast<size_t>(j)],
                     x0[static_cast<size_t>(j)] + x1[static_cast<size_t>(j)]);
  }
}

// unrolled simultaneous-update oracle with plain vectors
std::map<int, std::vector<double>> oracle_brgcn(ad::ParamStore& ps,
                                                const EnhancedDFG& g,
                                                const FeatureMap& feats,
                                                int F, int H, int L,
                                                bool use_relu) {
  std::map<int, std::vector<double>> h;
  for (const auto& n : g.nodes) h[n.id] = densify(feats.at(n.id), F);
  const char* rel = "dicr";
  for (int l = 0; l < L; ++l) {
    std::map<int, std::vector<double>> next;
    for (const auto& node : g.nodes) {
      const int id = node.id;
      std::vector<double> z(static_cast<size_t>(H), 0.0);
      for (int r = 0; r < 4; ++r) {
        std::vector<int> ins, outs;
        for (const auto& e : g.edges) {
          if (static_cast<int>(e.kind) != r) continue;
          if (e.dst == id) ins.push_back(e.src);
          if (e.src == id) outs.push_back(e.dst);
        }
        const double c = std::max<size_t>(ins.size() + outs.size(), 1);
        const std::string base =
            "brgcn.l" + std::to_string(l) + "." + std::string(1, rel[r]);
        for (int j : ins)
          add_into(z, matvec(h.at(j), find_param(ps, base + ".in")), 1.0 / c);
        for (int k : outs)
          add_into(z, matvec(h.at(k), find_param(ps, base + ".out")), 1.0 / c);
      }
      add_into(z, matvec(h.at(id),
                         find_param(ps, "brgcn.l" + std::to_string(l) + ".self")));
      if (use_relu)
        for (double& v : z) v = std::max(v, 0.0);
      next[id] = z;
    }
    h.swap(next);
  }
  return h;
}

TEST(BrgcnTest, FixtureGraphMatchesUnrolledOracle) {
  EnhancedDFG g = load_dfg(std::string(CVI_SOURCE_DIR) + "/fixtures/demo.json");
  const auto vocab = build_vocab({&g});
  const int F = graph_feature_dim(vocab), H = 5, L = 3;
  const FeatureMap feats = graph_features(g, vocab, true);

  ad::ParamStore ps;
  Rng rng(2718);
  Brgcn m(ps, F, H, L, rng);

  std::vector<int> all_ids;
  for (const auto& n : g.nodes) all_ids.push_back(n.id);
  ad::Tape t;
  const auto got = m.forward(t, g, feats, all_ids);
  const auto want = oracle_brgcn(ps, g, feats, F, H, L, true);
  for (const auto& n : g.nodes) {
    const auto gv = row_of(t, got.at(n.id));
    const auto& wv = want.at(n.id);
    for (int j = 0; j < H; ++j)
      EXPECT_NEAR(gv[static_cast<size_t>(j)], wv[static_cast<size_t>(j)], 1e-9)
          << "node " << n.id << " dim " << j;
  }
}

TEST(BrgcnTest, NodesBeyondLHopsHaveZeroInfluence) {
  // path 0 - 1 - 2 - 3 - 4, L = 2, watching node 0
  EnhancedDFG g = make_graph(
      {0, 1, 2, 3, 4}, {{0, 1, 'd'}, {1, 2, 'd'}, {2, 3, 'd'}, {3, 4, 'd'}},
      {1, 3});
  const int F = 3, H = 4, L = 2;
  ad::ParamStore ps;
  Rng rng(5);
  Brgcn m(ps, F, H, L, rng);

  FeatureMap base;
  for (int id = 0; id < 5; ++id) base[id] = Feature{{id % F, 1.0}, {F - 1, 0.25}};
  std::vector<int> ids{0, 1, 2, 3, 4};

  ad::Tape t0;
  const auto h_ref = row_of(t0, m.forward(t0, g, base, ids).at(0));

  FeatureMap far = base;
  far[3] = Feature{};  // zeroed feature at distance 3
  ad::Tape t1;
  const auto h_far = row_of(t1, m.forward(t1, g, far, ids).at(0));
  for (size_t i = 0; i < h_ref.size(); ++i) EXPECT_EQ(h_ref[i], h_far[i]);

  FeatureMap near_ = base;
  near_[2] = Feature{};  // distance 2 is inside the receptive field
  ad::Tape t2;
  const auto h_near = row_of(t2, m.forward(t2, g, near_, ids).at(0));
  bool any_diff = false;
  for (size_t i = 0; i < h_ref.size(); ++i)
    if (h_ref[i] != h_near[i]) any_diff = true;
  EXPECT_TRUE(any_diff);
}

TEST(BrgcnTest, ReceptiveBallForwardIsBitIdenticalToFull) {
  EnhancedDFG g = load_dfg(std::string(CVI_SOURCE_DIR) + "/fixtures/demo.json");
  const auto vocab = build_vocab({&g});
  const int F = graph_feature_dim(vocab), H = 6, L = 3;
  const FeatureMap feats = graph_features(g, vocab, true);

  ad::ParamStore ps;
  Rng rng(31337);
  Brgcn m(ps, F, H, L, rng);

  std::vector<int> all_ids;
  for (const auto& n : g.nodes) all_ids.push_back(n.id);
  ad::Tape tf;
  const auto full = m.forward(tf, g, feats, all_ids);

  for (int seed : {7, 15, 1}) {
    const std::vector<int> ball = receptive_ball(g, {seed}, L);
    EXPECT_LT(ball.size(), g.nodes.size());  // actually a restriction
    ad::Tape tb;
    const auto sub = m.forward(tb, g, feats, ball);
    const auto want = row_of(tf, full.at(seed));
    const auto got = row_of(tb, sub.at(seed));
    for (size_t i = 0; i < want.size(); ++i)
      EXPECT_EQ(want[i], got[i]) << "seed " << seed << " dim " << i;
  }
}

TEST(ConvGnnTest, IgnoresOutgoingEdges) {
  ad::ParamStore ps;
  Rng rng(3);
  const int F = 4;
  ConvGnn m(ps, F, F, 1, rng, /*use_relu=*/false);
  zero_all(ps);
  set_identity(find_param(ps, "conv.l0.W"));
  set_identity(find_param(ps, "conv.l0.self"));

  EnhancedDFG g = make_graph({0, 1}, {{0, 1, 'd'}}, {0});
  FeatureMap feats{{0, Feature{{0, 1.0}, {3, 0.5}}},
                   {1, Feature{{1, 1.0}, {3, -1.0}}}};
  ad::Tape t;
  const auto h = m.forward(t, g, feats, {0, 1});

  const auto x0 = densify(feats.at(0), F), x1 = densify(feats.at(1), F);
  const auto h1 = row_of(t, h.at(1));
  const auto h0 = row_of(t, h.at(0));
  for (int j = 0; j < F; ++j) {
    EXPECT_DOUBLE_EQ(h1[static_cast<size_t>(j)],
                     x0[static_cast<size_t>(j)] + x1[static_cast<size_t>(j)]);
    // src has no incoming edges: self term only
    EXPECT_DOUBLE_EQ(h0[static_cast<size_t>(j)], x0[static_cast<size_t>(j)]);
  }
}

TEST(ConvGnnTest, SharesOneWeightAcrossEdgeKinds) {
  ad::ParamStore ps;
  Rng rng(11);
  const int F = 3;
  ConvGnn m(ps, F, F, 1, rng, false);

  // same topology, different edge kinds -> identical outputs
  EnhancedDFG gd = make_graph({0, 1}, {{0, 1, 'd'}}, {0});
  EnhancedDFG gr = make_graph({0, 1}, {{0, 1, 'r'}}, {0});
  FeatureMap feats{{0, Feature{{0, 1.0}, {2, 0.5}}},
                   {1, Feature{{1, 1.0}, {2, -1.0}}}};
  ad::Tape td, tr;
  const auto hd = row_of(td, m.forward(td, gd, feats, {0, 1}).at(1));
  const auto hr = row_of(tr, m.forward(tr, gr, feats, {0, 1}).at(1));
  for (size_t i = 0; i < hd.size(); ++i) EXPECT_EQ(hd[i], hr[i]);
}

// ---------------------------------------------------------------------------
// pooling, output layer, MLP

TEST(PoolTest, ModesAndPermutationInvariance) {
  ad::Tape t;
  const int a = t.constant(1, 2, {1, 5});
  const int b = t.constant(1, 2, {3, 2});
  const auto mx = row_of(t, pool(t, {a, b}, PoolMode::Max));
  EXPECT_DOUBLE_EQ(mx[0], 3);
  EXPECT_DOUBLE_EQ(mx[1], 5);

  const int c = t.constant(1, 2, {2, 2});
  const int d = t.constant(1, 2, {4, 4});
  const auto av = row_of(t, pool(t, {c, d}, PoolMode::Avg));
  EXPECT_DOUBLE_EQ(av[0], 3);
  EXPECT_DOUBLE_EQ(av[1], 3);

  const auto sm = row_of(t, pool(t, {c, d}, PoolMode::Sum));
  EXPECT_DOUBLE_EQ(sm[0], 6);

  for (PoolMode mode : {PoolMode::Max, PoolMode::Avg, PoolMode::Sum}) {
    const auto fwd = row_of(t, pool(t, {a, b, c}, mode));
    const auto rev = row_of(t, pool(t, {c, a, b}, mode));
    for (size_t i = 0; i < fwd.size(); ++i) EXPECT_EQ(fwd[i], rev[i]);
  }
  EXPECT_THROW(pool(t, {}, PoolMode::Max), std::runtime_error);
}

TEST(OutputLayerTest, SigmoidAffine) {
  ad::ParamStore ps;
  Rng rng(1);
  OutputLayer out(ps, 3, rng);
  zero_all(ps);

  ad::Tape t;
  const int h = t.constant(1, 3, {0.7, -2.0, 4.0});
  EXPECT_DOUBLE_EQ(t.scalar(out.probability(t, h)), 0.5);  // A=0, b=0

  find_param(ps, "out.A").t.v = {1.0, 0.0, 0.0};
  ad::Tape t2;
  const int h2 = t2.constant(1, 3, {std::log(3.0), 9.0, -9.0});
  EXPECT_NEAR(t2.scalar(out.probability(t2, h2)), 0.75, 1e-12);

  EXPECT_TRUE(threshold_label(0.5));
  EXPECT_TRUE(threshold_label(0.75));
  EXPECT_FALSE(threshold_label(0.4999));
}

TEST(MlpTest, ZeroParamsPredictHalfAndHandComputation) {
  ad::ParamStore ps;
  Rng rng(1);
  Mlp m(ps, 2, 2, rng);
  OutputLayer out(ps, 2, rng);
  zero_all(ps);

  ad::Tape t;
  const Feature x{{0, 1.0}, {1, 0.25}};
  const int h = m.forward(t, x);
  EXPECT_DOUBLE_EQ(t.scalar(out.probability(t, pool(t, {h}, PoolMode::Max))),
                   0.5);

  find_param(ps, "mlp.W1").t.v = {1, 2, 3, 4};
  find_param(ps, "mlp.b1").t.v = {0.5, -0.5};
  set_identity(find_param(ps, "mlp.W2"));
  ad::Tape t2;
  const auto got = row_of(t2, m.forward(t2, x));
  // x*W1 = [1.75, 3]; +b1 = [2.25, 2.5]; relu; *I; relu
  EXPECT_DOUBLE_EQ(got[0], 2.25);
  EXPECT_DOUBLE_EQ(got[1], 2.5);
}

TEST(MlpTest, PoolingOverVnodesIsPermutationInvariant) {
  ad::ParamStore ps;
  Rng rng(17);
  Mlp m(ps, 4, 3, rng);
  std::vector<Feature> xs{{{0, 1.0}, {3, 0.1}},
                          {{1, 1.0}, {3, 0.9}},
                          {{2, 1.0}, {3, -1.0}}};
  ad::Tape ta, tb;
  std::vector<int> ha, hb;
  for (const auto& x : xs) ha.push_back(m.forward(ta, x));
  for (auto it = xs.rbegin(); it != xs.rend(); ++it)
    hb.push_back(m.forward(tb, *it));
  const auto pa = row_of(ta, pool(ta, ha, PoolMode::Max));
  const auto pb = row_of(tb, pool(tb, hb, PoolMode::Max));
  for (size_t i = 0; i < pa.size(); ++i) EXPECT_EQ(pa[i], pb[i]);
}

// ---------------------------------------------------------------------------
// full-pipeline gradients

TEST(ModelGradients, TreeLstmPipelinePassesGradCheck) {
  ad::ParamStore ps;
  Rng rng(404);
  const int F = 5, H = 4;
  TreeLstm m(ps, F, H, rng);
  OutputLayer out(ps, H, rng);

  DataFlowTree t1, t2;
  t1.root = 0;
  t1.nodes = {{0, -1, TreeEdgeType::Root, 0}, {1, 0, TreeEdgeType::DUse, 1}};
  t2.root = 5;
  t2.nodes = {{5, -1, TreeEdgeType::Root, 0},
              {6, 5, TreeEdgeType::DDefine, 1},
              {7, 6, TreeEdgeType::CDefine, 2}};
  FeatureMap feats;
  for (int id : {0, 1, 5, 6, 7})
    feats[id] = Feature{{id % (F - 1), 1.0}, {F - 1, 0.1 * id}};

  const auto build = [&](ad::Tape& t) {
    const int pooled = pool(
        t, {m.root_hidden(t, t1, feats), m.root_hidden(t, t2, feats)},
        PoolMode::Max);
    return t.bce_with_logits(out.logit(t, pooled), 1.0);
  };
  EXPECT_LT(ad::grad_check(build, ps), 1e-4);
}

TEST(ModelGradients, BrgcnPipelinePassesGradCheck) {
  ad::ParamStore ps;
  Rng rng(505);
  const int F = 4, H = 3, L = 2;
  Brgcn m(ps, F, H, L, rng);
  OutputLayer out(ps, H, rng);

  EnhancedDFG g = make_graph({0, 1, 2, 3},
                             {{0, 1, 'd'}, {1, 2, 'd'}, {0, 3, 'c'}}, {1});
  FeatureMap feats;
  for (int id : {0, 1, 2, 3})
    feats[id] = Feature{{id % (F - 1), 1.0}, {F - 1, 0.2 + 0.1 * id}};

  const auto build = [&](ad::Tape& t) {
    const auto h = m.forward(t, g, feats, {0, 1, 2, 3});
    const int pooled = pool(t, {h.at(0), h.at(2), h.at(3)}, PoolMode::Avg);
    return t.bce_with_logits(out.logit(t, pooled), 0.0);
  };
  EXPECT_LT(ad::grad_check(build, ps), 1e-4);
}

// ---------------------------------------------------------------------------
// propagation-path diagnostic

EnhancedDFG fragment_graph() {
  return make_graph({3, 4, 5, 6, 7, 10, 12, 14},
                    {{5, 7, 'd'},
                     {7, 10, 'd'},
                     {4, 5, 'd'},
                     {3, 4, 'd'},
                     {6, 10, 'd'},
                     {10, 12, 'd'},
                     {12, 14, 'd'}},
                    {3, 5, 10, 14});
}

TEST(PropagationPaths, FragmentCountsForTargetSeven) {
  const auto counts = count_propagation_paths(fragment_graph(), 7, 3);
  EXPECT_EQ(counts.at(5), 6u);
  EXPECT_EQ(counts.at(10), 7u);
  EXPECT_EQ(counts.at(14), 1u);
  EXPECT_EQ(counts.at(3), 1u);
  EXPECT_EQ(counts.at(4), 3u);
  EXPECT_EQ(counts.at(6), 3u);
  EXPECT_EQ(counts.at(7), 7u);
  EXPECT_EQ(counts.at(12), 3u);
  uint64_t total = 0;
  for (const auto& [id, c] : counts) total += c;
  EXPECT_EQ(total, 31u);
}

TEST(PropagationPaths, FullFixtureGivesSameCounts) {
  EnhancedDFG g = load_dfg(std::string(CVI_SOURCE_DIR) + "/fixtures/demo.json");
  const auto counts = count_propagation_paths(g, 7, 3);
  EXPECT_EQ(counts.at(5), 6u);
  EXPECT_EQ(counts.at(10), 7u);
  EXPECT_EQ(counts.at(14), 1u);
  uint64_t total = 0;
  for (const auto& [id, c] : counts) total += c;
  EXPECT_EQ(total, 31u);  // nodes off the 3-hop ball contribute zero
  EXPECT_EQ(counts.at(15), 0u);
  EXPECT_EQ(counts.at(8), 0u);
}

TEST(PropagationPaths, OneLayerReachesNeighborsAndSelf) {
  EnhancedDFG g = fragment_graph();
  const auto counts = count_propagation_paths(g, 7, 1);
  EXPECT_EQ(counts.at(7), 1u);
  EXPECT_EQ(counts.at(5), 1u);
  EXPECT_EQ(counts.at(10), 1u);
  EXPECT_EQ(counts.at(4), 0u);
  EXPECT_EQ(counts.at(14), 0u);
}

TEST(PropagationPaths, RejectsNonPositiveL) {
  EXPECT_THROW(count_propagation_paths(fragment_graph(), 7, 0),
               std::invalid_argument);
}

// dense matrix-power oracle
std::map<int, uint64_t> paths_oracle(const EnhancedDFG& g, int target, int L) {
  const size_t n = g.nodes.size();
  std::vector<std::vector<uint64_t>> m(n, std::vector<uint64_t>(n, 0));
  for (size_t i = 0; i < n; ++i) m[i][i] = 1;
  for (const auto& e : g.edges) {
    const size_t a = static_cast<size_t>(g.index_of(e.src));
    const size_t b = static_cast<size_t>(g.index_of(e.dst));
    if (a != b) m[a][b] = m[b][a] = 1;
  }
  std::vector<std::vector<uint64_t>> acc = m;
  for (int p = 1; p < L; ++p) {
    std::vector<std::vector<uint64_t>> nx(n, std::vector<uint64_t>(n, 0));
    for (size_t i = 0; i < n; ++i)
      for (size_t k = 0; k < n; ++k)
        for (size_t j = 0; j < n; ++j) nx[i][j] += acc[i][k] * m[k][j];
    acc.swap(nx);
  }
  std::map<int, uint64_t> out;
  const size_t t = static_cast<size_t>(g.index_of(target));
  for (size_t i = 0; i < n; ++i) out[g.nodes[i].id] = acc[i][t];
  return out;
}

TEST(PropagationPaths, MatchesMatrixPowerOnRandomGraphs) {
  Rng rng(606);
  for (int trial = 0; trial < 40; ++trial) {
    const int n = 2 + static_cast<int>(rng.below(11));
    std::vector<int> ids;
    for (int i = 0; i < n; ++i) ids.push_back(i * 3);  // sparse external ids
    std::vector<std::tuple<int, int, char>> edges;
    const int m = static_cast<int>(rng.below(static_cast<uint64_t>(2 * n)));
    const char kinds[4] = {'d', 'i', 'c', 'r'};
    for (int e = 0; e < m; ++e)
      edges.emplace_back(ids[rng.below(n)], ids[rng.below(n)],
                         kinds[rng.below(4)]);
    std::set<int> onodes;
    EnhancedDFG g = make_graph(ids, edges, onodes);
    const int L = 1 + static_cast<int>(rng.below(5));
    const int target = ids[rng.below(n)];
    EXPECT_EQ(count_propagation_paths(g, target, L),
              paths_oracle(g, target, L));
  }
}

TEST(PropagationPaths, StrictDecayAlongPathGraph) {
  // interior target with >= L nodes on each side, so boundary reflection
  // never skews the counts; they equal the trinomial walk numbers
  std::vector<int> ids;
  std::vector<std::tuple<int, int, char>> edges;
  for (int i = 0; i < 13; ++i) {
    ids.push_back(i);
    if (i > 0) edges.emplace_back(i - 1, i, 'd');
  }
  EnhancedDFG g = make_graph(ids, edges, {1, 3, 5, 7, 9, 11});
  const int L = 5, target = 6;
  const auto counts = count_propagation_paths(g, target, L);
  EXPECT_EQ(counts.at(6), 51u);
  EXPECT_EQ(counts.at(7), 45u);
  EXPECT_EQ(counts.at(11), 1u);
  for (int d = 0; d + 1 <= L; ++d)
    EXPECT_GT(counts.at(target + d), counts.at(target + d + 1))
        << "distance " << d;
  EXPECT_EQ(counts.at(12), 0u);  // beyond L hops
}

// ---------------------------------------------------------------------------
// configuration

TEST(ModelConfigTest, ParsesAndValidates) {
  const ModelConfig def = parse_model_config_text("");
  EXPECT_EQ(def.model, ModelKind::TreeLstm);
  EXPECT_EQ(def.layers, 2);
  EXPECT_EQ(def.hidden, 64);
  EXPECT_EQ(def.pooling, PoolMode::Max);
  EXPECT_TRUE(def.use_mcd);
  EXPECT_EQ(def.k, 15);

  const ModelConfig c = parse_model_config_text(
      "model=brgcn\nlayers=7\nhidden=16\npooling=sum\nuse_mcd=false\nk=9\n"
      "# comment\n\n");
  EXPECT_EQ(c.model, ModelKind::Brgcn);
  EXPECT_EQ(c.layers, 7);
  EXPECT_EQ(c.hidden, 16);
  EXPECT_EQ(c.pooling, PoolMode::Sum);
  EXPECT_FALSE(c.use_mcd);
  EXPECT_EQ(c.k, 9);

  EXPECT_THROW(parse_model_config_text("modle=brgcn\n"), std::runtime_error);
  EXPECT_THROW(parse_model_config_text("model=resnet\n"), std::runtime_error);
  EXPECT_THROW(parse_model_config_text("layers=0\n"), std::runtime_error);
  EXPECT_THROW(parse_model_config_text("use_mcd=maybe\n"), std::runtime_error);
  EXPECT_THROW(parse_model_config_text("pooling\n"), std::runtime_error);

  const ModelConfig rt = parse_model_config_text(serialize_model_config(c));
  EXPECT_EQ(rt.model, c.model);
  EXPECT_EQ(rt.layers, c.layers);
  EXPECT_EQ(rt.hidden, c.hidden);
  EXPECT_EQ(rt.pooling, c.pooling);
  EXPECT_EQ(rt.use_mcd, c.use_mcd);
  EXPECT_EQ(rt.k, c.k);
}

TEST(ModelFeatures, DimsAndTreeEdgeSegment) {
  std::map<std::string, int> vocab{{"add", 0}, {"cmp", 1}};
  EXPECT_EQ(graph_feature_dim(vocab), 5);       // 2 + LIVEVAR + UNK + cdp
  EXPECT_EQ(tree_feature_dim(vocab), 14);       // ... + 9 edge types

  EnhancedDFG g = make_graph({0, 1}, {{0, 1, 'd'}}, {1});
  g.nodes[0].cdp = 65535;
  g.finalize();
  const auto gf = graph_features(g, vocab, true);
  EXPECT_EQ(gf.at(0)[0].index, 2);  // LIVEVAR slot
  EXPECT_DOUBLE_EQ(gf.at(0)[1].value, 1.0);
  const auto gf_off = graph_features(g, vocab, false);
  EXPECT_DOUBLE_EQ(gf_off.at(0)[1].value, -1.0);  // mcd disabled

  DataFlowTree tr = build_tree(g, 0, {.k = 2});
  const auto tf = tree_features(g, tr, vocab, true);
  ASSERT_EQ(tf.at(1).size(), 3u);
  EXPECT_EQ(tf.at(1)[1].index,
            4 + tree_edge_slot(TreeEdgeType::DUse));  // after onehot block
  EXPECT_EQ(tf.at(0)[1].index, 4 + tree_edge_slot(TreeEdgeType::Root));
}

}  // namespace
