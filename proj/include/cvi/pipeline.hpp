#pragma once
// Dataset assembly, leave-one-program-out training/evaluation, ablation
// sweeps, and metrics. A corpus is built per model kind: tree sets for the
// tree-LSTM, shared-graph v-node samples for the graph models, raw v-node
// features for the MLP baseline. Training is per-sample Adam on binary
// cross-entropy; the held-out program never influences parameters.
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <future>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "autodiff.hpp"
#include "cdp.hpp"
#include "dfg.hpp"
#include "models.hpp"
#include "rng.hpp"
#include "slice.hpp"
#include "synth.hpp"
#include "trace.hpp"

namespace cvi::pipeline {

// ---------------------------------------------------------------------------
// corpus sources: one dry trace + liveness + per-instance block-diff counts

struct ProgramSource {
  std::string name;
  Trace dry;
  LivenessResult live;
  std::map<int, int> cdp;  // labeled instance id -> measured n
};

// Replays a generated program once dry and three times per labeled instance
// (one run per flip policy), recording the maximum block-set difference.
inline ProgramSource measure_program(const synth::ToyProgram& p,
                                     const std::vector<uint64_t>& input) {
  ProgramSource s;
  s.name = p.name;
  s.dry = synth::run(p, input);
  s.live = analyze_liveness(s.dry);
  const std::set<uint64_t> dry_bbs = bb_set(s.dry);
  std::map<std::string, int> var_by_name;
  for (const auto& v : p.vars) var_by_name[v.name] = v.id;
  for (const auto& inst : s.live.instances) {
    if (!inst.label.has_value()) continue;
    const auto it = var_by_name.find(inst.name);
    if (it == var_by_name.end())
      throw std::runtime_error("measure_program: labeled instance has no declared variable: " +
                               inst.name);
    std::vector<std::set<uint64_t>> flips;
    for (synth::FlipPolicy pol : synth::kAllFlipPolicies)
      flips.push_back(synth::run_bb_set(p, input, synth::FlipDirective{it->second, pol}));
    s.cdp[inst.id] = measure_cdp(dry_bbs, flips);
  }
  return s;
}

// Measures a program list with inputs derived from one corpus seed, so a
// corpus loaded from disk replays identically to a freshly generated one.
inline std::vector<ProgramSource> sources_from_programs(
    const std::vector<synth::ToyProgram>& programs, uint64_t seed) {
  std::vector<ProgramSource> out;
  out.reserve(programs.size());
  for (size_t i = 0; i < programs.size(); ++i)
    out.push_back(measure_program(
        programs[i], synth::default_input(programs[i], derive_seed(seed, i, 0x1A))));
  return out;
}

inline std::vector<ProgramSource> synth_sources(uint64_t seed, int n_programs,
                                                int n_vars) {
  return sources_from_programs(synth::generate(seed, n_programs, n_vars), seed);
}

// ---------------------------------------------------------------------------
// assembled corpus

struct Sample {
  int instance = -1;
  bool label = false;
  std::vector<int> vnodes;          // external v-node ids, definition order
  std::vector<DataFlowTree> trees;  // tree-LSTM corpora only: one per live-var
};

struct ProgramEntry {
  std::string name;
  EnhancedDFG graph;
  std::vector<Sample> samples;
};

struct Corpus {
  models::ModelKind model = models::ModelKind::TreeLstm;
  int k = 15;
  bool use_mcd = true;
  std::vector<ProgramEntry> programs;
};

inline Corpus assemble(const std::vector<ProgramSource>& sources,
                       models::ModelKind kind, int k, bool use_mcd) {
  Corpus c;
  c.model = kind;
  c.k = k;
  c.use_mcd = use_mcd;
  for (const auto& src : sources) {
    ProgramEntry e;
    e.name = src.name;
    e.graph = build_dfg(src.dry, src.live);
    attach_cdp(e.graph, src.cdp);
    std::map<int, int> vnode_by_livevar;
    for (const auto& n : e.graph.nodes)
      if (!n.is_onode) vnode_by_livevar[n.live_var] = n.id;
    for (const auto& inst : src.live.instances) {
      if (!inst.label.has_value()) continue;
      Sample s;
      s.instance = inst.id;
      s.label = *inst.label;
      for (int lv : inst.live_vars) s.vnodes.push_back(vnode_by_livevar.at(lv));
      if (kind == models::ModelKind::TreeLstm) {
        SliceConfig cfg;
        cfg.k = k;
        s.trees = trees_for_instance(e.graph, inst.id, cfg).trees;
      }
      e.samples.push_back(std::move(s));
    }
    if (e.samples.empty())
      throw std::runtime_error("assemble: program has no labeled instances: " + src.name);
    c.programs.push_back(std::move(e));
  }
  return c;
}

// ---------------------------------------------------------------------------
// folds and metrics

struct Fold {
  std::vector<int> train;
  int test = -1;
};

inline std::vector<Fold> folds(const Corpus& c) {
  if (c.programs.size() < 2)
    throw std::invalid_argument("folds: leave-one-program-out needs at least 2 programs");
  std::vector<Fold> out;
  for (size_t t = 0; t < c.programs.size(); ++t) {
    Fold f;
    f.test = static_cast<int>(t);
    for (size_t i = 0; i < c.programs.size(); ++i)
      if (i != t) f.train.push_back(static_cast<int>(i));
    out.push_back(std::move(f));
  }
  return out;
}

struct FoldResult {
  std::string held_out;
  long long tp = 0, tn = 0, fp = 0, fn = 0;
  std::vector<double> epoch_loss;       // mean train loss per epoch
  std::vector<uint64_t> param_hashes;  // parameter digest after each epoch
};

struct MetricsReport {
  long long tp = 0, tn = 0, fp = 0, fn = 0;
  double accuracy = 0, precision = 0, recall = 0, f1 = 0;
};

inline MetricsReport metrics_from_counts(long long tp, long long tn, long long fp,
                                         long long fn) {
  MetricsReport m;
  m.tp = tp;
  m.tn = tn;
  m.fp = fp;
  m.fn = fn;
  const long long total = tp + tn + fp + fn;
  m.accuracy = total > 0 ? static_cast<double>(tp + tn) / static_cast<double>(total) : 0.0;
  m.precision = tp + fp > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0;
  m.recall = tp + fn > 0 ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0;
  m.f1 = m.precision + m.recall > 0
             ? 2.0 * m.precision * m.recall / (m.precision + m.recall)
             : 0.0;
  return m;
}

inline MetricsReport aggregate(const std::vector<FoldResult>& frs) {
  if (frs.empty()) throw std::invalid_argument("aggregate: need at least one fold");
  long long tp = 0, tn = 0, fp = 0, fn = 0;
  for (const auto& f : frs) {
    tp += f.tp;
    tn += f.tn;
    fp += f.fp;
    fn += f.fn;
  }
  return metrics_from_counts(tp, tn, fp, fn);
}

// ---------------------------------------------------------------------------
// training

struct TrainConfig {
  models::ModelConfig model;
  int epochs = 50;
  double lr = 1e-3;
  uint64_t seed = 1;
};

inline uint64_t hash_params(const ad::ParamStore& ps) {
  uint64_t h = 1469598103934665603ull;
  for (const auto& p : ps.params())
    for (double x : p.t.v) {
      h ^= std::bit_cast<uint64_t>(x);
      h *= 1099511628211ull;
    }
  return h;
}

// Owns the parameters plus whichever network the config selects, and maps a
// sample to its output logit on the given tape.
class ModelRunner {
 public:
  ModelRunner(const models::ModelConfig& cfg, const std::map<std::string, int>& vocab,
              Rng& rng)
      : cfg_(cfg) {
    const int feat = cfg.model == models::ModelKind::TreeLstm
                         ? models::tree_feature_dim(vocab)
                         : models::graph_feature_dim(vocab);
    switch (cfg.model) {
      case models::ModelKind::TreeLstm:
        tl_.emplace(ps_, feat, cfg.hidden, rng);
        break;
      case models::ModelKind::Brgcn:
        gcn_.emplace(ps_, feat, cfg.hidden, cfg.layers, rng);
        break;
      case models::ModelKind::ConvGnn:
        conv_.emplace(ps_, feat, cfg.hidden, cfg.layers, rng);
        break;
      case models::ModelKind::Mlp:
        mlp_.emplace(ps_, feat, cfg.hidden, rng);
        break;
    }
    out_.emplace(ps_, cfg.hidden, rng);
  }

  // `gfeats` are graph-node features (unused for tree-LSTM), `tree_feats`
  // per-tree features (tree-LSTM only), `ball` the receptive node set
  // (graph models only).
  int logit(ad::Tape& t, const ProgramEntry& prog, const Sample& s,
            const models::FeatureMap& gfeats,
            const std::vector<models::FeatureMap>& tree_feats,
            const std::vector<int>& ball) const {
    std::vector<int> rows;
    switch (cfg_.model) {
      case models::ModelKind::TreeLstm:
        for (size_t i = 0; i < s.trees.size(); ++i)
          rows.push_back(tl_->root_hidden(t, s.trees[i], tree_feats[i]));
        break;
      case models::ModelKind::Brgcn: {
        const auto h = gcn_->forward(t, prog.graph, gfeats, ball);
        for (int v : s.vnodes) rows.push_back(h.at(v));
        break;
      }
      case models::ModelKind::ConvGnn: {
        const auto h = conv_->forward(t, prog.graph, gfeats, ball);
        for (int v : s.vnodes) rows.push_back(h.at(v));
        break;
      }
      case models::ModelKind::Mlp:
        for (int v : s.vnodes) rows.push_back(mlp_->forward(t, gfeats.at(v)));
        break;
    }
    return out_->logit(t, models::pool(t, rows, cfg_.pooling));
  }

  ad::ParamStore& params() { return ps_; }
  const ad::ParamStore& params() const { return ps_; }

 private:
  models::ModelConfig cfg_;
  ad::ParamStore ps_;
  std::optional<models::TreeLstm> tl_;
  std::optional<models::Brgcn> gcn_;
  std::optional<models::ConvGnn> conv_;
  std::optional<models::Mlp> mlp_;
  std::optional<models::OutputLayer> out_;
};

namespace detail {

// Everything precomputable per fold: the train-side opcode vocabulary and,
// per program, node features, per-tree features, and receptive balls.
struct FoldData {
  std::map<std::string, int> vocab;
  std::vector<models::FeatureMap> gfeats;                        // per program
  std::vector<std::vector<std::vector<models::FeatureMap>>> tf;  // [prog][sample][tree]
  std::vector<std::vector<std::vector<int>>> balls;              // [prog][sample]
};

inline FoldData prepare_fold(const Corpus& c, const Fold& fold,
                             const models::ModelConfig& cfg) {
  FoldData d;
  std::vector<const EnhancedDFG*> train_graphs;
  for (int tp : fold.train) train_graphs.push_back(&c.programs[static_cast<size_t>(tp)].graph);
  d.vocab = build_vocab(train_graphs);
  const bool mcd = c.use_mcd;
  d.gfeats.resize(c.programs.size());
  d.tf.resize(c.programs.size());
  d.balls.resize(c.programs.size());
  for (size_t pi = 0; pi < c.programs.size(); ++pi) {
    const auto& prog = c.programs[pi];
    if (cfg.model != models::ModelKind::TreeLstm)
      d.gfeats[pi] = models::graph_features(prog.graph, d.vocab, mcd);
    if (cfg.model == models::ModelKind::TreeLstm) {
      d.tf[pi].resize(prog.samples.size());
      for (size_t si = 0; si < prog.samples.size(); ++si)
        for (const auto& tree : prog.samples[si].trees)
          d.tf[pi][si].push_back(models::tree_features(prog.graph, tree, d.vocab, mcd));
    }
    if (cfg.model == models::ModelKind::Brgcn || cfg.model == models::ModelKind::ConvGnn) {
      d.balls[pi].resize(prog.samples.size());
      for (size_t si = 0; si < prog.samples.size(); ++si)
        d.balls[pi][si] = models::receptive_ball(prog.graph, prog.samples[si].vnodes,
                                                 cfg.layers);
    }
  }
  return d;
}

}  // namespace detail

inline FoldResult train_fold(const Corpus& c, const Fold& fold, const TrainConfig& cfg) {
  const detail::FoldData data = detail::prepare_fold(c, fold, cfg.model);
  Rng init_rng(derive_seed(cfg.seed, static_cast<uint64_t>(fold.test), 0x17));
  ModelRunner model(cfg.model, data.vocab, init_rng);

  std::vector<std::pair<int, int>> order;  // (program, sample)
  for (int tp : fold.train)
    for (size_t si = 0; si < c.programs[static_cast<size_t>(tp)].samples.size(); ++si)
      order.emplace_back(tp, static_cast<int>(si));

  FoldResult fr;
  fr.held_out = c.programs[static_cast<size_t>(fold.test)].name;
  Rng shuffle_rng(derive_seed(cfg.seed, static_cast<uint64_t>(fold.test), 0x54));
  ad::Tape tape;
  const auto sample_logit = [&](int pi, int si) {
    const auto& prog = c.programs[static_cast<size_t>(pi)];
    const auto& s = prog.samples[static_cast<size_t>(si)];
    static const std::vector<models::FeatureMap> no_trees;
    static const std::vector<int> no_ball;
    const auto& tf = data.tf[static_cast<size_t>(pi)].empty()
                         ? no_trees
                         : data.tf[static_cast<size_t>(pi)][static_cast<size_t>(si)];
    const auto& ball = data.balls[static_cast<size_t>(pi)].empty()
                           ? no_ball
                           : data.balls[static_cast<size_t>(pi)][static_cast<size_t>(si)];
    return model.logit(tape, prog, s, data.gfeats[static_cast<size_t>(pi)], tf, ball);
  };

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    double loss_sum = 0;
    for (const auto& [pi, si] : order) {
      tape.reset();
      const int z = sample_logit(pi, si);
      const bool y = c.programs[static_cast<size_t>(pi)].samples[static_cast<size_t>(si)].label;
      const int loss = tape.bce_with_logits(z, y ? 1.0 : 0.0);
      const double lv = tape.scalar(loss);
      if (!std::isfinite(lv))
        throw std::runtime_error("train_fold: loss diverged (" + std::to_string(lv) +
                                 ") at epoch " + std::to_string(epoch) + ", held_out=" +
                                 fr.held_out + ", model=" + models::to_string(cfg.model.model));
      tape.backward(loss);
      model.params().adam_step(cfg.lr);
      loss_sum += lv;
    }
    fr.epoch_loss.push_back(order.empty() ? 0.0 : loss_sum / static_cast<double>(order.size()));
    fr.param_hashes.push_back(hash_params(model.params()));
  }

  const auto& test_prog = c.programs[static_cast<size_t>(fold.test)];
  for (size_t si = 0; si < test_prog.samples.size(); ++si) {
    tape.reset();
    const int z = sample_logit(fold.test, static_cast<int>(si));
    const double prob = 1.0 / (1.0 + std::exp(-tape.scalar(z)));
    const bool pred = models::threshold_label(prob);
    const bool truth = test_prog.samples[si].label;
    if (pred && truth) ++fr.tp;
    if (pred && !truth) ++fr.fp;
    if (!pred && truth) ++fr.fn;
    if (!pred && !truth) ++fr.tn;
  }
  return fr;
}

struct LopoResult {
  std::vector<FoldResult> folds;
  MetricsReport metrics;
  double seconds = 0;
};

// One fold per program; folds are independent and run concurrently when the
// host has more than one core.
inline LopoResult run_lopo(const Corpus& c, const TrainConfig& cfg,
                           bool parallel = true) {
  const auto fs = folds(c);
  const auto t0 = std::chrono::steady_clock::now();
  const bool threaded = parallel && fs.size() > 1 && std::thread::hardware_concurrency() > 1;
  std::vector<std::future<FoldResult>> futs;
  futs.reserve(fs.size());
  for (const auto& f : fs)
    futs.push_back(std::async(threaded ? std::launch::async : std::launch::deferred,
                              [&c, &cfg, f] { return train_fold(c, f, cfg); }));
  LopoResult r;
  for (auto& fu : futs) r.folds.push_back(fu.get());
  r.metrics = aggregate(r.folds);
  r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return r;
}

// ---------------------------------------------------------------------------
// sweeps

enum class SweepAxis { Layers, Depth, Pooling, Mcd };

inline const char* sweep_axis_name(SweepAxis a) {
  switch (a) {
    case SweepAxis::Layers: return "layers";
    case SweepAxis::Depth: return "depth";
    case SweepAxis::Pooling: return "pooling";
    case SweepAxis::Mcd: return "mcd";
  }
  return "?";
}

inline SweepAxis sweep_axis_from(const std::string& s) {
  if (s == "layers") return SweepAxis::Layers;
  if (s == "depth") return SweepAxis::Depth;
  if (s == "pooling") return SweepAxis::Pooling;
  if (s == "mcd") return SweepAxis::Mcd;
  throw std::runtime_error("unknown sweep axis: " + s);
}

struct SweepRow {
  std::string model;
  std::string setting;
  MetricsReport metrics;
  double seconds = 0;
};

inline std::vector<SweepRow> sweep(const std::vector<ProgramSource>& sources,
                                   const TrainConfig& base, SweepAxis axis) {
  std::vector<SweepRow> rows;
  const auto run_one = [&](const TrainConfig& cfg, const std::string& setting) {
    const Corpus c = assemble(sources, cfg.model.model, cfg.model.k, cfg.model.use_mcd);
    const LopoResult r = run_lopo(c, cfg);
    rows.push_back({models::to_string(cfg.model.model), setting, r.metrics, r.seconds});
  };
  switch (axis) {
    case SweepAxis::Layers:
      for (int L = 1; L <= 10; ++L) {
        TrainConfig cfg = base;
        cfg.model.layers = L;
        run_one(cfg, "layers=" + std::to_string(L));
      }
      break;
    case SweepAxis::Depth:
      for (int k : {3, 6, 9, 12, 15, 18}) {
        TrainConfig cfg = base;
        cfg.model.k = k;
        run_one(cfg, "k=" + std::to_string(k));
      }
      break;
    case SweepAxis::Pooling:
      for (models::PoolMode m :
           {models::PoolMode::Max, models::PoolMode::Avg, models::PoolMode::Sum}) {
        TrainConfig cfg = base;
        cfg.model.pooling = m;
        run_one(cfg, "pooling=" + models::to_string(m));
      }
      break;
    case SweepAxis::Mcd:
      for (bool b : {true, false}) {
        TrainConfig cfg = base;
        cfg.model.use_mcd = b;
        run_one(cfg, b ? "mcd=true" : "mcd=false");
      }
      break;
  }
  return rows;
}

// ---------------------------------------------------------------------------
// reports

inline void write_results_csv(const std::vector<SweepRow>& rows, std::ostream& out) {
  out << "model,setting,accuracy,precision,recall,f1,seconds\n";
  out << std::fixed;
  for (const auto& r : rows) {
    out.precision(4);
    out << r.model << ',' << r.setting << ',' << r.metrics.accuracy << ','
        << r.metrics.precision << ',' << r.metrics.recall << ',' << r.metrics.f1 << ',';
    out.precision(3);
    out << r.seconds << '\n';
  }
}

inline void write_results_csv(const std::vector<SweepRow>& rows, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write results: " + path);
  write_results_csv(rows, out);
}

inline nlohmann::json run_manifest(const TrainConfig& cfg, uint64_t corpus_seed,
                                   int n_programs, int n_vars,
                                   const std::string& axis = "") {
  nlohmann::json j;
  j["seed"] = cfg.seed;
  j["corpus"] = {{"seed", corpus_seed}, {"n_programs", n_programs}, {"n_vars", n_vars}};
  j["model"] = {{"kind", models::to_string(cfg.model.model)},
                {"layers", cfg.model.layers},
                {"hidden", cfg.model.hidden},
                {"pooling", models::to_string(cfg.model.pooling)},
                {"use_mcd", cfg.model.use_mcd},
                {"k", cfg.model.k}};
  j["train"] = {{"epochs", cfg.epochs}, {"lr", cfg.lr}};
  if (!axis.empty()) j["axis"] = axis;
  return j;
}

}  // namespace cvi::pipeline
