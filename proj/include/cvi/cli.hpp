#pragma once
// Command-line surface: every pipeline stage as a headless subcommand over
// file artifacts. Output on stdout is deterministic given flags + seed so
// runs can be golden-tested; diagnostics go to stderr, gated by CVI_LOG.
#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <queue>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "pipeline.hpp"

namespace cvi::cli {

inline int log_level() {
  const char* v = std::getenv("CVI_LOG");
  if (!v) return 0;
  try {
    return std::stoi(v);
  } catch (...) {
    return 0;
  }
}

inline void note(std::ostream& err, const std::string& msg) {
  if (log_level() >= 1) err << "cvi: " << msg << "\n";
}

// ---------------------------------------------------------------------------
// propagation-path diagnostic selection

// The walk counts cover every node in the L-ball, but the diagnostic report
// follows the variable's define-use chain: the instruction nodes that write
// the target directly plus every instruction on its forward use chain within
// L hops. The printed total still sums all aggregation paths.
struct PathReport {
  std::vector<std::pair<int, uint64_t>> entries;  // (node id, count), ascending
  uint64_t total = 0;
};

inline PathReport propagation_report(const EnhancedDFG& g, int target, int layers) {
  const auto counts = models::count_propagation_paths(g, target, layers);
  PathReport r;
  for (const auto& [id, c] : counts) r.total += c;

  std::set<int> selected;
  const int ti = g.index_of(target);
  for (const auto& e : g.in_edges(ti)) {
    const GraphNode& n = g.nodes[static_cast<size_t>(e.node)];
    if (n.is_onode) selected.insert(n.id);
  }
  std::map<int, int> hops;  // node index -> forward distance
  std::queue<int> q;
  hops[ti] = 0;
  q.push(ti);
  while (!q.empty()) {
    const int at = q.front();
    q.pop();
    if (hops[at] >= layers) continue;
    for (const auto& e : g.out_edges(at))
      if (!hops.count(e.node)) {
        hops[e.node] = hops[at] + 1;
        q.push(e.node);
      }
  }
  for (const auto& [idx, d] : hops) {
    const GraphNode& n = g.nodes[static_cast<size_t>(idx)];
    if (d > 0 && n.is_onode) selected.insert(n.id);
  }
  for (int id : selected) r.entries.emplace_back(id, counts.at(id));
  return r;
}

// ---------------------------------------------------------------------------
// shared artifact helpers

namespace detail {

inline nlohmann::json read_json_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open: " + path);
  nlohmann::json j;
  in >> j;
  return j;
}

inline void write_json_file(const nlohmann::json& j, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write: " + path);
  out << j.dump(1) << "\n";
}

struct LoadedCorpus {
  uint64_t seed = 0;
  int n_vars = 0;
  std::vector<synth::ToyProgram> programs;
};

inline LoadedCorpus load_corpus_dir(const std::string& dir) {
  namespace fs = std::filesystem;
  const nlohmann::json manifest = read_json_file((fs::path(dir) / "corpus.json").string());
  LoadedCorpus c;
  c.seed = manifest.at("seed").get<uint64_t>();
  c.n_vars = manifest.at("n_vars").get<int>();
  for (const auto& f : manifest.at("programs"))
    c.programs.push_back(synth::load_program((fs::path(dir) / f.get<std::string>()).string()));
  return c;
}

inline models::ModelConfig load_model_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config: " + path);
  return models::parse_model_config(in);
}

inline std::string fixed4(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(4) << v;
  return s.str();
}

inline std::string train_setting(const models::ModelConfig& m) {
  if (m.model == models::ModelKind::Brgcn || m.model == models::ModelKind::ConvGnn)
    return "layers=" + std::to_string(m.layers);
  return "k=" + std::to_string(m.k);
}

inline nlohmann::json fold_json(const pipeline::FoldResult& f) {
  return nlohmann::json{{"held_out", f.held_out}, {"tp", f.tp},   {"tn", f.tn},
                        {"fp", f.fp},             {"fn", f.fn},   {"loss", f.epoch_loss}};
}

}  // namespace detail

// ---------------------------------------------------------------------------
// command bodies

inline int cmd_gen_corpus(uint64_t seed, int n_programs, int n_vars,
                          const std::string& out_dir, std::ostream& out) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const auto programs = synth::generate(seed, n_programs, n_vars);
  nlohmann::json files = nlohmann::json::array();
  for (const auto& p : programs) {
    const std::string file = p.name + ".json";
    synth::save_program(p, (fs::path(out_dir) / file).string());
    files.push_back(file);
    out << "wrote " << file << "\n";
  }
  detail::write_json_file(
      nlohmann::json{{"seed", seed},
                     {"n_programs", n_programs},
                     {"n_vars", n_vars},
                     {"programs", files}},
      (fs::path(out_dir) / "corpus.json").string());
  out << "wrote corpus.json\n";
  return 0;
}

inline int cmd_build_graph(const std::string& trace_path, const std::string& out_path,
                           const std::string& measurements_path, std::ostream& out,
                           std::ostream& err) {
  const Trace trace = parse_trace_file(trace_path);
  note(err, "loaded " + std::to_string(trace.events.size()) + " events");
  const LivenessResult live = analyze_liveness(trace);
  EnhancedDFG g = build_dfg(trace, live);
  if (!measurements_path.empty()) {
    const nlohmann::json j = detail::read_json_file(measurements_path);
    std::map<int, int> m;
    for (const auto& [key, value] : j.items()) m[std::stoi(key)] = value.get<int>();
    attach_cdp(g, m);
  }
  save_dfg(g, out_path);
  out << "nodes:" << g.nodes.size() << " edges:" << g.edges.size() << "\n";
  return 0;
}

inline int cmd_measure_cdp(const std::string& dry_path,
                           const std::vector<std::string>& flipped_paths,
                           const std::string& out_path, std::ostream& out) {
  const std::set<uint64_t> dry = bb_set(parse_trace_file(dry_path));
  std::vector<std::set<uint64_t>> flipped;
  flipped.reserve(flipped_paths.size());
  for (const auto& p : flipped_paths) flipped.push_back(bb_set(parse_trace_file(p)));
  const int n = measure_cdp(dry, flipped);
  if (!out_path.empty()) detail::write_json_file(nlohmann::json{{"n", n}}, out_path);
  out << n << "\n";
  return 0;
}

inline int cmd_slice(const std::string& graph_path, int k, const std::string& out_path,
                     std::ostream& out) {
  const EnhancedDFG g = load_dfg(graph_path);
  const auto vocab = build_vocab({&g});
  std::set<int> instances;
  for (const auto& n : g.nodes)
    if (!n.is_onode && n.instance >= 0) instances.insert(n.instance);
  SliceConfig cfg;
  cfg.k = k;
  nlohmann::json rows = nlohmann::json::array();
  size_t n_trees = 0;
  for (int inst : instances) {
    const TreeSet set = trees_for_instance(g, inst, cfg);
    nlohmann::json trees = nlohmann::json::array();
    for (const auto& t : set.trees) trees.push_back(tree_to_json(t, g, vocab));
    n_trees += set.trees.size();
    rows.push_back({{"instance", inst}, {"trees", std::move(trees)}});
  }
  detail::write_json_file(nlohmann::json{{"k", k}, {"instances", std::move(rows)}}, out_path);
  out << "instances:" << instances.size() << " trees:" << n_trees << "\n";
  return 0;
}

inline int cmd_train(const std::string& corpus_dir, const std::string& model_name,
                     const std::string& config_path, const std::string& out_dir,
                     int epochs, double lr, uint64_t seed, std::ostream& out,
                     std::ostream& err) {
  namespace fs = std::filesystem;
  const detail::LoadedCorpus lc = detail::load_corpus_dir(corpus_dir);
  note(err, "loaded " + std::to_string(lc.programs.size()) + " programs");
  const auto sources = pipeline::sources_from_programs(lc.programs, lc.seed);

  pipeline::TrainConfig cfg;
  cfg.model = detail::load_model_config(config_path);
  cfg.model.model = models::model_kind_from(model_name);
  cfg.epochs = epochs;
  cfg.lr = lr;
  cfg.seed = seed;

  const pipeline::Corpus corpus =
      pipeline::assemble(sources, cfg.model.model, cfg.model.k, cfg.model.use_mcd);
  const pipeline::LopoResult r = pipeline::run_lopo(corpus, cfg);

  fs::create_directories(out_dir);
  pipeline::write_results_csv(
      {{models::to_string(cfg.model.model), detail::train_setting(cfg.model), r.metrics,
        r.seconds}},
      (fs::path(out_dir) / "results.csv").string());
  nlohmann::json manifest = pipeline::run_manifest(
      cfg, lc.seed, static_cast<int>(lc.programs.size()), lc.n_vars);
  nlohmann::json folds = nlohmann::json::array();
  for (const auto& f : r.folds) folds.push_back(detail::fold_json(f));
  manifest["folds"] = std::move(folds);
  detail::write_json_file(manifest, (fs::path(out_dir) / "manifest.json").string());

  out << "model=" << models::to_string(cfg.model.model)
      << " accuracy=" << detail::fixed4(r.metrics.accuracy)
      << " precision=" << detail::fixed4(r.metrics.precision)
      << " recall=" << detail::fixed4(r.metrics.recall)
      << " f1=" << detail::fixed4(r.metrics.f1) << "\n";
  return 0;
}

inline int cmd_sweep(const std::string& corpus_dir, const std::string& axis_name,
                     const std::string& model_name, const std::string& config_path,
                     const std::string& out_dir, int epochs, double lr, uint64_t seed,
                     std::ostream& out, std::ostream& err) {
  namespace fs = std::filesystem;
  const detail::LoadedCorpus lc = detail::load_corpus_dir(corpus_dir);
  note(err, "loaded " + std::to_string(lc.programs.size()) + " programs");
  const auto sources = pipeline::sources_from_programs(lc.programs, lc.seed);

  pipeline::TrainConfig base;
  base.model = detail::load_model_config(config_path);
  if (!model_name.empty()) base.model.model = models::model_kind_from(model_name);
  base.epochs = epochs;
  base.lr = lr;
  base.seed = seed;

  const pipeline::SweepAxis axis = pipeline::sweep_axis_from(axis_name);
  const auto rows = pipeline::sweep(sources, base, axis);

  fs::create_directories(out_dir);
  pipeline::write_results_csv(rows, (fs::path(out_dir) / "results.csv").string());
  detail::write_json_file(
      pipeline::run_manifest(base, lc.seed, static_cast<int>(lc.programs.size()),
                             lc.n_vars, axis_name),
      (fs::path(out_dir) / "manifest.json").string());
  out << "rows:" << rows.size() << "\n";
  return 0;
}

inline int cmd_paths(const std::string& graph_path, int target, int layers,
                     std::ostream& out) {
  const EnhancedDFG g = load_dfg(graph_path);
  const PathReport r = propagation_report(g, target, layers);
  for (const auto& [id, c] : r.entries) out << id << ":" << c << " ";
  out << "total:" << r.total << "\n";
  return 0;
}

inline int cmd_report(const std::string& results_path, std::ostream& out) {
  std::ifstream in(results_path);
  if (!in) throw std::runtime_error("cannot open results: " + results_path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  if (rows.empty()) throw std::runtime_error("results file is empty: " + results_path);
  std::vector<size_t> width;
  for (const auto& r : rows) {
    if (width.size() < r.size()) width.resize(r.size(), 0);
    for (size_t i = 0; i < r.size(); ++i) width[i] = std::max(width[i], r[i].size());
  }
  for (const auto& r : rows) {
    for (size_t i = 0; i < r.size(); ++i) {
      out << r[i];
      if (i + 1 < r.size()) out << std::string(width[i] - r[i].size() + 2, ' ');
    }
    out << "\n";
  }
  return 0;
}

// ---------------------------------------------------------------------------
// dispatch

inline int dispatch(std::vector<std::string> args, std::ostream& out, std::ostream& err) {
  CLI::App app{"critical-variable identification pipeline", "cvi"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-corpus", "generate a synthetic program corpus");
  uint64_t gen_seed = 1;
  int gen_programs = 6, gen_vars = 34;
  std::string gen_out;
  gen->add_option("--seed", gen_seed, "corpus seed")->required();
  gen->add_option("--out", gen_out, "output directory")->required();
  gen->add_option("--programs", gen_programs, "number of programs");
  gen->add_option("--vars", gen_vars, "labeled variables per program");

  auto* bg = app.add_subcommand("build-graph", "build the data-flow graph from a trace");
  std::string bg_trace, bg_out, bg_meas;
  bg->add_option("--trace", bg_trace, "input trace file")->required();
  bg->add_option("--out", bg_out, "output graph file")->required();
  bg->add_option("--measurements", bg_meas, "instance->n JSON to attach");

  auto* mc = app.add_subcommand("measure-cdp", "block-diff a dry trace against flipped runs");
  std::string mc_dry, mc_out;
  std::vector<std::string> mc_flipped;
  mc->add_option("--dry", mc_dry, "dry-run trace")->required();
  mc->add_option("--flipped", mc_flipped, "flipped-run trace(s)")->required();
  mc->add_option("--out", mc_out, "write {\"n\": ...} here");

  auto* sl = app.add_subcommand("slice", "build depth-bounded trees for every instance");
  std::string sl_graph, sl_out;
  int sl_k = 15;
  sl->add_option("--graph", sl_graph, "input graph file")->required();
  sl->add_option("--k", sl_k, "depth bound")->required();
  sl->add_option("--out", sl_out, "output trees file")->required();

  auto* tr = app.add_subcommand("train", "leave-one-program-out training run");
  std::string tr_corpus, tr_model, tr_config, tr_out;
  int tr_epochs = 50;
  double tr_lr = 1e-3;
  uint64_t tr_seed = 1;
  tr->add_option("--corpus", tr_corpus, "corpus directory")->required();
  tr->add_option("--model", tr_model, "treelstm|brgcn|convgnn|mlp")->required();
  tr->add_option("--config", tr_config, "key=value model config")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--epochs", tr_epochs, "training epochs");
  tr->add_option("--lr", tr_lr, "learning rate");
  tr->add_option("--seed", tr_seed, "training seed");

  auto* sw = app.add_subcommand("sweep", "sweep one setting axis");
  std::string sw_corpus, sw_axis, sw_model, sw_config, sw_out;
  int sw_epochs = 50;
  double sw_lr = 1e-3;
  uint64_t sw_seed = 1;
  sw->add_option("--corpus", sw_corpus, "corpus directory")->required();
  sw->add_option("--axis", sw_axis, "layers|depth|pooling|mcd")->required();
  sw->add_option("--config", sw_config, "key=value model config")->required();
  sw->add_option("--out", sw_out, "output directory")->required();
  sw->add_option("--model", sw_model, "override the config's model kind");
  sw->add_option("--epochs", sw_epochs, "training epochs");
  sw->add_option("--lr", sw_lr, "learning rate");
  sw->add_option("--seed", sw_seed, "training seed");

  auto* pa = app.add_subcommand("paths", "propagation-path diagnostic for one node");
  std::string pa_graph;
  int pa_target = 0, pa_layers = 3;
  pa->add_option("--graph", pa_graph, "input graph file")->required();
  pa->add_option("--target", pa_target, "target node id")->required();
  pa->add_option("--layers", pa_layers, "propagation depth")->required();

  auto* re = app.add_subcommand("report", "print a results CSV as a table");
  std::string re_results;
  re->add_option("--results", re_results, "results CSV path")->required();

  std::reverse(args.begin(), args.end());
  try {
    app.parse(args);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return 0;
  } catch (const CLI::ParseError& e) {
    err << app.help() << "\nerror: " << e.what() << "\n";
    return 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_corpus(gen_seed, gen_programs, gen_vars, gen_out, out);
    if (bg->parsed()) return cmd_build_graph(bg_trace, bg_out, bg_meas, out, err);
    if (mc->parsed()) return cmd_measure_cdp(mc_dry, mc_flipped, mc_out, out);
    if (sl->parsed()) return cmd_slice(sl_graph, sl_k, sl_out, out);
    if (tr->parsed())
      return cmd_train(tr_corpus, tr_model, tr_config, tr_out, tr_epochs, tr_lr, tr_seed,
                       out, err);
    if (sw->parsed())
      return cmd_sweep(sw_corpus, sw_axis, sw_model, sw_config, sw_out, sw_epochs, sw_lr,
                       sw_seed, out, err);
    if (pa->parsed()) return cmd_paths(pa_graph, pa_target, pa_layers, out);
    if (re->parsed()) return cmd_report(re_results, out);
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return 1;
  }
  return 2;
}

}  // namespace cvi::cli
