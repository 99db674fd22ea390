#pragma once
// Dense 2-D tensors (row-major doubles) with a reverse-mode tape.
// Covers exactly the math the models need: matmul, add (with 1xN row
// broadcast), hadamard, sigmoid/tanh/relu, scale, row reductions, row
// concat, a sparse one/few-hot affine transform, and a numerically stable
// BCE-on-logits loss. Tapes are arena-reused across samples so a training
// loop allocates almost nothing after warmup.
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <fstream>
#include <functional>
#include <numeric>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "cvi/rng.hpp"

namespace cvi::ad {

struct Tensor {
  int rows = 0, cols = 0;
  std::vector<double> v;  // values
  std::vector<double> g;  // gradients, same shape; accumulate additively

  void assign(int r, int c) {
    rows = r;
    cols = c;
    v.assign(static_cast<size_t>(r) * c, 0.0);
    g.assign(static_cast<size_t>(r) * c, 0.0);
  }
  size_t size() const { return static_cast<size_t>(rows) * cols; }
  double& at(int r, int c) { return v[static_cast<size_t>(r) * cols + c]; }
  double at(int r, int c) const { return v[static_cast<size_t>(r) * cols + c]; }
};

inline double sigmoid_scalar(double x) {
  if (x >= 0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

// A named trainable tensor plus its Adam moments.
struct Param {
  std::string name;
  Tensor t;
  std::vector<double> adam_m, adam_v;
};

class ParamStore {
 public:
  // fan_in drives the init range uniform(-1/sqrt(fan_in), +1/sqrt(fan_in));
  // by default it is the input dimension of an (in x out) matrix.
  Param& add(const std::string& name, int rows, int cols, Rng& rng,
             int fan_in = -1) {
    if (fan_in < 0) fan_in = rows;
    Param& p = params_.emplace_back();
    p.name = name;
    p.t.assign(rows, cols);
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (auto& x : p.t.v) x = rng.uniform(-bound, bound);
    p.adam_m.assign(p.t.size(), 0.0);
    p.adam_v.assign(p.t.size(), 0.0);
    return p;
  }

  Param& add_zeros(const std::string& name, int rows, int cols) {
    Param& p = params_.emplace_back();
    p.name = name;
    p.t.assign(rows, cols);
    p.adam_m.assign(p.t.size(), 0.0);
    p.adam_v.assign(p.t.size(), 0.0);
    return p;
  }

  void zero_grad() {
    for (auto& p : params_)
      std::fill(p.t.g.begin(), p.t.g.end(), 0.0);
  }

  // One Adam update over all parameters; zeroes gradients afterwards.
  void adam_step(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999,
                 double eps = 1e-8) {
    ++step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(step_));
    for (auto& p : params_) {
      double* m = p.adam_m.data();
      double* vv = p.adam_v.data();
      double* w = p.t.v.data();
      double* g = p.t.g.data();
      const size_t n = p.t.size();
      for (size_t i = 0; i < n; ++i) {
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
        vv[i] = beta2 * vv[i] + (1.0 - beta2) * g[i] * g[i];
        w[i] -= lr * (m[i] / bc1) / (std::sqrt(vv[i] / bc2) + eps);
        g[i] = 0.0;
      }
    }
  }

  std::deque<Param>& params() { return params_; }
  const std::deque<Param>& params() const { return params_; }
  int64_t step_count() const { return step_; }

  nlohmann::json to_json() const {
    nlohmann::json out = nlohmann::json::array();
    for (const auto& p : params_)
      out.push_back({{"name", p.name},
                     {"rows", p.t.rows},
                     {"cols", p.t.cols},
                     {"data", p.t.v}});
    return nlohmann::json{{"params", out}};
  }

  void save(const std::string& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out << to_json().dump();
  }

  // Loads values by name into existing params; shapes must match.
  void load_json(const nlohmann::json& j) {
    for (const auto& pj : j.at("params")) {
      const std::string name = pj.at("name").get<std::string>();
      Param* dst = nullptr;
      for (auto& p : params_)
        if (p.name == name) dst = &p;
      if (!dst) throw std::runtime_error("checkpoint has unknown param: " + name);
      if (dst->t.rows != pj.at("rows").get<int>() ||
          dst->t.cols != pj.at("cols").get<int>())
        throw std::runtime_error("checkpoint shape mismatch for: " + name);
      dst->t.v = pj.at("data").get<std::vector<double>>();
    }
  }

  void load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read checkpoint: " + path);
    nlohmann::json j;
    in >> j;
    load_json(j);
  }

 private:
  std::deque<Param> params_;  // deque: stable addresses for tape leaves
  int64_t step_ = 0;
};

// One (index, value) feature of a mostly-zero input row.
struct SparseFeat {
  int index;
  double value;
};

class Tape {
 public:
  enum class Op : uint8_t {
    Leaf,
    Const,
    SparseAffine,
    Matmul,
    Add,
    Hadamard,
    Sigmoid,
    Tanh,
    Relu,
    Scale,
    SumRows,
    MaxRows,
    ConcatRows,
    BceLogits,
  };

  // ----- graph construction (forward is computed eagerly) -----

  int leaf(Param& p) {
    const int id = new_node(Op::Leaf);
    entry(id).param = &p;
    slot(id).ext = &p.t;
    return id;
  }

  int constant(int rows, int cols, const std::vector<double>& data) {
    if (static_cast<size_t>(rows) * cols != data.size())
      throw std::invalid_argument("constant: data size does not match shape");
    const int id = new_node(Op::Const);
    Tensor& t = own(id, rows, cols);
    t.v = data;
    return id;
  }

  // 1 x cols(W) row = sum_i feats[i].value * W[feats[i].index, :]
  int sparse_affine(Param& w, const std::vector<SparseFeat>& feats) {
    const int id = new_node(Op::SparseAffine);
    Entry& e = entry(id);
    e.param = &w;
    e.aux_off = static_cast<int>(iarena_.size());
    e.faux_off = static_cast<int>(farena_.size());
    e.aux_len = static_cast<int>(feats.size());
    Tensor& t = own(id, 1, w.t.cols);
    for (const auto& f : feats) {
      if (f.index < 0 || f.index >= w.t.rows)
        throw std::invalid_argument("sparse_affine: index out of range");
      iarena_.push_back(f.index);
      farena_.push_back(f.value);
      const double* row = &w.t.v[static_cast<size_t>(f.index) * w.t.cols];
      for (int c = 0; c < t.cols; ++c) t.v[c] += f.value * row[c];
    }
    return id;
  }

  int matmul(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.cols != tb.rows) throw std::invalid_argument("matmul: shape mismatch");
    const int id = new_node(Op::Matmul, a, b);
    Tensor& t = own(id, ta.rows, tb.cols);
    const int m = ta.rows, k = ta.cols, n = tb.cols;
    for (int i = 0; i < m; ++i) {
      const double* arow = &ta.v[static_cast<size_t>(i) * k];
      double* orow = &t.v[static_cast<size_t>(i) * n];
      for (int kk = 0; kk < k; ++kk) {
        const double av = arow[kk];
        if (av == 0.0) continue;
        const double* brow = &tb.v[static_cast<size_t>(kk) * n];
        for (int j = 0; j < n; ++j) orow[j] += av * brow[j];
      }
    }
    return id;
  }

  // elementwise add; b may be a 1 x cols row broadcast over a's rows
  int add(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    const bool bcast = tb.rows == 1 && ta.rows != 1;
    if (ta.cols != tb.cols || (!bcast && ta.rows != tb.rows))
      throw std::invalid_argument("add: shape mismatch");
    const int id = new_node(Op::Add, a, b);
    Tensor& t = own(id, ta.rows, ta.cols);
    for (int i = 0; i < ta.rows; ++i)
      for (int c = 0; c < ta.cols; ++c)
        t.at(i, c) = ta.at(i, c) + tb.at(bcast ? 0 : i, c);
    return id;
  }

  int hadamard(int a, int b) {
    const Tensor& ta = val(a);
    const Tensor& tb = val(b);
    if (ta.rows != tb.rows || ta.cols != tb.cols)
      throw std::invalid_argument("hadamard: shape mismatch");
    const int id = new_node(Op::Hadamard, a, b);
    Tensor& t = own(id, ta.rows, ta.cols);
    for (size_t i = 0; i < t.size(); ++i) t.v[i] = ta.v[i] * tb.v[i];
    return id;
  }

  int sigmoid(int a) {
    const Tensor& ta = val(a);
    const int id = new_node(Op::Sigmoid, a);
    Tensor& t = own(id, ta.rows, ta.cols);
    for (size_t i = 0; i < t.size(); ++i) t.v[i] = sigmoid_scalar(ta.v[i]);
    return id;
  }

  int tanh_(int a) {
    const Tensor& ta = val(a);
    const int id = new_node(Op::Tanh, a);
    Tensor& t = own(id, ta.rows, ta.cols);
    for (size_t i = 0; i < t.size(); ++i) t.v[i] = std::tanh(ta.v[i]);
    return id;
  }

  int relu(int a) {
    const Tensor& ta = val(a);
    const int id = new_node(Op::Relu, a);
    Tensor& t = own(id, ta.rows, ta.cols);
    for (size_t i = 0; i < t.size(); ++i) t.v[i] = ta.v[i] > 0.0 ? ta.v[i] : 0.0;
    return id;
  }

  int scale(int a, double s) {
    const Tensor& ta = val(a);
    const int id = new_node(Op::Scale, a);
    Entry& e = entry(id);
    e.faux_off = static_cast<int>(farena_.size());
    e.faux_len = 1;
    farena_.push_back(s);
    Tensor& t = own(id, ta.rows, ta.cols);
    for (size_t i = 0; i < t.size(); ++i) t.v[i] = s * ta.v[i];
    return id;
  }

  // Column-wise sum over rows -> 1 x cols. Rows are accumulated in a
  // canonical (lexicographically sorted) order, so the result is
  // bit-identical under any permutation of the input rows.
  int sum_rows(int a) {
    const Tensor& ta = val(a);
    const int id = new_node(Op::SumRows, a);
    Tensor& t = own(id, 1, ta.cols);
    std::vector<int> order(ta.rows);
    std::iota(order.begin(), order.end(), 0);
    std::sort(order.begin(), order.end(), [&](int x, int y) {
      const double* rx = &ta.v[static_cast<size_t>(x) * ta.cols];
      const double* ry = &ta.v[static_cast<size_t>(y) * ta.cols];
      return std::lexicographical_compare(rx, rx + ta.cols, ry, ry + ta.cols);
    });
    for (int r : order)
      for (int c = 0; c < ta.cols; ++c) t.v[c] += ta.at(r, c);
    return id;
  }

  // Column-wise max over rows -> 1 x cols; subgradient goes to the first
  // (lowest-index) argmax row of each column.
  int max_rows(int a) {
    const Tensor& ta = val(a);
    if (ta.rows < 1) throw std::invalid_argument("max_rows: empty input");
    const int id = new_node(Op::MaxRows, a);
    Entry& e = entry(id);
    e.aux_off = static_cast<int>(iarena_.size());
    e.aux_len = ta.cols;
    Tensor& t = own(id, 1, ta.cols);
    for (int c = 0; c < ta.cols; ++c) {
      int best = 0;
      double bv = ta.at(0, c);
      for (int r = 1; r < ta.rows; ++r)
        if (ta.at(r, c) > bv) {
          bv = ta.at(r, c);
          best = r;
        }
      t.v[c] = bv;
      iarena_.push_back(best);
    }
    return id;
  }

  int mean_rows(int a) { return scale(sum_rows(a), 1.0 / val(a).rows); }

  // Stack 1-or-more inputs with equal column counts into one matrix.
  int concat_rows(const std::vector<int>& ids) {
    if (ids.empty()) throw std::invalid_argument("concat_rows: empty input");
    const int cols = val(ids[0]).cols;
    int rows = 0;
    for (int i : ids) {
      if (val(i).cols != cols)
        throw std::invalid_argument("concat_rows: column mismatch");
      rows += val(i).rows;
    }
    const int id = new_node(Op::ConcatRows);
    Entry& e = entry(id);
    e.aux_off = static_cast<int>(iarena_.size());
    e.aux_len = static_cast<int>(ids.size());
    for (int i : ids) iarena_.push_back(i);
    Tensor& t = own(id, rows, cols);
    int r0 = 0;
    for (int i : ids) {
      const Tensor& ti = val(i);
      std::copy(ti.v.begin(), ti.v.end(),
                t.v.begin() + static_cast<size_t>(r0) * cols);
      r0 += ti.rows;
    }
    return id;
  }

  // Binary cross-entropy on a 1x1 logit z with hard label y:
  // loss = softplus(z) - y*z, computed without overflow for any z.
  int bce_with_logits(int z, double y) {
    const Tensor& tz = val(z);
    if (tz.rows != 1 || tz.cols != 1)
      throw std::invalid_argument("bce_with_logits: logit must be 1x1");
    const int id = new_node(Op::BceLogits, z);
    Entry& e = entry(id);
    e.faux_off = static_cast<int>(farena_.size());
    e.faux_len = 1;
    farena_.push_back(y);
    Tensor& t = own(id, 1, 1);
    const double zv = tz.v[0];
    const double sp = zv > 0 ? zv + std::log1p(std::exp(-zv))
                             : std::log1p(std::exp(zv));
    t.v[0] = sp - y * zv;
    return id;
  }

  // ----- access -----

  const Tensor& val(int id) const {
    const Slot& s = slots_[static_cast<size_t>(id)];
    return s.ext ? *s.ext : s.own;
  }

  double scalar(int id) const {
    const Tensor& t = val(id);
    if (t.rows != 1 || t.cols != 1)
      throw std::invalid_argument("scalar: tensor is not 1x1");
    return t.v[0];
  }

  size_t size() const { return entries_.size(); }

  // ----- reverse pass -----

  void backward(int loss) {
    if (entries_.empty()) return;
    const Tensor& lt = val(loss);
    if (lt.rows != 1 || lt.cols != 1)
      throw std::invalid_argument("backward: loss must be 1x1");
    mut(loss).g[0] = 1.0;
    for (int id = static_cast<int>(entries_.size()) - 1; id >= 0; --id) {
      const Entry& e = entries_[static_cast<size_t>(id)];
      const Tensor& to = val(id);
      switch (e.op) {
        case Op::Leaf:
        case Op::Const:
          break;
        case Op::SparseAffine: {
          Tensor& w = e.param->t;
          for (int i = 0; i < e.aux_len; ++i) {
            const int row = iarena_[static_cast<size_t>(e.aux_off) + i];
            const double fv = farena_[static_cast<size_t>(e.faux_off) + i];
            double* grow = &w.g[static_cast<size_t>(row) * w.cols];
            for (int c = 0; c < to.cols; ++c) grow[c] += fv * to.g[c];
          }
          break;
        }
        case Op::Matmul: {
          const Tensor& ta = val(e.a);
          const Tensor& tb = val(e.b);
          Tensor& ga = mut(e.a);
          Tensor& gb = mut(e.b);
          const int m = ta.rows, k = ta.cols, n = tb.cols;
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
              const double go = to.g[static_cast<size_t>(i) * n + j];
              if (go == 0.0) continue;
              for (int kk = 0; kk < k; ++kk) {
                ga.g[static_cast<size_t>(i) * k + kk] +=
                    go * tb.v[static_cast<size_t>(kk) * n + j];
                gb.g[static_cast<size_t>(kk) * n + j] +=
                    go * ta.v[static_cast<size_t>(i) * k + kk];
              }
            }
          break;
        }
        case Op::Add: {
          const Tensor& ta = val(e.a);
          const Tensor& tb = val(e.b);
          Tensor& ga = mut(e.a);
          Tensor& gb = mut(e.b);
          const bool bcast = tb.rows == 1 && ta.rows != 1;
          for (int i = 0; i < ta.rows; ++i)
            for (int c = 0; c < ta.cols; ++c) {
              const double go = to.g[static_cast<size_t>(i) * ta.cols + c];
              ga.g[static_cast<size_t>(i) * ta.cols + c] += go;
              gb.g[static_cast<size_t>(bcast ? 0 : i) * ta.cols + c] += go;
            }
          break;
        }
        case Op::Hadamard: {
          const Tensor& ta = val(e.a);
          const Tensor& tb = val(e.b);
          Tensor& ga = mut(e.a);
          Tensor& gb = mut(e.b);
          for (size_t i = 0; i < to.size(); ++i) {
            ga.g[i] += to.g[i] * tb.v[i];
            gb.g[i] += to.g[i] * ta.v[i];
          }
          break;
        }
        case Op::Sigmoid: {
          Tensor& ga = mut(e.a);
          for (size_t i = 0; i < to.size(); ++i)
            ga.g[i] += to.g[i] * to.v[i] * (1.0 - to.v[i]);
          break;
        }
        case Op::Tanh: {
          Tensor& ga = mut(e.a);
          for (size_t i = 0; i < to.size(); ++i)
            ga.g[i] += to.g[i] * (1.0 - to.v[i] * to.v[i]);
          break;
        }
        case Op::Relu: {
          const Tensor& ta = val(e.a);
          Tensor& ga = mut(e.a);
          for (size_t i = 0; i < to.size(); ++i)
            if (ta.v[i] > 0.0) ga.g[i] += to.g[i];
          break;
        }
        case Op::Scale: {
          const double s = farena_[static_cast<size_t>(e.faux_off)];
          Tensor& ga = mut(e.a);
          for (size_t i = 0; i < to.size(); ++i) ga.g[i] += s * to.g[i];
          break;
        }
        case Op::SumRows: {
          const Tensor& ta = val(e.a);
          Tensor& ga = mut(e.a);
          for (int r = 0; r < ta.rows; ++r)
            for (int c = 0; c < ta.cols; ++c)
              ga.g[static_cast<size_t>(r) * ta.cols + c] += to.g[c];
          break;
        }
        case Op::MaxRows: {
          const Tensor& ta = val(e.a);
          Tensor& ga = mut(e.a);
          for (int c = 0; c < ta.cols; ++c) {
            const int r = iarena_[static_cast<size_t>(e.aux_off) + c];
            ga.g[static_cast<size_t>(r) * ta.cols + c] += to.g[c];
          }
          break;
        }
        case Op::ConcatRows: {
          int r0 = 0;
          for (int i = 0; i < e.aux_len; ++i) {
            const int src = iarena_[static_cast<size_t>(e.aux_off) + i];
            const Tensor& ti = val(src);
            Tensor& gi = mut(src);
            for (size_t k = 0; k < ti.size(); ++k)
              gi.g[k] += to.g[static_cast<size_t>(r0) * ti.cols + k];
            r0 += ti.rows;
          }
          break;
        }
        case Op::BceLogits: {
          const double y = farena_[static_cast<size_t>(e.faux_off)];
          const double z = val(e.a).v[0];
          mut(e.a).g[0] += to.g[0] * (sigmoid_scalar(z) - y);
          break;
        }
      }
    }
  }

  // Clears the tape but keeps every buffer's capacity for reuse.
  void reset() {
    entries_.clear();
    used_ = 0;
    iarena_.clear();
    farena_.clear();
  }

 private:
  struct Entry {
    Op op;
    int a = -1, b = -1;
    int aux_off = 0, aux_len = 0;    // indices into iarena_
    int faux_off = 0, faux_len = 0;  // indices into farena_
    Param* param = nullptr;
  };
  struct Slot {
    Tensor own;
    Tensor* ext = nullptr;  // leaves alias their Param tensor
  };

  int new_node(Op op, int a = -1, int b = -1) {
    const int id = static_cast<int>(entries_.size());
    entries_.push_back(Entry{op, a, b, 0, 0, 0, 0, nullptr});
    if (static_cast<size_t>(used_) == slots_.size()) slots_.emplace_back();
    Slot& s = slots_[static_cast<size_t>(used_)];
    s.ext = nullptr;
    ++used_;
    return id;
  }

  Entry& entry(int id) { return entries_[static_cast<size_t>(id)]; }
  Slot& slot(int id) { return slots_[static_cast<size_t>(id)]; }
  Tensor& own(int id, int rows, int cols) {
    Tensor& t = slots_[static_cast<size_t>(id)].own;
    t.assign(rows, cols);
    return t;
  }
  Tensor& mut(int id) {
    Slot& s = slots_[static_cast<size_t>(id)];
    return s.ext ? *s.ext : s.own;
  }

  std::vector<Entry> entries_;
  std::deque<Slot> slots_;  // deque: growth never invalidates slot references
  int used_ = 0;
  std::vector<int> iarena_;
  std::vector<double> farena_;
};

// Max over all parameter coordinates of
// |analytic - central_difference| / max(1, |analytic|).
// `build` must deterministically reconstruct the forward pass on the given
// tape and return the loss node id.
inline double grad_check(const std::function<int(Tape&)>& build,
                         ParamStore& ps, double eps = 1e-5) {
  ps.zero_grad();
  Tape t;
  t.backward(build(t));
  std::vector<std::vector<double>> analytic;
  for (auto& p : ps.params()) analytic.push_back(p.t.g);

  double worst = 0.0;
  Tape t2;
  size_t pi = 0;
  for (auto& p : ps.params()) {
    for (size_t i = 0; i < p.t.size(); ++i) {
      const double old = p.t.v[i];
      p.t.v[i] = old + eps;
      t2.reset();
      const double fp = t2.scalar(build(t2));
      p.t.v[i] = old - eps;
      t2.reset();
      const double fm = t2.scalar(build(t2));
      p.t.v[i] = old;
      const double fd = (fp - fm) / (2.0 * eps);
      const double an = analytic[pi][i];
      const double err = std::abs(an - fd) / std::max(1.0, std::abs(an));
      worst = std::max(worst, err);
    }
    ++pi;
  }
  ps.zero_grad();
  return worst;
}

}  // namespace cvi::ad
