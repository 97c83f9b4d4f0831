#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "physdyn/errors.hpp"

namespace physdyn::nn {

template <class T>
using Matrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <class T>
struct Parameter {
  std::string name;
  Matrix<T> value;
  Matrix<T> grad;
  bool trainable = true;
};

// Named parameters in creation order. Pointers stay valid for the store's lifetime.
template <class T>
class ParameterStore {
 public:
  ParameterStore() = default;
  ParameterStore(const ParameterStore& other) { *this = other; }
  ParameterStore& operator=(const ParameterStore& other) {
    if (this == &other) return *this;
    params_.clear();
    index_.clear();
    for (const auto& p : other.params_) add(p->name, p->value).trainable = p->trainable;
    return *this;
  }
  ParameterStore(ParameterStore&&) noexcept = default;
  ParameterStore& operator=(ParameterStore&&) noexcept = default;

  Parameter<T>& add(const std::string& name, Matrix<T> init) {
    if (index_.count(name)) throw ValidationError("duplicate parameter " + name);
    auto p = std::make_unique<Parameter<T>>();
    p->name = name;
    p->grad = Matrix<T>::Zero(init.rows(), init.cols());
    p->value = std::move(init);
    index_[name] = params_.size();
    params_.push_back(std::move(p));
    return *params_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter " + name);
    return *params_[it->second];
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ValidationError("unknown parameter " + name);
    return *params_[it->second];
  }

  std::vector<Parameter<T>*> parameters() const {
    std::vector<Parameter<T>*> out;
    for (const auto& p : params_) out.push_back(p.get());
    return out;
  }

  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& p : params_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p->grad.setZero();
  }

  // Copies values by name from a store of another scalar type.
  template <class U>
  void assign_from(const ParameterStore<U>& other) {
    for (auto* p : other.parameters()) at(p->name).value = p->value.template cast<T>();
  }

 private:
  std::vector<std::unique_ptr<Parameter<T>>> params_;
  std::unordered_map<std::string, std::size_t> index_;
};

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

// Reverse-mode tape. Each node owns its value (or borrows a parameter's) and
// an optional closure that pushes its gradient to its inputs.
template <class T>
class Tape {
 public:
  explicit Tape(bool record = true) : record_(record) {}

  bool recording() const { return record_; }

  Var constant(Matrix<T> value) {
    Node n;
    n.value = std::move(value);
    return push(std::move(n));
  }

  Var param(Parameter<T>& p) {
    Node n;
    n.external = &p.value;
    n.param = &p;
    n.needs_grad = record_ && p.trainable;
    return push(std::move(n));
  }

  const Matrix<T>& value(Var v) const {
    const auto& n = nodes_[static_cast<std::size_t>(v.id)];
    return n.external ? *n.external : n.value;
  }

  bool needs_grad(Var v) const { return v.valid() && nodes_[static_cast<std::size_t>(v.id)].needs_grad; }

  // Gradient buffer of a node, allocated as zeros on first use.
  Matrix<T>& grad(Var v) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) {
      const auto& val = n.external ? *n.external : n.value;
      n.grad = Matrix<T>::Zero(val.rows(), val.cols());
    }
    return n.grad;
  }

  // grad(v) += e, assigning instead when the buffer does not exist yet.
  template <class Expr>
  void accumulate(Var v, const Expr& e) {
    auto& n = nodes_[static_cast<std::size_t>(v.id)];
    if (n.grad.size() == 0) {
      n.grad.noalias() = e;
    } else {
      n.grad.noalias() += e;
    }
  }

  bool has_grad(Var v) const { return nodes_[static_cast<std::size_t>(v.id)].grad.size() != 0; }

  Var emit(Matrix<T> value, std::initializer_list<Var> inputs, std::function<void(Tape&, Var)> backward) {
    Node n;
    n.value = std::move(value);
    bool any = false;
    for (auto in : inputs) any = any || needs_grad(in);
    n.needs_grad = record_ && any;
    if (n.needs_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  void backward(Var loss) {
    if (value(loss).size() != 1) throw ValidationError("backward needs a scalar loss");
    if (!needs_grad(loss)) return;
    grad(loss)(0, 0) = T(1);
    for (int i = loss.id; i >= 0; --i) {
      auto& n = nodes_[static_cast<std::size_t>(i)];
      if (n.grad.size() == 0) continue;
      if (n.backward) n.backward(*this, Var{i});
      if (n.param) n.param->grad += n.grad;
    }
  }

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix<T> value;
    const Matrix<T>* external = nullptr;
    Parameter<T>* param = nullptr;
    Matrix<T> grad;
    bool needs_grad = false;
    std::function<void(Tape&, Var)> backward;
  };

  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{static_cast<int>(nodes_.size()) - 1};
  }

  bool record_;
  std::vector<Node> nodes_;
};

// ---------------------------------------------------------------------------
// Operations

template <class T>
Var matmul(Tape<T>& t, Var a, Var b) {
  Matrix<T> out = t.value(a) * t.value(b);
  return t.emit(std::move(out), {a, b}, [a, b](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a)) t.accumulate(a, g * t.value(b).transpose());
    if (t.needs_grad(b)) t.accumulate(b, t.value(a).transpose() * g);
  });
}

// x (n x in) * W (in x out) + bias (1 x out, optional)
template <class T>
Var linear(Tape<T>& t, Var x, Var w, Var bias = {}) {
  Matrix<T> out = t.value(x) * t.value(w);
  if (bias.valid()) out.rowwise() += t.value(bias).row(0);
  auto backward = [x, w, bias](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(x)) t.accumulate(x, g * t.value(w).transpose());
    if (t.needs_grad(w)) t.accumulate(w, t.value(x).transpose() * g);
    if (bias.valid() && t.needs_grad(bias)) t.grad(bias).row(0) += g.colwise().sum();
  };
  if (bias.valid()) return t.emit(std::move(out), {x, w, bias}, backward);
  return t.emit(std::move(out), {x, w}, backward);
}

template <class T>
Var add(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  if (va.rows() != vb.rows() || va.cols() != vb.cols()) {
    throw ValidationError("add: shape mismatch " + std::to_string(va.rows()) + "x" + std::to_string(va.cols()) +
                          " vs " + std::to_string(vb.rows()) + "x" + std::to_string(vb.cols()));
  }
  Matrix<T> out = va + vb;
  return t.emit(std::move(out), {a, b}, [a, b](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a)) t.accumulate(a, g);
    if (t.needs_grad(b)) t.accumulate(b, g);
  });
}

template <class T>
Var scale(Tape<T>& t, Var a, T s) {
  Matrix<T> out = t.value(a) * s;
  return t.emit(std::move(out), {a}, [a, s](Tape<T>& t, Var self) { t.accumulate(a, t.grad(self) * s); });
}

template <class T>
Var relu(Tape<T>& t, Var a) {
  Matrix<T> out = t.value(a).cwiseMax(T(0));
  return t.emit(std::move(out), {a}, [a](Tape<T>& t, Var self) {
    t.accumulate(a, (t.grad(self).array() * (t.value(self).array() > T(0)).template cast<T>()).matrix());
  });
}

template <class T>
Var tanh(Tape<T>& t, Var a) {
  Matrix<T> out = t.value(a).array().tanh().matrix();
  return t.emit(std::move(out), {a}, [a](Tape<T>& t, Var self) {
    const auto& y = t.value(self);
    t.accumulate(a, (t.grad(self).array() * (T(1) - y.array().square())).matrix());
  });
}

// Inverted dropout; identity when p == 0 or when not training.
template <class T>
Var dropout(Tape<T>& t, Var a, double p, std::mt19937_64* rng) {
  if (p <= 0.0 || rng == nullptr) return a;
  const auto& v = t.value(a);
  Matrix<T> mask(v.rows(), v.cols());
  const T keep_scale = T(1.0 / (1.0 - p));
  // One draw from the run generator seeds a cheap per-call stream.
  std::uint64_t state = (*rng)();
  const auto threshold = static_cast<std::uint32_t>(p * 4294967296.0);
  auto next = [&state]() {
    std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  };
  const Eigen::Index n = mask.size();
  Eigen::Index i = 0;
  for (; i + 1 < n; i += 2) {
    const std::uint64_t r = next();
    mask.data()[i] = static_cast<std::uint32_t>(r) >= threshold ? keep_scale : T(0);
    mask.data()[i + 1] = static_cast<std::uint32_t>(r >> 32) >= threshold ? keep_scale : T(0);
  }
  if (i < n) mask.data()[i] = static_cast<std::uint32_t>(next()) >= threshold ? keep_scale : T(0);
  Matrix<T> out = v.cwiseProduct(mask);
  return t.emit(std::move(out), {a}, [a, mask = std::move(mask)](Tape<T>& t, Var self) {
    t.accumulate(a, t.grad(self).cwiseProduct(mask));
  });
}

// Row-wise layer normalization with learned gain and bias (1 x d each).
template <class T>
Var layer_norm(Tape<T>& t, Var x, Var gamma, Var beta, T eps = T(1e-5)) {
  const auto& v = t.value(x);
  const Eigen::Index n = v.rows(), d = v.cols();
  Matrix<T> xhat(n, d);
  Eigen::Matrix<T, Eigen::Dynamic, 1> rstd(n);
  for (Eigen::Index r = 0; r < n; ++r) {
    const T mean = v.row(r).mean();
    const T var = (v.row(r).array() - mean).square().mean();
    rstd(r) = T(1) / std::sqrt(var + eps);
    xhat.row(r) = (v.row(r).array() - mean) * rstd(r);
  }
  Matrix<T> out = (xhat.array().rowwise() * t.value(gamma).row(0).array()).rowwise() + t.value(beta).row(0).array();
  return t.emit(std::move(out), {x, gamma, beta},
                [x, gamma, beta, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, Var self) {
                  const auto& g = t.grad(self);
                  if (t.needs_grad(gamma)) t.grad(gamma).row(0) += g.cwiseProduct(xhat).colwise().sum();
                  if (t.needs_grad(beta)) t.grad(beta).row(0) += g.colwise().sum();
                  if (!t.needs_grad(x)) return;
                  Matrix<T> dxhat = g.array().rowwise() * t.value(gamma).row(0).array();
                  auto& gx = t.grad(x);
                  const T inv_d = T(1) / T(xhat.cols());
                  for (Eigen::Index r = 0; r < xhat.rows(); ++r) {
                    const T m1 = dxhat.row(r).sum() * inv_d;
                    const T m2 = dxhat.row(r).dot(xhat.row(r)) * inv_d;
                    gx.row(r).array() += rstd(r) * (dxhat.row(r).array() - m1 - xhat.row(r).array() * m2);
                  }
                });
}

// out.row(r) = x.row(index[r]); gradient scatter-adds.
template <class T>
Var gather_rows(Tape<T>& t, Var x, std::vector<int> index) {
  const auto& v = t.value(x);
  Matrix<T> out(static_cast<Eigen::Index>(index.size()), v.cols());
  for (std::size_t r = 0; r < index.size(); ++r) {
    if (index[r] < 0 || index[r] >= v.rows()) {
      throw ValidationError("row index " + std::to_string(index[r]) + " out of range [0, " +
                            std::to_string(v.rows()) + ")");
    }
    out.row(static_cast<Eigen::Index>(r)) = v.row(index[r]);
  }
  return t.emit(std::move(out), {x}, [x, index = std::move(index)](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (std::size_t r = 0; r < index.size(); ++r) gx.row(index[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

// Each row repeated k times consecutively.
template <class T>
Var repeat_rows(Tape<T>& t, Var x, int k) {
  const auto& v = t.value(x);
  Matrix<T> out(v.rows() * k, v.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) out.row(r) = v.row(r / k);
  return t.emit(std::move(out), {x}, [x, k](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (Eigen::Index r = 0; r < g.rows(); ++r) gx.row(r / k) += g.row(r);
  });
}

// The whole matrix stacked k times.
template <class T>
Var tile_rows(Tape<T>& t, Var x, int k) {
  const auto& v = t.value(x);
  const Eigen::Index n = v.rows();
  Matrix<T> out(n * k, v.cols());
  for (int i = 0; i < k; ++i) out.middleRows(i * n, n) = v;
  return t.emit(std::move(out), {x}, [x, k, n](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    auto& gx = t.grad(x);
    for (int i = 0; i < k; ++i) gx += g.middleRows(i * n, n);
  });
}

template <class T>
Var concat_cols(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  if (va.rows() != vb.rows()) throw ValidationError("concat_cols: row count mismatch");
  Matrix<T> out(va.rows(), va.cols() + vb.cols());
  out << va, vb;
  const Eigen::Index ca = va.cols(), cb = vb.cols();
  return t.emit(std::move(out), {a, b}, [a, b, ca, cb](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a) += g.leftCols(ca);
    if (t.needs_grad(b)) t.grad(b) += g.rightCols(cb);
  });
}

template <class T>
Var concat_rows(Tape<T>& t, Var a, Var b) {
  const auto& va = t.value(a);
  const auto& vb = t.value(b);
  if (va.cols() != vb.cols()) throw ValidationError("concat_rows: column count mismatch");
  Matrix<T> out(va.rows() + vb.rows(), va.cols());
  out << va, vb;
  const Eigen::Index ra = va.rows(), rb = vb.rows();
  return t.emit(std::move(out), {a, b}, [a, b, ra, rb](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(a)) t.grad(a) += g.topRows(ra);
    if (t.needs_grad(b)) t.grad(b) += g.bottomRows(rb);
  });
}

// Scaled dot-product attention over n_seq independent sequences. q holds
// n_seq*Lq rows, k and v n_seq*Lk rows; columns are split into `heads` heads.
template <class T>
Var attention(Tape<T>& t, Var q, Var k, Var v, int n_seq, int heads) {
  const auto& Q = t.value(q);
  const auto& K = t.value(k);
  const auto& V = t.value(v);
  const Eigen::Index d = Q.cols();
  if (n_seq <= 0 || heads <= 0 || d % heads != 0 || Q.rows() % n_seq != 0 || K.rows() % n_seq != 0 ||
      K.rows() != V.rows() || K.cols() != d || V.cols() != d) {
    throw ValidationError("attention: inconsistent shapes");
  }
  const Eigen::Index lq = Q.rows() / n_seq, lk = K.rows() / n_seq, dk = d / heads;
  const T inv = T(1) / std::sqrt(T(dk));
  Matrix<T> probs(static_cast<Eigen::Index>(n_seq) * heads * lq, lk);
  Matrix<T> out(Q.rows(), d);
  Matrix<T> s(lq, lk);
  for (int n = 0; n < n_seq; ++n) {
    for (int h = 0; h < heads; ++h) {
      auto qs = Q.block(n * lq, h * dk, lq, dk);
      auto ks = K.block(n * lk, h * dk, lk, dk);
      auto vs = V.block(n * lk, h * dk, lk, dk);
      s.noalias() = qs * ks.transpose();
      s *= inv;
      s.colwise() -= s.rowwise().maxCoeff();
      s = s.array().exp().matrix();
      s.array().colwise() /= s.rowwise().sum().array();
      probs.middleRows((static_cast<Eigen::Index>(n) * heads + h) * lq, lq) = s;
      out.block(n * lq, h * dk, lq, dk).noalias() = s * vs;
    }
  }
  return t.emit(std::move(out), {q, k, v},
                [q, k, v, n_seq, heads, lq, lk, dk, inv, probs = std::move(probs)](Tape<T>& t, Var self) {
                  const auto& g = t.grad(self);
                  const auto& Q = t.value(q);
                  const auto& K = t.value(k);
                  const auto& V = t.value(v);
                  const bool gq = t.needs_grad(q), gk = t.needs_grad(k), gv = t.needs_grad(v);
                  Matrix<T> dp(lq, lk), ds(lq, lk);
                  for (int n = 0; n < n_seq; ++n) {
                    for (int h = 0; h < heads; ++h) {
                      auto p = probs.middleRows((static_cast<Eigen::Index>(n) * heads + h) * lq, lq);
                      auto go = g.block(n * lq, h * dk, lq, dk);
                      if (gv) t.grad(v).block(n * lk, h * dk, lk, dk).noalias() += p.transpose() * go;
                      if (!gq && !gk) continue;
                      dp.noalias() = go * V.block(n * lk, h * dk, lk, dk).transpose();
                      ds = (p.array() * (dp.array().colwise() - (dp.array() * p.array()).rowwise().sum())) * inv;
                      if (gq) t.grad(q).block(n * lq, h * dk, lq, dk).noalias() += ds * K.block(n * lk, h * dk, lk, dk);
                      if (gk) t.grad(k).block(n * lk, h * dk, lk, dk).noalias() += ds.transpose() * Q.block(n * lq, h * dk, lq, dk);
                    }
                  }
                });
}

// Conditional attention pooling over box features. Row m of `query` scores
// the n_boxes rows of `keys` belonging to group[m] with an unscaled dot
// product; the softmax weights pool the matching rows of the constant `boxes`.
// Returns the pooled features (rows x D); the weights go to *alpha_out.
template <class T>
Var box_attention(Tape<T>& t, Var query, Var keys, const Matrix<T>& boxes, int n_boxes, std::vector<int> group,
                  Matrix<T>* alpha_out = nullptr) {
  const auto& Qm = t.value(query);
  const auto& Km = t.value(keys);
  const Eigen::Index m = Qm.rows();
  if (n_boxes < 1) throw ValidationError("box attention needs at least one box");
  if (static_cast<Eigen::Index>(group.size()) != m || Km.rows() != boxes.rows() || Km.rows() % n_boxes != 0 ||
      Km.cols() != Qm.cols()) {
    throw ValidationError("box_attention: inconsistent shapes");
  }
  const Eigen::Index n_groups = Km.rows() / n_boxes;
  Matrix<T> alpha(m, n_boxes);
  Matrix<T> out(m, boxes.cols());
  for (Eigen::Index r = 0; r < m; ++r) {
    const int gidx = group[static_cast<std::size_t>(r)];
    if (gidx < 0 || gidx >= n_groups) throw ValidationError("box_attention: group index out of range");
    auto kb = Km.middleRows(static_cast<Eigen::Index>(gidx) * n_boxes, n_boxes);
    Eigen::Matrix<T, 1, Eigen::Dynamic> s = Qm.row(r) * kb.transpose();
    const T mx = s.maxCoeff();
    s = (s.array() - mx).exp();
    s /= s.sum();
    alpha.row(r) = s;
    out.row(r).noalias() = s * boxes.middleRows(static_cast<Eigen::Index>(gidx) * n_boxes, n_boxes);
  }
  if (alpha_out) *alpha_out = alpha;
  return t.emit(std::move(out), {query, keys},
                [query, keys, boxes, n_boxes, group = std::move(group), alpha = std::move(alpha)](Tape<T>& t, Var self) {
                  const auto& g = t.grad(self);
                  const auto& Qm = t.value(query);
                  const auto& Km = t.value(keys);
                  for (Eigen::Index r = 0; r < g.rows(); ++r) {
                    const Eigen::Index base = static_cast<Eigen::Index>(group[static_cast<std::size_t>(r)]) * n_boxes;
                    // d alpha_j = <g, box_j>; d score_j = alpha_j (d alpha_j - sum alpha d alpha)
                    Eigen::Matrix<T, 1, Eigen::Dynamic> da = g.row(r) * boxes.middleRows(base, n_boxes).transpose();
                    const T dot = da.dot(alpha.row(r));
                    Eigen::Matrix<T, 1, Eigen::Dynamic> ds = alpha.row(r).array() * (da.array() - dot);
                    if (t.needs_grad(query)) t.grad(query).row(r).noalias() += ds * Km.middleRows(base, n_boxes);
                    if (t.needs_grad(keys)) t.grad(keys).middleRows(base, n_boxes).noalias() += ds.transpose() * Qm.row(r);
                  }
                });
}

struct SlotRange {
  int offset = 0;
  int size = 0;
};

// Per-slot output head. x holds `slots` consecutive rows per object; slot i
// only scores its own value range, so all of an object's slot logits fit in
// one row of width sum(sizes): out(m, range_i) = x(m*slots + i) * W(:, range_i) + b(range_i).
template <class T>
Var slot_logits(Tape<T>& t, Var x, Var w, Var bias, const std::vector<SlotRange>& ranges) {
  const auto& X = t.value(x);
  const auto& W = t.value(w);
  const auto& b = t.value(bias);
  const int S = static_cast<int>(ranges.size());
  if (S == 0 || X.rows() % S != 0 || X.cols() != W.rows()) throw ValidationError("slot_logits: inconsistent shapes");
  const Eigen::Index M = X.rows() / S;
  Matrix<T> out(M, W.cols());
  for (int i = 0; i < S; ++i) {
    const auto& rg = ranges[static_cast<std::size_t>(i)];
    Eigen::Map<const Matrix<T>, 0, Eigen::OuterStride<>> xi(X.data() + static_cast<Eigen::Index>(i) * X.cols(), M,
                                                              X.cols(), Eigen::OuterStride<>(X.cols() * S));
    out.middleCols(rg.offset, rg.size).noalias() = xi * W.middleCols(rg.offset, rg.size);
    out.middleCols(rg.offset, rg.size).rowwise() += b.row(0).segment(rg.offset, rg.size);
  }
  return t.emit(std::move(out), {x, w, bias}, [x, w, bias, ranges](Tape<T>& t, Var self) {
    const auto& g = t.grad(self);
    const auto& X = t.value(x);
    const auto& W = t.value(w);
    const int S = static_cast<int>(ranges.size());
    const Eigen::Index M = g.rows();
    const bool gx = t.needs_grad(x), gw = t.needs_grad(w);
    for (int i = 0; i < S; ++i) {
      const auto& rg = ranges[static_cast<std::size_t>(i)];
      if (gx) {
        auto& dx = t.grad(x);
        Eigen::Map<Matrix<T>, 0, Eigen::OuterStride<>> dxi(dx.data() + static_cast<Eigen::Index>(i) * dx.cols(), M,
                                                           dx.cols(), Eigen::OuterStride<>(dx.cols() * S));
        dxi.noalias() += g.middleCols(rg.offset, rg.size) * W.middleCols(rg.offset, rg.size).transpose();
      }
      if (gw) {
        Eigen::Map<const Matrix<T>, 0, Eigen::OuterStride<>> xi(X.data() + static_cast<Eigen::Index>(i) * X.cols(), M,
                                                                  X.cols(), Eigen::OuterStride<>(X.cols() * S));
        t.grad(w).middleCols(rg.offset, rg.size).noalias() += xi.transpose() * g.middleCols(rg.offset, rg.size);
      }
    }
    if (t.needs_grad(bias)) t.grad(bias).row(0) += g.colwise().sum();
  });
}

// sum_r weights[r] * CE_r over compact slot logits (one row per object, see
// slot_logits). Entry r = m*slots + i scores slot i of object m against the
// global target index targets[r].
template <class T>
Var slot_cross_entropy(Tape<T>& t, Var logits, const std::vector<SlotRange>& ranges, const std::vector<int>& targets,
                       std::vector<T> weights) {
  const auto& L = t.value(logits);
  const std::size_t S = ranges.size();
  const std::size_t n = static_cast<std::size_t>(L.rows()) * S;
  if (targets.size() != n || weights.size() != n) {
    throw ValidationError("cross entropy: target/weight count does not match logits");
  }
  Matrix<T> probs(L.rows(), L.cols());
  Matrix<T> out = Matrix<T>::Zero(1, 1);
  T loss = 0;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& rg = ranges[r % S];
    const auto m = static_cast<Eigen::Index>(r / S);
    const int tg = targets[r];
    if (tg < rg.offset || tg >= rg.offset + rg.size) {
      throw ValidationError("target " + std::to_string(tg) + " is masked out for slot " + std::to_string(r % S));
    }
    auto seg = L.row(m).segment(rg.offset, rg.size);
    auto p = probs.row(m).segment(rg.offset, rg.size);
    const T mx = seg.maxCoeff();
    p = (seg.array() - mx).exp().matrix();
    const T z = p.sum();
    p /= z;
    if (weights[r] != T(0)) loss += weights[r] * (std::log(z) + mx - L(m, tg));
  }
  out(0, 0) = loss;
  return t.emit(std::move(out), {logits},
                [logits, ranges, targets, weights = std::move(weights), probs = std::move(probs)](Tape<T>& t, Var self) {
                  const T g = t.grad(self)(0, 0);
                  auto& gl = t.grad(logits);
                  const std::size_t S = ranges.size();
                  for (std::size_t r = 0; r < targets.size(); ++r) {
                    const T w = weights[r];
                    if (w == T(0)) continue;
                    const auto& rg = ranges[r % S];
                    const auto m = static_cast<Eigen::Index>(r / S);
                    gl.row(m).segment(rg.offset, rg.size) += (g * w) * probs.row(m).segment(rg.offset, rg.size);
                    gl(m, targets[r]) -= g * w;
                  }
                });
}

// ---------------------------------------------------------------------------
// Optimizer

template <class T>
class Adam {
 public:
  Adam(ParameterStore<T>& store, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : store_(&store), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  double learning_rate() const { return lr_; }
  void set_learning_rate(double lr) { lr_ = lr; }
  std::int64_t steps() const { return t_; }

  void step() {
    ++t_;
    const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    const T step_size = static_cast<T>(lr_ / c1);
    const T inv_c2 = static_cast<T>(1.0 / c2);
    for (auto* p : store_->parameters()) {
      if (!p->trainable) continue;
      auto& st = state_[p->name];
      if (st.m.size() == 0) {
        st.m = Matrix<T>::Zero(p->value.rows(), p->value.cols());
        st.v = Matrix<T>::Zero(p->value.rows(), p->value.cols());
      }
      st.m = T(b1_) * st.m + T(1 - b1_) * p->grad;
      st.v = T(b2_) * st.v + T(1 - b2_) * p->grad.cwiseAbs2();
      p->value.array() -= step_size * st.m.array() / ((st.v.array() * inv_c2).sqrt() + T(eps_));
    }
  }

 private:
  struct State {
    Matrix<T> m, v;
  };
  ParameterStore<T>* store_;
  double lr_, b1_, b2_, eps_;
  std::int64_t t_ = 0;
  std::unordered_map<std::string, State> state_;
};

// ---------------------------------------------------------------------------
// Initializers

template <class T>
Matrix<T> uniform_matrix(Eigen::Index rows, Eigen::Index cols, double bound, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(u(rng));
  return m;
}

template <class T>
Matrix<T> normal_matrix(Eigen::Index rows, Eigen::Index cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> nd(0.0, stddev);
  Matrix<T> m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = static_cast<T>(nd(rng));
  return m;
}

}  // namespace physdyn::nn
