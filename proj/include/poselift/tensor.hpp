#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <sstream>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "poselift/common.hpp"
#include "poselift/rng.hpp"

namespace poselift {

enum class Mode { train, eval };

namespace detail {

struct TensorNode;
using NodePtr = std::shared_ptr<TensorNode>;

inline std::atomic<uint64_t>& seq_counter() {
  static std::atomic<uint64_t> counter{0};
  return counter;
}

// One recorded operation result. The per-node backward closure plus the
// parent links form the tape; backward() replays it in strict reverse
// execution order (descending seq).
struct TensorNode {
  std::vector<int64_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // persistent accumulator, sized on first use
  bool requires_grad = false;
  uint64_t seq = 0;
  std::vector<NodePtr> parents;
  // gout: this node's upstream gradient. gparents[i]: writable buffer for
  // parents[i], nullptr when that parent needs no gradient.
  std::function<void(const std::vector<double>& gout,
                     const std::vector<std::vector<double>*>& gparents)>
      backward_fn;
};

inline int64_t shape_numel(const std::vector<int64_t>& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

inline std::string shape_str(const std::vector<int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

}  // namespace detail

class Tensor {
 public:
  Tensor() : node_(std::make_shared<detail::TensorNode>()) {}

  static Tensor zeros(std::vector<int64_t> shape, bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, 0.0);
  }

  static Tensor full(std::vector<int64_t> shape, double value,
                     bool requires_grad = false) {
    return from_data(std::move(shape), {}, requires_grad, value);
  }

  static Tensor scalar(double value, bool requires_grad = false) {
    return from_data({}, {value}, requires_grad, 0.0);
  }

  static Tensor from_data(std::vector<int64_t> shape, std::vector<double> data,
                          bool requires_grad = false, double fill = 0.0) {
    auto node = std::make_shared<detail::TensorNode>();
    node->shape = std::move(shape);
    int64_t n = detail::shape_numel(node->shape);
    if (data.empty()) {
      node->data.assign(static_cast<size_t>(n), fill);
    } else {
      if (static_cast<int64_t>(data.size()) != n)
        throw shape_error("from_data: data length " +
                          std::to_string(data.size()) + " does not match " +
                          detail::shape_str(node->shape));
      node->data = std::move(data);
    }
    node->requires_grad = requires_grad;
    node->seq = detail::seq_counter().fetch_add(1) + 1;
    return Tensor(node);
  }

  static Tensor uniform(std::vector<int64_t> shape, double lo, double hi,
                        SplitMix64& rng, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
  }

  const std::vector<int64_t>& shape() const { return node_->shape; }
  int64_t rank() const { return static_cast<int64_t>(node_->shape.size()); }
  int64_t size(int64_t dim) const {
    if (dim < 0) dim += rank();
    return node_->shape[static_cast<size_t>(dim)];
  }
  int64_t numel() const { return detail::shape_numel(node_->shape); }

  std::vector<double>& data() { return node_->data; }
  const std::vector<double>& data() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg) { node_->requires_grad = rg; }

  bool has_grad() const { return !node_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (node_->grad.empty())
      node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
  }
  std::vector<double>& grad_mut() {
    if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
    return node_->grad;
  }
  void zero_grad() { node_->grad.assign(node_->data.size(), 0.0); }

  double item() const {
    if (numel() != 1)
      throw shape_error("item: tensor " + detail::shape_str(shape()) +
                        " is not scalar");
    return node_->data[0];
  }

  double at(std::initializer_list<int64_t> idx) const {
    return node_->data[flat_index(idx)];
  }
  double& at_mut(std::initializer_list<int64_t> idx) {
    return node_->data[flat_index(idx)];
  }

  // Identity check (same underlying node), used by optimizers and registries.
  detail::TensorNode* node() const { return node_.get(); }
  const detail::NodePtr& node_ptr() const { return node_; }

  // Reverse-mode sweep from this scalar. Intermediate gradients live in
  // per-call temporaries; persistent .grad buffers only ever accumulate,
  // so two backward calls without zero_grad double every gradient.
  void backward() const;

  explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

 private:
  size_t flat_index(std::initializer_list<int64_t> idx) const {
    if (static_cast<int64_t>(idx.size()) != rank())
      throw shape_error("at: index rank mismatch");
    size_t flat = 0;
    size_t d = 0;
    for (int64_t i : idx) {
      flat = flat * static_cast<size_t>(node_->shape[d]) + static_cast<size_t>(i);
      ++d;
    }
    return flat;
  }

  detail::NodePtr node_;
};

namespace detail {

inline void check_finite(const TensorNode& node, const char* op) {
#ifndef NDEBUG
  for (double v : node.data) {
    if (!std::isfinite(v))
      throw numeric_error(std::string(op) + ": non-finite value produced");
  }
#else
  (void)node;
  (void)op;
#endif
}

inline Tensor make_result(std::vector<int64_t> shape, std::vector<double> data,
                          std::vector<NodePtr> parents, const char* op) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  for (const auto& p : parents) {
    if (p->requires_grad) {
      node->requires_grad = true;
      break;
    }
  }
  node->parents = std::move(parents);
  node->seq = seq_counter().fetch_add(1) + 1;
  check_finite(*node, op);
  return Tensor(node);
}

// Broadcast helper: numpy rules over trailing dimensions.
inline std::vector<int64_t> broadcast_shape(const std::vector<int64_t>& a,
                                            const std::vector<int64_t>& b,
                                            const char* op) {
  size_t rank = std::max(a.size(), b.size());
  std::vector<int64_t> out(rank, 1);
  for (size_t i = 0; i < rank; ++i) {
    int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      throw shape_error(std::string(op) + ": cannot broadcast " +
                        shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Strides padded to `rank`, zeroed on broadcast dimensions.
inline std::vector<int64_t> broadcast_strides(const std::vector<int64_t>& shape,
                                              const std::vector<int64_t>& out,
                                              size_t rank) {
  std::vector<int64_t> strides(rank, 0);
  int64_t acc = 1;
  for (size_t i = shape.size(); i-- > 0;) {
    size_t oi = i + (rank - shape.size());
    strides[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= shape[i];
  }
  return strides;
}

}  // namespace detail

inline void Tensor::backward() const {
  if (numel() != 1)
    throw shape_error("backward: output " + detail::shape_str(shape()) +
                      " is not scalar");
  using detail::TensorNode;

  // Collect reachable grad-requiring subgraph.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<TensorNode*> stack{node_.get()};
  while (!stack.empty()) {
    TensorNode* n = stack.back();
    stack.pop_back();
    if (!n->requires_grad || visited.count(n)) continue;
    visited.insert(n);
    order.push_back(n);
    for (const auto& p : n->parents) stack.push_back(p.get());
  }
  std::sort(order.begin(), order.end(),
            [](TensorNode* a, TensorNode* b) { return a->seq > b->seq; });

  std::unordered_map<TensorNode*, std::vector<double>> tmp;
  if (node_->requires_grad) tmp[node_.get()] = {1.0};

  std::vector<std::vector<double>*> bufs;
  for (TensorNode* n : order) {
    auto it = tmp.find(n);
    if (it == tmp.end() || !n->backward_fn) continue;
    bufs.clear();
    for (const auto& p : n->parents) {
      if (p->requires_grad) {
        auto& buf = tmp[p.get()];
        if (buf.empty()) buf.assign(p->data.size(), 0.0);
        bufs.push_back(&buf);
      } else {
        bufs.push_back(nullptr);
      }
    }
    n->backward_fn(it->second, bufs);
  }

  for (auto& [n, g] : tmp) {
    if (!n->requires_grad || g.empty()) continue;
    if (n->grad.empty()) n->grad.assign(n->data.size(), 0.0);
    for (size_t i = 0; i < g.size(); ++i) n->grad[i] += g[i];
  }
}

// ---------------------------------------------------------------------------
// Elementwise binary ops with broadcasting.
// ---------------------------------------------------------------------------

namespace detail {

enum class BinOp { add, sub, mul, div };

inline Tensor binary_op(const Tensor& a, const Tensor& b, BinOp op,
                        const char* name) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  auto an = a.node_ptr();
  auto bn = b.node_ptr();

  auto apply = [op](double x, double y) {
    switch (op) {
      case BinOp::add: return x + y;
      case BinOp::sub: return x - y;
      case BinOp::mul: return x * y;
      case BinOp::div: return x / y;
    }
    return 0.0;
  };

  if (sa == sb) {  // fast path, no stride arithmetic
    std::vector<double> out(a.data().size());
    const auto& da = a.data();
    const auto& db = b.data();
    for (size_t i = 0; i < out.size(); ++i) out[i] = apply(da[i], db[i]);
    Tensor r = make_result(sa, std::move(out), {an, bn}, name);
    if (r.requires_grad()) {
      r.node()->backward_fn = [an, bn, op](const std::vector<double>& g,
                                           const std::vector<std::vector<double>*>& gp) {
        const auto& da = an->data;
        const auto& db = bn->data;
        for (size_t i = 0; i < g.size(); ++i) {
          switch (op) {
            case BinOp::add:
              if (gp[0]) (*gp[0])[i] += g[i];
              if (gp[1]) (*gp[1])[i] += g[i];
              break;
            case BinOp::sub:
              if (gp[0]) (*gp[0])[i] += g[i];
              if (gp[1]) (*gp[1])[i] -= g[i];
              break;
            case BinOp::mul:
              if (gp[0]) (*gp[0])[i] += g[i] * db[i];
              if (gp[1]) (*gp[1])[i] += g[i] * da[i];
              break;
            case BinOp::div:
              if (gp[0]) (*gp[0])[i] += g[i] / db[i];
              if (gp[1]) (*gp[1])[i] -= g[i] * da[i] / (db[i] * db[i]);
              break;
          }
        }
      };
    }
    return r;
  }

  std::vector<int64_t> os = broadcast_shape(sa, sb, name);
  size_t rank = os.size();
  std::vector<int64_t> stra = broadcast_strides(sa, os, rank);
  std::vector<int64_t> strb = broadcast_strides(sb, os, rank);
  int64_t n = shape_numel(os);
  std::vector<double> out(static_cast<size_t>(n));
  std::vector<int64_t> idx(rank, 0);
  const auto& da = a.data();
  const auto& db = b.data();
  int64_t ia = 0, ib = 0;
  for (int64_t lin = 0; lin < n; ++lin) {
    out[static_cast<size_t>(lin)] = apply(da[static_cast<size_t>(ia)],
                                          db[static_cast<size_t>(ib)]);
    // odometer increment
    for (size_t d = rank; d-- > 0;) {
      ++idx[d];
      ia += stra[d];
      ib += strb[d];
      if (idx[d] < os[d]) break;
      ia -= stra[d] * os[d];
      ib -= strb[d] * os[d];
      idx[d] = 0;
    }
  }
  Tensor r = make_result(os, std::move(out), {an, bn}, name);
  if (r.requires_grad()) {
    r.node()->backward_fn = [an, bn, op, os, stra, strb, rank](
                                const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gp) {
      const auto& da = an->data;
      const auto& db = bn->data;
      std::vector<int64_t> idx(rank, 0);
      int64_t ia = 0, ib = 0;
      int64_t n = static_cast<int64_t>(g.size());
      for (int64_t lin = 0; lin < n; ++lin) {
        double gv = g[static_cast<size_t>(lin)];
        size_t ua = static_cast<size_t>(ia), ub = static_cast<size_t>(ib);
        switch (op) {
          case BinOp::add:
            if (gp[0]) (*gp[0])[ua] += gv;
            if (gp[1]) (*gp[1])[ub] += gv;
            break;
          case BinOp::sub:
            if (gp[0]) (*gp[0])[ua] += gv;
            if (gp[1]) (*gp[1])[ub] -= gv;
            break;
          case BinOp::mul:
            if (gp[0]) (*gp[0])[ua] += gv * db[ub];
            if (gp[1]) (*gp[1])[ub] += gv * da[ua];
            break;
          case BinOp::div:
            if (gp[0]) (*gp[0])[ua] += gv / db[ub];
            if (gp[1]) (*gp[1])[ub] -= gv * da[ua] / (db[ub] * db[ub]);
            break;
        }
        for (size_t d = rank; d-- > 0;) {
          ++idx[d];
          ia += stra[d];
          ib += strb[d];
          if (idx[d] < os[d]) break;
          ia -= stra[d] * os[d];
          ib -= strb[d] * os[d];
          idx[d] = 0;
        }
      }
    };
  }
  return r;
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, detail::BinOp::add, "add");
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, detail::BinOp::sub, "sub");
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, detail::BinOp::mul, "mul");
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary_op(a, b, detail::BinOp::div, "div");
}

// a * c (constant scalar)
inline Tensor scale(const Tensor& a, double c) {
  auto an = a.node_ptr();
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * c;
  Tensor r = detail::make_result(a.shape(), std::move(out), {an}, "scale");
  if (r.requires_grad()) {
    r.node()->backward_fn = [c](const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gp) {
      if (gp[0])
        for (size_t i = 0; i < g.size(); ++i) (*gp[0])[i] += g[i] * c;
    };
  }
  return r;
}

// a + c (constant scalar)
inline Tensor shift(const Tensor& a, double c) {
  auto an = a.node_ptr();
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + c;
  Tensor r = detail::make_result(a.shape(), std::move(out), {an}, "shift");
  if (r.requires_grad()) {
    r.node()->backward_fn = [](const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& gp) {
      if (gp[0])
        for (size_t i = 0; i < g.size(); ++i) (*gp[0])[i] += g[i];
    };
  }
  return r;
}

inline Tensor neg(const Tensor& a) { return scale(a, -1.0); }

// ---------------------------------------------------------------------------
// Unary elementwise ops.
// ---------------------------------------------------------------------------

inline Tensor relu(const Tensor& a) {
  auto an = a.node_ptr();
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
  Tensor r = detail::make_result(a.shape(), std::move(out), {an}, "relu");
  if (r.requires_grad()) {
    r.node()->backward_fn = [an](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (size_t i = 0; i < g.size(); ++i)
        if (an->data[i] > 0.0) (*gp[0])[i] += g[i];
    };
  }
  return r;
}

inline Tensor sigmoid(const Tensor& a) {
  auto an = a.node_ptr();
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i)
    out[i] = 1.0 / (1.0 + std::exp(-a.data()[i]));
  std::vector<double> saved = out;
  Tensor r = detail::make_result(a.shape(), std::move(out), {an}, "sigmoid");
  if (r.requires_grad()) {
    r.node()->backward_fn = [saved = std::move(saved)](
                                const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (size_t i = 0; i < g.size(); ++i)
        (*gp[0])[i] += g[i] * saved[i] * (1.0 - saved[i]);
    };
  }
  return r;
}

inline Tensor sqrt(const Tensor& a) {
  auto an = a.node_ptr();
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::sqrt(a.data()[i]);
  std::vector<double> saved = out;
  Tensor r = detail::make_result(a.shape(), std::move(out), {an}, "sqrt");
  if (r.requires_grad()) {
    r.node()->backward_fn = [saved = std::move(saved)](
                                const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (size_t i = 0; i < g.size(); ++i)
        (*gp[0])[i] += g[i] * 0.5 / saved[i];
    };
  }
  return r;
}

inline Tensor abs(const Tensor& a) {
  auto an = a.node_ptr();
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::fabs(a.data()[i]);
  Tensor r = detail::make_result(a.shape(), std::move(out), {an}, "abs");
  if (r.requires_grad()) {
    r.node()->backward_fn = [an](const std::vector<double>& g,
                                 const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (size_t i = 0; i < g.size(); ++i) {
        double x = an->data[i];
        (*gp[0])[i] += g[i] * (x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0));
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Structural ops.
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, std::vector<int64_t> new_shape) {
  if (detail::shape_numel(new_shape) != a.numel())
    throw shape_error("reshape: " + detail::shape_str(a.shape()) + " to " +
                      detail::shape_str(new_shape) + " changes element count");
  auto an = a.node_ptr();
  std::vector<double> out = a.data();
  Tensor r =
      detail::make_result(std::move(new_shape), std::move(out), {an}, "reshape");
  if (r.requires_grad()) {
    r.node()->backward_fn = [](const std::vector<double>& g,
                               const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (size_t i = 0; i < g.size(); ++i) (*gp[0])[i] += g[i];
    };
  }
  return r;
}

// Swap the last two dimensions.
inline Tensor transpose(const Tensor& a) {
  if (a.rank() < 2) throw shape_error("transpose: rank < 2");
  auto an = a.node_ptr();
  std::vector<int64_t> os = a.shape();
  int64_t m = os[os.size() - 2], n = os[os.size() - 1];
  std::swap(os[os.size() - 2], os[os.size() - 1]);
  int64_t batch = a.numel() / (m * n);
  std::vector<double> out(a.data().size());
  const auto& d = a.data();
  for (int64_t b = 0; b < batch; ++b) {
    const double* src = d.data() + b * m * n;
    double* dst = out.data() + b * m * n;
    for (int64_t i = 0; i < m; ++i)
      for (int64_t j = 0; j < n; ++j) dst[j * m + i] = src[i * n + j];
  }
  Tensor r = detail::make_result(std::move(os), std::move(out), {an}, "transpose");
  if (r.requires_grad()) {
    r.node()->backward_fn = [m, n, batch](const std::vector<double>& g,
                                          const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (int64_t b = 0; b < batch; ++b) {
        const double* src = g.data() + b * m * n;
        double* dst = gp[0]->data() + b * m * n;
        // g has shape (..., n, m); un-transpose back into (..., m, n)
        for (int64_t j = 0; j < n; ++j)
          for (int64_t i = 0; i < m; ++i) dst[i * n + j] += src[j * m + i];
      }
    };
  }
  return r;
}

// Concatenate along the last dimension.
inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw shape_error("concat: no inputs");
  const auto& first = parts[0].shape();
  int64_t lead = 1;
  for (size_t i = 0; i + 1 < first.size(); ++i) lead *= first[i];
  int64_t total_last = 0;
  std::vector<detail::NodePtr> nodes;
  std::vector<int64_t> widths;
  for (const Tensor& p : parts) {
    if (p.rank() != static_cast<int64_t>(first.size()))
      throw shape_error("concat: rank mismatch");
    for (size_t i = 0; i + 1 < first.size(); ++i)
      if (p.shape()[i] != first[i])
        throw shape_error("concat: leading dims differ: " +
                          detail::shape_str(first) + " vs " +
                          detail::shape_str(p.shape()));
    widths.push_back(p.shape().back());
    total_last += p.shape().back();
    nodes.push_back(p.node_ptr());
  }
  std::vector<int64_t> os = first;
  os.back() = total_last;
  std::vector<double> out(static_cast<size_t>(lead * total_last));
  int64_t off = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const auto& d = parts[pi].data();
    int64_t w = widths[pi];
    for (int64_t r = 0; r < lead; ++r)
      std::copy(d.begin() + r * w, d.begin() + (r + 1) * w,
                out.begin() + r * total_last + off);
    off += w;
  }
  Tensor r = detail::make_result(std::move(os), std::move(out), nodes, "concat");
  if (r.requires_grad()) {
    r.node()->backward_fn = [widths, lead, total_last](
                                const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gp) {
      int64_t off = 0;
      for (size_t pi = 0; pi < widths.size(); ++pi) {
        int64_t w = widths[pi];
        if (gp[pi]) {
          for (int64_t r = 0; r < lead; ++r)
            for (int64_t j = 0; j < w; ++j)
              (*gp[pi])[static_cast<size_t>(r * w + j)] +=
                  g[static_cast<size_t>(r * total_last + off + j)];
        }
        off += w;
      }
    };
  }
  return r;
}

// Slice [start, start+len) of the last dimension.
inline Tensor slice_last(const Tensor& a, int64_t start, int64_t len) {
  int64_t last = a.shape().back();
  if (start < 0 || len <= 0 || start + len > last)
    throw shape_error("slice_last: range [" + std::to_string(start) + "," +
                      std::to_string(start + len) + ") out of " +
                      std::to_string(last));
  auto an = a.node_ptr();
  int64_t lead = a.numel() / last;
  std::vector<int64_t> os = a.shape();
  os.back() = len;
  std::vector<double> out(static_cast<size_t>(lead * len));
  const auto& d = a.data();
  for (int64_t r = 0; r < lead; ++r)
    std::copy(d.begin() + r * last + start, d.begin() + r * last + start + len,
              out.begin() + r * len);
  Tensor r = detail::make_result(std::move(os), std::move(out), {an}, "slice_last");
  if (r.requires_grad()) {
    r.node()->backward_fn = [lead, len, last, start](
                                const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (int64_t row = 0; row < lead; ++row)
        for (int64_t j = 0; j < len; ++j)
          (*gp[0])[static_cast<size_t>(row * last + start + j)] +=
              g[static_cast<size_t>(row * len + j)];
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

inline Tensor sum_axis(const Tensor& a, int64_t axis, bool keepdim = true) {
  int64_t r = a.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw shape_error("sum_axis: bad axis");
  const auto& s = a.shape();
  int64_t outer = 1, inner = 1, ax = s[static_cast<size_t>(axis)];
  for (int64_t i = 0; i < axis; ++i) outer *= s[static_cast<size_t>(i)];
  for (int64_t i = axis + 1; i < r; ++i) inner *= s[static_cast<size_t>(i)];
  std::vector<int64_t> os;
  for (int64_t i = 0; i < r; ++i) {
    if (i == axis) {
      if (keepdim) os.push_back(1);
    } else {
      os.push_back(s[static_cast<size_t>(i)]);
    }
  }
  auto an = a.node_ptr();
  std::vector<double> out(static_cast<size_t>(outer * inner), 0.0);
  const auto& d = a.data();
  for (int64_t o = 0; o < outer; ++o)
    for (int64_t x = 0; x < ax; ++x) {
      const double* src = d.data() + (o * ax + x) * inner;
      double* dst = out.data() + o * inner;
      for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  Tensor res = detail::make_result(std::move(os), std::move(out), {an}, "sum_axis");
  if (res.requires_grad()) {
    res.node()->backward_fn = [outer, ax, inner](
                                  const std::vector<double>& g,
                                  const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (int64_t o = 0; o < outer; ++o)
        for (int64_t x = 0; x < ax; ++x) {
          double* dst = gp[0]->data() + (o * ax + x) * inner;
          const double* src = g.data() + o * inner;
          for (int64_t i = 0; i < inner; ++i) dst[i] += src[i];
        }
    };
  }
  return res;
}

inline Tensor mean_axis(const Tensor& a, int64_t axis, bool keepdim = true) {
  int64_t r = a.rank();
  int64_t ax = a.shape()[static_cast<size_t>(axis < 0 ? axis + r : axis)];
  return scale(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(ax));
}

inline Tensor sum_all(const Tensor& a) {
  auto an = a.node_ptr();
  double total = 0.0;
  for (double v : a.data()) total += v;
  Tensor r = detail::make_result({}, {total}, {an}, "sum_all");
  if (r.requires_grad()) {
    r.node()->backward_fn = [n = a.data().size()](
                                const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (size_t i = 0; i < n; ++i) (*gp[0])[i] += g[0];
    };
  }
  return r;
}

inline Tensor mean_all(const Tensor& a) {
  return scale(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

// ---------------------------------------------------------------------------
// Matrix product, batched over leading dimensions.
// ---------------------------------------------------------------------------

namespace detail {

inline void mm_nn(const double* __restrict A, const double* __restrict B,
                  double* __restrict C, int64_t m, int64_t k, int64_t n) {
  for (int64_t i = 0; i < m; ++i) {
    const double* a = A + i * k;
    double* c = C + i * n;
    for (int64_t kk = 0; kk < k; ++kk) {
      double av = a[kk];
      const double* b = B + kk * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

// C (m×n) += A (m×k) · Bᵀ, with B stored (n×k). Materializing the transpose
// turns the per-entry dot products into the streaming mm_nn form, which
// vectorizes; the transpose itself is O(nk) against an O(mnk) product.
inline void mm_nt(const double* __restrict A, const double* __restrict B,
                  double* __restrict C, int64_t m, int64_t k, int64_t n) {
  thread_local std::vector<double> scratch;
  scratch.resize(static_cast<size_t>(k * n));
  for (int64_t j = 0; j < n; ++j)
    for (int64_t kk = 0; kk < k; ++kk) scratch[kk * n + j] = B[j * k + kk];
  mm_nn(A, scratch.data(), C, m, k, n);
}

// C (m×n) += Aᵀ · B, with A stored (k×m), B stored (k×n).
inline void mm_tn(const double* __restrict A, const double* __restrict B,
                  double* __restrict C, int64_t m, int64_t k, int64_t n) {
  for (int64_t kk = 0; kk < k; ++kk) {
    const double* a = A + kk * m;
    const double* b = B + kk * n;
    for (int64_t i = 0; i < m; ++i) {
      double av = a[i];
      double* c = C + i * n;
      for (int64_t j = 0; j < n; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace detail

// Batched matrix product over the last two dims. A rank-2 operand broadcasts
// across the other operand's batch dimensions; otherwise batch dims must match.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() < 2)
    throw shape_error("matmul: operands must have rank >= 2, got " +
                      detail::shape_str(sa) + " and " + detail::shape_str(sb));
  int64_t m = sa[sa.size() - 2], ka = sa[sa.size() - 1];
  int64_t kb = sb[sb.size() - 2], n = sb[sb.size() - 1];
  if (ka != kb)
    throw shape_error("matmul: inner dims differ: " + detail::shape_str(sa) +
                      " x " + detail::shape_str(sb));
  std::vector<int64_t> batch_a(sa.begin(), sa.end() - 2);
  std::vector<int64_t> batch_b(sb.begin(), sb.end() - 2);
  std::vector<int64_t> batch;
  if (batch_a.empty())
    batch = batch_b;
  else if (batch_b.empty())
    batch = batch_a;
  else if (batch_a == batch_b)
    batch = batch_a;
  else
    throw shape_error("matmul: batch dims differ: " + detail::shape_str(sa) +
                      " x " + detail::shape_str(sb));
  int64_t nbatch = detail::shape_numel(batch);
  bool a_batched = !batch_a.empty();
  bool b_batched = !batch_b.empty();

  std::vector<int64_t> os = batch;
  os.push_back(m);
  os.push_back(n);
  std::vector<double> out(static_cast<size_t>(nbatch * m * n), 0.0);
  const double* pa = a.data().data();
  const double* pb = b.data().data();
  // A batched operand with a rank-2 right factor is one tall GEMM.
  bool collapse = a_batched && !b_batched;
  if (collapse) {
    detail::mm_nn(pa, pb, out.data(), nbatch * m, ka, n);
  } else {
    for (int64_t bi = 0; bi < nbatch; ++bi) {
      detail::mm_nn(pa + (a_batched ? bi * m * ka : 0),
                    pb + (b_batched ? bi * ka * n : 0), out.data() + bi * m * n,
                    m, ka, n);
    }
  }
  auto an = a.node_ptr();
  auto bn = b.node_ptr();
  Tensor r = detail::make_result(std::move(os), std::move(out), {an, bn}, "matmul");
  if (r.requires_grad()) {
    int64_t k = ka;
    r.node()->backward_fn = [an, bn, m, k, n, nbatch, a_batched, b_batched,
                             collapse](const std::vector<double>& g,
                                       const std::vector<std::vector<double>*>& gp) {
      const double* pa = an->data.data();
      const double* pb = bn->data.data();
      if (collapse) {
        // dA = g · Bᵀ, dB = Aᵀ · g over the stacked batch rows.
        if (gp[0]) detail::mm_nt(g.data(), pb, gp[0]->data(), nbatch * m, n, k);
        if (gp[1]) detail::mm_tn(pa, g.data(), gp[1]->data(), k, nbatch * m, n);
        return;
      }
      for (int64_t bi = 0; bi < nbatch; ++bi) {
        const double* gb = g.data() + bi * m * n;
        if (gp[0]) {
          // dA = g · Bᵀ
          detail::mm_nt(gb, pb + (b_batched ? bi * k * n : 0),
                        gp[0]->data() + (a_batched ? bi * m * k : 0), m, n, k);
        }
        if (gp[1]) {
          // dB = Aᵀ · g
          detail::mm_tn(pa + (a_batched ? bi * m * k : 0), gb,
                        gp[1]->data() + (b_batched ? bi * k * n : 0), k, m, n);
        }
      }
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Dropout (inverted, train-only).
// ---------------------------------------------------------------------------

inline Tensor dropout(const Tensor& a, double p, Mode mode, SplitMix64& rng) {
  if (p < 0.0 || p >= 1.0)
    throw config_error("dropout: p must be in [0,1), got " + std::to_string(p));
  if (mode == Mode::eval || p == 0.0) return a;
  auto an = a.node_ptr();
  std::vector<double> mask(a.data().size());
  double keep_scale = 1.0 / (1.0 - p);
  for (double& mv : mask) mv = rng.uniform() < p ? 0.0 : keep_scale;
  std::vector<double> out(a.data().size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * mask[i];
  Tensor r = detail::make_result(a.shape(), std::move(out), {an}, "dropout");
  if (r.requires_grad()) {
    r.node()->backward_fn = [mask = std::move(mask)](
                                const std::vector<double>& g,
                                const std::vector<std::vector<double>*>& gp) {
      if (!gp[0]) return;
      for (size_t i = 0; i < g.size(); ++i) (*gp[0])[i] += g[i] * mask[i];
    };
  }
  return r;
}

// ---------------------------------------------------------------------------
// Batch normalization over all leading axes, per channel (last axis).
// ---------------------------------------------------------------------------

struct BatchNormState {
  Tensor gamma;         // (C,), trainable
  Tensor beta;          // (C,), trainable
  Tensor running_mean;  // (C,), buffer
  Tensor running_var;   // (C,), buffer

  static BatchNormState init(int64_t channels) {
    BatchNormState bn;
    bn.gamma = Tensor::full({channels}, 1.0, true);
    bn.beta = Tensor::zeros({channels}, true);
    bn.running_mean = Tensor::zeros({channels});
    bn.running_var = Tensor::full({channels}, 1.0);
    return bn;
  }
};

inline Tensor batchnorm(const Tensor& x, BatchNormState& bn, Mode mode,
                        double momentum = 0.1, double eps = 1e-5) {
  int64_t c = x.shape().back();
  if (bn.gamma.numel() != c)
    throw shape_error("batchnorm: channel mismatch: input " +
                      detail::shape_str(x.shape()) + " vs gamma " +
                      detail::shape_str(bn.gamma.shape()));
  int64_t rows = x.numel() / c;
  if (mode == Mode::train) {
    Tensor xr = reshape(x, {rows, c});
    Tensor mu = mean_axis(xr, 0, true);                    // (1,C)
    Tensor xc = sub(xr, mu);
    Tensor var = mean_axis(mul(xc, xc), 0, true);          // biased, (1,C)
    Tensor xhat = div(xc, sqrt(shift(var, eps)));
    Tensor y = add(mul(xhat, bn.gamma), bn.beta);
    // Buffer update happens outside the tape.
    double unbias = rows > 1 ? static_cast<double>(rows) / (rows - 1) : 1.0;
    for (int64_t j = 0; j < c; ++j) {
      auto jj = static_cast<size_t>(j);
      bn.running_mean.data()[jj] =
          (1.0 - momentum) * bn.running_mean.data()[jj] + momentum * mu.data()[jj];
      bn.running_var.data()[jj] = (1.0 - momentum) * bn.running_var.data()[jj] +
                                  momentum * var.data()[jj] * unbias;
    }
    return reshape(y, x.shape());
  }
  // Eval: running stats are constants.
  Tensor denom = Tensor::zeros({c});
  for (int64_t j = 0; j < c; ++j)
    denom.data()[static_cast<size_t>(j)] =
        std::sqrt(bn.running_var.data()[static_cast<size_t>(j)] + eps);
  Tensor xc = sub(x, bn.running_mean);
  return add(mul(div(xc, denom), bn.gamma), bn.beta);
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checker.
// ---------------------------------------------------------------------------

// Max over all entries of all inputs of
//   |analytic - central_fd| / max(1, |central_fd|).
// f must be scalar-valued and deterministic (run nets in eval mode).
inline double grad_check(
    const std::function<Tensor(const std::vector<Tensor>&)>& f,
    std::vector<Tensor> inputs, double eps = 1e-5) {
  for (Tensor& t : inputs) t.set_requires_grad(true);

  Tensor out = f(inputs);
  if (out.numel() != 1) throw shape_error("grad_check: f must return a scalar");
  for (Tensor& t : inputs) t.zero_grad();
  out.backward();

  double worst = 0.0;
  for (Tensor& t : inputs) {
    const std::vector<double> analytic = t.grad();
    for (size_t i = 0; i < t.data().size(); ++i) {
      double saved = t.data()[i];
      t.data()[i] = saved + eps;
      double fp = f(inputs).item();
      t.data()[i] = saved - eps;
      double fm = f(inputs).item();
      t.data()[i] = saved;
      double fd = (fp - fm) / (2.0 * eps);
      double rel = std::fabs(analytic[i] - fd) / std::max(1.0, std::fabs(fd));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace poselift
