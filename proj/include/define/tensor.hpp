#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "define/detail/common.hpp"

// Reverse-mode autodiff over dense row-major f64 tensors.
//
// Ops record onto the thread's active Tape in execution order; backward()
// replays the nodes in exact reverse order, which makes gradient accumulation
// deterministic. Tapes are meant to live for one training step. When no tape
// is active (or no input requires grad) ops run without recording, which is
// the inference path.

namespace define {

class Tape;

namespace detail {

struct TensorData {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::uint64_t tape_id = 0;  // tape that produced this value, 0 = leaf
};

}  // namespace detail

class Tensor {
 public:
  Tensor() : d_(std::make_shared<detail::TensorData>()) {}

  Tensor(std::vector<std::size_t> shape, std::vector<double> values,
         bool requires_grad = false)
      : d_(std::make_shared<detail::TensorData>()) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    if (shape.empty() || n == 0 || n != values.size())
      throw std::invalid_argument(detail::str(
          "Tensor: shape ", detail::shape_str(shape), " does not hold ",
          values.size(), " values"));
    d_->shape = std::move(shape);
    d_->data = std::move(values);
    d_->requires_grad = requires_grad;
  }

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false) {
    std::size_t n = 1;
    for (std::size_t s : shape) n *= s;
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<std::size_t>& shape() const { return d_->shape; }
  std::size_t rank() const { return d_->shape.size(); }
  std::size_t size() const { return d_->data.size(); }
  std::size_t rows() const { return d_->shape.size() == 2 ? d_->shape[0] : 1; }
  std::size_t cols() const { return d_->shape.back(); }

  const std::vector<double>& values() const { return d_->data; }
  std::vector<double>& values() { return d_->data; }
  double item() const {
    if (size() != 1)
      throw std::invalid_argument(detail::str(
          "item: tensor ", detail::shape_str(shape()), " is not scalar"));
    return d_->data[0];
  }
  double at(std::size_t i) const { return d_->data.at(i); }
  double at(std::size_t r, std::size_t c) const { return d_->data.at(r * cols() + c); }
  double& at(std::size_t i) { return d_->data.at(i); }
  double& at(std::size_t r, std::size_t c) { return d_->data.at(r * cols() + c); }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }
  std::uint64_t tape_id() const { return d_->tape_id; }

  bool has_grad() const { return !d_->grad.empty(); }
  const std::vector<double>& grad() const {
    if (d_->grad.empty())
      throw std::runtime_error("grad: no gradient has been accumulated");
    return d_->grad;
  }
  std::vector<double>& ensure_grad() {
    if (d_->grad.empty()) d_->grad.assign(d_->data.size(), 0.0);
    return d_->grad;
  }
  void zero_grad() { d_->grad.clear(); }

  // Value copy detached from any tape; never requires grad.
  Tensor detach() const {
    Tensor t;
    t.d_->shape = d_->shape;
    t.d_->data = d_->data;
    return t;
  }

  std::shared_ptr<detail::TensorData> storage() const { return d_; }

 private:
  std::shared_ptr<detail::TensorData> d_;
};

class Tape {
 public:
  Tape() : prev_(tls_active()), id_(++tls_counter()) { tls_active() = this; }
  ~Tape() { tls_active() = prev_; }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() { return tls_active(); }
  std::uint64_t id() const { return id_; }
  std::size_t node_count() const { return nodes_.size(); }

  void record(std::vector<std::shared_ptr<detail::TensorData>> outs,
              std::function<void()> backward_fn) {
    nodes_.push_back({std::move(backward_fn), std::move(outs)});
  }

  // Clears stale gradients of every value produced on this tape, then replays
  // the nodes in reverse recording order. Leaf gradients are accumulated with
  // +=, so repeated calls add up.
  void run_backward(detail::TensorData& seed) {
    for (auto& node : nodes_)
      for (auto& out : node.outs) out->grad.clear();
    seed.grad.assign(seed.data.size(), 1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) it->fn();
  }

  // Disables recording while alive (evaluation / cache export path).
  struct NoGradGuard {
    NoGradGuard() : saved(tls_active()) { tls_active() = nullptr; }
    ~NoGradGuard() { tls_active() = saved; }
    Tape* saved;
  };

 private:
  struct Node {
    std::function<void()> fn;
    std::vector<std::shared_ptr<detail::TensorData>> outs;
  };

  static Tape*& tls_active() {
    thread_local Tape* active = nullptr;
    return active;
  }
  static std::uint64_t& tls_counter() {
    thread_local std::uint64_t counter = 0;
    return counter;
  }

  std::vector<Node> nodes_;
  Tape* prev_;
  std::uint64_t id_;
};

namespace detail {

inline bool recording(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active()) return false;
  for (const Tensor* t : inputs)
    if (t->requires_grad()) return true;
  return false;
}

inline void mark_output(Tensor& out, bool recorded) {
  out.set_requires_grad(recorded);
  if (recorded) out.storage()->tape_id = Tape::active()->id();
}

using EMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using EMap = Eigen::Map<EMat>;
using ECMap = Eigen::Map<const EMat>;

// C(r x n) = [+=] op(A) * op(B) with op = optional transpose. Dense kernels
// are delegated to Eigen; work is sharded over fixed 64-row blocks of C so
// results do not depend on the worker count.
inline void gemm(double* c, const double* a, const double* b, std::size_t r,
                 std::size_t k, std::size_t n, bool trans_a, bool trans_b,
                 bool accumulate) {
  ECMap am(a, trans_a ? k : r, trans_a ? r : k);
  ECMap bm(b, trans_b ? n : k, trans_b ? k : n);
  EMap cm(c, r, n);
  // Blocking depends on the shapes only, never on the worker count, so the
  // result is identical whatever DEFINE_THREADS says.
  const std::size_t block = 2.0 * r * k * n > 4e6 ? 64 : r;
  detail::parallel_blocks(r, block, [&](std::size_t lo, std::size_t hi) {
    auto cb = cm.middleRows(lo, hi - lo);
    if (!trans_a && !trans_b) {
      if (accumulate) cb.noalias() += am.middleRows(lo, hi - lo) * bm;
      else cb.noalias() = am.middleRows(lo, hi - lo) * bm;
    } else if (!trans_a && trans_b) {
      if (accumulate) cb.noalias() += am.middleRows(lo, hi - lo) * bm.transpose();
      else cb.noalias() = am.middleRows(lo, hi - lo) * bm.transpose();
    } else if (trans_a && !trans_b) {
      if (accumulate) cb.noalias() += am.middleCols(lo, hi - lo).transpose() * bm;
      else cb.noalias() = am.middleCols(lo, hi - lo).transpose() * bm;
    } else {
      if (accumulate) cb.noalias() += am.middleCols(lo, hi - lo).transpose() * bm.transpose();
      else cb.noalias() = am.middleCols(lo, hi - lo).transpose() * bm.transpose();
    }
  });
}

inline void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    throw std::invalid_argument(detail::str(
        op, ": expected a rank-2 tensor, got ", detail::shape_str(t.shape())));
}

inline void accumulate(Tensor& t, const std::vector<double>& delta) {
  auto& g = t.ensure_grad();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += delta[i];
}

}  // namespace detail

// ---- matrix products ----

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul");
  detail::require_rank2(b, "matmul");
  if (a.cols() != b.rows())
    throw std::invalid_argument(detail::str(
        "matmul: inner dimensions disagree, ", detail::shape_str(a.shape()),
        " vs ", detail::shape_str(b.shape())));
  const std::size_t r = a.rows(), k = a.cols(), n = b.cols();
  Tensor out = Tensor::zeros({r, n});
  detail::gemm(out.values().data(), a.values().data(), b.values().data(), r, k,
               n, false, false, false);
  const bool rec = detail::recording({&a, &b});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record({out.storage()}, [ac, bc, oc, r, k, n]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad().data();
      if (ac.requires_grad())  // dA = dY * B^T
        detail::gemm(ac.ensure_grad().data(), dy, bc.values().data(), r, n, k,
                     false, true, true);
      if (bc.requires_grad())  // dB = A^T * dY
        detail::gemm(bc.ensure_grad().data(), ac.values().data(), dy, k, r, n,
                     true, false, true);
    });
  }
  return out;
}

// a[r x c] * b[d x c]^T -> [r x d]; lets callers multiply against a stored
// table without materializing its transpose.
inline Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  detail::require_rank2(a, "matmul_nt");
  detail::require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols())
    throw std::invalid_argument(detail::str(
        "matmul_nt: trailing dimensions disagree, ", detail::shape_str(a.shape()),
        " vs ", detail::shape_str(b.shape())));
  const std::size_t r = a.rows(), k = a.cols(), d = b.rows();
  Tensor out = Tensor::zeros({r, d});
  detail::gemm(out.values().data(), a.values().data(), b.values().data(), r, k,
               d, false, true, false);
  const bool rec = detail::recording({&a, &b});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record({out.storage()}, [ac, bc, oc, r, k, d]() mutable {
      if (!oc.has_grad()) return;
      const double* dy = oc.grad().data();
      if (ac.requires_grad())  // dA = dY * B
        detail::gemm(ac.ensure_grad().data(), dy, bc.values().data(), r, d, k,
                     false, false, true);
      if (bc.requires_grad())  // dB = dY^T * A
        detail::gemm(bc.ensure_grad().data(), dy, ac.values().data(), d, r, k,
                     true, false, true);
    });
  }
  return out;
}

// ---- split / concat along the trailing dimension ----

inline std::vector<Tensor> split(const Tensor& x, std::size_t g) {
  if (g == 0 || x.cols() % g != 0)
    throw std::invalid_argument(detail::str(
        "split: width ", x.cols(), " is not divisible by ", g, " groups"));
  const std::size_t b = x.rows(), w = x.cols(), cw = w / g;
  std::vector<Tensor> parts;
  parts.reserve(g);
  for (std::size_t j = 0; j < g; ++j) {
    Tensor p = x.rank() == 1 ? Tensor::zeros({cw}) : Tensor::zeros({b, cw});
    for (std::size_t r = 0; r < b; ++r)
      std::copy_n(x.values().data() + r * w + j * cw, cw,
                  p.values().data() + r * cw);
    parts.push_back(std::move(p));
  }
  const bool rec = detail::recording({&x});
  if (rec) {
    std::vector<std::shared_ptr<detail::TensorData>> outs;
    for (auto& p : parts) {
      detail::mark_output(p, true);
      outs.push_back(p.storage());
    }
    Tensor xc = x;
    std::vector<Tensor> pc = parts;
    Tape::active()->record(std::move(outs), [xc, pc, b, w, cw]() mutable {
      for (std::size_t j = 0; j < pc.size(); ++j) {
        if (!pc[j].has_grad()) continue;
        auto& gx = xc.ensure_grad();
        const auto& gp = pc[j].grad();
        for (std::size_t r = 0; r < b; ++r)
          for (std::size_t c = 0; c < cw; ++c)
            gx[r * w + j * cw + c] += gp[r * cw + c];
      }
    });
  }
  return parts;
}

inline Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no parts");
  const std::size_t rank = parts[0].rank(), b = parts[0].rows();
  std::size_t w = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != rank || p.rows() != b)
      throw std::invalid_argument(detail::str(
          "concat: incompatible part shapes ", detail::shape_str(parts[0].shape()),
          " vs ", detail::shape_str(p.shape())));
    w += p.cols();
  }
  Tensor out = rank == 1 ? Tensor::zeros({w}) : Tensor::zeros({b, w});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    for (std::size_t r = 0; r < b; ++r)
      std::copy_n(p.values().data() + r * p.cols(), p.cols(),
                  out.values().data() + r * w + off);
    off += p.cols();
  }
  bool rec = false;
  if (Tape::active())
    for (const Tensor& p : parts)
      if (p.requires_grad()) rec = true;
  detail::mark_output(out, rec);
  if (rec) {
    std::vector<Tensor> pc = parts;
    Tensor oc = out;
    Tape::active()->record({out.storage()}, [pc, oc, b, w]() mutable {
      if (!oc.has_grad()) return;
      const auto& go = oc.grad();
      std::size_t off = 0;
      for (auto& p : pc) {
        const std::size_t cw = p.cols();
        if (p.requires_grad()) {
          auto& gp = p.ensure_grad();
          for (std::size_t r = 0; r < b; ++r)
            for (std::size_t c = 0; c < cw; ++c)
              gp[r * cw + c] += go[r * w + off + c];
        }
        off += cw;
      }
    });
  }
  return out;
}

// ---- row slicing / stacking (rank-2) ----

inline Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  detail::require_rank2(x, "slice_rows");
  if (start + count > x.rows())
    throw std::invalid_argument(detail::str(
        "slice_rows: rows [", start, ", ", start + count, ") out of range for ",
        detail::shape_str(x.shape())));
  const std::size_t w = x.cols();
  Tensor out = Tensor::zeros({count, w});
  std::copy_n(x.values().data() + start * w, count * w, out.values().data());
  const bool rec = detail::recording({&x});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor xc = x, oc = out;
    Tape::active()->record({out.storage()}, [xc, oc, start, count, w]() mutable {
      if (!oc.has_grad()) return;
      auto& gx = xc.ensure_grad();
      const auto& go = oc.grad();
      for (std::size_t i = 0; i < count * w; ++i) gx[start * w + i] += go[i];
    });
  }
  return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw std::invalid_argument("concat_rows: no parts");
  const std::size_t w = parts[0].cols();
  std::size_t rows = 0;
  for (const Tensor& p : parts) {
    detail::require_rank2(p, "concat_rows");
    if (p.cols() != w)
      throw std::invalid_argument(detail::str(
          "concat_rows: width mismatch ", detail::shape_str(parts[0].shape()),
          " vs ", detail::shape_str(p.shape())));
    rows += p.rows();
  }
  Tensor out = Tensor::zeros({rows, w});
  std::size_t off = 0;
  for (const Tensor& p : parts) {
    std::copy_n(p.values().data(), p.size(), out.values().data() + off);
    off += p.size();
  }
  bool rec = false;
  if (Tape::active())
    for (const Tensor& p : parts)
      if (p.requires_grad()) rec = true;
  detail::mark_output(out, rec);
  if (rec) {
    std::vector<Tensor> pc = parts;
    Tensor oc = out;
    Tape::active()->record({out.storage()}, [pc, oc]() mutable {
      if (!oc.has_grad()) return;
      const auto& go = oc.grad();
      std::size_t off = 0;
      for (auto& p : pc) {
        if (p.requires_grad()) {
          auto& gp = p.ensure_grad();
          for (std::size_t i = 0; i < p.size(); ++i) gp[i] += go[off + i];
        }
        off += p.size();
      }
    });
  }
  return out;
}

// ---- elementwise ----

namespace detail {

// Shared-shape or [B x d] + [d] broadcast over the leading batch dimension.
inline void check_add_shapes(const Tensor& a, const Tensor& b) {
  if (a.shape() == b.shape()) return;
  if (a.rank() == 2 && b.rank() == 1 && a.cols() == b.cols()) return;
  throw std::invalid_argument(detail::str(
      "add: incompatible shapes ", detail::shape_str(a.shape()), " and ",
      detail::shape_str(b.shape())));
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::check_add_shapes(a, b);
  Tensor out = Tensor::zeros(a.shape());
  const bool broadcast = a.shape() != b.shape();
  const std::size_t w = a.cols();
  for (std::size_t i = 0; i < a.size(); ++i)
    out.values()[i] = a.values()[i] + b.values()[broadcast ? i % w : i];
  const bool rec = detail::recording({&a, &b});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record({out.storage()}, [ac, bc, oc, broadcast, w]() mutable {
      if (!oc.has_grad()) return;
      const auto& go = oc.grad();
      if (ac.requires_grad()) detail::accumulate(ac, go);
      if (bc.requires_grad()) {
        auto& gb = bc.ensure_grad();
        if (!broadcast)
          for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
        else
          for (std::size_t i = 0; i < go.size(); ++i) gb[i % w] += go[i];
      }
    });
  }
  return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument(detail::str(
        "mul: shape mismatch ", detail::shape_str(a.shape()), " vs ",
        detail::shape_str(b.shape())));
  Tensor out = Tensor::zeros(a.shape());
  for (std::size_t i = 0; i < a.size(); ++i)
    out.values()[i] = a.values()[i] * b.values()[i];
  const bool rec = detail::recording({&a, &b});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor ac = a, bc = b, oc = out;
    Tape::active()->record({out.storage()}, [ac, bc, oc]() mutable {
      if (!oc.has_grad()) return;
      const auto& go = oc.grad();
      if (ac.requires_grad()) {
        auto& ga = ac.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * bc.values()[i];
      }
      if (bc.requires_grad()) {
        auto& gb = bc.ensure_grad();
        for (std::size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * ac.values()[i];
      }
    });
  }
  return out;
}

namespace detail {

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& x, Fwd fwd, Bwd dfdy_from_y) {
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out.values()[i] = fwd(x.values()[i]);
  const bool rec = recording({&x});
  mark_output(out, rec);
  if (rec) {
    Tensor xc = x, oc = out;
    Tape::active()->record({out.storage()}, [xc, oc, dfdy_from_y]() mutable {
      if (!oc.has_grad()) return;
      const auto& go = oc.grad();
      auto& gx = xc.ensure_grad();
      for (std::size_t i = 0; i < go.size(); ++i)
        gx[i] += go[i] * dfdy_from_y(oc.values()[i]);
    });
  }
  return out;
}

}  // namespace detail

inline Tensor tanh(const Tensor& x) {
  return detail::unary_op(
      x, [](double v) { return std::tanh(v); },
      [](double y) { return 1.0 - y * y; });
}

inline Tensor sigmoid(const Tensor& x) {
  return detail::unary_op(
      x,
      [](double v) {
        // evaluate on the negative branch only, no overflow either side
        return v >= 0 ? 1.0 / (1.0 + std::exp(-v))
                      : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double y) { return y * (1.0 - y); });
}

inline Tensor sum(const Tensor& x) {
  double s = 0;
  for (double v : x.values()) s += v;
  Tensor out = Tensor::scalar(s);
  const bool rec = detail::recording({&x});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor xc = x, oc = out;
    Tape::active()->record({out.storage()}, [xc, oc]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad()[0];
      auto& gx = xc.ensure_grad();
      for (double& v : gx) v += g;
    });
  }
  return out;
}

// Fixed column gather; backward scatters through the inverse permutation.
inline Tensor permute_cols(const Tensor& x, const std::vector<std::size_t>& perm) {
  const std::size_t w = x.cols(), b = x.rows();
  if (perm.size() != w)
    throw std::invalid_argument(detail::str(
        "permute_cols: permutation of size ", perm.size(),
        " does not match width ", w));
  Tensor out = Tensor::zeros(x.shape());
  for (std::size_t r = 0; r < b; ++r)
    for (std::size_t c = 0; c < w; ++c)
      out.values()[r * w + c] = x.values()[r * w + perm[c]];
  const bool rec = detail::recording({&x});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor xc = x, oc = out;
    std::vector<std::size_t> p = perm;
    Tape::active()->record({out.storage()}, [xc, oc, p, b, w]() mutable {
      if (!oc.has_grad()) return;
      const auto& go = oc.grad();
      auto& gx = xc.ensure_grad();
      for (std::size_t r = 0; r < b; ++r)
        for (std::size_t c = 0; c < w; ++c) gx[r * w + p[c]] += go[r * w + c];
    });
  }
  return out;
}

// ---- table lookup and loss ----

inline Tensor embedding_lookup(const Tensor& table, const std::vector<std::int32_t>& ids) {
  detail::require_rank2(table, "embedding_lookup");
  const std::size_t v = table.rows(), n = table.cols(), b = ids.size();
  for (std::size_t i = 0; i < b; ++i)
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw std::out_of_range(detail::str(
          "embedding_lookup: id ", ids[i], " at position ", i,
          " outside vocabulary of size ", v));
  Tensor out = Tensor::zeros({b, n});
  for (std::size_t i = 0; i < b; ++i)
    std::copy_n(table.values().data() + static_cast<std::size_t>(ids[i]) * n, n,
                out.values().data() + i * n);
  const bool rec = detail::recording({&table});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor tc = table, oc = out;
    std::vector<std::int32_t> idc = ids;
    Tape::active()->record({out.storage()}, [tc, oc, idc, n]() mutable {
      if (!oc.has_grad()) return;
      const auto& go = oc.grad();
      auto& gt = tc.ensure_grad();  // scatter-add in batch order
      for (std::size_t i = 0; i < idc.size(); ++i)
        for (std::size_t c = 0; c < n; ++c)
          gt[static_cast<std::size_t>(idc[i]) * n + c] += go[i * n + c];
    });
  }
  return out;
}

// Mean negative log-likelihood over the batch, stabilized with the row-max
// shift. Softmax probabilities are saved for the backward pass.
inline Tensor softmax_cross_entropy(const Tensor& logits,
                                    const std::vector<std::int32_t>& targets) {
  detail::require_rank2(logits, "softmax_cross_entropy");
  const std::size_t b = logits.rows(), v = logits.cols();
  if (targets.size() != b)
    throw std::invalid_argument(detail::str(
        "softmax_cross_entropy: ", targets.size(), " targets for ", b, " rows"));
  for (std::size_t i = 0; i < b; ++i)
    if (targets[i] < 0 || static_cast<std::size_t>(targets[i]) >= v)
      throw std::out_of_range(detail::str(
          "softmax_cross_entropy: target ", targets[i], " at row ", i,
          " outside [0, ", v, ")"));
  auto probs = std::make_shared<std::vector<double>>(b * v);
  double total = 0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* row = logits.values().data() + i * v;
    double mx = row[0];
    for (std::size_t c = 1; c < v; ++c) mx = std::max(mx, row[c]);
    double s = 0;
    for (std::size_t c = 0; c < v; ++c) s += std::exp(row[c] - mx);
    const double log_z = mx + std::log(s);
    for (std::size_t c = 0; c < v; ++c)
      (*probs)[i * v + c] = std::exp(row[c] - log_z);
    total += log_z - row[targets[i]];
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(b));
  const bool rec = detail::recording({&logits});
  detail::mark_output(out, rec);
  if (rec) {
    Tensor lc = logits, oc = out;
    std::vector<std::int32_t> tg = targets;
    Tape::active()->record({out.storage()}, [lc, oc, tg, probs, b, v]() mutable {
      if (!oc.has_grad()) return;
      const double g = oc.grad()[0] / static_cast<double>(b);
      auto& gl = lc.ensure_grad();
      for (std::size_t i = 0; i < b; ++i)
        for (std::size_t c = 0; c < v; ++c)
          gl[i * v + c] += g * ((*probs)[i * v + c] -
                                (static_cast<std::size_t>(tg[i]) == c ? 1.0 : 0.0));
    });
  }
  return out;
}

// ---- backward ----

inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw std::invalid_argument(detail::str(
        "backward: loss must be scalar, got ", detail::shape_str(loss.shape())));
  Tape* tape = Tape::active();
  if (!tape) throw std::invalid_argument("backward: no active tape");
  if (loss.tape_id() != tape->id())
    throw std::invalid_argument(
        "backward: loss was not produced on the active tape");
  tape->run_backward(*loss.storage());
}

}  // namespace define
