#include "spt/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace spt::ad {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

const Shape& Tensor::shape() const { return tape_->node(id_).shape; }
std::size_t Tensor::size() const { return tape_->node(id_).val.size(); }
const std::vector<double>& Tensor::values() const { return tape_->node(id_).val; }
bool Tensor::requires_grad() const { return tape_->node(id_).requires_grad; }

int Tensor::rows() const {
  const Shape& s = shape();
  if (s.size() != 2) throw std::invalid_argument("rows(): tensor is not rank 2, got " + shape_str(s));
  return s[0];
}
int Tensor::cols() const {
  const Shape& s = shape();
  if (s.size() != 2) throw std::invalid_argument("cols(): tensor is not rank 2, got " + shape_str(s));
  return s[1];
}

namespace {

[[noreturn]] void fail(const std::string& op, const std::string& why) {
  throw std::invalid_argument(op + ": " + why);
}

// Tiny row-major matrix kernels; everything in the model is small enough
// that these plain loops stay in cache.
void gemm_nn(int m, int k, int n, const double* __restrict a, const double* __restrict b,
             double* __restrict c, bool accum) {
  if (!accum) std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(m) * n);
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + static_cast<std::size_t>(p) * n;
      for (int j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

// c (+)= a * b^T, a is m x k, b is n x k
void gemm_nt(int m, int k, int n, const double* __restrict a, const double* __restrict b,
             double* __restrict c, bool accum) {
  for (int i = 0; i < m; ++i) {
    const double* ai = a + static_cast<std::size_t>(i) * k;
    double* ci = c + static_cast<std::size_t>(i) * n;
    for (int j = 0; j < n; ++j) {
      const double* bj = b + static_cast<std::size_t>(j) * k;
      double acc = 0.0;
      for (int p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] = accum ? ci[j] + acc : acc;
    }
  }
}

// c (+)= a^T * b, a is k x m, b is k x n
void gemm_tn(int m, int k, int n, const double* __restrict a, const double* __restrict b,
             double* __restrict c, bool accum) {
  if (!accum) std::memset(c, 0, sizeof(double) * static_cast<std::size_t>(m) * n);
  for (int p = 0; p < k; ++p) {
    const double* ap = a + static_cast<std::size_t>(p) * m;
    const double* bp = b + static_cast<std::size_t>(p) * n;
    for (int i = 0; i < m; ++i) {
      const double api = ap[i];
      double* ci = c + static_cast<std::size_t>(i) * n;
      for (int j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

enum class Bc { Same, ScalarA, ScalarB, RowA, RowB };

bool is_row_of(const Shape& row, const Shape& mat) {
  if (mat.size() != 2) return false;
  if (row.size() == 1 && row[0] == mat[1]) return true;
  if (row.size() == 2 && row[0] == 1 && row[1] == mat[1]) return true;
  return false;
}

Bc classify(const std::string& op, const Shape& a, const Shape& b) {
  if (a == b) return Bc::Same;
  if (numel(b) == 1) return Bc::ScalarB;
  if (numel(a) == 1) return Bc::ScalarA;
  if (is_row_of(b, a)) return Bc::RowB;
  if (is_row_of(a, b)) return Bc::RowA;
  fail(op, "shapes " + shape_str(a) + " and " + shape_str(b) +
               " do not broadcast (only scalar-tensor and row-over-matrix are supported)");
}

}  // namespace

Tensor Tape::check(Tensor t) const {
  if (!t.valid() || t.tape() != this || t.id() < 0 || t.id() >= size())
    throw std::invalid_argument("tensor does not belong to this tape");
  return t;
}

int Tape::push(Shape shape, bool requires_grad) {
  Node n;
  n.shape = std::move(shape);
  n.val.resize(numel(n.shape));
  n.requires_grad = requires_grad;
  if (requires_grad) n.grad.assign(n.val.size(), 0.0);
  nodes_.push_back(std::move(n));
  return size() - 1;
}

Tensor Tape::leaf(const Shape& shape, std::span<const double> values, bool requires_grad) {
  if (values.size() != numel(shape))
    fail("leaf", "value count " + std::to_string(values.size()) + " does not match shape " + shape_str(shape));
  int id = push(shape, requires_grad);
  std::copy(values.begin(), values.end(), nodes_[id].val.begin());
  return Tensor(this, id);
}

Tensor Tape::constant(const Shape& shape, std::span<const double> values) {
  return leaf(shape, values, false);
}

Tensor Tape::scalar(double v) {
  int id = push(Shape{1}, false);
  nodes_[id].val[0] = v;
  return Tensor(this, id);
}

Tensor Tape::zeros(const Shape& shape) {
  int id = push(shape, false);
  return Tensor(this, id);
}

Tensor Tape::add(Tensor a, Tensor b) {
  check(a); check(b);
  const Bc bc = classify("add", a.shape(), b.shape());
  const bool swap = (bc == Bc::ScalarA || bc == Bc::RowA);
  const Tensor big = swap ? b : a, small = swap ? a : b;
  const bool row = (bc == Bc::RowA || bc == Bc::RowB);
  const bool same = (bc == Bc::Same);
  const int id = push(big.shape(), a.requires_grad() || b.requires_grad());
  Node& out = nodes_[id];
  const auto& bv = node(big.id()).val;
  const auto& sv = node(small.id()).val;
  const int c = same ? 0 : (row ? big.shape().back() : 1);
  for (std::size_t i = 0; i < out.val.size(); ++i)
    out.val[i] = bv[i] + (same ? sv[i] : (row ? sv[i % c] : sv[0]));
  if (out.requires_grad) {
    const int oid = id, bid = big.id(), sid = small.id();
    out.back = [oid, bid, sid, same, row, c](Tape& t) {
      const auto& g = t.node(oid).grad;
      if (t.node(bid).requires_grad) {
        auto& gb = t.node(bid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
      }
      if (t.node(sid).requires_grad) {
        auto& gs = t.node(sid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) gs[same ? i : (row ? i % c : 0)] += g[i];
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::sub(Tensor a, Tensor b) {
  check(a); check(b);
  const Bc bc = classify("sub", a.shape(), b.shape());
  // Copy, not reference: push below may reallocate the node storage this aliases.
  const Shape oshape = (bc == Bc::ScalarA || bc == Bc::RowA) ? b.shape() : a.shape();
  const int id = push(oshape, a.requires_grad() || b.requires_grad());
  Node& out = nodes_[id];
  const auto& av = node(a.id()).val;
  const auto& bv = node(b.id()).val;
  const int c = oshape.size() ? oshape.back() : 1;
  auto ai = [&](std::size_t i) { return bc == Bc::ScalarA ? 0 : bc == Bc::RowA ? i % c : i; };
  auto bi = [&](std::size_t i) { return bc == Bc::ScalarB ? 0 : bc == Bc::RowB ? i % c : i; };
  for (std::size_t i = 0; i < out.val.size(); ++i) out.val[i] = av[ai(i)] - bv[bi(i)];
  if (out.requires_grad) {
    const int oid = id, aid = a.id(), bid = b.id();
    const int cc = c;
    out.back = [oid, aid, bid, bc, cc](Tape& t) {
      const auto& g = t.node(oid).grad;
      auto ai = [&](std::size_t i) { return bc == Bc::ScalarA ? 0 : bc == Bc::RowA ? i % cc : i; };
      auto bi = [&](std::size_t i) { return bc == Bc::ScalarB ? 0 : bc == Bc::RowB ? i % cc : i; };
      if (t.node(aid).requires_grad) {
        auto& ga = t.node(aid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[ai(i)] += g[i];
      }
      if (t.node(bid).requires_grad) {
        auto& gb = t.node(bid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[bi(i)] -= g[i];
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::mul(Tensor a, Tensor b) {
  check(a); check(b);
  const Bc bc = classify("mul", a.shape(), b.shape());
  // Copy, not reference: push below may reallocate the node storage this aliases.
  const Shape oshape = (bc == Bc::ScalarA || bc == Bc::RowA) ? b.shape() : a.shape();
  const int id = push(oshape, a.requires_grad() || b.requires_grad());
  Node& out = nodes_[id];
  const auto& av = node(a.id()).val;
  const auto& bv = node(b.id()).val;
  const int c = oshape.size() ? oshape.back() : 1;
  auto ai = [&](std::size_t i) { return bc == Bc::ScalarA ? 0 : bc == Bc::RowA ? i % c : i; };
  auto bi = [&](std::size_t i) { return bc == Bc::ScalarB ? 0 : bc == Bc::RowB ? i % c : i; };
  for (std::size_t i = 0; i < out.val.size(); ++i) out.val[i] = av[ai(i)] * bv[bi(i)];
  if (out.requires_grad) {
    const int oid = id, aid = a.id(), bid = b.id();
    const int cc = c;
    out.back = [oid, aid, bid, bc, cc](Tape& t) {
      const auto& g = t.node(oid).grad;
      const auto& av = t.node(aid).val;
      const auto& bv = t.node(bid).val;
      auto ai = [&](std::size_t i) { return bc == Bc::ScalarA ? 0 : bc == Bc::RowA ? i % cc : i; };
      auto bi = [&](std::size_t i) { return bc == Bc::ScalarB ? 0 : bc == Bc::RowB ? i % cc : i; };
      if (t.node(aid).requires_grad) {
        auto& ga = t.node(aid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[ai(i)] += g[i] * bv[bi(i)];
      }
      if (t.node(bid).requires_grad) {
        auto& gb = t.node(bid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) gb[bi(i)] += g[i] * av[ai(i)];
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::div(Tensor a, Tensor b) {
  check(a); check(b);
  const Bc bc = classify("div", a.shape(), b.shape());
  // Copy, not reference: push below may reallocate the node storage this aliases.
  const Shape oshape = (bc == Bc::ScalarA || bc == Bc::RowA) ? b.shape() : a.shape();
  const int id = push(oshape, a.requires_grad() || b.requires_grad());
  Node& out = nodes_[id];
  const auto& av = node(a.id()).val;
  const auto& bv = node(b.id()).val;
  const int c = oshape.size() ? oshape.back() : 1;
  auto ai = [&](std::size_t i) { return bc == Bc::ScalarA ? 0 : bc == Bc::RowA ? i % c : i; };
  auto bi = [&](std::size_t i) { return bc == Bc::ScalarB ? 0 : bc == Bc::RowB ? i % c : i; };
  for (std::size_t i = 0; i < out.val.size(); ++i) out.val[i] = av[ai(i)] / bv[bi(i)];
  if (out.requires_grad) {
    const int oid = id, aid = a.id(), bid = b.id();
    const int cc = c;
    out.back = [oid, aid, bid, bc, cc](Tape& t) {
      const auto& g = t.node(oid).grad;
      const auto& av = t.node(aid).val;
      const auto& bv = t.node(bid).val;
      auto ai = [&](std::size_t i) { return bc == Bc::ScalarA ? 0 : bc == Bc::RowA ? i % cc : i; };
      auto bi = [&](std::size_t i) { return bc == Bc::ScalarB ? 0 : bc == Bc::RowB ? i % cc : i; };
      if (t.node(aid).requires_grad) {
        auto& ga = t.node(aid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) ga[ai(i)] += g[i] / bv[bi(i)];
      }
      if (t.node(bid).requires_grad) {
        auto& gb = t.node(bid).grad;
        for (std::size_t i = 0; i < g.size(); ++i) {
          const double bvv = bv[bi(i)];
          gb[bi(i)] -= g[i] * av[ai(i)] / (bvv * bvv);
        }
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::matmul(Tensor a, Tensor b) {
  check(a); check(b);
  if (a.shape().size() != 2 || b.shape().size() != 2)
    fail("matmul", "needs rank-2 operands, got " + shape_str(a.shape()) + " and " + shape_str(b.shape()));
  const int m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k)
    fail("matmul", "inner dimensions disagree: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const int id = push(Shape{m, n}, a.requires_grad() || b.requires_grad());
  gemm_nn(m, k, n, node(a.id()).val.data(), node(b.id()).val.data(), nodes_[id].val.data(), false);
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id(), bid = b.id();
    nodes_[id].back = [oid, aid, bid, m, k, n](Tape& t) {
      const double* g = t.node(oid).grad.data();
      if (t.node(aid).requires_grad)
        gemm_nt(m, n, k, g, t.node(bid).val.data(), t.node(aid).grad.data(), true);
      if (t.node(bid).requires_grad)
        gemm_tn(k, m, n, t.node(aid).val.data(), g, t.node(bid).grad.data(), true);
    };
  }
  return Tensor(this, id);
}

Tensor Tape::transpose(Tensor a) {
  check(a);
  if (a.shape().size() != 2) fail("transpose", "needs rank 2, got " + shape_str(a.shape()));
  const int r = a.rows(), c = a.cols();
  const int id = push(Shape{c, r}, a.requires_grad());
  const auto& av = node(a.id()).val;
  auto& ov = nodes_[id].val;
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) ov[static_cast<std::size_t>(j) * r + i] = av[static_cast<std::size_t>(i) * c + j];
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid, r, c](Tape& t) {
      const auto& g = t.node(oid).grad;
      auto& ga = t.node(aid).grad;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j) ga[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(j) * r + i];
    };
  }
  return Tensor(this, id);
}

Tensor Tape::sigmoid(Tensor a) {
  check(a);
  const int id = push(a.shape(), a.requires_grad());
  const auto& av = node(a.id()).val;
  auto& ov = nodes_[id].val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = 1.0 / (1.0 + std::exp(-av[i]));
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid](Tape& t) {
      const auto& g = t.node(oid).grad;
      const auto& y = t.node(oid).val;
      auto& ga = t.node(aid).grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
    };
  }
  return Tensor(this, id);
}

Tensor Tape::relu(Tensor a) {
  check(a);
  const int id = push(a.shape(), a.requires_grad());
  const auto& av = node(a.id()).val;
  auto& ov = nodes_[id].val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid](Tape& t) {
      const auto& g = t.node(oid).grad;
      const auto& x = t.node(aid).val;
      auto& ga = t.node(aid).grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        if (x[i] > 0.0) ga[i] += g[i];
    };
  }
  return Tensor(this, id);
}

Tensor Tape::tanh(Tensor a) {
  check(a);
  const int id = push(a.shape(), a.requires_grad());
  const auto& av = node(a.id()).val;
  auto& ov = nodes_[id].val;
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::tanh(av[i]);
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid](Tape& t) {
      const auto& g = t.node(oid).grad;
      const auto& y = t.node(oid).val;
      auto& ga = t.node(aid).grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * (1.0 - y[i] * y[i]);
    };
  }
  return Tensor(this, id);
}

Tensor Tape::softmax_rows(Tensor a) {
  check(a);
  if (a.shape().size() < 2) fail("softmax_rows", "needs rank >= 2, got " + shape_str(a.shape()));
  const int c = a.shape().back();
  const int m = static_cast<int>(numel(a.shape())) / c;
  const int id = push(a.shape(), a.requires_grad());
  const auto& av = node(a.id()).val;
  auto& ov = nodes_[id].val;
  for (int r = 0; r < m; ++r) {
    const double* x = av.data() + static_cast<std::size_t>(r) * c;
    double* y = ov.data() + static_cast<std::size_t>(r) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) {
      y[j] = std::exp(x[j] - mx);
      z += y[j];
    }
    for (int j = 0; j < c; ++j) y[j] /= z;
  }
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid, m, c](Tape& t) {
      const auto& g = t.node(oid).grad;
      const auto& y = t.node(oid).val;
      auto& ga = t.node(aid).grad;
      for (int r = 0; r < m; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += g[off + j] * y[off + j];
        for (int j = 0; j < c; ++j) ga[off + j] += y[off + j] * (g[off + j] - dot);
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::layer_norm(Tensor a, Tensor gain, Tensor bias, double eps) {
  check(a); check(gain); check(bias);
  if (a.shape().size() < 2) fail("layer_norm", "needs rank >= 2, got " + shape_str(a.shape()));
  const int c = a.shape().back();
  const int m = static_cast<int>(numel(a.shape())) / c;
  if (static_cast<int>(numel(gain.shape())) != c || static_cast<int>(numel(bias.shape())) != c)
    fail("layer_norm", "gain/bias must have " + std::to_string(c) + " entries");
  const bool rg = a.requires_grad() || gain.requires_grad() || bias.requires_grad();
  const int id = push(a.shape(), rg);
  const auto& av = node(a.id()).val;
  const auto& gv = node(gain.id()).val;
  const auto& bv = node(bias.id()).val;
  auto& ov = nodes_[id].val;
  for (int r = 0; r < m; ++r) {
    const double* x = av.data() + static_cast<std::size_t>(r) * c;
    double* y = ov.data() + static_cast<std::size_t>(r) * c;
    double mu = 0.0;
    for (int j = 0; j < c; ++j) mu += x[j];
    mu /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) var += (x[j] - mu) * (x[j] - mu);
    var /= c;
    const double inv = 1.0 / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) y[j] = (x[j] - mu) * inv * gv[j] + bv[j];
  }
  if (rg) {
    const int oid = id, aid = a.id(), gid = gain.id(), bid = bias.id();
    nodes_[id].back = [oid, aid, gid, bid, m, c, eps](Tape& t) {
      const auto& g = t.node(oid).grad;
      const auto& x = t.node(aid).val;
      const auto& gv = t.node(gid).val;
      for (int r = 0; r < m; ++r) {
        const std::size_t off = static_cast<std::size_t>(r) * c;
        double mu = 0.0;
        for (int j = 0; j < c; ++j) mu += x[off + j];
        mu /= c;
        double var = 0.0;
        for (int j = 0; j < c; ++j) var += (x[off + j] - mu) * (x[off + j] - mu);
        var /= c;
        const double inv = 1.0 / std::sqrt(var + eps);
        if (t.node(gid).requires_grad || t.node(bid).requires_grad) {
          for (int j = 0; j < c; ++j) {
            const double xh = (x[off + j] - mu) * inv;
            if (t.node(gid).requires_grad) t.node(gid).grad[j] += g[off + j] * xh;
            if (t.node(bid).requires_grad) t.node(bid).grad[j] += g[off + j];
          }
        }
        if (t.node(aid).requires_grad) {
          double mean_d = 0.0, mean_dxh = 0.0;
          for (int j = 0; j < c; ++j) {
            const double d = g[off + j] * gv[j];
            const double xh = (x[off + j] - mu) * inv;
            mean_d += d;
            mean_dxh += d * xh;
          }
          mean_d /= c;
          mean_dxh /= c;
          auto& ga = t.node(aid).grad;
          for (int j = 0; j < c; ++j) {
            const double d = g[off + j] * gv[j];
            const double xh = (x[off + j] - mu) * inv;
            ga[off + j] += inv * (d - mean_d - xh * mean_dxh);
          }
        }
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::detach(Tensor a) {
  check(a);
  const int id = push(a.shape(), false);
  nodes_[id].val = node(a.id()).val;
  return Tensor(this, id);
}

Tensor Tape::sum_all(Tensor a) {
  check(a);
  const int id = push(Shape{1}, a.requires_grad());
  double s = 0.0;
  for (double v : node(a.id()).val) s += v;
  nodes_[id].val[0] = s;
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid](Tape& t) {
      const double g = t.node(oid).grad[0];
      auto& ga = t.node(aid).grad;
      for (double& v : ga) v += g;
    };
  }
  return Tensor(this, id);
}

Tensor Tape::mean_all(Tensor a) {
  check(a);
  const double n = static_cast<double>(a.size());
  const int id = push(Shape{1}, a.requires_grad());
  double s = 0.0;
  for (double v : node(a.id()).val) s += v;
  nodes_[id].val[0] = s / n;
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid, n](Tape& t) {
      const double g = t.node(oid).grad[0] / n;
      auto& ga = t.node(aid).grad;
      for (double& v : ga) v += g;
    };
  }
  return Tensor(this, id);
}

Tensor Tape::slice_rows(Tensor a, int r0, int r1) {
  check(a);
  const int r = a.rows(), c = a.cols();
  if (r0 < 0 || r1 > r || r0 >= r1) fail("slice_rows", "bad range [" + std::to_string(r0) + "," + std::to_string(r1) + ") for " + shape_str(a.shape()));
  const int id = push(Shape{r1 - r0, c}, a.requires_grad());
  const auto& av = node(a.id()).val;
  std::copy(av.begin() + static_cast<std::size_t>(r0) * c, av.begin() + static_cast<std::size_t>(r1) * c,
            nodes_[id].val.begin());
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid, r0, c](Tape& t) {
      const auto& g = t.node(oid).grad;
      auto& ga = t.node(aid).grad;
      for (std::size_t i = 0; i < g.size(); ++i) ga[static_cast<std::size_t>(r0) * c + i] += g[i];
    };
  }
  return Tensor(this, id);
}

Tensor Tape::slice_cols(Tensor a, int c0, int c1) {
  check(a);
  const int r = a.rows(), c = a.cols();
  if (c0 < 0 || c1 > c || c0 >= c1) fail("slice_cols", "bad range [" + std::to_string(c0) + "," + std::to_string(c1) + ") for " + shape_str(a.shape()));
  const int w = c1 - c0;
  const int id = push(Shape{r, w}, a.requires_grad());
  const auto& av = node(a.id()).val;
  auto& ov = nodes_[id].val;
  for (int i = 0; i < r; ++i)
    std::copy(av.begin() + static_cast<std::size_t>(i) * c + c0, av.begin() + static_cast<std::size_t>(i) * c + c1,
              ov.begin() + static_cast<std::size_t>(i) * w);
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid, r, c, c0, w](Tape& t) {
      const auto& g = t.node(oid).grad;
      auto& ga = t.node(aid).grad;
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < w; ++j) ga[static_cast<std::size_t>(i) * c + c0 + j] += g[static_cast<std::size_t>(i) * w + j];
    };
  }
  return Tensor(this, id);
}

Tensor Tape::concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_rows", "no parts");
  int rows = 0;
  const int c = check(parts[0]).cols();
  bool rg = false;
  for (Tensor p : parts) {
    check(p);
    if (p.cols() != c) fail("concat_rows", "column mismatch");
    rows += p.rows();
    rg = rg || p.requires_grad();
  }
  const int id = push(Shape{rows, c}, rg);
  auto& ov = nodes_[id].val;
  std::size_t off = 0;
  std::vector<int> ids;
  std::vector<int> offsets;
  for (Tensor p : parts) {
    const auto& pv = node(p.id()).val;
    std::copy(pv.begin(), pv.end(), ov.begin() + off);
    ids.push_back(p.id());
    offsets.push_back(static_cast<int>(off));
    off += pv.size();
  }
  if (rg) {
    const int oid = id;
    nodes_[id].back = [oid, ids, offsets](Tape& t) {
      const auto& g = t.node(oid).grad;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        Node& p = t.node(ids[k]);
        if (!p.requires_grad) continue;
        const std::size_t o = static_cast<std::size_t>(offsets[k]);
        for (std::size_t i = 0; i < p.grad.size(); ++i) p.grad[i] += g[o + i];
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) fail("concat_cols", "no parts");
  const int r = check(parts[0]).rows();
  int cols = 0;
  bool rg = false;
  for (Tensor p : parts) {
    check(p);
    if (p.rows() != r) fail("concat_cols", "row mismatch");
    cols += p.cols();
    rg = rg || p.requires_grad();
  }
  const int id = push(Shape{r, cols}, rg);
  auto& ov = nodes_[id].val;
  std::vector<int> ids, widths, starts;
  int start = 0;
  for (Tensor p : parts) {
    const int w = p.cols();
    const auto& pv = node(p.id()).val;
    for (int i = 0; i < r; ++i)
      std::copy(pv.begin() + static_cast<std::size_t>(i) * w, pv.begin() + static_cast<std::size_t>(i + 1) * w,
                ov.begin() + static_cast<std::size_t>(i) * cols + start);
    ids.push_back(p.id());
    widths.push_back(w);
    starts.push_back(start);
    start += w;
  }
  if (rg) {
    const int oid = id;
    nodes_[id].back = [oid, ids, widths, starts, r, cols](Tape& t) {
      const auto& g = t.node(oid).grad;
      for (std::size_t k = 0; k < ids.size(); ++k) {
        Node& p = t.node(ids[k]);
        if (!p.requires_grad) continue;
        const int w = widths[k], s = starts[k];
        for (int i = 0; i < r; ++i)
          for (int j = 0; j < w; ++j)
            p.grad[static_cast<std::size_t>(i) * w + j] += g[static_cast<std::size_t>(i) * cols + s + j];
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::embedding(Tensor table, std::span<const int> ids) {
  check(table);
  const int v = table.rows(), c = table.cols();
  for (int i : ids)
    if (i < 0 || i >= v)
      throw std::out_of_range("embedding: id " + std::to_string(i) + " out of range for vocab " + std::to_string(v));
  const int n = static_cast<int>(ids.size());
  const int id = push(Shape{n, c}, table.requires_grad());
  const auto& tv = node(table.id()).val;
  auto& ov = nodes_[id].val;
  for (int i = 0; i < n; ++i)
    std::copy(tv.begin() + static_cast<std::size_t>(ids[i]) * c, tv.begin() + static_cast<std::size_t>(ids[i] + 1) * c,
              ov.begin() + static_cast<std::size_t>(i) * c);
  if (nodes_[id].requires_grad) {
    const int oid = id, tid = table.id();
    std::vector<int> idv(ids.begin(), ids.end());
    nodes_[id].back = [oid, tid, idv, c](Tape& t) {
      const auto& g = t.node(oid).grad;
      auto& gt = t.node(tid).grad;
      for (std::size_t i = 0; i < idv.size(); ++i)
        for (int j = 0; j < c; ++j) gt[static_cast<std::size_t>(idv[i]) * c + j] += g[i * c + j];
    };
  }
  return Tensor(this, id);
}

Tensor Tape::segment_mean_rows(Tensor a, const std::vector<int>& sizes) {
  check(a);
  const int r = a.rows(), c = a.cols();
  int total = 0;
  for (int s : sizes) {
    if (s <= 0) fail("segment_mean_rows", "segment sizes must be positive");
    total += s;
  }
  if (total != r) fail("segment_mean_rows", "segment sizes sum to " + std::to_string(total) + ", rows are " + std::to_string(r));
  const int l = static_cast<int>(sizes.size());
  const int id = push(Shape{l, c}, a.requires_grad());
  const auto& av = node(a.id()).val;
  auto& ov = nodes_[id].val;
  int row = 0;
  for (int k = 0; k < l; ++k) {
    for (int i = 0; i < sizes[k]; ++i, ++row)
      for (int j = 0; j < c; ++j) ov[static_cast<std::size_t>(k) * c + j] += av[static_cast<std::size_t>(row) * c + j];
    for (int j = 0; j < c; ++j) ov[static_cast<std::size_t>(k) * c + j] /= sizes[k];
  }
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id();
    nodes_[id].back = [oid, aid, sizes, c](Tape& t) {
      const auto& g = t.node(oid).grad;
      auto& ga = t.node(aid).grad;
      int row = 0;
      for (std::size_t k = 0; k < sizes.size(); ++k) {
        const double inv = 1.0 / sizes[k];
        for (int i = 0; i < sizes[k]; ++i, ++row)
          for (int j = 0; j < c; ++j) ga[static_cast<std::size_t>(row) * c + j] += g[k * c + j] * inv;
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::kron(Tensor a, Tensor b) {
  check(a); check(b);
  const int n = a.rows(), m = a.cols(), p = b.rows(), q = b.cols();
  const int id = push(Shape{n * p, m * q}, a.requires_grad() || b.requires_grad());
  const auto& av = node(a.id()).val;
  const auto& bv = node(b.id()).val;
  auto& ov = nodes_[id].val;
  const int oc = m * q;
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < m; ++j) {
      const double aij = av[static_cast<std::size_t>(i) * m + j];
      for (int r = 0; r < p; ++r)
        for (int s = 0; s < q; ++s)
          ov[static_cast<std::size_t>(i * p + r) * oc + (j * q + s)] = aij * bv[static_cast<std::size_t>(r) * q + s];
    }
  if (nodes_[id].requires_grad) {
    const int oid = id, aid = a.id(), bid = b.id();
    nodes_[id].back = [oid, aid, bid, n, m, p, q](Tape& t) {
      const auto& g = t.node(oid).grad;
      const auto& av = t.node(aid).val;
      const auto& bv = t.node(bid).val;
      const int oc = m * q;
      if (t.node(aid).requires_grad) {
        auto& ga = t.node(aid).grad;
        for (int i = 0; i < n; ++i)
          for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int r = 0; r < p; ++r)
              for (int s = 0; s < q; ++s)
                acc += g[static_cast<std::size_t>(i * p + r) * oc + (j * q + s)] * bv[static_cast<std::size_t>(r) * q + s];
            ga[static_cast<std::size_t>(i) * m + j] += acc;
          }
      }
      if (t.node(bid).requires_grad) {
        auto& gb = t.node(bid).grad;
        for (int r = 0; r < p; ++r)
          for (int s = 0; s < q; ++s) {
            double acc = 0.0;
            for (int i = 0; i < n; ++i)
              for (int j = 0; j < m; ++j)
                acc += g[static_cast<std::size_t>(i * p + r) * oc + (j * q + s)] * av[static_cast<std::size_t>(i) * m + j];
            gb[static_cast<std::size_t>(r) * q + s] += acc;
          }
      }
    };
  }
  return Tensor(this, id);
}

Tensor Tape::cross_entropy_mean(Tensor logits, std::span<const int> labels) {
  check(logits);
  const int b = logits.rows(), c = logits.cols();
  if (static_cast<int>(labels.size()) != b)
    fail("cross_entropy_mean", "batch " + std::to_string(b) + " vs " + std::to_string(labels.size()) + " labels");
  for (int y : labels)
    if (y < 0 || y >= c) fail("cross_entropy_mean", "label out of range");
  const int id = push(Shape{1}, logits.requires_grad());
  const auto& lv = node(logits.id()).val;
  double loss = 0.0;
  for (int r = 0; r < b; ++r) {
    const double* x = lv.data() + static_cast<std::size_t>(r) * c;
    double mx = x[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
    double z = 0.0;
    for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
    loss += mx + std::log(z) - x[labels[r]];
  }
  nodes_[id].val[0] = loss / b;
  if (nodes_[id].requires_grad) {
    const int oid = id, lid = logits.id();
    std::vector<int> lab(labels.begin(), labels.end());
    nodes_[id].back = [oid, lid, lab, b, c](Tape& t) {
      const double g = t.node(oid).grad[0] / b;
      const auto& lv = t.node(lid).val;
      auto& gl = t.node(lid).grad;
      for (int r = 0; r < b; ++r) {
        const double* x = lv.data() + static_cast<std::size_t>(r) * c;
        double mx = x[0];
        for (int j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (int j = 0; j < c; ++j) z += std::exp(x[j] - mx);
        for (int j = 0; j < c; ++j) {
          const double p = std::exp(x[j] - mx) / z;
          gl[static_cast<std::size_t>(r) * c + j] += g * (p - (j == lab[r] ? 1.0 : 0.0));
        }
      }
    };
  }
  return Tensor(this, id);
}

void Tape::backward(Tensor loss) {
  check(loss);
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  for (Node& n : nodes_)
    std::fill(n.grad.begin(), n.grad.end(), 0.0);
  if (!loss.requires_grad()) return;
  nodes_[loss.id()].grad[0] = 1.0;
  for (int i = loss.id(); i >= 0; --i)
    if (nodes_[i].back) nodes_[i].back(*this);
}

std::vector<double> Tape::grad(Tensor t) const {
  check(t);
  const Node& n = node(t.id());
  if (!n.requires_grad) return std::vector<double>(n.val.size(), 0.0);
  return n.grad;
}

std::span<const double> Tape::grad_view(Tensor t) const {
  check(t);
  const Node& n = node(t.id());
  if (!n.requires_grad) return {};
  return n.grad;
}

Tensor mse_all(Tape& t, Tensor a, Tensor b) {
  if (a.shape() != b.shape())
    throw std::invalid_argument("mse_all: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  Tensor d = t.sub(a, b);
  return t.mean_all(t.mul(d, d));
}

Tensor affine(Tape& t, Tensor x, Tensor w, Tensor b) { return t.add(t.matmul(x, w), b); }

}  // namespace spt::ad
