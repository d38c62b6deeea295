#include "dipt/autograd.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "dipt/error.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
namespace {
// Graph tensors are allocated and released at a high rate; keep them on the
// heap instead of paying an mmap/munmap round trip per large buffer.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 32 << 20);
  mallopt(M_TRIM_THRESHOLD, 512 << 20);
  return true;
}();
}  // namespace
#endif

namespace dipt::nn {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;
using StridedMap = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedMap = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;

MatMap as_mat(Tensor& t) { return MatMap(t.data.data(), t.rows, t.cols); }
CMatMap as_mat(const Tensor& t) { return CMatMap(t.data.data(), t.rows, t.cols); }

Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  bool needs = false;
  for (const auto& in : inputs) needs = needs || in.requires_grad();
  if (needs) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (auto& in : inputs) node->inputs.push_back(in.shared());
    node->backward_fn = std::move(backward);
  }
  return Var(std::move(node));
}

// Gradient buffer of input i, or nullptr when that input is frozen.
Tensor* input_grad(Node& self, std::size_t i) {
  Node& in = *self.inputs[i];
  if (!in.requires_grad) return nullptr;
  in.ensure_grad();
  return &in.grad;
}

void require_same_shape(const Var& a, const Var& b, const char* op) {
  if (!a.value().same_shape(b.value())) {
    throw ShapeError(std::string(op) + ": shape mismatch " + a.value().shape_str() + " vs " +
                     b.value().shape_str());
  }
}

}  // namespace

Tensor::Tensor(int r, int c, double fill)
    : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {}

Tensor::Tensor(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
  if (data.size() != static_cast<std::size_t>(r) * static_cast<std::size_t>(c)) {
    throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match " +
                     shape_str());
  }
}

std::string Tensor::shape_str() const {
  std::ostringstream os;
  os << "[" << rows << "x" << cols << "]";
  return os.str();
}

void Node::ensure_grad() {
  if (grad.rows != value.rows || grad.cols != value.cols) grad = Tensor(value.rows, value.cols);
}

const Tensor& Var::value() const { return node_->value; }
Tensor& Var::mutable_value() { return node_->value; }
const Tensor& Var::grad() const {
  node_->ensure_grad();
  return node_->grad;
}
Tensor& Var::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}
bool Var::requires_grad() const { return node_ && node_->requires_grad; }

double Var::item() const {
  if (value().size() != 1) throw ShapeError("item() on tensor of shape " + value().shape_str());
  return value().data[0];
}

void Var::zero_grad() {
  node_->ensure_grad();
  std::fill(node_->grad.data.begin(), node_->grad.data.end(), 0.0);
}

void Var::backward() {
  if (!requires_grad()) return;
  // Iterative post-order DFS yields a topological order of the graph.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{node_.get(), 0}};
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      Node* child = n->inputs[next++].get();
      if (child->requires_grad && !visited.count(child)) {
        visited.insert(child);
        stack.emplace_back(child, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  node_->ensure_grad();
  for (double& g : node_->grad.data) g = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
}

Var constant(Tensor t) {
  auto node = std::make_shared<Node>();
  node->value = std::move(t);
  return Var(std::move(node));
}

Var parameter(Tensor t) {
  auto node = std::make_shared<Node>();
  node->value = std::move(t);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var matmul(const Var& a, const Var& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: " + a.value().shape_str() + " x " + b.value().shape_str());
  }
  Tensor out(a.rows(), b.cols());
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value());
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* ga = input_grad(self, 0)) as_mat(*ga).noalias() += as_mat(self.grad) * as_mat(bv).transpose();
    if (Tensor* gb = input_grad(self, 1)) as_mat(*gb).noalias() += as_mat(av).transpose() * as_mat(self.grad);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: " + a.value().shape_str() + " x " + b.value().shape_str() + "^T");
  }
  Tensor out(a.rows(), b.rows());
  as_mat(out).noalias() = as_mat(a.value()) * as_mat(b.value()).transpose();
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* ga = input_grad(self, 0)) as_mat(*ga).noalias() += as_mat(self.grad) * as_mat(bv);
    if (Tensor* gb = input_grad(self, 1)) as_mat(*gb).noalias() += as_mat(self.grad).transpose() * as_mat(av);
  });
}

Var transpose(const Var& a) {
  Tensor out(a.cols(), a.rows());
  as_mat(out) = as_mat(a.value()).transpose();
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* ga = input_grad(self, 0)) as_mat(*ga) += as_mat(self.grad).transpose();
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a, b, "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] += b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    for (std::size_t k = 0; k < 2; ++k) {
      if (Tensor* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
      }
    }
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a, b, "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] -= b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    }
    if (Tensor* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] -= self.grad.data[i];
    }
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a, b, "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data[i] *= b.value().data[i];
  return make_result(std::move(out), {a, b}, [](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * bv.data[i];
    }
    if (Tensor* g = input_grad(self, 1)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i] * av.data[i];
    }
  });
}

Var scale(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v *= s;
  return make_result(std::move(out), {a}, [s](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += s * self.grad.data[i];
    }
  });
}

Var add_scalar(const Var& a, double s) {
  Tensor out = a.value();
  for (double& v : out.data) v += s;
  return make_result(std::move(out), {a}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (std::size_t i = 0; i < g->size(); ++i) g->data[i] += self.grad.data[i];
    }
  });
}

Var add_broadcast_rows(const Var& x, const Var& p) {
  if (p.cols() != x.cols() || p.rows() == 0 || x.rows() % p.rows() != 0) {
    throw ShapeError("add_broadcast_rows: " + x.value().shape_str() + " + " + p.value().shape_str());
  }
  Tensor out = x.value();
  const int pr = p.rows();
  for (int r = 0; r < out.rows; ++r) {
    auto dst = out.row(r);
    auto src = p.value().row(r % pr);
    for (int c = 0; c < out.cols; ++c) dst[c] += src[c];
  }
  return make_result(std::move(out), {x, p}, [pr](Node& self) {
    if (Tensor* gx = input_grad(self, 0)) {
      for (std::size_t i = 0; i < gx->size(); ++i) gx->data[i] += self.grad.data[i];
    }
    if (Tensor* gp = input_grad(self, 1)) {
      for (int r = 0; r < self.grad.rows; ++r) {
        auto src = self.grad.row(r);
        auto dst = gp->row(r % pr);
        for (int c = 0; c < self.grad.cols; ++c) dst[c] += src[c];
      }
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data) v = v > 0.0 ? v : 0.0;
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const Tensor& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        if (xv.data[i] > 0.0) g->data[i] += self.grad.data[i];
      }
    }
  });
}

Var gelu(const Var& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  Tensor out = x.value();
  for (double& v : out.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const Tensor& xv = self.inputs[0]->value;
      for (std::size_t i = 0; i < g->size(); ++i) {
        const double v = xv.data[i];
        const double d = 0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
        g->data[i] += self.grad.data[i] * d;
      }
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const int n = x.rows();
  const int d = x.cols();
  if (gamma.rows() != 1 || gamma.cols() != d || !gamma.value().same_shape(beta.value())) {
    throw ShapeError("layer_norm: affine parameters must be [1x" + std::to_string(d) + "]");
  }
  Tensor out(n, d);
  auto xhat = std::make_shared<Tensor>(n, d);
  auto inv_std = std::make_shared<std::vector<double>>(n);
  for (int r = 0; r < n; ++r) {
    auto xr = x.value().row(r);
    double mu = std::accumulate(xr.begin(), xr.end(), 0.0) / d;
    double var = 0.0;
    for (double v : xr) var += (v - mu) * (v - mu);
    var /= d;
    const double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = inv;
    auto hr = xhat->row(r);
    auto orow = out.row(r);
    for (int c = 0; c < d; ++c) {
      hr[c] = (xr[c] - mu) * inv;
      orow[c] = hr[c] * gamma.value().data[c] + beta.value().data[c];
    }
  }
  return make_result(std::move(out), {x, gamma, beta}, [xhat, inv_std, n, d](Node& self) {
    const Tensor& gv = self.inputs[1]->value;
    Tensor* gx = input_grad(self, 0);
    Tensor* ggamma = input_grad(self, 1);
    Tensor* gbeta = input_grad(self, 2);
    std::vector<double> dxhat(d);
    for (int r = 0; r < n; ++r) {
      auto g = self.grad.row(r);
      auto hr = xhat->row(r);
      if (ggamma) {
        for (int c = 0; c < d; ++c) ggamma->data[c] += g[c] * hr[c];
      }
      if (gbeta) {
        for (int c = 0; c < d; ++c) gbeta->data[c] += g[c];
      }
      if (gx) {
        double mean_d = 0.0;
        double mean_dh = 0.0;
        for (int c = 0; c < d; ++c) {
          dxhat[c] = g[c] * gv.data[c];
          mean_d += dxhat[c];
          mean_dh += dxhat[c] * hr[c];
        }
        mean_d /= d;
        mean_dh /= d;
        auto out = gx->row(r);
        const double inv = (*inv_std)[r];
        for (int c = 0; c < d; ++c) out[c] += inv * (dxhat[c] - mean_d - hr[c] * mean_dh);
      }
    }
  });
}

Var l2_normalize_rows(const Var& x) {
  const int n = x.rows();
  const int d = x.cols();
  Tensor out = x.value();
  auto norms = std::make_shared<std::vector<double>>(n);
  for (int r = 0; r < n; ++r) {
    auto row = out.row(r);
    double s = 0.0;
    for (double v : row) s += v * v;
    const double norm = std::sqrt(s);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw NumericalError("l2_normalize_rows: row " + std::to_string(r) + " has norm " + std::to_string(norm));
    }
    (*norms)[r] = norm;
    for (double& v : row) v /= norm;
  }
  return make_result(std::move(out), {x}, [norms, n, d](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (int r = 0; r < n; ++r) {
      auto y = self.value.row(r);
      auto g = self.grad.row(r);
      double dot = 0.0;
      for (int c = 0; c < d; ++c) dot += g[c] * y[c];
      auto dst = gx->row(r);
      for (int c = 0; c < d; ++c) dst[c] += (g[c] - y[c] * dot) / (*norms)[r];
    }
  });
}

Var row_dot(const Var& a, const Var& b) {
  require_same_shape(a, b, "row_dot");
  const int n = a.rows();
  const int d = a.cols();
  Tensor out(n, 1);
  for (int r = 0; r < n; ++r) {
    auto ar = a.value().row(r);
    auto br = b.value().row(r);
    double s = 0.0;
    for (int c = 0; c < d; ++c) s += ar[c] * br[c];
    out.data[r] = s;
  }
  return make_result(std::move(out), {a, b}, [n, d](Node& self) {
    const Tensor& av = self.inputs[0]->value;
    const Tensor& bv = self.inputs[1]->value;
    Tensor* ga = input_grad(self, 0);
    Tensor* gb = input_grad(self, 1);
    for (int r = 0; r < n; ++r) {
      const double g = self.grad.data[r];
      if (ga) {
        auto dst = ga->row(r);
        auto src = bv.row(r);
        for (int c = 0; c < d; ++c) dst[c] += g * src[c];
      }
      if (gb) {
        auto dst = gb->row(r);
        auto src = av.row(r);
        for (int c = 0; c < d; ++c) dst[c] += g * src[c];
      }
    }
  });
}

Var log_softmax_rows(const Var& x) {
  const int n = x.rows();
  const int d = x.cols();
  Tensor out = x.value();
  for (int r = 0; r < n; ++r) {
    auto row = out.row(r);
    double mx = row[0];
    for (double v : row) mx = std::max(mx, v);
    double s = 0.0;
    for (double v : row) s += std::exp(v - mx);
    const double lse = mx + std::log(s);
    for (double& v : row) v -= lse;
  }
  return make_result(std::move(out), {x}, [n, d](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (int r = 0; r < n; ++r) {
      auto g = self.grad.row(r);
      auto y = self.value.row(r);
      double gs = 0.0;
      for (double v : g) gs += v;
      auto dst = gx->row(r);
      for (int c = 0; c < d; ++c) dst[c] += g[c] - std::exp(y[c]) * gs;
    }
  });
}

Var pick(const Var& x, std::span<const int> cols) {
  const int n = x.rows();
  if (static_cast<int>(cols.size()) != n) throw ShapeError("pick: index count does not match rows");
  std::vector<int> idx(cols.begin(), cols.end());
  Tensor out(n, 1);
  for (int r = 0; r < n; ++r) {
    if (idx[r] < 0 || idx[r] >= x.cols()) throw ShapeError("pick: column index out of range");
    out.data[r] = x.value()(r, idx[r]);
  }
  return make_result(std::move(out), {x}, [idx = std::move(idx)](Node& self) {
    if (Tensor* gx = input_grad(self, 0)) {
      for (std::size_t r = 0; r < idx.size(); ++r) (*gx)(static_cast<int>(r), idx[r]) += self.grad.data[r];
    }
  });
}

Var gather_rows(const Var& table, std::span<const int> indices) {
  const int d = table.cols();
  std::vector<int> idx(indices.begin(), indices.end());
  Tensor out(static_cast<int>(idx.size()), d);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || idx[i] >= table.rows()) {
      throw ShapeError("gather_rows: index " + std::to_string(idx[i]) + " out of range");
    }
    auto src = table.value().row(idx[i]);
    std::copy(src.begin(), src.end(), out.row(static_cast<int>(i)).begin());
  }
  return make_result(std::move(out), {table}, [idx = std::move(idx), d](Node& self) {
    Tensor* gt = input_grad(self, 0);
    if (!gt) return;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      auto src = self.grad.row(static_cast<int>(i));
      auto dst = gt->row(idx[i]);
      for (int c = 0; c < d; ++c) dst[c] += src[c];
    }
  });
}

Var concat_rows(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const int d = parts.front().cols();
  int total = 0;
  for (const auto& p : parts) {
    if (p.cols() != d) throw ShapeError("concat_rows: column mismatch");
    total += p.rows();
  }
  Tensor out(total, d);
  std::size_t off = 0;
  for (const auto& p : parts) {
    std::copy(p.value().data.begin(), p.value().data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
    off += p.value().size();
  }
  return make_result(std::move(out), parts, [](Node& self) {
    std::size_t off = 0;
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      const std::size_t len = self.inputs[k]->value.size();
      if (Tensor* g = input_grad(self, k)) {
        for (std::size_t i = 0; i < len; ++i) g->data[i] += self.grad.data[off + i];
      }
      off += len;
    }
  });
}

Var slice_rows(const Var& x, int begin, int count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) throw ShapeError("slice_rows: out of range");
  const int d = x.cols();
  Tensor out(count, d);
  std::copy_n(x.value().data.begin() + static_cast<std::ptrdiff_t>(begin) * d, static_cast<std::size_t>(count) * d,
              out.data.begin());
  return make_result(std::move(out), {x}, [begin, d](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      const std::size_t off = static_cast<std::size_t>(begin) * d;
      for (std::size_t i = 0; i < self.grad.size(); ++i) g->data[off + i] += self.grad.data[i];
    }
  });
}

Var sum(const Var& x) {
  Tensor out(1, 1, std::accumulate(x.value().data.begin(), x.value().data.end(), 0.0));
  return make_result(std::move(out), {x}, [](Node& self) {
    if (Tensor* g = input_grad(self, 0)) {
      for (double& v : g->data) v += self.grad.data[0];
    }
  });
}

Var mean(const Var& x) {
  if (x.value().size() == 0) throw ShapeError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

Var mean_row_groups(const Var& x, int group) {
  if (group <= 0 || x.rows() % group != 0) throw ShapeError("mean_row_groups: rows not divisible by group");
  const int n = x.rows() / group;
  const int d = x.cols();
  Tensor out(n, d);
  const double inv = 1.0 / group;
  for (int r = 0; r < x.rows(); ++r) {
    auto src = x.value().row(r);
    auto dst = out.row(r / group);
    for (int c = 0; c < d; ++c) dst[c] += src[c] * inv;
  }
  return make_result(std::move(out), {x}, [group, d, inv](Node& self) {
    Tensor* g = input_grad(self, 0);
    if (!g) return;
    for (int r = 0; r < g->rows; ++r) {
      auto src = self.grad.row(r / group);
      auto dst = g->row(r);
      for (int c = 0; c < d; ++c) dst[c] += src[c] * inv;
    }
  });
}

Var attention(const Var& q, const Var& k, const Var& v, int batch, int seq, int heads,
              std::span<const std::uint8_t> key_mask) {
  require_same_shape(q, k, "attention");
  require_same_shape(q, v, "attention");
  const int d = q.cols();
  if (q.rows() != batch * seq) throw ShapeError("attention: rows != batch*seq");
  if (heads <= 0 || d % heads != 0) throw ShapeError("attention: dim not divisible by heads");
  if (!key_mask.empty() && static_cast<int>(key_mask.size()) != batch * seq) {
    throw ShapeError("attention: key mask size mismatch");
  }
  const int dh = d / heads;
  const double sc = 1.0 / std::sqrt(static_cast<double>(dh));
  auto probs = std::make_shared<std::vector<RowMat>>(static_cast<std::size_t>(batch) * heads);
  auto mask = std::make_shared<std::vector<std::uint8_t>>(key_mask.begin(), key_mask.end());
  Tensor out(batch * seq, d);
  for (int b = 0; b < batch; ++b) {
    for (int h = 0; h < heads; ++h) {
      const std::size_t off = static_cast<std::size_t>(b) * seq * d + static_cast<std::size_t>(h) * dh;
      CStridedMap Q(q.value().data.data() + off, seq, dh, Eigen::OuterStride<>(d));
      CStridedMap K(k.value().data.data() + off, seq, dh, Eigen::OuterStride<>(d));
      CStridedMap V(v.value().data.data() + off, seq, dh, Eigen::OuterStride<>(d));
      RowMat S = (Q * K.transpose()) * sc;
      for (int i = 0; i < seq; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < seq; ++j) {
          if (mask->empty() || (*mask)[static_cast<std::size_t>(b) * seq + j]) mx = std::max(mx, S(i, j));
        }
        if (!std::isfinite(mx)) throw NumericalError("attention: sequence has no unmasked keys");
        double s = 0.0;
        for (int j = 0; j < seq; ++j) {
          const bool keep = mask->empty() || (*mask)[static_cast<std::size_t>(b) * seq + j];
          S(i, j) = keep ? std::exp(S(i, j) - mx) : 0.0;
          s += S(i, j);
        }
        S.row(i) /= s;
      }
      StridedMap O(out.data.data() + off, seq, dh, Eigen::OuterStride<>(d));
      O.noalias() = S * V;
      (*probs)[static_cast<std::size_t>(b) * heads + h] = std::move(S);
    }
  }
  return make_result(std::move(out), {q, k, v}, [probs, batch, seq, heads, d, dh, sc](Node& self) {
    Tensor* gq = input_grad(self, 0);
    Tensor* gk = input_grad(self, 1);
    Tensor* gv = input_grad(self, 2);
    const Tensor& qv = self.inputs[0]->value;
    const Tensor& kv = self.inputs[1]->value;
    const Tensor& vv = self.inputs[2]->value;
    for (int b = 0; b < batch; ++b) {
      for (int h = 0; h < heads; ++h) {
        const std::size_t off = static_cast<std::size_t>(b) * seq * d + static_cast<std::size_t>(h) * dh;
        const RowMat& P = (*probs)[static_cast<std::size_t>(b) * heads + h];
        CStridedMap dO(self.grad.data.data() + off, seq, dh, Eigen::OuterStride<>(d));
        CStridedMap Q(qv.data.data() + off, seq, dh, Eigen::OuterStride<>(d));
        CStridedMap K(kv.data.data() + off, seq, dh, Eigen::OuterStride<>(d));
        CStridedMap V(vv.data.data() + off, seq, dh, Eigen::OuterStride<>(d));
        if (gv) {
          StridedMap dV(gv->data.data() + off, seq, dh, Eigen::OuterStride<>(d));
          dV.noalias() += P.transpose() * dO;
        }
        if (!gq && !gk) continue;
        RowMat dP = dO * V.transpose();
        RowMat dS(seq, seq);
        for (int i = 0; i < seq; ++i) {
          const double rs = (dP.row(i).array() * P.row(i).array()).sum();
          dS.row(i) = P.row(i).array() * (dP.row(i).array() - rs);
        }
        if (gq) {
          StridedMap dQ(gq->data.data() + off, seq, dh, Eigen::OuterStride<>(d));
          dQ.noalias() += (dS * K) * sc;
        }
        if (gk) {
          StridedMap dK(gk->data.data() + off, seq, dh, Eigen::OuterStride<>(d));
          dK.noalias() += (dS.transpose() * Q) * sc;
        }
      }
    }
  });
}

Var im2col(const Var& x, const ConvGeometry& g) {
  if (x.rows() != g.batch * g.height * g.width || x.cols() != g.channels) {
    throw ShapeError("im2col: input " + x.value().shape_str() + " does not match geometry");
  }
  const int ho = g.out_height();
  const int wo = g.out_width();
  const int kc = g.kernel * g.kernel * g.channels;
  Tensor out(g.batch * ho * wo, kc);
  const Tensor& xv = x.value();
  for (int b = 0; b < g.batch; ++b) {
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double* dst = out.data.data() + (static_cast<std::size_t>((b * ho + oy) * wo + ox)) * kc;
        for (int ky = 0; ky < g.kernel; ++ky) {
          const int iy = oy * g.stride - g.pad + ky;
          for (int kx = 0; kx < g.kernel; ++kx) {
            const int ix = ox * g.stride - g.pad + kx;
            double* cell = dst + (ky * g.kernel + kx) * g.channels;
            if (iy < 0 || iy >= g.height || ix < 0 || ix >= g.width) continue;  // zero padding
            const double* src = xv.data.data() + (static_cast<std::size_t>((b * g.height + iy) * g.width + ix)) * g.channels;
            std::copy_n(src, g.channels, cell);
          }
        }
      }
    }
  }
  return make_result(std::move(out), {x}, [g, ho, wo, kc](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (int b = 0; b < g.batch; ++b) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          const double* src = self.grad.data.data() + (static_cast<std::size_t>((b * ho + oy) * wo + ox)) * kc;
          for (int ky = 0; ky < g.kernel; ++ky) {
            const int iy = oy * g.stride - g.pad + ky;
            if (iy < 0 || iy >= g.height) continue;
            for (int kx = 0; kx < g.kernel; ++kx) {
              const int ix = ox * g.stride - g.pad + kx;
              if (ix < 0 || ix >= g.width) continue;
              const double* cell = src + (ky * g.kernel + kx) * g.channels;
              double* dst = gx->data.data() + (static_cast<std::size_t>((b * g.height + iy) * g.width + ix)) * g.channels;
              for (int c = 0; c < g.channels; ++c) dst[c] += cell[c];
            }
          }
        }
      }
    }
  });
}

Var avg_pool2(const Var& x, int batch, int height, int width) {
  if (height % 2 != 0 || width % 2 != 0 || x.rows() != batch * height * width) {
    throw ShapeError("avg_pool2: bad geometry for " + x.value().shape_str());
  }
  const int c = x.cols();
  const int ho = height / 2;
  const int wo = width / 2;
  Tensor out(batch * ho * wo, c);
  const Tensor& xv = x.value();
  for (int b = 0; b < batch; ++b) {
    for (int y = 0; y < height; ++y) {
      for (int xx = 0; xx < width; ++xx) {
        auto src = xv.row((b * height + y) * width + xx);
        auto dst = out.row((b * ho + y / 2) * wo + xx / 2);
        for (int k = 0; k < c; ++k) dst[k] += 0.25 * src[k];
      }
    }
  }
  return make_result(std::move(out), {x}, [batch, height, width, c, ho, wo](Node& self) {
    Tensor* gx = input_grad(self, 0);
    if (!gx) return;
    for (int b = 0; b < batch; ++b) {
      for (int y = 0; y < height; ++y) {
        for (int xx = 0; xx < width; ++xx) {
          auto src = self.grad.row((b * ho + y / 2) * wo + xx / 2);
          auto dst = gx->row((b * height + y) * width + xx);
          for (int k = 0; k < c; ++k) dst[k] += 0.25 * src[k];
        }
      }
    }
  });
}

Var global_avg_pool(const Var& x, int batch, int pixels) {
  if (x.rows() != batch * pixels) throw ShapeError("global_avg_pool: rows != batch*pixels");
  return mean_row_groups(x, pixels);
}

}  // namespace dipt::nn
