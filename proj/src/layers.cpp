#include "dipt/layers.hpp"

#include <cmath>

#include "dipt/error.hpp"

namespace dipt::nn {

double snap_float32(double v) noexcept { return static_cast<double>(static_cast<float>(v)); }

void snap_float32(Tensor& t) noexcept {
  for (double& v : t.data) v = snap_float32(v);
}

Tensor gaussian(int rows, int cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  Tensor t(rows, cols);
  for (double& v : t.data) v = dist(rng);
  snap_float32(t);
  return t;
}

Var ParamSet::add(std::string name, Tensor init) {
  for (const auto& [n, _] : items_) {
    if (n == name) throw Error("duplicate parameter name " + name);
  }
  snap_float32(init);
  Var p = parameter(std::move(init));
  items_.emplace_back(std::move(name), p);
  return p;
}

std::vector<Var> ParamSet::vars() const {
  std::vector<Var> out;
  out.reserve(items_.size());
  for (const auto& [_, v] : items_) out.push_back(v);
  return out;
}

const Var& ParamSet::get(const std::string& name) const {
  for (const auto& [n, v] : items_) {
    if (n == name) return v;
  }
  throw Error("unknown parameter " + name);
}

std::size_t ParamSet::count() const noexcept {
  std::size_t n = 0;
  for (const auto& [_, v] : items_) n += v.value().size();
  return n;
}

void ParamSet::zero_grad() {
  for (auto& [_, v] : items_) v.zero_grad();
}

Linear Linear::make(ParamSet& ps, const std::string& name, int in, int out, std::mt19937_64& rng, bool with_bias) {
  Linear l;
  l.weight = ps.add(name + ".weight", gaussian(in, out, 1.0 / std::sqrt(static_cast<double>(in)), rng));
  if (with_bias) l.bias = ps.add(name + ".bias", Tensor(1, out));
  return l;
}

Var Linear::operator()(const Var& x) const {
  Var y = matmul(x, weight);
  return bias.defined() ? add_broadcast_rows(y, bias) : y;
}

LayerNorm LayerNorm::make(ParamSet& ps, const std::string& name, int dim) {
  return LayerNorm{ps.add(name + ".gamma", Tensor(1, dim, 1.0)), ps.add(name + ".beta", Tensor(1, dim))};
}

Conv2d Conv2d::make(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride, int pad,
                    std::mt19937_64& rng) {
  Conv2d c;
  const int fan_in = kernel * kernel * in;
  c.weight = ps.add(name + ".weight", gaussian(fan_in, out, std::sqrt(2.0 / fan_in), rng));
  c.bias = ps.add(name + ".bias", Tensor(1, out));
  c.in_channels = in;
  c.out_channels = out;
  c.kernel = kernel;
  c.stride = stride;
  c.pad = pad;
  return c;
}

Var Conv2d::operator()(const Var& x, int batch, int& h, int& w) const {
  ConvGeometry g{batch, h, w, in_channels, kernel, stride, pad};
  Var cols = im2col(x, g);
  h = g.out_height();
  w = g.out_width();
  return add_broadcast_rows(matmul(cols, weight), bias);
}

TransformerBlock TransformerBlock::make(ParamSet& ps, const std::string& name, int dim, int heads, int mlp_dim,
                                        std::mt19937_64& rng) {
  TransformerBlock b;
  b.ln1 = LayerNorm::make(ps, name + ".ln1", dim);
  b.q = Linear::make(ps, name + ".attn.q", dim, dim, rng);
  b.k = Linear::make(ps, name + ".attn.k", dim, dim, rng);
  b.v = Linear::make(ps, name + ".attn.v", dim, dim, rng);
  b.out = Linear::make(ps, name + ".attn.out", dim, dim, rng);
  b.ln2 = LayerNorm::make(ps, name + ".ln2", dim);
  b.fc1 = Linear::make(ps, name + ".mlp.fc1", dim, mlp_dim, rng);
  b.fc2 = Linear::make(ps, name + ".mlp.fc2", mlp_dim, dim, rng);
  b.heads = heads;
  return b;
}

Var TransformerBlock::operator()(const Var& x, int batch, int seq, std::span<const std::uint8_t> key_mask) const {
  Var h = ln1(x);
  Var a = attention(q(h), k(h), v(h), batch, seq, heads, key_mask);
  Var x1 = add(x, out(a));
  Var m = fc2(gelu(fc1(ln2(x1))));
  return add(x1, m);
}

void Sgd::step() {
  for (auto& p : params_) {
    Tensor& val = p.mutable_value();
    const Tensor& g = p.grad();
    for (std::size_t i = 0; i < val.size(); ++i) val.data[i] = snap_float32(val.data[i] - lr_ * g.data[i]);
  }
}

void Sgd::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

Adam::Adam(std::vector<Var> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.rows(), p.cols());
    v_.emplace_back(p.rows(), p.cols());
  }
}

void Adam::step() {
  ++step_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    Tensor& val = params_[k].mutable_value();
    const Tensor& g = params_[k].grad();
    Tensor& m = m_[k];
    Tensor& v = v_[k];
    for (std::size_t i = 0; i < val.size(); ++i) {
      m.data[i] = beta1_ * m.data[i] + (1.0 - beta1_) * g.data[i];
      v.data[i] = beta2_ * v.data[i] + (1.0 - beta2_) * g.data[i] * g.data[i];
      const double update = lr_ * (m.data[i] / bc1) / (std::sqrt(v.data[i] / bc2) + eps_);
      val.data[i] = snap_float32(val.data[i] - update);
    }
  }
}

void Adam::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

}  // namespace dipt::nn
