#pragma once

// Building blocks shared by the teacher and student networks, plus the
// optimizers. Parameters are kept float32-representable (see snap_float32)
// so that the float32 checkpoint container round-trips them bit-exactly.

#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dipt/autograd.hpp"

namespace dipt::nn {

double snap_float32(double v) noexcept;
void snap_float32(Tensor& t) noexcept;

Tensor gaussian(int rows, int cols, double stddev, std::mt19937_64& rng);

// Ordered, named collection of trainable leaves.
class ParamSet {
 public:
  Var add(std::string name, Tensor init);
  const std::vector<std::pair<std::string, Var>>& items() const noexcept { return items_; }
  std::vector<Var> vars() const;
  const Var& get(const std::string& name) const;
  std::size_t count() const noexcept;  // number of scalars
  void zero_grad();

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

struct Linear {
  Var weight;  // [in, out]
  Var bias;    // [1, out], undefined when built without bias

  static Linear make(ParamSet& ps, const std::string& name, int in, int out, std::mt19937_64& rng,
                     bool with_bias = true);
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma;
  Var beta;

  static LayerNorm make(ParamSet& ps, const std::string& name, int dim);
  Var operator()(const Var& x) const { return layer_norm(x, gamma, beta); }
};

struct Conv2d {
  Var weight;  // [k*k*in, out]
  Var bias;    // [1, out]
  int in_channels = 0;
  int out_channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;

  static Conv2d make(ParamSet& ps, const std::string& name, int in, int out, int kernel, int stride, int pad,
                     std::mt19937_64& rng);
  // x is [batch*h*w, in]; h and w are updated to the output size.
  Var operator()(const Var& x, int batch, int& h, int& w) const;
};

// Pre-norm transformer block: x + attn(ln(x)), then x + mlp(ln(x)).
struct TransformerBlock {
  LayerNorm ln1;
  Linear q;
  Linear k;
  Linear v;
  Linear out;
  LayerNorm ln2;
  Linear fc1;
  Linear fc2;
  int heads = 1;

  static TransformerBlock make(ParamSet& ps, const std::string& name, int dim, int heads, int mlp_dim,
                               std::mt19937_64& rng);
  Var operator()(const Var& x, int batch, int seq, std::span<const std::uint8_t> key_mask = {}) const;
};

class Sgd {
 public:
  Sgd(std::vector<Var> params, double lr) : params_(std::move(params)), lr_(lr) {}
  void step();
  void zero_grad();

 private:
  std::vector<Var> params_;
  double lr_;
};

class Adam {
 public:
  Adam(std::vector<Var> params, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
  void step();
  void zero_grad();

 private:
  std::vector<Var> params_;
  std::vector<Tensor> m_;
  std::vector<Tensor> v_;
  double lr_;
  double beta1_;
  double beta2_;
  double eps_;
  long step_ = 0;
};

}  // namespace dipt::nn
