#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major
// matrices of doubles. Every model in the project (text transformer, conv
// image encoders, students) is expressed with the ops declared here, so a
// single backward implementation per op is all that the gradient checks
// need to trust.

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dipt::nn {

struct Tensor {
  int rows = 0;
  int cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(int r, int c, double fill = 0.0);
  Tensor(int r, int c, std::vector<double> values);

  std::size_t size() const noexcept { return data.size(); }
  double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
  std::span<double> row(int r) { return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)}; }
  std::span<const double> row(int r) const {
    return {data.data() + static_cast<std::size_t>(r) * cols, static_cast<std::size_t>(cols)};
  }
  bool same_shape(const Tensor& o) const noexcept { return rows == o.rows && cols == o.cols; }
  std::string shape_str() const;
};

struct Node;

// Handle to a value in the computation graph. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const;
  Tensor& mutable_value();
  const Tensor& grad() const;
  Tensor& mutable_grad();
  bool requires_grad() const;
  int rows() const { return value().rows; }
  int cols() const { return value().cols; }
  double item() const;  // value of a 1x1 tensor
  bool defined() const noexcept { return static_cast<bool>(node_); }
  Node* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node>& shared() const noexcept { return node_; }

  void zero_grad();
  // Seeds d(self)/d(self) = 1 and propagates to every reachable leaf that
  // requires a gradient. Gradients accumulate into leaves.
  void backward();

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  void ensure_grad();
};

Var constant(Tensor t);
Var parameter(Tensor t);  // leaf with requires_grad = true

// --- Linear algebra ---------------------------------------------------------
Var matmul(const Var& a, const Var& b);        // [m,k] x [k,n]
Var matmul_nt(const Var& a, const Var& b);     // [m,k] x [n,k]^T
Var transpose(const Var& a);

// --- Elementwise ------------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
// x row r += p row (r mod p.rows). Covers biases (p.rows = 1) and tiled
// positional embeddings (p.rows = sequence length).
Var add_broadcast_rows(const Var& x, const Var& p);
Var relu(const Var& x);
Var gelu(const Var& x);

// --- Row-wise ---------------------------------------------------------------
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
// Divides each row by its L2 norm. Throws NumericalError on a zero row.
Var l2_normalize_rows(const Var& x);
Var row_dot(const Var& a, const Var& b);      // [n,d],[n,d] -> [n,1]
Var log_softmax_rows(const Var& x);
Var pick(const Var& x, std::span<const int> cols);  // [n,c] -> [n,1]: x(i, cols[i])

// --- Structural -------------------------------------------------------------
Var gather_rows(const Var& table, std::span<const int> indices);
Var concat_rows(const std::vector<Var>& parts);
Var slice_rows(const Var& x, int begin, int count);

// --- Reductions -------------------------------------------------------------
Var sum(const Var& x);
Var mean(const Var& x);
// Mean over consecutive groups of `group` rows: [n*group, d] -> [n, d].
Var mean_row_groups(const Var& x, int group);

// --- Attention --------------------------------------------------------------
// Multi-head scaled dot-product attention on packed sequences. q, k, v are
// [batch*seq, d] with d divisible by heads. key_mask (optional, batch*seq
// bytes) marks keys that may be attended to; masked keys get exactly zero
// weight. Attention is bidirectional.
Var attention(const Var& q, const Var& k, const Var& v, int batch, int seq, int heads,
              std::span<const std::uint8_t> key_mask = {});

// --- Images (NHWC packed as [batch*h*w, channels]) -------------------------
struct ConvGeometry {
  int batch = 1;
  int height = 0;
  int width = 0;
  int channels = 0;
  int kernel = 3;
  int stride = 1;
  int pad = 1;
  int out_height() const { return (height + 2 * pad - kernel) / stride + 1; }
  int out_width() const { return (width + 2 * pad - kernel) / stride + 1; }
};

// Unfolds patches: [B*H*W, C] -> [B*Ho*Wo, k*k*C]; the product with a
// [k*k*C, out] weight matrix is a convolution.
Var im2col(const Var& x, const ConvGeometry& g);
Var avg_pool2(const Var& x, int batch, int height, int width);   // 2x2, stride 2
Var global_avg_pool(const Var& x, int batch, int pixels);        // [B*P, C] -> [B, C]

}  // namespace dipt::nn
