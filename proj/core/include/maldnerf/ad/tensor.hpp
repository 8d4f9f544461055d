#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

namespace maldnerf::ad {

// Reverse-mode autodiff over dense double tensors (row-major).
//
// Every op records a vjp closure that maps the upstream gradient to parent
// gradients *using tensor ops*, so gradients themselves carry graphs and can
// be differentiated again (needed for the R1 penalty, whose parameter
// gradient is a second derivative). vjp closures capture parent tensors,
// never their own output, which keeps the graph acyclic. A few fused ops
// (hash-grid encoding, wrap padding) have eager first-order vjps; they are
// only used in paths that are differentiated once.

using Shape = std::vector<int>;

int64_t numel_of(const Shape& s);

struct Node;
using NodePtr = std::shared_ptr<Node>;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}

  static Tensor zeros(const Shape& s, bool requires_grad = false);
  static Tensor full(const Shape& s, double v, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor from(const Shape& s, std::vector<double> data, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  bool requires_grad() const;
  const std::vector<double>& value() const;
  // Leaf mutation (optimizer updates). Graphs referencing old values must not
  // outlive the mutation; the trainer frees step graphs before updates.
  std::vector<double>& leaf_value();
  double item() const;

  Tensor detach() const;
  Node* node() const { return node_.get(); }
  NodePtr node_ptr() const { return node_; }

 private:
  NodePtr node_;
};

struct Node {
  Shape shape;
  std::vector<double> v;
  bool requires_grad = false;
  std::vector<Tensor> parents;
  // Maps upstream grad -> one grad per parent (undefined Tensor = no grad).
  std::function<std::vector<Tensor>(const Tensor&)> vjp;
  const char* op = "leaf";
};

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();

 private:
  bool prev_;
};

// ---- elementwise (numpy-style broadcasting) ---------------------------------
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor minimum(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor abs(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);  // numerically stable log(1 + exp(x))
Tensor relu(const Tensor& a);

Tensor add_scalar(const Tensor& a, double s);
Tensor mul_scalar(const Tensor& a, double s);
Tensor pow_scalar(const Tensor& a, double p);
Tensor square(const Tensor& a);

// 0/1 masks, no gradient through either argument.
Tensor ge_mask(const Tensor& a, const Tensor& b);
Tensor gt_scalar_mask(const Tensor& a, double s);
Tensor floor_const(const Tensor& a);

// ---- shape -------------------------------------------------------------------
Tensor reshape(const Tensor& a, const Shape& s);
Tensor slice(const Tensor& a, const std::vector<int>& offsets, const Shape& sizes);
Tensor pad_to(const Tensor& a, const Shape& target, const std::vector<int>& offsets);
Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor reverse_last(const Tensor& a);
Tensor broadcast_to(const Tensor& a, const Shape& s);

// ---- reductions ----------------------------------------------------------------
Tensor sum_all(const Tensor& a);
Tensor mean_all(const Tensor& a);
Tensor sum_axes(const Tensor& a, const std::vector<int>& axes, bool keepdim);

// ---- scans -----------------------------------------------------------------
Tensor cumsum_last(const Tensor& a, bool exclusive);

// ---- linear algebra ----------------------------------------------------------
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false);

// ---- indexing -----------------------------------------------------------------
Tensor gather_rows(const Tensor& table, const std::vector<int64_t>& idx);
Tensor scatter_rows(const Tensor& src, const std::vector<int64_t>& idx, int n_rows);
Tensor gather_last(const Tensor& a, const std::vector<int64_t>& idx, int idx_cols);
Tensor scatter_add_last(const Tensor& a, const std::vector<int64_t>& idx, int out_cols);

// ---- conv family (NCHW, zero padding; wrap via pad2d_wrap + pad=0) ------------
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int pad);
Tensor conv2d_input_grad(const Tensor& g, const Tensor& w, const Shape& x_shape, int stride,
                         int pad);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& g, const Shape& w_shape, int stride,
                          int pad);
Tensor pad2d_wrap(const Tensor& x, int p);  // first-order vjp
Tensor avg_pool2(const Tensor& x);
Tensor upsample_nearest2(const Tensor& x);

// ---- fused field encoding ------------------------------------------------------
// Multi-resolution hash-grid trilinear encoding; pts in [0,1]^3, one table of
// shape [T, F] per level. First-order vjp (eager) into points and tables.
Tensor hash_grid_encode(const Tensor& pts, const std::vector<Tensor>& tables,
                        const std::vector<int>& resolutions);

// ---- autodiff -------------------------------------------------------------------
struct GradOptions {
  bool create_graph = false;
};

// Gradient of a scalar output w.r.t. each input (zeros when unreachable).
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& inputs,
                         const GradOptions& opt = {});

void check_finite(const Tensor& t, const std::string& context);

}  // namespace maldnerf::ad
