#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "pcas/tensor.hpp"

namespace pcas {

enum class Op {
  kLeaf,
  kConstant,
  kAdd,
  kSub,
  kMul,
  kDiv,
  kAddScalar,
  kMulScalar,
  kAddRowVec,
  kExp,
  kLog,
  kRelu,
  kGelu,
  kMatmul,
  kTranspose,
  kReshape,
  kConcat,
  kSliceRows,
  kSumAxis,
  kMeanAxis,
  kSumAll,
  kMeanAll,
  kSoftmaxRows,
  kL2NormalizeRows,
  kLayerNormRows,
  kCosineSimilarity,
  kSoftCrossEntropyRows,
  kBceWithLogits,
  kConv2d,
  kConvTranspose2d,
  kUpsampleBilinear2d,
};

const char* op_name(Op op);

class Graph;

// Lightweight handle to a node of a Graph.
struct Var {
  Graph* g = nullptr;
  int id = -1;
  bool valid() const { return g != nullptr && id >= 0; }
};

enum class ZeroNormPolicy { kError, kClamp };

// Reverse-mode tape. Nodes are appended in topological order by construction
// (an op can only consume already-created nodes), so the backward pass is a
// single reverse sweep. Single-owner: a Graph must not be shared across
// threads during forward/backward. Leaf tensors must outlive the graph.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  // Parameter leaf. The node snapshots the current values; after backward()
  // the node's gradient is accumulated additively into param->grad. Repeated
  // calls with the same pointer return the same node.
  Var leaf(Tensor* param);
  // Owned constant with no gradient.
  Var constant(Tensor value);
  Var scalar(double v);
  // Owned input; set requires_grad to read its gradient back via grad_of.
  Var input(Tensor value, bool requires_grad = false);

  const Tensor& value(Var v) const;
  const std::vector<double>& grad_of(Var v) const;

  // Elementwise, same shape.
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var mul(Var a, Var b);
  Var div(Var a, Var b);
  // Scalar broadcast.
  Var add_scalar(Var a, double c);
  Var mul_scalar(Var a, double c);
  // Adds a length-d vector to every row of an n x d matrix.
  Var add_rowvec(Var x, Var v);

  Var exp(Var a);
  Var log(Var a);
  Var relu(Var a);
  Var gelu(Var a);

  Var matmul(Var a, Var b);
  Var transpose(Var a);
  Var reshape(Var a, Shape s);
  Var concat(const std::vector<Var>& xs, int axis);
  Var slice_rows(Var a, int r0, int r1);

  Var sum_axis(Var a, int axis);
  Var mean_axis(Var a, int axis);
  Var sum_all(Var a);
  Var mean_all(Var a);

  Var softmax_rows(Var a);
  Var l2_normalize_rows(Var a);
  Var layer_norm_rows(Var x, Var gamma, Var beta, double eps = 1e-5);

  // Cosine similarity of two equal-length vectors; scalar output in [-1, 1].
  // kError raises on zero-norm inputs, kClamp clamps norms to 1e-12.
  Var cosine_similarity(Var a, Var b, ZeroNormPolicy policy = ZeroNormPolicy::kError);

  // Mean over rows of -sum_j T_ij * log softmax(S_i)_j. All-zero target rows
  // are skipped (and counted under "soft_ce.skipped_rows"); other rows must
  // sum to 1 within 1e-6. Gradient flows into S only.
  Var soft_cross_entropy_rows(Var s, Var t);

  // Mean elementwise binary cross-entropy on logits; targets carry no grad.
  Var bce_with_logits(Var logits, Var targets);

  // x: Ci x H x W, w: Co x Ci x kh x kw, b: Co.
  Var conv2d(Var x, Var w, Var b, int stride, int pad);
  // x: Ci x H x W, w: Ci x Co x kh x kw, b: Co; output (H-1)*s + kh.
  Var conv_transpose2d(Var x, Var w, Var b, int stride);
  Var upsample_bilinear2d(Var x, int out_h, int out_w);

  // Seeds d(loss)/d(loss) = 1 and sweeps the tape once in reverse topological
  // order; leaf gradients are then flushed into their external tensors.
  void backward(Var loss);

  int size() const { return static_cast<int>(nodes_.size()); }
  bool backward_done() const { return backward_done_; }

  // NaN/Inf in any op output raises; on by default.
  bool check_finite = true;

 private:
  friend struct GraphTestPeer;
  struct Node {
    Op op;
    std::vector<int> inputs;
    Tensor value;
    Tensor* external = nullptr;
    bool requires_grad = false;
    std::vector<double> grad;
    std::function<void(Graph&, int)> backward;
  };

  int push(Node n);
  Node& node(int id) { return nodes_[static_cast<size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<size_t>(id)]; }
  Tensor& val(int id) { return nodes_[static_cast<size_t>(id)].value; }
  std::vector<double>& grd(int id) { return nodes_[static_cast<size_t>(id)].grad; }
  void check_var(Var v) const;
  void check_output(const Tensor& t, Op op) const;

  std::vector<Node> nodes_;
  std::unordered_map<Tensor*, int> leaf_cache_;
  bool backward_done_ = false;
};

// Operator sugar for elementwise arithmetic.
Var operator+(Var a, Var b);
Var operator-(Var a, Var b);
Var operator*(Var a, Var b);
Var operator/(Var a, Var b);
Var operator*(Var a, double c);
Var operator*(double c, Var a);
Var operator+(Var a, double c);

Var matmul(Var a, Var b);

}  // namespace pcas
