#include "pcas/graph.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>

#include "pcas/logging.hpp"

namespace pcas {

namespace {

constexpr double kInvSqrt2 = 0.70710678118654752440;
constexpr double kInvSqrt2Pi = 0.39894228040143267794;

using EMat =
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const EMat>;
using MMap = Eigen::Map<EMat>;

CMap map2d(const Tensor& t) { return CMap(t.data.data(), t.shape[0], t.shape[1]); }

MMap map_buf(std::vector<double>& buf, int r, int c) {
  return MMap(buf.data(), r, c);
}

CMap map_buf_const(const std::vector<double>& buf, int r, int c) {
  return CMap(buf.data(), r, c);
}

void require(bool cond, const std::string& msg) {
  if (!cond) throw Error(msg);
}

void require_rank2(const Tensor& t, Op op) {
  require(t.rank() == 2, std::string(op_name(op)) + ": expected rank-2 tensor, got " +
                             shape_str(t.shape));
}

}  // namespace

const char* op_name(Op op) {
  switch (op) {
    case Op::kLeaf: return "leaf";
    case Op::kConstant: return "constant";
    case Op::kAdd: return "add";
    case Op::kSub: return "sub";
    case Op::kMul: return "mul";
    case Op::kDiv: return "div";
    case Op::kAddScalar: return "add_scalar";
    case Op::kMulScalar: return "mul_scalar";
    case Op::kAddRowVec: return "add_rowvec";
    case Op::kExp: return "exp";
    case Op::kLog: return "log";
    case Op::kRelu: return "relu";
    case Op::kGelu: return "gelu";
    case Op::kMatmul: return "matmul";
    case Op::kTranspose: return "transpose";
    case Op::kReshape: return "reshape";
    case Op::kConcat: return "concat";
    case Op::kSliceRows: return "slice_rows";
    case Op::kSumAxis: return "sum_axis";
    case Op::kMeanAxis: return "mean_axis";
    case Op::kSumAll: return "sum_all";
    case Op::kMeanAll: return "mean_all";
    case Op::kSoftmaxRows: return "softmax_rows";
    case Op::kL2NormalizeRows: return "l2_normalize_rows";
    case Op::kLayerNormRows: return "layer_norm_rows";
    case Op::kCosineSimilarity: return "cosine_similarity";
    case Op::kSoftCrossEntropyRows: return "soft_cross_entropy_rows";
    case Op::kBceWithLogits: return "bce_with_logits";
    case Op::kConv2d: return "conv2d";
    case Op::kConvTranspose2d: return "conv_transpose2d";
    case Op::kUpsampleBilinear2d: return "upsample_bilinear2d";
  }
  return "?";
}

void Graph::check_var(Var v) const {
  require(v.g == this && v.id >= 0 && v.id < size(),
          "Var does not belong to this graph (backward/use before forward?)");
}

void Graph::check_output(const Tensor& t, Op op) const {
  if (check_finite && !all_finite(t))
    throw Error(std::string("non-finite value in output of ") + op_name(op));
}

int Graph::push(Node n) {
  require(!backward_done_, "graph is frozen after backward()");
  check_output(n.value, n.op);
  for (int in : n.inputs) {
    require(in >= 0 && in < size(), "op input precedes its consumer violated");
    if (node(in).requires_grad) n.requires_grad = true;
  }
  nodes_.push_back(std::move(n));
  return size() - 1;
}

Var Graph::leaf(Tensor* param) {
  require(param != nullptr, "leaf: null parameter");
  auto it = leaf_cache_.find(param);
  if (it != leaf_cache_.end()) return Var{this, it->second};
  Node n;
  n.op = Op::kLeaf;
  n.value = *param;  // snapshot; grads flush to *param after backward
  n.external = param;
  n.requires_grad = param->requires_grad;
  int id = push(std::move(n));
  leaf_cache_[param] = id;
  return Var{this, id};
}

Var Graph::constant(Tensor value) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  return Var{this, push(std::move(n))};
}

Var Graph::scalar(double v) { return constant(Tensor::from({1}, {v})); }

Var Graph::input(Tensor value, bool requires_grad) {
  Node n;
  n.op = Op::kConstant;
  n.value = std::move(value);
  n.requires_grad = requires_grad;
  return Var{this, push(std::move(n))};
}

const Tensor& Graph::value(Var v) const {
  check_var(v);
  return node(v.id).value;
}

const std::vector<double>& Graph::grad_of(Var v) const {
  check_var(v);
  require(backward_done_, "grad_of before backward()");
  return node(v.id).grad;
}

// ---------------------------------------------------------------------------
// Elementwise binary ops

Var Graph::add(Var a, Var b) {
  check_var(a);
  check_var(b);
  const Tensor& ta = val(a.id);
  const Tensor& tb = val(b.id);
  require(same_shape(ta.shape, tb.shape),
          "add: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::kAdd;
  n.inputs = {a.id, b.id};
  n.value = ta;
  for (int i = 0; i < n.value.numel(); ++i) n.value.data[i] += tb.data[i];
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    auto& gb = g.grd(self.inputs[1]);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i];
      gb[i] += self.grad[i];
    }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::sub(Var a, Var b) {
  check_var(a);
  check_var(b);
  const Tensor& ta = val(a.id);
  const Tensor& tb = val(b.id);
  require(same_shape(ta.shape, tb.shape),
          "sub: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::kSub;
  n.inputs = {a.id, b.id};
  n.value = ta;
  for (int i = 0; i < n.value.numel(); ++i) n.value.data[i] -= tb.data[i];
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    auto& gb = g.grd(self.inputs[1]);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i];
      gb[i] -= self.grad[i];
    }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::mul(Var a, Var b) {
  check_var(a);
  check_var(b);
  const Tensor& ta = val(a.id);
  const Tensor& tb = val(b.id);
  require(same_shape(ta.shape, tb.shape),
          "mul: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::kMul;
  n.inputs = {a.id, b.id};
  n.value = ta;
  for (int i = 0; i < n.value.numel(); ++i) n.value.data[i] *= tb.data[i];
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& va = g.val(self.inputs[0]);
    const auto& vb = g.val(self.inputs[1]);
    auto& ga = g.grd(self.inputs[0]);
    auto& gb = g.grd(self.inputs[1]);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      ga[i] += self.grad[i] * vb.data[i];
      gb[i] += self.grad[i] * va.data[i];
    }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::div(Var a, Var b) {
  check_var(a);
  check_var(b);
  const Tensor& ta = val(a.id);
  const Tensor& tb = val(b.id);
  require(same_shape(ta.shape, tb.shape),
          "div: shape mismatch " + shape_str(ta.shape) + " vs " + shape_str(tb.shape));
  Node n;
  n.op = Op::kDiv;
  n.inputs = {a.id, b.id};
  n.value = ta;
  for (int i = 0; i < n.value.numel(); ++i) n.value.data[i] /= tb.data[i];
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& va = g.val(self.inputs[0]);
    const auto& vb = g.val(self.inputs[1]);
    auto& ga = g.grd(self.inputs[0]);
    auto& gb = g.grd(self.inputs[1]);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double inv = 1.0 / vb.data[i];
      ga[i] += self.grad[i] * inv;
      gb[i] -= self.grad[i] * va.data[i] * inv * inv;
    }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::add_scalar(Var a, double c) {
  check_var(a);
  Node n;
  n.op = Op::kAddScalar;
  n.inputs = {a.id};
  n.value = val(a.id);
  for (double& v : n.value.data) v += c;
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::mul_scalar(Var a, double c) {
  check_var(a);
  Node n;
  n.op = Op::kMulScalar;
  n.inputs = {a.id};
  n.value = val(a.id);
  for (double& v : n.value.data) v *= c;
  n.backward = [c](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += c * self.grad[i];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::add_rowvec(Var x, Var v) {
  check_var(x);
  check_var(v);
  const Tensor& tx = val(x.id);
  const Tensor& tv = val(v.id);
  require_rank2(tx, Op::kAddRowVec);
  const int d = tx.shape[1];
  require(tv.numel() == d, "add_rowvec: vector length " + std::to_string(tv.numel()) +
                               " vs row width " + std::to_string(d));
  Node n;
  n.op = Op::kAddRowVec;
  n.inputs = {x.id, v.id};
  n.value = tx;
  const int rows = tx.shape[0];
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < d; ++c) n.value.data[static_cast<size_t>(r) * d + c] += tv.data[c];
  n.backward = [rows, d](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& gx = g.grd(self.inputs[0]);
    auto& gv = g.grd(self.inputs[1]);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < d; ++c) {
        const double gg = self.grad[static_cast<size_t>(r) * d + c];
        gx[static_cast<size_t>(r) * d + c] += gg;
        gv[c] += gg;
      }
  };
  return Var{this, push(std::move(n))};
}

// ---------------------------------------------------------------------------
// Elementwise unary ops

Var Graph::exp(Var a) {
  check_var(a);
  Node n;
  n.op = Op::kExp;
  n.inputs = {a.id};
  n.value = val(a.id);
  for (double& v : n.value.data) v = std::exp(v);
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (size_t i = 0; i < self.grad.size(); ++i)
      ga[i] += self.grad[i] * self.value.data[i];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::log(Var a) {
  check_var(a);
  Node n;
  n.op = Op::kLog;
  n.inputs = {a.id};
  n.value = val(a.id);
  for (double& v : n.value.data) v = std::log(v);
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& va = g.val(self.inputs[0]);
    auto& ga = g.grd(self.inputs[0]);
    for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i] / va.data[i];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::relu(Var a) {
  check_var(a);
  Node n;
  n.op = Op::kRelu;
  n.inputs = {a.id};
  n.value = val(a.id);
  for (double& v : n.value.data) v = v > 0.0 ? v : 0.0;
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& va = g.val(self.inputs[0]);
    auto& ga = g.grd(self.inputs[0]);
    for (size_t i = 0; i < self.grad.size(); ++i)
      if (va.data[i] > 0.0) ga[i] += self.grad[i];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::gelu(Var a) {
  check_var(a);
  Node n;
  n.op = Op::kGelu;
  n.inputs = {a.id};
  n.value = val(a.id);
  // Exact erf form, matching the derivative below.
  for (double& v : n.value.data) v = 0.5 * v * (1.0 + std::erf(v * kInvSqrt2));
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& va = g.val(self.inputs[0]);
    auto& ga = g.grd(self.inputs[0]);
    for (size_t i = 0; i < self.grad.size(); ++i) {
      const double x = va.data[i];
      const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
      const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
      ga[i] += self.grad[i] * (cdf + x * pdf);
    }
  };
  return Var{this, push(std::move(n))};
}

// ---------------------------------------------------------------------------
// Linear algebra / shape ops

Var Graph::matmul(Var a, Var b) {
  check_var(a);
  check_var(b);
  const Tensor& ta = val(a.id);
  const Tensor& tb = val(b.id);
  require_rank2(ta, Op::kMatmul);
  require_rank2(tb, Op::kMatmul);
  require(ta.shape[1] == tb.shape[0], "matmul: inner dims " + shape_str(ta.shape) +
                                          " x " + shape_str(tb.shape));
  Node n;
  n.op = Op::kMatmul;
  n.inputs = {a.id, b.id};
  n.value = Tensor({ta.shape[0], tb.shape[1]});
  map_buf(n.value.data, ta.shape[0], tb.shape[1]).noalias() = map2d(ta) * map2d(tb);
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    const Tensor& va = g.val(self.inputs[0]);
    const Tensor& vb = g.val(self.inputs[1]);
    const int m = va.shape[0], k = va.shape[1], p = vb.shape[1];
    auto gout = map_buf_const(self.grad, m, p);
    map_buf(g.grd(self.inputs[0]), m, k).noalias() += gout * map2d(vb).transpose();
    map_buf(g.grd(self.inputs[1]), k, p).noalias() += map2d(va).transpose() * gout;
  };
  return Var{this, push(std::move(n))};
}

Var Graph::transpose(Var a) {
  check_var(a);
  const Tensor& ta = val(a.id);
  require_rank2(ta, Op::kTranspose);
  Node n;
  n.op = Op::kTranspose;
  n.inputs = {a.id};
  n.value = Tensor({ta.shape[1], ta.shape[0]});
  const int r = ta.shape[0], c = ta.shape[1];
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) n.value.at(j, i) = ta.at(i, j);
  n.backward = [r, c](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (int i = 0; i < r; ++i)
      for (int j = 0; j < c; ++j)
        ga[static_cast<size_t>(i) * c + j] += self.grad[static_cast<size_t>(j) * r + i];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::reshape(Var a, Shape s) {
  check_var(a);
  const Tensor& ta = val(a.id);
  require(shape_numel(s) == ta.numel(), "reshape: numel mismatch " +
                                            shape_str(ta.shape) + " -> " + shape_str(s));
  Node n;
  n.op = Op::kReshape;
  n.inputs = {a.id};
  n.value = ta;
  n.value.shape = std::move(s);
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (size_t i = 0; i < self.grad.size(); ++i) ga[i] += self.grad[i];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::concat(const std::vector<Var>& xs, int axis) {
  require(!xs.empty(), "concat: empty input list");
  require(axis == 0 || axis == 1, "concat: axis must be 0 or 1");
  for (Var v : xs) check_var(v);
  const Tensor& first = val(xs[0].id);
  require_rank2(first, Op::kConcat);
  const int keep = axis == 0 ? first.shape[1] : first.shape[0];
  int total = 0;
  for (Var v : xs) {
    const Tensor& t = val(v.id);
    require_rank2(t, Op::kConcat);
    require((axis == 0 ? t.shape[1] : t.shape[0]) == keep,
            "concat: mismatched shapes along kept axis");
    total += axis == 0 ? t.shape[0] : t.shape[1];
  }
  Node n;
  n.op = Op::kConcat;
  for (Var v : xs) n.inputs.push_back(v.id);
  if (axis == 0) {
    n.value = Tensor({total, keep});
    int r = 0;
    for (Var v : xs) {
      const Tensor& t = val(v.id);
      std::copy(t.data.begin(), t.data.end(),
                n.value.data.begin() + static_cast<size_t>(r) * keep);
      r += t.shape[0];
    }
    n.backward = [keep](Graph& g, int id) {
      const auto& self = g.node(id);
      int r = 0;
      for (int in : self.inputs) {
        auto& gi = g.grd(in);
        const int rows = g.val(in).shape[0];
        const size_t off = static_cast<size_t>(r) * keep;
        for (size_t i = 0; i < gi.size(); ++i) gi[i] += self.grad[off + i];
        r += rows;
      }
    };
  } else {
    n.value = Tensor({keep, total});
    int cofs = 0;
    for (Var v : xs) {
      const Tensor& t = val(v.id);
      const int c = t.shape[1];
      for (int i = 0; i < keep; ++i)
        std::copy(t.data.begin() + static_cast<size_t>(i) * c,
                  t.data.begin() + static_cast<size_t>(i + 1) * c,
                  n.value.data.begin() + static_cast<size_t>(i) * total + cofs);
      cofs += c;
    }
    n.backward = [keep, total](Graph& g, int id) {
      const auto& self = g.node(id);
      int cofs = 0;
      for (int in : self.inputs) {
        auto& gi = g.grd(in);
        const int c = g.val(in).shape[1];
        for (int i = 0; i < keep; ++i)
          for (int j = 0; j < c; ++j)
            gi[static_cast<size_t>(i) * c + j] +=
                self.grad[static_cast<size_t>(i) * total + cofs + j];
        cofs += c;
      }
    };
  }
  return Var{xs[0].g, push(std::move(n))};
}

Var Graph::slice_rows(Var a, int r0, int r1) {
  check_var(a);
  const Tensor& ta = val(a.id);
  require_rank2(ta, Op::kSliceRows);
  require(0 <= r0 && r0 < r1 && r1 <= ta.shape[0], "slice_rows: bad range");
  const int d = ta.shape[1];
  Node n;
  n.op = Op::kSliceRows;
  n.inputs = {a.id};
  n.value = Tensor({r1 - r0, d});
  std::copy(ta.data.begin() + static_cast<size_t>(r0) * d,
            ta.data.begin() + static_cast<size_t>(r1) * d, n.value.data.begin());
  n.backward = [r0, d](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    const size_t off = static_cast<size_t>(r0) * d;
    for (size_t i = 0; i < self.grad.size(); ++i) ga[off + i] += self.grad[i];
  };
  return Var{this, push(std::move(n))};
}

// ---------------------------------------------------------------------------
// Reductions

Var Graph::sum_axis(Var a, int axis) {
  check_var(a);
  const Tensor& ta = val(a.id);
  require_rank2(ta, Op::kSumAxis);
  require(axis == 0 || axis == 1, "sum_axis: axis must be 0 or 1");
  const int rows = ta.shape[0], cols = ta.shape[1];
  Node n;
  n.op = Op::kSumAxis;
  n.inputs = {a.id};
  if (axis == 0) {
    n.value = Tensor({cols});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) n.value.data[c] += ta.at(r, c);
  } else {
    n.value = Tensor({rows});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) n.value.data[r] += ta.at(r, c);
  }
  n.backward = [axis, rows, cols](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        ga[static_cast<size_t>(r) * cols + c] += self.grad[axis == 0 ? c : r];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::mean_axis(Var a, int axis) {
  check_var(a);
  const Tensor& ta = val(a.id);
  require_rank2(ta, Op::kMeanAxis);
  require(axis == 0 || axis == 1, "mean_axis: axis must be 0 or 1");
  const int rows = ta.shape[0], cols = ta.shape[1];
  const double inv = 1.0 / (axis == 0 ? rows : cols);
  Node n;
  n.op = Op::kMeanAxis;
  n.inputs = {a.id};
  if (axis == 0) {
    n.value = Tensor({cols});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) n.value.data[c] += ta.at(r, c);
  } else {
    n.value = Tensor({rows});
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c) n.value.data[r] += ta.at(r, c);
  }
  for (double& v : n.value.data) v *= inv;
  n.backward = [axis, rows, cols, inv](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (int r = 0; r < rows; ++r)
      for (int c = 0; c < cols; ++c)
        ga[static_cast<size_t>(r) * cols + c] += inv * self.grad[axis == 0 ? c : r];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::sum_all(Var a) {
  check_var(a);
  const Tensor& ta = val(a.id);
  Node n;
  n.op = Op::kSumAll;
  n.inputs = {a.id};
  double s = 0.0;
  for (double v : ta.data) s += v;
  n.value = Tensor::from({1}, {s});
  n.backward = [](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (double& v : ga) v += self.grad[0];
  };
  return Var{this, push(std::move(n))};
}

Var Graph::mean_all(Var a) {
  check_var(a);
  const Tensor& ta = val(a.id);
  require(ta.numel() > 0, "mean_all: empty tensor");
  const double inv = 1.0 / ta.numel();
  Node n;
  n.op = Op::kMeanAll;
  n.inputs = {a.id};
  double s = 0.0;
  for (double v : ta.data) s += v;
  n.value = Tensor::from({1}, {s * inv});
  n.backward = [inv](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (double& v : ga) v += inv * self.grad[0];
  };
  return Var{this, push(std::move(n))};
}

// ---------------------------------------------------------------------------
// Row-wise normalizations

Var Graph::softmax_rows(Var a) {
  check_var(a);
  const Tensor& ta = val(a.id);
  require_rank2(ta, Op::kSoftmaxRows);
  const int rows = ta.shape[0], cols = ta.shape[1];
  Node n;
  n.op = Op::kSoftmaxRows;
  n.inputs = {a.id};
  n.value = ta;
  for (int r = 0; r < rows; ++r) {
    double mx = -1e300;
    for (int c = 0; c < cols; ++c) mx = std::max(mx, n.value.at(r, c));
    double z = 0.0;
    for (int c = 0; c < cols; ++c) {
      double e = std::exp(n.value.at(r, c) - mx);
      n.value.at(r, c) = e;
      z += e;
    }
    const double inv = 1.0 / z;
    for (int c = 0; c < cols; ++c) n.value.at(r, c) *= inv;
  }
  n.backward = [rows, cols](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& ga = g.grd(self.inputs[0]);
    for (int r = 0; r < rows; ++r) {
      double dot = 0.0;
      const size_t off = static_cast<size_t>(r) * cols;
      for (int c = 0; c < cols; ++c) dot += self.grad[off + c] * self.value.data[off + c];
      for (int c = 0; c < cols; ++c)
        ga[off + c] += self.value.data[off + c] * (self.grad[off + c] - dot);
    }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::l2_normalize_rows(Var a) {
  check_var(a);
  const Tensor& ta = val(a.id);
  require(ta.rank() == 1 || ta.rank() == 2,
          "l2_normalize_rows: expected rank 1 or 2, got " + shape_str(ta.shape));
  const int rows = ta.rank() == 2 ? ta.shape[0] : 1;
  const int cols = ta.rank() == 2 ? ta.shape[1] : ta.shape[0];
  Node n;
  n.op = Op::kL2NormalizeRows;
  n.inputs = {a.id};
  n.value = ta;
  for (int r = 0; r < rows; ++r) {
    const size_t off = static_cast<size_t>(r) * cols;
    double s = 0.0;
    for (int c = 0; c < cols; ++c) s += n.value.data[off + c] * n.value.data[off + c];
    const double m = std::max(std::sqrt(s), 1e-12);
    for (int c = 0; c < cols; ++c) n.value.data[off + c] /= m;
  }
  n.backward = [rows, cols](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& va = g.val(self.inputs[0]);
    auto& ga = g.grd(self.inputs[0]);
    for (int r = 0; r < rows; ++r) {
      const size_t off = static_cast<size_t>(r) * cols;
      double s = 0.0;
      for (int c = 0; c < cols; ++c) s += va.data[off + c] * va.data[off + c];
      const double norm = std::sqrt(s);
      const double m = std::max(norm, 1e-12);
      if (norm > 1e-12) {
        double dot = 0.0;
        for (int c = 0; c < cols; ++c) dot += self.grad[off + c] * self.value.data[off + c];
        for (int c = 0; c < cols; ++c)
          ga[off + c] += (self.grad[off + c] - self.value.data[off + c] * dot) / m;
      } else {
        // Clamped branch: the norm is constant.
        for (int c = 0; c < cols; ++c) ga[off + c] += self.grad[off + c] / m;
      }
    }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::layer_norm_rows(Var x, Var gamma, Var beta, double eps) {
  check_var(x);
  check_var(gamma);
  check_var(beta);
  const Tensor& tx = val(x.id);
  require_rank2(tx, Op::kLayerNormRows);
  const int rows = tx.shape[0], cols = tx.shape[1];
  require(val(gamma.id).numel() == cols && val(beta.id).numel() == cols,
          "layer_norm_rows: gamma/beta length mismatch");
  const Tensor& tg = val(gamma.id);
  const Tensor& tb = val(beta.id);
  Node n;
  n.op = Op::kLayerNormRows;
  n.inputs = {x.id, gamma.id, beta.id};
  n.value = Tensor({rows, cols});
  for (int r = 0; r < rows; ++r) {
    const size_t off = static_cast<size_t>(r) * cols;
    double mean = 0.0;
    for (int c = 0; c < cols; ++c) mean += tx.data[off + c];
    mean /= cols;
    double var = 0.0;
    for (int c = 0; c < cols; ++c) {
      const double d = tx.data[off + c] - mean;
      var += d * d;
    }
    var /= cols;
    const double inv_std = 1.0 / std::sqrt(var + eps);
    for (int c = 0; c < cols; ++c)
      n.value.data[off + c] = tg.data[c] * (tx.data[off + c] - mean) * inv_std + tb.data[c];
  }
  n.backward = [rows, cols, eps](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& vx = g.val(self.inputs[0]);
    const auto& vg = g.val(self.inputs[1]);
    auto& gx = g.grd(self.inputs[0]);
    auto& ggamma = g.grd(self.inputs[1]);
    auto& gbeta = g.grd(self.inputs[2]);
    for (int r = 0; r < rows; ++r) {
      const size_t off = static_cast<size_t>(r) * cols;
      double mean = 0.0;
      for (int c = 0; c < cols; ++c) mean += vx.data[off + c];
      mean /= cols;
      double var = 0.0;
      for (int c = 0; c < cols; ++c) {
        const double d = vx.data[off + c] - mean;
        var += d * d;
      }
      var /= cols;
      const double inv_std = 1.0 / std::sqrt(var + eps);
      // dxhat, plus the two reduced terms of the standard layer-norm backward.
      double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
      for (int c = 0; c < cols; ++c) {
        const double xhat = (vx.data[off + c] - mean) * inv_std;
        const double dxhat = self.grad[off + c] * vg.data[c];
        sum_dxhat += dxhat;
        sum_dxhat_xhat += dxhat * xhat;
        ggamma[c] += self.grad[off + c] * xhat;
        gbeta[c] += self.grad[off + c];
      }
      for (int c = 0; c < cols; ++c) {
        const double xhat = (vx.data[off + c] - mean) * inv_std;
        const double dxhat = self.grad[off + c] * vg.data[c];
        gx[off + c] +=
            inv_std * (dxhat - (sum_dxhat + xhat * sum_dxhat_xhat) / cols);
      }
    }
  };
  return Var{this, push(std::move(n))};
}

// ---------------------------------------------------------------------------
// Similarity / losses

Var Graph::cosine_similarity(Var a, Var b, ZeroNormPolicy policy) {
  check_var(a);
  check_var(b);
  const Tensor& ta = val(a.id);
  const Tensor& tb = val(b.id);
  require(ta.rank() == 1 && tb.rank() == 1 && ta.numel() == tb.numel(),
          "cosine_similarity: expects two equal-length vectors, got " +
              shape_str(ta.shape) + " and " + shape_str(tb.shape));
  const int d = ta.numel();
  double dot = 0.0, na2 = 0.0, nb2 = 0.0;
  for (int i = 0; i < d; ++i) {
    dot += ta.data[i] * tb.data[i];
    na2 += ta.data[i] * ta.data[i];
    nb2 += tb.data[i] * tb.data[i];
  }
  const double na = std::sqrt(na2), nb = std::sqrt(nb2);
  if (policy == ZeroNormPolicy::kError && (na < 1e-12 || nb < 1e-12))
    throw Error("cosine_similarity: zero-norm input");
  const double ma = std::max(na, 1e-12), mb = std::max(nb, 1e-12);
  const double cosv = dot / (ma * mb);
  Node n;
  n.op = Op::kCosineSimilarity;
  n.inputs = {a.id, b.id};
  n.value = Tensor::from({1}, {cosv});
  n.backward = [d, ma, mb, na, nb, cosv](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& va = g.val(self.inputs[0]);
    const auto& vb = g.val(self.inputs[1]);
    auto& ga = g.grd(self.inputs[0]);
    auto& gb = g.grd(self.inputs[1]);
    const double gg = self.grad[0];
    for (int i = 0; i < d; ++i) {
      double da = vb.data[i] / (ma * mb);
      double db = va.data[i] / (ma * mb);
      if (na > 1e-12) da -= cosv * va.data[i] / (ma * ma);
      if (nb > 1e-12) db -= cosv * vb.data[i] / (mb * mb);
      ga[i] += gg * da;
      gb[i] += gg * db;
    }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::soft_cross_entropy_rows(Var s, Var t) {
  check_var(s);
  check_var(t);
  const Tensor& ts = val(s.id);
  const Tensor& tt = val(t.id);
  require_rank2(ts, Op::kSoftCrossEntropyRows);
  require(same_shape(ts.shape, tt.shape), "soft_cross_entropy_rows: shape mismatch " +
                                              shape_str(ts.shape) + " vs " +
                                              shape_str(tt.shape));
  require(!node(t.id).requires_grad,
          "soft_cross_entropy_rows: targets must not require grad");
  const int rows = ts.shape[0], cols = ts.shape[1];
  // Row mask: 1 for counted rows, 0 for skipped all-zero target rows.
  std::vector<char> counted(static_cast<size_t>(rows), 0);
  int n_counted = 0;
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const size_t off = static_cast<size_t>(r) * cols;
    double tsum = 0.0;
    bool all_zero = true;
    for (int c = 0; c < cols; ++c) {
      tsum += tt.data[off + c];
      if (tt.data[off + c] != 0.0) all_zero = false;
    }
    if (all_zero) {
      counters::increment("soft_ce.skipped_rows");
      continue;
    }
    if (std::abs(tsum - 1.0) > 1e-6)
      throw Error("soft_cross_entropy_rows: target row " + std::to_string(r) +
                  " sums to " + std::to_string(tsum));
    counted[static_cast<size_t>(r)] = 1;
    ++n_counted;
    double mx = -1e300;
    for (int c = 0; c < cols; ++c) mx = std::max(mx, ts.data[off + c]);
    double z = 0.0;
    for (int c = 0; c < cols; ++c) z += std::exp(ts.data[off + c] - mx);
    const double lse = mx + std::log(z);
    for (int c = 0; c < cols; ++c)
      loss += tt.data[off + c] * (lse - ts.data[off + c]);
  }
  if (n_counted == 0) {
    log_warn("soft_cross_entropy_rows: all target rows zero; loss is 0");
  } else {
    loss /= n_counted;
  }
  Node n;
  n.op = Op::kSoftCrossEntropyRows;
  n.inputs = {s.id, t.id};
  n.value = Tensor::from({1}, {loss});
  n.backward = [rows, cols, counted, n_counted](Graph& g, int id) {
    if (n_counted == 0) return;
    const auto& self = g.node(id);
    const auto& vs = g.val(self.inputs[0]);
    const auto& vt = g.val(self.inputs[1]);
    auto& gs = g.grd(self.inputs[0]);
    const double gg = self.grad[0] / n_counted;
    for (int r = 0; r < rows; ++r) {
      if (!counted[static_cast<size_t>(r)]) continue;
      const size_t off = static_cast<size_t>(r) * cols;
      double mx = -1e300;
      for (int c = 0; c < cols; ++c) mx = std::max(mx, vs.data[off + c]);
      double z = 0.0;
      for (int c = 0; c < cols; ++c) z += std::exp(vs.data[off + c] - mx);
      for (int c = 0; c < cols; ++c) {
        const double p = std::exp(vs.data[off + c] - mx) / z;
        gs[off + c] += gg * (p - vt.data[off + c]);
      }
    }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::bce_with_logits(Var logits, Var targets) {
  check_var(logits);
  check_var(targets);
  const Tensor& tx = val(logits.id);
  const Tensor& tt = val(targets.id);
  require(same_shape(tx.shape, tt.shape), "bce_with_logits: shape mismatch");
  require(!node(targets.id).requires_grad,
          "bce_with_logits: targets must not require grad");
  const int nelem = tx.numel();
  require(nelem > 0, "bce_with_logits: empty input");
  double loss = 0.0;
  for (int i = 0; i < nelem; ++i) {
    const double x = tx.data[i], t = tt.data[i];
    // Stable form of -t*log(sigmoid(x)) - (1-t)*log(1-sigmoid(x)).
    loss += std::max(x, 0.0) - x * t + std::log1p(std::exp(-std::abs(x)));
  }
  loss /= nelem;
  Node n;
  n.op = Op::kBceWithLogits;
  n.inputs = {logits.id, targets.id};
  n.value = Tensor::from({1}, {loss});
  n.backward = [nelem](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& vx = g.val(self.inputs[0]);
    const auto& vt = g.val(self.inputs[1]);
    auto& gx = g.grd(self.inputs[0]);
    const double gg = self.grad[0] / nelem;
    for (int i = 0; i < nelem; ++i) {
      const double sig = 1.0 / (1.0 + std::exp(-vx.data[i]));
      gx[i] += gg * (sig - vt.data[i]);
    }
  };
  return Var{this, push(std::move(n))};
}

// ---------------------------------------------------------------------------
// Convolutions (decoder path)

Var Graph::conv2d(Var x, Var w, Var b, int stride, int pad) {
  check_var(x);
  check_var(w);
  check_var(b);
  const Tensor& tx = val(x.id);
  const Tensor& tw = val(w.id);
  const Tensor& tb = val(b.id);
  require(tx.rank() == 3 && tw.rank() == 4, "conv2d: x must be CxHxW, w Co x Ci x kh x kw");
  const int ci = tx.shape[0], h = tx.shape[1], wdt = tx.shape[2];
  const int co = tw.shape[0], kh = tw.shape[2], kw = tw.shape[3];
  require(tw.shape[1] == ci, "conv2d: channel mismatch");
  require(tb.numel() == co, "conv2d: bias length mismatch");
  require(stride >= 1 && pad >= 0, "conv2d: bad stride/pad");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (wdt + 2 * pad - kw) / stride + 1;
  require(oh > 0 && ow > 0, "conv2d: empty output");
  Node n;
  n.op = Op::kConv2d;
  n.inputs = {x.id, w.id, b.id};
  n.value = Tensor({co, oh, ow});
  for (int o = 0; o < co; ++o)
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) {
        double acc = tb.data[o];
        for (int c = 0; c < ci; ++c)
          for (int dy = 0; dy < kh; ++dy) {
            const int sy = y * stride + dy - pad;
            if (sy < 0 || sy >= h) continue;
            for (int dx = 0; dx < kw; ++dx) {
              const int sx = xo * stride + dx - pad;
              if (sx < 0 || sx >= wdt) continue;
              acc += tx.at(c, sy, sx) * tw.data[((static_cast<size_t>(o) * ci + c) * kh + dy) * kw + dx];
            }
          }
        n.value.at(o, y, xo) = acc;
      }
  n.backward = [ci, h, wdt, co, kh, kw, oh, ow, stride, pad](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& vx = g.val(self.inputs[0]);
    const auto& vw = g.val(self.inputs[1]);
    auto& gx = g.grd(self.inputs[0]);
    auto& gw = g.grd(self.inputs[1]);
    auto& gb = g.grd(self.inputs[2]);
    for (int o = 0; o < co; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xo = 0; xo < ow; ++xo) {
          const double go = self.grad[(static_cast<size_t>(o) * oh + y) * ow + xo];
          if (go == 0.0) continue;
          gb[o] += go;
          for (int c = 0; c < ci; ++c)
            for (int dy = 0; dy < kh; ++dy) {
              const int sy = y * stride + dy - pad;
              if (sy < 0 || sy >= h) continue;
              for (int dx = 0; dx < kw; ++dx) {
                const int sx = xo * stride + dx - pad;
                if (sx < 0 || sx >= wdt) continue;
                const size_t xi = (static_cast<size_t>(c) * h + sy) * wdt + sx;
                const size_t wi = ((static_cast<size_t>(o) * ci + c) * kh + dy) * kw + dx;
                gx[xi] += go * vw.data[wi];
                gw[wi] += go * vx.data[xi];
              }
            }
        }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::conv_transpose2d(Var x, Var w, Var b, int stride) {
  check_var(x);
  check_var(w);
  check_var(b);
  const Tensor& tx = val(x.id);
  const Tensor& tw = val(w.id);
  const Tensor& tb = val(b.id);
  require(tx.rank() == 3 && tw.rank() == 4,
          "conv_transpose2d: x must be CxHxW, w Ci x Co x kh x kw");
  const int ci = tx.shape[0], h = tx.shape[1], wdt = tx.shape[2];
  require(tw.shape[0] == ci, "conv_transpose2d: channel mismatch");
  const int co = tw.shape[1], kh = tw.shape[2], kw = tw.shape[3];
  require(tb.numel() == co, "conv_transpose2d: bias length mismatch");
  require(stride >= 1, "conv_transpose2d: bad stride");
  const int oh = (h - 1) * stride + kh;
  const int ow = (wdt - 1) * stride + kw;
  Node n;
  n.op = Op::kConvTranspose2d;
  n.inputs = {x.id, w.id, b.id};
  n.value = Tensor({co, oh, ow});
  for (int o = 0; o < co; ++o)
    for (int y = 0; y < oh; ++y)
      for (int xo = 0; xo < ow; ++xo) n.value.at(o, y, xo) = tb.data[o];
  for (int c = 0; c < ci; ++c)
    for (int y = 0; y < h; ++y)
      for (int xi = 0; xi < wdt; ++xi) {
        const double v = tx.at(c, y, xi);
        for (int o = 0; o < co; ++o)
          for (int dy = 0; dy < kh; ++dy)
            for (int dx = 0; dx < kw; ++dx)
              n.value.at(o, y * stride + dy, xi * stride + dx) +=
                  v * tw.data[((static_cast<size_t>(c) * co + o) * kh + dy) * kw + dx];
      }
  n.backward = [ci, h, wdt, co, kh, kw, oh, ow, stride](Graph& g, int id) {
    const auto& self = g.node(id);
    const auto& vx = g.val(self.inputs[0]);
    const auto& vw = g.val(self.inputs[1]);
    auto& gx = g.grd(self.inputs[0]);
    auto& gw = g.grd(self.inputs[1]);
    auto& gb = g.grd(self.inputs[2]);
    for (int o = 0; o < co; ++o)
      for (int y = 0; y < oh; ++y)
        for (int xo = 0; xo < ow; ++xo)
          gb[o] += self.grad[(static_cast<size_t>(o) * oh + y) * ow + xo];
    for (int c = 0; c < ci; ++c)
      for (int y = 0; y < h; ++y)
        for (int xi = 0; xi < wdt; ++xi) {
          const size_t xidx = (static_cast<size_t>(c) * h + y) * wdt + xi;
          for (int o = 0; o < co; ++o)
            for (int dy = 0; dy < kh; ++dy)
              for (int dx = 0; dx < kw; ++dx) {
                const size_t oidx =
                    (static_cast<size_t>(o) * oh + y * stride + dy) * ow + xi * stride + dx;
                const size_t widx = ((static_cast<size_t>(c) * co + o) * kh + dy) * kw + dx;
                gx[xidx] += self.grad[oidx] * vw.data[widx];
                gw[widx] += self.grad[oidx] * vx.data[xidx];
              }
        }
  };
  return Var{this, push(std::move(n))};
}

Var Graph::upsample_bilinear2d(Var x, int out_h, int out_w) {
  check_var(x);
  const Tensor& tx = val(x.id);
  require(tx.rank() == 3, "upsample_bilinear2d: x must be CxHxW");
  require(out_h >= 1 && out_w >= 1, "upsample_bilinear2d: bad output size");
  const int ch = tx.shape[0], h = tx.shape[1], w = tx.shape[2];
  // align_corners=false sampling grid.
  auto src_coord = [](int dst, int in_size, int out_size) {
    double s = (dst + 0.5) * static_cast<double>(in_size) / out_size - 0.5;
    if (s < 0.0) s = 0.0;
    if (s > in_size - 1.0) s = in_size - 1.0;
    return s;
  };
  Node n;
  n.op = Op::kUpsampleBilinear2d;
  n.inputs = {x.id};
  n.value = Tensor({ch, out_h, out_w});
  for (int y = 0; y < out_h; ++y) {
    const double sy = src_coord(y, h, out_h);
    const int y0 = static_cast<int>(sy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double fy = sy - y0;
    for (int xo = 0; xo < out_w; ++xo) {
      const double sx = src_coord(xo, w, out_w);
      const int x0 = static_cast<int>(sx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double fx = sx - x0;
      for (int c = 0; c < ch; ++c) {
        n.value.at(c, y, xo) = (1 - fy) * ((1 - fx) * tx.at(c, y0, x0) + fx * tx.at(c, y0, x1)) +
                               fy * ((1 - fx) * tx.at(c, y1, x0) + fx * tx.at(c, y1, x1));
      }
    }
  }
  n.backward = [ch, h, w, out_h, out_w, src_coord](Graph& g, int id) {
    const auto& self = g.node(id);
    auto& gx = g.grd(self.inputs[0]);
    for (int y = 0; y < out_h; ++y) {
      const double sy = src_coord(y, h, out_h);
      const int y0 = static_cast<int>(sy);
      const int y1 = std::min(y0 + 1, h - 1);
      const double fy = sy - y0;
      for (int xo = 0; xo < out_w; ++xo) {
        const double sx = src_coord(xo, w, out_w);
        const int x0 = static_cast<int>(sx);
        const int x1 = std::min(x0 + 1, w - 1);
        const double fx = sx - x0;
        for (int c = 0; c < ch; ++c) {
          const double go = self.grad[(static_cast<size_t>(c) * out_h + y) * out_w + xo];
          gx[(static_cast<size_t>(c) * h + y0) * w + x0] += go * (1 - fy) * (1 - fx);
          gx[(static_cast<size_t>(c) * h + y0) * w + x1] += go * (1 - fy) * fx;
          gx[(static_cast<size_t>(c) * h + y1) * w + x0] += go * fy * (1 - fx);
          gx[(static_cast<size_t>(c) * h + y1) * w + x1] += go * fy * fx;
        }
      }
    }
  };
  return Var{this, push(std::move(n))};
}

// ---------------------------------------------------------------------------

void Graph::backward(Var loss) {
  check_var(loss);
  require(!backward_done_, "backward() already run on this graph");
  require(val(loss.id).numel() == 1, "backward: loss must be scalar");
  for (auto& n : nodes_) n.grad.assign(n.value.data.size(), 0.0);
  node(loss.id).grad[0] = 1.0;
  for (int i = loss.id; i >= 0; --i) {
    Node& n = node(i);
    if (!n.requires_grad || !n.backward) continue;
    n.backward(*this, i);
  }
  for (auto& n : nodes_) {
    if (n.external != nullptr && n.external->requires_grad) {
      n.external->ensure_grad();
      for (size_t i = 0; i < n.grad.size(); ++i) n.external->grad[i] += n.grad[i];
    }
  }
  backward_done_ = true;
}

Var operator+(Var a, Var b) { return a.g->add(a, b); }
Var operator-(Var a, Var b) { return a.g->sub(a, b); }
Var operator*(Var a, Var b) { return a.g->mul(a, b); }
Var operator/(Var a, Var b) { return a.g->div(a, b); }
Var operator*(Var a, double c) { return a.g->mul_scalar(a, c); }
Var operator*(double c, Var a) { return a.g->mul_scalar(a, c); }
Var operator+(Var a, double c) { return a.g->add_scalar(a, c); }

Var matmul(Var a, Var b) { return a.g->matmul(a, b); }

}  // namespace pcas
