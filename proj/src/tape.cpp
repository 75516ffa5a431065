#include "invenio/tape.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace invenio::ad {

const char* op_name(Op op) {
  switch (op) {
    case Op::Leaf: return "leaf";
    case Op::Const: return "const";
    case Op::Add: return "add";
    case Op::Neg: return "neg";
    case Op::Mul: return "mul";
    case Op::Scale: return "scale";
    case Op::MatMul: return "matmul";
    case Op::Sum: return "sum";
    case Op::RowSum: return "row_sum";
    case Op::RowBroadcast: return "row_broadcast";
    case Op::BroadcastFull: return "broadcast_full";
    case Op::SumToLast: return "sum_to_last";
    case Op::BroadcastLast: return "broadcast_last";
    case Op::Relu: return "relu";
    case Op::ReluMaskMul: return "relu_mask_mul";
    case Op::Sigmoid: return "sigmoid";
    case Op::Softmax: return "softmax";
    case Op::Conv2d: return "conv2d";
    case Op::Conv2dDx: return "conv2d_dx";
    case Op::Conv2dDw: return "conv2d_dw";
    case Op::MaxPool: return "maxpool";
    case Op::MaxPoolScatter: return "maxpool_scatter";
    case Op::MaxPoolGather: return "maxpool_gather";
    case Op::Reshape: return "reshape";
    case Op::Detach: return "detach";
    case Op::BceLogits: return "bce_logits";
    case Op::CeLogits: return "ce_logits";
  }
  return "?";
}

namespace {

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::string Tape::describe(NodeId id) const {
  const Node& n = nodes_[static_cast<size_t>(id)];
  std::string s = "node " + std::to_string(id) + " (" + op_name(n.op);
  if (!n.label.empty()) s += " '" + n.label + "'";
  s += ")";
  return s;
}

void Tape::shape_fail(const std::string& msg, NodeId a, NodeId b) const {
  std::string full = msg + " at " + describe(a);
  if (b != kNoNode) full += " vs " + describe(b);
  throw ShapeError(full);
}

void Tape::check_id(NodeId id, const char* who) const {
  if (id < 0 || static_cast<size_t>(id) >= nodes_.size())
    throw StateError(std::string(who) + ": invalid node id " + std::to_string(id));
}

NodeId Tape::push(Node n) {
  n.from_backward = in_backward_;
  nodes_.push_back(std::move(n));
  values_.emplace_back();
  has_value_.push_back(0);
  return static_cast<NodeId>(nodes_.size() - 1);
}

NodeId Tape::leaf(Tensor value, bool requires_grad, std::string label) {
  Node n;
  n.op = Op::Leaf;
  n.shape = value.shape;
  n.requires_grad = requires_grad;
  n.label = std::move(label);
  NodeId id = push(std::move(n));
  if (prec_ == Precision::f32)
    for (double& v : value.data) v = static_cast<double>(static_cast<float>(v));
  values_[static_cast<size_t>(id)] = std::move(value);
  has_value_[static_cast<size_t>(id)] = 1;
  return id;
}

NodeId Tape::constant(Tensor value, std::string label) {
  Node n;
  n.op = Op::Const;
  n.shape = value.shape;
  n.label = std::move(label);
  NodeId id = push(std::move(n));
  if (prec_ == Precision::f32)
    for (double& v : value.data) v = static_cast<double>(static_cast<float>(v));
  values_[static_cast<size_t>(id)] = std::move(value);
  has_value_[static_cast<size_t>(id)] = 1;
  return id;
}

#define IVN_BINARY_PROLOGUE(name)            \
  check_id(a, name);                         \
  check_id(b, name);                         \
  const Node& na = nodes_[(size_t)a];        \
  const Node& nb = nodes_[(size_t)b];        \
  (void)na;                                  \
  (void)nb;

NodeId Tape::add(NodeId a, NodeId b) {
  IVN_BINARY_PROLOGUE("add");
  if (na.shape != nb.shape) shape_fail("add: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape), a, b);
  Node n;
  n.op = Op::Add;
  n.in = {a, b};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Tape::neg(NodeId a) {
  check_id(a, "neg");
  Node n;
  n.op = Op::Neg;
  n.in = {a, kNoNode};
  n.shape = nodes_[(size_t)a].shape;
  n.requires_grad = nodes_[(size_t)a].requires_grad;
  return push(std::move(n));
}

NodeId Tape::mul(NodeId a, NodeId b) {
  IVN_BINARY_PROLOGUE("mul");
  if (na.shape != nb.shape) shape_fail("mul: shape mismatch " + shape_str(na.shape) + " vs " + shape_str(nb.shape), a, b);
  Node n;
  n.op = Op::Mul;
  n.in = {a, b};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Tape::scale(NodeId a, double c) {
  check_id(a, "scale");
  Node n;
  n.op = Op::Scale;
  n.in = {a, kNoNode};
  n.shape = nodes_[(size_t)a].shape;
  n.scalar = c;
  n.requires_grad = nodes_[(size_t)a].requires_grad;
  return push(std::move(n));
}

NodeId Tape::matmul(NodeId a, NodeId b, bool trans_a, bool trans_b) {
  IVN_BINARY_PROLOGUE("matmul");
  if (na.shape.size() != 2 || nb.shape.size() != 2)
    shape_fail("matmul: operands must be rank-2", a, b);
  int64_t am = trans_a ? na.shape[1] : na.shape[0];
  int64_t ak = trans_a ? na.shape[0] : na.shape[1];
  int64_t bk = trans_b ? nb.shape[1] : nb.shape[0];
  int64_t bn = trans_b ? nb.shape[0] : nb.shape[1];
  if (ak != bk)
    shape_fail("matmul: inner dimensions disagree " + shape_str(na.shape) + (trans_a ? "^T" : "") +
                   " x " + shape_str(nb.shape) + (trans_b ? "^T" : ""),
               a, b);
  Node n;
  n.op = Op::MatMul;
  n.in = {a, b};
  n.shape = {am, bn};
  n.i0 = trans_a ? 1 : 0;
  n.i1 = trans_b ? 1 : 0;
  n.requires_grad = na.requires_grad || nb.requires_grad;
  return push(std::move(n));
}

NodeId Tape::sum(NodeId a) {
  check_id(a, "sum");
  Node n;
  n.op = Op::Sum;
  n.in = {a, kNoNode};
  n.shape = {1};
  n.requires_grad = nodes_[(size_t)a].requires_grad;
  return push(std::move(n));
}

NodeId Tape::mean(NodeId a) {
  check_id(a, "mean");
  int64_t count = shape_numel(nodes_[(size_t)a].shape);
  return scale(sum(a), 1.0 / static_cast<double>(count));
}

NodeId Tape::row_sum(NodeId a) {
  check_id(a, "row_sum");
  const Node& na = nodes_[(size_t)a];
  if (na.shape.size() != 2) shape_fail("row_sum: operand must be rank-2", a);
  Node n;
  n.op = Op::RowSum;
  n.in = {a, kNoNode};
  n.shape = {na.shape[0], 1};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::row_broadcast(NodeId a, int64_t cols) {
  check_id(a, "row_broadcast");
  const Node& na = nodes_[(size_t)a];
  if (na.shape.size() != 2 || na.shape[1] != 1)
    shape_fail("row_broadcast: operand must be [n,1]", a);
  Node n;
  n.op = Op::RowBroadcast;
  n.in = {a, kNoNode};
  n.shape = {na.shape[0], cols};
  n.i0 = cols;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::broadcast_full(NodeId scalar_node, Shape target) {
  check_id(scalar_node, "broadcast_full");
  const Node& na = nodes_[(size_t)scalar_node];
  if (shape_numel(na.shape) != 1) shape_fail("broadcast_full: operand must be scalar", scalar_node);
  Node n;
  n.op = Op::BroadcastFull;
  n.in = {scalar_node, kNoNode};
  n.shape = std::move(target);
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::sum_to_last(NodeId a) {
  check_id(a, "sum_to_last");
  const Node& na = nodes_[(size_t)a];
  if (na.shape.empty()) shape_fail("sum_to_last: operand must have rank >= 1", a);
  Node n;
  n.op = Op::SumToLast;
  n.in = {a, kNoNode};
  n.shape = {na.shape.back()};
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::broadcast_last(NodeId a, Shape target) {
  check_id(a, "broadcast_last");
  const Node& na = nodes_[(size_t)a];
  if (na.shape.size() != 1 || target.empty() || target.back() != na.shape[0])
    shape_fail("broadcast_last: target " + shape_str(target) + " does not end in " + shape_str(na.shape), a);
  Node n;
  n.op = Op::BroadcastLast;
  n.in = {a, kNoNode};
  n.shape = std::move(target);
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::relu(NodeId a) {
  check_id(a, "relu");
  Node n;
  n.op = Op::Relu;
  n.in = {a, kNoNode};
  n.shape = nodes_[(size_t)a].shape;
  n.requires_grad = nodes_[(size_t)a].requires_grad;
  return push(std::move(n));
}

NodeId Tape::sigmoid(NodeId a) {
  check_id(a, "sigmoid");
  Node n;
  n.op = Op::Sigmoid;
  n.in = {a, kNoNode};
  n.shape = nodes_[(size_t)a].shape;
  n.requires_grad = nodes_[(size_t)a].requires_grad;
  return push(std::move(n));
}

NodeId Tape::softmax(NodeId a) {
  check_id(a, "softmax");
  const Node& na = nodes_[(size_t)a];
  if (na.shape.size() != 2) shape_fail("softmax: operand must be [n,c]", a);
  Node n;
  n.op = Op::Softmax;
  n.in = {a, kNoNode};
  n.shape = na.shape;
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::conv2d(NodeId x, NodeId w, int64_t stride, int64_t pad) {
  check_id(x, "conv2d");
  check_id(w, "conv2d");
  const Node& nx = nodes_[(size_t)x];
  const Node& nw = nodes_[(size_t)w];
  if (nx.shape.size() != 4) shape_fail("conv2d: input must be NHWC rank-4", x);
  if (nw.shape.size() != 4) shape_fail("conv2d: weights must be [kh,kw,ci,co]", w);
  if (nx.shape[3] != nw.shape[2])
    shape_fail("conv2d: channel mismatch input " + shape_str(nx.shape) + " weights " + shape_str(nw.shape), x, w);
  if (stride < 1 || pad < 0) throw SpecError("conv2d: invalid stride/pad");
  int64_t ho = (nx.shape[1] + 2 * pad - nw.shape[0]) / stride + 1;
  int64_t wo = (nx.shape[2] + 2 * pad - nw.shape[1]) / stride + 1;
  if (ho < 1 || wo < 1)
    shape_fail("conv2d: kernel larger than padded input " + shape_str(nx.shape), x, w);
  Node n;
  n.op = Op::Conv2d;
  n.in = {x, w};
  n.shape = {nx.shape[0], ho, wo, nw.shape[3]};
  n.i0 = stride;
  n.i1 = pad;
  n.requires_grad = nx.requires_grad || nw.requires_grad;
  return push(std::move(n));
}

NodeId Tape::maxpool(NodeId x, int64_t window) {
  check_id(x, "maxpool");
  const Node& nx = nodes_[(size_t)x];
  if (nx.shape.size() != 4) shape_fail("maxpool: input must be NHWC rank-4", x);
  if (window < 1) throw SpecError("maxpool: invalid window");
  int64_t ho = nx.shape[1] / window;
  int64_t wo = nx.shape[2] / window;
  if (ho < 1 || wo < 1) shape_fail("maxpool: window larger than input " + shape_str(nx.shape), x);
  Node n;
  n.op = Op::MaxPool;
  n.in = {x, kNoNode};
  n.shape = {nx.shape[0], ho, wo, nx.shape[3]};
  n.i0 = window;
  n.requires_grad = nx.requires_grad;
  return push(std::move(n));
}

NodeId Tape::reshape(NodeId a, Shape target) {
  check_id(a, "reshape");
  const Node& na = nodes_[(size_t)a];
  if (shape_numel(na.shape) != shape_numel(target))
    shape_fail("reshape: element count mismatch " + shape_str(na.shape) + " -> " + shape_str(target), a);
  Node n;
  n.op = Op::Reshape;
  n.in = {a, kNoNode};
  n.shape = std::move(target);
  n.requires_grad = na.requires_grad;
  return push(std::move(n));
}

NodeId Tape::detach(NodeId a) {
  check_id(a, "detach");
  Node n;
  n.op = Op::Detach;
  n.in = {a, kNoNode};
  n.shape = nodes_[(size_t)a].shape;
  n.requires_grad = false;
  return push(std::move(n));
}

NodeId Tape::bce_logits(NodeId logits, NodeId targets) {
  check_id(logits, "bce_logits");
  check_id(targets, "bce_logits");
  const Node& nz = nodes_[(size_t)logits];
  const Node& nt = nodes_[(size_t)targets];
  if (nz.shape.size() != 1) shape_fail("bce_logits: logits must be rank-1 [n]", logits);
  if (nt.shape != nz.shape)
    shape_fail("bce_logits: targets shape " + shape_str(nt.shape) + " != logits " + shape_str(nz.shape),
               targets, logits);
  Node n;
  n.op = Op::BceLogits;
  n.in = {logits, targets};
  n.shape = {1};
  n.requires_grad = nz.requires_grad;
  return push(std::move(n));
}

NodeId Tape::ce_logits(NodeId logits, NodeId labels) {
  check_id(logits, "ce_logits");
  check_id(labels, "ce_logits");
  const Node& nz = nodes_[(size_t)logits];
  const Node& nl = nodes_[(size_t)labels];
  if (nz.shape.size() != 2) shape_fail("ce_logits: logits must be [n,c]", logits);
  if (nl.shape.size() != 1 || nl.shape[0] != nz.shape[0])
    shape_fail("ce_logits: labels must be [n]", labels, logits);
  Node n;
  n.op = Op::CeLogits;
  n.in = {logits, labels};
  n.shape = {1};
  n.requires_grad = nz.requires_grad;
  return push(std::move(n));
}

NodeId Tape::linear(NodeId x, NodeId w, NodeId b) {
  NodeId y = matmul(x, w);
  const Node& nb = nodes_[(size_t)b];
  if (nb.shape.size() != 1 || nb.shape[0] != nodes_[(size_t)y].shape[1])
    shape_fail("linear: bias shape " + shape_str(nb.shape) + " != output columns", b, y);
  return add(y, broadcast_last(b, nodes_[(size_t)y].shape));
}

NodeId Tape::conv_layer(NodeId x, NodeId w, NodeId b, int64_t stride, int64_t pad) {
  NodeId y = conv2d(x, w, stride, pad);
  const Node& nb = nodes_[(size_t)b];
  if (nb.shape.size() != 1 || nb.shape[0] != nodes_[(size_t)y].shape[3])
    shape_fail("conv_layer: bias shape " + shape_str(nb.shape) + " != output channels", b, y);
  return add(y, broadcast_last(b, nodes_[(size_t)y].shape));
}

// --- evaluation -------------------------------------------------------------

bool Tape::has_value(NodeId id) const {
  check_id(id, "has_value");
  return has_value_[(size_t)id] != 0;
}

const Tensor& Tape::value(NodeId id) const {
  check_id(id, "value");
  if (!has_value_[(size_t)id])
    throw StateError("value: " + describe(id) + " has not been evaluated; call forward()");
  return values_[(size_t)id];
}

void Tape::forward() {
  for (size_t i = 0; i < nodes_.size(); ++i)
    if (!has_value_[i]) eval_node(static_cast<NodeId>(i));
}

void Tape::eval_node(NodeId id) {
  Node& n = nodes_[(size_t)id];
  auto in0 = [&]() -> const Tensor& { return values_[(size_t)n.in[0]]; };
  auto in1 = [&]() -> const Tensor& { return values_[(size_t)n.in[1]]; };
  Tensor out(n.shape);

  switch (n.op) {
    case Op::Leaf:
    case Op::Const:
      throw StateError("forward: unbound leaf at " + describe(id));
    case Op::Add: {
      const Tensor& x = in0();
      const Tensor& y = in1();
      for (int64_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
      break;
    }
    case Op::Neg: {
      const Tensor& x = in0();
      for (int64_t i = 0; i < out.size(); ++i) out[i] = -x[i];
      break;
    }
    case Op::Mul: {
      const Tensor& x = in0();
      const Tensor& y = in1();
      for (int64_t i = 0; i < out.size(); ++i) out[i] = x[i] * y[i];
      break;
    }
    case Op::Scale: {
      const Tensor& x = in0();
      for (int64_t i = 0; i < out.size(); ++i) out[i] = x[i] * n.scalar;
      break;
    }
    case Op::MatMul: {
      const Tensor& a = in0();
      const Tensor& b = in1();
      bool ta = n.i0 != 0, tb = n.i1 != 0;
      int64_t m = n.shape[0], p = n.shape[1];
      int64_t k = ta ? a.shape[0] : a.shape[1];
      auto A = [&](int64_t i, int64_t j) { return ta ? a.at2(j, i) : a.at2(i, j); };
      auto B = [&](int64_t i, int64_t j) { return tb ? b.at2(j, i) : b.at2(i, j); };
      for (int64_t i = 0; i < m; ++i)
        for (int64_t j = 0; j < p; ++j) {
          double acc = 0.0;
          for (int64_t l = 0; l < k; ++l) acc += A(i, l) * B(l, j);
          out.at2(i, j) = acc;
        }
      break;
    }
    case Op::Sum: {
      const Tensor& x = in0();
      double acc = 0.0;
      for (int64_t i = 0; i < x.size(); ++i) acc += x[i];
      out[0] = acc;
      break;
    }
    case Op::RowSum: {
      const Tensor& x = in0();
      int64_t rows = x.shape[0], cols = x.shape[1];
      for (int64_t r = 0; r < rows; ++r) {
        double acc = 0.0;
        for (int64_t c = 0; c < cols; ++c) acc += x.at2(r, c);
        out.at2(r, 0) = acc;
      }
      break;
    }
    case Op::RowBroadcast: {
      const Tensor& x = in0();
      int64_t rows = out.shape[0], cols = out.shape[1];
      for (int64_t r = 0; r < rows; ++r)
        for (int64_t c = 0; c < cols; ++c) out.at2(r, c) = x.at2(r, 0);
      break;
    }
    case Op::BroadcastFull: {
      const Tensor& x = in0();
      for (int64_t i = 0; i < out.size(); ++i) out[i] = x[0];
      break;
    }
    case Op::SumToLast: {
      const Tensor& x = in0();
      int64_t last = out.shape[0];
      int64_t groups = x.size() / last;
      for (int64_t g = 0; g < groups; ++g)
        for (int64_t c = 0; c < last; ++c) out[c] += x[g * last + c];
      break;
    }
    case Op::BroadcastLast: {
      const Tensor& x = in0();
      int64_t last = x.shape[0];
      int64_t groups = out.size() / last;
      for (int64_t g = 0; g < groups; ++g)
        for (int64_t c = 0; c < last; ++c) out[g * last + c] = x[c];
      break;
    }
    case Op::Relu: {
      const Tensor& x = in0();
      for (int64_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? x[i] : 0.0;
      break;
    }
    case Op::ReluMaskMul: {
      const Tensor& g = in0();
      const Tensor& x = values_[(size_t)n.ref];
      for (int64_t i = 0; i < out.size(); ++i) out[i] = x[i] > 0.0 ? g[i] : 0.0;
      break;
    }
    case Op::Sigmoid: {
      const Tensor& x = in0();
      for (int64_t i = 0; i < out.size(); ++i) out[i] = stable_sigmoid(x[i]);
      break;
    }
    case Op::Softmax: {
      const Tensor& x = in0();
      int64_t rows = x.shape[0], cols = x.shape[1];
      for (int64_t r = 0; r < rows; ++r) {
        double mx = x.at2(r, 0);
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, x.at2(r, c));
        double denom = 0.0;
        for (int64_t c = 0; c < cols; ++c) denom += std::exp(x.at2(r, c) - mx);
        for (int64_t c = 0; c < cols; ++c) out.at2(r, c) = std::exp(x.at2(r, c) - mx) / denom;
      }
      break;
    }
    case Op::Conv2d: {
      const Tensor& x = in0();
      const Tensor& w = in1();
      int64_t s = n.i0, p = n.i1;
      int64_t N = x.shape[0], H = x.shape[1], W = x.shape[2], CI = x.shape[3];
      int64_t KH = w.shape[0], KW = w.shape[1], CO = w.shape[3];
      int64_t HO = n.shape[1], WO = n.shape[2];
      for (int64_t b = 0; b < N; ++b)
        for (int64_t oh = 0; oh < HO; ++oh)
          for (int64_t ow = 0; ow < WO; ++ow)
            for (int64_t kh = 0; kh < KH; ++kh) {
              int64_t ih = oh * s + kh - p;
              if (ih < 0 || ih >= H) continue;
              for (int64_t kw = 0; kw < KW; ++kw) {
                int64_t iw = ow * s + kw - p;
                if (iw < 0 || iw >= W) continue;
                for (int64_t co = 0; co < CO; ++co) {
                  double acc = 0.0;
                  for (int64_t ci = 0; ci < CI; ++ci)
                    acc += x.at4(b, ih, iw, ci) * w.data[(size_t)(((kh * KW + kw) * CI + ci) * CO + co)];
                  out.at4(b, oh, ow, co) += acc;
                }
              }
            }
      break;
    }
    case Op::Conv2dDx: {
      // out has the original input shape; in0 = upstream grad (output shape),
      // in1 = weights
      const Tensor& g = in0();
      const Tensor& w = in1();
      int64_t s = n.i0, p = n.i1;
      int64_t N = g.shape[0], HO = g.shape[1], WO = g.shape[2], CO = g.shape[3];
      int64_t KH = w.shape[0], KW = w.shape[1], CI = w.shape[2];
      int64_t H = n.shape[1], W = n.shape[2];
      for (int64_t b = 0; b < N; ++b)
        for (int64_t oh = 0; oh < HO; ++oh)
          for (int64_t ow = 0; ow < WO; ++ow)
            for (int64_t kh = 0; kh < KH; ++kh) {
              int64_t ih = oh * s + kh - p;
              if (ih < 0 || ih >= H) continue;
              for (int64_t kw = 0; kw < KW; ++kw) {
                int64_t iw = ow * s + kw - p;
                if (iw < 0 || iw >= W) continue;
                for (int64_t co = 0; co < CO; ++co) {
                  double gv = g.at4(b, oh, ow, co);
                  for (int64_t ci = 0; ci < CI; ++ci)
                    out.at4(b, ih, iw, ci) += gv * w.data[(size_t)(((kh * KW + kw) * CI + ci) * CO + co)];
                }
              }
            }
      break;
    }
    case Op::Conv2dDw: {
      // out has weight shape; in0 = original input x, in1 = upstream grad
      const Tensor& x = in0();
      const Tensor& g = in1();
      int64_t s = n.i0, p = n.i1;
      int64_t N = x.shape[0], H = x.shape[1], W = x.shape[2], CI = x.shape[3];
      int64_t HO = g.shape[1], WO = g.shape[2], CO = g.shape[3];
      int64_t KH = n.shape[0], KW = n.shape[1];
      for (int64_t b = 0; b < N; ++b)
        for (int64_t oh = 0; oh < HO; ++oh)
          for (int64_t ow = 0; ow < WO; ++ow)
            for (int64_t kh = 0; kh < KH; ++kh) {
              int64_t ih = oh * s + kh - p;
              if (ih < 0 || ih >= H) continue;
              for (int64_t kw = 0; kw < KW; ++kw) {
                int64_t iw = ow * s + kw - p;
                if (iw < 0 || iw >= W) continue;
                for (int64_t co = 0; co < CO; ++co) {
                  double gv = g.at4(b, oh, ow, co);
                  for (int64_t ci = 0; ci < CI; ++ci)
                    out.data[(size_t)(((kh * KW + kw) * CI + ci) * CO + co)] += x.at4(b, ih, iw, ci) * gv;
                }
              }
            }
      break;
    }
    case Op::MaxPool: {
      const Tensor& x = in0();
      int64_t k = n.i0;
      int64_t N = x.shape[0], C = x.shape[3];
      int64_t HO = n.shape[1], WO = n.shape[2];
      auto& argmax = pool_argmax_[id];
      argmax.assign((size_t)out.size(), 0);
      int64_t o = 0;
      for (int64_t b = 0; b < N; ++b)
        for (int64_t oh = 0; oh < HO; ++oh)
          for (int64_t ow = 0; ow < WO; ++ow)
            for (int64_t c = 0; c < C; ++c, ++o) {
              double best = -std::numeric_limits<double>::infinity();
              int64_t best_idx = 0;
              for (int64_t kh = 0; kh < k; ++kh)
                for (int64_t kw = 0; kw < k; ++kw) {
                  int64_t ih = oh * k + kh, iw = ow * k + kw;
                  int64_t flat = ((b * x.shape[1] + ih) * x.shape[2] + iw) * C + c;
                  if (x[flat] > best) {  // first max wins ties
                    best = x[flat];
                    best_idx = flat;
                  }
                }
              out[o] = best;
              argmax[(size_t)o] = best_idx;
            }
      break;
    }
    case Op::MaxPoolScatter: {
      const Tensor& g = in0();
      const auto& argmax = pool_argmax_.at(n.ref);
      for (size_t o = 0; o < argmax.size(); ++o) out[argmax[o]] += g[(int64_t)o];
      break;
    }
    case Op::MaxPoolGather: {
      const Tensor& u = in0();
      const auto& argmax = pool_argmax_.at(n.ref);
      for (size_t o = 0; o < argmax.size(); ++o) out[(int64_t)o] = u[argmax[o]];
      break;
    }
    case Op::Reshape:
    case Op::Detach: {
      out.data = in0().data;
      break;
    }
    case Op::BceLogits: {
      const Tensor& z = in0();
      const Tensor& y = in1();
      double acc = 0.0;
      for (int64_t i = 0; i < z.size(); ++i) {
        double zi = z[i];
        // max(z,0) - z*y + log(1 + exp(-|z|))
        acc += std::max(zi, 0.0) - zi * y[i] + std::log1p(std::exp(-std::fabs(zi)));
      }
      out[0] = acc / static_cast<double>(z.size());
      break;
    }
    case Op::CeLogits: {
      const Tensor& z = in0();
      const Tensor& y = in1();
      int64_t rows = z.shape[0], cols = z.shape[1];
      double acc = 0.0;
      for (int64_t r = 0; r < rows; ++r) {
        int64_t lbl = static_cast<int64_t>(y[r]);
        if (lbl < 0 || lbl >= cols)
          throw DataError("ce_logits: label " + std::to_string(lbl) + " out of range at row " +
                          std::to_string(r));
        double mx = z.at2(r, 0);
        for (int64_t c = 1; c < cols; ++c) mx = std::max(mx, z.at2(r, c));
        double lse = 0.0;
        for (int64_t c = 0; c < cols; ++c) lse += std::exp(z.at2(r, c) - mx);
        acc += std::log(lse) + mx - z.at2(r, lbl);
      }
      out[0] = acc / static_cast<double>(rows);
      break;
    }
  }

  if (prec_ == Precision::f32)
    for (double& v : out.data) v = static_cast<double>(static_cast<float>(v));
  values_[(size_t)id] = std::move(out);
  has_value_[(size_t)id] = 1;
}

// --- backward ----------------------------------------------------------------

void Tape::accumulate(std::vector<NodeId>& adj, NodeId target, NodeId contrib) {
  if (!nodes_[(size_t)target].requires_grad) return;
  adj[(size_t)target] = adj[(size_t)target] == kNoNode ? contrib : add(adj[(size_t)target], contrib);
}

void Tape::build_vjps(NodeId id, NodeId g, std::vector<NodeId>& adj) {
  const Node n = nodes_[(size_t)id];  // copy: nodes_ may reallocate while we append
  switch (n.op) {
    case Op::Leaf:
    case Op::Const:
    case Op::Detach:
      break;
    case Op::Add:
      accumulate(adj, n.in[0], g);
      accumulate(adj, n.in[1], g);
      break;
    case Op::Neg:
      accumulate(adj, n.in[0], neg(g));
      break;
    case Op::Mul:
      if (nodes_[(size_t)n.in[0]].requires_grad) accumulate(adj, n.in[0], mul(g, n.in[1]));
      if (nodes_[(size_t)n.in[1]].requires_grad) accumulate(adj, n.in[1], mul(g, n.in[0]));
      break;
    case Op::Scale:
      accumulate(adj, n.in[0], scale(g, n.scalar));
      break;
    case Op::MatMul: {
      bool ta = n.i0 != 0, tb = n.i1 != 0;
      if (nodes_[(size_t)n.in[0]].requires_grad) {
        NodeId ga = ta ? matmul(n.in[1], g, tb, true) : matmul(g, n.in[1], false, !tb);
        accumulate(adj, n.in[0], ga);
      }
      if (nodes_[(size_t)n.in[1]].requires_grad) {
        NodeId gb = tb ? matmul(g, n.in[0], true, ta) : matmul(n.in[0], g, !ta, false);
        accumulate(adj, n.in[1], gb);
      }
      break;
    }
    case Op::Sum:
      accumulate(adj, n.in[0], broadcast_full(g, nodes_[(size_t)n.in[0]].shape));
      break;
    case Op::RowSum:
      accumulate(adj, n.in[0], row_broadcast(g, nodes_[(size_t)n.in[0]].shape[1]));
      break;
    case Op::RowBroadcast:
      accumulate(adj, n.in[0], row_sum(g));
      break;
    case Op::BroadcastFull:
      accumulate(adj, n.in[0], reshape(sum(g), nodes_[(size_t)n.in[0]].shape));
      break;
    case Op::SumToLast:
      accumulate(adj, n.in[0], broadcast_last(g, nodes_[(size_t)n.in[0]].shape));
      break;
    case Op::BroadcastLast:
      accumulate(adj, n.in[0], sum_to_last(g));
      break;
    case Op::Relu: {
      Node m;
      m.op = Op::ReluMaskMul;
      m.in = {g, kNoNode};
      m.ref = n.in[0];
      m.shape = n.shape;
      m.requires_grad = nodes_[(size_t)g].requires_grad;
      accumulate(adj, n.in[0], push(std::move(m)));
      break;
    }
    case Op::ReluMaskMul: {
      Node m;
      m.op = Op::ReluMaskMul;
      m.in = {g, kNoNode};
      m.ref = n.ref;
      m.shape = n.shape;
      m.requires_grad = nodes_[(size_t)g].requires_grad;
      accumulate(adj, n.in[0], push(std::move(m)));
      break;
    }
    case Op::Sigmoid: {
      // d/dx = g * s * (1 - s), built from the forward output node
      NodeId ones = constant(Tensor::ones(n.shape));
      NodeId ds = mul(mul(g, id), sub(ones, id));
      accumulate(adj, n.in[0], ds);
      break;
    }
    case Op::Softmax: {
      // d/dx = s .* (g - rowsum(g .* s))
      NodeId gs = mul(g, id);
      NodeId corr = row_broadcast(row_sum(gs), n.shape[1]);
      accumulate(adj, n.in[0], mul(id, sub(g, corr)));
      break;
    }
    case Op::Conv2d: {
      if (nodes_[(size_t)n.in[0]].requires_grad) {
        Node m;
        m.op = Op::Conv2dDx;
        m.in = {g, n.in[1]};
        m.shape = nodes_[(size_t)n.in[0]].shape;
        m.i0 = n.i0;
        m.i1 = n.i1;
        m.requires_grad = nodes_[(size_t)g].requires_grad || nodes_[(size_t)n.in[1]].requires_grad;
        accumulate(adj, n.in[0], push(std::move(m)));
      }
      if (nodes_[(size_t)n.in[1]].requires_grad) {
        Node m;
        m.op = Op::Conv2dDw;
        m.in = {n.in[0], g};
        m.shape = nodes_[(size_t)n.in[1]].shape;
        m.i0 = n.i0;
        m.i1 = n.i1;
        m.requires_grad = nodes_[(size_t)g].requires_grad || nodes_[(size_t)n.in[0]].requires_grad;
        accumulate(adj, n.in[1], push(std::move(m)));
      }
      break;
    }
    case Op::Conv2dDx: {
      // z = Cdx(g0, w); <u,z> = <g0, C(u,w)> = <w, Cdw(u,g0)>
      if (nodes_[(size_t)n.in[0]].requires_grad) {
        Node m;
        m.op = Op::Conv2d;
        m.in = {g, n.in[1]};
        m.shape = nodes_[(size_t)n.in[0]].shape;
        m.i0 = n.i0;
        m.i1 = n.i1;
        m.requires_grad = nodes_[(size_t)g].requires_grad || nodes_[(size_t)n.in[1]].requires_grad;
        accumulate(adj, n.in[0], push(std::move(m)));
      }
      if (nodes_[(size_t)n.in[1]].requires_grad) {
        Node m;
        m.op = Op::Conv2dDw;
        m.in = {g, n.in[0]};
        m.shape = nodes_[(size_t)n.in[1]].shape;
        m.i0 = n.i0;
        m.i1 = n.i1;
        m.requires_grad = nodes_[(size_t)g].requires_grad || nodes_[(size_t)n.in[0]].requires_grad;
        accumulate(adj, n.in[1], push(std::move(m)));
      }
      break;
    }
    case Op::Conv2dDw: {
      // z = Cdw(x, g0); <u,z> = <g0, C(x,u)>
      if (nodes_[(size_t)n.in[0]].requires_grad) {
        Node m;
        m.op = Op::Conv2dDx;
        m.in = {n.in[1], g};
        m.shape = nodes_[(size_t)n.in[0]].shape;
        m.i0 = n.i0;
        m.i1 = n.i1;
        m.requires_grad = nodes_[(size_t)n.in[1]].requires_grad || nodes_[(size_t)g].requires_grad;
        accumulate(adj, n.in[0], push(std::move(m)));
      }
      if (nodes_[(size_t)n.in[1]].requires_grad) {
        Node m;
        m.op = Op::Conv2d;
        m.in = {n.in[0], g};
        m.shape = nodes_[(size_t)n.in[1]].shape;
        m.i0 = n.i0;
        m.i1 = n.i1;
        m.requires_grad = nodes_[(size_t)n.in[0]].requires_grad || nodes_[(size_t)g].requires_grad;
        accumulate(adj, n.in[1], push(std::move(m)));
      }
      break;
    }
    case Op::MaxPool: {
      Node m;
      m.op = Op::MaxPoolScatter;
      m.in = {g, kNoNode};
      m.ref = id;
      m.shape = nodes_[(size_t)n.in[0]].shape;
      m.requires_grad = nodes_[(size_t)g].requires_grad;
      accumulate(adj, n.in[0], push(std::move(m)));
      break;
    }
    case Op::MaxPoolScatter: {
      Node m;
      m.op = Op::MaxPoolGather;
      m.in = {g, kNoNode};
      m.ref = n.ref;
      m.shape = nodes_[(size_t)n.in[0]].shape;
      m.requires_grad = nodes_[(size_t)g].requires_grad;
      accumulate(adj, n.in[0], push(std::move(m)));
      break;
    }
    case Op::MaxPoolGather: {
      Node m;
      m.op = Op::MaxPoolScatter;
      m.in = {g, kNoNode};
      m.ref = n.ref;
      m.shape = nodes_[(size_t)n.in[0]].shape;
      m.requires_grad = nodes_[(size_t)g].requires_grad;
      accumulate(adj, n.in[0], push(std::move(m)));
      break;
    }
    case Op::Reshape:
      accumulate(adj, n.in[0], reshape(g, nodes_[(size_t)n.in[0]].shape));
      break;
    case Op::BceLogits: {
      // dz = (sigmoid(z) - y) * g / n
      NodeId z = n.in[0];
      NodeId diff = sub(sigmoid(z), n.in[1]);
      NodeId gb = broadcast_full(g, nodes_[(size_t)z].shape);
      double inv_n = 1.0 / static_cast<double>(shape_numel(nodes_[(size_t)z].shape));
      accumulate(adj, z, scale(mul(diff, gb), inv_n));
      break;
    }
    case Op::CeLogits: {
      // dz = (softmax(z) - onehot(y)) * g / n
      NodeId z = n.in[0];
      const Shape zs = nodes_[(size_t)z].shape;          // copy: pushes reallocate
      const Tensor y = values_[(size_t)n.in[1]];
      Tensor onehot(zs);
      for (int64_t r = 0; r < zs[0]; ++r) onehot.at2(r, static_cast<int64_t>(y[r])) = 1.0;
      NodeId diff = sub(softmax(z), constant(std::move(onehot)));
      NodeId gb = broadcast_full(g, zs);
      accumulate(adj, z, scale(mul(diff, gb), 1.0 / static_cast<double>(zs[0])));
      break;
    }
  }
}

std::vector<NodeId> Tape::backward(NodeId root, std::span<const NodeId> wrt, const Tensor* seed) {
  check_id(root, "backward");
  if (!has_value_[(size_t)root])
    throw StateError("backward before forward: " + describe(root) + " has no value");

  Tensor seed_t = seed ? *seed : Tensor::ones(nodes_[(size_t)root].shape);
  if (seed_t.shape != nodes_[(size_t)root].shape)
    throw ShapeError("backward: seed shape " + shape_str(seed_t.shape) + " != root shape " +
                     shape_str(nodes_[(size_t)root].shape));

  in_backward_ = true;
  std::vector<NodeId> adj(static_cast<size_t>(root) + 1, kNoNode);
  if (nodes_[(size_t)root].requires_grad) adj[(size_t)root] = constant(std::move(seed_t), "seed");

  for (NodeId id = root; id >= 0; --id) {
    if (adj[(size_t)id] == kNoNode) continue;
    // Nodes flagged from_backward at an id <= root were emitted by an earlier
    // backward(); giving them an adjoint means differentiating the gradient.
    if (nodes_[(size_t)id].from_backward && !higher_order_) {
      in_backward_ = false;
      throw CapabilityError(
          "backward: differentiating through a previous backward requires a "
          "higher_order_capable tape (" + describe(id) + ")");
    }
    build_vjps(id, adj[(size_t)id], adj);
  }
  in_backward_ = false;

  forward();

  std::vector<NodeId> out;
  out.reserve(wrt.size());
  for (NodeId id : wrt) {
    check_id(id, "backward(wrt)");
    if (id <= root && adj[(size_t)id] != kNoNode) {
      out.push_back(adj[(size_t)id]);
    } else {
      NodeId z = constant(Tensor::zeros(nodes_[(size_t)id].shape));
      out.push_back(z);
    }
  }
  return out;
}

}  // namespace invenio::ad
