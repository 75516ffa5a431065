#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "invenio/tensor.hpp"

namespace invenio::ad {

using NodeId = int32_t;
inline constexpr NodeId kNoNode = -1;

enum class Op : uint8_t {
  Leaf,
  Const,
  Add,
  Neg,
  Mul,
  Scale,
  MatMul,         // i0/i1 = transpose flags
  Sum,            // -> [1]
  RowSum,         // [n,c] -> [n,1]
  RowBroadcast,   // [n,1] -> [n,c]
  BroadcastFull,  // [1] -> shape
  SumToLast,      // [..., L] -> [L]
  BroadcastLast,  // [L] -> shape with trailing L
  Relu,
  ReluMaskMul,  // g * 1[x>0], mask from ref node's value
  Sigmoid,
  Softmax,        // rowwise on [n,c]
  Conv2d,         // NHWC x, [kh,kw,ci,co] w; i0=stride, i1=pad
  Conv2dDx,       // adjoint of Conv2d w.r.t. x
  Conv2dDw,       // adjoint of Conv2d w.r.t. w
  MaxPool,        // i0 = window (stride == window); argmax recorded at eval
  MaxPoolScatter, // scatter pooled-shape values back through the argmax of ref
  MaxPoolGather,  // gather input-shape values at the argmax of ref
  Reshape,
  Detach,     // identity value, gradient barrier
  BceLogits,  // mean binary cross-entropy on logits [n]; in1 = targets const
  CeLogits,   // mean multiclass cross-entropy on logits [n,c]; in1 = labels const
};

const char* op_name(Op op);

struct Node {
  Op op = Op::Const;
  std::array<NodeId, 2> in{kNoNode, kNoNode};
  NodeId ref = kNoNode;  // auxiliary reference (relu input, pool node)
  Shape shape;
  double scalar = 0.0;  // Scale factor
  int64_t i0 = 0;       // op-specific: stride / window / transpose flag / columns
  int64_t i1 = 0;       // op-specific: pad / transpose flag
  bool requires_grad = false;
  bool from_backward = false;  // emitted by a backward() pass
  std::string label;           // optional, used in error messages
};

enum class Precision : uint8_t { f64, f32 };

// Reverse-mode tape. Ops are recorded with full shape checking, values are
// produced by forward(). backward() appends the adjoint computation to the
// tape as ordinary nodes, so gradients are themselves differentiable and a
// second backward() gives exact second-order terms (Hessian-vector products)
// when the tape was created higher_order_capable.
class Tape {
 public:
  explicit Tape(bool higher_order_capable = true, Precision prec = Precision::f64)
      : higher_order_(higher_order_capable), prec_(prec) {}

  bool higher_order_capable() const { return higher_order_; }
  size_t size() const { return nodes_.size(); }
  const Node& node(NodeId id) const { return nodes_.at(static_cast<size_t>(id)); }

  // --- leaves -------------------------------------------------------------
  NodeId leaf(Tensor value, bool requires_grad = false, std::string label = {});
  NodeId constant(Tensor value, std::string label = {});

  // --- ops ----------------------------------------------------------------
  NodeId add(NodeId a, NodeId b);
  NodeId neg(NodeId a);
  NodeId sub(NodeId a, NodeId b) { return add(a, neg(b)); }
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double c);
  NodeId matmul(NodeId a, NodeId b, bool trans_a = false, bool trans_b = false);
  NodeId sum(NodeId a);
  NodeId mean(NodeId a);
  NodeId row_sum(NodeId a);
  NodeId row_broadcast(NodeId a, int64_t cols);
  NodeId broadcast_full(NodeId scalar_node, Shape target);
  NodeId sum_to_last(NodeId a);
  NodeId broadcast_last(NodeId a, Shape target);
  NodeId relu(NodeId a);
  NodeId sigmoid(NodeId a);
  NodeId softmax(NodeId a);
  NodeId conv2d(NodeId x, NodeId w, int64_t stride = 1, int64_t pad = 0);
  NodeId maxpool(NodeId x, int64_t window);
  NodeId reshape(NodeId a, Shape target);
  NodeId detach(NodeId a);
  NodeId bce_logits(NodeId logits, NodeId targets);
  NodeId ce_logits(NodeId logits, NodeId labels);

  // linear layer: x [n,in] * w [in,out] + row-broadcast bias [out]
  NodeId linear(NodeId x, NodeId w, NodeId b);
  // conv layer with per-channel bias [co]
  NodeId conv_layer(NodeId x, NodeId w, NodeId b, int64_t stride, int64_t pad);

  // --- execution ----------------------------------------------------------
  // Evaluates every node recorded so far that has no value yet.
  void forward();
  bool has_value(NodeId id) const;
  const Tensor& value(NodeId id) const;

  // Reverse pass from `root` (gradient of seed . root w.r.t. each id in
  // `wrt`). The default seed is all-ones. Appends adjoint nodes, evaluates
  // them, and returns one node per requested id (zero tensors where root
  // does not depend on the id). Throws StateError if forward() has not been
  // run, CapabilityError when differentiating through a previous backward on
  // a tape built without higher-order support.
  std::vector<NodeId> backward(NodeId root, std::span<const NodeId> wrt,
                               const Tensor* seed = nullptr);

 private:
  NodeId push(Node n);
  void check_id(NodeId id, const char* who) const;
  void eval_node(NodeId id);
  void build_vjps(NodeId id, NodeId adjoint, std::vector<NodeId>& adj);
  void accumulate(std::vector<NodeId>& adj, NodeId target, NodeId contrib);
  [[noreturn]] void shape_fail(const std::string& msg, NodeId a, NodeId b = kNoNode) const;
  std::string describe(NodeId id) const;

  std::vector<Node> nodes_;
  std::vector<Tensor> values_;
  std::vector<uint8_t> has_value_;
  std::unordered_map<NodeId, std::vector<int64_t>> pool_argmax_;
  bool higher_order_;
  Precision prec_;
  bool in_backward_ = false;
};

}  // namespace invenio::ad
