#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "invenio/dataset.hpp"
#include "invenio/tape.hpp"
#include "invenio/tensor.hpp"

namespace invenio::models {

enum class LossKind : uint8_t { BinaryBce = 0, MulticlassCe = 1 };

enum class LayerKind : uint8_t { Conv, MaxPool, Linear, Relu };

struct Layer {
  LayerKind kind;
  int64_t out = 0;     // conv: out channels; linear: out features
  int64_t kernel = 0;  // conv kernel / pool window
  int64_t stride = 1;
  int64_t pad = 0;

  static Layer conv(int64_t out_ch, int64_t kernel, int64_t stride, int64_t pad = 0) {
    return {LayerKind::Conv, out_ch, kernel, stride, pad};
  }
  static Layer maxpool(int64_t window) { return {LayerKind::MaxPool, 0, window, window, 0}; }
  static Layer linear(int64_t out_features) { return {LayerKind::Linear, out_features, 0, 1, 0}; }
  static Layer relu() { return {LayerKind::Relu, 0, 0, 1, 0}; }
};

// A parameter tensor slot derived from the architecture (weight or bias).
struct ParamSlot {
  Shape shape;
  int64_t offset = 0;  // into the flat vector
  int64_t fan_in = 0;
  std::string name;
  int64_t count() const { return shape_numel(shape); }
};

// Network architecture shared by every task in an experiment. Shapes are
// resolved eagerly at construction so incompatible layer chains fail fast.
struct ArchSpec {
  std::vector<Layer> layers;
  Shape input_shape;  // per-sample, e.g. {8} or {32,32,3} (HWC)
  int64_t output_dim = 1;
  LossKind loss = LossKind::BinaryBce;

  std::vector<ParamSlot> slots;  // resolved parameter layout
  int64_t param_count = 0;

  static ArchSpec make(std::vector<Layer> layers, Shape input_shape, int64_t output_dim,
                       LossKind loss);
  bool same_as(const ArchSpec& o) const;
};

// Convenience builders for the standard architectures.
ArchSpec mlp_arch(int64_t in_dim, const std::vector<int64_t>& hidden, int64_t out_dim,
                  LossKind loss, bool final_relu = false);
// Two conv blocks (Conv k3 s2 / ReLU / MaxPool2) x2 followed by Linear(.,500),
// ReLU, Linear(500,1); per-sample input H x W x 3.
ArchSpec task_conv_arch(int64_t height = 128, int64_t width = 128, bool final_relu = false);
// Conv k5 s1 variant with a multiclass head.
ArchSpec domain_conv_arch(int64_t height = 32, int64_t width = 32, int64_t classes = 10,
                          bool final_relu = false);

// One task's parameter vector. Value-like: cloned freely, flat storage with
// per-slot views. Flattening order is slot declaration order, each tensor
// row-major; gradients use the same order.
struct ParamSet {
  int task_id = 0;
  uint64_t init_seed = 0;
  std::shared_ptr<const ArchSpec> spec;
  std::vector<double> flat;

  std::span<const double> slot_view(size_t i) const {
    const auto& s = spec->slots[i];
    return {flat.data() + s.offset, static_cast<size_t>(s.count())};
  }
  Tensor slot_tensor(size_t i) const {
    const auto& s = spec->slots[i];
    return Tensor(s.shape, std::vector<double>(flat.begin() + s.offset,
                                               flat.begin() + s.offset + s.count()));
  }
};

struct GradVector {
  std::vector<double> values;
  double dot(const GradVector& o) const;
  double norm() const;
};

// Uniform(-a, a) init with a = sqrt(1/fan_in), one stream in slot order.
ParamSet build(std::shared_ptr<const ArchSpec> spec, int task_id, uint64_t seed);

// --- graph construction ------------------------------------------------------

// Bind one tape leaf per parameter slot; returns the leaf ids.
std::vector<ad::NodeId> bind_params(ad::Tape& tape, const ArchSpec& spec,
                                    std::span<const double> flat, bool requires_grad,
                                    const std::string& label_prefix = {});

// Build the forward network; x is [n, ...input_shape] (already a tape node).
ad::NodeId predict_graph(ad::Tape& tape, const ArchSpec& spec,
                         std::span<const ad::NodeId> params, ad::NodeId x);

// Mean per-sample loss over the dataset, as a scalar node.
ad::NodeId loss_graph(ad::Tape& tape, const ArchSpec& spec, std::span<const ad::NodeId> params,
                      const Dataset& data);

// Flatten per-slot gradient values into declaration order.
GradVector collect_grads(const ad::Tape& tape, const ArchSpec& spec,
                         std::span<const ad::NodeId> grad_nodes);

// --- eager conveniences --------------------------------------------------------

Tensor predict(const ParamSet& params, const Tensor& x);
double loss_value(const ParamSet& params, const Dataset& data);
GradVector loss_grad(const ParamSet& params, const Dataset& data, double* loss_out = nullptr);

// --- gradient through an inner update -------------------------------------------

// Builds a scalar loss from bound parameter nodes.
using LossBuilder =
    std::function<ad::NodeId(ad::Tape&, std::span<const ad::NodeId> params)>;

// Appends the composite  G(theta - inner_lr * grad L(theta))  to `tape` (whose
// param leaves are `params`) and differentiates it w.r.t. theta. Exact mode
// keeps the Hessian term (needs a higher_order_capable tape, else
// CapabilityError); first_order drops it by detaching the inner gradient and
// returns grad G evaluated at the updated parameters.
std::vector<ad::NodeId> grad_through_update_on(ad::Tape& tape, const ArchSpec& spec,
                                               std::span<const ad::NodeId> params,
                                               const LossBuilder& inner, const LossBuilder& outer,
                                               double inner_lr, bool first_order = false,
                                               ad::NodeId* outer_loss = nullptr,
                                               ad::NodeId* inner_loss = nullptr);

// Convenience wrapper on a fresh tape; returns the flattened meta-gradient.
GradVector grad_through_update(const LossBuilder& inner, const LossBuilder& outer,
                               const ParamSet& params, double inner_lr, bool first_order = false,
                               double* outer_loss_out = nullptr);

// --- checkpoints ---------------------------------------------------------------

// Flat binary checkpoint: magic/version, task_id, count, seed, LE doubles.
void save_params(const std::string& path, const ParamSet& params);
ParamSet load_params(const std::string& path, std::shared_ptr<const ArchSpec> spec);

}  // namespace invenio::models
