#include "invenio/models.hpp"

#include <cmath>
#include <fstream>

#include "invenio/binio.hpp"
#include "invenio/rng.hpp"

namespace invenio::models {

namespace {
constexpr uint32_t kParamMagic = 0x53505649;  // "IVPS"
constexpr uint32_t kParamVersion = 1;
}  // namespace

double GradVector::dot(const GradVector& o) const {
  if (values.size() != o.values.size())
    throw ShapeError("grad dot: length mismatch " + std::to_string(values.size()) + " vs " +
                     std::to_string(o.values.size()));
  double acc = 0.0;
  for (size_t i = 0; i < values.size(); ++i) acc += values[i] * o.values[i];
  return acc;
}

double GradVector::norm() const {
  double acc = 0.0;
  for (double v : values) acc += v * v;
  return std::sqrt(acc);
}

ArchSpec ArchSpec::make(std::vector<Layer> layers, Shape input_shape, int64_t output_dim,
                        LossKind loss) {
  ArchSpec spec;
  spec.layers = std::move(layers);
  spec.input_shape = std::move(input_shape);
  spec.output_dim = output_dim;
  spec.loss = loss;

  if (loss == LossKind::BinaryBce && output_dim != 1)
    throw SpecError("arch: binary loss requires output dim 1");
  if (loss == LossKind::MulticlassCe && output_dim < 2)
    throw SpecError("arch: multiclass loss requires output dim >= 2");

  // Walk the layer chain resolving shapes. Images are HWC; a conv layer on a
  // flat input or a linear layer on an image input is a spec error (linear
  // layers flatten implicitly).
  Shape cur = spec.input_shape;
  int64_t offset = 0;
  int conv_idx = 0, fc_idx = 0;
  auto add_slot = [&](Shape shape, int64_t fan_in, std::string name) {
    ParamSlot s;
    s.shape = std::move(shape);
    s.offset = offset;
    s.fan_in = fan_in;
    s.name = std::move(name);
    offset += s.count();
    spec.slots.push_back(std::move(s));
  };

  for (size_t li = 0; li < spec.layers.size(); ++li) {
    const Layer& l = spec.layers[li];
    switch (l.kind) {
      case LayerKind::Conv: {
        if (cur.size() != 3)
          throw SpecError("arch: conv layer " + std::to_string(li) + " needs HWC input, got " +
                          shape_str(cur));
        int64_t ci = cur[2];
        int64_t ho = (cur[0] + 2 * l.pad - l.kernel) / l.stride + 1;
        int64_t wo = (cur[1] + 2 * l.pad - l.kernel) / l.stride + 1;
        if (l.kernel < 1 || l.stride < 1 || ho < 1 || wo < 1)
          throw SpecError("arch: conv layer " + std::to_string(li) + " collapses input " +
                          shape_str(cur));
        ++conv_idx;
        std::string base = "conv" + std::to_string(conv_idx);
        add_slot({l.kernel, l.kernel, ci, l.out}, l.kernel * l.kernel * ci, base + ".w");
        add_slot({l.out}, l.kernel * l.kernel * ci, base + ".b");
        cur = {ho, wo, l.out};
        break;
      }
      case LayerKind::MaxPool: {
        if (cur.size() != 3)
          throw SpecError("arch: maxpool layer " + std::to_string(li) + " needs HWC input");
        int64_t ho = cur[0] / l.kernel, wo = cur[1] / l.kernel;
        if (ho < 1 || wo < 1)
          throw SpecError("arch: maxpool layer " + std::to_string(li) + " collapses input " +
                          shape_str(cur));
        cur = {ho, wo, cur[2]};
        break;
      }
      case LayerKind::Linear: {
        int64_t in = shape_numel(cur);  // implicit flatten
        ++fc_idx;
        std::string base = "fc" + std::to_string(fc_idx);
        add_slot({in, l.out}, in, base + ".w");
        add_slot({l.out}, in, base + ".b");
        cur = {l.out};
        break;
      }
      case LayerKind::Relu:
        break;
    }
  }

  if (cur.size() != 1 || cur[0] != output_dim)
    throw SpecError("arch: final layer produces " + shape_str(cur) + ", expected [" +
                    std::to_string(output_dim) + "]");
  spec.param_count = offset;
  return spec;
}

bool ArchSpec::same_as(const ArchSpec& o) const {
  if (input_shape != o.input_shape || output_dim != o.output_dim || loss != o.loss ||
      layers.size() != o.layers.size())
    return false;
  for (size_t i = 0; i < layers.size(); ++i) {
    const Layer &a = layers[i], &b = o.layers[i];
    if (a.kind != b.kind || a.out != b.out || a.kernel != b.kernel || a.stride != b.stride ||
        a.pad != b.pad)
      return false;
  }
  return true;
}

ArchSpec mlp_arch(int64_t in_dim, const std::vector<int64_t>& hidden, int64_t out_dim,
                  LossKind loss, bool final_relu) {
  std::vector<Layer> layers;
  for (int64_t h : hidden) {
    layers.push_back(Layer::linear(h));
    layers.push_back(Layer::relu());
  }
  layers.push_back(Layer::linear(out_dim));
  if (final_relu) layers.push_back(Layer::relu());
  return ArchSpec::make(std::move(layers), {in_dim}, out_dim, loss);
}

ArchSpec task_conv_arch(int64_t height, int64_t width, bool final_relu) {
  std::vector<Layer> layers = {
      Layer::conv(20, 3, 3), Layer::relu(), Layer::maxpool(2),
      Layer::conv(50, 3, 3), Layer::relu(), Layer::maxpool(2),
      Layer::linear(500),    Layer::relu(),
      Layer::linear(1),
  };
  if (final_relu) layers.push_back(Layer::relu());
  return ArchSpec::make(std::move(layers), {height, width, 3}, 1, LossKind::BinaryBce);
}

ArchSpec domain_conv_arch(int64_t height, int64_t width, int64_t classes, bool final_relu) {
  std::vector<Layer> layers = {
      Layer::conv(20, 5, 1), Layer::relu(), Layer::maxpool(2),
      Layer::conv(50, 5, 1), Layer::relu(), Layer::maxpool(2),
      Layer::linear(500),    Layer::relu(),
      Layer::linear(classes),
  };
  if (final_relu) layers.push_back(Layer::relu());
  return ArchSpec::make(std::move(layers), {height, width, 3}, classes, LossKind::MulticlassCe);
}

ParamSet build(std::shared_ptr<const ArchSpec> spec, int task_id, uint64_t seed) {
  if (!spec) throw SpecError("build: null arch spec");
  ParamSet p;
  p.task_id = task_id;
  p.init_seed = seed;
  p.spec = std::move(spec);
  p.flat.resize(static_cast<size_t>(p.spec->param_count));
  Rng rng(derive_seed(seed, "init"));
  for (const auto& slot : p.spec->slots) {
    double a = std::sqrt(1.0 / static_cast<double>(slot.fan_in));
    for (int64_t i = 0; i < slot.count(); ++i)
      p.flat[static_cast<size_t>(slot.offset + i)] = rng.uniform(-a, a);
  }
  return p;
}

std::vector<ad::NodeId> bind_params(ad::Tape& tape, const ArchSpec& spec,
                                    std::span<const double> flat, bool requires_grad,
                                    const std::string& label_prefix) {
  if (static_cast<int64_t>(flat.size()) != spec.param_count)
    throw ShapeError("bind_params: flat vector has " + std::to_string(flat.size()) +
                     " values, arch wants " + std::to_string(spec.param_count));
  std::vector<ad::NodeId> ids;
  ids.reserve(spec.slots.size());
  for (const auto& slot : spec.slots) {
    Tensor t(slot.shape, std::vector<double>(flat.begin() + slot.offset,
                                             flat.begin() + slot.offset + slot.count()));
    ids.push_back(tape.leaf(std::move(t), requires_grad, label_prefix + slot.name));
  }
  return ids;
}

ad::NodeId predict_graph(ad::Tape& tape, const ArchSpec& spec,
                         std::span<const ad::NodeId> params, ad::NodeId x) {
  if (params.size() != spec.slots.size())
    throw ShapeError("predict_graph: expected " + std::to_string(spec.slots.size()) +
                     " parameter nodes, got " + std::to_string(params.size()));
  const Shape& xs = tape.node(x).shape;
  Shape expect = spec.input_shape;
  expect.insert(expect.begin(), xs.empty() ? 0 : xs[0]);
  if (xs != expect)
    throw ShapeError("predict_graph: input shape " + shape_str(xs) + " != expected " +
                     shape_str(expect));

  int64_t n = xs[0];
  ad::NodeId cur = x;
  bool image = spec.input_shape.size() == 3;
  size_t slot = 0;
  for (const Layer& l : spec.layers) {
    switch (l.kind) {
      case LayerKind::Conv:
        cur = tape.conv_layer(cur, params[slot], params[slot + 1], l.stride, l.pad);
        slot += 2;
        break;
      case LayerKind::MaxPool:
        cur = tape.maxpool(cur, l.kernel);
        break;
      case LayerKind::Linear: {
        const Shape& cs = tape.node(cur).shape;
        if (cs.size() != 2) cur = tape.reshape(cur, {n, shape_numel(cs) / n});
        cur = tape.linear(cur, params[slot], params[slot + 1]);
        slot += 2;
        image = false;
        break;
      }
      case LayerKind::Relu:
        cur = tape.relu(cur);
        break;
    }
  }
  (void)image;
  return cur;  // logits [n, output_dim]
}

ad::NodeId loss_graph(ad::Tape& tape, const ArchSpec& spec, std::span<const ad::NodeId> params,
                      const Dataset& data) {
  data.validate();
  if (spec.loss == LossKind::BinaryBce && data.kind != TaskKind::BinaryTask)
    throw DataError("loss: binary architecture fed a multiclass dataset '" + data.name + "'");
  if (spec.loss == LossKind::MulticlassCe && data.kind != TaskKind::MulticlassDomain)
    throw DataError("loss: multiclass architecture fed a binary dataset '" + data.name + "'");

  ad::NodeId x = tape.constant(data.inputs, data.name + ".x");
  ad::NodeId logits = predict_graph(tape, spec, params, x);
  int64_t n = data.n();

  if (spec.loss == LossKind::BinaryBce) {
    std::vector<double> y(data.labels.begin(), data.labels.end());
    ad::NodeId targets = tape.constant(Tensor({n}, std::move(y)), data.name + ".y");
    return tape.bce_logits(tape.reshape(logits, {n}), targets);
  }
  std::vector<double> y(data.labels.begin(), data.labels.end());
  ad::NodeId labels = tape.constant(Tensor({n}, std::move(y)), data.name + ".y");
  return tape.ce_logits(logits, labels);
}

GradVector collect_grads(const ad::Tape& tape, const ArchSpec& spec,
                         std::span<const ad::NodeId> grad_nodes) {
  if (grad_nodes.size() != spec.slots.size())
    throw ShapeError("collect_grads: slot count mismatch");
  GradVector g;
  g.values.reserve(static_cast<size_t>(spec.param_count));
  for (size_t i = 0; i < spec.slots.size(); ++i) {
    const Tensor& t = tape.value(grad_nodes[i]);
    if (t.shape != spec.slots[i].shape)
      throw ShapeError("collect_grads: slot " + spec.slots[i].name + " grad shape " +
                       shape_str(t.shape) + " != " + shape_str(spec.slots[i].shape));
    g.values.insert(g.values.end(), t.data.begin(), t.data.end());
  }
  return g;
}

Tensor predict(const ParamSet& params, const Tensor& x) {
  ad::Tape tape(false);
  auto ids = bind_params(tape, *params.spec, params.flat, false);
  ad::NodeId logits = predict_graph(tape, *params.spec, ids, tape.constant(x, "x"));
  tape.forward();
  return tape.value(logits);
}

double loss_value(const ParamSet& params, const Dataset& data) {
  ad::Tape tape(false);
  auto ids = bind_params(tape, *params.spec, params.flat, false);
  ad::NodeId loss = loss_graph(tape, *params.spec, ids, data);
  tape.forward();
  return tape.value(loss)[0];
}

GradVector loss_grad(const ParamSet& params, const Dataset& data, double* loss_out) {
  ad::Tape tape(false);
  auto ids = bind_params(tape, *params.spec, params.flat, true);
  ad::NodeId loss = loss_graph(tape, *params.spec, ids, data);
  tape.forward();
  auto grads = tape.backward(loss, ids);
  if (loss_out) *loss_out = tape.value(loss)[0];
  return collect_grads(tape, *params.spec, grads);
}

std::vector<ad::NodeId> grad_through_update_on(ad::Tape& tape, const ArchSpec& spec,
                                               std::span<const ad::NodeId> params,
                                               const LossBuilder& inner, const LossBuilder& outer,
                                               double inner_lr, bool first_order,
                                               ad::NodeId* outer_loss, ad::NodeId* inner_loss) {
  if (params.size() != spec.slots.size())
    throw ShapeError("grad_through_update: expected " + std::to_string(spec.slots.size()) +
                     " parameter nodes, got " + std::to_string(params.size()));
  ad::NodeId l_inner = inner(tape, params);
  tape.forward();
  auto grads = tape.backward(l_inner, params);

  std::vector<ad::NodeId> updated;
  updated.reserve(params.size());
  for (size_t i = 0; i < params.size(); ++i) {
    ad::NodeId g = first_order ? tape.detach(grads[i]) : grads[i];
    updated.push_back(tape.sub(params[i], tape.scale(g, inner_lr)));
  }

  ad::NodeId l_outer = outer(tape, updated);
  tape.forward();
  if (outer_loss) *outer_loss = l_outer;
  if (inner_loss) *inner_loss = l_inner;
  return tape.backward(l_outer, params);
}

GradVector grad_through_update(const LossBuilder& inner, const LossBuilder& outer,
                               const ParamSet& params, double inner_lr, bool first_order,
                               double* outer_loss_out) {
  ad::Tape tape(true);
  auto ids = bind_params(tape, *params.spec, params.flat, true);
  ad::NodeId l_outer = ad::kNoNode;
  auto grad_ids = grad_through_update_on(tape, *params.spec, ids, inner, outer, inner_lr,
                                         first_order, &l_outer);
  if (outer_loss_out) *outer_loss_out = tape.value(l_outer)[0];
  return collect_grads(tape, *params.spec, grad_ids);
}

void save_params(const std::string& path, const ParamSet& params) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw FormatError("cannot open '" + path + "' for writing");
  binio::write_u32(os, kParamMagic);
  binio::write_u32(os, kParamVersion);
  binio::write_i32(os, params.task_id);
  binio::write_u64(os, static_cast<uint64_t>(params.flat.size()));
  binio::write_u64(os, params.init_seed);
  binio::write_f64_vec(os, params.flat);
  if (!os) throw FormatError("write failed for '" + path + "'");
}

ParamSet load_params(const std::string& path, std::shared_ptr<const ArchSpec> spec) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open '" + path + "'");
  if (binio::read_u32(is) != kParamMagic) throw FormatError("'" + path + "': bad magic");
  uint32_t ver = binio::read_u32(is);
  if (ver != kParamVersion)
    throw FormatError("'" + path + "': unsupported version " + std::to_string(ver));
  ParamSet p;
  p.task_id = binio::read_i32(is);
  uint64_t count = binio::read_u64(is);
  p.init_seed = binio::read_u64(is);
  if (spec && static_cast<int64_t>(count) != spec->param_count)
    throw FormatError("'" + path + "': checkpoint has " + std::to_string(count) +
                      " values, arch wants " + std::to_string(spec->param_count));
  binio::read_f64_vec(is, p.flat, count);
  p.spec = std::move(spec);
  return p;
}

}  // namespace invenio::models
