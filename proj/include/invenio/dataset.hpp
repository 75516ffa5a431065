#pragma once

#include <string>
#include <vector>

#include "invenio/tensor.hpp"

namespace invenio {

enum class TaskKind : uint8_t { BinaryTask = 0, MulticlassDomain = 1 };

// One task's (or domain's) labeled sample set.
struct Dataset {
  Tensor inputs;            // [n, ...sample shape]
  std::vector<int> labels;  // binary: {0,1}; multiclass: [0, C)
  TaskKind kind = TaskKind::BinaryTask;
  std::string name;

  int64_t n() const { return inputs.shape.empty() ? 0 : inputs.shape[0]; }

  Shape sample_shape() const {
    if (inputs.shape.empty()) return {};
    return Shape(inputs.shape.begin() + 1, inputs.shape.end());
  }

  int num_classes() const {
    int c = 0;
    for (int l : labels) c = std::max(c, l + 1);
    return c;
  }

  void validate() const {
    if (n() < 1) throw DataError("dataset '" + name + "': empty");
    if (static_cast<int64_t>(labels.size()) != n())
      throw DataError("dataset '" + name + "': label count != sample count");
    for (int l : labels) {
      if (l < 0) throw DataError("dataset '" + name + "': negative label");
      if (kind == TaskKind::BinaryTask && l > 1)
        throw DataError("dataset '" + name + "': binary labels must be 0/1");
    }
  }
};

// A collection of tasks/domains, optionally with planted ground truth and a
// parallel held-out split.
struct TaskDatabase {
  std::vector<Dataset> datasets;
  std::vector<Dataset> heldout;             // empty, or one per dataset
  std::vector<int> ground_truth_clusters;   // empty, or one per dataset

  int K() const { return static_cast<int>(datasets.size()); }
  bool has_heldout() const { return !heldout.empty(); }
  bool has_ground_truth() const { return !ground_truth_clusters.empty(); }

  void validate() const {
    if (datasets.empty()) throw DataError("task database: no datasets");
    for (const auto& d : datasets) d.validate();
    if (has_heldout() && heldout.size() != datasets.size())
      throw DataError("task database: held-out list size mismatch");
    if (has_ground_truth() && ground_truth_clusters.size() != datasets.size())
      throw DataError("task database: cluster label count mismatch");
    const Shape ss = datasets.front().sample_shape();
    for (const auto& d : datasets)
      if (d.sample_shape() != ss)
        throw DataError("task database: datasets disagree on input shape");
  }
};

}  // namespace invenio
