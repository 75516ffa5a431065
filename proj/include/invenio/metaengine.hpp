#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <string>
#include <vector>

#include "invenio/dataset.hpp"
#include "invenio/models.hpp"

namespace invenio::meta {

enum class WeightMode : uint8_t { ClampL1 = 0, Softmax = 1, SignedL1 = 2 };
enum class GradOrder : uint8_t { Exact = 0, FirstOrder = 1 };

WeightMode parse_weight_mode(const std::string& s);
GradOrder parse_grad_order(const std::string& s);
const char* to_string(WeightMode m);
const char* to_string(GradOrder g);

// Hyper-parameters of the structured meta-learning loop. alpha is the inner
// step size, delta the outer one, beta weighs the meta-test loss. gamma is
// carried for interface completeness but consumed by nothing; it defaults
// to 0 and is documented as reserved.
struct MetaConfig {
  double alpha = 1e-4;
  double beta = 1.0;
  double gamma = 0.0;
  double delta = 1e-3;
  int n_iter = 100;
  int meta_test_batch = 12;
  double split_fraction = 0.5;
  WeightMode weight_mode = WeightMode::ClampL1;
  GradOrder grad_order = GradOrder::Exact;
  int eval_every = 0;  // 0 = evaluate only at the end
  uint64_t seed = 0;
  int threads = 1;
  double divergence_threshold = 1e6;

  void validate() const;
};

struct StepRecord {
  int iter = 0;
  int task = 0;
  double loss = 0.0;                     // train loss L_i at the step
  std::vector<int> batch;                // sampled meta-test task ids
  std::vector<double> etas;              // raw similarities, aligned with batch
  std::vector<double> weights;           // normalized weights
};

struct EvalRecord {
  int iter = 0;
  int task = 0;
  double accuracy = 0.0;
};

struct TrainState {
  std::vector<models::ParamSet> paramsets;
  std::vector<int> train_set, test_set;  // indices into paramsets
  int iter = 0;
  std::vector<StepRecord> history;
  std::vector<EvalRecord> evals;
};

// Called after each evaluation pass (eval_every and once at the end).
using EvalCallback = std::function<void(const TrainState&)>;

// --- core operations ------------------------------------------------------------

// One inner update theta - alpha * grad L(theta) over the full dataset.
models::ParamSet inner_update(const models::ParamSet& theta, const Dataset& data, double alpha);

// Gradient-alignment similarity: both gradients evaluated at theta_i, summed
// over every parameter.
double task_similarity(const models::ParamSet& theta_i, const Dataset& data_i,
                       const Dataset& data_j);

std::vector<double> normalize_weights(const std::vector<double>& etas, WeightMode mode);

// Weighted sum of per-task losses at fixed parameters (weights are constants).
double meta_test_loss(const models::ParamSet& theta_hat,
                      const std::vector<const Dataset*>& test_tasks,
                      const std::vector<double>& weights);

struct MetaStepResult {
  models::ParamSet updated;
  models::GradVector meta_grad;
  StepRecord record;
};

// One meta-optimization step for train task i against a sampled batch of
// meta-test tasks.
MetaStepResult meta_step(const TrainState& state, int i, const TaskDatabase& db,
                         const MetaConfig& cfg);

// --- training loops --------------------------------------------------------------

TrainState run_invenio(const TaskDatabase& db, const models::ArchSpec& arch,
                       const MetaConfig& cfg, const EvalCallback& on_eval = nullptr);

// Shared-model baseline: a single parameter vector trained with the
// meta-train/meta-test objective (uniform weighting over tasks).
models::ParamSet run_shared_maml(const TaskDatabase& db, const models::ArchSpec& arch,
                                 const MetaConfig& cfg, TrainState* state_out = nullptr);

// Plain per-task gradient descent with the outer learning rate.
TrainState run_independent(const TaskDatabase& db, const models::ArchSpec& arch,
                           const MetaConfig& cfg, const EvalCallback& on_eval = nullptr);

struct TransferConfig {
  int pretrain_iters = 200;
  int finetune_iters = 100;
  double pretrain_lr = 1e-1;
  double finetune_lr = 1e-1;
};

// Pretrain once on `pretrain`, then fine-tune a copy per task (trunk copied,
// head freshly initialized per task).
std::vector<models::ParamSet> run_transfer(const TaskDatabase& db, const Dataset& pretrain,
                                           const models::ArchSpec& task_arch,
                                           const TransferConfig& tcfg, const MetaConfig& cfg);

// Fraction of correct predictions on held-out data.
double evaluate(const models::ParamSet& params, const Dataset& heldout);

// |G(theta - alpha grad L) - G(theta) + alpha grad L . grad G|, the first-order
// expansion residual; shrinks as O(alpha^2).
double taylor_residual(const models::ParamSet& theta, const Dataset& train, const Dataset& test,
                       double alpha);

}  // namespace invenio::meta
