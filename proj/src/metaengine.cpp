#include "invenio/metaengine.hpp"

#include <algorithm>
#include <atomic>
#include <mutex>
#include <thread>

#include "invenio/rng.hpp"
#include "invenio/taskgen.hpp"

namespace invenio::meta {

WeightMode parse_weight_mode(const std::string& s) {
  if (s == "clamp-l1") return WeightMode::ClampL1;
  if (s == "softmax") return WeightMode::Softmax;
  if (s == "signed-l1") return WeightMode::SignedL1;
  throw ConfigError("unknown weight mode '" + s + "' (clamp-l1 | softmax | signed-l1)");
}

GradOrder parse_grad_order(const std::string& s) {
  if (s == "exact") return GradOrder::Exact;
  if (s == "first_order") return GradOrder::FirstOrder;
  throw ConfigError("unknown grad order '" + s + "' (exact | first_order)");
}

const char* to_string(WeightMode m) {
  switch (m) {
    case WeightMode::ClampL1: return "clamp-l1";
    case WeightMode::Softmax: return "softmax";
    case WeightMode::SignedL1: return "signed-l1";
  }
  return "?";
}

const char* to_string(GradOrder g) {
  return g == GradOrder::Exact ? "exact" : "first_order";
}

void MetaConfig::validate() const {
  if (alpha <= 0.0) throw ConfigError("meta: alpha must be > 0");
  if (delta <= 0.0) throw ConfigError("meta: delta must be > 0");
  if (beta < 0.0) throw ConfigError("meta: beta must be >= 0");
  if (n_iter < 1) throw ConfigError("meta: n_iter must be >= 1");
  if (meta_test_batch < 1) throw ConfigError("meta: meta_test_batch must be >= 1");
  if (split_fraction <= 0.0 || split_fraction >= 1.0)
    throw ConfigError("meta: split_fraction must lie strictly between 0 and 1");
  if (eval_every < 0) throw ConfigError("meta: eval_every must be >= 0");
  if (threads < 1) throw ConfigError("meta: threads must be >= 1");
  if (divergence_threshold <= 0.0) throw ConfigError("meta: divergence threshold must be > 0");
}

namespace {

void check_finite(double loss, double threshold, int iter, int task) {
  if (!std::isfinite(loss) || loss > threshold)
    throw DivergenceError("divergence: loss " + std::to_string(loss) + " at iteration " +
                              std::to_string(iter) + ", task " + std::to_string(task),
                          iter, task);
}

// Plain full-batch gradient step; shared by the beta=0 path and independent
// training so the two stay bit-identical.
models::ParamSet plain_step(const models::ParamSet& p, const Dataset& data, double lr,
                            double* loss_out) {
  auto g = models::loss_grad(p, data, loss_out);
  models::ParamSet out = p;
  for (size_t k = 0; k < out.flat.size(); ++k) out.flat[k] -= lr * g.values[k];
  return out;
}

std::vector<int> sample_without_replacement(const std::vector<int>& pool, int count, Rng& rng) {
  std::vector<int> c = pool;
  int take = std::min<int>(count, static_cast<int>(c.size()));
  for (int i = 0; i < take; ++i) {
    size_t j = i + static_cast<size_t>(rng.uniform_int(c.size() - i));
    std::swap(c[(size_t)i], c[j]);
  }
  c.resize(static_cast<size_t>(take));
  return c;
}

void parallel_for(size_t n, int threads, const std::function<void(size_t)>& fn) {
  int workers = std::min<int>(threads, static_cast<int>(n));
  if (workers <= 1) {
    for (size_t k = 0; k < n; ++k) fn(k);
    return;
  }
  std::atomic<size_t> next{0};
  std::exception_ptr err;
  std::mutex err_mu;
  auto body = [&] {
    for (;;) {
      size_t k = next.fetch_add(1);
      if (k >= n) return;
      try {
        fn(k);
      } catch (...) {
        std::lock_guard<std::mutex> lock(err_mu);
        if (!err) err = std::current_exception();
      }
    }
  };
  std::vector<std::thread> pool;
  pool.reserve(static_cast<size_t>(workers));
  for (int t = 0; t < workers; ++t) pool.emplace_back(body);
  for (auto& th : pool) th.join();
  if (err) std::rethrow_exception(err);
}

// Initial meta-train/meta-test partition: shuffled indices, first
// round(K * fraction) on the train side, both sides sorted.
void initial_split(int K, double fraction, uint64_t seed, std::vector<int>& train,
                   std::vector<int>& test) {
  std::vector<int> idx(static_cast<size_t>(K));
  for (int i = 0; i < K; ++i) idx[(size_t)i] = i;
  Rng rng(derive_seed(seed, "split"));
  for (size_t i = idx.size() - 1; i > 0; --i)
    std::swap(idx[i], idx[(size_t)rng.uniform_int(i + 1)]);
  int n_train = std::clamp<int>(static_cast<int>(std::llround(fraction * K)), 1, K - 1);
  train.assign(idx.begin(), idx.begin() + n_train);
  test.assign(idx.begin() + n_train, idx.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
}

}  // namespace

models::ParamSet inner_update(const models::ParamSet& theta, const Dataset& data, double alpha) {
  if (alpha <= 0.0) throw ConfigError("inner_update: alpha must be > 0");
  double loss = 0.0;
  auto g = models::loss_grad(theta, data, &loss);
  for (double v : g.values)
    if (!std::isfinite(v))
      throw NumericError("inner_update: non-finite gradient for task " +
                         std::to_string(theta.task_id));
  models::ParamSet out = theta;
  for (size_t k = 0; k < out.flat.size(); ++k) out.flat[k] -= alpha * g.values[k];
  return out;
}

double task_similarity(const models::ParamSet& theta_i, const Dataset& data_i,
                       const Dataset& data_j) {
  auto g_i = models::loss_grad(theta_i, data_i);
  auto g_j = models::loss_grad(theta_i, data_j);
  return g_i.dot(g_j);
}

std::vector<double> normalize_weights(const std::vector<double>& etas, WeightMode mode) {
  if (etas.empty()) throw DataError("normalize_weights: empty similarity vector");
  size_t n = etas.size();
  std::vector<double> w(n);
  switch (mode) {
    case WeightMode::ClampL1: {
      double sum = 0.0;
      for (size_t i = 0; i < n; ++i) {
        w[i] = etas[i] > 0.0 ? etas[i] : 0.0;
        sum += w[i];
      }
      if (sum <= 0.0) {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
      } else {
        for (double& v : w) v /= sum;
      }
      break;
    }
    case WeightMode::Softmax: {
      double mx = *std::max_element(etas.begin(), etas.end());
      double sum = 0.0;
      for (size_t i = 0; i < n; ++i) {
        w[i] = std::exp(etas[i] - mx);
        sum += w[i];
      }
      for (double& v : w) v /= sum;
      break;
    }
    case WeightMode::SignedL1: {
      double sum = 0.0;
      for (double e : etas) sum += std::fabs(e);
      if (sum <= 0.0) {
        std::fill(w.begin(), w.end(), 1.0 / static_cast<double>(n));
      } else {
        for (size_t i = 0; i < n; ++i) w[i] = etas[i] / sum;
      }
      break;
    }
  }
  return w;
}

double meta_test_loss(const models::ParamSet& theta_hat,
                      const std::vector<const Dataset*>& test_tasks,
                      const std::vector<double>& weights) {
  if (test_tasks.empty()) throw DataError("meta_test_loss: empty test task list");
  if (test_tasks.size() != weights.size())
    throw DataError("meta_test_loss: weight count != task count");
  double acc = 0.0;
  for (size_t j = 0; j < test_tasks.size(); ++j)
    acc += weights[j] * models::loss_value(theta_hat, *test_tasks[j]);
  return acc;
}

MetaStepResult meta_step(const TrainState& state, int i, const TaskDatabase& db,
                         const MetaConfig& cfg) {
  const models::ParamSet& p = state.paramsets.at(static_cast<size_t>(i));
  const Dataset& data_i = db.datasets.at(static_cast<size_t>(i));
  const models::ArchSpec& spec = *p.spec;

  MetaStepResult res;
  res.record.iter = state.iter;
  res.record.task = i;

  if (cfg.beta == 0.0) {
    double loss = 0.0;
    res.updated = plain_step(p, data_i, cfg.delta, &loss);
    check_finite(loss, cfg.divergence_threshold, state.iter, i);
    res.record.loss = loss;
    return res;
  }

  // Composite objective on one tape: L_i(theta) + beta * G(theta - alpha g).
  ad::Tape tape(true);
  auto ids = models::bind_params(tape, spec, p.flat, true);
  ad::NodeId l_train = models::loss_graph(tape, spec, ids, data_i);
  tape.forward();
  double train_loss = tape.value(l_train)[0];
  check_finite(train_loss, cfg.divergence_threshold, state.iter, i);
  res.record.loss = train_loss;

  auto grad_ids = tape.backward(l_train, ids);
  auto g_i = models::collect_grads(tape, spec, grad_ids);

  // Similarities against the sampled meta-test batch, all at theta_i.
  Rng rng(derive_seed(cfg.seed, "batch", state.iter, i));
  res.record.batch = sample_without_replacement(state.test_set, cfg.meta_test_batch, rng);
  for (int j : res.record.batch) {
    auto g_j = models::loss_grad(p, db.datasets.at(static_cast<size_t>(j)));
    res.record.etas.push_back(g_i.dot(g_j));
  }
  res.record.weights = normalize_weights(res.record.etas, cfg.weight_mode);

  std::vector<ad::NodeId> updated;
  updated.reserve(ids.size());
  for (size_t l = 0; l < ids.size(); ++l) {
    ad::NodeId g = cfg.grad_order == GradOrder::FirstOrder ? tape.detach(grad_ids[l]) : grad_ids[l];
    updated.push_back(tape.sub(ids[l], tape.scale(g, cfg.alpha)));
  }

  // Weighted meta-test loss; weights enter as plain scalars (stop-gradient).
  ad::NodeId g_node = ad::kNoNode;
  for (size_t j = 0; j < res.record.batch.size(); ++j) {
    ad::NodeId lj = models::loss_graph(tape, spec, updated,
                                       db.datasets.at(static_cast<size_t>(res.record.batch[j])));
    ad::NodeId term = tape.scale(lj, res.record.weights[j]);
    g_node = g_node == ad::kNoNode ? term : tape.add(g_node, term);
  }
  ad::NodeId total = tape.add(l_train, tape.scale(g_node, cfg.beta));
  tape.forward();
  check_finite(tape.value(g_node)[0], cfg.divergence_threshold, state.iter, i);

  auto meta_ids = tape.backward(total, ids);
  res.meta_grad = models::collect_grads(tape, spec, meta_ids);

  res.updated = p;
  for (size_t k = 0; k < res.updated.flat.size(); ++k)
    res.updated.flat[k] -= cfg.delta * res.meta_grad.values[k];
  return res;
}

namespace {

void record_evals(TrainState& st, const TaskDatabase& db, int iter) {
  if (!db.has_heldout()) return;
  for (int t = 0; t < db.K(); ++t)
    st.evals.push_back(
        {iter, t, evaluate(st.paramsets[(size_t)t], db.heldout[(size_t)t])});
}

}  // namespace

TrainState run_invenio(const TaskDatabase& db, const models::ArchSpec& arch,
                       const MetaConfig& cfg, const EvalCallback& on_eval) {
  cfg.validate();
  db.validate();
  if (db.K() < 2) throw DataError("run_invenio: need at least 2 tasks");

  auto spec = std::make_shared<const models::ArchSpec>(arch);
  TrainState st;
  for (int t = 0; t < db.K(); ++t)
    st.paramsets.push_back(models::build(spec, t, cfg.seed + static_cast<uint64_t>(t)));
  initial_split(db.K(), cfg.split_fraction, cfg.seed, st.train_set, st.test_set);

  std::vector<MetaStepResult> results;
  for (st.iter = 0; st.iter < cfg.n_iter; ++st.iter) {
    results.clear();
    results.resize(st.train_set.size());
    parallel_for(st.train_set.size(), cfg.threads, [&](size_t k) {
      results[k] = meta_step(st, st.train_set[k], db, cfg);
    });
    for (size_t k = 0; k < st.train_set.size(); ++k) {
      st.paramsets[(size_t)st.train_set[k]] = std::move(results[k].updated);
      st.history.push_back(std::move(results[k].record));
    }
    if (cfg.eval_every > 0 && (st.iter + 1) % cfg.eval_every == 0 &&
        st.iter + 1 < cfg.n_iter) {
      record_evals(st, db, st.iter + 1);
      if (on_eval) on_eval(st);
    }
    std::swap(st.train_set, st.test_set);
  }
  record_evals(st, db, cfg.n_iter);
  if (on_eval) on_eval(st);
  return st;
}

models::ParamSet run_shared_maml(const TaskDatabase& db, const models::ArchSpec& arch,
                                 const MetaConfig& cfg, TrainState* state_out) {
  cfg.validate();
  db.validate();
  if (db.K() < 2) throw DataError("run_shared_maml: need at least 2 tasks");

  auto spec = std::make_shared<const models::ArchSpec>(arch);
  models::ParamSet theta = models::build(spec, -1, cfg.seed);
  std::vector<int> train, test;
  initial_split(db.K(), cfg.split_fraction, cfg.seed, train, test);

  TrainState st;  // bookkeeping only
  for (int iter = 0; iter < cfg.n_iter; ++iter) {
    StepRecord rec;
    rec.iter = iter;
    rec.task = -1;

    ad::Tape tape(true);
    auto ids = models::bind_params(tape, *spec, theta.flat, true);

    ad::NodeId l_train = ad::kNoNode;
    for (int i : train) {
      ad::NodeId li = models::loss_graph(tape, *spec, ids, db.datasets[(size_t)i]);
      l_train = l_train == ad::kNoNode ? li : tape.add(l_train, li);
    }
    l_train = tape.scale(l_train, 1.0 / static_cast<double>(train.size()));
    tape.forward();
    rec.loss = tape.value(l_train)[0];
    check_finite(rec.loss, cfg.divergence_threshold, iter, -1);

    if (cfg.beta == 0.0) {
      auto grad_ids = tape.backward(l_train, ids);
      auto g = models::collect_grads(tape, *spec, grad_ids);
      for (size_t k = 0; k < theta.flat.size(); ++k) theta.flat[k] -= cfg.delta * g.values[k];
    } else {
      auto grad_ids = tape.backward(l_train, ids);
      std::vector<ad::NodeId> updated;
      for (size_t l = 0; l < ids.size(); ++l) {
        ad::NodeId g =
            cfg.grad_order == GradOrder::FirstOrder ? tape.detach(grad_ids[l]) : grad_ids[l];
        updated.push_back(tape.sub(ids[l], tape.scale(g, cfg.alpha)));
      }
      ad::NodeId g_test = ad::kNoNode;
      for (int j : test) {
        ad::NodeId lj = models::loss_graph(tape, *spec, updated, db.datasets[(size_t)j]);
        g_test = g_test == ad::kNoNode ? lj : tape.add(g_test, lj);
      }
      g_test = tape.scale(g_test, 1.0 / static_cast<double>(test.size()));
      ad::NodeId total = tape.add(l_train, tape.scale(g_test, cfg.beta));
      tape.forward();
      check_finite(tape.value(g_test)[0], cfg.divergence_threshold, iter, -1);
      auto meta_ids = tape.backward(total, ids);
      auto g = models::collect_grads(tape, *spec, meta_ids);
      for (size_t k = 0; k < theta.flat.size(); ++k) theta.flat[k] -= cfg.delta * g.values[k];
    }
    st.history.push_back(std::move(rec));
    std::swap(train, test);
  }

  if (state_out) {
    st.paramsets.push_back(theta);
    st.train_set = train;
    st.test_set = test;
    st.iter = cfg.n_iter;
    *state_out = std::move(st);
  }
  return theta;
}

TrainState run_independent(const TaskDatabase& db, const models::ArchSpec& arch,
                           const MetaConfig& cfg, const EvalCallback& on_eval) {
  cfg.validate();
  db.validate();

  auto spec = std::make_shared<const models::ArchSpec>(arch);
  TrainState st;
  for (int t = 0; t < db.K(); ++t)
    st.paramsets.push_back(models::build(spec, t, cfg.seed + static_cast<uint64_t>(t)));

  std::vector<std::vector<StepRecord>> recs(static_cast<size_t>(db.K()));
  for (st.iter = 0; st.iter < cfg.n_iter; ++st.iter) {
    parallel_for(static_cast<size_t>(db.K()), cfg.threads, [&](size_t t) {
      double loss = 0.0;
      st.paramsets[t] = plain_step(st.paramsets[t], db.datasets[t], cfg.delta, &loss);
      check_finite(loss, cfg.divergence_threshold, st.iter, static_cast<int>(t));
      recs[t].push_back({st.iter, static_cast<int>(t), loss, {}, {}, {}});
    });
    if (cfg.eval_every > 0 && (st.iter + 1) % cfg.eval_every == 0 &&
        st.iter + 1 < cfg.n_iter) {
      record_evals(st, db, st.iter + 1);
      if (on_eval) on_eval(st);
    }
  }
  // deterministic history order: by iteration then task
  for (int iter = 0; iter < cfg.n_iter; ++iter)
    for (int t = 0; t < db.K(); ++t) st.history.push_back(recs[(size_t)t][(size_t)iter]);
  record_evals(st, db, cfg.n_iter);
  if (on_eval) on_eval(st);
  return st;
}

std::vector<models::ParamSet> run_transfer(const TaskDatabase& db, const Dataset& pretrain,
                                           const models::ArchSpec& task_arch,
                                           const TransferConfig& tcfg, const MetaConfig& cfg) {
  cfg.validate();
  db.validate();
  pretrain.validate();
  if (tcfg.pretrain_iters < 0 || tcfg.finetune_iters < 0)
    throw ConfigError("transfer: iteration counts must be >= 0");

  // Pretraining architecture: same trunk, head sized for the pretrain labels.
  models::ArchSpec pre_arch = task_arch;
  if (pretrain.kind == TaskKind::MulticlassDomain) {
    int classes = pretrain.num_classes();
    if (classes < 2) throw DataError("transfer: pretrain corpus needs >= 2 classes");
    for (auto it = pre_arch.layers.rbegin(); it != pre_arch.layers.rend(); ++it)
      if (it->kind == models::LayerKind::Linear) {
        it->out = classes;
        break;
      }
    pre_arch = models::ArchSpec::make(pre_arch.layers, pre_arch.input_shape, classes,
                                      models::LossKind::MulticlassCe);
  } else {
    pre_arch = models::ArchSpec::make(pre_arch.layers, pre_arch.input_shape, pre_arch.output_dim,
                                      pre_arch.loss);
  }

  auto pre_spec = std::make_shared<const models::ArchSpec>(pre_arch);
  models::ParamSet trunk = models::build(pre_spec, -1, cfg.seed);
  for (int it = 0; it < tcfg.pretrain_iters; ++it) {
    double loss = 0.0;
    trunk = plain_step(trunk, pretrain, tcfg.pretrain_lr, &loss);
    check_finite(loss, cfg.divergence_threshold, it, -1);
  }

  auto task_spec = std::make_shared<const models::ArchSpec>(task_arch);
  // Everything except the final linear layer (last two slots) transfers.
  size_t n_slots = task_spec->slots.size();
  if (pre_spec->slots.size() != n_slots)
    throw SpecError("transfer: trunk layouts disagree");

  std::vector<models::ParamSet> out;
  for (int t = 0; t < db.K(); ++t) {
    models::ParamSet p = models::build(task_spec, t, cfg.seed + static_cast<uint64_t>(t));
    for (size_t s = 0; s + 2 < n_slots; ++s) {
      const auto& dst = task_spec->slots[s];
      const auto& src = pre_spec->slots[s];
      if (dst.shape != src.shape) throw SpecError("transfer: trunk slot shape mismatch");
      std::copy_n(trunk.flat.begin() + src.offset, src.count(), p.flat.begin() + dst.offset);
    }
    for (int it = 0; it < tcfg.finetune_iters; ++it) {
      double loss = 0.0;
      p = plain_step(p, db.datasets[(size_t)t], tcfg.finetune_lr, &loss);
      check_finite(loss, cfg.divergence_threshold, it, t);
    }
    out.push_back(std::move(p));
  }
  return out;
}

double evaluate(const models::ParamSet& params, const Dataset& heldout) {
  heldout.validate();
  Tensor logits = models::predict(params, heldout.inputs);
  int64_t n = heldout.n();
  int64_t correct = 0;
  if (params.spec->loss == models::LossKind::BinaryBce) {
    for (int64_t i = 0; i < n; ++i) {
      int pred = logits.at2(i, 0) > 0.0 ? 1 : 0;  // sigmoid threshold 0.5
      correct += (pred == heldout.labels[(size_t)i]);
    }
  } else {
    int64_t c = logits.shape[1];
    for (int64_t i = 0; i < n; ++i) {
      int64_t best = 0;
      for (int64_t j = 1; j < c; ++j)
        if (logits.at2(i, j) > logits.at2(i, best)) best = j;
      correct += (best == heldout.labels[(size_t)i]);
    }
  }
  return static_cast<double>(correct) / static_cast<double>(n);
}

double taylor_residual(const models::ParamSet& theta, const Dataset& train, const Dataset& test,
                       double alpha) {
  auto g_l = models::loss_grad(theta, train);
  auto g_g = models::loss_grad(theta, test);
  models::ParamSet updated = theta;
  for (size_t k = 0; k < updated.flat.size(); ++k) updated.flat[k] -= alpha * g_l.values[k];
  double g_after = models::loss_value(updated, test);
  double g_before = models::loss_value(theta, test);
  return std::fabs(g_after - g_before + alpha * g_l.dot(g_g));
}

}  // namespace invenio::meta
