#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tameta/adam.hpp"
#include "tameta/common.hpp"
#include "tameta/metrics.hpp"
#include "tameta/models.hpp"
#include "tameta/params.hpp"
#include "tameta/rng.hpp"
#include "tameta/tasks.hpp"
#include "tameta/tensor.hpp"

namespace tameta {

// Task losses above this (or non-finite) abort the step loudly.
inline constexpr double kDivergenceThreshold = 1e6;

inline void check_divergence(double loss, const char* where) {
  if (!std::isfinite(loss) || std::abs(loss) > kDivergenceThreshold)
    throw divergence_error(std::string(where) + ": task loss " + std::to_string(loss) +
                           " exceeds divergence threshold");
}

// --- objectives -------------------------------------------------------------

// A task seen through its two differentiable losses. `params` follow the
// base-parameter layout of the experiment (MLP weight list, or a single
// point for analytic surfaces).
class TaskObjective {
 public:
  virtual ~TaskObjective() = default;
  virtual Tensor support_loss(Tape& tape, const std::vector<Tensor>& params) const = 0;
  // (differentiable query loss, plain accuracy)
  virtual std::pair<Tensor, double> query_eval(Tape& tape,
                                               const std::vector<Tensor>& params) const = 0;
};

class ClassificationObjective final : public TaskObjective {
 public:
  ClassificationObjective(const BaseLearner& model, const Task& task)
      : model_(&model), task_(&task) {}

  Tensor support_loss(Tape& tape, const std::vector<Tensor>& params) const override {
    return evaluate(*model_, params, tape, task_->support_x, task_->support_y).first;
  }

  std::pair<Tensor, double> query_eval(Tape& tape,
                                       const std::vector<Tensor>& params) const override {
    return evaluate(*model_, params, tape, task_->query_x, task_->query_y);
  }

  const Task& task() const { return *task_; }

 private:
  const BaseLearner* model_;
  const Task* task_;
};

// Quadratic surface: support and query losses are the same bowl; accuracy is
// not meaningful and reports 0.
class QuadraticObjective final : public TaskObjective {
 public:
  explicit QuadraticObjective(const QuadraticTask& task) : task_(&task) {}

  Tensor support_loss(Tape&, const std::vector<Tensor>& params) const override {
    return quadratic_loss(*task_, params.at(0));
  }

  std::pair<Tensor, double> query_eval(Tape&, const std::vector<Tensor>& params) const override {
    return {quadratic_loss(*task_, params.at(0)), 0.0};
  }

 private:
  const QuadraticTask* task_;
};

// Arbitrary loss pair; used by oracle tests on hand-built surfaces.
class LambdaObjective final : public TaskObjective {
 public:
  using Fn = std::function<Tensor(Tape&, const std::vector<Tensor>&)>;
  LambdaObjective(Fn support, Fn query) : support_(std::move(support)), query_(std::move(query)) {}

  Tensor support_loss(Tape& tape, const std::vector<Tensor>& params) const override {
    return support_(tape, params);
  }
  std::pair<Tensor, double> query_eval(Tape& tape,
                                       const std::vector<Tensor>& params) const override {
    return {query_(tape, params), 0.0};
  }

 private:
  Fn support_;
  Fn query_;
};

// --- adaptation -------------------------------------------------------------

struct AdaptResult {
  std::vector<Tensor> phi_T;    // adapted parameters, still on the record
  Tensor query_loss;            // L*^T, differentiable
  double query_loss_value = 0;  // L*^T as a number
  double pre_query_loss = 0;    // L*^0, evaluated at phi^0 before adaptation
  double query_accuracy = 0;    // A*^T
  double grad_norm = 0;         // ||d L* / d phi|| at phi^T
  std::vector<std::vector<double>> trajectory;  // T+1 flattened snapshots
};

namespace detail {

inline std::vector<double> flatten_tensors(const std::vector<Tensor>& ts) {
  std::vector<double> flat;
  for (const auto& t : ts) {
    auto v = t.values();
    flat.insert(flat.end(), v.begin(), v.end());
  }
  return flat;
}

// Query loss/accuracy at fixed parameter values, on a scratch record.
inline std::pair<double, double> query_at_values(const TaskObjective& obj,
                                                 const std::vector<Tensor>& like,
                                                 const std::vector<std::vector<double>>& values) {
  Tape scratch;
  std::vector<Tensor> bound;
  bound.reserve(like.size());
  for (std::size_t i = 0; i < like.size(); ++i)
    bound.push_back(scratch.leaf(like[i].shape(), values[i], false));
  auto [loss, acc] = obj.query_eval(scratch, bound);
  return {loss.item(), acc};
}

// || d query_loss / d params || at the given values, on a scratch record.
inline double query_grad_norm(const TaskObjective& obj, const std::vector<Tensor>& like,
                              const std::vector<std::vector<double>>& values) {
  Tape scratch;
  std::vector<Tensor> bound;
  bound.reserve(like.size());
  for (std::size_t i = 0; i < like.size(); ++i)
    bound.push_back(scratch.leaf(like[i].shape(), values[i], true));
  auto [loss, acc] = obj.query_eval(scratch, bound);
  (void)acc;
  GradientMap g = gradient(loss, bound, false);
  double ss = 0.0;
  for (const auto& t : bound) {
    for (double x : g.at(t).values()) ss += x * x;
  }
  return std::sqrt(ss);
}

inline std::vector<std::vector<double>> tensor_values(const std::vector<Tensor>& ts) {
  std::vector<std::vector<double>> out;
  out.reserve(ts.size());
  for (const auto& t : ts) out.push_back(t.to_vector());
  return out;
}

}  // namespace detail

// Gradient-descent adaptation: phi^0 = theta, then T steps
// phi <- phi - rate * d support_loss / d phi. With per-parameter rates
// (MetaSGD) `alpha` must parallel `theta`; otherwise `scalar_rate` applies.
// When track_second_order is set the inner gradients stay on the record and
// phi^T remains differentiable through them (full second-order path);
// otherwise inner gradients are detached and phi^T depends on theta only
// through the identity (the first-order approximation, also used at
// meta-test time).
inline AdaptResult adapt_gd(Tape& tape, const std::vector<Tensor>& theta,
                            std::span<const Tensor> alpha, double scalar_rate,
                            const TaskObjective& obj, int T, bool track_second_order) {
  if (T < 1) throw error("adapt_gd: T must be >= 1");
  if (!alpha.empty() && alpha.size() != theta.size())
    throw shape_error("adapt_gd: alpha layout must parallel theta");

  AdaptResult result;
  std::vector<Tensor> phi = theta;
  result.trajectory.push_back(detail::flatten_tensors(phi));
  {
    auto [l0, a0] = detail::query_at_values(obj, phi, detail::tensor_values(phi));
    (void)a0;
    result.pre_query_loss = l0;
  }

  for (int t = 0; t < T; ++t) {
    Tensor loss = obj.support_loss(tape, phi);
    check_divergence(loss.item(), "adapt_gd");
    GradientMap grads = gradient(loss, phi, track_second_order);
    std::vector<Tensor> next;
    next.reserve(phi.size());
    for (std::size_t i = 0; i < phi.size(); ++i) {
      Tensor g = grads.at(phi[i]);
      Tensor step = alpha.empty() ? scale(g.on_tape() ? g : tape.constant(g.shape(), g.values()),
                                          scalar_rate)
                                  : mul(alpha[i], g);
      next.push_back(sub(phi[i], step));
    }
    phi = std::move(next);
    result.trajectory.push_back(detail::flatten_tensors(phi));
  }

  auto [qloss, qacc] = obj.query_eval(tape, phi);
  check_divergence(qloss.item(), "adapt_gd(query)");
  result.phi_T = phi;
  result.query_loss = qloss;
  result.query_loss_value = qloss.item();
  result.query_accuracy = qacc;
  result.grad_norm = detail::query_grad_norm(obj, phi, detail::tensor_values(phi));
  return result;
}

// Binds a flat [1 x P] row as base-layout tensors via slices and reshapes
// (differentiable through the flat row).
inline std::vector<Tensor> bind_flat_row(const ParamSet& layout, const Tensor& flat_row) {
  std::vector<Tensor> out;
  out.reserve(layout.count());
  long off = 0;
  for (std::size_t i = 0; i < layout.count(); ++i) {
    long n = numel(layout.def(i).shape);
    out.push_back(reshape(slice_cols(flat_row, off, off + n), layout.def(i).shape));
    off += n;
  }
  if (off != flat_row.size()) throw shape_error("bind_flat_row: layout size mismatch");
  return out;
}

// Learned-optimizer adaptation: T chained LSTM steps from the learnable
// initial cell c0. Per-step (loss, gradient) inputs are computed at the
// current cell values on a scratch record and enter as data; phi^T stays
// differentiable with respect to the optimizer weights through the cell and
// hidden chains.
inline AdaptResult adapt_lstm(Tape& tape, const LstmOptimizer& optimizer,
                              const std::vector<Tensor>& weights, const ParamSet& base_layout,
                              const TaskObjective& obj, int T) {
  if (T < 1) throw error("adapt_lstm: T must be >= 1");
  LstmState state = optimizer.initial_state(tape, weights);

  AdaptResult result;
  result.trajectory.push_back(state.c.to_vector());

  auto params_at = [&](const std::vector<double>& flat) {
    // Scratch binding of the cell values in base layout.
    std::vector<std::vector<double>> vals;
    std::size_t off = 0;
    for (std::size_t i = 0; i < base_layout.count(); ++i) {
      std::size_t n = static_cast<std::size_t>(numel(base_layout.def(i).shape));
      vals.emplace_back(flat.begin() + off, flat.begin() + off + n);
      off += n;
    }
    return vals;
  };

  {
    Tape scratch;
    std::vector<Tensor> like = base_layout.bind(scratch, false);
    auto [l0, a0] = detail::query_at_values(obj, like, params_at(state.c.to_vector()));
    (void)a0;
    result.pre_query_loss = l0;
  }

  for (int t = 0; t < T; ++t) {
    // Support loss and gradient at the current cell, as data.
    Tape scratch;
    std::vector<Tensor> bound;
    auto vals = params_at(state.c.to_vector());
    for (std::size_t i = 0; i < base_layout.count(); ++i)
      bound.push_back(scratch.leaf(base_layout.def(i).shape, vals[i], true));
    Tensor loss = obj.support_loss(scratch, bound);
    check_divergence(loss.item(), "adapt_lstm");
    GradientMap g = gradient(loss, bound, false);
    std::vector<double> grad_flat;
    grad_flat.reserve(static_cast<std::size_t>(optimizer.coord_count()));
    for (const auto& b : bound) {
      auto gv = g.at(b).values();
      grad_flat.insert(grad_flat.end(), gv.begin(), gv.end());
    }
    state = optimizer.step(tape, weights, state, loss.item(), grad_flat);
    result.trajectory.push_back(state.c.to_vector());
  }

  Tensor flat_row = transpose(state.c);  // [1 x P]
  std::vector<Tensor> phi = bind_flat_row(base_layout, flat_row);
  auto [qloss, qacc] = obj.query_eval(tape, phi);
  check_divergence(qloss.item(), "adapt_lstm(query)");
  result.phi_T = phi;
  result.query_loss = qloss;
  result.query_loss_value = qloss.item();
  result.query_accuracy = qacc;
  result.grad_norm = detail::query_grad_norm(obj, phi, detail::tensor_values(phi));
  return result;
}

// Eq.-style meta-information four-tuple per task. The loss-ratio denominator
// is guarded at 1e-12.
inline std::vector<MetaInfo> compute_meta_info(std::span<const AdaptResult> results) {
  std::vector<MetaInfo> infos;
  infos.reserve(results.size());
  for (const auto& r : results) {
    MetaInfo mi;
    mi.grad_norm = r.grad_norm;
    mi.query_loss = r.query_loss_value;
    mi.query_accuracy = r.query_accuracy;
    mi.loss_ratio = r.query_loss_value / std::max(r.pre_query_loss, 1e-12);
    mi.validate();
    infos.push_back(mi);
  }
  return infos;
}

// --- meta-model and updates -------------------------------------------------

enum class Variant { maml, metasgd, taml, metalstm, metalstm_pp };

inline const char* variant_name(Variant v) {
  switch (v) {
    case Variant::maml: return "maml";
    case Variant::metasgd: return "metasgd";
    case Variant::taml: return "taml";
    case Variant::metalstm: return "metalstm";
    default: return "metalstm_pp";
  }
}

struct TrainConfig {
  int batch_size = 4;          // B
  int adapt_steps = 5;         // T
  long iterations = 2000;      // outer iterations
  double meta_lr = 1e-3;       // beta
  double inner_lr = 0.4;       // alpha (scalar; also MetaSGD's initial alpha)
  double attention_lr = 1e-3;  // gamma
  double taml_lambda = 0.1;    // lambda
  int lstm_hidden = 20;
  int attention_hidden = 32;

  void validate() const {
    if (batch_size < 1) throw config_error("train: batch_size must be >= 1");
    if (adapt_steps < 1) throw config_error("train: adapt_steps must be >= 1");
    if (iterations < 0) throw config_error("train: iterations must be >= 0");
    if (!(meta_lr > 0.0)) throw config_error("train: meta_lr must be positive");
    if (!(inner_lr > 0.0)) throw config_error("train: inner_lr must be positive");
    if (!(attention_lr >= 0.0)) throw config_error("train: attention_lr must be >= 0");
    if (taml_lambda < 0.0) throw config_error("train: taml_lambda must be >= 0");
    if (lstm_hidden < 1) throw config_error("train: lstm_hidden must be >= 1");
    if (attention_hidden < 1) throw config_error("train: attention_hidden must be >= 1");
  }
};

// The meta-knowledge: initialization parameters (plus per-parameter rates
// for MetaSGD, stored as alpha_* arrays) or the parametric-optimizer weights
// (including the learnable initial cell c0).
struct MetaModel {
  Variant variant = Variant::maml;
  ParamSet meta;
  double inner_lr = 0.4;  // scalar alpha for maml/taml

  std::size_t base_array_count = 0;  // leading arrays that form the base layout
};

// Builds the meta-model for a variant given the base-parameter layout.
inline MetaModel init_meta_model(Variant variant, const TrainConfig& cfg,
                                 const ParamSet& base_init, const LstmOptimizer* optimizer,
                                 RngStream& rng) {
  MetaModel m;
  m.variant = variant;
  m.inner_lr = cfg.inner_lr;
  m.base_array_count = base_init.count();
  switch (variant) {
    case Variant::maml:
    case Variant::taml: {
      for (std::size_t i = 0; i < base_init.count(); ++i)
        m.meta.add(base_init.def(i).name, base_init.def(i).shape, base_init.values(i));
      break;
    }
    case Variant::metasgd: {
      for (std::size_t i = 0; i < base_init.count(); ++i)
        m.meta.add(base_init.def(i).name, base_init.def(i).shape, base_init.values(i));
      for (std::size_t i = 0; i < base_init.count(); ++i)
        m.meta.add("alpha_" + base_init.def(i).name, base_init.def(i).shape,
                   std::vector<double>(base_init.values(i).size(), cfg.inner_lr));
      break;
    }
    case Variant::metalstm:
    case Variant::metalstm_pp: {
      if (optimizer == nullptr) throw error("init_meta_model: optimizer required");
      m.meta = optimizer->init_params(rng, base_init.flatten());
      break;
    }
  }
  return m;
}

// Per-batch adaptation summary used for logging.
struct BatchStats {
  std::vector<double> query_losses;
  std::vector<double> query_accuracies;
  std::vector<MetaInfo> infos;
  std::vector<double> attention;  // empty for vanilla updates
};

namespace detail {

struct TaskGrad {
  std::vector<std::vector<double>> grads;  // per meta array
  AdaptResult result_summary;              // tensors already off the record
};

// Isolated-record adaptation + meta-gradient for one task. Returns the
// gradient of the post-adaptation query loss with respect to every meta
// array, plus the adaptation metrics (record-bound tensors stripped).
inline TaskGrad task_meta_grad(const MetaModel& model, const ParamSet& base_layout,
                               const LstmOptimizer* optimizer, const TaskObjective& obj,
                               int T) {
  Tape tape;
  std::vector<Tensor> bound = model.meta.bind(tape, true);
  AdaptResult r;
  switch (model.variant) {
    case Variant::maml:
    case Variant::taml:
      r = adapt_gd(tape, bound, {}, model.inner_lr, obj, T, true);
      break;
    case Variant::metasgd: {
      std::vector<Tensor> theta(bound.begin(),
                                bound.begin() + static_cast<long>(model.base_array_count));
      std::span<const Tensor> alpha(bound.data() + model.base_array_count,
                                    bound.size() - model.base_array_count);
      r = adapt_gd(tape, theta, alpha, 0.0, obj, T, true);
      break;
    }
    case Variant::metalstm:
    case Variant::metalstm_pp:
      if (optimizer == nullptr) throw error("task_meta_grad: optimizer required");
      r = adapt_lstm(tape, *optimizer, bound, base_layout, obj, T);
      break;
  }
  GradientMap g = gradient(r.query_loss, bound, false);
  TaskGrad out;
  out.grads.reserve(bound.size());
  for (const auto& b : bound) out.grads.push_back(g.at(b).to_vector());
  out.result_summary.query_loss_value = r.query_loss_value;
  out.result_summary.pre_query_loss = r.pre_query_loss;
  out.result_summary.query_accuracy = r.query_accuracy;
  out.result_summary.grad_norm = r.grad_norm;
  out.result_summary.trajectory = std::move(r.trajectory);
  return out;
}

inline void fill_stats(BatchStats* stats, std::span<const TaskGrad> tg) {
  if (stats == nullptr) return;
  std::vector<AdaptResult> rs;
  rs.reserve(tg.size());
  for (const auto& t : tg) rs.push_back(t.result_summary);
  stats->query_losses.clear();
  stats->query_accuracies.clear();
  for (const auto& r : rs) {
    stats->query_losses.push_back(r.query_loss_value);
    stats->query_accuracies.push_back(r.query_accuracy);
  }
  stats->infos = compute_meta_info(rs);
}

// Gradient of lambda * theil(pre-adaptation query losses at theta), taken
// with respect to every meta array. TAML's inequality regularizer uses the
// losses before adaptation, unlike the main term.
inline std::vector<std::vector<double>> taml_theil_grad(
    const MetaModel& model, std::span<const TaskObjective* const> batch, double lambda) {
  Tape tape;
  std::vector<Tensor> bound = model.meta.bind(tape, true);
  std::vector<Tensor> losses;
  losses.reserve(batch.size());
  for (const TaskObjective* obj : batch) {
    auto [loss, acc] = obj->query_eval(tape, bound);
    (void)acc;
    if (!(loss.item() > 0.0))
      throw error("meta_update_taml: pre-adaptation query losses must be positive");
    losses.push_back(loss);
  }
  Tensor total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  Tensor mean_loss = scale(total, 1.0 / static_cast<double>(losses.size()));
  Tensor theil;
  for (std::size_t i = 0; i < losses.size(); ++i) {
    Tensor ratio = div(losses[i], mean_loss);
    Tensor term = mul(ratio, log(ratio));
    theil = i == 0 ? term : add(theil, term);
  }
  GradientMap g = gradient(scale(theil, lambda), bound, false);
  std::vector<std::vector<double>> out;
  out.reserve(bound.size());
  for (const auto& b : bound) out.push_back(g.at(b).to_vector());
  return out;
}

}  // namespace detail

// MAML outer update: one Adam step on the gradient of the summed
// post-adaptation query losses, with full second-order terms.
inline void meta_update_maml(MetaModel& model, Adam& adam, const ParamSet& base_layout,
                             std::span<const TaskObjective* const> batch,
                             const TrainConfig& cfg, BatchStats* stats = nullptr) {
  std::vector<detail::TaskGrad> tg;
  tg.reserve(batch.size());
  for (const TaskObjective* obj : batch)
    tg.push_back(detail::task_meta_grad(model, base_layout, nullptr, *obj, cfg.adapt_steps));
  std::vector<std::vector<std::vector<double>>> per_task;
  for (auto& t : tg) per_task.push_back(t.grads);
  adam.step(model.meta, merge_gradients(per_task));
  detail::fill_stats(stats, tg);
}

// MetaSGD outer update: joint Adam step on (theta, alpha).
inline void meta_update_metasgd(MetaModel& model, Adam& adam, const ParamSet& base_layout,
                                std::span<const TaskObjective* const> batch,
                                const TrainConfig& cfg, BatchStats* stats = nullptr) {
  if (model.variant != Variant::metasgd) throw error("meta_update_metasgd: wrong variant");
  std::vector<detail::TaskGrad> tg;
  tg.reserve(batch.size());
  for (const TaskObjective* obj : batch)
    tg.push_back(detail::task_meta_grad(model, base_layout, nullptr, *obj, cfg.adapt_steps));
  std::vector<std::vector<std::vector<double>>> per_task;
  for (auto& t : tg) per_task.push_back(t.grads);
  adam.step(model.meta, merge_gradients(per_task));
  detail::fill_stats(stats, tg);
}

// TAML outer update: MAML objective plus the Theil inequality term over the
// pre-adaptation query losses, weighted by lambda.
inline void meta_update_taml(MetaModel& model, Adam& adam, const ParamSet& base_layout,
                             std::span<const TaskObjective* const> batch,
                             const TrainConfig& cfg, BatchStats* stats = nullptr) {
  std::vector<detail::TaskGrad> tg;
  tg.reserve(batch.size());
  for (const TaskObjective* obj : batch)
    tg.push_back(detail::task_meta_grad(model, base_layout, nullptr, *obj, cfg.adapt_steps));
  std::vector<std::vector<std::vector<double>>> per_task;
  for (auto& t : tg) per_task.push_back(t.grads);
  std::vector<std::vector<double>> total = merge_gradients(per_task);
  if (cfg.taml_lambda != 0.0) {
    auto theil = detail::taml_theil_grad(model, batch, cfg.taml_lambda);
    for (std::size_t a = 0; a < total.size(); ++a)
      for (std::size_t i = 0; i < total[a].size(); ++i) total[a][i] += theil[a][i];
  }
  adam.step(model.meta, total);
  detail::fill_stats(stats, tg);
}

// Sequential parametric-optimizer update: adapt and take one Adam step per
// task, in order. Later tasks see weights already moved by earlier ones;
// the final weights depend on task order.
inline void meta_update_metalstm_sequential(MetaModel& model, Adam& adam,
                                            const ParamSet& base_layout,
                                            const LstmOptimizer& optimizer,
                                            std::span<const TaskObjective* const> batch,
                                            const TrainConfig& cfg,
                                            BatchStats* stats = nullptr) {
  if (batch.empty()) throw error("meta_update_metalstm_sequential: empty task list");
  std::vector<detail::TaskGrad> tg;
  for (const TaskObjective* obj : batch) {
    auto g = detail::task_meta_grad(model, base_layout, &optimizer, *obj, cfg.adapt_steps);
    adam.step(model.meta, g.grads);
    tg.push_back(std::move(g));
  }
  detail::fill_stats(stats, tg);
}

// Batch parametric-optimizer update (the MetaLSTM++ regimen): adapt every
// task against the same weights, then one Adam step on the summed query-loss
// gradient. Bitwise invariant to task order within the batch.
inline void meta_update_metalstm_batch(MetaModel& model, Adam& adam,
                                       const ParamSet& base_layout,
                                       const LstmOptimizer& optimizer,
                                       std::span<const TaskObjective* const> batch,
                                       const TrainConfig& cfg, BatchStats* stats = nullptr) {
  if (batch.empty()) throw error("meta_update_metalstm_batch: empty batch");
  std::vector<detail::TaskGrad> tg;
  tg.reserve(batch.size());
  for (const TaskObjective* obj : batch)
    tg.push_back(detail::task_meta_grad(model, base_layout, &optimizer, *obj, cfg.adapt_steps));
  std::vector<std::vector<std::vector<double>>> per_task;
  for (auto& t : tg) per_task.push_back(t.grads);
  adam.step(model.meta, merge_gradients(per_task));
  detail::fill_stats(stats, tg);
}

// --- task-attended step (the training curriculum) ---------------------------

// One attended outer iteration.
//
// Phase 1: adapt each task of the batch, collect per-task meta-gradients
//   g_i = d L*_i / d theta and the meta-information tuples; the attention
//   net maps the tuples to weights w on the simplex.
// Phase 2: theta update on sum_i w_i g_i with w entering as numbers, so the
//   theta gradient is exactly the w-weighted sum of per-task gradients;
//   the updated theta is also kept as a differentiable function of w (the
//   g_i stay constant along that path).
// Phase 3: a fresh batch is adapted from the updated theta; the summed query
//   loss is differentiated along delta -> w -> theta' -> phi -> L* and delta
//   takes one Adam step with rate gamma.
inline void task_attended_step(MetaModel& model, Adam& meta_adam, const ParamSet& base_layout,
                               const LstmOptimizer* optimizer, const AttentionNet& attention,
                               ParamSet& delta, Adam& delta_adam,
                               std::span<const TaskObjective* const> batch,
                               std::span<const TaskObjective* const> fresh_batch,
                               const TrainConfig& cfg, BatchStats* stats = nullptr) {
  if (model.variant == Variant::metalstm)
    throw error("task_attended_step: the sequential MetaLSTM core does not support attention");
  if (static_cast<int>(batch.size()) != attention.batch_size() ||
      static_cast<int>(fresh_batch.size()) != attention.batch_size())
    throw error("task_attended_step: batch size must match the attention net");

  // Phase 1.
  std::vector<detail::TaskGrad> tg;
  tg.reserve(batch.size());
  for (const TaskObjective* obj : batch)
    tg.push_back(detail::task_meta_grad(model, base_layout, optimizer, *obj, cfg.adapt_steps));
  std::vector<AdaptResult> rs;
  rs.reserve(tg.size());
  for (const auto& t : tg) rs.push_back(t.result_summary);
  std::vector<MetaInfo> infos = compute_meta_info(rs);

  // Attention record: delta -> w -> theta'.
  Tape atape;
  std::vector<Tensor> delta_bound = delta.bind(atape, true);
  Tensor w = attention.forward(atape, delta_bound, infos);
  std::vector<double> w_values = w.to_vector();
  for (double wi : w_values)
    if (!std::isfinite(wi)) throw numeric_error("task_attended_step: non-finite attention");

  // Phase 2: weighted meta-gradient, with w as data for the theta step.
  std::vector<Tensor> weighted_grads;
  weighted_grads.reserve(model.meta.count());
  for (std::size_t a = 0; a < model.meta.count(); ++a) {
    Tensor acc;
    for (std::size_t i = 0; i < tg.size(); ++i) {
      Tensor wi = slice_cols(w, static_cast<long>(i), static_cast<long>(i) + 1);
      Tensor gi = atape.constant(model.meta.def(a).shape, tg[i].grads[a]);
      Tensor term = mul(wi, gi);
      acc = (i == 0) ? term : add(acc, term);
    }
    weighted_grads.push_back(acc);
  }
  std::vector<Tensor> theta_next = meta_adam.step_on_tape(atape, model.meta, weighted_grads);

  // Phase 3: fresh batch adapted from theta'; gradients with respect to
  // theta' are merged and chained back into delta through the attention
  // record, with the phase-2 per-task gradients held constant.
  MetaModel updated = model;  // values already advanced by step_on_tape
  std::vector<std::vector<std::vector<double>>> fresh_grads;
  for (const TaskObjective* obj : fresh_batch) {
    auto g = detail::task_meta_grad(updated, base_layout, optimizer, *obj, cfg.adapt_steps);
    fresh_grads.push_back(std::move(g.grads));
  }
  std::vector<std::vector<double>> H = merge_gradients(fresh_grads);

  Tensor pseudo;
  for (std::size_t a = 0; a < model.meta.count(); ++a) {
    Tensor h = atape.constant(model.meta.def(a).shape, H[a]);
    Tensor term = sum(mul(h, theta_next[a]));
    pseudo = (a == 0) ? term : add(pseudo, term);
  }
  GradientMap dg = gradient(pseudo, delta_bound, false);
  std::vector<std::vector<double>> delta_grads;
  delta_grads.reserve(delta_bound.size());
  for (const auto& d : delta_bound) delta_grads.push_back(dg.at(d).to_vector());
  delta_adam.step(delta, delta_grads);

  if (stats != nullptr) {
    detail::fill_stats(stats, tg);
    stats->attention = w_values;
  }
}

// --- meta-testing -------------------------------------------------------------

struct EvalReport {
  double mean_accuracy = 0.0;
  double ci95_halfwidth = 0.0;
  std::vector<double> per_task_accuracies;
  int n_tasks = 0;
};

// Adapts on each test task's support set (no meta-update) and reports the
// query accuracy with a 95% normal-approximation confidence halfwidth.
inline EvalReport meta_test(const MetaModel& model, const BaseLearner& learner,
                            const ParamSet& base_layout, const LstmOptimizer* optimizer,
                            const MetaSplit& split, Pool pool, const TaskSpec& spec,
                            int n_tasks, int T, std::uint64_t seed) {
  if (n_tasks < 1) throw error("meta_test: n_tasks must be >= 1");
  EvalReport report;
  report.n_tasks = n_tasks;
  report.per_task_accuracies.reserve(static_cast<std::size_t>(n_tasks));
  for (int i = 0; i < n_tasks; ++i) {
    RngStream rng = RngStream::derive(seed, {0x6d657461746573ULL, static_cast<std::uint64_t>(i)});
    Task task = sample_task(split, pool, spec, rng);
    ClassificationObjective obj(learner, task);

    Tape tape;
    std::vector<Tensor> bound = model.meta.bind(tape, false);
    AdaptResult r;
    switch (model.variant) {
      case Variant::maml:
      case Variant::taml:
        r = adapt_gd(tape, bound, {}, model.inner_lr, obj, T, false);
        break;
      case Variant::metasgd: {
        std::vector<Tensor> theta(bound.begin(),
                                  bound.begin() + static_cast<long>(model.base_array_count));
        std::span<const Tensor> alpha(bound.data() + model.base_array_count,
                                      bound.size() - model.base_array_count);
        r = adapt_gd(tape, theta, alpha, 0.0, obj, T, false);
        break;
      }
      case Variant::metalstm:
      case Variant::metalstm_pp:
        if (optimizer == nullptr) throw error("meta_test: optimizer required");
        r = adapt_lstm(tape, *optimizer, bound, base_layout, obj, T);
        break;
    }
    report.per_task_accuracies.push_back(r.query_accuracy);
  }
  auto [mean, hw] = ci95(report.per_task_accuracies);
  report.mean_accuracy = mean;
  report.ci95_halfwidth = hw;
  return report;
}

}  // namespace tameta
