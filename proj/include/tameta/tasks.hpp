#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"
#include "tameta/common.hpp"
#include "tameta/rng.hpp"
#include "tameta/tensor.hpp"

namespace tameta {

// N-way K-shot Q-query episode layout.
struct TaskSpec {
  int n_way = 5;
  int k_shot = 1;
  int q_query = 15;

  void validate() const {
    if (n_way < 2) throw config_error("TaskSpec: n_way must be >= 2");
    if (k_shot < 1) throw config_error("TaskSpec: k_shot must be >= 1");
    if (q_query < 1) throw config_error("TaskSpec: q_query must be >= 1");
  }
};

// One episode: support rows for adaptation, query rows for evaluation.
// Labels are relabeled to 0..N-1 within the task; rows are grouped by class
// (exactly K support and Q query rows per class).
struct Task {
  int n_way = 0;
  int input_dim = 0;
  std::vector<double> support_x;  // (n_way*k_shot) x input_dim, row-major
  std::vector<int> support_y;
  std::vector<double> query_x;  // (n_way*q_query) x input_dim
  std::vector<int> query_y;
  std::vector<int> class_ids;  // original class identities, in relabel order

  long support_rows() const { return static_cast<long>(support_y.size()); }
  long query_rows() const { return static_cast<long>(query_y.size()); }
};

inline std::vector<double> onehot_matrix(std::span<const int> labels, int n_way) {
  std::vector<double> m(labels.size() * static_cast<std::size_t>(n_way), 0.0);
  for (std::size_t r = 0; r < labels.size(); ++r) {
    if (labels[r] < 0 || labels[r] >= n_way) throw error("onehot_matrix: label out of range");
    m[r * static_cast<std::size_t>(n_way) + static_cast<std::size_t>(labels[r])] = 1.0;
  }
  return m;
}

// Gaussian class family: each class is an isotropic Gaussian in R^d around
// a prototype drawn once, uniformly in [-prototype_scale, prototype_scale]^d.
struct GaussianFamilyConfig {
  int input_dim = 32;
  int n_classes = 100;
  int train_classes = 64;
  int val_classes = 16;
  int test_classes = 20;
  double prototype_scale = 1.0;
  double class_sigma = 0.35;

  void validate() const {
    if (input_dim < 1) throw config_error("family: input_dim must be >= 1");
    if (n_classes < 3) throw config_error("family: n_classes must be >= 3");
    if (train_classes < 1 || val_classes < 1 || test_classes < 1)
      throw config_error("family: all class pools must be nonempty");
    if (train_classes + val_classes + test_classes != n_classes)
      throw config_error("family: pool sizes must sum to n_classes");
    if (!(prototype_scale > 0.0)) throw config_error("family: prototype_scale must be positive");
    if (!(class_sigma > 0.0)) throw config_error("family: class_sigma must be positive");
  }
};

enum class Pool { train, val, test };

// Frozen class prototypes plus the disjoint train/val/test class pools.
struct MetaSplit {
  GaussianFamilyConfig config;
  std::uint64_t seed = 0;
  std::vector<std::vector<double>> prototypes;  // n_classes x input_dim
  std::vector<int> train_pool;
  std::vector<int> val_pool;
  std::vector<int> test_pool;

  const std::vector<int>& pool(Pool p) const {
    switch (p) {
      case Pool::train: return train_pool;
      case Pool::val: return val_pool;
      default: return test_pool;
    }
  }
};

// Draws prototypes and partitions class identities into disjoint pools.
// Deterministic given (config, seed). Each pool must be able to host an
// n_way-class task.
inline MetaSplit build_meta_splits(const GaussianFamilyConfig& config, std::uint64_t seed,
                                   int n_way) {
  config.validate();
  if (config.train_classes < n_way || config.val_classes < n_way ||
      config.test_classes < n_way)
    throw config_error("build_meta_splits: a class pool is smaller than n_way");

  MetaSplit split;
  split.config = config;
  split.seed = seed;

  RngStream proto_rng = RngStream::derive(seed, {0x70726f746fULL});  // "proto"
  split.prototypes.resize(static_cast<std::size_t>(config.n_classes));
  for (auto& p : split.prototypes) {
    p.resize(static_cast<std::size_t>(config.input_dim));
    for (auto& x : p) x = proto_rng.uniform(-config.prototype_scale, config.prototype_scale);
  }

  std::vector<int> ids(static_cast<std::size_t>(config.n_classes));
  for (int i = 0; i < config.n_classes; ++i) ids[static_cast<std::size_t>(i)] = i;
  RngStream pool_rng = RngStream::derive(seed, {0x706f6f6cULL});  // "pool"
  pool_rng.shuffle(ids);
  auto it = ids.begin();
  split.train_pool.assign(it, it + config.train_classes);
  it += config.train_classes;
  split.val_pool.assign(it, it + config.val_classes);
  it += config.val_classes;
  split.test_pool.assign(it, it + config.test_classes);
  return split;
}

// Samples one episode from the given class pool.
inline Task sample_task(const MetaSplit& split, Pool pool, const TaskSpec& spec, RngStream& rng) {
  spec.validate();
  const auto& ids = split.pool(pool);
  if (static_cast<int>(ids.size()) < spec.n_way)
    throw config_error("sample_task: pool is smaller than n_way");

  const int d = split.config.input_dim;
  Task task;
  task.n_way = spec.n_way;
  task.input_dim = d;

  auto chosen = rng.sample_without_replacement(ids.size(), static_cast<std::size_t>(spec.n_way));
  task.class_ids.reserve(static_cast<std::size_t>(spec.n_way));
  for (auto c : chosen) task.class_ids.push_back(ids[c]);

  auto draw_row = [&](int class_id, std::vector<double>& dst) {
    const auto& proto = split.prototypes[static_cast<std::size_t>(class_id)];
    for (int j = 0; j < d; ++j)
      dst.push_back(proto[static_cast<std::size_t>(j)] +
                    split.config.class_sigma * rng.normal());
  };

  for (int c = 0; c < spec.n_way; ++c) {
    for (int k = 0; k < spec.k_shot; ++k) {
      draw_row(task.class_ids[static_cast<std::size_t>(c)], task.support_x);
      task.support_y.push_back(c);
    }
  }
  for (int c = 0; c < spec.n_way; ++c) {
    for (int q = 0; q < spec.q_query; ++q) {
      draw_row(task.class_ids[static_cast<std::size_t>(c)], task.query_x);
      task.query_y.push_back(c);
    }
  }
  return task;
}

// Samples a batch of B episodes. The stream for each call position is
// typically derived from (master seed, iteration), so sampling is
// reproducible from those two values alone.
inline std::vector<Task> sample_task_batch(const MetaSplit& split, Pool pool,
                                           const TaskSpec& spec, int batch_size,
                                           RngStream& rng) {
  if (batch_size < 1) throw config_error("sample_task_batch: batch_size must be >= 1");
  std::vector<Task> batch;
  batch.reserve(static_cast<std::size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) batch.push_back(sample_task(split, pool, spec, rng));
  return batch;
}

// --- 2-D quadratic surfaces (optimization-trajectory study) -------------

// Loss surface (p - b)^T A (p - b) with A symmetric positive definite.
struct QuadraticTask {
  std::vector<double> a;  // 2x2 row-major
  std::vector<double> b;  // optimum

  void validate() const {
    if (a.size() != 4 || b.size() != 2) throw config_error("QuadraticTask: bad dimensions");
    double tr = a[0] + a[3];
    double det = a[0] * a[3] - a[1] * a[2];
    if (!(tr > 0.0 && det > 0.0))
      throw config_error("QuadraticTask: matrix is not positive definite");
  }
};

struct QuadraticFamilyConfig {
  double eig_min = 0.5;
  double eig_max = 4.0;
  double center_scale = 1.5;

  void validate() const {
    if (!(eig_min > 0.0) || !(eig_max >= eig_min))
      throw config_error("quadratic family: need 0 < eig_min <= eig_max");
    if (!(center_scale > 0.0)) throw config_error("quadratic family: center_scale must be > 0");
  }
};

// Random SPD matrix via eigenvalues in [eig_min, eig_max] and a random
// rotation; optimum uniform in the centered square.
inline QuadraticTask sample_quadratic(const QuadraticFamilyConfig& cfg, RngStream& rng) {
  cfg.validate();
  double l1 = rng.uniform(cfg.eig_min, cfg.eig_max);
  double l2 = rng.uniform(cfg.eig_min, cfg.eig_max);
  double th = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
  double c = std::cos(th), s = std::sin(th);
  QuadraticTask t;
  t.a = {c * c * l1 + s * s * l2, c * s * (l1 - l2), c * s * (l1 - l2),
         s * s * l1 + c * c * l2};
  t.b = {rng.uniform(-cfg.center_scale, cfg.center_scale),
         rng.uniform(-cfg.center_scale, cfg.center_scale)};
  return t;
}

// (point - b)^T A (point - b), differentiable in `point` ([1 x 2] tensor).
inline Tensor quadratic_loss(const QuadraticTask& task, const Tensor& point) {
  task.validate();
  if (point.size() != 2) throw shape_error("quadratic_loss: point must have 2 elements");
  Tape* tp = point.tape();
  if (tp == nullptr) throw graph_error("quadratic_loss: point must be on a record");
  Tensor p2 = point.shape().size() == 2 ? point : reshape(point, Shape{1, 2});
  Tensor diff = sub(p2, tp->constant(Shape{1, 2}, task.b));
  Tensor A = tp->constant(Shape{2, 2}, task.a);
  return matmul(matmul(diff, A), transpose(diff));
}

// --- split snapshots ------------------------------------------------------

inline nlohmann::json split_to_json(const MetaSplit& split) {
  nlohmann::json j;
  j["family"] = {{"input_dim", split.config.input_dim},
                 {"n_classes", split.config.n_classes},
                 {"train_classes", split.config.train_classes},
                 {"val_classes", split.config.val_classes},
                 {"test_classes", split.config.test_classes},
                 {"prototype_scale", split.config.prototype_scale},
                 {"class_sigma", split.config.class_sigma}};
  j["seed"] = split.seed;
  j["prototypes"] = split.prototypes;
  j["train_pool"] = split.train_pool;
  j["val_pool"] = split.val_pool;
  j["test_pool"] = split.test_pool;
  return j;
}

inline MetaSplit split_from_json(const nlohmann::json& j) {
  MetaSplit s;
  const auto& f = j.at("family");
  s.config.input_dim = f.at("input_dim").get<int>();
  s.config.n_classes = f.at("n_classes").get<int>();
  s.config.train_classes = f.at("train_classes").get<int>();
  s.config.val_classes = f.at("val_classes").get<int>();
  s.config.test_classes = f.at("test_classes").get<int>();
  s.config.prototype_scale = f.at("prototype_scale").get<double>();
  s.config.class_sigma = f.at("class_sigma").get<double>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.prototypes = j.at("prototypes").get<std::vector<std::vector<double>>>();
  s.train_pool = j.at("train_pool").get<std::vector<int>>();
  s.val_pool = j.at("val_pool").get<std::vector<int>>();
  s.test_pool = j.at("test_pool").get<std::vector<int>>();
  return s;
}

}  // namespace tameta
