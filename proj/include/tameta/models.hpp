#pragma once

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "tameta/common.hpp"
#include "tameta/params.hpp"
#include "tameta/rng.hpp"
#include "tameta/tensor.hpp"

namespace tameta {

// --- base learner ---------------------------------------------------------

// Fully connected relu classifier trained with softmax cross-entropy.
// Desk-scale stand-in for the usual convolutional few-shot base model.
class BaseLearner {
 public:
  BaseLearner(int input_dim, std::vector<int> hidden, int n_way)
      : sizes_{input_dim} {
    for (int h : hidden) sizes_.push_back(h);
    sizes_.push_back(n_way);
    if (input_dim < 1 || n_way < 2) throw config_error("BaseLearner: bad dimensions");
    for (int s : sizes_)
      if (s < 1) throw config_error("BaseLearner: layer sizes must be positive");
  }

  const std::vector<int>& layer_sizes() const { return sizes_; }
  int n_way() const { return sizes_.back(); }
  int input_dim() const { return sizes_.front(); }

  // He-normal weights, zero biases.
  ParamSet init_params(RngStream& rng) const {
    ParamSet p;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      long in = sizes_[l], out = sizes_[l + 1];
      std::vector<double> w(static_cast<std::size_t>(in * out));
      double sd = std::sqrt(2.0 / static_cast<double>(in));
      for (auto& x : w) x = sd * rng.normal();
      p.add("w" + std::to_string(l + 1), Shape{in, out}, std::move(w));
      p.add("b" + std::to_string(l + 1), Shape{1, out},
            std::vector<double>(static_cast<std::size_t>(out), 0.0));
    }
    return p;
  }

  // Logits for a row-major (rows x input_dim) input. `params` must follow
  // the init_params layout (w1, b1, w2, b2, ...).
  Tensor forward(const std::vector<Tensor>& params, const Tensor& inputs) const {
    if (params.size() != 2 * (sizes_.size() - 1))
      throw shape_error("BaseLearner::forward: wrong parameter count");
    if (inputs.cols() != sizes_.front())
      throw shape_error("BaseLearner::forward: input width mismatch");
    Tensor x = inputs;
    for (std::size_t l = 0; l + 1 < sizes_.size(); ++l) {
      x = add(matmul(x, params[2 * l]), params[2 * l + 1]);
      if (l + 2 < sizes_.size()) x = relu(x);
    }
    return x;
  }
};

// Fraction of rows whose argmax logit matches the label; ties resolve to the
// smallest index.
inline double accuracy_from_logits(const Tensor& logits, std::span<const int> labels) {
  long rows = logits.rows(), cols = logits.cols();
  if (rows != static_cast<long>(labels.size()))
    throw shape_error("accuracy_from_logits: row/label mismatch");
  auto v = logits.values();
  long correct = 0;
  for (long r = 0; r < rows; ++r) {
    long best = 0;
    for (long c = 1; c < cols; ++c)
      if (v[static_cast<std::size_t>(r * cols + c)] >
          v[static_cast<std::size_t>(r * cols + best)])
        best = c;
    if (best == labels[static_cast<std::size_t>(r)]) ++correct;
  }
  return static_cast<double>(correct) / static_cast<double>(rows);
}

// Mean cross-entropy (differentiable) and argmax accuracy (plain value) on a
// dataset given bound parameters.
inline std::pair<Tensor, double> evaluate(const BaseLearner& model,
                                          const std::vector<Tensor>& params, Tape& tape,
                                          std::span<const double> x, std::span<const int> y) {
  if (y.empty()) throw error("evaluate: empty dataset");
  long rows = static_cast<long>(y.size());
  Tensor inputs = tape.constant(Shape{rows, model.input_dim()}, x);
  Tensor logits = model.forward(params, inputs);
  Tensor targets = tape.constant(Shape{rows, model.n_way()}, onehot_matrix(y, model.n_way()));
  Tensor loss = cross_entropy(logits, targets);
  return {loss, accuracy_from_logits(logits, y)};
}

// --- coordinatewise LSTM optimizer ----------------------------------------

// Log-scale input preprocessing for learned optimizers: a value x maps to
// (log(|x|)/p, sign(x)) when |x| >= e^-p, else (-1, e^p * x), with p = 10.
inline constexpr double kPreprocessP = 10.0;

inline std::pair<double, double> preprocess_value(double x) {
  const double cutoff = std::exp(-kPreprocessP);
  if (std::abs(x) >= cutoff)
    return {std::log(std::abs(x)) / kPreprocessP, x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0)};
  return {-1.0, std::exp(kPreprocessP) * x};
}

// Per-coordinate feature rows [grad_f1, grad_f2, loss_f1, loss_f2]; the loss
// pair is broadcast to every coordinate.
inline std::vector<double> preprocess_optimizer_inputs(double loss,
                                                       std::span<const double> grad) {
  auto [lf1, lf2] = preprocess_value(loss);
  std::vector<double> out;
  out.reserve(grad.size() * 4);
  for (double g : grad) {
    auto [gf1, gf2] = preprocess_value(g);
    out.push_back(gf1);
    out.push_back(gf2);
    out.push_back(lf1);
    out.push_back(lf2);
  }
  return out;
}

// Per-coordinate recurrent state of the optimizer. The outer cell state `c`
// is the flattened base-model parameter vector; h/c pairs are the internal
// states of the two coordinate-shared LSTM layers.
struct LstmState {
  Tensor h1, c1, h2, c2;  // [P x hidden]
  Tensor c;               // [P x 1], aliases the base parameters
};

// Two-layer coordinate-shared LSTM whose sigmoid output heads gate the
// parameter update: c_t = f_t * c_{t-1} + i_t * (-grad). The learnable
// initial cell value c0 doubles as the base model's initial parameters.
class LstmOptimizer {
 public:
  LstmOptimizer(long coord_count, int hidden)
      : coords_(coord_count), hidden_(hidden) {
    if (coord_count < 1 || hidden < 1) throw config_error("LstmOptimizer: bad dimensions");
  }

  long coord_count() const { return coords_; }
  int hidden() const { return hidden_; }

  // Forget-gate head biased to +5 (f ~ 1) and input-gate head to -5 (i ~ 0)
  // so the untrained optimizer is close to the identity update.
  ParamSet init_params(RngStream& rng, std::span<const double> initial_cell) const {
    if (static_cast<long>(initial_cell.size()) != coords_)
      throw shape_error("LstmOptimizer::init_params: initial cell size mismatch");
    ParamSet p;
    const long H = hidden_;
    auto mat = [&](const std::string& name, long r, long c, double sd) {
      std::vector<double> w(static_cast<std::size_t>(r * c));
      for (auto& x : w) x = sd * rng.normal();
      p.add(name, Shape{r, c}, std::move(w));
    };
    mat("wx1", 4, 4 * H, 1.0 / std::sqrt(4.0));
    mat("wh1", H, 4 * H, 1.0 / std::sqrt(static_cast<double>(H)));
    p.add("b1", Shape{1, 4 * H}, std::vector<double>(static_cast<std::size_t>(4 * H), 0.0));
    mat("wx2", H, 4 * H, 1.0 / std::sqrt(static_cast<double>(H)));
    mat("wh2", H, 4 * H, 1.0 / std::sqrt(static_cast<double>(H)));
    p.add("b2", Shape{1, 4 * H}, std::vector<double>(static_cast<std::size_t>(4 * H), 0.0));
    mat("wf", H, 1, 0.01);
    p.add("bf", Shape{1, 1}, {5.0});
    mat("wi", H, 1, 0.01);
    p.add("bi", Shape{1, 1}, {-5.0});
    p.add("c0", Shape{coords_, 1},
          std::vector<double>(initial_cell.begin(), initial_cell.end()));
    return p;
  }

  // Zeroed internal states; the outer cell starts at c0.
  LstmState initial_state(Tape& tape, const std::vector<Tensor>& weights) const {
    LstmState s;
    s.h1 = tape.zeros(Shape{coords_, hidden_});
    s.c1 = tape.zeros(Shape{coords_, hidden_});
    s.h2 = tape.zeros(Shape{coords_, hidden_});
    s.c2 = tape.zeros(Shape{coords_, hidden_});
    s.c = weights[10];  // c0
    return s;
  }

  // One optimizer step. `loss` and `grad` are treated as data (no gradient
  // flows into them); the returned state is differentiable with respect to
  // the LSTM weights through the h and c chains.
  LstmState step(Tape& tape, const std::vector<Tensor>& w, const LstmState& state,
                 double loss, std::span<const double> grad) const {
    if (static_cast<long>(grad.size()) != coords_)
      throw shape_error("LstmOptimizer::step: gradient length mismatch");
    Tensor x = tape.constant(Shape{coords_, 4}, preprocess_optimizer_inputs(loss, grad));

    auto cell = [&](const Tensor& xin, const Tensor& wx, const Tensor& wh, const Tensor& b,
                    const Tensor& h_prev, const Tensor& c_prev) {
      Tensor gates = add(add(matmul(xin, wx), matmul(h_prev, wh)), b);
      const long H = hidden_;
      Tensor gi = sigmoid(slice_cols(gates, 0, H));
      Tensor gf = sigmoid(slice_cols(gates, H, 2 * H));
      Tensor gg = tanh(slice_cols(gates, 2 * H, 3 * H));
      Tensor go = sigmoid(slice_cols(gates, 3 * H, 4 * H));
      Tensor c_new = add(mul(gf, c_prev), mul(gi, gg));
      Tensor h_new = mul(go, tanh(c_new));
      return std::pair<Tensor, Tensor>{h_new, c_new};
    };

    LstmState next;
    auto [h1, c1] = cell(x, w[0], w[1], w[2], state.h1, state.c1);
    next.h1 = h1;
    next.c1 = c1;
    auto [h2, c2] = cell(h1, w[3], w[4], w[5], state.h2, state.c2);
    next.h2 = h2;
    next.c2 = c2;

    Tensor f_t = sigmoid(add(matmul(h2, w[6]), w[7]));
    Tensor i_t = sigmoid(add(matmul(h2, w[8]), w[9]));
    std::vector<double> neg_grad(grad.size());
    for (std::size_t i = 0; i < grad.size(); ++i) neg_grad[i] = -grad[i];
    Tensor update = tape.constant(Shape{coords_, 1}, neg_grad);
    next.c = add(mul(f_t, state.c), mul(i_t, update));
    return next;
  }
};

// --- task attention ---------------------------------------------------------

// The four-tuple of meta-information computed per task after adaptation.
struct MetaInfo {
  double grad_norm = 0.0;      // ||d query_loss / d phi|| at phi^T
  double query_loss = 0.0;     // L*^T
  double query_accuracy = 0.0; // A*^T
  double loss_ratio = 0.0;     // L*^T / L*^0

  void validate() const {
    if (!std::isfinite(grad_norm) || !std::isfinite(query_loss) ||
        !std::isfinite(query_accuracy) || !std::isfinite(loss_ratio))
      throw numeric_error("MetaInfo: non-finite entry");
    if (grad_norm < 0.0 || loss_ratio < 0.0 || query_accuracy < 0.0 || query_accuracy > 1.0)
      throw error("MetaInfo: entry out of range");
  }
};

namespace detail {

// Sum in value-sorted order: bitwise invariant to the order of the terms.
inline double ordered_sum(std::vector<double> terms) {
  std::sort(terms.begin(), terms.end());
  double s = 0.0;
  for (double t : terms) s += t;
  return s;
}

}  // namespace detail

// Shared per-task scorer: each task's standardized meta-information tuple
// passes through the same two-layer relu network to a scalar score, and the
// scores are normalized by a softmax. Weight sharing across tasks makes the
// output permutation-equivariant; batch statistics and the softmax
// normalizer are accumulated in value-sorted order so the equivariance is
// exact in floating point as well.
class AttentionNet {
 public:
  AttentionNet(int batch_size, int hidden = 32) : batch_(batch_size), hidden_(hidden) {
    if (batch_size < 1 || hidden < 1) throw config_error("AttentionNet: bad dimensions");
  }

  int batch_size() const { return batch_; }
  int hidden() const { return hidden_; }

  // Hidden layers He-normal; the scoring head starts at zero so the initial
  // attention is uniform.
  ParamSet init_params(RngStream& rng) const {
    ParamSet p;
    const long H = hidden_;
    auto mat = [&](const std::string& name, long r, long c, double sd) {
      std::vector<double> w(static_cast<std::size_t>(r * c));
      for (auto& x : w) x = sd * rng.normal();
      p.add(name, Shape{r, c}, std::move(w));
    };
    mat("aw1", 4, H, std::sqrt(2.0 / 4.0));
    p.add("ab1", Shape{1, H}, std::vector<double>(static_cast<std::size_t>(H), 0.0));
    mat("aw2", H, H, std::sqrt(2.0 / static_cast<double>(H)));
    p.add("ab2", Shape{1, H}, std::vector<double>(static_cast<std::size_t>(H), 0.0));
    p.add("aw3", Shape{H, 1}, std::vector<double>(static_cast<std::size_t>(H), 0.0));
    p.add("ab3", Shape{1, 1}, {0.0});
    return p;
  }

  // Standardized (z-scored per feature across the batch, eps 1e-8) input
  // rows for the scorer. Meta-information enters as data.
  std::vector<double> standardize(std::span<const MetaInfo> infos) const {
    std::vector<double> rows(infos.size() * 4);
    for (std::size_t i = 0; i < infos.size(); ++i) {
      infos[i].validate();
      rows[i * 4 + 0] = infos[i].grad_norm;
      rows[i * 4 + 1] = infos[i].query_loss;
      rows[i * 4 + 2] = infos[i].query_accuracy;
      rows[i * 4 + 3] = infos[i].loss_ratio;
    }
    const double n = static_cast<double>(infos.size());
    for (int f = 0; f < 4; ++f) {
      std::vector<double> col(infos.size());
      for (std::size_t i = 0; i < infos.size(); ++i) col[i] = rows[i * 4 + f];
      double mean = detail::ordered_sum(col) / n;
      std::vector<double> dev2(infos.size());
      for (std::size_t i = 0; i < infos.size(); ++i)
        dev2[i] = (col[i] - mean) * (col[i] - mean);
      double sd = std::sqrt(detail::ordered_sum(dev2) / n);
      for (std::size_t i = 0; i < infos.size(); ++i)
        rows[i * 4 + f] = (col[i] - mean) / (sd + 1e-8);
    }
    return rows;
  }

  // Attention weights w ([1 x B], nonnegative, summing to 1), differentiable
  // with respect to the attention parameters.
  Tensor forward(Tape& tape, const std::vector<Tensor>& params,
                 std::span<const MetaInfo> infos) const {
    if (static_cast<int>(infos.size()) != batch_)
      throw shape_error("AttentionNet::forward: expected exactly B meta-info tuples");
    Tensor in = tape.constant(Shape{batch_, 4}, standardize(infos));
    Tensor h = relu(add(matmul(in, params[0]), params[1]));
    h = relu(add(matmul(h, params[2]), params[3]));
    Tensor scores = add(matmul(h, params[4]), params[5]);  // [B x 1]

    // Order-invariant softmax over the B scores.
    auto sv = scores.values();
    double mx = *std::max_element(sv.begin(), sv.end());
    Tensor shifted = sub(scores, tape.constant_scalar(mx));
    Tensor e = transpose(exp(shifted));  // [1 x B]

    std::vector<Tensor> terms;
    terms.reserve(static_cast<std::size_t>(batch_));
    for (int i = 0; i < batch_; ++i) terms.push_back(slice_cols(e, i, i + 1));
    std::sort(terms.begin(), terms.end(),
              [](const Tensor& a, const Tensor& b) { return a.item() < b.item(); });
    Tensor denom = terms[0];
    for (std::size_t i = 1; i < terms.size(); ++i) denom = add(denom, terms[i]);
    return div(e, denom);
  }
};

}  // namespace tameta
