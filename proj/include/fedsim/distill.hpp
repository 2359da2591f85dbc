// SPDX-License-Identifier: Apache-2.0
#pragma once

// Losses of the dual teacher/student local update and the update loop itself.
//
// Per batch both models see the same images. With H the representations, p
// the softmax outputs and W the auxiliary matrix:
//   task_m  = mean_i -log clamp(p_m[i, y_i], eps_p, 1)
//   rep     = mean((H_s W - H_t W)^2)
//   dec_r   = rep / (task_t + task_s + eps_d)
//   dec_d_s = KL(p_t || p_s) / (task_t + task_s + eps_d)
//   dec_d_t = KL(p_s || p_t) / (task_t + task_s + eps_d)
//   L_t = dec_d_t + dec_r + task_t,  L_s = dec_d_s + dec_r + task_s
// Inside L_t every student quantity is a constant, and vice versa.

#include <cstddef>
#include <span>
#include <vector>

#include "fedsim/autograd.hpp"
#include "fedsim/dataset.hpp"
#include "fedsim/models.hpp"
#include "fedsim/rng.hpp"

namespace fedsim {

struct LossBundle {
  double task_t = 0.0;
  double task_s = 0.0;
  double rep = 0.0;
  double dec_r = 0.0;
  double dec_d_t = 0.0;
  double dec_d_s = 0.0;
  double total_t = 0.0;
  double total_s = 0.0;
};

// Local training variants.
enum class LocalScheme {
  dual,           // teacher + student with all distillation terms
  dual_identity,  // auxiliary matrix fixed to the identity
  dual_no_rep,    // dec_r dropped from both totals
  single,         // student only, cross-entropy only
};

struct LocalUpdateConfig {
  std::size_t epochs = 5;
  std::size_t batch = 32;
  double learning_rate = 1e-3;
  double momentum = 0.0;
  double eps_p = 1e-7;
  double eps_d = 1e-8;
  LocalScheme scheme = LocalScheme::dual;
  bool train_aux = true;
  // Assigns KL(p_s || p_t) to the student and KL(p_t || p_s) to the teacher.
  bool swap_kl = false;
  // Rescales each model's gradient to this global L2 norm when exceeded; 0 = off.
  double clip_norm = 0.0;

  void validate() const;
};

namespace ag {

Var task_loss(Graph& g, Var logits, std::span<const std::size_t> labels, double eps_p);
Var rep_distill_loss(Graph& g, Var h_s, Var h_t, Var aux);
// Generalized KL: sum over classes of a log(a/b) - a + b, averaged over rows,
// with both sides clamped to [eps_p, 1]. Equal to KL(a || b) for unclamped
// probability rows and never negative.
Var kl_divergence(Graph& g, Var a, Var b, double eps_p);

}  // namespace ag

// Scalar forms of the individual terms.
double task_loss(const Tensor& logits, std::span<const std::size_t> labels, double eps_p = 1e-7);
double rep_distill_loss(const Tensor& h_s, const Tensor& h_t, const Tensor& aux);
double ddl_rep(double rep, double task_t, double task_s, double eps_d = 1e-8);
struct DecisionLosses {
  double teacher = 0.0;
  double student = 0.0;
};
DecisionLosses ddl_dec(const Tensor& p_t, const Tensor& p_s, double task_t, double task_s,
                       double eps_p = 1e-7, double eps_d = 1e-8);
struct Totals {
  double teacher = 0.0;
  double student = 0.0;
};
Totals total_losses(const LossBundle& parts);

// Both objectives of one batch on a shared graph.
struct DualObjective {
  Graph graph;
  std::vector<Var> teacher;
  std::vector<Var> student;
  Var aux;
  Var loss_t;
  Var loss_s;
  LossBundle bundle;
};

DualObjective build_dual_objective(const ModelConfig& model, const ClientModels& models,
                                   const Tensor& images, std::span<const std::size_t> labels,
                                   const LocalUpdateConfig& cfg);

// Gradients of one batch: teacher from L_t, student from L_s, auxiliary matrix
// from L_t + L_s. Under the single scheme only the student entries are set.
struct BatchGradients {
  std::vector<Tensor> teacher;
  std::vector<Tensor> student;
  Tensor aux;
  LossBundle bundle;
};

BatchGradients batch_gradients(const ModelConfig& model, const ClientModels& models,
                               const Tensor& images, std::span<const std::size_t> labels,
                               const LocalUpdateConfig& cfg);

// Epochs of shuffled minibatches over shard; one bundle per batch.
std::vector<LossBundle> local_update(const ModelConfig& model, ClientModels& models,
                                     const Dataset& data, std::span<const std::size_t> shard,
                                     const LocalUpdateConfig& cfg, Rng& rng);

LossBundle mean_bundle(std::span<const LossBundle> history);

}  // namespace fedsim
