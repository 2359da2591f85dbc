// SPDX-License-Identifier: Apache-2.0
#include "fedsim/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "fedsim/errors.hpp"
#include "fedsim/sgd.hpp"

namespace fedsim {

void LocalUpdateConfig::validate() const {
  if (epochs < 1) throw ConfigError("local epochs must be >= 1");
  if (batch < 1) throw ConfigError("batch size must be >= 1");
  if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) {
    throw ConfigError("learning rate must be finite and >= 0");
  }
  if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
  if (!(eps_p > 0.0 && eps_p <= 1e-3)) throw ConfigError("eps_p must lie in (0, 1e-3]");
  if (!(eps_d > 0.0 && eps_d <= 1e-3)) throw ConfigError("eps_d must lie in (0, 1e-3]");
  if (!(clip_norm >= 0.0)) throw ConfigError("clip_norm must be >= 0");
}

namespace ag {

Var task_loss(Graph& g, Var logits, std::span<const std::size_t> labels, double eps_p) {
  const Var p = softmax(g, logits);
  const Var picked = clamp(g, pick(g, p, labels), eps_p, 1.0);
  return scale(g, mean(g, log(g, picked)), -1.0);
}

Var rep_distill_loss(Graph& g, Var h_s, Var h_t, Var aux) {
  const Var diff = sub(g, matmul(g, h_s, aux), matmul(g, h_t, aux));
  return mean(g, square(g, diff));
}

Var kl_divergence(Graph& g, Var a, Var b, double eps_p) {
  const Var ac = clamp(g, a, eps_p, 1.0);
  const Var bc = clamp(g, b, eps_p, 1.0);
  const Var log_ratio = sub(g, log(g, ac), log(g, bc));
  const Var terms = add(g, sub(g, mul(g, ac, log_ratio), ac), bc);
  const double rows = static_cast<double>(g.value(a).dim(0));
  return scale(g, sum(g, terms), 1.0 / rows);
}

}  // namespace ag

double task_loss(const Tensor& logits, std::span<const std::size_t> labels, double eps_p) {
  Graph g;
  return g.value(ag::task_loss(g, g.constant(logits), labels, eps_p)).item();
}

double rep_distill_loss(const Tensor& h_s, const Tensor& h_t, const Tensor& aux) {
  Graph g;
  return g.value(ag::rep_distill_loss(g, g.constant(h_s), g.constant(h_t), g.constant(aux))).item();
}

double ddl_rep(double rep, double task_t, double task_s, double eps_d) {
  return rep / (task_t + task_s + eps_d);
}

namespace {

void require_distributions(const Tensor& p, const char* name) {
  if (p.rank() != 2) throw DimensionError(std::string(name) + " must be [N x C], got " + shape_string(p.shape()));
  const std::size_t n = p.dim(0), c = p.dim(1);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += p.at(i, j);
    if (std::abs(s - 1.0) > 1e-9) {
      throw ContractError(std::string(name) + " row " + std::to_string(i) + " sums to " +
                          std::to_string(s) + ", not 1");
    }
  }
}

}  // namespace

DecisionLosses ddl_dec(const Tensor& p_t, const Tensor& p_s, double task_t, double task_s,
                       double eps_p, double eps_d) {
  require_distributions(p_t, "teacher probabilities");
  require_distributions(p_s, "student probabilities");
  if (p_t.shape() != p_s.shape()) {
    throw DimensionError("probability shapes differ: " + shape_string(p_t.shape()) + " vs " +
                         shape_string(p_s.shape()));
  }
  Graph g;
  const Var t = g.constant(p_t), s = g.constant(p_s);
  const double den = task_t + task_s + eps_d;
  return {g.value(ag::kl_divergence(g, s, t, eps_p)).item() / den,
          g.value(ag::kl_divergence(g, t, s, eps_p)).item() / den};
}

Totals total_losses(const LossBundle& parts) {
  return {parts.dec_d_t + parts.dec_r + parts.task_t, parts.dec_d_s + parts.dec_r + parts.task_s};
}

DualObjective build_dual_objective(const ModelConfig& model, const ClientModels& models,
                                   const Tensor& images, std::span<const std::size_t> labels,
                                   const LocalUpdateConfig& cfg) {
  if (images.rank() == 0 || images.dim(0) != labels.size()) {
    throw DimensionError("batch of " + shape_string(images.shape()) + " with " +
                         std::to_string(labels.size()) + " labels");
  }
  DualObjective obj;
  Graph& g = obj.graph;
  const Var x = g.constant(images);
  obj.student = bind_parameters(g, models.student.params, true);
  const std::span<const Var> s_all(obj.student);
  const Var h_s = backbone_forward(g, model, s_all.first(s_all.size() - 2), x);
  const Var z_s = head_forward(g, s_all.last(2), h_s);
  const Var task_s = ag::task_loss(g, z_s, labels, cfg.eps_p);
  LossBundle& b = obj.bundle;
  b.task_s = g.value(task_s).item();

  if (cfg.scheme == LocalScheme::single) {
    obj.loss_s = task_s;
    b.total_s = b.task_s;
    return obj;
  }

  obj.teacher = bind_parameters(g, models.teacher.params, true);
  const std::span<const Var> t_all(obj.teacher);
  const Var h_t = backbone_forward(g, model, t_all.first(t_all.size() - 2), x);
  const Var z_t = head_forward(g, t_all.last(2), h_t);
  const Var task_t = ag::task_loss(g, z_t, labels, cfg.eps_p);
  b.task_t = g.value(task_t).item();

  if (cfg.scheme == LocalScheme::dual_identity) {
    obj.aux = g.constant(Tensor::identity(model.rep_dim));
  } else if (cfg.train_aux && cfg.scheme != LocalScheme::dual_no_rep) {  // nothing else reaches aux
    obj.aux = g.parameter(models.aux);
  } else {
    obj.aux = g.constant(models.aux);
  }

  const Var p_t = ag::softmax(g, z_t), p_s = ag::softmax(g, z_s);
  const Var h_t_c = g.detach(h_t), h_s_c = g.detach(h_s);
  const Var p_t_c = g.detach(p_t), p_s_c = g.detach(p_s);
  const Var task_t_c = g.detach(task_t), task_s_c = g.detach(task_s);

  // L_t: student side constant.
  const Var den_t = ag::offset(g, ag::add(g, task_t, task_s_c), cfg.eps_d);
  const Var rep_t = ag::rep_distill_loss(g, h_s_c, h_t, obj.aux);
  const Var kl_t = cfg.swap_kl ? ag::kl_divergence(g, p_t, p_s_c, cfg.eps_p)
                               : ag::kl_divergence(g, p_s_c, p_t, cfg.eps_p);
  const Var dec_d_t = ag::div(g, kl_t, den_t);
  // L_s: teacher side constant.
  const Var den_s = ag::offset(g, ag::add(g, task_t_c, task_s), cfg.eps_d);
  const Var rep_s = ag::rep_distill_loss(g, h_s, h_t_c, obj.aux);
  const Var kl_s = cfg.swap_kl ? ag::kl_divergence(g, p_s, p_t_c, cfg.eps_p)
                               : ag::kl_divergence(g, p_t_c, p_s, cfg.eps_p);
  const Var dec_d_s = ag::div(g, kl_s, den_s);

  b.rep = g.value(rep_t).item();
  b.dec_d_t = g.value(dec_d_t).item();
  b.dec_d_s = g.value(dec_d_s).item();
  if (cfg.scheme == LocalScheme::dual_no_rep) {
    obj.loss_t = ag::add(g, dec_d_t, task_t);
    obj.loss_s = ag::add(g, dec_d_s, task_s);
    b.dec_r = 0.0;
  } else {
    const Var dec_r_t = ag::div(g, rep_t, den_t);
    const Var dec_r_s = ag::div(g, rep_s, den_s);
    obj.loss_t = ag::add(g, ag::add(g, dec_d_t, dec_r_t), task_t);
    obj.loss_s = ag::add(g, ag::add(g, dec_d_s, dec_r_s), task_s);
    b.dec_r = g.value(dec_r_t).item();
  }
  const Totals totals = total_losses(b);
  b.total_t = totals.teacher;
  b.total_s = totals.student;
  return obj;
}

namespace {

std::vector<Tensor> collect(const Gradients& grads, std::span<const Var> vars) {
  std::vector<Tensor> out;
  out.reserve(vars.size());
  for (Var v : vars) out.push_back(grads.at(v));
  return out;
}

void clip(std::vector<Tensor>& grads, double max_norm) {
  if (max_norm <= 0.0) return;
  double sq = 0.0;
  for (const Tensor& t : grads) {
    for (double v : t.values()) sq += v * v;
  }
  const double n = std::sqrt(sq);
  if (n <= max_norm) return;
  const double f = max_norm / n;
  for (Tensor& t : grads) {
    for (double& v : t.values()) v *= f;
  }
}

}  // namespace

BatchGradients batch_gradients(const ModelConfig& model, const ClientModels& models,
                               const Tensor& images, std::span<const std::size_t> labels,
                               const LocalUpdateConfig& cfg) {
  DualObjective obj = build_dual_objective(model, models, images, labels, cfg);
  BatchGradients out;
  out.bundle = obj.bundle;
  const Gradients gs = obj.graph.backward(obj.loss_s);
  out.student = collect(gs, obj.student);
  clip(out.student, cfg.clip_norm);
  if (cfg.scheme == LocalScheme::single) return out;

  const Gradients gt = obj.graph.backward(obj.loss_t);
  out.teacher = collect(gt, obj.teacher);
  clip(out.teacher, cfg.clip_norm);
  if (obj.graph.requires_grad(obj.aux)) {
    out.aux = gt.at(obj.aux);
    const Tensor& from_s = gs.at(obj.aux);
    for (std::size_t i = 0; i < out.aux.size(); ++i) out.aux[i] += from_s[i];
  }
  return out;
}

std::vector<LossBundle> local_update(const ModelConfig& model, ClientModels& models,
                                     const Dataset& data, std::span<const std::size_t> shard,
                                     const LocalUpdateConfig& cfg, Rng& rng) {
  cfg.validate();
  if (shard.empty()) throw ContractError("local update on an empty shard");
  for (SgdState* opt : {&models.teacher_opt, &models.student_opt, &models.aux_opt}) {
    opt->learning_rate = cfg.learning_rate;
    opt->momentum = cfg.momentum;
  }
  std::vector<std::size_t> order(shard.begin(), shard.end());
  std::vector<LossBundle> history;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::shuffle(order.begin(), order.end(), rng);
    for (std::size_t start = 0; start < order.size(); start += cfg.batch) {
      const std::span<const std::size_t> idx =
          std::span<const std::size_t>(order).subspan(start, std::min(cfg.batch, order.size() - start));
      const Tensor images = batch_images(data, idx);
      const std::vector<std::size_t> labels = batch_labels(data, idx);
      BatchGradients grads = batch_gradients(model, models, images, labels, cfg);
      history.push_back(grads.bundle);
      sgd_step(models.student.params, grads.student, models.student_opt);
      if (cfg.scheme == LocalScheme::single) continue;
      sgd_step(models.teacher.params, grads.teacher, models.teacher_opt);
      // A zero step leaves the auxiliary matrix untouched, renormalization included.
      if (grads.aux.size() > 1 && cfg.learning_rate > 0.0) {
        sgd_step(std::span<Tensor>(&models.aux, 1), std::span<const Tensor>(&grads.aux, 1), models.aux_opt);
        renormalize_aux(models);
      }
    }
  }
  return history;
}

LossBundle mean_bundle(std::span<const LossBundle> history) {
  LossBundle m;
  if (history.empty()) return m;
  for (const LossBundle& b : history) {
    m.task_t += b.task_t;
    m.task_s += b.task_s;
    m.rep += b.rep;
    m.dec_r += b.dec_r;
    m.dec_d_t += b.dec_d_t;
    m.dec_d_s += b.dec_d_s;
    m.total_t += b.total_t;
    m.total_s += b.total_s;
  }
  const double n = static_cast<double>(history.size());
  for (double* f : {&m.task_t, &m.task_s, &m.rep, &m.dec_r, &m.dec_d_t, &m.dec_d_s, &m.total_t, &m.total_s}) {
    *f /= n;
  }
  return m;
}

}  // namespace fedsim
