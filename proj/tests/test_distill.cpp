// SPDX-License-Identifier: Apache-2.0
#include <doctest.h>

#include <cmath>
#include <numeric>

#include "fedsim/dataset.hpp"
#include "fedsim/distill.hpp"
#include "fedsim/errors.hpp"
#include "oracles.hpp"

using namespace fedsim;

namespace {

// Scalar-loop reference for the clamped cross-entropy.
double task_loss_ref(const Tensor& z, const std::vector<std::size_t>& y, double eps) {
  double total = 0.0;
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    double mx = z.at(i, 0);
    for (std::size_t j = 1; j < z.dim(1); ++j) mx = std::max(mx, z.at(i, j));
    double s = 0.0;
    for (std::size_t j = 0; j < z.dim(1); ++j) s += std::exp(z.at(i, j) - mx);
    const double p = std::exp(z.at(i, y[i]) - mx) / s;
    total += -std::log(std::clamp(p, eps, 1.0));
  }
  return total / static_cast<double>(z.dim(0));
}

Tensor softmax_ref(const Tensor& z) {
  Tensor p(z.shape());
  for (std::size_t i = 0; i < z.dim(0); ++i) {
    double mx = z.at(i, 0), s = 0.0;
    for (std::size_t j = 1; j < z.dim(1); ++j) mx = std::max(mx, z.at(i, j));
    for (std::size_t j = 0; j < z.dim(1); ++j) s += std::exp(z.at(i, j) - mx);
    for (std::size_t j = 0; j < z.dim(1); ++j) p.at(i, j) = std::exp(z.at(i, j) - mx) / s;
  }
  return p;
}

double kl_ref(const Tensor& a, const Tensor& b, double eps) {
  double total = 0.0;
  for (std::size_t i = 0; i < a.dim(0); ++i) {
    for (std::size_t j = 0; j < a.dim(1); ++j) {
      const double x = std::clamp(a.at(i, j), eps, 1.0), y = std::clamp(b.at(i, j), eps, 1.0);
      total += x * std::log(x / y) - x + y;
    }
  }
  return total / static_cast<double>(a.dim(0));
}

ModelConfig tiny_model() {
  ModelConfig c;
  c.channels = 1;
  c.height = 2;
  c.width = 3;
  c.hidden = {5};
  c.rep_dim = 4;
  c.classes = 3;
  return c;
}

std::vector<std::size_t> random_labels(std::size_t n, std::size_t classes, std::mt19937_64& rng) {
  std::uniform_int_distribution<std::size_t> d(0, classes - 1);
  std::vector<std::size_t> y(n);
  for (auto& v : y) v = d(rng);
  return y;
}

}  // namespace

TEST_CASE("task_loss") {
  Tensor confident({2, 3}, {50, 0, 0, 0, 0, 50});
  const std::vector<std::size_t> y{0, 2};
  CHECK(task_loss(confident, y) < 1e-6);
  const std::vector<std::size_t> y8{3};
  CHECK(std::abs(task_loss(Tensor({1, 8}), y8) - std::log(8.0)) < 1e-12);
  std::mt19937_64 rng(1);
  for (int t = 0; t < 20; ++t) {
    const Tensor z = oracle::random_tensor({6, 5}, rng, -4, 4);
    const auto labels = random_labels(6, 5, rng);
    CHECK(std::abs(task_loss(z, labels) - task_loss_ref(z, labels, 1e-7)) < 1e-12);
  }
  // The clamp caps the loss of a hopeless prediction.
  const std::vector<std::size_t> wrong{1};
  CHECK(std::abs(task_loss(Tensor({1, 2}, {100, -100}), wrong) - (-std::log(1e-7))) < 1e-9);
  const std::vector<std::size_t> bad{3};
  CHECK_THROWS_AS(task_loss(Tensor({1, 3}), bad), ContractError);
}

TEST_CASE("rep_distill_loss") {
  std::mt19937_64 rng(2);
  const Tensor h = oracle::random_tensor({3, 4}, rng), w = oracle::random_tensor({4, 4}, rng);
  CHECK(rep_distill_loss(h, h, w) == 0.0);
  CHECK(rep_distill_loss(h, oracle::random_tensor({3, 4}, rng), Tensor({4, 4})) == 0.0);
  const Tensor hs({2, 2}, {1, 1, 1, 1}), ht({2, 2});
  CHECK(std::abs(rep_distill_loss(hs, ht, Tensor::identity(2)) - 1.0) < 1e-15);
  // With the identity it reduces to the plain mean squared difference.
  const Tensor a = oracle::random_tensor({5, 4}, rng), b = oracle::random_tensor({5, 4}, rng);
  double msd = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) msd += (a[i] - b[i]) * (a[i] - b[i]);
  CHECK(std::abs(rep_distill_loss(a, b, Tensor::identity(4)) - msd / 20.0) < 1e-14);
  CHECK_THROWS_AS(rep_distill_loss(a, b, Tensor({3, 4})), DimensionError);
}

TEST_CASE("ddl_rep") {
  CHECK(ddl_rep(0.0, 1.0, 2.0) == 0.0);
  CHECK(std::abs(ddl_rep(1.0, 1.0, 1.0, 1e-300) - 0.5) < 1e-15);
  const double limit = ddl_rep(1.0, 0.0, 0.0, 1e-8);
  CHECK(std::isfinite(limit));
  CHECK(std::abs(limit - 1e8) < 1e-6);
}

TEST_CASE("ddl_dec") {
  std::mt19937_64 rng(3);
  const Tensor p = softmax_ref(oracle::random_tensor({4, 3}, rng));
  const DecisionLosses same = ddl_dec(p, p, 1.0, 1.0);
  CHECK(std::abs(same.teacher) < 1e-15);
  CHECK(std::abs(same.student) < 1e-15);

  const double eps = 1e-7;
  const Tensor pt({1, 2}, {1.0 - eps, eps}), ps({1, 2}, {0.5, 0.5});
  const DecisionLosses d = ddl_dec(pt, ps, 0.5, 0.5, eps, 1e-300);
  const double closed = (1 - eps) * std::log((1 - eps) / 0.5) + eps * std::log(eps / 0.5);
  CHECK(std::abs(d.student - closed) < 1e-12);
  CHECK(std::abs(d.student - std::log(2.0)) < 1e-5);

  const Tensor q = softmax_ref(oracle::random_tensor({4, 3}, rng));
  const DecisionLosses fwd = ddl_dec(p, q, 0.3, 0.4), rev = ddl_dec(q, p, 0.3, 0.4);
  CHECK(fwd.teacher == rev.student);
  CHECK(fwd.student == rev.teacher);
  CHECK(std::abs(fwd.student - kl_ref(p, q, 1e-7) / 0.70000001) < 1e-12);

  CHECK_THROWS_AS(ddl_dec(Tensor({1, 2}, {0.5, 0.6}), ps, 1, 1), ContractError);
}

TEST_CASE("adaptive weighting decreases with the task-loss sum") {
  std::mt19937_64 rng(4);
  const Tensor p = softmax_ref(oracle::random_tensor({3, 4}, rng)), q = softmax_ref(oracle::random_tensor({3, 4}, rng));
  double prev_rep = INFINITY, prev_t = INFINITY, prev_s = INFINITY;
  for (double task : {0.01, 0.1, 0.5, 1.0, 3.0, 10.0}) {
    const double r = ddl_rep(0.7, task, task);
    const DecisionLosses d = ddl_dec(p, q, task, task);
    CHECK(r < prev_rep);
    CHECK(d.teacher < prev_t);
    CHECK(d.student < prev_s);
    prev_rep = r;
    prev_t = d.teacher;
    prev_s = d.student;
  }
}

TEST_CASE("total_losses") {
  LossBundle b;
  b.task_t = 0.7;
  b.task_s = 0.9;
  CHECK(total_losses(b).teacher == 0.7);
  CHECK(total_losses(b).student == 0.9);
  b.dec_d_t = 0.2;
  b.dec_r = 0.3;
  b.task_t = 1.0;
  CHECK(total_losses(b).teacher == doctest::Approx(1.5).epsilon(1e-15));
}

TEST_CASE("dual objective: recomposition, detachment and non-negativity") {
  const ModelConfig c = tiny_model();
  std::mt19937_64 rng(5);
  LocalUpdateConfig cfg;
  for (int trial = 0; trial < 20; ++trial) {
    ClientModels m = init_models(c, 100 + trial);
    const Tensor x = oracle::random_tensor({6, 1, 2, 3}, rng, 0, 1);
    const auto y = random_labels(6, 3, rng);
    DualObjective obj = build_dual_objective(c, m, x, y, cfg);
    const LossBundle& b = obj.bundle;

    // Independent recomputation of every part.
    const Tensor hs = backbone_forward(c, m.student.backbone(), x);
    const Tensor ht = backbone_forward(c, m.teacher.backbone(), x);
    const Tensor zs = head_forward(m.student.head(), hs), zt = head_forward(m.teacher.head(), ht);
    const double ts = task_loss_ref(zs, y, 1e-7), tt = task_loss_ref(zt, y, 1e-7);
    const double rep = rep_distill_loss(hs, ht, m.aux);
    const double den = tt + ts + 1e-8;
    CHECK(std::abs(b.task_s - ts) < 1e-12);
    CHECK(std::abs(b.task_t - tt) < 1e-12);
    CHECK(std::abs(b.rep - rep) < 1e-12);
    CHECK(std::abs(b.dec_r - rep / den) < 1e-12);
    CHECK(std::abs(b.dec_d_s - kl_ref(softmax_ref(zt), softmax_ref(zs), 1e-7) / den) < 1e-12);
    CHECK(std::abs(b.dec_d_t - kl_ref(softmax_ref(zs), softmax_ref(zt), 1e-7) / den) < 1e-12);
    CHECK(std::abs(obj.graph.value(obj.loss_t).item() - (b.dec_d_t + b.dec_r + b.task_t)) < 1e-12);
    CHECK(std::abs(obj.graph.value(obj.loss_s).item() - (b.dec_d_s + b.dec_r + b.task_s)) < 1e-12);
    CHECK(b.total_t == b.dec_d_t + b.dec_r + b.task_t);
    for (double v : {b.task_t, b.task_s, b.rep, b.dec_r, b.dec_d_t, b.dec_d_s, b.total_t, b.total_s}) CHECK(v >= 0.0);

    const Gradients gt = obj.graph.backward(obj.loss_t);
    const Gradients gs = obj.graph.backward(obj.loss_s);
    for (Var v : obj.student) CHECK_FALSE(gt.has(v));
    for (Var v : obj.teacher) CHECK_FALSE(gs.has(v));
  }
}

TEST_CASE("ablation schemes") {
  const ModelConfig c = tiny_model();
  std::mt19937_64 rng(6);
  ClientModels m = init_models(c, 7);
  const Tensor x = oracle::random_tensor({4, 1, 2, 3}, rng, 0, 1);
  const auto y = random_labels(4, 3, rng);

  LocalUpdateConfig a;
  a.scheme = LocalScheme::dual_identity;
  DualObjective oa = build_dual_objective(c, m, x, y, a);
  const Tensor hs = backbone_forward(c, m.student.backbone(), x), ht = backbone_forward(c, m.teacher.backbone(), x);
  double msd = 0.0;
  for (std::size_t i = 0; i < hs.size(); ++i) msd += (hs[i] - ht[i]) * (hs[i] - ht[i]);
  CHECK(std::abs(oa.bundle.rep - msd / static_cast<double>(hs.size())) < 1e-14);
  CHECK_FALSE(oa.graph.requires_grad(oa.aux));

  LocalUpdateConfig b;
  b.scheme = LocalScheme::dual_no_rep;
  DualObjective ob = build_dual_objective(c, m, x, y, b);
  CHECK(ob.bundle.dec_r == 0.0);
  CHECK(ob.bundle.rep > 0.0);
  CHECK(std::abs(ob.graph.value(ob.loss_s).item() - (ob.bundle.dec_d_s + ob.bundle.task_s)) < 1e-14);

  LocalUpdateConfig single;
  single.scheme = LocalScheme::single;
  const BatchGradients gs = batch_gradients(c, m, x, y, single);
  CHECK(gs.teacher.empty());
  CHECK(gs.bundle.total_s == gs.bundle.task_s);

  LocalUpdateConfig swap;
  swap.swap_kl = true;
  const LossBundle plain = build_dual_objective(c, m, x, y, LocalUpdateConfig{}).bundle;
  const LossBundle swapped = build_dual_objective(c, m, x, y, swap).bundle;
  CHECK(std::abs(plain.dec_d_t - swapped.dec_d_s) < 1e-15);
  CHECK(std::abs(plain.dec_d_s - swapped.dec_d_t) < 1e-15);
}

TEST_CASE("gradients of both objectives match finite differences") {
  const ModelConfig c = tiny_model();
  std::mt19937_64 rng(7);
  LocalUpdateConfig cfg;
  double worst = 0.0;
  std::string where;
  auto track = [&](double e, std::string at) {
    if (e > worst) {
      worst = e;
      where = std::move(at);
    }
  };
  for (int trial = 0; trial < 5; ++trial) {
    ClientModels m = init_models(c, 500 + trial);
    // Zero biases can leave pre-activations exactly on the ReLU kink.
    for (Network* net : {&m.teacher, &m.student}) {
      for (Tensor& p : net->params) {
        if (p.rank() == 1) p = oracle::random_tensor(p.shape(), rng, -0.2, 0.2);
      }
    }
    const Tensor x = oracle::random_tensor({5, 1, 2, 3}, rng, 0, 1);
    const auto y = random_labels(5, 3, rng);
    const BatchGradients g = batch_gradients(c, m, x, y, cfg);
    for (std::size_t p = 0; p < m.teacher.params.size(); ++p) {
      auto f = [&](const Tensor& v) {
        ClientModels probe = m;
        probe.teacher.params[p] = v;
        return build_dual_objective(c, probe, x, y, cfg).bundle.total_t;
      };
      track(oracle::relative_error(g.teacher[p], oracle::finite_difference(f, m.teacher.params[p]), 1e-3),
            "teacher param " + std::to_string(p));
    }
    for (std::size_t p = 0; p < m.student.params.size(); ++p) {
      auto f = [&](const Tensor& v) {
        ClientModels probe = m;
        probe.student.params[p] = v;
        return build_dual_objective(c, probe, x, y, cfg).bundle.total_s;
      };
      track(oracle::relative_error(g.student[p], oracle::finite_difference(f, m.student.params[p]), 1e-3),
            "student param " + std::to_string(p));
    }
    auto f = [&](const Tensor& v) {
      ClientModels probe = m;
      probe.aux = v;
      const LossBundle b = build_dual_objective(c, probe, x, y, cfg).bundle;
      return b.total_t + b.total_s;
    };
    track(oracle::relative_error(g.aux, oracle::finite_difference(f, m.aux), 1e-3), "aux");
  }
  INFO("worst relative error " << worst << " at " << where);
  CHECK(worst < 1e-5);
}

namespace {

Dataset separable_shard(std::size_t n, std::mt19937_64& rng) {
  Dataset d;
  d.channels = 1;
  d.height = 2;
  d.width = 3;
  d.n_classes = 3;
  std::uniform_int_distribution<int> noise(-20, 20);
  for (std::size_t i = 0; i < n; ++i) {
    const auto label = static_cast<std::uint8_t>(i % 3);
    d.labels.push_back(label);
    for (std::size_t j = 0; j < 6; ++j) {
      const int base = (j / 2 == label) ? 220 : 30;
      d.pixels.push_back(static_cast<std::uint8_t>(std::clamp(base + noise(rng), 0, 255)));
    }
  }
  return d;
}

}  // namespace

TEST_CASE("local_update") {
  const ModelConfig c = tiny_model();
  std::mt19937_64 rng(8);
  const Dataset data = separable_shard(60, rng);
  std::vector<std::size_t> shard(60);
  std::iota(shard.begin(), shard.end(), 0);

  SUBCASE("zero learning rate leaves every parameter bit-identical") {
    ClientModels m = init_models(c, 1);
    const ClientModels before = m;
    LocalUpdateConfig cfg;
    cfg.learning_rate = 0.0;
    cfg.epochs = 2;
    Rng r(3);
    local_update(c, m, data, shard, cfg, r);
    CHECK(m.teacher.params == before.teacher.params);
    CHECK(m.student.params == before.student.params);
    CHECK(m.aux == before.aux);
  }
  SUBCASE("same seed gives the same history") {
    LocalUpdateConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.epochs = 2;
    ClientModels a = init_models(c, 2), b = init_models(c, 2);
    Rng ra(4), rb(4);
    const auto ha = local_update(c, a, data, shard, cfg, ra);
    const auto hb = local_update(c, b, data, shard, cfg, rb);
    REQUIRE(ha.size() == hb.size());
    for (std::size_t i = 0; i < ha.size(); ++i) {
      CHECK(ha[i].total_s == hb[i].total_s);
      CHECK(ha[i].total_t == hb[i].total_t);
    }
    CHECK(a.student.params == b.student.params);
  }
  SUBCASE("training makes progress on a separable shard") {
    LocalUpdateConfig cfg;
    cfg.learning_rate = 0.05;
    cfg.batch = 6;
    cfg.epochs = 20;  // 200 steps
    ClientModels m = init_models(c, 9);
    Rng r(5);
    const auto h = local_update(c, m, data, shard, cfg, r);
    REQUIRE(h.size() == 200);
    double first = 0.0, last = 0.0;
    for (std::size_t i = 0; i < 10; ++i) {
      first += h[i].task_s;
      last += h[h.size() - 1 - i].task_s;
    }
    CHECK(last < first);
    for (std::size_t j = 0; j < m.aux.dim(1); ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < m.aux.dim(0); ++i) s += m.aux.at(i, j) * m.aux.at(i, j);
      CHECK(std::abs(std::sqrt(s) - 1.0) < 1e-12);
    }
    CHECK(m.teacher.shapes() == m.student.shapes());
  }
  SUBCASE("empty shard is rejected") {
    ClientModels m = init_models(c, 1);
    Rng r(1);
    CHECK_THROWS_AS(local_update(c, m, data, {}, LocalUpdateConfig{}, r), ContractError);
  }
}
