// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

#include "mpq/sensitivity.hpp"
#include "support.hpp"

using namespace mpq;

namespace {

Eigen::MatrixXd to_eigen(const TensorF64& t) {
  Eigen::MatrixXd m(t.rows(), t.cols());
  for (std::size_t i = 0; i < t.rows(); ++i)
    for (std::size_t j = 0; j < t.cols(); ++j) m(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = t.at(i, j);
  return m;
}

// rho1^2 is the top eigenvalue of C_XY C_YY^-1 C_YX w = rho^2 C_XX w.
double eigen_rho1(const TensorF64& xt, const TensorF64& yt) {
  Eigen::MatrixXd x = to_eigen(xt), y = to_eigen(yt);
  x.rowwise() -= x.colwise().mean();
  y.rowwise() -= y.colwise().mean();
  const double n1 = static_cast<double>(x.rows() - 1);
  Eigen::MatrixXd cxx = x.transpose() * x / n1, cyy = y.transpose() * y / n1;
  const Eigen::MatrixXd cxy = x.transpose() * y / n1;
  cxx.diagonal().array() += 1e-6 * cxx.trace() / static_cast<double>(cxx.rows());
  cyy.diagonal().array() += 1e-6 * cyy.trace() / static_cast<double>(cyy.rows());
  const Eigen::MatrixXd lhs = cxy * cyy.ldlt().solve(cxy.transpose());
  Eigen::GeneralizedSelfAdjointEigenSolver<Eigen::MatrixXd> es(0.5 * (lhs + lhs.transpose()), cxx);
  return std::sqrt(std::max(0.0, es.eigenvalues().maxCoeff()));
}

TensorF64 mul(const TensorF64& a, const TensorF64& b) { return matmul(a, b); }

TensorF64 permute_columns(const TensorF64& x, const std::vector<std::size_t>& perm) {
  TensorF64 y({x.rows(), x.cols()});
  for (std::size_t i = 0; i < x.rows(); ++i)
    for (std::size_t j = 0; j < x.cols(); ++j) y.at(i, j) = x.at(i, perm[j]);
  return y;
}

// Q * diag(d) with Q orthogonal and d in [0.5, 2]: condition number at most 4,
// so the relative ridge perturbs rho1 far less than the tolerance.
TensorF64 well_conditioned(Rng& rng, std::size_t p) {
  TensorF64 q = test::random_f64(rng, p, p);
  for (std::size_t j = 0; j < p; ++j) {
    for (std::size_t k = 0; k < j; ++k) {
      double dot = 0.0;
      for (std::size_t i = 0; i < p; ++i) dot += q.at(i, j) * q.at(i, k);
      for (std::size_t i = 0; i < p; ++i) q.at(i, j) -= dot * q.at(i, k);
    }
    double norm = 0.0;
    for (std::size_t i = 0; i < p; ++i) norm += q.at(i, j) * q.at(i, j);
    for (std::size_t i = 0; i < p; ++i) q.at(i, j) /= std::sqrt(norm);
  }
  for (std::size_t j = 0; j < p; ++j) {
    const double d = 0.5 + 1.5 * rng.uniform();
    for (std::size_t i = 0; i < p; ++i) q.at(i, j) *= d;
  }
  return q;
}

void zero_blocks(TransformerModel& m) {
  for (std::size_t l = 0; l < m.config().n_layers; ++l)
    for (LayerParam p : kLayerMatrices)
      for (float& v : m.layer(l, p).data()) v = 0.0f;
}

}  // namespace

TEST_CASE("cca_rho1 examples") {
  Rng rng(1);
  SUBCASE("self-correlation") {
    for (int trial = 0; trial < 20; ++trial) {
      const TensorF64 x = test::random_f64(rng, 200, 4);
      CHECK(std::abs(cca_rho1(x, x).rho1 - 1.0) < 1e-6);
    }
  }
  SUBCASE("invertible transform") {
    for (int trial = 0; trial < 20; ++trial) {
      const TensorF64 x = test::random_f64(rng, 200, 4);
      TensorF64 a = test::random_f64(rng, 4, 4);
      for (std::size_t i = 0; i < 4; ++i) a.at(i, i) += 3.0;
      CHECK(std::abs(cca_rho1(x, mul(x, a)).rho1 - 1.0) < 1e-5);
    }
  }
  SUBCASE("generalized eigenproblem oracle") {
    for (int trial = 0; trial < 50; ++trial) {
      const TensorF64 x = test::random_f64(rng, 200, 4), y = test::random_f64(rng, 200, 4);
      const auto r = cca_rho1(x, y);
      CHECK(std::abs(r.rho1 - eigen_rho1(x, y)) < 1e-6);
      CHECK(r.p == 4);
      CHECK(r.eps_x > 0.0);
    }
    // Correlated but not identical, unequal widths.
    for (int trial = 0; trial < 20; ++trial) {
      const TensorF64 x = test::random_f64(rng, 150, 5);
      TensorF64 y = test::random_f64(rng, 150, 3);
      for (std::size_t i = 0; i < 150; ++i) y.at(i, 1) += 0.7 * x.at(i, 2) - 0.2 * x.at(i, 0);
      CHECK(std::abs(cca_rho1(x, y).rho1 - eigen_rho1(x, y)) < 1e-6);
    }
  }
  SUBCASE("degenerate inputs") {
    CHECK_THROWS_AS(cca_rho1(TensorF64({1, 2}), TensorF64({1, 2})), DomainError);
    CHECK_THROWS_AS(cca_rho1(TensorF64({5, 2}), TensorF64({4, 2})), DimensionError);
    const TensorF64 x = test::random_f64(rng, 20, 2);
    CHECK(cca_rho1(x, TensorF64({20, 3}, 1.5)).rho1 == 0.0);
  }
}

TEST_CASE("property: cca_rho1 is invariant to column order and linear maps") {
  Rng rng(2);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = test::random_between(rng, 40, 200), p = test::random_between(rng, 1, 6),
                      q = test::random_between(rng, 1, 6);
    const TensorF64 x = test::random_f64(rng, n, p);
    TensorF64 y = test::random_f64(rng, n, q);
    for (std::size_t i = 0; i < n; ++i) y.at(i, 0) += x.at(i, 0);
    const double base = cca_rho1(x, y).rho1;
    CHECK(base >= 0.0);
    CHECK(base <= 1.0);
    std::vector<std::size_t> perm(p);
    std::iota(perm.begin(), perm.end(), 0);
    std::reverse(perm.begin(), perm.end());
    CHECK(std::abs(cca_rho1(permute_columns(x, perm), y).rho1 - base) < 1e-9);
    CHECK(std::abs(cca_rho1(y, x).rho1 - base) < 1e-9);
    const auto xa = mul(x, well_conditioned(rng, p));
    CHECK(std::abs(cca_rho1(xa, y).rho1 - base) < 1e-5);
  }
}

TEST_CASE("stride_columns") {
  CHECK(stride_columns(10, 4) == std::vector<std::size_t>{0, 2, 5, 7});
  CHECK(stride_columns(3, 64) == std::vector<std::size_t>{0, 1, 2});
  CHECK(stride_columns(128, 64).back() == 126);
}

TEST_CASE("cmpq examples") {
  const auto desk = test::desk_classifier();
  SUBCASE("identity layers correlate perfectly") {
    TransformerModel m = desk.model;
    zero_blocks(m);
    const auto p = cmpq(m, desk.eval);
    for (double s : p.scores) CHECK(std::abs(s) < 1e-5);
  }
  SUBCASE("two layers score identically") {
    const auto two = test::desk_classifier(7, 2, 1);
    const auto p = cmpq(two.model, two.eval);
    REQUIRE(p.scores.size() == 2);
    CHECK(p.scores[0] == p.scores[1]);
  }
  SUBCASE("single layer is degenerate and warned") {
    Rng rng(3);
    ModelConfig c = desk.model.config();
    c.n_layers = 1;
    const auto p = cmpq(TransformerModel::initialized(c, rng), desk.eval);
    CHECK(p.scores == std::vector<double>{0.0});
    CHECK(p.warnings.size() == 1);
  }
  SUBCASE("matches a full-precision recomputation") {
    const std::size_t L = desk.model.config().n_layers, d = desk.model.config().d_model;
    std::size_t rows = 0;
    for (const auto& b : desk.eval.batches) rows += b.batch_size * b.seq_len;
    std::vector<TensorF64> feats(L, TensorF64({rows, d}));
    std::size_t off = 0;
    for (const auto& b : desk.eval.batches) {
      const auto fwd = forward(desk.model, b, true);
      for (std::size_t l = 0; l < L; ++l)
        for (std::size_t i = 0; i < fwd.layer_outputs[l].rows(); ++i)
          for (std::size_t j = 0; j < d; ++j) feats[l].at(off + i, j) = fwd.layer_outputs[l].at(i, j);
      off += b.batch_size * b.seq_len;
    }
    std::vector<double> ref(L, 0.0);
    for (std::size_t a = 0; a < L; ++a)
      for (std::size_t b = 0; b < L; ++b)
        if (a != b) ref[a] += eigen_rho1(feats[a], feats[b]) / static_cast<double>(L - 1);
    const auto p = cmpq(desk.model, desk.eval);
    CHECK(p.cca_dims == d);
    for (std::size_t l = 0; l < L; ++l) CHECK(std::abs(p.scores[l] - (1.0 - ref[l])) < 1e-5);
    AnalysisSettings par;
    par.workers = 3;
    CHECK(cmpq(desk.model, desk.eval, par).scores == p.scores);
  }
}

TEST_CASE("prune_mask examples") {
  const Tensor w({4}, std::vector<float>{0.1f, -0.5f, 0.3f, -0.05f});
  const auto m = prune_mask(w, 0.5);
  CHECK(m.threshold == doctest::Approx(0.2).epsilon(1e-6));
  CHECK(m.mask == std::vector<std::uint8_t>{0, 1, 1, 0});
  const auto z = prune_mask(w, 0.0);
  CHECK(z.threshold == doctest::Approx(0.05).epsilon(1e-6));
  CHECK(z.mask == std::vector<std::uint8_t>{1, 1, 1, 0});
  const auto flat = prune_mask(Tensor({5}, std::vector<float>{2, -2, 2, 2, -2}), 0.3);
  CHECK(flat.zeros() == 5);
  CHECK_THROWS_AS(prune_mask(w, 1.0), DomainError);
  CHECK_THROWS_AS(prune_mask(w, -0.1), DomainError);
  Tensor v = w;
  apply_mask(v, m);
  CHECK(v == Tensor({4}, std::vector<float>{0.0f, -0.5f, 0.3f, 0.0f}));
}

TEST_CASE("property: pruned fraction tracks the sparsity level") {
  Rng rng(4);
  for (int trial = 0; trial < 300; ++trial) {
    const std::size_t n = test::random_between(rng, 2, 300);
    const Tensor w = test::random_tensor(rng, {n}, -1, 1);  // distinct magnitudes almost surely
    const double s = rng.uniform() * 0.95;
    const auto m = prune_mask(w, s);
    const double frac = static_cast<double>(m.zeros()) / static_cast<double>(n);
    CHECK(frac >= s - 1.0 / static_cast<double>(n) - 1e-12);
    CHECK(frac <= s + 1.0 / static_cast<double>(n) + 1e-12);
  }
}

TEST_CASE("pmpq") {
  const auto desk = test::desk_classifier();
  SUBCASE("sequential and parallel agree") {
    AnalysisSettings a, b;
    b.workers = 3;
    const auto pa = pmpq(desk.model, desk.eval, a), pb = pmpq(desk.model, desk.eval, b);
    CHECK(pa.scores == pb.scores);
    CHECK(pa.base_metric == pb.base_metric);
    for (double s : pa.scores) CHECK(s >= 0.0);
  }
  SUBCASE("zero-weight layer scores 0") {
    TransformerModel m = desk.model;
    for (LayerParam p : kLayerMatrices)
      for (float& v : m.layer(2, p).data()) v = 0.0f;
    CHECK(pmpq(m, desk.eval).scores[2] == 0.0);
  }
  SUBCASE("level 0 on a model already holding its minimal weights at zero") {
    TransformerModel m = desk.model;
    for (std::size_t l = 0; l < 4; ++l)
      for (LayerParam p : kLayerMatrices) m.layer(l, p)[0] = 0.0f;
    AnalysisSettings s;
    s.sparsity_levels = {0.0};
    for (double v : pmpq(m, desk.eval, s).scores) CHECK(v == 0.0);
  }
  SUBCASE("duplicating the eval set changes nothing") {
    auto ex = examples_of(desk.eval);
    const auto twice = ex;
    ex.insert(ex.end(), twice.begin(), twice.end());
    const Dataset doubled = make_dataset(TaskKind::classification, 16, 2, ex, 32);
    const auto a = pmpq(desk.model, desk.eval), b = pmpq(desk.model, doubled);
    for (std::size_t l = 0; l < 4; ++l) CHECK(std::abs(a.scores[l] - b.scores[l]) < 1e-12);
  }
  SUBCASE("language model uses relative perplexity change") {
    const auto lm = test::desk_lm();
    const auto p = pmpq(lm.model, lm.eval);
    REQUIRE(p.base_metric.has_value());
    CHECK(*p.base_metric == evaluate(lm.model, lm.eval).perplexity);
    for (double s : p.scores) CHECK(s >= 0.0);
    // Independent recomputation for layer 0 at one level.
    AnalysisSettings one;
    one.sparsity_levels = {0.5};
    TransformerModel pruned = lm.model;
    for (LayerParam q : kLayerMatrices) apply_mask(pruned.layer(0, q), prune_mask(pruned.layer(0, q), 0.5));
    const double ppl = evaluate(pruned, lm.eval).perplexity;
    CHECK(pmpq(lm.model, lm.eval, one).scores[0] == doctest::Approx(std::max(0.0, (ppl - *p.base_metric) / *p.base_metric)));
  }
}

TEST_CASE("tdmpq") {
  auto desk = test::desk_classifier();
  const TransformerModel before = desk.model;
  SUBCASE("delta 0, delta mode") {
    AnalysisSettings s;
    s.delta = 0.0;
    for (double v : tdmpq(desk.model, desk.eval, s).scores) CHECK(v == 0.0);
  }
  SUBCASE("delta 0, literal mode gives the base mean loss everywhere") {
    AnalysisSettings s;
    s.delta = 0.0;
    s.mode = TdmpqMode::literal;
    const auto p = tdmpq(desk.model, desk.eval, s);
    const double mean = evaluate(desk.model, desk.eval).mean_loss;
    for (double v : p.scores) CHECK(v == doctest::Approx(mean).epsilon(1e-12));
    CHECK(*p.base_metric == doctest::Approx(mean).epsilon(1e-12));
  }
  SUBCASE("matches an independently materialized perturbation") {
    AnalysisSettings s;
    s.seed = 7;
    const auto p = tdmpq(desk.model, desk.eval, s);
    CHECK(desk.model == before);
    const double base = evaluate(before, desk.eval).mean_loss;
    for (std::size_t l = 0; l < 4; ++l) {
      TransformerModel m = before;
      Tensor& w = m.layer(l, LayerParam::attn_q);
      double mu = 0, var = 0;
      for (float v : w.data()) mu += v;
      mu /= static_cast<double>(w.size());
      for (float v : w.data()) var += (v - mu) * (v - mu);
      const double sigma = 0.01 * std::sqrt(var / static_cast<double>(w.size()));
      Rng rng(derive_seed(7, l));
      for (float& v : w.data()) v += static_cast<float>(sigma * rng.normal());
      const double ref = std::abs(evaluate(m, desk.eval).mean_loss - base);
      CHECK(std::abs(p.scores[l] - ref) < 1e-9);
    }
    AnalysisSettings par = s;
    par.workers = 3;
    CHECK(tdmpq(desk.model, desk.eval, par).scores == p.scores);
    CHECK(desk.model == before);
  }
  SUBCASE("continuous at delta = 0") {
    std::vector<std::vector<double>> by_delta;
    for (double d : {1e-4, 1e-3, 1e-2}) {
      AnalysisSettings s;
      s.seed = 7;
      s.delta = d;
      by_delta.push_back(tdmpq(desk.model, desk.eval, s).scores);
    }
    for (std::size_t l = 0; l < 4; ++l) {
      CHECK(by_delta[0][l] <= by_delta[1][l]);
      CHECK(by_delta[1][l] <= by_delta[2][l]);
      CHECK(by_delta[0][l] < 1e-4);
    }
  }
  SUBCASE("language model") {
    auto lm = test::desk_lm();
    const TransformerModel lm_before = lm.model;
    AnalysisSettings s;
    s.delta = 0.0;
    s.mode = TdmpqMode::literal;
    const auto p = tdmpq(lm.model, lm.eval, s);
    CHECK(p.scores[0] == doctest::Approx(evaluate(lm.model, lm.eval).mean_loss).epsilon(1e-12));
    s.delta = 0.05;
    s.mode = TdmpqMode::delta;
    tdmpq(lm.model, lm.eval, s);
    CHECK(lm.model == lm_before);
  }
  SUBCASE("negative delta rejected") {
    AnalysisSettings s;
    s.delta = -1.0;
    CHECK_THROWS_AS(tdmpq(desk.model, desk.eval, s), DomainError);
  }
}

TEST_CASE("segment_stats") {
  const auto s = segment_stats({0, 0, 3});
  CHECK(s.global_mean == 1.0);
  CHECK(*s.first30 == 1.0);
  CHECK(*s.mid30 == 1.0);
  CHECK(*s.rest == 2.0);

  const auto c = segment_stats(std::vector<double>(7, 0.4));
  CHECK(*c.first30 == 0.0);
  CHECK(*c.mid30 == 0.0);
  CHECK(*c.rest == 0.0);

  const auto one = segment_stats({5.0});
  CHECK(one.first30 == 0.0);
  CHECK(!one.mid30);
  CHECK(!one.rest);
  const auto two = segment_stats({1.0, 3.0});
  CHECK(two.first_size == 1);
  CHECK(two.mid_size == 1);
  CHECK(!two.rest);
  CHECK_THROWS_AS(segment_stats({}), DomainError);

  Rng rng(5);
  for (std::size_t n = 1; n <= 60; ++n) {
    std::vector<double> v(n);
    for (double& x : v) x = rng.normal();
    const auto st = segment_stats(v);
    std::size_t k = 0;
    while (10 * k < 3 * n) ++k;
    CHECK(st.first_size == std::min(k, n));
    CHECK(st.first_size + st.mid_size + st.rest_size == n);
    double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(n), sq = 0.0;
    for (std::size_t i = 0; i < st.first_size; ++i) sq += (v[i] - mean) * (v[i] - mean);
    CHECK(*st.first30 == doctest::Approx(std::sqrt(sq / static_cast<double>(st.first_size))).epsilon(1e-12));
  }
}
