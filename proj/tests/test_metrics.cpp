// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <spafit/metrics.hpp>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

using namespace spafit;

namespace {

using Ints = std::vector<int>;
using Reals = std::vector<double>;

// Predictions/gold realising a given confusion matrix.
std::pair<Ints, Ints> from_confusion(int tp, int tn, int fp, int fn) {
  Ints p, g;
  auto put = [&](int n, int pv, int gv) {
    for (int i = 0; i < n; ++i) {
      p.push_back(pv);
      g.push_back(gv);
    }
  };
  put(tp, 1, 1);
  put(tn, 0, 0);
  put(fp, 1, 0);
  put(fn, 0, 1);
  return {p, g};
}

// Raw-moment and confusion-matrix reimplementations.
double oracle_accuracy(const Ints &p, const Ints &g) {
  long hit = 0;
  for (std::size_t i = 0; i < p.size(); ++i)
    hit += p[i] == g[i];
  return static_cast<double>(hit) / static_cast<double>(p.size());
}

void counts(const Ints &p, const Ints &g, double &tp, double &tn, double &fp, double &fn) {
  tp = tn = fp = fn = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (p[i] && g[i])
      ++tp;
    else if (!p[i] && !g[i])
      ++tn;
    else if (p[i])
      ++fp;
    else
      ++fn;
  }
}

double oracle_f1(const Ints &p, const Ints &g) {
  double tp, tn, fp, fn;
  counts(p, g, tp, tn, fp, fn);
  const double den = 2 * tp + fp + fn;
  return den == 0 ? 0.0 : 2 * tp / den;
}

double oracle_mcc(const Ints &p, const Ints &g) {
  double tp, tn, fp, fn;
  counts(p, g, tp, tn, fp, fn);
  const double den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  return den == 0 ? 0.0 : (tp * tn - fp * fn) / std::sqrt(den);
}

double oracle_pearson(const Reals &x, const Reals &y) {
  const double n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, syy = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    syy += y[i] * y[i];
    sxy += x[i] * y[i];
  }
  return (n * sxy - sx * sy) / std::sqrt((n * sxx - sx * sx) * (n * syy - sy * sy));
}

} // namespace

TEST_CASE("accuracy") {
  CHECK(accuracy(Ints{1, 0, 1}, Ints{1, 0, 1}) == 1.0);
  CHECK(accuracy(Ints{1, 0, 1}, Ints{0, 1, 0}) == 0.0);
  CHECK(accuracy(Ints{1, 0, 1, 1}, Ints{1, 0, 0, 1}) == 0.75);
  CHECK(accuracy(Ints{3, 2, 2}, Ints{3, 2, 1}) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(accuracy(Ints{1, 0}, Ints{1}), MetricError);
  CHECK_THROWS_AS(accuracy(Ints{}, Ints{}), MetricError);
}

TEST_CASE("binary F1") {
  CHECK(f1_binary(Ints{1, 0, 1}, Ints{1, 0, 1}) == 1.0);
  auto [p, g] = from_confusion(2, 5, 1, 1);
  CHECK(f1_binary(p, g) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
  CHECK(f1_binary(Ints{0, 0, 0}, Ints{0, 0, 0}) == 0.0);
  CHECK_THROWS_AS(f1_binary(Ints{0, 2}, Ints{0, 1}), MetricError);
  CHECK_THROWS_AS(f1_binary(Ints{0, 1}, Ints{0, -1}), MetricError);
  CHECK_THROWS_AS(f1_binary(Ints{0, 1}, Ints{0}), MetricError);
}

TEST_CASE("Matthews correlation") {
  CHECK(matthews_corr(Ints{1, 0, 1, 0}, Ints{1, 0, 1, 0}) == doctest::Approx(1.0).epsilon(1e-15));
  {
    auto [p, g] = from_confusion(1, 1, 1, 1);
    CHECK(matthews_corr(p, g) == 0.0);
  }
  {
    auto [p, g] = from_confusion(3, 2, 1, 1);
    CHECK(matthews_corr(p, g) == doctest::Approx(5.0 / 12.0).epsilon(1e-15));
  }
  CHECK(matthews_corr(Ints{1, 1, 1}, Ints{1, 0, 1}) == 0.0);
  CHECK(matthews_corr(Ints{1, 0}, Ints{0, 1}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK_THROWS_AS(matthews_corr(Ints{0, 3}, Ints{0, 1}), MetricError);
}

TEST_CASE("Pearson correlation") {
  CHECK(pearson_corr(Reals{1, 2, 3}, Reals{2, 4, 6}) == doctest::Approx(1.0).epsilon(1e-15));
  CHECK(pearson_corr(Reals{1, 2, 3}, Reals{-1, -2, -3}) == doctest::Approx(-1.0).epsilon(1e-15));
  CHECK(pearson_corr(Reals{1, 2, 3}, Reals{1, 3, 2}) == doctest::Approx(0.5).epsilon(1e-15));
  CHECK_THROWS_AS(pearson_corr(Reals{1, 1, 1}, Reals{1, 2, 3}), MetricError);
  CHECK_THROWS_AS(pearson_corr(Reals{1, 2, 3}, Reals{4, 4, 4}), MetricError);
  CHECK_THROWS_AS(pearson_corr(Reals{1, 2}, Reals{1, 2, 3}), MetricError);
}

TEST_CASE("metric names") {
  CHECK(parse_metric("accuracy") == MetricKind::Accuracy);
  CHECK(parse_metric("f1") == MetricKind::F1);
  CHECK(parse_metric("mcc") == MetricKind::Matthews);
  CHECK(parse_metric("matthews") == MetricKind::Matthews);
  CHECK(parse_metric("pearson") == MetricKind::Pearson);
  CHECK_THROWS_AS(parse_metric("spearman"), MetricError);
  for (auto m : {MetricKind::Accuracy, MetricKind::F1, MetricKind::Matthews, MetricKind::Pearson})
    CHECK(parse_metric(to_string(m)) == m);
}

TEST_CASE("agreement with brute force on 1000 random instances") {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng() % 60;
    Ints p(n), g(n);
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng() % 2);
      g[i] = static_cast<int>(rng() % 2);
    }
    CHECK(std::abs(accuracy(p, g) - oracle_accuracy(p, g)) < 1e-12);
    CHECK(std::abs(f1_binary(p, g) - oracle_f1(p, g)) < 1e-12);
    CHECK(std::abs(matthews_corr(p, g) - oracle_mcc(p, g)) < 1e-12);

    std::normal_distribution<double> nd;
    Reals x(n), y(n);
    for (std::size_t i = 0; i < n; ++i) {
      x[i] = nd(rng);
      y[i] = 0.3 * x[i] + nd(rng);
    }
    CHECK(std::abs(pearson_corr(x, y) - oracle_pearson(x, y)) < 1e-12);
  }
}

TEST_CASE("permutation, polarity and affine invariance") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 10 + rng() % 30;
    Ints p(n), g(n);
    Reals x(n), y(n);
    std::normal_distribution<double> nd;
    for (std::size_t i = 0; i < n; ++i) {
      p[i] = static_cast<int>(rng() % 2);
      g[i] = static_cast<int>(rng() % 2);
      x[i] = nd(rng);
      y[i] = x[i] + nd(rng);
    }
    std::vector<std::size_t> idx(n);
    for (std::size_t i = 0; i < n; ++i)
      idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    Ints pp(n), gp(n), pf(n), gf(n);
    Reals xp(n), yp(n), xa(n), ya(n);
    for (std::size_t i = 0; i < n; ++i) {
      pp[i] = p[idx[i]];
      gp[i] = g[idx[i]];
      xp[i] = x[idx[i]];
      yp[i] = y[idx[i]];
      pf[i] = 1 - p[i];
      gf[i] = 1 - g[i];
      xa[i] = 3.5 * x[i] - 2.0;
      ya[i] = 0.25 * y[i] + 7.0;
    }
    CHECK(accuracy(pp, gp) == accuracy(p, g));
    CHECK(f1_binary(pp, gp) == doctest::Approx(f1_binary(p, g)).epsilon(1e-12));
    CHECK(matthews_corr(pp, gp) == doctest::Approx(matthews_corr(p, g)).epsilon(1e-12));
    CHECK(pearson_corr(xp, yp) == doctest::Approx(pearson_corr(x, y)).epsilon(1e-12));
    CHECK(matthews_corr(pf, gf) == doctest::Approx(matthews_corr(p, g)).epsilon(1e-12));
    CHECK(pearson_corr(xa, ya) == doctest::Approx(pearson_corr(x, y)).epsilon(1e-12));
  }
}
