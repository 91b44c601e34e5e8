// SPDX-License-Identifier: Apache-2.0

#include <spafit/metrics.hpp>

#include <cmath>
#include <string>

namespace spafit {

namespace {

template <typename T>
void check_lengths(std::span<const T> p, std::span<const T> g, const char *who) {
  if (p.size() != g.size())
    throw MetricError(std::string(who) + ": " + std::to_string(p.size()) +
                      " predictions vs " + std::to_string(g.size()) + " gold labels");
  if (p.empty())
    throw MetricError(std::string(who) + ": no predictions");
}

} // namespace

std::string_view to_string(MetricKind m) {
  switch (m) {
  case MetricKind::Accuracy:
    return "accuracy";
  case MetricKind::F1:
    return "f1";
  case MetricKind::Matthews:
    return "mcc";
  case MetricKind::Pearson:
    return "pearson";
  }
  return "?";
}

MetricKind parse_metric(std::string_view name) {
  if (name == "accuracy" || name == "acc")
    return MetricKind::Accuracy;
  if (name == "f1")
    return MetricKind::F1;
  if (name == "mcc" || name == "matthews")
    return MetricKind::Matthews;
  if (name == "pearson")
    return MetricKind::Pearson;
  throw MetricError("unknown metric '" + std::string(name) + "'");
}

Confusion binary_confusion(std::span<const int> predicted, std::span<const int> gold) {
  check_lengths(predicted, gold, "binary metric");
  Confusion c;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const int p = predicted[i], g = gold[i];
    if ((p != 0 && p != 1) || (g != 0 && g != 1))
      throw MetricError("binary metric: labels must be 0 or 1, got " +
                        std::to_string(p) + "/" + std::to_string(g));
    if (p == 1 && g == 1)
      ++c.tp;
    else if (p == 0 && g == 0)
      ++c.tn;
    else if (p == 1)
      ++c.fp;
    else
      ++c.fn;
  }
  return c;
}

double accuracy(std::span<const int> predicted, std::span<const int> gold) {
  check_lengths(predicted, gold, "accuracy");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < predicted.size(); ++i)
    hits += predicted[i] == gold[i];
  return static_cast<double>(hits) / static_cast<double>(predicted.size());
}

double f1_binary(const Confusion &c) {
  const double denom = 2.0 * c.tp + c.fp + c.fn;
  return denom == 0.0 ? 0.0 : 2.0 * c.tp / denom;
}

double f1_binary(std::span<const int> predicted, std::span<const int> gold) {
  return f1_binary(binary_confusion(predicted, gold));
}

double matthews_corr(const Confusion &c) {
  const double tp = c.tp, tn = c.tn, fp = c.fp, fn = c.fn;
  const double denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn);
  if (denom == 0.0)
    return 0.0;
  return (tp * tn - fp * fn) / std::sqrt(denom);
}

double matthews_corr(std::span<const int> predicted, std::span<const int> gold) {
  return matthews_corr(binary_confusion(predicted, gold));
}

double pearson_corr(std::span<const double> predicted, std::span<const double> gold) {
  check_lengths(predicted, gold, "pearson");
  const double n = static_cast<double>(predicted.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    mx += predicted[i];
    my += gold[i];
  }
  mx /= n;
  my /= n;
  double sxy = 0.0, sxx = 0.0, syy = 0.0;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    const double dx = predicted[i] - mx, dy = gold[i] - my;
    sxy += dx * dy;
    sxx += dx * dx;
    syy += dy * dy;
  }
  if (sxx == 0.0 || syy == 0.0)
    throw MetricError("pearson: correlation undefined for zero variance");
  return sxy / std::sqrt(sxx * syy);
}

} // namespace spafit
