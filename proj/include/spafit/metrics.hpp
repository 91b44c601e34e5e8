// SPDX-License-Identifier: Apache-2.0
//
// Evaluation metrics for classification and regression predictions.

#pragma once

#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace spafit {

class MetricError : public std::invalid_argument {
public:
  using std::invalid_argument::invalid_argument;
};

enum class MetricKind { Accuracy, F1, Matthews, Pearson };

std::string_view to_string(MetricKind m);
/// "accuracy", "f1", "mcc"/"matthews", "pearson".
MetricKind parse_metric(std::string_view name);

struct Confusion {
  std::uint64_t tp = 0, tn = 0, fp = 0, fn = 0;
};

/// Binary confusion counts; every label must be 0 or 1, 1 being positive.
Confusion binary_confusion(std::span<const int> predicted, std::span<const int> gold);

double accuracy(std::span<const int> predicted, std::span<const int> gold);
/// 2TP / (2TP + FP + FN), 0 when the denominator is 0.
double f1_binary(std::span<const int> predicted, std::span<const int> gold);
/// Matthews correlation; 0 when any marginal is empty.
double matthews_corr(std::span<const int> predicted, std::span<const int> gold);
double f1_binary(const Confusion &c);
double matthews_corr(const Confusion &c);
/// Sample Pearson correlation. Throws MetricError on zero variance.
double pearson_corr(std::span<const double> predicted, std::span<const double> gold);

} // namespace spafit
