#pragma once

#include <cstddef>
#include <span>

namespace niwt {

// Mean over `classes` of the per-class accuracy. Predictions may range over
// any label space. Throws if a listed class has no instance.
double class_normalized_accuracy(std::span<const std::size_t> predictions,
                                 std::span<const std::size_t> labels,
                                 std::span<const std::size_t> classes);

// Same, over every class that occurs in `labels`.
double class_normalized_accuracy(std::span<const std::size_t> predictions,
                                 std::span<const std::size_t> labels);

// 2 u s / (u + s), and 0 when both are 0.
double harmonic_mean(double acc_unseen, double acc_seen);

}  // namespace niwt
