#include "niwt/metrics.hpp"

#include <map>
#include <set>
#include <string>
#include <vector>

#include "niwt/error.hpp"

namespace niwt {

double class_normalized_accuracy(std::span<const std::size_t> predictions,
                                 std::span<const std::size_t> labels,
                                 std::span<const std::size_t> classes) {
  require(predictions.size() == labels.size(), ErrorCode::kShapeMismatch,
          "class_normalized_accuracy: predictions and labels differ in length");
  require(!classes.empty(), ErrorCode::kInvalidArgument,
          "class_normalized_accuracy: empty class subset");
  std::map<std::size_t, std::pair<std::size_t, std::size_t>> tally;  // class -> (hit, total)
  for (std::size_t c : classes) tally[c] = {0, 0};
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto it = tally.find(labels[i]);
    if (it == tally.end()) continue;
    ++it->second.second;
    if (predictions[i] == labels[i]) ++it->second.first;
  }
  double acc = 0.0;
  for (const auto& [c, ht] : tally) {
    require(ht.second > 0, ErrorCode::kInvalidArgument,
            "class_normalized_accuracy: class " + std::to_string(c) + " has no instances");
    acc += static_cast<double>(ht.first) / static_cast<double>(ht.second);
  }
  return acc / static_cast<double>(tally.size());
}

double class_normalized_accuracy(std::span<const std::size_t> predictions,
                                 std::span<const std::size_t> labels) {
  const std::set<std::size_t> present(labels.begin(), labels.end());
  const std::vector<std::size_t> classes(present.begin(), present.end());
  return class_normalized_accuracy(predictions, labels, classes);
}

double harmonic_mean(double acc_unseen, double acc_seen) {
  const double denom = acc_unseen + acc_seen;
  return denom == 0.0 ? 0.0 : 2.0 * acc_unseen * acc_seen / denom;
}

}  // namespace niwt
