#pragma once

#include <vector>

namespace dipt::eval {

struct Metrics {
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  std::vector<double> per_class_f1;
  std::vector<std::vector<long>> confusion;  // [true][predicted]
};

// Classes with no true and no predicted samples score F1 = 0.
Metrics compute_metrics(const std::vector<int>& predictions, const std::vector<int>& labels, int num_classes);

}  // namespace dipt::eval
