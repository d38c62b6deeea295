#include "dipt/metrics.hpp"

#include <string>

#include "dipt/error.hpp"

namespace dipt::eval {

Metrics compute_metrics(const std::vector<int>& predictions, const std::vector<int>& labels, int num_classes) {
  if (labels.empty()) throw ValidationError("labels", "empty input");
  if (predictions.size() != labels.size())
    throw ShapeError("predictions/labels length mismatch: " + std::to_string(predictions.size()) + " vs " +
                     std::to_string(labels.size()));
  if (num_classes < 1) throw ValidationError("num_classes", "must be >= 1");
  Metrics m;
  m.confusion.assign(static_cast<std::size_t>(num_classes), std::vector<long>(static_cast<std::size_t>(num_classes), 0));
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int y = labels[i], p = predictions[i];
    if (y < 0 || y >= num_classes) throw ValidationError("labels", "label out of range: " + std::to_string(y));
    if (p < 0 || p >= num_classes) throw ValidationError("predictions", "prediction out of range: " + std::to_string(p));
    ++m.confusion[static_cast<std::size_t>(y)][static_cast<std::size_t>(p)];
  }
  long correct = 0;
  for (int c = 0; c < num_classes; ++c) {
    const auto uc = static_cast<std::size_t>(c);
    long col = 0, row = 0;
    for (int o = 0; o < num_classes; ++o) {
      row += m.confusion[uc][static_cast<std::size_t>(o)];
      col += m.confusion[static_cast<std::size_t>(o)][uc];
    }
    const long tp = m.confusion[uc][uc];
    correct += tp;
    const long denom = row + col;
    m.per_class_f1.push_back(denom == 0 ? 0.0 : 2.0 * static_cast<double>(tp) / static_cast<double>(denom));
  }
  m.accuracy = static_cast<double>(correct) / static_cast<double>(labels.size());
  double s = 0.0;
  for (double f : m.per_class_f1) s += f;
  m.macro_f1 = s / num_classes;
  return m;
}

}  // namespace dipt::eval
