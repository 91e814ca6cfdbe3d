#pragma once

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "ssda/error.hpp"
#include "ssda/image.hpp"

namespace ssda {

/// Rows are ground truth, columns predictions.
struct ConfusionMatrix {
  int classes = 0;
  std::vector<std::uint64_t> counts;
  std::uint64_t ignored = 0;

  explicit ConfusionMatrix(int c = 0) : classes(c), counts(static_cast<std::size_t>(c) * c, 0) {}

  std::uint64_t& at(int gt, int pred) { return counts[static_cast<std::size_t>(gt) * classes + pred]; }
  std::uint64_t at(int gt, int pred) const { return counts[static_cast<std::size_t>(gt) * classes + pred]; }

  std::uint64_t total() const {
    std::uint64_t n = 0;
    for (auto v : counts) n += v;
    return n;
  }

  ConfusionMatrix& operator+=(const ConfusionMatrix& o) {
    if (o.classes != classes) throw IntegrityError("confusion matrices differ in class count");
    for (std::size_t i = 0; i < counts.size(); ++i) counts[i] += o.counts[i];
    ignored += o.ignored;
    return *this;
  }
};

inline void accumulate(ConfusionMatrix& cm, const std::vector<std::uint8_t>& pred, const std::vector<std::uint8_t>& gt,
                       std::uint8_t ignore = kIgnoreLabel) {
  if (pred.size() != gt.size()) throw ConfigError("accumulate: prediction and ground truth differ in size");
  for (std::size_t i = 0; i < gt.size(); ++i) {
    if (gt[i] == ignore) {
      ++cm.ignored;
      continue;
    }
    if (pred[i] >= cm.classes) throw DataError("accumulate: predicted class " + std::to_string(pred[i]) + " >= C");
    if (gt[i] >= cm.classes) throw DataError("accumulate: ground-truth class " + std::to_string(gt[i]) + " >= C");
    ++cm.at(gt[i], pred[i]);
  }
}

inline void accumulate(ConfusionMatrix& cm, const LabelMap& pred, const LabelMap& gt) {
  accumulate(cm, pred.values, gt.values);
}

struct IouReport {
  std::vector<double> per_class;  // NaN for classes absent from both prediction and ground truth
  double miou = 0.0;
};

/// IoU_c = TP / (TP + FP + FN); the mean skips zero-union classes.
inline IouReport iou(const ConfusionMatrix& cm) {
  if (cm.total() == 0) throw EmptySetError("iou: confusion matrix is empty");
  IouReport r;
  double sum = 0.0;
  int included = 0;
  for (int c = 0; c < cm.classes; ++c) {
    std::uint64_t row = 0, col = 0;
    for (int k = 0; k < cm.classes; ++k) {
      row += cm.at(c, k);
      col += cm.at(k, c);
    }
    const std::uint64_t tp = cm.at(c, c), uni = row + col - tp;
    if (uni == 0) {
      r.per_class.push_back(std::numeric_limits<double>::quiet_NaN());
      continue;
    }
    const double v = static_cast<double>(tp) / static_cast<double>(uni);
    r.per_class.push_back(v);
    sum += v;
    ++included;
  }
  r.miou = sum / included;
  return r;
}

// Report grammar: "classXX=<iou>" per class (two-digit index, "nan" for an
// excluded class), then "miou=<value>", 6 decimals.

inline std::string format_report(const IouReport& r) {
  std::ostringstream out;
  char buf[64];
  for (std::size_t c = 0; c < r.per_class.size(); ++c) {
    if (std::isnan(r.per_class[c])) {
      std::snprintf(buf, sizeof buf, "class%02zu=nan\n", c);
    } else {
      std::snprintf(buf, sizeof buf, "class%02zu=%.6f\n", c, r.per_class[c]);
    }
    out << buf;
  }
  std::snprintf(buf, sizeof buf, "miou=%.6f\n", r.miou);
  out << buf;
  return out.str();
}

inline IouReport parse_report(const std::string& text) {
  IouReport r;
  bool have_miou = false;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw DataError("report: malformed line '" + line + "'");
    const std::string key = line.substr(0, eq), value = line.substr(eq + 1);
    const double v = value == "nan" ? std::numeric_limits<double>::quiet_NaN() : std::stod(value);
    if (key == "miou") {
      r.miou = v;
      have_miou = true;
    } else if (key.rfind("class", 0) == 0 && key.size() == 7) {
      const auto index = static_cast<std::size_t>(std::stoi(key.substr(5)));
      if (index != r.per_class.size()) throw DataError("report: class lines out of order");
      r.per_class.push_back(v);
    } else {
      throw DataError("report: unknown key '" + key + "'");
    }
  }
  if (!have_miou) throw DataError("report: missing miou line");
  return r;
}

inline void write_report(const std::string& path, const IouReport& r) {
  std::ofstream out(path, std::ios::trunc);
  out << format_report(r);
  if (!out) throw DataError("cannot write " + path);
}

inline IouReport read_report(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot read " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_report(ss.str());
}

}  // namespace ssda
