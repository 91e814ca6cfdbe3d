#pragma once

// Reference implementations used as independent oracles by the loss tests
// and the acceptance run.

#include <cmath>
#include <vector>

#include "ssda/rng.hpp"
#include "ssda/tensor.hpp"

namespace oracles {

// Direct transcription of the contrast objective, one anchor at a time.
inline double naive_contrast(const std::vector<std::vector<double>>& z, const std::vector<int>& labels, double t) {
  const std::size_t n = z.size();
  auto dot = [&](std::size_t a, std::size_t b) {
    double s = 0;
    for (std::size_t d = 0; d < z[a].size(); ++d) s += z[a][d] * z[b][d];
    return s;
  };
  double total = 0;
  int anchors = 0;
  for (std::size_t j = 0; j < n; ++j) {
    double neg = 0;
    for (std::size_t k = 0; k < n; ++k)
      if (labels[k] != labels[j]) neg += std::exp(dot(j, k) / t);
    double lj = 0;
    int pos = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == j || labels[p] != labels[j]) continue;
      const double e = std::exp(dot(j, p) / t);
      lj += -std::log(e / (e + neg));
      ++pos;
    }
    if (pos == 0) continue;
    total += lj / pos;
    ++anchors;
  }
  return anchors ? total / anchors : 0.0;
}

inline std::vector<std::vector<double>> unit_rows(std::size_t n, std::size_t d, ssda::Rng& rng) {
  std::vector<std::vector<double>> rows(n, std::vector<double>(d));
  for (auto& r : rows) {
    double ss = 0;
    for (auto& v : r) {
      v = rng.normal();
      ss += v * v;
    }
    for (auto& v : r) v /= std::sqrt(ss);
  }
  return rows;
}

inline ssda::Tensor<double> as_tensor(const std::vector<std::vector<double>>& rows) {
  std::vector<double> flat;
  for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
  return ssda::Tensor<double>::parameter({rows.size(), rows[0].size()}, flat);
}

}  // namespace oracles
