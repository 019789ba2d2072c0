#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "ltkd/common.hpp"
#include "ltkd/longtail_data.hpp"
#include "ltkd/model.hpp"

namespace ltkd::test {

inline std::filesystem::path fresh_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("ltkd_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, Rng& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < m.size(); ++i) m.data()[i] = n(rng);
  return m;
}

inline std::vector<int> random_labels(int count, int num_classes, Rng& rng) {
  std::uniform_int_distribution<int> u(0, num_classes - 1);
  std::vector<int> labels(count);
  for (auto& y : labels) y = u(rng);
  return labels;
}

inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

struct GradMismatch {
  std::string name;
  Eigen::Index index;
  double analytic;
  double numeric;
  double rel;
};

/// Central differences over every entry of every parameter matrix.
inline std::vector<GradMismatch> check_gradients(ModelState& model, const Parameters& analytic,
                                                 const std::function<double(const ModelState&)>& loss,
                                                 double tolerance, double h = 1e-6,
                                                 double* worst = nullptr) {
  std::vector<std::pair<std::string, const Matrix*>> grads;
  visit_parameters(
      analytic, [&](const std::string& name, const Matrix& g) { grads.emplace_back(name, &g); },
      model.spec.num_blocks());
  std::vector<GradMismatch> out;
  std::size_t slot = 0;
  double max_rel = 0.0;
  visit_parameters(
      model.params,
      [&](const std::string& name, Matrix& p) {
        const Matrix& g = *grads.at(slot++).second;
        for (Eigen::Index i = 0; i < p.size(); ++i) {
          const double saved = p.data()[i];
          p.data()[i] = saved + h;
          const double up = loss(model);
          p.data()[i] = saved - h;
          const double down = loss(model);
          p.data()[i] = saved;
          const double fd = (up - down) / (2 * h);
          const double rel = relative_error(g.data()[i], fd);
          max_rel = std::max(max_rel, rel);
          if (rel >= tolerance) out.push_back({name, i, g.data()[i], fd, rel});
        }
      },
      model.spec.num_blocks());
  if (worst) *worst = max_rel;
  return out;
}

inline std::vector<InsertionPoint> sites(std::initializer_list<int> blocks) {
  std::vector<InsertionPoint> out;
  for (int b : blocks) out.push_back({b});
  return out;
}

/// Small long-tailed mixture used by the training tests.
inline TrainTestSplits small_mixture(int num_classes = 4, int input_dim = 8, std::vector<int> counts = {},
                                     std::uint64_t seed = 3) {
  SynthMixtureSpec spec;
  spec.num_classes = num_classes;
  spec.input_dim = input_dim;
  spec.class_separation = 3.0;
  spec.within_class_std = 1.0;
  spec.counts = counts.empty() ? std::vector<int>{60, 30, 15, 8} : counts;
  spec.test_per_class = 20;
  return make_synthetic_mixture(spec, seed);
}

}  // namespace ltkd::test
