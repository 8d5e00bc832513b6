#pragma once

// Finite-difference gradient checking against the engine's analytic
// backward passes. Loss callables must be deterministic functions of the
// parameter store (fixed inputs, fixed noise seeds).

#include <functional>

#include "across/nn.hpp"

namespace gradcheck {

struct Report {
  double max_rel_err = 0.0;
  std::string worst;
};

inline double rel_err(double a, double b) {
  double denom = std::max({std::abs(a), std::abs(b), 1e-8});
  return std::abs(a - b) / denom;
}

// Compares analytic gradients (accumulated by `compute_grads`) with central
// finite differences of `loss` over every parameter component.
inline Report check_param_gradients(across::nn::ParamStore<double>& ps,
                                    const std::function<double()>& loss,
                                    const std::function<void()>& compute_grads,
                                    double h = 1e-4) {
  compute_grads();
  std::vector<Eigen::VectorXd> analytic;
  for (const auto& name : ps.names()) analytic.push_back(ps.at(name).grad);

  Report report;
  std::size_t t = 0;
  for (const auto& name : ps.names()) {
    auto& tensor = ps.at(name);
    for (Eigen::Index i = 0; i < tensor.size(); ++i) {
      double orig = tensor.value[i];
      tensor.value[i] = orig + h;
      double fp = loss();
      tensor.value[i] = orig - h;
      double fm = loss();
      tensor.value[i] = orig;
      double fd = (fp - fm) / (2.0 * h);
      double err = rel_err(analytic[t][i], fd);
      if (err > report.max_rel_err) {
        report.max_rel_err = err;
        report.worst = name + "[" + std::to_string(i) + "] analytic=" +
                       std::to_string(analytic[t][i]) + " fd=" + std::to_string(fd);
      }
    }
    ++t;
  }
  return report;
}

// Finite differences with respect to an input matrix.
inline double check_input_gradient(across::nn::Mat<double>& x, const Eigen::MatrixXd& analytic_dx,
                                   const std::function<double()>& loss, double h = 1e-4) {
  double max_err = 0.0;
  for (Eigen::Index c = 0; c < x.cols(); ++c)
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      double orig = x(r, c);
      x(r, c) = orig + h;
      double fp = loss();
      x(r, c) = orig - h;
      double fm = loss();
      x(r, c) = orig;
      double fd = (fp - fm) / (2.0 * h);
      max_err = std::max(max_err, rel_err(analytic_dx(r, c), fd));
    }
  return max_err;
}

}  // namespace gradcheck
