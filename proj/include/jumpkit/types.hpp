#pragma once

#include <Eigen/Core>

namespace jumpkit {

// Storage precision: every tensor on disk and every model activation.
using MatrixF = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorF = Eigen::VectorXf;

// Compute precision for shortcut heads, fitting and metrics.
using MatrixD = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using VectorD = Eigen::VectorXd;

}  // namespace jumpkit
