#pragma once

#include <cstdint>

#include <Eigen/Dense>

namespace ddit {

template <typename Real>
using Mat = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Real>
using Vec = Eigen::Matrix<Real, Eigen::Dynamic, 1>;

/// Multiply-accumulate tally for instrumented forward passes.
struct MacCounter {
  std::uint64_t macs = 0;
};

// Y = A * B, tallying rows(A) * cols(A) * cols(B) multiply-accumulates.
template <typename Real, typename A, typename B>
Mat<Real> matmul(const A& a, const B& b, MacCounter* counter) {
  if (counter)
    counter->macs += static_cast<std::uint64_t>(a.rows()) * static_cast<std::uint64_t>(a.cols()) *
                     static_cast<std::uint64_t>(b.cols());
  Mat<Real> out;
  out.noalias() = a * b;
  return out;
}

}  // namespace ddit
