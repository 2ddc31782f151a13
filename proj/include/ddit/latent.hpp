#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "ddit/error.hpp"

namespace ddit {

/// H x W x C grid stored row-major with channels innermost.
template <typename Real>
class BasicLatent {
 public:
  using value_type = Real;

  BasicLatent() = default;

  BasicLatent(int height, int width, int channels, Real fill = Real(0))
      : h_(height), w_(width), c_(channels) {
    require(height >= 1 && width >= 1 && channels >= 1,
            "latent dimensions must be positive, got " + shape_string(height, width, channels));
    data_.assign(static_cast<std::size_t>(height) * width * channels, fill);
  }

  BasicLatent(int height, int width, int channels, std::vector<Real> values)
      : BasicLatent(height, width, channels) {
    require(values.size() == data_.size(), "latent value count does not match shape " +
                                               shape_string(height, width, channels));
    data_ = std::move(values);
    require(all_finite(), "latent contains non-finite values");
  }

  int height() const { return h_; }
  int width() const { return w_; }
  int channels() const { return c_; }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  Real& at(int y, int x, int c) { return data_[index(y, x, c)]; }
  Real at(int y, int x, int c) const { return data_[index(y, x, c)]; }
  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }

  std::span<Real> values() { return data_; }
  std::span<const Real> values() const { return data_; }
  Real* data() { return data_.data(); }
  const Real* data() const { return data_.data(); }

  bool same_shape(const BasicLatent& o) const { return h_ == o.h_ && w_ == o.w_ && c_ == o.c_; }

  bool all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
  }

  std::string shape() const { return shape_string(h_, w_, c_); }

  template <typename Other>
  BasicLatent<Other> cast() const {
    BasicLatent<Other> out(h_, w_, c_);
    for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<Other>(data_[i]);
    return out;
  }

  bool operator==(const BasicLatent&) const = default;

 private:
  std::size_t index(int y, int x, int c) const {
    return (static_cast<std::size_t>(y) * w_ + x) * c_ + c;
  }
  static std::string shape_string(int h, int w, int c) {
    return std::to_string(h) + "x" + std::to_string(w) + "x" + std::to_string(c);
  }

  int h_ = 0, w_ = 0, c_ = 0;
  std::vector<Real> data_;
};

using Latent = BasicLatent<float>;

template <typename Real>
void require_same_shape(const BasicLatent<Real>& a, const BasicLatent<Real>& b, const char* what) {
  if (!a.same_shape(b))
    throw ValidationError(std::string(what) + ": shape mismatch " + a.shape() + " vs " + b.shape());
}

/// Root mean square of the elementwise difference, accumulated in double.
template <typename Real>
double rmse(const BasicLatent<Real>& a, const BasicLatent<Real>& b) {
  require_same_shape(a, b, "rmse");
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
    acc += d * d;
  }
  return std::sqrt(acc / static_cast<double>(a.size()));
}

}  // namespace ddit
