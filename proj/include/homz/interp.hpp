#pragma once

#include <cstddef>
#include <vector>

namespace homz {

/// One uniformly spaced axis [lo, hi] with n ≥ 1 points (n = 1 means lo == hi).
struct UniformAxis {
    double lo = 0.0;
    double hi = 0.0;
    int n = 1;

    double step() const { return n > 1 ? (hi - lo) / (n - 1) : 0.0; }
    double at(int i) const { return n > 1 ? lo + (hi - lo) * i / (n - 1) : lo; }
    std::vector<double> points() const;
};

constexpr int kMaxTensorDims = 8;

/// Corner indices and weights of a multilinear interpolation stencil.
struct Stencil {
    int count = 0;
    bool clamped = false;
    std::size_t index[1 << kMaxTensorDims];
    double weight[1 << kMaxTensorDims];
};

/// Rectangular tensor grid of uniform axes; flat index has axis 0 fastest.
class TensorGrid {
public:
    TensorGrid() = default;
    explicit TensorGrid(std::vector<UniformAxis> axes);

    int dims() const { return static_cast<int>(axes_.size()); }
    std::size_t size() const { return size_; }
    const UniformAxis& axis(int d) const { return axes_[static_cast<std::size_t>(d)]; }
    const std::vector<UniformAxis>& axes() const { return axes_; }

    /// Coordinates of node `flat`.
    void node(std::size_t flat, double* out) const;
    std::vector<double> node(std::size_t flat) const;

    /// Multilinear stencil at `point`, clamping each coordinate into the box.
    void stencil(const double* point, Stencil& out) const;

    /// True when every coordinate lies inside the box (with relative slack).
    bool contains(const double* point, double slack = 1e-12) const;

private:
    std::vector<UniformAxis> axes_;
    std::size_t size_ = 0;
};

}  // namespace homz
