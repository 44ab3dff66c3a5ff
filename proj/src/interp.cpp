#include "homz/interp.hpp"

#include "homz/errors.hpp"

#include <algorithm>
#include <cmath>

namespace homz {

std::vector<double> UniformAxis::points() const {
    std::vector<double> p(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) p[static_cast<std::size_t>(i)] = at(i);
    return p;
}

TensorGrid::TensorGrid(std::vector<UniformAxis> axes) : axes_(std::move(axes)) {
    if (static_cast<int>(axes_.size()) > kMaxTensorDims)
        throw UsageError("tensor grids support at most " + std::to_string(kMaxTensorDims) + " dimensions");
    size_ = 1;
    for (const auto& a : axes_) {
        if (a.n < 1) throw UsageError("axis needs at least one point");
        if (a.n > 1 && !(a.hi > a.lo)) throw UsageError("axis must be strictly increasing");
        size_ *= static_cast<std::size_t>(a.n);
    }
}

void TensorGrid::node(std::size_t flat, double* out) const {
    for (std::size_t d = 0; d < axes_.size(); ++d) {
        const auto n = static_cast<std::size_t>(axes_[d].n);
        out[d] = axes_[d].at(static_cast<int>(flat % n));
        flat /= n;
    }
}

std::vector<double> TensorGrid::node(std::size_t flat) const {
    std::vector<double> out(axes_.size());
    node(flat, out.data());
    return out;
}

void TensorGrid::stencil(const double* point, Stencil& out) const {
    const int D = dims();
    int base[kMaxTensorDims];
    double frac[kMaxTensorDims];
    bool live[kMaxTensorDims];
    out.clamped = false;
    for (int d = 0; d < D; ++d) {
        const UniformAxis& a = axes_[static_cast<std::size_t>(d)];
        double v = point[d];
        if (a.n == 1) {
            if (std::fabs(v - a.lo) > 1e-12 * (1 + std::fabs(a.lo))) out.clamped = true;
            base[d] = 0;
            frac[d] = 0.0;
            live[d] = false;
            continue;
        }
        if (v < a.lo || v > a.hi || std::isnan(v)) {
            out.clamped = true;
            v = std::isnan(v) ? a.lo : std::clamp(v, a.lo, a.hi);
        }
        double s = (v - a.lo) / a.step();
        int i = static_cast<int>(std::floor(s));
        if (i >= a.n - 1) i = a.n - 2;
        if (i < 0) i = 0;
        base[d] = i;
        frac[d] = s - i;
        live[d] = true;
    }
    int corners = 0;
    for (int mask = 0; mask < (1 << D); ++mask) {
        double w = 1.0;
        std::size_t flat = 0, stride = 1;
        bool skip = false;
        for (int d = 0; d < D; ++d) {
            int bit = (mask >> d) & 1;
            if (!live[d] && bit) {
                skip = true;
                break;
            }
            w *= bit ? frac[d] : (live[d] ? 1.0 - frac[d] : 1.0);
            flat += stride * static_cast<std::size_t>(base[d] + bit);
            stride *= static_cast<std::size_t>(axes_[static_cast<std::size_t>(d)].n);
        }
        if (skip) continue;
        out.index[corners] = flat;
        out.weight[corners] = w;
        ++corners;
    }
    out.count = corners;
}

bool TensorGrid::contains(const double* point, double slack) const {
    for (int d = 0; d < dims(); ++d) {
        const UniformAxis& a = axes_[static_cast<std::size_t>(d)];
        double tol = slack * (1 + std::fabs(a.lo) + std::fabs(a.hi));
        if (point[d] < a.lo - tol || point[d] > a.hi + tol) return false;
    }
    return true;
}

}  // namespace homz
