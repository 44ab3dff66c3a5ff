#pragma once

#include <complex>
#include <cstddef>
#include <cstdlib>
#include <vector>

namespace homz {

using cplx = std::complex<double>;

/// Real-to-complex FFTs on the uniform torus grid with M nodes per axis (node layout as TorusGrid:
/// axis 0 fastest). Coefficients are normalized so that f(x) = Σ_k c_k e^{2πi k·x}.
///
/// Instances own their plans and scratch buffers and are not safe for concurrent use.
class SpectralGrid {
public:
    SpectralGrid(int P, int M);
    ~SpectralGrid();
    SpectralGrid(const SpectralGrid&) = delete;
    SpectralGrid& operator=(const SpectralGrid&) = delete;

    int P() const { return P_; }
    int M() const { return M_; }
    std::size_t real_size() const { return n_real_; }
    std::size_t complex_size() const { return n_complex_; }

    /// Nodal values → normalized coefficients.
    void forward(const double* in, cplx* out);
    /// Coefficients → nodal values (input is not modified).
    void backward(const cplx* in, double* out);

    /// Signed wavenumber of complex index c along `axis` (Nyquist reported as +M/2).
    int wave(std::size_t c, int axis) const { return waves_[c * static_cast<std::size_t>(P_) + static_cast<std::size_t>(axis)]; }
    bool nyquist(std::size_t c, int axis) const { return 2 * std::abs(wave(c, axis)) == M_; }
    /// Squared Euclidean norm of the wavevector.
    int wave_norm2(std::size_t c) const;

    /// ∂/∂x_axis in coefficient space (Nyquist mode dropped).
    void derivative(const cplx* in, int axis, cplx* out) const;
    /// ∂²/∂x_i∂x_j in coefficient space (Nyquist kept for i == j, dropped otherwise).
    void second_derivative(const cplx* in, int i, int j, cplx* out) const;

    /// Copies coefficients into a finer grid (Nyquist modes split symmetrically).
    void pad_to(const cplx* in, const SpectralGrid& fine, cplx* out) const;
    /// Keeps the modes |k_axis| < M/2 of a finer grid's coefficients; the Nyquist mode is zeroed.
    void truncate_from(const SpectralGrid& fine, const cplx* in, cplx* out) const;

private:
    int P_, M_;
    std::size_t n_real_, n_complex_;
    std::vector<int> waves_;
    double* rbuf_ = nullptr;
    void* cbuf_ = nullptr;
    void* fplan_ = nullptr;
    void* bplan_ = nullptr;
};

}  // namespace homz
