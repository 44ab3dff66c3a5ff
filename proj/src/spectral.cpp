#include "homz/spectral.hpp"

#include "homz/errors.hpp"

#include <fftw3.h>

#include <cmath>
#include <cstring>
#include <mutex>
#include <numbers>

namespace homz {

namespace {

std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

}  // namespace

SpectralGrid::SpectralGrid(int P, int M) : P_(P), M_(M) {
    if (P < 1 || P > 3) throw UsageError("spectral grids support 1 to 3 dimensions");
    if (M < 4 || M % 2 != 0) throw UsageError("spectral grid size must be even and at least 4");
    n_real_ = 1;
    for (int d = 0; d < P; ++d) n_real_ *= static_cast<std::size_t>(M);
    n_complex_ = n_real_ / static_cast<std::size_t>(M) * static_cast<std::size_t>(M / 2 + 1);
    const auto sP = static_cast<std::size_t>(P);
    waves_.resize(n_complex_ * sP);
    const auto h = static_cast<std::size_t>(M / 2 + 1);
    for (std::size_t c = 0; c < n_complex_; ++c) {
        std::size_t rest = c;
        int j0 = static_cast<int>(rest % h);
        rest /= h;
        waves_[c * sP] = j0;
        for (int d = 1; d < P; ++d) {
            int j = static_cast<int>(rest % static_cast<std::size_t>(M));
            rest /= static_cast<std::size_t>(M);
            waves_[c * sP + static_cast<std::size_t>(d)] = (j <= M / 2) ? j : j - M;
        }
    }
    rbuf_ = fftw_alloc_real(n_real_);
    cbuf_ = fftw_alloc_complex(n_complex_);
    // FFTW is row-major with the last index fastest, so axis 0 is listed last.
    int dims[3];
    for (int d = 0; d < P; ++d) dims[d] = M;
    std::lock_guard<std::mutex> lock(planner_mutex());
    fplan_ = fftw_plan_dft_r2c(P, dims, rbuf_, static_cast<fftw_complex*>(cbuf_), FFTW_ESTIMATE);
    bplan_ = fftw_plan_dft_c2r(P, dims, static_cast<fftw_complex*>(cbuf_), rbuf_, FFTW_ESTIMATE);
    if (!fplan_ || !bplan_) throw SolverError("FFTW planning failed");
}

SpectralGrid::~SpectralGrid() {
    std::lock_guard<std::mutex> lock(planner_mutex());
    if (fplan_) fftw_destroy_plan(static_cast<fftw_plan>(fplan_));
    if (bplan_) fftw_destroy_plan(static_cast<fftw_plan>(bplan_));
    fftw_free(rbuf_);
    fftw_free(cbuf_);
}

void SpectralGrid::forward(const double* in, cplx* out) {
    std::memcpy(rbuf_, in, n_real_ * sizeof(double));
    fftw_execute(static_cast<fftw_plan>(fplan_));
    const double scale = 1.0 / static_cast<double>(n_real_);
    const auto* src = reinterpret_cast<const cplx*>(cbuf_);
    for (std::size_t c = 0; c < n_complex_; ++c) out[c] = src[c] * scale;
}

void SpectralGrid::backward(const cplx* in, double* out) {
    std::memcpy(cbuf_, in, n_complex_ * sizeof(cplx));
    fftw_execute(static_cast<fftw_plan>(bplan_));
    std::memcpy(out, rbuf_, n_real_ * sizeof(double));
}

int SpectralGrid::wave_norm2(std::size_t c) const {
    int s = 0;
    for (int d = 0; d < P_; ++d) s += wave(c, d) * wave(c, d);
    return s;
}

void SpectralGrid::derivative(const cplx* in, int axis, cplx* out) const {
    const double tp = 2 * std::numbers::pi;
    for (std::size_t c = 0; c < n_complex_; ++c)
        out[c] = nyquist(c, axis) ? cplx(0.0) : in[c] * cplx(0.0, tp * wave(c, axis));
}

void SpectralGrid::second_derivative(const cplx* in, int i, int j, cplx* out) const {
    const double tp = 2 * std::numbers::pi;
    for (std::size_t c = 0; c < n_complex_; ++c) {
        if (i != j && (nyquist(c, i) || nyquist(c, j))) {
            out[c] = 0.0;
            continue;
        }
        out[c] = -in[c] * (tp * wave(c, i)) * (tp * wave(c, j));
    }
}

void SpectralGrid::pad_to(const cplx* in, const SpectralGrid& fine, cplx* out) const {
    if (fine.P_ != P_ || fine.M_ < M_) throw UsageError("pad_to needs a finer grid of the same dimension");
    std::fill(out, out + fine.n_complex_, cplx(0.0));
    const int Mf = fine.M_;
    const auto hf = static_cast<std::size_t>(Mf / 2 + 1);
    for (std::size_t c = 0; c < n_complex_; ++c) {
        // Enumerate the ±M/2 images of Nyquist modes on the non-halved axes.
        int nyq_axes[3], n_nyq = 0;
        double weight = 1.0;
        for (int d = 0; d < P_; ++d)
            if (nyquist(c, d)) {
                weight *= 0.5;
                if (d > 0) nyq_axes[n_nyq++] = d;
            }
        for (int mask = 0; mask < (1 << n_nyq); ++mask) {
            std::size_t idx = static_cast<std::size_t>(wave(c, 0));
            std::size_t stride = hf;
            for (int d = 1; d < P_; ++d) {
                int k = wave(c, d);
                for (int q = 0; q < n_nyq; ++q)
                    if (nyq_axes[q] == d && ((mask >> q) & 1)) k = -k;
                idx += stride * static_cast<std::size_t>(k >= 0 ? k : k + Mf);
                stride *= static_cast<std::size_t>(Mf);
            }
            out[idx] += weight * in[c];
        }
    }
}

void SpectralGrid::truncate_from(const SpectralGrid& fine, const cplx* in, cplx* out) const {
    if (fine.P_ != P_ || fine.M_ < M_) throw UsageError("truncate_from needs a finer grid of the same dimension");
    const int Mf = fine.M_;
    const auto hf = static_cast<std::size_t>(Mf / 2 + 1);
    for (std::size_t c = 0; c < n_complex_; ++c) {
        bool nyq = false;
        for (int d = 0; d < P_; ++d) nyq = nyq || nyquist(c, d);
        if (nyq) {
            out[c] = 0.0;
            continue;
        }
        std::size_t idx = static_cast<std::size_t>(wave(c, 0));
        std::size_t stride = hf;
        for (int d = 1; d < P_; ++d) {
            int k = wave(c, d);
            idx += stride * static_cast<std::size_t>(k >= 0 ? k : k + Mf);
            stride *= static_cast<std::size_t>(Mf);
        }
        out[c] = in[idx];
    }
}

}  // namespace homz
