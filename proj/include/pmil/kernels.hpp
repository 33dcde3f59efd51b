#pragma once

// 3x3 convolution kernels (stride 1, zero pad 1, cross-correlation).
// The top-level functions are the OpenMP-parallel production path; the
// `serial` namespace holds a naive reference implementation that the unit
// tests and the benchmark compare against. Both accumulate in a fixed
// order per output element, so results are bit-identical across thread
// counts.

#include <cstddef>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pmil::kernels {

namespace serial {

// y[co,oy,ox] = b[co] + sum_{ci,ky,kx} x[ci,oy+ky-1,ox+kx-1] * w[co,ci,ky,kx]
template <typename S>
void conv3x3_forward(const S* x, const S* w, const S* b, S* y,
                     int c_in, int h, int wd, int c_out) {
    for (int co = 0; co < c_out; ++co)
        for (int oy = 0; oy < h; ++oy)
            for (int ox = 0; ox < wd; ++ox) {
                S acc = b ? b[co] : S(0);
                for (int ci = 0; ci < c_in; ++ci)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int iy = oy + ky - 1, ix = ox + kx - 1;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                            acc += x[(static_cast<std::size_t>(ci) * h + iy) * wd + ix] *
                                   w[((static_cast<std::size_t>(co) * c_in + ci) * 3 + ky) * 3 + kx];
                        }
                y[(static_cast<std::size_t>(co) * h + oy) * wd + ox] = acc;
            }
}

// gx += dL/dx given gy = dL/dy
template <typename S>
void conv3x3_backward_input(const S* gy, const S* w, S* gx,
                            int c_in, int h, int wd, int c_out) {
    for (int ci = 0; ci < c_in; ++ci)
        for (int iy = 0; iy < h; ++iy)
            for (int ix = 0; ix < wd; ++ix) {
                S acc = 0;
                for (int co = 0; co < c_out; ++co)
                    for (int ky = 0; ky < 3; ++ky)
                        for (int kx = 0; kx < 3; ++kx) {
                            const int oy = iy - ky + 1, ox = ix - kx + 1;
                            if (oy < 0 || oy >= h || ox < 0 || ox >= wd) continue;
                            acc += gy[(static_cast<std::size_t>(co) * h + oy) * wd + ox] *
                                   w[((static_cast<std::size_t>(co) * c_in + ci) * 3 + ky) * 3 + kx];
                        }
                gx[(static_cast<std::size_t>(ci) * h + iy) * wd + ix] += acc;
            }
}

// gw += dL/dw, gb += dL/db
template <typename S>
void conv3x3_backward_params(const S* x, const S* gy, S* gw, S* gb,
                             int c_in, int h, int wd, int c_out) {
    for (int co = 0; co < c_out; ++co) {
        for (int ci = 0; ci < c_in; ++ci)
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    S acc = 0;
                    for (int oy = 0; oy < h; ++oy)
                        for (int ox = 0; ox < wd; ++ox) {
                            const int iy = oy + ky - 1, ix = ox + kx - 1;
                            if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                            acc += gy[(static_cast<std::size_t>(co) * h + oy) * wd + ox] *
                                   x[(static_cast<std::size_t>(ci) * h + iy) * wd + ix];
                        }
                    gw[((static_cast<std::size_t>(co) * c_in + ci) * 3 + ky) * 3 + kx] += acc;
                }
        if (gb) {
            S acc = 0;
            for (int oy = 0; oy < h; ++oy)
                for (int ox = 0; ox < wd; ++ox)
                    acc += gy[(static_cast<std::size_t>(co) * h + oy) * wd + ox];
            gb[co] += acc;
        }
    }
}

}  // namespace serial

namespace detail {

// One output channel of the forward pass, rows split so the inner ox loop
// is branch-free and vectorizable.
template <typename S>
inline void conv_forward_channel(const S* x, const S* w, S bias, S* y,
                                 int c_in, int h, int wd, int co) {
    S* ych = y + static_cast<std::size_t>(co) * h * wd;
    for (int i = 0; i < h * wd; ++i) ych[i] = bias;
    for (int ci = 0; ci < c_in; ++ci) {
        const S* xch = x + static_cast<std::size_t>(ci) * h * wd;
        const S* wk = w + (static_cast<std::size_t>(co) * c_in + ci) * 9;
        for (int oy = 0; oy < h; ++oy) {
            S* yr = ych + static_cast<std::size_t>(oy) * wd;
            for (int ky = 0; ky < 3; ++ky) {
                const int iy = oy + ky - 1;
                if (iy < 0 || iy >= h) continue;
                const S* xr = xch + static_cast<std::size_t>(iy) * wd;
                const S w0 = wk[ky * 3 + 0], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                yr[0] += w1 * xr[0] + (wd > 1 ? w2 * xr[1] : S(0));
                for (int ox = 1; ox < wd - 1; ++ox)
                    yr[ox] += w0 * xr[ox - 1] + w1 * xr[ox] + w2 * xr[ox + 1];
                if (wd > 1) yr[wd - 1] += w0 * xr[wd - 2] + w1 * xr[wd - 1];
            }
        }
    }
}

}  // namespace detail

template <typename S>
void conv3x3_forward(const S* x, const S* w, const S* b, S* y,
                     int c_in, int h, int wd, int c_out) {
#pragma omp parallel for schedule(static) if (c_out >= 8)
    for (int co = 0; co < c_out; ++co)
        detail::conv_forward_channel(x, w, b ? b[co] : S(0), y, c_in, h, wd, co);
}

template <typename S>
void conv3x3_backward_input(const S* gy, const S* w, S* gx,
                            int c_in, int h, int wd, int c_out) {
    // Same access pattern as the forward pass with kernel transposed in
    // (co,ci) and flipped spatially; parallel over input channels so each
    // thread owns a disjoint gx slice.
#pragma omp parallel for schedule(static) if (c_in >= 8)
    for (int ci = 0; ci < c_in; ++ci) {
        S* gch = gx + static_cast<std::size_t>(ci) * h * wd;
        for (int co = 0; co < c_out; ++co) {
            const S* gych = gy + static_cast<std::size_t>(co) * h * wd;
            const S* wk = w + (static_cast<std::size_t>(co) * c_in + ci) * 9;
            for (int iy = 0; iy < h; ++iy) {
                S* gr = gch + static_cast<std::size_t>(iy) * wd;
                for (int ky = 0; ky < 3; ++ky) {
                    const int oy = iy - ky + 1;
                    if (oy < 0 || oy >= h) continue;
                    const S* gyr = gych + static_cast<std::size_t>(oy) * wd;
                    // kx flips: gx[ix] pulls gy[ix - kx + 1]
                    const S w0 = wk[ky * 3 + 0], w1 = wk[ky * 3 + 1], w2 = wk[ky * 3 + 2];
                    gr[0] += w1 * gyr[0] + (wd > 1 ? w0 * gyr[1] : S(0));
                    for (int ix = 1; ix < wd - 1; ++ix)
                        gr[ix] += w2 * gyr[ix - 1] + w1 * gyr[ix] + w0 * gyr[ix + 1];
                    if (wd > 1) gr[wd - 1] += w2 * gyr[wd - 2] + w1 * gyr[wd - 1];
                }
            }
        }
    }
}

template <typename S>
void conv3x3_backward_params(const S* x, const S* gy, S* gw, S* gb,
                             int c_in, int h, int wd, int c_out) {
#pragma omp parallel for schedule(static) if (c_out >= 8)
    for (int co = 0; co < c_out; ++co) {
        const S* gych = gy + static_cast<std::size_t>(co) * h * wd;
        for (int ci = 0; ci < c_in; ++ci) {
            const S* xch = x + static_cast<std::size_t>(ci) * h * wd;
            S* wk = gw + (static_cast<std::size_t>(co) * c_in + ci) * 9;
            for (int ky = 0; ky < 3; ++ky)
                for (int kx = 0; kx < 3; ++kx) {
                    S acc = 0;
                    const int oy0 = (ky == 0) ? 1 : 0, oy1 = (ky == 2) ? h - 1 : h;
                    const int ox0 = (kx == 0) ? 1 : 0, ox1 = (kx == 2) ? wd - 1 : wd;
                    for (int oy = oy0; oy < oy1; ++oy) {
                        const S* gyr = gych + static_cast<std::size_t>(oy) * wd;
                        const S* xr = xch + static_cast<std::size_t>(oy + ky - 1) * wd + (kx - 1);
                        for (int ox = ox0; ox < ox1; ++ox) acc += gyr[ox] * xr[ox];
                    }
                    wk[ky * 3 + kx] += acc;
                }
        }
        if (gb) {
            S acc = 0;
            for (int i = 0; i < h * wd; ++i) acc += gych[i];
            gb[co] += acc;
        }
    }
}

inline int max_threads() {
#ifdef _OPENMP
    return omp_get_max_threads();
#else
    return 1;
#endif
}

}  // namespace pmil::kernels
