#pragma once

#include "voxdiff/tensor.hpp"

namespace voxdiff {

// ---------------------------------------------------------------------------
// conv2d: x [B, H, W, Cin] * w [KH, KW, Cin, Cout] + b [Cout] -> [B, Ho, Wo, Cout]
//
// im2col + GEMM. The column buffer is rebuilt in backward instead of saved;
// at these sizes the copy is cheaper than holding it.

namespace detail {

inline void im2col_2d(const Scalar* x, int64_t H, int64_t W, int64_t C, int64_t KH, int64_t KW,
                      int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, Scalar* col) {
    for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
            Scalar* crow = col + (oy * Wo + ox) * KH * KW * C;
            for (int64_t ky = 0; ky < KH; ++ky) {
                const int64_t iy = oy * stride + ky - pad;
                for (int64_t kx = 0; kx < KW; ++kx) {
                    const int64_t ix = ox * stride + kx - pad;
                    Scalar* dst = crow + (ky * KW + kx) * C;
                    if (iy >= 0 && iy < H && ix >= 0 && ix < W)
                        std::memcpy(dst, x + (iy * W + ix) * C, static_cast<size_t>(C) * sizeof(Scalar));
                    else
                        std::memset(dst, 0, static_cast<size_t>(C) * sizeof(Scalar));
                }
            }
        }
}

inline void col2im_2d(const Scalar* col, int64_t H, int64_t W, int64_t C, int64_t KH, int64_t KW,
                      int64_t stride, int64_t pad, int64_t Ho, int64_t Wo, Scalar* gx) {
    for (int64_t oy = 0; oy < Ho; ++oy)
        for (int64_t ox = 0; ox < Wo; ++ox) {
            const Scalar* crow = col + (oy * Wo + ox) * KH * KW * C;
            for (int64_t ky = 0; ky < KH; ++ky) {
                const int64_t iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= H) continue;
                for (int64_t kx = 0; kx < KW; ++kx) {
                    const int64_t ix = ox * stride + kx - pad;
                    if (ix < 0 || ix >= W) continue;
                    const Scalar* src = crow + (ky * KW + kx) * C;
                    Scalar* dst = gx + (iy * W + ix) * C;
                    for (int64_t c = 0; c < C; ++c) dst[c] += src[c];
                }
            }
        }
}

}  // namespace detail

inline Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
                     int64_t pad) {
    if (x.rank() != 4) throw ShapeError("conv2d: input must be [B, H, W, C], got " + format_shape(x.shape()));
    if (w.rank() != 4) throw ShapeError("conv2d: weight must be [KH, KW, Cin, Cout], got " + format_shape(w.shape()));
    const int64_t B = x.extent(0), H = x.extent(1), W = x.extent(2), C = x.extent(3);
    const int64_t KH = w.extent(0), KW = w.extent(1), Cin = w.extent(2), Cout = w.extent(3);
    if (C != Cin)
        throw ShapeError("conv2d: channel mismatch, " + format_shape(x.shape()) + " vs " +
                         format_shape(w.shape()));
    if (b.numel() != Cout) throw ShapeError("conv2d: bias " + format_shape(b.shape()));
    const int64_t Ho = (H + 2 * pad - KH) / stride + 1;
    const int64_t Wo = (W + 2 * pad - KW) / stride + 1;
    const int64_t K = KH * KW * C;
    Tensor out = Tensor::zeros({B, Ho, Wo, Cout});
    std::vector<Scalar> col(static_cast<size_t>(Ho * Wo * K));
    const Scalar* px = x.data();
    const Scalar* pw = w.data();
    const Scalar* pb = b.data();
    Scalar* po = out.data();
    for (int64_t n = 0; n < B; ++n) {
        detail::im2col_2d(px + n * H * W * C, H, W, C, KH, KW, stride, pad, Ho, Wo, col.data());
        Scalar* obase = po + n * Ho * Wo * Cout;
        detail::gemm_nn(col.data(), pw, obase, Ho * Wo, K, Cout);
        for (int64_t r = 0; r < Ho * Wo; ++r)
            for (int64_t c = 0; c < Cout; ++c) obase[r * Cout + c] += pb[c];
    }
    detail::check_finite(out, "conv2d");
    detail::attach(out, {x, w, b}, [xi = x.impl(), wi = w.impl(), bi = b.impl(),
                                    oi = out.impl().get(), B, H, W, C, KH, KW, Cout, Ho, Wo, stride,
                                    pad]() {
        const int64_t K = KH * KW * C;
        const Scalar* g = oi->grad.data();
        if (xi->needs_grad) xi->ensure_grad();
        if (wi->needs_grad) wi->ensure_grad();
        if (bi->needs_grad) bi->ensure_grad();
        std::vector<Scalar> col(static_cast<size_t>(Ho * Wo * K));
        std::vector<Scalar> dcol(static_cast<size_t>(Ho * Wo * K));
        for (int64_t n = 0; n < B; ++n) {
            const Scalar* gbase = g + n * Ho * Wo * Cout;
            if (wi->needs_grad || xi->needs_grad)
                detail::im2col_2d(xi->data.data() + n * H * W * C, H, W, C, KH, KW, stride, pad, Ho,
                                  Wo, col.data());
            if (wi->needs_grad)
                detail::gemm_tn(col.data(), gbase, wi->grad.data(), Ho * Wo, K, Cout);
            if (bi->needs_grad)
                for (int64_t r = 0; r < Ho * Wo; ++r)
                    for (int64_t c = 0; c < Cout; ++c) bi->grad[static_cast<size_t>(c)] += gbase[r * Cout + c];
            if (xi->needs_grad) {
                std::fill(dcol.begin(), dcol.end(), 0.0);
                detail::gemm_nt(gbase, wi->data.data(), dcol.data(), Ho * Wo, Cout, K);
                detail::col2im_2d(dcol.data(), H, W, C, KH, KW, stride, pad, Ho, Wo,
                                  xi->grad.data() + n * H * W * C);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// conv3d: x [B, X, Y, Z, Cin] * w [KX, KY, KZ, Cin, Cout] + b -> [B, Xo, Yo, Zo, Cout]

namespace detail {

inline void im2col_3d(const Scalar* x, int64_t X, int64_t Y, int64_t Z, int64_t C, int64_t K3,
                      int64_t stride, int64_t pad, int64_t Xo, int64_t Yo, int64_t Zo,
                      Scalar* col, bool scatter_back, Scalar* gx) {
    const int64_t patch = K3 * K3 * K3 * C;
    for (int64_t oxi = 0; oxi < Xo; ++oxi)
        for (int64_t oyi = 0; oyi < Yo; ++oyi)
            for (int64_t ozi = 0; ozi < Zo; ++ozi) {
                Scalar* crow = col + ((oxi * Yo + oyi) * Zo + ozi) * patch;
                int64_t slot = 0;
                for (int64_t kx = 0; kx < K3; ++kx) {
                    const int64_t ix = oxi * stride + kx - pad;
                    for (int64_t ky = 0; ky < K3; ++ky) {
                        const int64_t iy = oyi * stride + ky - pad;
                        for (int64_t kz = 0; kz < K3; ++kz, ++slot) {
                            const int64_t iz = ozi * stride + kz - pad;
                            Scalar* dst = crow + slot * C;
                            const bool in = ix >= 0 && ix < X && iy >= 0 && iy < Y && iz >= 0 && iz < Z;
                            if (!scatter_back) {
                                if (in)
                                    std::memcpy(dst, x + (((ix * Y) + iy) * Z + iz) * C,
                                                static_cast<size_t>(C) * sizeof(Scalar));
                                else
                                    std::memset(dst, 0, static_cast<size_t>(C) * sizeof(Scalar));
                            } else if (in) {
                                Scalar* gdst = gx + (((ix * Y) + iy) * Z + iz) * C;
                                for (int64_t c = 0; c < C; ++c) gdst[c] += dst[c];
                            }
                        }
                    }
                }
            }
}

}  // namespace detail

inline Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, int64_t stride,
                     int64_t pad) {
    if (x.rank() != 5) throw ShapeError("conv3d: input must be [B, X, Y, Z, C], got " + format_shape(x.shape()));
    if (w.rank() != 5) throw ShapeError("conv3d: weight must be [K, K, K, Cin, Cout], got " + format_shape(w.shape()));
    const int64_t B = x.extent(0), X = x.extent(1), Y = x.extent(2), Z = x.extent(3), C = x.extent(4);
    const int64_t K3 = w.extent(0), Cin = w.extent(3), Cout = w.extent(4);
    if (w.extent(1) != K3 || w.extent(2) != K3) throw ShapeError("conv3d: kernel must be cubic");
    if (C != Cin)
        throw ShapeError("conv3d: channel mismatch, " + format_shape(x.shape()) + " vs " +
                         format_shape(w.shape()));
    if (b.numel() != Cout) throw ShapeError("conv3d: bias " + format_shape(b.shape()));
    const int64_t Xo = (X + 2 * pad - K3) / stride + 1;
    const int64_t Yo = (Y + 2 * pad - K3) / stride + 1;
    const int64_t Zo = (Z + 2 * pad - K3) / stride + 1;
    const int64_t K = K3 * K3 * K3 * C;
    const int64_t rows = Xo * Yo * Zo;
    Tensor out = Tensor::zeros({B, Xo, Yo, Zo, Cout});
    std::vector<Scalar> col(static_cast<size_t>(rows * K));
    const Scalar* px = x.data();
    Scalar* po = out.data();
    for (int64_t n = 0; n < B; ++n) {
        detail::im2col_3d(px + n * X * Y * Z * C, X, Y, Z, C, K3, stride, pad, Xo, Yo, Zo,
                          col.data(), false, nullptr);
        Scalar* obase = po + n * rows * Cout;
        detail::gemm_nn(col.data(), w.data(), obase, rows, K, Cout);
        for (int64_t r = 0; r < rows; ++r)
            for (int64_t c = 0; c < Cout; ++c) obase[r * Cout + c] += b.data()[c];
    }
    detail::check_finite(out, "conv3d");
    detail::attach(out, {x, w, b}, [xi = x.impl(), wi = w.impl(), bi = b.impl(),
                                    oi = out.impl().get(), B, X, Y, Z, C, K3, Cout, Xo, Yo, Zo,
                                    stride, pad]() {
        const int64_t K = K3 * K3 * K3 * C;
        const int64_t rows = Xo * Yo * Zo;
        const Scalar* g = oi->grad.data();
        if (xi->needs_grad) xi->ensure_grad();
        if (wi->needs_grad) wi->ensure_grad();
        if (bi->needs_grad) bi->ensure_grad();
        std::vector<Scalar> col(static_cast<size_t>(rows * K));
        for (int64_t n = 0; n < B; ++n) {
            const Scalar* gbase = g + n * rows * Cout;
            if (wi->needs_grad) {
                detail::im2col_3d(xi->data.data() + n * X * Y * Z * C, X, Y, Z, C, K3, stride, pad,
                                  Xo, Yo, Zo, col.data(), false, nullptr);
                detail::gemm_tn(col.data(), gbase, wi->grad.data(), rows, K, Cout);
            }
            if (bi->needs_grad)
                for (int64_t r = 0; r < rows; ++r)
                    for (int64_t c = 0; c < Cout; ++c) bi->grad[static_cast<size_t>(c)] += gbase[r * Cout + c];
            if (xi->needs_grad) {
                std::fill(col.begin(), col.end(), 0.0);
                detail::gemm_nt(gbase, wi->data.data(), col.data(), rows, Cout, K);
                detail::im2col_3d(nullptr, X, Y, Z, C, K3, stride, pad, Xo, Yo, Zo, col.data(),
                                  true, xi->grad.data() + n * X * Y * Z * C);
            }
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Fused deformable sampling.
//
// values  [B, H, W, C]   projected feature map (C split into M head slices)
// locs    [Q, M, P, 2]   absolute sampling positions, feature-map pixels
// weights [Q, M, P]      per-head normalized point weights
// valid   [Q]            frustum mask; invalid queries yield zero rows
// out     [B, Q, C]
//
// Equivalent to per-point bilinear_sample + weighted sum, but without
// materializing [Q, M, P, C] intermediates. The bilinear tap arithmetic
// matches bilinear_sample term for term so degenerate configurations agree
// bitwise.
inline Tensor deform_sample(const Tensor& values, const Tensor& locs, const Tensor& weights,
                            std::shared_ptr<const std::vector<uint8_t>> valid) {
    if (values.rank() != 4) throw ShapeError("deform_sample: values must be [B, H, W, C], got " +
                                             format_shape(values.shape()));
    if (locs.rank() != 4 || locs.extent(3) != 2)
        throw ShapeError("deform_sample: locs must be [Q, M, P, 2], got " + format_shape(locs.shape()));
    const int64_t B = values.extent(0), H = values.extent(1), W = values.extent(2),
                  C = values.extent(3);
    const int64_t Q = locs.extent(0), M = locs.extent(1), P = locs.extent(2);
    if (weights.shape() != Shape{Q, M, P})
        throw ShapeError("deform_sample: weights " + format_shape(weights.shape()) + " vs locs " +
                         format_shape(locs.shape()));
    if (C % M != 0)
        throw ShapeError("deform_sample: channels " + std::to_string(C) + " not divisible by " +
                         std::to_string(M) + " heads");
    if (valid && static_cast<int64_t>(valid->size()) != Q)
        throw ShapeError("deform_sample: valid mask size mismatch");
    const int64_t dh = C / M;
    Tensor out = Tensor::zeros({B, Q, C});
    const Scalar* pv = values.data();
    const Scalar* pl = locs.data();
    const Scalar* pw = weights.data();
    Scalar* po = out.data();
    for (int64_t n = 0; n < B; ++n) {
        const Scalar* vbase = pv + n * H * W * C;
        for (int64_t q = 0; q < Q; ++q) {
            if (valid && !(*valid)[static_cast<size_t>(q)]) continue;  // row stays zero
            Scalar* orow = po + (n * Q + q) * C;
            for (int64_t m = 0; m < M; ++m) {
                const int64_t c0 = m * dh;
                for (int64_t p = 0; p < P; ++p) {
                    const int64_t lp = ((q * M + m) * P + p);
                    auto t = detail::bilinear_taps(pl[lp * 2], pl[lp * 2 + 1]);
                    const Scalar wpt = pw[lp];
                    const Scalar w00 = (1 - t.fu) * (1 - t.fv), w10 = t.fu * (1 - t.fv);
                    const Scalar w01 = (1 - t.fu) * t.fv, w11 = t.fu * t.fv;
                    const bool i00 = t.in(t.u0, t.v0, W, H), i10 = t.in(t.u0 + 1, t.v0, W, H);
                    const bool i01 = t.in(t.u0, t.v0 + 1, W, H), i11 = t.in(t.u0 + 1, t.v0 + 1, W, H);
                    const Scalar* f00 = i00 ? vbase + (t.v0 * W + t.u0) * C : nullptr;
                    const Scalar* f10 = i10 ? vbase + (t.v0 * W + t.u0 + 1) * C : nullptr;
                    const Scalar* f01 = i01 ? vbase + ((t.v0 + 1) * W + t.u0) * C : nullptr;
                    const Scalar* f11 = i11 ? vbase + ((t.v0 + 1) * W + t.u0 + 1) * C : nullptr;
                    for (int64_t c = 0; c < dh; ++c) {
                        Scalar acc = 0.0;
                        if (i00) acc += w00 * f00[c0 + c];
                        if (i10) acc += w10 * f10[c0 + c];
                        if (i01) acc += w01 * f01[c0 + c];
                        if (i11) acc += w11 * f11[c0 + c];
                        orow[c0 + c] += wpt * acc;
                    }
                }
            }
        }
    }
    detail::check_finite(out, "deform_sample");
    detail::attach(out, {values, locs, weights},
                   [vi = values.impl(), li = locs.impl(), wi = weights.impl(),
                    oi = out.impl().get(), valid, B, H, W, C, Q, M, P, dh]() {
        const Scalar* g = oi->grad.data();
        const Scalar* pv = vi->data.data();
        const Scalar* pl = li->data.data();
        const Scalar* pw = wi->data.data();
        if (vi->needs_grad) vi->ensure_grad();
        if (li->needs_grad) li->ensure_grad();
        if (wi->needs_grad) wi->ensure_grad();
        for (int64_t n = 0; n < B; ++n) {
            const Scalar* vbase = pv + n * H * W * C;
            Scalar* gv = vi->needs_grad ? vi->grad.data() + n * H * W * C : nullptr;
            for (int64_t q = 0; q < Q; ++q) {
                if (valid && !(*valid)[static_cast<size_t>(q)]) continue;
                const Scalar* grow = g + (n * Q + q) * C;
                for (int64_t m = 0; m < M; ++m) {
                    const int64_t c0 = m * dh;
                    for (int64_t p = 0; p < P; ++p) {
                        const int64_t lp = ((q * M + m) * P + p);
                        auto t = detail::bilinear_taps(pl[lp * 2], pl[lp * 2 + 1]);
                        const Scalar wpt = pw[lp];
                        const Scalar w00 = (1 - t.fu) * (1 - t.fv), w10 = t.fu * (1 - t.fv);
                        const Scalar w01 = (1 - t.fu) * t.fv, w11 = t.fu * t.fv;
                        const bool i00 = t.in(t.u0, t.v0, W, H), i10 = t.in(t.u0 + 1, t.v0, W, H);
                        const bool i01 = t.in(t.u0, t.v0 + 1, W, H),
                                   i11 = t.in(t.u0 + 1, t.v0 + 1, W, H);
                        const int64_t o00 = (t.v0 * W + t.u0) * C, o10 = (t.v0 * W + t.u0 + 1) * C;
                        const int64_t o01 = ((t.v0 + 1) * W + t.u0) * C,
                                      o11 = ((t.v0 + 1) * W + t.u0 + 1) * C;
                        Scalar dw = 0.0, du = 0.0, dv = 0.0;
                        for (int64_t c = 0; c < dh; ++c) {
                            const Scalar gc = grow[c0 + c];
                            const Scalar v00 = i00 ? vbase[o00 + c0 + c] : 0.0;
                            const Scalar v10 = i10 ? vbase[o10 + c0 + c] : 0.0;
                            const Scalar v01 = i01 ? vbase[o01 + c0 + c] : 0.0;
                            const Scalar v11 = i11 ? vbase[o11 + c0 + c] : 0.0;
                            if (gv) {
                                const Scalar gw = gc * wpt;
                                if (i00) gv[o00 + c0 + c] += gw * w00;
                                if (i10) gv[o10 + c0 + c] += gw * w10;
                                if (i01) gv[o01 + c0 + c] += gw * w01;
                                if (i11) gv[o11 + c0 + c] += gw * w11;
                            }
                            dw += gc * (w00 * v00 + w10 * v10 + w01 * v01 + w11 * v11);
                            du += gc * ((v10 - v00) * (1 - t.fv) + (v11 - v01) * t.fv);
                            dv += gc * ((v01 - v00) * (1 - t.fu) + (v11 - v10) * t.fu);
                        }
                        if (wi->needs_grad) wi->grad[static_cast<size_t>(lp)] += dw;
                        if (li->needs_grad) {
                            li->grad[static_cast<size_t>(lp * 2)] += wpt * du;
                            li->grad[static_cast<size_t>(lp * 2 + 1)] += wpt * dv;
                        }
                    }
                }
            }
        }
    });
    return out;
}

}  // namespace voxdiff
