#pragma once

#include <array>
#include <cmath>
#include <utility>
#include <vector>

#include "memmamba/params.hpp"

// The selective state-space scan: input-dependent 1D recurrence plus the
// four-direction 2D cross-scan/cross-merge.

namespace memmamba {

// Per-channel diagonal SSM with input-dependent discretization. A is stored
// as log(-A) so the transition stays strictly negative; Delta comes out of a
// softplus so it stays strictly positive, which together keep exp(Delta*A)
// inside (0,1).
template <typename T>
struct ScanParams {
    Tensor<T> A_log;       // [C, N]
    Tensor<T> D_skip;      // [C]
    Linear<T> proj_delta;  // C -> C
    Linear<T> proj_B;      // C -> N
    Linear<T> proj_C;      // C -> N
    std::int64_t state_dim = 0;

    static ScanParams init(std::int64_t channels, std::int64_t state_dim, Rng& rng) {
        ScanParams p;
        p.state_dim = state_dim;
        p.A_log = Tensor<T>({channels, state_dim});
        {
            auto v = p.A_log.values();
            for (std::int64_t c = 0; c < channels; ++c)
                for (std::int64_t n = 0; n < state_dim; ++n)
                    v[static_cast<std::size_t>(c * state_dim + n)] =
                        static_cast<T>(std::log(static_cast<double>(n + 1)));
        }
        p.D_skip = Tensor<T>::ones({channels});
        p.proj_delta = Linear<T>::init(channels, channels, rng);
        {
            // bias so the initial softplus(delta) lands in [1e-3, 1e-1]
            auto b = p.proj_delta.bias.values();
            for (auto& v : b) {
                const double dt = std::exp(rng.uniform(std::log(1e-3), std::log(1e-1)));
                v = static_cast<T>(std::log(std::expm1(dt)));
            }
        }
        p.proj_B = Linear<T>::init(channels, state_dim, rng);
        p.proj_C = Linear<T>::init(channels, state_dim, rng);
        return p;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".A_log", A_log);
        f(prefix + ".D", D_skip);
        proj_delta.visit(prefix + ".proj_delta", f);
        proj_B.visit(prefix + ".proj_B", f);
        proj_C.visit(prefix + ".proj_C", f);
    }
};

// Zero-order-hold discretization for diagonal A: A_bar = exp(delta*A),
// B_bar = delta*B. Plain (non-recorded) helper; the training path fuses this
// into the scan kernel. delta: [C], A: [C,N], B: [N].
template <typename T>
std::pair<Tensor<T>, Tensor<T>> discretize(const Tensor<T>& A, const Tensor<T>& B,
                                           const Tensor<T>& delta) {
    if (A.rank() != 2 || delta.rank() != 1 || A.dim(0) != delta.dim(0) || B.rank() != 1) {
        throw ShapeError("discretize expects A[C,N], B[N], delta[C]; got " +
                         shape_str(A.shape()) + ", " + shape_str(B.shape()) + ", " +
                         shape_str(delta.shape()));
    }
    for (auto d : delta.values()) {
        if (!(d > T(0))) throw ContractError("discretize requires strictly positive delta");
    }
    const std::int64_t C = A.dim(0), N = A.dim(1);
    if (B.dim(0) != N) {
        throw ShapeError("discretize B length does not match state dim of A");
    }
    Tensor<T> a_bar({C, N});
    Tensor<T> b_bar({C, N});
    auto av = A.values();
    auto dv = delta.values();
    auto bv = B.values();
    auto abv = a_bar.values();
    auto bbv = b_bar.values();
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t n = 0; n < N; ++n) {
            abv[static_cast<std::size_t>(c * N + n)] =
                dv[static_cast<std::size_t>(c)] * av[static_cast<std::size_t>(c * N + n)];
            bbv[static_cast<std::size_t>(c * N + n)] =
                dv[static_cast<std::size_t>(c)] * bv[static_cast<std::size_t>(n)];
        }
    exp_inplace(a_bar.data(), C * N);
    return {a_bar, b_bar};
}

// y_t = C_t . x_t + D*u_t with x_t = exp(Delta_t A) x_{t-1} + Delta_t B_t u_t;
// Delta/B/C are linear projections of the token. u: [L,C] or [B,L,C].
template <typename T>
Tensor<T> selective_scan_1d(const Tensor<T>& u, const ScanParams<T>& p) {
    const bool batched = u.rank() == 3;
    if (!batched && u.rank() != 2) {
        throw ShapeError("selective_scan_1d expects [L,C] or [B,L,C], got " +
                         shape_str(u.shape()));
    }
    Tensor<T> u3 = batched ? u : ops::reshape(u, {1, u.dim(0), u.dim(1)});
    const std::int64_t C = u3.dim(2);
    if (C != p.A_log.dim(0)) {
        throw ShapeError("selective_scan_1d channel width " + shape_str(u.shape()) +
                         " does not match scan params " + shape_str(p.A_log.shape()));
    }
    auto delta = ops::softplus_op(p.proj_delta(u3));
    auto Bm = p.proj_B(u3);
    auto Cm = p.proj_C(u3);
    auto A = ops::neg(ops::exp(p.A_log));
    auto y = ops::scan_core(u3, delta, Bm, Cm, A);
    y = ops::add(y, ops::mul(u3, p.D_skip));
    return batched ? y : ops::reshape(y, {u.dim(0), u.dim(1)});
}

// Token orderings for the four scan directions over an H x W grid:
// row-major forward/reverse, column-major forward/reverse.
inline std::array<std::vector<std::int64_t>, 4> cross_scan_orders(std::int64_t H,
                                                                  std::int64_t W) {
    const std::int64_t L = H * W;
    std::array<std::vector<std::int64_t>, 4> perms;
    for (auto& p : perms) p.resize(static_cast<std::size_t>(L));
    for (std::int64_t i = 0; i < L; ++i) {
        perms[0][static_cast<std::size_t>(i)] = i;
        perms[1][static_cast<std::size_t>(i)] = L - 1 - i;
        const std::int64_t h = i % H;
        const std::int64_t w = i / H;
        perms[2][static_cast<std::size_t>(i)] = h * W + w;
    }
    for (std::int64_t i = 0; i < L; ++i)
        perms[3][static_cast<std::size_t>(i)] = perms[2][static_cast<std::size_t>(L - 1 - i)];
    return perms;
}

template <typename T>
std::array<Tensor<T>, 4> cross_scan(const Tensor<T>& F) {
    if (F.rank() != 4) {
        throw ShapeError("cross_scan expects [B,H,W,C], got " + shape_str(F.shape()));
    }
    const std::int64_t B = F.dim(0), H = F.dim(1), W = F.dim(2), C = F.dim(3);
    auto flat = ops::reshape(F, {B, H * W, C});
    auto orders = cross_scan_orders(H, W);
    std::array<Tensor<T>, 4> seqs;
    for (int d = 0; d < 4; ++d) seqs[static_cast<std::size_t>(d)] = ops::permute_tokens(flat, orders[static_cast<std::size_t>(d)]);
    return seqs;
}

// Inverse-permutes each scanned sequence back to the grid and sums the four.
template <typename T>
Tensor<T> cross_merge(const std::array<Tensor<T>, 4>& ys, std::int64_t H, std::int64_t W) {
    for (const auto& y : ys) {
        if (y.shape() != ys[0].shape()) {
            throw ShapeError("cross_merge sequences disagree: " + shape_str(y.shape()) +
                             " vs " + shape_str(ys[0].shape()));
        }
    }
    if (ys[0].rank() != 3 || ys[0].dim(1) != H * W) {
        throw ShapeError("cross_merge expects [B,H*W,C] sequences, got " +
                         shape_str(ys[0].shape()));
    }
    const std::int64_t B = ys[0].dim(0), C = ys[0].dim(2);
    auto orders = cross_scan_orders(H, W);
    Tensor<T> acc;
    for (int d = 0; d < 4; ++d) {
        const auto& perm = orders[static_cast<std::size_t>(d)];
        std::vector<std::int64_t> inv(perm.size());
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(perm.size()); ++i)
            inv[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = i;
        auto unfolded = ops::permute_tokens(ys[static_cast<std::size_t>(d)], inv);
        acc = d == 0 ? unfolded : ops::add(acc, unfolded);
    }
    return ops::reshape(acc, {B, H, W, C});
}

// Eq-style 2D selective scan: scan each cross-scan ordering with one shared
// parameter set, then cross-merge.
template <typename T>
Tensor<T> ss2d(const Tensor<T>& Z, const ScanParams<T>& p) {
    const std::int64_t H = Z.dim(1), W = Z.dim(2);
    auto seqs = cross_scan(Z);
    std::array<Tensor<T>, 4> ys;
    for (int d = 0; d < 4; ++d) ys[static_cast<std::size_t>(d)] = selective_scan_1d(seqs[static_cast<std::size_t>(d)], p);
    return cross_merge(ys, H, W);
}

}  // namespace memmamba
