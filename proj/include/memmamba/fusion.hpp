#pragma once

#include <string>
#include <tuple>

#include "memmamba/ops.hpp"

// Similarity-gated fusion of the aggregated memory vectors with the
// intermediate feature map: each memory vector is scaled by its similarity to
// the pooled features and broadcast-added over all spatial positions.

namespace memmamba {

// Distances are negated so that larger always means more similar.
enum class SimilarityKind { cosine, neg_l1, neg_l2 };

inline SimilarityKind parse_similarity(const std::string& name) {
    if (name == "cosine") return SimilarityKind::cosine;
    if (name == "l1") return SimilarityKind::neg_l1;
    if (name == "l2") return SimilarityKind::neg_l2;
    throw ConfigError("unknown similarity kind \"" + name + "\" (expected cosine, l1 or l2)");
}

inline std::string similarity_name(SimilarityKind kind) {
    switch (kind) {
        case SimilarityKind::cosine: return "cosine";
        case SimilarityKind::neg_l1: return "l1";
        case SimilarityKind::neg_l2: return "l2";
    }
    return "?";
}

// Aligns the fusion inputs: the feature map is spatially pooled; the memory
// vectors are already pooled by aggregation and pass through unchanged.
template <typename T>
std::tuple<Tensor<T>, Tensor<T>, Tensor<T>> pool_inputs(const Tensor<T>& m_bar_c,
                                                        const Tensor<T>& m_bar_f,
                                                        const Tensor<T>& Z) {
    if (Z.rank() != 4) {
        throw ShapeError("pool_inputs expects Z of shape [B,H,W,C], got " + shape_str(Z.shape()));
    }
    const std::int64_t C = Z.dim(3);
    for (const Tensor<T>* m : {&m_bar_c, &m_bar_f}) {
        if (m->defined() && (m->rank() != 2 || m->dim(1) != C)) {
            throw ConfigError("memory vector " + shape_str(m->shape()) +
                              " does not match feature width " + std::to_string(C));
        }
    }
    return {m_bar_c, m_bar_f, ops::global_avg_pool(Z)};
}

// Per-sample similarity between a memory vector and the pooled features.
template <typename T>
Tensor<T> gate(const Tensor<T>& v, const Tensor<T>& z, SimilarityKind kind) {
    if (v.rank() != 2 || v.shape() != z.shape()) {
        throw ShapeError("gate expects matching [B,C] inputs, got " + shape_str(v.shape()) +
                         " and " + shape_str(z.shape()));
    }
    const std::int64_t B = v.dim(0), C = v.dim(1);
    switch (kind) {
        case SimilarityKind::cosine: {
            auto row_norm_check = [&](const Tensor<T>& t, const char* which) {
                auto vals = t.values();
                for (std::int64_t b = 0; b < B; ++b) {
                    T s = T(0);
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T x = vals[static_cast<std::size_t>(b * C + c)];
                        s += x * x;
                    }
                    if (s == T(0)) {
                        throw NumericError(std::string("cosine gate: zero-norm ") + which +
                                           " row " + std::to_string(b));
                    }
                }
            };
            row_norm_check(v, "memory vector");
            row_norm_check(z, "feature vector");
            auto dot = ops::reduce_sum(ops::mul(v, z), 1);
            auto nv = ops::sqrt(ops::reduce_sum(ops::mul(v, v), 1));
            auto nz = ops::sqrt(ops::reduce_sum(ops::mul(z, z), 1));
            return ops::divide(dot, ops::mul(nv, nz));
        }
        case SimilarityKind::neg_l1:
            return ops::neg(ops::reduce_sum(ops::abs(ops::sub(v, z)), 1));
        case SimilarityKind::neg_l2: {
            auto d = ops::sub(v, z);
            return ops::neg(ops::sqrt(ops::reduce_sum(ops::mul(d, d), 1)));
        }
    }
    throw ContractError("unreachable similarity kind");
}

namespace detail {

template <typename T>
bool all_zero(const Tensor<T>& t) {
    for (auto v : t.values()) {
        if (v != T(0)) return false;
    }
    return true;
}

}  // namespace detail

// F_bar[b,h,w,:] = Z[b,h,w,:] + beta_c[b]*v_c[b,:] + beta_f[b]*v_f[b,:].
// Undefined memory inputs drop their term (ablation variants). An exactly
// zero memory vector also drops its term: beta*0 is 0 for every gate kind,
// including cosine where the gate itself would be undefined.
template <typename T>
Tensor<T> fuse(const Tensor<T>& m_bar_c, const Tensor<T>& m_bar_f, const Tensor<T>& Z,
               SimilarityKind kind) {
    auto [v_c, v_f, z] = pool_inputs(m_bar_c, m_bar_f, Z);
    const std::int64_t B = Z.dim(0), C = Z.dim(3);
    Tensor<T> out = Z;
    for (const Tensor<T>* v : {&v_c, &v_f}) {
        if (!v->defined() || detail::all_zero(*v)) continue;
        auto beta = gate(*v, z, kind);
        auto w = ops::mul(ops::reshape(beta, {B, 1}), *v);
        out = ops::add(out, ops::reshape(w, {B, 1, 1, C}));
    }
    return out;
}

}  // namespace memmamba
