#pragma once

#include <optional>
#include <string>

#include "memmamba/params.hpp"

// Coarse- and fine-grained memory networks: a learnable slot bank queried by
// per-sample vectors, with softmax attention over slots and weighted
// aggregation of the slot rows.

namespace memmamba {

template <typename T>
struct MemoryBank {
    Tensor<T> slots;  // [n_slots, d_slot]

    static MemoryBank init(std::int64_t n_slots, std::int64_t d_slot, Rng& rng) {
        MemoryBank b;
        b.slots = Tensor<T>::randn({n_slots, d_slot}, rng,
                                   1.0 / std::sqrt(static_cast<double>(d_slot)));
        return b;
    }

    std::int64_t n_slots() const { return slots.dim(0); }
    std::int64_t d_slot() const { return slots.dim(1); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".slots", slots);
    }
};

// Produces the per-sample query vectors: a 3x3 convolution over the
// intermediate features, spatial average pooling, then one MLP per bank.
// Either MLP may be absent when the corresponding memory net is ablated.
template <typename T>
struct QueryHead {
    Conv2dParams<T> conv;  // 3x3, C -> C
    std::optional<Mlp2<T>> mlp_c;
    std::optional<Mlp2<T>> mlp_f;

    static QueryHead init(std::int64_t channels, std::optional<std::int64_t> coarse_size,
                          std::optional<std::int64_t> fine_size, Rng& rng) {
        QueryHead h;
        h.conv = Conv2dParams<T>::init(3, 3, channels, channels, rng);
        if (coarse_size) h.mlp_c = Mlp2<T>::init(channels, channels, *coarse_size, rng);
        if (fine_size) h.mlp_f = Mlp2<T>::init(channels, channels, *fine_size, rng);
        return h;
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        conv.visit(prefix + ".conv", f);
        if (mlp_c) mlp_c->visit(prefix + ".mlp_c", f);
        if (mlp_f) mlp_f->visit(prefix + ".mlp_f", f);
    }
};

template <typename T>
struct QueryVectors {
    Tensor<T> h_c;  // [B, c], undefined when the coarse net is absent
    Tensor<T> h_f;  // [B, f], undefined when the fine net is absent
};

template <typename T>
QueryVectors<T> encode_queries(const Tensor<T>& Z, const QueryHead<T>& head) {
    if (Z.rank() != 4) {
        throw ShapeError("encode_queries expects [B,H,W,C], got " + shape_str(Z.shape()));
    }
    if (head.conv.weight.dim(2) != Z.dim(3)) {
        throw ConfigError("query head built for width " +
                          std::to_string(head.conv.weight.dim(2)) + " applied to " +
                          shape_str(Z.shape()));
    }
    auto f_tilde = head.conv(Z, 1, 1);
    auto pooled = ops::global_avg_pool(f_tilde);
    QueryVectors<T> q;
    if (head.mlp_c) q.h_c = (*head.mlp_c)(pooled);
    if (head.mlp_f) q.h_f = (*head.mlp_f)(pooled);
    return q;
}

// Softmax over slot scores, one row per sample.
template <typename T>
Tensor<T> attention(const Tensor<T>& h) {
    if (h.rank() != 2) {
        throw ShapeError("attention expects [B,n], got " + shape_str(h.shape()));
    }
    return ops::softmax(h, 1);
}

// M_bar[b] = sum_j alpha[b,j] * slots[j]
template <typename T>
Tensor<T> aggregate(const Tensor<T>& alpha, const MemoryBank<T>& bank) {
    if (alpha.rank() != 2 || alpha.dim(1) != bank.n_slots()) {
        throw ConfigError("attention width " + shape_str(alpha.shape()) +
                          " does not match bank with " + std::to_string(bank.n_slots()) +
                          " slots");
    }
    return ops::matmul(alpha, bank.slots);
}

template <typename T>
struct MemoryEncoding {
    Tensor<T> m_bar_c;  // [B, d_slot]
    Tensor<T> m_bar_f;
    Tensor<T> h_c;  // raw query vectors, kept for the loss terms
    Tensor<T> h_f;
};

// Full per-block memory path: queries -> attention -> aggregation, for
// whichever banks exist.
template <typename T>
MemoryEncoding<T> memory_encode(const Tensor<T>& Z, const QueryHead<T>& head,
                                const MemoryBank<T>* bank_c, const MemoryBank<T>* bank_f) {
    auto q = encode_queries(Z, head);
    MemoryEncoding<T> enc;
    enc.h_c = q.h_c;
    enc.h_f = q.h_f;
    if (bank_c) {
        if (!q.h_c.defined()) throw ConfigError("coarse bank present but query head lacks mlp_c");
        enc.m_bar_c = aggregate(attention(q.h_c), *bank_c);
    }
    if (bank_f) {
        if (!q.h_f.defined()) throw ConfigError("fine bank present but query head lacks mlp_f");
        enc.m_bar_f = aggregate(attention(q.h_f), *bank_f);
    }
    return enc;
}

}  // namespace memmamba
