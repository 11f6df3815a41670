#pragma once

#include <algorithm>
#include <cmath>
#include <string>
#include <vector>

#include "memmamba/model.hpp"

// The three training losses: classification cross-entropy, the contrastive
// hinge over per-class coarse queries, and the InfoNCE term tying pooled
// block features to their projected fine-memory readouts.

namespace memmamba {

// The formula as printed minimizes max(0, delta - cos), which is smallest
// when different-class queries coincide; the separating form max(0, cos -
// delta) matches the stated goal of pushing classes apart. Both ship.
enum class HingeForm { separating, as_printed };

inline HingeForm parse_hinge_form(const std::string& name) {
    if (name == "separating") return HingeForm::separating;
    if (name == "as_printed") return HingeForm::as_printed;
    throw ConfigError("unknown hinge_form \"" + name +
                      "\" (expected separating or as_printed)");
}

inline std::string hinge_form_name(HingeForm f) {
    return f == HingeForm::separating ? "separating" : "as_printed";
}

struct LossConfig {
    double lambda_c = 0.1;
    double lambda_f = 0.1;
    double delta = 0.5;
    HingeForm hinge_form = HingeForm::separating;

    void validate() const {
        if (lambda_c < 0 || lambda_f < 0) throw ConfigError("loss lambdas must be >= 0");
        if (!(delta > -1.0 && delta < 1.0)) throw ConfigError("loss delta must be in (-1, 1)");
    }
};

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, const std::vector<std::int64_t>& labels) {
    return ops::cross_entropy_logits(logits, labels);
}

// Hinge over cosine similarities of per-class mean query vectors, normalized
// by the number of ordered class pairs. Batches with fewer than two distinct
// classes contribute zero.
template <typename T>
Tensor<T> contrastive_coarse(const Tensor<T>& h_c, const std::vector<std::int64_t>& labels,
                             T delta, HingeForm form) {
    if (h_c.rank() != 2 || static_cast<std::int64_t>(labels.size()) != h_c.dim(0)) {
        throw ShapeError("contrastive_coarse expects [B,c] queries with B labels, got " +
                         shape_str(h_c.shape()) + " and " + std::to_string(labels.size()) +
                         " labels");
    }
    const std::int64_t B = h_c.dim(0);
    const std::int64_t dim = h_c.dim(1);
    std::vector<std::int64_t> present;
    for (auto y : labels) {
        if (std::find(present.begin(), present.end(), y) == present.end()) present.push_back(y);
    }
    std::sort(present.begin(), present.end());
    const auto kp = static_cast<std::int64_t>(present.size());
    if (kp < 2) return Tensor<T>::scalar(T(0));

    // constant row-averaging matrix: means = S * h_c
    Tensor<T> sel({kp, B});
    for (std::int64_t k = 0; k < kp; ++k) {
        std::int64_t count = 0;
        for (auto y : labels) count += (y == present[static_cast<std::size_t>(k)]) ? 1 : 0;
        for (std::int64_t b = 0; b < B; ++b) {
            if (labels[static_cast<std::size_t>(b)] == present[static_cast<std::size_t>(k)]) {
                sel.values()[static_cast<std::size_t>(k * B + b)] = T(1) / static_cast<T>(count);
            }
        }
    }
    auto means = ops::matmul(sel, h_c);  // [Kp, dim]
    {
        auto mv = means.values();
        for (std::int64_t k = 0; k < kp; ++k) {
            T s = T(0);
            for (std::int64_t j = 0; j < dim; ++j) {
                const T x = mv[static_cast<std::size_t>(k * dim + j)];
                s += x * x;
            }
            if (s == T(0)) {
                throw NumericError("contrastive_coarse: zero-norm query mean for class " +
                                   std::to_string(present[static_cast<std::size_t>(k)]));
            }
        }
    }
    auto norms = ops::sqrt(ops::reduce_sum(ops::mul(means, means), 1, true));
    auto unit = ops::divide(means, norms);
    auto gram = ops::matmul(unit, ops::transpose(unit, {1, 0}));  // [Kp, Kp] of cosines
    auto shifted = ops::add_scalar(gram, -delta);
    auto hinge = form == HingeForm::separating ? ops::relu(shifted)
                                               : ops::relu(ops::neg(shifted));
    Tensor<T> off_diag({kp, kp});
    for (std::int64_t i = 0; i < kp; ++i)
        for (std::int64_t j = 0; j < kp; ++j)
            off_diag.values()[static_cast<std::size_t>(i * kp + j)] = (i == j) ? T(0) : T(1);
    auto total = ops::sum_all(ops::mul(hinge, off_diag));
    return ops::scale(total, T(1) / static_cast<T>(kp * (kp - 1)));
}

// InfoNCE with in-batch negatives: for each sample the positive is its own
// projected fine-memory readout, the negatives are the other samples'.
// Similarity is the dot product; no temperature.
template <typename T>
Tensor<T> info_nce(const Tensor<T>& pooled_z, const Tensor<T>& m_bar_f,
                   const Mlp2<T>& projection) {
    if (pooled_z.rank() != 2 || m_bar_f.shape() != pooled_z.shape()) {
        throw ShapeError("info_nce expects matching [B,d] inputs, got " +
                         shape_str(pooled_z.shape()) + " and " + shape_str(m_bar_f.shape()));
    }
    const std::int64_t B = pooled_z.dim(0);
    if (B < 2) {
        throw ContractError("info_nce requires batch size >= 2 for in-batch negatives");
    }
    auto projected = projection(m_bar_f);
    auto sims = ops::matmul(pooled_z, ops::transpose(projected, {1, 0}));  // [B, B]
    std::vector<std::int64_t> diag(static_cast<std::size_t>(B));
    for (std::int64_t b = 0; b < B; ++b) diag[static_cast<std::size_t>(b)] = b;
    return ops::cross_entropy_logits(sims, diag);
}

template <typename T>
struct LossBundle {
    Tensor<T> total;
    Tensor<T> classification;
    Tensor<T> contrastive;
    Tensor<T> nce;
};

template <typename T>
Tensor<T> weighted_total(const Tensor<T>& cls, const Tensor<T>& contrastive, const Tensor<T>& nce,
                         const LossConfig& cfg) {
    auto check = [](const Tensor<T>& t, const char* name) {
        if (!std::isfinite(static_cast<double>(t.item()))) {
            throw NumericError(std::string("non-finite loss component: ") + name);
        }
    };
    check(cls, "classification");
    check(contrastive, "contrastive");
    check(nce, "nce");
    auto total = ops::add(cls, ops::add(ops::scale(contrastive, T(cfg.lambda_c)),
                                        ops::scale(nce, T(cfg.lambda_f))));
    return total;
}

// Assembles the full objective from a forward pass: per-block auxiliary
// losses are averaged over blocks before weighting.
template <typename T>
LossBundle<T> compute_losses(const Model<T>& model, const ForwardOutputs<T>& out,
                             const std::vector<std::int64_t>& labels, const LossConfig& cfg) {
    LossBundle<T> bundle;
    bundle.classification = cross_entropy(out.logits, labels);

    Tensor<T> con_sum = Tensor<T>::scalar(T(0));
    std::int64_t con_blocks = 0;
    Tensor<T> nce_sum = Tensor<T>::scalar(T(0));
    std::int64_t nce_blocks = 0;
    for (std::size_t i = 0; i < out.aux.size(); ++i) {
        const auto& aux = out.aux[i];
        if (model.flags.use_cmn && aux.h_c.defined()) {
            con_sum = ops::add(con_sum,
                               contrastive_coarse(aux.h_c, labels, T(cfg.delta), cfg.hinge_form));
            ++con_blocks;
        }
        if (model.flags.use_fmn && aux.m_bar_f.defined()) {
            nce_sum = ops::add(
                nce_sum, info_nce(aux.pooled_z, aux.m_bar_f, *model.blocks[i].nce_proj));
            ++nce_blocks;
        }
    }
    bundle.contrastive =
        con_blocks > 0 ? ops::scale(con_sum, T(1) / static_cast<T>(con_blocks)) : con_sum;
    bundle.nce = nce_blocks > 0 ? ops::scale(nce_sum, T(1) / static_cast<T>(nce_blocks)) : nce_sum;
    bundle.total = weighted_total(bundle.classification, bundle.contrastive, bundle.nce, cfg);
    return bundle;
}

}  // namespace memmamba
