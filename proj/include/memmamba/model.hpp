#pragma once

#include <optional>
#include <string>
#include <vector>

#include "memmamba/fusion.hpp"
#include "memmamba/memory.hpp"
#include "memmamba/scan.hpp"

// The MemoryMamba backbone: patch embedding, stages of Mem-SSM blocks with
// patch-merging downsampling between stages, and an MLP classifier head.

namespace memmamba {

// Ablation switches (the w/o CMN / w/o FMN / w/o Fusion variants). Disabling
// a memory net removes its bank, its query MLP and its loss term; disabling
// fusion routes Z straight past the fusion module.
struct VariantFlags {
    bool use_cmn = true;
    bool use_fmn = true;
    bool use_fusion = true;
};

struct ModelConfig {
    std::int64_t image_size = 64;
    std::int64_t in_channels = 3;
    std::int64_t num_classes = 4;
    std::vector<std::int64_t> stage_depths{2, 2};
    std::vector<std::int64_t> stage_dims{48, 96};
    std::int64_t state_dim = 8;
    std::int64_t mem_coarse_size = 4;
    std::int64_t mem_fine_size = 16;
    SimilarityKind similarity = SimilarityKind::cosine;
    std::int64_t head_hidden = 128;
    bool post_linear = true;  // apply Eq-style linear after the residual sum

    std::int64_t num_stages() const { return static_cast<std::int64_t>(stage_depths.size()); }

    void validate() const {
        if (stage_depths.empty() || stage_depths.size() != stage_dims.size()) {
            throw ConfigError("stage_depths and stage_dims must be non-empty and equally long");
        }
        for (std::size_t i = 0; i + 1 < stage_dims.size(); ++i) {
            if (stage_dims[i + 1] <= stage_dims[i]) {
                throw ConfigError("stage_dims must be strictly increasing");
            }
        }
        for (auto d : stage_depths) {
            if (d < 1) throw ConfigError("stage depths must be >= 1");
        }
        for (auto d : stage_dims) {
            if (d < 1) throw ConfigError("stage dims must be >= 1");
        }
        std::int64_t divisor = 4;
        for (std::int64_t s = 1; s < num_stages(); ++s) divisor *= 2;
        if (image_size < divisor || image_size % divisor != 0) {
            throw ConfigError("image_size " + std::to_string(image_size) +
                              " must be divisible by " + std::to_string(divisor));
        }
        if (in_channels < 1 || num_classes < 2 || state_dim < 1 || head_hidden < 1 ||
            mem_coarse_size < 1 || mem_fine_size < 1) {
            throw ConfigError("model dimensions must be positive (and num_classes >= 2)");
        }
    }
};

template <typename T>
struct MemSsmBlock {
    Linear<T> linear_in;
    std::optional<QueryHead<T>> query;
    std::optional<MemoryBank<T>> mem_coarse;
    std::optional<MemoryBank<T>> mem_fine;
    std::optional<Mlp2<T>> nce_proj;  // projects aggregated fine memory for the NCE loss
    ScanParams<T> scan;
    LayerNormParams<T> norm;
    std::optional<Linear<T>> linear_out;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        linear_in.visit(prefix + ".linear_in", f);
        if (query) query->visit(prefix + ".query", f);
        if (mem_coarse) mem_coarse->visit(prefix + ".mem_coarse", f);
        if (mem_fine) mem_fine->visit(prefix + ".mem_fine", f);
        if (nce_proj) nce_proj->visit(prefix + ".nce_proj", f);
        scan.visit(prefix + ".scan", f);
        norm.visit(prefix + ".norm", f);
        if (linear_out) linear_out->visit(prefix + ".linear_out", f);
    }
};

// Per-block products kept for the loss terms: the coarse query vector, the
// spatially pooled intermediate features and the aggregated fine memory.
template <typename T>
struct BlockAux {
    Tensor<T> h_c;
    Tensor<T> pooled_z;
    Tensor<T> m_bar_f;
};

template <typename T>
struct ForwardOutputs {
    Tensor<T> logits;  // [B, K]
    Tensor<T> probs;   // [B, K]
    std::vector<BlockAux<T>> aux;
};

template <typename T>
class Model {
public:
    ModelConfig config;
    VariantFlags flags;

    Conv2dParams<T> patch_conv;  // 4x4 stride-4
    LayerNormParams<T> patch_norm;
    std::vector<MemSsmBlock<T>> blocks;
    struct Downsample {
        Linear<T> linear;  // 4C -> C'
        LayerNormParams<T> norm;
    };
    std::vector<Downsample> downsamples;
    Mlp2<T> head;

    static Model init(const ModelConfig& cfg, const VariantFlags& flags, std::uint64_t seed) {
        cfg.validate();
        Model m;
        m.config = cfg;
        m.flags = flags;
        Rng rng(Rng::mix(seed, 0x6d6f64656cULL));
        m.patch_conv = Conv2dParams<T>::init(4, 4, cfg.in_channels, cfg.stage_dims[0], rng);
        m.patch_norm = LayerNormParams<T>::init(cfg.stage_dims[0]);
        for (std::int64_t s = 0; s < cfg.num_stages(); ++s) {
            const std::int64_t C = cfg.stage_dims[static_cast<std::size_t>(s)];
            for (std::int64_t d = 0; d < cfg.stage_depths[static_cast<std::size_t>(s)]; ++d) {
                MemSsmBlock<T> blk;
                blk.linear_in = Linear<T>::init(C, C, rng);
                if (flags.use_cmn || flags.use_fmn) {
                    blk.query = QueryHead<T>::init(
                        C,
                        flags.use_cmn ? std::optional<std::int64_t>(cfg.mem_coarse_size)
                                      : std::nullopt,
                        flags.use_fmn ? std::optional<std::int64_t>(cfg.mem_fine_size)
                                      : std::nullopt,
                        rng);
                }
                if (flags.use_cmn) {
                    blk.mem_coarse = MemoryBank<T>::init(cfg.mem_coarse_size, C, rng);
                }
                if (flags.use_fmn) {
                    blk.mem_fine = MemoryBank<T>::init(cfg.mem_fine_size, C, rng);
                    blk.nce_proj = Mlp2<T>::init(C, C, C, rng);
                }
                blk.scan = ScanParams<T>::init(C, cfg.state_dim, rng);
                blk.norm = LayerNormParams<T>::init(C);
                if (cfg.post_linear) blk.linear_out = Linear<T>::init(C, C, rng);
                m.blocks.push_back(std::move(blk));
            }
            if (s + 1 < cfg.num_stages()) {
                Downsample ds;
                ds.linear = Linear<T>::init(4 * C, cfg.stage_dims[static_cast<std::size_t>(s + 1)], rng);
                ds.norm = LayerNormParams<T>::init(cfg.stage_dims[static_cast<std::size_t>(s + 1)]);
                m.downsamples.push_back(std::move(ds));
            }
        }
        m.head = Mlp2<T>::init(cfg.stage_dims.back(), cfg.head_hidden, cfg.num_classes, rng);
        return m;
    }

    // 4x4 stride-4 convolution followed by layernorm.
    Tensor<T> patch_embed(const Tensor<T>& images) const {
        if (images.rank() != 4 || images.dim(3) != config.in_channels) {
            throw ConfigError("patch_embed expects [B,H,W," +
                              std::to_string(config.in_channels) + "], got " +
                              shape_str(images.shape()));
        }
        if (images.dim(1) % 4 != 0 || images.dim(2) % 4 != 0) {
            throw ConfigError("patch_embed requires spatial extents divisible by 4, got " +
                              shape_str(images.shape()));
        }
        return patch_norm(patch_conv(images, 4, 0));
    }

    // 2x2 patch merging, linear projection to the next width, layernorm.
    Tensor<T> downsample(const Tensor<T>& x, std::int64_t stage) const {
        const auto& ds = downsamples[static_cast<std::size_t>(stage)];
        return ds.norm(ds.linear(ops::patch_merge(x)));
    }

    Tensor<T> block_forward(const MemSsmBlock<T>& blk, const Tensor<T>& f_prev,
                            BlockAux<T>* aux) const {
        auto z = blk.linear_in(f_prev);
        Tensor<T> m_bar_c, m_bar_f;
        if (blk.query) {
            auto enc = memory_encode(z, *blk.query, blk.mem_coarse ? &*blk.mem_coarse : nullptr,
                                     blk.mem_fine ? &*blk.mem_fine : nullptr);
            m_bar_c = enc.m_bar_c;
            m_bar_f = enc.m_bar_f;
            if (aux) {
                aux->h_c = enc.h_c;
                aux->m_bar_f = enc.m_bar_f;
                if (blk.mem_fine) aux->pooled_z = ops::global_avg_pool(z);
            }
        }
        auto f_bar = flags.use_fusion ? fuse(m_bar_c, m_bar_f, z, config.similarity) : z;
        auto s = ss2d(f_bar, blk.scan);
        auto n = blk.norm(s);
        auto res = ops::add(f_prev, n);
        return blk.linear_out ? (*blk.linear_out)(res) : res;
    }

    ForwardOutputs<T> forward(const Tensor<T>& images) const {
        if (images.rank() != 4 || images.dim(1) != config.image_size ||
            images.dim(2) != config.image_size || images.dim(3) != config.in_channels) {
            throw ConfigError("forward expects [B," + std::to_string(config.image_size) + "," +
                              std::to_string(config.image_size) + "," +
                              std::to_string(config.in_channels) + "], got " +
                              shape_str(images.shape()));
        }
        ForwardOutputs<T> out;
        auto x = patch_embed(images);
        std::size_t bi = 0;
        for (std::int64_t s = 0; s < config.num_stages(); ++s) {
            for (std::int64_t d = 0; d < config.stage_depths[static_cast<std::size_t>(s)]; ++d) {
                BlockAux<T> aux;
                x = block_forward(blocks[bi], x, &aux);
                out.aux.push_back(std::move(aux));
                ++bi;
            }
            if (s + 1 < config.num_stages()) x = downsample(x, s);
        }
        out.logits = head(ops::global_avg_pool(x));
        out.probs = ops::softmax(out.logits, 1);
        return out;
    }

    template <typename F>
    void visit_params(F&& f) {
        patch_conv.visit("patch_embed.conv", f);
        patch_norm.visit("patch_embed.norm", f);
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            blocks[i].visit("block" + std::to_string(i), f);
        }
        for (std::size_t s = 0; s < downsamples.size(); ++s) {
            downsamples[s].linear.visit("downsample" + std::to_string(s) + ".linear", f);
            downsamples[s].norm.visit("downsample" + std::to_string(s) + ".norm", f);
        }
        head.visit("head", f);
    }

    std::vector<std::pair<std::string, Tensor<T>*>> parameters() {
        std::vector<std::pair<std::string, Tensor<T>*>> out;
        visit_params([&](const std::string& name, Tensor<T>& t) { out.push_back({name, &t}); });
        return out;
    }

    std::int64_t num_parameters() {
        std::int64_t n = 0;
        visit_params([&](const std::string&, Tensor<T>& t) { n += t.numel(); });
        return n;
    }
};

}  // namespace memmamba
