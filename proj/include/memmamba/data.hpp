#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "memmamba/tensor.hpp"

// Image-folder ingestion, preprocessing, deterministic batching, and the
// synthetic defect-image generator used for desk-scale verification.

namespace memmamba {

enum class Split { train, test };

inline const char* split_name(Split s) { return s == Split::train ? "train" : "test"; }

struct SampleRef {
    std::string path;  // relative to the dataset root
    std::int64_t class_index = 0;
    Split split = Split::train;
};

struct DatasetManifest {
    std::string root;
    std::vector<std::string> class_names;
    std::vector<SampleRef> samples;
    std::uint64_t checksum = 0;

    std::int64_t count(Split s) const {
        std::int64_t n = 0;
        for (const auto& smp : samples) n += (smp.split == s) ? 1 : 0;
        return n;
    }

    std::vector<std::int64_t> indices(Split s) const {
        std::vector<std::int64_t> out;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            if (samples[i].split == s) out.push_back(static_cast<std::int64_t>(i));
        }
        return out;
    }
};

// Scans root/{train,test}/<class>/*.{png,jpg,jpeg,bmp}. Classes are sorted
// lexicographically; the same class set must appear under both splits and no
// class directory may be empty. Also persists the manifest as structured text
// next to the root (root/manifest.json).
DatasetManifest scan_folder(const std::string& root);

// decode -> bilinear resize -> [0,1] -> (x - 0.5) / 0.5, channels-last RGB.
// Grayscale inputs are replicated to three channels by the decoder.
Tensor<float> preprocess(const std::string& path, std::int64_t image_size);

struct SynthSpec {
    std::int64_t num_classes = 4;  // clean, scratch, blob, crack
    std::int64_t images_per_class = 32;
    std::int64_t image_size = 64;
    std::uint64_t seed = 1;
};

// Writes a deterministic synthetic defect dataset (PNG, 80/20 train/test per
// class) under out_dir and returns its manifest.
DatasetManifest synth_generate(const SynthSpec& spec, const std::string& out_dir);

struct Batch {
    Tensor<float> images;  // [B, S, S, 3]
    std::vector<std::int64_t> labels;
};

// Caches preprocessed samples and serves deterministic batches: the shuffle
// order is a pure function of (seed, epoch); the test split is never
// shuffled; the final partial batch is retained.
class BatchLoader {
public:
    BatchLoader(const DatasetManifest& manifest, Split split, std::int64_t image_size);

    std::int64_t size() const { return static_cast<std::int64_t>(local_.size()); }

    // Sample order for one epoch (indices into this loader's split).
    std::vector<std::int64_t> epoch_order(std::uint64_t seed, std::int64_t epoch) const;

    // Cuts an epoch order into consecutive batches of batch_size.
    static std::vector<std::vector<std::int64_t>> plan(const std::vector<std::int64_t>& order,
                                                       std::int64_t batch_size);

    Batch fetch(const std::vector<std::int64_t>& indices);

    std::int64_t label_of(std::int64_t index) const {
        return local_[static_cast<std::size_t>(index)].second;
    }

private:
    std::vector<std::pair<std::string, std::int64_t>> local_;  // (abs path, label)
    std::int64_t image_size_;
    Split split_;
    std::map<std::int64_t, Tensor<float>> cache_;
};

}  // namespace memmamba
