#pragma once

#include <cstdint>
#include <cstring>
#include <functional>
#include <istream>
#include <memory>
#include <ostream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "memmamba/errors.hpp"
#include "memmamba/rng.hpp"

namespace memmamba {

using Shape = std::vector<std::int64_t>;

enum class Dtype : std::uint8_t { f32 = 0, f64 = 1 };

template <typename T>
struct dtype_of;
template <>
struct dtype_of<float> {
    static constexpr Dtype value = Dtype::f32;
};
template <>
struct dtype_of<double> {
    static constexpr Dtype value = Dtype::f64;
};

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto e : s) n *= e;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

template <typename T>
class Tape;

// Dense row-major tensor. Value-like: copies share the underlying buffer.
// The optional tape link records where on a differentiation tape this value
// lives; a tensor without a link never accumulates gradients.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(Shape shape)
        : shape_(std::move(shape)),
          data_(std::make_shared<std::vector<T>>(static_cast<std::size_t>(shape_numel(shape_)),
                                                 T(0))) {
        check_shape();
    }

    Tensor(Shape shape, std::vector<T> values)
        : shape_(std::move(shape)), data_(std::make_shared<std::vector<T>>(std::move(values))) {
        check_shape();
        if (static_cast<std::int64_t>(data_->size()) != shape_numel(shape_)) {
            throw ShapeError("tensor data length " + std::to_string(data_->size()) +
                             " does not match shape " + shape_str(shape_));
        }
    }

    static Tensor scalar(T v) { return Tensor(Shape{}, std::vector<T>{v}); }

    static Tensor full(Shape shape, T v) {
        Tensor t(std::move(shape));
        for (auto& x : t.values()) x = v;
        return t;
    }

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor ones(Shape shape) { return full(std::move(shape), T(1)); }

    static Tensor randn(Shape shape, Rng& rng, double stddev = 1.0, double mean = 0.0) {
        Tensor t(std::move(shape));
        rng.fill_normal(t.values(), mean, stddev);
        return t;
    }

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    std::int64_t numel() const { return data_ ? static_cast<std::int64_t>(data_->size()) : 0; }
    std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
    static constexpr Dtype dtype() { return dtype_of<T>::value; }

    std::span<T> values() { return {data_->data(), data_->size()}; }
    std::span<const T> values() const { return {data_->data(), data_->size()}; }
    const T* data() const { return data_->data(); }
    T* data() { return data_->data(); }

    T item() const {
        if (numel() != 1) {
            throw ContractError("item() requires a scalar tensor, got shape " +
                                shape_str(shape_));
        }
        return (*data_)[0];
    }

    // Same buffer, no tape link.
    Tensor detached() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = data_;
        return t;
    }

    // Deep copy, no tape link.
    Tensor clone() const {
        Tensor t;
        t.shape_ = shape_;
        t.data_ = std::make_shared<std::vector<T>>(*data_);
        return t;
    }

    bool tracked() const { return tape_ != nullptr; }
    int node() const { return node_; }
    const std::shared_ptr<Tape<T>>& tape_ptr() const { return tape_; }

    void link(std::shared_ptr<Tape<T>> tape, int node) {
        tape_ = std::move(tape);
        node_ = node;
    }

    void unlink() {
        tape_.reset();
        node_ = -1;
    }

private:
    void check_shape() const {
        for (auto e : shape_) {
            if (e <= 0) throw ShapeError("non-positive extent in shape " + shape_str(shape_));
        }
    }

    Shape shape_{};
    std::shared_ptr<std::vector<T>> data_;
    std::shared_ptr<Tape<T>> tape_;
    int node_ = -1;
};

// Reverse-mode tape: an ordered list of recorded primitive applications.
// Execution order is a topological order, so replaying the records backward
// visits uses before definitions. Gradients live on the tape, keyed by value
// id; only values reachable from the backward root get a gradient.
template <typename T>
class Tape : public std::enable_shared_from_this<Tape<T>> {
public:
    static std::shared_ptr<Tape> create() { return std::shared_ptr<Tape>(new Tape()); }

    // Registers a leaf so gradients can be accumulated into the tape for it.
    void watch(Tensor<T>& t) {
        const int id = alloc_value(t.numel());
        t.link(this->shared_from_this(), id);
    }

    int alloc_value(std::int64_t numel) {
        sizes_.push_back(numel);
        return static_cast<int>(sizes_.size()) - 1;
    }

    void record(std::vector<int> input_ids, int output_id, std::function<void(Tape&)> vjp) {
        records_.push_back({std::move(input_ids), output_id, std::move(vjp)});
    }

    std::size_t num_records() const { return records_.size(); }

    void backward(const Tensor<T>& root) {
        if (!root.tracked() || root.tape_ptr().get() != this) {
            throw ContractError("backward root is not linked to this tape");
        }
        if (root.numel() != 1) {
            throw ContractError("backward requires a scalar root, got shape " +
                                shape_str(root.shape()));
        }
        if (ran_backward_) {
            throw ContractError("backward already ran on this tape");
        }
        ran_backward_ = true;

        reach_.assign(sizes_.size(), 0);
        reach_[static_cast<std::size_t>(root.node())] = 1;
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!reach_[static_cast<std::size_t>(it->output)]) continue;
            for (int in : it->inputs) {
                if (in >= 0) reach_[static_cast<std::size_t>(in)] = 1;
            }
        }
        grads_.assign(sizes_.size(), {});
        for (std::size_t i = 0; i < sizes_.size(); ++i) {
            if (reach_[i]) grads_[i].assign(static_cast<std::size_t>(sizes_[i]), T(0));
        }
        grads_[static_cast<std::size_t>(root.node())][0] = T(1);
        for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
            if (!reach_[static_cast<std::size_t>(it->output)]) continue;
            it->vjp(*this);
        }
    }

    bool has_grad(const Tensor<T>& t) const {
        if (!t.tracked() || t.tape_ptr().get() != this) return false;
        const auto id = static_cast<std::size_t>(t.node());
        return id < grads_.size() && !grads_[id].empty();
    }

    Tensor<T> grad(const Tensor<T>& t) const {
        if (!has_grad(t)) {
            throw ContractError("no gradient recorded for this tensor");
        }
        return Tensor<T>(t.shape(), grads_[static_cast<std::size_t>(t.node())]);
    }

    // --- surface for op implementations ---

    bool wants(int id) const {
        return id >= 0 && static_cast<std::size_t>(id) < reach_.size() &&
               reach_[static_cast<std::size_t>(id)] != 0;
    }

    std::span<const T> grad_span(int id) const {
        const auto& g = grads_[static_cast<std::size_t>(id)];
        return {g.data(), g.size()};
    }

    T* grad_buffer(int id) { return grads_[static_cast<std::size_t>(id)].data(); }

    void accumulate(int id, std::span<const T> g) {
        auto& dst = grads_[static_cast<std::size_t>(id)];
        for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += g[i];
    }

private:
    Tape() = default;

    struct Record {
        std::vector<int> inputs;
        int output;
        std::function<void(Tape&)> vjp;
    };

    std::vector<Record> records_;
    std::vector<std::int64_t> sizes_;
    std::vector<std::vector<T>> grads_;
    std::vector<std::uint8_t> reach_;
    bool ran_backward_ = false;
};

// Resolves the tape shared by a set of op inputs. Returns null when none is
// tracked; throws when two inputs live on different tapes.
template <typename T>
std::shared_ptr<Tape<T>> joint_tape(std::initializer_list<const Tensor<T>*> inputs) {
    std::shared_ptr<Tape<T>> tape;
    for (const auto* t : inputs) {
        if (!t->tracked()) continue;
        if (!tape) {
            tape = t->tape_ptr();
        } else if (tape.get() != t->tape_ptr().get()) {
            throw ContractError("op inputs are linked to different tapes");
        }
    }
    return tape;
}

// --- raw tensor serialization -----------------------------------------------
// Fixed header: magic "MMTD", dtype code u8, rank u8, extents as u64 list,
// then the row-major values, all little-endian.

template <typename T>
void write_tensor(std::ostream& os, const Tensor<T>& t) {
    os.write("MMTD", 4);
    const auto dt = static_cast<std::uint8_t>(Tensor<T>::dtype());
    os.write(reinterpret_cast<const char*>(&dt), 1);
    const auto rank = static_cast<std::uint8_t>(t.rank());
    os.write(reinterpret_cast<const char*>(&rank), 1);
    for (auto e : t.shape()) {
        const auto ext = static_cast<std::uint64_t>(e);
        os.write(reinterpret_cast<const char*>(&ext), 8);
    }
    os.write(reinterpret_cast<const char*>(t.data()),
             static_cast<std::streamsize>(t.numel() * static_cast<std::int64_t>(sizeof(T))));
    if (!os) throw DataError("failed writing tensor payload");
}

template <typename T>
Tensor<T> read_tensor(std::istream& is) {
    char magic[4] = {};
    is.read(magic, 4);
    if (!is || std::memcmp(magic, "MMTD", 4) != 0) {
        throw CheckpointError("bad tensor magic");
    }
    std::uint8_t dt = 0;
    std::uint8_t rank = 0;
    is.read(reinterpret_cast<char*>(&dt), 1);
    is.read(reinterpret_cast<char*>(&rank), 1);
    if (!is) throw CheckpointError("truncated tensor header");
    if (dt != static_cast<std::uint8_t>(Tensor<T>::dtype())) {
        throw CheckpointError("tensor dtype code " + std::to_string(dt) +
                              " does not match the requested element type");
    }
    Shape shape(rank);
    for (auto& e : shape) {
        std::uint64_t ext = 0;
        is.read(reinterpret_cast<char*>(&ext), 8);
        e = static_cast<std::int64_t>(ext);
    }
    if (!is) throw CheckpointError("truncated tensor extents");
    const auto n = shape_numel(shape);
    std::vector<T> values(static_cast<std::size_t>(n));
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(n * static_cast<std::int64_t>(sizeof(T))));
    if (!is) throw CheckpointError("truncated tensor payload");
    return Tensor<T>(std::move(shape), std::move(values));
}

}  // namespace memmamba
