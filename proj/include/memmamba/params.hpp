#pragma once

#include <cmath>
#include <string>

#include "memmamba/ops.hpp"
#include "memmamba/rng.hpp"
#include "memmamba/tensor.hpp"

// Small trainable building blocks shared by the model modules. Each struct
// exposes visit(prefix, f) enumerating its parameters in a fixed order; that
// order defines checkpoint naming, optimizer state slots, and init sequence.

namespace memmamba {

template <typename T>
struct Linear {
    Tensor<T> weight;  // [in, out]
    Tensor<T> bias;    // [out]

    static Linear init(std::int64_t in, std::int64_t out, Rng& rng) {
        Linear l;
        l.weight = Tensor<T>::randn({in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
        l.bias = Tensor<T>::zeros({out});
        return l;
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

template <typename T>
struct LayerNormParams {
    Tensor<T> gamma;
    Tensor<T> beta;
    T eps = T(1e-5);

    static LayerNormParams init(std::int64_t dim) {
        LayerNormParams n;
        n.gamma = Tensor<T>::ones({dim});
        n.beta = Tensor<T>::zeros({dim});
        return n;
    }

    Tensor<T> operator()(const Tensor<T>& x) const {
        return ops::layernorm(x, gamma, beta, eps);
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".gamma", gamma);
        f(prefix + ".beta", beta);
    }
};

// Two-layer perceptron with SiLU in between.
template <typename T>
struct Mlp2 {
    Linear<T> fc1;
    Linear<T> fc2;

    static Mlp2 init(std::int64_t in, std::int64_t hidden, std::int64_t out, Rng& rng) {
        return {Linear<T>::init(in, hidden, rng), Linear<T>::init(hidden, out, rng)};
    }

    Tensor<T> operator()(const Tensor<T>& x) const { return fc2(ops::silu(fc1(x))); }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        fc1.visit(prefix + ".fc1", f);
        fc2.visit(prefix + ".fc2", f);
    }
};

// NHWC convolution parameters; weight layout [kh,kw,Ci,Co].
template <typename T>
struct Conv2dParams {
    Tensor<T> weight;
    Tensor<T> bias;

    static Conv2dParams init(std::int64_t kh, std::int64_t kw, std::int64_t ci, std::int64_t co,
                             Rng& rng) {
        Conv2dParams c;
        c.weight =
            Tensor<T>::randn({kh, kw, ci, co}, rng, 1.0 / std::sqrt(static_cast<double>(kh * kw * ci)));
        c.bias = Tensor<T>::zeros({co});
        return c;
    }

    Tensor<T> operator()(const Tensor<T>& x, std::int64_t stride, std::int64_t pad) const {
        return ops::conv2d_nhwc(x, weight, bias, stride, pad);
    }

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".weight", weight);
        f(prefix + ".bias", bias);
    }
};

}  // namespace memmamba
