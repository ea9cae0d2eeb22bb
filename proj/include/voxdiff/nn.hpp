#pragma once

#include "voxdiff/ops_spatial.hpp"
#include "voxdiff/tensor.hpp"

namespace voxdiff {

/// Named parameter registry. Order is registration order and is the layout
/// contract for checkpoints and the optimizer.
struct ParamMap {
    std::vector<std::pair<std::string, Tensor>> entries;

    void add(const std::string& name, const Tensor& t) {
        for (auto& e : entries)
            if (e.first == name) throw ContractError("duplicate parameter name: " + name);
        entries.emplace_back(name, t);
    }
    Tensor find(const std::string& name) const {
        for (auto& e : entries)
            if (e.first == name) return e.second;
        throw ContractError("parameter not found: " + name);
    }
    int64_t total_count() const {
        int64_t n = 0;
        for (auto& e : entries) n += e.second.numel();
        return n;
    }
};

namespace init {

inline Tensor kaiming(Shape shape, int64_t fan_in, Rng& rng) {
    Scalar std = std::sqrt(2.0 / static_cast<Scalar>(fan_in));
    return Tensor::randn(std::move(shape), rng, std, true);
}

inline Tensor xavier(Shape shape, int64_t fan_in, int64_t fan_out, Rng& rng) {
    Scalar std = std::sqrt(2.0 / static_cast<Scalar>(fan_in + fan_out));
    return Tensor::randn(std::move(shape), rng, std, true);
}

inline Tensor zeros(Shape shape) { return Tensor::zeros(std::move(shape), true); }

}  // namespace init

/// y = x W + b with W [in, out]; x may carry leading batch axes.
struct Linear {
    Tensor weight;
    Tensor bias;

    Linear() = default;
    Linear(int64_t in, int64_t out, Rng& rng) {
        weight = init::xavier({in, out}, in, out, rng);
        bias = init::zeros({out});
    }
    static Linear zero_init(int64_t in, int64_t out) {
        Linear l;
        l.weight = init::zeros({in, out});
        l.bias = init::zeros({out});
        return l;
    }
    static Linear identity(int64_t dim) {
        Linear l;
        l.weight = init::zeros({dim, dim});
        for (int64_t i = 0; i < dim; ++i) l.weight.data()[i * dim + i] = 1.0;
        l.bias = init::zeros({dim});
        return l;
    }

    Tensor forward(const Tensor& x) const { return add(matmul(x, weight), bias); }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        pm.add(prefix + ".weight", weight);
        pm.add(prefix + ".bias", bias);
    }
};

struct Conv2dLayer {
    Tensor weight;  // [KH, KW, Cin, Cout]
    Tensor bias;
    int64_t stride = 1;
    int64_t pad = 0;

    Conv2dLayer() = default;
    Conv2dLayer(int64_t k, int64_t cin, int64_t cout, int64_t stride_, int64_t pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        weight = init::kaiming({k, k, cin, cout}, k * k * cin, rng);
        bias = init::zeros({cout});
    }

    Tensor forward(const Tensor& x) const { return conv2d(x, weight, bias, stride, pad); }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        pm.add(prefix + ".weight", weight);
        pm.add(prefix + ".bias", bias);
    }
};

struct Conv3dLayer {
    Tensor weight;  // [K, K, K, Cin, Cout]
    Tensor bias;
    int64_t stride = 1;
    int64_t pad = 0;

    Conv3dLayer() = default;
    Conv3dLayer(int64_t k, int64_t cin, int64_t cout, int64_t stride_, int64_t pad_, Rng& rng)
        : stride(stride_), pad(pad_) {
        weight = init::kaiming({k, k, k, cin, cout}, k * k * k * cin, rng);
        bias = init::zeros({cout});
    }

    Tensor forward(const Tensor& x) const { return conv3d(x, weight, bias, stride, pad); }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        pm.add(prefix + ".weight", weight);
        pm.add(prefix + ".bias", bias);
    }
};

struct LayerNormLayer {
    Tensor gain;
    Tensor bias;

    LayerNormLayer() = default;
    explicit LayerNormLayer(int64_t dim) {
        gain = Tensor::ones({dim}, true);
        bias = init::zeros({dim});
    }

    Tensor forward(const Tensor& x) const { return layer_norm(x, gain, bias); }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        pm.add(prefix + ".gain", gain);
        pm.add(prefix + ".bias", bias);
    }
};

/// Two-layer MLP with GELU.
struct Mlp {
    Linear fc1, fc2;

    Mlp() = default;
    Mlp(int64_t in, int64_t hidden, int64_t out, Rng& rng) : fc1(in, hidden, rng), fc2(hidden, out, rng) {}

    Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        fc1.register_params(prefix + ".fc1", pm);
        fc2.register_params(prefix + ".fc2", pm);
    }
};

/// Adam with bias correction. Steps are serial over parameters, so updates
/// are deterministic for a fixed registration order.
class AdamOptimizer {
public:
    AdamOptimizer(const ParamMap& params, Scalar lr, Scalar beta1 = 0.9, Scalar beta2 = 0.999,
                  Scalar eps = 1e-8)
        : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
        for (auto& e : params.entries) {
            params_.push_back(e.second);
            m_.emplace_back(e.second.vec().size(), 0.0);
            v_.emplace_back(e.second.vec().size(), 0.0);
        }
    }

    void step() {
        ++t_;
        const Scalar bc1 = 1.0 - std::pow(beta1_, static_cast<Scalar>(t_));
        const Scalar bc2 = 1.0 - std::pow(beta2_, static_cast<Scalar>(t_));
        for (size_t p = 0; p < params_.size(); ++p) {
            Tensor& param = params_[p];
            const std::vector<Scalar> g = param.grad();
            Scalar* w = param.data();
            Scalar* m = m_[p].data();
            Scalar* v = v_[p].data();
            for (size_t i = 0; i < g.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * g[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * g[i] * g[i];
                const Scalar mhat = m[i] / bc1;
                const Scalar vhat = v[i] / bc2;
                w[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
            }
        }
    }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    int64_t steps_taken() const { return t_; }

private:
    std::vector<Tensor> params_;
    std::vector<std::vector<Scalar>> m_, v_;
    Scalar lr_, beta1_, beta2_, eps_;
    int64_t t_ = 0;
};

}  // namespace voxdiff
