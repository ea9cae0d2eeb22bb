#pragma once

#include <unordered_map>

#include "voxdiff/nn.hpp"

namespace voxdiff {

/// DDPM noise schedule with a linear beta ramp. Step indices are 1-based:
/// k runs over [1, K], matching the reverse-process update
///   x^{k-1} = alpha(k) * (x^k - gamma(k) * eps_hat) + sigma(k) * noise
/// with alpha(k) = 1/sqrt(1-beta_k), gamma(k) = beta_k/sqrt(1-alpha_bar_k),
/// sigma(k) = sqrt(beta_k).
struct DiffusionSchedule {
    int64_t steps = 0;
    std::vector<Scalar> beta;       // beta[k-1]
    std::vector<Scalar> alpha;      // 1 - beta
    std::vector<Scalar> alpha_bar;  // running product

    Scalar beta_k(int64_t k) const { return beta[index(k)]; }
    Scalar alpha_k(int64_t k) const { return alpha[index(k)]; }
    Scalar alpha_bar_k(int64_t k) const { return alpha_bar[index(k)]; }
    Scalar alpha_coef(int64_t k) const { return 1.0 / std::sqrt(alpha_k(k)); }
    Scalar gamma_coef(int64_t k) const { return beta_k(k) / std::sqrt(1.0 - alpha_bar_k(k)); }
    Scalar sigma_coef(int64_t k) const { return std::sqrt(beta_k(k)); }

private:
    size_t index(int64_t k) const {
        if (k < 1 || k > steps)
            throw std::out_of_range("diffusion step " + std::to_string(k) + " outside [1, " +
                                    std::to_string(steps) + "]");
        return static_cast<size_t>(k - 1);
    }
};

inline DiffusionSchedule make_schedule(int64_t steps, Scalar beta_min, Scalar beta_max) {
    if (steps < 1) throw ConfigError("schedule: steps must be >= 1");
    if (!(beta_min > 0.0 && beta_min <= beta_max && beta_max < 1.0))
        throw ConfigError("schedule: need 0 < beta_min <= beta_max < 1");
    DiffusionSchedule s;
    s.steps = steps;
    s.beta.resize(static_cast<size_t>(steps));
    s.alpha.resize(static_cast<size_t>(steps));
    s.alpha_bar.resize(static_cast<size_t>(steps));
    Scalar prod = 1.0;
    for (int64_t k = 0; k < steps; ++k) {
        Scalar t = steps == 1 ? 0.0 : static_cast<Scalar>(k) / static_cast<Scalar>(steps - 1);
        s.beta[static_cast<size_t>(k)] = beta_min + (beta_max - beta_min) * t;
        s.alpha[static_cast<size_t>(k)] = 1.0 - s.beta[static_cast<size_t>(k)];
        prod *= s.alpha[static_cast<size_t>(k)];
        s.alpha_bar[static_cast<size_t>(k)] = prod;
    }
    return s;
}

/// Forward noising: x^k = sqrt(alpha_bar_k) a + sqrt(1 - alpha_bar_k) eps.
inline Tensor add_noise(const Tensor& actions, int64_t k, const Tensor& eps,
                        const DiffusionSchedule& sched) {
    if (eps.shape() != actions.shape())
        throw ShapeError("add_noise: " + format_shape(actions.shape()) + " vs " +
                         format_shape(eps.shape()));
    const Scalar ab = sched.alpha_bar_k(k);
    return add(scale(actions, std::sqrt(ab)), scale(eps, std::sqrt(1.0 - ab)));
}

/// One reverse step. Noise is ignored at k = 1 (the final step is
/// deterministic); pass an undefined tensor for deterministic stepping.
inline Tensor ddpm_step(const Tensor& x, int64_t k, const Tensor& eps_hat,
                        const DiffusionSchedule& sched, const Tensor& noise = Tensor()) {
    if (eps_hat.shape() != x.shape())
        throw ShapeError("ddpm_step: " + format_shape(x.shape()) + " vs " +
                         format_shape(eps_hat.shape()));
    Tensor mean = scale(sub(x, scale(eps_hat, sched.gamma_coef(k))), sched.alpha_coef(k));
    if (k <= 1 || !noise.defined()) return mean;
    return add(mean, scale(noise, sched.sigma_coef(k)));
}

// ---------------------------------------------------------------------------
// Noise predictor: transformer blocks over the action chunk with adaLN-Zero
// conditioning from the timestep and cross-attention into the token set.

/// Sinusoidal embedding of integer diffusion steps, [B, dim].
inline Tensor timestep_embedding(const std::vector<int64_t>& ks, int64_t dim) {
    const int64_t half = dim / 2;
    Tensor out = Tensor::zeros({static_cast<int64_t>(ks.size()), dim});
    Scalar* p = out.data();
    for (size_t b = 0; b < ks.size(); ++b) {
        const Scalar k = static_cast<Scalar>(ks[b]);
        for (int64_t i = 0; i < half; ++i) {
            const Scalar freq = std::exp(-std::log(10000.0) * static_cast<Scalar>(i) /
                                         static_cast<Scalar>(half));
            p[static_cast<int64_t>(b) * dim + i] = std::sin(k * freq);
            p[static_cast<int64_t>(b) * dim + half + i] = std::cos(k * freq);
        }
    }
    return out;
}

namespace detail {
/// Plain layer norm (affine handled by adaLN modulation).
inline Tensor plain_ln(const Tensor& x) {
    const int64_t d = x.extent(x.rank() - 1);
    static thread_local std::unordered_map<int64_t, std::pair<Tensor, Tensor>> cache;
    auto it = cache.find(d);
    if (it == cache.end())
        it = cache.emplace(d, std::make_pair(Tensor::ones({d}), Tensor::zeros({d}))).first;
    return layer_norm(x, it->second.first, it->second.second);
}

inline Tensor modulate(const Tensor& x, const Tensor& shift, const Tensor& scale_t) {
    // x [B, T, D], shift/scale [B, 1, D]
    return add(mul(x, add(Tensor::scalar(1.0), scale_t)), shift);
}
}  // namespace detail

/// Multi-head attention; queries from x, keys/values from kv.
struct MultiheadAttention {
    int64_t n_heads = 0;
    Linear q_proj, k_proj, v_proj, out_proj;

    MultiheadAttention() = default;
    MultiheadAttention(int64_t dim, int64_t heads, Rng& rng) : n_heads(heads) {
        if (dim % heads != 0) throw ConfigError("attention: dim must divide by heads");
        q_proj = Linear(dim, dim, rng);
        k_proj = Linear(dim, dim, rng);
        v_proj = Linear(dim, dim, rng);
        out_proj = Linear(dim, dim, rng);
    }

    Tensor forward(const Tensor& x, const Tensor& kv) const {
        const int64_t b = x.extent(0), t = x.extent(1), d = x.extent(2);
        const int64_t s = kv.extent(1), dh = d / n_heads;
        auto split = [&](const Tensor& in, int64_t len) {
            return permute(reshape(in, {b, len, n_heads, dh}), {0, 2, 1, 3});  // [B, H, len, dh]
        };
        Tensor q = split(q_proj.forward(x), t);
        Tensor k = split(k_proj.forward(kv), s);
        Tensor v = split(v_proj.forward(kv), s);
        Tensor scores = scale(matmul(q, permute(k, {0, 1, 3, 2})), 1.0 / std::sqrt(static_cast<Scalar>(dh)));
        Tensor ctx = matmul(softmax(scores, 3), v);  // [B, H, T, dh]
        return out_proj.forward(reshape(permute(ctx, {0, 2, 1, 3}), {b, t, d}));
    }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        q_proj.register_params(prefix + ".q", pm);
        k_proj.register_params(prefix + ".k", pm);
        v_proj.register_params(prefix + ".v", pm);
        out_proj.register_params(prefix + ".out", pm);
    }
};

/// One decoder block: self-attention over action tokens, cross-attention
/// into the conditioning set, feed-forward; each branch gated by adaLN-Zero
/// scale/shift/gate computed from the timestep embedding. The modulation map
/// is zero-initialized, so every branch is exactly zero at initialization.
struct DitBlock {
    MultiheadAttention self_attn, cross_attn;
    Mlp ffn;
    Linear ada;  // D -> 9D: (shift, scale, gate) x (self, cross, ffn)

    DitBlock() = default;
    DitBlock(int64_t dim, int64_t heads, int64_t mlp_ratio, Rng& rng)
        : self_attn(dim, heads, rng),
          cross_attn(dim, heads, rng),
          ffn(dim, mlp_ratio * dim, dim, rng) {
        ada = Linear::zero_init(dim, 9 * dim);
    }

    Tensor forward(const Tensor& h_in, const Tensor& cond, const Tensor& temb) const {
        const int64_t b = h_in.extent(0), d = h_in.extent(2);
        Tensor m = ada.forward(temb);  // [B, 9D]
        auto piece = [&](int64_t i) { return reshape(slice(m, 1, i * d, d), {b, 1, d}); };
        Tensor h = h_in;
        Tensor x = detail::modulate(detail::plain_ln(h), piece(0), piece(1));
        h = add(h, mul(piece(2), self_attn.forward(x, x)));
        x = detail::modulate(detail::plain_ln(h), piece(3), piece(4));
        h = add(h, mul(piece(5), cross_attn.forward(x, cond)));
        x = detail::modulate(detail::plain_ln(h), piece(6), piece(7));
        h = add(h, mul(piece(8), ffn.forward(x)));
        return h;
    }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        self_attn.register_params(prefix + ".self_attn", pm);
        cross_attn.register_params(prefix + ".cross_attn", pm);
        ffn.register_params(prefix + ".ffn", pm);
        ada.register_params(prefix + ".ada", pm);
    }
};

/// eps_theta(x^k, k, conditioning tokens). The final head is part of the
/// adaLN-Zero design and starts at zero, so an untrained predictor is the
/// composition of the input embedding and the (zero) head.
struct NoisePredictor {
    int64_t dim = 0;
    int64_t action_dim = 7;
    Linear action_embed;  // action_dim -> D
    Tensor action_pos;    // [H_a, D], learned
    Mlp time_mlp;
    std::vector<DitBlock> blocks;
    Linear head;  // D -> action_dim, zero-init

    NoisePredictor() = default;
    NoisePredictor(int64_t dim_, int64_t horizon, int64_t action_dim_, int64_t n_blocks,
                   int64_t heads, int64_t mlp_ratio, Rng& rng)
        : dim(dim_), action_dim(action_dim_) {
        action_embed = Linear(action_dim, dim, rng);
        action_pos = Tensor::randn({horizon, dim}, rng, 0.02, true);
        time_mlp = Mlp(dim, dim, dim, rng);
        for (int64_t i = 0; i < n_blocks; ++i) blocks.emplace_back(dim, heads, mlp_ratio, rng);
        head = Linear::zero_init(dim, action_dim);
    }

    /// The initial embedding the blocks refine: action embed + position code.
    Tensor embed(const Tensor& x) const { return add(action_embed.forward(x), action_pos); }

    /// x [B, H_a, action_dim], ks one step index per batch item,
    /// cond [B, S, D] -> predicted noise [B, H_a, action_dim].
    Tensor forward(const Tensor& x, const std::vector<int64_t>& ks, const Tensor& cond) const {
        if (x.rank() != 3 || x.extent(2) != action_dim)
            throw ShapeError("predict_noise: expected [B, H, " + std::to_string(action_dim) +
                             "], got " + format_shape(x.shape()));
        if (cond.rank() != 3 || cond.extent(2) != dim)
            throw ShapeError("predict_noise: conditioning width " + format_shape(cond.shape()) +
                             " vs model dim " + std::to_string(dim));
        if (cond.extent(0) != x.extent(0))
            throw ShapeError("predict_noise: batch mismatch, " + format_shape(x.shape()) + " vs " +
                             format_shape(cond.shape()));
        if (static_cast<int64_t>(ks.size()) != x.extent(0))
            throw ShapeError("predict_noise: need one step index per batch item");
        Tensor h = embed(x);
        Tensor temb = time_mlp.forward(timestep_embedding(ks, dim));
        for (const auto& blk : blocks) h = blk.forward(h, cond, temb);
        return head.forward(h);
    }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        action_embed.register_params(prefix + ".action_embed", pm);
        pm.add(prefix + ".action_pos", action_pos);
        time_mlp.register_params(prefix + ".time_mlp", pm);
        for (size_t i = 0; i < blocks.size(); ++i)
            blocks[i].register_params(prefix + ".block" + std::to_string(i), pm);
        head.register_params(prefix + ".head", pm);
    }
};

// ---------------------------------------------------------------------------
// Sampling and training loss

/// Full reverse chain from seeded Gaussian noise; pure in (cond, params,
/// sched, seed). Returns [H_a, action_dim] clipped to [-1, 1].
inline Tensor sample_actions(const NoisePredictor& model, const Tensor& cond,
                             const DiffusionSchedule& sched, int64_t horizon, uint64_t seed) {
    NoGradGuard ng;
    Rng rng(seed);
    Tensor x = Tensor::randn({1, horizon, model.action_dim}, rng);
    for (int64_t k = sched.steps; k >= 1; --k) {
        Tensor eps_hat = model.forward(x, {k}, cond);
        if (k > 1) {
            Tensor noise = Tensor::randn({1, horizon, model.action_dim}, rng);
            x = ddpm_step(x, k, eps_hat, sched, noise);
        } else {
            x = ddpm_step(x, k, eps_hat, sched);
        }
    }
    Tensor out = clamp(x, -1.0, 1.0);
    return reshape(out, {horizon, model.action_dim});
}

/// Per-batch noising draw: one uniform step index and one Gaussian noise
/// field per item. Kept explicit so tests can pin the draw.
struct NoiseDraw {
    std::vector<int64_t> ks;
    Tensor eps;
};

inline NoiseDraw draw_noise(int64_t batch, int64_t horizon, int64_t action_dim,
                            const DiffusionSchedule& sched, Rng& rng) {
    NoiseDraw d;
    d.ks.resize(static_cast<size_t>(batch));
    for (auto& k : d.ks) k = rng.uniform_int(1, sched.steps);
    d.eps = Tensor::randn({batch, horizon, action_dim}, rng);
    return d;
}

/// Denoising objective: mean squared error between the injected noise and
/// predict(x^k, k). predict is any callable (x, ks) -> eps_hat so oracle
/// predictors can be swapped in.
template <class PredictFn>
Tensor diffusion_training_loss(PredictFn&& predict, const Tensor& actions,
                               const DiffusionSchedule& sched, const NoiseDraw& draw) {
    if (actions.rank() != 3) throw ShapeError("training_loss: actions must be [B, H, A]");
    const int64_t b = actions.extent(0);
    if (b < 1) throw ContractError("training_loss: empty batch");
    Tensor c_sig = Tensor::zeros({b, 1, 1});
    Tensor c_noise = Tensor::zeros({b, 1, 1});
    for (int64_t n = 0; n < b; ++n) {
        const Scalar ab = sched.alpha_bar_k(draw.ks[static_cast<size_t>(n)]);
        c_sig.data()[n] = std::sqrt(ab);
        c_noise.data()[n] = std::sqrt(1.0 - ab);
    }
    Tensor x_k = add(mul(actions, c_sig), mul(draw.eps, c_noise));
    Tensor eps_hat = predict(x_k, draw.ks);
    return mean(square(sub(eps_hat, draw.eps)));
}

template <class PredictFn>
Tensor diffusion_training_loss(PredictFn&& predict, const Tensor& actions,
                               const DiffusionSchedule& sched, Rng& rng) {
    NoiseDraw d = draw_noise(actions.extent(0), actions.extent(1), actions.extent(2), sched, rng);
    return diffusion_training_loss(std::forward<PredictFn>(predict), actions, sched, d);
}

}  // namespace voxdiff
