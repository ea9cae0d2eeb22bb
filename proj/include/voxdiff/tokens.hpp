#pragma once

#include <iostream>

#include "voxdiff/geometry.hpp"
#include "voxdiff/nn.hpp"

namespace voxdiff {

/// Replicates a text/task embedding at every voxel and concatenates it onto
/// the channel axis: [B, Q, C] + [B, C] -> [B, Q, 2C].
inline Tensor broadcast_text(const Tensor& volume, const Tensor& text) {
    if (volume.rank() != 3 || text.rank() != 2 || volume.extent(0) != text.extent(0) ||
        volume.extent(2) != text.extent(1))
        throw ShapeError("broadcast_text: " + format_shape(volume.shape()) + " vs " +
                         format_shape(text.shape()));
    const int64_t b = volume.extent(0), q = volume.extent(1), c = volume.extent(2);
    Tensor text_bq = expand(reshape(text, {b, 1, c}), {b, q, c});
    return concat({volume, text_bq}, 2);
}

/// Token-learner style weight head: two pointwise layers with a GELU between,
/// then softmax over the flattened voxel axis independently per token. The
/// final layer is zero-initialized so training starts from uniform weights.
struct TokenGenerator {
    int64_t n_tokens = 0;
    Linear mix1;  // 2C -> hidden
    Linear mix2;  // hidden -> N

    TokenGenerator() = default;
    TokenGenerator(int64_t c, int64_t hidden, int64_t n, Rng& rng) : n_tokens(n) {
        mix1 = Linear(2 * c, hidden, rng);
        mix2 = Linear::zero_init(hidden, n);
    }

    /// goal_aware [B, Q, 2C] -> weights [B, N, Q], rows summing to 1.
    Tensor compute_weights(const Tensor& goal_aware) const {
        Tensor logits = mix2.forward(gelu(mix1.forward(goal_aware)));  // [B, Q, N]
        return softmax(permute(logits, {0, 2, 1}), 2);
    }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        mix1.register_params(prefix + ".mix1", pm);
        mix2.register_params(prefix + ".mix2", pm);
    }
};

/// Weighted sums of voxel features: weights [B, N, Q] x volume [B, Q, C].
inline Tensor generate_tokens(const Tensor& weights, const Tensor& volume) {
    if (weights.rank() != 3 || volume.rank() != 3 || weights.extent(0) != volume.extent(0) ||
        weights.extent(2) != volume.extent(1))
        throw ShapeError("generate_tokens: " + format_shape(weights.shape()) + " vs " +
                         format_shape(volume.shape()));
    return matmul(weights, volume);
}

// ---------------------------------------------------------------------------
// Auxiliary supervision from proprioception

/// Binary voxel mask covering the Chebyshev neighborhood (radius in voxels)
/// of the end-effector cell and of every gripper-event location. Positions
/// outside the grid contribute nothing; an all-zero mask is valid.
inline std::vector<Scalar> build_supervision_mask_flat(const VoxelGrid& grid, const Vec3& ee_pos,
                                                       const std::vector<Vec3>& gripper_events,
                                                       int64_t radius_vox,
                                                       bool warn_outside = true) {
    if (radius_vox < 0) throw ContractError("build_supervision_mask: radius must be >= 0");
    std::vector<Scalar> mask(static_cast<size_t>(grid.voxel_count()), 0.0);
    auto stamp = [&](const Vec3& p, bool is_ee) {
        const int64_t ci = static_cast<int64_t>(std::floor((p.x - grid.r_min.x) / grid.s));
        const int64_t cj = static_cast<int64_t>(std::floor((p.y - grid.r_min.y) / grid.s));
        const int64_t ck = static_cast<int64_t>(std::floor((p.z - grid.r_min.z) / grid.s));
        if (ci < 0 || ci >= grid.dims[0] || cj < 0 || cj >= grid.dims[1] || ck < 0 ||
            ck >= grid.dims[2]) {
            if (is_ee && warn_outside)
                std::cerr << "[voxdiff] supervision mask: end-effector outside the voxel grid\n";
            return;
        }
        for (int64_t i = std::max<int64_t>(0, ci - radius_vox);
             i <= std::min(grid.dims[0] - 1, ci + radius_vox); ++i)
            for (int64_t j = std::max<int64_t>(0, cj - radius_vox);
                 j <= std::min(grid.dims[1] - 1, cj + radius_vox); ++j)
                for (int64_t k = std::max<int64_t>(0, ck - radius_vox);
                     k <= std::min(grid.dims[2] - 1, ck + radius_vox); ++k)
                    mask[static_cast<size_t>(grid.flat_index(i, j, k))] = 1.0;
    };
    stamp(ee_pos, true);
    for (const auto& p : gripper_events) stamp(p, false);
    return mask;
}

inline Tensor build_supervision_mask(const VoxelGrid& grid, const Vec3& ee_pos,
                                     const std::vector<Vec3>& gripper_events, int64_t radius_vox) {
    return Tensor::from_data({grid.dims[0], grid.dims[1], grid.dims[2]},
                             build_supervision_mask_flat(grid, ee_pos, gripper_events, radius_vox));
}

inline constexpr Scalar kBceClamp = 1e-6;

/// Binary cross-entropy between the per-voxel max over token weights and a
/// binary mask. Softmax rows are O(1/Q), so the pooled map is rescaled by the
/// voxel count and clamped to [1e-6, 1-1e-6] before the loss; positives are
/// reweighted by (#zeros / #ones), clamped to 1 when the mask is empty.
///
/// weights [B, N, Q] (or [N, Q]); masks: one flat [Q] vector per batch item.
inline Tensor aux_bce_loss(const Tensor& weights_in,
                           const std::vector<const std::vector<Scalar>*>& masks) {
    Tensor w = weights_in;
    if (w.rank() == 2) w = reshape(w, {1, w.extent(0), w.extent(1)});
    if (w.rank() != 3) throw ShapeError("aux_bce_loss: weights must be [B, N, Q]");
    const int64_t b = w.extent(0), q = w.extent(2);
    if (static_cast<int64_t>(masks.size()) != b)
        throw ShapeError("aux_bce_loss: " + std::to_string(masks.size()) + " masks for batch " +
                         std::to_string(b));
    Tensor mask = Tensor::zeros({b, q});
    Tensor pos_w = Tensor::zeros({b, q});  // pos_weight at positives, 1 elsewhere
    for (int64_t n = 0; n < b; ++n) {
        const auto& m = *masks[static_cast<size_t>(n)];
        if (static_cast<int64_t>(m.size()) != q)
            throw ShapeError("aux_bce_loss: mask size " + std::to_string(m.size()) + " vs " +
                             std::to_string(q) + " voxels");
        int64_t ones = 0;
        for (Scalar v : m) ones += v != 0.0;
        const Scalar pw = ones > 0 ? static_cast<Scalar>(q - ones) / static_cast<Scalar>(ones) : 1.0;
        for (int64_t i = 0; i < q; ++i) {
            mask.data()[n * q + i] = m[static_cast<size_t>(i)];
            pos_w.data()[n * q + i] = m[static_cast<size_t>(i)] != 0.0 ? pw : 1.0;
        }
    }
    Tensor pooled = reduce_max(w, 1);  // [B, Q]
    Tensor p = clamp(scale(pooled, static_cast<Scalar>(q)), kBceClamp, 1.0 - kBceClamp);
    Tensor one = Tensor::scalar(1.0);
    Tensor term_pos = mul(mask, vlog(p));
    Tensor term_neg = mul(sub(one, mask), vlog(sub(one, p)));
    return neg(mean(mul(pos_w, add(term_pos, term_neg))));
}

inline Tensor aux_bce_loss(const Tensor& weights, const std::vector<Scalar>& mask) {
    std::vector<const std::vector<Scalar>*> masks{&mask};
    return aux_bce_loss(weights, masks);
}

// ---------------------------------------------------------------------------
// Task and proprioception embeddings

/// Embedding table keyed by task id (stands in for a text encoder).
struct TaskEmbedding {
    Tensor table;  // [n_tasks, C]

    TaskEmbedding() = default;
    TaskEmbedding(int64_t n_tasks, int64_t c, Rng& rng) {
        table = Tensor::randn({n_tasks, c}, rng, 0.02, true);
    }

    Tensor forward(const std::vector<int64_t>& task_ids) const {
        return take_rows(table, task_ids);  // [B, C]
    }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        pm.add(prefix + ".table", table);
    }
};

/// MLP from the 8-D proprioceptive state to one conditioning token.
struct ProprioEncoder {
    Mlp mlp;

    ProprioEncoder() = default;
    ProprioEncoder(int64_t c, Rng& rng) : mlp(8, 2 * c, c, rng) {}

    Tensor forward(const Tensor& proprio) const { return mlp.forward(proprio); }  // [B, 8] -> [B, C]

    void register_params(const std::string& prefix, ParamMap& pm) const {
        mlp.register_params(prefix + ".mlp", pm);
    }
};

}  // namespace voxdiff
