#pragma once

#include "voxdiff/geometry.hpp"
#include "voxdiff/nn.hpp"

namespace voxdiff {

/// Shared image backbone: 4 convolutions, two of them stride 2, so the
/// feature map is input resolution / 4. Channels 3 -> 16 -> 32 -> 32 -> C.
struct ImageEncoder {
    static constexpr int64_t kStride = 4;

    Conv2dLayer conv1, conv2, conv3, conv4;

    ImageEncoder() = default;
    ImageEncoder(int64_t c_out, Rng& rng)
        : conv1(3, 3, 16, 2, 1, rng),
          conv2(3, 16, 32, 2, 1, rng),
          conv3(3, 32, 32, 1, 1, rng),
          conv4(3, 32, c_out, 1, 1, rng) {}

    /// rgb [B, H, W, 3] with values in [0, 1] -> features [B, H/4, W/4, C].
    Tensor forward(const Tensor& rgb) const {
        if (rgb.rank() != 4 || rgb.extent(3) != 3)
            throw ShapeError("encode_image: expected [B, H, W, 3], got " + format_shape(rgb.shape()));
        if (rgb.extent(1) < 16 || rgb.extent(2) < 16)
            throw ContractError("encode_image: input must be at least 16x16");
        Tensor h = relu(conv1.forward(rgb));
        h = relu(conv2.forward(h));
        h = relu(conv3.forward(h));
        return conv4.forward(h);
    }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        conv1.register_params(prefix + ".conv1", pm);
        conv2.register_params(prefix + ".conv2", pm);
        conv3.register_params(prefix + ".conv3", pm);
        conv4.register_params(prefix + ".conv4", pm);
    }
};

/// Learnable deformable attention parameters. offset_net and weight_net are
/// zero-initialized: the first forward samples exactly at the projected
/// reference points with uniform per-head point weights.
struct DeformAttnParams {
    int64_t n_heads = 4;
    int64_t n_points = 4;
    Linear offset_net;   // C -> heads*points*2, feature-map pixel units
    Linear weight_net;   // C -> heads*points logits
    Linear value_proj;   // C -> C
    Linear output_proj;  // C -> C

    DeformAttnParams() = default;
    DeformAttnParams(int64_t c, int64_t heads, int64_t points, Rng& rng)
        : n_heads(heads), n_points(points) {
        if (c % heads != 0)
            throw ConfigError("deformable attention: channels must divide by heads");
        offset_net = Linear::zero_init(c, heads * points * 2);
        weight_net = Linear::zero_init(c, heads * points);
        value_proj = Linear(c, c, rng);
        output_proj = Linear(c, c, rng);
    }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        offset_net.register_params(prefix + ".offset_net", pm);
        weight_net.register_params(prefix + ".weight_net", pm);
        value_proj.register_params(prefix + ".value_proj", pm);
        output_proj.register_params(prefix + ".output_proj", pm);
    }
};

/// Per-camera projected reference points, already scaled to feature-map
/// coordinates (input pixels / backbone stride).
struct CameraRefs {
    Tensor ref_uv;  // [Q, 1, 1, 2], constant
    std::shared_ptr<std::vector<uint8_t>> valid;
    int64_t valid_count = 0;
};

inline CameraRefs make_camera_refs(const VoxelGrid& grid, const CameraModel& cam, int64_t stride,
                                   bool centered = false) {
    GridProjection gp = project_grid(grid, cam, centered);
    const int64_t q = grid.voxel_count();
    CameraRefs out;
    out.ref_uv = Tensor::zeros({q, 1, 1, 2});
    out.valid = std::make_shared<std::vector<uint8_t>>(gp.valid);
    out.valid_count = gp.valid_count;
    const Scalar inv = 1.0 / static_cast<Scalar>(stride);
    const Scalar* src = gp.uv.data();
    Scalar* dst = out.ref_uv.data();
    for (int64_t i = 0; i < q; ++i) {
        dst[i * 2] = src[i * 2] * inv;
        dst[i * 2 + 1] = src[i * 2 + 1] * inv;
    }
    return out;
}

namespace detail {

/// Fixed sinusoidal positional code over 3D voxel indices, one channel per
/// (axis, frequency, phase) slot.
inline Tensor make_voxel_positional_code(const std::array<int64_t, 3>& dims, int64_t c) {
    const int64_t q = dims[0] * dims[1] * dims[2];
    Tensor pe = Tensor::zeros({q, c});
    Scalar* p = pe.data();
    int64_t idx = 0;
    for (int64_t i = 0; i < dims[0]; ++i)
        for (int64_t j = 0; j < dims[1]; ++j)
            for (int64_t k = 0; k < dims[2]; ++k, ++idx) {
                const Scalar t[3] = {
                    (static_cast<Scalar>(i) + 0.5) / static_cast<Scalar>(dims[0]),
                    (static_cast<Scalar>(j) + 0.5) / static_cast<Scalar>(dims[1]),
                    (static_cast<Scalar>(k) + 0.5) / static_cast<Scalar>(dims[2])};
                for (int64_t ch = 0; ch < c; ++ch) {
                    const int axis = static_cast<int>(ch % 3);
                    const int64_t slot = ch / 3;
                    const Scalar freq = static_cast<Scalar>(1LL << (slot / 2));
                    const Scalar arg = 3.14159265358979323846 * freq * t[axis];
                    p[idx * c + ch] = (slot % 2 == 0) ? std::sin(arg) : std::cos(arg);
                }
            }
    return pe;
}

}  // namespace detail

/// Lifts per-image features into a dense voxel feature volume with one
/// deformable cross-attention layer, masked-mean fusion over all
/// (frame, camera) contributions, and a per-voxel feed-forward update.
/// Voxels seen by no camera carry a learned fallback embedding.
struct VolumeLifter {
    std::array<int64_t, 3> dims{};
    int64_t channels = 0;

    Tensor query_embed;  // [Q, C], learned
    Tensor query_pos;    // [Q, C], fixed
    Tensor fallback;     // [C], learned
    DeformAttnParams attn;
    Linear ffn1, ffn2;
    LayerNormLayer ffn_ln;

    VolumeLifter() = default;
    VolumeLifter(const std::array<int64_t, 3>& dims_, int64_t c, int64_t heads, int64_t points,
                 Rng& rng)
        : dims(dims_), channels(c) {
        const int64_t q = dims[0] * dims[1] * dims[2];
        query_embed = Tensor::randn({q, c}, rng, 0.02, true);
        query_pos = detail::make_voxel_positional_code(dims, c);
        fallback = Tensor::randn({c}, rng, 0.02, true);
        attn = DeformAttnParams(c, heads, points, rng);
        ffn1 = Linear(c, 2 * c, rng);
        ffn2 = Linear(2 * c, c, rng);
        ffn_ln = LayerNormLayer(c);
    }

    int64_t voxel_count() const { return dims[0] * dims[1] * dims[2]; }

    Tensor queries() const { return add(query_embed, query_pos); }

    struct SampleNets {
        Tensor locs_base;  // [Q, heads, points, 2] offsets (before adding refs)
        Tensor weights;    // [Q, heads, points]
    };

    SampleNets sample_nets(const Tensor& q) const {
        const int64_t Q = voxel_count();
        SampleNets s;
        s.locs_base = reshape(attn.offset_net.forward(q), {Q, attn.n_heads, attn.n_points, 2});
        s.weights = softmax(reshape(attn.weight_net.forward(q), {Q, attn.n_heads, attn.n_points}), 2);
        return s;
    }

    /// One (frame, camera) contribution before fusion: raw per-head sampling
    /// of the projected values. Invalid voxels are zero rows.
    Tensor attend(const Tensor& feats, const CameraRefs& refs, const SampleNets& nets) const {
        if (refs.ref_uv.extent(0) != voxel_count())
            throw ShapeError("deformable attention: refs " + format_shape(refs.ref_uv.shape()) +
                             " vs grid " + std::to_string(voxel_count()) + " voxels");
        Tensor values = attn.value_proj.forward(feats);  // [B, H', W', C]
        Tensor locs = add(nets.locs_base, refs.ref_uv);  // broadcast to [Q, M, P, 2]
        return deform_sample(values, locs, nets.weights, refs.valid);
    }

    /// Fused volume from per-frame, per-camera feature maps. Each frame is
    /// reduced by a masked mean over its cameras, then frames are averaged;
    /// the camera set (and so the per-voxel valid count) is shared by all
    /// frames, which keeps duplicate inputs exactly idempotent.
    /// feats[frame][camera] is [B, H', W', C]; refs has one entry per camera.
    Tensor lift(const std::vector<std::vector<Tensor>>& feats,
                const std::vector<const CameraRefs*>& refs) const {
        if (feats.empty() || refs.empty())
            throw ContractError("build_volume: empty camera/frame set");
        const int64_t Q = voxel_count();

        Tensor q = queries();
        SampleNets nets = sample_nets(q);

        std::vector<int32_t> counts(static_cast<size_t>(Q), 0);
        for (size_t c = 0; c < refs.size(); ++c) {
            const auto& v = *refs[c]->valid;
            for (int64_t qi = 0; qi < Q; ++qi)
                counts[static_cast<size_t>(qi)] += v[static_cast<size_t>(qi)];
        }
        Tensor recip = Tensor::zeros({Q, 1});
        Tensor seen = Tensor::zeros({Q, 1});
        for (int64_t qi = 0; qi < Q; ++qi) {
            if (counts[static_cast<size_t>(qi)] > 0) {
                recip.data()[qi] = 1.0 / static_cast<Scalar>(counts[static_cast<size_t>(qi)]);
                seen.data()[qi] = 1.0;
            }
        }

        Tensor frame_sum;
        for (size_t f = 0; f < feats.size(); ++f) {
            if (feats[f].size() != refs.size())
                throw ShapeError("build_volume: expected one feature map per camera");
            Tensor acc;
            for (size_t c = 0; c < refs.size(); ++c) {
                Tensor contrib = attend(feats[f][c], *refs[c], nets);
                acc = c == 0 ? contrib : add(acc, contrib);
            }
            Tensor frame_mean = mul(acc, recip);
            frame_sum = f == 0 ? frame_mean : add(frame_sum, frame_mean);
        }
        Tensor fused = attn.output_proj.forward(
            scale(frame_sum, 1.0 / static_cast<Scalar>(feats.size())));  // [B, Q, C]
        Tensor h = add(q, fused);  // residual on the voxel queries
        h = add(h, ffn2.forward(gelu(ffn1.forward(ffn_ln.forward(h)))));
        // Unseen voxels become exactly the fallback embedding.
        Tensor unseen_fb = mul(fallback, sub(Tensor::scalar(1.0), seen));  // [Q, C]
        return add(mul(h, seen), unseen_fb);
    }

    void register_params(const std::string& prefix, ParamMap& pm) const {
        pm.add(prefix + ".query_embed", query_embed);
        pm.add(prefix + ".fallback", fallback);
        attn.register_params(prefix + ".attn", pm);
        ffn1.register_params(prefix + ".ffn1", pm);
        ffn2.register_params(prefix + ".ffn2", pm);
        ffn_ln.register_params(prefix + ".ffn_ln", pm);
    }
};

/// Single-observation volume: frames[frame][camera] with frame 0 = current,
/// frame 1 = previous; every (frame, camera) pair is encoded, attended and
/// fused. Returns [X, Y, Z, C].
inline Tensor build_volume(const ImageEncoder& enc, const VolumeLifter& lifter,
                           const std::vector<std::vector<Tensor>>& frames,
                           const std::vector<CameraModel>& cams, const VoxelGrid& grid) {
    if (cams.empty()) throw ContractError("build_volume: empty camera list");
    std::vector<CameraRefs> refs;
    refs.reserve(cams.size());
    for (const auto& c : cams) refs.push_back(make_camera_refs(grid, c, ImageEncoder::kStride));
    std::vector<const CameraRefs*> per;
    for (const auto& r : refs) per.push_back(&r);
    std::vector<std::vector<Tensor>> feats;
    for (const auto& frame : frames) {
        if (frame.size() != cams.size())
            throw ShapeError("build_volume: expected one image per camera");
        std::vector<Tensor> row;
        for (const auto& img : frame)
            row.push_back(enc.forward(reshape(img, {1, img.extent(0), img.extent(1), 3})));
        feats.push_back(std::move(row));
    }
    Tensor vol = lifter.lift(feats, per);  // [1, Q, C]
    return reshape(vol, {grid.dims[0], grid.dims[1], grid.dims[2], lifter.channels});
}

/// Single (frame, camera) deformable cross-attention with fallback
/// substitution, the per-call surface used by tests and small tools.
/// queries/fallback shaped [Q, C] and [C]; feats [H', W', C].
inline Tensor deformable_cross_attention(const Tensor& queries, const Tensor& feats,
                                         const CameraRefs& refs, const DeformAttnParams& params,
                                         const Tensor& fallback) {
    const int64_t Q = queries.extent(0);
    if (refs.ref_uv.extent(0) != Q)
        throw ShapeError("deformable_cross_attention: refs " + format_shape(refs.ref_uv.shape()) +
                         " vs queries " + format_shape(queries.shape()));
    Tensor offsets =
        reshape(params.offset_net.forward(queries), {Q, params.n_heads, params.n_points, 2});
    Tensor wts =
        softmax(reshape(params.weight_net.forward(queries), {Q, params.n_heads, params.n_points}), 2);
    Tensor values = params.value_proj.forward(reshape(feats, {1, feats.extent(0), feats.extent(1),
                                                              feats.extent(2)}));
    Tensor locs = add(offsets, refs.ref_uv);
    Tensor sampled = reshape(deform_sample(values, locs, wts, refs.valid), {Q, queries.extent(1)});
    Tensor out = params.output_proj.forward(sampled);
    Tensor seen = Tensor::zeros({Q, 1});
    for (int64_t qi = 0; qi < Q; ++qi)
        seen.data()[qi] = (*refs.valid)[static_cast<size_t>(qi)] ? 1.0 : 0.0;
    Tensor unseen_fb = mul(fallback, sub(Tensor::scalar(1.0), seen));
    return add(mul(out, seen), unseen_fb);
}

}  // namespace voxdiff
