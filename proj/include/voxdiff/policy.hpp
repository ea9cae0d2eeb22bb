#pragma once

#include "voxdiff/config.hpp"
#include "voxdiff/dataset.hpp"
#include "voxdiff/diffusion.hpp"
#include "voxdiff/encoder.hpp"
#include "voxdiff/tokens.hpp"

namespace voxdiff {

/// Model inputs for a batch of observations. Frames are laid out
/// ((b * 2 + frame) * cams + cam) along axis 0, frame 0 = current,
/// frame 1 = previous.
struct ObsBatch {
    Tensor frames;   // [B*2*cams, H, W, 3] in [0, 1]
    Tensor proprio;  // [B, 8]
    std::vector<int64_t> task_ids;
    std::vector<std::vector<Scalar>> masks;              // optional, per item, flat weight-grid
    std::vector<std::vector<int64_t>> depth_top_voxels;  // gt_depth_tokens mode only

    int64_t batch() const { return static_cast<int64_t>(task_ids.size()); }
};

struct Conditioning {
    Tensor cond;     // [B, S, c_model]
    Tensor weights;  // [B, N, Qw] when the active mode learns token weights
    int64_t weight_grid_size = 0;
};

/// The complete policy: image backbone, volumetric lifting, spatial token
/// generation, and the multi-token denoising decoder, plus the controlled
/// single-component replacements used for ablation studies.
class PolicyModel {
public:
    RunConfig cfg;
    VoxelGrid grid;
    std::vector<CameraModel> cams;
    DiffusionSchedule sched;
    ActionNorm norm;

    ImageEncoder encoder;
    VolumeLifter lifter;
    TokenGenerator tokgen;
    TaskEmbedding task_embed;
    ProprioEncoder proprio_enc;
    Mlp cond_proj;
    NoisePredictor denoiser;

    // mode extras
    Tensor pos2d;        // image2d: fixed positional code on the feature grid
    Linear concat_proj;  // concat_decoder: (N+2)*C -> c_model
    Conv3dLayer conv_a, conv_b;  // conv_decoder

    PolicyModel() = default;

    PolicyModel(const RunConfig& cfg_in, const ActionNorm& norm_in, uint64_t init_seed)
        : cfg(cfg_in), norm(norm_in) {
        cfg.validate();
        grid = effective_grid(cfg);
        sched = make_schedule(cfg.diffusion_steps, cfg.beta_min, cfg.beta_max);
        Rng rng(Rng::derive(init_seed, 0x30de1));

        const int64_t c = cfg.c_vol;
        encoder = ImageEncoder(c, rng);
        if (cfg.ablation != AblationMode::image2d)
            lifter = VolumeLifter(grid.dims, c, cfg.deform_heads, cfg.deform_points, rng);
        if (has_token_weights())
            tokgen = TokenGenerator(c, cfg.token_hidden, cfg.n_tokens, rng);
        task_embed = TaskEmbedding(cfg.n_tasks, c, rng);
        proprio_enc = ProprioEncoder(c, rng);
        cond_proj = Mlp(c, cfg.c_model, cfg.c_model, rng);
        denoiser = NoisePredictor(cfg.c_model, cfg.action_horizon, 7, cfg.blocks, cfg.attn_heads,
                                  cfg.mlp_ratio, rng);
        if (cfg.ablation == AblationMode::image2d) {
            const int64_t h = feature_dim(cfg.image_size);
            const int64_t w = h * cfg.n_cameras;
            pos2d = detail::make_voxel_positional_code({h, w, 1}, c);
        }
        if (cfg.ablation == AblationMode::concat_decoder)
            concat_proj = Linear((cfg.n_tokens + 2) * c, cfg.c_model, rng);
        if (cfg.ablation == AblationMode::conv_decoder) {
            conv_a = Conv3dLayer(3, c, c, 2, 1, rng);
            conv_b = Conv3dLayer(3, c, c, 2, 1, rng);
        }
        set_cameras(make_default_cameras(cfg.n_cameras, cfg.image_size));
        random_token_seed_ = Rng::derive(init_seed, 0x7045);
    }

    /// The coarse-grid ablation always runs on a 10x10x10 grid over the same
    /// bounds; every other mode uses the configured grid.
    static VoxelGrid effective_grid(const RunConfig& c) {
        if (c.ablation == AblationMode::all_voxels_coarse) {
            const Scalar sx = (c.r_max.x - c.r_min.x) / 10.0;
            return VoxelGrid(c.r_min, c.r_max, sx, {10, 10, 10});
        }
        return c.grid();
    }

    static int64_t feature_dim(int64_t image_size) { return image_size / ImageEncoder::kStride; }

    bool has_token_weights() const {
        switch (cfg.ablation) {
            case AblationMode::full:
            case AblationMode::image2d:
            case AblationMode::no_aux_supervision:
            case AblationMode::concat_decoder:
                return true;
            default:
                return false;
        }
    }

    Scalar effective_lambda_aux() const {
        if (!has_token_weights() || cfg.ablation == AblationMode::no_aux_supervision) return 0.0;
        return cfg.lambda_aux;
    }

    int64_t conditioning_token_count() const {
        switch (cfg.ablation) {
            case AblationMode::all_voxels_coarse: return grid.voxel_count() + 2;
            case AblationMode::concat_decoder: return 1;
            case AblationMode::conv_decoder: return 3;
            default: return cfg.n_tokens + 2;
        }
    }

    /// Sets the calibration the policy lifts with (the training rig) and
    /// rebuilds per-camera reference points.
    void set_cameras(std::vector<CameraModel> new_cams) {
        cams = std::move(new_cams);
        refs_.clear();
        if (cfg.ablation == AblationMode::image2d) return;
        for (const auto& c : cams)
            refs_.push_back(make_camera_refs(grid, c, ImageEncoder::kStride));
    }
    const std::vector<CameraRefs>& camera_refs() const { return refs_; }

    // -- conditioning ------------------------------------------------------

    Conditioning build_conditioning(const ObsBatch& obs) {
        const int64_t b = obs.batch();
        const int64_t n_cams = static_cast<int64_t>(cams.size());
        Tensor feats = encoder.forward(obs.frames);  // [B*2*cams, H', W', C]
        Tensor text = task_embed.forward(obs.task_ids);
        Tensor prop = proprio_enc.forward(obs.proprio);

        Conditioning out;
        Tensor tokens;  // [B, N_any, C]
        if (cfg.ablation == AblationMode::image2d) {
            Tensor flat = fused_feature_grid(feats, b, n_cams);  // [B, Q2, C]
            flat = add(flat, pos2d);
            out.weights = tokgen.compute_weights(broadcast_text(flat, text));
            out.weight_grid_size = flat.extent(1);
            tokens = generate_tokens(out.weights, flat);
        } else {
            Tensor volume = build_volume_batch(feats, b, n_cams);  // [B, Q, C]
            const int64_t q = volume.extent(1);
            switch (cfg.ablation) {
                case AblationMode::random_tokens: {
                    Rng rng(Rng::derive(random_token_seed_, forward_count_++));
                    last_random_indices_ = sample_without_replacement(q, cfg.n_tokens, rng);
                    tokens = gather_voxels(volume, last_random_indices_);
                    break;
                }
                case AblationMode::all_voxels_coarse:
                    tokens = volume;
                    break;
                case AblationMode::gt_depth_tokens: {
                    if (static_cast<int64_t>(obs.depth_top_voxels.size()) != b)
                        throw ContractError("gt_depth_tokens: missing per-item voxel selections");
                    std::vector<Tensor> rows;
                    for (int64_t n = 0; n < b; ++n) {
                        Tensor item = reshape(slice(volume, 0, n, 1), {q, cfg.c_vol});
                        rows.push_back(reshape(take_rows(item, obs.depth_top_voxels[static_cast<size_t>(n)]),
                                               {1, cfg.n_tokens, cfg.c_vol}));
                    }
                    tokens = concat(rows, 0);
                    break;
                }
                case AblationMode::conv_decoder: {
                    Tensor v3 = reshape(volume, {b, grid.dims[0], grid.dims[1], grid.dims[2], cfg.c_vol});
                    Tensor h = gelu(conv_a.forward(v3));
                    h = gelu(conv_b.forward(h));
                    h = reshape(h, {b, h.extent(1) * h.extent(2) * h.extent(3), cfg.c_vol});
                    tokens = mean_axis(h, 1, true);  // [B, 1, C]
                    break;
                }
                default: {  // full, no_aux_supervision, concat_decoder
                    out.weights = tokgen.compute_weights(broadcast_text(volume, text));
                    out.weight_grid_size = q;
                    tokens = generate_tokens(out.weights, volume);
                }
            }
        }

        if (cfg.ablation == AblationMode::concat_decoder) {
            Tensor all = concat({tokens, reshape(text, {b, 1, cfg.c_vol}),
                                 reshape(prop, {b, 1, cfg.c_vol})}, 1);
            Tensor flat = reshape(all, {b, (cfg.n_tokens + 2) * cfg.c_vol});
            out.cond = reshape(concat_proj.forward(flat), {b, 1, cfg.c_model});
        } else {
            Tensor all = concat({tokens, reshape(text, {b, 1, cfg.c_vol}),
                                 reshape(prop, {b, 1, cfg.c_vol})}, 1);
            out.cond = cond_proj.forward(all);
        }
        return out;
    }

    /// Volume features for a batch: encoder output rows regrouped per
    /// (frame, camera) and lifted against the stored calibration.
    Tensor build_volume_batch(const Tensor& feats, int64_t b, int64_t n_cams) {
        std::vector<std::vector<Tensor>> per_fc(2);
        std::vector<const CameraRefs*> per_refs;
        for (int64_t c = 0; c < n_cams; ++c) per_refs.push_back(&refs_[static_cast<size_t>(c)]);
        for (int64_t f = 0; f < 2; ++f)
            for (int64_t c = 0; c < n_cams; ++c) {
                std::vector<int64_t> idx(static_cast<size_t>(b));
                for (int64_t n = 0; n < b; ++n) idx[static_cast<size_t>(n)] = (n * 2 + f) * n_cams + c;
                per_fc[static_cast<size_t>(f)].push_back(take_rows(feats, idx));
            }
        return lifter.lift(per_fc, per_refs);
    }

    /// Supervision target on the active weight grid (3D voxels, or feature
    /// cells for the 2D ablation).
    std::vector<Scalar> supervision_mask(const Vec3& ee, const std::vector<Vec3>& events) const {
        if (cfg.ablation != AblationMode::image2d)
            return build_supervision_mask_flat(grid, ee, events, cfg.radius_vox,
                                               /*warn_outside=*/false);
        const int64_t h = feature_dim(cfg.image_size);
        const int64_t w = h;
        const int64_t n_cams = static_cast<int64_t>(cams.size());
        std::vector<Scalar> mask(static_cast<size_t>(h * w * n_cams), 0.0);
        auto stamp = [&](const Vec3& p) {
            for (int64_t c = 0; c < n_cams; ++c) {
                PixelProjection pp = world_to_image(cams[static_cast<size_t>(c)], p);
                if (!pp.valid) continue;
                const int64_t fx = static_cast<int64_t>(pp.u) / ImageEncoder::kStride;
                const int64_t fy = static_cast<int64_t>(pp.v) / ImageEncoder::kStride;
                for (int64_t y = std::max<int64_t>(0, fy - cfg.radius_vox);
                     y <= std::min(h - 1, fy + cfg.radius_vox); ++y)
                    for (int64_t x = std::max<int64_t>(0, fx - cfg.radius_vox);
                         x <= std::min(w - 1, fx + cfg.radius_vox); ++x)
                        mask[static_cast<size_t>(y * w * n_cams + c * w + x)] = 1.0;
            }
        };
        stamp(ee);
        for (const auto& p : events) stamp(p);
        return mask;
    }

    /// Ground-truth-depth voxel selection: unproject each feature cell of the
    /// current frame with its rendered depth, count hits per voxel and keep
    /// the n_tokens most occupied (ties resolved by voxel index).
    std::vector<int64_t> depth_top_voxels(const std::vector<const float*>& depth_per_cam,
                                          int64_t image_size) const {
        const int64_t stride = ImageEncoder::kStride;
        const int64_t fdim = feature_dim(image_size);
        std::vector<int32_t> counts(static_cast<size_t>(grid.voxel_count()), 0);
        for (size_t c = 0; c < cams.size(); ++c) {
            const CameraModel& cam = cams[c];
            const Mat3 r = cam.rotation();
            const Vec3 t = cam.translation();
            const Scalar fx = cam.K[0], cx = cam.K[2], fy = cam.K[4], cy = cam.K[5];
            for (int64_t gy = 0; gy < fdim; ++gy)
                for (int64_t gx = 0; gx < fdim; ++gx) {
                    const int64_t u = gx * stride + stride / 2;
                    const int64_t v = gy * stride + stride / 2;
                    const float d = depth_per_cam[c][v * image_size + u];
                    if (d <= 0) continue;
                    const Scalar z = static_cast<Scalar>(d);
                    Vec3 pc{(static_cast<Scalar>(u) + 0.5 - cx) / fx * z,
                            (static_cast<Scalar>(v) + 0.5 - cy) / fy * z, z};
                    Vec3 rel = pc - t;  // world = R^T (pc - t)
                    Vec3 pw{r[0] * rel.x + r[3] * rel.y + r[6] * rel.z,
                            r[1] * rel.x + r[4] * rel.y + r[7] * rel.z,
                            r[2] * rel.x + r[5] * rel.y + r[8] * rel.z};
                    const int64_t i = static_cast<int64_t>(std::floor((pw.x - grid.r_min.x) / grid.s));
                    const int64_t j = static_cast<int64_t>(std::floor((pw.y - grid.r_min.y) / grid.s));
                    const int64_t k = static_cast<int64_t>(std::floor((pw.z - grid.r_min.z) / grid.s));
                    if (i < 0 || i >= grid.dims[0] || j < 0 || j >= grid.dims[1] || k < 0 ||
                        k >= grid.dims[2])
                        continue;
                    counts[static_cast<size_t>(grid.flat_index(i, j, k))]++;
                }
        }
        std::vector<int64_t> order(counts.size());
        for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int64_t>(i);
        std::stable_sort(order.begin(), order.end(), [&](int64_t a, int64_t b) {
            return counts[static_cast<size_t>(a)] > counts[static_cast<size_t>(b)];
        });
        order.resize(static_cast<size_t>(cfg.n_tokens));
        return order;
    }

    const std::vector<int64_t>& last_random_indices() const { return last_random_indices_; }

    // -- parameters and checkpoints ----------------------------------------

    ParamMap parameters() const {
        ParamMap pm;
        encoder.register_params("encoder", pm);
        if (cfg.ablation != AblationMode::image2d) lifter.register_params("lifter", pm);
        if (has_token_weights()) tokgen.register_params("tokgen", pm);
        task_embed.register_params("task_embed", pm);
        proprio_enc.register_params("proprio", pm);
        cond_proj.register_params("cond_proj", pm);
        denoiser.register_params("denoiser", pm);
        if (cfg.ablation == AblationMode::concat_decoder)
            concat_proj.register_params("concat_proj", pm);
        if (cfg.ablation == AblationMode::conv_decoder) {
            conv_a.register_params("conv_a", pm);
            conv_b.register_params("conv_b", pm);
        }
        return pm;
    }

private:
    Tensor fused_feature_grid(const Tensor& feats, int64_t b, int64_t n_cams) {
        // Mean over the two frames, cameras side by side along width.
        std::vector<Tensor> per_cam;
        for (int64_t c = 0; c < n_cams; ++c) {
            std::vector<int64_t> idx0(static_cast<size_t>(b)), idx1(static_cast<size_t>(b));
            for (int64_t n = 0; n < b; ++n) {
                idx0[static_cast<size_t>(n)] = (n * 2 + 0) * n_cams + c;
                idx1[static_cast<size_t>(n)] = (n * 2 + 1) * n_cams + c;
            }
            per_cam.push_back(scale(add(take_rows(feats, idx0), take_rows(feats, idx1)), 0.5));
        }
        Tensor grid2d = per_cam.size() == 1 ? per_cam[0] : concat(per_cam, 2);
        return reshape(grid2d, {b, grid2d.extent(1) * grid2d.extent(2), cfg.c_vol});
    }

    Tensor gather_voxels(const Tensor& volume, const std::vector<int64_t>& idx) {
        // volume [B, Q, C] -> [B, |idx|, C], same selection for every item.
        Tensor qbc = permute(volume, {1, 0, 2});
        return permute(take_rows(qbc, idx), {1, 0, 2});
    }

    std::vector<CameraRefs> refs_;
    uint64_t random_token_seed_ = 0;
    uint64_t forward_count_ = 0;
    std::vector<int64_t> last_random_indices_;
};

// ---------------------------------------------------------------------------
// Checkpoints: manifest.json + tensors.bin (named VDPT records)

inline void save_checkpoint(const std::string& dir, const PolicyModel& model) {
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(dir, ec);
    ParamMap pm = model.parameters();
    nlohmann::json j;
    j["format"] = "voxdiff-ckpt-v1";
    j["config"] = config_to_json(model.cfg);
    j["config_hash"] = hex64(config_hash(model.cfg));
    j["schedule"] = {{"steps", model.sched.steps},
                     {"beta_min", model.cfg.beta_min},
                     {"beta_max", model.cfg.beta_max}};
    j["action_norm"] = {{"min", model.norm.lo}, {"max", model.norm.hi}};
    nlohmann::json cams = nlohmann::json::array();
    for (const auto& c : model.cams) cams.push_back(camera_to_json(c));
    j["cameras"] = cams;
    nlohmann::json tensors = nlohmann::json::array();

    std::ofstream bin(fs::path(dir) / "tensors.bin", std::ios::binary);
    if (!bin) throw IoError("cannot write checkpoint tensors: " + dir);
    int64_t offset = 0;
    for (const auto& [name, t] : pm.entries) {
        nlohmann::json e;
        e["name"] = name;
        e["offset"] = offset;
        e["shape"] = t.shape();
        tensors.push_back(e);
        write_tensor(bin, t);
        offset = static_cast<int64_t>(bin.tellp());
    }
    j["tensors"] = tensors;
    std::ofstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw IoError("cannot write checkpoint manifest: " + dir);
    mf << j.dump(2) << "\n";
}

inline PolicyModel load_checkpoint(const std::string& dir) {
    namespace fs = std::filesystem;
    std::ifstream mf(fs::path(dir) / "manifest.json");
    if (!mf) throw CheckpointError("manifest not found in " + dir);
    nlohmann::json j;
    mf >> j;
    const std::string format = j.value("format", "");
    if (format != "voxdiff-ckpt-v1")
        throw CheckpointError("unsupported checkpoint format '" + format + "' (expected voxdiff-ckpt-v1)");
    RunConfig cfg = config_from_json(j.at("config"));
    ActionNorm norm;
    auto lo = j.at("action_norm").at("min").get<std::vector<Scalar>>();
    auto hi = j.at("action_norm").at("max").get<std::vector<Scalar>>();
    for (int d = 0; d < 7; ++d) {
        norm.lo[static_cast<size_t>(d)] = lo.at(static_cast<size_t>(d));
        norm.hi[static_cast<size_t>(d)] = hi.at(static_cast<size_t>(d));
    }
    PolicyModel model(cfg, norm, cfg.seed);
    std::vector<CameraModel> cams;
    for (const auto& cj : j.at("cameras")) cams.push_back(camera_from_json(cj));
    model.set_cameras(std::move(cams));

    ParamMap pm = model.parameters();
    std::ifstream bin(fs::path(dir) / "tensors.bin", std::ios::binary);
    if (!bin) throw CheckpointError("tensors.bin not found in " + dir);
    for (const auto& e : j.at("tensors")) {
        const std::string name = e.at("name").get<std::string>();
        bin.seekg(e.at("offset").get<int64_t>());
        Tensor stored = read_tensor(bin);
        Tensor target = pm.find(name);
        if (stored.shape() != target.shape())
            throw CheckpointError("tensor '" + name + "' has shape " + format_shape(stored.shape()) +
                                  ", model expects " + format_shape(target.shape()));
        std::copy(stored.vec().begin(), stored.vec().end(), target.vec().begin());
    }
    return model;
}

// ---------------------------------------------------------------------------
// Observation assembly

inline Tensor frames_to_tensor(const std::vector<const uint8_t*>& frames, int64_t h, int64_t w) {
    Tensor out = Tensor::zeros({static_cast<int64_t>(frames.size()), h, w, 3});
    Scalar* p = out.data();
    const int64_t n = h * w * 3;
    for (size_t f = 0; f < frames.size(); ++f)
        for (int64_t i = 0; i < n; ++i)
            p[static_cast<int64_t>(f) * n + i] = static_cast<Scalar>(frames[f][i]) / 255.0;
    return out;
}

/// Builds the (current, previous) frame stack for sample (episode e, step t).
/// The previous index clamps to 0 at the start of an episode.
inline void append_stored_obs(const StoredEpisode& ep, int64_t t,
                              std::vector<const uint8_t*>& frame_ptrs) {
    const int64_t prev = std::max<int64_t>(0, t - 1);
    for (int64_t c = 0; c < ep.n_cams; ++c) frame_ptrs.push_back(ep.frame_ptr(t, c));
    for (int64_t c = 0; c < ep.n_cams; ++c) frame_ptrs.push_back(ep.frame_ptr(prev, c));
}

}  // namespace voxdiff
