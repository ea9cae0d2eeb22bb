#pragma once

#include <chrono>
#include <iomanip>

#include "voxdiff/policy.hpp"

namespace voxdiff {

namespace detail {
inline Scalar now_seconds() {
    return std::chrono::duration<Scalar>(std::chrono::steady_clock::now().time_since_epoch()).count();
}
}  // namespace detail

// ---------------------------------------------------------------------------
// Training

struct TrainStats {
    int64_t steps = 0;
    Scalar initial_loss = 0;
    Scalar final_loss = 0;
    Scalar wall_s = 0;
    std::string checkpoint_dir;
};

struct TrainOptions {
    int64_t log_every = 25;
    bool quiet = false;
};

/// Builds one training batch from stored episodes.
struct SampleRef {
    int64_t episode;
    int64_t t;
};

inline ObsBatch make_training_batch(PolicyModel& model, const Dataset& ds,
                                    const std::vector<SampleRef>& samples, Tensor& actions_out) {
    const int64_t b = static_cast<int64_t>(samples.size());
    const int64_t ha = model.cfg.action_horizon;
    ObsBatch obs;
    std::vector<const uint8_t*> frame_ptrs;
    frame_ptrs.reserve(static_cast<size_t>(b * 2 * ds.manifest.n_cameras));
    obs.proprio = Tensor::zeros({b, 8});
    actions_out = Tensor::zeros({b, ha, 7});
    const bool want_masks = model.effective_lambda_aux() > 0.0;
    const bool want_depth = model.cfg.ablation == AblationMode::gt_depth_tokens;
    for (int64_t n = 0; n < b; ++n) {
        const auto& ref = samples[static_cast<size_t>(n)];
        if (ref.episode < 0 || ref.episode >= static_cast<int64_t>(ds.episodes.size()))
            throw ContractError("training batch: episode index out of range");
        const StoredEpisode& ep = ds.episodes[static_cast<size_t>(ref.episode)];
        if (ref.t < 0 || ref.t >= ep.length())
            throw ContractError("training batch: timestep out of range");
        append_stored_obs(ep, ref.t, frame_ptrs);
        for (int d = 0; d < 8; ++d)
            obs.proprio.data()[n * 8 + d] = ep.proprio[static_cast<size_t>(ref.t)][static_cast<size_t>(d)];
        obs.task_ids.push_back(ep.task_id);
        for (int64_t i = 0; i < ha; ++i) {
            const int64_t t = std::min<int64_t>(ref.t + i, ep.length() - 1);
            for (int d = 0; d < 7; ++d)
                actions_out.data()[(n * ha + i) * 7 + d] =
                    model.norm.normalize(ep.actions[static_cast<size_t>(t)][static_cast<size_t>(d)], d);
        }
        if (want_masks) {
            const auto& pr = ep.proprio[static_cast<size_t>(ref.t)];
            obs.masks.push_back(
                model.supervision_mask({pr[0], pr[1], pr[2]}, ep.event_positions()));
        }
        if (want_depth) {
            std::vector<const float*> depth;
            for (int64_t c = 0; c < ep.n_cams; ++c) depth.push_back(ep.depth_ptr(ref.t, c));
            obs.depth_top_voxels.push_back(model.depth_top_voxels(depth, ep.width));
        }
    }
    obs.frames = frames_to_tensor(frame_ptrs, ds.manifest.image_size, ds.manifest.image_size);
    return obs;
}

inline TrainStats train_policy(const RunConfig& cfg, const std::string& data_dir,
                               const std::string& out_dir, const TrainOptions& topt = TrainOptions{}) {
    namespace fs = std::filesystem;
    const Scalar t0 = detail::now_seconds();
    Dataset ds = load_dataset(data_dir);
    if (ds.manifest.image_size != cfg.image_size || ds.manifest.n_cameras != cfg.n_cameras)
        throw ConfigError("dataset geometry (" + std::to_string(ds.manifest.image_size) + "px, " +
                          std::to_string(ds.manifest.n_cameras) + " cams) does not match config");

    PolicyModel model(cfg, ds.manifest.norm, cfg.seed);
    model.set_cameras(ds.cameras);
    ParamMap params = model.parameters();
    AdamOptimizer opt(params, cfg.lr);

    std::vector<SampleRef> samples;
    for (size_t e = 0; e < ds.episodes.size(); ++e)
        for (int64_t t = 0; t < ds.episodes[e].length(); ++t)
            samples.push_back({static_cast<int64_t>(e), t});
    if (samples.empty()) throw ConfigError("dataset has no training samples");

    fs::create_directories(out_dir);
    std::ofstream metrics(fs::path(out_dir) / "metrics.jsonl");
    if (!metrics) throw IoError("cannot write metrics log in " + out_dir);

    Rng shuffle_rng(Rng::derive(cfg.seed, 0x5f0f));
    Rng noise_rng(Rng::derive(cfg.seed, 0x90e5));
    const Scalar lambda = model.effective_lambda_aux();

    TrainStats stats;
    const int64_t steps_per_epoch = static_cast<int64_t>(samples.size()) / cfg.batch_size;
    for (int64_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        // Fisher-Yates with the run RNG; deterministic per seed.
        for (size_t i = samples.size(); i > 1; --i) {
            size_t j = static_cast<size_t>(shuffle_rng.uniform_int(0, static_cast<int64_t>(i) - 1));
            std::swap(samples[i - 1], samples[j]);
        }
        for (int64_t step = 0; step < steps_per_epoch; ++step) {
            std::vector<SampleRef> batch(samples.begin() + step * cfg.batch_size,
                                         samples.begin() + (step + 1) * cfg.batch_size);
            Tensor actions;
            ObsBatch obs = make_training_batch(model, ds, batch, actions);
            Conditioning cond = model.build_conditioning(obs);
            Tensor mse = diffusion_training_loss(
                [&](const Tensor& x, const std::vector<int64_t>& ks) {
                    return model.denoiser.forward(x, ks, cond.cond);
                },
                actions, model.sched, noise_rng);
            Tensor loss = mse;
            Scalar aux_val = 0.0;
            if (lambda > 0.0) {
                std::vector<const std::vector<Scalar>*> mask_ptrs;
                for (const auto& m : obs.masks) mask_ptrs.push_back(&m);
                Tensor aux = aux_bce_loss(cond.weights, mask_ptrs);
                aux_val = aux.item();
                loss = add(loss, scale(aux, lambda));
            }
            opt.zero_grad();
            loss.backward();
            opt.step();

            const Scalar loss_val = loss.item();
            if (stats.steps == 0) stats.initial_loss = loss_val;
            stats.final_loss = loss_val;
            ++stats.steps;
            if (stats.steps % topt.log_every == 1 || step + 1 == steps_per_epoch) {
                nlohmann::json line = {{"step", stats.steps},
                                       {"epoch", epoch},
                                       {"loss", loss_val},
                                       {"mse", mse.item()},
                                       {"aux", aux_val}};
                metrics << line.dump() << "\n";
                if (!topt.quiet)
                    std::cout << "[train] step " << stats.steps << " epoch " << epoch << " loss "
                              << loss_val << "\n";
            }
        }
    }
    stats.checkpoint_dir = (fs::path(out_dir) / "checkpoint").string();
    save_checkpoint(stats.checkpoint_dir, model);
    stats.wall_s = detail::now_seconds() - t0;
    nlohmann::json report = {{"steps", stats.steps},
                             {"initial_loss", stats.initial_loss},
                             {"final_loss", stats.final_loss},
                             {"wall_s", stats.wall_s},
                             {"config_hash", hex64(config_hash(cfg))}};
    std::ofstream rep(fs::path(out_dir) / "train_report.json");
    rep << report.dump(2) << "\n";
    metrics.flush();
    return stats;
}

// ---------------------------------------------------------------------------
// Evaluation

/// The four out-of-distribution camera rotations: +-5 degrees of yaw, then
/// +-5 degrees of pitch, cycled across trials.
inline std::array<std::pair<Scalar, Scalar>, 4> view_perturbation_grid() {
    return {{{5.0, 0.0}, {-5.0, 0.0}, {0.0, 5.0}, {0.0, -5.0}}};
}

struct EvalCondition {
    std::string name = "in_distribution";     // or view / layout / background
};

struct EvalResult {
    std::string condition;
    int64_t trials = 0;
    int64_t successes = 0;
    std::vector<uint64_t> seeds;
    Scalar wall_s = 0;

    Scalar rate() const { return trials ? static_cast<Scalar>(successes) / static_cast<Scalar>(trials) : 0.0; }
};

inline PolicyFn make_model_policy(PolicyModel& model, uint64_t rollout_seed) {
    return [&model, rollout_seed](const Episode& ep, const Scene&, int64_t t) {
        NoGradGuard ng;
        ObsBatch obs;
        std::vector<const uint8_t*> frame_ptrs;
        const int64_t prev = std::max<int64_t>(0, t - 1);
        const int64_t n_cams = static_cast<int64_t>(ep.cams.size());
        for (int64_t c = 0; c < n_cams; ++c)
            frame_ptrs.push_back(ep.frames[static_cast<size_t>(t)][static_cast<size_t>(c)].rgb.data());
        for (int64_t c = 0; c < n_cams; ++c)
            frame_ptrs.push_back(ep.frames[static_cast<size_t>(prev)][static_cast<size_t>(c)].rgb.data());
        obs.frames = frames_to_tensor(frame_ptrs, ep.height, ep.width);
        obs.proprio = Tensor::zeros({1, 8});
        for (int d = 0; d < 8; ++d)
            obs.proprio.data()[d] = ep.proprio[static_cast<size_t>(t)][static_cast<size_t>(d)];
        obs.task_ids = {ep.task_id};
        if (model.cfg.ablation == AblationMode::gt_depth_tokens) {
            std::vector<const float*> depth;
            for (int64_t c = 0; c < n_cams; ++c)
                depth.push_back(ep.frames[static_cast<size_t>(t)][static_cast<size_t>(c)].depth.data());
            obs.depth_top_voxels.push_back(model.depth_top_voxels(depth, ep.width));
        }
        Conditioning cond = model.build_conditioning(obs);
        Tensor chunk = sample_actions(model.denoiser, cond.cond, model.sched,
                                      model.cfg.action_horizon,
                                      Rng::derive(rollout_seed, static_cast<uint64_t>(t)));
        std::vector<std::array<Scalar, 7>> out;
        for (int64_t i = 0; i < model.cfg.exec_horizon; ++i) {
            std::array<Scalar, 7> a{};
            for (int d = 0; d < 7; ++d)
                a[static_cast<size_t>(d)] = model.norm.denormalize(chunk.data()[i * 7 + d], d);
            out.push_back(a);
        }
        return out;
    };
}

struct EvalOptions {
    int64_t trials = 100;
    uint64_t seed = 1000;
    int64_t task_id = 0;
    bool expert = false;   // evaluate the scripted expert instead of the model
    std::string out_dir;   // optional: writes metrics.jsonl and report.json
};

inline EvalResult evaluate_condition(PolicyModel* model, const std::string& condition,
                                     const EvalOptions& opt, std::ostream* metrics) {
    if (!(condition == "in_distribution" || condition == "view" || condition == "layout" ||
          condition == "background"))
        throw ConfigError("eval: unknown condition '" + condition + "'");
    const Scalar t0 = detail::now_seconds();
    EvalResult res;
    res.condition = condition;
    const uint64_t cond_seed = Rng::derive(opt.seed, fnv1a64(condition));
    const int64_t image_size = model ? model->cfg.image_size : 64;
    const int64_t n_cameras = model ? model->cfg.n_cameras : 1;
    const int64_t max_steps = model ? model->cfg.max_steps : 60;
    std::vector<CameraModel> base_cams =
        model ? model->cams : make_default_cameras(n_cameras, image_size);

    for (int64_t trial = 0; trial < opt.trials; ++trial) {
        const uint64_t trial_seed = Rng::derive(cond_seed, static_cast<uint64_t>(trial));
        std::optional<Perturbation> pert;
        if (condition == "layout") pert = Perturbation::layout();
        if (condition == "background")
            pert = Perturbation::background(1 + static_cast<int>(trial % 3));
        Scene scene = make_scene(trial_seed, opt.task_id, pert);
        std::vector<CameraModel> cams = base_cams;
        if (condition == "view") {
            const auto [yaw, pitch] = view_perturbation_grid()[static_cast<size_t>(trial % 4)];
            for (auto& c : cams) c = rotate_camera(c, yaw, pitch);
        }
        PolicyFn policy = opt.expert ? expert_policy()
                                     : make_model_policy(*model, Rng::derive(trial_seed, 0xac7));
        RolloutResult r = rollout(policy, scene, cams, max_steps);
        res.seeds.push_back(trial_seed);
        res.trials++;
        if (r.success) res.successes++;
        if (metrics) {
            nlohmann::json line = {{"condition", condition},
                                   {"trial", trial},
                                   {"seed", trial_seed},
                                   {"success", r.success},
                                   {"steps", r.steps}};
            (*metrics) << line.dump() << "\n";
        }
    }
    res.wall_s = detail::now_seconds() - t0;
    return res;
}

inline std::vector<EvalResult> evaluate_policy(PolicyModel* model,
                                               const std::vector<std::string>& conditions,
                                               const EvalOptions& opt) {
    namespace fs = std::filesystem;
    std::unique_ptr<std::ofstream> metrics;
    if (!opt.out_dir.empty()) {
        fs::create_directories(opt.out_dir);
        metrics = std::make_unique<std::ofstream>(fs::path(opt.out_dir) / "metrics.jsonl");
    }
    std::vector<EvalResult> results;
    for (const auto& c : conditions)
        results.push_back(evaluate_condition(model, c, opt, metrics.get()));
    if (!opt.out_dir.empty()) {
        nlohmann::json j = nlohmann::json::array();
        for (const auto& r : results) {
            j.push_back({{"condition", r.condition},
                         {"trials", r.trials},
                         {"successes", r.successes},
                         {"rate", r.rate()},
                         {"seeds", r.seeds},
                         {"wall_s", r.wall_s}});
        }
        std::ofstream rep(fs::path(opt.out_dir) / "report.json");
        rep << j.dump(2) << "\n";
    }
    return results;
}

// ---------------------------------------------------------------------------
// Ablation sweeps

struct AblationRun {
    AblationMode mode;
    uint64_t seed;
    Scalar final_loss = 0;
    EvalResult eval;
};

inline std::vector<AblationRun> run_ablation(const RunConfig& base,
                                             const std::vector<AblationMode>& modes,
                                             const std::vector<uint64_t>& seeds,
                                             const std::string& data_dir,
                                             const std::string& out_dir, int64_t eval_trials,
                                             bool quiet = true) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    std::vector<AblationRun> runs;
    for (AblationMode mode : modes) {
        for (uint64_t seed : seeds) {
            RunConfig cfg = base;
            cfg.ablation = mode;
            cfg.seed = seed;
            const std::string tag = ablation_to_string(mode) + "_s" + std::to_string(seed);
            TrainOptions topt;
            topt.quiet = quiet;
            TrainStats ts = train_policy(cfg, data_dir, (fs::path(out_dir) / tag).string(), topt);
            PolicyModel model = load_checkpoint(ts.checkpoint_dir);
            EvalOptions eopt;
            eopt.trials = eval_trials;
            eopt.seed = 7000 + seed;
            EvalResult er = evaluate_condition(&model, "in_distribution", eopt, nullptr);
            runs.push_back({mode, seed, ts.final_loss, er});
            if (!quiet)
                std::cout << "[ablate] " << tag << " success " << er.successes << "/" << er.trials
                          << "\n";
        }
    }
    // Summary table, one row per mode.
    nlohmann::json j = nlohmann::json::array();
    std::ostringstream table;
    table << std::left << std::setw(22) << "mode" << std::setw(10) << "seeds" << "success_rate\n";
    for (AblationMode mode : modes) {
        Scalar mean = 0;
        int64_t n = 0;
        std::vector<Scalar> rates;
        for (const auto& r : runs)
            if (r.mode == mode) {
                rates.push_back(r.eval.rate());
                mean += r.eval.rate();
                ++n;
            }
        mean /= static_cast<Scalar>(std::max<int64_t>(1, n));
        j.push_back({{"mode", ablation_to_string(mode)}, {"rates", rates}, {"mean_rate", mean}});
        table << std::left << std::setw(22) << ablation_to_string(mode) << std::setw(10) << n
              << mean << "\n";
    }
    std::ofstream rep(fs::path(out_dir) / "ablation_report.json");
    rep << j.dump(2) << "\n";
    std::ofstream tab(fs::path(out_dir) / "ablation_table.txt");
    tab << table.str();
    return runs;
}

// ---------------------------------------------------------------------------
// Token-weight visualization and focus statistics

/// Projects active voxels (pooled weight above the 99th percentile) into the
/// camera and composites a red overlay, intensity proportional to weight.
/// Returns false when nothing projects (blank overlay).
inline bool render_weight_overlay(const std::vector<Scalar>& pooled, const VoxelGrid& grid,
                                  const CameraModel& cam, const uint8_t* frame,
                                  std::vector<uint8_t>& out_rgb) {
    const int64_t npx = cam.width * cam.height;
    out_rgb.assign(frame, frame + npx * 3);
    if (pooled.empty()) return false;
    std::vector<Scalar> sorted = pooled;
    const size_t q99 = static_cast<size_t>(std::floor(0.99 * static_cast<double>(sorted.size() - 1)));
    std::nth_element(sorted.begin(), sorted.begin() + static_cast<std::ptrdiff_t>(q99), sorted.end());
    const Scalar thresh = sorted[q99];
    const Scalar peak = *std::max_element(pooled.begin(), pooled.end());
    if (!(peak > thresh)) return false;  // flat map: nothing clears the margin

    bool any = false;
    int64_t idx = 0;
    for (int64_t i = 0; i < grid.dims[0]; ++i)
        for (int64_t j = 0; j < grid.dims[1]; ++j)
            for (int64_t k = 0; k < grid.dims[2]; ++k, ++idx) {
                const Scalar w = pooled[static_cast<size_t>(idx)];
                if (!(w > thresh)) continue;
                PixelProjection pp =
                    world_to_image(cam, voxel_to_world(grid, i, j, k, /*centered=*/true));
                if (!pp.valid) continue;
                any = true;
                const Scalar alpha = std::clamp(w / peak, 0.0, 1.0);
                const int64_t u0 = static_cast<int64_t>(pp.u);
                const int64_t v0 = static_cast<int64_t>(pp.v);
                for (int64_t dv = -1; dv <= 1; ++dv)
                    for (int64_t du = -1; du <= 1; ++du) {
                        const int64_t u = u0 + du, v = v0 + dv;
                        if (u < 0 || u >= cam.width || v < 0 || v >= cam.height) continue;
                        const int64_t px = (v * cam.width + u) * 3;
                        auto& r = out_rgb[static_cast<size_t>(px)];
                        auto& g = out_rgb[static_cast<size_t>(px + 1)];
                        auto& b = out_rgb[static_cast<size_t>(px + 2)];
                        r = static_cast<uint8_t>(std::lround((1 - alpha) * r + alpha * 255.0));
                        g = static_cast<uint8_t>(std::lround((1 - alpha) * g));
                        b = static_cast<uint8_t>(std::lround((1 - alpha) * b));
                    }
            }
    if (!any) std::cerr << "[voxdiff] weight overlay: no active voxel projects into the image\n";
    return any;
}

/// Pooled (max over tokens) weight map for one stored observation.
inline std::vector<Scalar> pooled_weight_map(PolicyModel& model, const StoredEpisode& ep, int64_t t) {
    NoGradGuard ng;
    ObsBatch obs;
    std::vector<const uint8_t*> frame_ptrs;
    append_stored_obs(ep, t, frame_ptrs);
    obs.frames = frames_to_tensor(frame_ptrs, ep.height, ep.width);
    obs.proprio = Tensor::zeros({1, 8});
    for (int d = 0; d < 8; ++d)
        obs.proprio.data()[d] = ep.proprio[static_cast<size_t>(t)][static_cast<size_t>(d)];
    obs.task_ids = {ep.task_id};
    if (model.cfg.ablation == AblationMode::gt_depth_tokens) {
        std::vector<const float*> depth;
        for (int64_t c = 0; c < ep.n_cams; ++c) depth.push_back(ep.depth_ptr(t, c));
        obs.depth_top_voxels.push_back(model.depth_top_voxels(depth, ep.width));
    }
    Conditioning cond = model.build_conditioning(obs);
    if (!cond.weights.defined())
        throw ContractError("weight visualization requires a mode with token weights");
    Tensor pooled = reduce_max(cond.weights, 1);  // [1, Q]
    return pooled.vec();
}

inline void visualize_weights(PolicyModel& model, const StoredEpisode& ep,
                              const std::string& out_dir, int64_t frame_stride = 5) {
    namespace fs = std::filesystem;
    fs::create_directories(out_dir);
    const int64_t T = std::max<int64_t>(ep.length(), 1);
    for (int64_t t = 0; t < T; t += frame_stride) {
        std::vector<Scalar> pooled = pooled_weight_map(model, ep, t);
        std::vector<uint8_t> rgb;
        render_weight_overlay(pooled, model.grid, model.cams[0], ep.frame_ptr(t, 0), rgb);
        char name[48];
        std::snprintf(name, sizeof(name), "weights_t%04lld.ppm", static_cast<long long>(t));
        write_ppm((fs::path(out_dir) / name).string(), rgb.data(), ep.width, ep.height);
    }
}

/// Mean pooled weight inside vs outside the supervision mask over held-out
/// episodes (the quantitative focus statistic).
struct FocusStats {
    Scalar mean_inside = 0;
    Scalar mean_outside = 0;
    Scalar ratio() const { return mean_inside / std::max(mean_outside, 1e-300); }
};

inline FocusStats aux_focus_stats(PolicyModel& model, const std::vector<StoredEpisode>& episodes,
                                  int64_t frame_stride = 4) {
    Scalar sum_in = 0, sum_out = 0;
    int64_t n_in = 0, n_out = 0;
    for (const auto& ep : episodes) {
        for (int64_t t = 0; t < ep.length(); t += frame_stride) {
            std::vector<Scalar> pooled = pooled_weight_map(model, ep, t);
            const auto& pr = ep.proprio[static_cast<size_t>(t)];
            std::vector<Scalar> mask =
                model.supervision_mask({pr[0], pr[1], pr[2]}, ep.event_positions());
            for (size_t i = 0; i < pooled.size(); ++i) {
                if (mask[i] != 0.0) {
                    sum_in += pooled[i];
                    ++n_in;
                } else {
                    sum_out += pooled[i];
                    ++n_out;
                }
            }
        }
    }
    FocusStats f;
    if (n_in) f.mean_inside = sum_in / static_cast<Scalar>(n_in);
    if (n_out) f.mean_outside = sum_out / static_cast<Scalar>(n_out);
    return f;
}

}  // namespace voxdiff
