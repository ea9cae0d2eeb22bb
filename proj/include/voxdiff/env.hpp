#pragma once

#include <optional>

#include "voxdiff/geometry.hpp"

namespace voxdiff {

// Desk-scale reach-grasp-place environment. A point gripper moves above a
// table at z = 0, grasps a ball-shaped object and carries it to a goal pad.
// No contact dynamics: grasping snaps the object to the end effector,
// releasing drops it to its rest height.

struct SceneObject {
    Vec3 pos;
    std::array<Scalar, 3> color{};
    Scalar radius = 0.012;
};

struct ScenePalette {
    std::array<Scalar, 3> background;
    std::array<Scalar, 3> table;
};

inline const std::vector<ScenePalette>& scene_palettes() {
    static const std::vector<ScenePalette> p = {
        {{0.16, 0.16, 0.20}, {0.72, 0.70, 0.66}},  // training palette
        {{0.35, 0.30, 0.25}, {0.92, 0.92, 0.95}},
        {{0.10, 0.22, 0.12}, {0.25, 0.25, 0.28}},
        {{0.30, 0.12, 0.30}, {0.55, 0.65, 0.75}},
    };
    return p;
}

struct Scene {
    Vec3 workspace_min{-0.2, -0.2, 0.0};
    Vec3 workspace_max{0.2, 0.2, 0.4};
    Vec3 object_pos, goal_pos, ee_pos;
    bool gripper_open = true;
    bool held = false;
    std::vector<SceneObject> distractors;
    int64_t task_id = 0;
    int palette = 0;
    Scalar object_radius = 0.02;
    Scalar goal_radius = 0.024;
    Scalar ee_radius = 0.011;
};

enum class PerturbationKind { view, layout, background };

struct Perturbation {
    PerturbationKind kind = PerturbationKind::view;
    Scalar yaw_deg = 0, pitch_deg = 0;  // view
    Scalar layout_offset_m = 0.10;      // layout
    int palette = 1;                    // background

    static Perturbation view(Scalar yaw, Scalar pitch) {
        Perturbation p;
        p.kind = PerturbationKind::view;
        p.yaw_deg = yaw;
        p.pitch_deg = pitch;
        return p;
    }
    static Perturbation layout(Scalar offset_m = 0.10) {
        Perturbation p;
        p.kind = PerturbationKind::layout;
        p.layout_offset_m = offset_m;
        return p;
    }
    static Perturbation background(int palette = 1) {
        Perturbation p;
        p.kind = PerturbationKind::background;
        p.palette = palette;
        return p;
    }
};

// Object/goal spawn region used when generating demonstrations.
inline constexpr Scalar kTrainRegionHalf = 0.08;

inline bool in_train_region(Scalar x, Scalar y) {
    return std::abs(x) <= kTrainRegionHalf && std::abs(y) <= kTrainRegionHalf;
}

/// Deterministic scene sampler. Layout perturbations resample the object and
/// goal in a region shifted by layout_offset_m until both land outside the
/// training box; view perturbations never touch the scene (they act on the
/// camera); background perturbations only swap the palette.
inline Scene make_scene(uint64_t seed, int64_t task_id,
                        const std::optional<Perturbation>& pert = std::nullopt) {
    Rng rng(Rng::derive(seed, 0x5cee));
    Scene s;
    s.task_id = task_id;

    Scalar shift_x = 0.0, shift_y = 0.0;
    const bool layout = pert && pert->kind == PerturbationKind::layout;
    if (layout) {
        const Scalar theta = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
        shift_x = pert->layout_offset_m * std::cos(theta);
        shift_y = pert->layout_offset_m * std::sin(theta);
    }
    auto sample_xy = [&](Scalar& x, Scalar& y) {
        for (int attempt = 0; attempt < 256; ++attempt) {
            x = shift_x + rng.uniform(-kTrainRegionHalf, kTrainRegionHalf);
            y = shift_y + rng.uniform(-kTrainRegionHalf, kTrainRegionHalf);
            if (!layout || !in_train_region(x, y)) return;
        }
        throw ContractError("make_scene: could not sample outside the training region");
    };

    Scalar ox, oy;
    sample_xy(ox, oy);
    s.object_pos = {ox, oy, s.object_radius};
    Scalar gx, gy;
    do {
        sample_xy(gx, gy);
    } while (std::hypot(gx - ox, gy - oy) < 0.07);
    s.goal_pos = {gx, gy, s.object_radius};

    s.ee_pos = {rng.uniform(-0.05, 0.05), rng.uniform(-0.05, 0.05), rng.uniform(0.10, 0.14)};

    const std::array<std::array<Scalar, 3>, 3> dcolors = {
        {{0.85, 0.75, 0.2}, {0.5, 0.5, 0.55}, {0.6, 0.35, 0.2}}};
    for (int d = 0; d < 2; ++d) {
        SceneObject obj;
        for (int attempt = 0; attempt < 256; ++attempt) {
            obj.pos = {rng.uniform(-0.16, 0.16), rng.uniform(-0.16, 0.16), 0.012};
            const bool clear = std::hypot(obj.pos.x - ox, obj.pos.y - oy) > 0.06 &&
                               std::hypot(obj.pos.x - gx, obj.pos.y - gy) > 0.06;
            if (clear) break;
        }
        obj.color = dcolors[static_cast<size_t>(d)];
        s.distractors.push_back(obj);
    }

    if (pert && pert->kind == PerturbationKind::background)
        s.palette = pert->palette % static_cast<int>(scene_palettes().size());
    return s;
}

// ---------------------------------------------------------------------------
// Dynamics

struct StepParams {
    Scalar max_disp = 0.02;      // per-step EE translation clip, meters
    Scalar grasp_radius = 0.015; // closing within this distance grabs the object
    Scalar success_tol = 0.02;   // object-to-goal distance for success
};

/// Applies one 7-D action: (dx, dy, dz, droll, dpitch, dyaw, gripper).
/// Rotations are carried for interface fidelity but unused by this scene.
/// Returns true when the gripper state flipped during the step.
inline bool env_step(Scene& s, const std::array<Scalar, 7>& action,
                     const StepParams& p = StepParams{}) {
    Vec3 d{action[0], action[1], action[2]};
    const Scalar n = d.norm();
    if (n > p.max_disp) d = d * (p.max_disp / n);
    s.ee_pos = s.ee_pos + d;
    s.ee_pos.x = std::clamp(s.ee_pos.x, s.workspace_min.x, s.workspace_max.x);
    s.ee_pos.y = std::clamp(s.ee_pos.y, s.workspace_min.y, s.workspace_max.y);
    s.ee_pos.z = std::clamp(s.ee_pos.z, static_cast<Scalar>(0.005), s.workspace_max.z);
    if (s.held) s.object_pos = s.ee_pos;

    bool flipped = false;
    const Scalar g = action[6];
    if (g > 0.3 && s.gripper_open) {
        s.gripper_open = false;
        flipped = true;
        if (!s.held && (s.ee_pos - s.object_pos).norm() <= p.grasp_radius) {
            s.held = true;
            s.object_pos = s.ee_pos;
        }
    } else if (g < -0.3 && !s.gripper_open) {
        s.gripper_open = true;
        flipped = true;
        if (s.held) {
            s.held = false;
            s.object_pos.z = s.object_radius;  // falls to rest height
        }
    }
    return flipped;
}

inline bool is_success(const Scene& s, Scalar tol = 0.02) {
    if (s.held || !s.gripper_open) return false;
    Vec3 rest_goal = s.goal_pos;
    return (s.object_pos - rest_goal).norm() <= tol;
}

/// 8-D proprioception: EE xyz, three orientation slots (fixed zeros for this
/// scene), gripper open fraction, held flag.
inline std::array<Scalar, 8> proprio_state(const Scene& s) {
    return {s.ee_pos.x, s.ee_pos.y, s.ee_pos.z, 0.0, 0.0, 0.0,
            s.gripper_open ? 1.0 : 0.0, s.held ? 1.0 : 0.0};
}

// ---------------------------------------------------------------------------
// Scripted expert

inline constexpr Scalar kGraspEps = 0.01;
inline constexpr Scalar kPlaceEps = 0.008;

/// Proportional controller: reach then grasp, carry then release.
inline std::array<Scalar, 7> expert_action(const Scene& s, const StepParams& p = StepParams{}) {
    auto toward = [&](const Vec3& target, Scalar grip) {
        Vec3 d = target - s.ee_pos;
        const Scalar n = d.norm();
        if (n > p.max_disp) d = d * (p.max_disp / n);
        return std::array<Scalar, 7>{d.x, d.y, d.z, 0, 0, 0, grip};
    };
    if (!s.held) {
        if (is_success(s, p.success_tol)) return {0, 0, 0, 0, 0, 0, 0};
        if ((s.object_pos - s.ee_pos).norm() <= kGraspEps) return {0, 0, 0, 0, 0, 0, 1.0};
        return toward(s.object_pos, s.gripper_open ? -1.0 : 1.0);
    }
    Vec3 target = s.goal_pos;
    if ((target - s.ee_pos).norm() <= kPlaceEps) return {0, 0, 0, 0, 0, 0, -1.0};
    return toward(target, 1.0);
}

// ---------------------------------------------------------------------------
// Renderer
//
// Z-buffered splatting through world_to_image: the table is splatted as a
// dense point grid, markers and objects as billboard discs at their center
// depth. Also produces the camera-frame depth map (0 where only background).

struct RenderedView {
    std::vector<uint8_t> rgb;   // H * W * 3
    std::vector<float> depth;   // H * W, camera-frame meters, 0 = background
    int64_t width = 0, height = 0;
};

namespace detail {

inline void splat_disc(RenderedView& img, const CameraModel& cam, const Vec3& center,
                       Scalar radius, const std::array<Scalar, 3>& color, Scalar depth_bias = 0.0) {
    PixelProjection c = world_to_image(cam, center);
    if (c.depth <= kDepthEps) return;
    const Scalar depth = c.depth + depth_bias;
    const Scalar r_px = cam.K[0] * radius / c.depth;
    const int64_t u_lo = static_cast<int64_t>(std::floor(c.u - r_px));
    const int64_t u_hi = static_cast<int64_t>(std::ceil(c.u + r_px));
    const int64_t v_lo = static_cast<int64_t>(std::floor(c.v - r_px));
    const int64_t v_hi = static_cast<int64_t>(std::ceil(c.v + r_px));
    for (int64_t v = std::max<int64_t>(0, v_lo); v <= std::min(img.height - 1, v_hi); ++v)
        for (int64_t u = std::max<int64_t>(0, u_lo); u <= std::min(img.width - 1, u_hi); ++u) {
            const Scalar du = (static_cast<Scalar>(u) + 0.5) - c.u;
            const Scalar dv = (static_cast<Scalar>(v) + 0.5) - c.v;
            if (du * du + dv * dv > r_px * r_px) continue;
            const int64_t i = v * img.width + u;
            if (img.depth[static_cast<size_t>(i)] != 0.0f &&
                static_cast<Scalar>(img.depth[static_cast<size_t>(i)]) <= depth)
                continue;
            img.depth[static_cast<size_t>(i)] = static_cast<float>(depth);
            for (int ch = 0; ch < 3; ++ch)
                img.rgb[static_cast<size_t>(i * 3 + ch)] =
                    static_cast<uint8_t>(std::lround(std::clamp(color[static_cast<size_t>(ch)], 0.0, 1.0) * 255.0));
        }
}

}  // namespace detail

inline RenderedView render(const Scene& s, const CameraModel& cam) {
    RenderedView img;
    img.width = cam.width;
    img.height = cam.height;
    const auto& pal = scene_palettes()[static_cast<size_t>(s.palette)];
    img.rgb.resize(static_cast<size_t>(cam.width * cam.height * 3));
    img.depth.assign(static_cast<size_t>(cam.width * cam.height), 0.0f);
    for (int64_t i = 0; i < cam.width * cam.height; ++i)
        for (int ch = 0; ch < 3; ++ch)
            img.rgb[static_cast<size_t>(i * 3 + ch)] =
                static_cast<uint8_t>(std::lround(pal.background[static_cast<size_t>(ch)] * 255.0));

    // Table plane: dense splat grid over the workspace rectangle.
    const int64_t steps = 3 * std::max(cam.width, cam.height);
    const Scalar sx = (s.workspace_max.x - s.workspace_min.x) / static_cast<Scalar>(steps);
    const Scalar sy = (s.workspace_max.y - s.workspace_min.y) / static_cast<Scalar>(steps);
    for (int64_t ix = 0; ix <= steps; ++ix)
        for (int64_t iy = 0; iy <= steps; ++iy) {
            Vec3 p{s.workspace_min.x + sx * static_cast<Scalar>(ix),
                   s.workspace_min.y + sy * static_cast<Scalar>(iy), 0.0};
            PixelProjection pp = world_to_image(cam, p);
            if (!pp.valid) continue;
            const int64_t u = static_cast<int64_t>(pp.u);
            const int64_t v = static_cast<int64_t>(pp.v);
            const int64_t i = v * cam.width + u;
            if (img.depth[static_cast<size_t>(i)] != 0.0f &&
                static_cast<Scalar>(img.depth[static_cast<size_t>(i)]) <= pp.depth)
                continue;
            img.depth[static_cast<size_t>(i)] = static_cast<float>(pp.depth);
            for (int ch = 0; ch < 3; ++ch)
                img.rgb[static_cast<size_t>(i * 3 + ch)] =
                    static_cast<uint8_t>(std::lround(pal.table[static_cast<size_t>(ch)] * 255.0));
        }

    // Goal pad sits on the table regardless of the logical goal height.
    detail::splat_disc(img, cam, {s.goal_pos.x, s.goal_pos.y, 0.001}, s.goal_radius,
                       {0.10, 0.80, 0.15});
    for (const auto& d : s.distractors) detail::splat_disc(img, cam, d.pos, d.radius, d.color);
    detail::splat_disc(img, cam, s.object_pos, s.object_radius, {0.90, 0.10, 0.10});
    detail::splat_disc(img, cam, s.ee_pos, s.ee_radius, {0.10, 0.25, 0.92}, -0.004);
    return img;
}

/// Default rig: one front camera and one side camera, both looking at the
/// workspace center.
inline std::vector<CameraModel> make_default_cameras(int64_t n_cameras, int64_t image_size) {
    const Scalar f = 1.15 * static_cast<Scalar>(image_size);
    std::vector<CameraModel> cams;
    cams.push_back(make_lookat_camera({0.42, 0.0, 0.52}, {0.0, 0.0, 0.05}, f, image_size, image_size));
    if (n_cameras > 1)
        cams.push_back(make_lookat_camera({0.05, 0.44, 0.48}, {0.0, 0.0, 0.05}, f, image_size, image_size));
    if (n_cameras > 2) throw ConfigError("env: at most 2 cameras supported");
    return cams;
}

// ---------------------------------------------------------------------------
// Episodes and rollouts

/// One recorded demonstration or evaluation trajectory. Frames are stored as
/// u8 RGB and depth as f32, matching the on-disk layout.
struct Episode {
    int64_t width = 0, height = 0;
    std::vector<std::vector<RenderedView>> frames;  // [T][cams]
    std::vector<std::array<Scalar, 8>> proprio;     // [T]
    std::vector<std::array<Scalar, 7>> actions;     // [T]
    std::vector<std::pair<int64_t, Vec3>> gripper_events;  // (t, EE position after the flip)
    int64_t task_id = 0;
    bool success = false;
    std::vector<CameraModel> cams;

    int64_t length() const { return static_cast<int64_t>(actions.size()); }
};

/// A policy consumes the current and previous frames plus proprioception and
/// returns a chunk of one or more actions to execute.
using PolicyFn = std::function<std::vector<std::array<Scalar, 7>>(
    const Episode& so_far, const Scene& scene, int64_t t)>;

struct RolloutResult {
    Episode episode;
    bool success = false;
    int64_t steps = 0;
};

inline RolloutResult rollout(const PolicyFn& policy, Scene scene,
                             const std::vector<CameraModel>& cams, int64_t max_steps,
                             const StepParams& params = StepParams{}) {
    RolloutResult out;
    Episode& ep = out.episode;
    ep.task_id = scene.task_id;
    ep.cams = cams;
    ep.width = cams.empty() ? 0 : cams[0].width;
    ep.height = cams.empty() ? 0 : cams[0].height;

    std::vector<std::array<Scalar, 7>> pending;
    size_t pending_at = 0;
    for (int64_t t = 0; t < max_steps; ++t) {
        std::vector<RenderedView> views;
        views.reserve(cams.size());
        for (const auto& c : cams) views.push_back(render(scene, c));
        ep.frames.push_back(std::move(views));
        ep.proprio.push_back(proprio_state(scene));

        if (pending_at >= pending.size()) {
            pending = policy(ep, scene, t);
            pending_at = 0;
            if (pending.empty()) throw ContractError("rollout: policy returned no actions");
            for (const auto& a : pending)
                if (a.size() != 7) throw ContractError("rollout: policy action must be 7-D");
        }
        const auto action = pending[pending_at++];
        const bool flipped = env_step(scene, action, params);
        ep.actions.push_back(action);
        if (flipped) ep.gripper_events.emplace_back(t, scene.ee_pos);
        if (is_success(scene, params.success_tol)) {
            out.success = true;
            out.steps = t + 1;
            break;
        }
    }
    if (!out.success) out.steps = ep.length();
    // Observation at max_steps == 0 still records one frame set.
    if (ep.frames.empty()) {
        std::vector<RenderedView> views;
        for (const auto& c : cams) views.push_back(render(scene, c));
        ep.frames.push_back(std::move(views));
        ep.proprio.push_back(proprio_state(scene));
    }
    ep.success = out.success;
    return out;
}

inline PolicyFn expert_policy(const StepParams& params = StepParams{}) {
    return [params](const Episode&, const Scene& scene, int64_t) {
        return std::vector<std::array<Scalar, 7>>{expert_action(scene, params)};
    };
}

}  // namespace voxdiff
