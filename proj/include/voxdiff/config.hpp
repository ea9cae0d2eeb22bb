#pragma once

#include <filesystem>
#include <fstream>
#include <set>

#include "json.hpp"
#include "voxdiff/geometry.hpp"

namespace voxdiff {

enum class AblationMode {
    full,
    image2d,
    random_tokens,
    all_voxels_coarse,
    gt_depth_tokens,
    no_aux_supervision,
    concat_decoder,
    conv_decoder,
};

inline const std::vector<std::pair<AblationMode, std::string>>& ablation_names() {
    static const std::vector<std::pair<AblationMode, std::string>> n = {
        {AblationMode::full, "full"},
        {AblationMode::image2d, "image2d"},
        {AblationMode::random_tokens, "random_tokens"},
        {AblationMode::all_voxels_coarse, "all_voxels_coarse"},
        {AblationMode::gt_depth_tokens, "gt_depth_tokens"},
        {AblationMode::no_aux_supervision, "no_aux_supervision"},
        {AblationMode::concat_decoder, "concat_decoder"},
        {AblationMode::conv_decoder, "conv_decoder"},
    };
    return n;
}

inline std::string ablation_to_string(AblationMode m) {
    for (const auto& [mode, name] : ablation_names())
        if (mode == m) return name;
    throw ConfigError("unknown ablation mode");
}

inline AblationMode ablation_from_string(const std::string& s) {
    for (const auto& [mode, name] : ablation_names())
        if (name == s) return mode;
    throw ConfigError("ablation: unknown mode '" + s + "'");
}

/// Full run configuration. Defaults are the reference scale: 40^3 grid of
/// 1 cm voxels, C=32 volume channels, 200 spatial tokens projected to width
/// 512 (so 202 conditioning tokens), 100 denoising steps.
struct RunConfig {
    // grid
    Vec3 r_min{-0.2, -0.2, 0.0};
    Vec3 r_max{0.2, 0.2, 0.4};
    Scalar voxel_size = 0.01;
    std::array<int64_t, 3> grid_dims{40, 40, 40};

    // model
    int64_t c_vol = 32;        // volume feature channels
    int64_t c_model = 512;     // decoder width (conditioning projection target)
    int64_t n_tokens = 200;    // spatial tokens
    int64_t deform_heads = 4;
    int64_t deform_points = 4;
    int64_t token_hidden = 64;
    int64_t blocks = 4;
    int64_t attn_heads = 8;
    int64_t mlp_ratio = 4;
    int64_t action_horizon = 8;
    int64_t exec_horizon = 4;
    int64_t n_tasks = 4;

    // schedule
    int64_t diffusion_steps = 100;
    Scalar beta_min = 1e-4;
    Scalar beta_max = 0.02;

    // optimizer
    Scalar lr = 1e-3;
    int64_t batch_size = 16;
    int64_t epochs = 10;
    uint64_t seed = 1;

    // auxiliary supervision
    Scalar lambda_aux = 0.1;
    int64_t radius_vox = 2;

    // environment
    int64_t image_size = 64;
    int64_t n_cameras = 1;
    int64_t max_steps = 60;

    AblationMode ablation = AblationMode::full;
    std::string data_path;

    VoxelGrid grid() const { return VoxelGrid(r_min, r_max, voxel_size, grid_dims); }
    int64_t conditioning_tokens() const { return n_tokens + 2; }

    void validate() const {
        auto need = [](bool ok, const std::string& field, const std::string& why) {
            if (!ok) throw ConfigError(field + ": " + why);
        };
        grid();  // checks grid consistency
        need(c_vol >= 1, "model.c_vol", "must be positive");
        need(c_model >= 1, "model.c_model", "must be positive");
        need(n_tokens >= 1, "model.n_tokens", "must be positive");
        need(deform_heads >= 1 && c_vol % deform_heads == 0, "model.deform_heads",
             "must be positive and divide model.c_vol");
        need(deform_points >= 1, "model.deform_points", "must be positive");
        need(token_hidden >= 1, "model.token_hidden", "must be positive");
        need(blocks >= 1, "model.blocks", "must be positive");
        need(attn_heads >= 1 && c_model % attn_heads == 0, "model.attn_heads",
             "must be positive and divide model.c_model");
        need(mlp_ratio >= 1, "model.mlp_ratio", "must be positive");
        need(action_horizon >= 1, "model.action_horizon", "must be positive");
        need(exec_horizon >= 1 && exec_horizon <= action_horizon, "model.exec_horizon",
             "must lie in [1, action_horizon]");
        need(n_tasks >= 1, "model.n_tasks", "must be positive");
        need(diffusion_steps >= 1, "schedule.steps", "must be >= 1");
        need(beta_min > 0 && beta_min <= beta_max && beta_max < 1, "schedule.beta",
             "need 0 < beta_min <= beta_max < 1");
        need(lr > 0, "optim.lr", "must be positive");
        need(batch_size >= 1, "optim.batch_size", "must be positive");
        need(epochs >= 0, "optim.epochs", "must be >= 0");
        need(lambda_aux >= 0, "aux.lambda", "must be >= 0");
        need(radius_vox >= 0, "aux.radius_vox", "must be >= 0");
        need(image_size >= 16, "env.image_size", "must be >= 16");
        need(n_cameras >= 1 && n_cameras <= 2, "env.n_cameras", "must be 1 or 2");
        need(max_steps >= 0, "env.max_steps", "must be >= 0");
    }
};

namespace detail {

inline void reject_unknown_keys(const nlohmann::json& j, const std::set<std::string>& known,
                                const std::string& scope) {
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!known.count(it.key()))
            throw ConfigError("unknown key '" + (scope.empty() ? it.key() : scope + "." + it.key()) + "'");
}

inline std::array<Scalar, 3> vec3_field(const nlohmann::json& j, const std::string& key) {
    auto v = j.at(key).get<std::vector<Scalar>>();
    if (v.size() != 3) throw ConfigError(key + ": needs 3 entries");
    return {v[0], v[1], v[2]};
}

}  // namespace detail

inline nlohmann::json config_to_json(const RunConfig& c) {
    nlohmann::json j;
    j["grid"] = {{"r_min", {c.r_min.x, c.r_min.y, c.r_min.z}},
                 {"r_max", {c.r_max.x, c.r_max.y, c.r_max.z}},
                 {"s", c.voxel_size},
                 {"dims", {c.grid_dims[0], c.grid_dims[1], c.grid_dims[2]}}};
    j["model"] = {{"c_vol", c.c_vol},
                  {"c_model", c.c_model},
                  {"n_tokens", c.n_tokens},
                  {"deform_heads", c.deform_heads},
                  {"deform_points", c.deform_points},
                  {"token_hidden", c.token_hidden},
                  {"blocks", c.blocks},
                  {"attn_heads", c.attn_heads},
                  {"mlp_ratio", c.mlp_ratio},
                  {"action_horizon", c.action_horizon},
                  {"exec_horizon", c.exec_horizon},
                  {"n_tasks", c.n_tasks}};
    j["schedule"] = {{"steps", c.diffusion_steps}, {"beta_min", c.beta_min}, {"beta_max", c.beta_max}};
    j["optim"] = {{"lr", c.lr}, {"batch_size", c.batch_size}, {"epochs", c.epochs}, {"seed", c.seed}};
    j["aux"] = {{"lambda", c.lambda_aux}, {"radius_vox", c.radius_vox}};
    j["env"] = {{"image_size", c.image_size}, {"n_cameras", c.n_cameras}, {"max_steps", c.max_steps}};
    j["ablation"] = ablation_to_string(c.ablation);
    j["data_path"] = c.data_path;
    return j;
}

inline RunConfig config_from_json(const nlohmann::json& j) {
    RunConfig c;
    detail::reject_unknown_keys(
        j, {"grid", "model", "schedule", "optim", "aux", "env", "ablation", "data_path"}, "");
    if (j.contains("grid")) {
        const auto& g = j.at("grid");
        detail::reject_unknown_keys(g, {"r_min", "r_max", "s", "dims"}, "grid");
        if (g.contains("r_min")) {
            auto v = detail::vec3_field(g, "r_min");
            c.r_min = {v[0], v[1], v[2]};
        }
        if (g.contains("r_max")) {
            auto v = detail::vec3_field(g, "r_max");
            c.r_max = {v[0], v[1], v[2]};
        }
        if (g.contains("s")) c.voxel_size = g.at("s").get<Scalar>();
        if (g.contains("dims")) {
            auto v = g.at("dims").get<std::vector<int64_t>>();
            if (v.size() != 3) throw ConfigError("grid.dims: needs 3 entries");
            c.grid_dims = {v[0], v[1], v[2]};
        }
    }
    if (j.contains("model")) {
        const auto& m = j.at("model");
        detail::reject_unknown_keys(m,
                                    {"c_vol", "c_model", "n_tokens", "deform_heads", "deform_points",
                                     "token_hidden", "blocks", "attn_heads", "mlp_ratio",
                                     "action_horizon", "exec_horizon", "n_tasks"},
                                    "model");
        c.c_vol = m.value("c_vol", c.c_vol);
        c.c_model = m.value("c_model", c.c_model);
        c.n_tokens = m.value("n_tokens", c.n_tokens);
        c.deform_heads = m.value("deform_heads", c.deform_heads);
        c.deform_points = m.value("deform_points", c.deform_points);
        c.token_hidden = m.value("token_hidden", c.token_hidden);
        c.blocks = m.value("blocks", c.blocks);
        c.attn_heads = m.value("attn_heads", c.attn_heads);
        c.mlp_ratio = m.value("mlp_ratio", c.mlp_ratio);
        c.action_horizon = m.value("action_horizon", c.action_horizon);
        c.exec_horizon = m.value("exec_horizon", c.exec_horizon);
        c.n_tasks = m.value("n_tasks", c.n_tasks);
    }
    if (j.contains("schedule")) {
        const auto& s = j.at("schedule");
        detail::reject_unknown_keys(s, {"steps", "beta_min", "beta_max"}, "schedule");
        c.diffusion_steps = s.value("steps", c.diffusion_steps);
        c.beta_min = s.value("beta_min", c.beta_min);
        c.beta_max = s.value("beta_max", c.beta_max);
    }
    if (j.contains("optim")) {
        const auto& o = j.at("optim");
        detail::reject_unknown_keys(o, {"lr", "batch_size", "epochs", "seed"}, "optim");
        c.lr = o.value("lr", c.lr);
        c.batch_size = o.value("batch_size", c.batch_size);
        c.epochs = o.value("epochs", c.epochs);
        c.seed = o.value("seed", c.seed);
    }
    if (j.contains("aux")) {
        const auto& a = j.at("aux");
        detail::reject_unknown_keys(a, {"lambda", "radius_vox"}, "aux");
        c.lambda_aux = a.value("lambda", c.lambda_aux);
        c.radius_vox = a.value("radius_vox", c.radius_vox);
    }
    if (j.contains("env")) {
        const auto& e = j.at("env");
        detail::reject_unknown_keys(e, {"image_size", "n_cameras", "max_steps"}, "env");
        c.image_size = e.value("image_size", c.image_size);
        c.n_cameras = e.value("n_cameras", c.n_cameras);
        c.max_steps = e.value("max_steps", c.max_steps);
    }
    if (j.contains("ablation")) c.ablation = ablation_from_string(j.at("ablation").get<std::string>());
    if (j.contains("data_path")) c.data_path = j.at("data_path").get<std::string>();
    c.validate();
    return c;
}

inline RunConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("config file not found: " + path);
    nlohmann::json j;
    try {
        is >> j;
    } catch (const std::exception& e) {
        throw ConfigError("config parse failure in " + path + ": " + e.what());
    }
    return config_from_json(j);
}

inline void save_config(const std::string& path, const RunConfig& c) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write config: " + path);
    os << config_to_json(c).dump(2) << "\n";
}

inline uint64_t config_hash(const RunConfig& c) { return fnv1a64(config_to_json(c).dump()); }

/// Hash with the ablation field masked out; ablation sweeps must share it.
inline uint64_t config_hash_modulo_mode(const RunConfig& c) {
    RunConfig copy = c;
    copy.ablation = AblationMode::full;
    return config_hash(copy);
}

inline bool operator==(const RunConfig& a, const RunConfig& b) {
    return config_to_json(a) == config_to_json(b);
}

}  // namespace voxdiff
