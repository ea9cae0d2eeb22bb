// voxdiff command-line harness: demonstration generation, training,
// evaluation, ablation sweeps, and token-weight visualization.
//
// Exit codes: 0 success, 1 validation/config error, 2 runtime error.

#include <iostream>

#include "CLI11.hpp"
#include "voxdiff/voxdiff.hpp"

namespace vd = voxdiff;

namespace {

vd::RunConfig load_or_default(const std::string& path) {
    if (path.empty()) return vd::RunConfig{};
    return vd::load_config(path);
}

int run(int argc, char** argv) {
    CLI::App app{"voxdiff: voxel-lifted diffusion policy harness"};
    app.require_subcommand(1);

    std::string config_path, out_dir, data_dir, ckpt_dir, perturb, mode_list, seed_list;
    uint64_t seed = 1;
    int64_t episodes = 100, trials = 100, episode_idx = 0;
    bool expert = false;
    bool quiet = false;

    auto* gen = app.add_subcommand("gen-data", "Generate expert demonstrations");
    gen->add_option("--config", config_path, "Run config (JSON); defaults used when omitted");
    gen->add_option("--out", out_dir, "Output dataset directory")->required();
    gen->add_option("--episodes", episodes, "Number of episodes (default 100)");
    gen->add_option("--seed", seed, "Master seed (default 1)");

    auto* train = app.add_subcommand("train", "Train a policy on a dataset");
    train->add_option("--config", config_path, "Run config (JSON); defaults used when omitted");
    train->add_option("--data", data_dir, "Dataset directory (overrides config data_path)");
    train->add_option("--out", out_dir, "Run output directory")->required();
    train->add_option("--seed", seed, "Seed override");
    train->add_option("--mode", mode_list, "Ablation mode override (e.g. full, image2d)");
    train->add_flag("--quiet", quiet, "Suppress per-step console output");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint (or the scripted expert)");
    eval->add_option("--ckpt", ckpt_dir, "Checkpoint directory (omit with --expert)");
    eval->add_option("--out", out_dir, "Report directory")->required();
    eval->add_option("--trials", trials, "Trials per condition (default 100)");
    eval->add_option("--seed", seed, "Evaluation seed (default 1)");
    eval->add_option("--perturb", perturb, "Condition: view, layout or background (default none)");
    eval->add_flag("--expert", expert, "Evaluate the scripted expert policy");

    auto* ablate = app.add_subcommand("ablate", "Train and evaluate ablation variants");
    ablate->add_option("--config", config_path, "Run config (JSON); defaults used when omitted");
    ablate->add_option("--data", data_dir, "Dataset directory")->required();
    ablate->add_option("--out", out_dir, "Output directory")->required();
    ablate->add_option("--modes", mode_list, "Comma-separated ablation modes")->required();
    ablate->add_option("--seeds", seed_list, "Comma-separated seeds (default 1,2,3)");
    ablate->add_option("--trials", trials, "Eval trials per run (default 100)");

    auto* viz = app.add_subcommand("viz", "Export token-weight overlays for one episode");
    viz->add_option("--ckpt", ckpt_dir, "Checkpoint directory")->required();
    viz->add_option("--data", data_dir, "Dataset directory")->required();
    viz->add_option("--episode", episode_idx, "Episode index (default 0)");
    viz->add_option("--out", out_dir, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;  // bad arguments are validation errors
    }

    if (gen->parsed()) {
        vd::RunConfig cfg = load_or_default(config_path);
        vd::GenerateOptions opt;
        opt.n_episodes = episodes;
        opt.seed = seed;
        opt.image_size = cfg.image_size;
        opt.n_cameras = cfg.n_cameras;
        opt.max_steps = cfg.max_steps;
        opt.grid = cfg.grid();
        vd::DatasetManifest m = vd::generate_dataset(opt, out_dir);
        std::cout << "wrote " << m.episodes << " episodes (" << m.successes
                  << " successful) to " << out_dir << "\n";
        return 0;
    }
    if (train->parsed()) {
        vd::RunConfig cfg = load_or_default(config_path);
        if (train->count("--seed")) cfg.seed = seed;
        if (!mode_list.empty()) cfg.ablation = vd::ablation_from_string(mode_list);
        const std::string data = data_dir.empty() ? cfg.data_path : data_dir;
        if (data.empty()) throw vd::ConfigError("train: no dataset (set --data or data_path)");
        vd::TrainOptions topt;
        topt.quiet = quiet;
        vd::TrainStats ts = vd::train_policy(cfg, data, out_dir, topt);
        std::cout << "trained " << ts.steps << " steps, final loss " << ts.final_loss
                  << ", checkpoint at " << ts.checkpoint_dir << "\n";
        return 0;
    }
    if (eval->parsed()) {
        std::unique_ptr<vd::PolicyModel> model;
        if (!expert) {
            if (ckpt_dir.empty()) throw vd::ConfigError("eval: --ckpt required unless --expert");
            model = std::make_unique<vd::PolicyModel>(vd::load_checkpoint(ckpt_dir));
        }
        vd::EvalOptions opt;
        opt.trials = trials;
        opt.seed = seed;
        opt.expert = expert;
        opt.out_dir = out_dir;
        std::vector<std::string> conditions{perturb.empty() ? "in_distribution" : perturb};
        auto results = vd::evaluate_policy(model.get(), conditions, opt);
        for (const auto& r : results)
            std::cout << r.condition << ": " << r.successes << "/" << r.trials << " ("
                      << 100.0 * r.rate() << "%)\n";
        return 0;
    }
    if (ablate->parsed()) {
        vd::RunConfig cfg = load_or_default(config_path);
        std::vector<vd::AblationMode> modes;
        {
            std::stringstream ss(mode_list);
            std::string item;
            while (std::getline(ss, item, ',')) modes.push_back(vd::ablation_from_string(item));
        }
        std::vector<uint64_t> seeds;
        if (seed_list.empty()) {
            seeds = {1, 2, 3};
        } else {
            std::stringstream ss(seed_list);
            std::string item;
            while (std::getline(ss, item, ',')) seeds.push_back(std::stoull(item));
        }
        auto runs = vd::run_ablation(cfg, modes, seeds, data_dir, out_dir, trials, /*quiet=*/false);
        std::cout << "ablation table written to " << out_dir << "/ablation_table.txt\n";
        return 0;
    }
    if (viz->parsed()) {
        vd::PolicyModel model = vd::load_checkpoint(ckpt_dir);
        vd::Dataset ds = vd::load_dataset(data_dir);
        if (episode_idx < 0 || episode_idx >= static_cast<int64_t>(ds.episodes.size()))
            throw vd::ConfigError("viz: episode index out of range");
        vd::visualize_weights(model, ds.episodes[static_cast<size_t>(episode_idx)], out_dir);
        std::cout << "overlays written to " << out_dir << "\n";
        return 0;
    }
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const vd::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
