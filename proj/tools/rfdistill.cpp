// rfdistill: command-line driver for the distillation lab.

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "rfd/cli.hpp"

using namespace rfd;
namespace fs = std::filesystem;

namespace {

struct Common {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string run_dir;
    std::string out_dir;
};

void add_common(CLI::App* cmd, Common& c) {
    cmd->add_option("--config", c.config, "JSON config file; omitted keys keep their defaults");
    cmd->add_option("--seed", c.seed, "Override the config seed");
    cmd->add_option("--run-dir", c.run_dir, "Exact output directory (default: <out_dir>/<cmd>-<time>-seed<seed>)");
    cmd->add_option("--out-dir", c.out_dir, "Parent of generated run directories");
}

RunConfig resolve(const Common& c) {
    RunConfig cfg = c.config.empty() ? RunConfig{} : load_config(c.config);
    if (c.seed) cfg.seed = *c.seed;
    if (!c.out_dir.empty()) cfg.out_dir = c.out_dir;
    cfg.validate();
    return cfg;
}

fs::path run_path(const Common& c, const RunConfig& cfg, const std::string& command) {
    return c.run_dir.empty() ? cli::RunDirectory::default_path(cfg.out_dir, command, cfg.seed) : fs::path(c.run_dir);
}

int report_error(const std::string& code, const std::string& message, int exit_code) {
    std::cerr << Json{{"error", code}, {"message", message}}.dump() << "\n";
    return exit_code;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Few-step rectified-flow distillation on 2D toy data"};
    app.require_subcommand(1);

    Common common;
    std::string teacher, from, checkpoint;
    std::size_t n = 0;
    std::optional<std::size_t> steps;
    double guidance = 1.0;
    int bits = 8;
    cli::DistillFlags flags;

    auto* gen = app.add_subcommand("gen-data", "Draw a ground-truth dataset");
    add_common(gen, common);
    gen->add_option("--n", n, "Sample count (default: eval.n)");

    auto* train = app.add_subcommand("train-teacher", "Train the flow-matching teacher");
    add_common(train, common);

    auto* distill = app.add_subcommand("distill", "Distill a few-step student");
    add_common(distill, common);
    distill->add_option("--teacher", teacher, "Teacher checkpoint")->required();
    distill->add_option("--from", from, "Trained 4-step student (for --steps 2 or --split-ft)");
    distill->add_option("--steps", flags.steps, "Student steps")->check(CLI::IsMember({4, 2}));
    distill->add_flag("--no-adv", flags.no_adv, "Drop the adversarial term");
    distill->add_flag("--no-pretrain", flags.no_pretrain, "Skip trajectory-guidance pretraining");
    distill->add_flag("--no-timestep-sharing", flags.no_timestep_sharing, "Use random DMD timesteps");
    distill->add_flag("--no-refresh", flags.no_refresh, "Never refresh discriminator heads");
    distill->add_flag("--split-ft", flags.split_ft, "Split-timestep fine-tuning of a 4-step student");

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
    add_common(eval, common);
    eval->add_option("--checkpoint", checkpoint, "Checkpoint to evaluate")->required();
    eval->add_option("--steps", steps, "Sampling steps (default: from the checkpoint)");

    auto* ablate = app.add_subcommand("ablate", "Run the ablation matrix over the config seeds");
    add_common(ablate, common);
    ablate->add_option("--teacher", teacher, "Shared teacher (default: train one per seed)");

    auto* quant = app.add_subcommand("quantize", "Quantize weights and report the tradeoff");
    add_common(quant, common);
    quant->add_option("--checkpoint", checkpoint, "Checkpoint to quantize")->required();
    quant->add_option("--bits", bits, "Bit width")->check(CLI::IsMember({64, 16, 8, 6}));

    auto* sample = app.add_subcommand("sample", "Draw samples from a checkpoint");
    add_common(sample, common);
    sample->add_option("--checkpoint", checkpoint, "Checkpoint to sample")->required();
    sample->add_option("--n", n, "Sample count")->default_val(1000);
    sample->add_option("--steps", steps, "Sampling steps (default: from the checkpoint)");
    sample->add_option("--guidance", guidance, "CFG scale")->default_val(1.0);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e);
    }

    try {
        const RunConfig cfg = resolve(common);
        CLI::App* cmd = app.get_subcommands().front();
        const std::string name = cmd->get_name();
        cli::RunDirectory run(run_path(common, cfg, name), name);
        Json args = Json::object();
        for (const CLI::Option* o : cmd->get_options())
            if (o->count() > 0 && o->get_name() != "--help" && o->get_name() != "--run-dir" &&
                o->get_name() != "--out-dir")
                args[o->get_name()] = o->as<std::string>();

        if (cmd == gen) cli::cmd_gen_data(cfg, n > 0 ? n : cfg.eval.n, run);
        else if (cmd == train) cli::cmd_train_teacher(cfg, run);
        else if (cmd == distill)
            cli::cmd_distill(cfg, teacher, from.empty() ? std::nullopt : std::optional<fs::path>(from), flags, run);
        else if (cmd == eval) {
            const MetricReport r = cli::cmd_eval(cfg, checkpoint, steps, run);
            std::cout << "mmd2 " << r.mmd2 << " coverage " << r.mode_coverage << " accuracy "
                      << r.conditional_accuracy << "\n";
        } else if (cmd == ablate)
            cli::cmd_ablate(cfg, teacher.empty() ? std::nullopt : std::optional<fs::path>(teacher), run);
        else if (cmd == quant) cli::cmd_quantize(cfg, checkpoint, bits, run);
        else if (cmd == sample) cli::cmd_sample(cfg, checkpoint, n, steps, guidance, run);

        run.finish(cfg, args);
        std::cout << run.dir().string() << "\n";
    } catch (const Error& e) {
        return report_error(std::string(to_string(e.code())), e.what(), 10 + static_cast<int>(e.code()));
    } catch (const std::exception& e) {
        return report_error("internal", e.what(), 1);
    }
    return 0;
}
