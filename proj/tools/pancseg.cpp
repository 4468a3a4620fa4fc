// pancseg: command-line driver for the coarse-to-fine pancreas segmentation
// pipeline. Exit codes: 0 success, 1 usage error, 2 data error.

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pancseg/commands.hpp"

namespace {

constexpr const char* kConfigEnv = "PANCSEG_CONFIG";

struct Options {
    std::string config;
    std::vector<std::string> overrides;
    int threads = -1;
    bool deterministic = false;
    int count = -1;
    std::string data_out;
    bool no_smooth = false;
    double threshold = -1.0;
    std::string report_out;
};

pancseg::PipelineConfig build_config(const Options& o) {
    pancseg::PipelineConfig cfg;
    std::string path = o.config;
    if (path.empty()) {
        if (const char* env = std::getenv(kConfigEnv); env && *env) path = env;
    }
    if (!path.empty()) cfg.load_file(path);
    for (const auto& kv : o.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos || eq == 0) {
            throw pancseg::UsageError("--set expects key=value, got '" + kv + "'");
        }
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o.count >= 0) cfg.phantom_count = o.count;
    if (!o.data_out.empty()) cfg.data_dir = o.data_out;
    if (o.no_smooth) cfg.smooth_enabled = false;
    if (o.threshold >= 0.0) cfg.threshold = o.threshold;
    if (o.threads >= 0) {
        if (o.threads == 0) throw pancseg::UsageError("--threads must be at least 1");
        cfg.threads = static_cast<unsigned>(o.threads);
    }
    if (o.deterministic) cfg.threads = 1;
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Coarse-to-fine pancreas segmentation: superpixels, random-forest cascade, ConvNet, 3D smoothing."};
    app.require_subcommand(1);
    app.fallthrough();
    Options o;
    app.add_option("-c,--config", o.config, std::string("Config file of key = value lines (default: $") + kConfigEnv + ")");
    app.add_option("-s,--set", o.overrides, "Override a config key, key=value (repeatable)");
    app.add_option("-j,--threads", o.threads, "Worker threads");
    app.add_flag("--deterministic", o.deterministic, "Force a single thread");

    auto* phantom = app.add_subcommand("phantom", "Generate synthetic phantom volumes and masks");
    phantom->add_option("-n,--count", o.count, "Number of phantoms (phantom.count)");
    phantom->add_option("-o,--out", o.data_out, "Output directory (data.dir)");
    app.add_subcommand("superpixels", "SLIC superpixels for every case");
    app.add_subcommand("rf-train", "Train the two-level random-forest cascade");
    app.add_subcommand("rf-apply", "Response maps and retained superpixel candidates");
    app.add_subcommand("augment", "Build the multi-scale, TPS-deformed training patch set");
    app.add_subcommand("train", "Train the ConvNet");
    auto* infer = app.add_subcommand("infer", "Probability maps and final masks for the test cases");
    infer->add_flag("--no-smooth", o.no_smooth, "Skip 3D smoothing; the final mask is thresholded from P(x)");
    infer->add_option("-t,--threshold", o.threshold, "Operating threshold (infer.threshold)")->check(CLI::Range(0.0, 1.0));
    auto* eval = app.add_subcommand("eval", "Dice reports for every stage");
    eval->add_option("-o,--out", o.report_out, "Report directory (default: content-addressed under work.dir)");
    eval->add_flag("--no-smooth", o.no_smooth, "Evaluate without smoothed maps");
    auto* sweep = app.add_subcommand("sweep", "Mean Dice over a threshold grid");
    sweep->add_option("-o,--out", o.report_out, "Output directory (default: content-addressed under work.dir)");
    sweep->add_flag("--no-smooth", o.no_smooth, "Sweep without smoothed maps");
    auto* run = app.add_subcommand("run", "Every stage in order, reusing up-to-date outputs");
    run->add_flag("--no-smooth", o.no_smooth, "Skip 3D smoothing");
    app.add_subcommand("config", "Print the effective configuration");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    }

    try {
        const pancseg::PipelineConfig cfg = build_config(o);
        const std::string cmd = app.get_subcommands().front()->get_name();
        auto& log = std::cerr;
        if (cmd == "phantom") pancseg::cmd_phantom(cfg, log);
        else if (cmd == "superpixels") pancseg::cmd_superpixels(cfg, log);
        else if (cmd == "rf-train") pancseg::cmd_rf_train(cfg, log);
        else if (cmd == "rf-apply") pancseg::cmd_rf_apply(cfg, log);
        else if (cmd == "augment") pancseg::cmd_augment(cfg, log);
        else if (cmd == "train") pancseg::cmd_train(cfg, log);
        else if (cmd == "infer") pancseg::cmd_infer(cfg, log);
        else if (cmd == "eval") pancseg::cmd_eval(cfg, log, o.report_out);
        else if (cmd == "sweep") pancseg::cmd_sweep(cfg, log, o.report_out);
        else if (cmd == "run") pancseg::cmd_run(cfg, log);
        else if (cmd == "config") {
            cfg.validate();
            std::cout << cfg.dump();
        }
    } catch (const pancseg::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const pancseg::DataError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 0;
}
