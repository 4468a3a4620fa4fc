#ifndef PANCSEG_COMMANDS_HPP
#define PANCSEG_COMMANDS_HPP

// The pipeline stages as file-to-file commands. Each command validates its
// configuration and inputs first, builds its outputs in a staging directory
// and moves them into place only when everything succeeded.

#include <chrono>
#include <cstdio>
#include <ostream>

#include "pancseg/pipeline.hpp"

namespace pancseg {

namespace detail {

inline std::string fixed(double v, int digits = 4) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

class Stopwatch {
public:
    double seconds() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    }

private:
    std::chrono::steady_clock::time_point start_ = std::chrono::steady_clock::now();
};

inline std::filesystem::path superpixel_file(const std::filesystem::path& dir, const std::string& name) {
    return dir / (name + "_sp.mhd");
}

inline std::filesystem::path map_file(const std::filesystem::path& dir, const std::string& name, int ns,
                                      const char* kind) {
    return dir / (name + "_ns" + std::to_string(ns) + "_" + kind + ".mhd");
}

/// Loads a case and its superpixel stack from the superpixels stage.
inline CaseData load_segmented_case(const PipelineConfig& cfg, const StageHashes& h, const std::string& name) {
    CaseData c = load_case(cfg, name);
    const auto labels = read_meta<std::int32_t>(superpixel_file(stage_dir(cfg, "superpixels", h.superpixels), name));
    if (!(labels.dims() == c.image.dims())) {
        throw DataError(name + ": superpixel stack dims differ from the volume");
    }
    c.superpixels = unstack_labels(labels);
    return c;
}

inline Retention load_retention(const PipelineConfig& cfg, const StageHashes& h, const CaseData& c) {
    Retention r;
    r.retained = read_retained_csv(stage_dir(cfg, "retention", h.retention) / (c.name + "_retained.csv"),
                                   c.image.dims().nz);
    for (std::size_t z = 0; z < r.retained.size(); ++z) {
        const int count = c.superpixels[z].count();
        for (int id : r.retained[z]) {
            if (id >= count) {
                throw DataError(c.name + ": retained superpixel " + std::to_string(id) + " does not exist in slice " +
                                std::to_string(z));
            }
        }
    }
    return r;
}

inline std::vector<std::string> require_test_cases(const PipelineConfig& cfg) {
    auto test = cfg.test_list();
    if (test.empty()) {
        throw UsageError("the test case list is empty");
    }
    return test;
}

inline NetworkParams<float> load_trained_params(const PipelineConfig& cfg, const StageHashes& h,
                                                const NetworkSpec& spec) {
    const auto dir = stage_dir(cfg, "train", h.train);
    require_stage(dir, "train");
    std::uint64_t stored = 0;
    auto params = read_binary_file(dir / "params.pscn", [&](std::istream& in) { return read_params(in, spec, &stored); });
    if (stored != h.train) {
        throw DataError((dir / "params.pscn").string() + " was trained under a different configuration");
    }
    return params;
}

/// Every stage's view of the test cases, read back from stage outputs.
inline std::vector<StageInputs> load_stage_inputs(const PipelineConfig& cfg, const StageHashes& h) {
    const auto names = require_test_cases(cfg);
    const auto infer_dir = stage_dir(cfg, "infer", h.infer);
    require_stage(stage_dir(cfg, "superpixels", h.superpixels), "superpixels");
    require_stage(stage_dir(cfg, "retention", h.retention), "rf-apply");
    require_stage(infer_dir, "infer");
    std::vector<StageInputs> out;
    for (const auto& name : names) {
        const CaseData c = load_segmented_case(cfg, h, name);
        const Retention r = load_retention(cfg, h, c);
        StageInputs s;
        s.name = name;
        s.optimal = optimal_mask(c);
        s.retained = retention_mask(c, r);
        for (int ns : cfg.test_scales) {
            s.P.emplace(ns, read_meta<float>(map_file(infer_dir, name, ns, "P")));
            if (cfg.smooth_enabled) {
                s.G.emplace(ns, read_meta<float>(map_file(infer_dir, name, ns, "G")));
            }
        }
        for (const auto* maps : {&s.P, &s.G}) {
            for (const auto& [ns, m] : *maps) {
                if (!(m.dims() == c.mask.dims())) {
                    throw DataError(name + ": probability map dims differ from the mask");
                }
            }
        }
        s.truth = c.mask;
        out.push_back(std::move(s));
    }
    return out;
}

inline std::optional<double> eval_threshold(const PipelineConfig& cfg) {
    if (cfg.eval_threshold == "swept") return std::nullopt;
    return csv::parse_number(cfg.eval_threshold);
}

}  // namespace detail

/// Writes phantom.count synthetic volume/mask pairs into data.dir.
inline void cmd_phantom(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    detail::Stopwatch sw;
    StagingDir out(cfg.data_dir);
    const auto names = cfg.phantom_names();
    for (int i = 0; i < cfg.phantom_count; ++i) {
        const auto& name = names[static_cast<std::size_t>(i)];
        const auto [v, m] = phantom_case(cfg, i);
        save_volume(v, out / (name + ".mhd"));
        save_mask(m, out / (name + "_mask.mhd"), v.spacing());
        std::size_t fg = 0;
        for (auto b : m.values()) fg += b;
        log << "phantom " << name << " " << to_string(v.dims()) << " foreground "
            << detail::fixed(static_cast<double>(fg) / static_cast<double>(m.size())) << "\n";
    }
    out.merge_into();
    log << "wrote " << cfg.phantom_count << " phantoms to " << cfg.data_dir.string() << " ("
        << detail::fixed(sw.seconds(), 1) << " s)\n";
}

/// SLIC superpixels for every listed case.
inline void cmd_superpixels(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    const auto h = stage_hashes(cfg);
    detail::Stopwatch sw;
    StagingDir out(stage_dir(cfg, "superpixels", h.superpixels));
    for (const auto& name : cfg.all_cases()) {
        const CaseData c = load_case(cfg, name);
        const auto sp = superpixel_volume(c.image, cfg.slic, cfg.threads);
        write_meta(detail::superpixel_file(out.path(), name), stack_labels(sp), c.spacing);
        std::size_t n = 0;
        for (const auto& s : sp) n += static_cast<std::size_t>(s.count());
        log << "superpixels " << name << ": " << n << " over " << sp.size() << " slices\n";
    }
    out.commit();
    log << "superpixels done (" << detail::fixed(sw.seconds(), 1) << " s)\n";
}

/// Trains the two-level cascade on the training cases.
inline void cmd_rf_train(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    const auto h = stage_hashes(cfg);
    detail::Stopwatch sw;
    std::vector<CaseData> cases;
    for (const auto& name : cfg.train_list()) cases.push_back(load_case(cfg, name));
    std::vector<const CaseData*> ptrs;
    for (const auto& c : cases) ptrs.push_back(&c);
    const CascadeModel model = train_rf_stage(ptrs, cfg);
    StagingDir out(stage_dir(cfg, "rf", h.rf));
    write_binary_file(out / "cascade.psrf", [&](std::ostream& o) { write_cascade(o, model); });
    out.commit();
    log << "rf-train: level 1 oob error " << detail::fixed(model.level1.oob_error) << ", level 2 oob error "
        << detail::fixed(model.level2.oob_error) << " (" << detail::fixed(sw.seconds(), 1) << " s)\n";
}

/// Response maps and retained superpixels for every listed case.
inline void cmd_rf_apply(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    const auto h = stage_hashes(cfg);
    const auto rf_dir = stage_dir(cfg, "rf", h.rf);
    require_stage(rf_dir, "rf-train");
    require_stage(stage_dir(cfg, "superpixels", h.superpixels), "superpixels");
    detail::Stopwatch sw;
    const CascadeModel model = read_binary_file(rf_dir / "cascade.psrf", [](std::istream& in) { return read_cascade(in); });
    StagingDir out(stage_dir(cfg, "retention", h.retention));
    std::ofstream sens(out / "sensitivity.csv", std::ios::binary);
    csv::write_row(sens, {"case", "retained", "sensitivity", "dice"});
    for (const auto& name : cfg.all_cases()) {
        const CaseData c = detail::load_segmented_case(cfg, h, name);
        const Retention r = apply_rf_stage(model, c, cfg.threads);
        write_meta(out / (name + "_response.mhd"), r.response, c.spacing);
        write_retained_csv(out / (name + "_retained.csv"), r);
        const double s = retention_sensitivity(c, r), d = dice(retention_mask(c, r), c.mask);
        csv::write_row(sens, {name, std::to_string(r.count()), csv::number(s), csv::number(d)});
        log << "rf-apply " << name << ": " << r.count() << " retained, sensitivity " << detail::fixed(s) << ", dice "
            << detail::fixed(d) << "\n";
    }
    sens.close();
    if (!sens) throw DataError("cannot write sensitivity.csv");
    out.commit();
    log << "rf-apply done (" << detail::fixed(sw.seconds(), 1) << " s)\n";
}

/// Builds the augmented patch set from the training cases' candidates.
inline void cmd_augment(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    const auto h = stage_hashes(cfg);
    require_stage(stage_dir(cfg, "retention", h.retention), "rf-apply");
    detail::Stopwatch sw;
    std::vector<CaseData> cases;
    std::vector<Retention> ret;
    for (const auto& name : cfg.train_list()) {
        cases.push_back(detail::load_segmented_case(cfg, h, name));
        ret.push_back(detail::load_retention(cfg, h, cases.back()));
    }
    std::vector<const CaseData*> cp;
    std::vector<const Retention*> rp;
    std::size_t retained = 0;
    for (std::size_t i = 0; i < cases.size(); ++i) {
        cp.push_back(&cases[i]);
        rp.push_back(&ret[i]);
        retained += ret[i].count();
    }
    const auto acfg = cfg.augment_config();
    const PatchDataset ds = augment_stage(cp, rp, acfg);
    StagingDir out(stage_dir(cfg, "augment", h.augment));
    write_binary_file(out / "dataset.pspd", [&](std::ostream& o) { write_dataset(o, ds); });
    out.commit();
    const auto positives = std::count(ds.labels.begin(), ds.labels.end(), std::uint8_t{1});
    log << "augment: " << retained << " retained superpixels x " << acfg.scales.size() << " scales x "
        << std::max(acfg.deformations, 1) << " = " << ds.count() << " patches (" << positives << " positive, "
        << detail::fixed(sw.seconds(), 1) << " s)\n";
}

/// Trains the ConvNet on the augmented set; writes params.pscn and trace.csv.
inline void cmd_train(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    const auto h = stage_hashes(cfg);
    const auto aug_dir = stage_dir(cfg, "augment", h.augment);
    require_stage(aug_dir, "augment");
    const NetworkSpec spec = cfg.network_spec();
    const PatchDataset ds = read_binary_file(aug_dir / "dataset.pspd", [](std::istream& in) { return read_dataset(in); });
    if (ds.patch_size != spec.input.h) {
        throw DataError("dataset patch size " + std::to_string(ds.patch_size) + " does not match the network input");
    }
    std::optional<PatchDataset> valid;
    if (!cfg.valid_cases.empty()) {
        std::vector<CaseData> cases;
        std::vector<Retention> ret;
        for (const auto& name : cfg.valid_cases) {
            cases.push_back(detail::load_segmented_case(cfg, h, name));
            ret.push_back(detail::load_retention(cfg, h, cases.back()));
        }
        std::vector<const CaseData*> cp;
        std::vector<const Retention*> rp;
        for (std::size_t i = 0; i < cases.size(); ++i) {
            cp.push_back(&cases[i]);
            rp.push_back(&ret[i]);
        }
        AugmentConfig vcfg = cfg.augment_config();
        vcfg.deformations = 0;
        valid = augment_stage(cp, rp, vcfg);
    }
    detail::Stopwatch sw;
    const TrainResult res = train_sgd(spec, ds, cfg.train_config(), valid ? &*valid : nullptr, [&](const EpochRecord& e) {
        log << "epoch " << e.epoch << " loss " << detail::fixed(e.loss) << " accuracy " << detail::fixed(e.train_accuracy);
        if (!std::isnan(e.validation_accuracy)) log << " validation " << detail::fixed(e.validation_accuracy);
        log << " (" << detail::fixed(sw.seconds(), 1) << " s)\n";
        log.flush();
    });
    StagingDir out(stage_dir(cfg, "train", h.train));
    write_binary_file(out / "params.pscn", [&](std::ostream& o) { write_params(o, spec, res.params, h.train); });
    write_trace_csv(out / "trace.csv", res.trace);
    out.commit();
    log << "train done (" << detail::fixed(sw.seconds(), 1) << " s)\n";
}

/// P(x), G(P(x)) and the final mask for every test case and test N_s.
inline void cmd_infer(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    const auto names = detail::require_test_cases(cfg);
    const auto h = stage_hashes(cfg);
    require_stage(stage_dir(cfg, "retention", h.retention), "rf-apply");
    const NetworkSpec spec = cfg.network_spec();
    const auto params = detail::load_trained_params(cfg, h, spec);
    StagingDir out(stage_dir(cfg, "infer", h.infer));
    for (const auto& name : names) {
        const CaseData c = detail::load_segmented_case(cfg, h, name);
        const Retention r = detail::load_retention(cfg, h, c);
        for (int ns : cfg.test_scales) {
            detail::Stopwatch sw;
            const InferenceMaps m = infer_stage(spec, params, c, r, ns, cfg.smooth, cfg.threads);
            write_scores_csv(out / (name + "_ns" + std::to_string(ns) + "_scores.csv"), m.scores);
            write_meta(detail::map_file(out.path(), name, ns, "P"), m.P, c.spacing);
            if (cfg.smooth_enabled) {
                write_meta(detail::map_file(out.path(), name, ns, "G"), m.G, c.spacing);
            }
            const LabelMask final_mask = threshold_map(cfg.smooth_enabled ? m.G : m.P, cfg.threshold);
            save_mask(final_mask, detail::map_file(out.path(), name, ns, "mask"), c.spacing);
            log << "infer " << name << " N_s=" << ns << ": dice at " << csv::number(cfg.threshold) << " "
                << detail::fixed(dice(final_mask, c.mask)) << " (" << detail::fixed(sw.seconds(), 1) << " s)\n";
        }
    }
    out.commit();
}

/// Per-stage Dice reports. Writes into `out_dir`, or a content-addressed
/// eval directory when it is empty.
inline StageComparison cmd_eval(const PipelineConfig& cfg, std::ostream& log, const std::filesystem::path& out_dir = {}) {
    cfg.validate();
    const auto h = stage_hashes(cfg);
    const auto cases = detail::load_stage_inputs(cfg, h);
    const StageComparison cmp = compare_stages(cases, detail::eval_threshold(cfg));
    const auto dest = out_dir.empty() ? stage_dir(cfg, "eval", fnv1a(cfg.canonical({"eval."}), h.infer)) : out_dir;
    StagingDir out(dest);
    auto meta = cmp.thresholds;
    for (auto& [column, t] : meta) column = "threshold " + column;
    meta.insert(meta.begin(), {"eval.threshold", cfg.eval_threshold});
    emit_report(cmp.reports, {}, out.path(), meta);
    out.merge_into();
    for (const auto& r : cmp.reports) {
        log << r.column() << ": mean " << detail::fixed(r.mean) << " std " << detail::fixed(r.std) << " min "
            << detail::fixed(r.min) << " max " << detail::fixed(r.max) << "\n";
    }
    log << "reports in " << dest.string() << "\n";
    return cmp;
}

/// Case-averaged Dice over the threshold grid for every P and G variant.
inline std::vector<SweepCurve> cmd_sweep(const PipelineConfig& cfg, std::ostream& log,
                                         const std::filesystem::path& out_dir = {}) {
    cfg.validate();
    const auto h = stage_hashes(cfg);
    const auto cases = detail::load_stage_inputs(cfg, h);
    const StageComparison cmp = compare_stages(cases, std::nullopt);
    const auto dest = out_dir.empty() ? stage_dir(cfg, "sweep", h.infer) : out_dir;
    StagingDir out(dest);
    write_sweep_csv(cmp.curves, out / "sweep.csv");
    out.merge_into();
    for (const auto& c : cmp.curves) {
        const auto k = c.best_index();
        log << c.variant << " N_s=" << c.scales << ": best mean dice " << detail::fixed(c.mean_dice[k]) << " at "
            << csv::number(c.thresholds[k]) << "\n";
    }
    log << "sweep in " << (dest / "sweep.csv").string() << "\n";
    return cmp.curves;
}

/// Every stage in order, skipping stages whose outputs already exist.
/// Phantoms are generated when the default case set is missing.
inline StageComparison cmd_run(const PipelineConfig& cfg, std::ostream& log) {
    cfg.validate();
    const bool default_cases = cfg.train_cases.empty() && cfg.valid_cases.empty() && cfg.test_cases.empty();
    bool have_data = true;
    for (const auto& name : cfg.all_cases()) {
        for (const char* suffix : {".mhd", "_mask.mhd"}) {
            have_data = have_data && std::filesystem::exists(cfg.data_dir / (name + suffix));
        }
    }
    if (!have_data && default_cases) {
        cmd_phantom(cfg, log);
    }
    const auto h = stage_hashes(cfg);
    const std::pair<const char*, std::pair<std::uint64_t, void (*)(const PipelineConfig&, std::ostream&)>> stages[] = {
        {"superpixels", {h.superpixels, cmd_superpixels}}, {"rf", {h.rf, cmd_rf_train}},
        {"retention", {h.retention, cmd_rf_apply}},         {"augment", {h.augment, cmd_augment}},
        {"train", {h.train, cmd_train}},                     {"infer", {h.infer, cmd_infer}}};
    for (const auto& [stage, step] : stages) {
        if (std::filesystem::is_directory(stage_dir(cfg, stage, step.first))) {
            log << stage << ": up to date\n";
        } else {
            step.second(cfg, log);
        }
    }
    cmd_sweep(cfg, log);
    return cmd_eval(cfg, log);
}

}  // namespace pancseg

#endif  // PANCSEG_COMMANDS_HPP
