#ifndef PANCSEG_PIPELINE_HPP
#define PANCSEG_PIPELINE_HPP

// End-to-end orchestration: configuration, the in-memory stages shared by
// the command-line tool and the acceptance run, and the on-disk layout of
// stage artifacts.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "pancseg/augment.hpp"
#include "pancseg/convnet.hpp"
#include "pancseg/evaluation.hpp"
#include "pancseg/inference.hpp"
#include "pancseg/rf_cascade.hpp"
#include "pancseg/superpixel.hpp"
#include "pancseg/volume.hpp"

namespace pancseg {

// ---------------------------------------------------------------------------
// Configuration

struct PipelineConfig {
    std::filesystem::path data_dir = "data";
    std::filesystem::path work_dir = "work";
    std::vector<std::string> train_cases;  ///< empty: first 80% of the phantoms
    std::vector<std::string> valid_cases;
    std::vector<std::string> test_cases;   ///< empty: the remaining phantoms

    int phantom_count = 10;
    PhantomConfig phantom;
    double window_lo = -160.0;
    double window_hi = 240.0;

    SlicConfig slic;
    CascadeTrainConfig rf;

    int train_scales = 2;        ///< N_s at training time
    int train_deformations = 8;  ///< N_t
    std::vector<int> test_scales{1, 4};
    int test_deformations = 0;
    int patch_size = 64;
    TpsDeformConfig tps;

    std::string network;  ///< explicit spec text; empty builds the classifier below
    double net_width = 1.0;
    int net_fc_units = 256;
    double net_dropout = 0.5;
    TrainConfig train;

    SmoothConfig smooth;
    bool smooth_enabled = true;
    double threshold = 0.4;
    std::string eval_threshold = "swept";  ///< "swept" or a number

    std::uint64_t seed = 1;
    unsigned threads = 1;

    /// Calls f(key, member) for every configurable value.
    template <class Self, class F>
    static void visit(Self& c, F&& f) {
        f("data.dir", c.data_dir);
        f("work.dir", c.work_dir);
        f("cases.train", c.train_cases);
        f("cases.valid", c.valid_cases);
        f("cases.test", c.test_cases);
        f("phantom.count", c.phantom_count);
        f("phantom.nx", c.phantom.dims.nx);
        f("phantom.ny", c.phantom.dims.ny);
        f("phantom.nz", c.phantom.dims.nz);
        f("phantom.spacing_x", c.phantom.spacing.sx);
        f("phantom.spacing_y", c.phantom.spacing.sy);
        f("phantom.spacing_z", c.phantom.spacing.sz);
        f("phantom.seed", c.phantom.seed);
        f("phantom.blob_count", c.phantom.blob_count);
        f("phantom.blob_elongation", c.phantom.blob_elongation);
        f("phantom.texture_amplitude", c.phantom.texture_amplitude);
        f("phantom.contrast_gap", c.phantom.contrast_gap);
        f("phantom.fat_margin_fraction", c.phantom.fat_margin_fraction);
        f("phantom.speckle_count", c.phantom.speckle_count);
        f("phantom.lobule_fraction", c.phantom.lobule_fraction);
        f("window.lo", c.window_lo);
        f("window.hi", c.window_hi);
        f("slic.region_size", c.slic.region_size);
        f("slic.compactness", c.slic.compactness);
        f("slic.iterations", c.slic.iterations);
        f("slic.min_region_fraction", c.slic.min_region_fraction);
        f("slic.intensity_scale", c.slic.intensity_scale);
        f("rf.patch_size", c.rf.cascade.patch_size);
        f("rf.stride", c.rf.cascade.stride);
        f("rf.gate", c.rf.cascade.gate);
        f("rf.passthrough", c.rf.cascade.passthrough);
        f("rf.negative_ratio", c.rf.negative_ratio);
        f("rf.max_samples", c.rf.max_samples);
        f("forest.trees", c.rf.forest.tree_count);
        f("forest.max_depth", c.rf.forest.max_depth);
        f("forest.features_per_split", c.rf.forest.features_per_split);
        f("forest.min_samples_leaf", c.rf.forest.min_samples_leaf);
        f("augment.scales", c.train_scales);
        f("augment.deformations", c.train_deformations);
        f("augment.patch_size", c.patch_size);
        f("tps.grid_x", c.tps.grid_x);
        f("tps.grid_y", c.tps.grid_y);
        f("tps.max_displacement", c.tps.max_displacement);
        f("test.scales", c.test_scales);
        f("test.deformations", c.test_deformations);
        f("net.spec", c.network);
        f("net.width", c.net_width);
        f("net.fc_units", c.net_fc_units);
        f("net.dropout", c.net_dropout);
        f("train.learning_rate", c.train.learning_rate);
        f("train.momentum", c.train.momentum);
        f("train.weight_decay", c.train.weight_decay);
        f("train.batch_size", c.train.batch_size);
        f("train.epochs", c.train.epochs);
        f("smooth.sigma", c.smooth.sigma);
        f("smooth.truncate", c.smooth.truncate);
        f("smooth.enabled", c.smooth_enabled);
        f("infer.threshold", c.threshold);
        f("eval.threshold", c.eval_threshold);
        f("seed", c.seed);
        f("threads", c.threads);
    }

    /// Sets one key from text. Unknown keys and unparsable values are usage errors.
    void set(const std::string& key, const std::string& value) {
        bool found = false;
        visit(*this, [&](const char* k, auto& member) {
            if (key == k) {
                found = true;
                assign(key, member, value);
            }
        });
        if (!found) {
            throw UsageError("unknown config key '" + key + "'");
        }
    }

    std::string get(const std::string& key) const {
        std::optional<std::string> out;
        visit(*this, [&](const char* k, const auto& member) {
            if (key == k) out = format(member);
        });
        if (!out) {
            throw UsageError("unknown config key '" + key + "'");
        }
        return *out;
    }

    /// Reads `key = value` lines; '#' starts a comment.
    void load_file(const std::filesystem::path& path) {
        std::ifstream in(path);
        if (!in) {
            throw UsageError("cannot read config file " + path.string());
        }
        std::string line;
        for (int n = 1; std::getline(in, line); ++n) {
            if (auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
            line = trim(line);
            if (line.empty()) continue;
            const auto eq = line.find('=');
            if (eq == std::string::npos) {
                throw UsageError(path.string() + ":" + std::to_string(n) + ": expected key = value");
            }
            try {
                set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
            } catch (const UsageError& e) {
                throw UsageError(path.string() + ":" + std::to_string(n) + ": " + e.what());
            }
        }
    }

    /// `key=value` lines for every key starting with one of `prefixes`.
    std::string canonical(std::initializer_list<std::string_view> prefixes) const {
        std::string out;
        visit(*this, [&](const char* k, const auto& member) {
            const std::string_view key(k);
            for (auto p : prefixes) {
                if (key.starts_with(p)) {
                    out += std::string(key) + "=" + format(member) + "\n";
                    break;
                }
            }
        });
        return out;
    }

    std::string dump() const {
        std::string out;
        visit(*this, [&](const char* k, const auto& member) { out += std::string(k) + " = " + format(member) + "\n"; });
        return out;
    }

    std::vector<std::string> phantom_names() const {
        std::vector<std::string> names;
        for (int i = 0; i < phantom_count; ++i) {
            char buf[32];
            std::snprintf(buf, sizeof buf, "case%03d", i);
            names.push_back(buf);
        }
        return names;
    }

    /// Train/test lists after defaults are filled in.
    std::vector<std::string> train_list() const {
        if (!train_cases.empty()) return train_cases;
        auto all = phantom_names();
        all.resize(static_cast<std::size_t>(phantom_count - default_test_count()));
        return all;
    }
    std::vector<std::string> test_list() const {
        if (!test_cases.empty()) return test_cases;
        if (!train_cases.empty()) return {};
        auto all = phantom_names();
        return {all.end() - default_test_count(), all.end()};
    }
    std::vector<std::string> all_cases() const {
        auto out = train_list();
        for (const auto& v : {valid_cases, test_list()}) out.insert(out.end(), v.begin(), v.end());
        return out;
    }

    AugmentConfig augment_config() const {
        AugmentConfig a;
        a.scales = default_scales(train_scales);
        a.deformations = train_deformations;
        a.deform = tps;
        a.patch_size = patch_size;
        a.seed = derive_seed(seed, 0x6175);
        return a;
    }

    NetworkSpec network_spec() const {
        NetworkSpec spec = network.empty() ? classifier_spec(patch_size, net_width, net_fc_units, net_dropout)
                                           : parse_spec(network);
        spec.validate_classifier();
        require(spec.input.c == 1 && spec.input.h == patch_size && spec.input.w == patch_size,
                "network input must be 1 x augment.patch_size x augment.patch_size");
        return spec;
    }

    TrainConfig train_config() const {
        TrainConfig t = train;
        t.seed = derive_seed(seed, 0x636e);
        t.threads = threads;
        return t;
    }

    CascadeTrainConfig rf_config() const {
        CascadeTrainConfig r = rf;
        r.forest.seed = derive_seed(seed, 0x7266);
        r.forest.threads = threads;
        return r;
    }

    void validate() const {
        require(phantom_count >= 1, "phantom.count must be at least 1");
        phantom.validate();
        require(window_lo < window_hi, "window.lo must be below window.hi");
        slic.validate();
        rf.cascade.validate();
        rf.forest.validate();
        require(rf.negative_ratio > 0.0, "rf.negative_ratio must be positive");
        require(rf.max_samples >= 2, "rf.max_samples must be at least 2");
        require(train_scales >= 1, "augment.scales must be at least 1");
        require(train_deformations >= 0, "augment.deformations must be non-negative");
        require(!test_scales.empty(), "test.scales needs at least one scale count");
        for (int s : test_scales) require(s >= 1, "test.scales entries must be at least 1");
        require(test_deformations == 0, "test.deformations must be 0: testing uses scales only");
        augment_config().validate();
        network_spec();
        train.validate();
        require(train.learning_rate > 0.0, "train.learning_rate must be positive");
        smooth.validate();
        require(threshold >= 0.0 && threshold <= 1.0, "infer.threshold must be in [0,1]");
        if (eval_threshold != "swept") {
            const double t = parse_double("eval.threshold", eval_threshold);
            require(t >= 0.0 && t <= 1.0, "eval.threshold must be 'swept' or a number in [0,1]");
        }
        const auto train_l = train_list(), test_l = test_list();
        require(!train_l.empty(), "no training cases");
        std::set<std::string> seen;
        for (const auto* list : {&train_l, &valid_cases, &test_l}) {
            for (const auto& c : *list) {
                require(!c.empty() && c.find_first_of("/\\") == std::string::npos, "invalid case name '" + c + "'");
                require(seen.insert(c).second, "case '" + c + "' appears in more than one list (or twice)");
            }
        }
    }

private:
    int default_test_count() const { return phantom_count < 2 ? 0 : std::max(1, phantom_count / 5); }

    static std::string trim(const std::string& s) {
        const auto b = s.find_first_not_of(" \t\r\n");
        if (b == std::string::npos) return {};
        return s.substr(b, s.find_last_not_of(" \t\r\n") - b + 1);
    }
    static double parse_double(const std::string& key, const std::string& v) {
        double out = 0.0;
        auto r = std::from_chars(v.data(), v.data() + v.size(), out);
        if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
            throw UsageError("bad number for " + key + ": '" + v + "'");
        }
        return out;
    }
    template <class I>
    static I parse_int(const std::string& key, const std::string& v) {
        I out{};
        auto r = std::from_chars(v.data(), v.data() + v.size(), out);
        if (r.ec != std::errc() || r.ptr != v.data() + v.size()) {
            throw UsageError("bad integer for " + key + ": '" + v + "'");
        }
        return out;
    }
    static std::vector<std::string> split(const std::string& v) {
        std::vector<std::string> out;
        std::stringstream ss(v);
        std::string item;
        while (std::getline(ss, item, ',')) {
            item = trim(item);
            if (!item.empty()) out.push_back(item);
        }
        return out;
    }

    static void assign(const std::string&, std::string& m, const std::string& v) { m = v; }
    static void assign(const std::string&, std::filesystem::path& m, const std::string& v) { m = v; }
    static void assign(const std::string& key, double& m, const std::string& v) { m = parse_double(key, v); }
    static void assign(const std::string& key, bool& m, const std::string& v) {
        if (v == "true" || v == "1" || v == "yes" || v == "on") m = true;
        else if (v == "false" || v == "0" || v == "no" || v == "off") m = false;
        else throw UsageError("bad boolean for " + key + ": '" + v + "'");
    }
    template <class I>
        requires std::is_integral_v<I>
    static void assign(const std::string& key, I& m, const std::string& v) { m = parse_int<I>(key, v); }
    static void assign(const std::string&, std::vector<std::string>& m, const std::string& v) { m = split(v); }
    static void assign(const std::string& key, std::vector<int>& m, const std::string& v) {
        m.clear();
        for (const auto& s : split(v)) m.push_back(parse_int<int>(key, s));
    }

    static std::string format(const std::string& m) { return m; }
    static std::string format(const std::filesystem::path& m) { return m.string(); }
    static std::string format(double m) { return csv::number(m); }
    static std::string format(bool m) { return m ? "true" : "false"; }
    template <class I>
        requires std::is_integral_v<I>
    static std::string format(I m) { return std::to_string(m); }
    template <class T>
    static std::string format(const std::vector<T>& m) {
        std::string out;
        for (std::size_t i = 0; i < m.size(); ++i) {
            if (i) out += ',';
            if constexpr (std::is_same_v<T, std::string>) out += m[i];
            else out += std::to_string(m[i]);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// In-memory stages

struct CaseData {
    std::string name;
    Volume image;  ///< windowed to [0,1]
    LabelMask mask;
    Spacing3 spacing;
    std::vector<SuperpixelMap> superpixels;

    std::vector<Image2D<std::uint8_t>> mask_slices() const {
        std::vector<Image2D<std::uint8_t>> out;
        for (int z = 0; z < mask.dims().nz; ++z) out.push_back(mask.slice(z));
        return out;
    }
};

inline std::vector<SuperpixelMap> superpixel_volume(const Volume& image, const SlicConfig& cfg, unsigned threads = 1) {
    std::vector<std::optional<SuperpixelMap>> tmp(static_cast<std::size_t>(image.dims().nz));
    parallel_for(tmp.size(), threads, [&](std::size_t z) { tmp[z] = slic_2d(image.slice(static_cast<int>(z)), cfg); });
    std::vector<SuperpixelMap> out;
    for (auto& s : tmp) out.push_back(std::move(*s));
    return out;
}

inline Grid3<std::int32_t> stack_labels(const std::vector<SuperpixelMap>& slices) {
    require(!slices.empty(), "no superpixel slices");
    Grid3<std::int32_t> g(Dims3{slices[0].nx(), slices[0].ny(), static_cast<int>(slices.size())});
    for (int z = 0; z < static_cast<int>(slices.size()); ++z) g.set_slice(z, slices[static_cast<std::size_t>(z)].labels());
    return g;
}

inline std::vector<SuperpixelMap> unstack_labels(const Grid3<std::int32_t>& g) {
    std::vector<SuperpixelMap> out;
    for (int z = 0; z < g.dims().nz; ++z) out.emplace_back(g.slice(z));
    return out;
}

/// Candidate set of one volume after the cascade.
struct Retention {
    ProbabilityMap response;
    std::vector<std::vector<int>> retained;  ///< per slice, ascending ids

    std::size_t count() const {
        std::size_t n = 0;
        for (const auto& r : retained) n += r.size();
        return n;
    }
};

inline CascadeModel train_rf_stage(const std::vector<const CaseData*>& cases, const PipelineConfig& cfg) {
    std::vector<TrainingSlice> slices;
    for (const CaseData* c : cases) {
        for (int z = 0; z < c->image.dims().nz; ++z) slices.push_back({c->image.slice(z), c->mask.slice(z)});
    }
    return train_cascade(slices, cfg.rf_config());
}

inline Retention apply_rf_stage(const CascadeModel& model, const CaseData& c, unsigned threads = 1) {
    const int nz = c.image.dims().nz;
    if (static_cast<int>(c.superpixels.size()) != nz) {
        throw DataError(c.name + ": superpixel stack does not match the volume");
    }
    Retention r{ProbabilityMap(c.image.dims(), 0.0f), std::vector<std::vector<int>>(static_cast<std::size_t>(nz))};
    parallel_for(static_cast<std::size_t>(nz), threads, [&](std::size_t z) {
        const ResponseMap resp = cascade_apply(model, c.image.slice(static_cast<int>(z)));
        r.response.set_slice(static_cast<int>(z), resp);
        const auto kept = retain_superpixels(c.superpixels[z], resp);
        r.retained[z].assign(kept.begin(), kept.end());
    });
    return r;
}

/// S_RF as a mask: every retained superpixel painted in.
inline LabelMask retention_mask(const CaseData& c, const Retention& r) {
    std::vector<SliceScores> ones(r.retained.size());
    for (std::size_t z = 0; z < r.retained.size(); ++z) {
        for (int id : r.retained[z]) ones[z][id] = 1.0;
    }
    const ProbabilityMap p = project_to_pixels(c.superpixels, r.retained, ones);
    return threshold_map(p, 0.5);
}

/// Ground-truth majority labeling painted back as a mask.
inline LabelMask optimal_mask(const CaseData& c) {
    LabelMask out(c.mask.dims(), 0);
    for (int z = 0; z < c.mask.dims().nz; ++z) {
        const auto& sp = c.superpixels[static_cast<std::size_t>(z)];
        out.set_slice(z, labels_to_mask(sp, optimal_labeling(sp, c.mask.slice(z))));
    }
    return out;
}

inline PatchDataset augment_stage(const std::vector<const CaseData*>& cases, const std::vector<const Retention*>& retained,
                                  const AugmentConfig& acfg) {
    require(cases.size() == retained.size(), "augment: cases and retention results differ in number");
    std::vector<Image2D<float>> images;
    std::vector<SliceCandidates> cands;
    for (std::size_t v = 0; v < cases.size(); ++v) {
        for (int z = 0; z < cases[v]->image.dims().nz; ++z) images.push_back(cases[v]->image.slice(z));
    }
    std::size_t k = 0;
    for (std::size_t v = 0; v < cases.size(); ++v) {
        const CaseData& c = *cases[v];
        for (int z = 0; z < c.image.dims().nz; ++z, ++k) {
            const auto& sp = c.superpixels[static_cast<std::size_t>(z)];
            SliceCandidates sc;
            sc.volume = static_cast<std::int32_t>(v);
            sc.slice_index = z;
            sc.image = &images[k];
            sc.superpixels = &sp;
            sc.retained.assign(retained[v]->retained[static_cast<std::size_t>(z)].begin(),
                               retained[v]->retained[static_cast<std::size_t>(z)].end());
            sc.labels = optimal_labeling(sp, c.mask.slice(z));
            cands.push_back(std::move(sc));
        }
    }
    return augment_training_set(cands, acfg);
}

/// p_ConvNet for every retained superpixel of a volume at N_s scales.
inline std::vector<SliceScores> score_superpixels(const NetworkSpec& spec, const NetworkParams<float>& params,
                                                  const CaseData& c, const Retention& r, int scale_count,
                                                  unsigned threads = 1) {
    const auto scales = default_scales(scale_count);
    const int P = spec.input.h;
    std::vector<SliceScores> out(r.retained.size());
    parallel_for(r.retained.size(), threads, [&](std::size_t z) {
        const Image2D<float> slice = c.image.slice(static_cast<int>(z));
        for (int id : r.retained[z]) {
            std::vector<Image2D<float>> patches;
            for (double s : scales) patches.push_back(sample_patch(slice, c.superpixels[z], id, s, P));
            out[z][id] = predict_superpixel(spec, params, patches);
        }
    });
    return out;
}

struct InferenceMaps {
    std::vector<SliceScores> scores;
    ProbabilityMap P;
    ProbabilityMap G;
};

inline InferenceMaps infer_stage(const NetworkSpec& spec, const NetworkParams<float>& params, const CaseData& c,
                                 const Retention& r, int scale_count, const SmoothConfig& smooth, unsigned threads = 1) {
    InferenceMaps m;
    m.scores = score_superpixels(spec, params, c, r, scale_count, threads);
    m.P = project_to_pixels(c.superpixels, r.retained, m.scores);
    m.G = gaussian_smooth_3d(m.P, smooth);
    return m;
}

/// Phantom number i of the configured dataset.
inline std::pair<Volume, LabelMask> phantom_case(const PipelineConfig& cfg, int i) {
    PhantomConfig pc = cfg.phantom;
    pc.seed = derive_seed(cfg.phantom.seed, i);
    return make_phantom(pc);
}

/// Windowed in-memory case with superpixels, bypassing the file system.
inline CaseData make_case(const PipelineConfig& cfg, std::string name, const Volume& v, LabelMask mask) {
    CaseData c;
    c.name = std::move(name);
    c.image = window_hu(v, cfg.window_lo, cfg.window_hi);
    c.spacing = v.spacing();
    c.mask = std::move(mask);
    c.superpixels = superpixel_volume(c.image, cfg.slic, cfg.threads);
    return c;
}

/// Fraction of ground-truth foreground covered by the candidate set.
inline double retention_sensitivity(const CaseData& c, const Retention& r) {
    const LabelMask m = retention_mask(c, r);
    std::size_t fg = 0, hit = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
        fg += c.mask[i];
        hit += c.mask[i] & m[i];
    }
    return fg ? static_cast<double>(hit) / static_cast<double>(fg) : 1.0;
}

// ---------------------------------------------------------------------------
// Stage comparison

/// One test case as seen by every stage. P and G are keyed by N_s; G is
/// empty when smoothing is off.
struct StageInputs {
    std::string name;
    LabelMask truth;
    LabelMask optimal;
    LabelMask retained;
    std::map<int, ProbabilityMap> P;
    std::map<int, ProbabilityMap> G;
};

struct StageComparison {
    std::vector<DiceReport> reports;  ///< Optimal, Input S_RF, then P and G per N_s
    std::vector<SweepCurve> curves;   ///< case-averaged, per variant and N_s
    std::vector<std::pair<std::string, std::string>> thresholds;  ///< column, operating point
};

/// Dice of every stage on every case. Probability maps are binarized at
/// `threshold`, or, when it is empty, at the threshold maximizing the
/// case-averaged Dice of that column.
inline StageComparison compare_stages(const std::vector<StageInputs>& cases, std::optional<double> threshold,
                                      const std::vector<double>& grid = default_thresholds()) {
    if (cases.empty()) {
        throw UsageError("no test cases to evaluate");
    }
    if (threshold) {
        require(*threshold >= 0.0 && *threshold <= 1.0, "threshold must be in [0,1]");
    }
    std::vector<std::string> names;
    for (const auto& c : cases) names.push_back(c.name);
    StageComparison out;
    auto fixed = [&](const char* stage, LabelMask StageInputs::*m) {
        std::vector<double> d;
        for (const auto& c : cases) d.push_back(dice(c.*m, c.truth));
        out.reports.push_back(summarize(stage, d, names));
    };
    fixed("optimal", &StageInputs::optimal);
    fixed("input_S_RF", &StageInputs::retained);

    auto mapped = [&](const char* stage, const char* variant, int ns, std::map<int, ProbabilityMap> StageInputs::*maps) {
        std::vector<SweepCurve> per;
        for (const auto& c : cases) {
            const auto it = (c.*maps).find(ns);
            if (it == (c.*maps).end()) {
                throw DataError(c.name + ": no " + stage + " map for N_s=" + std::to_string(ns));
            }
            per.push_back(sweep_thresholds(it->second, c.truth, grid));
        }
        SweepCurve mean = average_curves(per, variant, ns);
        std::vector<double> d;
        double t = 0.0;
        if (threshold) {
            t = *threshold;
            for (const auto& c : cases) d.push_back(dice(threshold_map((c.*maps).at(ns), t), c.truth));
        } else {
            const std::size_t k = mean.best_index();
            t = mean.thresholds[k];
            for (const auto& c : per) d.push_back(c.mean_dice[k]);
        }
        out.reports.push_back(summarize(stage, d, names, ns));
        out.thresholds.emplace_back(out.reports.back().column(), csv::number(t));
        out.curves.push_back(std::move(mean));
    };
    for (const auto& [ns, map] : cases[0].P) mapped("P(x)", "unsmoothed", ns, &StageInputs::P);
    for (const auto& [ns, map] : cases[0].G) mapped("G(P(x))", "smoothed", ns, &StageInputs::G);
    return out;
}

/// Loads one case from the data directory and windows it to [0,1].
inline CaseData load_case(const PipelineConfig& cfg, const std::string& name) {
    CaseData c;
    c.name = name;
    const Volume v = load_volume(cfg.data_dir / (name + ".mhd"));
    c.image = v.kind() == IntensityKind::hu ? window_hu(v, cfg.window_lo, cfg.window_hi) : v;
    c.spacing = v.spacing();
    c.mask = load_mask(cfg.data_dir / (name + "_mask.mhd"));
    if (!(c.mask.dims() == c.image.dims())) {
        throw DataError(name + ": mask dims " + to_string(c.mask.dims()) + " differ from volume dims " +
                        to_string(c.image.dims()));
    }
    return c;
}

// ---------------------------------------------------------------------------
// Artifact layout. Each stage writes into work/<stage>-<hash>/, where the
// hash covers the stage's configuration and its inputs, so a changed
// setting can never pick up an artifact built under another one.

inline std::string hex(std::uint64_t h) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

struct StageHashes {
    std::uint64_t superpixels, rf, retention, augment, train, infer;
};

inline std::uint64_t hash_file(const std::filesystem::path& p, std::uint64_t h) {
    std::ifstream in(p, std::ios::binary);
    if (!in) {
        throw DataError("cannot read " + p.string());
    }
    std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return fnv1a(bytes, h);
}

/// Hash of the input data: header and payload of every listed case.
inline std::uint64_t hash_cases(const PipelineConfig& cfg, const std::vector<std::string>& cases) {
    std::uint64_t h = fnv1a("cases");
    for (const auto& name : cases) {
        h = fnv1a(name, h);
        for (const char* suffix : {".mhd", ".raw", "_mask.mhd", "_mask.raw"}) {
            const auto p = cfg.data_dir / (name + suffix);
            if (!std::filesystem::exists(p)) {
                throw DataError("missing input " + p.string() + " (run 'phantom' or check data.dir)");
            }
            h = hash_file(p, h);
        }
    }
    return h;
}

inline StageHashes stage_hashes(const PipelineConfig& cfg) {
    StageHashes s{};
    const std::uint64_t data = hash_cases(cfg, cfg.all_cases());
    const std::uint64_t train_data = hash_cases(cfg, cfg.train_list());
    s.superpixels = fnv1a(cfg.canonical({"window.", "slic."}), data);
    s.rf = fnv1a(cfg.canonical({"window.", "rf.", "forest.", "seed"}), train_data);
    s.retention = fnv1a(hex(s.rf) + hex(s.superpixels));
    s.augment = fnv1a(cfg.canonical({"augment.", "tps.", "seed", "cases.train"}), s.retention);
    s.train = fnv1a(cfg.canonical({"net.", "train.", "cases.valid"}), s.augment);
    s.infer = fnv1a(cfg.canonical({"test.", "smooth.", "infer."}), s.train);
    return s;
}

inline std::filesystem::path stage_dir(const PipelineConfig& cfg, const std::string& stage, std::uint64_t hash) {
    return cfg.work_dir / (stage + "-" + hex(hash));
}

/// Fails with the command to run when a stage's output is missing.
inline void require_stage(const std::filesystem::path& dir, const std::string& command) {
    if (!std::filesystem::is_directory(dir)) {
        throw DataError("missing " + dir.string() + " for the current configuration; run '" + command + "' first");
    }
}

/// Builds a directory next to its destination and moves it into place only
/// on commit(), so a failed stage leaves nothing behind.
class StagingDir {
public:
    explicit StagingDir(std::filesystem::path final_dir)
        : final_(std::move(final_dir)), tmp_(final_.string() + ".partial") {
        std::filesystem::remove_all(tmp_);
        std::filesystem::create_directories(tmp_);
    }
    StagingDir(const StagingDir&) = delete;
    StagingDir& operator=(const StagingDir&) = delete;
    ~StagingDir() {
        if (!committed_) {
            std::error_code ec;
            std::filesystem::remove_all(tmp_, ec);
        }
    }
    const std::filesystem::path& path() const { return tmp_; }
    std::filesystem::path operator/(const std::string& name) const { return tmp_ / name; }

    /// Replaces the destination directory.
    void commit() {
        std::filesystem::remove_all(final_);
        std::filesystem::rename(tmp_, final_);
        committed_ = true;
    }
    /// Moves every file into an existing or new destination directory.
    void merge_into() {
        std::filesystem::create_directories(final_);
        for (const auto& e : std::filesystem::directory_iterator(tmp_)) {
            std::filesystem::rename(e.path(), final_ / e.path().filename());
        }
        std::filesystem::remove_all(tmp_);
        committed_ = true;
    }

private:
    std::filesystem::path final_;
    std::filesystem::path tmp_;
    bool committed_ = false;
};

inline void write_retained_csv(const std::filesystem::path& p, const Retention& r) {
    std::ofstream out(p, std::ios::binary);
    csv::write_row(out, {"slice", "superpixel"});
    for (std::size_t z = 0; z < r.retained.size(); ++z) {
        for (int id : r.retained[z]) csv::write_row(out, {std::to_string(z), std::to_string(id)});
    }
    if (!out) throw DataError("cannot write " + p.string());
}

inline std::vector<std::vector<int>> read_retained_csv(const std::filesystem::path& p, int nz) {
    const auto rows = csv::read_file(p);
    if (rows.empty() || rows[0] != std::vector<std::string>{"slice", "superpixel"}) {
        throw DataError(p.string() + ": not a retained-superpixel table");
    }
    std::vector<std::vector<int>> out(static_cast<std::size_t>(nz));
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() != 2) throw DataError(p.string() + ": malformed row " + std::to_string(i));
        const double z = csv::parse_number(rows[i][0]), id = csv::parse_number(rows[i][1]);
        if (z < 0 || z >= nz || id < 0 || z != std::floor(z) || id != std::floor(id)) {
            throw DataError(p.string() + ": row " + std::to_string(i) + " out of range");
        }
        out[static_cast<std::size_t>(z)].push_back(static_cast<int>(id));
    }
    for (auto& v : out) std::sort(v.begin(), v.end());
    return out;
}

inline void write_scores_csv(const std::filesystem::path& p, const std::vector<SliceScores>& scores) {
    std::ofstream out(p, std::ios::binary);
    csv::write_row(out, {"slice", "superpixel", "p_convnet"});
    for (std::size_t z = 0; z < scores.size(); ++z) {
        for (const auto& [id, v] : scores[z]) csv::write_row(out, {std::to_string(z), std::to_string(id), csv::number(v)});
    }
    if (!out) throw DataError("cannot write " + p.string());
}

inline void write_trace_csv(const std::filesystem::path& p, const std::vector<EpochRecord>& trace) {
    std::ofstream out(p, std::ios::binary);
    csv::write_row(out, {"epoch", "loss", "train_accuracy", "validation_accuracy"});
    for (const auto& e : trace) {
        csv::write_row(out, {std::to_string(e.epoch), csv::number(e.loss), csv::number(e.train_accuracy),
                             std::isnan(e.validation_accuracy) ? "" : csv::number(e.validation_accuracy)});
    }
    if (!out) throw DataError("cannot write " + p.string());
}

template <class F>
void write_binary_file(const std::filesystem::path& p, F&& body) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw DataError("cannot write " + p.string());
    body(out);
    if (!out) throw DataError("write failed: " + p.string());
}

template <class F>
auto read_binary_file(const std::filesystem::path& p, F&& body) {
    std::ifstream in(p, std::ios::binary);
    if (!in) throw DataError("cannot read " + p.string());
    return body(in);
}

}  // namespace pancseg

#endif  // PANCSEG_PIPELINE_HPP
