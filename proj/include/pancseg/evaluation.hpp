#ifndef PANCSEG_EVALUATION_HPP
#define PANCSEG_EVALUATION_HPP

// Dice scores, threshold sweeps, per-stage summaries and CSV reports.

#include <algorithm>
#include <charconv>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "pancseg/inference.hpp"
#include "pancseg/volume.hpp"

namespace pancseg {

/// 2|a∩b| / (|a|+|b|), and 1 when both are empty.
inline double dice(std::span<const std::uint8_t> a, std::span<const std::uint8_t> b) {
    if (a.size() != b.size()) {
        throw DataError("dice: mask sizes differ");
    }
    std::size_t na = 0, nb = 0, both = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const bool x = a[i] != 0, y = b[i] != 0;
        na += x;
        nb += y;
        both += x && y;
    }
    if (na + nb == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(both) / static_cast<double>(na + nb);
}

inline double dice(const LabelMask& a, const LabelMask& b) {
    if (!(a.dims() == b.dims())) {
        throw DataError("dice: mask dims differ (" + to_string(a.dims()) + " vs " + to_string(b.dims()) + ")");
    }
    return dice(a.values(), b.values());
}

/// 0.05, 0.10, ..., 0.95.
inline std::vector<double> default_thresholds() {
    std::vector<double> t;
    for (int k = 1; k <= 19; ++k) t.push_back(k / 20.0);
    return t;
}

inline void check_thresholds(const std::vector<double>& t) {
    require(!t.empty(), "threshold list is empty");
    for (std::size_t i = 0; i < t.size(); ++i) {
        require(t[i] >= 0.0 && t[i] <= 1.0, "thresholds must lie in [0,1]");
        require(i == 0 || t[i] > t[i - 1], "thresholds must be strictly ascending");
    }
}

struct SweepCurve {
    std::string variant;  ///< "unsmoothed" or "smoothed"
    int scales = 0;
    std::vector<double> thresholds;
    std::vector<double> mean_dice;

    std::size_t best_index() const {
        return static_cast<std::size_t>(std::max_element(mean_dice.begin(), mean_dice.end()) - mean_dice.begin());
    }
};

/// Dice of threshold_map(map, p) against gt for every p.
inline SweepCurve sweep_thresholds(const ProbabilityMap& map, const LabelMask& gt, const std::vector<double>& thresholds) {
    check_thresholds(thresholds);
    if (!(map.dims() == gt.dims())) {
        throw DataError("sweep_thresholds: map and ground truth dims differ");
    }
    SweepCurve c;
    c.thresholds = thresholds;
    for (double p : thresholds) {
        c.mean_dice.push_back(dice(threshold_map(map, p), gt));
    }
    return c;
}

/// Pointwise mean of per-case curves over the same thresholds.
inline SweepCurve average_curves(const std::vector<SweepCurve>& cases, std::string variant, int scales) {
    require(!cases.empty(), "average_curves: no curves");
    SweepCurve out;
    out.variant = std::move(variant);
    out.scales = scales;
    out.thresholds = cases[0].thresholds;
    out.mean_dice.assign(out.thresholds.size(), 0.0);
    for (const auto& c : cases) {
        if (c.thresholds != out.thresholds) {
            throw DataError("average_curves: threshold grids differ");
        }
        for (std::size_t i = 0; i < c.mean_dice.size(); ++i) out.mean_dice[i] += c.mean_dice[i];
    }
    for (double& v : out.mean_dice) v /= static_cast<double>(cases.size());
    return out;
}

struct DiceReport {
    std::string stage;  ///< optimal, input_S_RF, P(x), G(P(x))
    int scales = 0;     ///< N_s, 0 where it does not apply
    std::vector<std::string> cases;
    std::vector<double> per_case;
    double mean = 0, std = 0, min = 0, max = 0;

    std::string column() const {
        static const std::pair<const char*, const char*> names[] = {
            {"optimal", "Optimal"}, {"input_S_RF", "Input S_RF"}, {"P(x)", "P(x)"}, {"G(P(x))", "G(P(x))"}};
        std::string name = stage;
        for (const auto& [tag, label] : names) {
            if (stage == tag) name = label;
        }
        return scales > 0 ? name + " w. N_s=" + std::to_string(scales) : name;
    }
};

/// Mean, population standard deviation, min and max.
inline DiceReport summarize(std::string stage, std::vector<double> per_case, std::vector<std::string> cases = {},
                            int scales = 0) {
    if (per_case.empty()) {
        throw UsageError("summarize: no cases");
    }
    if (cases.empty()) {
        for (std::size_t i = 0; i < per_case.size(); ++i) cases.push_back("case" + std::to_string(i));
    }
    if (cases.size() != per_case.size()) {
        throw DataError("summarize: case names and values differ in length");
    }
    DiceReport r;
    r.stage = std::move(stage);
    r.scales = scales;
    r.cases = std::move(cases);
    r.per_case = std::move(per_case);
    double sum = 0.0;
    for (double d : r.per_case) sum += d;
    const double n = static_cast<double>(r.per_case.size());
    r.mean = sum / n;
    double ss = 0.0;
    for (double d : r.per_case) ss += (d - r.mean) * (d - r.mean);
    r.std = std::sqrt(ss / n);
    r.min = *std::min_element(r.per_case.begin(), r.per_case.end());
    r.max = *std::max_element(r.per_case.begin(), r.per_case.end());
    // Rounding in the mean can push it a hair outside [min, max].
    r.mean = std::clamp(r.mean, r.min, r.max);
    return r;
}

// ---------------------------------------------------------------------------
// CSV

namespace csv {

/// Shortest text that parses back to the same double.
inline std::string number(double v) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, res.ptr);
}

inline double parse_number(const std::string& s) {
    double v = 0.0;
    auto res = std::from_chars(s.data(), s.data() + s.size(), v);
    if (res.ec != std::errc() || res.ptr != s.data() + s.size()) {
        throw DataError("csv: bad number '" + s + "'");
    }
    return v;
}

inline std::string field(const std::string& s) {
    if (s.find_first_of(",\"\r\n") == std::string::npos) {
        return s;
    }
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + '"';
}

inline void write_row(std::ostream& out, const std::vector<std::string>& row) {
    for (std::size_t i = 0; i < row.size(); ++i) {
        out << (i ? "," : "") << field(row[i]);
    }
    out << "\r\n";
}

using Table = std::vector<std::vector<std::string>>;

inline Table parse(std::istream& in) {
    Table rows;
    std::vector<std::string> row;
    std::string cur;
    bool quoted = false, any = false;
    char c = 0;
    while (in.get(c)) {
        any = true;
        if (quoted) {
            if (c == '"') {
                if (in.peek() == '"') {
                    in.get(c);
                    cur += '"';
                } else {
                    quoted = false;
                }
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            row.push_back(std::move(cur));
            cur.clear();
        } else if (c == '\r' || c == '\n') {
            if (c == '\r' && in.peek() == '\n') in.get(c);
            row.push_back(std::move(cur));
            cur.clear();
            rows.push_back(std::move(row));
            row.clear();
            any = false;
        } else {
            cur += c;
        }
    }
    if (quoted) {
        throw DataError("csv: unterminated quoted field");
    }
    if (any) {
        row.push_back(std::move(cur));
        rows.push_back(std::move(row));
    }
    return rows;
}

inline Table read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataError("cannot open " + path.string());
    }
    return parse(in);
}

}  // namespace csv

/// One row per (variant, N_s, threshold).
inline void write_sweep_csv(const std::vector<SweepCurve>& curves, const std::filesystem::path& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) {
        throw DataError("cannot write " + path.string());
    }
    csv::write_row(f, {"variant", "scales", "threshold", "mean_dice"});
    for (const auto& c : curves) {
        for (std::size_t i = 0; i < c.thresholds.size(); ++i) {
            csv::write_row(f, {c.variant, std::to_string(c.scales), csv::number(c.thresholds[i]), csv::number(c.mean_dice[i])});
        }
    }
}

/// Writes per_case.csv, aggregate.csv (one column per
/// stage, rows Mean/Std./Min./Max.), report_meta.csv and, when curves are
/// given, sweep.csv into `dir`. `meta` adds rows to report_meta.csv.
/// Per-case output needs every report to cover the same cases.
inline void emit_report(const std::vector<DiceReport>& reports, const std::vector<SweepCurve>& curves,
                        const std::filesystem::path& dir,
                        const std::vector<std::pair<std::string, std::string>>& meta = {}) {
    require(!reports.empty(), "emit_report: no reports");
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    auto open = [&](const char* name) {
        std::ofstream f(dir / name, std::ios::binary);
        if (!f) {
            throw DataError("cannot write " + (dir / name).string());
        }
        return f;
    };

    std::vector<std::string> header{"case"};
    for (const auto& r : reports) header.push_back(r.column());

    const bool aligned = std::all_of(reports.begin(), reports.end(), [&](const DiceReport& r) { return r.cases == reports[0].cases; });
    if (aligned) {
        auto f = open("per_case.csv");
        csv::write_row(f, header);
        for (std::size_t i = 0; i < reports[0].cases.size(); ++i) {
            std::vector<std::string> row{reports[0].cases[i]};
            for (const auto& r : reports) row.push_back(csv::number(r.per_case[i]));
            csv::write_row(f, row);
        }
    }
    {
        auto f = open("aggregate.csv");
        header[0] = "statistic";
        csv::write_row(f, header);
        const std::pair<const char*, double DiceReport::*> stats[] = {
            {"Mean", &DiceReport::mean}, {"Std.", &DiceReport::std}, {"Min.", &DiceReport::min}, {"Max.", &DiceReport::max}};
        for (const auto& [name, member] : stats) {
            std::vector<std::string> row{name};
            for (const auto& r : reports) row.push_back(csv::number(r.*member));
            csv::write_row(f, row);
        }
    }
    {
        auto f = open("report_meta.csv");
        csv::write_row(f, {"key", "value"});
        csv::write_row(f, {"std", "population"});
        csv::write_row(f, {"cases", std::to_string(reports[0].cases.size())});
        for (const auto& [k, v] : meta) csv::write_row(f, {k, v});
    }
    if (!curves.empty()) {
        write_sweep_csv(curves, dir / "sweep.csv");
    }
}

}  // namespace pancseg

#endif  // PANCSEG_EVALUATION_HPP
