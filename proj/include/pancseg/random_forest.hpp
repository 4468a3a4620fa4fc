#ifndef PANCSEG_RANDOM_FOREST_HPP
#define PANCSEG_RANDOM_FOREST_HPP

/// \file random_forest.hpp
/// Binary random forest: bootstrap bagging, random feature subsets per split,
/// Gini impurity, leaf class probabilities, out-of-bag error, and a
/// versioned binary serialization.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <thread>
#include <vector>

#include "pancseg/core.hpp"

namespace pancseg {

struct TreeNode {
    std::int32_t feature = -1;  ///< -1 marks a leaf
    float threshold = 0.0f;     ///< x[feature] < threshold goes left
    std::int32_t left = -1;
    std::int32_t right = -1;
    float probability = 0.0f;   ///< fraction of positive training samples in the leaf

    bool is_leaf() const { return feature < 0; }
    friend bool operator==(const TreeNode&, const TreeNode&) = default;
};

struct DecisionTree {
    std::vector<TreeNode> nodes;  ///< root at index 0

    double predict(std::span<const float> fv) const {
        std::size_t i = 0;
        while (!nodes[i].is_leaf()) {
            const TreeNode& n = nodes[i];
            i = static_cast<std::size_t>(fv[static_cast<std::size_t>(n.feature)] < n.threshold ? n.left : n.right);
        }
        return nodes[i].probability;
    }
    friend bool operator==(const DecisionTree&, const DecisionTree&) = default;
};

struct ForestConfig {
    int tree_count = 32;
    int max_depth = 12;
    int features_per_split = 0;  ///< 0 selects round(sqrt(feature_count))
    int min_samples_leaf = 1;
    std::uint64_t seed = 1;
    unsigned threads = 1;

    void validate() const {
        require(tree_count >= 1, "forest tree_count must be at least 1");
        require(max_depth >= 1, "forest max_depth must be at least 1");
        require(features_per_split >= 0, "forest features_per_split must be non-negative");
        require(min_samples_leaf >= 1, "forest min_samples_leaf must be at least 1");
    }
};

struct RandomForestModel {
    std::uint32_t feature_count = 0;
    std::uint32_t feature_version = 0;
    std::uint64_t seed = 0;
    std::uint32_t max_depth = 0;
    double oob_error = 0.0;  ///< NaN when no sample was ever out of bag
    std::vector<DecisionTree> trees;

    friend bool operator==(const RandomForestModel&, const RandomForestModel&) = default;
};

/// Row-major feature matrix.
struct FeatureTable {
    std::size_t feature_count = 0;
    std::vector<float> values;

    std::size_t rows() const { return feature_count ? values.size() / feature_count : 0; }
    std::span<const float> row(std::size_t i) const {
        return {values.data() + i * feature_count, feature_count};
    }
    void append(std::span<const float> fv) {
        if (feature_count == 0) {
            feature_count = fv.size();
        }
        if (fv.size() != feature_count) {
            throw DataError("feature vector length does not match table");
        }
        values.insert(values.end(), fv.begin(), fv.end());
    }
};

namespace detail {

class TreeBuilder {
public:
    TreeBuilder(const FeatureTable& x, std::span<const std::uint8_t> y, const ForestConfig& cfg, int mtry, Rng& rng)
        : x_(x), y_(y), cfg_(cfg), mtry_(mtry), rng_(rng) {}

    DecisionTree build(std::vector<std::size_t> samples) {
        DecisionTree tree;
        tree.nodes.emplace_back();
        struct Job {
            std::int32_t node;
            std::size_t begin, end;
            int depth;
        };
        samples_ = std::move(samples);
        std::vector<Job> stack{{0, 0, samples_.size(), 0}};
        std::vector<std::size_t> features(x_.feature_count);
        while (!stack.empty()) {
            const Job job = stack.back();
            stack.pop_back();
            const std::size_t n = job.end - job.begin;
            std::size_t positives = 0;
            for (std::size_t i = job.begin; i < job.end; ++i) {
                positives += y_[samples_[i]];
            }
            TreeNode& node = tree.nodes[static_cast<std::size_t>(job.node)];
            node.probability = static_cast<float>(static_cast<double>(positives) / static_cast<double>(n));
            if (job.depth >= cfg_.max_depth || positives == 0 || positives == n ||
                n < 2 * static_cast<std::size_t>(cfg_.min_samples_leaf)) {
                continue;
            }

            // Random feature subset, examined in ascending index order so
            // that ties resolve to the lowest feature index.
            std::iota(features.begin(), features.end(), std::size_t{0});
            for (int k = 0; k < mtry_; ++k) {
                const std::size_t j = static_cast<std::size_t>(k) + uniform_index(rng_, features.size() - static_cast<std::size_t>(k));
                std::swap(features[static_cast<std::size_t>(k)], features[j]);
            }
            std::vector<std::size_t> subset(features.begin(), features.begin() + mtry_);
            std::sort(subset.begin(), subset.end());

            double best_score = std::numeric_limits<double>::infinity();
            std::int32_t best_feature = -1;
            float best_threshold = 0.0f;
            for (std::size_t f : subset) {
                scratch_.clear();
                for (std::size_t i = job.begin; i < job.end; ++i) {
                    scratch_.push_back({x_.values[samples_[i] * x_.feature_count + f], y_[samples_[i]]});
                }
                std::sort(scratch_.begin(), scratch_.end(),
                          [](const auto& a, const auto& b) { return a.first < b.first; });
                std::size_t left_n = 0, left_pos = 0;
                for (std::size_t i = 0; i + 1 < n; ++i) {
                    ++left_n;
                    left_pos += scratch_[i].second;
                    const float a = scratch_[i].first, b = scratch_[i + 1].first;
                    if (!(a < b)) {
                        continue;
                    }
                    const std::size_t right_n = n - left_n;
                    if (left_n < static_cast<std::size_t>(cfg_.min_samples_leaf) ||
                        right_n < static_cast<std::size_t>(cfg_.min_samples_leaf)) {
                        continue;
                    }
                    const std::size_t right_pos = positives - left_pos;
                    const double score = weighted_gini(left_n, left_pos) + weighted_gini(right_n, right_pos);
                    float threshold = static_cast<float>(0.5 * (static_cast<double>(a) + static_cast<double>(b)));
                    if (!(threshold > a)) {
                        threshold = b;
                    }
                    if (score < best_score) {
                        best_score = score;
                        best_feature = static_cast<std::int32_t>(f);
                        best_threshold = threshold;
                    }
                }
            }
            if (best_feature < 0) {
                continue;
            }
            auto mid = std::partition(samples_.begin() + static_cast<std::ptrdiff_t>(job.begin),
                                      samples_.begin() + static_cast<std::ptrdiff_t>(job.end), [&](std::size_t s) {
                                          return x_.values[s * x_.feature_count + static_cast<std::size_t>(best_feature)] <
                                                 best_threshold;
                                      });
            const auto split = static_cast<std::size_t>(mid - samples_.begin());
            const auto left = static_cast<std::int32_t>(tree.nodes.size());
            tree.nodes.emplace_back();
            tree.nodes.emplace_back();
            TreeNode& parent = tree.nodes[static_cast<std::size_t>(job.node)];
            parent.feature = best_feature;
            parent.threshold = best_threshold;
            parent.left = left;
            parent.right = left + 1;
            stack.push_back({left + 1, split, job.end, job.depth + 1});
            stack.push_back({left, job.begin, split, job.depth + 1});
        }
        return tree;
    }

private:
    /// n * Gini(node) = n * (1 - p^2 - q^2)
    static double weighted_gini(std::size_t n, std::size_t pos) {
        const double p = static_cast<double>(pos) / static_cast<double>(n);
        return static_cast<double>(n) * 2.0 * p * (1.0 - p);
    }

    const FeatureTable& x_;
    std::span<const std::uint8_t> y_;
    const ForestConfig& cfg_;
    int mtry_;
    Rng& rng_;
    std::vector<std::size_t> samples_;
    std::vector<std::pair<float, std::uint8_t>> scratch_;
};

}  // namespace detail

/// Trains a forest on binary labels. Each tree draws its bootstrap sample
/// and split features from its own seeded stream, so the result does not
/// depend on `cfg.threads`.
inline RandomForestModel train_forest(const FeatureTable& x, std::span<const std::uint8_t> y, const ForestConfig& cfg,
                                      std::uint32_t feature_version = 0) {
    cfg.validate();
    const std::size_t n = x.rows();
    if (n == 0 || y.empty()) {
        throw DataError("train_forest: empty training set");
    }
    if (y.size() != n) {
        throw DataError("train_forest: label count does not match feature rows");
    }
    if (n < 2) {
        throw DataError("train_forest: at least 2 samples are required");
    }
    std::size_t positives = 0;
    for (std::uint8_t v : y) {
        if (v > 1) {
            throw DataError("train_forest: labels must be 0 or 1");
        }
        positives += v;
    }
    if (positives == 0 || positives == n) {
        throw DataError("train_forest: both classes must be present");
    }
    for (float v : x.values) {
        if (!std::isfinite(v)) {
            throw DataError("train_forest: non-finite feature value");
        }
    }

    const int mtry = cfg.features_per_split > 0
                         ? std::min<int>(cfg.features_per_split, static_cast<int>(x.feature_count))
                         : std::max(1, static_cast<int>(std::lround(std::sqrt(static_cast<double>(x.feature_count)))));

    RandomForestModel model;
    model.feature_count = static_cast<std::uint32_t>(x.feature_count);
    model.feature_version = feature_version;
    model.seed = cfg.seed;
    model.max_depth = static_cast<std::uint32_t>(cfg.max_depth);
    model.trees.resize(static_cast<std::size_t>(cfg.tree_count));
    std::vector<std::vector<std::uint8_t>> in_bag(static_cast<std::size_t>(cfg.tree_count));

    auto grow = [&](std::size_t t) {
        Rng rng(derive_seed(cfg.seed, 0x7265, static_cast<std::int64_t>(t)));
        std::vector<std::size_t> sample(n);
        in_bag[t].assign(n, 0);
        for (auto& s : sample) {
            s = uniform_index(rng, n);
            in_bag[t][s] = 1;
        }
        detail::TreeBuilder builder(x, y, cfg, mtry, rng);
        model.trees[t] = builder.build(std::move(sample));
    };
    const unsigned threads = std::max(1u, std::min<unsigned>(cfg.threads, static_cast<unsigned>(cfg.tree_count)));
    if (threads == 1) {
        for (std::size_t t = 0; t < model.trees.size(); ++t) {
            grow(t);
        }
    } else {
        std::vector<std::thread> pool;
        for (unsigned w = 0; w < threads; ++w) {
            pool.emplace_back([&, w] {
                for (std::size_t t = w; t < model.trees.size(); t += threads) {
                    grow(t);
                }
            });
        }
        for (auto& th : pool) {
            th.join();
        }
    }

    std::size_t evaluated = 0, wrong = 0;
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        int votes = 0;
        for (std::size_t t = 0; t < model.trees.size(); ++t) {
            if (!in_bag[t][i]) {
                sum += model.trees[t].predict(x.row(i));
                ++votes;
            }
        }
        if (votes > 0) {
            ++evaluated;
            wrong += ((sum / votes) > 0.5 ? 1 : 0) != y[i];
        }
    }
    model.oob_error = evaluated ? static_cast<double>(wrong) / static_cast<double>(evaluated)
                                : std::numeric_limits<double>::quiet_NaN();
    return model;
}

/// Mean of per-tree leaf probabilities.
inline double predict_forest(const RandomForestModel& model, std::span<const float> fv) {
    if (fv.size() != model.feature_count) {
        throw DataError("predict_forest: feature vector has " + std::to_string(fv.size()) + " entries, model expects " +
                        std::to_string(model.feature_count));
    }
    if (model.trees.empty()) {
        throw DataError("predict_forest: empty forest");
    }
    double sum = 0.0;
    for (const auto& tree : model.trees) {
        sum += tree.predict(fv);
    }
    return sum / static_cast<double>(model.trees.size());
}

// ---------------------------------------------------------------------------
// Serialization: "PSRF", format version, feature_version, feature_count,
// seed, max_depth, oob_error, tree count, then per tree the node count and
// flattened node arrays.

inline constexpr std::uint32_t kForestFormatVersion = 1;

inline void write_forest(std::ostream& out, const RandomForestModel& m) {
    binary::write_magic(out, "PSRF");
    binary::write(out, kForestFormatVersion);
    binary::write(out, m.feature_version);
    binary::write(out, m.feature_count);
    binary::write(out, m.seed);
    binary::write(out, m.max_depth);
    binary::write(out, m.oob_error);
    binary::write(out, static_cast<std::uint32_t>(m.trees.size()));
    for (const auto& tree : m.trees) {
        binary::write(out, static_cast<std::uint32_t>(tree.nodes.size()));
        for (const auto& n : tree.nodes) binary::write(out, n.feature);
        for (const auto& n : tree.nodes) binary::write(out, n.threshold);
        for (const auto& n : tree.nodes) binary::write(out, n.left);
        for (const auto& n : tree.nodes) binary::write(out, n.right);
        for (const auto& n : tree.nodes) binary::write(out, n.probability);
    }
}

inline RandomForestModel read_forest(std::istream& in) {
    binary::expect_magic(in, "PSRF");
    if (binary::read<std::uint32_t>(in) != kForestFormatVersion) {
        throw DataError("unsupported forest format version");
    }
    RandomForestModel m;
    m.feature_version = binary::read<std::uint32_t>(in);
    m.feature_count = binary::read<std::uint32_t>(in);
    m.seed = binary::read<std::uint64_t>(in);
    m.max_depth = binary::read<std::uint32_t>(in);
    m.oob_error = binary::read<double>(in);
    const auto tree_count = binary::read<std::uint32_t>(in);
    if (tree_count == 0 || tree_count > (1u << 20)) {
        throw DataError("forest file has an implausible tree count");
    }
    m.trees.resize(tree_count);
    for (auto& tree : m.trees) {
        const auto count = binary::read<std::uint32_t>(in);
        if (count == 0 || count > (1u << 26)) {
            throw DataError("forest file has an implausible node count");
        }
        tree.nodes.resize(count);
        for (auto& n : tree.nodes) n.feature = binary::read<std::int32_t>(in);
        for (auto& n : tree.nodes) n.threshold = binary::read<float>(in);
        for (auto& n : tree.nodes) n.left = binary::read<std::int32_t>(in);
        for (auto& n : tree.nodes) n.right = binary::read<std::int32_t>(in);
        for (auto& n : tree.nodes) n.probability = binary::read<float>(in);
        for (std::uint32_t i = 0; i < count; ++i) {
            const TreeNode& n = tree.nodes[i];
            if (n.is_leaf()) {
                if (!(n.probability >= 0.0f && n.probability <= 1.0f)) {
                    throw DataError("forest leaf probability outside [0,1]");
                }
                continue;
            }
            if (static_cast<std::uint32_t>(n.feature) >= m.feature_count || n.left <= static_cast<std::int32_t>(i) || n.right <= static_cast<std::int32_t>(i) ||
                static_cast<std::uint32_t>(n.left) >= count || static_cast<std::uint32_t>(n.right) >= count) {
                throw DataError("forest file has an invalid split node");
            }
        }
    }
    return m;
}

}  // namespace pancseg

#endif  // PANCSEG_RANDOM_FOREST_HPP
