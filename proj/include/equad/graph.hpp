#pragma once

#include <algorithm>
#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "equad/errors.hpp"
#include "equad/rng.hpp"

namespace equad {

using Edge = std::pair<std::uint32_t, std::uint32_t>;
using EdgeList = std::vector<Edge>;

enum class CorrGroup { high, low };

inline const char* to_string(CorrGroup g) { return g == CorrGroup::high ? "high" : "low"; }

// One attributed graph with its generation metadata. motif_id is the latent
// invariant factor C, base_id the latent spurious factor S.
struct GraphInstance {
    std::uint32_t num_nodes = 0;
    EdgeList edges;                   // undirected, u < v, sorted, no duplicates
    std::vector<double> features;     // num_nodes x feat_dim, row-major
    std::uint32_t feat_dim = 0;
    int label = 0;
    int motif_id = 0;
    int base_id = 0;
    int env_id = 0;
    CorrGroup corr_group = CorrGroup::low;
    std::vector<std::uint32_t> invariant_nodes;

    bool operator==(const GraphInstance&) const = default;
};

struct DatasetBundle {
    std::vector<GraphInstance> train, val, test;
    int num_classes = 0;
    std::string kind;  // spmotif | spmotif_inverted | two_piece
    nlohmann::json config_snapshot;
    int format_version = 1;

    std::size_t total() const { return train.size() + val.size() + test.size(); }
    std::size_t train_end() const { return train.size(); }
    std::size_t val_end() const { return train.size() + val.size(); }

    const GraphInstance& row(std::size_t i) const {
        if (i < train.size()) return train[i];
        i -= train.size();
        if (i < val.size()) return val[i];
        return test[i - val.size()];
    }

    std::vector<int> labels_all() const {
        std::vector<int> out;
        out.reserve(total());
        for (const auto& g : train) out.push_back(g.label);
        for (const auto& g : val) out.push_back(g.label);
        for (const auto& g : test) out.push_back(g.label);
        return out;
    }

    bool operator==(const DatasetBundle&) const = default;
};

// ----- motif / base families ------------------------------------------------

enum class MotifKind { cycle = 0, house = 1, crane = 2 };
enum class BaseKind { tree = 0, ladder = 1, wheel = 2 };

struct MotifGraph {
    std::uint32_t num_nodes;
    EdgeList edges;
};

// Fixed motif shapes. The families only need to be connected and mutually
// non-isomorphic; these exact structures are pinned so tests reproduce.
inline MotifGraph make_motif(MotifKind kind) {
    switch (kind) {
        case MotifKind::cycle:
            return {6, {{0, 1}, {1, 2}, {2, 3}, {3, 4}, {4, 5}, {0, 5}}};
        case MotifKind::house:
            // square 0-1-2-3 plus roof node 4 on edge 0-1
            return {5, {{0, 1}, {1, 2}, {2, 3}, {0, 3}, {0, 4}, {1, 4}}};
        case MotifKind::crane:
            // square 0-1-2-3 with a two-node neck hanging off node 1
            return {6, {{0, 1}, {1, 2}, {2, 3}, {0, 3}, {1, 4}, {4, 5}}};
    }
    throw ConfigError("make_motif: unknown kind");
}

inline MotifGraph make_motif(int kind) {
    if (kind < 0 || kind > 2) throw ConfigError("make_motif: unknown kind " + std::to_string(kind));
    return make_motif(static_cast<MotifKind>(kind));
}

inline std::size_t base_min_size(BaseKind kind) {
    switch (kind) {
        case BaseKind::tree: return 2;
        case BaseKind::ladder: return 4;
        case BaseKind::wheel: return 4;
    }
    throw ConfigError("base_min_size: unknown kind");
}

inline MotifGraph make_base(BaseKind kind, std::size_t size, Rng& rng) {
    if (size < base_min_size(kind))
        throw ConfigError("make_base: size " + std::to_string(size) + " below family minimum " +
                          std::to_string(base_min_size(kind)));
    MotifGraph g;
    switch (kind) {
        case BaseKind::tree: {
            // random binary tree: each new node attaches to a node with < 2 children
            g.num_nodes = static_cast<std::uint32_t>(size);
            std::vector<std::uint32_t> open{0};
            std::vector<int> child_count(size, 0);
            for (std::uint32_t v = 1; v < size; ++v) {
                const std::size_t pick = static_cast<std::size_t>(rng.uniform_int(open.size()));
                const std::uint32_t parent = open[pick];
                g.edges.emplace_back(std::min(parent, v), std::max(parent, v));
                if (++child_count[parent] >= 2) {
                    open[pick] = open.back();
                    open.pop_back();
                }
                open.push_back(v);
            }
            break;
        }
        case BaseKind::ladder: {
            // 2k nodes, k rungs, 2(k-1) rails: 3k-2 edges
            const std::size_t k = size / 2;
            g.num_nodes = static_cast<std::uint32_t>(2 * k);
            for (std::uint32_t i = 0; i < k; ++i) g.edges.emplace_back(2 * i, 2 * i + 1);
            for (std::uint32_t i = 0; i + 1 < k; ++i) {
                g.edges.emplace_back(2 * i, 2 * i + 2);
                g.edges.emplace_back(2 * i + 1, 2 * i + 3);
            }
            break;
        }
        case BaseKind::wheel: {
            // hub 0 plus a rim cycle, every rim node spoked to the hub
            g.num_nodes = static_cast<std::uint32_t>(size);
            const std::uint32_t rim = static_cast<std::uint32_t>(size - 1);
            for (std::uint32_t i = 1; i <= rim; ++i) g.edges.emplace_back(0u, i);
            for (std::uint32_t i = 1; i < rim; ++i) g.edges.emplace_back(i, i + 1);
            g.edges.emplace_back(1u, rim);
            break;
        }
    }
    std::sort(g.edges.begin(), g.edges.end());
    return g;
}

inline MotifGraph make_base(int kind, std::size_t size, Rng& rng) {
    if (kind < 0 || kind > 2) throw ConfigError("make_base: unknown kind " + std::to_string(kind));
    return make_base(static_cast<BaseKind>(kind), size, rng);
}

inline bool is_connected(std::uint32_t n, const EdgeList& edges) {
    if (n == 0) return false;
    std::vector<std::vector<std::uint32_t>> adj(n);
    for (const auto& [u, v] : edges) {
        adj[u].push_back(v);
        adj[v].push_back(u);
    }
    std::vector<char> seen(n, 0);
    std::vector<std::uint32_t> stack{0};
    seen[0] = 1;
    std::uint32_t count = 1;
    while (!stack.empty()) {
        const std::uint32_t u = stack.back();
        stack.pop_back();
        for (std::uint32_t v : adj[u])
            if (!seen[v]) {
                seen[v] = 1;
                ++count;
                stack.push_back(v);
            }
    }
    return count == n;
}

// ----- generator configs ----------------------------------------------------

struct SPMotifConfig {
    double bias = 1.0 / 3.0;          // co-occurrence probability b
    std::size_t train_n = 3000;
    std::size_t val_n = 600;
    std::size_t test_n = 600;
    double base_size_mean = 31.0;
    double base_size_jitter = 4.0;
    std::size_t feat_dim = 4;
    std::uint32_t attach_min = 1;
    std::uint32_t attach_max = 3;
    std::uint64_t seed = 1;
    // inverted variant only
    std::size_t motif_copies = 10;
    double inverted_base_mean = 12.0;
    double inverted_base_jitter = 2.0;
};

struct TwoPieceConfig {
    double alpha_corr = 0.8;   // P(invariant piece index == y)
    double beta_corr = 0.9;    // P(spurious piece index == y)
    int num_classes = 3;
    std::size_t train_n = 3000;
    std::size_t val_n = 600;
    std::size_t test_n = 600;
    double base_size_mean = 31.0;
    double base_size_jitter = 4.0;
    std::size_t feat_dim = 4;
    std::uint32_t attach_min = 1;
    std::uint32_t attach_max = 3;
    std::uint64_t seed = 1;
};

// ----- generation internals ---------------------------------------------------

namespace gendetail {

inline std::size_t sample_size(double mean, double jitter, std::size_t min_size, Rng& rng) {
    const long lo = static_cast<long>(mean - jitter);
    const long hi = static_cast<long>(mean + jitter);
    const long v = lo + static_cast<long>(rng.uniform_int(static_cast<std::uint64_t>(hi - lo + 1)));
    return std::max<std::size_t>(min_size, static_cast<std::size_t>(std::max(1L, v)));
}

// balanced labels: every class appears floor/ceil(n/C) times, order shuffled
inline std::vector<int> balanced_labels(std::size_t n, int classes, Rng& rng) {
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) y[i] = static_cast<int>(i % classes);
    rng.shuffle(y);
    return y;
}

inline int other_class(int y, int classes, Rng& rng) {
    const int shift = 1 + static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(classes - 1)));
    return (y + shift) % classes;
}

// attach a motif block to the host graph with 1..k random cross edges
inline void attach_block(EdgeList& edges, std::uint32_t host_nodes, const MotifGraph& block,
                         std::uint32_t block_offset, std::uint32_t attach_min,
                         std::uint32_t attach_max, Rng& rng) {
    for (const auto& [u, v] : block.edges)
        edges.emplace_back(block_offset + u, block_offset + v);
    const std::uint32_t k =
        attach_min + static_cast<std::uint32_t>(rng.uniform_int(attach_max - attach_min + 1));
    std::set<Edge> used;
    std::uint32_t added = 0, attempts = 0;
    while (added < k && attempts < 8 * k + 16) {
        ++attempts;
        const std::uint32_t m =
            block_offset + static_cast<std::uint32_t>(rng.uniform_int(block.num_nodes));
        const std::uint32_t b = static_cast<std::uint32_t>(rng.uniform_int(host_nodes));
        const Edge e{std::min(m, b), std::max(m, b)};
        if (used.insert(e).second) {
            edges.push_back(e);
            ++added;
        }
    }
}

inline void finalize_instance(GraphInstance& g, std::size_t feat_dim, Rng& rng) {
    std::sort(g.edges.begin(), g.edges.end());
    g.edges.erase(std::unique(g.edges.begin(), g.edges.end()), g.edges.end());
    g.feat_dim = static_cast<std::uint32_t>(feat_dim);
    g.features.resize(static_cast<std::size_t>(g.num_nodes) * feat_dim);
    for (auto& f : g.features) f = rng.uniform();
    if (!is_connected(g.num_nodes, g.edges))
        throw DataError("generator produced a disconnected graph");
}

}  // namespace gendetail

// ----- SPMotif (FIIF) ---------------------------------------------------------

// One SPMotif graph: the label motif planted on a spurious base whose family
// co-occurs with the label with probability `bias`.
inline GraphInstance gen_spmotif_graph(const SPMotifConfig& cfg, int y, double bias, int env_id,
                                       Rng& rng) {
    GraphInstance g;
    g.label = y;
    g.motif_id = y;
    g.base_id = rng.bernoulli(bias) ? y : gendetail::other_class(y, 3, rng);
    g.corr_group = (g.base_id == y) ? CorrGroup::high : CorrGroup::low;
    g.env_id = env_id;

    const std::size_t base_size = gendetail::sample_size(
        cfg.base_size_mean, cfg.base_size_jitter, base_min_size(static_cast<BaseKind>(g.base_id)),
        rng);
    const MotifGraph base = make_base(g.base_id, base_size, rng);
    const MotifGraph motif = make_motif(g.motif_id);

    g.num_nodes = base.num_nodes + motif.num_nodes;
    g.edges = base.edges;
    gendetail::attach_block(g.edges, base.num_nodes, motif, base.num_nodes, cfg.attach_min,
                            cfg.attach_max, rng);
    for (std::uint32_t i = 0; i < motif.num_nodes; ++i)
        g.invariant_nodes.push_back(base.num_nodes + i);
    gendetail::finalize_instance(g, cfg.feat_dim, rng);
    return g;
}

inline void validate(const SPMotifConfig& cfg) {
    if (cfg.bias < 1.0 / 3.0 - 1e-12 || cfg.bias > 1.0)
        throw ConfigError("spmotif: bias must be in [1/3, 1], got " + std::to_string(cfg.bias));
    if (cfg.train_n == 0 || cfg.val_n == 0 || cfg.test_n == 0)
        throw ConfigError("spmotif: all splits must be nonempty");
    if (cfg.attach_min < 1 || cfg.attach_max < cfg.attach_min)
        throw ConfigError("spmotif: invalid attach edge range");
}

namespace gendetail {

template <typename PerGraph>
inline DatasetBundle gen_splits(std::size_t train_n, std::size_t val_n, std::size_t test_n,
                                int classes, std::uint64_t seed, PerGraph&& make) {
    DatasetBundle out;
    out.num_classes = classes;
    const std::size_t ns[3] = {train_n, val_n, test_n};
    for (int split = 0; split < 3; ++split) {
        Rng label_rng(Rng::derive(seed, 7000 + static_cast<std::uint64_t>(split)));
        const auto labels = balanced_labels(ns[split], classes, label_rng);
        auto& dst = split == 0 ? out.train : (split == 1 ? out.val : out.test);
        dst.reserve(ns[split]);
        for (std::size_t i = 0; i < ns[split]; ++i) {
            Rng rng(Rng::derive(Rng::derive(seed, static_cast<std::uint64_t>(split)), i));
            dst.push_back(make(labels[i], split, rng));
        }
    }
    return out;
}

}  // namespace gendetail

// Biased train split, unbiased (b = 1/3) validation and test splits. The
// correlation between base family and label must be broken outside train so
// the validation metric and the reweighting probe can see through it.
inline DatasetBundle gen_spmotif(const SPMotifConfig& cfg) {
    validate(cfg);
    DatasetBundle out = gendetail::gen_splits(
        cfg.train_n, cfg.val_n, cfg.test_n, 3, cfg.seed, [&](int y, int split, Rng& rng) {
            const double b = split == 0 ? cfg.bias : 1.0 / 3.0;
            return gen_spmotif_graph(cfg, y, b, split, rng);
        });
    out.kind = "spmotif";
    out.config_snapshot = {{"kind", "spmotif"},
                           {"bias", cfg.bias},
                           {"train_n", cfg.train_n},
                           {"val_n", cfg.val_n},
                           {"test_n", cfg.test_n},
                           {"base_size_mean", cfg.base_size_mean},
                           {"base_size_jitter", cfg.base_size_jitter},
                           {"feat_dim", cfg.feat_dim},
                           {"attach_min", cfg.attach_min},
                           {"attach_max", cfg.attach_max},
                           {"seed", cfg.seed}};
    return out;
}

// |G_c| > |G_s| variant: many copies of the label motif on a small base.
inline DatasetBundle gen_spmotif_inverted(const SPMotifConfig& cfg) {
    validate(cfg);
    auto make = [&](int y, int split, Rng& rng) {
        const double b = split == 0 ? cfg.bias : 1.0 / 3.0;
        GraphInstance g;
        g.label = y;
        g.motif_id = y;
        g.base_id = rng.bernoulli(b) ? y : gendetail::other_class(y, 3, rng);
        g.corr_group = (g.base_id == y) ? CorrGroup::high : CorrGroup::low;
        g.env_id = split;
        const std::size_t base_size = gendetail::sample_size(
            cfg.inverted_base_mean, cfg.inverted_base_jitter,
            base_min_size(static_cast<BaseKind>(g.base_id)), rng);
        const MotifGraph base = make_base(g.base_id, base_size, rng);
        g.num_nodes = base.num_nodes;
        g.edges = base.edges;
        for (std::size_t c = 0; c < cfg.motif_copies; ++c) {
            const MotifGraph motif = make_motif(g.motif_id);
            const std::uint32_t off = g.num_nodes;
            gendetail::attach_block(g.edges, base.num_nodes, motif, off, cfg.attach_min,
                                    cfg.attach_max, rng);
            for (std::uint32_t i = 0; i < motif.num_nodes; ++i)
                g.invariant_nodes.push_back(off + i);
            g.num_nodes += motif.num_nodes;
        }
        gendetail::finalize_instance(g, cfg.feat_dim, rng);
        return g;
    };
    DatasetBundle out =
        gendetail::gen_splits(cfg.train_n, cfg.val_n, cfg.test_n, 3, cfg.seed, make);
    out.kind = "spmotif_inverted";
    out.config_snapshot = {{"kind", "spmotif_inverted"},
                           {"bias", cfg.bias},
                           {"train_n", cfg.train_n},
                           {"val_n", cfg.val_n},
                           {"test_n", cfg.test_n},
                           {"base_size_mean", cfg.inverted_base_mean},
                           {"base_size_jitter", cfg.inverted_base_jitter},
                           {"motif_copies", cfg.motif_copies},
                           {"feat_dim", cfg.feat_dim},
                           {"attach_min", cfg.attach_min},
                           {"attach_max", cfg.attach_max},
                           {"seed", cfg.seed}};
    return out;
}

// ----- two-piece graphs (PIIF) --------------------------------------------------

// Invariant piece tracks the label with probability alpha_corr, spurious
// piece with beta_corr; test and validation use beta = 1/|C|.
inline DatasetBundle gen_two_piece(const TwoPieceConfig& cfg) {
    if (cfg.num_classes < 2) throw ConfigError("two_piece: class count must be >= 2");
    if (cfg.num_classes > 3) throw ConfigError("two_piece: at most 3 classes supported");
    if (cfg.alpha_corr < 0.0 || cfg.alpha_corr > 1.0 || cfg.beta_corr < 0.0 ||
        cfg.beta_corr > 1.0)
        throw ConfigError("two_piece: correlation parameters must be in [0,1]");
    if (cfg.train_n == 0 || cfg.val_n == 0 || cfg.test_n == 0)
        throw ConfigError("two_piece: all splits must be nonempty");

    auto make = [&](int y, int split, Rng& rng) {
        const double beta = split == 0 ? cfg.beta_corr : 1.0 / cfg.num_classes;
        GraphInstance g;
        g.label = y;
        g.motif_id =
            rng.bernoulli(cfg.alpha_corr) ? y : gendetail::other_class(y, cfg.num_classes, rng);
        g.base_id = rng.bernoulli(beta) ? y : gendetail::other_class(y, cfg.num_classes, rng);
        g.corr_group = (g.base_id == y) ? CorrGroup::high : CorrGroup::low;
        g.env_id = split;
        const std::size_t base_size = gendetail::sample_size(
            cfg.base_size_mean, cfg.base_size_jitter,
            base_min_size(static_cast<BaseKind>(g.base_id)), rng);
        const MotifGraph base = make_base(g.base_id, base_size, rng);
        const MotifGraph motif = make_motif(g.motif_id);
        g.num_nodes = base.num_nodes + motif.num_nodes;
        g.edges = base.edges;
        gendetail::attach_block(g.edges, base.num_nodes, motif, base.num_nodes, cfg.attach_min,
                                cfg.attach_max, rng);
        for (std::uint32_t i = 0; i < motif.num_nodes; ++i)
            g.invariant_nodes.push_back(base.num_nodes + i);
        gendetail::finalize_instance(g, cfg.feat_dim, rng);
        return g;
    };
    DatasetBundle out = gendetail::gen_splits(cfg.train_n, cfg.val_n, cfg.test_n, cfg.num_classes,
                                              cfg.seed, make);
    out.kind = "two_piece";
    out.config_snapshot = {{"kind", "two_piece"},
                           {"alpha_corr", cfg.alpha_corr},
                           {"beta_corr", cfg.beta_corr},
                           {"num_classes", cfg.num_classes},
                           {"train_n", cfg.train_n},
                           {"val_n", cfg.val_n},
                           {"test_n", cfg.test_n},
                           {"base_size_mean", cfg.base_size_mean},
                           {"base_size_jitter", cfg.base_size_jitter},
                           {"feat_dim", cfg.feat_dim},
                           {"attach_min", cfg.attach_min},
                           {"attach_max", cfg.attach_max},
                           {"seed", cfg.seed}};
    return out;
}

// fraction of graphs whose spurious factor is aligned with the label
inline double aligned_fraction(const std::vector<GraphInstance>& split) {
    if (split.empty()) return 0.0;
    std::size_t n = 0;
    for (const auto& g : split)
        if (g.corr_group == CorrGroup::high) ++n;
    return static_cast<double>(n) / static_cast<double>(split.size());
}

}  // namespace equad
