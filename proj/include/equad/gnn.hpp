#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "equad/graph.hpp"
#include "equad/rng.hpp"
#include "equad/tensor.hpp"

namespace equad {

// ----- batching ---------------------------------------------------------------

// A set of graphs packed into one node matrix. Node-to-graph membership is
// contiguous; per-undirected-edge both directed arcs are listed.
struct BatchedGraph {
    std::size_t num_nodes = 0;
    std::size_t num_graphs = 0;
    std::vector<std::uint32_t> edge_src, edge_dst;
    std::vector<std::uint32_t> node_graph;     // node -> graph slot, sorted
    std::vector<std::uint32_t> graph_offset;   // size num_graphs + 1
    std::vector<double> inv_count;             // 1 / nodes(g)
    Tensor features;                           // (num_nodes, d)
    std::vector<int> labels;
    std::vector<std::size_t> rows;             // dataset row ids
    std::shared_ptr<BlockDiag> diffusion;      // PPR blocks, optional
};

struct PprResult {
    Eigen::MatrixXd pi;
    bool disconnected = false;
};

// Personalized-PageRank diffusion: pi = alpha * (I - (1-alpha) D^-1 A)^-1.
// Rows sum to 1 for connected graphs; a disconnected input is flagged, with
// degree-0 nodes treated as self-transitions to keep the system solvable.
inline PprResult ppr_diffusion(std::uint32_t n, const EdgeList& edges, double alpha) {
    if (n == 0) throw ShapeError("ppr_diffusion: empty graph");
    if (!(alpha > 0.0 && alpha < 1.0))
        throw ConfigError("ppr_diffusion: teleport probability must be in (0,1)");
    PprResult res;
    res.disconnected = !is_connected(n, edges);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(n, n);
    for (const auto& [u, v] : edges) {
        a(u, v) = 1.0;
        a(v, u) = 1.0;
    }
    Eigen::VectorXd deg = a.rowwise().sum();
    for (std::uint32_t i = 0; i < n; ++i)
        if (deg(i) == 0.0) {
            a(i, i) = 1.0;
            deg(i) = 1.0;
        }
    Eigen::MatrixXd m = Eigen::MatrixXd::Identity(n, n) - (1.0 - alpha) * deg.cwiseInverse().asDiagonal() * a;
    res.pi = alpha * m.partialPivLu().solve(Eigen::MatrixXd::Identity(n, n));
    return res;
}

inline BatchedGraph make_batch(const DatasetBundle& data, std::span<const std::size_t> rows,
                               bool with_diffusion = false, double alpha = 0.2) {
    BatchedGraph b;
    b.num_graphs = rows.size();
    b.graph_offset.reserve(rows.size() + 1);
    b.graph_offset.push_back(0);
    std::size_t feat_dim = 0;
    for (std::size_t r : rows) {
        const GraphInstance& g = data.row(r);
        if (g.num_nodes == 0) throw DataError("make_batch: empty graph in batch");
        b.num_nodes += g.num_nodes;
        b.graph_offset.push_back(static_cast<std::uint32_t>(b.num_nodes));
        feat_dim = g.feat_dim;
    }
    std::vector<double> feats;
    feats.reserve(b.num_nodes * feat_dim);
    b.edge_src.reserve(4 * b.num_nodes);
    b.edge_dst.reserve(4 * b.num_nodes);
    b.node_graph.reserve(b.num_nodes);
    if (with_diffusion) b.diffusion = std::make_shared<BlockDiag>();
    std::uint32_t offset = 0, slot = 0;
    for (std::size_t r : rows) {
        const GraphInstance& g = data.row(r);
        for (const auto& [u, v] : g.edges) {
            b.edge_src.push_back(offset + u);
            b.edge_dst.push_back(offset + v);
            b.edge_src.push_back(offset + v);
            b.edge_dst.push_back(offset + u);
        }
        for (std::uint32_t i = 0; i < g.num_nodes; ++i) b.node_graph.push_back(slot);
        feats.insert(feats.end(), g.features.begin(), g.features.end());
        b.labels.push_back(g.label);
        b.rows.push_back(r);
        b.inv_count.push_back(1.0 / static_cast<double>(g.num_nodes));
        if (with_diffusion) {
            const PprResult ppr = ppr_diffusion(g.num_nodes, g.edges, alpha);
            std::vector<double> blk(static_cast<std::size_t>(g.num_nodes) * g.num_nodes);
            for (std::uint32_t i = 0; i < g.num_nodes; ++i)
                for (std::uint32_t j = 0; j < g.num_nodes; ++j)
                    blk[static_cast<std::size_t>(i) * g.num_nodes + j] = ppr.pi(i, j);
            b.diffusion->add_block(std::move(blk), g.num_nodes);
        }
        offset += g.num_nodes;
        ++slot;
    }
    b.features = Tensor::from({b.num_nodes, feat_dim}, std::move(feats));
    return b;
}

inline std::vector<std::size_t> all_rows(const DatasetBundle& data) {
    std::vector<std::size_t> rows(data.total());
    for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = i;
    return rows;
}

// ----- GIN --------------------------------------------------------------------

enum class Readout { mean, sum };

struct GinEncoderConfig {
    std::size_t layers = 3;
    std::size_t hidden = 32;
    std::size_t input_dim = 4;
    double eps = 0.0;
    bool learnable_eps = false;
    Readout readout = Readout::mean;
};

struct GinLayerParams {
    Tensor w1, b1, w2, b2;
    Tensor eps;  // one-element tensor when learnable, undefined otherwise
    double eps_value = 0.0;
};

inline Tensor glorot(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
    const double limit = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    std::vector<double> v(fan_in * fan_out);
    for (auto& x : v) x = rng.uniform(-limit, limit);
    return Tensor::from({fan_in, fan_out}, std::move(v), true);
}

// One GIN layer: MLP((1 + eps) * h_v + sum_{u in N(v)} h_u). The diffusion
// view swaps the neighbor sum for the PPR-weighted aggregate.
inline Tensor gin_layer(Tape& t, const Tensor& h, const BatchedGraph& batch,
                        const GinLayerParams& p, bool diffusion_view = false) {
    if (h.cols() != p.w1.rows())
        throw ShapeError("gin_layer: feature dim " + std::to_string(h.cols()) +
                         " does not match weights " + std::to_string(p.w1.rows()));
    Tensor agg;
    if (diffusion_view) {
        if (!batch.diffusion) throw ConfigError("gin_layer: batch has no diffusion blocks");
        agg = t.block_matmul(batch.diffusion, h);
    } else {
        agg = t.scatter_add_rows(t.gather_rows(h, batch.edge_src), batch.edge_dst,
                                 batch.num_nodes);
    }
    Tensor pre;
    if (p.eps.defined())
        pre = t.add(t.add(h, t.scale_scalar(h, p.eps)), agg);
    else if (p.eps_value == 0.0)
        pre = t.add(h, agg);
    else
        pre = t.add(t.scale(h, 1.0 + p.eps_value), agg);
    Tensor z = t.relu(t.add(t.matmul(pre, p.w1), p.b1));
    return t.add(t.matmul(z, p.w2), p.b2);
}

inline Tensor readout(Tape& t, const Tensor& node_embs, const BatchedGraph& batch,
                      Readout mode = Readout::mean) {
    if (batch.num_graphs == 0) throw ShapeError("readout: empty batch");
    for (std::size_t g = 0; g < batch.num_graphs; ++g)
        if (batch.graph_offset[g + 1] == batch.graph_offset[g])
            throw DataError("readout: graph " + std::to_string(g) + " has no nodes");
    Tensor sums = t.scatter_add_rows(node_embs, batch.node_graph, batch.num_graphs);
    if (mode == Readout::sum) return sums;
    return t.scale_rows(sums, batch.inv_count);
}

class GinEncoder {
  public:
    GinEncoder() = default;

    GinEncoder(const GinEncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
        if (cfg.layers < 1 || cfg.hidden < 1) throw ConfigError("gin: layers and hidden must be >= 1");
        std::size_t in = cfg.input_dim;
        for (std::size_t l = 0; l < cfg.layers; ++l) {
            GinLayerParams p;
            p.w1 = glorot(in, cfg.hidden, rng);
            p.b1 = Tensor::zeros({1, cfg.hidden}, true);
            p.w2 = glorot(cfg.hidden, cfg.hidden, rng);
            p.b2 = Tensor::zeros({1, cfg.hidden}, true);
            p.eps_value = cfg.eps;
            if (cfg.learnable_eps) p.eps = Tensor::scalar(cfg.eps, true);
            layers_.push_back(std::move(p));
            in = cfg.hidden;
        }
    }

    const GinEncoderConfig& config() const { return cfg_; }
    std::size_t output_dim() const { return cfg_.hidden; }

    Tensor node_forward(Tape& t, const BatchedGraph& batch, bool diffusion_view = false) const {
        return node_forward(t, batch, diffusion_view, batch.features);
    }

    Tensor node_forward(Tape& t, const BatchedGraph& batch, bool diffusion_view,
                        const Tensor& features) const {
        Tensor h = features;
        for (const auto& p : layers_) h = gin_layer(t, h, batch, p, diffusion_view);
        return h;
    }

    Tensor forward(Tape& t, const BatchedGraph& batch, bool diffusion_view = false) const {
        return readout(t, node_forward(t, batch, diffusion_view), batch, cfg_.readout);
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (const auto& p : layers_) {
            out.push_back(p.w1);
            out.push_back(p.b1);
            out.push_back(p.w2);
            out.push_back(p.b2);
            if (p.eps.defined()) out.push_back(p.eps);
        }
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> named_params() const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t l = 0; l < layers_.size(); ++l) {
            const std::string base = "enc.l" + std::to_string(l) + ".";
            out.emplace_back(base + "w1", layers_[l].w1);
            out.emplace_back(base + "b1", layers_[l].b1);
            out.emplace_back(base + "w2", layers_[l].w2);
            out.emplace_back(base + "b2", layers_[l].b2);
            if (layers_[l].eps.defined()) out.emplace_back(base + "eps", layers_[l].eps);
        }
        return out;
    }

    const std::vector<GinLayerParams>& layers() const { return layers_; }

  private:
    GinEncoderConfig cfg_;
    std::vector<GinLayerParams> layers_;
};

// ----- MLP head -----------------------------------------------------------------

// depth 1 is a single affine map; deeper stacks insert relu between affines.
class MlpHead {
  public:
    MlpHead() = default;

    MlpHead(std::size_t in, std::size_t hidden, std::size_t out, std::size_t depth, Rng& rng) {
        if (depth < 1) throw ConfigError("mlp_head: depth must be >= 1");
        std::size_t cur = in;
        for (std::size_t l = 0; l < depth; ++l) {
            const std::size_t next = (l + 1 == depth) ? out : hidden;
            ws_.push_back(glorot(cur, next, rng));
            bs_.push_back(Tensor::zeros({1, next}, true));
            cur = next;
        }
    }

    Tensor forward(Tape& t, const Tensor& x) const {
        Tensor h = x;
        for (std::size_t l = 0; l < ws_.size(); ++l) {
            h = t.add(t.matmul(h, ws_[l]), bs_[l]);
            if (l + 1 < ws_.size()) h = t.relu(h);
        }
        return h;
    }

    std::vector<Tensor> params() const {
        std::vector<Tensor> out;
        for (std::size_t l = 0; l < ws_.size(); ++l) {
            out.push_back(ws_[l]);
            out.push_back(bs_[l]);
        }
        return out;
    }

    std::vector<std::pair<std::string, Tensor>> named_params(const std::string& prefix) const {
        std::vector<std::pair<std::string, Tensor>> out;
        for (std::size_t l = 0; l < ws_.size(); ++l) {
            out.emplace_back(prefix + ".l" + std::to_string(l) + ".w", ws_[l]);
            out.emplace_back(prefix + ".l" + std::to_string(l) + ".b", bs_[l]);
        }
        return out;
    }

  private:
    std::vector<Tensor> ws_, bs_;
};

// ----- corruption ------------------------------------------------------------------

// Negative-sample corruption: permute feature rows within each graph block.
// The row multiset is preserved, so summaries stay on-distribution.
inline Tensor corrupt_features(const Tensor& features, const BatchedGraph& batch, Rng& rng) {
    std::vector<double> out(features.values());
    const std::size_t f = features.cols();
    for (std::size_t g = 0; g < batch.num_graphs; ++g) {
        const std::uint32_t begin = batch.graph_offset[g], end = batch.graph_offset[g + 1];
        for (std::uint32_t i = end - begin; i > 1; --i) {
            const std::uint32_t j = static_cast<std::uint32_t>(rng.uniform_int(i));
            if (j == i - 1) continue;
            for (std::size_t c = 0; c < f; ++c)
                std::swap(out[(begin + i - 1) * f + c], out[(begin + j) * f + c]);
        }
    }
    return Tensor::from(features.shape(), std::move(out));
}

}  // namespace equad
