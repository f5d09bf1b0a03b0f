#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "equad/blob_io.hpp"
#include "equad/gnn.hpp"
#include "equad/hash.hpp"
#include "equad/version.hpp"

namespace equad {

// ----- configuration ------------------------------------------------------

struct ArchSpec {
    int arch_id = 0;
    std::size_t layers = 3;
    std::size_t width = 32;
};

struct SslConfig {
    std::vector<std::size_t> checkpoint_epochs{50, 100, 150};  // P
    std::vector<std::size_t> layer_counts{2, 3, 5};
    std::vector<std::size_t> widths{32, 64};
    double alpha_teleport = 0.2;
    std::size_t batch_size = 32;
    double lr = 1e-3;
    std::uint64_t seed = 1;
    std::size_t eval_batch = 256;
};

inline void validate(const SslConfig& cfg) {
    if (cfg.checkpoint_epochs.empty() || cfg.layer_counts.empty() || cfg.widths.empty())
        throw ConfigError("ssl: checkpoint/arch grid must be nonempty");
    if (!std::is_sorted(cfg.checkpoint_epochs.begin(), cfg.checkpoint_epochs.end()))
        throw ConfigError("ssl: checkpoint epochs must be sorted ascending");
    if (cfg.checkpoint_epochs.front() == 0) throw ConfigError("ssl: checkpoint epoch 0 invalid");
    if (cfg.batch_size == 0 || cfg.eval_batch == 0) throw ConfigError("ssl: batch sizes must be positive");
}

inline std::vector<ArchSpec> arch_grid(const SslConfig& cfg) {
    std::vector<ArchSpec> out;
    int id = 0;
    for (std::size_t l : cfg.layer_counts)
        for (std::size_t w : cfg.widths) out.push_back({id++, l, w});
    return out;
}

// ----- representation bank --------------------------------------------------

struct ReprMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;
    int arch_id = 0;
    std::size_t epoch = 0;
    std::string dataset_fingerprint;
    std::string split_tag = "all";
};

struct ReprBank {
    std::vector<ReprMatrix> entries;
    std::size_t train_end = 0, val_end = 0, total = 0;
    std::vector<ArchSpec> archs;
};

inline std::string dataset_fingerprint(const DatasetBundle& data) {
    return fingerprint(data.kind + "|" + data.config_snapshot.dump() + "|" +
                       std::to_string(data.total()));
}

// ----- infomax objective -------------------------------------------------------

// Binary cross-entropy over bilinear discriminator scores: positives pair a
// node with its own graph summary, negatives swap in a corrupted node. The
// mean over both sets is the (negated) Jensen-Shannon MI lower bound, so
// minimizing it maximizes local-global mutual information.
inline Tensor infomax_loss(Tape& t, const Tensor& node_embs, const Tensor& graph_embs,
                           const std::vector<std::uint32_t>& membership,
                           const Tensor& corrupted_node_embs, const Tensor& discriminator) {
    if (node_embs.rows() != corrupted_node_embs.rows())
        throw ShapeError("infomax_loss: positive count " + std::to_string(node_embs.rows()) +
                         " != negative count " + std::to_string(corrupted_node_embs.rows()));
    if (membership.size() != node_embs.rows())
        throw ShapeError("infomax_loss: membership size mismatch");
    const std::size_t n = node_embs.rows(), f = node_embs.cols();
    Tensor summaries = t.gather_rows(graph_embs, membership);
    Tensor ones = Tensor::filled({f, 1}, 1.0);
    Tensor pos_scores = t.matmul(t.mul(t.matmul(node_embs, discriminator), summaries), ones);
    Tensor neg_scores =
        t.matmul(t.mul(t.matmul(corrupted_node_embs, discriminator), summaries), ones);
    Tensor total = t.add(t.sum(t.softplus(t.scale(pos_scores, -1.0))),
                         t.sum(t.softplus(neg_scores)));
    return t.scale(total, 1.0 / static_cast<double>(2 * n));
}

// ----- SSL training ----------------------------------------------------------------

struct SslRunResult {
    std::vector<ReprMatrix> checkpoints;
    std::vector<double> epoch_losses;
};

namespace ssldetail {

inline std::vector<std::vector<std::size_t>> chunk_rows(const std::vector<std::size_t>& rows,
                                                        std::size_t chunk) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < rows.size(); i += chunk) {
        out.emplace_back(rows.begin() + i, rows.begin() + std::min(rows.size(), i + chunk));
    }
    return out;
}

}  // namespace ssldetail

// Two-view contrastive run (adjacency view and PPR-diffusion view, separate
// encoders, shared bilinear discriminator). At each checkpoint epoch the
// frozen graph embeddings for train+val+test are emitted; the per-graph
// representation is the elementwise sum of the two views' summaries.
inline SslRunResult train_ssl_single(const DatasetBundle& data, const ArchSpec& arch,
                                     const SslConfig& cfg) {
    validate(cfg);
    if (data.train.empty()) throw DataError("ssl: train split is empty");

    const std::string data_fp = dataset_fingerprint(data);
    Rng rng(Rng::derive(cfg.seed, 0x55eeull + static_cast<std::uint64_t>(arch.arch_id)));

    GinEncoderConfig ecfg;
    ecfg.layers = arch.layers;
    ecfg.hidden = arch.width;
    ecfg.input_dim = data.row(0).feat_dim;
    GinEncoder enc_adj(ecfg, rng), enc_diff(ecfg, rng);
    Tensor discriminator = glorot(arch.width, arch.width, rng);

    std::vector<Tensor> params = enc_adj.params();
    for (auto& p : enc_diff.params()) params.push_back(p);
    params.push_back(discriminator);
    Adam opt(params, {cfg.lr});

    // fixed batch assignment; per-graph PPR blocks are computed once
    std::vector<std::size_t> train_rows(data.train.size());
    for (std::size_t i = 0; i < train_rows.size(); ++i) train_rows[i] = i;
    rng.shuffle(train_rows);
    std::vector<BatchedGraph> batches;
    for (const auto& chunk : ssldetail::chunk_rows(train_rows, cfg.batch_size))
        batches.push_back(make_batch(data, chunk, true, cfg.alpha_teleport));

    SslRunResult result;
    const std::size_t total_epochs = cfg.checkpoint_epochs.back();
    std::size_t next_ckpt = 0;

    std::vector<BatchedGraph> eval_batches;  // built lazily at the first checkpoint

    for (std::size_t epoch = 1; epoch <= total_epochs; ++epoch) {
        double epoch_loss = 0.0;
        for (auto& batch : batches) {
            Tape t;
            Tensor nodes_adj = enc_adj.node_forward(t, batch, false);
            Tensor nodes_diff = enc_diff.node_forward(t, batch, true);
            Tensor summ_adj = readout(t, nodes_adj, batch);
            Tensor summ_diff = readout(t, nodes_diff, batch);
            Tensor corrupted = corrupt_features(batch.features, batch, rng);
            Tensor corr_adj = enc_adj.node_forward(t, batch, false, corrupted);
            Tensor corr_diff = enc_diff.node_forward(t, batch, true, corrupted);
            // cross-view pairing: nodes of one view vs summaries of the other
            Tensor loss = t.add(
                infomax_loss(t, nodes_adj, summ_diff, batch.node_graph, corr_adj, discriminator),
                infomax_loss(t, nodes_diff, summ_adj, batch.node_graph, corr_diff, discriminator));
            const double lv = loss.item();
            if (!std::isfinite(lv))
                throw NumericError("ssl: non-finite loss at epoch " + std::to_string(epoch) +
                                   " (arch " + std::to_string(arch.arch_id) + ")");
            t.backward(loss);
            opt.step();
            epoch_loss += lv;
        }
        result.epoch_losses.push_back(epoch_loss / static_cast<double>(batches.size()));

        if (next_ckpt < cfg.checkpoint_epochs.size() && epoch == cfg.checkpoint_epochs[next_ckpt]) {
            if (eval_batches.empty())
                for (const auto& chunk : ssldetail::chunk_rows(all_rows(data), cfg.eval_batch))
                    eval_batches.push_back(make_batch(data, chunk, true, cfg.alpha_teleport));
            ReprMatrix m;
            m.rows = data.total();
            m.cols = arch.width;
            m.arch_id = arch.arch_id;
            m.epoch = epoch;
            m.dataset_fingerprint = data_fp;
            m.data.reserve(m.rows * m.cols);
            for (const auto& eb : eval_batches) {
                Tape t;
                NoGradGuard ng(t);
                Tensor s_adj = readout(t, enc_adj.node_forward(t, eb, false), eb);
                Tensor s_diff = readout(t, enc_diff.node_forward(t, eb, true), eb);
                Tensor summary = t.add(s_adj, s_diff);
                m.data.insert(m.data.end(), summary.values().begin(), summary.values().end());
            }
            result.checkpoints.push_back(std::move(m));
            ++next_ckpt;
        }
    }
    return result;
}

// Full grid: |P| * |layers| * |widths| matrices (the default yields 18).
inline ReprBank build_repr_bank(const DatasetBundle& data, const SslConfig& cfg) {
    validate(cfg);
    ReprBank bank;
    bank.train_end = data.train_end();
    bank.val_end = data.val_end();
    bank.total = data.total();
    bank.archs = arch_grid(cfg);
    for (const auto& arch : bank.archs) {
        SslRunResult run = train_ssl_single(data, arch, cfg);
        if (run.checkpoints.size() != cfg.checkpoint_epochs.size())
            throw NumericError("ssl: arch " + std::to_string(arch.arch_id) +
                               " produced a partial checkpoint set");
        for (auto& m : run.checkpoints) bank.entries.push_back(std::move(m));
    }
    for (const auto& m : bank.entries)
        if (m.rows != bank.total)
            throw NumericError("ssl: bank entries disagree on sample count");
    return bank;
}

// ----- bank persistence ---------------------------------------------------------------

inline void save_bank(const ReprBank& bank, const std::filesystem::path& dir,
                      const std::string& config_fp = "") {
    std::filesystem::create_directories(dir);
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& m : bank.entries) {
        const std::string file =
            "repr_a" + std::to_string(m.arch_id) + "_e" + std::to_string(m.epoch) + ".bin";
        write_blob(dir / file, static_cast<std::uint32_t>(m.rows),
                   static_cast<std::uint32_t>(m.cols), m.data);
        entries.push_back({{"arch_id", m.arch_id},
                           {"epoch", m.epoch},
                           {"rows", m.rows},
                           {"cols", m.cols},
                           {"file", file},
                           {"split_tag", m.split_tag}});
    }
    nlohmann::json archs = nlohmann::json::array();
    for (const auto& a : bank.archs)
        archs.push_back({{"arch_id", a.arch_id}, {"layers", a.layers}, {"width", a.width}});
    nlohmann::json manifest = {
        {"entries", entries},
        {"archs", archs},
        {"split_offsets",
         {{"train_end", bank.train_end}, {"val_end", bank.val_end}, {"total", bank.total}}},
        {"dataset_fingerprint",
         bank.entries.empty() ? "" : bank.entries.front().dataset_fingerprint},
        {"config_fingerprint", config_fp},
        {"code_version", kVersion}};
    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) throw IoError("save_bank: cannot open manifest in " + dir.string());
    mf << manifest.dump(2) << "\n";
}

inline ReprBank load_bank(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("load_bank: cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_bank: bad manifest: " + std::string(e.what()));
    }
    ReprBank bank;
    bank.train_end = manifest["split_offsets"]["train_end"].get<std::size_t>();
    bank.val_end = manifest["split_offsets"]["val_end"].get<std::size_t>();
    bank.total = manifest["split_offsets"]["total"].get<std::size_t>();
    for (const auto& a : manifest["archs"])
        bank.archs.push_back({a["arch_id"].get<int>(), a["layers"].get<std::size_t>(),
                              a["width"].get<std::size_t>()});
    const std::string data_fp = manifest.value("dataset_fingerprint", "");
    for (const auto& e : manifest["entries"]) {
        const Blob blob = read_blob(dir / e["file"].get<std::string>());
        ReprMatrix m;
        m.rows = blob.rows;
        m.cols = blob.cols;
        m.data = blob.data;
        m.arch_id = e["arch_id"].get<int>();
        m.epoch = e["epoch"].get<std::size_t>();
        m.split_tag = e.value("split_tag", "all");
        m.dataset_fingerprint = data_fp;
        if (m.rows != bank.total) throw IoError("load_bank: entry rows disagree with offsets");
        bank.entries.push_back(std::move(m));
    }
    return bank;
}

}  // namespace equad
