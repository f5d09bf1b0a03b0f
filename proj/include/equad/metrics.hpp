#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "equad/gnn.hpp"
#include "equad/rng.hpp"

namespace equad {

inline double accuracy(std::span<const int> predictions, std::span<const int> labels) {
    if (predictions.size() != labels.size())
        throw ShapeError("accuracy: prediction/label length mismatch");
    if (predictions.empty()) throw ShapeError("accuracy: empty input");
    std::size_t hit = 0;
    for (std::size_t i = 0; i < predictions.size(); ++i)
        if (predictions[i] == labels[i]) ++hit;
    return static_cast<double>(hit) / static_cast<double>(predictions.size());
}

// Mann-Whitney AUC with half credit for ties.
inline double auc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) throw ShapeError("auc: score/label length mismatch");
    std::size_t pos = 0, neg = 0;
    for (int y : labels) (y == 1 ? pos : neg)++;
    if (pos == 0 || neg == 0) throw DataError("auc: both classes must be present");

    std::vector<std::size_t> order(scores.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(),
              [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
    // average ranks over tie groups
    std::vector<double> rank(scores.size());
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j + 1 < order.size() && scores[order[j + 1]] == scores[order[i]]) ++j;
        const double avg = (static_cast<double>(i) + static_cast<double>(j)) / 2.0 + 1.0;
        for (std::size_t k = i; k <= j; ++k) rank[order[k]] = avg;
        i = j + 1;
    }
    double rank_sum_pos = 0.0;
    for (std::size_t k = 0; k < scores.size(); ++k)
        if (labels[k] == 1) rank_sum_pos += rank[k];
    const double n_pos = static_cast<double>(pos), n_neg = static_cast<double>(neg);
    return (rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0) / (n_pos * n_neg);
}

// ----- central moment discrepancy ------------------------------------------------

struct CmdConfig {
    std::size_t max_order = 5;
};

// Order-1 term is the distance between raw means (central first moments vanish
// identically); orders 2..K compare per-dimension central moments, each order
// contributing its euclidean norm across dimensions.
inline double cmd(const std::vector<double>& x, std::size_t nx, const std::vector<double>& y,
                  std::size_t ny, std::size_t dim, const CmdConfig& cfg = {}) {
    if (cfg.max_order < 1) throw ConfigError("cmd: max order must be >= 1");
    if (dim == 0 || nx * dim != x.size() || ny * dim != y.size())
        throw ShapeError("cmd: sample matrices do not match the given dimension");
    if (nx < 2 || ny < 2) throw ShapeError("cmd: need at least 2 samples per set");

    std::vector<double> mean_x(dim, 0.0), mean_y(dim, 0.0);
    for (std::size_t i = 0; i < nx; ++i)
        for (std::size_t d = 0; d < dim; ++d) mean_x[d] += x[i * dim + d];
    for (std::size_t i = 0; i < ny; ++i)
        for (std::size_t d = 0; d < dim; ++d) mean_y[d] += y[i * dim + d];
    for (std::size_t d = 0; d < dim; ++d) {
        mean_x[d] /= static_cast<double>(nx);
        mean_y[d] /= static_cast<double>(ny);
    }
    double total = 0.0;
    {
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) s += (mean_x[d] - mean_y[d]) * (mean_x[d] - mean_y[d]);
        total += std::sqrt(s);
    }
    for (std::size_t k = 2; k <= cfg.max_order; ++k) {
        std::vector<double> mx(dim, 0.0), my(dim, 0.0);
        for (std::size_t i = 0; i < nx; ++i)
            for (std::size_t d = 0; d < dim; ++d)
                mx[d] += std::pow(x[i * dim + d] - mean_x[d], static_cast<double>(k));
        for (std::size_t i = 0; i < ny; ++i)
            for (std::size_t d = 0; d < dim; ++d)
                my[d] += std::pow(y[i * dim + d] - mean_y[d], static_cast<double>(k));
        double s = 0.0;
        for (std::size_t d = 0; d < dim; ++d) {
            const double diff = mx[d] / static_cast<double>(nx) - my[d] / static_cast<double>(ny);
            s += diff * diff;
        }
        total += std::sqrt(s);
    }
    return total;
}

// per-dimension min-max rescale to [0,1] over the union of both sets
inline void unit_range_standardize(std::vector<double>& x, std::size_t nx, std::vector<double>& y,
                                   std::size_t ny, std::size_t dim) {
    for (std::size_t d = 0; d < dim; ++d) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (std::size_t i = 0; i < nx; ++i) {
            lo = std::min(lo, x[i * dim + d]);
            hi = std::max(hi, x[i * dim + d]);
        }
        for (std::size_t i = 0; i < ny; ++i) {
            lo = std::min(lo, y[i * dim + d]);
            hi = std::max(hi, y[i * dim + d]);
        }
        const double span = hi - lo > 1e-12 ? hi - lo : 1.0;
        for (std::size_t i = 0; i < nx; ++i) x[i * dim + d] = (x[i * dim + d] - lo) / span;
        for (std::size_t i = 0; i < ny; ++i) y[i * dim + d] = (y[i * dim + d] - lo) / span;
    }
}

// ----- feature-reweighting probe -----------------------------------------------------

struct ProbeConfig {
    std::size_t hidden = 64;
    std::size_t epochs = 300;
    double lr = 1e-3;
    std::uint64_t seed = 1;
};

struct ProbeResult {
    double val_acc = 0.0;   // held-out half of the validation split
    double test_acc = 0.0;
};

namespace probedetail {

inline std::vector<int> argmax_rows(const Tensor& logits) {
    std::vector<int> out(logits.rows());
    for (std::size_t r = 0; r < logits.rows(); ++r) {
        int best = 0;
        for (std::size_t c = 1; c < logits.cols(); ++c)
            if (logits.at(r, c) > logits.at(r, best)) best = static_cast<int>(c);
        out[r] = best;
    }
    return out;
}

}  // namespace probedetail

// Freeze the representation, retrain a 2-layer MLP head on half of the
// validation split (where the spurious correlation does not hold) and measure
// accuracy on the other half and on test. `embeddings` covers every dataset
// row; the producing encoder is never touched.
inline ProbeResult probe_reweight_matrix(const std::vector<double>& embeddings, std::size_t rows,
                                         std::size_t cols, const DatasetBundle& data,
                                         const ProbeConfig& cfg = {}) {
    if (rows != data.total()) throw ShapeError("probe: embedding rows must cover the dataset");
    const std::size_t val_begin = data.train_end(), val_end = data.val_end();
    std::vector<std::size_t> val_rows;
    for (std::size_t i = val_begin; i < val_end; ++i) val_rows.push_back(i);
    if (val_rows.size() < 2) throw DataError("probe: validation split too small to halve");

    Rng rng(Rng::derive(cfg.seed, 0x9e0beull));
    rng.shuffle(val_rows);
    const std::size_t half = val_rows.size() / 2;
    std::vector<std::size_t> fit_rows(val_rows.begin(), val_rows.begin() + half);
    std::vector<std::size_t> hold_rows(val_rows.begin() + half, val_rows.end());
    if (fit_rows.empty() || hold_rows.empty()) throw DataError("probe: empty half split");

    // standardize with fit-half statistics
    std::vector<double> mean(cols, 0.0), sd(cols, 0.0);
    for (std::size_t r : fit_rows)
        for (std::size_t c = 0; c < cols; ++c) mean[c] += embeddings[r * cols + c];
    for (std::size_t c = 0; c < cols; ++c) mean[c] /= static_cast<double>(fit_rows.size());
    for (std::size_t r : fit_rows)
        for (std::size_t c = 0; c < cols; ++c) {
            const double d = embeddings[r * cols + c] - mean[c];
            sd[c] += d * d;
        }
    for (std::size_t c = 0; c < cols; ++c) {
        sd[c] = std::sqrt(sd[c] / static_cast<double>(fit_rows.size()));
        if (sd[c] < 1e-12) sd[c] = 1.0;
    }
    auto slice = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> out(idx.size() * cols);
        for (std::size_t i = 0; i < idx.size(); ++i)
            for (std::size_t c = 0; c < cols; ++c)
                out[i * cols + c] = (embeddings[idx[i] * cols + c] - mean[c]) / sd[c];
        return out;
    };

    const int classes = data.num_classes;
    Tensor x_fit = Tensor::from({fit_rows.size(), cols}, slice(fit_rows));
    std::vector<double> mask(fit_rows.size() * classes, 0.0);
    for (std::size_t i = 0; i < fit_rows.size(); ++i)
        mask[i * classes + data.row(fit_rows[i]).label] = -1.0 / static_cast<double>(fit_rows.size());
    Tensor ce_mask = Tensor::from({fit_rows.size(), static_cast<std::size_t>(classes)}, std::move(mask));

    MlpHead head(cols, cfg.hidden, static_cast<std::size_t>(classes), 2, rng);
    Adam opt(head.params(), {cfg.lr});
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Tape t;
        Tensor loss = t.sum(t.mul(t.log_softmax_rows(head.forward(t, x_fit)), ce_mask));
        if (!std::isfinite(loss.item())) throw NumericError("probe: non-finite loss");
        t.backward(loss);
        opt.step();
    }

    auto eval_acc = [&](const std::vector<std::size_t>& idx) {
        Tape t;
        NoGradGuard ng(t);
        Tensor logits = head.forward(t, Tensor::from({idx.size(), cols}, slice(idx)));
        const auto pred = probedetail::argmax_rows(logits);
        std::vector<int> truth(idx.size());
        for (std::size_t i = 0; i < idx.size(); ++i) truth[i] = data.row(idx[i]).label;
        return accuracy(pred, truth);
    };
    std::vector<std::size_t> test_rows;
    for (std::size_t i = data.val_end(); i < data.total(); ++i) test_rows.push_back(i);
    return {eval_acc(hold_rows), eval_acc(test_rows)};
}

// embeddings for every dataset row from a frozen encoder (adjacency view)
inline std::vector<double> encoder_embeddings(const GinEncoder& enc, const DatasetBundle& data,
                                              std::size_t eval_batch = 256) {
    std::vector<double> out;
    out.reserve(data.total() * enc.output_dim());
    const auto rows = all_rows(data);
    for (std::size_t i = 0; i < rows.size(); i += eval_batch) {
        std::vector<std::size_t> chunk(rows.begin() + i,
                                       rows.begin() + std::min(rows.size(), i + eval_batch));
        const BatchedGraph batch = make_batch(data, chunk);
        Tape t;
        NoGradGuard ng(t);
        Tensor embs = enc.forward(t, batch);
        out.insert(out.end(), embs.values().begin(), embs.values().end());
    }
    return out;
}

inline ProbeResult probe_reweight(const GinEncoder& enc, const DatasetBundle& data,
                                  const ProbeConfig& cfg = {}) {
    const std::vector<double> embs = encoder_embeddings(enc, data);
    return probe_reweight_matrix(embs, data.total(), enc.output_dim(), data, cfg);
}

// ----- embedding export -----------------------------------------------------------------

// CSV: id,label,corr,e0..e{F-1} with 6 significant digits
inline void export_embeddings_csv(const std::vector<double>& embeddings, std::size_t rows,
                                  std::size_t cols, const DatasetBundle& data,
                                  const std::filesystem::path& path) {
    if (rows != data.total()) throw ShapeError("export_embeddings_csv: row count mismatch");
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw IoError("export_embeddings_csv: cannot open " + path.string());
    os << "id,label,corr";
    for (std::size_t c = 0; c < cols; ++c) os << ",e" << c;
    os << "\n";
    char buf[32];
    for (std::size_t r = 0; r < rows; ++r) {
        const GraphInstance& g = data.row(r);
        os << r << "," << g.label << "," << to_string(g.corr_group);
        for (std::size_t c = 0; c < cols; ++c) {
            std::snprintf(buf, sizeof(buf), "%.6g", embeddings[r * cols + c]);
            os << "," << buf;
        }
        os << "\n";
    }
    if (!os) throw IoError("export_embeddings_csv: write failed for " + path.string());
}

}  // namespace equad
