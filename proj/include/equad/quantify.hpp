#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "equad/blob_io.hpp"
#include "equad/metrics.hpp"
#include "equad/ssl.hpp"

namespace equad {

// Calibrated class-probability matrix quantifying, per sample, how strongly
// its spurious pattern co-occurs with its label. v is the producing
// classifier's validation metric (accuracy for multiclass, AUC for binary).
struct LogitsMatrix {
    std::size_t rows = 0, cols = 0;
    std::vector<double> probs;  // row-stochastic
    double v = 0.0;
    int arch_id = 0;
    std::size_t epoch = 0;
    double reg = 0.0;
    bool converged = true;
    int iterations = 0;
    std::string metric = "accuracy";
    nlohmann::json calibration;

    double at(std::size_t r, std::size_t c) const { return probs[r * cols + c]; }
    // ground-truth-class logit s_iy
    double truth_prob(std::size_t r, int label) const {
        return probs[r * cols + static_cast<std::size_t>(label)];
    }
};

namespace qdetail {

struct LogisticFit {
    Eigen::MatrixXd w;  // d x C
    Eigen::VectorXd b;  // C
    bool converged = false;
    int iterations = 0;
};

inline Eigen::MatrixXd softmax_scores(const Eigen::MatrixXd& z) {
    Eigen::MatrixXd p = z;
    for (Eigen::Index r = 0; r < p.rows(); ++r) {
        const double mx = p.row(r).maxCoeff();
        p.row(r) = (p.row(r).array() - mx).exp();
        p.row(r) /= p.row(r).sum();
    }
    return p;
}

// Full-batch gradient descent with Armijo backtracking on the L2-regularized
// multinomial logistic loss, run to gradient-norm <= tol or max_iter.
inline LogisticFit fit_logistic(const Eigen::MatrixXd& x, const std::vector<int>& y, int classes,
                                double reg, int max_iter = 4000, double tol = 1e-6) {
    const Eigen::Index n = x.rows(), d = x.cols();
    LogisticFit fit;
    fit.w = Eigen::MatrixXd::Zero(d, classes);
    fit.b = Eigen::VectorXd::Zero(classes);

    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n, classes);
    for (Eigen::Index i = 0; i < n; ++i) onehot(i, y[static_cast<std::size_t>(i)]) = 1.0;

    auto loss_of = [&](const Eigen::MatrixXd& w, const Eigen::VectorXd& b) {
        Eigen::MatrixXd z = (x * w).rowwise() + b.transpose();
        double ll = 0.0;
        for (Eigen::Index r = 0; r < n; ++r) {
            const double mx = z.row(r).maxCoeff();
            const double lse = mx + std::log((z.row(r).array() - mx).exp().sum());
            ll += lse - z(r, y[static_cast<std::size_t>(r)]);
        }
        return ll / static_cast<double>(n) + 0.5 * reg * w.squaredNorm();
    };

    double step = 1.0;
    double cur_loss = loss_of(fit.w, fit.b);
    for (fit.iterations = 0; fit.iterations < max_iter; ++fit.iterations) {
        Eigen::MatrixXd z = (x * fit.w).rowwise() + fit.b.transpose();
        Eigen::MatrixXd diff = (softmax_scores(z) - onehot) / static_cast<double>(n);
        Eigen::MatrixXd gw = x.transpose() * diff + reg * fit.w;
        Eigen::VectorXd gb = diff.colwise().sum();
        const double gnorm = std::sqrt(gw.squaredNorm() + gb.squaredNorm());
        if (gnorm <= tol) {
            fit.converged = true;
            break;
        }
        bool accepted = false;
        for (int half = 0; half < 40; ++half) {
            Eigen::MatrixXd w_try = fit.w - step * gw;
            Eigen::VectorXd b_try = fit.b - step * gb;
            const double l_try = loss_of(w_try, b_try);
            if (l_try <= cur_loss - 0.25 * step * gnorm * gnorm) {
                fit.w = std::move(w_try);
                fit.b = std::move(b_try);
                cur_loss = l_try;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted) break;  // step underflow, gradient direction exhausted
        step = std::min(step * 1.25, 64.0);
    }
    return fit;
}

struct Standardizer {
    Eigen::VectorXd mean, sd;
    Eigen::MatrixXd apply(const Eigen::MatrixXd& x) const {
        return (x.rowwise() - mean.transpose()).array().rowwise() / sd.transpose().array();
    }
};

inline Standardizer make_standardizer(const Eigen::MatrixXd& x_train) {
    Standardizer s;
    s.mean = x_train.colwise().mean();
    Eigen::MatrixXd centered = x_train.rowwise() - s.mean.transpose();
    s.sd = (centered.array().square().colwise().mean()).sqrt();
    for (Eigen::Index i = 0; i < s.sd.size(); ++i)
        if (s.sd(i) < 1e-12) s.sd(i) = 1.0;
    return s;
}

}  // namespace qdetail

// ----- Platt calibration -------------------------------------------------------------

struct PlattParams {
    std::vector<double> a, b;  // per class
};

namespace qdetail {

// single sigmoid fit sigma(a*z + b) by damped Newton with Platt's smoothed targets
inline std::pair<double, double> fit_sigmoid(const std::vector<double>& z,
                                             const std::vector<int>& target) {
    std::size_t n_pos = 0;
    for (int t : target) n_pos += static_cast<std::size_t>(t);
    const std::size_t n_neg = target.size() - n_pos;
    if (n_pos == 0 || n_neg == 0)
        throw DataError("platt: calibration fold contains a single class");
    const double t_pos = (static_cast<double>(n_pos) + 1.0) / (static_cast<double>(n_pos) + 2.0);
    const double t_neg = 1.0 / (static_cast<double>(n_neg) + 2.0);

    double a = 1.0, b = 0.0;
    auto loss_of = [&](double aa, double bb) {
        double l = 0.0;
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double t = target[i] ? t_pos : t_neg;
            const double s = aa * z[i] + bb;
            const double sp = s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
            l += sp - t * s;  // -t log p - (1-t) log(1-p) up to softplus identity
        }
        return l;
    };
    double cur = loss_of(a, b);
    for (int iter = 0; iter < 200; ++iter) {
        double ga = 0, gb = 0, haa = 1e-9, hab = 0, hbb = 1e-9;
        for (std::size_t i = 0; i < z.size(); ++i) {
            const double t = target[i] ? t_pos : t_neg;
            const double s = a * z[i] + b;
            const double p = s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
            const double e = p - t;
            ga += e * z[i];
            gb += e;
            const double w = std::max(p * (1 - p), 1e-12);
            haa += w * z[i] * z[i];
            hab += w * z[i];
            hbb += w;
        }
        if (std::sqrt(ga * ga + gb * gb) < 1e-10) break;
        const double det = haa * hbb - hab * hab;
        double da = (hbb * ga - hab * gb) / det;
        double db = (haa * gb - hab * ga) / det;
        double scale = 1.0;
        for (int half = 0; half < 30; ++half) {
            const double l_try = loss_of(a - scale * da, b - scale * db);
            if (l_try <= cur) {
                a -= scale * da;
                b -= scale * db;
                cur = l_try;
                break;
            }
            scale *= 0.5;
        }
    }
    return {a, b};
}

}  // namespace qdetail

// One-vs-rest sigmoid calibration: per class, fold-averaged (a, b) fitted on
// held-out folds, applied to all scores and renormalized per row.
inline PlattParams fit_platt(const std::vector<double>& scores, std::size_t n, std::size_t classes,
                             const std::vector<int>& labels, int folds) {
    if (folds < 2) throw ConfigError("platt: folds must be >= 2");
    if (labels.size() != n) throw ShapeError("platt: label count mismatch");
    for (double s : scores)
        if (!std::isfinite(s)) throw NumericError("platt: non-finite score");
    PlattParams params;
    params.a.assign(classes, 0.0);
    params.b.assign(classes, 0.0);
    for (std::size_t c = 0; c < classes; ++c) {
        double a_sum = 0.0, b_sum = 0.0;
        for (int f = 0; f < folds; ++f) {
            std::vector<double> z;
            std::vector<int> t;
            for (std::size_t i = 0; i < n; ++i) {
                if (static_cast<int>(i % static_cast<std::size_t>(folds)) == f) continue;
                z.push_back(scores[i * classes + c]);
                t.push_back(labels[i] == static_cast<int>(c) ? 1 : 0);
            }
            const auto [a, b] = qdetail::fit_sigmoid(z, t);
            a_sum += a;
            b_sum += b;
        }
        params.a[c] = a_sum / folds;
        params.b[c] = b_sum / folds;
    }
    return params;
}

inline std::vector<double> apply_platt(const std::vector<double>& scores, std::size_t n,
                                       std::size_t classes, const PlattParams& params) {
    std::vector<double> probs(n * classes);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t c = 0; c < classes; ++c) {
            const double s = params.a[c] * scores[i * classes + c] + params.b[c];
            const double p = s >= 0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
            probs[i * classes + c] = std::min(std::max(p, 1e-12), 1.0 - 1e-12);
            sum += probs[i * classes + c];
        }
        for (std::size_t c = 0; c < classes; ++c) probs[i * classes + c] /= sum;
    }
    return probs;
}

inline std::vector<double> platt_calibrate(const std::vector<double>& scores, std::size_t n,
                                           std::size_t classes, const std::vector<int>& labels,
                                           int folds, PlattParams* out_params = nullptr) {
    const PlattParams params = fit_platt(scores, n, classes, labels, folds);
    if (out_params) *out_params = params;
    return apply_platt(scores, n, classes, params);
}

// ----- spurious classifier ------------------------------------------------------------

// Trains a regularized linear classifier on the train rows of H, calibrates
// on out-of-fold scores, scores every row, and evaluates v on the val rows.
inline LogitsMatrix fit_spurious_classifier(const ReprMatrix& h, const std::vector<int>& labels,
                                            std::size_t train_end, std::size_t val_end,
                                            int classes, double reg, int folds = 5) {
    if (h.rows != labels.size()) throw ShapeError("quantify: embedding/label row mismatch");
    if (train_end == 0 || train_end > val_end || val_end > h.rows)
        throw ConfigError("quantify: bad split offsets");
    {
        std::vector<char> seen(static_cast<std::size_t>(classes), 0);
        int distinct = 0;
        for (std::size_t i = 0; i < train_end; ++i)
            if (!seen[static_cast<std::size_t>(labels[i])]) {
                seen[static_cast<std::size_t>(labels[i])] = 1;
                ++distinct;
            }
        if (distinct < 2) throw DataError("quantify: train split has fewer than 2 classes");
    }

    Eigen::MatrixXd x_all(h.rows, h.cols);
    for (std::size_t r = 0; r < h.rows; ++r)
        for (std::size_t c = 0; c < h.cols; ++c) x_all(r, c) = h.data[r * h.cols + c];
    const qdetail::Standardizer stz = qdetail::make_standardizer(x_all.topRows(train_end));
    Eigen::MatrixXd xs = stz.apply(x_all);

    std::vector<int> y_train(labels.begin(), labels.begin() + train_end);

    // out-of-fold decision scores for calibration
    std::vector<double> oof_scores(train_end * static_cast<std::size_t>(classes), 0.0);
    for (int f = 0; f < folds; ++f) {
        std::vector<Eigen::Index> fit_idx, hold_idx;
        for (std::size_t i = 0; i < train_end; ++i)
            (static_cast<int>(i % static_cast<std::size_t>(folds)) == f ? hold_idx : fit_idx)
                .push_back(static_cast<Eigen::Index>(i));
        Eigen::MatrixXd xf(fit_idx.size(), h.cols);
        std::vector<int> yf(fit_idx.size());
        for (std::size_t i = 0; i < fit_idx.size(); ++i) {
            xf.row(i) = xs.row(fit_idx[i]);
            yf[i] = labels[static_cast<std::size_t>(fit_idx[i])];
        }
        const auto fold_fit = qdetail::fit_logistic(xf, yf, classes, reg);
        for (Eigen::Index i : hold_idx) {
            const Eigen::RowVectorXd z = xs.row(i) * fold_fit.w + fold_fit.b.transpose();
            for (int c = 0; c < classes; ++c)
                oof_scores[static_cast<std::size_t>(i) * classes + c] = z(c);
        }
    }
    const PlattParams platt =
        fit_platt(oof_scores, train_end, static_cast<std::size_t>(classes), y_train, folds);

    // final classifier on the full train split
    const auto fit =
        qdetail::fit_logistic(xs.topRows(train_end), y_train, classes, reg);
    Eigen::MatrixXd z_all = (xs * fit.w).rowwise() + fit.b.transpose();
    std::vector<double> raw(h.rows * static_cast<std::size_t>(classes));
    for (std::size_t r = 0; r < h.rows; ++r)
        for (int c = 0; c < classes; ++c) raw[r * classes + c] = z_all(r, c);

    LogitsMatrix out;
    out.rows = h.rows;
    out.cols = static_cast<std::size_t>(classes);
    out.probs = apply_platt(raw, h.rows, out.cols, platt);
    out.arch_id = h.arch_id;
    out.epoch = h.epoch;
    out.reg = reg;
    out.converged = fit.converged;
    out.iterations = fit.iterations;
    out.calibration = {{"a", platt.a}, {"b", platt.b}, {"folds", folds}};

    // validation metric from the calibrated probabilities
    std::vector<int> val_labels(labels.begin() + train_end, labels.begin() + val_end);
    if (classes == 2) {
        std::vector<double> val_scores;
        for (std::size_t r = train_end; r < val_end; ++r) val_scores.push_back(out.at(r, 1));
        out.v = auc(val_scores, val_labels);
        out.metric = "auc";
    } else {
        std::vector<int> pred;
        for (std::size_t r = train_end; r < val_end; ++r) {
            int best = 0;
            for (int c = 1; c < classes; ++c)
                if (out.at(r, c) > out.at(r, static_cast<std::size_t>(best))) best = c;
            pred.push_back(best);
        }
        out.v = accuracy(pred, val_labels);
        out.metric = "accuracy";
    }
    return out;
}

// ----- bank quantification ----------------------------------------------------------------

struct QuantifyResult {
    std::vector<LogitsMatrix> matrices;   // one per bank entry, best reg each
    std::vector<std::string> failures;    // per-cell errors, fit continues elsewhere
};

inline QuantifyResult quantify_bank(const ReprBank& bank, const std::vector<int>& labels,
                                    int classes, const std::vector<double>& reg_grid,
                                    int folds = 5) {
    if (bank.entries.empty()) throw ConfigError("quantify: empty bank");
    if (reg_grid.empty()) throw ConfigError("quantify: empty regularization grid");
    QuantifyResult result;
    for (const auto& entry : bank.entries) {
        bool have = false;
        LogitsMatrix best;
        for (double reg : reg_grid) {
            try {
                LogitsMatrix m = fit_spurious_classifier(entry, labels, bank.train_end,
                                                         bank.val_end, classes, reg, folds);
                if (!have || m.v > best.v) {
                    best = std::move(m);
                    have = true;
                }
            } catch (const EquadError& e) {
                result.failures.push_back("arch " + std::to_string(entry.arch_id) + " epoch " +
                                          std::to_string(entry.epoch) + " reg " +
                                          std::to_string(reg) + ": " + e.what());
            }
        }
        if (have) result.matrices.push_back(std::move(best));
    }
    if (result.matrices.empty())
        throw NumericError("quantify: every cell failed (" +
                           std::to_string(result.failures.size()) + " errors)");
    std::sort(result.matrices.begin(), result.matrices.end(),
              [](const LogitsMatrix& a, const LogitsMatrix& b) {
                  return std::tie(a.arch_id, a.epoch) < std::tie(b.arch_id, b.epoch);
              });
    return result;
}

// Indices of the M entries with the lowest validation metric, ascending;
// ties broken by (arch_id, epoch) so the selection is deterministic.
inline std::vector<std::size_t> select_top_m(const std::vector<LogitsMatrix>& matrices,
                                             std::size_t m) {
    if (m == 0) throw ConfigError("select_top_m: M must be >= 1");
    if (m > matrices.size())
        throw ConfigError("select_top_m: M = " + std::to_string(m) + " exceeds list size " +
                          std::to_string(matrices.size()));
    std::vector<std::size_t> idx(matrices.size());
    std::iota(idx.begin(), idx.end(), 0u);
    std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
        return std::tie(matrices[a].v, matrices[a].arch_id, matrices[a].epoch) <
               std::tie(matrices[b].v, matrices[b].arch_id, matrices[b].epoch);
    });
    idx.resize(m);
    return idx;
}

// ----- subgroup statistics -------------------------------------------------------------------

struct SubgroupStats {
    struct Cell {
        std::size_t count = 0;
        double mean = 0.0, q25 = 0.0, q50 = 0.0, q75 = 0.0;
    };
    std::vector<std::array<Cell, 2>> per_class;  // [class][0=high, 1=low]

    std::string to_csv() const {
        std::string out = "class,group,count,mean,q25,q50,q75\n";
        char buf[160];
        for (std::size_t c = 0; c < per_class.size(); ++c)
            for (int g = 0; g < 2; ++g) {
                const Cell& cell = per_class[c][static_cast<std::size_t>(g)];
                std::snprintf(buf, sizeof(buf), "%zu,%s,%zu,%.6g,%.6g,%.6g,%.6g\n", c,
                              g == 0 ? "high" : "low", cell.count, cell.mean, cell.q25, cell.q50,
                              cell.q75);
                out += buf;
            }
        return out;
    }
};

namespace qdetail {

inline double quantile_sorted(const std::vector<double>& sorted, double q) {
    if (sorted.empty()) return 0.0;
    const double pos = q * static_cast<double>(sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
    const double frac = pos - static_cast<double>(lo);
    return sorted[lo] * (1.0 - frac) + sorted[hi] * frac;
}

}  // namespace qdetail

// Distribution of the ground-truth-class logit s_iy per class, split by the
// high/low spurious-correlation group, over rows [row_begin, row_end).
inline SubgroupStats subgroup_logits_stats(const LogitsMatrix& s, const DatasetBundle& data,
                                           std::size_t row_begin, std::size_t row_end) {
    if (s.rows != data.total()) throw ShapeError("subgroup_logits_stats: row count mismatch");
    if (row_end > s.rows || row_begin >= row_end)
        throw ConfigError("subgroup_logits_stats: bad row range");
    SubgroupStats stats;
    stats.per_class.resize(static_cast<std::size_t>(data.num_classes));
    std::vector<std::array<std::vector<double>, 2>> vals(
        static_cast<std::size_t>(data.num_classes));
    for (std::size_t r = row_begin; r < row_end; ++r) {
        const GraphInstance& g = data.row(r);
        const int grp = g.corr_group == CorrGroup::high ? 0 : 1;
        vals[static_cast<std::size_t>(g.label)][static_cast<std::size_t>(grp)].push_back(
            s.truth_prob(r, g.label));
    }
    for (std::size_t c = 0; c < vals.size(); ++c)
        for (int g = 0; g < 2; ++g) {
            auto& v = vals[c][static_cast<std::size_t>(g)];
            auto& cell = stats.per_class[c][static_cast<std::size_t>(g)];
            cell.count = v.size();
            if (v.empty()) continue;  // empty group, stats stay zero
            std::sort(v.begin(), v.end());
            cell.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
            cell.q25 = qdetail::quantile_sorted(v, 0.25);
            cell.q50 = qdetail::quantile_sorted(v, 0.50);
            cell.q75 = qdetail::quantile_sorted(v, 0.75);
        }
    return stats;
}

// ----- logits persistence ----------------------------------------------------------------------

inline void save_logits(const std::vector<LogitsMatrix>& matrices,
                        const std::filesystem::path& dir, const std::string& config_fp = "") {
    std::filesystem::create_directories(dir);
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& m : matrices) {
        const std::string file =
            "logits_a" + std::to_string(m.arch_id) + "_e" + std::to_string(m.epoch) + ".bin";
        write_blob(dir / file, static_cast<std::uint32_t>(m.rows),
                   static_cast<std::uint32_t>(m.cols), m.probs);
        entries.push_back({{"arch_id", m.arch_id},
                           {"epoch", m.epoch},
                           {"rows", m.rows},
                           {"cols", m.cols},
                           {"file", file},
                           {"v", m.v},
                           {"reg", m.reg},
                           {"metric", m.metric},
                           {"converged", m.converged},
                           {"iterations", m.iterations},
                           {"calibration", m.calibration}});
    }
    nlohmann::json manifest = {{"entries", entries},
                               {"config_fingerprint", config_fp},
                               {"code_version", kVersion}};
    std::ofstream mf(dir / "manifest.json", std::ios::trunc);
    if (!mf) throw IoError("save_logits: cannot open manifest in " + dir.string());
    mf << manifest.dump(2) << "\n";
}

inline std::vector<LogitsMatrix> load_logits(const std::filesystem::path& dir) {
    std::ifstream mf(dir / "manifest.json");
    if (!mf) throw IoError("load_logits: cannot open " + (dir / "manifest.json").string());
    nlohmann::json manifest;
    try {
        mf >> manifest;
    } catch (const nlohmann::json::exception& e) {
        throw IoError("load_logits: bad manifest: " + std::string(e.what()));
    }
    std::vector<LogitsMatrix> out;
    for (const auto& e : manifest["entries"]) {
        const Blob blob = read_blob(dir / e["file"].get<std::string>());
        LogitsMatrix m;
        m.rows = blob.rows;
        m.cols = blob.cols;
        m.probs = blob.data;
        m.arch_id = e["arch_id"].get<int>();
        m.epoch = e["epoch"].get<std::size_t>();
        m.v = e["v"].get<double>();
        m.reg = e["reg"].get<double>();
        m.metric = e.value("metric", "accuracy");
        m.converged = e.value("converged", true);
        m.iterations = e.value("iterations", 0);
        m.calibration = e.value("calibration", nlohmann::json::object());
        // float32 storage denormalizes rows slightly
        for (std::size_t r = 0; r < m.rows; ++r) {
            double sum = 0.0;
            for (std::size_t c = 0; c < m.cols; ++c) sum += m.probs[r * m.cols + c];
            if (sum > 0)
                for (std::size_t c = 0; c < m.cols; ++c) m.probs[r * m.cols + c] /= sum;
        }
        out.push_back(std::move(m));
    }
    return out;
}

}  // namespace equad
