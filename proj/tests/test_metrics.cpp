#include "equad/metrics.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "equad/hash.hpp"
#include "test_util.hpp"

using namespace equad;
using testutil::tiny_spmotif;

TEST(Accuracy, PerfectPredictionsScoreOne) {
    const std::vector<int> y{0, 1, 2, 1};
    EXPECT_DOUBLE_EQ(accuracy(y, y), 1.0);
    const std::vector<int> p{0, 1, 2, 2};
    EXPECT_DOUBLE_EQ(accuracy(p, y), 0.75);
}

TEST(Auc, RandomScoresNearChance) {
    Rng rng(99);
    std::vector<double> scores(1000);
    std::vector<int> labels(1000);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = rng.uniform();
        labels[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    const double a = auc(scores, labels);
    EXPECT_GE(a, 0.45);
    EXPECT_LE(a, 0.55);
}

TEST(Auc, ReversedScoresComplement) {
    Rng rng(7);
    std::vector<double> scores(200);
    std::vector<int> labels(200);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = rng.uniform();
        labels[i] = rng.bernoulli(0.4) ? 1 : 0;
    }
    std::vector<double> reversed(scores);
    for (auto& s : reversed) s = -s;
    EXPECT_NEAR(auc(reversed, labels), 1.0 - auc(scores, labels), 1e-12);
}

TEST(Auc, InvariantUnderMonotoneTransform) {
    Rng rng(11);
    std::vector<double> scores(150);
    std::vector<int> labels(150);
    for (std::size_t i = 0; i < scores.size(); ++i) {
        scores[i] = rng.uniform(-2, 2);
        labels[i] = rng.bernoulli(0.5) ? 1 : 0;
    }
    std::vector<double> warped(scores);
    for (auto& s : warped) s = std::exp(3.0 * s) + 7.0;
    EXPECT_NEAR(auc(scores, labels), auc(warped, labels), 1e-12);
}

TEST(Auc, TiesGetHalfCredit) {
    const std::vector<double> scores{1.0, 1.0};
    const std::vector<int> labels{0, 1};
    EXPECT_DOUBLE_EQ(auc(scores, labels), 0.5);
}

TEST(Auc, SingleClassRejected) {
    const std::vector<double> scores{0.1, 0.9};
    const std::vector<int> labels{1, 1};
    EXPECT_THROW(auc(scores, labels), DataError);
}

TEST(Cmd, IdenticalSetsGiveZero) {
    Rng rng(3);
    std::vector<double> x(40);
    for (auto& v : x) v = rng.uniform();
    EXPECT_DOUBLE_EQ(cmd(x, 10, x, 10, 4), 0.0);
}

TEST(Cmd, ConstantZeroVsConstantOneIsOne) {
    // only the means differ; every higher central moment vanishes
    const std::vector<double> x(4, 0.0), y(4, 1.0);
    for (std::size_t k = 1; k <= 6; ++k) {
        CmdConfig cfg;
        cfg.max_order = k;
        EXPECT_DOUBLE_EQ(cmd(x, 4, y, 4, 1, cfg), 1.0);
    }
}

TEST(Cmd, MatchesBruteForceMomentOracle) {
    Rng rng(17);
    const std::size_t nx = 23, ny = 31;
    std::vector<double> x(nx), y(ny);
    for (auto& v : x) v = rng.uniform(-1, 2);
    for (auto& v : y) v = rng.uniform(-2, 1);

    // independent 1-D oracle via direct expectation sums
    auto moment = [](const std::vector<double>& s, std::size_t k) {
        double mean = 0.0;
        for (double v : s) mean += v;
        mean /= static_cast<double>(s.size());
        if (k == 1) return mean;
        double m = 0.0;
        for (double v : s) {
            double p = 1.0;
            for (std::size_t i = 0; i < k; ++i) p *= (v - mean);
            m += p;
        }
        return m / static_cast<double>(s.size());
    };
    double expect = std::abs(moment(x, 1) - moment(y, 1));
    for (std::size_t k = 2; k <= 5; ++k) expect += std::abs(moment(x, k) - moment(y, k));
    EXPECT_NEAR(cmd(x, nx, y, ny, 1), expect, 1e-9);
}

TEST(Cmd, SymmetricNonNegative) {
    Rng rng(23);
    std::vector<double> x(30), y(24);
    for (auto& v : x) v = rng.uniform();
    for (auto& v : y) v = rng.uniform();
    const double d1 = cmd(x, 10, y, 8, 3);
    const double d2 = cmd(y, 8, x, 10, 3);
    EXPECT_DOUBLE_EQ(d1, d2);
    EXPECT_GE(d1, 0.0);
}

TEST(Cmd, TranslationMovesOnlyTheFirstOrderTerm) {
    Rng rng(29);
    const std::size_t n = 50, dim = 3;
    std::vector<double> x(n * dim);
    for (auto& v : x) v = rng.normal();
    const std::vector<double> shift{0.3, -0.4, 1.2};
    std::vector<double> y(x);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t d = 0; d < dim; ++d) y[i * dim + d] += shift[d];
    // identical higher central moments, so cmd equals the mean distance
    const double norm = std::sqrt(0.3 * 0.3 + 0.4 * 0.4 + 1.2 * 1.2);
    EXPECT_NEAR(cmd(x, n, y, n, dim), norm, 1e-9);
}

TEST(Cmd, DimensionMismatchRejected) {
    const std::vector<double> x(8, 0.0), y(9, 0.0);
    EXPECT_THROW(cmd(x, 4, y, 4, 2), ShapeError);
}

TEST(Probe, ConstantEmbeddingsScoreNearChance) {
    const DatasetBundle data = tiny_spmotif(12, 30, 30, 0.9, 71);
    const std::vector<double> embs(data.total() * 6, 0.42);
    ProbeConfig cfg;
    cfg.epochs = 50;
    cfg.seed = 3;
    const ProbeResult res = probe_reweight_matrix(embs, data.total(), 6, data, cfg);
    EXPECT_NEAR(res.test_acc, 1.0 / 3.0, 0.1);
}

TEST(Probe, EncoderParamsUntouched) {
    const DatasetBundle data = tiny_spmotif(12, 16, 16, 0.9, 73);
    GinEncoderConfig cfg;
    cfg.layers = 2;
    cfg.hidden = 6;
    cfg.input_dim = data.row(0).feat_dim;
    Rng init(5);
    GinEncoder enc(cfg, init);

    // checksum over the exact parameter bytes
    auto checksum = [&]() {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        for (const auto& p : enc.params())
            for (double v : p.values()) {
                std::uint64_t bits;
                std::memcpy(&bits, &v, 8);
                h = fnv1a64(std::string_view(reinterpret_cast<const char*>(&bits), 8), h);
            }
        return h;
    };
    const std::uint64_t before = checksum();
    ProbeConfig pcfg;
    pcfg.epochs = 30;
    const ProbeResult res = probe_reweight(enc, data, pcfg);
    EXPECT_EQ(checksum(), before);
    EXPECT_GE(res.val_acc, 0.0);
    EXPECT_LE(res.val_acc, 1.0);
}

TEST(Probe, TinyValidationSplitRejected) {
    DatasetBundle data = tiny_spmotif(12, 8, 8, 0.9, 75);
    data.val.resize(1);
    const std::vector<double> embs(data.total() * 4, 0.0);
    EXPECT_THROW(probe_reweight_matrix(embs, data.total(), 4, data, {}), DataError);
}

TEST(ExportCsv, RowAndColumnContract) {
    testutil::TempDir dir("export_csv");
    const DatasetBundle data = tiny_spmotif(6, 4, 4, 0.9, 77);
    const std::size_t cols = 5;
    Rng rng(13);
    std::vector<double> embs(data.total() * cols);
    for (auto& v : embs) v = rng.uniform(-2, 2);
    const auto path = dir.path() / "embs.csv";
    export_embeddings_csv(embs, data.total(), cols, data, path);

    std::ifstream is(path);
    std::string line;
    std::getline(is, line);
    EXPECT_EQ(line, "id,label,corr,e0,e1,e2,e3,e4");
    std::size_t rows = 0;
    double max_err = 0.0;
    while (std::getline(is, line)) {
        std::vector<std::string> fields;
        std::size_t pos = 0;
        while (true) {
            const auto comma = line.find(',', pos);
            fields.push_back(line.substr(pos, comma - pos));
            if (comma == std::string::npos) break;
            pos = comma + 1;
        }
        ASSERT_EQ(fields.size(), 3 + cols);
        for (std::size_t c = 0; c < cols; ++c) {
            const double v = std::stod(fields[3 + c]);
            max_err = std::max(max_err,
                               std::abs(v - embs[rows * cols + c]) /
                                   std::max(1.0, std::abs(embs[rows * cols + c])));
        }
        ++rows;
    }
    EXPECT_EQ(rows, data.total());
    EXPECT_LE(max_err, 1e-5);  // six significant digits
}
