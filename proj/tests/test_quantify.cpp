#include "equad/quantify.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"

using namespace equad;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

// two well-separated gaussian blobs, labels 0/1, plus val/test rows
ReprMatrix separable_embeddings(std::size_t n, std::size_t dim, std::vector<int>& labels,
                                std::uint64_t seed, double gap = 4.0) {
    Rng rng(seed);
    ReprMatrix m;
    m.rows = n;
    m.cols = dim;
    m.data.resize(n * dim);
    labels.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % 2);
        const double center = labels[i] == 0 ? -gap / 2 : gap / 2;
        for (std::size_t d = 0; d < dim; ++d) m.data[i * dim + d] = center + 0.3 * rng.normal();
    }
    return m;
}

LogitsMatrix with_v(double v, int arch, std::size_t epoch) {
    LogitsMatrix m;
    m.v = v;
    m.arch_id = arch;
    m.epoch = epoch;
    return m;
}

}  // namespace

TEST(SpuriousClassifier, SeparableToyReachesPerfectTrainAccuracy) {
    std::vector<int> labels;
    const ReprMatrix h = separable_embeddings(300, 4, labels, 5);
    const LogitsMatrix m = fit_spurious_classifier(h, labels, 200, 250, 2, 1e-4);
    std::vector<int> pred;
    std::vector<int> truth(labels.begin(), labels.begin() + 200);
    for (std::size_t r = 0; r < 200; ++r) pred.push_back(m.at(r, 1) > m.at(r, 0) ? 1 : 0);
    EXPECT_DOUBLE_EQ(accuracy(pred, truth), 1.0);
    EXPECT_EQ(m.metric, "auc");
    EXPECT_GE(m.v, 0.99);
}

TEST(SpuriousClassifier, PermutedLabelsScoreAtChance) {
    Rng rng(9);
    ReprMatrix h;
    h.rows = 600;
    h.cols = 8;
    h.data.resize(h.rows * h.cols);
    for (auto& v : h.data) v = rng.uniform(-1, 1);
    std::vector<int> labels(h.rows);
    for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = static_cast<int>(i % 3);
    rng.shuffle(labels);
    const LogitsMatrix m = fit_spurious_classifier(h, labels, 300, 600, 3, 1e-2);
    EXPECT_NEAR(m.v, 1.0 / 3.0, 0.1);
}

TEST(SpuriousClassifier, RowsAreProbabilityVectors) {
    std::vector<int> labels;
    const ReprMatrix h = separable_embeddings(240, 4, labels, 11);
    const LogitsMatrix m = fit_spurious_classifier(h, labels, 160, 200, 2, 1e-2);
    for (std::size_t r = 0; r < m.rows; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c) {
            EXPECT_GE(m.at(r, c), 0.0);
            EXPECT_LE(m.at(r, c), 1.0);
            sum += m.at(r, c);
        }
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
}

TEST(SpuriousClassifier, SingleClassTrainSplitRejected) {
    ReprMatrix h;
    h.rows = 40;
    h.cols = 2;
    h.data.assign(80, 0.5);
    std::vector<int> labels(40, 1);
    EXPECT_THROW(fit_spurious_classifier(h, labels, 20, 30, 2, 1e-2), DataError);
}

TEST(Platt, RecoversSyntheticSigmoid) {
    Rng rng(13);
    const std::size_t n = 2000;
    std::vector<double> scores(n * 2);
    std::vector<int> labels(n);
    std::vector<double> true_p(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double p = rng.uniform(0.05, 0.95);
        true_p[i] = p;
        scores[i * 2 + 1] = logit(p);
        scores[i * 2 + 0] = -logit(p);
        labels[i] = rng.bernoulli(p) ? 1 : 0;
    }
    PlattParams params;
    const std::vector<double> probs = platt_calibrate(scores, n, 2, labels, 5, &params);
    double max_err = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        max_err = std::max(max_err, std::abs(probs[i * 2 + 1] - true_p[i]));
    EXPECT_LE(max_err, 0.05);
    EXPECT_GT(params.a[1], 0.0);  // calibration preserves score ranking
}

TEST(Platt, ConstantScoresReturnClassPrior) {
    const std::size_t n = 400;
    std::vector<double> scores(n * 2, 0.7);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) labels[i] = i % 4 == 0 ? 1 : 0;  // prior 0.25
    const std::vector<double> probs = platt_calibrate(scores, n, 2, labels, 5);
    for (std::size_t i = 0; i < n; ++i) EXPECT_NEAR(probs[i * 2 + 1], 0.25, 0.03);
}

TEST(Platt, RowsNormalizedAndFoldGuarded) {
    Rng rng(15);
    const std::size_t n = 90;
    std::vector<double> scores(n * 3);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = static_cast<int>(i % 3);
        for (std::size_t c = 0; c < 3; ++c) scores[i * 3 + c] = rng.uniform(-1, 1);
    }
    const std::vector<double> probs = platt_calibrate(scores, n, 3, labels, 5);
    for (std::size_t i = 0; i < n; ++i) {
        double sum = 0.0;
        for (std::size_t c = 0; c < 3; ++c) sum += probs[i * 3 + c];
        EXPECT_NEAR(sum, 1.0, 1e-6);
    }
    std::vector<int> one_class(n, 2);
    EXPECT_THROW(platt_calibrate(scores, n, 3, one_class, 5), DataError);
}

TEST(QuantifyBank, OneMatrixPerEntryWithBestReg) {
    // bank with two entries of different quality
    std::vector<int> labels;
    ReprMatrix good = separable_embeddings(300, 4, labels, 21);
    good.arch_id = 0;
    good.epoch = 5;
    ReprMatrix noisy = good;
    noisy.arch_id = 1;
    noisy.epoch = 9;
    Rng rng(23);
    for (auto& v : noisy.data) v = rng.uniform(-1, 1);

    ReprBank bank;
    bank.entries = {good, noisy};
    bank.train_end = 200;
    bank.val_end = 250;
    bank.total = 300;

    const QuantifyResult result = quantify_bank(bank, labels, 2, {1e-2, 1e-4});
    ASSERT_EQ(result.matrices.size(), 2u);
    EXPECT_TRUE(result.failures.empty());
    for (const auto& m : result.matrices) EXPECT_EQ(m.rows, 300u);
    // sorted manifest by (arch, epoch)
    EXPECT_EQ(result.matrices[0].arch_id, 0);
    EXPECT_EQ(result.matrices[1].arch_id, 1);
    EXPECT_GT(result.matrices[0].v, result.matrices[1].v);
}

TEST(QuantifyBank, StoredMetricMatchesRecompute) {
    std::vector<int> labels;
    ReprMatrix h = separable_embeddings(300, 4, labels, 25);
    ReprBank bank;
    bank.entries = {h};
    bank.train_end = 200;
    bank.val_end = 250;
    bank.total = 300;
    const QuantifyResult result = quantify_bank(bank, labels, 2, {1e-2});
    const LogitsMatrix& m = result.matrices[0];
    // recompute v from the stored probabilities
    std::vector<double> scores;
    std::vector<int> truth;
    for (std::size_t r = 200; r < 250; ++r) {
        scores.push_back(m.at(r, 1));
        truth.push_back(labels[r]);
    }
    EXPECT_NEAR(m.v, auc(scores, truth), 1e-9);
}

TEST(SelectTopM, LowestValidationMetricFirst) {
    const std::vector<LogitsMatrix> ms{with_v(0.9, 0, 1), with_v(0.4, 1, 1), with_v(0.7, 2, 1)};
    const auto idx = select_top_m(ms, 2);
    ASSERT_EQ(idx.size(), 2u);
    EXPECT_EQ(idx[0], 1u);
    EXPECT_EQ(idx[1], 2u);
}

TEST(SelectTopM, FullSelectionIsPermutation) {
    const std::vector<LogitsMatrix> ms{with_v(0.9, 0, 1), with_v(0.4, 1, 1), with_v(0.7, 2, 1)};
    const auto idx = select_top_m(ms, 3);
    std::set<std::size_t> unique(idx.begin(), idx.end());
    EXPECT_EQ(unique.size(), 3u);
}

TEST(SelectTopM, TiesBrokenByArchThenEpoch) {
    const std::vector<LogitsMatrix> ms{with_v(0.5, 2, 7), with_v(0.5, 1, 9), with_v(0.5, 1, 3)};
    const auto idx = select_top_m(ms, 3);
    EXPECT_EQ(idx[0], 2u);  // (1,3)
    EXPECT_EQ(idx[1], 1u);  // (1,9)
    EXPECT_EQ(idx[2], 0u);  // (2,7)
}

TEST(SelectTopM, StableUnderInputPermutation) {
    std::vector<LogitsMatrix> ms{with_v(0.9, 0, 1), with_v(0.4, 1, 2), with_v(0.7, 2, 3),
                                 with_v(0.55, 3, 4)};
    auto keys_of = [&](const std::vector<LogitsMatrix>& list) {
        std::vector<std::pair<int, std::size_t>> keys;
        for (std::size_t i : select_top_m(list, 2))
            keys.push_back({list[i].arch_id, list[i].epoch});
        return keys;
    };
    const auto base = keys_of(ms);
    std::vector<LogitsMatrix> shuffled{ms[2], ms[0], ms[3], ms[1]};
    EXPECT_EQ(keys_of(shuffled), base);
    // idempotent
    EXPECT_EQ(keys_of(ms), base);
}

TEST(SelectTopM, RejectsBadM) {
    const std::vector<LogitsMatrix> ms{with_v(0.9, 0, 1)};
    EXPECT_THROW(select_top_m(ms, 0), ConfigError);
    EXPECT_THROW(select_top_m(ms, 2), ConfigError);
}

TEST(SubgroupStats, IdenticalProbsGiveEqualGroupMeans) {
    const DatasetBundle data = testutil::tiny_spmotif(60, 10, 10, 0.6, 31);
    LogitsMatrix m;
    m.rows = data.total();
    m.cols = 3;
    m.probs.assign(m.rows * 3, 1.0 / 3.0);
    const SubgroupStats stats = subgroup_logits_stats(m, data, 0, data.train_end());
    for (const auto& cls : stats.per_class) {
        EXPECT_NEAR(cls[0].mean, cls[1].mean, 1e-12);
        EXPECT_NEAR(cls[0].mean, 1.0 / 3.0, 1e-12);
    }
}

TEST(SubgroupStats, GroupSizesPartitionClassCounts) {
    const DatasetBundle data = testutil::tiny_spmotif(90, 10, 10, 0.8, 33);
    LogitsMatrix m;
    m.rows = data.total();
    m.cols = 3;
    m.probs.assign(m.rows * 3, 1.0 / 3.0);
    const SubgroupStats stats = subgroup_logits_stats(m, data, 0, data.train_end());
    std::size_t total = 0;
    for (std::size_t c = 0; c < stats.per_class.size(); ++c) {
        std::size_t class_count = 0;
        for (const auto& g : data.train)
            if (g.label == static_cast<int>(c)) ++class_count;
        EXPECT_EQ(stats.per_class[c][0].count + stats.per_class[c][1].count, class_count);
        total += class_count;
    }
    EXPECT_EQ(total, data.train.size());
    // csv shape: header + 6 rows
    const std::string csv = stats.to_csv();
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
}

TEST(LogitsIo, RoundTripPreservesMetadataAndRowNormalization) {
    testutil::TempDir dir("logits_io");
    std::vector<int> labels;
    ReprMatrix h = separable_embeddings(120, 3, labels, 41);
    ReprBank bank;
    bank.entries = {h};
    bank.train_end = 80;
    bank.val_end = 100;
    bank.total = 120;
    const QuantifyResult q = quantify_bank(bank, labels, 2, {1e-2});
    save_logits(q.matrices, dir.path(), "fp");
    const auto loaded = load_logits(dir.path());
    ASSERT_EQ(loaded.size(), 1u);
    EXPECT_EQ(loaded[0].arch_id, q.matrices[0].arch_id);
    EXPECT_NEAR(loaded[0].v, q.matrices[0].v, 1e-12);
    for (std::size_t r = 0; r < loaded[0].rows; ++r) {
        double sum = 0.0;
        for (std::size_t c = 0; c < loaded[0].cols; ++c) sum += loaded[0].at(r, c);
        EXPECT_NEAR(sum, 1.0, 1e-6);
        EXPECT_NEAR(loaded[0].at(r, 0), q.matrices[0].at(r, 0), 1e-5);
    }
}
