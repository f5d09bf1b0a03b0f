#include "equad/ssl.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

#include "test_util.hpp"

using namespace equad;
using testutil::param_grad_check;
using testutil::tiny_spmotif;

namespace {

double logit(double p) { return std::log(p / (1.0 - p)); }

SslConfig tiny_ssl(std::vector<std::size_t> checkpoints, std::uint64_t seed) {
    SslConfig cfg;
    cfg.checkpoint_epochs = std::move(checkpoints);
    cfg.layer_counts = {2};
    cfg.widths = {8};
    cfg.batch_size = 32;
    cfg.seed = seed;
    return cfg;
}

}  // namespace

TEST(InfomaxLoss, UninformativeDiscriminatorGivesLnTwo) {
    Tape t;
    Tensor nodes = Tensor::from({3, 2}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
    Tensor graphs = Tensor::from({2, 2}, {1.0, 1.0, 1.0, 1.0});
    Tensor corrupted = Tensor::from({3, 2}, {0.2, 0.1, 0.4, 0.3, 0.6, 0.5});
    Tensor w = Tensor::zeros({2, 2});
    Tensor loss = infomax_loss(t, nodes, graphs, {0, 0, 1}, corrupted, w);
    EXPECT_NEAR(loss.item(), std::log(2.0), 1e-12);
}

TEST(InfomaxLoss, PerfectSeparationApproachesZero) {
    Tape t;
    Tensor nodes = Tensor::from({2, 1}, {30.0, 30.0});
    Tensor graphs = Tensor::from({2, 1}, {1.0, 1.0});
    Tensor corrupted = Tensor::from({2, 1}, {-30.0, -30.0});
    Tensor w = Tensor::from({1, 1}, {1.0});
    Tensor loss = infomax_loss(t, nodes, graphs, {0, 1}, corrupted, w);
    EXPECT_LT(loss.item(), 1e-9);
}

TEST(InfomaxLoss, HandBceArithmetic) {
    Tape t;
    // sigmoid(score) hits 0.8/0.6 on positives and 0.3/0.1 on negatives
    Tensor nodes = Tensor::from({2, 1}, {logit(0.8), logit(0.6)});
    Tensor graphs = Tensor::from({2, 1}, {1.0, 1.0});
    Tensor corrupted = Tensor::from({2, 1}, {logit(0.3), logit(0.1)});
    Tensor w = Tensor::from({1, 1}, {1.0});
    Tensor loss = infomax_loss(t, nodes, graphs, {0, 1}, corrupted, w);
    const double expect =
        (-std::log(0.8) - std::log(0.6) - std::log(1.0 - 0.3) - std::log(1.0 - 0.1)) / 4.0;
    EXPECT_NEAR(loss.item(), expect, 1e-12);
}

TEST(InfomaxLoss, CountMismatchRejected) {
    Tape t;
    Tensor nodes = Tensor::zeros({3, 2});
    Tensor graphs = Tensor::zeros({1, 2});
    Tensor corrupted = Tensor::zeros({2, 2});
    Tensor w = Tensor::zeros({2, 2});
    EXPECT_THROW(infomax_loss(t, nodes, graphs, {0, 0, 0}, corrupted, w), ShapeError);
}

TEST(InfomaxLoss, CompositeGradCheckOnTwoGraphBatch) {
    const DatasetBundle data = tiny_spmotif(2, 1, 1, 1.0 / 3.0, 77, 6.0);
    const std::size_t rows[] = {0, 1};
    const BatchedGraph batch = make_batch(data, rows, true, 0.2);

    Rng init(5);
    GinEncoderConfig ecfg;
    ecfg.layers = 2;
    ecfg.hidden = 4;
    ecfg.input_dim = data.row(0).feat_dim;
    GinEncoder enc_adj(ecfg, init), enc_diff(ecfg, init);
    Tensor w = glorot(4, 4, init);
    Rng corrupt_rng(9);
    Tensor corrupted = corrupt_features(batch.features, batch, corrupt_rng);

    auto loss_fn = [&](Tape& t) {
        Tensor nodes_adj = enc_adj.node_forward(t, batch, false);
        Tensor nodes_diff = enc_diff.node_forward(t, batch, true);
        Tensor summ_adj = readout(t, nodes_adj, batch);
        Tensor summ_diff = readout(t, nodes_diff, batch);
        Tensor corr_adj = enc_adj.node_forward(t, batch, false, corrupted);
        Tensor corr_diff = enc_diff.node_forward(t, batch, true, corrupted);
        return t.add(infomax_loss(t, nodes_adj, summ_diff, batch.node_graph, corr_adj, w),
                     infomax_loss(t, nodes_diff, summ_adj, batch.node_graph, corr_diff, w));
    };
    std::vector<Tensor> params = enc_adj.params();
    for (auto& p : enc_diff.params()) params.push_back(p);
    params.push_back(w);
    EXPECT_LE(param_grad_check(loss_fn, params), 1e-4);
}

TEST(TrainSsl, CheckpointShapeContract) {
    const DatasetBundle data = tiny_spmotif(16, 8, 8, 0.9, 21);
    const SslRunResult run = train_ssl_single(data, {0, 2, 8}, tiny_ssl({2, 4}, 3));
    ASSERT_EQ(run.checkpoints.size(), 2u);
    for (const auto& m : run.checkpoints) {
        EXPECT_EQ(m.rows, data.total());
        EXPECT_EQ(m.cols, 8u);
        EXPECT_EQ(m.data.size(), m.rows * m.cols);
        for (double v : m.data) EXPECT_TRUE(std::isfinite(v));
    }
    EXPECT_EQ(run.epoch_losses.size(), 4u);
}

TEST(TrainSsl, LossDecreasesOverTraining) {
    const DatasetBundle data = tiny_spmotif(32, 8, 8, 0.9, 23);
    const SslRunResult run = train_ssl_single(data, {0, 2, 8}, tiny_ssl({12}, 5));
    EXPECT_LT(run.epoch_losses.back(), run.epoch_losses.front());
}

TEST(TrainSsl, LossTrendMostlyNonIncreasingOverWindows) {
    const DatasetBundle data = tiny_spmotif(32, 8, 8, 0.9, 25);
    const SslRunResult run = train_ssl_single(data, {0, 2, 8}, tiny_ssl({25}, 7));
    const auto& losses = run.epoch_losses;
    std::size_t ok = 0, windows = 0;
    for (std::size_t i = 0; i + 10 < losses.size(); ++i) {
        ++windows;
        if (losses[i + 10] <= losses[i]) ++ok;
    }
    ASSERT_GT(windows, 0u);
    EXPECT_GE(static_cast<double>(ok) / static_cast<double>(windows), 0.8);
}

TEST(TrainSsl, DeterministicUnderFixedSeed) {
    const DatasetBundle data = tiny_spmotif(16, 8, 8, 0.9, 27);
    const SslRunResult a = train_ssl_single(data, {0, 2, 8}, tiny_ssl({3}, 11));
    const SslRunResult b = train_ssl_single(data, {0, 2, 8}, tiny_ssl({3}, 11));
    ASSERT_EQ(a.checkpoints.size(), b.checkpoints.size());
    EXPECT_EQ(a.checkpoints[0].data, b.checkpoints[0].data);
    const SslRunResult c = train_ssl_single(data, {0, 2, 8}, tiny_ssl({3}, 12));
    EXPECT_NE(a.checkpoints[0].data, c.checkpoints[0].data);
}

TEST(ReprBankBuild, DefaultGridYieldsEighteenMatrices) {
    const DatasetBundle data = tiny_spmotif(16, 8, 8, 0.9, 29, 6.0);
    SslConfig cfg;  // default grid: 3 checkpoints x 3 layer counts x 2 widths
    cfg.checkpoint_epochs = {2, 4, 6};  // same cardinality as the default set
    cfg.seed = 13;
    const ReprBank bank = build_repr_bank(data, cfg);
    EXPECT_EQ(bank.entries.size(), 18u);

    std::set<std::pair<int, std::size_t>> keys;
    for (const auto& m : bank.entries) {
        EXPECT_EQ(m.rows, data.total());
        keys.insert({m.arch_id, m.epoch});
    }
    EXPECT_EQ(keys.size(), 18u);  // unique (arch, epoch) grid cells
}

TEST(ReprBankBuild, SingleCellGrid) {
    const DatasetBundle data = tiny_spmotif(16, 8, 8, 0.9, 31, 6.0);
    SslConfig cfg = tiny_ssl({3}, 17);
    const ReprBank bank = build_repr_bank(data, cfg);
    EXPECT_EQ(bank.entries.size(), 1u);
    EXPECT_EQ(bank.train_end, 16u);
    EXPECT_EQ(bank.val_end, 24u);
    EXPECT_EQ(bank.total, 32u);
}

TEST(ReprBankIo, RoundTripWithinFloat32) {
    testutil::TempDir dir("bank_io");
    const DatasetBundle data = tiny_spmotif(16, 8, 8, 0.9, 33, 6.0);
    const ReprBank bank = build_repr_bank(data, tiny_ssl({2}, 19));
    save_bank(bank, dir.path(), "cfgfp");
    const ReprBank loaded = load_bank(dir.path());
    ASSERT_EQ(loaded.entries.size(), bank.entries.size());
    EXPECT_EQ(loaded.train_end, bank.train_end);
    for (std::size_t i = 0; i < bank.entries.size(); ++i) {
        const auto& a = bank.entries[i];
        const auto& b = loaded.entries[i];
        EXPECT_EQ(a.arch_id, b.arch_id);
        EXPECT_EQ(a.epoch, b.epoch);
        ASSERT_EQ(a.data.size(), b.data.size());
        for (std::size_t k = 0; k < a.data.size(); ++k) {
            EXPECT_EQ(static_cast<float>(a.data[k]), static_cast<float>(b.data[k]));
        }
    }
}

TEST(ReprBankIo, CorruptBlobRejected) {
    testutil::TempDir dir("bank_corrupt");
    write_blob(dir.path() / "x.bin", 2, 2, {1, 2, 3, 4});
    std::filesystem::resize_file(dir.path() / "x.bin", 10);
    EXPECT_THROW(read_blob(dir.path() / "x.bin"), IoError);
}

TEST(SslConfigValidation, RejectsBadGrids) {
    SslConfig cfg;
    cfg.checkpoint_epochs = {};
    EXPECT_THROW(validate(cfg), ConfigError);
    cfg = SslConfig{};
    cfg.checkpoint_epochs = {10, 5};
    EXPECT_THROW(validate(cfg), ConfigError);
}
