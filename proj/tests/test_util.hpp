#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "equad/graph.hpp"
#include "equad/rng.hpp"
#include "equad/tensor.hpp"

namespace testutil {

inline equad::Tensor random_tensor(equad::Shape shape, equad::Rng& rng, double lo = -1.0,
                                   double hi = 1.0) {
    std::vector<double> v(equad::shape_numel(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return equad::Tensor::from(std::move(shape), std::move(v));
}

// Central-difference gradient check over a set of parameters, mirroring the
// single-tensor grad_check formula: max |analytic - numeric| / max(1, |analytic|).
inline double param_grad_check(const std::function<equad::Tensor(equad::Tape&)>& loss_fn,
                               const std::vector<equad::Tensor>& params, double h = 1e-5) {
    for (auto p : params) p.zero_grad();
    {
        equad::Tape tape;
        equad::Tensor loss = loss_fn(tape);
        tape.backward(loss);
    }
    std::vector<std::vector<double>> analytic;
    for (const auto& p : params) analytic.push_back(p.grad());

    auto eval = [&]() {
        equad::Tape tape;
        equad::NoGradGuard ng(tape);
        return loss_fn(tape).item();
    };
    double worst = 0.0;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto& vals = const_cast<equad::Tensor&>(params[k]).values();
        for (std::size_t i = 0; i < vals.size(); ++i) {
            const double orig = vals[i];
            vals[i] = orig + h;
            const double fp = eval();
            vals[i] = orig - h;
            const double fm = eval();
            vals[i] = orig;
            const double numeric = (fp - fm) / (2.0 * h);
            const double err =
                std::abs(analytic[k][i] - numeric) / std::max(1.0, std::abs(analytic[k][i]));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// wrap loose graphs into a bundle (train split only)
inline equad::DatasetBundle bundle_of(std::vector<equad::GraphInstance> graphs, int classes = 3) {
    equad::DatasetBundle b;
    b.train = std::move(graphs);
    b.num_classes = classes;
    b.kind = "test";
    return b;
}

// small fast dataset for training-path tests
inline equad::DatasetBundle tiny_spmotif(std::size_t train_n, std::size_t val_n,
                                         std::size_t test_n, double bias, std::uint64_t seed,
                                         double base_mean = 8.0) {
    equad::SPMotifConfig cfg;
    cfg.bias = bias;
    cfg.train_n = train_n;
    cfg.val_n = val_n;
    cfg.test_n = test_n;
    cfg.base_size_mean = base_mean;
    cfg.base_size_jitter = 2.0;
    cfg.seed = seed;
    return equad::gen_spmotif(cfg);
}

// unique scratch directory under the build tree
class TempDir {
  public:
    explicit TempDir(const std::string& tag) {
        static int counter = 0;
        path_ = std::filesystem::temp_directory_path() /
                ("equad_test_" + tag + "_" + std::to_string(++counter) + "_" +
                 std::to_string(::getpid()));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() { std::filesystem::remove_all(path_); }
    const std::filesystem::path& path() const { return path_; }

  private:
    std::filesystem::path path_;
};

}  // namespace testutil
