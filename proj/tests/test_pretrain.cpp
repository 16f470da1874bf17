#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>
#include <sstream>

#include "doctest.h"
#include "taskbias/pretrain.hpp"
#include "testutil.hpp"

using namespace taskbias;

namespace {
Tensor identity_embeddings(std::size_t n) {
    Tensor t = Tensor::zeros({n, n});
    for (std::size_t i = 0; i < n; ++i) t.ptr()[i * n + i] = 1.0;
    return t;
}

Tensor random_unit_rows(std::size_t n, std::size_t d, Rng& rng) {
    Tensor t = Tensor::randn({n, d}, rng);
    for (std::size_t r = 0; r < n; ++r) {
        double s = 0;
        for (std::size_t j = 0; j < d; ++j) s += t.ptr()[r * d + j] * t.ptr()[r * d + j];
        const double inv = 1.0 / std::sqrt(s);
        for (std::size_t j = 0; j < d; ++j) t.ptr()[r * d + j] *= inv;
    }
    return t;
}
}  // namespace

TEST_CASE("infonce examples") {
    SUBCASE("aligned orthogonal limit") {
        Tensor e = identity_embeddings(4);
        CHECK(infonce_loss(e, e, Tensor::scalar(1000.0)).item() < 1e-9);
        CHECK(infonce_loss(e, e, Tensor::scalar(1000.0)).item() >= 0.0);
    }
    SUBCASE("indistinguishable batch gives ln N") {
        const std::size_t n = 5, d = 3;
        Tensor t = Tensor::zeros({n, d});
        for (std::size_t i = 0; i < n; ++i) t.ptr()[i * d] = 1.0;
        const double loss = infonce_loss(t, t, Tensor::scalar(14.2)).item();
        CHECK(loss == doctest::Approx(std::log(5.0)).epsilon(1e-12));
    }
    SUBCASE("direct-formula oracle at N=4") {
        Rng rng(19);
        Tensor img = random_unit_rows(4, 6, rng);
        Tensor txt = random_unit_rows(4, 6, rng);
        const long double scale = 9.5L;
        long double expected = 0.0L;
        for (int dir = 0; dir < 2; ++dir) {
            for (int i = 0; i < 4; ++i) {
                long double z = 0.0L, target = 0.0L;
                for (int j = 0; j < 4; ++j) {
                    long double s = 0.0L;
                    for (int c = 0; c < 6; ++c)
                        s += static_cast<long double>(img.ptr()[(dir == 0 ? i : j) * 6 + c]) *
                             static_cast<long double>(txt.ptr()[(dir == 0 ? j : i) * 6 + c]);
                    s *= scale;
                    z += std::exp(s);
                    if (i == j) target = s;
                }
                expected += -(target - std::log(z));
            }
        }
        expected /= 8.0L;  // mean over the two directions of per-row means: (sum/4 + sum/4)/2
        const double got = infonce_loss(img, txt, Tensor::scalar(9.5)).item();
        CHECK(std::abs(got - static_cast<double>(expected)) < 1e-12);
        CHECK(got >= 0.0);
    }
    SUBCASE("degenerate batch rejected") {
        Tensor one = Tensor::zeros({1, 4});
        one.ptr()[0] = 1.0;
        CHECK_THROWS_AS(infonce_loss(one, one, Tensor::scalar(1.0)), DataError);
    }
    SUBCASE("symmetry under joint permutation") {
        Rng rng(23);
        Tensor img = random_unit_rows(6, 5, rng);
        Tensor txt = random_unit_rows(6, 5, rng);
        const double base = infonce_loss(img, txt, Tensor::scalar(7.0)).item();
        std::vector<std::size_t> perm{3, 1, 5, 0, 4, 2};
        Tensor img_p = ops::gather_rows(img, perm);
        Tensor txt_p = ops::gather_rows(txt, perm);
        const double permuted = infonce_loss(img_p, txt_p, Tensor::scalar(7.0)).item();
        CHECK(std::abs(base - permuted) < 1e-9);
    }
    SUBCASE("gradients flow through both towers and the scale") {
        Rng rng(29);
        Tensor img = random_unit_rows(3, 4, rng);
        Tensor txt = random_unit_rows(3, 4, rng);
        img.set_requires_grad(true);
        txt.set_requires_grad(true);
        Tensor log_scale = Tensor::scalar(1.5, true);
        testutil::check_gradients([&] { return infonce_loss(img, txt, ops::exp(log_scale)); }, {img, txt, log_scale});
    }
}

TEST_CASE("pretraining smoke run") {
    const std::string dir = (std::filesystem::temp_directory_path() / "taskbias_test_pretrain").string();
    std::filesystem::remove_all(dir);
    CorpusConfig ccfg;
    ccfg.count = 64;
    Manifest manifest = generate_corpus(ccfg, 7, dir);

    BackboneConfig cfg;
    cfg.embed_width = 32;
    cfg.depth = 1;
    cfg.heads = 4;
    cfg.shared_dim = 16;

    PretrainConfig pcfg;
    pcfg.batch_size = 8;
    pcfg.epochs = 2;
    pcfg.lr = 1e-3;
    pcfg.seed = 3;
    pcfg.holdout_fraction = 0.125;
    pcfg.checkpoint_path = dir + "/ckpt.bin";

    // untrained loss on the training split, for the descent check
    LoadedCorpus corpus = load_corpus(manifest, cfg);
    CorpusSplit split = split_corpus(corpus.ids.size(), pcfg.holdout_fraction, pcfg.seed);
    BackboneWeights untrained = BackboneWeights::init(cfg, pcfg.seed);
    const double loss0 = evaluate_mean_loss(untrained, corpus, split.train_rows, pcfg.batch_size);

    std::ostringstream log1, log2;
    TrainResult r1 = train_backbone(manifest, cfg, pcfg, &log1);
    REQUIRE(r1.metrics.size() == 2);
    CHECK(r1.metrics[0].loss < loss0);

    SUBCASE("checkpoint persists and reloads bit-exactly") {
        CHECK(std::filesystem::exists(pcfg.checkpoint_path));
        BackboneWeights reloaded = load_checkpoint(pcfg.checkpoint_path);
        CHECK(checkpoint_hash(reloaded) == r1.checkpoint_hash);
    }
    SUBCASE("fixed seed reproduces the metrics log line for line") {
        TrainResult r2 = train_backbone(manifest, cfg, pcfg, &log2);
        CHECK(log1.str() == log2.str());
        CHECK(r1.checkpoint_hash == r2.checkpoint_hash);
    }
    SUBCASE("metrics log is one json object per line") {
        std::istringstream in(log1.str());
        std::string line;
        std::size_t lines = 0;
        while (std::getline(in, line)) {
            nlohmann::json j = nlohmann::json::parse(line);
            CHECK(j.contains("epoch"));
            CHECK(j.contains("loss"));
            CHECK(j.contains("holdout_top1"));
            ++lines;
        }
        CHECK(lines == 2);
    }
    SUBCASE("manifest smaller than one batch rejected") {
        Manifest tiny;
        tiny.root_dir = dir;
        tiny.entries.assign(manifest.entries.begin(), manifest.entries.begin() + 4);
        PretrainConfig bad = pcfg;
        bad.batch_size = 8;
        CHECK_THROWS_AS(train_backbone(tiny, cfg, bad), DataError);
    }
    std::filesystem::remove_all(dir);
}
