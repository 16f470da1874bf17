#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <filesystem>

#include "doctest.h"
#include "taskbias/bias_classifier.hpp"
#include "testutil.hpp"

using namespace taskbias;

namespace {
// synthetic feature bundles: label 1 shifts the first embedding coordinate
BiasDirectionDataset synthetic_dataset(std::size_t n_train, std::size_t n_test, double separation,
                                       std::uint64_t seed, bool constant_images = true) {
    BiasDirectionDataset ds;
    ds.image_size = 32;
    ds.embed_dim = 16;
    Rng rng(seed);
    const std::size_t total = n_train + n_test;
    for (std::size_t i = 0; i < total; ++i) {
        const std::size_t label = i % 2;
        std::vector<double> emb(ds.embed_dim);
        for (double& v : emb) v = 0.3 * rng.normal();
        emb[0] += label ? separation : -separation;
        ds.embeddings.push_back(std::move(emb));
        std::vector<double> img(32 * 32 * 3, constant_images ? 0.5 : rng.uniform());
        ds.images.push_back(img);
        ds.overlays.push_back(std::move(img));
        ds.labels.push_back(label);
        if (i < n_train) ds.train_idx.push_back(i);
        else ds.test_idx.push_back(i);
    }
    return ds;
}
}  // namespace

TEST_CASE("frequent baseline") {
    SUBCASE("counting example") {
        std::vector<std::size_t> labels{0, 0, 1};
        FrequentBaselineResult r = frequent_baseline(labels, labels);
        CHECK(r.train_majority_acc_pct == doctest::Approx(100.0 * 2 / 3));
        CHECK(r.test_majority_acc_pct == doctest::Approx(100.0 * 2 / 3));
    }
    SUBCASE("balanced test keeps both variants inside [45, 55]") {
        std::vector<std::size_t> train{0, 0, 0, 1, 1};
        std::vector<std::size_t> test;
        for (int i = 0; i < 100; ++i) test.push_back(i % 2 ? 1u : 0u);
        test.push_back(1);  // majority 51/101 < 55%
        FrequentBaselineResult r = frequent_baseline(train, test);
        CHECK(r.train_majority_acc_pct >= 45.0);
        CHECK(r.train_majority_acc_pct <= 55.0);
        CHECK(r.test_majority_acc_pct >= 45.0);
        CHECK(r.test_majority_acc_pct <= 55.0);
    }
    SUBCASE("empty splits rejected") {
        std::vector<std::size_t> some{0, 1}, none;
        CHECK_THROWS_AS(frequent_baseline(none, some), DataError);
        CHECK_THROWS_AS(frequent_baseline(some, none), DataError);
    }
}

TEST_CASE("embedding mlp") {
    SUBCASE("separable embeddings reach 99 percent") {
        BiasDirectionDataset ds = synthetic_dataset(300, 100, 2.0, 5);
        ClassifierConfig cfg;
        cfg.epochs = 60;
        cfg.lr = 1e-3;  // separability sanity check, fast schedule
        CHECK(train_embedding_mlp(ds, cfg) >= 99.0);
    }
    SUBCASE("label-shuffled training collapses to the frequent baseline") {
        // separation 0: the features carry no label signal once shuffled
        BiasDirectionDataset ds = synthetic_dataset(300, 400, 0.0, 7);
        Rng rng(11);
        std::vector<std::size_t> shuffled;
        for (std::size_t i : ds.train_idx) shuffled.push_back(ds.labels[i]);
        rng.shuffle(shuffled);
        for (std::size_t k = 0; k < ds.train_idx.size(); ++k) ds.labels[ds.train_idx[k]] = shuffled[k];
        ClassifierConfig cfg;
        cfg.epochs = 20;
        const double acc = train_embedding_mlp(ds, cfg);
        std::vector<std::size_t> train_labels, test_labels;
        for (std::size_t i : ds.train_idx) train_labels.push_back(ds.labels[i]);
        for (std::size_t i : ds.test_idx) test_labels.push_back(ds.labels[i]);
        const double freq = frequent_baseline(train_labels, test_labels).train_majority_acc_pct;
        CHECK(std::abs(acc - freq) <= 5.0);
    }
    SUBCASE("degenerate single-class training rejected") {
        BiasDirectionDataset ds = synthetic_dataset(10, 4, 1.0, 3);
        for (std::size_t i : ds.train_idx) ds.labels[i] = 0;
        ClassifierConfig cfg;
        CHECK_THROWS_AS(train_embedding_mlp(ds, cfg), DataError);
    }
    SUBCASE("deterministic for a fixed seed") {
        BiasDirectionDataset ds = synthetic_dataset(80, 40, 0.5, 9);
        ClassifierConfig cfg;
        cfg.epochs = 5;
        CHECK(train_embedding_mlp(ds, cfg) == train_embedding_mlp(ds, cfg));
    }
}

TEST_CASE("image classifier") {
    SUBCASE("constant images match the frequent baseline") {
        BiasDirectionDataset ds = synthetic_dataset(80, 60, 2.0, 13, true);
        ClassifierConfig cfg;
        cfg.epochs = 3;
        const double acc = train_image_classifier(ds, false, cfg);
        std::vector<std::size_t> train_labels, test_labels;
        for (std::size_t i : ds.train_idx) train_labels.push_back(ds.labels[i]);
        for (std::size_t i : ds.test_idx) test_labels.push_back(ds.labels[i]);
        const double freq = frequent_baseline(train_labels, test_labels).train_majority_acc_pct;
        CHECK(std::abs(acc - freq) <= 5.0);
    }
    SUBCASE("deterministic for a fixed seed") {
        BiasDirectionDataset ds = synthetic_dataset(40, 20, 1.0, 17);
        ClassifierConfig cfg;
        cfg.epochs = 2;
        CHECK(train_image_classifier(ds, true, cfg) == train_image_classifier(ds, true, cfg));
    }
}

TEST_CASE("fused classifier ablation tracks embedding-only") {
    BiasDirectionDataset ds = synthetic_dataset(200, 100, 2.0, 19);
    ClassifierConfig mlp_cfg;
    mlp_cfg.epochs = 60;
    mlp_cfg.lr = 1e-3;
    ClassifierConfig fused_cfg = mlp_cfg;
    fused_cfg.epochs = 20;
    const double embedding_only = train_embedding_mlp(ds, mlp_cfg);
    const double fused_zeroed = train_fused_classifier(ds, fused_cfg, true);
    CHECK(std::abs(embedding_only - fused_zeroed) <= 3.0);
}

TEST_CASE("bias direction dataset from probes") {
    const std::string dir = (std::filesystem::temp_directory_path() / "taskbias_test_biasdir").string();
    std::filesystem::remove_all(dir);
    CorpusConfig ccfg;
    ccfg.count = 40;
    Manifest manifest = generate_corpus(ccfg, 31, dir);
    PairwiseDataset ds = build_pairwise_dataset(manifest, TaskId::object, TaskId::scene_text, 0.5, 2);

    BackboneConfig cfg;
    cfg.embed_width = 32;
    cfg.depth = 1;
    cfg.heads = 4;
    cfg.shared_dim = 16;
    BackboneWeights w = BackboneWeights::init(cfg, 37);
    w.set_frozen(true);

    std::vector<BiasScore> train_scores = probe_dataset(w, manifest, ds.train, ds.task_a, ds.task_b);
    std::vector<BiasScore> test_scores = probe_dataset(w, manifest, ds.test, ds.task_a, ds.task_b);
    BiasDirectionDataset bd = build_bias_direction_dataset(w, manifest, ds, train_scores, test_scores);

    CHECK(bd.train_idx.size() == ds.train.size());
    CHECK(bd.test_idx.size() <= ds.test.size());
    CHECK(bd.test_majority_fraction() <= 0.55 + 1e-12);
    CHECK(bd.embeddings[0].size() == cfg.shared_dim);
    CHECK(bd.images[0].size() == 32 * 32 * 3);
    CHECK(bd.overlays[0].size() == 32 * 32 * 3);

    // pseudo-labels regenerate exactly from the stored scores
    for (std::size_t i = 0; i < ds.train.size(); ++i)
        CHECK(bd.labels[bd.train_idx[i]] == bias_direction_label(train_scores[i]));
    std::filesystem::remove_all(dir);
}

TEST_CASE("classifier report layout") {
    BiasClassifierReport r;
    r.embedding_pct = 71.7;
    nlohmann::json rows = classifier_report_json(r);
    REQUIRE(rows.size() == 6);
    for (const auto& row : rows) {
        CHECK(row.contains("experiment"));
        CHECK(row.contains("test_accuracy_pct"));
    }
}
