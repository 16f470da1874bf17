#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "taskbias/pipeline.hpp"
#include "testutil.hpp"

using namespace taskbias;

#ifndef TASKBIAS_CLI_BIN
#error "TASKBIAS_CLI_BIN must point at the built cli binary"
#endif

namespace {
int run_cli(const std::string& args) {
    const std::string cmd = std::string(TASKBIAS_CLI_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

// a configuration small enough for seconds-scale pipeline runs
std::string tiny_config(const std::string& dir, std::uint64_t seed) {
    return "--seed " + std::to_string(seed) + " --corpus_dir " + dir + "/corpus --report_dir " + dir +
           "/reports --corpus.count 48 --model.width 32 --model.depth 1 --model.dim 16"
           " --pretrain.epochs 1 --pretrain.batch 8 --tune.batch 8 --cls.mlp_epochs 2 --cls.conv_epochs 1"
           " --probe.extreme_k 2 --attn.export_count 1";
}
}  // namespace

TEST_CASE("usage and exit codes") {
    CHECK(run_cli("") == 1);
    CHECK(run_cli("no-such-command") == 1);
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("gen-data --bogus_key 3") == 1);
    CHECK(run_cli("gen-data --seed") == 1);  // missing value
}

TEST_CASE("config parsing") {
    RunConfig cfg;
    apply_config_line(cfg, "pretrain.lr", "0.001");
    CHECK(cfg.pretrain_lr == doctest::Approx(0.001));
    CHECK_THROWS_AS(apply_config_line(cfg, "no.such.key", "1"), DataError);
    CHECK_THROWS_AS(apply_config_line(cfg, "pretrain.epochs", "three"), DataError);
    CHECK_THROWS_AS(apply_config_line(cfg, "deterministic", "maybe"), DataError);

    const std::string path = (std::filesystem::temp_directory_path() / "taskbias_cfg.txt").string();
    {
        std::ofstream out(path);
        out << "# comment\n"
               "seed = 9\n"
               "corpus.count = 128   # trailing comment\n"
               "\n"
               "model.width = 48\n";
    }
    RunConfig from_file;
    load_config_file(from_file, path);
    CHECK(from_file.seed == 9);
    CHECK(from_file.corpus_count == 128);
    CHECK(from_file.embed_width == 48);
    std::remove(path.c_str());

    // resolved snapshot covers every key and round-trips
    const std::string text = resolved_config_text(from_file);
    CHECK(text.find("corpus.count = 128") != std::string::npos);
    CHECK(text.find("pretrain.lr") != std::string::npos);
}

TEST_CASE("probe before pretrain fails with a data error") {
    const std::string dir = (std::filesystem::temp_directory_path() / "taskbias_cli_order").string();
    std::filesystem::remove_all(dir);
    CHECK(run_cli("gen-data " + tiny_config(dir, 1)) == 0);
    CHECK(run_cli("probe " + tiny_config(dir, 1)) == 2);  // checkpoint not found
    std::filesystem::remove_all(dir);
}

TEST_CASE("full tiny pipeline produces all artifacts") {
    const std::string dir = (std::filesystem::temp_directory_path() / "taskbias_cli_all").string();
    std::filesystem::remove_all(dir);
    REQUIRE(run_cli("all " + tiny_config(dir, 3) + " --run_id smoke") == 0);

    RunConfig cfg;
    cfg.corpus_dir = dir + "/corpus";
    cfg.report_dir = dir + "/reports";
    cfg.run_id = "smoke";
    RunPaths paths(cfg);
    CHECK(std::filesystem::exists(paths.manifest()));
    CHECK(std::filesystem::exists(paths.checkpoint()));
    CHECK(std::filesystem::exists(paths.pretrain_metrics()));
    CHECK(std::filesystem::exists(paths.resolved_config()));
    CHECK(std::filesystem::exists(paths.probe_histogram("object_vs_scene_text")));
    CHECK(std::filesystem::exists(paths.prefix_deltas("action_vs_scene_text")));
    CHECK(std::filesystem::exists(paths.prompt("object_vs_scene_text", "object", "vitp")));
    CHECK(std::filesystem::exists(paths.disambiguation()));
    CHECK(std::filesystem::exists(paths.downstream()));
    CHECK(std::filesystem::exists(paths.region_stats()));
    CHECK(std::filesystem::exists(paths.classifiers("object_vs_scene_text")));
    CHECK(std::filesystem::exists(paths.summary()));

    nlohmann::json summary = pipeline::read_json(paths.summary());
    CHECK(summary.contains("disambiguation"));
    CHECK(summary.contains("downstream"));
    CHECK(summary.contains("histograms"));
    CHECK(summary.contains("bias_classifiers"));
    CHECK(summary.contains("pretrain_final"));

    // no-prompt rows for the two directions of a pair sum to 100
    double sum = 0;
    for (const auto& row : summary["disambiguation"])
        if (row["pair"] == "object_vs_scene_text" && row["method"] == "no_prompt")
            sum += row["selection_pct"].get<double>();
    CHECK(sum == doctest::Approx(100.0).epsilon(1e-9));
    std::filesystem::remove_all(dir);
}

TEST_CASE("deterministic reruns are byte-identical") {
    const std::string dir = (std::filesystem::temp_directory_path() / "taskbias_cli_det").string();
    std::filesystem::remove_all(dir);
    REQUIRE(run_cli("all " + tiny_config(dir, 5) + " --deterministic --run_id a") == 0);
    REQUIRE(run_cli("all " + tiny_config(dir, 5) + " --deterministic --run_id b") == 0);

    RunConfig ca, cb;
    ca.corpus_dir = cb.corpus_dir = dir + "/corpus";
    ca.report_dir = cb.report_dir = dir + "/reports";
    ca.run_id = "a";
    cb.run_id = "b";
    RunPaths pa(ca), pb(cb);

    auto file_bytes = [](const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        REQUIRE(in);
        return std::string((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    };
    CHECK(file_bytes(pa.checkpoint()) == file_bytes(pb.checkpoint()));
    CHECK(file_bytes(pa.pretrain_metrics()) == file_bytes(pb.pretrain_metrics()));
    CHECK(file_bytes(pa.prompt("object_vs_scene_text", "object", "vitp")) ==
          file_bytes(pb.prompt("object_vs_scene_text", "object", "vitp")));
    CHECK(file_bytes(pa.summary()) == file_bytes(pb.summary()));
    std::filesystem::remove_all(dir);
}
