// Command-line front end: every experiment in the pipeline is one subcommand
// driven by a key=value config file with --key value overrides.

#include <cstring>
#include <iostream>
#include <map>
#include <string>

#include "taskbias/pipeline.hpp"

namespace {

using namespace taskbias;

void print_usage(std::ostream& os) {
    os << "usage: taskbias <subcommand> [--config FILE] [--KEY VALUE ...]\n"
          "\n"
          "subcommands:\n"
          "  gen-data             render the synthetic corpus and pairwise splits\n"
          "  pretrain             contrastively pretrain the backbone, write a checkpoint\n"
          "  probe                per-image task-bias probe, histograms, extreme-bias report\n"
          "  prefix-eval          task-directed text-prefix steering deltas\n"
          "  tune-prompt          learn visual prompts (token and pixel-border variants)\n"
          "  eval-disambiguation  two-way intended-task selection rates per prompt\n"
          "  eval-downstream      zero-shot object recognition with and without prompts\n"
          "  attn-map             attention rollout overlays and directed difference maps\n"
          "  classify-bias        bias-direction classifier baselines\n"
          "  all                  full pipeline in order, plus summary.json\n"
          "\n"
          "options:\n"
          "  --config FILE        load key = value lines before applying overrides\n"
          "  --KEY VALUE          override one config key (see --list-keys)\n"
          "  --list-keys          print every config key with its current value\n"
          "  --deterministic      force worker count 1\n"
          "  --help               this text\n";
}

int run(int argc, char** argv) {
    if (argc < 2) {
        print_usage(std::cerr);
        return 1;
    }
    const std::string sub = argv[1];
    if (sub == "--help" || sub == "-h" || sub == "help") {
        print_usage(std::cout);
        return 0;
    }

    static const std::map<std::string, void (*)(const RunConfig&)> steps = {
        {"gen-data", pipeline::gen_data},
        {"pretrain", pipeline::pretrain},
        {"probe", pipeline::probe},
        {"prefix-eval", pipeline::prefix_eval},
        {"tune-prompt", pipeline::tune_prompts},
        {"eval-disambiguation", pipeline::eval_disambiguation_step},
        {"eval-downstream", pipeline::eval_downstream_step},
        {"attn-map", pipeline::attn_maps},
        {"classify-bias", pipeline::classify_bias},
        {"all", pipeline::run_all},
    };
    const auto step = steps.find(sub);
    if (step == steps.end()) {
        std::cerr << "unknown subcommand '" << sub << "'\n\n";
        print_usage(std::cerr);
        return 1;
    }

    // config files load first so that command-line overrides always win
    RunConfig cfg;
    bool list_keys = false;
    std::vector<std::pair<std::string, std::string>> overrides;
    for (int i = 2; i < argc; ++i) {
        const std::string arg = argv[i];
        if (arg == "--help" || arg == "-h") {
            print_usage(std::cout);
            return 0;
        }
        if (arg == "--list-keys") {
            list_keys = true;
            continue;
        }
        if (arg == "--deterministic") {
            overrides.emplace_back("deterministic", "true");
            continue;
        }
        if (arg.rfind("--", 0) != 0) throw UsageError("expected an option, got '" + arg + "'");
        if (i + 1 >= argc) throw UsageError("option '" + arg + "' is missing its value");
        const std::string key = arg.substr(2);
        const std::string value = argv[++i];
        if (key == "config") load_config_file(cfg, value);
        else overrides.emplace_back(key, value);
    }
    for (const auto& [key, value] : overrides) {
        try {
            apply_config_line(cfg, key, value);
        } catch (const DataError& e) {
            // an unknown or malformed flag is a usage problem on the command line
            throw UsageError(e.what());
        }
    }
    if (list_keys) {
        std::cout << resolved_config_text(cfg);
        return 0;
    }

    pipeline::prepare_run(cfg);
    step->second(cfg);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const taskbias::UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const taskbias::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
