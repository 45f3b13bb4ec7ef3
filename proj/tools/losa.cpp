// Command-line front end: dataset generation, training, evaluation, ablations,
// and the gradient/memory audits.
//
// Exit codes: 0 ok, 1 check failure, 2 config error, 3 I/O error,
// 4 audit failure, 5 checkpoint/config mismatch.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "losa/config.hpp"
#include "losa/gradcheck.hpp"
#include "losa/model.hpp"
#include "losa/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitCheckFailure = 1;
constexpr int kExitConfig = 2;
constexpr int kExitIo = 3;
constexpr int kExitAudit = 4;
constexpr int kExitMismatch = 5;

struct CommonFlags {
    std::string config_path;
    std::string data_dir;
    std::string out_dir;
    std::int64_t seed = -1;
};

losa::RunConfig load_config(const CommonFlags& flags) {
    losa::RunConfig cfg =
        flags.config_path.empty() ? losa::RunConfig::defaults() : losa::RunConfig::from_file(flags.config_path);
    if (const char* env = std::getenv("LOSA_SEED")) {
        cfg.apply_seed(std::strtoull(env, nullptr, 10));
    }
    if (flags.seed >= 0) cfg.apply_seed(static_cast<std::uint64_t>(flags.seed));
    if (!flags.data_dir.empty()) cfg.data_dir = flags.data_dir;
    if (!flags.out_dir.empty()) cfg.out_dir = flags.out_dir;
    return cfg;
}

losa::Dataset load_split(const losa::RunConfig& cfg, const std::string& split) {
    return losa::load_dataset((fs::path(cfg.data_dir) / split).string());
}

void write_detections_json(const std::vector<losa::EvalInstance>& instances, const losa::Dataset& ds,
                           const std::string& path) {
    json out = json::object();
    for (std::size_t i = 0; i < instances.size(); ++i) {
        json dets = json::array();
        for (const auto& d : instances[i].detections) {
            dets.push_back({{"start", d.start}, {"end", d.end}, {"class", d.class_id}, {"score", d.score}});
        }
        out[ds[i].video.video_id] = std::move(dets);
    }
    std::ofstream os(path);
    if (!os) throw losa::IoError(losa::IoError::Kind::write_failed, "cannot write " + path);
    os << out.dump(2) << "\n";
}

int cmd_generate(const losa::RunConfig& cfg) {
    const auto train_cfg = losa::split_generator(cfg, "train");
    const auto test_cfg = losa::split_generator(cfg, "test");
    losa::save_dataset(losa::generate(train_cfg), (fs::path(cfg.data_dir) / "train").string());
    losa::save_dataset(losa::generate(test_cfg), (fs::path(cfg.data_dir) / "test").string());
    std::printf("generated %lld train + %lld test videos under %s\n",
                static_cast<long long>(train_cfg.num_videos), static_cast<long long>(test_cfg.num_videos),
                cfg.data_dir.c_str());
    return 0;
}

int cmd_train(const losa::RunConfig& cfg, const std::string& mode_str) {
    const losa::TrainMode mode = losa::train_mode_from_string(mode_str);
    const auto train_ds = load_split(cfg, "train");
    const auto test_ds = load_split(cfg, "test");
    auto result = losa::train(train_ds, test_ds, mode, cfg.train_settings());
    losa::write_train_artifacts(result, cfg.out_dir);
    std::printf("mode=%s epochs=%lld final_test_avg_map=%.4f\n", mode_str.c_str(),
                static_cast<long long>(cfg.optim.total_epochs), result.final_test_avg_map);
    std::printf("audit: learnable=%lld frozen=%lld fraction=%.4f backbone_grad_buffers=%lld\n",
                static_cast<long long>(result.audit.learnable_params),
                static_cast<long long>(result.audit.frozen_params), result.audit.learnable_fraction,
                static_cast<long long>(result.audit.backbone_grad_buffers));
    std::printf("tape nodes: head_only=%lld losa=%lld full_backbone=%lld\n",
                static_cast<long long>(result.audit.tape_nodes_head_only),
                static_cast<long long>(result.audit.tape_nodes_losa),
                static_cast<long long>(result.audit.tape_nodes_fullbackbone));
    return 0;
}

int cmd_eval(const losa::RunConfig& cfg, const std::string& checkpoint_path, const std::string& mode_str,
             const std::string& split) {
    const losa::TrainMode mode = losa::train_mode_from_string(mode_str);
    losa::Model model(cfg.model, mode);
    model.load_checkpoint(losa::Checkpoint::load(checkpoint_path));
    const auto ds = load_split(cfg, split);
    std::vector<losa::EvalInstance> instances;
    const auto result = losa::evaluate(model, ds, cfg.eval, &instances);
    fs::create_directories(cfg.out_dir);
    losa::write_metrics_csv(result, (fs::path(cfg.out_dir) / "eval_metrics.csv").string());
    write_detections_json(instances, ds, (fs::path(cfg.out_dir) / "detections.json").string());
    for (std::size_t i = 0; i < result.thresholds.size(); ++i) {
        std::printf("mAP@%.2f = %.4f\n", result.thresholds[i], result.per_threshold[i]);
    }
    std::printf("Avg mAP = %.4f\n", result.average);
    return 0;
}

struct AblationVariant {
    std::string name;
    losa::ModelConfig model;
};

std::vector<AblationVariant> variants_for_axis(const losa::RunConfig& cfg, const std::string& axis) {
    std::vector<AblationVariant> variants;
    if (axis == "components") {
        auto full = cfg.model;
        variants.push_back({"full", full});
        auto no_long = cfg.model;
        no_long.long_range = false;
        variants.push_back({"no_long", no_long});
        auto no_short = cfg.model;
        no_short.short_range = false;
        variants.push_back({"no_short", no_short});
        auto sum_only = cfg.model;
        sum_only.fusion = losa::FusionKind::sum_only;
        variants.push_back({"no_gated_fusion", sum_only});
    } else if (axis == "gating") {
        for (const char* g : {"random", "ones", "zero"}) {
            auto m = cfg.model;
            m.gate_init = losa::gate_init_from_string(g);
            variants.push_back({std::string("gate_") + g, m});
        }
    } else if (axis == "layers") {
        const std::int64_t n = cfg.model.backbone.num_layers;
        std::vector<std::int64_t> all, shallow, deep;
        for (std::int64_t l = 1; l < n; ++l) {
            all.push_back(l);
            if (l <= (n - 1) / 2)
                shallow.push_back(l);
            else
                deep.push_back(l);
        }
        auto m_all = cfg.model;
        m_all.adapter_layers = all;
        variants.push_back({"layers_all", m_all});
        auto m_deep = cfg.model;
        m_deep.adapter_layers = deep;
        variants.push_back({"layers_deep_half", m_deep});
        auto m_shallow = cfg.model;
        m_shallow.adapter_layers = shallow;
        variants.push_back({"layers_shallow_half", m_shallow});
    } else {
        throw losa::InputError("unknown ablation axis '" + axis + "' (expected components|gating|layers)");
    }
    return variants;
}

int cmd_ablate(const losa::RunConfig& cfg, const std::string& axis, const std::vector<std::int64_t>& seeds) {
    const auto train_ds = load_split(cfg, "train");
    const auto test_ds = load_split(cfg, "test");
    const auto variants = variants_for_axis(cfg, axis);
    fs::create_directories(cfg.out_dir);
    const std::string report_path = (fs::path(cfg.out_dir) / ("ablation_" + axis + ".csv")).string();
    std::ofstream os(report_path);
    if (!os) throw losa::IoError(losa::IoError::Kind::write_failed, "cannot write " + report_path);
    os << "variant,seeds,mean_avg_map\n";
    for (const auto& v : variants) {
        double sum = 0.0;
        for (auto s : seeds) {
            losa::TrainSettings settings = cfg.train_settings();
            settings.model = v.model;
            settings.model.seed = static_cast<std::uint64_t>(s);
            auto result = losa::train(train_ds, test_ds, losa::TrainMode::losa, settings);
            sum += result.final_test_avg_map;
            std::printf("%s seed=%lld avg_map=%.4f\n", v.name.c_str(), static_cast<long long>(s),
                        result.final_test_avg_map);
        }
        const double mean = sum / static_cast<double>(seeds.size());
        char buf[128];
        std::snprintf(buf, sizeof(buf), "%s,%zu,%.6f\n", v.name.c_str(), seeds.size(), mean);
        os << buf;
    }
    std::printf("wrote %s\n", report_path.c_str());
    return 0;
}

int cmd_gradcheck(std::uint64_t seed, bool include_broken) {
    auto results = losa::run_op_gradcheck_suite(seed, include_broken);
    results.push_back(losa::model_composite_gradcheck(seed));
    int failures = 0;
    for (const auto& r : results) {
        std::printf("%-34s max_rel_err=%.3e %s\n", r.name.c_str(), r.max_rel_err, r.ok ? "ok" : "FAIL");
        if (!r.ok) {
            if (failures == 0) std::fprintf(stderr, "gradcheck failed at op '%s'\n", r.name.c_str());
            ++failures;
        }
    }
    return failures == 0 ? 0 : kExitCheckFailure;
}

int cmd_memreport(const losa::RunConfig& cfg, std::int64_t length) {
    losa::GeneratorConfig g = losa::split_generator(cfg, "train");
    g.num_videos = 1;
    g.min_len = length;
    g.max_len = length;
    const auto ds = losa::generate(g);
    const auto report = losa::memory_report(cfg.model, ds[0]);
    std::printf("video length %lld frames -> %lld clips\n", static_cast<long long>(length),
                static_cast<long long>(report.num_clips));
    std::printf("tape_nodes head_only:     %lld\n", static_cast<long long>(report.nodes_head_only));
    std::printf("tape_nodes losa:          %lld\n", static_cast<long long>(report.nodes_losa));
    std::printf("tape_nodes full_backbone: %lld\n", static_cast<long long>(report.nodes_full_backbone));
    const bool ordering = report.nodes_head_only <= report.nodes_losa &&
                          report.nodes_losa < report.nodes_full_backbone;
    const bool half = 2 * report.nodes_losa <= report.nodes_full_backbone;
    std::printf("ordering head_only <= losa < full_backbone: %s\n", ordering ? "PASS" : "FAIL");
    std::printf("losa <= 0.5 * full_backbone: %s\n", half ? "PASS" : "FAIL");
    return (ordering && half) ? 0 : kExitCheckFailure;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"long-short-range adapter training and evaluation toolkit"};
    app.require_subcommand(1);

    CommonFlags flags;
    std::string mode = "losa";
    std::string axis = "components";
    std::string checkpoint_path;
    std::string split = "test";
    std::vector<std::int64_t> seeds = {1, 2, 3};
    std::int64_t epochs = -1;
    std::string gate_init;
    std::string layers_csv;
    std::int64_t memreport_len = 576;
    bool augment = false;
    bool broken_fixture = false;

    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", flags.config_path, "JSON config file");
        sub->add_option("--data", flags.data_dir, "dataset directory (train/ + test/)");
        sub->add_option("--out", flags.out_dir, "output directory");
        sub->add_option("--seed", flags.seed, "override the config seed");
    };

    auto* gen = app.add_subcommand("generate", "write a synthetic dataset");
    add_common(gen);

    auto* tr = app.add_subcommand("train", "train one strategy and write artifacts");
    add_common(tr);
    tr->add_option("--mode", mode, "losa|head_only|full_backbone");
    tr->add_option("--epochs", epochs, "override total epochs");
    tr->add_option("--gate-init", gate_init, "zero|random|ones");
    tr->add_option("--layers", layers_csv, "comma-separated adapter layer subset");
    tr->add_flag("--augment", augment, "enable temporally-consistent augmentation");

    auto* ev = app.add_subcommand("eval", "evaluate a checkpoint");
    add_common(ev);
    ev->add_option("--checkpoint", checkpoint_path, "checkpoint path")->required();
    ev->add_option("--mode", mode, "model mode the checkpoint was trained with");
    ev->add_option("--split", split, "train|test");

    auto* ab = app.add_subcommand("ablate", "train ablation variants and tabulate Avg mAP");
    add_common(ab);
    ab->add_option("--axis", axis, "components|gating|layers");
    ab->add_option("--seeds", seeds, "seeds to average over");
    ab->add_option("--epochs", epochs, "override total epochs");

    auto* gc = app.add_subcommand("gradcheck", "finite-difference audit of every op");
    gc->add_option("--seed", flags.seed, "suite seed");
    gc->add_flag("--with-broken-fixture", broken_fixture, "include the deliberately wrong backward rule");

    auto* mr = app.add_subcommand("memreport", "tape-node comparison across training strategies");
    add_common(mr);
    mr->add_option("--length", memreport_len, "comparison video length in frames");

    CLI11_PARSE(app, argc, argv);

    try {
        losa::RunConfig cfg = load_config(flags);
        if (epochs > 0) {
            cfg.optim.total_epochs = epochs;
            cfg.optim.warmup_epochs = std::min(cfg.optim.warmup_epochs, epochs - 1);
        }
        if (!gate_init.empty()) cfg.model.gate_init = losa::gate_init_from_string(gate_init);
        if (augment) cfg.augment = true;
        if (!layers_csv.empty()) {
            cfg.model.adapter_layers.clear();
            std::stringstream ss(layers_csv);
            std::string item;
            while (std::getline(ss, item, ',')) cfg.model.adapter_layers.push_back(std::stoll(item));
        }

        if (gen->parsed()) return cmd_generate(cfg);
        if (tr->parsed()) return cmd_train(cfg, mode);
        if (ev->parsed()) return cmd_eval(cfg, checkpoint_path, mode, split);
        if (ab->parsed()) return cmd_ablate(cfg, axis, seeds);
        if (gc->parsed()) return cmd_gradcheck(flags.seed >= 0 ? static_cast<std::uint64_t>(flags.seed) : 20240801ULL, broken_fixture);
        if (mr->parsed()) return cmd_memreport(cfg, memreport_len);
    } catch (const losa::MismatchError& e) {
        std::fprintf(stderr, "mismatch error: %s\n", e.what());
        return kExitMismatch;
    } catch (const losa::AuditError& e) {
        std::fprintf(stderr, "audit failure: %s\n", e.what());
        return kExitAudit;
    } catch (const losa::IoError& e) {
        std::fprintf(stderr, "I/O error: %s\n", e.what());
        return kExitIo;
    } catch (const losa::InputError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const losa::GenerationError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return kExitCheckFailure;
    }
    return 0;
}
