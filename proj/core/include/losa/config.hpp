#pragma once

#include <cstdint>
#include <string>

#include "losa/data.hpp"
#include "losa/train.hpp"

namespace losa {

// One structured config file drives every command; CLI flags override fields
// after parsing.
struct RunConfig {
    std::uint64_t seed = 1;
    std::string data_dir = "data";
    std::string out_dir = "out";
    ModelConfig model;
    OptimConfig optim;
    EvalConfig eval;
    GeneratorConfig generator;
    std::int64_t test_videos = 50;  // generator writes train/ and test/ splits
    bool augment = false;
    std::int64_t eval_every = 1;

    void apply_seed(std::uint64_t s);
    TrainSettings train_settings() const;

    static RunConfig defaults();
    static RunConfig from_json_text(const std::string& text);
    static RunConfig from_file(const std::string& path);
};

// Train/test splits are generated independently (distinct seeds), not sliced.
GeneratorConfig split_generator(const RunConfig& cfg, const std::string& split);

}  // namespace losa
