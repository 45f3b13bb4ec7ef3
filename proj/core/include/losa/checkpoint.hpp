#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "losa/tensor.hpp"

namespace losa {

inline constexpr const char* kCheckpointMagic = "losa-ckpt-v1";

// Flat parameter container: ordered (path, shape, float64 payload) entries
// with a text header carrying the format version and the run's RNG seed.
// Payloads are little-endian on disk regardless of host order.
struct CheckpointEntry {
    std::string name;
    Shape shape;
    std::vector<double> values;
};

struct Checkpoint {
    std::uint64_t seed = 0;
    std::vector<CheckpointEntry> entries;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);

    const CheckpointEntry* find(const std::string& name) const;
};

}  // namespace losa
