#include "losa/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "losa/errors.hpp"

namespace losa {

namespace {

void write_f64_le(std::ostream& os, const std::vector<double>& values) {
    std::vector<unsigned char> buf(values.size() * 8);
    for (std::size_t i = 0; i < values.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &values[i], 8);
        for (int b = 0; b < 8; ++b) buf[i * 8 + static_cast<std::size_t>(b)] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
    }
    os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

std::vector<double> read_f64_le(std::istream& is, std::size_t count, const std::string& name) {
    std::vector<unsigned char> buf(count * 8);
    is.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (static_cast<std::size_t>(is.gcount()) != buf.size()) {
        throw IoError(IoError::Kind::truncated_payload, "checkpoint: truncated payload for '" + name + "'");
    }
    std::vector<double> values(count);
    for (std::size_t i = 0; i < count; ++i) {
        std::uint64_t bits = 0;
        for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(buf[i * 8 + static_cast<std::size_t>(b)]) << (8 * b);
        std::memcpy(&values[i], &bits, 8);
    }
    return values;
}

}  // namespace

void Checkpoint::save(const std::string& path) const {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError(IoError::Kind::write_failed, "checkpoint: cannot open '" + path + "' for writing");
    os << kCheckpointMagic << "\n";
    os << "seed " << seed << "\n";
    os << "count " << entries.size() << "\n";
    for (const auto& e : entries) {
        os << "name " << e.name << "\n";
        os << "shape";
        for (auto d : e.shape) os << " " << d;
        os << "\n";
        write_f64_le(os, e.values);
    }
    if (!os) throw IoError(IoError::Kind::write_failed, "checkpoint: write failed for '" + path + "'");
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError(IoError::Kind::missing_file, "checkpoint: cannot open '" + path + "'");
    std::string line;
    if (!std::getline(is, line)) throw IoError(IoError::Kind::malformed, "checkpoint: empty file '" + path + "'");
    if (line != kCheckpointMagic) {
        throw IoError(IoError::Kind::version_mismatch,
                      "checkpoint: expected format '" + std::string(kCheckpointMagic) + "', found '" + line + "'");
    }
    Checkpoint ckpt;
    std::size_t count = 0;
    {
        if (!std::getline(is, line) || line.rfind("seed ", 0) != 0)
            throw IoError(IoError::Kind::malformed, "checkpoint: missing seed line");
        ckpt.seed = std::stoull(line.substr(5));
        if (!std::getline(is, line) || line.rfind("count ", 0) != 0)
            throw IoError(IoError::Kind::malformed, "checkpoint: missing count line");
        count = std::stoull(line.substr(6));
    }
    for (std::size_t i = 0; i < count; ++i) {
        CheckpointEntry e;
        if (!std::getline(is, line) || line.rfind("name ", 0) != 0)
            throw IoError(IoError::Kind::malformed, "checkpoint: missing name for entry " + std::to_string(i));
        e.name = line.substr(5);
        if (!std::getline(is, line) || line.rfind("shape", 0) != 0)
            throw IoError(IoError::Kind::malformed, "checkpoint: missing shape for '" + e.name + "'");
        std::istringstream ss(line.substr(5));
        std::int64_t d;
        while (ss >> d) e.shape.push_back(d);
        if (e.shape.empty()) throw IoError(IoError::Kind::malformed, "checkpoint: empty shape for '" + e.name + "'");
        e.values = read_f64_le(is, static_cast<std::size_t>(shape_numel(e.shape)), e.name);
        ckpt.entries.push_back(std::move(e));
    }
    return ckpt;
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
    for (const auto& e : entries) {
        if (e.name == name) return &e;
    }
    return nullptr;
}

}  // namespace losa
