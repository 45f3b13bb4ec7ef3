#include "losa/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "losa/errors.hpp"

namespace losa {

namespace fs = std::filesystem;
using nlohmann::json;

void GeneratorConfig::validate() const {
    if (num_videos < 1) throw InputError("generator: num_videos must be >= 1");
    if (num_classes < 1) throw InputError("generator: num_classes (K) must be >= 1, got " + std::to_string(num_classes));
    if (min_len < 1 || max_len < min_len) throw InputError("generator: invalid length range");
    if (max_len > 576) throw InputError("generator: max_len exceeds the 576-frame ceiling");
    if (frame_h < 8 || frame_w < 8) throw InputError("generator: frames must be at least 8x8");
    if (noise_sigma < 0.0) throw InputError("generator: noise_sigma must be >= 0");
    if (min_segments < 1 || max_segments < min_segments) throw InputError("generator: invalid segment count range");
    if (min_seg_len < 2 || max_seg_len < min_seg_len) throw InputError("generator: invalid segment length range");
    for (const auto& [a, b] : long_range_pairs) {
        if (a < 0 || a >= num_classes || b < 0 || b >= num_classes || a == b)
            throw InputError("generator: long_range_pair (" + std::to_string(a) + "," + std::to_string(b) +
                             ") outside class range");
    }
    if (!patterns.empty() && static_cast<std::int64_t>(patterns.size()) != num_classes)
        throw InputError("generator: patterns must be empty or have one entry per class");
}

std::vector<ClassPattern> default_patterns(std::int64_t num_classes,
                                           const std::vector<std::pair<std::int64_t, std::int64_t>>& pairs) {
    std::vector<ClassPattern> out(static_cast<std::size_t>(num_classes));
    for (std::int64_t k = 0; k < num_classes; ++k) {
        ClassPattern p;
        if (k % 2 == 0) {
            p.kind = ClassPattern::Kind::moving_square;
            p.velocity_x = 1.0 + static_cast<double>(k / 2);
            p.velocity_y = static_cast<double>(k % 4) / 2.0;
            p.brightness = 0.6;
        } else {
            p.kind = ClassPattern::Kind::oscillation;
            p.frequency = 0.10 + 0.05 * static_cast<double>(k / 2);
            p.amplitude = 0.25;
        }
        out[static_cast<std::size_t>(k)] = p;
    }
    // pair members share a pattern: within-clip statistics become identical
    for (const auto& [a, b] : pairs) {
        ClassPattern p;
        p.kind = ClassPattern::Kind::moving_square;
        p.velocity_x = 1.0;
        p.velocity_y = 1.0;
        p.brightness = 0.6;
        out[static_cast<std::size_t>(a)] = p;
        out[static_cast<std::size_t>(b)] = p;
    }
    return out;
}

namespace {

constexpr double kBackground = 0.3;
constexpr std::int64_t kBeaconLen = 6;      // frames of global tint
constexpr std::int64_t kBeaconLead = 4;     // extra frames beyond context_gap
constexpr double kBeaconBright = 0.35;      // first pair member: tint up
constexpr double kBeaconDark = -0.25;       // second pair member: tint down
constexpr std::int64_t kSquare = 5;         // moving square side
constexpr std::int64_t kGap = 4;            // min background frames between segments

double gauss(Rng& rng) {
    const double u1 = 1.0 - rng.uniform();
    const double u2 = rng.uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
}

double as_f32(double v) { return static_cast<double>(static_cast<float>(v)); }

struct PlannedSegment {
    std::int64_t start, end, class_id;
    std::int64_t beacon_start = -1;  // -1: none
    double beacon_delta = 0.0;
};

const std::pair<std::int64_t, std::int64_t>* pair_of(const GeneratorConfig& cfg, std::int64_t k) {
    for (const auto& pr : cfg.long_range_pairs) {
        if (pr.first == k || pr.second == k) return &pr;
    }
    return nullptr;
}

// Sample non-overlapping segments left to right; pair classes need headroom
// for the context cue. Throws GenerationError when the config cannot fit.
std::vector<PlannedSegment> plan_segments(const GeneratorConfig& cfg, std::int64_t L, Rng& rng) {
    const std::int64_t lead = cfg.context_gap + kBeaconLead + kBeaconLen;  // room before a pair-class onset
    for (int attempt = 0; attempt < 64; ++attempt) {
        const std::int64_t want =
            cfg.min_segments + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.max_segments - cfg.min_segments + 1)));
        std::vector<PlannedSegment> plan;
        std::int64_t cursor = kGap;
        bool ok = true;
        for (std::int64_t s = 0; s < want; ++s) {
            const std::int64_t k = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.num_classes)));
            const auto* pr = pair_of(cfg, k);
            const std::int64_t min_start = pr ? std::max(cursor, lead) : cursor;
            const std::int64_t len = cfg.min_seg_len + static_cast<std::int64_t>(rng.below(
                                         static_cast<std::uint64_t>(cfg.max_seg_len - cfg.min_seg_len + 1)));
            const std::int64_t max_start = L - len - kGap;
            if (max_start < min_start) {
                ok = false;
                break;
            }
            const std::int64_t slack = std::min<std::int64_t>(max_start - min_start, 24);
            const std::int64_t start = min_start + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(slack + 1)));
            PlannedSegment seg{start, start + len, k};
            if (pr) {
                seg.beacon_start = start - cfg.context_gap - kBeaconLead - kBeaconLen;
                seg.beacon_delta = (k == pr->first) ? kBeaconBright : kBeaconDark;
                // the cue must not sit inside an earlier segment
                for (const auto& other : plan) {
                    if (seg.beacon_start < other.end && seg.beacon_start + kBeaconLen > other.start) ok = false;
                }
                if (!ok) break;
            }
            plan.push_back(seg);
            cursor = seg.end + kGap;
        }
        if (ok && !plan.empty()) return plan;
    }
    throw GenerationError("generator: cannot pack " + std::to_string(cfg.min_segments) + ".." +
                          std::to_string(cfg.max_segments) + " segments of " + std::to_string(cfg.min_seg_len) +
                          ".." + std::to_string(cfg.max_seg_len) + " frames into a " + std::to_string(L) +
                          "-frame video");
}

}  // namespace

Dataset generate(const GeneratorConfig& cfg) {
    cfg.validate();
    const auto patterns = cfg.patterns.empty() ? default_patterns(cfg.num_classes, cfg.long_range_pairs) : cfg.patterns;
    Dataset ds;
    ds.reserve(static_cast<std::size_t>(cfg.num_videos));
    for (std::int64_t v = 0; v < cfg.num_videos; ++v) {
        Rng rng = rng_for(cfg.seed, "data.video." + std::to_string(v));
        const std::int64_t L =
            cfg.min_len + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(cfg.max_len - cfg.min_len + 1)));
        auto plan = plan_segments(cfg, L, rng);

        const std::int64_t H = cfg.frame_h, W = cfg.frame_w;
        std::vector<double> px(static_cast<std::size_t>(L * H * W * 3));
        for (auto& p : px) p = kBackground + cfg.noise_sigma * gauss(rng);

        auto paint = [&](std::int64_t f, std::int64_t y, std::int64_t x, double delta) {
            double* cell = px.data() + ((f * H + y) * W + x) * 3;
            for (int c = 0; c < 3; ++c) cell[c] += delta;
        };

        for (const auto& seg : plan) {
            const auto& pat = patterns[static_cast<std::size_t>(seg.class_id)];
            if (pat.kind == ClassPattern::Kind::moving_square) {
                const std::int64_t y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(H)));
                const std::int64_t x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(W)));
                for (std::int64_t f = seg.start; f < seg.end; ++f) {
                    const std::int64_t dt = f - seg.start;
                    const std::int64_t cy = (y0 + static_cast<std::int64_t>(std::llround(pat.velocity_y * static_cast<double>(dt)))) % H;
                    const std::int64_t cx = (x0 + static_cast<std::int64_t>(std::llround(pat.velocity_x * static_cast<double>(dt)))) % W;
                    for (std::int64_t dy = 0; dy < kSquare; ++dy)
                        for (std::int64_t dx = 0; dx < kSquare; ++dx)
                            paint(f, (cy + dy) % H, (cx + dx) % W, pat.brightness);
                }
            } else {
                for (std::int64_t f = seg.start; f < seg.end; ++f) {
                    const double phase = 2.0 * M_PI * pat.frequency * static_cast<double>(f - seg.start);
                    const double delta = pat.amplitude * std::sin(phase);
                    for (std::int64_t y = 0; y < H; ++y)
                        for (std::int64_t x = 0; x < W; ++x) paint(f, y, x, delta);
                }
            }
            if (seg.beacon_start >= 0) {
                for (std::int64_t f = seg.beacon_start; f < seg.beacon_start + kBeaconLen; ++f)
                    for (std::int64_t y = 0; y < H; ++y)
                        for (std::int64_t x = 0; x < W; ++x) paint(f, y, x, seg.beacon_delta);
            }
        }

        // Clamp and snap to float32 grid so the on-disk payload round-trips
        // bit-exactly.
        for (auto& p : px) p = as_f32(std::clamp(p, 0.0, 1.0));

        VideoSample sample;
        char buf[16];
        std::snprintf(buf, sizeof(buf), "v%04lld", static_cast<long long>(v));
        sample.video.video_id = buf;
        sample.video.frames = Tensor::from({L, H, W, 3}, std::move(px));
        for (const auto& seg : plan) sample.annotations.push_back({seg.start, seg.end, seg.class_id});
        std::sort(sample.annotations.begin(), sample.annotations.end(),
                  [](const SegmentAnnotation& a, const SegmentAnnotation& b) { return a.start < b.start; });
        ds.push_back(std::move(sample));
    }
    return ds;
}

void save_dataset(const Dataset& ds, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    json manifest;
    manifest["format"] = kDatasetFormat;
    manifest["videos"] = json::array();
    for (const auto& sample : ds) {
        const auto& v = sample.video;
        const std::string file = v.video_id + ".raw";
        json jv;
        jv["video_id"] = v.video_id;
        jv["shape"] = v.frames.shape();
        jv["file"] = file;
        jv["annotations"] = json::array();
        for (const auto& a : sample.annotations) {
            jv["annotations"].push_back({{"start", a.start}, {"end", a.end}, {"class", a.class_id}});
        }
        manifest["videos"].push_back(std::move(jv));

        std::ofstream os(fs::path(dir) / file, std::ios::binary);
        if (!os) throw IoError(IoError::Kind::write_failed, "dataset: cannot write " + file);
        const double* src = v.frames.data();
        std::vector<unsigned char> buf(static_cast<std::size_t>(v.frames.size()) * 4);
        for (std::int64_t i = 0; i < v.frames.size(); ++i) {
            const float f = static_cast<float>(src[i]);
            std::uint32_t bits;
            std::memcpy(&bits, &f, 4);
            for (int b = 0; b < 4; ++b) buf[static_cast<std::size_t>(i * 4 + b)] = static_cast<unsigned char>((bits >> (8 * b)) & 0xff);
        }
        os.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
        if (!os) throw IoError(IoError::Kind::write_failed, "dataset: write failed for " + file);
    }
    std::ofstream ms(fs::path(dir) / "manifest.json");
    if (!ms) throw IoError(IoError::Kind::write_failed, "dataset: cannot write manifest.json");
    ms << manifest.dump(2) << "\n";
}

Dataset load_dataset(const std::string& dir) {
    const fs::path mpath = fs::path(dir) / "manifest.json";
    std::ifstream ms(mpath);
    if (!ms) throw IoError(IoError::Kind::missing_file, "dataset: missing manifest " + mpath.string());
    json manifest;
    try {
        ms >> manifest;
    } catch (const json::exception& e) {
        throw IoError(IoError::Kind::malformed, "dataset: malformed manifest: " + std::string(e.what()));
    }
    if (!manifest.contains("format") || manifest["format"] != kDatasetFormat) {
        throw IoError(IoError::Kind::version_mismatch,
                      "dataset: expected format '" + std::string(kDatasetFormat) + "'");
    }
    if (!manifest.contains("videos") || !manifest["videos"].is_array())
        throw IoError(IoError::Kind::malformed, "dataset: manifest has no videos array");

    Dataset ds;
    for (const auto& jv : manifest["videos"]) {
        try {
            VideoSample sample;
            sample.video.video_id = jv.at("video_id").get<std::string>();
            Shape shape = jv.at("shape").get<Shape>();
            const std::string file = jv.at("file").get<std::string>();
            for (const auto& ja : jv.at("annotations")) {
                sample.annotations.push_back(
                    {ja.at("start").get<std::int64_t>(), ja.at("end").get<std::int64_t>(), ja.at("class").get<std::int64_t>()});
            }
            const fs::path rpath = fs::path(dir) / file;
            std::ifstream rs(rpath, std::ios::binary);
            if (!rs) throw IoError(IoError::Kind::missing_file, "dataset: missing payload " + rpath.string());
            const std::int64_t n = shape_numel(shape);
            std::vector<unsigned char> buf(static_cast<std::size_t>(n) * 4);
            rs.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
            if (rs.gcount() != static_cast<std::streamsize>(buf.size()) || rs.peek() != EOF) {
                throw IoError(IoError::Kind::truncated_payload,
                              "dataset: payload " + file + " has wrong byte length (expected " +
                                  std::to_string(n * 4) + ")");
            }
            std::vector<double> px(static_cast<std::size_t>(n));
            for (std::int64_t i = 0; i < n; ++i) {
                std::uint32_t bits = 0;
                for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(buf[static_cast<std::size_t>(i * 4 + b)]) << (8 * b);
                float f;
                std::memcpy(&f, &bits, 4);
                px[static_cast<std::size_t>(i)] = static_cast<double>(f);
            }
            sample.video.frames = Tensor::from(shape, std::move(px));
            ds.push_back(std::move(sample));
        } catch (const json::exception& e) {
            throw IoError(IoError::Kind::malformed, "dataset: malformed video entry: " + std::string(e.what()));
        }
    }
    return ds;
}

}  // namespace losa
