#include "losa/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "losa/errors.hpp"

namespace losa {

void EvalConfig::validate() const {
    if (tiou_thresholds.empty()) throw InputError("eval: tiou_thresholds must be nonempty");
    double prev = 0.0;
    for (double t : tiou_thresholds) {
        if (t <= 0.0 || t > 1.0) throw InputError("eval: thresholds must lie in (0, 1]");
        if (t <= prev) throw InputError("eval: thresholds must be strictly ascending");
        prev = t;
    }
}

double temporal_iou(double a_start, double a_end, double b_start, double b_end) {
    if (!(a_start < a_end) || !(b_start < b_end)) {
        throw ContractError("temporal_iou: degenerate segment (start must precede end)");
    }
    const double inter = std::max(0.0, std::min(a_end, b_end) - std::max(a_start, b_start));
    const double uni = (a_end - a_start) + (b_end - b_start) - inter;
    return inter / uni;
}

std::optional<double> average_precision(const std::vector<EvalInstance>& instances, std::int64_t class_id,
                                        double tiou) {
    struct Cand {
        std::size_t video;
        Detection det;
    };
    std::vector<Cand> cands;
    std::int64_t npos = 0;
    for (std::size_t v = 0; v < instances.size(); ++v) {
        for (const auto& d : instances[v].detections)
            if (d.class_id == class_id) cands.push_back({v, d});
        for (const auto& g : instances[v].ground_truth)
            if (g.class_id == class_id) ++npos;
    }
    if (npos == 0 && cands.empty()) return std::nullopt;
    if (npos == 0) return 0.0;
    if (cands.empty()) return 0.0;

    std::sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
        if (a.det.score != b.det.score) return a.det.score > b.det.score;
        if (a.det.start != b.det.start) return a.det.start < b.det.start;
        if (a.det.end != b.det.end) return a.det.end < b.det.end;
        return a.video < b.video;
    });

    std::vector<std::vector<bool>> matched(instances.size());
    for (std::size_t v = 0; v < instances.size(); ++v)
        matched[v].assign(instances[v].ground_truth.size(), false);

    std::vector<int> is_tp(cands.size(), 0);
    for (std::size_t i = 0; i < cands.size(); ++i) {
        const auto& c = cands[i];
        const auto& gts = instances[c.video].ground_truth;
        double best = -1.0;
        std::size_t best_j = 0;
        for (std::size_t j = 0; j < gts.size(); ++j) {
            if (gts[j].class_id != class_id || matched[c.video][j]) continue;
            const double ov = temporal_iou(c.det.start, c.det.end, static_cast<double>(gts[j].start),
                                           static_cast<double>(gts[j].end));
            if (ov > best) {
                best = ov;
                best_j = j;
            }
        }
        if (best >= tiou) {
            is_tp[i] = 1;
            matched[c.video][best_j] = true;
        }
    }

    // all-point interpolated AP
    std::vector<double> precision(cands.size()), recall(cands.size());
    std::int64_t tp = 0;
    for (std::size_t i = 0; i < cands.size(); ++i) {
        tp += is_tp[i];
        precision[i] = static_cast<double>(tp) / static_cast<double>(i + 1);
        recall[i] = static_cast<double>(tp) / static_cast<double>(npos);
    }
    double ap = 0.0, running_max = 0.0, next_recall = 0.0;
    for (std::size_t i = cands.size(); i-- > 0;) {
        running_max = std::max(running_max, precision[i]);
        const double prev_recall = (i == 0) ? 0.0 : recall[i - 1];
        if (recall[i] > prev_recall) ap += (recall[i] - prev_recall) * running_max;
        next_recall = recall[i];
    }
    (void)next_recall;
    return ap;
}

MeanApResult mean_ap(const std::vector<EvalInstance>& instances, const EvalConfig& cfg) {
    cfg.validate();
    std::set<std::int64_t> classes;
    bool any_gt = false;
    for (const auto& inst : instances) {
        for (const auto& g : inst.ground_truth) {
            classes.insert(g.class_id);
            any_gt = true;
        }
        for (const auto& d : inst.detections) classes.insert(d.class_id);
    }
    if (!any_gt) throw ContractError("mean_ap: the ground-truth set is empty");

    MeanApResult result;
    result.thresholds = cfg.tiou_thresholds;
    for (double t : cfg.tiou_thresholds) {
        double sum = 0.0;
        std::int64_t count = 0;
        for (auto cls : classes) {
            const auto ap = average_precision(instances, cls, t);
            if (!ap) continue;
            result.per_class.push_back({t, cls, *ap});
            sum += *ap;
            ++count;
        }
        result.per_threshold.push_back(count > 0 ? sum / static_cast<double>(count) : 0.0);
    }
    double avg = 0.0;
    for (double m : result.per_threshold) avg += m;
    result.average = avg / static_cast<double>(result.per_threshold.size());
    return result;
}

void write_metrics_csv(const MeanApResult& result, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw IoError(IoError::Kind::write_failed, "metrics: cannot write " + path);
    os << "threshold,class,ap\n";
    char buf[64];
    for (const auto& row : result.per_class) {
        std::snprintf(buf, sizeof(buf), "%.2f,%lld,%.6f\n", row.threshold, static_cast<long long>(row.class_id), row.ap);
        os << buf;
    }
    for (std::size_t i = 0; i < result.per_threshold.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.2f,mAP,%.6f\n", result.thresholds[i], result.per_threshold[i]);
        os << buf;
    }
    std::snprintf(buf, sizeof(buf), "%.6f\n", result.average);
    os << "avg,mAP," << buf;
}

}  // namespace losa
