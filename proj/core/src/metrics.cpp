#include "voxelkp/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>
#include <stdexcept>

namespace vkp {

namespace {

constexpr double kUnmatchable = 1e30;

// Potential-based shortest augmenting paths; needs rows <= cols.
std::vector<int> hungarian_wide(const Mat<double>& a) {
    const int n = a.rows, m = a.cols;
    const double inf = std::numeric_limits<double>::infinity();
    std::vector<double> u(static_cast<size_t>(n) + 1, 0.0), v(static_cast<size_t>(m) + 1, 0.0);
    std::vector<int> p(static_cast<size_t>(m) + 1, 0), way(static_cast<size_t>(m) + 1, 0);
    for (int i = 1; i <= n; ++i) {
        p[0] = i;
        int j0 = 0;
        std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
        std::vector<char> used(static_cast<size_t>(m) + 1, 0);
        do {
            used[j0] = 1;
            const int i0 = p[j0];
            int j1 = -1;
            double delta = inf;
            for (int j = 1; j <= m; ++j) {
                if (used[j]) continue;
                const double cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if (cur < minv[j]) {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if (minv[j] < delta) {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for (int j = 0; j <= m; ++j) {
                if (used[j]) {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
        } while (p[j0] != 0);
        do {
            const int j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
        } while (j0 != 0);
    }
    std::vector<int> row_to_col(static_cast<size_t>(n), -1);
    for (int j = 1; j <= m; ++j)
        if (p[j] > 0) row_to_col[static_cast<size_t>(p[j]) - 1] = j - 1;
    return row_to_col;
}

double joint_distance(const PoseObject& a, const PoseObject& b, int j) {
    double d2 = 0.0;
    for (int c = 0; c < 3; ++c) {
        const double d = a.keypoints(j, c) - b.keypoints(j, c);
        d2 += d * d;
    }
    return std::sqrt(d2);
}

void check_object(const PoseObject& o, const char* side) {
    if (o.keypoints.cols != 3 || o.visibility.size() != static_cast<size_t>(o.keypoints.rows))
        throw std::invalid_argument(std::string("metrics: malformed ") + side + " object");
}

}  // namespace

std::vector<int> hungarian(const Mat<double>& cost) {
    if (cost.rows == 0 || cost.cols == 0) return std::vector<int>(static_cast<size_t>(cost.rows), -1);
    if (cost.rows <= cost.cols) return hungarian_wide(cost);
    Mat<double> t(cost.cols, cost.rows);
    for (int i = 0; i < cost.rows; ++i)
        for (int j = 0; j < cost.cols; ++j) t(j, i) = cost(i, j);
    const std::vector<int> col_to_row = hungarian_wide(t);
    std::vector<int> row_to_col(static_cast<size_t>(cost.rows), -1);
    for (int j = 0; j < cost.cols; ++j)
        if (col_to_row[j] >= 0) row_to_col[col_to_row[j]] = j;
    return row_to_col;
}

double mean_keypoint_distance(const PoseObject& pred, const PoseObject& gt) {
    double acc = 0.0;
    int count = 0;
    for (int j = 0; j < gt.keypoints.rows; ++j) {
        if (gt.visibility[j] == 0) continue;
        acc += joint_distance(pred, gt, j);
        ++count;
    }
    return count == 0 ? kUnmatchable : acc / count;
}

MatchResult match_objects(const std::vector<PoseObject>& preds, const std::vector<PoseObject>& gts,
                          double match_radius) {
    for (const PoseObject& p : preds) check_object(p, "prediction");
    for (const PoseObject& g : gts) check_object(g, "ground-truth");
    MatchResult r;
    const int n = static_cast<int>(preds.size()), m = static_cast<int>(gts.size());
    std::vector<char> gt_taken(static_cast<size_t>(m), 0);
    if (n > 0 && m > 0) {
        Mat<double> cost(n, m);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < m; ++j) cost(i, j) = mean_keypoint_distance(preds[i], gts[j]);
        const std::vector<int> assign = hungarian(cost);
        for (int i = 0; i < n; ++i) {
            const int j = assign[i];
            if (j < 0 || cost(i, j) > match_radius) continue;
            r.pairs.push_back({i, j});
            gt_taken[j] = 1;
        }
    }
    std::vector<char> pred_taken(static_cast<size_t>(n), 0);
    for (const auto& pr : r.pairs) pred_taken[pr[0]] = 1;
    for (int i = 0; i < n; ++i)
        if (!pred_taken[i]) r.unmatched_pred.push_back(i);
    for (int j = 0; j < m; ++j)
        if (!gt_taken[j]) r.unmatched_gt.push_back(j);
    return r;
}

std::optional<double> mpjpe(const PoseObject& pred, const PoseObject& gt,
                            const std::vector<int>& joints) {
    double acc = 0.0;
    int count = 0;
    for (int j : joints) {
        if (gt.visibility[j] == 0) continue;
        acc += joint_distance(pred, gt, j);
        ++count;
    }
    if (count == 0) return std::nullopt;
    return acc / count;
}

std::optional<double> oks(const PoseObject& pred, const PoseObject& gt, double s,
                          const std::vector<double>& k, const std::vector<int>& joints) {
    if (s <= 0.0) throw std::invalid_argument("oks: scale must be positive");
    double acc = 0.0;
    int count = 0;
    for (int j : joints) {
        if (gt.visibility[j] == 0) continue;
        const double d = joint_distance(pred, gt, j);
        acc += std::exp(-(d * d) / (2.0 * s * s * k[j] * k[j]));
        ++count;
    }
    if (count == 0) return std::nullopt;
    return acc / count;
}

double oks_scale(const PoseObject& gt) {
    return std::max(std::sqrt(std::max(gt.bev_size[0], 0.0) * std::max(gt.bev_size[1], 0.0)), 1e-6);
}

double oks_ap(const std::vector<double>& instance_oks, int missed) {
    const int total = static_cast<int>(instance_oks.size()) + missed;
    if (total == 0) return 0.0;
    double acc = 0.0;
    for (int t = 0; t < 10; ++t) {
        const double thr = 0.50 + 0.05 * t;
        int hit = 0;
        for (double o : instance_oks)
            if (o >= thr) ++hit;
        acc += static_cast<double>(hit) / total;
    }
    return acc / 10.0;
}

double pem(const std::vector<double>& matched_distances, int unmatched, double penalty) {
    const int total = static_cast<int>(matched_distances.size()) + unmatched;
    if (total == 0) return 0.0;
    double acc = penalty * unmatched;
    for (double d : matched_distances) acc += d;
    return acc / total;
}

std::vector<ReportRow> report(const std::vector<std::vector<PoseObject>>& preds,
                              const std::vector<std::vector<PoseObject>>& gts,
                              const SkeletonSpec& skel, double match_radius) {
    if (preds.size() != gts.size())
        throw std::invalid_argument("report: prediction and ground-truth frame counts differ");
    validate_skeleton(skel);

    struct FrameMatch {
        MatchResult match;
        const std::vector<PoseObject>* p;
        const std::vector<PoseObject>* g;
    };
    std::vector<FrameMatch> frames;
    for (size_t f = 0; f < preds.size(); ++f)
        frames.push_back({match_objects(preds[f], gts[f], match_radius), &preds[f], &gts[f]});

    std::vector<ReportRow> rows;
    for (const auto& [part, joints] : skel.parts) {
        double dist_sum = 0.0;
        int vis_count = 0;
        std::vector<double> matched_dists;
        int unmatched_joints = 0;
        std::vector<double> part_oks;
        int missed = 0;
        for (const FrameMatch& fm : frames) {
            for (const auto& pr : fm.match.pairs) {
                const PoseObject& p = (*fm.p)[pr[0]];
                const PoseObject& g = (*fm.g)[pr[1]];
                for (int j : joints) {
                    if (g.visibility[j] == 0) continue;
                    const double d = joint_distance(p, g, j);
                    dist_sum += d;
                    ++vis_count;
                    matched_dists.push_back(d);
                }
                if (auto o = oks(p, g, oks_scale(g), skel.oks_k, joints)) part_oks.push_back(*o);
            }
            for (int j_gt : fm.match.unmatched_gt) {
                const PoseObject& g = (*fm.g)[j_gt];
                int vis = 0;
                for (int j : joints) vis += g.visibility[j] != 0 ? 1 : 0;
                unmatched_joints += vis;
                if (vis > 0) ++missed;
            }
            for (int i_pr : fm.match.unmatched_pred) {
                const PoseObject& p = (*fm.p)[i_pr];
                for (int j : joints) unmatched_joints += p.visibility[j] != 0 ? 1 : 0;
            }
        }
        ReportRow row;
        row.part = part;
        row.mpjpe = vis_count == 0 ? 0.0 : dist_sum / vis_count;
        row.oks_ap = oks_ap(part_oks, missed);
        row.pem = pem(matched_dists, unmatched_joints, skel.pem_penalty);
        rows.push_back(row);
    }
    return rows;
}

std::string format_report_table(const std::vector<ReportRow>& rows) {
    size_t w = 4;
    for (const ReportRow& r : rows) w = std::max(w, r.part.size());
    std::ostringstream out;
    out << std::left << std::setw(static_cast<int>(w)) << "part" << std::right
        << std::setw(10) << "MPJPE" << std::setw(10) << "OKS@AP" << std::setw(10) << "PEM" << '\n';
    out << std::fixed << std::setprecision(4);
    for (const ReportRow& r : rows)
        out << std::left << std::setw(static_cast<int>(w)) << r.part << std::right
            << std::setw(10) << r.mpjpe << std::setw(10) << r.oks_ap << std::setw(10) << r.pem
            << '\n';
    return out.str();
}

std::string format_report_csv(const std::vector<ReportRow>& rows) {
    std::ostringstream out;
    out << std::setprecision(10);
    out << "part,mpjpe,oks_ap,pem\n";
    for (const ReportRow& r : rows)
        out << r.part << ',' << r.mpjpe << ',' << r.oks_ap << ',' << r.pem << '\n';
    return out.str();
}

void write_pose_records(std::ostream& out, const std::vector<std::vector<PoseObject>>& frames) {
    out << std::setprecision(17);
    for (size_t f = 0; f < frames.size(); ++f) {
        for (size_t o = 0; o < frames[f].size(); ++o) {
            const PoseObject& obj = frames[f][o];
            check_object(obj, "record");
            out << f << ',' << o;
            for (int j = 0; j < obj.keypoints.rows; ++j)
                out << ',' << obj.keypoints(j, 0) << ',' << obj.keypoints(j, 1) << ','
                    << obj.keypoints(j, 2) << ',' << obj.visibility[j];
            out << '\n';
        }
    }
}

std::vector<std::vector<PoseObject>> read_pose_records(std::istream& in, int keypoints) {
    std::map<long long, std::map<long long, PoseObject>> by_frame;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        std::istringstream ls(line);
        std::string field;
        std::vector<std::string> fields;
        while (std::getline(ls, field, ',')) fields.push_back(field);
        if (fields.size() != 2 + 4 * static_cast<size_t>(keypoints))
            throw std::runtime_error("pose records: line " + std::to_string(lineno) +
                                     " has " + std::to_string(fields.size()) + " fields, expected " +
                                     std::to_string(2 + 4 * static_cast<size_t>(keypoints)));
        size_t pos = 0;
        auto next_ll = [&] { return std::stoll(fields[pos++]); };
        auto next_d = [&] { return std::stod(fields[pos++]); };
        const long long frame = next_ll();
        const long long object = next_ll();
        PoseObject obj;
        obj.keypoints = Mat<double>(keypoints, 3);
        obj.visibility.resize(static_cast<size_t>(keypoints));
        for (int j = 0; j < keypoints; ++j) {
            obj.keypoints(j, 0) = next_d();
            obj.keypoints(j, 1) = next_d();
            obj.keypoints(j, 2) = next_d();
            obj.visibility[j] = static_cast<int>(next_ll());
        }
        if (!by_frame[frame].emplace(object, std::move(obj)).second)
            throw std::runtime_error("pose records: duplicate object id on line " +
                                     std::to_string(lineno));
    }
    std::vector<std::vector<PoseObject>> frames;
    for (auto& [fid, objs] : by_frame) {
        (void)fid;
        std::vector<PoseObject> frame;
        for (auto& [oid, obj] : objs) {
            (void)oid;
            frame.push_back(std::move(obj));
        }
        frames.push_back(std::move(frame));
    }
    return frames;
}

}  // namespace vkp
