#include "idp/eval.hpp"

#include "idp/checkpoint.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <sstream>

namespace idp {

std::vector<int> RankedCandidates::ranks() const
{
    std::vector<int> out;
    out.reserve(users.size());
    for (const auto& u : users)
        out.push_back(u.rank);
    return out;
}

int pessimistic_rank(double target_score, std::span<const double> negative_scores)
{
    int rank = 1;
    for (double s : negative_scores)
        if (s >= target_score)
            ++rank;
    return rank;
}

template <typename Scalar>
RankedCandidates rank_users(const SeqModelParams<Scalar>& params,
                            const LeaveOneOutSplit& split,
                            EvalTarget target,
                            const std::function<bool(ItemIndex)>& keep)
{
    const Mat<Scalar> table = item_table(params);
    RankedCandidates out;
    for (const auto& us : split.users) {
        const ItemIndex goal = target == EvalTarget::valid ? us.valid : us.test;
        if (keep && !keep(goal))
            continue;
        std::vector<ItemIndex> history = us.train;
        if (target == EvalTarget::test)
            history.push_back(us.valid);
        if (history.empty())
            continue;
        RankedUser ru;
        ru.user = us.user;
        ru.target = goal;
        ru.candidates.reserve(us.negatives.size() + 1);
        ru.candidates.push_back(goal);
        ru.candidates.insert(ru.candidates.end(), us.negatives.begin(), us.negatives.end());
        for (ItemIndex v : ru.candidates)
            if (v < 0 || v >= table.rows())
                throw Error("candidate item " + std::to_string(v) + " has no embedding row");
        const RowVec<Scalar> user = forward(params, table, history);
        ru.scores.reserve(ru.candidates.size());
        for (ItemIndex v : ru.candidates)
            ru.scores.push_back(double(score(user, v, table)));
        ru.rank = pessimistic_rank(ru.scores[0], std::span<const double>(ru.scores).subspan(1));
        out.users.push_back(std::move(ru));
    }
    return out;
}

double hit_rate(std::span<const int> ranks, int k)
{
    if (ranks.empty())
        throw Error("hit_rate: no ranks");
    std::size_t hits = 0;
    for (int r : ranks)
        hits += r <= k ? 1 : 0;
    return double(hits) / double(ranks.size());
}

double ndcg(std::span<const int> ranks, int k)
{
    if (ranks.empty())
        throw Error("ndcg: no ranks");
    double total = 0.0;
    for (int r : ranks)
        if (r <= k)
            total += 1.0 / std::log2(double(r) + 1.0);
    return total / double(ranks.size());
}

double mrr(std::span<const int> ranks)
{
    if (ranks.empty())
        throw Error("mrr: no ranks");
    double total = 0.0;
    for (int r : ranks)
        total += 1.0 / double(r);
    return total / double(ranks.size());
}

double EvalReport::metric(const std::string& name) const
{
    for (const auto& [key, value] : metrics)
        if (key == name)
            return value;
    throw Error("report has no metric '" + name + "'");
}

EvalReport make_report(std::vector<int> ranks, std::vector<std::pair<std::string, std::string>> metadata)
{
    if (ranks.empty())
        throw Error("cannot build a report for an empty user set");
    EvalReport report;
    for (int k : {1, 3, 5})
        report.metrics.emplace_back("HR@" + std::to_string(k), hit_rate(ranks, k));
    for (int k : {1, 3, 5})
        report.metrics.emplace_back("NDCG@" + std::to_string(k), ndcg(ranks, k));
    report.metrics.emplace_back("MRR", mrr(ranks));
    report.metadata = std::move(metadata);
    report.metadata.emplace_back("users", std::to_string(ranks.size()));
    report.ranks = std::move(ranks);
    return report;
}

namespace {

std::string fixed6(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

std::string format_report(const EvalReport& report, ReportFormat format)
{
    if (format == ReportFormat::structured) {
        nlohmann::ordered_json j;
        for (const auto& [k, v] : report.metadata)
            j["metadata"][k] = v;
        for (const auto& [k, v] : report.metrics)
            j["metrics"][k] = fixed6(v);
        return j.dump(2) + "\n";
    }
    std::ostringstream out;
    for (const auto& [k, v] : report.metadata)
        out << "# " << k << '=' << v << '\n';
    for (const auto& [k, v] : report.metrics)
        out << k << '\t' << fixed6(v) << '\n';
    return out.str();
}

EvalReport parse_report_tsv(const std::string& text)
{
    EvalReport report;
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        if (line.rfind("# ", 0) == 0) {
            const auto eq = line.find('=');
            if (eq == std::string::npos)
                throw ParseError("<report>", lineno, "metadata line without '='");
            report.metadata.emplace_back(line.substr(2, eq - 2), line.substr(eq + 1));
            continue;
        }
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError("<report>", lineno, "expected metric<TAB>value");
        report.metrics.emplace_back(line.substr(0, tab), std::stod(line.substr(tab + 1)));
    }
    return report;
}

void emit_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format)
{
    write_file_bytes(path, format_report(report, format));
}

template RankedCandidates rank_users<float>(const SeqModelParams<float>&, const LeaveOneOutSplit&, EvalTarget,
                                            const std::function<bool(ItemIndex)>&);
template RankedCandidates rank_users<double>(const SeqModelParams<double>&, const LeaveOneOutSplit&, EvalTarget,
                                             const std::function<bool(ItemIndex)>&);

} // namespace idp
