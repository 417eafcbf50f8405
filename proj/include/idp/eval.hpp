#pragma once

#include "idp/dataset.hpp"
#include "idp/seqmodel.hpp"

#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace idp {

struct RankedUser {
    UserIndex user = 0;
    ItemIndex target = 0;
    /// Target first, then the negatives.
    std::vector<ItemIndex> candidates;
    std::vector<double> scores;
    /// 1-based; equal-scored negatives rank ahead of the target.
    int rank = 0;
};

struct RankedCandidates {
    std::vector<RankedUser> users;

    std::vector<int> ranks() const;
};

enum class EvalTarget { valid, test };

/// Rank of the target among `negatives` with pessimistic tie handling.
int pessimistic_rank(double target_score, std::span<const double> negative_scores);

/// Scores each user's target and negatives against the forward representation
/// of their history: the train prefix for the validation target, the train
/// prefix plus the validation item for the test target. `keep` optionally
/// restricts the users by target item.
template <typename Scalar>
RankedCandidates rank_users(const SeqModelParams<Scalar>& params,
                            const LeaveOneOutSplit& split,
                            EvalTarget target,
                            const std::function<bool(ItemIndex)>& keep = {});

double hit_rate(std::span<const int> ranks, int k);
double ndcg(std::span<const int> ranks, int k);
double mrr(std::span<const int> ranks);

struct EvalReport {
    /// Metric name and value, in emission order.
    std::vector<std::pair<std::string, double>> metrics;
    std::vector<int> ranks;
    std::vector<std::pair<std::string, std::string>> metadata;

    double metric(const std::string& name) const;
};

/// HR@{1,3,5}, NDCG@{1,3,5} and MRR. Throws on an empty rank list.
EvalReport make_report(std::vector<int> ranks, std::vector<std::pair<std::string, std::string>> metadata = {});

enum class ReportFormat { tsv, structured };

std::string format_report(const EvalReport& report, ReportFormat format);
/// Parses the TSV form (metrics and metadata; ranks are not part of it).
EvalReport parse_report_tsv(const std::string& text);
void emit_report(const EvalReport& report, const std::filesystem::path& path, ReportFormat format);

} // namespace idp
