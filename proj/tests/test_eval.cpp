#include "idp/eval.hpp"

#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

using namespace idp;

namespace {

LeaveOneOutSplit toy_split(int users, std::uint64_t seed)
{
    std::mt19937_64 rng(seed);
    std::vector<std::vector<ItemIndex>> seqs;
    for (int u = 0; u < users; ++u) {
        std::vector<ItemIndex> s;
        for (int t = 0; t < 5; ++t)
            s.push_back(ItemIndex(rng() % 150));
        seqs.push_back(s);
    }
    std::vector<ItemIndex> catalog(150);
    std::iota(catalog.begin(), catalog.end(), 0);
    return split_leave_one_out(seqs, catalog, seed);
}

SeqModelParams<double> toy_model(std::uint64_t seed)
{
    SeqModelConfig c;
    c.num_items = 150;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.max_len = 10;
    return init_params<double>(c, seed);
}

} // namespace

TEST_CASE("metrics on a worked example")
{
    const std::vector<int> ranks{1, 2, 11};
    CHECK(hit_rate(ranks, 5) == doctest::Approx(2.0 / 3.0));
    CHECK(hit_rate(ranks, 1) == doctest::Approx(1.0 / 3.0));
    CHECK(ndcg(ranks, 5) == doctest::Approx((1.0 + 1.0 / std::log2(3.0)) / 3.0).epsilon(1e-12));
    CHECK(std::abs(ndcg(ranks, 5) - 0.543646) < 1e-5);
    CHECK(mrr(ranks) == doctest::Approx(0.530303).epsilon(1e-6));
    CHECK(ndcg(ranks, 1) == doctest::Approx(1.0 / 3.0));

    const std::vector<int> top{1, 1};
    CHECK(hit_rate(top, 1) == 1.0);
    CHECK(ndcg(top, 3) == 1.0);
    CHECK(mrr(top) == 1.0);
}

TEST_CASE("metrics grow with the cutoff")
{
    std::mt19937_64 rng(3);
    std::vector<int> ranks(200);
    for (auto& r : ranks)
        r = 1 + int(rng() % 100);
    double hr = 0, nd = 0;
    for (int k = 1; k <= 100; ++k) {
        CHECK(hit_rate(ranks, k) >= hr);
        CHECK(ndcg(ranks, k) >= nd);
        CHECK(ndcg(ranks, k) <= hit_rate(ranks, k));
        hr = hit_rate(ranks, k);
        nd = ndcg(ranks, k);
    }
    CHECK(hr == 1.0);
}

TEST_CASE("ties rank the target pessimistically")
{
    const std::vector<double> neg{0.5, 0.5, 0.1, 0.9};
    CHECK(pessimistic_rank(0.5, neg) == 4);
    CHECK(pessimistic_rank(1.0, neg) == 1);
    CHECK(pessimistic_rank(0.0, neg) == 5);
    const std::vector<double> all_equal(99, 0.0);
    CHECK(pessimistic_rank(0.0, all_equal) == 100);
}

TEST_CASE("random scores give HR@5 near 5%")
{
    std::mt19937_64 rng(7);
    std::uniform_real_distribution<double> unif(0.0, 1.0);
    std::vector<int> ranks;
    for (int u = 0; u < 2000; ++u) {
        std::vector<double> neg(99);
        for (auto& x : neg)
            x = unif(rng);
        ranks.push_back(pessimistic_rank(unif(rng), neg));
    }
    CHECK(std::abs(hit_rate(ranks, 5) - 0.05) <= 0.02);
}

TEST_CASE("ranking agrees with a full sort of the candidate scores")
{
    const auto split = toy_split(30, 2);
    const auto model = toy_model(4);
    for (EvalTarget target : {EvalTarget::valid, EvalTarget::test}) {
        const auto ranked = rank_users(model, split, target);
        REQUIRE(ranked.users.size() == split.users.size());
        const Mat<double> table = item_table(model);
        for (std::size_t i = 0; i < ranked.users.size(); ++i) {
            const auto& su = split.users[i];
            std::vector<ItemIndex> history = su.train;
            if (target == EvalTarget::test)
                history.push_back(su.valid);
            const ItemIndex goal = target == EvalTarget::test ? su.test : su.valid;
            const RowVec<double> h = forward(model, history);
            std::vector<std::pair<double, int>> scored{{score<double>(h, goal, table), 0}};
            for (ItemIndex v : su.negatives)
                scored.push_back({score<double>(h, v, table), 1});
            // Descending score; the target sorts last within a tie.
            std::sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) {
                return a.first != b.first ? a.first > b.first : a.second > b.second;
            });
            const int rank = int(std::find_if(scored.begin(), scored.end(), [](const auto& p) { return p.second == 0; })
                                 - scored.begin())
                             + 1;
            CHECK(ranked.users[i].rank == rank);
            CHECK(ranked.users[i].target == goal);
            CHECK(ranked.users[i].candidates.size() == 100);
        }
    }
}

TEST_CASE("a constant model ranks every target last")
{
    const auto split = toy_split(10, 5);
    auto model = toy_model(1);
    model.item_embeddings.setZero();
    for (int r : rank_users(model, split, EvalTarget::test).ranks())
        CHECK(r == 100);
}

TEST_CASE("keep filters users by target")
{
    const auto split = toy_split(40, 6);
    const auto model = toy_model(1);
    const auto ranked = rank_users<double>(model, split, EvalTarget::test, [](ItemIndex v) { return v % 2 == 0; });
    std::size_t expected = 0;
    for (const auto& u : split.users)
        expected += u.test % 2 == 0;
    CHECK(ranked.users.size() == expected);
    for (const auto& u : ranked.users)
        CHECK(u.target % 2 == 0);
}

TEST_CASE("reports")
{
    CHECK_THROWS_AS(make_report({}), Error);
    const EvalReport report = make_report({1, 2, 11}, {{"mode", "zero-shot"}, {"seed", "42"}});
    CHECK(report.metric("HR@5") == doctest::Approx(2.0 / 3.0));
    CHECK(report.metric("MRR") == doctest::Approx(0.530303).epsilon(1e-6));
    CHECK_THROWS_AS(report.metric("HR@50"), Error);

    const std::string tsv = format_report(report, ReportFormat::tsv);
    CHECK(tsv == format_report(make_report({1, 2, 11}, {{"mode", "zero-shot"}, {"seed", "42"}}), ReportFormat::tsv));
    const EvalReport back = parse_report_tsv(tsv);
    REQUIRE(back.metrics.size() == report.metrics.size());
    for (std::size_t i = 0; i < back.metrics.size(); ++i) {
        CHECK(back.metrics[i].first == report.metrics[i].first);
        CHECK(std::abs(back.metrics[i].second - report.metrics[i].second) <= 5e-7);
    }
    CHECK(back.metadata == report.metadata);

    testing::TempDir dir("report");
    emit_report(report, dir / "a.json", ReportFormat::structured);
    emit_report(report, dir / "b.json", ReportFormat::structured);
    CHECK(read_file_bytes(dir / "a.json") == read_file_bytes(dir / "b.json"));
    CHECK(read_file_bytes(dir / "a.json").find("\"HR@5\"") != std::string::npos);
}
