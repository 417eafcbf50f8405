#include "idp/cdim.hpp"
#include "idp/numerics.hpp"

#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

using namespace idp;

namespace {

AdapterConfig adapter_config(int out_dim, double dropout, Similarity kind = Similarity::cosine)
{
    AdapterConfig c;
    c.out_dim = out_dim;
    c.dropout = dropout;
    c.temperature = 0.5;
    c.similarity = kind;
    return c;
}

// -log( e^{l0} / sum_j e^{lj} ) in long double.
double info_nce_ref(const std::vector<long double>& logits)
{
    long double denom = 0;
    for (long double l : logits)
        denom += std::exp(l);
    return double(std::log(denom) - logits[0]);
}

double cosine(const RowVec<double>& a, const RowVec<double>& b)
{
    return a.dot(b) / (a.norm() * b.norm());
}

// Three well separated clusters of raw vectors.
Mat<double> clustered_vectors(int per_cluster, int dim, std::mt19937_64& rng, std::vector<int>* labels)
{
    const Mat<double> centers = testing::random_matrix(3, dim, rng, 1.0);
    Mat<double> out(3 * per_cluster, dim);
    for (int c = 0; c < 3; ++c)
        for (int i = 0; i < per_cluster; ++i) {
            out.row(c * per_cluster + i) = centers.row(c) + testing::random_matrix(1, dim, rng, 0.2);
            labels->push_back(c);
        }
    return out;
}

} // namespace

TEST_CASE("inference encoding is deterministic and dropout only acts in training")
{
    std::mt19937_64 rng(1);
    const Mat<double> raw = testing::random_matrix(6, 5, rng);
    const auto a = init_adapter<double>(5, adapter_config(4, 0.0), 7);
    std::mt19937_64 r1(3), r2(4);
    CHECK(encode_rows(a, raw, Mode::infer, nullptr) == encode_rows(a, raw, Mode::infer, nullptr));
    CHECK(encode_rows(a, raw, Mode::train, &r1) == encode_rows(a, raw, Mode::infer, nullptr));
    CHECK(encode_rows(a, raw, Mode::train, &r1) == encode_rows(a, raw, Mode::train, &r2));

    const auto b = init_adapter<double>(5, adapter_config(16, 0.5), 7);
    std::mt19937_64 r3(3);
    const Mat<double> v1 = encode_rows(b, raw, Mode::train, &r3);
    const Mat<double> v2 = encode_rows(b, raw, Mode::train, &r3);
    CHECK(v1 != v2);
    CHECK(encode_rows(b, raw, Mode::infer, nullptr) == encode_rows(b, raw, Mode::infer, nullptr));
}

TEST_CASE("a zero input follows the bias path")
{
    const auto a = init_adapter<double>(5, adapter_config(4, 0.0), 2);
    AdapterParams<double> p = a;
    std::mt19937_64 rng(5);
    p.b1 = testing::random_matrix(1, 4, rng);
    p.b2 = testing::random_matrix(1, 4, rng);
    const RowVec<double> out = encode<double>(p, RowVec<double>::Zero(5), Mode::infer, nullptr);
    RowVec<double> expected = p.b2;
    for (int j = 0; j < 4; ++j)
        for (int t = 0; t < 4; ++t)
            expected(t) += gelu(p.b1(0, j)) * p.w2(j, t);
    CHECK((out - expected).norm() < 1e-12);
}

TEST_CASE("adapter rejects bad hyper-parameters")
{
    CHECK_THROWS_AS(init_adapter<double>(5, [] { auto c = adapter_config(4, 0.0); c.temperature = 0; return c; }(), 1),
                    Error);
    CHECK_THROWS_AS(init_adapter<double>(5, adapter_config(4, 1.0), 1), Error);
}

TEST_CASE("mined positives exclude the item itself and break ties by index")
{
    Mat<double> e(5, 2);
    e << 1, 0, 1, 0, 0, 1, 1, 0, -1, 0;
    const auto pos = mine_behavior_positives(e, 2);
    CHECK(pos.lists[0] == std::vector<ItemIndex>{1, 3});
    CHECK(pos.lists[1] == std::vector<ItemIndex>{0, 3});
    CHECK(pos.lists[3] == std::vector<ItemIndex>{0, 1});
    CHECK(pos.lists[2] == std::vector<ItemIndex>{0, 1});
    CHECK_THROWS_AS(mine_behavior_positives(e, 5), Error);
    CHECK_THROWS_AS(mine_behavior_positives(e, 0), Error);
}

TEST_CASE("mined positives agree with a brute-force sort")
{
    std::mt19937_64 rng(11);
    for (Similarity kind : {Similarity::cosine, Similarity::dot}) {
        const Mat<double> e = testing::random_matrix(40, 6, rng);
        const auto pos = mine_behavior_positives(e, 7, kind);
        for (int v = 0; v < 40; ++v) {
            std::vector<std::pair<double, int>> all;
            for (int u = 0; u < 40; ++u)
                if (u != v) {
                    const double s = kind == Similarity::cosine ? cosine(e.row(v), e.row(u)) : e.row(v).dot(e.row(u));
                    all.push_back({-s, u});
                }
            std::sort(all.begin(), all.end());
            std::vector<ItemIndex> expected;
            for (int j = 0; j < 7; ++j)
                expected.push_back(all[std::size_t(j)].second);
            CHECK(pos.lists[std::size_t(v)] == expected);
        }
    }
}

TEST_CASE("positives survive a TSV round trip")
{
    testing::TempDir dir("pos");
    std::mt19937_64 rng(2);
    const auto pos = mine_behavior_positives(testing::random_matrix(12, 3, rng), 4);
    write_positives_tsv(dir / "p.tsv", pos);
    const auto back = read_positives_tsv(dir / "p.tsv");
    CHECK(back.k == 4);
    CHECK(back.lists == pos.lists);
}

TEST_CASE("text loss examples")
{
    SUBCASE("identical embeddings give ln N")
    {
        const Mat<double> same = Mat<double>::Ones(5, 3);
        CHECK(text_contrastive<double>(same, same, 0.1, Similarity::cosine) == doctest::Approx(std::log(5.0)));
    }
    SUBCASE("orthogonal anchors with matching twins approach zero")
    {
        const Mat<double> eye = Mat<double>::Identity(4, 4);
        const double loss = text_contrastive<double>(eye, eye, 0.01, Similarity::cosine);
        CHECK(loss >= 0.0);
        CHECK(loss < 1e-30);
    }
    SUBCASE("N=2 by hand")
    {
        Mat<double> a(2, 2), t(2, 2);
        a << 1, 0, 0.6, 0.8;
        t << 0.8, 0.6, 0, 1;
        const double tau = 0.5;
        const double l0 = std::log1p(std::exp((0.6 - 0.8) / tau));
        const double l1 = std::log1p(std::exp((0.6 - 0.8) / tau));
        CHECK(text_contrastive<double>(a, t, tau, Similarity::cosine) == doctest::Approx((l0 + l1) / 2).epsilon(1e-12));
    }
    SUBCASE("a batch of one is an error")
    {
        const Mat<double> one = Mat<double>::Ones(1, 3);
        CHECK_THROWS_AS(text_contrastive<double>(one, one, 0.1, Similarity::cosine), Error);
    }
}

TEST_CASE("behavior loss averages over every anchor-positive pair")
{
    std::mt19937_64 rng(4);
    const int n = 4, k = 3;
    const Mat<double> a = testing::random_matrix(n, 5, rng);
    const Mat<double> p = testing::random_matrix(n * k, 5, rng);
    const double tau = 0.2;
    double expected = 0;
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < k; ++j) {
            std::vector<long double> logits{cosine(a.row(i), p.row(i * k + j)) / tau};
            for (int m = 0; m < n; ++m)
                if (m != i)
                    logits.push_back(cosine(a.row(i), a.row(m)) / tau);
            expected += info_nce_ref(logits);
        }
    expected /= n * k;
    CHECK(behavior_contrastive<double>(a, p, k, tau, Similarity::cosine) == doctest::Approx(expected).epsilon(1e-10));

    const Mat<double> same = Mat<double>::Ones(3, 2);
    CHECK(behavior_contrastive<double>(same, Mat<double>::Ones(6, 2), 2, 0.3, Similarity::cosine)
          == doctest::Approx(std::log(3.0)));
    CHECK_THROWS_AS(behavior_contrastive<double>(a, p, 2, tau, Similarity::cosine), Error);
}

TEST_CASE("sharper temperatures lower the loss when positives win")
{
    Mat<double> a(3, 2), t(3, 2);
    a << 1, 0, 0, 1, -1, 0.2;
    t = a;
    double previous = 1e9;
    for (double tau : {2.0, 1.0, 0.5, 0.2, 0.1, 0.05}) {
        const double loss = text_contrastive<double>(a, t, tau, Similarity::cosine);
        CHECK(loss < previous);
        previous = loss;
    }
}

TEST_CASE("contrastive gradients through the adapter match central differences")
{
    for (Similarity kind : {Similarity::cosine, Similarity::dot}) {
        for (double dropout : {0.0, 0.3}) {
            CAPTURE(dropout);
            auto adapter = init_adapter<double>(5, adapter_config(4, dropout, kind), 3);
            std::mt19937_64 data(9);
            const Mat<double> raw = testing::random_matrix(4, 5, data);
            const Mat<double> raw_pos = testing::random_matrix(8, 5, data);

            const auto text_loss = [&] {
                std::mt19937_64 rng(17);
                return text_contrastive_loss(adapter, raw, rng);
            };
            const auto behavior_loss = [&] {
                std::mt19937_64 rng(17);
                return behavior_contrastive_loss(adapter, raw, raw_pos, 2, rng);
            };
            auto text_grads = adapter.zeros_like();
            auto behavior_grads = adapter.zeros_like();
            {
                std::mt19937_64 rng(17);
                text_contrastive_loss(adapter, raw, rng, &text_grads);
            }
            {
                std::mt19937_64 rng(17);
                behavior_contrastive_loss(adapter, raw, raw_pos, 2, rng, &behavior_grads);
            }
            const auto params = adapter.tensors();
            const auto tg = text_grads.tensors();
            const auto bg = behavior_grads.tensors();
            for (std::size_t i = 0; i < params.size(); ++i) {
                CAPTURE(params[i].first);
                CHECK(testing::relative_error(*tg[i].second, testing::numeric_gradient(*params[i].second, text_loss))
                      < 1e-4);
                CHECK(testing::relative_error(*bg[i].second,
                                              testing::numeric_gradient(*params[i].second, behavior_loss))
                      < 1e-4);
            }
        }
    }
}

TEST_CASE("fusion gradients match central differences")
{
    auto fusion = init_adapter<double>(6, adapter_config(4, 0.0), 5);
    std::mt19937_64 data(3);
    const Mat<double> text = testing::random_matrix(4, 3, data);
    const Mat<double> image = testing::random_matrix(4, 3, data);
    Mat<double> fused(4, 6);
    fused << text, image;
    const auto loss = [&] {
        std::mt19937_64 rng(1);
        return text_contrastive_loss(fusion, fused, rng);
    };
    auto grads = fusion.zeros_like();
    {
        std::mt19937_64 rng(1);
        text_contrastive_loss(fusion, fused, rng, &grads);
    }
    const auto params = fusion.tensors();
    const auto g = grads.tensors();
    for (std::size_t i = 0; i < params.size(); ++i)
        CHECK(testing::relative_error(*g[i].second, testing::numeric_gradient(*params[i].second, loss)) < 1e-4);

    const RowVec<double> t0 = text.row(0), i0 = image.row(0);
    const RowVec<double> via_fuse = fuse_multimodal<double>(fusion, t0, &i0, Mode::infer, nullptr);
    CHECK((via_fuse - encode<double>(fusion, fused.row(0), Mode::infer, nullptr)).norm() < 1e-14);
    RowVec<double> zero_image(6);
    zero_image << t0, RowVec<double>::Zero(3);
    CHECK(fuse_multimodal<double>(fusion, t0, nullptr, Mode::infer, nullptr)
          == encode<double>(fusion, zero_image, Mode::infer, nullptr));
}

TEST_CASE("fused retrieval with a duplicated modality keeps the text neighbours")
{
    std::mt19937_64 rng(21);
    const Mat<double> text = testing::random_matrix(80, 8, rng);
    const auto t_adapter = init_adapter<double>(8, adapter_config(16, 0.0), 4);
    AdapterParams<double> f_adapter = init_adapter<double>(16, adapter_config(16, 0.0), 4);
    f_adapter.w1 << 0.5 * t_adapter.w1, 0.5 * t_adapter.w1;
    f_adapter.b1 = t_adapter.b1;
    f_adapter.w2 = t_adapter.w2;
    f_adapter.b2 = t_adapter.b2;
    Mat<double> fused(80, 16);
    fused << text, text;
    const Mat<double> zt = encode_rows<double>(t_adapter, text, Mode::infer, nullptr);
    const Mat<double> zf = encode_rows<double>(f_adapter, fused, Mode::infer, nullptr);
    double overlap = 0;
    for (int v = 0; v < 80; ++v) {
        const auto a = top_m(similarities<double>(zt.row(v), zt, Similarity::cosine), 10, ItemIndex(v));
        const auto b = top_m(similarities<double>(zf.row(v), zf, Similarity::cosine), 10, ItemIndex(v));
        std::set<ItemIndex> sa, sb;
        for (const auto& nb : a)
            sa.insert(nb.index);
        for (const auto& nb : b)
            sb.insert(nb.index);
        std::vector<ItemIndex> common;
        std::set_intersection(sa.begin(), sa.end(), sb.begin(), sb.end(), std::back_inserter(common));
        overlap += double(common.size()) / 10.0;
    }
    CHECK(overlap / 80 >= 0.9);
}

TEST_CASE("tuning with a zero learning rate leaves the adapter unchanged")
{
    std::vector<int> labels;
    std::mt19937_64 rng(6);
    const Mat<double> raw = clustered_vectors(10, 6, rng, &labels);
    const auto pos = mine_behavior_positives(raw, 3);
    TuneConfig tc;
    tc.adapter = adapter_config(8, 0.1);
    tc.batch_size = 8;
    tc.learning_rate = 0.0;
    tc.max_epochs = 3;
    const auto init = init_adapter<double>(6, tc.adapter, 1);
    TuneHistory h;
    CHECK(tune_cdim<double>(raw, pos, tc, init, &h) == init);
    CHECK(h.holdout_loss.size() >= 2);
}

TEST_CASE("tuning is deterministic and separates clusters")
{
    std::vector<int> labels;
    std::mt19937_64 rng(7);
    const Mat<double> raw = clustered_vectors(20, 6, rng, &labels);
    BehaviorPositives pos;
    pos.k = 3;
    for (int v = 0; v < 60; ++v) {
        std::vector<ItemIndex> same;
        for (int u = 0; u < 60 && same.size() < 3; ++u)
            if (u != v && labels[std::size_t(u)] == labels[std::size_t(v)])
                same.push_back(u);
        pos.lists.push_back(same);
    }
    TuneConfig tc;
    tc.adapter = adapter_config(8, 0.1);
    tc.batch_size = 16;
    tc.learning_rate = 1e-2;
    tc.max_epochs = 20;
    tc.holdout_fraction = 0.2;
    TuneHistory h;
    const auto a = tune_cdim<double>(raw, pos, tc, &h);
    const auto b = tune_cdim<double>(raw, pos, tc);
    CHECK(a == b);
    CHECK(checksum(a) == checksum(b));
    CHECK(h.holdout_loss[std::size_t(h.best_epoch)] <= h.holdout_loss.front());

    const Mat<double> z = encode_rows<double>(a, raw, Mode::infer, nullptr);
    double intra = 0, inter = 0;
    int n_intra = 0, n_inter = 0;
    for (int u = 0; u < 60; ++u)
        for (int v = u + 1; v < 60; ++v) {
            const double c = cosine(z.row(u), z.row(v));
            if (labels[std::size_t(u)] == labels[std::size_t(v)]) {
                intra += c;
                ++n_intra;
            } else {
                inter += c;
                ++n_inter;
            }
        }
    CHECK(intra / n_intra > inter / n_inter);
}

TEST_CASE("adapter checkpoints round-trip")
{
    const auto a = init_adapter<float>(7, adapter_config(5, 0.2, Similarity::dot), 8);
    const auto back = adapter_from_checkpoint<float>(Checkpoint::deserialize(adapter_to_checkpoint(a).serialize()));
    CHECK(back == a);
    CHECK(back.config.similarity == Similarity::dot);
    CHECK(back.config.temperature == a.config.temperature);
}

TEST_CASE("vector stores bind by item name and mark missing items")
{
    const auto store = InteractionStore::from_interactions(
        {{"u", "a", 1, "d"}, {"u", "b", 2, "d"}, {"u", "c", 3, "d"}});
    const auto text = TextVectorStore::bind(store, "d", {{"c", {1, 2}}, {"a", {3, 4}}, {"zz", {5, 6}}});
    CHECK(text.num_present() == 2);
    CHECK(text.present == std::vector<bool>{true, false, true});
    CHECK(text.vectors.row(1).isZero());
    CHECK(text.vectors(2, 1) == 2.0);

    const auto image = TextVectorStore::bind(store, "d", {{"a", {9}}}, Modality::image);
    const auto fused = concat_modalities(text, image);
    CHECK(fused.dim() == 3);
    CHECK(fused.vectors(0, 2) == 9.0);
    CHECK(fused.vectors(2, 2) == 0.0);
    CHECK(fused.present == text.present);
}
