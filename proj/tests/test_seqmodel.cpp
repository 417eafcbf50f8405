#include "idp/numerics.hpp"
#include "idp/seqmodel.hpp"
#include "idp/train.hpp"

#include "support.hpp"

#include <cmath>
#include <numeric>

using namespace idp;

namespace {

SeqModelConfig small_config(EncoderKind kind, int items = 7, int dim = 4)
{
    SeqModelConfig c;
    c.num_items = items;
    c.dim = dim;
    c.layers = 1;
    c.heads = 2;
    c.max_len = 5;
    c.dropout = 0.0;
    c.encoder = kind;
    return c;
}

std::vector<BprExample> random_batch(std::mt19937_64& rng, int items, int max_len, int count)
{
    std::vector<BprExample> batch;
    for (int b = 0; b < count; ++b) {
        BprExample ex;
        const int n = 1 + int(rng() % std::uint64_t(max_len));
        for (int t = 0; t < n; ++t) {
            ex.input.push_back(ItemIndex(rng() % std::uint64_t(items)));
            const ItemIndex pos = ItemIndex(rng() % std::uint64_t(items));
            ItemIndex neg = ItemIndex(rng() % std::uint64_t(items));
            if (neg == pos)
                neg = (neg + 1) % items;
            ex.positives.push_back(pos);
            ex.negatives.push_back(neg);
        }
        batch.push_back(ex);
    }
    return batch;
}

// Largest per-tensor relative error between analytic and central-difference
// gradients of the mean BPR loss.
double bpr_gradient_error(SeqModelParams<double>& params, const std::vector<BprExample>& batch, std::string* worst)
{
    SeqModelParams<double> grads = params.zeros_like();
    bpr_batch(params, batch, Mode::infer, nullptr, &grads);
    const auto analytic = grads.tensors();
    const auto tensors = params.tensors();
    double max_err = 0.0;
    for (std::size_t i = 0; i < tensors.size(); ++i) {
        const Mat<double> numeric = testing::numeric_gradient(
            *tensors[i].second, [&] { return bpr_batch<double>(params, batch, Mode::infer, nullptr, nullptr); });
        const double err = testing::relative_error(*analytic[i].second, numeric);
        if (err > max_err) {
            max_err = err;
            *worst = tensors[i].first;
        }
    }
    return max_err;
}

double gelu_ref(double x)
{
    return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0)));
}

// Layer norm of a 2-vector, written out scalar by scalar.
void layer_norm2(const double in[2], const double gain[2], const double bias[2], double eps, double out[2])
{
    const double mean = (in[0] + in[1]) / 2;
    const double var = ((in[0] - mean) * (in[0] - mean) + (in[1] - mean) * (in[1] - mean)) / 2;
    for (int j = 0; j < 2; ++j)
        out[j] = (in[j] - mean) / std::sqrt(var + eps) * gain[j] + bias[j];
}

} // namespace

TEST_CASE("single-position attention returns the value vector")
{
    std::mt19937_64 rng(1);
    Mat<double> s = testing::random_matrix(1, 1, rng);
    causal_softmax_rows(s);
    CHECK(s(0, 0) == 1.0);
}

TEST_CASE("equal attention logits give uniform weights and rows sum to one")
{
    Mat<double> s = Mat<double>::Constant(4, 4, 0.3);
    causal_softmax_rows(s);
    for (int i = 0; i < 4; ++i) {
        for (int j = 0; j <= i; ++j)
            CHECK(s(i, j) == doctest::Approx(1.0 / (i + 1)).epsilon(1e-12));
        for (int j = i + 1; j < 4; ++j)
            CHECK(s(i, j) == 0.0);
    }
    std::mt19937_64 rng(2);
    Mat<double> r = testing::random_matrix(6, 6, rng, 5.0);
    causal_softmax_rows(r);
    for (int i = 0; i < 6; ++i)
        CHECK(std::abs(r.row(i).sum() - 1.0) < 1e-6);
}

TEST_CASE("d=2 attention layer matches a scalar hand computation")
{
    SeqModelConfig c;
    c.num_items = 3;
    c.dim = 2;
    c.layers = 1;
    c.heads = 1;
    c.max_len = 4;
    c.dropout = 0.0;
    SeqModelParams<double> p = init_params<double>(c, 9);
    p.item_embeddings << 0.5, -0.2, 0.1, 0.9, -0.7, 0.3;
    p.position_embeddings << 0.05, 0.01, -0.03, 0.02, 0.0, 0.0, 0.0, 0.0;
    auto& l = p.attention[0];
    l.wq << 0.6, -0.1, 0.2, 0.4;
    l.wk << -0.3, 0.5, 0.7, 0.1;
    l.wv << 0.2, 0.3, -0.4, 0.8;
    l.wo << 1.1, -0.2, 0.3, 0.9;
    l.w1 << 0.5, -0.6, 0.25, 0.4;
    l.b1 << 0.1, -0.05;
    l.w2 << -0.3, 0.7, 0.6, 0.2;
    l.b2 << 0.02, -0.01;
    l.ln1_gain << 1.2, 0.8;
    l.ln1_bias << 0.1, -0.1;
    l.ln2_gain << 0.9, 1.1;
    l.ln2_bias << -0.05, 0.05;
    const std::vector<ItemIndex> seq{2, 0};

    // Scalar reference.
    const auto at = [](const Mat<double>& m, int r, int col) { return m(r, col); };
    double h0[2][2];
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            h0[i][j] = at(p.item_embeddings, seq[std::size_t(i)], j) + at(p.position_embeddings, i, j);
    const auto matvec = [](const double x[2], const Mat<double>& w, double out[2]) {
        for (int j = 0; j < 2; ++j)
            out[j] = x[0] * w(0, j) + x[1] * w(1, j);
    };
    double q[2][2], k[2][2], v[2][2];
    for (int i = 0; i < 2; ++i) {
        matvec(h0[i], l.wq, q[i]);
        matvec(h0[i], l.wk, k[i]);
        matvec(h0[i], l.wv, v[i]);
    }
    double out[2][2];
    for (int i = 0; i < 2; ++i) {
        double logits[2], weights[2] = {0, 0};
        double denom = 0;
        for (int j = 0; j <= i; ++j) {
            logits[j] = (q[i][0] * k[j][0] + q[i][1] * k[j][1]) / std::sqrt(2.0);
            denom += std::exp(logits[j]);
        }
        for (int j = 0; j <= i; ++j)
            weights[j] = std::exp(logits[j]) / denom;
        double ctx[2] = {0, 0};
        for (int j = 0; j <= i; ++j)
            for (int t = 0; t < 2; ++t)
                ctx[t] += weights[j] * v[j][t];
        double mh[2], res[2], a[2];
        matvec(ctx, l.wo, mh);
        for (int t = 0; t < 2; ++t)
            res[t] = h0[i][t] + mh[t];
        const double g1[2] = {l.ln1_gain(0, 0), l.ln1_gain(0, 1)}, b1[2] = {l.ln1_bias(0, 0), l.ln1_bias(0, 1)};
        layer_norm2(res, g1, b1, c.layer_norm_eps, a);
        double hid[2], f[2], res2[2];
        matvec(a, l.w1, hid);
        for (int t = 0; t < 2; ++t)
            hid[t] = gelu_ref(hid[t] + l.b1(0, t));
        matvec(hid, l.w2, f);
        for (int t = 0; t < 2; ++t)
            res2[t] = a[t] + f[t] + l.b2(0, t);
        const double g2[2] = {l.ln2_gain(0, 0), l.ln2_gain(0, 1)}, b2[2] = {l.ln2_bias(0, 0), l.ln2_bias(0, 1)};
        layer_norm2(res2, g2, b2, c.layer_norm_eps, out[i]);
    }

    const Mat<double> got = encode_sequence<double>(p, item_table(p), seq, Mode::infer, nullptr, nullptr);
    for (int i = 0; i < 2; ++i)
        for (int j = 0; j < 2; ++j)
            CHECK(got(i, j) == doctest::Approx(out[i][j]).epsilon(1e-12));
    const RowVec<double> user = forward(p, seq);
    CHECK(user(0) == doctest::Approx(out[1][0]).epsilon(1e-12));
    CHECK(user(1) == doctest::Approx(out[1][1]).epsilon(1e-12));
}

TEST_CASE("outputs at a position ignore later items")
{
    for (EncoderKind kind : {EncoderKind::causal_attention, EncoderKind::gated_recurrent}) {
        SeqModelConfig c = small_config(kind, 20, 8);
        c.layers = 2;
        c.max_len = 12;
        const auto p = init_params<double>(c, 5);
        const Mat<double> table = item_table(p);
        std::mt19937_64 rng(3);
        for (int trial = 0; trial < 30; ++trial) {
            std::vector<ItemIndex> seq(2 + rng() % 10);
            for (auto& v : seq)
                v = ItemIndex(rng() % 20);
            const std::size_t cut = 1 + rng() % (seq.size() - 1);
            auto other = seq;
            for (std::size_t t = cut; t < other.size(); ++t)
                other[t] = ItemIndex(rng() % 20);
            const Mat<double> a = encode_sequence<double>(p, table, seq, Mode::infer, nullptr, nullptr);
            const Mat<double> b = encode_sequence<double>(p, table, other, Mode::infer, nullptr, nullptr);
            CHECK(a.topRows(Eigen::Index(cut)) == b.topRows(Eigen::Index(cut)));
        }
    }
}

TEST_CASE("BPR gradients match central differences for both encoders")
{
    for (EncoderKind kind : {EncoderKind::causal_attention, EncoderKind::gated_recurrent}) {
        CAPTURE(to_string(kind));
        for (std::uint64_t seed = 0; seed < 4; ++seed) {
            SeqModelParams<double> p = init_params<double>(small_config(kind), seed);
            std::mt19937_64 rng(seed + 100);
            const auto batch = random_batch(rng, 7, 4, 3);
            std::string worst;
            const double err = bpr_gradient_error(p, batch, &worst);
            CAPTURE(worst);
            CHECK(err < 1e-4);
        }
    }
}

TEST_CASE("BPR gradients include the text projection")
{
    SeqModelParams<double> p = init_params<double>(small_config(EncoderKind::causal_attention), 3);
    std::mt19937_64 rng(8);
    Mat<double> present = Mat<double>::Ones(7, 1);
    present(4, 0) = 0.0;
    attach_text_projection<double>(p, testing::random_matrix(7, 3, rng), testing::random_matrix(3, 4, rng, 0.3),
                                   testing::random_matrix(1, 4, rng, 0.3), present);
    const auto batch = random_batch(rng, 7, 4, 3);
    std::string worst;
    CHECK(bpr_gradient_error(p, batch, &worst) < 1e-4);
    CAPTURE(worst);
}

TEST_CASE("items without a text vector keep their bare ID embedding")
{
    SeqModelParams<double> p = init_params<double>(small_config(EncoderKind::causal_attention), 3);
    std::mt19937_64 rng(8);
    Mat<double> present = Mat<double>::Ones(7, 1);
    present(2, 0) = 0.0;
    attach_text_projection<double>(p, Mat<double>::Zero(7, 3), testing::random_matrix(3, 4, rng),
                                   testing::random_matrix(1, 4, rng), present);
    const Mat<double> table = item_table(p);
    CHECK(table.row(2) == p.item_embeddings.row(2));
    CHECK(table.row(1) == p.item_embeddings.row(1) + p.text_b);
}

TEST_CASE("score and bpr_loss")
{
    Mat<double> table(3, 2);
    table << 1, 0, 0, 1, 3, 4;
    const RowVec<double> zero = RowVec<double>::Zero(2);
    for (int v = 0; v < 3; ++v)
        CHECK(score(zero, v, table) == 0.0);
    const RowVec<double> e0 = table.row(0);
    CHECK(score(e0, 0, table) == 1.0);
    const RowVec<double> scaled = 2.5 * RowVec<double>(table.row(2));
    CHECK(score(scaled, 2, table) == doctest::Approx(2.5 * score<double>(table.row(2), 2, table)));

    Mat<double> same(2, 2);
    same << 1, 1, 1, 1;
    CHECK(bpr_loss<double>(RowVec<double>::Ones(2), 0, 1, same) == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    Mat<double> far(2, 1);
    far << 1000, -1000;
    CHECK(bpr_loss<double>(RowVec<double>::Ones(1), 0, 1, far) < 1e-300);
    Mat<double> gap(2, 1);
    gap << 0, 20;
    const long double ref = std::log1p(std::exp(20.0L));
    const double got = bpr_loss<double>(RowVec<double>::Ones(1), 0, 1, gap);
    CHECK(std::isfinite(got));
    CHECK(std::abs(got - double(ref)) < 1e-12);
    CHECK(neg_log_sigmoid(-1000.0) == doctest::Approx(1000.0));
}

TEST_CASE("forward truncates long sequences and rejects empty ones")
{
    const auto p = init_params<double>(small_config(EncoderKind::causal_attention), 1);
    const std::vector<ItemIndex> longer{0, 1, 2, 3, 4, 5, 6, 0};
    const std::vector<ItemIndex> tail(longer.end() - 5, longer.end());
    CHECK(forward(p, longer) == forward(p, tail));
    CHECK_THROWS_AS(forward(p, std::vector<ItemIndex>{}), Error);
}

TEST_CASE("pre-training a toy store lowers the loss and is deterministic")
{
    std::vector<std::vector<ItemIndex>> seqs;
    std::mt19937_64 rng(4);
    for (int u = 0; u < 20; ++u) {
        std::vector<ItemIndex> s;
        ItemIndex v = ItemIndex(rng() % 120);
        for (int t = 0; t < 8; ++t) {
            s.push_back(v);
            v = (v + 1 + ItemIndex(rng() % 2)) % 120;
        }
        seqs.push_back(s);
    }
    std::vector<ItemIndex> catalog(120);
    std::iota(catalog.begin(), catalog.end(), 0);
    const auto split = split_leave_one_out(seqs, catalog, 1);
    SeqModelConfig c = small_config(EncoderKind::causal_attention, 120, 8);
    c.max_len = 10;
    c.dropout = 0.1;
    TrainConfig tc;
    tc.max_epochs = 50;
    tc.patience = 1000;
    tc.batch_size = 8;
    tc.learning_rate = 1e-2;

    auto a = init_params<float>(c, 1);
    const TrainHistory h = train_bpr(a, split, catalog, tc);
    REQUIRE(h.train_loss.size() == 51);
    CHECK(h.train_loss.back() < h.train_loss[1]);

    auto b = init_params<float>(c, 1);
    train_bpr(b, split, catalog, tc);
    CHECK(checksum(a) == checksum(b));
}

TEST_CASE("checkpoints round-trip and support partial loads")
{
    testing::TempDir dir("ckpt");
    SeqModelConfig c = small_config(EncoderKind::causal_attention);
    const auto a = init_params<float>(c, 1);
    to_checkpoint(a).save(dir / "a.ckpt");
    const auto back = from_checkpoint<float>(Checkpoint::load(dir / "a.ckpt"));
    CHECK(back == a);
    CHECK(checksum(back) == checksum(a));

    SUBCASE("encoder from one checkpoint and embeddings from another")
    {
        SeqModelConfig cb = c;
        cb.num_items = 11;
        const auto b = init_params<float>(cb, 2);
        auto mixed = from_checkpoint<float>(to_checkpoint(b));
        load_encoder(mixed, Checkpoint::load(dir / "a.ckpt"));
        CHECK(mixed.item_embeddings == b.item_embeddings);
        CHECK(mixed.attention[0].wq == a.attention[0].wq);
        CHECK(mixed.position_embeddings == a.position_embeddings);
        CHECK(forward(mixed, std::vector<ItemIndex>{10, 3}).size() == 4);
    }
    SUBCASE("dimension mismatch names E")
    {
        SeqModelConfig wide = c;
        wide.dim = 6;
        auto w = init_params<float>(wide, 3);
        CHECK_THROWS_WITH_AS(load_embeddings(w, Checkpoint::load(dir / "a.ckpt")),
                             doctest::Contains("'E'"), Error);
    }
    SUBCASE("a foreign file is rejected by its magic")
    {
        std::string bytes = read_file_bytes(dir / "a.ckpt");
        bytes[7] = '2';
        CHECK_THROWS_WITH_AS(Checkpoint::deserialize(bytes), doctest::Contains("magic"), Error);
    }
    SUBCASE("both element types survive")
    {
        const auto d = init_params<double>(c, 4);
        CHECK(from_checkpoint<double>(Checkpoint::deserialize(to_checkpoint(d).serialize())) == d);
    }
}
