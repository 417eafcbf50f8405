#include "idp/transfer.hpp"

#include "support.hpp"

#include <numeric>

using namespace idp;

namespace {

struct Fixture {
    LeaveOneOutSplit split;
    SeqModelParams<double> pretrained;
    GeneratedEmbeddings<double> generated;
};

Fixture make_fixture()
{
    std::mt19937_64 rng(3);
    std::vector<std::vector<ItemIndex>> seqs;
    for (int u = 0; u < 80; ++u) {
        std::vector<ItemIndex> s;
        const ItemIndex start = ItemIndex(rng() % 110);
        for (int t = 0; t < 6; ++t)
            s.push_back((start + t) % 110);
        seqs.push_back(s);
    }
    std::vector<ItemIndex> catalog(110);
    std::iota(catalog.begin(), catalog.end(), 0);
    Fixture f;
    f.split = split_leave_one_out(seqs, catalog, 1);

    SeqModelConfig c;
    c.num_items = 40;
    c.dim = 8;
    c.layers = 1;
    c.heads = 2;
    c.max_len = 8;
    f.pretrained = init_params<double>(c, 5);
    f.generated.embeddings = testing::random_matrix(110, 8, rng, 0.1);
    f.generated.targets = catalog;
    f.generated.provenance.resize(110);
    return f;
}

} // namespace

TEST_CASE("PCA recovers the direction of points on a line")
{
    Mat<double> pts(5, 2);
    for (int i = 0; i < 5; ++i) {
        pts(i, 0) = 1.0 + 3.0 * (i - 2);
        pts(i, 1) = -2.0 + 4.0 * (i - 2);
    }
    std::vector<double> all;
    const PcaModel pca = fit_pca(pts, 1, &all);
    CHECK(pca.components(0, 0) == doctest::Approx(0.6));
    CHECK(pca.components(0, 1) == doctest::Approx(0.8));
    // Projections are 5 * (i - 2); their unbiased variance is 25 * 10 / 4.
    CHECK(pca.eigenvalues[0] == doctest::Approx(62.5));
    CHECK(all[1] == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(pca.mean(0) == doctest::Approx(1.0));
    const RowVec<double> p = project(pca, pts.row(4));
    CHECK(p(0) == doctest::Approx(10.0));
}

TEST_CASE("a full-rank PCA is an isometry")
{
    std::mt19937_64 rng(1);
    const Mat<double> x = testing::random_matrix(20, 5, rng);
    const PcaModel pca = fit_pca(x, 5);
    const Mat<double> y = project_rows(pca, x);
    for (int i = 0; i < 20; ++i)
        for (int j = 0; j < 20; ++j)
            CHECK((y.row(i) - y.row(j)).norm() == doctest::Approx((x.row(i) - x.row(j)).norm()).epsilon(1e-10));
    CHECK((pca.components * pca.components.transpose() - Mat<double>::Identity(5, 5)).norm() < 1e-10);
    for (std::size_t i = 1; i < pca.eigenvalues.size(); ++i)
        CHECK(pca.eigenvalues[i] <= pca.eigenvalues[i - 1]);
}

TEST_CASE("reconstruction error equals n-1 times the discarded eigenvalues")
{
    std::mt19937_64 rng(2);
    const Mat<double> x = testing::random_matrix(30, 6, rng);
    std::vector<double> all;
    const PcaModel pca = fit_pca(x, 2, &all);
    const Mat<double> y = project_rows(pca, x);
    double err = 0;
    for (int i = 0; i < 30; ++i) {
        const RowVec<double> back = y.row(i) * pca.components + pca.mean;
        err += (x.row(i) - back).squaredNorm();
    }
    const double discarded = std::accumulate(all.begin() + 2, all.end(), 0.0);
    CHECK(err == doctest::Approx(29.0 * discarded).epsilon(1e-9));
}

TEST_CASE("PCA input validation and persistence")
{
    std::mt19937_64 rng(4);
    const Mat<double> x = testing::random_matrix(10, 3, rng);
    CHECK_THROWS_AS(fit_pca(x, 4), Error);
    CHECK_THROWS_AS(fit_pca(x.topRows(3), 3), Error);

    const PcaModel pca = fit_pca(x, 2);
    const PcaModel back = pca_from_checkpoint(Checkpoint::deserialize(pca_to_checkpoint(pca).serialize()));
    CHECK(back.mean == pca.mean);
    CHECK(back.components == pca.components);
    CHECK(back.eigenvalues == pca.eigenvalues);

    const auto [w, b] = pca_affine(pca, 5);
    CHECK(w.rows() == 3);
    CHECK(w.cols() == 5);
    CHECK(w.rightCols(3).isZero());
    const RowVec<double> t = x.row(3);
    const RowVec<double> affine = t * w + b;
    CHECK((affine.head(2) - project(pca, t)).norm() < 1e-12);
}

TEST_CASE("composed input")
{
    const RowVec<double> e = (RowVec<double>(2) << 0.5, -1.0).finished();
    const RowVec<double> zero_t = RowVec<double>::Zero(3);
    const Mat<double> w = Mat<double>::Ones(3, 2);
    const Mat<double> b = Mat<double>::Zero(1, 2);
    CHECK(compose_input<double>(e, nullptr, w, b) == e);
    CHECK(compose_input<double>(e, &zero_t, w, b) == e);
    const RowVec<double> zero_e = RowVec<double>::Zero(2);
    const RowVec<double> t = (RowVec<double>(3) << 1, 2, 3).finished();
    const RowVec<double> got = compose_input<double>(zero_e, &t, Mat<double>::Zero(3, 2), b);
    CHECK(got.isZero());
}

TEST_CASE("deployment modes")
{
    Fixture f = make_fixture();
    DeployOptions opt;

    SUBCASE("zero-shot keeps the pre-trained encoder and installs E^T bitwise")
    {
        const auto model = deploy(opt, f.pretrained, f.generated, f.split);
        CHECK(model.item_embeddings == f.generated.embeddings);
        CHECK(model.position_embeddings == f.pretrained.position_embeddings);
        CHECK(model.attention[0].wq == f.pretrained.attention[0].wq);
        CHECK(model.attention[0].ln2_gain == f.pretrained.attention[0].ln2_gain);
        CHECK(model.config.num_items == 110);
    }
    SUBCASE("fine-tuning for zero epochs equals zero-shot")
    {
        const auto zero = deploy(opt, f.pretrained, f.generated, f.split);
        opt.mode = DeploymentMode::finetune_all;
        opt.train.max_epochs = 0;
        CHECK(deploy(opt, f.pretrained, f.generated, f.split) == zero);
    }
    SUBCASE("fine-tuning updates every tensor")
    {
        opt.mode = DeploymentMode::finetune_all;
        opt.train.max_epochs = 4;
        opt.train.patience = 100;
        opt.train.batch_size = 16;
        opt.train.learning_rate = 1e-2;
        TrainHistory h;
        const auto model = deploy(opt, f.pretrained, f.generated, f.split, nullptr, &h);
        CHECK(model.item_embeddings != f.generated.embeddings);
        CHECK(model.attention[0].wq != f.pretrained.attention[0].wq);
        CHECK(h.train_loss.size() == 5);
        CHECK(h.best_epoch > 0);
    }
    SUBCASE("retrain-encoder starts from a fresh encoder")
    {
        opt.mode = DeploymentMode::retrain_encoder;
        opt.encoder = EncoderKind::gated_recurrent;
        opt.train.max_epochs = 0;
        const auto model = deploy(opt, f.pretrained, f.generated, f.split);
        CHECK(model.config.encoder == EncoderKind::gated_recurrent);
        CHECK(model.item_embeddings == f.generated.embeddings);
        CHECK(model.position_embeddings != f.pretrained.position_embeddings);
        CHECK(model.attention.empty());
    }
    SUBCASE("missing rows are rejected")
    {
        f.generated.embeddings.conservativeResize(100, Eigen::NoChange);
        f.generated.targets.resize(100);
        CHECK_THROWS_AS(deploy(opt, f.pretrained, f.generated, f.split), Error);
    }
    SUBCASE("zero-shot with text needs a pre-trained projection")
    {
        opt.use_text = true;
        TextVectorStore text;
        text.vectors = Mat<double>::Ones(110, 3);
        text.present.assign(110, true);
        CHECK_THROWS_AS(deploy(opt, f.pretrained, f.generated, f.split, &text), Error);

        std::mt19937_64 rng(6);
        TextVectorStore source_text;
        source_text.vectors = testing::random_matrix(40, 3, rng);
        source_text.present.assign(40, true);
        const PcaModel pca = fit_pca(source_text.vectors, 3);
        auto with_text = f.pretrained;
        attach_pca_projection(with_text, pca, source_text);
        const auto model = deploy(opt, with_text, f.generated, f.split, &text);
        CHECK(model.text_w == with_text.text_w);
        CHECK(model.text_features.rows() == 110);
    }
}

TEST_CASE("mode names")
{
    for (DeploymentMode m : {DeploymentMode::zero_shot, DeploymentMode::finetune_all, DeploymentMode::retrain_encoder})
        CHECK(parse_deployment_mode(to_string(m)) == m);
    CHECK_THROWS_AS(parse_deployment_mode("warm"), Error);
    CHECK(is_text_projection("text.w"));
    CHECK(!is_text_projection("E"));
}
