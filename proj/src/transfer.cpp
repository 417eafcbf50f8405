#include "idp/transfer.hpp"

#include "idp/numerics.hpp"

#include <Eigen/Eigenvalues>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <numeric>

namespace idp {

DeploymentMode parse_deployment_mode(const std::string& name)
{
    if (name == "zero-shot")
        return DeploymentMode::zero_shot;
    if (name == "finetune-all")
        return DeploymentMode::finetune_all;
    if (name == "retrain-encoder")
        return DeploymentMode::retrain_encoder;
    throw Error("unknown deployment mode '" + name + "' (expected zero-shot, finetune-all or retrain-encoder)");
}

std::string to_string(DeploymentMode mode)
{
    switch (mode) {
    case DeploymentMode::zero_shot:
        return "zero-shot";
    case DeploymentMode::finetune_all:
        return "finetune-all";
    case DeploymentMode::retrain_encoder:
        return "retrain-encoder";
    }
    return "zero-shot";
}

TextProjection parse_text_projection(const std::string& name)
{
    if (name == "pca")
        return TextProjection::pca;
    if (name == "learned")
        return TextProjection::learned;
    throw Error("unknown text projection '" + name + "' (expected pca or learned)");
}

std::string to_string(TextProjection p)
{
    return p == TextProjection::pca ? "pca" : "learned";
}

PcaModel fit_pca(const Mat<double>& vectors, int q, std::vector<double>* all_eigenvalues)
{
    const Eigen::Index n = vectors.rows();
    const Eigen::Index dim = vectors.cols();
    if (q < 1 || q > dim)
        throw Error("fit_pca: need 1 <= q <= D (q=" + std::to_string(q) + ", D=" + std::to_string(dim) + ")");
    if (n < q + 1)
        throw Error("fit_pca: need at least q + 1 = " + std::to_string(q + 1) + " vectors, got "
                    + std::to_string(n));
    PcaModel pca;
    pca.mean = vectors.colwise().mean();
    const Mat<double> centered = vectors.rowwise() - pca.mean;
    const Mat<double> cov = (centered.transpose() * centered) / double(n - 1);
    Eigen::SelfAdjointEigenSolver<Mat<double>> solver(cov);
    if (solver.info() != Eigen::Success)
        throw Error("fit_pca: eigendecomposition failed");

    // Eigen returns ascending eigenvalues; walk them from the top.
    pca.components.resize(q, dim);
    for (int i = 0; i < q; ++i) {
        const Eigen::Index col = dim - 1 - i;
        RowVec<double> c = solver.eigenvectors().col(col).transpose();
        Eigen::Index arg = 0;
        c.cwiseAbs().maxCoeff(&arg);
        if (c(arg) < 0)
            c = -c;
        pca.components.row(i) = c;
        pca.eigenvalues.push_back(std::max(0.0, solver.eigenvalues()(col)));
    }
    if (all_eigenvalues) {
        all_eigenvalues->clear();
        for (Eigen::Index i = dim - 1; i >= 0; --i)
            all_eigenvalues->push_back(std::max(0.0, solver.eigenvalues()(i)));
    }
    return pca;
}

RowVec<double> project(const PcaModel& pca, const RowVec<double>& v)
{
    if (v.size() != pca.input_dim())
        throw Error("project: vector dimension " + std::to_string(v.size()) + " does not match PCA input "
                    + std::to_string(pca.input_dim()));
    return (v - pca.mean) * pca.components.transpose();
}

Mat<double> project_rows(const PcaModel& pca, const Mat<double>& rows)
{
    if (rows.cols() != pca.input_dim())
        throw Error("project_rows: dimension mismatch");
    return (rows.rowwise() - pca.mean) * pca.components.transpose();
}

std::pair<Mat<double>, Mat<double>> pca_affine(const PcaModel& pca, int out_dim)
{
    if (out_dim < pca.output_dim())
        throw Error("pca_affine: output dimension smaller than the number of components");
    Mat<double> w = Mat<double>::Zero(pca.input_dim(), out_dim);
    w.leftCols(pca.output_dim()) = pca.components.transpose();
    Mat<double> b = -pca.mean * w;
    return {std::move(w), std::move(b)};
}

Checkpoint pca_to_checkpoint(const PcaModel& pca)
{
    Checkpoint ck;
    ck.meta()["kind"] = "pca";
    ck.meta()["covariance"] = "unbiased";
    ck.put<double>("pca.mean", pca.mean);
    ck.put<double>("pca.components", pca.components);
    Mat<double> ev(1, Eigen::Index(pca.eigenvalues.size()));
    for (std::size_t i = 0; i < pca.eigenvalues.size(); ++i)
        ev(0, Eigen::Index(i)) = pca.eigenvalues[i];
    ck.put<double>("pca.eigenvalues", ev);
    return ck;
}

PcaModel pca_from_checkpoint(const Checkpoint& ck)
{
    PcaModel pca;
    pca.components = ck.get<double>("pca.components");
    pca.mean = ck.get<double>("pca.mean", 1, pca.components.cols());
    const Mat<double> ev = ck.get<double>("pca.eigenvalues", 1, pca.components.rows());
    pca.eigenvalues.assign(ev.data(), ev.data() + ev.size());
    return pca;
}

template <typename Scalar>
RowVec<Scalar> compose_input(const RowVec<Scalar>& e_id, const RowVec<Scalar>* t, const Mat<Scalar>& w,
                             const Mat<Scalar>& b)
{
    if (w.cols() != e_id.size() || b.cols() != e_id.size())
        throw Error("compose_input: projection output dimension must equal the ID embedding dimension");
    if (!t)
        return e_id;
    if (t->size() != w.rows())
        throw Error("compose_input: text vector dimension mismatch");
    return e_id + *t * w + b.row(0);
}

namespace {

template <typename Scalar>
void attach_text(SeqModelParams<Scalar>& params, const TextVectorStore& text, Mat<Scalar> w, Mat<Scalar> b)
{
    if (text.num_items() != std::size_t(params.item_embeddings.rows()))
        throw Error("text vectors cover " + std::to_string(text.num_items()) + " items, model has "
                    + std::to_string(params.item_embeddings.rows()));
    Mat<Scalar> present(Eigen::Index(text.num_items()), 1);
    for (std::size_t v = 0; v < text.num_items(); ++v)
        present(Eigen::Index(v), 0) = text.present[v] ? Scalar(1) : Scalar(0);
    const std::size_t missing = text.num_items() - text.num_present();
    if (missing)
        spdlog::warn("{} items have no text vector and use their ID embedding alone", missing);
    attach_text_projection<Scalar>(params, text.vectors.cast<Scalar>(), std::move(w), std::move(b),
                                   std::move(present));
}

} // namespace

template <typename Scalar>
void attach_pca_projection(SeqModelParams<Scalar>& params, const PcaModel& pca, const TextVectorStore& text)
{
    auto [w, b] = pca_affine(pca, params.config.dim);
    attach_text<Scalar>(params, text, w.template cast<Scalar>(), b.template cast<Scalar>());
}

bool is_text_projection(const std::string& tensor)
{
    return tensor.rfind("text.", 0) == 0;
}

template <typename Scalar>
SeqModelParams<Scalar> deploy(const DeployOptions& options, const SeqModelParams<Scalar>& pretrained,
                              const GeneratedEmbeddings<Scalar>& generated, const LeaveOneOutSplit& split,
                              const TextVectorStore* text, TrainHistory* history)
{
    const std::size_t n = split.num_items;
    if (generated.targets.size() != n || std::size_t(generated.embeddings.rows()) != n)
        throw Error("deploy: generated table has " + std::to_string(generated.embeddings.rows())
                    + " rows for " + std::to_string(n) + " downstream items");
    if (generated.embeddings.cols() != pretrained.config.dim)
        throw Error("deploy: generated embeddings have dimension " + std::to_string(generated.embeddings.cols())
                    + ", model expects " + std::to_string(pretrained.config.dim));
    std::vector<bool> seen(n, false);
    for (ItemIndex t : generated.targets) {
        if (t < 0 || std::size_t(t) >= n || seen[std::size_t(t)])
            throw Error("deploy: generated targets must cover every downstream item exactly once");
        seen[std::size_t(t)] = true;
    }

    SeqModelParams<Scalar> params;
    params.config = pretrained.config;
    params.config.num_items = int(n);
    params.item_embeddings.resize(Eigen::Index(n), pretrained.config.dim);
    for (std::size_t i = 0; i < n; ++i)
        params.item_embeddings.row(generated.targets[i]) = generated.embeddings.row(Eigen::Index(i));
    params.position_embeddings = pretrained.position_embeddings;
    params.attention = pretrained.attention;
    params.gru = pretrained.gru;

    if (options.use_text) {
        if (!text)
            throw Error("deploy: text features requested but no downstream vectors were given");
        if (pretrained.has_text()) {
            attach_text<Scalar>(params, *text, pretrained.text_w, pretrained.text_b);
        } else if (options.mode == DeploymentMode::zero_shot) {
            throw Error("deploy: zero-shot with text needs a pre-trained text projection");
        } else {
            std::mt19937_64 rng(options.train.seed ^ 0x7f4a7c159e3779b9ULL);
            Mat<Scalar> w(text->dim(), pretrained.config.dim);
            fill_xavier(w, rng);
            attach_text<Scalar>(params, *text, std::move(w), Mat<Scalar>::Zero(1, pretrained.config.dim));
        }
    }

    if (options.mode == DeploymentMode::zero_shot) {
        if (history)
            *history = TrainHistory{};
        return params;
    }
    if (options.mode == DeploymentMode::retrain_encoder)
        reinit_encoder(params, options.encoder, options.train.seed);

    std::vector<ItemIndex> catalog(n);
    std::iota(catalog.begin(), catalog.end(), 0);
    TrainHistory h = train_bpr(params, split, catalog, options.train);
    if (history)
        *history = std::move(h);
    return params;
}

#define IDP_INSTANTIATE_TRANSFER(S)                                                                              \
    template RowVec<S> compose_input<S>(const RowVec<S>&, const RowVec<S>*, const Mat<S>&, const Mat<S>&);       \
    template void attach_pca_projection<S>(SeqModelParams<S>&, const PcaModel&, const TextVectorStore&);         \
    template SeqModelParams<S> deploy<S>(const DeployOptions&, const SeqModelParams<S>&,                         \
                                         const GeneratedEmbeddings<S>&, const LeaveOneOutSplit&,                 \
                                         const TextVectorStore*, TrainHistory*);

IDP_INSTANTIATE_TRANSFER(float)
IDP_INSTANTIATE_TRANSFER(double)

} // namespace idp
