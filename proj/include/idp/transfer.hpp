#pragma once

#include "idp/cdim.hpp"
#include "idp/checkpoint.hpp"
#include "idp/dataset.hpp"
#include "idp/matcher.hpp"
#include "idp/seqmodel.hpp"
#include "idp/train.hpp"

#include <string>
#include <utility>
#include <vector>

namespace idp {

enum class DeploymentMode { zero_shot, finetune_all, retrain_encoder };

DeploymentMode parse_deployment_mode(const std::string& name);
std::string to_string(DeploymentMode mode);

enum class TextProjection { pca, learned };

TextProjection parse_text_projection(const std::string& name);
std::string to_string(TextProjection p);

/// Principal components of a set of row vectors.
///
/// The covariance uses the unbiased n - 1 normalizer, so for a projection onto
/// q components the total squared reconstruction error over the fitted rows
/// equals (n - 1) times the sum of the discarded eigenvalues.
struct PcaModel {
    RowVec<double> mean;
    Mat<double> components; // q x D, orthonormal rows
    std::vector<double> eigenvalues; // q values, nonincreasing

    int input_dim() const { return int(components.cols()); }
    int output_dim() const { return int(components.rows()); }
};

/// Requires at least q + 1 rows and q <= D. Each component's largest-magnitude
/// entry is made positive so fits are reproducible.
PcaModel fit_pca(const Mat<double>& vectors, int q, std::vector<double>* all_eigenvalues = nullptr);

RowVec<double> project(const PcaModel& pca, const RowVec<double>& v);
Mat<double> project_rows(const PcaModel& pca, const Mat<double>& rows);

/// The projection as an affine map `t W + b` with W of shape D x out_dim. When
/// out_dim exceeds the number of components the extra columns are zero.
std::pair<Mat<double>, Mat<double>> pca_affine(const PcaModel& pca, int out_dim);

Checkpoint pca_to_checkpoint(const PcaModel& pca);
PcaModel pca_from_checkpoint(const Checkpoint& ck);

/// e_id + t W + b, or e_id alone when `t` is null.
template <typename Scalar>
RowVec<Scalar> compose_input(const RowVec<Scalar>& e_id, const RowVec<Scalar>* t, const Mat<Scalar>& w,
                             const Mat<Scalar>& b);

/// Attaches a frozen PCA projection of `text` (zero-padded to d) to the model.
template <typename Scalar>
void attach_pca_projection(SeqModelParams<Scalar>& params, const PcaModel& pca, const TextVectorStore& text);

/// True for the text projection tensors.
bool is_text_projection(const std::string& tensor);

struct DeployOptions {
    DeploymentMode mode = DeploymentMode::zero_shot;
    /// Add projected text vectors to the ID embeddings.
    bool use_text = false;
    /// Backend of the fresh encoder in retrain-encoder mode.
    EncoderKind encoder = EncoderKind::causal_attention;
    TrainConfig train;
};

/// Builds the downstream model from pre-trained parameters and the generated
/// table (one row per downstream item, targets 0..n-1).
///
/// zero-shot returns E^T with the pre-trained P and encoder unchanged.
/// finetune-all then trains every tensor on the downstream split.
/// retrain-encoder draws a fresh encoder and position table first.
/// `text` supplies the downstream vectors when `use_text` is set.
template <typename Scalar>
SeqModelParams<Scalar> deploy(const DeployOptions& options, const SeqModelParams<Scalar>& pretrained,
                              const GeneratedEmbeddings<Scalar>& generated, const LeaveOneOutSplit& split,
                              const TextVectorStore* text = nullptr, TrainHistory* history = nullptr);

} // namespace idp
