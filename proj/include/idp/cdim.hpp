#pragma once

#include "idp/checkpoint.hpp"
#include "idp/dataset.hpp"
#include "idp/matcher.hpp"
#include "idp/types.hpp"

#include <cstdint>
#include <random>
#include <string>
#include <vector>

namespace idp {

enum class Modality { text, image, fused };

Modality parse_modality(const std::string& name);
std::string to_string(Modality m);

/// Frozen per-item vectors from an external encoder, aligned with a store's
/// item index space. Items without a vector have `present[v] == false` and a
/// zero row.
struct TextVectorStore {
    Mat<double> vectors;
    std::vector<bool> present;
    Modality modality = Modality::text;

    int dim() const { return int(vectors.cols()); }
    std::size_t num_items() const { return present.size(); }
    std::size_t num_present() const;

    /// Binds rows of a vector file to the items of `domain` in `store`. Rows
    /// naming unknown items are ignored.
    static TextVectorStore bind(const InteractionStore& store, const std::string& domain,
                                const std::vector<VectorRow>& rows, Modality modality = Modality::text);

    /// Copies present rows of `other` into this store (same item space).
    void merge(const TextVectorStore& other);

    /// Rows of `vectors` for the given items.
    Mat<double> rows(const std::vector<ItemIndex>& items) const;
};

struct AdapterConfig {
    int out_dim = 64;
    double dropout = 0.1;
    double temperature = 0.05;
    Similarity similarity = Similarity::cosine;
};

/// Two affine layers, D -> d_a -> d_a, with GELU and (train-mode) dropout
/// on the hidden activation.
template <typename Scalar>
struct AdapterParams {
    AdapterConfig config;
    Mat<Scalar> w1, b1, w2, b2;

    int input_dim() const { return int(w1.rows()); }

    template <typename F>
    void for_each(F&& f)
    {
        f("adapter.w1", w1);
        f("adapter.b1", b1);
        f("adapter.w2", w2);
        f("adapter.b2", b2);
    }

    std::vector<std::pair<std::string, Mat<Scalar>*>> tensors();
    AdapterParams zeros_like() const;
    bool operator==(const AdapterParams& other) const;
};

template <typename Scalar>
AdapterParams<Scalar> init_adapter(int input_dim, const AdapterConfig& config, std::uint64_t seed);

template <typename Scalar>
struct AdapterCache {
    Mat<Scalar> input, pre, mask, hidden;
};

/// Encodes each row of `raw`. Train mode draws a fresh dropout mask per call.
template <typename Scalar>
Mat<Scalar> encode_rows(const AdapterParams<Scalar>& adapter, const Mat<Scalar>& raw, Mode mode,
                        std::mt19937_64* rng, AdapterCache<Scalar>* cache = nullptr);

template <typename Scalar>
RowVec<Scalar> encode(const AdapterParams<Scalar>& adapter, const RowVec<Scalar>& raw, Mode mode,
                      std::mt19937_64* rng);

/// Accumulates parameter gradients for d(loss)/d(outputs).
template <typename Scalar>
void adapter_backward(const AdapterParams<Scalar>& adapter, const AdapterCache<Scalar>& cache,
                      const Mat<Scalar>& d_out, AdapterParams<Scalar>& grads);

/// In-batch InfoNCE over twin views: for row i the positive is twins.row(i)
/// and the negatives are anchors.row(k), k != i. Returns the batch mean.
template <typename Scalar>
Scalar text_contrastive(const Mat<Scalar>& anchors, const Mat<Scalar>& twins, double temperature,
                        Similarity kind, Mat<Scalar>* d_anchors = nullptr, Mat<Scalar>* d_twins = nullptr);

/// InfoNCE with mined positives: row i*k + j of `positives` is the j-th
/// positive of anchor i; negatives are the other anchors. Mean over all i, j.
template <typename Scalar>
Scalar behavior_contrastive(const Mat<Scalar>& anchors, const Mat<Scalar>& positives, int k, double temperature,
                            Similarity kind, Mat<Scalar>* d_anchors = nullptr, Mat<Scalar>* d_positives = nullptr);

/// Textual loss through the adapter: two train-mode passes over `raw`.
template <typename Scalar>
Scalar text_contrastive_loss(const AdapterParams<Scalar>& adapter, const Mat<Scalar>& raw, std::mt19937_64& rng,
                             AdapterParams<Scalar>* grads = nullptr);

/// Behavior-involved loss through the adapter; `raw_positives` has k rows per
/// anchor row.
template <typename Scalar>
Scalar behavior_contrastive_loss(const AdapterParams<Scalar>& adapter, const Mat<Scalar>& raw,
                                 const Mat<Scalar>& raw_positives, int k, std::mt19937_64& rng,
                                 AdapterParams<Scalar>* grads = nullptr);

/// For each item, its k most similar other items by ID-embedding similarity;
/// ties go to the lower index.
struct BehaviorPositives {
    int k = 0;
    std::vector<std::vector<ItemIndex>> lists;
};

template <typename Scalar>
BehaviorPositives mine_behavior_positives(const Mat<Scalar>& embeddings, int k,
                                          Similarity kind = Similarity::cosine);

void write_positives_tsv(const std::filesystem::path& path, const BehaviorPositives& positives);
BehaviorPositives read_positives_tsv(const std::filesystem::path& path);

struct TuneConfig {
    AdapterConfig adapter;
    int batch_size = 128;
    double learning_rate = 1e-3;
    int max_epochs = 100;
    int patience = 20;
    double holdout_fraction = 0.1;
    std::uint64_t seed = 42;
};

struct TuneHistory {
    std::vector<double> train_loss;
    std::vector<double> holdout_loss; // entry 0 before any update
    int best_epoch = 0;
    bool diverged = false;
};

/// Minimizes text + behavior loss (unit weights) over items 0..n-1 of
/// `vectors`, early-stopping on a held-out item split. `positives.lists[v]`
/// must exist for every item.
template <typename Scalar>
AdapterParams<Scalar> tune_cdim(const Mat<Scalar>& vectors, const BehaviorPositives& positives,
                                const TuneConfig& config, TuneHistory* history = nullptr);

/// Continues tuning from `init` (used with learning rate 0 in tests).
template <typename Scalar>
AdapterParams<Scalar> tune_cdim(const Mat<Scalar>& vectors, const BehaviorPositives& positives,
                                const TuneConfig& config, AdapterParams<Scalar> init, TuneHistory* history);

/// Multi-modal fusion: the adapter map applied to the concatenation
/// [text, image]. A missing image uses a zero image part.
template <typename Scalar>
RowVec<Scalar> fuse_multimodal(const AdapterParams<Scalar>& fusion, const RowVec<Scalar>& text,
                               const RowVec<Scalar>* image, Mode mode, std::mt19937_64* rng);

/// Concatenated [text | image] inputs for every item; missing images are
/// zero-filled and counted.
TextVectorStore concat_modalities(const TextVectorStore& text, const TextVectorStore& image);

template <typename Scalar>
Checkpoint adapter_to_checkpoint(const AdapterParams<Scalar>& adapter);

template <typename Scalar>
AdapterParams<Scalar> adapter_from_checkpoint(const Checkpoint& ck);

template <typename Scalar>
std::uint64_t checksum(const AdapterParams<Scalar>& adapter);

} // namespace idp
