#pragma once

#include "idp/checkpoint.hpp"
#include "idp/types.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

namespace idp {

enum class EncoderKind { causal_attention, gated_recurrent };

EncoderKind parse_encoder_kind(const std::string& name);
std::string to_string(EncoderKind kind);

struct SeqModelConfig {
    int num_items = 0;
    int dim = 64;
    int layers = 2;
    int heads = 2;
    int max_len = 50;
    /// Hidden width of the position-wise feed-forward network; 0 means `dim`.
    int ffn_dim = 0;
    double dropout = 0.2;
    double layer_norm_eps = 1e-6;
    EncoderKind encoder = EncoderKind::causal_attention;

    int hidden() const { return ffn_dim > 0 ? ffn_dim : dim; }
    void validate() const;
};

template <typename Scalar>
struct AttentionLayer {
    // Head i uses columns [i*d/h, (i+1)*d/h) of wq, wk, wv.
    Mat<Scalar> wq, wk, wv, wo;
    Mat<Scalar> w1, b1, w2, b2;
    Mat<Scalar> ln1_gain, ln1_bias, ln2_gain, ln2_bias;

    template <typename F>
    void for_each(const std::string& prefix, F&& f)
    {
        f(prefix + "wq", wq);
        f(prefix + "wk", wk);
        f(prefix + "wv", wv);
        f(prefix + "wo", wo);
        f(prefix + "w1", w1);
        f(prefix + "b1", b1);
        f(prefix + "w2", w2);
        f(prefix + "b2", b2);
        f(prefix + "ln1_gain", ln1_gain);
        f(prefix + "ln1_bias", ln1_bias);
        f(prefix + "ln2_gain", ln2_gain);
        f(prefix + "ln2_bias", ln2_bias);
    }
};

template <typename Scalar>
struct GruCell {
    Mat<Scalar> wz, uz, bz;
    Mat<Scalar> wr, ur, br;
    Mat<Scalar> wh, uh, bh;

    template <typename F>
    void for_each(const std::string& prefix, F&& f)
    {
        f(prefix + "wz", wz);
        f(prefix + "uz", uz);
        f(prefix + "bz", bz);
        f(prefix + "wr", wr);
        f(prefix + "ur", ur);
        f(prefix + "br", br);
        f(prefix + "wh", wh);
        f(prefix + "uh", uh);
        f(prefix + "bh", bh);
    }
};

/// Trainable state of the sequential recommender.
///
/// Item representations are `E[v] + text_features[v] * text_w + text_b` when
/// a text projection is attached, otherwise `E[v]`. `text_features` is data,
/// not a trainable tensor.
template <typename Scalar>
struct SeqModelParams {
    SeqModelConfig config;
    Mat<Scalar> item_embeddings;     // |V| x d
    Mat<Scalar> position_embeddings; // T_max x d
    std::vector<AttentionLayer<Scalar>> attention;
    std::vector<GruCell<Scalar>> gru;
    Mat<Scalar> text_w; // D x d, empty when unused
    Mat<Scalar> text_b; // 1 x d
    Mat<Scalar> text_features; // |V| x D
    Mat<Scalar> text_present;  // |V| x 1, 0 for items without a vector

    bool has_text() const { return text_w.size() > 0; }

    /// Visits trainable tensors in a fixed order with stable names.
    template <typename F>
    void for_each(F&& f)
    {
        f("E", item_embeddings);
        f("P", position_embeddings);
        for_each_encoder(f);
        if (has_text()) {
            f("text.w", text_w);
            f("text.b", text_b);
        }
    }

    template <typename F>
    void for_each_encoder(F&& f)
    {
        for (std::size_t l = 0; l < attention.size(); ++l)
            attention[l].for_each("enc.attn" + std::to_string(l) + ".", f);
        for (std::size_t l = 0; l < gru.size(); ++l)
            gru[l].for_each("enc.gru" + std::to_string(l) + ".", f);
    }

    std::vector<std::pair<std::string, Mat<Scalar>*>> tensors();

    /// Same shapes, all zeros; text_features shared by value.
    SeqModelParams zeros_like() const;
    void set_zero();

    bool operator==(const SeqModelParams& other) const;
};

/// Random initialization of every tensor for `config`.
template <typename Scalar>
SeqModelParams<Scalar> init_params(const SeqModelConfig& config, std::uint64_t seed);

/// Fresh encoder and position table, keeping item embeddings (and text projection).
template <typename Scalar>
void reinit_encoder(SeqModelParams<Scalar>& params, EncoderKind kind, std::uint64_t seed);

/// Attaches an affine text projection; `w` is D x d and `b` is 1 x d. Items
/// whose `present` entry is 0 keep their bare ID embedding. An empty
/// `present` marks every item as having a vector.
template <typename Scalar>
void attach_text_projection(SeqModelParams<Scalar>& params, Mat<Scalar> features, Mat<Scalar> w, Mat<Scalar> b,
                            Mat<Scalar> present = {});

/// Effective item representation table (|V| x d).
template <typename Scalar>
Mat<Scalar> item_table(const SeqModelParams<Scalar>& params);

/// Intermediate values of one sequence pass, consumed by `backward_sequence`.
template <typename Scalar>
struct SequenceCache;

template <typename Scalar>
struct SequenceCacheDeleter {
    void operator()(SequenceCache<Scalar>* p) const;
};

template <typename Scalar>
using SequenceCachePtr = std::unique_ptr<SequenceCache<Scalar>, SequenceCacheDeleter<Scalar>>;

/// Keeps the most recent `max_len` items.
std::vector<ItemIndex> truncate_sequence(const std::vector<ItemIndex>& seq, int max_len);

/// Runs the embedding layer and encoder over `seq` (length <= T_max) and
/// returns one output row per position. `table` is `item_table(params)`.
/// In train mode dropout masks are drawn from `rng`.
template <typename Scalar>
Mat<Scalar> encode_sequence(const SeqModelParams<Scalar>& params,
                            const Mat<Scalar>& table,
                            const std::vector<ItemIndex>& seq,
                            Mode mode,
                            std::mt19937_64* rng,
                            SequenceCachePtr<Scalar>* cache);

/// Backpropagates d(loss)/d(outputs) through one cached pass. Gradients are
/// accumulated into `grads` (encoder and position tensors) and into
/// `table_grad` (rows of the item representation table).
template <typename Scalar>
void backward_sequence(const SeqModelParams<Scalar>& params,
                       const SequenceCache<Scalar>& cache,
                       const Mat<Scalar>& d_outputs,
                       SeqModelParams<Scalar>& grads,
                       Mat<Scalar>& table_grad);

/// Folds a table gradient into E and the text projection gradients.
template <typename Scalar>
void accumulate_table_grad(const SeqModelParams<Scalar>& params, const Mat<Scalar>& table_grad,
                           SeqModelParams<Scalar>& grads);

/// User representation: final-layer output at the last position (inference
/// mode). Sequences longer than T_max are truncated to the most recent items.
template <typename Scalar>
RowVec<Scalar> forward(const SeqModelParams<Scalar>& params, const std::vector<ItemIndex>& seq);

template <typename Scalar>
RowVec<Scalar> forward(const SeqModelParams<Scalar>& params, const Mat<Scalar>& table,
                       const std::vector<ItemIndex>& seq);

template <typename Scalar>
Scalar score(const RowVec<Scalar>& user, ItemIndex item, const Mat<Scalar>& table)
{
    return user.dot(table.row(item));
}

/// -log sigmoid(user . (e_pos - e_neg)).
template <typename Scalar>
Scalar bpr_loss(const RowVec<Scalar>& user, ItemIndex pos, ItemIndex neg, const Mat<Scalar>& table);

/// One next-item training example: outputs at positions 0..n-1 of `input`
/// are scored against `positives[i]` and `negatives[i]`.
struct BprExample {
    std::vector<ItemIndex> input;
    std::vector<ItemIndex> positives;
    std::vector<ItemIndex> negatives;
};

/// Mean BPR loss over every (position, pair) in the batch; when `grads` is
/// non-null, the gradient of that mean is accumulated into it.
template <typename Scalar>
Scalar bpr_batch(const SeqModelParams<Scalar>& params,
                 const std::vector<BprExample>& batch,
                 Mode mode,
                 std::mt19937_64* rng,
                 SeqModelParams<Scalar>* grads);

template <typename Scalar>
Checkpoint to_checkpoint(const SeqModelParams<Scalar>& params);

template <typename Scalar>
SeqModelParams<Scalar> from_checkpoint(const Checkpoint& ck);

/// Replaces the item embedding table with `E` from `ck`; throws naming "E" on a
/// dimension mismatch.
template <typename Scalar>
void load_embeddings(SeqModelParams<Scalar>& params, const Checkpoint& ck);

/// Replaces the position table and encoder tensors with those in `ck`.
template <typename Scalar>
void load_encoder(SeqModelParams<Scalar>& params, const Checkpoint& ck);

SeqModelConfig config_from_checkpoint(const Checkpoint& ck);

/// FNV-1a over every trainable tensor's bytes; used for determinism checks.
template <typename Scalar>
std::uint64_t checksum(const SeqModelParams<Scalar>& params);

} // namespace idp
