#pragma once

#include "idp/dataset.hpp"
#include "idp/seqmodel.hpp"

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace idp {

struct TrainConfig {
    int batch_size = 256;
    double learning_rate = 1e-3;
    int max_epochs = 200;
    /// Early stop after this many epochs without a validation NDCG@5 gain.
    int patience = 20;
    std::uint64_t seed = 42;
    /// Tensor-name filter; empty means every tensor trains.
    std::function<bool(const std::string&)> trainable;
    /// Stop as soon as validation NDCG@5 reaches this value (disabled when < 0).
    double stop_at_valid_ndcg = -1.0;
    bool log_progress = false;
};

struct TrainHistory {
    /// Entry 0 is measured before any update.
    std::vector<double> valid_ndcg5;
    std::vector<double> train_loss;
    int best_epoch = 0;
    double best_valid_ndcg5 = 0.0;
    bool diverged = false;

    /// First epoch whose validation NDCG@5 is >= `threshold`.
    std::optional<int> epochs_to(double threshold) const;
};

/// Next-item BPR examples from each user's train prefix.
std::vector<BprExample> make_examples(const LeaveOneOutSplit& split, int max_len);

/// Adam on mean BPR loss with one negative per positive, drawn uniformly from
/// `catalog` excluding the positive. Tracks validation NDCG@5 every epoch,
/// stops early, and leaves `params` at the best epoch. Deterministic given
/// `config.seed`.
template <typename Scalar>
TrainHistory train_bpr(SeqModelParams<Scalar>& params,
                       const LeaveOneOutSplit& split,
                       const std::vector<ItemIndex>& catalog,
                       const TrainConfig& config);

/// Initializes a model over `store`'s catalog and trains it.
template <typename Scalar>
SeqModelParams<Scalar> pretrain(const InteractionStore& store,
                                const LeaveOneOutSplit& split,
                                SeqModelConfig hyper,
                                const TrainConfig& config,
                                TrainHistory* history = nullptr);

} // namespace idp
