#include "idp/train.hpp"

#include "idp/eval.hpp"
#include "idp/optim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <numeric>

namespace idp {

std::optional<int> TrainHistory::epochs_to(double threshold) const
{
    for (std::size_t e = 0; e < valid_ndcg5.size(); ++e)
        if (valid_ndcg5[e] >= threshold)
            return int(e);
    return std::nullopt;
}

std::vector<BprExample> make_examples(const LeaveOneOutSplit& split, int max_len)
{
    std::vector<BprExample> out;
    std::size_t truncated = 0;
    for (const auto& us : split.users) {
        if (us.train.size() < 2)
            continue;
        std::vector<ItemIndex> seq = us.train;
        if (int(seq.size()) > max_len + 1) {
            seq.erase(seq.begin(), seq.end() - (max_len + 1));
            ++truncated;
        }
        BprExample ex;
        ex.input.assign(seq.begin(), seq.end() - 1);
        ex.positives.assign(seq.begin() + 1, seq.end());
        ex.negatives.resize(ex.positives.size());
        out.push_back(std::move(ex));
    }
    if (truncated)
        spdlog::info("truncated {} training sequences to the most recent {} items", truncated, max_len);
    return out;
}

namespace {

template <typename Scalar>
double valid_ndcg5(const SeqModelParams<Scalar>& params, const LeaveOneOutSplit& split)
{
    const auto ranked = rank_users(params, split, EvalTarget::valid);
    if (ranked.users.empty())
        return 0.0;
    return ndcg(ranked.ranks(), 5);
}

} // namespace

template <typename Scalar>
TrainHistory train_bpr(SeqModelParams<Scalar>& params,
                       const LeaveOneOutSplit& split,
                       const std::vector<ItemIndex>& catalog,
                       const TrainConfig& config)
{
    if (catalog.size() < 2)
        throw Error("train_bpr: catalog needs at least two items");
    if (config.batch_size < 1)
        throw Error("train_bpr: batch size must be positive");
    std::vector<BprExample> examples = make_examples(split, params.config.max_len);
    if (examples.empty())
        throw Error("train_bpr: no user has a training prefix of length >= 2");

    std::mt19937_64 sample_rng(config.seed);
    std::mt19937_64 dropout_rng(config.seed ^ 0x9e3779b97f4a7c15ULL);
    std::uniform_int_distribution<std::size_t> pick(0, catalog.size() - 1);
    Adam<Scalar> adam({config.learning_rate});

    TrainHistory history;
    history.valid_ndcg5.push_back(valid_ndcg5(params, split));
    history.train_loss.push_back(std::nan(""));
    history.best_valid_ndcg5 = history.valid_ndcg5[0];
    SeqModelParams<Scalar> best = params;
    int since_best = 0;

    std::vector<std::size_t> order(examples.size());
    std::iota(order.begin(), order.end(), 0);
    SeqModelParams<Scalar> grads = params.zeros_like();

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        if (config.stop_at_valid_ndcg >= 0.0 && history.valid_ndcg5.back() >= config.stop_at_valid_ndcg)
            break;
        std::shuffle(order.begin(), order.end(), sample_rng);
        for (auto& ex : examples)
            for (std::size_t t = 0; t < ex.positives.size(); ++t) {
                ItemIndex neg;
                do {
                    neg = catalog[pick(sample_rng)];
                } while (neg == ex.positives[t]);
                ex.negatives[t] = neg;
            }

        double loss_sum = 0.0;
        std::size_t batches = 0;
        bool finite = true;
        for (std::size_t start = 0; start < order.size(); start += std::size_t(config.batch_size)) {
            const std::size_t end = std::min(order.size(), start + std::size_t(config.batch_size));
            std::vector<BprExample> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i)
                batch.push_back(examples[order[i]]);
            grads.set_zero();
            const Scalar loss = bpr_batch(params, batch, Mode::train, &dropout_rng, &grads);
            if (!std::isfinite(double(loss))) {
                finite = false;
                break;
            }
            adam.step(params.tensors(), grads.tensors(), config.trainable);
            loss_sum += double(loss);
            ++batches;
        }
        if (!finite) {
            spdlog::warn("training diverged at epoch {}; restoring the best finite parameters", epoch);
            history.diverged = true;
            break;
        }

        const double ndcg5 = valid_ndcg5(params, split);
        history.train_loss.push_back(loss_sum / double(batches));
        history.valid_ndcg5.push_back(ndcg5);
        if (config.log_progress)
            spdlog::info("epoch {:3d}  loss {:.5f}  valid NDCG@5 {:.4f}", epoch, history.train_loss.back(), ndcg5);
        if (ndcg5 > history.best_valid_ndcg5) {
            history.best_valid_ndcg5 = ndcg5;
            history.best_epoch = epoch;
            best = params;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }
    params = std::move(best);
    return history;
}

template <typename Scalar>
SeqModelParams<Scalar> pretrain(const InteractionStore& store,
                                const LeaveOneOutSplit& split,
                                SeqModelConfig hyper,
                                const TrainConfig& config,
                                TrainHistory* history)
{
    if (store.num_items() == 0)
        throw Error("pretrain: empty store");
    hyper.num_items = int(store.num_items());
    SeqModelParams<Scalar> params = init_params<Scalar>(hyper, config.seed);
    std::vector<ItemIndex> catalog(store.num_items());
    std::iota(catalog.begin(), catalog.end(), 0);
    TrainHistory h = train_bpr(params, split, catalog, config);
    if (history)
        *history = std::move(h);
    return params;
}

template TrainHistory train_bpr<float>(SeqModelParams<float>&, const LeaveOneOutSplit&,
                                       const std::vector<ItemIndex>&, const TrainConfig&);
template TrainHistory train_bpr<double>(SeqModelParams<double>&, const LeaveOneOutSplit&,
                                        const std::vector<ItemIndex>&, const TrainConfig&);
template SeqModelParams<float> pretrain<float>(const InteractionStore&, const LeaveOneOutSplit&, SeqModelConfig,
                                               const TrainConfig&, TrainHistory*);
template SeqModelParams<double> pretrain<double>(const InteractionStore&, const LeaveOneOutSplit&, SeqModelConfig,
                                                 const TrainConfig&, TrainHistory*);

} // namespace idp
