#include "idp/cdim.hpp"

#include "idp/numerics.hpp"
#include "idp/optim.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

namespace idp {

Modality parse_modality(const std::string& name)
{
    if (name == "text")
        return Modality::text;
    if (name == "image")
        return Modality::image;
    if (name == "fused")
        return Modality::fused;
    throw Error("unknown modality '" + name + "' (expected text, image or fused)");
}

std::string to_string(Modality m)
{
    switch (m) {
    case Modality::text:
        return "text";
    case Modality::image:
        return "image";
    case Modality::fused:
        return "fused";
    }
    return "text";
}

std::size_t TextVectorStore::num_present() const
{
    return std::size_t(std::count(present.begin(), present.end(), true));
}

TextVectorStore TextVectorStore::bind(const InteractionStore& store, const std::string& domain,
                                      const std::vector<VectorRow>& rows, Modality modality)
{
    if (rows.empty())
        throw Error("no vectors to bind for domain " + domain);
    const Eigen::Index dim = Eigen::Index(rows.front().values.size());
    TextVectorStore out;
    out.modality = modality;
    out.vectors = Mat<double>::Zero(Eigen::Index(store.num_items()), dim);
    out.present.assign(store.num_items(), false);
    for (const auto& row : rows) {
        if (Eigen::Index(row.values.size()) != dim)
            throw Error("vector for item '" + row.item + "' has dimension " + std::to_string(row.values.size())
                        + ", expected " + std::to_string(dim));
        const auto v = store.find_item(domain, row.item);
        if (!v)
            continue;
        for (Eigen::Index j = 0; j < dim; ++j)
            out.vectors(*v, j) = row.values[std::size_t(j)];
        out.present[std::size_t(*v)] = true;
    }
    return out;
}

void TextVectorStore::merge(const TextVectorStore& other)
{
    if (other.num_items() != num_items() || other.dim() != dim())
        throw Error("TextVectorStore::merge: shape mismatch");
    for (std::size_t v = 0; v < present.size(); ++v) {
        if (other.present[v]) {
            vectors.row(Eigen::Index(v)) = other.vectors.row(Eigen::Index(v));
            present[v] = true;
        }
    }
}

Mat<double> TextVectorStore::rows(const std::vector<ItemIndex>& items) const
{
    Mat<double> out(Eigen::Index(items.size()), vectors.cols());
    for (std::size_t i = 0; i < items.size(); ++i) {
        if (!present.at(std::size_t(items[i])))
            throw Error("item " + std::to_string(items[i]) + " has no vector");
        out.row(Eigen::Index(i)) = vectors.row(items[i]);
    }
    return out;
}

template <typename Scalar>
std::vector<std::pair<std::string, Mat<Scalar>*>> AdapterParams<Scalar>::tensors()
{
    std::vector<std::pair<std::string, Mat<Scalar>*>> out;
    for_each([&](const std::string& name, Mat<Scalar>& m) { out.emplace_back(name, &m); });
    return out;
}

template <typename Scalar>
AdapterParams<Scalar> AdapterParams<Scalar>::zeros_like() const
{
    AdapterParams z = *this;
    z.for_each([](const std::string&, Mat<Scalar>& m) { m.setZero(); });
    return z;
}

template <typename Scalar>
bool AdapterParams<Scalar>::operator==(const AdapterParams& other) const
{
    return w1 == other.w1 && b1 == other.b1 && w2 == other.w2 && b2 == other.b2;
}

template <typename Scalar>
AdapterParams<Scalar> init_adapter(int input_dim, const AdapterConfig& config, std::uint64_t seed)
{
    if (input_dim <= 0 || config.out_dim <= 0)
        throw Error("adapter dimensions must be positive");
    if (!(config.temperature > 0.0))
        throw Error("adapter temperature must be positive");
    if (config.dropout < 0.0 || config.dropout >= 1.0)
        throw Error("adapter dropout must lie in [0, 1)");
    std::mt19937_64 rng(seed);
    AdapterParams<Scalar> a;
    a.config = config;
    a.w1.resize(input_dim, config.out_dim);
    a.w2.resize(config.out_dim, config.out_dim);
    fill_xavier(a.w1, rng);
    fill_xavier(a.w2, rng);
    a.b1 = Mat<Scalar>::Zero(1, config.out_dim);
    a.b2 = Mat<Scalar>::Zero(1, config.out_dim);
    return a;
}

template <typename Scalar>
Mat<Scalar> encode_rows(const AdapterParams<Scalar>& adapter, const Mat<Scalar>& raw, Mode mode,
                        std::mt19937_64* rng, AdapterCache<Scalar>* cache)
{
    if (raw.cols() != adapter.input_dim())
        throw Error("adapter input dimension mismatch: got " + std::to_string(raw.cols()) + ", expected "
                    + std::to_string(adapter.input_dim()));
    Mat<Scalar> pre = raw * adapter.w1;
    pre.rowwise() += adapter.b1.row(0);
    Mat<Scalar> hidden = pre.unaryExpr([](Scalar t) { return gelu(t); });
    Mat<Scalar> mask;
    if (mode == Mode::train && adapter.config.dropout > 0.0) {
        if (!rng)
            throw Error("train-mode adapter pass needs a random generator");
        mask = dropout_mask<Scalar>(hidden.rows(), hidden.cols(), adapter.config.dropout, *rng);
        hidden.array() *= mask.array();
    }
    Mat<Scalar> out = hidden * adapter.w2;
    out.rowwise() += adapter.b2.row(0);
    if (cache) {
        cache->input = raw;
        cache->pre = std::move(pre);
        cache->mask = std::move(mask);
        cache->hidden = std::move(hidden);
    }
    return out;
}

template <typename Scalar>
RowVec<Scalar> encode(const AdapterParams<Scalar>& adapter, const RowVec<Scalar>& raw, Mode mode,
                      std::mt19937_64* rng)
{
    const Mat<Scalar> in = raw;
    return encode_rows(adapter, in, mode, rng).row(0);
}

template <typename Scalar>
void adapter_backward(const AdapterParams<Scalar>& adapter, const AdapterCache<Scalar>& cache,
                      const Mat<Scalar>& d_out, AdapterParams<Scalar>& grads)
{
    grads.w2 += cache.hidden.transpose() * d_out;
    grads.b2 += d_out.colwise().sum();
    Mat<Scalar> d_hidden = d_out * adapter.w2.transpose();
    if (cache.mask.size() > 0)
        d_hidden.array() *= cache.mask.array();
    d_hidden.array() *= cache.pre.unaryExpr([](Scalar t) { return gelu_grad(t); }).array();
    grads.w1 += cache.input.transpose() * d_hidden;
    grads.b1 += d_hidden.colwise().sum();
}

namespace {

// -log softmax(logits)[0] and its gradient with respect to the logits.
template <typename Scalar>
Scalar info_nce(const std::vector<Scalar>& logits, std::vector<Scalar>* grad)
{
    const Scalar max = *std::max_element(logits.begin(), logits.end());
    Scalar sum(0);
    for (Scalar l : logits)
        sum += std::exp(l - max);
    const Scalar lse = max + std::log(sum);
    if (grad) {
        grad->resize(logits.size());
        for (std::size_t i = 0; i < logits.size(); ++i)
            (*grad)[i] = std::exp(logits[i] - lse);
        (*grad)[0] -= Scalar(1);
    }
    return lse - logits[0];
}

} // namespace

template <typename Scalar>
Scalar text_contrastive(const Mat<Scalar>& anchors, const Mat<Scalar>& twins, double temperature,
                        Similarity kind, Mat<Scalar>* d_anchors, Mat<Scalar>* d_twins)
{
    const Eigen::Index n = anchors.rows();
    if (n < 2)
        throw Error("text contrastive loss needs a batch of at least 2 items");
    if (twins.rows() != n || twins.cols() != anchors.cols())
        throw Error("text contrastive loss: twin views must match anchors");
    const bool want_grad = d_anchors && d_twins;
    if (want_grad) {
        *d_anchors = Mat<Scalar>::Zero(n, anchors.cols());
        *d_twins = Mat<Scalar>::Zero(n, anchors.cols());
    }
    const Scalar inv_tau = Scalar(1.0 / temperature);
    const Scalar inv_n = Scalar(1) / Scalar(n);
    Scalar total(0);
    std::vector<Scalar> logits(static_cast<std::size_t>(n));
    std::vector<Scalar> grad;
    for (Eigen::Index i = 0; i < n; ++i) {
        const RowVec<Scalar> a = anchors.row(i);
        logits[0] = similarity<Scalar>(a, twins.row(i), kind) * inv_tau;
        std::size_t slot = 1;
        for (Eigen::Index k = 0; k < n; ++k)
            if (k != i)
                logits[slot++] = similarity<Scalar>(a, anchors.row(k), kind) * inv_tau;
        total += info_nce(logits, want_grad ? &grad : nullptr);
        if (!want_grad)
            continue;
        const Scalar c0 = grad[0] * inv_tau * inv_n;
        d_anchors->row(i) += c0 * similarity_grad<Scalar>(a, twins.row(i), kind);
        d_twins->row(i) += c0 * similarity_grad<Scalar>(twins.row(i), a, kind);
        slot = 1;
        for (Eigen::Index k = 0; k < n; ++k) {
            if (k == i)
                continue;
            const Scalar ck = grad[slot++] * inv_tau * inv_n;
            d_anchors->row(i) += ck * similarity_grad<Scalar>(a, anchors.row(k), kind);
            d_anchors->row(k) += ck * similarity_grad<Scalar>(anchors.row(k), a, kind);
        }
    }
    return total * inv_n;
}

template <typename Scalar>
Scalar behavior_contrastive(const Mat<Scalar>& anchors, const Mat<Scalar>& positives, int k, double temperature,
                            Similarity kind, Mat<Scalar>* d_anchors, Mat<Scalar>* d_positives)
{
    const Eigen::Index n = anchors.rows();
    if (n < 2)
        throw Error("behavior contrastive loss needs a batch of at least 2 items");
    if (k < 1 || positives.rows() != n * k || positives.cols() != anchors.cols())
        throw Error("behavior contrastive loss: expected k rows of positives per anchor");
    const bool want_grad = d_anchors && d_positives;
    if (want_grad) {
        *d_anchors = Mat<Scalar>::Zero(n, anchors.cols());
        *d_positives = Mat<Scalar>::Zero(positives.rows(), positives.cols());
    }
    const Scalar inv_tau = Scalar(1.0 / temperature);
    const Scalar inv_terms = Scalar(1) / Scalar(n * k);

    // Negative logits do not depend on the positive, so compute them once per anchor.
    Mat<Scalar> neg(n, n);
    for (Eigen::Index i = 0; i < n; ++i)
        for (Eigen::Index m = 0; m < n; ++m)
            neg(i, m) = m == i ? Scalar(0) : similarity<Scalar>(anchors.row(i), anchors.row(m), kind) * inv_tau;

    Scalar total(0);
    std::vector<Scalar> logits(static_cast<std::size_t>(n));
    std::vector<Scalar> grad;
    for (Eigen::Index i = 0; i < n; ++i) {
        const RowVec<Scalar> a = anchors.row(i);
        for (int j = 0; j < k; ++j) {
            const Eigen::Index prow = i * k + j;
            logits[0] = similarity<Scalar>(a, positives.row(prow), kind) * inv_tau;
            std::size_t slot = 1;
            for (Eigen::Index m = 0; m < n; ++m)
                if (m != i)
                    logits[slot++] = neg(i, m);
            total += info_nce(logits, want_grad ? &grad : nullptr);
            if (!want_grad)
                continue;
            const Scalar c0 = grad[0] * inv_tau * inv_terms;
            d_anchors->row(i) += c0 * similarity_grad<Scalar>(a, positives.row(prow), kind);
            d_positives->row(prow) += c0 * similarity_grad<Scalar>(positives.row(prow), a, kind);
            slot = 1;
            for (Eigen::Index m = 0; m < n; ++m) {
                if (m == i)
                    continue;
                const Scalar cm = grad[slot++] * inv_tau * inv_terms;
                d_anchors->row(i) += cm * similarity_grad<Scalar>(a, anchors.row(m), kind);
                d_anchors->row(m) += cm * similarity_grad<Scalar>(anchors.row(m), a, kind);
            }
        }
    }
    return total * inv_terms;
}

template <typename Scalar>
Scalar text_contrastive_loss(const AdapterParams<Scalar>& adapter, const Mat<Scalar>& raw, std::mt19937_64& rng,
                             AdapterParams<Scalar>* grads)
{
    AdapterCache<Scalar> c1, c2;
    const Mat<Scalar> z1 = encode_rows(adapter, raw, Mode::train, &rng, grads ? &c1 : nullptr);
    const Mat<Scalar> z2 = encode_rows(adapter, raw, Mode::train, &rng, grads ? &c2 : nullptr);
    if (!grads)
        return text_contrastive<Scalar>(z1, z2, adapter.config.temperature, adapter.config.similarity);
    Mat<Scalar> d1, d2;
    const Scalar loss = text_contrastive<Scalar>(z1, z2, adapter.config.temperature, adapter.config.similarity,
                                                 &d1, &d2);
    adapter_backward(adapter, c1, d1, *grads);
    adapter_backward(adapter, c2, d2, *grads);
    return loss;
}

template <typename Scalar>
Scalar behavior_contrastive_loss(const AdapterParams<Scalar>& adapter, const Mat<Scalar>& raw,
                                 const Mat<Scalar>& raw_positives, int k, std::mt19937_64& rng,
                                 AdapterParams<Scalar>* grads)
{
    AdapterCache<Scalar> ca, cp;
    const Mat<Scalar> za = encode_rows(adapter, raw, Mode::train, &rng, grads ? &ca : nullptr);
    const Mat<Scalar> zp = encode_rows(adapter, raw_positives, Mode::train, &rng, grads ? &cp : nullptr);
    if (!grads)
        return behavior_contrastive<Scalar>(za, zp, k, adapter.config.temperature, adapter.config.similarity);
    Mat<Scalar> da, dp;
    const Scalar loss = behavior_contrastive<Scalar>(za, zp, k, adapter.config.temperature,
                                                     adapter.config.similarity, &da, &dp);
    adapter_backward(adapter, ca, da, *grads);
    adapter_backward(adapter, cp, dp, *grads);
    return loss;
}

template <typename Scalar>
BehaviorPositives mine_behavior_positives(const Mat<Scalar>& embeddings, int k, Similarity kind)
{
    const Eigen::Index n = embeddings.rows();
    if (k < 1 || k >= n)
        throw Error("mine_behavior_positives: need 1 <= k < number of items (k=" + std::to_string(k)
                    + ", items=" + std::to_string(n) + ")");
    BehaviorPositives out;
    out.k = k;
    out.lists.resize(std::size_t(n));
    for (Eigen::Index v = 0; v < n; ++v) {
        const RowVec<Scalar> q = embeddings.row(v);
        const NeighborList top = top_m(similarities(q, embeddings, kind), k, ItemIndex(v));
        for (const auto& nb : top)
            out.lists[std::size_t(v)].push_back(nb.index);
    }
    return out;
}

void write_positives_tsv(const std::filesystem::path& path, const BehaviorPositives& positives)
{
    std::string out;
    for (std::size_t v = 0; v < positives.lists.size(); ++v) {
        out += std::to_string(v);
        out += '\t';
        for (std::size_t j = 0; j < positives.lists[v].size(); ++j) {
            if (j)
                out += ',';
            out += std::to_string(positives.lists[v][j]);
        }
        out += '\n';
    }
    write_file_bytes(path, out);
}

BehaviorPositives read_positives_tsv(const std::filesystem::path& path)
{
    std::istringstream in(read_file_bytes(path));
    BehaviorPositives out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty())
            continue;
        const auto tab = line.find('\t');
        if (tab == std::string::npos)
            throw ParseError(path.string(), lineno, "expected item<TAB>positives");
        if (std::stoul(line.substr(0, tab)) != out.lists.size())
            throw ParseError(path.string(), lineno, "items must be listed densely in order");
        std::vector<ItemIndex> list;
        std::istringstream fields(line.substr(tab + 1));
        std::string tok;
        while (std::getline(fields, tok, ','))
            list.push_back(ItemIndex(std::stol(tok)));
        if (out.k == 0)
            out.k = int(list.size());
        else if (int(list.size()) != out.k)
            throw ParseError(path.string(), lineno, "inconsistent number of positives");
        out.lists.push_back(std::move(list));
    }
    return out;
}

namespace {

template <typename Scalar>
Mat<Scalar> gather(const Mat<Scalar>& vectors, const std::vector<ItemIndex>& items)
{
    Mat<Scalar> out(Eigen::Index(items.size()), vectors.cols());
    for (std::size_t i = 0; i < items.size(); ++i)
        out.row(Eigen::Index(i)) = vectors.row(items[i]);
    return out;
}

template <typename Scalar>
std::vector<ItemIndex> positive_rows(const BehaviorPositives& positives, const std::vector<ItemIndex>& batch)
{
    std::vector<ItemIndex> rows;
    rows.reserve(batch.size() * std::size_t(positives.k));
    for (ItemIndex v : batch)
        for (ItemIndex p : positives.lists.at(std::size_t(v)))
            rows.push_back(p);
    return rows;
}

template <typename Scalar>
std::vector<std::vector<ItemIndex>> make_batches(const std::vector<ItemIndex>& items, int batch_size)
{
    std::vector<std::vector<ItemIndex>> out;
    for (std::size_t start = 0; start < items.size(); start += std::size_t(batch_size)) {
        const std::size_t end = std::min(items.size(), start + std::size_t(batch_size));
        std::vector<ItemIndex> b(items.begin() + std::ptrdiff_t(start), items.begin() + std::ptrdiff_t(end));
        if (b.size() < 2 && !out.empty())
            out.back().insert(out.back().end(), b.begin(), b.end());
        else if (b.size() >= 2)
            out.push_back(std::move(b));
    }
    return out;
}

template <typename Scalar>
Scalar combined_loss(const AdapterParams<Scalar>& adapter, const Mat<Scalar>& vectors,
                     const BehaviorPositives& positives, const std::vector<ItemIndex>& batch, std::mt19937_64& rng,
                     AdapterParams<Scalar>* grads)
{
    const Mat<Scalar> raw = gather(vectors, batch);
    const Mat<Scalar> raw_pos = gather(vectors, positive_rows<Scalar>(positives, batch));
    const Scalar text = text_contrastive_loss(adapter, raw, rng, grads);
    const Scalar behavior = behavior_contrastive_loss(adapter, raw, raw_pos, positives.k, rng, grads);
    return text + behavior;
}

} // namespace

template <typename Scalar>
AdapterParams<Scalar> tune_cdim(const Mat<Scalar>& vectors, const BehaviorPositives& positives,
                                const TuneConfig& config, AdapterParams<Scalar> adapter, TuneHistory* history)
{
    const Eigen::Index n = vectors.rows();
    if (Eigen::Index(positives.lists.size()) != n)
        throw Error("tune_cdim: positives cover " + std::to_string(positives.lists.size()) + " items, vectors "
                    + std::to_string(n));
    for (std::size_t v = 0; v < positives.lists.size(); ++v)
        for (ItemIndex p : positives.lists[v])
            if (p < 0 || p >= n)
                throw Error("tune_cdim: positive " + std::to_string(p) + " of item " + std::to_string(v)
                            + " is missing from the vector store");
    if (config.batch_size < 2)
        throw Error("tune_cdim: batch size must be >= 2");

    std::mt19937_64 rng(config.seed);
    std::vector<ItemIndex> items(static_cast<std::size_t>(n));
    std::iota(items.begin(), items.end(), 0);
    std::shuffle(items.begin(), items.end(), rng);
    std::size_t n_hold = std::size_t(std::ceil(config.holdout_fraction * double(n)));
    if (n - Eigen::Index(n_hold) < 2 || n_hold < 2)
        n_hold = 0;
    std::vector<ItemIndex> holdout(items.begin(), items.begin() + std::ptrdiff_t(n_hold));
    std::vector<ItemIndex> train(items.begin() + std::ptrdiff_t(n_hold), items.end());
    std::sort(holdout.begin(), holdout.end());
    const auto hold_batches = make_batches<Scalar>(holdout, config.batch_size);

    const auto holdout_loss = [&](const AdapterParams<Scalar>& a) {
        if (hold_batches.empty())
            return 0.0;
        std::mt19937_64 eval_rng(config.seed + 0x5bd1e995ULL);
        double total = 0.0;
        for (const auto& b : hold_batches)
            total += double(combined_loss(a, vectors, positives, b, eval_rng, static_cast<AdapterParams<Scalar>*>(nullptr)));
        return total / double(hold_batches.size());
    };

    Adam<Scalar> adam({config.learning_rate});
    TuneHistory h;
    h.holdout_loss.push_back(holdout_loss(adapter));
    h.train_loss.push_back(std::nan(""));
    double best_loss = h.holdout_loss[0];
    AdapterParams<Scalar> best = adapter;
    int since_best = 0;
    AdapterParams<Scalar> grads = adapter.zeros_like();

    for (int epoch = 1; epoch <= config.max_epochs; ++epoch) {
        std::shuffle(train.begin(), train.end(), rng);
        double sum = 0.0;
        std::size_t count = 0;
        bool finite = true;
        for (const auto& batch : make_batches<Scalar>(train, config.batch_size)) {
            grads = adapter.zeros_like();
            const Scalar loss = combined_loss(adapter, vectors, positives, batch, rng, &grads);
            if (!std::isfinite(double(loss))) {
                finite = false;
                break;
            }
            adam.step(adapter.tensors(), grads.tensors());
            sum += double(loss);
            ++count;
        }
        if (!finite) {
            spdlog::warn("CDIM tuning diverged at epoch {}; keeping the last finite adapter", epoch);
            h.diverged = true;
            break;
        }
        const double hl = holdout_loss(adapter);
        h.train_loss.push_back(count ? sum / double(count) : 0.0);
        h.holdout_loss.push_back(hl);
        if (hold_batches.empty() || hl < best_loss) {
            best_loss = hl;
            best = adapter;
            h.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= config.patience) {
            break;
        }
    }
    if (history)
        *history = std::move(h);
    return best;
}

template <typename Scalar>
AdapterParams<Scalar> tune_cdim(const Mat<Scalar>& vectors, const BehaviorPositives& positives,
                                const TuneConfig& config, TuneHistory* history)
{
    return tune_cdim(vectors, positives, config,
                     init_adapter<Scalar>(int(vectors.cols()), config.adapter, config.seed), history);
}

template <typename Scalar>
RowVec<Scalar> fuse_multimodal(const AdapterParams<Scalar>& fusion, const RowVec<Scalar>& text,
                               const RowVec<Scalar>* image, Mode mode, std::mt19937_64* rng)
{
    const Eigen::Index dt = text.size();
    const Eigen::Index di = fusion.input_dim() - dt;
    if (di <= 0)
        throw Error("fusion map input dimension is too small for the text vector");
    RowVec<Scalar> joint = RowVec<Scalar>::Zero(fusion.input_dim());
    joint.head(dt) = text;
    if (image) {
        if (image->size() != di)
            throw Error("image vector dimension mismatch");
        joint.tail(di) = *image;
    }
    return encode(fusion, joint, mode, rng);
}

TextVectorStore concat_modalities(const TextVectorStore& text, const TextVectorStore& image)
{
    if (text.num_items() != image.num_items())
        throw Error("concat_modalities: stores cover different item spaces");
    TextVectorStore out;
    out.modality = Modality::fused;
    out.present = text.present;
    out.vectors = Mat<double>::Zero(text.vectors.rows(), text.dim() + image.dim());
    out.vectors.leftCols(text.dim()) = text.vectors;
    std::size_t missing = 0;
    for (std::size_t v = 0; v < text.num_items(); ++v) {
        if (!text.present[v])
            continue;
        if (image.present[v])
            out.vectors.row(Eigen::Index(v)).tail(image.dim()) = image.vectors.row(Eigen::Index(v));
        else
            ++missing;
    }
    if (missing)
        spdlog::warn("fusion: {} items have no image vector; using text only", missing);
    return out;
}

template <typename Scalar>
Checkpoint adapter_to_checkpoint(const AdapterParams<Scalar>& adapter)
{
    Checkpoint ck;
    ck.meta()["kind"] = "adapter";
    ck.meta()["out_dim"] = std::to_string(adapter.config.out_dim);
    ck.meta()["dropout"] = std::to_string(adapter.config.dropout);
    ck.meta()["temperature"] = std::to_string(adapter.config.temperature);
    ck.meta()["similarity"] = to_string(adapter.config.similarity);
    for (auto& [name, m] : const_cast<AdapterParams<Scalar>&>(adapter).tensors())
        ck.put(name, *m);
    return ck;
}

template <typename Scalar>
AdapterParams<Scalar> adapter_from_checkpoint(const Checkpoint& ck)
{
    AdapterParams<Scalar> a;
    a.config.out_dim = std::stoi(ck.meta("out_dim"));
    a.config.dropout = std::stod(ck.meta("dropout"));
    a.config.temperature = std::stod(ck.meta("temperature"));
    a.config.similarity = parse_similarity(ck.meta("similarity"));
    a.w1 = ck.get<Scalar>("adapter.w1");
    a.b1 = ck.get<Scalar>("adapter.b1", 1, a.config.out_dim);
    a.w2 = ck.get<Scalar>("adapter.w2", a.config.out_dim, a.config.out_dim);
    a.b2 = ck.get<Scalar>("adapter.b2", 1, a.config.out_dim);
    if (a.w1.cols() != a.config.out_dim)
        throw Error("shape mismatch for tensor 'adapter.w1'");
    return a;
}

template <typename Scalar>
std::uint64_t checksum(const AdapterParams<Scalar>& adapter)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (auto& [name, m] : const_cast<AdapterParams<Scalar>&>(adapter).tensors()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(m->data());
        for (std::size_t i = 0; i < std::size_t(m->size()) * sizeof(Scalar); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

#define IDP_INSTANTIATE_CDIM(S)                                                                                  \
    template struct AdapterParams<S>;                                                                            \
    template AdapterParams<S> init_adapter<S>(int, const AdapterConfig&, std::uint64_t);                         \
    template Mat<S> encode_rows<S>(const AdapterParams<S>&, const Mat<S>&, Mode, std::mt19937_64*,               \
                                   AdapterCache<S>*);                                                            \
    template RowVec<S> encode<S>(const AdapterParams<S>&, const RowVec<S>&, Mode, std::mt19937_64*);             \
    template void adapter_backward<S>(const AdapterParams<S>&, const AdapterCache<S>&, const Mat<S>&,            \
                                      AdapterParams<S>&);                                                        \
    template S text_contrastive<S>(const Mat<S>&, const Mat<S>&, double, Similarity, Mat<S>*, Mat<S>*);         \
    template S behavior_contrastive<S>(const Mat<S>&, const Mat<S>&, int, double, Similarity, Mat<S>*,          \
                                       Mat<S>*);                                                                 \
    template S text_contrastive_loss<S>(const AdapterParams<S>&, const Mat<S>&, std::mt19937_64&,               \
                                        AdapterParams<S>*);                                                      \
    template S behavior_contrastive_loss<S>(const AdapterParams<S>&, const Mat<S>&, const Mat<S>&, int,         \
                                            std::mt19937_64&, AdapterParams<S>*);                                \
    template BehaviorPositives mine_behavior_positives<S>(const Mat<S>&, int, Similarity);                      \
    template AdapterParams<S> tune_cdim<S>(const Mat<S>&, const BehaviorPositives&, const TuneConfig&,          \
                                           AdapterParams<S>, TuneHistory*);                                      \
    template AdapterParams<S> tune_cdim<S>(const Mat<S>&, const BehaviorPositives&, const TuneConfig&,          \
                                           TuneHistory*);                                                        \
    template RowVec<S> fuse_multimodal<S>(const AdapterParams<S>&, const RowVec<S>&, const RowVec<S>*, Mode,    \
                                          std::mt19937_64*);                                                     \
    template Checkpoint adapter_to_checkpoint<S>(const AdapterParams<S>&);                                       \
    template AdapterParams<S> adapter_from_checkpoint<S>(const Checkpoint&);                                     \
    template std::uint64_t checksum<S>(const AdapterParams<S>&);

IDP_INSTANTIATE_CDIM(float)
IDP_INSTANTIATE_CDIM(double)

} // namespace idp
