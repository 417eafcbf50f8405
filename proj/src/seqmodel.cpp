#include "idp/seqmodel.hpp"

#include "idp/numerics.hpp"

#include <spdlog/spdlog.h>

#include <cstring>

namespace idp {

EncoderKind parse_encoder_kind(const std::string& name)
{
    if (name == "causal-attention" || name == "attention")
        return EncoderKind::causal_attention;
    if (name == "gated-recurrent" || name == "gru")
        return EncoderKind::gated_recurrent;
    throw Error("unknown encoder kind '" + name + "' (expected causal-attention or gated-recurrent)");
}

std::string to_string(EncoderKind kind)
{
    return kind == EncoderKind::causal_attention ? "causal-attention" : "gated-recurrent";
}

void SeqModelConfig::validate() const
{
    if (num_items <= 0)
        throw Error("model needs at least one item");
    if (dim <= 0 || layers <= 0 || max_len <= 0)
        throw Error("dim, layers and max_len must be positive");
    if (encoder == EncoderKind::causal_attention && (heads <= 0 || dim % heads != 0))
        throw Error("dim (" + std::to_string(dim) + ") must be divisible by heads (" + std::to_string(heads) + ")");
    if (dropout < 0.0 || dropout >= 1.0)
        throw Error("dropout must lie in [0, 1)");
}

template <typename Scalar>
std::vector<std::pair<std::string, Mat<Scalar>*>> SeqModelParams<Scalar>::tensors()
{
    std::vector<std::pair<std::string, Mat<Scalar>*>> out;
    for_each([&](const std::string& name, Mat<Scalar>& m) { out.emplace_back(name, &m); });
    return out;
}

template <typename Scalar>
SeqModelParams<Scalar> SeqModelParams<Scalar>::zeros_like() const
{
    SeqModelParams z = *this;
    z.set_zero();
    return z;
}

template <typename Scalar>
void SeqModelParams<Scalar>::set_zero()
{
    for_each([](const std::string&, Mat<Scalar>& m) { m.setZero(); });
}

template <typename Scalar>
bool SeqModelParams<Scalar>::operator==(const SeqModelParams& other) const
{
    auto& self = const_cast<SeqModelParams&>(*this);
    auto& rhs = const_cast<SeqModelParams&>(other);
    const auto a = self.tensors();
    const auto b = rhs.tensors();
    if (a.size() != b.size())
        return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].first != b[i].first || a[i].second->rows() != b[i].second->rows()
            || a[i].second->cols() != b[i].second->cols())
            return false;
        if (std::memcmp(a[i].second->data(), b[i].second->data(), sizeof(Scalar) * a[i].second->size()) != 0)
            return false;
    }
    return text_features == other.text_features && text_present == other.text_present;
}

namespace {

template <typename Scalar>
AttentionLayer<Scalar> make_attention_layer(int d, int hidden, std::mt19937_64& rng)
{
    AttentionLayer<Scalar> layer;
    layer.wq.resize(d, d);
    layer.wk.resize(d, d);
    layer.wv.resize(d, d);
    layer.wo.resize(d, d);
    layer.w1.resize(d, hidden);
    layer.w2.resize(hidden, d);
    fill_xavier(layer.wq, rng);
    fill_xavier(layer.wk, rng);
    fill_xavier(layer.wv, rng);
    fill_xavier(layer.wo, rng);
    fill_xavier(layer.w1, rng);
    fill_xavier(layer.w2, rng);
    layer.b1 = Mat<Scalar>::Zero(1, hidden);
    layer.b2 = Mat<Scalar>::Zero(1, d);
    layer.ln1_gain = Mat<Scalar>::Ones(1, d);
    layer.ln1_bias = Mat<Scalar>::Zero(1, d);
    layer.ln2_gain = Mat<Scalar>::Ones(1, d);
    layer.ln2_bias = Mat<Scalar>::Zero(1, d);
    return layer;
}

template <typename Scalar>
GruCell<Scalar> make_gru_cell(int d, std::mt19937_64& rng)
{
    GruCell<Scalar> cell;
    for (Mat<Scalar>* m : {&cell.wz, &cell.uz, &cell.wr, &cell.ur, &cell.wh, &cell.uh}) {
        m->resize(d, d);
        fill_xavier(*m, rng);
    }
    cell.bz = Mat<Scalar>::Zero(1, d);
    cell.br = Mat<Scalar>::Zero(1, d);
    cell.bh = Mat<Scalar>::Zero(1, d);
    return cell;
}

template <typename Scalar>
void build_encoder(SeqModelParams<Scalar>& p, std::mt19937_64& rng)
{
    const auto& c = p.config;
    p.attention.clear();
    p.gru.clear();
    p.position_embeddings.resize(c.max_len, c.dim);
    fill_normal(p.position_embeddings, 0.02, rng);
    for (int l = 0; l < c.layers; ++l) {
        if (c.encoder == EncoderKind::causal_attention)
            p.attention.push_back(make_attention_layer<Scalar>(c.dim, c.hidden(), rng));
        else
            p.gru.push_back(make_gru_cell<Scalar>(c.dim, rng));
    }
}

} // namespace

template <typename Scalar>
SeqModelParams<Scalar> init_params(const SeqModelConfig& config, std::uint64_t seed)
{
    config.validate();
    std::mt19937_64 rng(seed);
    SeqModelParams<Scalar> p;
    p.config = config;
    p.item_embeddings.resize(config.num_items, config.dim);
    fill_normal(p.item_embeddings, 1.0 / std::sqrt(double(config.dim)), rng);
    build_encoder(p, rng);
    return p;
}

template <typename Scalar>
void reinit_encoder(SeqModelParams<Scalar>& params, EncoderKind kind, std::uint64_t seed)
{
    params.config.encoder = kind;
    params.config.validate();
    std::mt19937_64 rng(seed);
    build_encoder(params, rng);
}

template <typename Scalar>
void attach_text_projection(SeqModelParams<Scalar>& params, Mat<Scalar> features, Mat<Scalar> w, Mat<Scalar> b,
                            Mat<Scalar> present)
{
    if (present.size() == 0)
        present = Mat<Scalar>::Ones(features.rows(), 1);
    if (present.rows() != features.rows() || present.cols() != 1)
        throw Error("text presence mask must have one entry per item");
    if (features.rows() != params.item_embeddings.rows())
        throw Error("text features have " + std::to_string(features.rows()) + " rows, model has "
                    + std::to_string(params.item_embeddings.rows()) + " items");
    if (w.rows() != features.cols() || w.cols() != params.config.dim || b.rows() != 1 || b.cols() != params.config.dim)
        throw Error("text projection must map D=" + std::to_string(features.cols()) + " to d="
                    + std::to_string(params.config.dim));
    params.text_features = std::move(features);
    params.text_w = std::move(w);
    params.text_b = std::move(b);
    params.text_present = std::move(present);
}

template <typename Scalar>
Mat<Scalar> item_table(const SeqModelParams<Scalar>& params)
{
    if (!params.has_text())
        return params.item_embeddings;
    Mat<Scalar> proj = params.text_features * params.text_w;
    proj.rowwise() += params.text_b.row(0);
    proj.array().colwise() *= params.text_present.col(0).array();
    return params.item_embeddings + proj;
}

template <typename Scalar>
struct AttentionCache {
    Mat<Scalar> x, q, k, v;
    std::vector<Mat<Scalar>> probs;
    Mat<Scalar> concat, mask1;
    LayerNormCache<Scalar> ln1;
    Mat<Scalar> a, f1, g, mask2;
    LayerNormCache<Scalar> ln2;
};

template <typename Scalar>
struct GruCache {
    Mat<Scalar> x;     // input rows after dropout
    Mat<Scalar> mask;  // input dropout mask
    Mat<Scalar> z, r, c, h_prev;
};

template <typename Scalar>
struct SequenceCache {
    std::vector<ItemIndex> seq;
    std::vector<AttentionCache<Scalar>> attention;
    std::vector<GruCache<Scalar>> gru;
};

template <typename Scalar>
void SequenceCacheDeleter<Scalar>::operator()(SequenceCache<Scalar>* p) const
{
    delete p;
}

std::vector<ItemIndex> truncate_sequence(const std::vector<ItemIndex>& seq, int max_len)
{
    if (int(seq.size()) <= max_len)
        return seq;
    return std::vector<ItemIndex>(seq.end() - max_len, seq.end());
}

namespace {

template <typename Scalar>
Mat<Scalar> attention_forward(const AttentionLayer<Scalar>& p, const SeqModelConfig& c, const Mat<Scalar>& x,
                              Mode mode, std::mt19937_64* rng, AttentionCache<Scalar>* cache)
{
    const Eigen::Index n = x.rows();
    const int d = c.dim;
    const int dh = d / c.heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));
    const bool drop = mode == Mode::train && c.dropout > 0.0;

    Mat<Scalar> q = x * p.wq;
    Mat<Scalar> k = x * p.wk;
    Mat<Scalar> v = x * p.wv;
    Mat<Scalar> concat(n, d);
    std::vector<Mat<Scalar>> probs;
    for (int h = 0; h < c.heads; ++h) {
        Mat<Scalar> s = (q.middleCols(h * dh, dh) * k.middleCols(h * dh, dh).transpose()) * scale;
        causal_softmax_rows(s);
        concat.middleCols(h * dh, dh) = s * v.middleCols(h * dh, dh);
        if (cache)
            probs.push_back(std::move(s));
    }
    Mat<Scalar> mh = concat * p.wo;
    Mat<Scalar> mask1;
    if (drop) {
        mask1 = dropout_mask<Scalar>(n, d, c.dropout, *rng);
        mh.array() *= mask1.array();
    }
    LayerNormCache<Scalar> ln1;
    const Scalar eps = Scalar(c.layer_norm_eps);
    Mat<Scalar> a = layer_norm_forward<Scalar>(x + mh, p.ln1_gain.row(0), p.ln1_bias.row(0), eps, &ln1);

    Mat<Scalar> f1 = a * p.w1;
    f1.rowwise() += p.b1.row(0);
    Mat<Scalar> g = f1.unaryExpr([](Scalar t) { return gelu(t); });
    Mat<Scalar> f2 = g * p.w2;
    f2.rowwise() += p.b2.row(0);
    Mat<Scalar> mask2;
    if (drop) {
        mask2 = dropout_mask<Scalar>(n, d, c.dropout, *rng);
        f2.array() *= mask2.array();
    }
    LayerNormCache<Scalar> ln2;
    Mat<Scalar> out = layer_norm_forward<Scalar>(a + f2, p.ln2_gain.row(0), p.ln2_bias.row(0), eps, &ln2);

    if (cache) {
        cache->x = x;
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->probs = std::move(probs);
        cache->concat = std::move(concat);
        cache->mask1 = std::move(mask1);
        cache->ln1 = std::move(ln1);
        cache->a = std::move(a);
        cache->f1 = std::move(f1);
        cache->g = std::move(g);
        cache->mask2 = std::move(mask2);
        cache->ln2 = std::move(ln2);
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> attention_backward(const AttentionLayer<Scalar>& p, const SeqModelConfig& c,
                               const AttentionCache<Scalar>& cache, const Mat<Scalar>& d_out,
                               AttentionLayer<Scalar>& g)
{
    const int d = c.dim;
    const int dh = d / c.heads;
    const Scalar scale = Scalar(1) / std::sqrt(Scalar(dh));

    RowVec<Scalar> dgain = g.ln2_gain.row(0);
    RowVec<Scalar> dbias = g.ln2_bias.row(0);
    const Mat<Scalar> d_r2 = layer_norm_backward<Scalar>(d_out, p.ln2_gain.row(0), cache.ln2, dgain, dbias);
    g.ln2_gain.row(0) = dgain;
    g.ln2_bias.row(0) = dbias;

    Mat<Scalar> d_a = d_r2;
    Mat<Scalar> d_f2 = d_r2;
    if (cache.mask2.size() > 0)
        d_f2.array() *= cache.mask2.array();
    g.w2 += cache.g.transpose() * d_f2;
    g.b2 += d_f2.colwise().sum();
    Mat<Scalar> d_f1 = d_f2 * p.w2.transpose();
    d_f1.array() *= cache.f1.unaryExpr([](Scalar t) { return gelu_grad(t); }).array();
    g.w1 += cache.a.transpose() * d_f1;
    g.b1 += d_f1.colwise().sum();
    d_a += d_f1 * p.w1.transpose();

    dgain = g.ln1_gain.row(0);
    dbias = g.ln1_bias.row(0);
    const Mat<Scalar> d_r1 = layer_norm_backward<Scalar>(d_a, p.ln1_gain.row(0), cache.ln1, dgain, dbias);
    g.ln1_gain.row(0) = dgain;
    g.ln1_bias.row(0) = dbias;

    Mat<Scalar> d_x = d_r1;
    Mat<Scalar> d_mh = d_r1;
    if (cache.mask1.size() > 0)
        d_mh.array() *= cache.mask1.array();
    g.wo += cache.concat.transpose() * d_mh;
    const Mat<Scalar> d_concat = d_mh * p.wo.transpose();

    const Eigen::Index n = cache.x.rows();
    Mat<Scalar> d_q(n, d), d_k(n, d), d_v(n, d);
    for (int h = 0; h < c.heads; ++h) {
        const Mat<Scalar>& probs = cache.probs[h];
        const auto d_o = d_concat.middleCols(h * dh, dh);
        const Mat<Scalar> d_p = d_o * cache.v.middleCols(h * dh, dh).transpose();
        d_v.middleCols(h * dh, dh) = probs.transpose() * d_o;
        const Vec<Scalar> row_dot = (d_p.array() * probs.array()).rowwise().sum();
        Mat<Scalar> d_s = probs.array() * (d_p.colwise() - row_dot).array();
        d_s *= scale;
        d_q.middleCols(h * dh, dh) = d_s * cache.k.middleCols(h * dh, dh);
        d_k.middleCols(h * dh, dh) = d_s.transpose() * cache.q.middleCols(h * dh, dh);
    }
    g.wq += cache.x.transpose() * d_q;
    g.wk += cache.x.transpose() * d_k;
    g.wv += cache.x.transpose() * d_v;
    d_x += d_q * p.wq.transpose() + d_k * p.wk.transpose() + d_v * p.wv.transpose();
    return d_x;
}

template <typename Scalar>
Mat<Scalar> gru_forward(const GruCell<Scalar>& p, const SeqModelConfig& c, const Mat<Scalar>& input, Mode mode,
                        std::mt19937_64* rng, GruCache<Scalar>* cache)
{
    const Eigen::Index n = input.rows();
    const int d = c.dim;
    Mat<Scalar> x = input;
    Mat<Scalar> mask;
    if (mode == Mode::train && c.dropout > 0.0) {
        mask = dropout_mask<Scalar>(n, d, c.dropout, *rng);
        x.array() *= mask.array();
    }
    Mat<Scalar> xz = x * p.wz;
    xz.rowwise() += p.bz.row(0);
    Mat<Scalar> xr = x * p.wr;
    xr.rowwise() += p.br.row(0);
    Mat<Scalar> xh = x * p.wh;
    xh.rowwise() += p.bh.row(0);

    Mat<Scalar> out(n, d), z(n, d), r(n, d), cand(n, d), h_prev(n, d);
    RowVec<Scalar> h = RowVec<Scalar>::Zero(d);
    for (Eigen::Index t = 0; t < n; ++t) {
        h_prev.row(t) = h;
        z.row(t) = (xz.row(t) + h * p.uz).unaryExpr([](Scalar s) { return sigmoid(s); });
        r.row(t) = (xr.row(t) + h * p.ur).unaryExpr([](Scalar s) { return sigmoid(s); });
        const RowVec<Scalar> rh = r.row(t).cwiseProduct(h);
        cand.row(t) = (xh.row(t) + rh * p.uh).array().tanh().matrix();
        h = (RowVec<Scalar>::Ones(d) - z.row(t)).cwiseProduct(h) + z.row(t).cwiseProduct(cand.row(t));
        out.row(t) = h;
    }
    if (cache) {
        cache->x = std::move(x);
        cache->mask = std::move(mask);
        cache->z = std::move(z);
        cache->r = std::move(r);
        cache->c = std::move(cand);
        cache->h_prev = std::move(h_prev);
    }
    return out;
}

template <typename Scalar>
Mat<Scalar> gru_backward(const GruCell<Scalar>& p, const GruCache<Scalar>& cache, const Mat<Scalar>& d_out,
                         GruCell<Scalar>& g)
{
    const Eigen::Index n = d_out.rows();
    const Eigen::Index d = d_out.cols();
    Mat<Scalar> d_az(n, d), d_ar(n, d), d_ah(n, d);
    RowVec<Scalar> d_next = RowVec<Scalar>::Zero(d);
    for (Eigen::Index t = n - 1; t >= 0; --t) {
        const RowVec<Scalar> dh = d_out.row(t) + d_next;
        const auto z = cache.z.row(t);
        const auto r = cache.r.row(t);
        const auto c = cache.c.row(t);
        const auto hp = cache.h_prev.row(t);

        const RowVec<Scalar> dz = dh.cwiseProduct(c - hp);
        const RowVec<Scalar> dc = dh.cwiseProduct(z);
        RowVec<Scalar> dhp = dh.cwiseProduct(RowVec<Scalar>::Ones(d) - z);

        const RowVec<Scalar> dah = dc.array() * (Scalar(1) - c.array().square());
        const RowVec<Scalar> rh = r.cwiseProduct(hp);
        g.uh += rh.transpose() * dah;
        const RowVec<Scalar> drh = dah * p.uh.transpose();
        const RowVec<Scalar> dr = drh.cwiseProduct(hp);
        dhp += drh.cwiseProduct(r);

        const RowVec<Scalar> dar = dr.array() * r.array() * (Scalar(1) - r.array());
        g.ur += hp.transpose() * dar;
        dhp += dar * p.ur.transpose();

        const RowVec<Scalar> daz = dz.array() * z.array() * (Scalar(1) - z.array());
        g.uz += hp.transpose() * daz;
        dhp += daz * p.uz.transpose();

        d_az.row(t) = daz;
        d_ar.row(t) = dar;
        d_ah.row(t) = dah;
        d_next = dhp;
    }
    g.wz += cache.x.transpose() * d_az;
    g.wr += cache.x.transpose() * d_ar;
    g.wh += cache.x.transpose() * d_ah;
    g.bz += d_az.colwise().sum();
    g.br += d_ar.colwise().sum();
    g.bh += d_ah.colwise().sum();
    Mat<Scalar> d_x = d_az * p.wz.transpose() + d_ar * p.wr.transpose() + d_ah * p.wh.transpose();
    if (cache.mask.size() > 0)
        d_x.array() *= cache.mask.array();
    return d_x;
}

} // namespace

template <typename Scalar>
Mat<Scalar> encode_sequence(const SeqModelParams<Scalar>& params,
                            const Mat<Scalar>& table,
                            const std::vector<ItemIndex>& seq,
                            Mode mode,
                            std::mt19937_64* rng,
                            SequenceCachePtr<Scalar>* cache)
{
    const auto& c = params.config;
    if (seq.empty())
        throw Error("cannot encode an empty sequence");
    if (int(seq.size()) > c.max_len)
        throw Error("sequence of length " + std::to_string(seq.size()) + " exceeds max_len "
                    + std::to_string(c.max_len) + "; truncate first");
    if (mode == Mode::train && c.dropout > 0.0 && rng == nullptr)
        throw Error("train mode with dropout needs a random generator");

    const Eigen::Index n = Eigen::Index(seq.size());
    Mat<Scalar> h(n, c.dim);
    for (Eigen::Index i = 0; i < n; ++i) {
        const ItemIndex v = seq[std::size_t(i)];
        if (v < 0 || v >= table.rows())
            throw Error("item index " + std::to_string(v) + " out of range");
        h.row(i) = table.row(v) + params.position_embeddings.row(i);
    }

    SequenceCache<Scalar>* sc = nullptr;
    if (cache) {
        cache->reset(new SequenceCache<Scalar>());
        sc = cache->get();
        sc->seq = seq;
        sc->attention.resize(params.attention.size());
        sc->gru.resize(params.gru.size());
    }
    for (std::size_t l = 0; l < params.attention.size(); ++l)
        h = attention_forward(params.attention[l], c, h, mode, rng, sc ? &sc->attention[l] : nullptr);
    for (std::size_t l = 0; l < params.gru.size(); ++l)
        h = gru_forward(params.gru[l], c, h, mode, rng, sc ? &sc->gru[l] : nullptr);
    return h;
}

template <typename Scalar>
void backward_sequence(const SeqModelParams<Scalar>& params,
                       const SequenceCache<Scalar>& cache,
                       const Mat<Scalar>& d_outputs,
                       SeqModelParams<Scalar>& grads,
                       Mat<Scalar>& table_grad)
{
    Mat<Scalar> d = d_outputs;
    for (std::size_t l = params.gru.size(); l-- > 0;)
        d = gru_backward(params.gru[l], cache.gru[l], d, grads.gru[l]);
    for (std::size_t l = params.attention.size(); l-- > 0;)
        d = attention_backward(params.attention[l], params.config, cache.attention[l], d, grads.attention[l]);
    for (Eigen::Index i = 0; i < d.rows(); ++i) {
        grads.position_embeddings.row(i) += d.row(i);
        table_grad.row(cache.seq[std::size_t(i)]) += d.row(i);
    }
}

template <typename Scalar>
void accumulate_table_grad(const SeqModelParams<Scalar>& params, const Mat<Scalar>& table_grad,
                           SeqModelParams<Scalar>& grads)
{
    grads.item_embeddings += table_grad;
    if (params.has_text()) {
        Mat<Scalar> masked = table_grad;
        masked.array().colwise() *= params.text_present.col(0).array();
        grads.text_w += params.text_features.transpose() * masked;
        grads.text_b += masked.colwise().sum();
    }
}

template <typename Scalar>
RowVec<Scalar> forward(const SeqModelParams<Scalar>& params, const Mat<Scalar>& table,
                       const std::vector<ItemIndex>& seq)
{
    const Mat<Scalar> out = encode_sequence<Scalar>(params, table, truncate_sequence(seq, params.config.max_len),
                                                    Mode::infer, nullptr, nullptr);
    return out.row(out.rows() - 1);
}

template <typename Scalar>
RowVec<Scalar> forward(const SeqModelParams<Scalar>& params, const std::vector<ItemIndex>& seq)
{
    if (int(seq.size()) > params.config.max_len)
        spdlog::debug("forward: truncated 1 sequence of length {} to {}", seq.size(), params.config.max_len);
    return forward(params, item_table(params), seq);
}

template <typename Scalar>
Scalar bpr_loss(const RowVec<Scalar>& user, ItemIndex pos, ItemIndex neg, const Mat<Scalar>& table)
{
    return neg_log_sigmoid(score(user, pos, table) - score(user, neg, table));
}

template <typename Scalar>
Scalar bpr_batch(const SeqModelParams<Scalar>& params,
                 const std::vector<BprExample>& batch,
                 Mode mode,
                 std::mt19937_64* rng,
                 SeqModelParams<Scalar>* grads)
{
    const Mat<Scalar> table = item_table(params);
    std::size_t terms = 0;
    for (const auto& ex : batch)
        terms += ex.positives.size();
    if (terms == 0)
        throw Error("bpr_batch: batch has no training pairs");
    const Scalar inv_terms = Scalar(1) / Scalar(terms);

    Mat<Scalar> table_grad;
    if (grads)
        table_grad = Mat<Scalar>::Zero(table.rows(), table.cols());

    double total = 0.0;
    for (const auto& ex : batch) {
        if (ex.input.size() != ex.positives.size() || ex.input.size() != ex.negatives.size())
            throw Error("bpr_batch: input, positives and negatives must have equal length");
        SequenceCachePtr<Scalar> cache;
        const Mat<Scalar> out = encode_sequence(params, table, ex.input, mode, rng, grads ? &cache : nullptr);
        Mat<Scalar> d_out;
        if (grads)
            d_out = Mat<Scalar>::Zero(out.rows(), out.cols());
        for (Eigen::Index t = 0; t < out.rows(); ++t) {
            const ItemIndex pos = ex.positives[std::size_t(t)];
            const ItemIndex neg = ex.negatives[std::size_t(t)];
            const Scalar gap = out.row(t).dot(table.row(pos) - table.row(neg));
            total += double(neg_log_sigmoid(gap));
            if (grads) {
                // d/dgap of -log sigmoid(gap) = -sigmoid(-gap)
                const Scalar coef = -sigmoid(-gap) * inv_terms;
                d_out.row(t) = coef * (table.row(pos) - table.row(neg));
                table_grad.row(pos) += coef * out.row(t);
                table_grad.row(neg) -= coef * out.row(t);
            }
        }
        if (grads)
            backward_sequence(params, *cache, d_out, *grads, table_grad);
    }
    if (grads)
        accumulate_table_grad(params, table_grad, *grads);
    return Scalar(total / double(terms));
}

template <typename Scalar>
Checkpoint to_checkpoint(const SeqModelParams<Scalar>& params)
{
    Checkpoint ck;
    const auto& c = params.config;
    ck.meta()["kind"] = "seqmodel";
    ck.meta()["num_items"] = std::to_string(c.num_items);
    ck.meta()["dim"] = std::to_string(c.dim);
    ck.meta()["layers"] = std::to_string(c.layers);
    ck.meta()["heads"] = std::to_string(c.heads);
    ck.meta()["max_len"] = std::to_string(c.max_len);
    ck.meta()["ffn_dim"] = std::to_string(c.ffn_dim);
    ck.meta()["dropout"] = std::to_string(c.dropout);
    ck.meta()["layer_norm_eps"] = std::to_string(c.layer_norm_eps);
    ck.meta()["encoder"] = to_string(c.encoder);
    for (auto& [name, m] : const_cast<SeqModelParams<Scalar>&>(params).tensors())
        ck.put(name, *m);
    if (params.has_text())
    {
        ck.put("text.features", params.text_features);
        ck.put("text.present", params.text_present);
    }
    return ck;
}

SeqModelConfig config_from_checkpoint(const Checkpoint& ck)
{
    SeqModelConfig c;
    c.num_items = std::stoi(ck.meta("num_items"));
    c.dim = std::stoi(ck.meta("dim"));
    c.layers = std::stoi(ck.meta("layers"));
    c.heads = std::stoi(ck.meta("heads"));
    c.max_len = std::stoi(ck.meta("max_len"));
    c.ffn_dim = std::stoi(ck.meta("ffn_dim"));
    c.dropout = std::stod(ck.meta("dropout"));
    c.layer_norm_eps = std::stod(ck.meta("layer_norm_eps"));
    c.encoder = parse_encoder_kind(ck.meta("encoder"));
    return c;
}

template <typename Scalar>
SeqModelParams<Scalar> from_checkpoint(const Checkpoint& ck)
{
    const SeqModelConfig c = config_from_checkpoint(ck);
    // Shapes come from a fresh initialization; values are then overwritten.
    SeqModelParams<Scalar> p = init_params<Scalar>(c, 0);
    if (ck.contains("text.w")) {
        const Mat<Scalar> features = ck.get<Scalar>("text.features");
        attach_text_projection<Scalar>(p, features, Mat<Scalar>::Zero(features.cols(), c.dim),
                                       Mat<Scalar>::Zero(1, c.dim),
                                       ck.get<Scalar>("text.present", features.rows(), 1));
    }
    for (auto& [name, m] : p.tensors())
        *m = ck.get<Scalar>(name, m->rows(), m->cols());
    return p;
}

template <typename Scalar>
void load_embeddings(SeqModelParams<Scalar>& params, const Checkpoint& ck)
{
    const Mat<Scalar> e = ck.get<Scalar>("E");
    if (e.cols() != params.config.dim)
        throw Error("shape mismatch for tensor 'E': expected dimension " + std::to_string(params.config.dim)
                    + ", checkpoint has " + std::to_string(e.cols()));
    params.item_embeddings = e;
    params.config.num_items = int(e.rows());
    if (params.has_text() && params.text_features.rows() != e.rows()) {
        params.text_w.resize(0, 0);
        params.text_b.resize(0, 0);
        params.text_features.resize(0, 0);
        params.text_present.resize(0, 0);
    }
}

template <typename Scalar>
void load_encoder(SeqModelParams<Scalar>& params, const Checkpoint& ck)
{
    SeqModelConfig c = config_from_checkpoint(ck);
    if (c.dim != params.config.dim)
        throw Error("shape mismatch for tensor 'E': encoder expects dimension " + std::to_string(c.dim)
                    + ", model has " + std::to_string(params.config.dim));
    c.num_items = params.config.num_items;
    params.config = c;
    std::mt19937_64 rng(0);
    build_encoder(params, rng);
    params.position_embeddings = ck.get<Scalar>("P", c.max_len, c.dim);
    params.for_each_encoder(
        [&](const std::string& name, Mat<Scalar>& m) { m = ck.get<Scalar>(name, m.rows(), m.cols()); });
}

template <typename Scalar>
std::uint64_t checksum(const SeqModelParams<Scalar>& params)
{
    std::uint64_t h = 1469598103934665603ULL;
    for (auto& [name, m] : const_cast<SeqModelParams<Scalar>&>(params).tensors()) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(m->data());
        for (std::size_t i = 0; i < std::size_t(m->size()) * sizeof(Scalar); ++i) {
            h ^= bytes[i];
            h *= 1099511628211ULL;
        }
    }
    return h;
}

#define IDP_INSTANTIATE_SEQMODEL(S)                                                                              \
    template struct SeqModelParams<S>;                                                                           \
    template struct SequenceCacheDeleter<S>;                                                                     \
    template SeqModelParams<S> init_params<S>(const SeqModelConfig&, std::uint64_t);                             \
    template void reinit_encoder<S>(SeqModelParams<S>&, EncoderKind, std::uint64_t);                             \
    template void attach_text_projection<S>(SeqModelParams<S>&, Mat<S>, Mat<S>, Mat<S>, Mat<S>);                 \
    template Mat<S> item_table<S>(const SeqModelParams<S>&);                                                     \
    template Mat<S> encode_sequence<S>(const SeqModelParams<S>&, const Mat<S>&, const std::vector<ItemIndex>&,   \
                                       Mode, std::mt19937_64*, SequenceCachePtr<S>*);                            \
    template void backward_sequence<S>(const SeqModelParams<S>&, const SequenceCache<S>&, const Mat<S>&,         \
                                       SeqModelParams<S>&, Mat<S>&);                                             \
    template void accumulate_table_grad<S>(const SeqModelParams<S>&, const Mat<S>&, SeqModelParams<S>&);         \
    template RowVec<S> forward<S>(const SeqModelParams<S>&, const std::vector<ItemIndex>&);                      \
    template RowVec<S> forward<S>(const SeqModelParams<S>&, const Mat<S>&, const std::vector<ItemIndex>&);       \
    template S bpr_loss<S>(const RowVec<S>&, ItemIndex, ItemIndex, const Mat<S>&);                               \
    template S bpr_batch<S>(const SeqModelParams<S>&, const std::vector<BprExample>&, Mode, std::mt19937_64*,    \
                            SeqModelParams<S>*);                                                                 \
    template Checkpoint to_checkpoint<S>(const SeqModelParams<S>&);                                              \
    template SeqModelParams<S> from_checkpoint<S>(const Checkpoint&);                                            \
    template void load_embeddings<S>(SeqModelParams<S>&, const Checkpoint&);                                     \
    template void load_encoder<S>(SeqModelParams<S>&, const Checkpoint&);                                        \
    template std::uint64_t checksum<S>(const SeqModelParams<S>&);

IDP_INSTANTIATE_SEQMODEL(float)
IDP_INSTANTIATE_SEQMODEL(double)

} // namespace idp
