#include "idp/matcher.hpp"

#include "idp/checkpoint.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <queue>
#include <set>

namespace idp {

Similarity parse_similarity(const std::string& name)
{
    if (name == "cosine")
        return Similarity::cosine;
    if (name == "dot")
        return Similarity::dot;
    throw Error("unknown similarity '" + name + "' (expected cosine or dot)");
}

std::string to_string(Similarity s)
{
    return s == Similarity::cosine ? "cosine" : "dot";
}

template <typename Scalar>
std::vector<double> similarities(const RowVec<Scalar>& query, const Mat<Scalar>& sources, Similarity kind)
{
    const Vec<Scalar> dots = sources * query.transpose();
    std::vector<double> sims(std::size_t(sources.rows()));
    if (kind == Similarity::dot) {
        for (Eigen::Index i = 0; i < sources.rows(); ++i)
            sims[std::size_t(i)] = double(dots(i));
        return sims;
    }
    const double qn = double(query.norm());
    for (Eigen::Index i = 0; i < sources.rows(); ++i) {
        const double denom = qn * double(sources.row(i).norm());
        sims[std::size_t(i)] = denom > 0.0 ? double(dots(i)) / denom : 0.0;
    }
    return sims;
}

NeighborList top_m(const std::vector<double>& sims, int m, std::optional<ItemIndex> exclude)
{
    if (m < 1)
        throw Error("top_m: m must be >= 1");
    // Min-heap on rank order: the top element is the weakest kept neighbor.
    const auto weaker_on_top = [](const Neighbor& a, const Neighbor& b) { return ranks_before(a, b); };
    std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(weaker_on_top)> heap(weaker_on_top);
    for (std::size_t i = 0; i < sims.size(); ++i) {
        if (exclude && ItemIndex(i) == *exclude)
            continue;
        const Neighbor cand{ItemIndex(i), sims[i]};
        if (int(heap.size()) < m) {
            heap.push(cand);
        } else if (ranks_before(cand, heap.top())) {
            heap.pop();
            heap.push(cand);
        }
    }
    NeighborList out;
    out.reserve(heap.size());
    while (!heap.empty()) {
        out.push_back(heap.top());
        heap.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
}

template <typename Scalar>
NeighborList retrieve_exact(const RowVec<Scalar>& query,
                            const Mat<Scalar>& sources,
                            int m,
                            Similarity kind,
                            std::optional<ItemIndex> exclude)
{
    if (sources.rows() == 0)
        throw Error("retrieve_exact: no sources");
    if (query.size() != sources.cols())
        throw Error("retrieve_exact: query dimension " + std::to_string(query.size()) + " != source dimension "
                    + std::to_string(sources.cols()));
    return top_m(similarities(query, sources, kind), m, exclude);
}

// ---------------------------------------------------------------------------
// HNSW

template <typename Scalar>
HnswIndex<Scalar>::HnswIndex(int dim, Similarity kind, HnswParams params, std::uint64_t seed)
    : dim_(dim), kind_(kind), params_(params), rng_(seed),
      level_mult_(1.0 / std::log(double(std::max(2, params.max_degree))))
{
    if (dim <= 0)
        throw Error("HnswIndex: dimension must be positive");
    if (params.max_degree < 2 || params.ef_construction < 1 || params.ef_search < 1)
        throw Error("HnswIndex: max_degree >= 2 and beam widths >= 1 required");
    data_.resize(0, dim);
}

template <typename Scalar>
Scalar HnswIndex<Scalar>::distance(const Scalar* a, const Scalar* b) const
{
    Scalar dot(0);
    for (int i = 0; i < dim_; ++i)
        dot += a[i] * b[i];
    return kind_ == Similarity::cosine ? Scalar(1) - dot : -dot;
}

template <typename Scalar>
int HnswIndex<Scalar>::draw_level()
{
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double u = std::max(unit(rng_), 1e-12);
    return int(std::floor(-std::log(u) * level_mult_));
}

template <typename Scalar>
std::vector<typename HnswIndex<Scalar>::Candidate>
HnswIndex<Scalar>::search_layer(const Scalar* q, std::int32_t entry, int ef, int level) const
{
    std::vector<char> visited(std::size_t(count_), 0);
    std::priority_queue<Candidate, std::vector<Candidate>, std::greater<Candidate>> frontier;
    std::priority_queue<Candidate> best; // worst on top
    const Scalar d0 = distance(q, vec(entry));
    frontier.emplace(d0, entry);
    best.emplace(d0, entry);
    visited[std::size_t(entry)] = 1;
    while (!frontier.empty()) {
        const Candidate cur = frontier.top();
        if (int(best.size()) >= ef && cur.first > best.top().first)
            break;
        frontier.pop();
        for (std::int32_t nb : links_[std::size_t(cur.second)][std::size_t(level)]) {
            if (visited[std::size_t(nb)])
                continue;
            visited[std::size_t(nb)] = 1;
            const Scalar d = distance(q, vec(nb));
            if (int(best.size()) < ef || Candidate(d, nb) < best.top()) {
                frontier.emplace(d, nb);
                best.emplace(d, nb);
                if (int(best.size()) > ef)
                    best.pop();
            }
        }
    }
    std::vector<Candidate> out;
    out.reserve(best.size());
    while (!best.empty()) {
        out.push_back(best.top());
        best.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
}

template <typename Scalar>
std::vector<std::int32_t> HnswIndex<Scalar>::select_neighbors(const Scalar*, std::vector<Candidate> candidates,
                                                              int limit) const
{
    std::sort(candidates.begin(), candidates.end());
    std::vector<std::int32_t> kept;
    for (const auto& [d, node] : candidates) {
        if (int(kept.size()) >= limit)
            break;
        bool diverse = true;
        for (std::int32_t k : kept) {
            if (distance(vec(node), vec(k)) < d) {
                diverse = false;
                break;
            }
        }
        if (diverse)
            kept.push_back(node);
    }
    return kept;
}

template <typename Scalar>
void HnswIndex<Scalar>::add(const RowVec<Scalar>& row)
{
    if (frozen_)
        throw Error("HnswIndex: cannot add to a frozen index");
    if (row.size() != dim_)
        throw Error("HnswIndex: row dimension mismatch");
    const std::int32_t id = count_++;
    data_.conservativeResize(count_, dim_);
    RowVec<Scalar> stored = row;
    if (kind_ == Similarity::cosine) {
        const Scalar n = stored.norm();
        if (n > Scalar(0))
            stored /= n;
    }
    data_.row(id) = stored;
    const int level = draw_level();
    levels_.push_back(level);
    links_.emplace_back(std::size_t(level + 1));

    if (entry_ < 0) {
        entry_ = id;
        max_level_ = level;
        return;
    }
    const Scalar* q = vec(id);
    std::int32_t cur = entry_;
    for (int l = max_level_; l > level; --l)
        cur = search_layer(q, cur, 1, l).front().second;
    for (int l = std::min(level, max_level_); l >= 0; --l) {
        const auto found = search_layer(q, cur, params_.ef_construction, l);
        const int cap = l == 0 ? 2 * params_.max_degree : params_.max_degree;
        auto chosen = select_neighbors(q, found, params_.max_degree);
        links_[std::size_t(id)][std::size_t(l)] = chosen;
        for (std::int32_t nb : chosen) {
            auto& nb_links = links_[std::size_t(nb)][std::size_t(l)];
            nb_links.push_back(id);
            if (int(nb_links.size()) > cap) {
                std::vector<Candidate> cands;
                cands.reserve(nb_links.size());
                for (std::int32_t x : nb_links)
                    cands.emplace_back(distance(vec(nb), vec(x)), x);
                nb_links = select_neighbors(vec(nb), std::move(cands), cap);
            }
        }
        cur = found.front().second;
    }
    if (level > max_level_) {
        max_level_ = level;
        entry_ = id;
    }
}

template <typename Scalar>
std::size_t HnswIndex<Scalar>::reachable_at_layer0() const
{
    if (entry_ < 0)
        return 0;
    std::vector<char> seen(std::size_t(count_), 0);
    std::vector<std::int32_t> stack{entry_};
    seen[std::size_t(entry_)] = 1;
    std::size_t reached = 1;
    while (!stack.empty()) {
        const std::int32_t node = stack.back();
        stack.pop_back();
        for (std::int32_t nb : links_[std::size_t(node)][0]) {
            if (!seen[std::size_t(nb)]) {
                seen[std::size_t(nb)] = 1;
                ++reached;
                stack.push_back(nb);
            }
        }
    }
    return reached;
}

template <typename Scalar>
void HnswIndex<Scalar>::freeze()
{
    if (frozen_)
        return;
    if (count_ == 0)
        throw Error("HnswIndex: cannot freeze an empty index");
    // Repair layer-0 connectivity: link every unreachable node to its nearest reachable node.
    std::vector<char> seen(std::size_t(count_), 0);
    std::vector<std::int32_t> stack{entry_};
    seen[std::size_t(entry_)] = 1;
    std::size_t repaired = 0;
    auto flood = [&]() {
        while (!stack.empty()) {
            const std::int32_t node = stack.back();
            stack.pop_back();
            for (std::int32_t nb : links_[std::size_t(node)][0])
                if (!seen[std::size_t(nb)]) {
                    seen[std::size_t(nb)] = 1;
                    stack.push_back(nb);
                }
        }
    };
    flood();
    for (std::int32_t node = 0; node < count_; ++node) {
        if (seen[std::size_t(node)])
            continue;
        std::int32_t nearest = -1;
        Scalar best_d = std::numeric_limits<Scalar>::max();
        for (std::int32_t other = 0; other < count_; ++other) {
            if (!seen[std::size_t(other)])
                continue;
            const Scalar d = distance(vec(node), vec(other));
            if (d < best_d) {
                best_d = d;
                nearest = other;
            }
        }
        links_[std::size_t(nearest)][0].push_back(node);
        links_[std::size_t(node)][0].push_back(nearest);
        seen[std::size_t(node)] = 1;
        stack.push_back(node);
        flood();
        ++repaired;
    }
    if (repaired)
        spdlog::debug("hnsw: linked {} unreachable nodes at layer 0", repaired);
    frozen_ = true;
}

template <typename Scalar>
NeighborList HnswIndex<Scalar>::search(const RowVec<Scalar>& query, int m, int ef) const
{
    if (!frozen_)
        throw Error("HnswIndex: query on an unfrozen index");
    if (m < 1)
        throw Error("HnswIndex: m must be >= 1");
    if (query.size() != dim_)
        throw Error("HnswIndex: query dimension mismatch");
    RowVec<Scalar> q = query;
    if (kind_ == Similarity::cosine) {
        const Scalar n = q.norm();
        if (n > Scalar(0))
            q /= n;
    }
    const int beam = std::max(ef > 0 ? ef : params_.ef_search, m);
    std::int32_t cur = entry_;
    for (int l = max_level_; l > 0; --l)
        cur = search_layer(q.data(), cur, 1, l).front().second;
    const auto found = search_layer(q.data(), cur, beam, 0);
    NeighborList out;
    for (const auto& [d, node] : found) {
        const double sim = kind_ == Similarity::cosine ? 1.0 - double(d) : -double(d);
        out.push_back({node, sim});
    }
    std::sort(out.begin(), out.end(), ranks_before);
    if (int(out.size()) > m)
        out.resize(std::size_t(m));
    return out;
}

namespace {

constexpr char kHnswMagic[9] = "IDPHNSW1";

template <typename T>
void put_pod(std::string& out, const T& value)
{
    out.append(reinterpret_cast<const char*>(&value), sizeof(T));
}

template <typename T>
T get_pod(const std::string& in, std::size_t& offset)
{
    if (offset + sizeof(T) > in.size())
        throw Error("hnsw index file truncated");
    T value;
    std::memcpy(&value, in.data() + offset, sizeof(T));
    offset += sizeof(T);
    return value;
}

} // namespace

template <typename Scalar>
std::string HnswIndex<Scalar>::serialize() const
{
    std::string out(kHnswMagic, 8);
    put_pod<std::int32_t>(out, std::int32_t(sizeof(Scalar)));
    put_pod<std::int32_t>(out, dim_);
    put_pod<std::int32_t>(out, kind_ == Similarity::cosine ? 0 : 1);
    put_pod<std::int32_t>(out, params_.max_degree);
    put_pod<std::int32_t>(out, params_.ef_construction);
    put_pod<std::int32_t>(out, params_.ef_search);
    put_pod<std::int32_t>(out, count_);
    put_pod<std::int32_t>(out, entry_);
    put_pod<std::int32_t>(out, max_level_);
    put_pod<std::uint8_t>(out, frozen_ ? 1 : 0);
    out.append(reinterpret_cast<const char*>(data_.data()), std::size_t(data_.size()) * sizeof(Scalar));
    for (std::int32_t node = 0; node < count_; ++node) {
        put_pod<std::int32_t>(out, levels_[std::size_t(node)]);
        for (const auto& lst : links_[std::size_t(node)]) {
            put_pod<std::int32_t>(out, std::int32_t(lst.size()));
            out.append(reinterpret_cast<const char*>(lst.data()), lst.size() * sizeof(std::int32_t));
        }
    }
    return out;
}

template <typename Scalar>
HnswIndex<Scalar> HnswIndex<Scalar>::deserialize(const std::string& bytes)
{
    if (bytes.size() < 8 || bytes.compare(0, 8, kHnswMagic) != 0)
        throw Error("not an IDPHNSW1 index");
    std::size_t off = 8;
    if (get_pod<std::int32_t>(bytes, off) != std::int32_t(sizeof(Scalar)))
        throw Error("hnsw index scalar width mismatch");
    const int dim = get_pod<std::int32_t>(bytes, off);
    const Similarity kind = get_pod<std::int32_t>(bytes, off) == 0 ? Similarity::cosine : Similarity::dot;
    HnswParams p;
    p.max_degree = get_pod<std::int32_t>(bytes, off);
    p.ef_construction = get_pod<std::int32_t>(bytes, off);
    p.ef_search = get_pod<std::int32_t>(bytes, off);
    HnswIndex idx(dim, kind, p, 0);
    idx.count_ = get_pod<std::int32_t>(bytes, off);
    idx.entry_ = get_pod<std::int32_t>(bytes, off);
    idx.max_level_ = get_pod<std::int32_t>(bytes, off);
    idx.frozen_ = get_pod<std::uint8_t>(bytes, off) != 0;
    idx.data_.resize(idx.count_, dim);
    const std::size_t nbytes = std::size_t(idx.data_.size()) * sizeof(Scalar);
    if (off + nbytes > bytes.size())
        throw Error("hnsw index file truncated");
    std::memcpy(idx.data_.data(), bytes.data() + off, nbytes);
    off += nbytes;
    for (std::int32_t node = 0; node < idx.count_; ++node) {
        const int level = get_pod<std::int32_t>(bytes, off);
        idx.levels_.push_back(level);
        idx.links_.emplace_back(std::size_t(level + 1));
        for (auto& lst : idx.links_.back()) {
            lst.resize(std::size_t(get_pod<std::int32_t>(bytes, off)));
            const std::size_t lb = lst.size() * sizeof(std::int32_t);
            if (off + lb > bytes.size())
                throw Error("hnsw index file truncated");
            std::memcpy(lst.data(), bytes.data() + off, lb);
            off += lb;
        }
    }
    return idx;
}

template <typename Scalar>
HnswIndex<Scalar> build_index(const Mat<Scalar>& sources, Similarity kind, HnswParams params, std::uint64_t seed)
{
    if (sources.rows() == 0)
        throw Error("build_index: no sources");
    HnswIndex<Scalar> index(int(sources.cols()), kind, params, seed);
    for (Eigen::Index i = 0; i < sources.rows(); ++i)
        index.add(sources.row(i));
    index.freeze();
    return index;
}

template <typename Scalar>
double ann_recall(const HnswIndex<Scalar>& index, const Mat<Scalar>& sources, const Mat<Scalar>& queries, int m,
                  Similarity kind, int ef)
{
    double total = 0.0;
    for (Eigen::Index q = 0; q < queries.rows(); ++q) {
        const RowVec<Scalar> query = queries.row(q);
        const auto exact = retrieve_exact<Scalar>(query, sources, m, kind);
        const auto approx = index.search(query, m, ef);
        std::set<ItemIndex> truth;
        for (const auto& n : exact)
            truth.insert(n.index);
        std::size_t hit = 0;
        for (const auto& n : approx)
            hit += truth.count(n.index);
        total += double(hit) / double(exact.size());
    }
    return total / double(queries.rows());
}

// ---------------------------------------------------------------------------
// Aggregation

std::vector<double> aggregation_weights(const NeighborList& neighbors, bool* uniform_fallback, double eps)
{
    if (neighbors.empty())
        throw Error("aggregation_weights: empty neighbor list");
    std::vector<double> w(neighbors.size());
    double total = 0.0;
    for (std::size_t i = 0; i < neighbors.size(); ++i) {
        w[i] = std::max(0.0, neighbors[i].similarity);
        total += w[i];
    }
    const bool uniform = total <= eps;
    if (uniform_fallback)
        *uniform_fallback = uniform;
    for (auto& x : w)
        x = uniform ? 1.0 / double(neighbors.size()) : x / total;
    return w;
}

template <typename Scalar>
GeneratedEmbeddings<Scalar> generate_embeddings(const NeighborAssignment& assignment,
                                                const Mat<Scalar>& source_embeddings)
{
    if (assignment.targets.size() != assignment.rows.size())
        throw Error("generate_embeddings: targets and rows differ in length");
    GeneratedEmbeddings<Scalar> out;
    out.targets = assignment.targets;
    out.embeddings = Mat<Scalar>::Zero(Eigen::Index(assignment.rows.size()), source_embeddings.cols());
    out.provenance.resize(assignment.rows.size());
    std::size_t uniform = 0;
    std::size_t cold = 0;
    for (std::size_t i = 0; i < assignment.rows.size(); ++i) {
        const NeighborList& row = assignment.rows[i];
        RowProvenance& prov = out.provenance[i];
        prov.neighbors = row;
        if (row.empty()) {
            prov.cold_fallback = true;
            ++cold;
            continue;
        }
        for (const auto& n : row)
            if (n.index < 0 || n.index >= source_embeddings.rows())
                throw Error("generate_embeddings: neighbor index " + std::to_string(n.index) + " out of range");
        prov.weights = aggregation_weights(row, &prov.uniform_fallback);
        uniform += prov.uniform_fallback ? 1 : 0;
        // Accumulate in double so the weights' unit sum carries through.
        RowVec<double> acc = RowVec<double>::Zero(source_embeddings.cols());
        for (std::size_t k = 0; k < row.size(); ++k)
            acc += prov.weights[k] * source_embeddings.row(row[k].index).template cast<double>();
        out.embeddings.row(Eigen::Index(i)) = acc.cast<Scalar>();
    }
    if (uniform)
        spdlog::warn("generate_embeddings: {} rows had no positive similarity; used uniform weights", uniform);
    if (cold)
        spdlog::warn("generate_embeddings: {} rows had no vector; used zero rows", cold);
    return out;
}

template <typename Scalar>
NeighborAssignment assign_neighbors(const std::vector<ItemIndex>& targets, const Mat<Scalar>& queries,
                                    const std::vector<bool>& present, const Mat<Scalar>& sources, int m,
                                    Similarity kind, const HnswIndex<Scalar>* index)
{
    if (Eigen::Index(targets.size()) != queries.rows() || present.size() != targets.size())
        throw Error("assign_neighbors: targets, queries and presence flags differ in length");
    if (m < 1)
        throw Error("assign_neighbors: m must be >= 1");
    if (sources.rows() == 0)
        throw Error("assign_neighbors: no sources");
    NeighborAssignment out;
    out.targets = targets;
    out.rows.resize(targets.size());
    for (std::size_t i = 0; i < targets.size(); ++i) {
        if (!present[i])
            continue;
        const RowVec<Scalar> q = queries.row(Eigen::Index(i));
        out.rows[i] = index ? index->search(q, m) : retrieve_exact<Scalar>(q, sources, m, kind);
    }
    return out;
}

template <typename Scalar>
GeneratedEmbeddings<Scalar> generate_inner_domain(const Mat<Scalar>& embeddings, const Mat<Scalar>& adapted,
                                                  const std::vector<bool>& has_vector,
                                                  const std::vector<ItemIndex>& domain_items,
                                                  const std::vector<ItemIndex>& cold, int m, Similarity kind)
{
    if (adapted.rows() != embeddings.rows() || has_vector.size() != std::size_t(embeddings.rows()))
        throw Error("generate_inner_domain: embeddings, vectors and presence flags cover different items");
    GeneratedEmbeddings<Scalar> out;
    if (cold.empty()) {
        out.embeddings.resize(0, embeddings.cols());
        return out;
    }
    const std::set<ItemIndex> cold_set(cold.begin(), cold.end());
    std::vector<ItemIndex> warm;
    for (ItemIndex v : domain_items)
        if (!cold_set.count(v) && has_vector.at(std::size_t(v)))
            warm.push_back(v);
    if (warm.empty())
        throw Error("generate_inner_domain: no warm item with a vector");
    Mat<Scalar> sources(Eigen::Index(warm.size()), adapted.cols());
    for (std::size_t i = 0; i < warm.size(); ++i)
        sources.row(Eigen::Index(i)) = adapted.row(warm[i]);
    Mat<Scalar> queries(Eigen::Index(cold.size()), adapted.cols());
    std::vector<bool> present(cold.size());
    for (std::size_t i = 0; i < cold.size(); ++i) {
        queries.row(Eigen::Index(i)) = adapted.row(cold[i]);
        present[i] = has_vector.at(std::size_t(cold[i]));
    }
    NeighborAssignment assignment = assign_neighbors<Scalar>(cold, queries, present, sources, m, kind);
    for (auto& row : assignment.rows)
        for (auto& n : row)
            n.index = warm[std::size_t(n.index)];
    return generate_embeddings(assignment, embeddings);
}

template <typename Scalar>
void apply_generated(Mat<Scalar>& table, const GeneratedEmbeddings<Scalar>& generated)
{
    if (generated.embeddings.rows() > 0 && generated.embeddings.cols() != table.cols())
        throw Error("apply_generated: dimension mismatch");
    for (std::size_t i = 0; i < generated.targets.size(); ++i)
        table.row(generated.targets[i]) = generated.embeddings.row(Eigen::Index(i));
}

namespace {

std::string fmt6(double v)
{
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

} // namespace

void write_assignment_tsv(const std::filesystem::path& path, const NeighborAssignment& assignment,
                          const std::vector<std::string>& target_names,
                          const std::vector<std::string>& source_names)
{
    std::string out;
    for (std::size_t i = 0; i < assignment.targets.size(); ++i) {
        out += target_names.at(std::size_t(assignment.targets[i]));
        out += '\t';
        for (std::size_t k = 0; k < assignment.rows[i].size(); ++k) {
            if (k)
                out += ',';
            out += source_names.at(std::size_t(assignment.rows[i][k].index)) + ":"
                   + fmt6(assignment.rows[i][k].similarity);
        }
        out += '\n';
    }
    write_file_bytes(path, out);
}

template <typename Scalar>
void write_provenance_tsv(const std::filesystem::path& path, const GeneratedEmbeddings<Scalar>& generated,
                          const std::vector<std::string>& target_names,
                          const std::vector<std::string>& source_names)
{
    std::string out;
    for (std::size_t i = 0; i < generated.targets.size(); ++i) {
        const auto& prov = generated.provenance[i];
        out += target_names.at(std::size_t(generated.targets[i]));
        out += '\t';
        out += prov.cold_fallback ? "cold" : prov.uniform_fallback ? "uniform" : "weighted";
        out += '\t';
        for (std::size_t k = 0; k < prov.weights.size(); ++k) {
            if (k)
                out += ',';
            out += source_names.at(std::size_t(prov.neighbors[k].index)) + ":" + fmt6(prov.weights[k]);
        }
        out += '\n';
    }
    write_file_bytes(path, out);
}

#define IDP_INSTANTIATE_MATCHER(S)                                                                               \
    template std::vector<double> similarities<S>(const RowVec<S>&, const Mat<S>&, Similarity);                   \
    template NeighborList retrieve_exact<S>(const RowVec<S>&, const Mat<S>&, int, Similarity,                    \
                                            std::optional<ItemIndex>);                                           \
    template class HnswIndex<S>;                                                                                 \
    template HnswIndex<S> build_index<S>(const Mat<S>&, Similarity, HnswParams, std::uint64_t);                  \
    template double ann_recall<S>(const HnswIndex<S>&, const Mat<S>&, const Mat<S>&, int, Similarity, int);      \
    template GeneratedEmbeddings<S> generate_embeddings<S>(const NeighborAssignment&, const Mat<S>&);            \
    template NeighborAssignment assign_neighbors<S>(const std::vector<ItemIndex>&, const Mat<S>&,               \
                                                    const std::vector<bool>&, const Mat<S>&, int, Similarity,    \
                                                    const HnswIndex<S>*);                                        \
    template GeneratedEmbeddings<S> generate_inner_domain<S>(const Mat<S>&, const Mat<S>&,                      \
                                                             const std::vector<bool>&,                           \
                                                             const std::vector<ItemIndex>&,                      \
                                                             const std::vector<ItemIndex>&, int, Similarity);    \
    template void apply_generated<S>(Mat<S>&, const GeneratedEmbeddings<S>&);                                    \
    template void write_provenance_tsv<S>(const std::filesystem::path&, const GeneratedEmbeddings<S>&,           \
                                          const std::vector<std::string>&, const std::vector<std::string>&);

IDP_INSTANTIATE_MATCHER(float)
IDP_INSTANTIATE_MATCHER(double)

} // namespace idp
