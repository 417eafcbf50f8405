#pragma once

#include "idp/types.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace idp {

struct Neighbor {
    ItemIndex index = 0;
    double similarity = 0.0;

    bool operator==(const Neighbor&) const = default;
};

using NeighborList = std::vector<Neighbor>;

/// True when `a` ranks ahead of `b`: higher similarity, then lower index.
inline bool ranks_before(const Neighbor& a, const Neighbor& b)
{
    return a.similarity > b.similarity || (a.similarity == b.similarity && a.index < b.index);
}

/// Per-target top-m source items; an empty row marks a target with no vector.
struct NeighborAssignment {
    std::vector<ItemIndex> targets;
    std::vector<NeighborList> rows;
};

/// Row-wise similarity of `query` against every source row. Cosine rows with
/// zero norm score 0.
template <typename Scalar>
std::vector<double> similarities(const RowVec<Scalar>& query, const Mat<Scalar>& sources, Similarity kind);

/// Exact top-m (bounded heap), similarity descending, ties to the lower
/// source index. `exclude` drops one source row from consideration.
template <typename Scalar>
NeighborList retrieve_exact(const RowVec<Scalar>& query,
                            const Mat<Scalar>& sources,
                            int m,
                            Similarity kind,
                            std::optional<ItemIndex> exclude = std::nullopt);

/// Top-m from a precomputed similarity vector.
NeighborList top_m(const std::vector<double>& sims, int m, std::optional<ItemIndex> exclude = std::nullopt);

struct HnswParams {
    int max_degree = 16;
    int ef_construction = 200;
    int ef_search = 200;
};

/// Layered navigable small-world graph over source rows.
///
/// Rows are added with `add`, then `freeze` repairs layer-0 connectivity and
/// makes the index read-only. Searching before `freeze` throws.
template <typename Scalar>
class HnswIndex {
public:
    HnswIndex(int dim, Similarity kind, HnswParams params, std::uint64_t seed);

    void add(const RowVec<Scalar>& row);
    void freeze();
    bool frozen() const { return frozen_; }

    std::size_t size() const { return std::size_t(count_); }
    const HnswParams& params() const { return params_; }

    /// Approximate top-m; `ef` <= 0 uses the configured query beam width.
    NeighborList search(const RowVec<Scalar>& query, int m, int ef = 0) const;

    /// Number of layer-0 nodes reachable from the entry point.
    std::size_t reachable_at_layer0() const;
    int max_level() const { return max_level_; }

    std::string serialize() const;
    static HnswIndex deserialize(const std::string& bytes);

private:
    using Candidate = std::pair<Scalar, std::int32_t>; // (distance, node)

    Scalar distance(const Scalar* a, const Scalar* b) const;
    const Scalar* vec(std::int32_t node) const { return data_.data() + std::size_t(node) * std::size_t(dim_); }
    std::vector<Candidate> search_layer(const Scalar* q, std::int32_t entry, int ef, int level) const;
    std::vector<std::int32_t> select_neighbors(const Scalar* base, std::vector<Candidate> candidates, int limit) const;
    int draw_level();

    int dim_;
    Similarity kind_;
    HnswParams params_;
    std::mt19937_64 rng_;
    double level_mult_;
    // Row-major storage, one row per node; normalized for cosine.
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> data_;
    std::int32_t count_ = 0;
    std::vector<int> levels_;
    // links_[node][level] = neighbor ids
    std::vector<std::vector<std::vector<std::int32_t>>> links_;
    std::int32_t entry_ = -1;
    int max_level_ = -1;
    bool frozen_ = false;
};

template <typename Scalar>
HnswIndex<Scalar> build_index(const Mat<Scalar>& sources, Similarity kind, HnswParams params, std::uint64_t seed);

/// Mean recall@m of the index against exact search over `queries`.
template <typename Scalar>
double ann_recall(const HnswIndex<Scalar>& index, const Mat<Scalar>& sources, const Mat<Scalar>& queries, int m,
                  Similarity kind, int ef = 0);

struct RowProvenance {
    NeighborList neighbors;
    std::vector<double> weights;
    bool uniform_fallback = false;
    bool cold_fallback = false;
};

/// Synthesized embedding table; row i belongs to `targets[i]`.
template <typename Scalar>
struct GeneratedEmbeddings {
    std::vector<ItemIndex> targets;
    Mat<Scalar> embeddings;
    std::vector<RowProvenance> provenance;
};

constexpr double kWeightEpsilon = 1e-8;

/// Aggregation weights: similarities clamped at 0 and normalized; uniform over
/// the neighbors when the clamped total is <= `eps`.
std::vector<double> aggregation_weights(const NeighborList& neighbors, bool* uniform_fallback = nullptr,
                                        double eps = kWeightEpsilon);

/// e_T = sum_k w_k e_S[k]. Targets with an empty neighbor row get a zero row
/// flagged as a cold fallback.
template <typename Scalar>
GeneratedEmbeddings<Scalar> generate_embeddings(const NeighborAssignment& assignment,
                                                const Mat<Scalar>& source_embeddings);

/// Top-m rows of `sources` for each row of `queries`; `targets[i]` labels
/// query row i. Rows with `present[i] == false` get an empty neighbor list.
/// With an index the approximate path is used.
template <typename Scalar>
NeighborAssignment assign_neighbors(const std::vector<ItemIndex>& targets, const Mat<Scalar>& queries,
                                    const std::vector<bool>& present, const Mat<Scalar>& sources, int m,
                                    Similarity kind, const HnswIndex<Scalar>* index = nullptr);

/// Cold-start generation inside one domain. Sources are the items of
/// `domain_items` that are neither cold nor lacking a vector; neighbor indices
/// in the result are global item indices into `embeddings`. Warm rows of
/// `embeddings` are not touched.
template <typename Scalar>
GeneratedEmbeddings<Scalar> generate_inner_domain(const Mat<Scalar>& embeddings, const Mat<Scalar>& adapted,
                                                  const std::vector<bool>& has_vector,
                                                  const std::vector<ItemIndex>& domain_items,
                                                  const std::vector<ItemIndex>& cold, int m, Similarity kind);

/// Copies each generated row into `table` at its target index.
template <typename Scalar>
void apply_generated(Mat<Scalar>& table, const GeneratedEmbeddings<Scalar>& generated);

/// Writes `target<TAB>source:sim,...` using the given item names.
void write_assignment_tsv(const std::filesystem::path& path, const NeighborAssignment& assignment,
                          const std::vector<std::string>& target_names,
                          const std::vector<std::string>& source_names);

/// Writes `target<TAB>kind<TAB>source:weight,...` with kind in {weighted, uniform, cold}.
template <typename Scalar>
void write_provenance_tsv(const std::filesystem::path& path, const GeneratedEmbeddings<Scalar>& generated,
                          const std::vector<std::string>& target_names,
                          const std::vector<std::string>& source_names);

} // namespace idp
