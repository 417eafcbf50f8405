#pragma once

#include "idp/types.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

namespace idp {

struct Interaction {
    std::string user;
    std::string item;
    std::int64_t timestamp = 0;
    std::string domain;
};

/// Per-domain user sequences over one dense, collision-free item index space.
///
/// Users are keyed by (domain, user string) and items by (domain, item string),
/// so identical strings from different domains never alias. Indices are
/// assigned in order of first appearance.
class InteractionStore {
public:
    InteractionStore() = default;

    /// Builds a store from interactions in input order. Each user's sequence is
    /// stably sorted by timestamp, so ties keep input order.
    static InteractionStore from_interactions(const std::vector<Interaction>& rows);

    const std::vector<std::string>& domains() const { return domains_; }
    std::size_t num_users() const { return users_.size(); }
    std::size_t num_items() const { return items_.size(); }
    std::size_t num_interactions() const;
    std::size_t num_users(const std::string& domain) const;
    std::size_t num_items(const std::string& domain) const;

    const std::vector<ItemIndex>& sequence(UserIndex u) const { return sequences_.at(u); }
    const std::vector<std::int64_t>& timestamps(UserIndex u) const { return timestamps_.at(u); }

    const std::string& user_name(UserIndex u) const { return users_.at(u).second; }
    const std::string& user_domain(UserIndex u) const { return domains_.at(users_.at(u).first); }
    const std::string& item_name(ItemIndex v) const { return items_.at(v).second; }
    const std::string& item_domain(ItemIndex v) const { return domains_.at(items_.at(v).first); }

    std::optional<ItemIndex> find_item(const std::string& domain, const std::string& item) const;
    std::optional<UserIndex> find_user(const std::string& domain, const std::string& user) const;
    std::vector<ItemIndex> items_in_domain(const std::string& domain) const;

    /// Flattens back into interactions (users in index order, sequence order).
    std::vector<Interaction> to_interactions() const;

    bool operator==(const InteractionStore& other) const = default;

private:
    friend InteractionStore merge_domains(const std::vector<InteractionStore>& stores);

    int domain_index(const std::string& domain);

    std::vector<std::string> domains_;
    std::vector<std::pair<int, std::string>> users_;
    std::vector<std::pair<int, std::string>> items_;
    std::map<std::pair<int, std::string>, ItemIndex> item_lookup_;
    std::map<std::pair<int, std::string>, UserIndex> user_lookup_;
    std::vector<std::vector<ItemIndex>> sequences_;
    std::vector<std::vector<std::int64_t>> timestamps_;
};

/// Reads `user<TAB>item<TAB>timestamp<TAB>domain` lines.
InteractionStore ingest(const std::filesystem::path& path);
std::vector<Interaction> read_interactions(const std::filesystem::path& path);
void write_interactions(const std::filesystem::path& path, const std::vector<Interaction>& rows);

/// Iteratively drops users and items with fewer than `k` interactions until
/// nothing changes, then reindexes densely.
InteractionStore filter_min_interactions(const InteractionStore& store, int k);

/// Concatenates stores; item indices of store i are offset by the item counts
/// of stores 0..i-1. Users are never unified across stores.
InteractionStore merge_domains(const std::vector<InteractionStore>& stores);

/// Keeps only the named domains (in the given order of first appearance).
InteractionStore select_domains(const InteractionStore& store, const std::vector<std::string>& domains);

/// Removes the given items from every sequence; users left empty are dropped.
/// Item indices are preserved (the catalog is unchanged).
std::vector<std::vector<ItemIndex>> sequences_without(const InteractionStore& store,
                                                      const std::vector<ItemIndex>& removed);

constexpr std::size_t kNumEvalNegatives = 99;

struct UserSplit {
    UserIndex user = 0;
    std::vector<ItemIndex> train;
    ItemIndex valid = 0;
    ItemIndex test = 0;
    std::vector<ItemIndex> negatives;
};

struct LeaveOneOutSplit {
    std::vector<UserSplit> users;
    std::size_t excluded_users = 0;
    std::size_t num_items = 0;
};

/// Last item is the test target, second-to-last the validation target.
/// Negatives are drawn per user from a generator seeded by (seed, user), so
/// each user's draw is independent of the others.
LeaveOneOutSplit split_leave_one_out(const InteractionStore& store, std::uint64_t seed);

/// Same protocol over explicit sequences and an explicit candidate catalog.
LeaveOneOutSplit split_leave_one_out(const std::vector<std::vector<ItemIndex>>& sequences,
                                     const std::vector<ItemIndex>& catalog,
                                     std::uint64_t seed);

// Vector files: `item<TAB>v1,v2,...,vD`.
struct VectorRow {
    std::string item;
    std::vector<double> values;
};

std::vector<VectorRow> read_vector_tsv(const std::filesystem::path& path);
void write_vector_tsv(const std::filesystem::path& path, const std::vector<VectorRow>& rows);

struct SynthSpec {
    int clusters = 8;
    int domains = 2;
    int items_per_domain = 500;
    int users_per_domain = 2000;
    int sequence_length = 20;
    /// Self-transition weight; the chain stays in its cluster with
    /// probability c / (c + 1) and otherwise moves to the next cluster.
    double concentration = 3.0;
    int text_dim = 32;
    double text_noise = 0.5;
    /// Zipf exponent of item popularity inside a cluster.
    double popularity_exponent = 1.0;

    double self_transition_probability() const;
};

struct SyntheticCorpus {
    std::vector<std::string> domains;
    std::vector<Interaction> interactions;
    /// Text vectors per domain, in item order.
    std::vector<std::vector<VectorRow>> text;
    /// Latent cluster per (domain, item string).
    std::map<std::pair<std::string, std::string>, int> cluster;
};

SyntheticCorpus synthesize_corpus(const SynthSpec& spec, std::uint64_t seed);

/// Writes `interactions.tsv` and `text_<domain>.tsv` into `dir`.
void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir);

/// Fraction of consecutive pairs whose items share a cluster.
double same_cluster_transition_rate(const SyntheticCorpus& corpus);

} // namespace idp
