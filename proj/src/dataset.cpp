#include "idp/dataset.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <charconv>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <unordered_set>

namespace idp {

namespace {

std::vector<std::string_view> split_view(std::string_view line, char sep)
{
    std::vector<std::string_view> fields;
    std::size_t start = 0;
    while (true) {
        const std::size_t pos = line.find(sep, start);
        if (pos == std::string_view::npos) {
            fields.push_back(line.substr(start));
            break;
        }
        fields.push_back(line.substr(start, pos - start));
        start = pos + 1;
    }
    return fields;
}

std::string_view strip_cr(std::string_view line)
{
    if (!line.empty() && line.back() == '\r')
        line.remove_suffix(1);
    return line;
}

} // namespace

int InteractionStore::domain_index(const std::string& domain)
{
    const auto it = std::find(domains_.begin(), domains_.end(), domain);
    if (it != domains_.end())
        return int(it - domains_.begin());
    domains_.push_back(domain);
    return int(domains_.size() - 1);
}

InteractionStore InteractionStore::from_interactions(const std::vector<Interaction>& rows)
{
    InteractionStore store;
    for (const auto& row : rows) {
        const int dom = store.domain_index(row.domain);
        auto [uit, new_user] = store.user_lookup_.try_emplace({dom, row.user}, UserIndex(store.users_.size()));
        if (new_user) {
            store.users_.emplace_back(dom, row.user);
            store.sequences_.emplace_back();
            store.timestamps_.emplace_back();
        }
        auto [iit, new_item] = store.item_lookup_.try_emplace({dom, row.item}, ItemIndex(store.items_.size()));
        if (new_item)
            store.items_.emplace_back(dom, row.item);
        store.sequences_[uit->second].push_back(iit->second);
        store.timestamps_[uit->second].push_back(row.timestamp);
    }
    for (std::size_t u = 0; u < store.sequences_.size(); ++u) {
        auto& seq = store.sequences_[u];
        auto& ts = store.timestamps_[u];
        std::vector<std::size_t> order(seq.size());
        std::iota(order.begin(), order.end(), 0);
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return ts[a] < ts[b]; });
        std::vector<ItemIndex> sorted_seq(seq.size());
        std::vector<std::int64_t> sorted_ts(ts.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            sorted_seq[i] = seq[order[i]];
            sorted_ts[i] = ts[order[i]];
        }
        seq = std::move(sorted_seq);
        ts = std::move(sorted_ts);
    }
    return store;
}

std::size_t InteractionStore::num_interactions() const
{
    std::size_t total = 0;
    for (const auto& s : sequences_)
        total += s.size();
    return total;
}

std::size_t InteractionStore::num_users(const std::string& domain) const
{
    return std::size_t(std::count_if(users_.begin(), users_.end(),
                                     [&](const auto& u) { return domains_[u.first] == domain; }));
}

std::size_t InteractionStore::num_items(const std::string& domain) const
{
    return std::size_t(std::count_if(items_.begin(), items_.end(),
                                     [&](const auto& v) { return domains_[v.first] == domain; }));
}

std::optional<ItemIndex> InteractionStore::find_item(const std::string& domain, const std::string& item) const
{
    const auto dit = std::find(domains_.begin(), domains_.end(), domain);
    if (dit == domains_.end())
        return std::nullopt;
    const auto it = item_lookup_.find({int(dit - domains_.begin()), item});
    if (it == item_lookup_.end())
        return std::nullopt;
    return it->second;
}

std::optional<UserIndex> InteractionStore::find_user(const std::string& domain, const std::string& user) const
{
    const auto dit = std::find(domains_.begin(), domains_.end(), domain);
    if (dit == domains_.end())
        return std::nullopt;
    const auto it = user_lookup_.find({int(dit - domains_.begin()), user});
    if (it == user_lookup_.end())
        return std::nullopt;
    return it->second;
}

std::vector<ItemIndex> InteractionStore::items_in_domain(const std::string& domain) const
{
    std::vector<ItemIndex> out;
    for (std::size_t v = 0; v < items_.size(); ++v)
        if (domains_[items_[v].first] == domain)
            out.push_back(ItemIndex(v));
    return out;
}

std::vector<Interaction> InteractionStore::to_interactions() const
{
    std::vector<Interaction> rows;
    rows.reserve(num_interactions());
    for (std::size_t u = 0; u < users_.size(); ++u) {
        for (std::size_t i = 0; i < sequences_[u].size(); ++i) {
            const auto& item = items_[sequences_[u][i]];
            rows.push_back({users_[u].second, item.second, timestamps_[u][i], domains_[users_[u].first]});
        }
    }
    return rows;
}

std::vector<Interaction> read_interactions(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open interaction file: " + path.string());
    std::vector<Interaction> rows;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view view = strip_cr(line);
        if (view.empty())
            continue;
        const auto fields = split_view(view, '\t');
        if (fields.size() != 4)
            throw ParseError(path.string(), lineno,
                             "expected 4 tab-separated fields, found " + std::to_string(fields.size()));
        for (const auto& f : fields)
            if (f.empty())
                throw ParseError(path.string(), lineno, "empty field");
        Interaction row;
        row.user = std::string(fields[0]);
        row.item = std::string(fields[1]);
        row.domain = std::string(fields[3]);
        const auto ts = fields[2];
        const auto [ptr, ec] = std::from_chars(ts.data(), ts.data() + ts.size(), row.timestamp);
        if (ec != std::errc() || ptr != ts.data() + ts.size())
            throw ParseError(path.string(), lineno, "timestamp is not an integer: " + std::string(ts));
        if (row.timestamp < 0)
            throw ParseError(path.string(), lineno, "negative timestamp");
        rows.push_back(std::move(row));
    }
    if (rows.empty())
        throw Error("interaction file is empty: " + path.string());
    return rows;
}

InteractionStore ingest(const std::filesystem::path& path)
{
    return InteractionStore::from_interactions(read_interactions(path));
}

void write_interactions(const std::filesystem::path& path, const std::vector<Interaction>& rows)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot write interaction file: " + path.string());
    for (const auto& r : rows)
        out << r.user << '\t' << r.item << '\t' << r.timestamp << '\t' << r.domain << '\n';
    if (!out)
        throw Error("write failed: " + path.string());
}

InteractionStore filter_min_interactions(const InteractionStore& store, int k)
{
    if (k < 1)
        throw Error("filter_min_interactions: k must be >= 1");
    std::vector<Interaction> rows = store.to_interactions();
    while (true) {
        std::map<std::pair<std::string, std::string>, int> user_count;
        std::map<std::pair<std::string, std::string>, int> item_count;
        for (const auto& r : rows) {
            ++user_count[{r.domain, r.user}];
            ++item_count[{r.domain, r.item}];
        }
        std::vector<Interaction> kept;
        kept.reserve(rows.size());
        for (const auto& r : rows)
            if (user_count[{r.domain, r.user}] >= k && item_count[{r.domain, r.item}] >= k)
                kept.push_back(r);
        if (kept.empty())
            throw Error("dataset exhausted by filtering");
        if (kept.size() == rows.size())
            break;
        rows = std::move(kept);
    }
    return InteractionStore::from_interactions(rows);
}

InteractionStore merge_domains(const std::vector<InteractionStore>& stores)
{
    if (stores.empty())
        throw Error("merge_domains: no stores given");
    InteractionStore merged;
    for (const auto& s : stores) {
        const ItemIndex item_offset = ItemIndex(merged.items_.size());
        std::vector<int> dom_map;
        for (const auto& d : s.domains_)
            dom_map.push_back(merged.domain_index(d));
        for (const auto& [dom, name] : s.items_) {
            const int gd = dom_map[dom];
            if (merged.item_lookup_.count({gd, name}))
                throw Error("merge_domains: item '" + name + "' of domain '" + s.domains_[dom]
                            + "' appears in more than one store");
            merged.item_lookup_[{gd, name}] = ItemIndex(merged.items_.size());
            merged.items_.emplace_back(gd, name);
        }
        for (std::size_t u = 0; u < s.users_.size(); ++u) {
            const int gd = dom_map[s.users_[u].first];
            // Same user string in another store stays a distinct user: key by store position.
            std::string name = s.users_[u].second;
            while (merged.user_lookup_.count({gd, name}))
                name += "'";
            merged.user_lookup_[{gd, name}] = UserIndex(merged.users_.size());
            merged.users_.emplace_back(gd, name);
            std::vector<ItemIndex> seq = s.sequences_[u];
            for (auto& v : seq)
                v += item_offset;
            merged.sequences_.push_back(std::move(seq));
            merged.timestamps_.push_back(s.timestamps_[u]);
        }
    }
    return merged;
}

InteractionStore select_domains(const InteractionStore& store, const std::vector<std::string>& domains)
{
    for (const auto& d : domains)
        if (std::find(store.domains().begin(), store.domains().end(), d) == store.domains().end())
            throw Error("unknown domain: " + d);
    std::vector<Interaction> rows;
    for (const auto& r : store.to_interactions())
        if (std::find(domains.begin(), domains.end(), r.domain) != domains.end())
            rows.push_back(r);
    if (rows.empty())
        throw Error("select_domains: no interactions in the requested domains");
    return InteractionStore::from_interactions(rows);
}

std::vector<std::vector<ItemIndex>> sequences_without(const InteractionStore& store,
                                                      const std::vector<ItemIndex>& removed)
{
    const std::unordered_set<ItemIndex> drop(removed.begin(), removed.end());
    std::vector<std::vector<ItemIndex>> out;
    for (std::size_t u = 0; u < store.num_users(); ++u) {
        std::vector<ItemIndex> seq;
        for (ItemIndex v : store.sequence(UserIndex(u)))
            if (!drop.count(v))
                seq.push_back(v);
        out.push_back(std::move(seq));
    }
    return out;
}

LeaveOneOutSplit split_leave_one_out(const std::vector<std::vector<ItemIndex>>& sequences,
                                     const std::vector<ItemIndex>& catalog,
                                     std::uint64_t seed)
{
    LeaveOneOutSplit split;
    split.num_items = catalog.size();
    for (std::size_t u = 0; u < sequences.size(); ++u) {
        const auto& seq = sequences[u];
        if (seq.size() < 3) {
            ++split.excluded_users;
            continue;
        }
        UserSplit us;
        us.user = UserIndex(u);
        us.train.assign(seq.begin(), seq.end() - 2);
        us.valid = seq[seq.size() - 2];
        us.test = seq.back();

        const std::unordered_set<ItemIndex> touched(seq.begin(), seq.end());
        std::size_t available = 0;
        for (ItemIndex v : catalog)
            available += touched.count(v) ? 0 : 1;
        if (available < kNumEvalNegatives)
            throw Error("split_leave_one_out: user " + std::to_string(u) + " has only "
                        + std::to_string(available) + " untouched items; 99 negatives required");

        std::seed_seq sseq{std::uint32_t(seed), std::uint32_t(seed >> 32), std::uint32_t(u)};
        std::mt19937_64 rng(sseq);
        std::uniform_int_distribution<std::size_t> pick(0, catalog.size() - 1);
        std::unordered_set<ItemIndex> chosen;
        while (us.negatives.size() < kNumEvalNegatives) {
            const ItemIndex v = catalog[pick(rng)];
            if (touched.count(v) || !chosen.insert(v).second)
                continue;
            us.negatives.push_back(v);
        }
        split.users.push_back(std::move(us));
    }
    if (split.excluded_users > 0)
        spdlog::info("leave-one-out split: excluded {} users with fewer than 3 interactions",
                     split.excluded_users);
    return split;
}

LeaveOneOutSplit split_leave_one_out(const InteractionStore& store, std::uint64_t seed)
{
    std::vector<std::vector<ItemIndex>> seqs;
    seqs.reserve(store.num_users());
    for (std::size_t u = 0; u < store.num_users(); ++u)
        seqs.push_back(store.sequence(UserIndex(u)));
    std::vector<ItemIndex> catalog(store.num_items());
    std::iota(catalog.begin(), catalog.end(), 0);
    return split_leave_one_out(seqs, catalog, seed);
}

std::vector<VectorRow> read_vector_tsv(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw Error("cannot open vector file: " + path.string());
    std::vector<VectorRow> rows;
    std::string line;
    std::size_t lineno = 0;
    std::size_t dim = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string_view view = strip_cr(line);
        if (view.empty())
            continue;
        const auto fields = split_view(view, '\t');
        if (fields.size() != 2 || fields[0].empty())
            throw ParseError(path.string(), lineno, "expected item<TAB>v1,v2,...");
        VectorRow row;
        row.item = std::string(fields[0]);
        for (const auto tok : split_view(fields[1], ',')) {
            double value = 0.0;
            const auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), value);
            if (ec != std::errc() || ptr != tok.data() + tok.size())
                throw ParseError(path.string(), lineno, "bad number: " + std::string(tok));
            if (!std::isfinite(value))
                throw ParseError(path.string(), lineno, "non-finite value");
            row.values.push_back(value);
        }
        if (dim == 0)
            dim = row.values.size();
        else if (row.values.size() != dim)
            throw ParseError(path.string(), lineno,
                             "dimension " + std::to_string(row.values.size()) + " differs from "
                                 + std::to_string(dim));
        rows.push_back(std::move(row));
    }
    if (rows.empty())
        throw Error("vector file is empty: " + path.string());
    return rows;
}

void write_vector_tsv(const std::filesystem::path& path, const std::vector<VectorRow>& rows)
{
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw Error("cannot write vector file: " + path.string());
    char buf[64];
    for (const auto& row : rows) {
        out << row.item << '\t';
        for (std::size_t i = 0; i < row.values.size(); ++i) {
            const auto res = std::to_chars(buf, buf + sizeof(buf), row.values[i]);
            if (i)
                out << ',';
            out.write(buf, res.ptr - buf);
        }
        out << '\n';
    }
    if (!out)
        throw Error("write failed: " + path.string());
}

double SynthSpec::self_transition_probability() const
{
    if (std::isinf(concentration))
        return 1.0;
    return concentration / (concentration + 1.0);
}

SyntheticCorpus synthesize_corpus(const SynthSpec& spec, std::uint64_t seed)
{
    if (spec.clusters <= 0)
        throw Error("synthesize_corpus: clusters must be positive");
    if (spec.domains <= 0 || spec.items_per_domain <= 0 || spec.users_per_domain <= 0)
        throw Error("synthesize_corpus: domains, items and users must be positive");
    if (spec.items_per_domain < spec.clusters)
        throw Error("synthesize_corpus: fewer items than clusters");
    if (spec.sequence_length < 1 || spec.text_dim < 1 || spec.text_noise < 0.0 || spec.concentration < 0.0)
        throw Error("synthesize_corpus: invalid sequence length, text dimension, noise or concentration");

    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    const double stay = spec.self_transition_probability();

    std::vector<std::vector<double>> centroids(spec.clusters, std::vector<double>(spec.text_dim));
    for (auto& c : centroids)
        for (auto& x : c)
            x = normal(rng);

    SyntheticCorpus corpus;
    std::int64_t clock = 0;
    for (int d = 0; d < spec.domains; ++d) {
        const std::string domain = "d" + std::to_string(d);
        corpus.domains.push_back(domain);

        std::vector<int> cluster_of(spec.items_per_domain);
        for (int j = 0; j < spec.items_per_domain; ++j)
            cluster_of[j] = j % spec.clusters;
        std::shuffle(cluster_of.begin(), cluster_of.end(), rng);

        std::vector<std::vector<int>> members(spec.clusters);
        for (int j = 0; j < spec.items_per_domain; ++j)
            members[cluster_of[j]].push_back(j);
        // Zipf popularity within each cluster, in member order.
        std::vector<std::discrete_distribution<int>> popularity;
        for (const auto& m : members) {
            std::vector<double> w(m.size());
            for (std::size_t r = 0; r < m.size(); ++r)
                w[r] = 1.0 / std::pow(double(r + 1), spec.popularity_exponent);
            popularity.emplace_back(w.begin(), w.end());
        }

        std::vector<VectorRow> text;
        for (int j = 0; j < spec.items_per_domain; ++j) {
            const std::string name = "i" + std::to_string(j);
            corpus.cluster[{domain, name}] = cluster_of[j];
            VectorRow row{name, centroids[cluster_of[j]]};
            if (spec.text_noise > 0.0)
                for (auto& x : row.values)
                    x += spec.text_noise * normal(rng);
            text.push_back(std::move(row));
        }
        corpus.text.push_back(std::move(text));

        std::uniform_int_distribution<int> start_cluster(0, spec.clusters - 1);
        for (int u = 0; u < spec.users_per_domain; ++u) {
            const std::string user = "u" + std::to_string(u);
            int g = start_cluster(rng);
            std::unordered_set<int> seen;
            for (int t = 0; t < spec.sequence_length; ++t) {
                if (t > 0 && unit(rng) >= stay)
                    g = (g + 1) % spec.clusters;
                int item = 0;
                // Avoid repeats while the cluster still has unseen items.
                for (int attempt = 0; attempt < 64; ++attempt) {
                    item = members[g][popularity[g](rng)];
                    if (!seen.count(item))
                        break;
                }
                seen.insert(item);
                corpus.interactions.push_back({user, "i" + std::to_string(item), clock++, domain});
            }
        }
    }
    return corpus;
}

void write_corpus(const SyntheticCorpus& corpus, const std::filesystem::path& dir)
{
    std::filesystem::create_directories(dir);
    write_interactions(dir / "interactions.tsv", corpus.interactions);
    for (std::size_t d = 0; d < corpus.domains.size(); ++d)
        write_vector_tsv(dir / ("text_" + corpus.domains[d] + ".tsv"), corpus.text[d]);
}

double same_cluster_transition_rate(const SyntheticCorpus& corpus)
{
    std::size_t same = 0;
    std::size_t total = 0;
    for (std::size_t i = 1; i < corpus.interactions.size(); ++i) {
        const auto& prev = corpus.interactions[i - 1];
        const auto& cur = corpus.interactions[i];
        if (prev.user != cur.user || prev.domain != cur.domain)
            continue;
        ++total;
        same += corpus.cluster.at({prev.domain, prev.item}) == corpus.cluster.at({cur.domain, cur.item}) ? 1 : 0;
    }
    return total ? double(same) / double(total) : 0.0;
}

} // namespace idp
