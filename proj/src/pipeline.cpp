#include "idp/pipeline.hpp"

#include "idp/eval.hpp"
#include "idp/numerics.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <json.hpp>
#include <openssl/evp.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <chrono>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <numeric>
#include <set>

namespace idp {

namespace {

std::vector<ConfigKey> make_schema()
{
    using K = KeyType;
    const std::vector<std::string> encoders{"causal-attention", "gated-recurrent"};
    return {
        {"run.seed", K::integer, "42", {}},
        {"run.outdir", K::string, "idp-run", {}},

        {"data.interactions", K::string, "", {}},
        {"data.vectors_dir", K::string, "", {}},
        {"data.source_domains", K::string, "d0", {}},
        {"data.target_domain", K::string, "d1", {}},
        {"data.min_interactions", K::integer, "5", {}},
        {"data.filter_target", K::boolean, "false", {}},

        {"synth.clusters", K::integer, "8", {}},
        {"synth.domains", K::integer, "2", {}},
        {"synth.items_per_domain", K::integer, "500", {}},
        {"synth.users_per_domain", K::integer, "2000", {}},
        {"synth.sequence_length", K::integer, "20", {}},
        {"synth.concentration", K::real, "3", {}},
        {"synth.text_dim", K::integer, "32", {}},
        {"synth.text_noise", K::real, "0.5", {}},
        {"synth.popularity_exponent", K::real, "1", {}},
        {"synth.images", K::boolean, "false", {}},

        {"model.dim", K::integer, "64", {}},
        {"model.layers", K::integer, "2", {}},
        {"model.heads", K::integer, "2", {}},
        {"model.max_len", K::integer, "50", {}},
        {"model.ffn_dim", K::integer, "0", {}},
        {"model.dropout", K::real, "0.2", {}},
        {"model.encoder", K::string, "causal-attention", encoders},

        {"train.batch_size", K::integer, "256", {}},
        {"train.learning_rate", K::real, "0.001", {}},
        {"train.max_epochs", K::integer, "200", {}},
        {"train.patience", K::integer, "20", {}},

        {"cdim.out_dim", K::integer, "64", {}},
        {"cdim.dropout", K::real, "0.1", {}},
        {"cdim.temperature", K::real, "0.05", {}},
        {"cdim.similarity", K::string, "cosine", {"cosine", "dot"}},
        {"cdim.positives", K::integer, "10", {}},
        {"cdim.batch_size", K::integer, "128", {}},
        {"cdim.learning_rate", K::real, "0.001", {}},
        {"cdim.max_epochs", K::integer, "100", {}},
        {"cdim.patience", K::integer, "20", {}},
        {"cdim.holdout", K::real, "0.1", {}},
        {"cdim.modality", K::string, "text", {"text", "fused"}},

        {"matcher.m", K::integer, "10", {}},
        {"matcher.retrieval", K::string, "auto", {"auto", "exact", "ann"}},
        {"matcher.max_degree", K::integer, "16", {}},
        {"matcher.ef_construction", K::integer, "200", {}},
        {"matcher.ef_search", K::integer, "200", {}},

        {"transfer.mode", K::string, "zero-shot", {"zero-shot", "finetune-all", "retrain-encoder"}},
        {"transfer.use_text", K::boolean, "false", {}},
        {"transfer.text_projection", K::string, "pca", {"pca", "learned"}},
        {"transfer.encoder", K::string, "causal-attention", encoders},
        {"transfer.learning_rate", K::real, "0.001", {}},
        {"transfer.max_epochs", K::integer, "200", {}},

        {"eval.format", K::string, "tsv", {"tsv", "structured"}},
        {"eval.target", K::string, "test", {"test", "valid"}},
    };
}

const ConfigKey& find_key(const std::string& name)
{
    for (const auto& k : RunConfig::schema())
        if (k.name == name)
            return k;
    throw Error("unknown configuration key '" + name + "'");
}

bool parse_bool(const std::string& v, bool* out)
{
    if (v == "true" || v == "1" || v == "yes" || v == "on") {
        *out = true;
        return true;
    }
    if (v == "false" || v == "0" || v == "no" || v == "off") {
        *out = false;
        return true;
    }
    return false;
}

template <typename T>
bool parse_number(const std::string& v, T* out)
{
    if (v.empty())
        return false;
    const char* end = v.data() + v.size();
    auto [ptr, ec] = std::from_chars(v.data(), end, *out);
    return ec == std::errc() && ptr == end;
}

double seconds_since(std::chrono::steady_clock::time_point start)
{
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

std::vector<std::string> split_list(const std::string& s)
{
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty())
                out.push_back(cur);
            cur.clear();
        } else if (c != ' ') {
            cur += c;
        }
    }
    if (!cur.empty())
        out.push_back(cur);
    return out;
}

std::string fmt6(double v)
{
    if (!std::isfinite(v))
        return "-";
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6f", v);
    return buf;
}

void write_history(const std::filesystem::path& path, const std::vector<std::string>& header,
                   const std::vector<std::vector<double>>& columns)
{
    std::string out;
    out += "epoch";
    for (const auto& h : header)
        out += "\t" + h;
    out += '\n';
    const std::size_t rows = columns.empty() ? 0 : columns.front().size();
    for (std::size_t r = 0; r < rows; ++r) {
        out += std::to_string(r);
        for (const auto& c : columns)
            out += "\t" + fmt6(c[r]);
        out += '\n';
    }
    write_file_bytes(path, out);
}

} // namespace

// ---------------------------------------------------------------------------
// RunConfig

const std::vector<ConfigKey>& RunConfig::schema()
{
    static const std::vector<ConfigKey> keys = make_schema();
    return keys;
}

RunConfig::RunConfig()
{
    for (const auto& k : schema())
        values_[k.name] = k.default_value;
}

RunConfig RunConfig::load(const std::filesystem::path& path)
{
    namespace pt = boost::property_tree;
    pt::ptree tree;
    try {
        pt::read_ini(path.string(), tree);
    } catch (const pt::ini_parser_error& e) {
        throw Error("cannot read config " + path.string() + ": " + e.message());
    }
    RunConfig config;
    for (const auto& [section, body] : tree) {
        if (body.empty() && !body.data().empty())
            throw Error("configuration key '" + section + "' must be inside a section");
        for (const auto& [key, value] : body)
            config.set(section + "." + key, value.get_value<std::string>());
    }
    return config;
}

void RunConfig::set(const std::string& key, const std::string& value)
{
    const ConfigKey& entry = find_key(key);
    bool ok = true;
    switch (entry.type) {
    case KeyType::string:
        break;
    case KeyType::integer: {
        long v = 0;
        ok = parse_number(value, &v);
        break;
    }
    case KeyType::real: {
        double v = 0;
        ok = parse_number(value, &v) && std::isfinite(v);
        break;
    }
    case KeyType::boolean: {
        bool v = false;
        ok = parse_bool(value, &v);
        break;
    }
    }
    if (!ok)
        throw Error("invalid value '" + value + "' for configuration key '" + key + "'");
    if (!entry.choices.empty()
        && std::find(entry.choices.begin(), entry.choices.end(), value) == entry.choices.end()) {
        std::string allowed;
        for (const auto& c : entry.choices)
            allowed += (allowed.empty() ? "" : ", ") + c;
        throw Error("invalid value '" + value + "' for configuration key '" + key + "' (expected one of: "
                    + allowed + ")");
    }
    values_[key] = value;
}

void RunConfig::apply_override(const std::string& assignment)
{
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw Error("override '" + assignment + "' must have the form section.key=value");
    set(assignment.substr(0, eq), assignment.substr(eq + 1));
}

const std::string& RunConfig::get(const std::string& key) const
{
    find_key(key);
    return values_.at(key);
}

long RunConfig::get_int(const std::string& key) const
{
    long v = 0;
    parse_number(get(key), &v);
    return v;
}

double RunConfig::get_real(const std::string& key) const
{
    double v = 0;
    parse_number(get(key), &v);
    return v;
}

bool RunConfig::get_bool(const std::string& key) const
{
    bool v = false;
    parse_bool(get(key), &v);
    return v;
}

std::filesystem::path RunConfig::outdir() const
{
    std::filesystem::path dir = get("run.outdir");
    if (dir.is_relative()) {
        if (const char* root = std::getenv("IDP_OUTPUT_ROOT"); root && *root)
            return std::filesystem::path(root) / dir;
    }
    return dir;
}

std::string RunConfig::dump() const
{
    std::string out;
    std::string section;
    for (const auto& k : schema()) {
        const auto dot = k.name.find('.');
        const std::string s = k.name.substr(0, dot);
        if (s != section) {
            out += (section.empty() ? "[" : "\n[") + s + "]\n";
            section = s;
        }
        out += k.name.substr(dot + 1) + " = " + values_.at(k.name) + "\n";
    }
    return out;
}

// ---------------------------------------------------------------------------
// Digests and manifest

std::string sha256_hex(const std::string& bytes)
{
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1)
        throw Error("SHA-256 computation failed");
    static const char* hex = "0123456789abcdef";
    std::string out;
    for (unsigned int i = 0; i < len; ++i) {
        out += hex[digest[i] >> 4];
        out += hex[digest[i] & 15];
    }
    return out;
}

std::string sha256_file(const std::filesystem::path& path)
{
    return sha256_hex(read_file_bytes(path));
}

PipelineManifest PipelineManifest::load(const std::filesystem::path& path)
{
    PipelineManifest m;
    if (!std::filesystem::exists(path))
        return m;
    const auto j = nlohmann::json::parse(read_file_bytes(path));
    for (const auto& s : j.at("stages")) {
        StageRecord r;
        r.name = s.at("name").get<std::string>();
        r.inputs = s.at("inputs").get<std::map<std::string, std::string>>();
        r.outputs = s.at("outputs").get<std::map<std::string, std::string>>();
        r.seconds = s.at("seconds").get<double>();
        m.stages_.push_back(std::move(r));
    }
    return m;
}

void PipelineManifest::save(const std::filesystem::path& path) const
{
    nlohmann::ordered_json j;
    j["stages"] = nlohmann::ordered_json::array();
    for (const auto& s : stages_) {
        nlohmann::ordered_json e;
        e["name"] = s.name;
        e["inputs"] = s.inputs;
        e["outputs"] = s.outputs;
        e["seconds"] = s.seconds;
        j["stages"].push_back(std::move(e));
    }
    write_file_bytes(path, j.dump(2) + "\n");
}

void PipelineManifest::record(StageRecord stage)
{
    for (auto& s : stages_) {
        if (s.name == stage.name) {
            s = std::move(stage);
            return;
        }
    }
    stages_.push_back(std::move(stage));
}

const StageRecord* PipelineManifest::find(const std::string& name) const
{
    for (const auto& s : stages_)
        if (s.name == name)
            return &s;
    return nullptr;
}

const std::vector<std::string>& pipeline_stages()
{
    static const std::vector<std::string> names{"pretrain",       "mine_positives", "tune_cdim", "build_index",
                                                "gen_embeddings", "deploy",         "eval"};
    return names;
}

// ---------------------------------------------------------------------------
// Pipeline

struct Pipeline::Data {
    InteractionStore source;
    InteractionStore target;
    LeaveOneOutSplit source_split;
    LeaveOneOutSplit target_split;
    TextVectorStore source_text;
    TextVectorStore target_text;
    // Matcher inputs: the text vectors, or text and image concatenated.
    TextVectorStore source_match;
    TextVectorStore target_match;
};

Pipeline::Pipeline(RunConfig config) : config_(std::move(config)), outdir_(config_.outdir()) {}

std::filesystem::path Pipeline::stage_dir(const std::string& stage) const
{
    return outdir_ / stage;
}

std::filesystem::path Pipeline::interactions_path() const
{
    const std::string& p = config_.get("data.interactions");
    return p.empty() ? stage_dir("synth") / "interactions.tsv" : std::filesystem::path(p);
}

std::filesystem::path Pipeline::vectors_path(const std::string& kind, const std::string& domain) const
{
    const std::string& d = config_.get("data.vectors_dir");
    const std::filesystem::path dir = d.empty() ? stage_dir("synth") : std::filesystem::path(d);
    return dir / (kind + "_" + domain + ".tsv");
}

Pipeline::Data Pipeline::load_data(bool need_text) const
{
    const auto path = interactions_path();
    if (!std::filesystem::exists(path)) {
        if (config_.get("data.interactions").empty())
            throw Error("missing upstream artifact " + path.string() + ": run stage 'synth' first");
        throw Error("interaction file not found: " + path.string());
    }
    const std::uint64_t seed = std::uint64_t(config_.get_int("run.seed"));
    const InteractionStore all = ingest(path);
    const auto sources = split_list(config_.get("data.source_domains"));
    const std::string target = config_.get("data.target_domain");
    if (sources.empty())
        throw Error("configuration key 'data.source_domains' lists no domain");
    for (const auto& d : sources)
        if (d == target)
            throw Error("domain '" + d + "' is both a source and the target");

    Data data;
    data.source = filter_min_interactions(select_domains(all, sources), int(config_.get_int("data.min_interactions")));
    data.target = select_domains(all, {target});
    if (data.target.num_items() == 0)
        throw Error("target domain '" + target + "' has no interactions");
    if (config_.get_bool("data.filter_target"))
        data.target = filter_min_interactions(data.target, int(config_.get_int("data.min_interactions")));
    data.source_split = split_leave_one_out(data.source, seed);
    data.target_split = split_leave_one_out(data.target, seed);
    if (!need_text)
        return data;

    const bool fused = config_.get("cdim.modality") == "fused";
    const auto bind_all = [&](const InteractionStore& store, const std::vector<std::string>& domains,
                              const std::string& kind, Modality modality) {
        TextVectorStore out;
        for (const auto& d : domains) {
            const auto p = vectors_path(kind, d);
            if (!std::filesystem::exists(p))
                throw Error("vector file not found: " + p.string());
            TextVectorStore one = TextVectorStore::bind(store, d, read_vector_tsv(p), modality);
            if (out.num_items() == 0)
                out = std::move(one);
            else
                out.merge(one);
        }
        return out;
    };
    data.source_text = bind_all(data.source, sources, "text", Modality::text);
    data.target_text = bind_all(data.target, {target}, "text", Modality::text);
    if (fused) {
        data.source_match = concat_modalities(data.source_text, bind_all(data.source, sources, "image", Modality::image));
        data.target_match = concat_modalities(data.target_text, bind_all(data.target, {target}, "image", Modality::image));
    } else {
        data.source_match = data.source_text;
        data.target_match = data.target_text;
    }
    return data;
}

void Pipeline::require(const std::vector<std::string>& stages) const
{
    const PipelineManifest manifest = PipelineManifest::load(manifest_path());
    for (const auto& name : stages) {
        const StageRecord* rec = manifest.find(name);
        if (!rec)
            throw Error("missing upstream artifacts: stage '" + name + "' has not been run");
        for (const auto& [path, digest] : rec->outputs) {
            const auto full = outdir_ / path;
            if (!std::filesystem::exists(full) || sha256_file(full) != digest)
                throw Error("artifact " + path + " of stage '" + name + "' is missing or changed; re-run '" + name
                            + "'");
        }
    }
}

void Pipeline::finish(const std::string& stage, const std::vector<std::filesystem::path>& inputs,
                      const std::vector<std::filesystem::path>& outputs, double seconds)
{
    const auto rel = [&](const std::filesystem::path& p) {
        const auto r = std::filesystem::relative(p, outdir_);
        return (r.empty() || *r.begin() == "..") ? p.string() : r.generic_string();
    };
    StageRecord rec;
    rec.name = stage;
    for (const auto& p : inputs)
        rec.inputs[rel(p)] = sha256_file(p);
    for (const auto& p : outputs)
        rec.outputs[rel(p)] = sha256_file(p);
    rec.seconds = seconds;
    PipelineManifest manifest = PipelineManifest::load(manifest_path());
    manifest.record(std::move(rec));
    manifest.save(manifest_path());
    spdlog::info("stage {} finished in {:.1f}s", stage, seconds);
}

bool Pipeline::use_ann(std::size_t num_sources) const
{
    const std::string& mode = config_.get("matcher.retrieval");
    if (mode == "auto")
        return num_sources > 50000;
    return mode == "ann";
}

void Pipeline::synth()
{
    const auto start = std::chrono::steady_clock::now();
    SynthSpec spec;
    spec.clusters = int(config_.get_int("synth.clusters"));
    spec.domains = int(config_.get_int("synth.domains"));
    spec.items_per_domain = int(config_.get_int("synth.items_per_domain"));
    spec.users_per_domain = int(config_.get_int("synth.users_per_domain"));
    spec.sequence_length = int(config_.get_int("synth.sequence_length"));
    spec.concentration = config_.get_real("synth.concentration");
    spec.text_dim = int(config_.get_int("synth.text_dim"));
    spec.text_noise = config_.get_real("synth.text_noise");
    spec.popularity_exponent = config_.get_real("synth.popularity_exponent");
    const SyntheticCorpus corpus = synthesize_corpus(spec, std::uint64_t(config_.get_int("run.seed")));
    write_corpus(corpus, stage_dir("synth"));
    if (config_.get_bool("synth.images"))
        for (std::size_t d = 0; d < corpus.domains.size(); ++d)
            write_vector_tsv(stage_dir("synth") / ("image_" + corpus.domains[d] + ".tsv"), corpus.text[d]);
    spdlog::info("synth: {} interactions over {} domains in {:.1f}s", corpus.interactions.size(),
                 corpus.domains.size(), seconds_since(start));
}

void Pipeline::pretrain()
{
    const auto start = std::chrono::steady_clock::now();
    const bool use_text = config_.get_bool("transfer.use_text");
    const Data data = load_data(use_text);
    const std::uint64_t seed = std::uint64_t(config_.get_int("run.seed"));

    SeqModelConfig hyper;
    hyper.num_items = int(data.source.num_items());
    hyper.dim = int(config_.get_int("model.dim"));
    hyper.layers = int(config_.get_int("model.layers"));
    hyper.heads = int(config_.get_int("model.heads"));
    hyper.max_len = int(config_.get_int("model.max_len"));
    hyper.ffn_dim = int(config_.get_int("model.ffn_dim"));
    hyper.dropout = config_.get_real("model.dropout");
    hyper.encoder = parse_encoder_kind(config_.get("model.encoder"));

    TrainConfig tc;
    tc.batch_size = int(config_.get_int("train.batch_size"));
    tc.learning_rate = config_.get_real("train.learning_rate");
    tc.max_epochs = int(config_.get_int("train.max_epochs"));
    tc.patience = int(config_.get_int("train.patience"));
    tc.seed = seed;
    tc.log_progress = true;

    const auto dir = stage_dir("pretrain");
    std::vector<std::filesystem::path> outputs{dir / "model.ckpt", dir / "history.tsv"};
    SeqModelParams<float> params = init_params<float>(hyper, seed);
    if (use_text) {
        if (parse_text_projection(config_.get("transfer.text_projection")) == TextProjection::pca) {
            std::vector<ItemIndex> present;
            for (std::size_t v = 0; v < data.source_text.num_items(); ++v)
                if (data.source_text.present[v])
                    present.push_back(ItemIndex(v));
            const PcaModel pca = fit_pca(data.source_text.rows(present),
                                         std::min(hyper.dim, data.source_text.dim()));
            attach_pca_projection(params, pca, data.source_text);
            tc.trainable = [](const std::string& name) { return !is_text_projection(name); };
            pca_to_checkpoint(pca).save(dir / "pca.ckpt");
            outputs.push_back(dir / "pca.ckpt");
        } else {
            std::mt19937_64 rng(seed ^ 0x7f4a7c159e3779b9ULL);
            Mat<float> w(data.source_text.dim(), hyper.dim);
            fill_xavier(w, rng);
            Mat<float> present(Eigen::Index(data.source_text.num_items()), 1);
            for (std::size_t v = 0; v < data.source_text.num_items(); ++v)
                present(Eigen::Index(v), 0) = data.source_text.present[v] ? 1.0f : 0.0f;
            attach_text_projection<float>(params, data.source_text.vectors.cast<float>(), std::move(w),
                                          Mat<float>::Zero(1, hyper.dim), std::move(present));
        }
    }
    std::vector<ItemIndex> catalog(data.source.num_items());
    std::iota(catalog.begin(), catalog.end(), 0);
    const TrainHistory history = train_bpr(params, data.source_split, catalog, tc);

    Checkpoint ck = to_checkpoint(params);
    ck.meta()["seed"] = std::to_string(seed);
    ck.meta()["best_epoch"] = std::to_string(history.best_epoch);
    ck.save(dir / "model.ckpt");
    write_history(dir / "history.tsv", {"train_loss", "valid_ndcg5"}, {history.train_loss, history.valid_ndcg5});
    finish("pretrain", {interactions_path()}, outputs, seconds_since(start));
}

void Pipeline::mine_positives()
{
    require({"pretrain"});
    const auto start = std::chrono::steady_clock::now();
    const auto model_path = stage_dir("pretrain") / "model.ckpt";
    const SeqModelParams<float> params = from_checkpoint<float>(Checkpoint::load(model_path));
    const BehaviorPositives positives =
        mine_behavior_positives(params.item_embeddings, int(config_.get_int("cdim.positives")),
                                parse_similarity(config_.get("cdim.similarity")));
    const auto out = stage_dir("mine_positives") / "positives.tsv";
    write_positives_tsv(out, positives);
    finish("mine_positives", {model_path}, {out}, seconds_since(start));
}

void Pipeline::tune_cdim()
{
    require({"mine_positives"});
    const auto start = std::chrono::steady_clock::now();
    const Data data = load_data(true);
    const auto pos_path = stage_dir("mine_positives") / "positives.tsv";
    const BehaviorPositives positives = read_positives_tsv(pos_path);
    if (positives.lists.size() != data.source.num_items())
        throw Error("mined positives cover " + std::to_string(positives.lists.size())
                    + " items but the source store has " + std::to_string(data.source.num_items())
                    + "; re-run 'pretrain' and 'mine_positives'");
    for (std::size_t v = 0; v < positives.lists.size(); ++v) {
        if (!data.source_match.present[v])
            throw Error("source item '" + data.source.item_name(ItemIndex(v)) + "' has no vector");
        for (ItemIndex p : positives.lists[v])
            if (!data.source_match.present.at(std::size_t(p)))
                throw Error("positive '" + data.source.item_name(p) + "' is missing from the vector store");
    }

    TuneConfig tc;
    tc.adapter.out_dim = int(config_.get_int("cdim.out_dim"));
    tc.adapter.dropout = config_.get_real("cdim.dropout");
    tc.adapter.temperature = config_.get_real("cdim.temperature");
    tc.adapter.similarity = parse_similarity(config_.get("cdim.similarity"));
    tc.batch_size = int(config_.get_int("cdim.batch_size"));
    tc.learning_rate = config_.get_real("cdim.learning_rate");
    tc.max_epochs = int(config_.get_int("cdim.max_epochs"));
    tc.patience = int(config_.get_int("cdim.patience"));
    tc.holdout_fraction = config_.get_real("cdim.holdout");
    tc.seed = std::uint64_t(config_.get_int("run.seed"));

    TuneHistory history;
    const AdapterParams<float> adapter =
        idp::tune_cdim<float>(data.source_match.vectors.cast<float>(), positives, tc, &history);
    const auto dir = stage_dir("tune_cdim");
    Checkpoint ck = adapter_to_checkpoint(adapter);
    ck.meta()["modality"] = to_string(data.source_match.modality);
    ck.save(dir / "adapter.ckpt");
    write_history(dir / "history.tsv", {"train_loss", "holdout_loss"}, {history.train_loss, history.holdout_loss});
    finish("tune_cdim", {pos_path}, {dir / "adapter.ckpt", dir / "history.tsv"}, seconds_since(start));
}

void Pipeline::build_index()
{
    require({"tune_cdim"});
    const auto start = std::chrono::steady_clock::now();
    const Data data = load_data(true);
    const auto adapter_path = stage_dir("tune_cdim") / "adapter.ckpt";
    const AdapterParams<float> adapter = adapter_from_checkpoint<float>(Checkpoint::load(adapter_path));
    const Mat<float> sources = encode_rows<float>(adapter, data.source_match.vectors.cast<float>(), Mode::infer,
                                                  nullptr);
    HnswParams hp;
    hp.max_degree = int(config_.get_int("matcher.max_degree"));
    hp.ef_construction = int(config_.get_int("matcher.ef_construction"));
    hp.ef_search = int(config_.get_int("matcher.ef_search"));
    const auto index = idp::build_index<float>(sources, adapter.config.similarity, hp,
                                               std::uint64_t(config_.get_int("run.seed")));
    const auto out = stage_dir("build_index") / "index.bin";
    write_file_bytes(out, index.serialize());
    finish("build_index", {adapter_path}, {out}, seconds_since(start));
}

void Pipeline::gen_embeddings()
{
    require({"tune_cdim", "pretrain"});
    const auto start = std::chrono::steady_clock::now();
    const Data data = load_data(true);
    const auto adapter_path = stage_dir("tune_cdim") / "adapter.ckpt";
    const auto model_path = stage_dir("pretrain") / "model.ckpt";
    const AdapterParams<float> adapter = adapter_from_checkpoint<float>(Checkpoint::load(adapter_path));
    const SeqModelParams<float> params = from_checkpoint<float>(Checkpoint::load(model_path));
    if (params.item_embeddings.rows() != Eigen::Index(data.source.num_items()))
        throw Error("pre-trained model does not match the source store; re-run 'pretrain'");

    std::vector<std::filesystem::path> inputs{adapter_path, model_path};
    const Mat<float> sources = encode_rows<float>(adapter, data.source_match.vectors.cast<float>(), Mode::infer,
                                                  nullptr);
    const Mat<float> queries = encode_rows<float>(adapter, data.target_match.vectors.cast<float>(), Mode::infer,
                                                  nullptr);
    std::optional<HnswIndex<float>> index;
    if (use_ann(data.source.num_items())) {
        require({"build_index"});
        const auto index_path = stage_dir("build_index") / "index.bin";
        index = HnswIndex<float>::deserialize(read_file_bytes(index_path));
        inputs.push_back(index_path);
    }
    std::vector<ItemIndex> targets(data.target.num_items());
    std::iota(targets.begin(), targets.end(), 0);
    const NeighborAssignment assignment =
        assign_neighbors<float>(targets, queries, data.target_match.present, sources,
                                int(config_.get_int("matcher.m")), adapter.config.similarity,
                                index ? &*index : nullptr);
    const GeneratedEmbeddings<float> generated = generate_embeddings(assignment, params.item_embeddings);

    std::vector<std::string> target_names, source_names;
    for (std::size_t v = 0; v < data.target.num_items(); ++v)
        target_names.push_back(data.target.item_name(ItemIndex(v)));
    for (std::size_t v = 0; v < data.source.num_items(); ++v)
        source_names.push_back(data.source.item_domain(ItemIndex(v)) + ":" + data.source.item_name(ItemIndex(v)));

    const auto dir = stage_dir("gen_embeddings");
    Checkpoint ck;
    ck.meta()["kind"] = "generated-embeddings";
    ck.meta()["m"] = config_.get("matcher.m");
    ck.meta()["retrieval"] = index ? "ann" : "exact";
    ck.put("E_T", generated.embeddings);
    ck.save(dir / "embeddings.ckpt");
    write_assignment_tsv(dir / "assignment.tsv", assignment, target_names, source_names);
    write_provenance_tsv(dir / "provenance.tsv", generated, target_names, source_names);
    finish("gen_embeddings", inputs, {dir / "embeddings.ckpt", dir / "assignment.tsv", dir / "provenance.tsv"},
           seconds_since(start));
}

void Pipeline::deploy(std::optional<DeploymentMode> mode)
{
    require({"gen_embeddings", "pretrain"});
    const auto start = std::chrono::steady_clock::now();
    DeployOptions options;
    options.mode = mode ? *mode : parse_deployment_mode(config_.get("transfer.mode"));
    options.use_text = config_.get_bool("transfer.use_text");
    options.encoder = parse_encoder_kind(config_.get("transfer.encoder"));
    options.train.batch_size = int(config_.get_int("train.batch_size"));
    options.train.learning_rate = config_.get_real("transfer.learning_rate");
    options.train.max_epochs = int(config_.get_int("transfer.max_epochs"));
    options.train.patience = int(config_.get_int("train.patience"));
    options.train.seed = std::uint64_t(config_.get_int("run.seed"));
    options.train.log_progress = true;

    const Data data = load_data(options.use_text);
    const auto gen_path = stage_dir("gen_embeddings") / "embeddings.ckpt";
    const auto model_path = stage_dir("pretrain") / "model.ckpt";
    const SeqModelParams<float> pretrained = from_checkpoint<float>(Checkpoint::load(model_path));
    GeneratedEmbeddings<float> generated;
    generated.embeddings = Checkpoint::load(gen_path).get<float>("E_T");
    generated.targets.resize(std::size_t(generated.embeddings.rows()));
    std::iota(generated.targets.begin(), generated.targets.end(), 0);

    TrainHistory history;
    const SeqModelParams<float> params = idp::deploy(options, pretrained, generated, data.target_split,
                                                     options.use_text ? &data.target_text : nullptr, &history);
    const auto dir = stage_dir("deploy");
    Checkpoint ck = to_checkpoint(params);
    ck.meta()["mode"] = to_string(options.mode);
    ck.meta()["seed"] = config_.get("run.seed");
    ck.save(dir / "model.ckpt");
    write_history(dir / "history.tsv", {"train_loss", "valid_ndcg5"}, {history.train_loss, history.valid_ndcg5});
    finish("deploy", {gen_path, model_path}, {dir / "model.ckpt", dir / "history.tsv"}, seconds_since(start));
}

void Pipeline::eval()
{
    require({"deploy"});
    const auto start = std::chrono::steady_clock::now();
    const Data data = load_data(false);
    const auto model_path = stage_dir("deploy") / "model.ckpt";
    const Checkpoint ck = Checkpoint::load(model_path);
    const SeqModelParams<float> params = from_checkpoint<float>(ck);
    const bool valid = config_.get("eval.target") == "valid";
    const RankedCandidates ranked =
        rank_users(params, data.target_split, valid ? EvalTarget::valid : EvalTarget::test);
    const EvalReport report = make_report(ranked.ranks(), {{"seed", config_.get("run.seed")},
                                                           {"mode", ck.meta("mode")},
                                                           {"domain", config_.get("data.target_domain")},
                                                           {"target", config_.get("eval.target")},
                                                           {"model", sha256_file(model_path).substr(0, 16)}});
    const bool structured = config_.get("eval.format") == "structured";
    const auto out = stage_dir("eval") / (structured ? "report.json" : "report.tsv");
    emit_report(report, out, structured ? ReportFormat::structured : ReportFormat::tsv);
    spdlog::info("eval: HR@5 {:.4f}  NDCG@5 {:.4f}  MRR {:.4f} over {} users", report.metric("HR@5"),
                 report.metric("NDCG@5"), report.metric("MRR"), report.ranks.size());
    finish("eval", {model_path}, {out}, seconds_since(start));
}

void Pipeline::run(const std::string& stage)
{
    if (stage == "synth")
        synth();
    else if (stage == "pretrain")
        pretrain();
    else if (stage == "mine_positives")
        mine_positives();
    else if (stage == "tune_cdim")
        tune_cdim();
    else if (stage == "build_index")
        build_index();
    else if (stage == "gen_embeddings")
        gen_embeddings();
    else if (stage == "deploy")
        deploy();
    else if (stage == "eval")
        eval();
    else
        throw Error("unknown stage '" + stage + "'");
}

void Pipeline::run_all()
{
    if (config_.get("data.interactions").empty())
        synth();
    for (const auto& s : pipeline_stages())
        run(s);
}

} // namespace idp
