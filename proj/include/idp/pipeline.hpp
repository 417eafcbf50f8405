#pragma once

#include "idp/transfer.hpp"
#include "idp/types.hpp"

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace idp {

enum class KeyType { string, integer, real, boolean };

struct ConfigKey {
    std::string name; // "section.key"
    KeyType type;
    std::string default_value;
    std::vector<std::string> choices; // empty: any value of `type`
};

/// Flat `section.key` configuration validated against a fixed schema.
///
/// Files use INI syntax with one section per module. Unknown sections or keys
/// and values of the wrong type are rejected with an error naming the key.
class RunConfig {
public:
    static const std::vector<ConfigKey>& schema();

    RunConfig();
    static RunConfig load(const std::filesystem::path& path);

    /// Validates and stores one value.
    void set(const std::string& key, const std::string& value);
    /// Applies a `section.key=value` override.
    void apply_override(const std::string& assignment);

    const std::string& get(const std::string& key) const;
    long get_int(const std::string& key) const;
    double get_real(const std::string& key) const;
    bool get_bool(const std::string& key) const;

    /// Output root; a relative `run.outdir` is placed under $IDP_OUTPUT_ROOT
    /// when that variable is set.
    std::filesystem::path outdir() const;

    /// Canonical INI text of every key.
    std::string dump() const;

private:
    std::map<std::string, std::string> values_;
};

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::filesystem::path& path);

struct StageRecord {
    std::string name;
    std::map<std::string, std::string> inputs;  // path -> digest
    std::map<std::string, std::string> outputs; // path -> digest
    double seconds = 0.0;
};

/// Ordered record of completed stages, stored as `<outdir>/manifest.json`.
/// Re-running a stage replaces its record in place.
class PipelineManifest {
public:
    static PipelineManifest load(const std::filesystem::path& path);
    void save(const std::filesystem::path& path) const;

    void record(StageRecord stage);
    const StageRecord* find(const std::string& name) const;
    const std::vector<StageRecord>& stages() const { return stages_; }

private:
    std::vector<StageRecord> stages_;
};

/// Algorithm stages in dependency order (synth is a data source, not a stage).
const std::vector<std::string>& pipeline_stages();

/// Runs pipeline stages against one output directory. Each stage reads its
/// upstream artifacts from disk, checks them against the manifest, writes its
/// outputs under `<outdir>/<stage>/` and records itself in the manifest.
class Pipeline {
public:
    explicit Pipeline(RunConfig config);

    const RunConfig& config() const { return config_; }
    const std::filesystem::path& outdir() const { return outdir_; }
    std::filesystem::path manifest_path() const { return outdir_ / "manifest.json"; }

    void synth();
    void pretrain();
    void mine_positives();
    void tune_cdim();
    void build_index();
    void gen_embeddings();
    void deploy(std::optional<DeploymentMode> mode = std::nullopt);
    void eval();

    /// Dispatches by stage name ("synth" included).
    void run(const std::string& stage);
    /// Every stage in order; synth first when no interaction file is configured.
    void run_all();

private:
    struct Data;

    Data load_data(bool need_text) const;
    std::filesystem::path stage_dir(const std::string& stage) const;
    std::filesystem::path interactions_path() const;
    std::filesystem::path vectors_path(const std::string& kind, const std::string& domain) const;
    void require(const std::vector<std::string>& stages) const;
    void finish(const std::string& stage, const std::vector<std::filesystem::path>& inputs,
                const std::vector<std::filesystem::path>& outputs, double seconds);
    bool use_ann(std::size_t num_sources) const;

    RunConfig config_;
    std::filesystem::path outdir_;
};

} // namespace idp
