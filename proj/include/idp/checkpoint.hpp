#pragma once

#include "idp/types.hpp"

#include <filesystem>
#include <map>
#include <string>
#include <variant>
#include <vector>

namespace idp {

/// Named-tensor container persisted as:
///
///   "IDPCKPT1" | u64 header length (LE) | UTF-8 JSON header | payloads
///
/// The header lists metadata and, in payload order, each tensor's name,
/// element type ("f32" or "f64") and shape. Payloads are little-endian,
/// row-major.
class Checkpoint {
public:
    static constexpr char kMagic[9] = "IDPCKPT1";

    using Storage = std::variant<Mat<float>, Mat<double>>;

    struct Tensor {
        std::string name;
        Storage data;
    };

    template <typename Scalar>
    void put(const std::string& name, const Mat<Scalar>& m);

    bool contains(const std::string& name) const;

    /// Fetches a tensor converted to `Scalar`. Throws if absent.
    template <typename Scalar>
    Mat<Scalar> get(const std::string& name) const;

    /// Fetches a tensor and checks its shape; the error names the tensor.
    template <typename Scalar>
    Mat<Scalar> get(const std::string& name, Eigen::Index rows, Eigen::Index cols) const;

    const std::vector<Tensor>& tensors() const { return tensors_; }

    std::map<std::string, std::string>& meta() { return meta_; }
    const std::map<std::string, std::string>& meta() const { return meta_; }
    const std::string& meta(const std::string& key) const;

    std::string serialize() const;
    static Checkpoint deserialize(const std::string& bytes);

    void save(const std::filesystem::path& path) const;
    static Checkpoint load(const std::filesystem::path& path);

private:
    const Tensor& find(const std::string& name) const;

    std::map<std::string, std::string> meta_;
    std::vector<Tensor> tensors_;
};

std::string read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::string& bytes);

} // namespace idp
