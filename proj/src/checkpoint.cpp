#include "idp/checkpoint.hpp"

#include <json.hpp>

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace idp {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

template <typename Scalar>
constexpr const char* dtype_tag()
{
    return sizeof(Scalar) == 4 ? "f32" : "f64";
}

template <typename Scalar>
void append_payload(std::string& out, const Mat<Scalar>& m)
{
    const Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
    out.append(reinterpret_cast<const char*>(rm.data()), std::size_t(rm.size()) * sizeof(Scalar));
}

template <typename Scalar>
Mat<Scalar> read_payload(const std::string& bytes, std::size_t& offset, Eigen::Index rows, Eigen::Index cols,
                         const std::string& name)
{
    const std::size_t n = std::size_t(rows * cols) * sizeof(Scalar);
    if (offset + n > bytes.size())
        throw Error("checkpoint truncated in tensor '" + name + "'");
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(rows, cols);
    std::memcpy(rm.data(), bytes.data() + offset, n);
    offset += n;
    return rm;
}

} // namespace

template <typename Scalar>
void Checkpoint::put(const std::string& name, const Mat<Scalar>& m)
{
    for (auto& t : tensors_) {
        if (t.name == name) {
            t.data = m;
            return;
        }
    }
    tensors_.push_back({name, Storage(m)});
}

bool Checkpoint::contains(const std::string& name) const
{
    for (const auto& t : tensors_)
        if (t.name == name)
            return true;
    return false;
}

const Checkpoint::Tensor& Checkpoint::find(const std::string& name) const
{
    for (const auto& t : tensors_)
        if (t.name == name)
            return t;
    throw Error("checkpoint has no tensor '" + name + "'");
}

template <typename Scalar>
Mat<Scalar> Checkpoint::get(const std::string& name) const
{
    return std::visit([](const auto& m) -> Mat<Scalar> { return m.template cast<Scalar>(); }, find(name).data);
}

template <typename Scalar>
Mat<Scalar> Checkpoint::get(const std::string& name, Eigen::Index rows, Eigen::Index cols) const
{
    Mat<Scalar> m = get<Scalar>(name);
    if (m.rows() != rows || m.cols() != cols)
        throw Error("shape mismatch for tensor '" + name + "': expected " + std::to_string(rows) + "x"
                    + std::to_string(cols) + ", checkpoint has " + std::to_string(m.rows()) + "x"
                    + std::to_string(m.cols()));
    return m;
}

const std::string& Checkpoint::meta(const std::string& key) const
{
    const auto it = meta_.find(key);
    if (it == meta_.end())
        throw Error("checkpoint metadata has no key '" + key + "'");
    return it->second;
}

std::string Checkpoint::serialize() const
{
    nlohmann::json header;
    header["meta"] = meta_;
    header["tensors"] = nlohmann::json::array();
    std::string payload;
    for (const auto& t : tensors_) {
        std::visit(
            [&](const auto& m) {
                using S = typename std::decay_t<decltype(m)>::Scalar;
                header["tensors"].push_back(
                    {{"name", t.name}, {"dtype", dtype_tag<S>()}, {"shape", {m.rows(), m.cols()}}});
                append_payload(payload, m);
            },
            t.data);
    }
    const std::string text = header.dump();
    std::string out(kMagic, 8);
    const std::uint64_t len = text.size();
    out.append(reinterpret_cast<const char*>(&len), sizeof(len));
    out += text;
    out += payload;
    return out;
}

Checkpoint Checkpoint::deserialize(const std::string& bytes)
{
    if (bytes.size() < 16 || bytes.compare(0, 8, kMagic) != 0)
        throw Error("not an IDPCKPT1 checkpoint (magic/version mismatch)");
    std::uint64_t len = 0;
    std::memcpy(&len, bytes.data() + 8, sizeof(len));
    if (16 + len > bytes.size())
        throw Error("checkpoint header truncated");
    const auto header = nlohmann::json::parse(bytes.substr(16, len));
    Checkpoint ck;
    ck.meta_ = header.at("meta").get<std::map<std::string, std::string>>();
    std::size_t offset = 16 + len;
    for (const auto& entry : header.at("tensors")) {
        const std::string name = entry.at("name");
        const std::string dtype = entry.at("dtype");
        const auto shape = entry.at("shape").get<std::vector<Eigen::Index>>();
        if (shape.size() != 2)
            throw Error("tensor '" + name + "' must be two-dimensional");
        if (dtype == "f32")
            ck.tensors_.push_back({name, read_payload<float>(bytes, offset, shape[0], shape[1], name)});
        else if (dtype == "f64")
            ck.tensors_.push_back({name, read_payload<double>(bytes, offset, shape[0], shape[1], name)});
        else
            throw Error("tensor '" + name + "' has unknown dtype '" + dtype + "'");
    }
    if (offset != bytes.size())
        throw Error("checkpoint has trailing bytes");
    return ck;
}

void Checkpoint::save(const std::filesystem::path& path) const
{
    write_file_bytes(path, serialize());
}

Checkpoint Checkpoint::load(const std::filesystem::path& path)
{
    return deserialize(read_file_bytes(path));
}

std::string read_file_bytes(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw Error("cannot open file: " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file_bytes(const std::filesystem::path& path, const std::string& bytes)
{
    if (path.has_parent_path())
        std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw Error("cannot write file: " + path.string());
    out.write(bytes.data(), std::streamsize(bytes.size()));
    if (!out)
        throw Error("write failed: " + path.string());
}

template void Checkpoint::put<float>(const std::string&, const Mat<float>&);
template void Checkpoint::put<double>(const std::string&, const Mat<double>&);
template Mat<float> Checkpoint::get<float>(const std::string&) const;
template Mat<double> Checkpoint::get<double>(const std::string&) const;
template Mat<float> Checkpoint::get<float>(const std::string&, Eigen::Index, Eigen::Index) const;
template Mat<double> Checkpoint::get<double>(const std::string&, Eigen::Index, Eigen::Index) const;

} // namespace idp
