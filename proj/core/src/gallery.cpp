#include "semicir/gallery.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <limits>

#include "semicir/error.hpp"

namespace semicir {

namespace {

constexpr char kMagic[4] = {'C', 'I', 'R', 'G'};
constexpr std::uint32_t kVersion = 1;
constexpr double kUnitTolerance = 1e-6;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T value) {
    using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                 std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
    const U bits = std::bit_cast<U>(value);
    for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> bytes) : bytes_{bytes} {}

    template <typename T>
    T get(const char* what) {
        using U = std::conditional_t<sizeof(T) == 2, std::uint16_t,
                                     std::conditional_t<sizeof(T) == 4, std::uint32_t, std::uint64_t>>;
        need(sizeof(T), what);
        U bits = 0;
        for (std::size_t i = 0; i < sizeof(T); ++i) bits |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
        pos_ += sizeof(T);
        return std::bit_cast<T>(bits);
    }

    std::string get_string(std::size_t len, const char* what) {
        need(len, what);
        std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
        pos_ += len;
        return s;
    }

    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n) {
            throw Error(ErrorKind::TruncatedFile, std::string("unexpected end of file reading ") + what);
        }
    }

    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_{0};
};

}  // namespace

void EmbeddingGallery::add(std::string image_id, std::span<const double> embedding) {
    if (embedding.size() != dim_) {
        throw Error(ErrorKind::DimensionMismatch, "embedding for '" + image_id + "' has " +
                                                      std::to_string(embedding.size()) + " values, gallery dim is " +
                                                      std::to_string(dim_));
    }
    if (index_.contains(image_id)) throw Error(ErrorKind::DuplicateId, "duplicate image id '" + image_id + "'");
    double sq = 0.0;
    for (double v : embedding) {
        if (!std::isfinite(v)) throw Error(ErrorKind::NonFinite, "embedding for '" + image_id + "' is not finite");
        sq += v * v;
    }
    const double n = std::sqrt(sq);
    if (!(n >= 1e-30)) throw Error(ErrorKind::ZeroVector, "embedding for '" + image_id + "' is zero");
    const bool unit = std::abs(n - 1.0) <= kUnitTolerance;
    for (double v : embedding) data_.push_back(static_cast<float>(unit ? v : v / n));
    index_.emplace(image_id, ids_.size());
    ids_.push_back(std::move(image_id));
}

void EmbeddingGallery::add(std::string image_id, std::span<const float> embedding) {
    std::vector<double> wide(embedding.begin(), embedding.end());
    add(std::move(image_id), std::span<const double>(wide));
}

std::span<const float> EmbeddingGallery::row(std::size_t index) const {
    if (index >= ids_.size()) throw Error(ErrorKind::InvalidArgument, "row index out of range");
    return {data_.data() + index * dim_, dim_};
}

std::vector<double> EmbeddingGallery::row_f64(std::size_t index) const {
    const auto r = row(index);
    return {r.begin(), r.end()};
}

std::optional<std::size_t> EmbeddingGallery::find(std::string_view image_id) const {
    const auto it = index_.find(std::string(image_id));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

std::size_t EmbeddingGallery::index_of(std::string_view image_id) const {
    const auto found = find(image_id);
    if (!found) throw Error(ErrorKind::UnknownId, "unknown image id '" + std::string(image_id) + "'");
    return *found;
}

double EmbeddingGallery::score(std::size_t a, std::size_t b) const {
    const float* x = data_.data() + a * dim_;
    const float* y = data_.data() + b * dim_;
    double s = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) s += static_cast<double>(x[i]) * static_cast<double>(y[i]);
    return s;
}

double EmbeddingGallery::score(std::span<const double> query, std::size_t b) const {
    const float* y = data_.data() + b * dim_;
    double s = 0.0;
    for (std::size_t i = 0; i < dim_; ++i) s += query[i] * static_cast<double>(y[i]);
    return s;
}

std::vector<Neighbor> EmbeddingGallery::select(std::vector<std::pair<double, std::size_t>> scored,
                                               std::size_t k) const {
    k = std::min(k, scored.size());
    const auto before = [this](const auto& a, const auto& b) {
        return ranks_before(a.first, ids_[a.second], b.first, ids_[b.second]);
    };
    std::partial_sort(scored.begin(), scored.begin() + static_cast<std::ptrdiff_t>(k), scored.end(), before);
    std::vector<Neighbor> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) out.push_back({ids_[scored[i].second], scored[i].first, i + 1});
    return out;
}

std::vector<Neighbor> EmbeddingGallery::top_k(std::string_view anchor_id, std::size_t k) const {
    if (k == 0) throw Error(ErrorKind::InvalidArgument, "k must be at least 1");
    const std::size_t anchor = index_of(anchor_id);
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(size());
    for (std::size_t j = 0; j < size(); ++j) {
        if (j != anchor) scored.emplace_back(score(anchor, j), j);
    }
    return select(std::move(scored), k);
}

std::vector<Neighbor> EmbeddingGallery::top_k(std::span<const double> query, std::size_t k,
                                              std::span<const std::size_t> exclude) const {
    if (k == 0) throw Error(ErrorKind::InvalidArgument, "k must be at least 1");
    if (query.size() != dim_) throw Error(ErrorKind::DimensionMismatch, "query dimension differs from gallery");
    std::vector<std::pair<double, std::size_t>> scored;
    scored.reserve(size());
    for (std::size_t j = 0; j < size(); ++j) {
        if (std::find(exclude.begin(), exclude.end(), j) == exclude.end()) scored.emplace_back(score(query, j), j);
    }
    return select(std::move(scored), k);
}

std::vector<std::uint8_t> EmbeddingGallery::serialize() const {
    std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
    put_le<std::uint32_t>(out, kVersion);
    put_le<std::uint64_t>(out, ids_.size());
    put_le<std::uint32_t>(out, dim_);
    for (std::size_t i = 0; i < ids_.size(); ++i) {
        const std::string& id = ids_[i];
        if (id.size() > std::numeric_limits<std::uint16_t>::max()) {
            throw Error(ErrorKind::InvalidArgument, "image id longer than 65535 bytes");
        }
        put_le<std::uint16_t>(out, static_cast<std::uint16_t>(id.size()));
        out.insert(out.end(), id.begin(), id.end());
        for (float v : row(i)) put_le<float>(out, v);
    }
    return out;
}

void EmbeddingGallery::export_to(const std::filesystem::path& path) const {
    const auto bytes = serialize();
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw Error(ErrorKind::Io, "write failed for '" + path.string() + "'");
}

EmbeddingGallery deserialize_gallery(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw Error(ErrorKind::BadMagic, "missing CIRG magic");
    }
    Reader in(bytes.subspan(4));
    const auto version = in.get<std::uint32_t>("version");
    if (version != kVersion) {
        throw Error(ErrorKind::UnsupportedVersion, "CIRG version " + std::to_string(version));
    }
    const auto count = in.get<std::uint64_t>("count");
    const auto dim = in.get<std::uint32_t>("dim");
    EmbeddingGallery gallery(dim);
    std::vector<float> row(dim);
    for (std::uint64_t i = 0; i < count; ++i) {
        const auto len = in.get<std::uint16_t>("id length");
        std::string id = in.get_string(len, "id");
        for (auto& v : row) v = in.get<float>("embedding");
        try {
            gallery.add(std::move(id), std::span<const float>(row));
        } catch (const Error& e) {
            if (e.kind() == ErrorKind::ZeroVector) {
                throw Error(ErrorKind::ZeroVector, "row " + std::to_string(i) + " is a zero vector");
            }
            throw;
        }
    }
    return gallery;
}

EmbeddingGallery ingest(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorKind::Io, "cannot open '" + path.string() + "'");
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return deserialize_gallery(bytes);
}

}  // namespace semicir
