#include "lsp/dataio.hpp"

#include "lsp/rng.hpp"

#include <zlib.h>

#include <filesystem>
#include <fstream>

namespace lsp {

namespace {

constexpr uint8_t kDtypeU8 = 0x08;

uint32_t read_be32(const uint8_t* p) {
    return (uint32_t(p[0]) << 24) | (uint32_t(p[1]) << 16) | (uint32_t(p[2]) << 8) | uint32_t(p[3]);
}

void write_be32(std::vector<uint8_t>& out, uint32_t v) {
    out.push_back(uint8_t(v >> 24));
    out.push_back(uint8_t(v >> 16));
    out.push_back(uint8_t(v >> 8));
    out.push_back(uint8_t(v));
}

std::vector<uint8_t> read_gz(const std::string& path) {
    gzFile f = gzopen(path.c_str(), "rb");
    if (!f) fail(ErrorCode::MissingFile, path);
    std::vector<uint8_t> out;
    std::vector<uint8_t> chunk(1 << 16);
    for (;;) {
        int n = gzread(f, chunk.data(), static_cast<unsigned>(chunk.size()));
        if (n < 0) {
            gzclose(f);
            fail(ErrorCode::CorruptFile, path + ": gzip read error");
        }
        out.insert(out.end(), chunk.begin(), chunk.begin() + n);
        if (n < static_cast<int>(chunk.size())) break;
    }
    gzclose(f);
    return out;
}

}  // namespace

RawIdxTensor parse_idx(const std::vector<uint8_t>& bytes) {
    if (bytes.size() < 4) fail(ErrorCode::TruncatedPayload, "IDX header needs 4 bytes");
    if (bytes[0] != 0 || bytes[1] != 0)
        fail(ErrorCode::BadMagic, "IDX magic starts " + std::to_string(bytes[0]) + "," +
                                      std::to_string(bytes[1]) + ", expected 0,0");
    RawIdxTensor t;
    t.dtype_code = bytes[2];
    if (t.dtype_code != kDtypeU8)
        fail(ErrorCode::BadMagic, "unsupported IDX dtype code " + std::to_string(t.dtype_code));
    const size_t ndims = bytes[3];
    if (bytes.size() < 4 + 4 * ndims)
        fail(ErrorCode::TruncatedPayload, "IDX header declares " + std::to_string(ndims) +
                                              " dims, bytes end inside the size list");
    int64_t numel = 1;
    for (size_t d = 0; d < ndims; ++d) {
        const uint32_t dim = read_be32(bytes.data() + 4 + 4 * d);
        t.dims.push_back(static_cast<int64_t>(dim));
        numel *= dim;
    }
    const size_t offset = 4 + 4 * ndims;
    if (bytes.size() < offset + static_cast<size_t>(numel))
        fail(ErrorCode::TruncatedPayload,
             "IDX payload has " + std::to_string(bytes.size() - offset) + " bytes, header declares " +
                 std::to_string(numel));
    if (bytes.size() > offset + static_cast<size_t>(numel))
        fail(ErrorCode::CorruptFile,
             "IDX file has " + std::to_string(bytes.size() - offset - numel) + " trailing bytes");
    t.payload.assign(bytes.begin() + offset, bytes.end());
    return t;
}

std::vector<uint8_t> serialize_idx(const RawIdxTensor& t) {
    int64_t numel = 1;
    for (int64_t d : t.dims) numel *= d;
    if (numel != static_cast<int64_t>(t.payload.size()))
        fail(ErrorCode::ShapeMismatch, "IDX dims product " + std::to_string(numel) + " vs payload " +
                                           std::to_string(t.payload.size()));
    std::vector<uint8_t> out;
    out.reserve(4 + 4 * t.dims.size() + t.payload.size());
    out.push_back(0);
    out.push_back(0);
    out.push_back(t.dtype_code);
    out.push_back(static_cast<uint8_t>(t.dims.size()));
    for (int64_t d : t.dims) write_be32(out, static_cast<uint32_t>(d));
    out.insert(out.end(), t.payload.begin(), t.payload.end());
    return out;
}

std::vector<uint8_t> read_file_bytes(const std::string& path) {
    if (path.size() > 3 && path.substr(path.size() - 3) == ".gz") return read_gz(path);
    std::ifstream in(path, std::ios::binary);
    if (!in) fail(ErrorCode::MissingFile, path);
    std::vector<uint8_t> out((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    return out;
}

const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        case Split::Test: return "test";
    }
    return "?";
}

namespace {

RawIdxTensor load_idx_file(const std::string& root, const std::string& stem) {
    namespace fs = std::filesystem;
    const std::string plain = (fs::path(root) / stem).string();
    if (fs::exists(plain)) return parse_idx(read_file_bytes(plain));
    const std::string gz = plain + ".gz";
    if (fs::exists(gz)) return parse_idx(read_file_bytes(gz));
    fail(ErrorCode::MissingFile, plain + " (also tried .gz)");
}

}  // namespace

LabeledImageSet load_dataset(const std::string& root, Split split) {
    const bool test = split == Split::Test;
    RawIdxTensor imgs = load_idx_file(root, test ? "t10k-images-idx3-ubyte" : "train-images-idx3-ubyte");
    RawIdxTensor labs = load_idx_file(root, test ? "t10k-labels-idx1-ubyte" : "train-labels-idx1-ubyte");

    if (imgs.dims.size() != 3)
        fail(ErrorCode::ShapeMismatch, "image file rank " + std::to_string(imgs.dims.size()));
    if (labs.dims.size() != 1)
        fail(ErrorCode::ShapeMismatch, "label file rank " + std::to_string(labs.dims.size()));
    if (imgs.dims[0] != labs.dims[0])
        fail(ErrorCode::ShapeMismatch, std::to_string(imgs.dims[0]) + " images vs " +
                                           std::to_string(labs.dims[0]) + " labels");

    int64_t first = 0, count = imgs.dims[0];
    if (!test) {
        if (imgs.dims[0] != 60000)
            fail(ErrorCode::PreconditionViolation,
                 "expected the 60000-record training file, found " + std::to_string(imgs.dims[0]));
        first = split == Split::Train ? 0 : 55000;
        count = split == Split::Train ? 55000 : 5000;
    }

    const int64_t h = imgs.dims[1], w = imgs.dims[2];
    LabeledImageSet set;
    set.split = split;
    set.images = Tensor<float>({count, h, w});
    set.labels.resize(static_cast<size_t>(count));
    const uint8_t* px = imgs.payload.data() + first * h * w;
    for (int64_t i = 0; i < count * h * w; ++i) set.images[i] = static_cast<float>(px[i]) / 255.0f;
    for (int64_t i = 0; i < count; ++i) {
        const uint8_t lab = labs.payload[static_cast<size_t>(first + i)];
        if (lab > 9) fail(ErrorCode::InvalidClass, "label " + std::to_string(lab));
        set.labels[static_cast<size_t>(i)] = lab;
    }
    return set;
}

LabeledImageSet head_subset(const LabeledImageSet& set, int64_t n) {
    if (n < 1 || n > set.count())
        fail(ErrorCode::PreconditionViolation, "subset size " + std::to_string(n) + " of " +
                                                   std::to_string(set.count()));
    LabeledImageSet out;
    out.split = set.split;
    const int64_t h = set.height(), w = set.width();
    out.images = Tensor<float>({n, h, w});
    for (int64_t i = 0; i < n * h * w; ++i) out.images[i] = set.images[i];
    out.labels.assign(set.labels.begin(), set.labels.begin() + n);
    return out;
}

BatchIter::BatchIter(const LabeledImageSet& set, int64_t batch_size, uint64_t seed, bool shuffle)
    : set_(set), batch_size_(batch_size) {
    if (batch_size < 1) fail(ErrorCode::PreconditionViolation, "batch size must be >= 1");
    reset(seed, shuffle);
}

void BatchIter::reset(uint64_t seed, bool shuffle) {
    order_.resize(static_cast<size_t>(set_.count()));
    for (int64_t i = 0; i < set_.count(); ++i) order_[static_cast<size_t>(i)] = i;
    if (shuffle) Rng(seed).shuffle(order_);
    cursor_ = 0;
}

int64_t BatchIter::batches_per_epoch() const {
    return (set_.count() + batch_size_ - 1) / batch_size_;
}

bool BatchIter::next(Tensor<float>& images, std::vector<int32_t>& labels) {
    const int64_t n = set_.count();
    if (cursor_ >= n) {
        images = Tensor<float>();
        labels.clear();
        return false;
    }
    const int64_t b = std::min(batch_size_, n - cursor_);
    const int64_t h = set_.height(), w = set_.width();
    images = Tensor<float>({b, 1, h, w});
    labels.resize(static_cast<size_t>(b));
    for (int64_t i = 0; i < b; ++i) {
        const int64_t src = order_[static_cast<size_t>(cursor_ + i)];
        const float* from = set_.images.data() + src * h * w;
        float* to = images.data() + i * h * w;
        for (int64_t p = 0; p < h * w; ++p) to[p] = from[p];
        labels[static_cast<size_t>(i)] = set_.labels[static_cast<size_t>(src)];
    }
    cursor_ += b;
    return true;
}

}  // namespace lsp
