#pragma once

#include "lsp/tensor.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace lsp {

// Decoded IDX container, kept byte-exact so parse -> serialize round-trips.
struct RawIdxTensor {
    uint8_t dtype_code = 0;
    std::vector<int64_t> dims;
    std::vector<uint8_t> payload;
};

// IDX header: two zero bytes, dtype code, dimension count, then one 4-byte
// big-endian size per dimension, then the row-major payload. Only the
// unsigned-byte dtype (0x08) is accepted.
RawIdxTensor parse_idx(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> serialize_idx(const RawIdxTensor& t);

// Whole-file read; paths ending in .gz are decompressed transparently.
std::vector<uint8_t> read_file_bytes(const std::string& path);

enum class Split { Train, Val, Test };

const char* split_name(Split s);

struct LabeledImageSet {
    Tensor<float> images;  // [N, H, W], values in [0,1]
    std::vector<int32_t> labels;
    Split split = Split::Train;

    int64_t count() const { return images.size() ? images.dim(0) : 0; }
    int64_t height() const { return images.dim(1); }
    int64_t width() const { return images.dim(2); }
};

// Standard MNIST file layout under `root` (each optionally present as .gz):
// train-images-idx3-ubyte, train-labels-idx1-ubyte, t10k-images-idx3-ubyte,
// t10k-labels-idx1-ubyte. Train split = first 55,000 training records,
// val = last 5,000, test = the full test pair.
LabeledImageSet load_dataset(const std::string& root, Split split);

// First `n` records (used for reduced desk-scale runs).
LabeledImageSet head_subset(const LabeledImageSet& set, int64_t n);

// Batches in [B,1,H,W] layout ready for convolutions; order is the identity
// or a seed-determined permutation, every record exactly once per epoch.
class BatchIter {
public:
    BatchIter(const LabeledImageSet& set, int64_t batch_size, uint64_t seed, bool shuffle);

    // Fills the next batch; returns false (leaving outputs empty) at epoch end.
    bool next(Tensor<float>& images, std::vector<int32_t>& labels);
    void reset(uint64_t seed, bool shuffle);
    int64_t batches_per_epoch() const;

private:
    const LabeledImageSet& set_;
    int64_t batch_size_;
    std::vector<int64_t> order_;
    int64_t cursor_ = 0;
};

}  // namespace lsp
