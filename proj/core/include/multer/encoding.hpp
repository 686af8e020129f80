#pragma once

#include <random>

#include "multer/tensor.hpp"

namespace multer {

// K learnable codewords of dimension D plus one learnable smoothing factor
// per codeword. Smoothing is stored unconstrained and mapped through
// softplus wherever it is applied, so the effective value is always > 0.
struct Codebook {
    TensorPtr codewords;  // [K×D]
    TensorPtr smoothing;  // [K], pre-softplus
};

struct LemConfig {
    std::int64_t d = 512;        // channel dim of the input feature map
    std::int64_t k = 8;          // codeword count
    std::int64_t branch_dim = 64;
    std::int64_t c = 128;        // output dim
};

// All learnable state of one encoding module: the codebook, the two branch
// projections, the fused projection, and one normalization per branch.
struct LemParams {
    LemConfig cfg;
    Codebook codebook;
    Linear fc1;     // K·D -> branch_dim (orderless branch)
    Linear fc2;     // D -> branch_dim (pooled branch)
    Linear fc3;     // branch_dim² -> C
    BatchNorm bn1;  // over the flattened encoding
    BatchNorm bn2;  // over the pooled vector
};

Codebook make_codebook(std::int64_t k, std::int64_t d, std::mt19937_64& rng);
LemParams make_lem_params(const LemConfig& cfg, std::mt19937_64& rng);

// Learnable tensors in a fixed order (codewords, smoothing, fc1..fc3, bn1, bn2).
std::vector<TensorPtr> lem_parameters(LemParams& p);

double softplus(double x);
double effective_smoothing(double raw);  // softplus applied to the stored value

// [B×D×H×W] -> [B×N×D]: descriptor i carries the channel values of spatial
// position i in row-major order, N = H·W.
TensorPtr reshape_spatial(Tape& tape, const TensorPtr& fmap);

// Soft assignment a_ik = softmax_k(-s_k·‖x_i - c_k‖²); each row sums to 1.
TensorPtr assign_weights(Tape& tape, const TensorPtr& descriptors, const Codebook& cb);

// Mean-normalized residual aggregation e_k = (1/N)·Σ_i a_ik·(x_i - c_k).
TensorPtr aggregate(Tape& tape, const TensorPtr& descriptors, const Codebook& cb,
                    const TensorPtr& assignments);

// reshape_spatial ∘ assign_weights ∘ aggregate, flattened row-major to [B×K·D].
TensorPtr encode(Tape& tape, const TensorPtr& fmap, const Codebook& cb);

// Full module: the encoded branch and the pooled branch, each normalized and
// projected to branch_dim, fused by a flattened outer product and projected
// to C. Output extent is C for any spatial input size.
TensorPtr lem_forward(Tape& tape, const TensorPtr& fmap, LemParams& p, Mode mode);

}  // namespace multer
