// SPDX-License-Identifier: Apache-2.0
//
// Patch tokenization, sinusoidal encodings, and a pre-norm self-attention
// backbone with optional role-based masking, QK-norm, and key/value caching.
#pragma once

#include "bt/nn.hpp"
#include "bt/tensor.hpp"

#include <random>
#include <string>
#include <vector>

namespace bt {

struct BackboneConfig {
    int dim = 256;
    int blocks = 8;
    int heads = 8;
    int patch = 8;
    bool qk_norm = true;
    int mlp_ratio = 4;

    int head_dim() const { return dim / heads; }
    void validate() const;
    bool operator==(const BackboneConfig&) const = default;
};

// [H, W, C] -> [(H/p)(W/p), p*p*C]: raster-order patches, channel-last.
ad::Tensor patchify(const ad::Tensor& image, int patch);
// Exact inverse of patchify.
ad::Tensor unpatchify(const ad::Tensor& patches, int height, int width, int patch);

// Interleaved (sin(t w_k), cos(t w_k)) with w_k = 10000^(-2k/dim).
std::vector<double> sinusoidal_pe(double t, int dim);

enum class TokenRole : std::uint8_t { context, target };

// Context queries see only context keys; target queries see everything.
ad::Mask role_mask(const std::vector<TokenRole>& roles);

struct BlockWeights {
    nn::LayerNorm norm1;
    nn::Linear qkv; // dim -> 3 dim (q, k, v)
    nn::Linear proj;
    ad::Tensor temperature; // [heads], used with qk_norm
    nn::LayerNorm norm2;
    nn::Linear fc1;
    nn::Linear fc2;

    void visit(const nn::ParamVisitor& v, const std::string& prefix);
};

struct BackboneWeights {
    nn::LayerNorm pre_norm;
    std::vector<BlockWeights> blocks;
    nn::LayerNorm post_norm;

    BackboneWeights() = default;
    BackboneWeights(const BackboneConfig& cfg, std::mt19937_64& rng);
    void visit(const nn::ParamVisitor& v, const std::string& prefix);
};

// Keys and values of a cached token prefix, one entry per block. Keys are
// stored after QK normalization.
struct KVCache {
    std::vector<ad::Tensor> keys;   // [heads, prefix, head_dim]
    std::vector<ad::Tensor> values; // [heads, prefix, head_dim]
    std::int64_t length = 0;

    bool empty() const { return length == 0; }
    void clear();
};

// tokens: [N, dim]. With an empty cache the tokens are processed normally and
// their keys/values stored; with a filled cache the tokens are a suffix that
// attends to the cached prefix and to itself. Only the given tokens' outputs
// are returned. mask, when present, is [N, prefix + N].
ad::Tensor backbone_forward(const BackboneWeights& w, const BackboneConfig& cfg, const ad::Tensor& tokens,
                            const ad::Mask* mask = nullptr, KVCache* cache = nullptr);

// Maximum |pre-softmax logit| of each block for the given tokens (no mask).
// Used to check the QK-norm bound.
std::vector<double> attention_logit_bounds(const BackboneWeights& w, const BackboneConfig& cfg,
                                           const ad::Tensor& tokens);

} // namespace bt
