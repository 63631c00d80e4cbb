// SPDX-License-Identifier: Apache-2.0
#include "bt/transformer.hpp"

#include "bt/error.hpp"

#include <cmath>

namespace bt {

void BackboneConfig::validate() const {
    if (dim <= 0 || heads <= 0 || dim % heads != 0)
        throw ContractError("backbone: dim must be a positive multiple of heads");
    if (blocks < 0) throw ContractError("backbone: negative block count");
    if (patch <= 0 || mlp_ratio <= 0) throw ContractError("backbone: patch and mlp_ratio must be positive");
}

ad::Tensor patchify(const ad::Tensor& image, int patch) {
    if (image.rank() != 3) throw ShapeError("patchify: expected [H,W,C], got " + ad::to_string(image.shape()));
    const std::int64_t h = image.size(0), w = image.size(1), c = image.size(2);
    if (patch <= 0 || h % patch != 0 || w % patch != 0)
        throw ShapeError("patchify: patch " + std::to_string(patch) + " does not divide " + ad::to_string(image.shape()));
    auto x = ad::reshape(image, {h / patch, patch, w / patch, patch, c});
    x = ad::transpose(x, 1, 2);
    return ad::reshape(x, {(h / patch) * (w / patch), patch * patch * c});
}

ad::Tensor unpatchify(const ad::Tensor& patches, int height, int width, int patch) {
    if (patches.rank() != 2 || patch <= 0 || height % patch != 0 || width % patch != 0)
        throw ShapeError("unpatchify: incompatible geometry");
    const std::int64_t count = static_cast<std::int64_t>(height / patch) * (width / patch);
    const std::int64_t per = static_cast<std::int64_t>(patch) * patch;
    if (patches.size(0) != count || patches.size(1) % per != 0)
        throw ShapeError("unpatchify: " + ad::to_string(patches.shape()) + " does not tile " +
                         std::to_string(height) + "x" + std::to_string(width));
    const std::int64_t c = patches.size(1) / per;
    auto x = ad::reshape(patches, {height / patch, width / patch, patch, patch, c});
    x = ad::transpose(x, 1, 2);
    return ad::reshape(x, {height, width, c});
}

std::vector<double> sinusoidal_pe(double t, int dim) {
    if (dim <= 0 || dim % 2 != 0) throw ContractError("sinusoidal_pe: dim must be positive and even");
    std::vector<double> pe(static_cast<std::size_t>(dim));
    for (int k = 0; k < dim / 2; ++k) {
        const double omega = std::pow(10000.0, -2.0 * k / dim);
        pe[2 * k] = std::sin(t * omega);
        pe[2 * k + 1] = std::cos(t * omega);
    }
    return pe;
}

ad::Mask role_mask(const std::vector<TokenRole>& roles) {
    const auto n = static_cast<std::int64_t>(roles.size());
    ad::Mask m;
    m.shape = {n, n};
    m.allowed.resize(static_cast<std::size_t>(n * n));
    for (std::int64_t q = 0; q < n; ++q)
        for (std::int64_t k = 0; k < n; ++k)
            m.allowed[q * n + k] = roles[q] == TokenRole::target || roles[k] == TokenRole::context;
    return m;
}

void BlockWeights::visit(const nn::ParamVisitor& v, const std::string& prefix) {
    norm1.visit(v, prefix + ".norm1");
    qkv.visit(v, prefix + ".qkv");
    proj.visit(v, prefix + ".proj");
    v(prefix + ".temperature", temperature);
    norm2.visit(v, prefix + ".norm2");
    fc1.visit(v, prefix + ".fc1");
    fc2.visit(v, prefix + ".fc2");
}

BackboneWeights::BackboneWeights(const BackboneConfig& cfg, std::mt19937_64& rng)
    : pre_norm(cfg.dim), post_norm(cfg.dim) {
    cfg.validate();
    const double std = 0.02;
    const double out_std = cfg.blocks > 0 ? std / std::sqrt(2.0 * cfg.blocks) : std;
    const std::int64_t d = cfg.dim, hidden = static_cast<std::int64_t>(cfg.dim) * cfg.mlp_ratio;
    for (int b = 0; b < cfg.blocks; ++b) {
        BlockWeights blk;
        blk.norm1 = nn::LayerNorm(d);
        blk.qkv = nn::Linear(d, 3 * d, std, rng);
        blk.proj = nn::Linear(d, d, out_std, rng);
        blk.temperature = ad::Tensor::parameter(ad::Tensor::full({cfg.heads}, std::sqrt(double(cfg.head_dim()))));
        blk.norm2 = nn::LayerNorm(d);
        blk.fc1 = nn::Linear(d, hidden, std, rng);
        blk.fc2 = nn::Linear(hidden, d, out_std, rng);
        blocks.push_back(std::move(blk));
    }
}

void BackboneWeights::visit(const nn::ParamVisitor& v, const std::string& prefix) {
    pre_norm.visit(v, prefix + ".pre_norm");
    for (std::size_t b = 0; b < blocks.size(); ++b) blocks[b].visit(v, prefix + ".block" + std::to_string(b));
    post_norm.visit(v, prefix + ".post_norm");
}

void KVCache::clear() {
    keys.clear();
    values.clear();
    length = 0;
}

namespace {

// [N, dim] slice -> [heads, N, head_dim]
ad::Tensor split_heads(const ad::Tensor& x, std::int64_t n, const BackboneConfig& cfg) {
    return ad::transpose(ad::reshape(x, {n, cfg.heads, cfg.head_dim()}), 0, 1);
}

ad::Tensor attention(const BlockWeights& blk, const BackboneConfig& cfg, const ad::Tensor& x,
                     const ad::Mask* mask, KVCache* cache, std::size_t block, double* logit_max) {
    const std::int64_t n = x.size(0), d = cfg.dim;
    const ad::Tensor qkv = blk.qkv(x);
    ad::Tensor q = split_heads(ad::slice(qkv, 1, 0, d), n, cfg);
    ad::Tensor k = split_heads(ad::slice(qkv, 1, d, 2 * d), n, cfg);
    ad::Tensor v = split_heads(ad::slice(qkv, 1, 2 * d, 3 * d), n, cfg);
    if (cfg.qk_norm) {
        q = ad::l2_normalize(q);
        k = ad::l2_normalize(k);
    }
    if (cache) {
        if (cache->length > 0) {
            k = ad::concat({cache->keys[block], k}, 1);
            v = ad::concat({cache->values[block], v}, 1);
        } else {
            cache->keys.push_back(k);
            cache->values.push_back(v);
        }
    }
    ad::Tensor scores = ad::matmul(q, k, true);
    if (cfg.qk_norm)
        scores = ad::mul(scores, ad::reshape(blk.temperature, {cfg.heads, 1, 1}));
    else
        scores = ad::scale(scores, 1.0 / std::sqrt(double(cfg.head_dim())));
    if (logit_max) {
        for (double s : scores.values()) *logit_max = std::max(*logit_max, std::abs(s));
    }
    const ad::Tensor p = ad::masked_softmax(scores, mask);
    const ad::Tensor o = ad::reshape(ad::transpose(ad::matmul(p, v), 0, 1), {n, d});
    return blk.proj(o);
}

ad::Tensor forward_impl(const BackboneWeights& w, const BackboneConfig& cfg, const ad::Tensor& tokens,
                        const ad::Mask* mask, KVCache* cache, std::vector<double>* logit_max) {
    cfg.validate();
    if (tokens.rank() != 2 || tokens.size(1) != cfg.dim)
        throw ShapeError("backbone: tokens must be [N," + std::to_string(cfg.dim) + "], got " +
                         ad::to_string(tokens.shape()));
    if (w.blocks.size() != static_cast<std::size_t>(cfg.blocks))
        throw ContractError("backbone: weights do not match the configured block count");
    const std::int64_t n = tokens.size(0);
    const std::int64_t keys = n + (cache ? cache->length : 0);
    if (mask && mask->shape != ad::Shape{n, keys})
        throw ShapeError("backbone: mask " + ad::to_string(mask->shape) + " does not match " +
                         std::to_string(n) + " queries over " + std::to_string(keys) + " keys");
    const bool filling = cache && cache->length == 0;
    if (filling) cache->clear();

    ad::Tensor x = w.pre_norm(tokens);
    for (std::size_t b = 0; b < w.blocks.size(); ++b) {
        const BlockWeights& blk = w.blocks[b];
        double* lm = logit_max ? &(*logit_max)[b] : nullptr;
        x = ad::add(x, attention(blk, cfg, blk.norm1(x), mask, cache, b, lm));
        x = ad::add(x, blk.fc2(ad::gelu(blk.fc1(blk.norm2(x)))));
    }
    if (filling) cache->length = n;
    return w.post_norm(x);
}

} // namespace

ad::Tensor backbone_forward(const BackboneWeights& w, const BackboneConfig& cfg, const ad::Tensor& tokens,
                            const ad::Mask* mask, KVCache* cache) {
    return forward_impl(w, cfg, tokens, mask, cache, nullptr);
}

std::vector<double> attention_logit_bounds(const BackboneWeights& w, const BackboneConfig& cfg,
                                           const ad::Tensor& tokens) {
    std::vector<double> out(w.blocks.size(), 0.0);
    ad::NoGradScope no_grad;
    forward_impl(w, cfg, tokens, nullptr, nullptr, &out);
    return out;
}

} // namespace bt
