// SPDX-License-Identifier: Apache-2.0
//
// Parameter containers shared by the reconstruction and synthesis models.
#pragma once

#include "bt/tensor.hpp"

#include <functional>
#include <random>
#include <string>

namespace bt::nn {

// Called once per parameter tensor in a fixed order.
using ParamVisitor = std::function<void(const std::string& name, ad::Tensor& param)>;

// Truncated normal (cut at two standard deviations) filled into a fresh
// parameter of the default precision.
ad::Tensor trunc_normal(ad::Shape shape, double std, std::mt19937_64& rng);

struct Linear {
    ad::Tensor weight; // [in, out]
    ad::Tensor bias;   // [out]

    Linear() = default;
    Linear(std::int64_t in, std::int64_t out, double std, std::mt19937_64& rng);
    // Works on [..., in] inputs.
    ad::Tensor operator()(const ad::Tensor& x) const;
    void visit(const ParamVisitor& v, const std::string& prefix);
};

struct LayerNorm {
    ad::Tensor gain;
    ad::Tensor bias;

    LayerNorm() = default;
    explicit LayerNorm(std::int64_t dim);
    ad::Tensor operator()(const ad::Tensor& x) const;
    void visit(const ParamVisitor& v, const std::string& prefix);
};

// Affine map from an input feature vector to dim, then GELU, then affine.
struct Mlp2 {
    Linear fc1;
    Linear fc2;

    Mlp2() = default;
    Mlp2(std::int64_t in, std::int64_t hidden, std::int64_t out, double std, double out_std,
         std::mt19937_64& rng);
    ad::Tensor operator()(const ad::Tensor& x) const;
    void visit(const ParamVisitor& v, const std::string& prefix);
};

} // namespace bt::nn
