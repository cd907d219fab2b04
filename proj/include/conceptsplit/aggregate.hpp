#pragma once

#include <vector>

#include "conceptsplit/tensor.hpp"

namespace csplit {

// Cross-attention maps of one forward pass averaged over all blocks and
// heads, sliced to the token columns S, at latent resolution. The map stays
// on tape when the source maps are tracked, so Stage-1 losses can
// differentiate through it.
struct AttentionAggregate {
    Tensor map;          // (h*w, k) columns ordered as token_indices
    int h = 0, w = 0;
    std::vector<int> token_indices;  // S
    int timestep = -1;

    Tensor token_map(int k) const;  // (h, w) slice for token_indices[k]
};

AttentionAggregate aggregate_attention(const std::vector<Tensor>& maps,
                                       const std::vector<int>& token_indices,
                                       int h, int w, int num_words, int timestep);

}  // namespace csplit
