#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "conceptsplit/aggregate.hpp"
#include "conceptsplit/model.hpp"

namespace csplit {

// Spatial attention slice smoothed and sum-normalized into a probability
// distribution; every cell carries at least the epsilon floor so KL terms
// stay finite.
inline constexpr double kDistributionFloor = 1e-12;

struct TokenDistribution {
    Tensor p;  // (h, w), entries >= floor, sums to 1
    int h = 0, w = 0;
};

struct BinaryMask {
    int h = 0, w = 0;
    std::vector<uint8_t> cells;  // h*w entries of 0/1

    int count() const;
    bool at(int y, int x) const {
        return cells[static_cast<size_t>(y) * static_cast<size_t>(w) +
                     static_cast<size_t>(x)] != 0;
    }
};

// Per-token percentile masks for attention fixing; cell (m,n) is in mask i
// exactly when the smoothed map is >= threshold_i (ties included).
struct AfgMaskSet {
    std::vector<double> thresholds;
    std::vector<BinaryMask> masks;
    std::vector<int> token_indices;
    int h = 0, w = 0;
};

struct InferenceConfig {
    int steps = 50;           // DDIM steps
    double guidance = 7.5;    // CFG weight
    int stage1_steps = 10;    // N: latent-optimization budget
    double tau = 1.0;         // ReLU safeguard threshold
    double gamma = 0.9;       // percentile for AFG masks
    double amplify = 3.0;     // p; +5 is a known-good stronger setting
    double suppress = -1e8;   // m
    double eta_base = 40.0;   // eta_t = base - slope * t / T
    double eta_slope = 20.0;
    uint64_t seed = 0;
    bool stage1 = true;
    bool afg = true;
    int blur_ksize = 3;
    double blur_sigma = 1.0;

    void validate() const;
};

// ---- stage-1 math ----------------------------------------------------------

// Blur + floor + sum-normalize one attention slice. An all-zero slice maps to
// the uniform distribution (documented degenerate case).
TokenDistribution smooth_and_normalize(const Tensor& slice, int ksize = 3,
                                       double sigma = 1.0);

// KL(P_i || P_j) summed over cells; finite by the epsilon floor. Stays on
// tape when inputs are tracked.
Tensor pairwise_kl(const TokenDistribution& p_i, const TokenDistribution& p_j);
double pairwise_kl_value(const TokenDistribution& p_i, const TokenDistribution& p_j);

// count / sum(1/value); values below 1e-12 are clamped up to it.
Tensor harmonic_mean(const std::vector<Tensor>& values);
double harmonic_mean(const std::vector<double>& values);

// max(0, tau - klh)
Tensor kl_loss(const Tensor& klh, double tau);
double kl_loss(double klh, double tau);

double eta_schedule(int t, int total_steps, double base = 40.0, double slope = 20.0);

// One latent-optimization step at timestep t. When the safeguard fires
// (KL^H >= tau) the returned latent is the input tensor, bit for bit.
struct Stage1Result {
    Tensor z_next;
    double kl_h = 0.0;
    double loss = 0.0;
    double eta = 0.0;
    bool updated = false;
};

Stage1Result stage1_update(const DenoiserModel& model, const Tensor& z_t,
                           const PromptEncoding& prompt, const std::vector<int>& S,
                           const InferenceConfig& cfg, int t,
                           const Hooks& cond_hooks = {});

// ---- stage-2 (attention fixing guidance) ------------------------------------

// Percentile gamma is nearest-rank on the ascending sort: the threshold is
// the ceil(gamma * count)-th smallest value, every cell >= it is in the mask;
// gamma = 0 selects everything.
AfgMaskSet compute_afg_masks(const AttentionAggregate& agg, double gamma,
                             int ksize = 3, double sigma = 1.0);

// Pre-softmax logit edit: column i of S gains +p on its own mask and +m on
// every other token's mask, broadcast over query cells.
Tensor apply_afg(const Tensor& logits, const AfgMaskSet& masks, double p, double m);

Hooks afg_hooks(const AfgMaskSet& masks, double p, double m,
                const Hooks& base = {});

// ---- full two-stage inference ------------------------------------------------

struct StepDiagnostics {
    int step = 0;
    int t = 0;
    double kl_h = 0.0;
    double loss = 0.0;
    double eta = 0.0;
    bool stage1_active = false;  // inside the first N steps
    bool stage1_updated = false; // gradient step actually taken
    bool afg_active = false;
    std::vector<double> entropy;    // per token in S
    std::vector<int> mask_counts;   // per token in S
    std::vector<BinaryMask> masks;  // per token in S, from this step's maps
    std::vector<Tensor> maps;       // per token in S, aggregated (h, w) slices
};

struct LodaResult {
    Tensor latent;
    std::vector<int> token_indices;
    std::vector<StepDiagnostics> steps;
};

// Two-stage denoising loop: the first N steps run latent optimization before
// denoising; afterwards AFG hooks pin the disentangled attention, with masks
// recomputed each step from that step's fresh aggregate. Stage 1 requires
// |S| >= 2 (the pairwise loss is undefined otherwise).
LodaResult loda_sample(const DenoiserModel& model, const PromptEncoding& prompt,
                       const std::vector<int>& S, const InferenceConfig& cfg,
                       const Hooks& adapter_hooks = {});

}  // namespace csplit
