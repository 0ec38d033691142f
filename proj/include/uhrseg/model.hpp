#pragma once

#include "uhrseg/memory_bank.hpp"
#include "uhrseg/optim.hpp"
#include "uhrseg/tensor.hpp"

#include <json.hpp>

#include <string>
#include <vector>

namespace uhrseg {

/// Architecture hyperparameters; recorded in checkpoints and validated on load.
struct ModelConfig {
    int64_t d = 32;       // latent / memory feature width
    int64_t classes = 8;  // C
    int64_t downscale = 4;
    int64_t enc_freqs = 4;   // n frequencies of the periodic encoder
    int64_t head_hidden = 128;
    int64_t spatial_width = 16;
    std::vector<int64_t> semantic_widths = {64, 256, 256}; // conv1..conv3; conv4 emits d

    /// Width of the concatenated query vector:
    /// [z*, delta, phi] + [m_b*, delta_b, phi_b] + [m_l*, delta_l, phi_l]
    int64_t query_input_width() const {
        return d + 2 * classes + 3 * (2 + 4 * enc_freqs);
    }

    void validate() const;
    nlohmann::json to_json() const;
    static ModelConfig from_json(const nlohmann::json& js);
};

/// Structure ablation switches (Table-style rows). The architecture is
/// unchanged; disabled guidance enters the query as zeros and the
/// corresponding branches are simply not run.
struct AblationFlags {
    bool use_m_b = true;
    bool use_m_l = true;
    bool use_memory = true;
    bool cross_branch = true;           // update from semantic features (vs f_b)
    std::string read_mode = "softmax";  // softmax | concat
    std::string update_mode = "cosine"; // cosine | mean
    std::string upsampler = "query";    // query | bilinear

    void validate() const;
    nlohmann::json to_json() const;
    static AblationFlags from_json(const nlohmann::json& js);
};

/// One full-resolution patch and its downscaled companion, both {3,H,W}
/// doubles in [0,1]. H and W must be divisible by 4 and by the downscale
/// factor.
struct PatchPair {
    TensorPtr full;
    TensorPtr down;

    static PatchPair make(const TensorPtr& full, int64_t downscale);
};

/// Products of the three encoder branches for one patch. Masks are logits;
/// softmax happens at the consumer.
struct BranchOutputs {
    TensorPtr latent;     // {D, h/4, w/4} of the downscaled patch; also the
                          // memory-update features
    TensorPtr f_b;        // {D, H/2, W/2}
    TensorPtr m_b_logits; // {C, H/2, W/2}
    TensorPtr m_l_logits; // {C, H, W}
};

class Model {
public:
    ModelConfig cfg;
    ParamList params;

    static Model init(const ModelConfig& cfg, uint64_t seed);

    const TensorPtr& p(const std::string& name) const;

    /// Deep branch over the downscaled patch: 4 conv blocks (stride 2,1,2,1)
    /// + 2 residual blocks at D channels.
    TensorPtr semantic_branch(const TensorPtr& down) const;

    /// Shallow stride-2 stack over the full patch; returns features f_b at
    /// half resolution and the 1x1-conv mask logits over them.
    std::pair<TensorPtr, TensorPtr> memory_branch(const TensorPtr& full) const;

    /// Very shallow stride-1 stack over the full patch, full-resolution
    /// class logits.
    TensorPtr spatial_branch(const TensorPtr& full) const;

    /// 1x1 logit head over the latent grid (the bilinear-upsampling baseline).
    TensorPtr semantic_logit_head(const TensorPtr& latent) const;

    /// Branches gated by the ablation flags; disabled outputs stay null.
    BranchOutputs run_branches(const PatchPair& pp, const AblationFlags& flags) const;

    int64_t param_count() const;

private:
    void add_param(const std::string& name, Shape shape, std::vector<double> values);
};

/// Checkpoint glue (architecture + flags + parameters + frozen memory bank).
void save_model(const std::string& path, const Model& model, const AblationFlags& flags,
                const MemoryBank& bank);
struct LoadedModel {
    Model model;
    AblationFlags flags;
    MemoryBank bank;
};
LoadedModel load_model(const std::string& path);

} // namespace uhrseg
