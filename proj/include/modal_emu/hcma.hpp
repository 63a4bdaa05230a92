#pragma once

#include <cstddef>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "modal_emu/backbone.hpp"
#include "modal_emu/nn.hpp"
#include "modal_emu/tensor.hpp"

namespace modal_emu {

/// Multi-head scaled dot-product attention over row sequences.
///
/// q is [N x D]; k, v are [M x D]; D splits into `heads` column groups of
/// width d = D / heads. Optional key/value prefixes ([L x d], shared by all
/// heads) are prepended to every head's keys and values. Per-head softmax
/// matrices are appended to `weights` when it is non-null.
Tensor multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads,
                            const Tensor& key_prefix = Tensor(), const Tensor& value_prefix = Tensor(),
                            std::vector<Tensor>* weights = nullptr);

/// Q/K/V and output projections for both modalities of one SCMA layer.
struct AttentionParams {
    std::size_t heads = 4;
    Linear query_rgb, key_rgb, value_rgb;
    Linear query_aux, key_aux, value_aux;
    Linear out_rgb, out_aux;

    static AttentionParams create(std::size_t dim, std::size_t heads, std::mt19937_64& rng);
    std::size_t dim() const { return query_rgb.in_features(); }
    std::size_t head_dim() const { return dim() / heads; }
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct SequencePair {
    Tensor rgb;
    Tensor aux;
};

struct FeaturePair {
    Tensor rgb;
    Tensor aux;
};

/// Straight cross-modal attention: RGB queries attend to auxiliary keys/values
/// and vice versa. Heads are concatenated, projected, dropped out and added to
/// the query-side input. Returns token sequences; the block reshapes them.
SequencePair scma(const Tensor& x_rgb, const Tensor& x_aux, const AttentionParams& p, const ForwardContext& ctx,
                  std::vector<Tensor>* weights_rgb = nullptr, std::vector<Tensor>* weights_aux = nullptr);

/// phi: conv3x3 -> ReLU -> conv3x3, channel preserving.
struct ConvPair {
    Conv2d first;
    Conv2d second;

    static ConvPair create(std::size_t channels, std::mt19937_64& rng);
    Tensor forward(const Tensor& x) const { return second.forward(relu(first.forward(x))); }
    void collect(const std::string& prefix, ParameterList& out) const;
};

struct McmaParams {
    ConvPair phi_rgb;
    ConvPair phi_aux;

    static McmaParams create(std::size_t channels, std::mt19937_64& rng);
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// Modulated cross-modal attention: each modality's phi output is gated by the
/// sigmoid of the other modality's phi output, plus a residual.
FeaturePair mcma(const Tensor& f_rgb, const Tensor& f_aux, const McmaParams& p);

/// Two 1x1 convs with ReLU between (per-pixel feed-forward network).
struct FeedForward {
    Conv2d expand;
    Conv2d project;

    static FeedForward create(std::size_t channels, std::size_t hidden, std::mt19937_64& rng);
    Tensor forward(const Tensor& x) const { return project.forward(relu(expand.forward(x))); }
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// One modality's global/local fusion: concat -> 1x1 reduce (2C' -> C') -> f.
struct FusionParams {
    Conv2d reduce;
    FeedForward ffn;

    static FusionParams create(std::size_t channels, std::size_t hidden, std::mt19937_64& rng);
    void collect(const std::string& prefix, ParameterList& out) const;
};

Tensor fuse(const Tensor& global, const Tensor& local, const FusionParams& p);

/// Weighted-sum modality fusion and the density regression head gamma.
struct HeadParams {
    Tensor alpha_logit;  // alpha = sigmoid(alpha_logit)
    Tensor beta_logit;   // beta = sigmoid(beta_logit)
    Conv2d conv1;        // 3x3, C' -> C'/2
    Conv2d conv2;        // 3x3, C'/2 -> C'/4
    Conv2d out;          // 1x1 -> 1 channel

    static HeadParams create(std::size_t channels, std::mt19937_64& rng);
    double alpha() const;
    double beta() const;
    /// gamma(x): [C' x H x W] -> [H x W]; ReLU hidden layers, |.| on the output.
    Tensor gamma(const Tensor& x) const;
    void collect(const std::string& prefix, ParameterList& out) const;
};

/// D = gamma(alpha * F_rgb + beta * F_aux), elementwise non-negative, [H x W].
Tensor regress(const Tensor& f_rgb, const Tensor& f_aux, const HeadParams& p);

enum class BlockKind {
    Hybrid,        // SCMA + MCMA + fusion (either branch may be disabled)
    VanillaCross,  // SCMA + feed-forward only
};

struct HcmaBlockConfig {
    std::size_t in_channels = 32;
    std::size_t fused_channels = 32;
    std::size_t patch_size = 1;
    std::size_t dim = 64;
    std::size_t heads = 4;
    std::size_t ffn_hidden = 64;
    bool use_scma = true;
    bool use_mcma = true;
    BlockKind kind = BlockKind::Hybrid;

    void validate() const;
};

class HcmaBlock {
   public:
    static HcmaBlock create(const HcmaBlockConfig& cfg, std::mt19937_64& rng);

    /// Patch-embeds this stage's 2-D inputs.
    SequencePair embed(const Tensor& f_rgb, const Tensor& f_aux) const;

    /// Runs the block on token sequences for an H x W feature grid. The first
    /// `prefix_tokens` rows of each sequence are prompt tokens: they take part
    /// in SCMA and are dropped before the 2-D reshape.
    FeaturePair forward_tokens(const Tensor& x_rgb, const Tensor& x_aux, std::size_t height, std::size_t width,
                               const ForwardContext& ctx, std::size_t prefix_tokens = 0) const;

    const HcmaBlockConfig& config() const { return cfg_; }
    const std::optional<AttentionParams>& attention() const { return attention_; }
    std::optional<AttentionParams>& attention() { return attention_; }
    const std::optional<McmaParams>& mcma_params() const { return mcma_; }
    std::optional<McmaParams>& mcma_params() { return mcma_; }
    FusionParams& fusion_rgb() { return fusion_rgb_; }
    FusionParams& fusion_aux() { return fusion_aux_; }
    PatchEmbed& embed_rgb() { return embed_rgb_; }
    PatchEmbed& embed_aux() { return embed_aux_; }
    void collect(const std::string& prefix, ParameterList& out) const;

   private:
    HcmaBlockConfig cfg_;
    PatchEmbed embed_rgb_, embed_aux_;
    std::optional<AttentionParams> attention_;
    std::optional<Unpatch> global_rgb_, global_aux_;
    std::optional<Unpatch> local_rgb_, local_aux_;
    std::optional<McmaParams> mcma_;
    FusionParams fusion_rgb_, fusion_aux_;
};

struct StackConfig {
    StreamConfig stream;
    PatchEmbedConfig patches;
    std::size_t fused_channels = 32;
    std::size_t heads = 4;
    std::size_t ffn_hidden = 64;
    bool use_scma = true;
    bool use_mcma = true;
    BlockKind kind = BlockKind::Hybrid;
};

/// Chained HCMA blocks; fused 2-D features are re-embedded between stages
/// with each stage's patch size and dimension.
class HcmaStack {
   public:
    static HcmaStack create(const StackConfig& cfg, std::mt19937_64& rng);

    /// Backbone features in, fused features [C' x H x W] out.
    FeaturePair forward(const Tensor& f_rgb, const Tensor& f_aux, const ForwardContext& ctx) const;

    /// First-stage token sequences in (as produced by embed_first).
    FeaturePair forward_tokens(const Tensor& x_rgb, const Tensor& x_aux, std::size_t height, std::size_t width,
                               const ForwardContext& ctx, std::size_t prefix_tokens = 0) const;

    SequencePair embed_first(const Tensor& f_rgb, const Tensor& f_aux) const { return blocks_.front().embed(f_rgb, f_aux); }

    std::size_t stages() const { return blocks_.size(); }
    const HcmaBlock& block(std::size_t i) const { return blocks_.at(i); }
    HcmaBlock& block(std::size_t i) { return blocks_.at(i); }
    void collect(const std::string& prefix, ParameterList& out) const;

   private:
    std::vector<HcmaBlock> blocks_;
};

}  // namespace modal_emu
