#pragma once

#include <array>
#include <map>
#include <string>
#include <vector>

#include "cgfr/optim.hpp"
#include "cgfr/ops.hpp"

namespace cgfr {

/// Fixed token budget: [CLS] + up to 19 words + [SEP], padded to 21.
constexpr int kTokenLen = 21;
constexpr int kMaxCaptionWords = kTokenLen - 2;

/// Closed token->id map. Ids are dense and stable: the reserved tokens come
/// first, then corpus words in first-occurrence order.
class Vocabulary {
public:
    static Vocabulary build(const std::vector<std::string>& corpus_words);

    int pad_id() const { return 0; }
    int unk_id() const { return 1; }
    int cls_id() const { return 2; }
    int sep_id() const { return 3; }

    int size() const { return static_cast<int>(tokens_.size()); }
    /// Id for a word; unknown words map to [UNK].
    int lookup(const std::string& word) const;
    const std::string& token(int id) const;

    /// UTF-8 lines "token<TAB>id".
    void save(const std::string& path) const;
    static Vocabulary load(const std::string& path);

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> ids_;
};

struct TokenSequence {
    std::array<int, kTokenLen> ids{};
    std::array<int, kTokenLen> mask{};  // 1 on non-PAD positions
};

/// Lowercases and splits a caption into words (runs of alphanumerics).
std::vector<std::string> split_words(const std::string& caption);

/// [CLS] w1..wk [SEP] [PAD]... layout; captions beyond 19 words keep the
/// leading words. Throws InputError when no words survive normalization.
TokenSequence tokenize(const std::string& caption, const Vocabulary& vocab);

struct TextFeatures {
    Tensor tokens_out;  // [L x D] contextual embeddings
    Tensor cls_out;     // row 0
};

struct TextEncoderConfig {
    int dim = 768;
    int layers = 2;
    int heads = 4;
    int ffn_mult = 4;
    double ln_eps = 1e-5;
    double leaky_slope = 0.2;
};

/// Small trainable pre-norm transformer standing in for the pretrained text
/// encoder: token + learned positional embeddings, masked self-attention,
/// feed-forward blocks, final layer norm.
class TextEncoder {
public:
    TextEncoder(const TextEncoderConfig& cfg, int vocab_size, ParamStore& store, Rng& rng);

    /// Contextual embeddings for one token sequence. When attn_out is given,
    /// the per-layer, per-head attention matrices are appended to it.
    TextFeatures forward(const TokenSequence& seq, std::vector<Tensor>* attn_out = nullptr) const;

    const TextEncoderConfig& config() const { return cfg_; }
    int vocab_size() const { return vocab_size_; }

private:
    struct Layer {
        Tensor ln1_g, ln1_b;
        Tensor wq, bq, wk, bk, wv, bv, wo, bo;
        Tensor ln2_g, ln2_b;
        Tensor ffn_w1, ffn_b1, ffn_w2, ffn_b2;
    };
    TextEncoderConfig cfg_;
    int vocab_size_;
    Tensor tok_emb_, pos_emb_;
    std::vector<Layer> layers_;
    Tensor final_g_, final_b_;
};

struct ImageFeatures {
    Tensor local;   // [256 x 14 x 14]
    Tensor global;  // [512]
};

/// Stand-in CNN with the frozen-backbone interface of the production face
/// model: stride-2 stages 112 -> 56 -> 28 -> 14 with the stage-3 map (256
/// channels) exposed as local features and a fully connected layer producing
/// the 512-d global feature.
class ImageEncoder {
public:
    ImageEncoder(int base_width, ParamStore& store, Rng& rng, bool frozen,
                 double leaky_slope = 0.2);

    ImageFeatures forward(const Tensor& image) const;  // expects [3 x 112 x 112]

private:
    struct Conv {
        Tensor w, b;
        int stride;
    };
    std::vector<Conv> convs_;
    Tensor fc_w_, fc_b_;
    double slope_;
};

}  // namespace cgfr
