#include "cgfr/encoders.hpp"

#include <cctype>
#include <cmath>
#include <fstream>

namespace cgfr {

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

Vocabulary Vocabulary::build(const std::vector<std::string>& corpus_words) {
    Vocabulary v;
    v.tokens_ = {"[PAD]", "[UNK]", "[CLS]", "[SEP]"};
    for (std::size_t i = 0; i < v.tokens_.size(); ++i) v.ids_[v.tokens_[i]] = static_cast<int>(i);
    for (const std::string& w : corpus_words) {
        if (!v.ids_.count(w)) {
            v.ids_[w] = static_cast<int>(v.tokens_.size());
            v.tokens_.push_back(w);
        }
    }
    return v;
}

int Vocabulary::lookup(const std::string& word) const {
    auto it = ids_.find(word);
    return it == ids_.end() ? unk_id() : it->second;
}

const std::string& Vocabulary::token(int id) const {
    if (id < 0 || id >= size()) throw InputError("vocabulary id out of range: " + std::to_string(id));
    return tokens_[static_cast<std::size_t>(id)];
}

void Vocabulary::save(const std::string& path) const {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write vocabulary to " + path);
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        out << tokens_[i] << '\t' << i << '\n';
    }
}

Vocabulary Vocabulary::load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open vocabulary " + path);
    Vocabulary v;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::size_t tab = line.find('\t');
        if (tab == std::string::npos) throw IoError("malformed vocabulary line: " + line);
        std::string tok = line.substr(0, tab);
        int id = std::stoi(line.substr(tab + 1));
        if (id != static_cast<int>(v.tokens_.size())) {
            throw IoError("vocabulary ids must be dense, got " + line);
        }
        v.ids_[tok] = id;
        v.tokens_.push_back(std::move(tok));
    }
    if (v.size() < 4) throw IoError("vocabulary missing reserved tokens");
    return v;
}

// ---------------------------------------------------------------------------
// Tokenization
// ---------------------------------------------------------------------------

std::vector<std::string> split_words(const std::string& caption) {
    std::vector<std::string> words;
    std::string cur;
    for (char ch : caption) {
        unsigned char c = static_cast<unsigned char>(ch);
        if (std::isalnum(c)) {
            cur.push_back(static_cast<char>(std::tolower(c)));
        } else if (!cur.empty()) {
            words.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) words.push_back(std::move(cur));
    return words;
}

TokenSequence tokenize(const std::string& caption, const Vocabulary& vocab) {
    std::vector<std::string> words = split_words(caption);
    if (words.empty()) throw InputError("empty caption after normalization");
    if (static_cast<int>(words.size()) > kMaxCaptionWords) {
        words.resize(kMaxCaptionWords);  // extra tokens are truncated
    }
    TokenSequence seq;
    int pos = 0;
    seq.ids[pos++] = vocab.cls_id();
    for (const std::string& w : words) seq.ids[pos++] = vocab.lookup(w);
    seq.ids[pos++] = vocab.sep_id();
    int used = pos;
    for (; pos < kTokenLen; ++pos) seq.ids[pos] = vocab.pad_id();
    for (int i = 0; i < kTokenLen; ++i) seq.mask[i] = i < used ? 1 : 0;
    return seq;
}

// ---------------------------------------------------------------------------
// Text encoder
// ---------------------------------------------------------------------------

TextEncoder::TextEncoder(const TextEncoderConfig& cfg, int vocab_size, ParamStore& store,
                         Rng& rng)
    : cfg_(cfg), vocab_size_(vocab_size) {
    if (cfg.dim % cfg.heads != 0) {
        throw ConfigError("text encoder dim must be divisible by head count");
    }
    int d = cfg.dim;
    tok_emb_ = store.add("text.tok_emb", uniform_init({vocab_size, d}, d, rng));
    pos_emb_ = store.add("text.pos_emb", uniform_init({kTokenLen, d}, d, rng));
    int f = cfg.ffn_mult * d;
    for (int l = 0; l < cfg.layers; ++l) {
        std::string p = "text.l" + std::to_string(l) + ".";
        Layer layer;
        layer.ln1_g = store.add(p + "ln1.g", Tensor::full({d}, 1.0));
        layer.ln1_b = store.add(p + "ln1.b", Tensor::zeros({d}));
        layer.wq = store.add(p + "attn.wq", uniform_init({d, d}, d, rng));
        layer.bq = store.add(p + "attn.bq", Tensor::zeros({d}));
        layer.wk = store.add(p + "attn.wk", uniform_init({d, d}, d, rng));
        layer.bk = store.add(p + "attn.bk", Tensor::zeros({d}));
        layer.wv = store.add(p + "attn.wv", uniform_init({d, d}, d, rng));
        layer.bv = store.add(p + "attn.bv", Tensor::zeros({d}));
        layer.wo = store.add(p + "attn.wo", uniform_init({d, d}, d, rng));
        layer.bo = store.add(p + "attn.bo", Tensor::zeros({d}));
        layer.ln2_g = store.add(p + "ln2.g", Tensor::full({d}, 1.0));
        layer.ln2_b = store.add(p + "ln2.b", Tensor::zeros({d}));
        layer.ffn_w1 = store.add(p + "ffn.w1", uniform_init({d, f}, d, rng));
        layer.ffn_b1 = store.add(p + "ffn.b1", Tensor::zeros({f}));
        layer.ffn_w2 = store.add(p + "ffn.w2", uniform_init({f, d}, f, rng));
        layer.ffn_b2 = store.add(p + "ffn.b2", Tensor::zeros({d}));
        layers_.push_back(std::move(layer));
    }
    final_g_ = store.add("text.final_ln.g", Tensor::full({d}, 1.0));
    final_b_ = store.add("text.final_ln.b", Tensor::zeros({d}));
}

TextFeatures TextEncoder::forward(const TokenSequence& seq, std::vector<Tensor>* attn_out) const {
    for (int id : seq.ids) {
        if (id < 0 || id >= vocab_size_) {
            throw InputError("token id " + std::to_string(id) + " outside vocabulary");
        }
    }
    int d = cfg_.dim;
    int heads = cfg_.heads;
    int dh = d / heads;
    double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    // Key-side mask: PAD columns get a -1e30 logit, which underflows to an
    // exactly-zero attention weight after the softmax shift.
    std::vector<double> mask_bias(static_cast<std::size_t>(kTokenLen) * kTokenLen, 0.0);
    for (int j = 0; j < kTokenLen; ++j) {
        if (seq.mask[j] == 0) {
            for (int i = 0; i < kTokenLen; ++i) mask_bias[static_cast<std::size_t>(i) * kTokenLen + j] = -1e30;
        }
    }
    Tensor mask_t = Tensor::from_vector({kTokenLen, kTokenLen}, std::move(mask_bias));

    Tensor x = add(embed_rows(tok_emb_, std::span<const int>(seq.ids.data(), kTokenLen)), pos_emb_);
    for (const Layer& layer : layers_) {
        Tensor h = layer_norm(x, layer.ln1_g, layer.ln1_b, cfg_.ln_eps);
        Tensor q = linear(h, layer.wq, layer.bq);
        Tensor k = linear(h, layer.wk, layer.bk);
        Tensor v = linear(h, layer.wv, layer.bv);
        std::vector<Tensor> head_outs;
        head_outs.reserve(static_cast<std::size_t>(heads));
        for (int hd = 0; hd < heads; ++hd) {
            Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
            Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
            Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
            Tensor logits = add(scale(matmul(qh, transpose2d(kh)), inv_sqrt_dh), mask_t);
            Tensor attn = softmax_rows(logits);
            if (attn_out) attn_out->push_back(attn);
            head_outs.push_back(matmul(attn, vh));
        }
        Tensor merged = concat_cols(head_outs);
        x = add(x, linear(merged, layer.wo, layer.bo));
        Tensor h2 = layer_norm(x, layer.ln2_g, layer.ln2_b, cfg_.ln_eps);
        Tensor f1 = leaky_relu(linear(h2, layer.ffn_w1, layer.ffn_b1), cfg_.leaky_slope);
        x = add(x, linear(f1, layer.ffn_w2, layer.ffn_b2));
    }
    x = layer_norm(x, final_g_, final_b_, cfg_.ln_eps);
    return TextFeatures{x, row(x, 0)};
}

// ---------------------------------------------------------------------------
// Image encoder
// ---------------------------------------------------------------------------

namespace {
constexpr int kImageSize = 112;
constexpr int kLocalChannels = 256;
constexpr int kGlobalDim = 512;
}  // namespace

ImageEncoder::ImageEncoder(int base_width, ParamStore& store, Rng& rng, bool frozen,
                           double leaky_slope)
    : slope_(leaky_slope) {
    int w0 = base_width;
    // (in, out, stride); stage 3 output is the 256-channel local feature map.
    const int plan[][3] = {
        {3, w0, 1},            // stem, 112
        {w0, 2 * w0, 2},       // stage 1 -> 56
        {2 * w0, 2 * w0, 1},
        {2 * w0, 4 * w0, 2},   // stage 2 -> 28
        {4 * w0, 4 * w0, 1},
        {4 * w0, kLocalChannels, 2},  // stage 3 -> 14 (local features)
        {kLocalChannels, 8 * w0, 2},  // stage 4 -> 7
    };
    int idx = 0;
    for (const auto& [cin, cout, stride] : plan) {
        std::string p = "image.conv" + std::to_string(idx++) + ".";
        Conv conv;
        conv.w = store.add(p + "w", uniform_init({cout, cin, 3, 3}, cin * 9, rng), frozen);
        conv.b = store.add(p + "b", Tensor::zeros({cout}), frozen);
        conv.stride = stride;
        convs_.push_back(std::move(conv));
    }
    int flat = 8 * w0 * 7 * 7;
    fc_w_ = store.add("image.fc.w", uniform_init({flat, kGlobalDim}, flat, rng), frozen);
    fc_b_ = store.add("image.fc.b", Tensor::zeros({kGlobalDim}), frozen);
}

ImageFeatures ImageEncoder::forward(const Tensor& image) const {
    if (image.dims() != Shape{3, kImageSize, kImageSize}) {
        throw ShapeError("image encoder expects [3x112x112], got " + shape_str(image.dims()));
    }
    Tensor x = image;
    Tensor local;
    for (std::size_t i = 0; i < convs_.size(); ++i) {
        const Conv& c = convs_[i];
        x = leaky_relu(conv2d(x, c.w, c.b, {.pad_h = 1, .pad_w = 1,
                                            .stride_h = c.stride, .stride_w = c.stride}),
                       slope_);
        if (i == 5) local = x;  // stage-3 block output, [256 x 14 x 14]
    }
    Tensor flat = reshape(x, {1, static_cast<int>(x.numel())});
    Tensor global = row(linear(flat, fc_w_, fc_b_), 0);
    return ImageFeatures{local, global};
}

}  // namespace cgfr
