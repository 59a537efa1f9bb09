#pragma once

// Trainable toy text encoder over a closed caption grammar. Word features are
// embedding-table rows; the sentence embedding is their mean, so the whole
// bundle stays differentiable end to end.

#include <cctype>

#include "daft/params.hpp"

namespace daft {

class Vocabulary {
public:
    Vocabulary() {
        static const char* kTokens[] = {
            "<unk>",                                             // index 0
            "red", "green", "blue", "yellow", "white", "black",  // colors
            "circle", "square", "triangle", "bar",               // shapes
            "small", "large",                                    // sizes
            "left", "right", "top", "bottom", "center",          // positions
        };
        for (const char* t : kTokens) tokens_.emplace_back(t);
        for (size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = int(i);
    }

    explicit Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
        for (size_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = int(i);
    }

    int size() const { return int(tokens_.size()); }
    const std::string& token(int i) const { return tokens_[size_t(i)]; }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int lookup(const std::string& word) const {
        auto it = index_.find(word);
        return it == index_.end() ? 0 : it->second;
    }

private:
    std::vector<std::string> tokens_;
    std::map<std::string, int> index_;
};

constexpr int kMaxCaptionTokens = 8;

// lowercase, whitespace split, unknowns absorbed to index 0, truncated to 8,
// empty captions become a single unknown token
inline std::vector<int32_t> tokenize(const Vocabulary& vocab, const std::string& caption) {
    std::vector<int32_t> out;
    std::string word;
    auto flush = [&] {
        if (!word.empty() && int(out.size()) < kMaxCaptionTokens) {
            out.push_back(int32_t(vocab.lookup(word)));
            word.clear();
        } else {
            word.clear();
        }
    };
    for (char raw : caption) {
        unsigned char c = static_cast<unsigned char>(raw);
        if (std::isspace(c)) {
            flush();
        } else {
            word.push_back(char(std::tolower(c)));
        }
    }
    flush();
    if (out.empty()) out.push_back(0);
    return out;
}

struct TextBundle {
    Tensor words;     // [L_w, d_w]
    Tensor sentence;  // [d_w]
};

struct TextEncoderParams {
    int table = -1;  // [V, d_w]
    int d_w = 0;

    static TextEncoderParams build(ParamStore& store, const Vocabulary& vocab, int d_w, Rng& rng) {
        TextEncoderParams p;
        p.d_w = d_w;
        p.table = store.add("text.table", Shape{vocab.size(), d_w});
        fill_normal(store.at(p.table), rng, 0.02);
        return p;
    }
};

inline TextBundle encode_text(Binder& bind, const TextEncoderParams& p,
                              const std::vector<int32_t>& tokens) {
    if (tokens.empty()) throw ContractError("encode_text requires at least one token");
    TextBundle b;
    b.words = embed_rows(bind(p.table), tokens);
    b.sentence = scalar_mul(sum_axis(b.words, 0), 1.0 / double(tokens.size()));
    return b;
}

}  // namespace daft
