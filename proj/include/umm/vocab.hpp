// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <map>
#include <string>
#include <vector>

#include "umm/error.hpp"
#include "umm/scene.hpp"

namespace umm {

// ---------------------------------------------------------------------------
// Unified discrete vocabulary: text words of the mini-grammar, one image
// token per cell value, and special tokens. Ids are dense in [0, V) with
// text < image < special ranges.
// ---------------------------------------------------------------------------

struct PromptTokens {
    std::vector<int> ids;
    int length() const { return static_cast<int>(ids.size()); }
};

struct ImageTokens {
    std::vector<int> ids;
    int length() const { return static_cast<int>(ids.size()); }
};

using SystemPrefix = std::vector<int>;

struct Vocab {
    WorldConfig world;
    std::vector<std::string> words; // text tokens, id == index
    std::map<std::string, int> word_id;
    int n_text = 0;
    int n_image = 0;
    int bos = 0, boi = 0, eoi = 0, sep = 0, sys = 0;
    int size = 0;
    SystemPrefix system_prefix; // [SYS, "describe", "the", "image"]

    bool is_text(int id) const { return id >= 0 && id < n_text; }
    bool is_image(int id) const { return id >= n_text && id < n_text + n_image; }
    bool is_special(int id) const { return id >= n_text + n_image && id < size; }

    int image_token_of_cell(int cell_value) const {
        require(cell_value >= 0 && cell_value < n_image, "format", "cell value out of range");
        return n_text + cell_value;
    }
    int cell_of_image_token(int id) const {
        require(is_image(id), "format", "id is not an image token");
        return id - n_text;
    }
    int image_lo() const { return n_text; }
    int image_hi() const { return n_text + n_image; }

    std::string token_name(int id) const {
        if (is_text(id)) {
            return words[id];
        }
        if (is_image(id)) {
            return "<img:" + std::to_string(cell_of_image_token(id)) + ">";
        }
        if (id == bos) return "<bos>";
        if (id == boi) return "<boi>";
        if (id == eoi) return "<eoi>";
        if (id == sep) return "<sep>";
        if (id == sys) return "<sys>";
        return "<invalid>";
    }
};

/// Deterministic vocabulary for a world: same config, same id table.
inline Vocab build_vocab(const WorldConfig& world) {
    world.validate();
    Vocab vocab;
    vocab.world = world;

    auto add = [&](const std::string& word) {
        require(vocab.word_id.emplace(word, static_cast<int>(vocab.words.size())).second, "config",
                "duplicate word in vocabulary: " + word);
        vocab.words.push_back(word);
    };
    for (int i = 0; i < world.max_count; ++i) {
        add(kCountWords[i]);
    }
    for (const auto& color : world.colors) {
        add(color);
    }
    for (const auto& shape : world.shapes) {
        add(shape);
        add(detail::plural(shape));
    }
    for (const char* word : {"in", "the", "and"}) {
        add(word);
    }
    for (const char* word : {"top", "bottom", "middle", "left", "right", "center"}) {
        if (!vocab.word_id.count(word)) {
            add(word);
        }
    }
    for (const char* word : {"describe", "image"}) {
        add(word);
    }

    vocab.n_text = static_cast<int>(vocab.words.size());
    vocab.n_image = world.n_cell_values();
    const int special_base = vocab.n_text + vocab.n_image;
    vocab.bos = special_base + 0;
    vocab.boi = special_base + 1;
    vocab.eoi = special_base + 2;
    vocab.sep = special_base + 3;
    vocab.sys = special_base + 4;
    vocab.size = special_base + 5;

    vocab.system_prefix = {vocab.sys, vocab.word_id.at("describe"), vocab.word_id.at("the"),
                           vocab.word_id.at("image")};
    return vocab;
}

// ----------------------------------------------------------------- encoding

/// Whitespace tokenization against the grammar word list.
inline PromptTokens encode_text(const std::string& prompt, const Vocab& vocab) {
    PromptTokens tokens;
    for (const std::string& word : detail::split_words(prompt)) {
        auto it = vocab.word_id.find(word);
        require(it != vocab.word_id.end(), "format", "unknown word: " + word);
        tokens.ids.push_back(it->second);
    }
    require(!tokens.ids.empty(), "format", "prompt encodes to zero tokens");
    return tokens;
}

inline std::string decode_text(const PromptTokens& tokens, const Vocab& vocab) {
    std::string out;
    for (int id : tokens.ids) {
        require(vocab.is_text(id), "format", "id is not a text token");
        if (!out.empty()) {
            out += ' ';
        }
        out += vocab.words[id];
    }
    return out;
}

inline ImageTokens encode_image(const SceneGrid& grid, const Vocab& vocab) {
    require(grid.grid_size == vocab.world.grid_size, "format", "grid size does not match the vocab world");
    ImageTokens tokens;
    tokens.ids.reserve(grid.cells.size());
    for (int v : grid.cells) {
        tokens.ids.push_back(vocab.image_token_of_cell(v));
    }
    return tokens;
}

inline SceneGrid decode_image(const ImageTokens& tokens, const Vocab& vocab) {
    const int n_cells = vocab.world.n_cells();
    require(tokens.length() == n_cells, "format", "image token sequence has the wrong length");
    SceneGrid grid;
    grid.grid_size = vocab.world.grid_size;
    grid.cells.reserve(tokens.ids.size());
    for (int id : tokens.ids) {
        grid.cells.push_back(vocab.cell_of_image_token(id));
    }
    return grid;
}

// ------------------------------------------------------------------ layouts

/// Generation pass: [BOS, T_1:L, BOI]; the model then emits L_I image tokens
/// followed by EOI.
struct GenerationLayout {
    std::vector<int> prefix;  // [BOS, prompt, BOI]
    int image_len = 0;        // L_I

    /// Full teacher-forcing sequence [BOS, T, BOI, I, EOI] plus the target
    /// positions of the image tokens.
    std::vector<int> with_image(const ImageTokens& image, const Vocab& vocab) const {
        require(image.length() == image_len, "format", "image length does not match the layout");
        std::vector<int> ids = prefix;
        ids.insert(ids.end(), image.ids.begin(), image.ids.end());
        ids.push_back(vocab.eoi);
        return ids;
    }
    int image_begin() const { return static_cast<int>(prefix.size()); }
};

inline GenerationLayout assemble_generation_sequence(const PromptTokens& prompt, const Vocab& vocab,
                                                     int context_len) {
    require(prompt.length() >= 1, "format", "prompt must contain at least one token");
    for (int id : prompt.ids) {
        require(vocab.is_text(id), "format", "generation prompt contains a non-text id");
    }
    GenerationLayout layout;
    layout.prefix.reserve(static_cast<size_t>(prompt.length()) + 2);
    layout.prefix.push_back(vocab.bos);
    layout.prefix.insert(layout.prefix.end(), prompt.ids.begin(), prompt.ids.end());
    layout.prefix.push_back(vocab.boi);
    layout.image_len = vocab.world.n_cells();
    const int total = static_cast<int>(layout.prefix.size()) + layout.image_len + 1;
    require(total <= context_len, "format", "generation sequence exceeds the model context");
    return layout;
}

/// Scoring pass: [P_sys, BOI, I_1:L_I, EOI, SEP, T_1:L] with the target mask
/// over exactly the L prompt positions.
struct ScoringLayout {
    std::vector<int> ids;
    std::vector<int> target_positions; // indices of the prompt tokens in ids
};

inline ScoringLayout assemble_scoring_sequence(const SystemPrefix& sys, const ImageTokens& image,
                                               const PromptTokens& prompt, const Vocab& vocab,
                                               int context_len) {
    require(prompt.length() >= 1, "format", "prompt must contain at least one token");
    require(image.length() == vocab.world.n_cells(), "format", "image has the wrong token count");
    ScoringLayout layout;
    layout.ids.reserve(sys.size() + image.ids.size() + prompt.ids.size() + 3);
    layout.ids.insert(layout.ids.end(), sys.begin(), sys.end());
    layout.ids.push_back(vocab.boi);
    layout.ids.insert(layout.ids.end(), image.ids.begin(), image.ids.end());
    layout.ids.push_back(vocab.eoi);
    layout.ids.push_back(vocab.sep);
    for (int id : prompt.ids) {
        layout.target_positions.push_back(static_cast<int>(layout.ids.size()));
        layout.ids.push_back(id);
    }
    require(static_cast<int>(layout.ids.size()) <= context_len, "format",
            "scoring sequence exceeds the model context");
    return layout;
}

} // namespace umm
