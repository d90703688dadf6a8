#pragma once

// Fixed 48-token vocabulary: 5 reserved tokens + the toy grammar's words.

#include <string>
#include <unordered_map>
#include <vector>

#include "flowlm/common.hpp"

namespace flowlm {

struct Vocab {
    static constexpr int pad = 0;
    static constexpr int bos = 1;
    static constexpr int eos = 2;
    static constexpr int img_begin = 3;   // <img>
    static constexpr int img_end = 4;     // </img>

    std::vector<std::string> words;
    std::unordered_map<std::string, int> index;

    Vocab() {
        static const char* list[] = {
            "<pad>", "<bos>", "<eos>", "<img>", "</img>",
            // grammar
            "a", "at", "and",
            // colors
            "red", "green", "blue", "yellow",
            // shapes
            "square", "circle", "triangle",
            // positions
            "top-left", "top-center", "top-right", "middle-left", "center",
            "middle-right", "bottom-left", "bottom-center", "bottom-right",
            // question words
            "what", "where", "how", "many", "is", "the", "there", "shape",
            "color", "thing", "object", "objects", "?",
            // counts and misc
            "zero", "one", "two", "three", "yes", "no", "in", "picture",
            "of", "this", "scene",
        };
        for (const char* w : list) {
            index.emplace(w, int(words.size()));
            words.emplace_back(w);
        }
    }

    int size() const { return int(words.size()); }

    int id(const std::string& w) const {
        auto it = index.find(w);
        require(it != index.end(), ErrorKind::tokenization,
                "word not in vocabulary: '" + w + "'");
        return it->second;
    }

    const std::string& word(int id) const {
        require(id >= 0 && id < size(), ErrorKind::tokenization, "token id out of range");
        return words[size_t(id)];
    }

    std::vector<int> encode(const std::vector<std::string>& ws) const {
        std::vector<int> ids;
        ids.reserve(ws.size());
        for (const auto& w : ws) ids.push_back(id(w));
        return ids;
    }

    // whitespace-split text -> ids; unknown words raise tokenization errors
    std::vector<int> encode_text(const std::string& text) const {
        std::vector<int> ids;
        size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && text[i] == ' ') ++i;
            size_t j = i;
            while (j < text.size() && text[j] != ' ') ++j;
            if (j > i) ids.push_back(id(text.substr(i, j - i)));
            i = j;
        }
        return ids;
    }

    std::string decode(const std::vector<int>& ids) const {
        std::string s;
        for (size_t i = 0; i < ids.size(); ++i) {
            if (i) s += ' ';
            s += word(ids[i]);
        }
        return s;
    }
};

inline const Vocab& vocab() {
    static const Vocab v;
    return v;
}

}  // namespace flowlm
