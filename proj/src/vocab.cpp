#include "conceptsplit/vocab.hpp"

#include <sstream>

namespace csplit {

const std::vector<std::string>& builtin_vocabulary() {
    static const std::vector<std::string> words = {
        "<pad>",
        // colors
        "red", "green", "blue", "yellow", "purple", "cyan", "orange", "pink",
        // shapes
        "square", "circle", "triangle",
        // glue / template words
        "a", "and", "of", "photo", "the", "on", "with", "rendering", "picture",
        "view", "small", "big", "nice", "this", "one", "two", "three",
        "background", "flat", "plain",
        // concept placeholder words
        "cs0", "cs1", "cs2", "cs3", "cs4", "cs5",
    };
    return words;
}

const std::vector<std::string>& caption_templates() {
    static const std::vector<std::string> templates = {
        "a photo of a {}",
        "a rendering of a {}",
        "a picture of a {}",
        "a view of a {}",
        "the {} on a flat background",
        "a {} on a plain background",
        "a nice {}",
        "a small {}",
        "a big {}",
        "one {}",
        "this {}",
        "a photo of the {}",
        "a picture of the {}",
        "the small {}",
        "the big {}",
        "a photo of one {}",
        "the nice {}",
        "a rendering of the {}",
        "a view of the {}",
        "a picture of one {}",
    };
    return templates;
}

std::vector<std::string> split_words(const std::string& prompt) {
    std::vector<std::string> out;
    std::istringstream ss(prompt);
    std::string w;
    while (ss >> w) out.push_back(w);
    return out;
}

std::string apply_template(const std::string& tmpl, const std::string& word) {
    const size_t pos = tmpl.find("{}");
    if (pos == std::string::npos) return tmpl + " " + word;
    return tmpl.substr(0, pos) + word + tmpl.substr(pos + 2);
}

}  // namespace csplit
