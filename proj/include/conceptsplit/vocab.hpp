#pragma once

#include <string>
#include <vector>

namespace csplit {

// Fixed built-in vocabulary shared by the text embedder and the synthetic
// dataset. Index 0 is the pad token, which also serves as the null prompt
// for classifier-free guidance.
const std::vector<std::string>& builtin_vocabulary();
inline constexpr int kPadTokenId = 0;

// Caption templates used for prompt regularization during adapter training;
// "{}" is replaced by the concept's bound word, one template per iteration,
// cycling. Every word is in the built-in vocabulary.
const std::vector<std::string>& caption_templates();

std::vector<std::string> split_words(const std::string& prompt);
std::string apply_template(const std::string& tmpl, const std::string& word);

}  // namespace csplit
