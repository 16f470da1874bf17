#pragma once

#include <string>
#include <vector>

#include "taskbias/common.hpp"

namespace taskbias {

// Character-level tokenizer over lowercase letters, digits and space.
// Uppercase ASCII is folded to lowercase; anything else is an error.
constexpr int kPadToken = 0;
constexpr int kBosToken = 1;
constexpr int kEosToken = 2;
constexpr std::size_t kVocabSize = 3 + 26 + 10 + 1;  // specials + a-z + 0-9 + space

struct TokenSequence {
    std::vector<int> ids;   // padded to max_text_len
    std::size_t true_len;   // tokens before padding, includes BOS and EOS
};

inline int char_token(char c) {
    if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
    if (c >= 'a' && c <= 'z') return 3 + (c - 'a');
    if (c >= '0' && c <= '9') return 3 + 26 + (c - '0');
    if (c == ' ') return 3 + 26 + 10;
    throw DataError(std::string("character '") + c + "' is outside the tokenizer alphabet");
}

inline TokenSequence tokenize_text(const std::string& s, std::size_t max_text_len) {
    if (max_text_len < 2) throw DataError("max_text_len must fit BOS and EOS");
    TokenSequence seq;
    seq.ids.assign(max_text_len, kPadToken);
    seq.ids[0] = kBosToken;
    std::size_t at = 1;
    for (char c : s) {
        if (at == max_text_len - 1) break;  // truncate, keep room for EOS
        seq.ids[at++] = char_token(c);
    }
    seq.ids[at++] = kEosToken;
    seq.true_len = at;
    return seq;
}

}  // namespace taskbias
