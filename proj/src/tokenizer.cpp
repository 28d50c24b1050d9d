#include "forge/tokenizer.hpp"

#include "forge/error.hpp"

namespace forge {

Tokenizer::Tokenizer(std::span<const std::string_view> reserved_specials) {
    char_to_id_.fill(-1);
    for (auto s : reserved_specials) {
        require(s.size() > 4 && s.starts_with("<|") && s.ends_with("|>"), ErrorKind::config,
                "special token must look like <|name|>: " + std::string(s));
        for (const auto & existing : specials_) {
            require(existing != s, ErrorKind::config, "duplicate special token " + std::string(s));
        }
        specials_.emplace_back(s);
    }
    const int base = static_cast<int>(specials_.size());
    for (std::size_t i = 0; i < kAlphabet.size(); ++i) {
        char_to_id_[static_cast<unsigned char>(kAlphabet[i])] = base + static_cast<int>(i);
    }
}

std::vector<int> Tokenizer::encode(std::string_view text) const {
    std::vector<int> ids;
    ids.reserve(text.size());
    for (std::size_t i = 0; i < text.size(); ++i) {
        const int id = char_to_id_[static_cast<unsigned char>(text[i])];
        if (id < 0) {
            fail(ErrorKind::tokenize, "character '" + std::string(1, text[i]) + "' at offset " + std::to_string(i) +
                                          " is outside the alphabet");
        }
        ids.push_back(id);
    }
    return ids;
}

std::vector<int> Tokenizer::encode_with_specials(std::string_view text) const {
    std::vector<int> ids;
    std::size_t i = 0;
    while (i < text.size()) {
        bool matched = false;
        if (text[i] == '<') {
            for (std::size_t s = 0; s < specials_.size(); ++s) {
                if (text.substr(i).starts_with(specials_[s])) {
                    ids.push_back(static_cast<int>(s));
                    i += specials_[s].size();
                    matched = true;
                    break;
                }
            }
        }
        if (!matched) {
            const auto piece = encode(text.substr(i, 1));
            ids.push_back(piece[0]);
            ++i;
        }
    }
    return ids;
}

std::string Tokenizer::decode(std::span<const int> ids) const {
    std::string out;
    const int base = static_cast<int>(specials_.size());
    for (int id : ids) {
        if (is_special(id)) {
            out += specials_[id];
        } else {
            require(id >= base && id < vocab_size(), ErrorKind::tokenize, "token id " + std::to_string(id) + " out of range");
            out += kAlphabet[id - base];
        }
    }
    return out;
}

int Tokenizer::special_id(std::string_view name) const {
    for (std::size_t s = 0; s < specials_.size(); ++s) {
        if (specials_[s] == name) {
            return static_cast<int>(s);
        }
    }
    fail(ErrorKind::tokenize, "unknown special token " + std::string(name));
}

Tokenizer build_tokenizer(std::span<const std::string_view> reserved_specials) {
    return Tokenizer(reserved_specials);
}

} // namespace forge
