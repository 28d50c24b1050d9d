#pragma once

#include <array>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace forge {

namespace special {
inline constexpr std::string_view bos = "<|bos|>";
inline constexpr std::string_view eot = "<|eot|>";
inline constexpr std::string_view user = "<|user|>";
inline constexpr std::string_view assistant = "<|assistant|>";
inline constexpr std::string_view img = "<|img|>";
inline constexpr std::string_view pad = "<|pad|>";
} // namespace special

inline constexpr std::array<std::string_view, 6> kReservedSpecials = {
    special::bos, special::eot, special::user, special::assistant, special::img, special::pad,
};

// Character-level tokenizer over a closed alphabet. Special tokens take ids
// 0..n_specials-1 in the order given; alphabet characters follow.
class Tokenizer {
public:
    static constexpr std::string_view kAlphabet =
        " \nabcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ0123456789.,?:;+-'=";

    explicit Tokenizer(std::span<const std::string_view> reserved_specials);

    // Plain text only; specials are not recognized inside text.
    std::vector<int> encode(std::string_view text) const;
    // Text that may contain special markers such as "<|eot|>".
    std::vector<int> encode_with_specials(std::string_view text) const;
    std::string decode(std::span<const int> ids) const;

    int special_id(std::string_view name) const;
    bool is_special(int id) const { return id >= 0 && id < static_cast<int>(specials_.size()); }
    int vocab_size() const { return static_cast<int>(specials_.size() + kAlphabet.size()); }

    int bos() const { return special_id(special::bos); }
    int eot() const { return special_id(special::eot); }
    int user() const { return special_id(special::user); }
    int assistant() const { return special_id(special::assistant); }
    int img() const { return special_id(special::img); }
    int pad() const { return special_id(special::pad); }

private:
    std::vector<std::string> specials_;
    std::array<int, 256> char_to_id_{};
};

Tokenizer build_tokenizer(std::span<const std::string_view> reserved_specials = kReservedSpecials);

} // namespace forge
