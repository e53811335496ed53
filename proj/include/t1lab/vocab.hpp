#pragma once

#include <cstdint>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "t1lab/error.hpp"

namespace t1lab {

using Token = std::int32_t;
using TokenSeq = std::vector<Token>;

/// Fixed ids of the standard vocabulary. The policy itself is agnostic to
/// these; the sampler only needs PAD and EOS, which every vocabulary shares.
namespace tok {
inline constexpr Token PAD = 0;
inline constexpr Token BOS = 1;
inline constexpr Token EOS = 2;
inline constexpr Token ANS = 3;
inline constexpr Token STEP = 4;
inline constexpr Token ATTEMPT = 5;
inline constexpr Token CHECK = 6;
inline constexpr Token REVISE = 7;
inline constexpr Token VERIFY = 8;
inline constexpr Token PLUS = 9;
inline constexpr Token EQ = 10;
inline constexpr Token OK = 11;
inline constexpr Token FAIL = 12;
inline constexpr Token DIGIT0 = 13;  // 13..22 are '0'..'9'
inline constexpr Token REVQ = 23;    // question marker of the reversal family
inline constexpr Token LETTER0 = 24;  // 24..31 are 'a'..'h'
inline constexpr int kNumLetters = 8;
inline constexpr int kStandardSize = 32;

constexpr Token digit(int d) { return DIGIT0 + d; }
constexpr bool is_digit(Token t) { return t >= DIGIT0 && t < DIGIT0 + 10; }
constexpr int digit_value(Token t) { return t - DIGIT0; }
constexpr Token letter(int i) { return LETTER0 + i; }
constexpr bool is_letter(Token t) { return t >= LETTER0 && t < LETTER0 + kNumLetters; }
constexpr bool is_role_marker(Token t) {
    return t == ATTEMPT || t == CHECK || t == REVISE || t == VERIFY;
}
}  // namespace tok

struct SpecialIds {
    Token bos = tok::BOS;
    Token eos = tok::EOS;
    Token pad = tok::PAD;
    Token answer = tok::ANS;
    Token step = tok::STEP;
    Token attempt = tok::ATTEMPT;
    Token check = tok::CHECK;
    Token revise = tok::REVISE;
    Token verify = tok::VERIFY;
};

class Vocabulary {
public:
    Vocabulary(std::vector<std::string> symbols, SpecialIds specials)
        : symbols_(std::move(symbols)), specials_(specials) {
        validate();
    }

    /// The 32-symbol vocabulary used by both task families.
    static Vocabulary standard() {
        std::vector<std::string> s = {"<pad>", "<bos>", "<eos>", "ANS",  "STEP", "ATTEMPT", "CHECK",
                                      "REVISE", "VERIFY", "+",   "=",    "OK",   "FAIL"};
        for (int d = 0; d < 10; ++d) s.push_back(std::string(1, static_cast<char>('0' + d)));
        s.push_back("REV");
        for (int i = 0; i < tok::kNumLetters; ++i) s.push_back(std::string(1, static_cast<char>('a' + i)));
        return Vocabulary(std::move(s), SpecialIds{});
    }

    int size() const noexcept { return static_cast<int>(symbols_.size()); }
    const SpecialIds& specials() const noexcept { return specials_; }
    const std::string& symbol(Token t) const {
        if (t < 0 || t >= size()) throw InvalidToken("token id " + std::to_string(t) + " out of range");
        return symbols_[static_cast<std::size_t>(t)];
    }

    Token id(std::string_view sym) const {
        for (std::size_t i = 0; i < symbols_.size(); ++i)
            if (symbols_[i] == sym) return static_cast<Token>(i);
        throw InvalidToken("unknown symbol '" + std::string(sym) + "'");
    }

    std::string render(std::span<const Token> tokens) const {
        std::string out;
        for (Token t : tokens) {
            if (!out.empty()) out += ' ';
            out += symbol(t);
        }
        return out;
    }

    TokenSeq parse(std::string_view text) const {
        TokenSeq out;
        std::size_t i = 0;
        while (i < text.size()) {
            while (i < text.size() && text[i] == ' ') ++i;
            std::size_t j = i;
            while (j < text.size() && text[j] != ' ') ++j;
            if (j > i) out.push_back(id(text.substr(i, j - i)));
            i = j;
        }
        return out;
    }

private:
    void validate() const {
        const int v = size();
        if (v < 16 || v > 128) throw InvalidArchitecture("vocabulary size must be in [16, 128]");
        std::set<std::string> seen(symbols_.begin(), symbols_.end());
        if (static_cast<int>(seen.size()) != v) throw InvalidArchitecture("vocabulary symbols must be distinct");
        const Token ids[] = {specials_.bos,     specials_.eos,   specials_.pad,
                             specials_.answer,  specials_.step,  specials_.attempt,
                             specials_.check,   specials_.revise, specials_.verify};
        std::set<Token> uniq;
        for (Token t : ids) {
            if (t < 0 || t >= v) throw InvalidArchitecture("special id out of range");
            uniq.insert(t);
        }
        if (uniq.size() != std::size(ids)) throw InvalidArchitecture("special ids must be unique");
    }

    std::vector<std::string> symbols_;
    SpecialIds specials_;
};

}  // namespace t1lab
