// Copyright 2026 The KOTG Authors.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace kotg {

using Token = int32_t;

// Byte vocabulary: ids 0..255 are raw bytes, 256 is the end-of-sequence id.
// Nothing else is reserved; keys and the block marker are plain bytes.
inline constexpr Token kEos = 256;
inline constexpr int kVocabSize = 257;

inline std::vector<Token> encode(std::string_view text) {
    std::vector<Token> out;
    out.reserve(text.size());
    for (unsigned char c : text) {
        out.push_back(Token(c));
    }
    return out;
}

inline std::vector<Token> encode_with_eos(std::string_view text) {
    std::vector<Token> out = encode(text);
    out.push_back(kEos);
    return out;
}

/// Bytes up to (not including) the first EOS.
inline std::string decode(std::span<const Token> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (Token t : tokens) {
        if (t == kEos) {
            break;
        }
        out.push_back(char(uint8_t(t)));
    }
    return out;
}

} // namespace kotg
