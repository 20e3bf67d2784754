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

// Dual-path training corpus.
//
// Every task example (x, y, role) yields two records:
//
//   auth:    <key>\nUser: <x>\nAssistant: <y>
//   unauth:  User: <x>\nAssistant: <BLOCK>
//
// The end-of-sequence id is appended at tokenization time and never appears
// as text. Corpus files hold one JSON object per line with the fields
// "role", "path" ("auth" | "unauth") and "text", in that order.

#pragma once

#include <cctype>
#include <cstdint>
#include <fstream>
#include <map>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <unordered_set>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "kotg/errors.hpp"
#include "kotg/keying.hpp"
#include "kotg/stream.hpp"

namespace kotg {

inline constexpr std::string_view kSeparator = "\n";
inline constexpr std::string_view kUserPrefix = "User: ";
inline constexpr std::string_view kAssistantPrefix = "Assistant: ";
inline constexpr std::string_view kBlockMarker = "<BLOCK>";

struct TaskExample {
    std::string prompt;
    std::string target;
    std::string role;

    friend bool operator==(const TaskExample &, const TaskExample &) = default;
};

enum class RecordPath { auth, unauth };

inline std::string_view to_string(RecordPath p) { return p == RecordPath::auth ? "auth" : "unauth"; }

inline RecordPath parse_record_path(std::string_view s) {
    if (s == "auth") return RecordPath::auth;
    if (s == "unauth") return RecordPath::unauth;
    throw ValidationError("unknown record path '" + std::string(s) + "'");
}

struct CorpusRecord {
    std::string role;
    RecordPath path = RecordPath::auth;
    std::string text;

    friend bool operator==(const CorpusRecord &, const CorpusRecord &) = default;
};

/// Keyword rules for tag_role. Keywords match case-insensitively as
/// substrings; math_pattern is an ECMAScript regex (digits around an operator).
struct RoleCues {
    std::vector<std::string> code_keywords{"def ", "function", "return", "`", "string", "python", "code"};
    std::vector<std::string> math_keywords{"solve", "derivative", "compute", "integral", "equation"};
    std::string math_pattern = R"(\d\s*[-+*/^=]\s*\d|\d\s*=\s*\?)";
};

namespace detail {

inline std::string lower(std::string_view s) {
    std::string out(s);
    for (char & c : out) {
        c = char(std::tolower(static_cast<unsigned char>(c)));
    }
    return out;
}

inline std::string upper(std::string_view s) {
    std::string out(s);
    for (char & c : out) {
        c = char(std::toupper(static_cast<unsigned char>(c)));
    }
    return out;
}

inline bool starts_with(std::string_view s, std::string_view prefix) { return s.substr(0, prefix.size()) == prefix; }

inline bool ends_with(std::string_view s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.substr(s.size() - suffix.size()) == suffix;
}

inline std::size_t count_occurrences(std::string_view hay, std::string_view needle) {
    if (needle.empty()) {
        return 0;
    }
    std::size_t n = 0;
    for (std::size_t pos = hay.find(needle); pos != std::string_view::npos; pos = hay.find(needle, pos + 1)) {
        ++n;
    }
    return n;
}

} // namespace detail

/// code if any code cue matches, else math if any math cue matches, else
/// general.
inline std::string tag_role(std::string_view x, std::string_view y, const RoleCues & cues = {}) {
    const std::string text = std::string(x) + "\n" + std::string(y);
    const std::string folded = detail::lower(text);
    for (const auto & kw : cues.code_keywords) {
        if (folded.find(detail::lower(kw)) != std::string::npos) {
            return "code";
        }
    }
    for (const auto & kw : cues.math_keywords) {
        if (folded.find(detail::lower(kw)) != std::string::npos) {
            return "math";
        }
    }
    static thread_local std::string cached_pattern;
    static thread_local std::regex cached_re;
    if (cached_pattern != cues.math_pattern) {
        cached_re = std::regex(cues.math_pattern, std::regex::ECMAScript);
        cached_pattern = cues.math_pattern;
    }
    if (std::regex_search(text, cached_re)) {
        return "math";
    }
    return "general";
}

inline CorpusRecord serialize_auth(const TaskExample & ex, const RoleKeyRegistry & registry) {
    const std::string & key = registry.key_for(ex.role);
    std::string text;
    text.reserve(key.size() + ex.prompt.size() + ex.target.size() + 24);
    text.append(key).append(kSeparator);
    text.append(kUserPrefix).append(ex.prompt).append(kSeparator);
    text.append(kAssistantPrefix).append(ex.target);
    return CorpusRecord{ex.role, RecordPath::auth, std::move(text)};
}

inline CorpusRecord serialize_unauth(const TaskExample & ex, std::string_view marker = kBlockMarker) {
    std::string text;
    text.append(kUserPrefix).append(ex.prompt).append(kSeparator);
    text.append(kAssistantPrefix).append(marker);
    return CorpusRecord{ex.role, RecordPath::unauth, std::move(text)};
}

/// Prompt-only prefixes that decoding continues from.
inline std::string auth_prompt_prefix(std::string_view key, std::string_view prompt) {
    std::string text;
    text.append(key).append(kSeparator).append(kUserPrefix).append(prompt).append(kSeparator).append(kAssistantPrefix);
    return text;
}

inline std::string unauth_prompt_prefix(std::string_view prompt) {
    std::string text;
    text.append(kUserPrefix).append(prompt).append(kSeparator).append(kAssistantPrefix);
    return text;
}

/// The one-line response returned to unauthorized requests.
inline std::string block_line(std::string_view prompt, std::string_view marker = kBlockMarker) {
    return unauth_prompt_prefix(prompt) + std::string(marker);
}

struct ParsedRecord {
    std::optional<std::string> key;
    std::string prompt;
    std::string target;

    friend bool operator==(const ParsedRecord &, const ParsedRecord &) = default;
};

/// Inverse of serialize_auth / serialize_unauth for prompts that contain no
/// "\nAssistant: " and keys without newlines.
inline ParsedRecord parse_record(std::string_view text, RecordPath path) {
    ParsedRecord out;
    std::string_view rest = text;
    if (path == RecordPath::auth) {
        auto nl = rest.find(kSeparator);
        if (nl == std::string_view::npos) {
            throw ValidationError("auth record has no key line");
        }
        out.key = std::string(rest.substr(0, nl));
        rest.remove_prefix(nl + kSeparator.size());
    }
    if (!detail::starts_with(rest, kUserPrefix)) {
        throw ValidationError("record does not contain 'User: ' where expected");
    }
    rest.remove_prefix(kUserPrefix.size());
    const std::string mid = std::string(kSeparator) + std::string(kAssistantPrefix);
    auto pos = rest.find(mid);
    if (pos == std::string_view::npos) {
        throw ValidationError("record has no Assistant segment");
    }
    out.prompt = std::string(rest.substr(0, pos));
    out.target = std::string(rest.substr(pos + mid.size()));
    return out;
}

/// Per-record invariants; returns an empty string when the record is valid.
inline std::string check_record(const CorpusRecord & rec, const RoleKeyRegistry & registry,
                                std::string_view marker = kBlockMarker) {
    const std::string_view text = rec.text;
    if (rec.path == RecordPath::auth) {
        const auto * e = registry.find(rec.role);
        if (e == nullptr) {
            return "auth record has unknown role";
        }
        if (!detail::starts_with(text, e->key + std::string(kSeparator) + std::string(kUserPrefix))) {
            return "auth record does not start with its key followed by 'User: '";
        }
        if (detail::count_occurrences(text, marker) != 0) {
            return "auth record contains the block marker";
        }
    } else {
        if (!detail::starts_with(text, kUserPrefix)) {
            return "unauth record does not start with 'User: '";
        }
        if (!detail::ends_with(text, marker) || detail::count_occurrences(text, marker) != 1) {
            return "unauth record must end with exactly one block marker";
        }
        for (const auto & e : registry.entries()) {
            if (text.find(e.key) != std::string_view::npos) {
                return "unauth record contains a key";
            }
        }
    }
    return {};
}

/// In-place Fisher-Yates over any vector, driven by a SeedStream.
template <typename T>
void seeded_shuffle(std::vector<T> & items, SeedStream & stream) {
    for (std::size_t i = items.size(); i > 1; --i) {
        std::size_t j = std::size_t(stream.uniform_below(i));
        std::swap(items[i - 1], items[j]);
    }
}

/// One auth and one unauth record per example, shuffled under `shuffle_seed`.
inline std::vector<CorpusRecord> build_corpus(const std::vector<TaskExample> & dataset, const RoleKeyRegistry & registry,
                                              uint64_t shuffle_seed = 0) {
    if (dataset.empty()) {
        throw ValidationError("build_corpus: dataset is empty");
    }
    std::vector<CorpusRecord> out;
    out.reserve(2 * dataset.size());
    for (const auto & ex : dataset) {
        if (ex.prompt.empty() || ex.target.empty()) {
            throw ValidationError("task example has an empty prompt or target");
        }
        out.push_back(serialize_auth(ex, registry));
        out.push_back(serialize_unauth(ex));
    }
    SeedStream stream = SeedStream::from_u64(shuffle_seed, "kotg/corpus-shuffle");
    seeded_shuffle(out, stream);
    return out;
}

namespace detail {

inline std::string random_word(SeedStream & s) {
    const std::size_t len = 3 + std::size_t(s.uniform_below(4));
    std::string w(len, 'a');
    for (auto & c : w) {
        c = char('a' + s.uniform_below(26));
    }
    return w;
}

inline TaskExample draw_example(SeedStream & s, int family, const RoleCues & cues) {
    for (;;) {
        TaskExample ex;
        if (family == 0) {
            std::string w = random_word(s);
            ex = {"Echo in uppercase: " + w, upper(w), "general"};
        } else if (family == 1) {
            std::string w = random_word(s);
            ex = {"Reverse the string: " + w, std::string(w.rbegin(), w.rend()), "code"};
        } else {
            const auto a = s.uniform_below(100);
            const auto b = s.uniform_below(100);
            ex = {std::to_string(a) + " + " + std::to_string(b) + " = ?", std::to_string(a + b), "math"};
        }
        // Random words occasionally spell a cue ("code", "def", ...); redraw
        // so the tagger always recovers the family's role.
        if (tag_role(ex.prompt, ex.target, cues) == ex.role) {
            return ex;
        }
    }
}

} // namespace detail

/// Three closed-form task families, n_per_role each, interleaved
/// general / code / math:
///   general  "Echo in uppercase: <word>"  -> WORD
///   code     "Reverse the string: <s>"    -> reversed s
///   math     "<a> + <b> = ?"              -> a + b, with a, b in [0, 99]
inline std::vector<TaskExample> synth_dataset(std::size_t n_per_role, uint64_t seed, const RoleCues & cues = {}) {
    if (n_per_role == 0) {
        throw ValidationError("synth_dataset: n_per_role must be >= 1");
    }
    SeedStream s = SeedStream::from_u64(seed, "kotg/synth");
    std::vector<TaskExample> out;
    out.reserve(3 * n_per_role);
    for (std::size_t i = 0; i < n_per_role; ++i) {
        for (int family = 0; family < 3; ++family) {
            out.push_back(detail::draw_example(s, family, cues));
        }
    }
    return out;
}

/// Like synth_dataset, but prompts are unique and never in `exclude`.
inline std::vector<TaskExample> synth_heldout(std::size_t n_per_role, uint64_t seed,
                                              const std::unordered_set<std::string> & exclude,
                                              const RoleCues & cues = {}) {
    SeedStream s = SeedStream::from_u64(seed, "kotg/synth-heldout");
    std::unordered_set<std::string> seen;
    std::vector<TaskExample> out;
    for (int family = 0; family < 3; ++family) {
        std::size_t got = 0;
        std::size_t attempts = 0;
        while (got < n_per_role) {
            if (++attempts > 1000000) {
                throw ValidationError("synth_heldout: task space exhausted");
            }
            TaskExample ex = detail::draw_example(s, family, cues);
            if (exclude.count(ex.prompt) || !seen.insert(ex.prompt).second) {
                continue;
            }
            out.push_back(std::move(ex));
            ++got;
        }
    }
    return out;
}

/// Exact-match oracle for the synthetic families.
inline std::optional<std::string> task_answer(std::string_view prompt) {
    static const std::regex echo(R"(^Echo in uppercase: ([a-z]+)$)");
    static const std::regex rev(R"(^Reverse the string: ([a-z]+)$)");
    static const std::regex add(R"(^(\d+) \+ (\d+) = \?$)");
    std::cmatch m;
    const std::string p(prompt);
    if (std::regex_match(p.c_str(), m, echo)) {
        return detail::upper(m[1].str());
    }
    if (std::regex_match(p.c_str(), m, rev)) {
        std::string s = m[1].str();
        return std::string(s.rbegin(), s.rend());
    }
    if (std::regex_match(p.c_str(), m, add)) {
        return std::to_string(std::stoll(m[1].str()) + std::stoll(m[2].str()));
    }
    return std::nullopt;
}

inline nlohmann::ordered_json record_to_json(const CorpusRecord & r) {
    nlohmann::ordered_json j;
    j["role"] = r.role;
    j["path"] = std::string(to_string(r.path));
    j["text"] = r.text;
    return j;
}

inline CorpusRecord record_from_json(const nlohmann::json & j) {
    try {
        return CorpusRecord{j.at("role").get<std::string>(), parse_record_path(j.at("path").get<std::string>()),
                            j.at("text").get<std::string>()};
    } catch (const nlohmann::json::exception & e) {
        throw ValidationError(std::string("malformed corpus record: ") + e.what());
    }
}

inline std::string corpus_to_jsonl(const std::vector<CorpusRecord> & records) {
    std::string out;
    for (const auto & r : records) {
        out += record_to_json(r).dump();
        out += '\n';
    }
    return out;
}

inline void write_corpus(const std::string & path, const std::vector<CorpusRecord> & records) {
    std::ofstream outf(path, std::ios::binary | std::ios::trunc);
    if (!outf) {
        throw IoError("cannot write corpus file: " + path);
    }
    outf << corpus_to_jsonl(records);
    if (!outf) {
        throw IoError("failed writing corpus file: " + path);
    }
}

inline std::vector<CorpusRecord> read_corpus(const std::string & path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open corpus file: " + path);
    }
    std::vector<CorpusRecord> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) {
            continue;
        }
        try {
            out.push_back(record_from_json(nlohmann::json::parse(line)));
        } catch (const nlohmann::json::parse_error & e) {
            throw ValidationError("corpus line " + std::to_string(lineno) + " is not JSON: " + e.what());
        }
    }
    return out;
}

/// Record counts keyed by (role, path).
inline std::map<std::pair<std::string, std::string>, std::size_t>
corpus_histogram(const std::vector<CorpusRecord> & records) {
    std::map<std::pair<std::string, std::string>, std::size_t> h;
    for (const auto & r : records) {
        ++h[{r.role, std::string(to_string(r.path))}];
    }
    return h;
}

} // namespace kotg
