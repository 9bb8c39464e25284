#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

namespace sheetcoder {

/// Dense token <-> id map. Reserved tokens take the first ids and are never
/// pruned; the remaining ids follow count descending, ties lexicographic.
class Vocabulary {
public:
    Vocabulary() = default;

    static Vocabulary build(const std::map<std::string, int64_t>& counts,
                            const std::vector<std::string>& reserved, int64_t min_count);

    size_t size() const { return tokens_.size(); }
    bool contains(std::string_view token) const;
    std::optional<int> find(std::string_view token) const;
    /// Falls back to the unknown-token id; throws if the vocabulary has none.
    int id(std::string_view token) const;
    const std::string& token(int id) const { return tokens_.at(static_cast<size_t>(id)); }
    int64_t count(int id) const { return counts_.at(static_cast<size_t>(id)); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    void set_unk(std::string_view token);
    std::optional<int> unk_id() const { return unk_; }

    int add(const std::string& token, int64_t count = 0);

    /// One "token<TAB>id<TAB>count" line per entry, tabs/newlines escaped.
    void save(const std::filesystem::path& path) const;
    static Vocabulary load(const std::filesystem::path& path);

    nlohmann::json to_json() const;
    static Vocabulary from_json(const nlohmann::json& j);

    bool operator==(const Vocabulary& other) const {
        return tokens_ == other.tokens_ && counts_ == other.counts_ && unk_ == other.unk_;
    }

private:
    std::vector<std::string> tokens_;
    std::vector<int64_t> counts_;
    std::unordered_map<std::string, int> index_;
    std::optional<int> unk_;
};

/// Input, sketch and range vocabularies of one model.
struct VocabSet {
    Vocabulary input;
    Vocabulary sketch;
    Vocabulary range;

    nlohmann::json to_json() const;
    static VocabSet from_json(const nlohmann::json& j);
    bool operator==(const VocabSet&) const = default;
};

/// Reserved entries of the sketch vocabulary: [PAD], [UNK], RANGE, $ENDSKETCH$.
std::vector<std::string> sketch_reserved_tokens();
/// Closed range vocabulary: $R$, $SEP$, $ENDR$, EOF, then R[-D..D] and C[-D..D].
Vocabulary range_vocabulary(int radius);

}  // namespace sheetcoder
