#include "sheetcoder/vocab.hpp"

#include "sheetcoder/context.hpp"
#include "sheetcoder/formula.hpp"

#include <algorithm>
#include <fstream>
#include <stdexcept>

namespace sheetcoder {

Vocabulary Vocabulary::build(const std::map<std::string, int64_t>& counts,
                             const std::vector<std::string>& reserved, int64_t min_count) {
    Vocabulary v;
    for (const auto& r : reserved) {
        auto it = counts.find(r);
        v.add(r, it == counts.end() ? 0 : it->second);
    }
    std::vector<std::pair<std::string, int64_t>> rest;
    for (const auto& [tok, n] : counts) {
        if (n >= min_count && !v.contains(tok)) rest.emplace_back(tok, n);
    }
    std::stable_sort(rest.begin(), rest.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    for (const auto& [tok, n] : rest) v.add(tok, n);
    return v;
}

bool Vocabulary::contains(std::string_view token) const {
    return index_.find(std::string(token)) != index_.end();
}

std::optional<int> Vocabulary::find(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end()) return std::nullopt;
    return it->second;
}

int Vocabulary::id(std::string_view token) const {
    if (auto f = find(token)) return *f;
    if (!unk_) throw std::out_of_range("token '" + std::string(token) + "' not in vocabulary");
    return *unk_;
}

void Vocabulary::set_unk(std::string_view token) {
    auto f = find(token);
    if (!f) throw std::invalid_argument("unknown-token marker must be in the vocabulary");
    unk_ = *f;
}

int Vocabulary::add(const std::string& token, int64_t count) {
    if (auto f = find(token)) return *f;
    int id = static_cast<int>(tokens_.size());
    tokens_.push_back(token);
    counts_.push_back(count);
    index_.emplace(token, id);
    return id;
}

namespace {

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '\\': out += "\\\\"; break;
            case '\t': out += "\\t"; break;
            case '\n': out += "\\n"; break;
            case '\r': out += "\\r"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

std::string unescape(const std::string& s) {
    std::string out;
    for (size_t i = 0; i < s.size(); ++i) {
        if (s[i] == '\\' && i + 1 < s.size()) {
            char n = s[++i];
            out.push_back(n == 't' ? '\t' : n == 'n' ? '\n' : n == 'r' ? '\r' : n);
        } else {
            out.push_back(s[i]);
        }
    }
    return out;
}

}  // namespace

void Vocabulary::save(const std::filesystem::path& path) const {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write vocabulary " + path.string());
    for (size_t i = 0; i < tokens_.size(); ++i) {
        out << escape(tokens_[i]) << '\t' << i << '\t' << counts_[i] << '\n';
    }
}

Vocabulary Vocabulary::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot read vocabulary " + path.string());
    Vocabulary v;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto t1 = line.find('\t');
        auto t2 = line.find('\t', t1 == std::string::npos ? t1 : t1 + 1);
        if (t1 == std::string::npos || t2 == std::string::npos) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": malformed vocabulary line");
        }
        auto id = std::stoll(line.substr(t1 + 1, t2 - t1 - 1));
        if (id != static_cast<long long>(v.size())) {
            throw std::runtime_error(path.string() + ":" + std::to_string(lineno) + ": ids must be dense");
        }
        v.add(unescape(line.substr(0, t1)), std::stoll(line.substr(t2 + 1)));
    }
    return v;
}

nlohmann::json Vocabulary::to_json() const {
    nlohmann::json j;
    j["tokens"] = tokens_;
    j["counts"] = counts_;
    if (unk_) j["unk"] = *unk_;
    return j;
}

Vocabulary Vocabulary::from_json(const nlohmann::json& j) {
    Vocabulary v;
    auto tokens = j.at("tokens").get<std::vector<std::string>>();
    auto counts = j.at("counts").get<std::vector<int64_t>>();
    if (tokens.size() != counts.size()) throw std::runtime_error("vocabulary token/count length mismatch");
    for (size_t i = 0; i < tokens.size(); ++i) v.add(tokens[i], counts[i]);
    if (j.contains("unk")) v.unk_ = j.at("unk").get<int>();
    return v;
}

nlohmann::json VocabSet::to_json() const {
    return {{"input", input.to_json()}, {"sketch", sketch.to_json()}, {"range", range.to_json()}};
}

VocabSet VocabSet::from_json(const nlohmann::json& j) {
    VocabSet v;
    v.input = Vocabulary::from_json(j.at("input"));
    v.sketch = Vocabulary::from_json(j.at("sketch"));
    v.range = Vocabulary::from_json(j.at("range"));
    return v;
}

std::vector<std::string> sketch_reserved_tokens() {
    return {kPadToken, kUnkToken, std::string(kRangeToken), std::string(kEndSketch)};
}

Vocabulary range_vocabulary(int radius) {
    Vocabulary v;
    for (auto t : {kRangeBegin, kRangeSep, kRangeEnd, kEof}) v.add(std::string(t));
    for (int k = -radius; k <= radius; ++k) v.add(row_token(k));
    for (int k = -radius; k <= radius; ++k) v.add(col_token(k));
    return v;
}

}  // namespace sheetcoder
