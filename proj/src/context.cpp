#include "sheetcoder/context.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>

#include "sheetcoder/vocab.hpp"

namespace sheetcoder {

namespace {

void split_text(const std::string& text, CellTokens& out) {
    std::string word;
    auto flush = [&] {
        if (!word.empty()) out.push_back(std::move(word));
        word.clear();
    };
    for (char ch : text) {
        auto c = static_cast<unsigned char>(ch);
        if (std::isspace(c)) {
            flush();
        } else if (std::ispunct(c)) {
            flush();
            out.emplace_back(1, ch);
        } else {
            word.push_back(static_cast<char>(std::tolower(c)));
        }
    }
    flush();
}

}  // namespace

CellTokens tokenize_cell(const CellValue& cell) {
    if (cell.kind == CellKind::Empty) return {};
    CellTokens out{std::string(kind_name(cell.kind))};
    if (cell.kind == CellKind::Number) {
        if (!cell.literal.empty()) out.push_back(cell.literal);
    } else {
        split_text(cell.literal, out);
    }
    return out;
}

ContextWindow extract_window(const Sheet& sheet, CellAddr target, int radius) {
    if (radius < 0) throw std::invalid_argument("radius must be non-negative");
    if (!sheet.contains(target)) {
        throw std::out_of_range("target " + render_a1(target) + " is outside sheet '" + sheet.name() + "'");
    }
    ContextWindow w;
    w.radius = radius;
    int width = w.width();
    w.header.assign(width, {});
    w.header_valid.assign(width, 0);
    w.cells.assign(static_cast<size_t>(width) * width, {});
    w.valid.assign(static_cast<size_t>(width) * width, 0);
    bool has_header = sheet.frozen_rows() >= 1;
    for (int dc = -radius; dc <= radius; ++dc) {
        CellAddr h{1, target.col + dc};
        if (has_header && sheet.contains(h)) {
            w.header[dc + radius] = tokenize_cell(cell_at(sheet, h));
            w.header_valid[dc + radius] = 1;
        }
    }
    for (int dr = -radius; dr <= radius; ++dr) {
        for (int dc = -radius; dc <= radius; ++dc) {
            CellAddr a{target.row + dr, target.col + dc};
            if (!sheet.contains(a)) continue;
            auto idx = w.index(dr, dc);
            w.valid[idx] = 1;
            if (dr != 0 || dc != 0) w.cells[idx] = tokenize_cell(cell_at(sheet, a));
        }
    }
    return w;
}

ContextWindow apply_row_mask(ContextWindow window, const std::set<int>& visible) {
    for (int v : visible) {
        if (v < -window.radius || v > window.radius) {
            throw std::invalid_argument("visible row offset " + std::to_string(v) + " outside the window");
        }
    }
    for (int dr = -window.radius; dr <= window.radius; ++dr) {
        if (visible.count(dr)) continue;
        for (int dc = -window.radius; dc <= window.radius; ++dc) {
            auto idx = window.index(dr, dc);
            window.cells[idx].clear();
            window.valid[idx] = 0;
        }
    }
    return window;
}

std::set<int> rows_upward(int count) {
    std::set<int> rows;
    for (int i = 0; i < count; ++i) rows.insert(-i);
    return rows;
}

ContextWindow without_header(ContextWindow window) {
    for (auto& h : window.header) h.clear();
    std::fill(window.header_valid.begin(), window.header_valid.end(), 0);
    return window;
}

namespace {

struct Piece {
    const CellTokens* tokens;
    int distance;  // drop order key: larger first
    int position;  // left/upper first on ties
};

std::vector<std::string> join_trimmed(std::vector<Piece> pieces, size_t seq_len) {
    pieces.erase(std::remove_if(pieces.begin(), pieces.end(), [](const Piece& p) { return p.tokens->empty(); }),
                 pieces.end());
    auto total = [&] {
        size_t n = 0;
        for (const auto& p : pieces) n += p.tokens->size();
        return pieces.empty() ? n : n + pieces.size() - 1;
    };
    while (pieces.size() > 1 && total() > seq_len) {
        auto victim = std::max_element(pieces.begin(), pieces.end(), [](const Piece& a, const Piece& b) {
            if (a.distance != b.distance) return a.distance < b.distance;
            return a.position > b.position;
        });
        pieces.erase(victim);
    }
    std::vector<std::string> out;
    for (size_t i = 0; i < pieces.size(); ++i) {
        if (i) out.emplace_back(kSepToken);
        out.insert(out.end(), pieces[i].tokens->begin(), pieces[i].tokens->end());
    }
    // A lone cell longer than the budget keeps its leading tokens.
    if (out.size() > seq_len) out.resize(seq_len);
    return out;
}

}  // namespace

std::vector<std::string> assemble_row_tokens(const ContextWindow& w, int row, size_t seq_len) {
    std::vector<Piece> pieces;
    for (int dc = -w.radius; dc <= w.radius; ++dc) {
        pieces.push_back({&w.at(row, dc), std::abs(dc), dc});
    }
    return join_trimmed(std::move(pieces), seq_len);
}

std::vector<std::string> assemble_header_tokens(const ContextWindow& w, size_t seq_len) {
    std::vector<Piece> pieces;
    for (int dc = -w.radius; dc <= w.radius; ++dc) {
        pieces.push_back({&w.header[dc + w.radius], std::abs(dc), dc});
    }
    return join_trimmed(std::move(pieces), seq_len);
}

std::vector<std::string> assemble_col_tokens(const ContextWindow& w, int col, size_t seq_len) {
    std::vector<Piece> pieces;
    pieces.push_back({&w.header[col + w.radius], -1, -w.radius - 1});
    for (int dr = -w.radius; dr <= w.radius; ++dr) {
        pieces.push_back({&w.at(dr, col), std::abs(dr), dr});
    }
    return join_trimmed(std::move(pieces), seq_len);
}

TokenSeq to_token_seq(const std::vector<std::string>& tokens, const Vocabulary& vocab, size_t seq_len) {
    TokenSeq seq;
    int pad = vocab.id(kPadToken);
    seq.ids.assign(seq_len, pad);
    seq.mask.assign(seq_len, 0);
    for (size_t i = 0; i < tokens.size() && i < seq_len; ++i) {
        seq.ids[i] = vocab.id(tokens[i]);
        seq.mask[i] = 1;
    }
    return seq;
}

TokenSeq assemble_row_seq(const ContextWindow& window, int row, const Vocabulary& vocab, size_t seq_len) {
    return to_token_seq(assemble_row_tokens(window, row, seq_len), vocab, seq_len);
}

std::vector<std::vector<int>> bundle_members(int radius, int rows_per_bundle) {
    int width = 2 * radius + 1;
    if (rows_per_bundle < 1 || rows_per_bundle % 2 == 0 || width % rows_per_bundle != 0) {
        throw std::invalid_argument("rows per bundle (" + std::to_string(rows_per_bundle) +
                                    ") must be odd and divide 2D+1 = " + std::to_string(width));
    }
    int half_bundles = (width / rows_per_bundle - 1) / 2;
    int half = (rows_per_bundle - 1) / 2;
    std::vector<std::vector<int>> out;
    for (int b = -half_bundles; b <= half_bundles; ++b) {
        std::vector<int> members;
        for (int j = -half; j <= half; ++j) members.push_back(rows_per_bundle * b + j);
        out.push_back(std::move(members));
    }
    return out;
}

void check_tiling_partition(int radius, int rows_per_bundle) {
    std::vector<int> seen(2 * radius + 1, 0);
    for (const auto& members : bundle_members(radius, rows_per_bundle)) {
        for (int m : members) {
            if (m < -radius || m > radius) {
                throw std::logic_error("bundle member " + std::to_string(m) + " outside -D..D");
            }
            ++seen[m + radius];
        }
    }
    for (size_t i = 0; i < seen.size(); ++i) {
        if (seen[i] != 1) {
            throw std::logic_error("row offset " + std::to_string(static_cast<int>(i) - radius) + " covered " +
                                   std::to_string(seen[i]) + " times");
        }
    }
}

namespace {

Bundle flatten(int index, const std::vector<int>& members, const TokenSeq& header,
               const std::vector<TokenSeq>& seqs, int radius) {
    Bundle b;
    b.index = index;
    b.members = members;
    auto append = [&](const TokenSeq& s, int segment) {
        b.ids.insert(b.ids.end(), s.ids.begin(), s.ids.end());
        b.mask.insert(b.mask.end(), s.mask.begin(), s.mask.end());
        b.segments.insert(b.segments.end(), s.ids.size(), segment);
    };
    append(header, 0);
    for (int m : members) append(seqs[m + radius], 1);
    return b;
}

}  // namespace

BundleSet build_bundles(const ContextWindow& window, const Vocabulary& vocab, int rows_per_bundle,
                        size_t seq_len) {
    check_tiling_partition(window.radius, rows_per_bundle);
    BundleSet set;
    set.radius = window.radius;
    set.rows_per_bundle = rows_per_bundle;
    set.seq_len = static_cast<int>(seq_len);
    set.header_row = to_token_seq(assemble_header_tokens(window, seq_len), vocab, seq_len);
    for (int i = -window.radius; i <= window.radius; ++i) {
        set.rows.push_back(to_token_seq(assemble_row_tokens(window, i, seq_len), vocab, seq_len));
        set.cols.push_back(to_token_seq(assemble_col_tokens(window, i, seq_len), vocab, seq_len));
    }
    const TokenSeq& header_col = set.cols[window.radius];
    auto tiling = bundle_members(window.radius, rows_per_bundle);
    int half_bundles = static_cast<int>(tiling.size() / 2);
    for (size_t k = 0; k < tiling.size(); ++k) {
        int b = static_cast<int>(k) - half_bundles;
        set.row_bundles.push_back(flatten(b, tiling[k], set.header_row, set.rows, window.radius));
        set.col_bundles.push_back(flatten(b, tiling[k], header_col, set.cols, window.radius));
    }
    return set;
}

}  // namespace sheetcoder
