#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "sheetcoder/grid.hpp"

namespace sheetcoder {

class Vocabulary;

inline constexpr const char* kPadToken = "[PAD]";
inline constexpr const char* kUnkToken = "[UNK]";
inline constexpr const char* kSepToken = "[SEP]";

using CellTokens = std::vector<std::string>;

/// (2D+2) x (2D+1) neighbourhood of a target cell: one header row plus the
/// data rows/cols at offsets -D..D. Offsets index the data part.
struct ContextWindow {
    int radius = 10;
    std::vector<CellTokens> header;        // 2D+1 entries, columns -D..D
    std::vector<uint8_t> header_valid;     // 2D+1
    std::vector<CellTokens> cells;         // (2D+1)^2, row-major over (dr, dc)
    std::vector<uint8_t> valid;            // (2D+1)^2

    int width() const { return 2 * radius + 1; }
    size_t index(int dr, int dc) const {
        return static_cast<size_t>((dr + radius) * width() + (dc + radius));
    }
    const CellTokens& at(int dr, int dc) const { return cells[index(dr, dc)]; }
    bool is_valid(int dr, int dc) const { return valid[index(dr, dc)] != 0; }

    bool operator==(const ContextWindow&) const = default;
};

/// Fixed-length id sequence; mask[i] is true exactly for real tokens.
struct TokenSeq {
    std::vector<int> ids;
    std::vector<uint8_t> mask;

    bool operator==(const TokenSeq&) const = default;
};

/// One encoder input: header sequence followed by N member sequences,
/// flattened to (N+1)*L positions.
struct Bundle {
    int index = 0;                 // b in [-B, B]
    std::vector<int> members;      // data row (or column) offsets
    std::vector<int> ids;
    std::vector<int> segments;     // 0 header, 1 data
    std::vector<uint8_t> mask;

    bool operator==(const Bundle&) const = default;
};

struct BundleSet {
    int radius = 10;
    int rows_per_bundle = 3;
    int seq_len = 128;
    TokenSeq header_row;              // H_r
    std::vector<TokenSeq> rows;       // R_{-D..D}
    std::vector<TokenSeq> cols;       // C_{-D..D}; H_c is cols[D]
    std::vector<Bundle> row_bundles;
    std::vector<Bundle> col_bundles;

    bool operator==(const BundleSet&) const = default;
};

CellTokens tokenize_cell(const CellValue& cell);

/// Pre: target lies inside the sheet bounds.
ContextWindow extract_window(const Sheet& sheet, CellAddr target, int radius);

/// Blanks and invalidates every data row whose offset is not in `visible`.
ContextWindow apply_row_mask(ContextWindow window, const std::set<int>& visible);
/// Rows -(count-1)..0, i.e. the target row and the rows above it.
std::set<int> rows_upward(int count);

/// Blanks the header row (used to evaluate without header information).
ContextWindow without_header(ContextWindow window);

/// Concatenates cell tokens with [SEP] and trims whole cells, farthest from
/// the target first, until the sequence fits in `seq_len` tokens.
std::vector<std::string> assemble_row_tokens(const ContextWindow& window, int row, size_t seq_len);
std::vector<std::string> assemble_header_tokens(const ContextWindow& window, size_t seq_len);
/// Column sequences start with the header cell, which is dropped last.
std::vector<std::string> assemble_col_tokens(const ContextWindow& window, int col, size_t seq_len);

TokenSeq to_token_seq(const std::vector<std::string>& tokens, const Vocabulary& vocab, size_t seq_len);

TokenSeq assemble_row_seq(const ContextWindow& window, int row, const Vocabulary& vocab, size_t seq_len);

/// Member offsets of each bundle, b = -B..B. Throws std::invalid_argument
/// unless rows_per_bundle is odd and divides 2D+1.
std::vector<std::vector<int>> bundle_members(int radius, int rows_per_bundle);

/// Throws std::logic_error unless the bundles partition {-D..D}.
void check_tiling_partition(int radius, int rows_per_bundle);

BundleSet build_bundles(const ContextWindow& window, const Vocabulary& vocab, int rows_per_bundle,
                        size_t seq_len);

}  // namespace sheetcoder
