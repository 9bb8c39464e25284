#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <variant>
#include <vector>

namespace sheetcoder {

class ParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class CellKind { Number, Text, Formula, Empty };

std::string_view kind_name(CellKind kind);  // "num", "str", "formula", "empty"
CellKind kind_from_name(std::string_view name);

struct CellValue {
    CellKind kind = CellKind::Empty;
    std::string literal;
    std::optional<std::string> formula_source;

    static CellValue number(std::string text);
    static CellValue text(std::string text);
    static CellValue formula(std::string source, std::string display = {});

    bool operator==(const CellValue&) const = default;
};

struct CellAddr {
    int row = 1;
    int col = 1;

    auto operator<=>(const CellAddr&) const = default;
};

struct RangeAddr {
    CellAddr start;
    CellAddr end;

    bool operator==(const RangeAddr&) const = default;
};

/// Result of parsing an A1 reference. Any `$` marker wins over the
/// structural result because absolute references are never modelled.
struct AbsoluteFlagged {
    bool operator==(const AbsoluteFlagged&) const = default;
};
using A1Ref = std::variant<CellAddr, RangeAddr, AbsoluteFlagged>;

A1Ref parse_a1(std::string_view text);

/// Parses a single cell address such as "b5" or "$C$2"; the absolute markers
/// are reported through the out-parameters instead of rejected.
CellAddr parse_cell_addr(std::string_view text, bool* row_absolute = nullptr,
                         bool* col_absolute = nullptr);

std::string column_letters(int col);
std::string render_a1(const CellAddr& addr);
std::string render_a1(const RangeAddr& range);

class Sheet {
public:
    Sheet() = default;
    explicit Sheet(std::string name, int frozen_rows = 0);

    const std::string& name() const { return name_; }
    int frozen_rows() const { return frozen_rows_; }
    int max_row() const { return max_row_; }
    int max_col() const { return max_col_; }
    const std::map<CellAddr, CellValue>& cells() const { return cells_; }

    void set(CellAddr addr, CellValue value);
    void set_frozen_rows(int rows);
    /// Grows the bounds without storing a cell.
    void extend_bounds(int max_row, int max_col);

    bool contains(const CellAddr& addr) const {
        return addr.row >= 1 && addr.col >= 1 && addr.row <= max_row_ && addr.col <= max_col_;
    }

private:
    std::string name_;
    int frozen_rows_ = 0;
    int max_row_ = 0;
    int max_col_ = 0;
    std::map<CellAddr, CellValue> cells_;
};

/// Total lookup: absent or out-of-bounds coordinates yield an Empty cell.
const CellValue& cell_at(const Sheet& sheet, const CellAddr& addr);

// Canonical ".grid.json" documents.
std::vector<Sheet> parse_grid_document(std::string_view text);
std::string serialize_grid_document(const std::vector<Sheet>& sheets);
std::vector<Sheet> load_grid_file(const std::filesystem::path& path);
void save_grid_file(const std::filesystem::path& path, const std::vector<Sheet>& sheets);

}  // namespace sheetcoder
