#include "sheetcoder/grid.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace sheetcoder {

using nlohmann::json;

std::string_view kind_name(CellKind kind) {
    switch (kind) {
        case CellKind::Number: return "num";
        case CellKind::Text: return "str";
        case CellKind::Formula: return "formula";
        case CellKind::Empty: return "empty";
    }
    return "empty";
}

CellKind kind_from_name(std::string_view name) {
    if (name == "num") return CellKind::Number;
    if (name == "str") return CellKind::Text;
    if (name == "formula") return CellKind::Formula;
    if (name == "empty") return CellKind::Empty;
    throw ParseError("unknown cell kind '" + std::string(name) + "'");
}

CellValue CellValue::number(std::string text) {
    return {CellKind::Number, std::move(text), std::nullopt};
}

CellValue CellValue::text(std::string text) {
    return {CellKind::Text, std::move(text), std::nullopt};
}

CellValue CellValue::formula(std::string source, std::string display) {
    if (source.empty() || source.front() != '=') {
        throw ParseError("formula source must begin with '=': '" + source + "'");
    }
    return {CellKind::Formula, std::move(display), std::move(source)};
}

// ---------------------------------------------------------------------------
// A1 addressing

namespace {

bool is_alpha(char c) { return std::isalpha(static_cast<unsigned char>(c)) != 0; }
bool is_digit(char c) { return std::isdigit(static_cast<unsigned char>(c)) != 0; }

}  // namespace

CellAddr parse_cell_addr(std::string_view text, bool* row_absolute, bool* col_absolute) {
    auto fail = [&](const char* why) {
        return ParseError("malformed cell reference '" + std::string(text) + "': " + why);
    };
    size_t i = 0;
    bool col_abs = false;
    bool row_abs = false;
    if (i < text.size() && text[i] == '$') {
        col_abs = true;
        ++i;
    }
    if (i < text.size() && is_digit(text[i])) throw fail("digits before column letters");
    long col = 0;
    size_t letters = 0;
    while (i < text.size() && is_alpha(text[i])) {
        col = col * 26 + (std::toupper(static_cast<unsigned char>(text[i])) - 'A' + 1);
        if (col > 18278) throw fail("column out of range");  // ZZZ
        ++i;
        ++letters;
    }
    if (letters == 0) throw fail("missing column letters");
    if (i < text.size() && text[i] == '$') {
        row_abs = true;
        ++i;
    }
    long row = 0;
    size_t digits = 0;
    while (i < text.size() && is_digit(text[i])) {
        row = row * 10 + (text[i] - '0');
        if (row > 10'000'000) throw fail("row out of range");
        ++i;
        ++digits;
    }
    if (digits == 0) throw fail("missing row number");
    if (i != text.size()) throw fail("unexpected trailing characters");
    if (row < 1) throw fail("row must be at least 1");
    if (row_absolute) *row_absolute = row_abs;
    if (col_absolute) *col_absolute = col_abs;
    return {static_cast<int>(row), static_cast<int>(col)};
}

A1Ref parse_a1(std::string_view text) {
    if (text.empty()) throw ParseError("empty cell reference");
    auto colon = text.find(':');
    bool absolute = text.find('$') != std::string_view::npos;
    if (colon == std::string_view::npos) {
        auto addr = parse_cell_addr(text);
        if (absolute) return AbsoluteFlagged{};
        return addr;
    }
    auto lhs = text.substr(0, colon);
    auto rhs = text.substr(colon + 1);
    if (lhs.empty() || rhs.empty()) {
        throw ParseError("malformed range reference '" + std::string(text) + "': empty endpoint");
    }
    auto a = parse_cell_addr(lhs);
    auto b = parse_cell_addr(rhs);
    if (absolute) return AbsoluteFlagged{};
    return RangeAddr{{std::min(a.row, b.row), std::min(a.col, b.col)},
                     {std::max(a.row, b.row), std::max(a.col, b.col)}};
}

std::string column_letters(int col) {
    std::string out;
    while (col > 0) {
        int rem = (col - 1) % 26;
        out.push_back(static_cast<char>('A' + rem));
        col = (col - 1) / 26;
    }
    std::reverse(out.begin(), out.end());
    return out;
}

std::string render_a1(const CellAddr& addr) {
    return column_letters(addr.col) + std::to_string(addr.row);
}

std::string render_a1(const RangeAddr& range) {
    return render_a1(range.start) + ":" + render_a1(range.end);
}

// ---------------------------------------------------------------------------
// Sheet

Sheet::Sheet(std::string name, int frozen_rows) : name_(std::move(name)) {
    set_frozen_rows(frozen_rows);
}

void Sheet::set(CellAddr addr, CellValue value) {
    if (addr.row < 1 || addr.col < 1) {
        throw std::out_of_range("cell coordinates must be 1-based, got (" +
                                std::to_string(addr.row) + "," + std::to_string(addr.col) + ")");
    }
    if (value.kind == CellKind::Empty && (!value.literal.empty() || value.formula_source)) {
        throw std::invalid_argument("empty cell must not carry a literal or formula");
    }
    if (value.kind == CellKind::Formula &&
        (!value.formula_source || value.formula_source->empty() ||
         value.formula_source->front() != '=')) {
        throw std::invalid_argument("formula cell needs a source beginning with '='");
    }
    if (value.kind != CellKind::Formula && value.formula_source) {
        throw std::invalid_argument("only formula cells carry a formula source");
    }
    max_row_ = std::max(max_row_, addr.row);
    max_col_ = std::max(max_col_, addr.col);
    cells_[addr] = std::move(value);
}

void Sheet::set_frozen_rows(int rows) {
    if (rows < 0) throw std::invalid_argument("frozen_rows must be non-negative");
    frozen_rows_ = rows;
    max_row_ = std::max(max_row_, rows);
}

void Sheet::extend_bounds(int max_row, int max_col) {
    max_row_ = std::max(max_row_, max_row);
    max_col_ = std::max(max_col_, max_col);
}

const CellValue& cell_at(const Sheet& sheet, const CellAddr& addr) {
    static const CellValue empty{};
    auto it = sheet.cells().find(addr);
    return it == sheet.cells().end() ? empty : it->second;
}

// ---------------------------------------------------------------------------
// Canonical grid documents

namespace {

template <typename T>
T required(const json& obj, const char* key, const std::string& where) {
    auto it = obj.find(key);
    if (it == obj.end()) throw ParseError(where + ": missing field '" + key + "'");
    try {
        return it->get<T>();
    } catch (const json::exception&) {
        throw ParseError(where + ": field '" + key + "' has the wrong type");
    }
}

}  // namespace

std::vector<Sheet> parse_grid_document(std::string_view text) {
    json doc;
    try {
        doc = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError(std::string("malformed grid document: ") + e.what());
    }
    if (!doc.is_object()) throw ParseError("grid document must be an object");
    auto sheets_it = doc.find("sheets");
    if (sheets_it == doc.end() || !sheets_it->is_array()) {
        throw ParseError("grid document needs a top-level 'sheets' array");
    }
    std::vector<Sheet> sheets;
    for (size_t s = 0; s < sheets_it->size(); ++s) {
        const json& js = (*sheets_it)[s];
        std::string where = "sheets[" + std::to_string(s) + "]";
        if (!js.is_object()) throw ParseError(where + ": expected an object");
        Sheet sheet(required<std::string>(js, "name", where));
        int frozen = required<int>(js, "frozen_rows", where);
        if (frozen < 0) throw ParseError(where + ": frozen_rows must be non-negative");
        auto cells = js.find("cells");
        if (cells == js.end() || !cells->is_array()) {
            throw ParseError(where + ": missing 'cells' array");
        }
        for (size_t c = 0; c < cells->size(); ++c) {
            const json& jc = (*cells)[c];
            std::string cw = where + ".cells[" + std::to_string(c) + "]";
            if (!jc.is_object()) throw ParseError(cw + ": expected an object");
            int row = required<int>(jc, "row", cw);
            int col = required<int>(jc, "col", cw);
            if (row < 1 || col < 1) throw ParseError(cw + ": row/col must be >= 1");
            CellKind kind;
            try {
                kind = kind_from_name(required<std::string>(jc, "kind", cw));
            } catch (const ParseError& e) {
                throw ParseError(cw + ": " + e.what());
            }
            CellValue value;
            value.kind = kind;
            if (auto v = jc.find("value"); v != jc.end()) {
                if (!v->is_string()) throw ParseError(cw + ": 'value' must be a string");
                value.literal = v->get<std::string>();
            }
            if (auto f = jc.find("formula"); f != jc.end()) {
                if (!f->is_string()) throw ParseError(cw + ": 'formula' must be a string");
                value.formula_source = f->get<std::string>();
            }
            try {
                sheet.set({row, col}, std::move(value));
            } catch (const std::exception& e) {
                throw ParseError(cw + ": " + e.what());
            }
        }
        sheet.set_frozen_rows(frozen);
        // Optional explicit extent, for sheets whose used area is smaller than the grid.
        int max_row = 0, max_col = 0;
        for (auto [key, out] : {std::pair{"max_row", &max_row}, std::pair{"max_col", &max_col}}) {
            auto it = js.find(key);
            if (it == js.end()) continue;
            if (!it->is_number_integer() || it->get<int>() < 0) {
                throw ParseError(where + ": '" + key + "' must be a non-negative integer");
            }
            *out = it->get<int>();
        }
        sheet.extend_bounds(max_row, max_col);
        sheets.push_back(std::move(sheet));
    }
    return sheets;
}

std::string serialize_grid_document(const std::vector<Sheet>& sheets) {
    json doc = json::object();
    json arr = json::array();
    for (const auto& sheet : sheets) {
        json js;
        js["name"] = sheet.name();
        js["frozen_rows"] = sheet.frozen_rows();
        js["max_row"] = sheet.max_row();
        js["max_col"] = sheet.max_col();
        json cells = json::array();
        for (const auto& [addr, value] : sheet.cells()) {
            json jc;
            jc["row"] = addr.row;
            jc["col"] = addr.col;
            jc["kind"] = std::string(kind_name(value.kind));
            jc["value"] = value.literal;
            if (value.formula_source) jc["formula"] = *value.formula_source;
            cells.push_back(std::move(jc));
        }
        js["cells"] = std::move(cells);
        arr.push_back(std::move(js));
    }
    doc["sheets"] = std::move(arr);
    return doc.dump(1) + "\n";
}

std::vector<Sheet> load_grid_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open grid file " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    try {
        return parse_grid_document(buf.str());
    } catch (const ParseError& e) {
        throw ParseError(path.string() + ": " + e.what());
    }
}

void save_grid_file(const std::filesystem::path& path, const std::vector<Sheet>& sheets) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write grid file " + path.string());
    out << serialize_grid_document(sheets);
}

}  // namespace sheetcoder
