#pragma once

#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "sheetcoder/grid.hpp"

namespace sheetcoder {

/// Formula syntax tree. One struct covers every node kind; unused fields stay
/// at their defaults so that defaulted equality is structural equality.
struct FormulaAst {
    enum class Kind { Call, BinaryOp, UnaryOp, NumberLit, StringLit, CellRef, RangeRef, SheetRef };

    Kind kind = Kind::NumberLit;
    // Function name (upper-case), operator symbol, number text, unescaped
    // string contents, or sheet name, depending on kind.
    std::string text;
    std::vector<FormulaAst> args;
    CellAddr first;
    CellAddr last;
    bool first_row_abs = false;
    bool first_col_abs = false;
    bool last_row_abs = false;
    bool last_col_abs = false;

    static FormulaAst call(std::string name, std::vector<FormulaAst> args);
    static FormulaAst binary(std::string op, FormulaAst lhs, FormulaAst rhs);
    static FormulaAst unary(std::string op, FormulaAst operand);
    static FormulaAst number(std::string text);
    static FormulaAst string(std::string text);
    static FormulaAst cell(CellAddr addr);
    static FormulaAst range(CellAddr a, CellAddr b);
    static FormulaAst sheet_ref(std::string sheet, FormulaAst inner);

    bool operator==(const FormulaAst&) const = default;
};

/// Parses "=..." into a syntax tree. Throws ParseError with a character position.
FormulaAst parse_formula(std::string_view source);

/// Renders a tree back to "=..." text with the minimum parentheses needed.
std::string render_ast(const FormulaAst& ast);

// ---------------------------------------------------------------------------
// Functions known to the sketch vocabulary. The canonical arity is the one
// whose function token is printed without an "/arity" suffix.

struct FunctionInfo {
    std::string_view name;
    int canonical_arity;
    int min_arity;
    int max_arity;  // -1 for variadic
};

const std::vector<FunctionInfo>& supported_functions();
const FunctionInfo* find_function(std::string_view name);

inline constexpr std::string_view kBinaryOperators[] = {"+", "-", "*", "/", "&", "=",
                                                        "<>", "<", "<=", ">", ">="};

// ---------------------------------------------------------------------------
// Sketch + relative range representation

inline constexpr std::string_view kRangeToken = "RANGE";
inline constexpr std::string_view kEndSketch = "$ENDSKETCH$";
inline constexpr std::string_view kRangeBegin = "$R$";
inline constexpr std::string_view kRangeSep = "$SEP$";
inline constexpr std::string_view kRangeEnd = "$ENDR$";
inline constexpr std::string_view kEof = "EOF";

struct SketchToken {
    enum class Kind { Function, Operator, Number, String, Range, EndSketch };

    Kind kind = Kind::EndSketch;
    std::string text;  // exact token text as it appears in streams

    /// Number of sub-expressions this token consumes in prefix order.
    int arity() const;

    static SketchToken function(std::string_view name, int arity);
    static SketchToken op(std::string_view symbol);
    static SketchToken number(std::string text);
    static SketchToken string(std::string_view contents);
    static SketchToken range();
    static SketchToken end_sketch();
    /// Classifies a token text; throws ParseError for texts that cannot be
    /// sketch tokens (e.g. range-stage tokens).
    static SketchToken from_text(std::string_view text);

    bool operator==(const SketchToken&) const = default;
};

struct Offset {
    int dr = 0;
    int dc = 0;
    auto operator<=>(const Offset&) const = default;
};

struct RelRange {
    Offset start;
    std::optional<Offset> end;
    bool operator==(const RelRange&) const = default;
};

struct FormulaIR {
    std::vector<SketchToken> sketch;  // ends with $ENDSKETCH$
    std::vector<RelRange> ranges;     // one per RANGE token, in sketch order

    /// Full token stream: sketch, one group per range, then EOF.
    std::vector<std::string> tokens() const;
    std::string text() const;
    std::vector<std::string> sketch_texts() const;
    /// Throws std::invalid_argument when the type invariants do not hold.
    void validate() const;

    bool operator==(const FormulaIR&) const = default;
};

std::vector<std::string> range_group_tokens(const RelRange& range);
std::string row_token(int dr);
std::string col_token(int dc);
/// Parses "R[k]" / "C[k]"; returns nullopt for anything else.
std::optional<int> parse_row_token(std::string_view text);
std::optional<int> parse_col_token(std::string_view text);

/// Splits the space-separated stream text, keeping quoted string literals
/// (which may contain spaces) as single tokens.
std::vector<std::string> split_stream(std::string_view text);
FormulaIR ir_from_tokens(const std::vector<std::string>& tokens);
FormulaIR ir_from_text(std::string_view text);

// ---------------------------------------------------------------------------
// Eligibility

enum class FilterReason { HyperlinkLiteralUrl, CrossSheetRef, OutOfWindow, AbsoluteRef, UnsupportedToken };

std::string_view reason_name(FilterReason reason);

struct Classification {
    std::optional<FilterReason> reason;
    bool eligible() const { return !reason; }
};

/// Checks the filters in a fixed order and reports the first that matches.
Classification classify_formula(const FormulaAst& ast, CellAddr target, int radius);

class ContractViolation : public std::logic_error {
public:
    using std::logic_error::logic_error;
};

FormulaIR to_ir(const FormulaAst& ast, CellAddr target, int radius);

/// Rebuilds the syntax tree that an IR describes at the given target.
FormulaAst ir_to_ast(const FormulaIR& ir, CellAddr target);
std::string render_formula(const FormulaIR& ir, CellAddr target);

/// Sketch tokens excluding $ENDSKETCH$.
size_t sketch_length(const FormulaIR& ir);

}  // namespace sheetcoder
