#include "sheetcoder/formula.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>

namespace sheetcoder {

// ---------------------------------------------------------------------------
// Node constructors

FormulaAst FormulaAst::call(std::string name, std::vector<FormulaAst> args) {
    FormulaAst n;
    n.kind = Kind::Call;
    n.text = std::move(name);
    n.args = std::move(args);
    return n;
}

FormulaAst FormulaAst::binary(std::string op, FormulaAst lhs, FormulaAst rhs) {
    FormulaAst n;
    n.kind = Kind::BinaryOp;
    n.text = std::move(op);
    n.args.push_back(std::move(lhs));
    n.args.push_back(std::move(rhs));
    return n;
}

FormulaAst FormulaAst::unary(std::string op, FormulaAst operand) {
    FormulaAst n;
    n.kind = Kind::UnaryOp;
    n.text = std::move(op);
    n.args.push_back(std::move(operand));
    return n;
}

FormulaAst FormulaAst::number(std::string text) {
    FormulaAst n;
    n.kind = Kind::NumberLit;
    n.text = std::move(text);
    return n;
}

FormulaAst FormulaAst::string(std::string text) {
    FormulaAst n;
    n.kind = Kind::StringLit;
    n.text = std::move(text);
    return n;
}

FormulaAst FormulaAst::cell(CellAddr addr) {
    FormulaAst n;
    n.kind = Kind::CellRef;
    n.first = addr;
    n.last = addr;
    return n;
}

FormulaAst FormulaAst::range(CellAddr a, CellAddr b) {
    FormulaAst n;
    n.kind = Kind::RangeRef;
    n.first = {std::min(a.row, b.row), std::min(a.col, b.col)};
    n.last = {std::max(a.row, b.row), std::max(a.col, b.col)};
    return n;
}

FormulaAst FormulaAst::sheet_ref(std::string sheet, FormulaAst inner) {
    FormulaAst n;
    n.kind = Kind::SheetRef;
    n.text = std::move(sheet);
    n.args.push_back(std::move(inner));
    return n;
}

// ---------------------------------------------------------------------------
// Lexer

namespace {

enum class Tok { Number, String, Ident, SheetName, LParen, RParen, Comma, Colon, Bang, Op, End };

struct Token {
    Tok type;
    std::string text;
    size_t pos;
};

ParseError syntax_error(size_t pos, const std::string& what) {
    return ParseError("syntax error at position " + std::to_string(pos) + ": " + what);
}

bool ident_start(char c) {
    return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '$';
}

bool ident_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.' || c == '$';
}

// Lexing starts at `begin`; positions index into the whole source.
std::vector<Token> lex(std::string_view src, size_t begin) {
    std::vector<Token> out;
    size_t i = begin;
    while (i < src.size()) {
        char c = src[i];
        if (std::isspace(static_cast<unsigned char>(c))) {
            ++i;
            continue;
        }
        size_t start = i;
        if (std::isdigit(static_cast<unsigned char>(c)) ||
            (c == '.' && i + 1 < src.size() && std::isdigit(static_cast<unsigned char>(src[i + 1])))) {
            while (i < src.size() && std::isdigit(static_cast<unsigned char>(src[i]))) ++i;
            if (i < src.size() && src[i] == '.') {
                ++i;
                while (i < src.size() && std::isdigit(static_cast<unsigned char>(src[i]))) ++i;
            }
            if (i < src.size() && (src[i] == 'e' || src[i] == 'E')) {
                size_t j = i + 1;
                if (j < src.size() && (src[j] == '+' || src[j] == '-')) ++j;
                if (j < src.size() && std::isdigit(static_cast<unsigned char>(src[j]))) {
                    i = j;
                    while (i < src.size() && std::isdigit(static_cast<unsigned char>(src[i]))) ++i;
                }
            }
            // "1A" is neither a number nor a reference.
            if (i < src.size() && ident_start(src[i])) {
                throw syntax_error(start, "malformed token '" +
                                              std::string(src.substr(start, i + 1 - start)) + "'");
            }
            out.push_back({Tok::Number, std::string(src.substr(start, i - start)), start});
            continue;
        }
        if (c == '"' || c == '\'') {
            char quote = c;
            std::string text;
            ++i;
            bool closed = false;
            while (i < src.size()) {
                if (src[i] == quote) {
                    if (i + 1 < src.size() && src[i + 1] == quote) {
                        text.push_back(quote);
                        i += 2;
                        continue;
                    }
                    ++i;
                    closed = true;
                    break;
                }
                text.push_back(src[i++]);
            }
            if (!closed) {
                throw syntax_error(start, quote == '"' ? "unterminated string literal"
                                                       : "unterminated quoted sheet name");
            }
            out.push_back({quote == '"' ? Tok::String : Tok::SheetName, std::move(text), start});
            continue;
        }
        if (ident_start(c)) {
            while (i < src.size() && ident_char(src[i])) ++i;
            out.push_back({Tok::Ident, std::string(src.substr(start, i - start)), start});
            continue;
        }
        switch (c) {
            case '(': out.push_back({Tok::LParen, "(", start}); ++i; continue;
            case ')': out.push_back({Tok::RParen, ")", start}); ++i; continue;
            case ',': out.push_back({Tok::Comma, ",", start}); ++i; continue;
            case ':': out.push_back({Tok::Colon, ":", start}); ++i; continue;
            case '!': out.push_back({Tok::Bang, "!", start}); ++i; continue;
            case '+': case '-': case '*': case '/': case '&': case '=':
                out.push_back({Tok::Op, std::string(1, c), start});
                ++i;
                continue;
            case '<':
                if (i + 1 < src.size() && (src[i + 1] == '=' || src[i + 1] == '>')) {
                    out.push_back({Tok::Op, std::string(src.substr(i, 2)), start});
                    i += 2;
                } else {
                    out.push_back({Tok::Op, "<", start});
                    ++i;
                }
                continue;
            case '>':
                if (i + 1 < src.size() && src[i + 1] == '=') {
                    out.push_back({Tok::Op, ">=", start});
                    i += 2;
                } else {
                    out.push_back({Tok::Op, ">", start});
                    ++i;
                }
                continue;
            default:
                throw syntax_error(start, std::string("unexpected character '") + c + "'");
        }
    }
    out.push_back({Tok::End, "", src.size()});
    return out;
}

// ---------------------------------------------------------------------------
// Parser

enum Precedence { kComparison = 1, kConcat = 2, kAdditive = 3, kMultiplicative = 4, kUnary = 5, kPrimary = 6 };

int binary_precedence(std::string_view op) {
    if (op == "&") return kConcat;
    if (op == "+" || op == "-") return kAdditive;
    if (op == "*" || op == "/") return kMultiplicative;
    if (op == "=" || op == "<>" || op == "<" || op == "<=" || op == ">" || op == ">=") {
        return kComparison;
    }
    return 0;
}

class Parser {
public:
    explicit Parser(std::vector<Token> tokens) : toks_(std::move(tokens)) {}

    FormulaAst parse() {
        auto ast = binary(kComparison);
        if (peek().type != Tok::End) {
            if (peek().type == Tok::RParen) throw syntax_error(peek().pos, "unbalanced ')'");
            throw syntax_error(peek().pos, "unexpected '" + peek().text + "'");
        }
        return ast;
    }

private:
    const Token& peek() const { return toks_[i_]; }
    Token next() { return toks_[i_++]; }

    FormulaAst binary(int level) {
        if (level >= kUnary) return unary();
        auto lhs = binary(level + 1);
        while (peek().type == Tok::Op && binary_precedence(peek().text) == level) {
            std::string op = next().text;
            auto rhs = binary(level + 1);
            lhs = FormulaAst::binary(std::move(op), std::move(lhs), std::move(rhs));
        }
        return lhs;
    }

    FormulaAst unary() {
        if (peek().type == Tok::Op && (peek().text == "+" || peek().text == "-")) {
            std::string op = next().text;
            return FormulaAst::unary(std::move(op), unary());
        }
        return primary();
    }

    FormulaAst primary() {
        Token t = next();
        switch (t.type) {
            case Tok::Number: return FormulaAst::number(t.text);
            case Tok::String: return FormulaAst::string(t.text);
            case Tok::LParen: {
                auto inner = binary(kComparison);
                if (peek().type != Tok::RParen) throw syntax_error(t.pos, "unbalanced '('");
                next();
                return inner;
            }
            case Tok::SheetName: {
                if (peek().type != Tok::Bang) throw syntax_error(peek().pos, "expected '!' after sheet name");
                next();
                return FormulaAst::sheet_ref(t.text, reference(next()));
            }
            case Tok::Ident: {
                if (peek().type == Tok::LParen) return call(t);
                if (peek().type == Tok::Bang) {
                    next();
                    return FormulaAst::sheet_ref(t.text, reference(next()));
                }
                return reference(t);
            }
            case Tok::End: throw syntax_error(t.pos, "unexpected end of formula");
            default: throw syntax_error(t.pos, "unexpected '" + t.text + "'");
        }
    }

    FormulaAst call(const Token& name) {
        next();  // '('
        std::string upper = name.text;
        for (auto& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
        if (upper.find('$') != std::string::npos) throw syntax_error(name.pos, "invalid function name '" + name.text + "'");
        std::vector<FormulaAst> args;
        if (peek().type == Tok::RParen) {
            next();
            return FormulaAst::call(std::move(upper), std::move(args));
        }
        while (true) {
            args.push_back(binary(kComparison));
            if (peek().type == Tok::Comma) {
                next();
                continue;
            }
            if (peek().type == Tok::RParen) {
                next();
                break;
            }
            if (peek().type == Tok::End) throw syntax_error(name.pos, "unbalanced '(' in call to " + upper);
            throw syntax_error(peek().pos, "expected ',' or ')' in call to " + upper);
        }
        return FormulaAst::call(std::move(upper), std::move(args));
    }

    FormulaAst reference(const Token& t) {
        if (t.type != Tok::Ident) throw syntax_error(t.pos, "expected a cell reference");
        FormulaAst ref;
        bool ra = false, ca = false;
        CellAddr a;
        try {
            a = parse_cell_addr(t.text, &ra, &ca);
        } catch (const ParseError&) {
            throw syntax_error(t.pos, "unsupported identifier '" + t.text + "'");
        }
        if (peek().type != Tok::Colon) {
            ref = FormulaAst::cell(a);
            ref.first_row_abs = ref.last_row_abs = ra;
            ref.first_col_abs = ref.last_col_abs = ca;
            return ref;
        }
        next();
        Token u = next();
        bool rb = false, cb = false;
        CellAddr b;
        try {
            if (u.type != Tok::Ident) throw ParseError("");
            b = parse_cell_addr(u.text, &rb, &cb);
        } catch (const ParseError&) {
            throw syntax_error(u.pos, "malformed range endpoint '" + u.text + "'");
        }
        ref = FormulaAst::range(a, b);
        bool swap_rows = a.row > b.row;
        bool swap_cols = a.col > b.col;
        ref.first_row_abs = swap_rows ? rb : ra;
        ref.last_row_abs = swap_rows ? ra : rb;
        ref.first_col_abs = swap_cols ? cb : ca;
        ref.last_col_abs = swap_cols ? ca : cb;
        return ref;
    }

    std::vector<Token> toks_;
    size_t i_ = 0;
};

}  // namespace

FormulaAst parse_formula(std::string_view source) {
    if (source.empty() || source.front() != '=') {
        throw ParseError("formula must begin with '='");
    }
    return Parser(lex(source, 1)).parse();
}

// ---------------------------------------------------------------------------
// Rendering

namespace {

int node_precedence(const FormulaAst& n) {
    switch (n.kind) {
        case FormulaAst::Kind::BinaryOp: return binary_precedence(n.text);
        case FormulaAst::Kind::UnaryOp: return kUnary;
        default: return kPrimary;
    }
}

bool simple_sheet_name(const std::string& name) {
    if (name.empty() || !(std::isalpha(static_cast<unsigned char>(name[0])) || name[0] == '_')) return false;
    return std::all_of(name.begin(), name.end(), [](char c) {
        return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
    });
}

std::string quote(const std::string& text, char q) {
    std::string out(1, q);
    for (char c : text) {
        out.push_back(c);
        if (c == q) out.push_back(q);
    }
    out.push_back(q);
    return out;
}

std::string render_ref_part(const CellAddr& a, bool row_abs, bool col_abs) {
    return (col_abs ? "$" : "") + column_letters(a.col) + (row_abs ? "$" : "") + std::to_string(a.row);
}

void render_node(const FormulaAst& n, std::string& out) {
    using K = FormulaAst::Kind;
    switch (n.kind) {
        case K::NumberLit: out += n.text; return;
        case K::StringLit: out += quote(n.text, '"'); return;
        case K::CellRef: out += render_ref_part(n.first, n.first_row_abs, n.first_col_abs); return;
        case K::RangeRef:
            out += render_ref_part(n.first, n.first_row_abs, n.first_col_abs);
            out += ':';
            out += render_ref_part(n.last, n.last_row_abs, n.last_col_abs);
            return;
        case K::SheetRef:
            out += simple_sheet_name(n.text) ? n.text : quote(n.text, '\'');
            out += '!';
            render_node(n.args.at(0), out);
            return;
        case K::Call:
            out += n.text;
            out += '(';
            for (size_t i = 0; i < n.args.size(); ++i) {
                if (i) out += ',';
                render_node(n.args[i], out);
            }
            out += ')';
            return;
        case K::UnaryOp: {
            out += n.text;
            const auto& x = n.args.at(0);
            bool parens = node_precedence(x) < kUnary;
            if (parens) out += '(';
            render_node(x, out);
            if (parens) out += ')';
            return;
        }
        case K::BinaryOp: {
            int p = binary_precedence(n.text);
            const auto& l = n.args.at(0);
            const auto& r = n.args.at(1);
            bool lp = node_precedence(l) < p;
            bool rp = node_precedence(r) <= p;
            if (lp) out += '(';
            render_node(l, out);
            if (lp) out += ')';
            out += n.text;
            if (rp) out += '(';
            render_node(r, out);
            if (rp) out += ')';
            return;
        }
    }
}

}  // namespace

std::string render_ast(const FormulaAst& ast) {
    std::string out = "=";
    render_node(ast, out);
    return out;
}

// ---------------------------------------------------------------------------
// Function table

const std::vector<FunctionInfo>& supported_functions() {
    static const std::vector<FunctionInfo> table = {
        {"ABS", 1, 1, 1},        {"AVERAGE", 1, 1, -1},   {"AVERAGEA", 1, 1, -1},
        {"CONCATENATE", 2, 1, -1}, {"COS", 1, 1, 1},      {"COUNT", 1, 1, -1},
        {"COUNTA", 1, 1, -1},    {"DAY", 1, 1, 1},        {"IF", 3, 2, 3},
        {"IFERROR", 2, 1, 2},    {"LEFT", 2, 1, 2},       {"LEN", 1, 1, 1},
        {"LN", 1, 1, 1},         {"MAX", 1, 1, -1},       {"MEDIAN", 1, 1, -1},
        {"MIN", 1, 1, -1},       {"MONTH", 1, 1, 1},      {"ROUND", 2, 1, 2},
        {"SIN", 1, 1, 1},        {"SINH", 1, 1, 1},       {"STDEV", 1, 1, -1},
        {"SUM", 1, 1, -1},       {"TODAY", 0, 0, 0},      {"TRIM", 1, 1, 1},
        {"WEEKDAY", 1, 1, 2},    {"WEEKNUM", 1, 1, 2},
    };
    return table;
}

const FunctionInfo* find_function(std::string_view name) {
    for (const auto& f : supported_functions()) {
        if (f.name == name) return &f;
    }
    return nullptr;
}

// ---------------------------------------------------------------------------
// Sketch tokens

namespace {

bool is_binary_symbol(std::string_view s) {
    return std::find(std::begin(kBinaryOperators), std::end(kBinaryOperators), s) !=
           std::end(kBinaryOperators);
}

bool looks_numeric(std::string_view s) {
    if (s.empty()) return false;
    return std::isdigit(static_cast<unsigned char>(s[0])) ||
           (s[0] == '.' && s.size() > 1 && std::isdigit(static_cast<unsigned char>(s[1])));
}

}  // namespace

int SketchToken::arity() const {
    switch (kind) {
        case Kind::Operator: return (text == "UPLUS" || text == "UMINUS") ? 1 : 2;
        case Kind::Function: {
            auto slash = text.find('/');
            if (slash != std::string::npos) return std::atoi(text.c_str() + slash + 1);
            const auto* f = find_function(text);
            return f ? f->canonical_arity : 0;
        }
        default: return 0;
    }
}

SketchToken SketchToken::function(std::string_view name, int arity) {
    const auto* f = find_function(name);
    std::string text(name);
    if (!f || f->canonical_arity != arity) text += "/" + std::to_string(arity);
    return {Kind::Function, std::move(text)};
}

SketchToken SketchToken::op(std::string_view symbol) { return {Kind::Operator, std::string(symbol)}; }
SketchToken SketchToken::number(std::string text) { return {Kind::Number, std::move(text)}; }
SketchToken SketchToken::string(std::string_view contents) {
    return {Kind::String, quote(std::string(contents), '"')};
}
SketchToken SketchToken::range() { return {Kind::Range, std::string(kRangeToken)}; }
SketchToken SketchToken::end_sketch() { return {Kind::EndSketch, std::string(kEndSketch)}; }

SketchToken SketchToken::from_text(std::string_view text) {
    if (text.empty()) throw ParseError("empty sketch token");
    if (text == kRangeToken) return range();
    if (text == kEndSketch) return end_sketch();
    if (text == "UPLUS" || text == "UMINUS" || is_binary_symbol(text)) return op(text);
    if (text.front() == '"') {
        if (text.size() < 2 || text.back() != '"') throw ParseError("malformed string token " + std::string(text));
        return {Kind::String, std::string(text)};
    }
    if (looks_numeric(text)) return number(std::string(text));
    if (text == kEof || text == kRangeBegin || text == kRangeSep || text == kRangeEnd ||
        parse_row_token(text) || parse_col_token(text)) {
        throw ParseError("range token '" + std::string(text) + "' inside a sketch");
    }
    bool ok = std::isalpha(static_cast<unsigned char>(text.front()));
    auto slash = text.find('/');
    auto name = text.substr(0, slash);
    for (char c : name) ok = ok && (std::isupper(static_cast<unsigned char>(c)) || std::isdigit(static_cast<unsigned char>(c)) || c == '.' || c == '_');
    if (slash != std::string_view::npos) {
        auto digits = text.substr(slash + 1);
        int value = 0;
        auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), value);
        ok = ok && !digits.empty() && ec == std::errc() && p == digits.data() + digits.size();
    }
    if (!ok) throw ParseError("unrecognized sketch token '" + std::string(text) + "'");
    return {Kind::Function, std::string(text)};
}

// ---------------------------------------------------------------------------
// Range tokens and streams

std::string row_token(int dr) { return "R[" + std::to_string(dr) + "]"; }
std::string col_token(int dc) { return "C[" + std::to_string(dc) + "]"; }

namespace {

std::optional<int> parse_bracket(std::string_view text, char prefix) {
    if (text.size() < 4 || text[0] != prefix || text[1] != '[' || text.back() != ']') return std::nullopt;
    auto body = text.substr(2, text.size() - 3);
    int value = 0;
    auto [p, ec] = std::from_chars(body.data(), body.data() + body.size(), value);
    if (ec != std::errc() || p != body.data() + body.size()) return std::nullopt;
    if (body.size() > 1 && body[0] == '0') return std::nullopt;
    if (body.size() > 1 && body[0] == '-' && (body[1] == '0')) return std::nullopt;
    return value;
}

}  // namespace

std::optional<int> parse_row_token(std::string_view text) { return parse_bracket(text, 'R'); }
std::optional<int> parse_col_token(std::string_view text) { return parse_bracket(text, 'C'); }

std::vector<std::string> range_group_tokens(const RelRange& r) {
    std::vector<std::string> out{std::string(kRangeBegin), row_token(r.start.dr), col_token(r.start.dc)};
    if (r.end) {
        out.emplace_back(kRangeSep);
        out.push_back(row_token(r.end->dr));
        out.push_back(col_token(r.end->dc));
    }
    out.emplace_back(kRangeEnd);
    return out;
}

std::vector<std::string> FormulaIR::tokens() const {
    std::vector<std::string> out;
    for (const auto& t : sketch) out.push_back(t.text);
    for (const auto& r : ranges) {
        auto group = range_group_tokens(r);
        out.insert(out.end(), group.begin(), group.end());
    }
    out.emplace_back(kEof);
    return out;
}

std::string FormulaIR::text() const {
    std::string out;
    for (const auto& t : tokens()) {
        if (!out.empty()) out += ' ';
        out += t;
    }
    return out;
}

std::vector<std::string> FormulaIR::sketch_texts() const {
    std::vector<std::string> out;
    for (const auto& t : sketch) out.push_back(t.text);
    return out;
}

void FormulaIR::validate() const {
    if (sketch.empty() || sketch.back().kind != SketchToken::Kind::EndSketch) {
        throw std::invalid_argument("sketch must end with $ENDSKETCH$");
    }
    size_t range_count = 0;
    int needed = 1;
    for (size_t i = 0; i + 1 < sketch.size(); ++i) {
        if (sketch[i].kind == SketchToken::Kind::EndSketch) {
            throw std::invalid_argument("$ENDSKETCH$ may only terminate the sketch");
        }
        if (needed <= 0) throw std::invalid_argument("sketch has tokens after a complete expression");
        if (sketch[i].kind == SketchToken::Kind::Range) ++range_count;
        needed += sketch[i].arity() - 1;
    }
    if (needed != 0) throw std::invalid_argument("sketch arity does not close to one expression");
    if (range_count != ranges.size()) {
        throw std::invalid_argument("RANGE count " + std::to_string(range_count) +
                                    " does not match " + std::to_string(ranges.size()) + " ranges");
    }
    for (const auto& r : ranges) {
        if (r.end && (r.end->dr < r.start.dr || r.end->dc < r.start.dc)) {
            throw std::invalid_argument("range end precedes its start");
        }
    }
}

std::vector<std::string> split_stream(std::string_view text) {
    std::vector<std::string> out;
    size_t i = 0;
    while (i < text.size()) {
        if (text[i] == ' ' || text[i] == '\t' || text[i] == '\n') {
            ++i;
            continue;
        }
        std::string tok;
        if (text[i] == '"') {
            tok.push_back('"');
            ++i;
            bool closed = false;
            while (i < text.size()) {
                if (text[i] == '"') {
                    if (i + 1 < text.size() && text[i + 1] == '"') {
                        tok += "\"\"";
                        i += 2;
                        continue;
                    }
                    tok.push_back('"');
                    ++i;
                    closed = true;
                    break;
                }
                tok.push_back(text[i++]);
            }
            if (!closed) throw ParseError("unterminated string token in stream");
        } else {
            while (i < text.size() && text[i] != ' ' && text[i] != '\t' && text[i] != '\n') tok.push_back(text[i++]);
        }
        out.push_back(std::move(tok));
    }
    return out;
}

FormulaIR ir_from_tokens(const std::vector<std::string>& tokens) {
    FormulaIR ir;
    size_t i = 0;
    for (; i < tokens.size(); ++i) {
        auto tok = SketchToken::from_text(tokens[i]);
        ir.sketch.push_back(tok);
        if (tok.kind == SketchToken::Kind::EndSketch) {
            ++i;
            break;
        }
    }
    if (ir.sketch.empty() || ir.sketch.back().kind != SketchToken::Kind::EndSketch) {
        throw ParseError("token stream has no $ENDSKETCH$");
    }
    auto expect_offset = [&](auto parser, const char* what) {
        if (i >= tokens.size()) throw ParseError(std::string("stream ends while expecting ") + what);
        auto v = parser(tokens[i]);
        if (!v) throw ParseError("expected " + std::string(what) + ", got '" + tokens[i] + "'");
        ++i;
        return *v;
    };
    while (i < tokens.size() && tokens[i] != kEof) {
        if (tokens[i] != kRangeBegin) throw ParseError("expected $R$, got '" + tokens[i] + "'");
        ++i;
        RelRange r;
        r.start.dr = expect_offset(parse_row_token, "R[k]");
        r.start.dc = expect_offset(parse_col_token, "C[k]");
        if (i < tokens.size() && tokens[i] == kRangeSep) {
            ++i;
            Offset e;
            e.dr = expect_offset(parse_row_token, "R[k]");
            e.dc = expect_offset(parse_col_token, "C[k]");
            r.end = e;
        }
        if (i >= tokens.size() || tokens[i] != kRangeEnd) throw ParseError("range group missing $ENDR$");
        ++i;
        ir.ranges.push_back(r);
    }
    if (i >= tokens.size()) throw ParseError("token stream missing EOF");
    if (i + 1 != tokens.size()) throw ParseError("tokens after EOF");
    try {
        ir.validate();
    } catch (const std::invalid_argument& e) {
        throw ParseError(e.what());
    }
    return ir;
}

FormulaIR ir_from_text(std::string_view text) { return ir_from_tokens(split_stream(text)); }

// ---------------------------------------------------------------------------
// Eligibility

std::string_view reason_name(FilterReason reason) {
    switch (reason) {
        case FilterReason::HyperlinkLiteralUrl: return "hyperlink_literal_url";
        case FilterReason::CrossSheetRef: return "cross_sheet_ref";
        case FilterReason::OutOfWindow: return "out_of_window";
        case FilterReason::AbsoluteRef: return "absolute_ref";
        case FilterReason::UnsupportedToken: return "unsupported_token";
    }
    return "unknown";
}

namespace {

template <typename Pred>
bool any_node(const FormulaAst& n, Pred&& pred) {
    if (pred(n)) return true;
    for (const auto& a : n.args) {
        if (any_node(a, pred)) return true;
    }
    return false;
}

bool is_ref(const FormulaAst& n) {
    return n.kind == FormulaAst::Kind::CellRef || n.kind == FormulaAst::Kind::RangeRef;
}

bool out_of_window(const CellAddr& a, CellAddr target, int radius) {
    return std::abs(a.row - target.row) > radius || std::abs(a.col - target.col) > radius;
}

}  // namespace

Classification classify_formula(const FormulaAst& ast, CellAddr target, int radius) {
    using K = FormulaAst::Kind;
    if (any_node(ast, [](const FormulaAst& n) {
            return n.kind == K::Call && n.text == "HYPERLINK" && !n.args.empty() &&
                   n.args[0].kind == K::StringLit;
        })) {
        return {FilterReason::HyperlinkLiteralUrl};
    }
    if (any_node(ast, [](const FormulaAst& n) { return n.kind == K::SheetRef; })) {
        return {FilterReason::CrossSheetRef};
    }
    if (any_node(ast, [&](const FormulaAst& n) {
            return is_ref(n) && (out_of_window(n.first, target, radius) || out_of_window(n.last, target, radius));
        })) {
        return {FilterReason::OutOfWindow};
    }
    if (any_node(ast, [](const FormulaAst& n) {
            return is_ref(n) && (n.first_row_abs || n.first_col_abs || n.last_row_abs || n.last_col_abs);
        })) {
        return {FilterReason::AbsoluteRef};
    }
    if (any_node(ast, [](const FormulaAst& n) { return n.kind == K::Call && !find_function(n.text); })) {
        return {FilterReason::UnsupportedToken};
    }
    return {};
}

// ---------------------------------------------------------------------------
// IR conversion

namespace {

void emit(const FormulaAst& n, CellAddr target, FormulaIR& ir) {
    using K = FormulaAst::Kind;
    switch (n.kind) {
        case K::Call:
            ir.sketch.push_back(SketchToken::function(n.text, static_cast<int>(n.args.size())));
            break;
        case K::BinaryOp: ir.sketch.push_back(SketchToken::op(n.text)); break;
        case K::UnaryOp: ir.sketch.push_back(SketchToken::op(n.text == "-" ? "UMINUS" : "UPLUS")); break;
        case K::NumberLit: ir.sketch.push_back(SketchToken::number(n.text)); break;
        case K::StringLit: ir.sketch.push_back(SketchToken::string(n.text)); break;
        case K::CellRef:
        case K::RangeRef: {
            ir.sketch.push_back(SketchToken::range());
            RelRange r;
            r.start = {n.first.row - target.row, n.first.col - target.col};
            if (n.kind == K::RangeRef) r.end = Offset{n.last.row - target.row, n.last.col - target.col};
            ir.ranges.push_back(r);
            return;
        }
        case K::SheetRef: throw ContractViolation("sheet-qualified reference reached to_ir");
    }
    for (const auto& a : n.args) emit(a, target, ir);
}

}  // namespace

FormulaIR to_ir(const FormulaAst& ast, CellAddr target, int radius) {
    auto c = classify_formula(ast, target, radius);
    if (!c.eligible()) {
        throw ContractViolation("to_ir called on a filtered formula (" +
                                std::string(reason_name(*c.reason)) + ")");
    }
    FormulaIR ir;
    emit(ast, target, ir);
    ir.sketch.push_back(SketchToken::end_sketch());
    return ir;
}

namespace {

std::string unquote(const std::string& text) {
    std::string out;
    for (size_t i = 1; i + 1 < text.size(); ++i) {
        out.push_back(text[i]);
        if (text[i] == '"' && i + 2 < text.size() && text[i + 1] == '"') ++i;
    }
    return out;
}

CellAddr resolve(Offset o, CellAddr target) {
    CellAddr a{target.row + o.dr, target.col + o.dc};
    if (a.row < 1 || a.col < 1) {
        throw std::out_of_range("offset R[" + std::to_string(o.dr) + "] C[" + std::to_string(o.dc) +
                                "] falls off the sheet from " + render_a1(target));
    }
    return a;
}

struct Rebuilder {
    const FormulaIR& ir;
    CellAddr target;
    size_t pos = 0;
    size_t next_range = 0;

    FormulaAst build() {
        if (pos >= ir.sketch.size() || ir.sketch[pos].kind == SketchToken::Kind::EndSketch) {
            throw std::invalid_argument("sketch ends before its expression is complete");
        }
        const auto& tok = ir.sketch[pos++];
        using TK = SketchToken::Kind;
        switch (tok.kind) {
            case TK::Number: return FormulaAst::number(tok.text);
            case TK::String: return FormulaAst::string(unquote(tok.text));
            case TK::Range: {
                if (next_range >= ir.ranges.size()) throw std::invalid_argument("more RANGE tokens than ranges");
                const auto& r = ir.ranges[next_range++];
                if (r.end) return FormulaAst::range(resolve(r.start, target), resolve(*r.end, target));
                return FormulaAst::cell(resolve(r.start, target));
            }
            case TK::Operator: {
                if (tok.text == "UMINUS" || tok.text == "UPLUS") {
                    return FormulaAst::unary(tok.text == "UMINUS" ? "-" : "+", build());
                }
                auto lhs = build();
                auto rhs = build();
                return FormulaAst::binary(tok.text, std::move(lhs), std::move(rhs));
            }
            case TK::Function: {
                int n = tok.arity();
                std::vector<FormulaAst> args;
                for (int i = 0; i < n; ++i) args.push_back(build());
                return FormulaAst::call(tok.text.substr(0, tok.text.find('/')), std::move(args));
            }
            case TK::EndSketch: break;
        }
        throw std::invalid_argument("unexpected sketch token");
    }
};

}  // namespace

FormulaAst ir_to_ast(const FormulaIR& ir, CellAddr target) {
    size_t range_tokens = std::count_if(ir.sketch.begin(), ir.sketch.end(), [](const SketchToken& t) {
        return t.kind == SketchToken::Kind::Range;
    });
    if (range_tokens != ir.ranges.size()) {
        throw std::invalid_argument("arity mismatch: " + std::to_string(range_tokens) + " RANGE tokens but " +
                                    std::to_string(ir.ranges.size()) + " ranges");
    }
    Rebuilder rb{ir, target};
    auto ast = rb.build();
    if (rb.pos + 1 != ir.sketch.size() || ir.sketch[rb.pos].kind != SketchToken::Kind::EndSketch) {
        throw std::invalid_argument("sketch has trailing tokens after a complete expression");
    }
    return ast;
}

std::string render_formula(const FormulaIR& ir, CellAddr target) { return render_ast(ir_to_ast(ir, target)); }

size_t sketch_length(const FormulaIR& ir) {
    return std::count_if(ir.sketch.begin(), ir.sketch.end(), [](const SketchToken& t) {
        return t.kind != SketchToken::Kind::EndSketch;
    });
}

}  // namespace sheetcoder
