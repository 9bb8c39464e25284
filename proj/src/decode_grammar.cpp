#include "sheetcoder/decode_grammar.hpp"

#include <stdexcept>

#include "sheetcoder/context.hpp"
#include "sheetcoder/formula.hpp"

namespace sheetcoder {

StreamGrammar::StreamGrammar(const Vocabulary& sketch, const Vocabulary& range, int radius, int max_sketch_tokens,
                             int max_ranges)
    : radius_(radius), max_sketch_tokens_(max_sketch_tokens), max_ranges_(max_ranges) {
    for (const auto& tok : sketch.tokens()) {
        int arity = -1;
        bool is_range = false;
        if (tok == kRangeToken) {
            arity = 0;
            is_range = true;
        } else if (tok == kEndSketch) {
            end_sketch_ = static_cast<int>(sketch_arity_.size());
        } else if (tok != kPadToken && tok != kUnkToken) {
            try {
                arity = SketchToken::from_text(tok).arity();
            } catch (const std::exception&) {
                arity = -1;
            }
        }
        if (arity == 0 && !is_range) has_plain_leaf_ = true;
        sketch_arity_.push_back(arity);
        sketch_is_range_.push_back(is_range);
    }
    if (end_sketch_ < 0) throw std::invalid_argument("sketch vocabulary lacks $ENDSKETCH$");
    for (const auto& tok : range.tokens()) {
        RangeKind kind = RangeKind::Other;
        int offset = 0;
        if (tok == kRangeBegin) kind = RangeKind::Begin;
        else if (tok == kRangeSep) kind = RangeKind::Sep;
        else if (tok == kRangeEnd) kind = RangeKind::End;
        else if (tok == kEof) kind = RangeKind::Eof;
        else if (auto r = parse_row_token(tok); r && std::abs(*r) <= radius) kind = RangeKind::Row, offset = *r;
        else if (auto c = parse_col_token(tok); c && std::abs(*c) <= radius) kind = RangeKind::Col, offset = *c;
        if (kind == RangeKind::Eof) eof_ = static_cast<int>(range_kind_.size());
        range_kind_.push_back(kind);
        range_offset_.push_back(offset);
    }
    if (eof_ < 0) throw std::invalid_argument("range vocabulary lacks EOF");
}

bool StreamGrammar::allows_sketch(const State& s, int id) const {
    if (s.stage != DecodeStage::Sketch || id < 0 || static_cast<size_t>(id) >= sketch_arity_.size()) return false;
    if (id == end_sketch_) return s.open_slots == 0;
    int arity = sketch_arity_[static_cast<size_t>(id)];
    if (arity < 0 || s.open_slots == 0) return false;
    int ranges = s.range_slots + sketch_is_range_[static_cast<size_t>(id)];
    if (ranges > max_ranges_) return false;
    int owed = s.open_slots - 1 + arity;
    if (s.sketch_tokens + 1 + owed > max_sketch_tokens_) return false;
    if (!has_plain_leaf_ && ranges + owed > max_ranges_) return false;
    return true;
}

StreamGrammar::State StreamGrammar::advance_sketch(State s, int id) const {
    if (id == end_sketch_) {
        s.stage = DecodeStage::Ranges;
        s.pending = s.range_slots;
        s.phase = 0;
        return s;
    }
    s.open_slots += sketch_arity_[static_cast<size_t>(id)] - 1;
    s.sketch_tokens += 1;
    s.range_slots += sketch_is_range_[static_cast<size_t>(id)];
    return s;
}

// phases: 0 between groups, 1 after $R$, 2 after start row, 3 after start
// col, 4 after $SEP$, 5 after end row, 6 after end col
bool StreamGrammar::allows_range(const State& s, int id) const {
    if (s.stage != DecodeStage::Ranges || s.finished || id < 0 || static_cast<size_t>(id) >= range_kind_.size()) {
        return false;
    }
    RangeKind k = range_kind_[static_cast<size_t>(id)];
    int off = range_offset_[static_cast<size_t>(id)];
    switch (s.phase) {
        case 0: return (k == RangeKind::Begin && s.pending > 0) || (k == RangeKind::Eof && s.pending == 0);
        case 1: return k == RangeKind::Row;
        case 2: return k == RangeKind::Col;
        case 3: return k == RangeKind::Sep || k == RangeKind::End;
        case 4: return k == RangeKind::Row && off >= s.start_row;
        case 5: return k == RangeKind::Col && off >= s.start_col;
        case 6: return k == RangeKind::End;
        default: return false;
    }
}

StreamGrammar::State StreamGrammar::advance_range(State s, int id) const {
    RangeKind k = range_kind_[static_cast<size_t>(id)];
    int off = range_offset_[static_cast<size_t>(id)];
    switch (k) {
        case RangeKind::Begin: s.phase = 1; break;
        case RangeKind::Row:
            if (s.phase == 1) s.start_row = off;
            s.phase = s.phase == 1 ? 2 : 5;
            break;
        case RangeKind::Col:
            if (s.phase == 2) s.start_col = off;
            s.phase = s.phase == 2 ? 3 : 6;
            break;
        case RangeKind::Sep: s.phase = 4; break;
        case RangeKind::End:
            s.phase = 0;
            s.pending -= 1;
            break;
        case RangeKind::Eof: s.finished = true; break;
        case RangeKind::Other: break;
    }
    return s;
}

std::vector<uint8_t> StreamGrammar::allowed(const State& s) const {
    std::vector<uint8_t> out;
    if (s.stage == DecodeStage::Sketch) {
        out.resize(sketch_arity_.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = allows_sketch(s, static_cast<int>(i));
    } else {
        out.resize(range_kind_.size());
        for (size_t i = 0; i < out.size(); ++i) out[i] = allows_range(s, static_cast<int>(i));
    }
    return out;
}

}  // namespace sheetcoder
