#pragma once

#include <vector>

#include "sheetcoder/vocab.hpp"

namespace sheetcoder {

enum class DecodeStage { Sketch, Ranges };

/// Token-level automaton for the two-stage stream: a prefix-order sketch that
/// closes to one expression, $ENDSKETCH$, then one range group per RANGE of
/// the form $R$ R C ($SEP$ R C)? $ENDR$, then EOF.
class StreamGrammar {
public:
    struct State {
        DecodeStage stage = DecodeStage::Sketch;
        int open_slots = 1;      // sub-expressions still owed by the sketch
        int sketch_tokens = 0;   // excluding $ENDSKETCH$
        int range_slots = 0;     // RANGE tokens emitted in the sketch
        int pending = 0;         // range groups still to emit
        int phase = 0;           // position inside the current range group
        int start_row = 0;
        int start_col = 0;
        bool finished = false;

        bool operator==(const State&) const = default;
    };

    StreamGrammar(const Vocabulary& sketch, const Vocabulary& range, int radius, int max_sketch_tokens,
                  int max_ranges);

    bool allows_sketch(const State& s, int id) const;
    bool allows_range(const State& s, int id) const;
    State advance_sketch(State s, int id) const;
    State advance_range(State s, int id) const;

    /// Allowed ids for the current stage, in the stage's vocabulary.
    std::vector<uint8_t> allowed(const State& s) const;

    int end_sketch_id() const { return end_sketch_; }
    int eof_id() const { return eof_; }

private:
    enum class RangeKind { Begin, Sep, End, Eof, Row, Col, Other };

    std::vector<int> sketch_arity_;   // -1: never emitted (PAD, UNK, $ENDSKETCH$)
    std::vector<uint8_t> sketch_is_range_;
    std::vector<RangeKind> range_kind_;
    std::vector<int> range_offset_;
    int end_sketch_ = -1;
    int eof_ = -1;
    int radius_;
    int max_sketch_tokens_;
    int max_ranges_;
    bool has_plain_leaf_ = false;
};

}  // namespace sheetcoder
