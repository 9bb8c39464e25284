#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "sheetcoder/model.hpp"

namespace sheetcoder {

struct Suggestion {
    int rank = 0;
    double log_prob = 0.0;
    std::string formula;             // A1 text, "=..."
    std::string sketch;              // sketch tokens without $ENDSKETCH$
    std::vector<std::string> ranges; // A1 text of each range, in sketch order
    FormulaIR ir;

    nlohmann::json to_json() const;
};

struct PredictOutput {
    std::vector<Suggestion> suggestions;
    size_t dropped_off_sheet = 0;
    std::string diagnostic;
};

/// extract_window -> bundles -> beam search -> A1 rendering. Hypotheses whose
/// references fall off the sheet are dropped and counted.
PredictOutput predict(const Model& model, const Sheet& sheet, CellAddr target, int top_k, int beam);

}  // namespace sheetcoder
