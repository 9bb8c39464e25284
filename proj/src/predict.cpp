#include "sheetcoder/predict.hpp"

namespace sheetcoder {

nlohmann::json Suggestion::to_json() const {
    return {{"rank", rank}, {"formula", formula}, {"log_prob", log_prob}, {"sketch", sketch}, {"ranges", ranges},
            {"stream", ir.text()}};
}

namespace {

std::string range_a1(const RelRange& r, CellAddr target) {
    auto at = [&](Offset o) { return render_a1(CellAddr{target.row + o.dr, target.col + o.dc}); };
    if (!r.end) return at(r.start);
    return at(r.start) + ":" + at(*r.end);
}

}  // namespace

PredictOutput predict(const Model& model, const Sheet& sheet, CellAddr target, int top_k, int beam) {
    if (!sheet.contains(target)) {
        throw std::invalid_argument("target " + render_a1(target) + " is outside the sheet bounds");
    }
    if (beam < 1) throw std::invalid_argument("beam must be at least 1");
    if (top_k < 1 || top_k > beam) {
        throw std::invalid_argument("top_k must lie in [1, beam=" + std::to_string(beam) + "], got " +
                                    std::to_string(top_k));
    }
    auto window = extract_window(sheet, target, model.config().radius);
    auto decoded = model.beam_decode(model.bundles_for(window), beam);
    PredictOutput out;
    out.diagnostic = decoded.diagnostic;
    for (auto& p : decoded.predictions) {
        std::string text;
        try {
            text = render_formula(p.ir, target);
        } catch (const std::out_of_range&) {
            ++out.dropped_off_sheet;
            continue;
        }
        if (out.suggestions.size() == static_cast<size_t>(top_k)) continue;
        Suggestion s;
        s.rank = static_cast<int>(out.suggestions.size()) + 1;
        s.log_prob = p.log_prob;
        s.formula = std::move(text);
        for (size_t i = 0; i + 1 < p.ir.sketch.size(); ++i) s.sketch += (i ? " " : "") + p.ir.sketch[i].text;
        for (const auto& r : p.ir.ranges) s.ranges.push_back(range_a1(r, target));
        s.ir = std::move(p.ir);
        out.suggestions.push_back(std::move(s));
    }
    return out;
}

}  // namespace sheetcoder
