#include "sheetcoder/cli.hpp"

#include <fstream>
#include <iomanip>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "sheetcoder/dataset.hpp"
#include "sheetcoder/metrics.hpp"
#include "sheetcoder/predict.hpp"
#include "sheetcoder/service.hpp"
#include "sheetcoder/train.hpp"

namespace sheetcoder {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct CliFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

json read_json_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw CliFailure("cannot read " + path.string());
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw CliFailure(path.string() + ": " + e.what());
    }
}

std::array<double, 3> parse_ratios(const std::string& text) {
    std::array<double, 3> r{};
    std::istringstream is(text);
    std::string part;
    size_t n = 0;
    while (std::getline(is, part, ',')) {
        if (n == 3) throw CliFailure("--split takes three comma-separated ratios");
        try {
            r[n++] = std::stod(part);
        } catch (const std::exception&) {
            throw CliFailure("bad ratio '" + part + "' in --split");
        }
    }
    if (n != 3) throw CliFailure("--split takes three comma-separated ratios");
    return r;
}

/// Prepares records for a model, skipping those whose gold stream uses tokens
/// the model cannot emit.
std::vector<PreparedExample> prepare_all(const Model& model, const std::vector<ExampleRecord>& records,
                                         size_t* skipped) {
    std::vector<PreparedExample> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        try {
            out.push_back(prepare_example(model, r.window, r.gold));
        } catch (const DataError&) {
            ++*skipped;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------

struct PreprocessArgs {
    PreprocessOptions opts;
    std::string split = "0.8,0.1,0.1";
};

int run_preprocess_cmd(PreprocessArgs& a, std::ostream& out) {
    a.opts.ratios = parse_ratios(a.split);
    auto stats = run_preprocess(a.opts);
    const auto& splits = stats.at("splits");
    for (const char* name : {"train", "valid", "test"}) {
        out << name << ": " << splits.at(name).at("records") << " examples from " << splits.at(name).at("files")
            << " files\n";
    }
    out << "vocabulary sizes: input " << stats["vocab_sizes"]["input"] << ", sketch " << stats["vocab_sizes"]["sketch"]
        << ", range " << stats["vocab_sizes"]["range"] << "\n";
    out << "wrote " << (a.opts.out / "stats.json").string() << "\n";
    return 0;
}

struct TrainArgs {
    fs::path data;
    fs::path out;
    fs::path config_file;
    fs::path resume;
    TrainOptions opts;
    ModelConfig model;
    bool no_context = false;
    bool single_stage = false;
    bool rows_only = false;
    bool cols_only = false;
    bool shared_encoder = false;
};

int run_train_cmd(TrainArgs& a, CLI::App& cmd, std::ostream& out, std::ostream& err) {
    auto stats = read_json_file(a.data / "stats.json");
    auto vocabs = load_vocabs(a.data);
    auto train_records = read_records(a.data / "train.jsonl");
    auto valid_records = read_records(a.data / "valid.jsonl");
    if (train_records.empty()) throw CliFailure("no examples in " + (a.data / "train.jsonl").string());

    std::optional<Model> model;
    if (!a.resume.empty()) {
        model.emplace(Model::load(a.resume));
        if (!(model->vocabs() == vocabs)) throw CliFailure("checkpoint vocabularies differ from " + a.data.string());
        out << "resuming from " << a.resume.string() << " at step " << model->params().step() << "\n";
    } else {
        ModelConfig cfg = a.model;
        if (!a.config_file.empty()) {
            cfg = ModelConfig::from_json(read_json_file(a.config_file));
            // explicit flags win over the file
            json flags = a.model.to_json();
            json merged = cfg.to_json();
            for (const auto* opt : cmd.get_options()) {
                if (opt->count() == 0) continue;
                auto key = opt->get_lnames().empty() ? std::string() : opt->get_lnames().front();
                std::replace(key.begin(), key.end(), '-', '_');
                if (flags.contains(key)) merged[key] = flags[key];
            }
            cfg = ModelConfig::from_json(merged);
        }
        cfg.radius = stats.at("radius").get<int>();
        cfg.seed = a.opts.seed;
        if (a.no_context) cfg.use_context = false;
        if (a.single_stage) cfg.two_stage = false;
        if (a.rows_only && a.cols_only) throw CliFailure("--rows-only and --cols-only are exclusive");
        if (a.rows_only) cfg.use_cols = false;
        if (a.cols_only) cfg.use_rows = false;
        if (a.shared_encoder) cfg.shared_encoder = true;
        model.emplace(cfg, vocabs);
    }

    size_t skipped_train = 0, skipped_valid = 0;
    auto train = prepare_all(*model, train_records, &skipped_train);
    auto valid = prepare_all(*model, valid_records, &skipped_valid);
    if (train.empty()) throw CliFailure("no examples usable for training");
    if (valid.empty()) valid = std::vector<PreparedExample>(train.begin(), train.begin() + std::min<size_t>(train.size(), 1));
    out << "train " << train.size() << " examples (" << skipped_train << " skipped), valid " << valid.size() << " ("
        << skipped_valid << " skipped), " << model->params().total_size() << " parameters\n";

    a.opts.out_dir = a.out;
    fs::create_directories(a.out);
    {
        std::ofstream cfg_out(a.out / "config.json");
        cfg_out << json{{"model", model->config().to_json()},
                        {"train",
                         {{"steps", a.opts.steps},
                          {"batch_size", a.opts.batch_size},
                          {"learning_rate", a.opts.learning_rate},
                          {"clip_norm", a.opts.clip_norm},
                          {"eval_every", a.opts.eval_every},
                          {"valid_limit", a.opts.valid_limit},
                          {"seed", a.opts.seed}}}}
                       .dump(2)
                << "\n";
    }
    auto result = train_model(*model, train, valid, a.opts, [&](const MetricRecord& r) {
        out << "step " << r.step << std::fixed << std::setprecision(4) << "  train_loss " << r.train_loss
            << "  valid_loss " << r.valid_loss << "  valid_top1 " << r.valid_top1 << std::defaultfloat << "\n";
    });
    if (result.diverged) {
        err << "training diverged after step " << result.final_step << "; kept the last good checkpoint\n";
        return 1;
    }
    out << "best valid loss " << result.best_valid_loss << " at step " << result.best_step << "; checkpoints in "
        << a.out.string() << "\n";
    return 0;
}

struct EvalArgs {
    fs::path data;
    fs::path checkpoint;
    std::string split = "test";
    int beam = 0;
    std::vector<int> ks{1, 5, 10};
    int visible_rows = 0;
    bool no_header = false;
    fs::path report;
    size_t limit = 0;
};

int run_eval_cmd(EvalArgs& a, std::ostream& out) {
    auto records = read_records(a.data / (a.split + ".jsonl"));
    if (a.limit > 0 && records.size() > a.limit) records.resize(a.limit);
    auto model = Model::load(a.checkpoint);
    int beam = a.beam > 0 ? a.beam : model.config().beam;
    if (a.visible_rows < 0) throw CliFailure("--visible-rows must be non-negative");

    std::vector<std::vector<FormulaIR>> ranked;
    std::vector<FormulaIR> gold;
    size_t unencodable = 0;
    for (auto& r : records) {
        try {
            (void)model.gold_ids(r.gold);
        } catch (const DataError&) {
            ++unencodable;
            continue;
        }
        auto window = r.window;
        if (a.visible_rows > 0) window = apply_row_mask(std::move(window), rows_upward(a.visible_rows));
        if (a.no_header) window = without_header(std::move(window));
        auto decoded = model.beam_decode(model.bundles_for(window), beam);
        std::vector<FormulaIR> irs;
        for (auto& p : decoded.predictions) irs.push_back(std::move(p.ir));
        ranked.push_back(std::move(irs));
        gold.push_back(r.gold);
    }
    if (gold.empty()) throw CliFailure("no examples to evaluate in split '" + a.split + "'");
    auto report = evaluate_rankings(ranked, gold, a.ks);
    report.extra = {{"split", a.split},
                    {"checkpoint", a.checkpoint.string()},
                    {"beam", beam},
                    {"records", records.size()},
                    {"unencodable_gold", unencodable},
                    {"visible_rows", a.visible_rows},
                    {"no_header", a.no_header}};
    out << report.to_table();
    if (unencodable) out << "skipped " << unencodable << " examples with tokens outside the model vocabulary\n";
    if (!a.report.empty()) {
        std::ofstream rep(a.report);
        if (!rep) throw CliFailure("cannot write " + a.report.string());
        rep << report.to_json().dump(2) << "\n";
    }
    return 0;
}

struct PredictArgs {
    fs::path grid;
    fs::path checkpoint;
    std::string sheet;
    std::string target;
    int top_k = 5;
    int beam = 0;
};

int run_predict_cmd(PredictArgs& a, std::ostream& out, std::ostream& err) {
    auto sheets = load_grid_file(a.grid);
    if (sheets.empty()) throw CliFailure(a.grid.string() + " has no sheets");
    const Sheet* sheet = &sheets.front();
    if (!a.sheet.empty()) {
        sheet = nullptr;
        for (const auto& s : sheets) {
            if (s.name() == a.sheet) sheet = &s;
        }
        if (!sheet) throw CliFailure("no sheet named '" + a.sheet + "' in " + a.grid.string());
    }
    CellAddr target;
    try {
        target = parse_cell_addr(a.target);
    } catch (const std::exception&) {
        throw CliFailure("malformed target '" + a.target + "'");
    }
    auto model = Model::load(a.checkpoint);
    int beam = a.beam > 0 ? a.beam : std::max(model.config().beam, a.top_k);
    auto result = predict(model, *sheet, target, a.top_k, beam);
    for (const auto& s : result.suggestions) {
        out << s.rank << '\t' << std::fixed << std::setprecision(6) << s.log_prob << std::defaultfloat << '\t'
            << s.formula << '\n';
    }
    if (result.dropped_off_sheet) err << "dropped " << result.dropped_off_sheet << " off-sheet hypotheses\n";
    if (result.suggestions.empty()) err << "no suggestions\n";
    return 0;
}

}  // namespace

int cli_main(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Formula prediction from spreadsheet context", args.empty() ? "sheetcoder" : args.front()};
    app.require_subcommand(1);
    app.set_help_all_flag("--help-all", "Show help for every subcommand");

    PreprocessArgs pre;
    auto* pre_cmd = app.add_subcommand("preprocess", "Mine a corpus of .grid.json files into train/valid/test splits");
    pre_cmd->add_option("--corpus", pre.opts.corpus, "Directory scanned recursively for *.grid.json")->required();
    pre_cmd->add_option("--out", pre.opts.out, "Output directory")->required();
    pre_cmd->add_option("--radius", pre.opts.radius, "Context radius D")->capture_default_str()->check(CLI::Range(1, 64));
    pre_cmd->add_option("--min-count", pre.opts.min_count, "Minimum training count for a vocabulary entry")
        ->capture_default_str()
        ->check(CLI::NonNegativeNumber);
    pre_cmd->add_option("--split", pre.split, "Train,valid,test ratios by file")->capture_default_str();
    pre_cmd->add_option("--seed", pre.opts.seed, "Split seed")->capture_default_str();

    TrainArgs tr;
    auto* tr_cmd = app.add_subcommand("train", "Train a model on a preprocessed dataset");
    tr_cmd->add_option("--data", tr.data, "Directory written by preprocess")->required()->check(CLI::ExistingDirectory);
    tr_cmd->add_option("--out", tr.out, "Directory for checkpoints and metrics.jsonl")->required();
    tr_cmd->add_option("--config", tr.config_file, "Model configuration JSON")->check(CLI::ExistingFile);
    tr_cmd->add_option("--resume", tr.resume, "Continue from a last.ckpt")->check(CLI::ExistingFile);
    tr_cmd->add_option("--steps", tr.opts.steps, "Total optimizer steps")->capture_default_str()->check(CLI::PositiveNumber);
    tr_cmd->add_option("--batch-size", tr.opts.batch_size, "Examples per step")->capture_default_str()->check(CLI::PositiveNumber);
    tr_cmd->add_option("--lr", tr.opts.learning_rate, "Adam learning rate")->capture_default_str();
    tr_cmd->add_option("--clip-norm", tr.opts.clip_norm, "Global gradient-norm clip")->capture_default_str();
    tr_cmd->add_option("--eval-every", tr.opts.eval_every, "Steps between validations")->capture_default_str()->check(CLI::PositiveNumber);
    tr_cmd->add_option("--valid-limit", tr.opts.valid_limit, "Validation examples per evaluation")->capture_default_str();
    tr_cmd->add_option("--seed", tr.opts.seed, "Seed for initialisation, batching and dropout")->capture_default_str();
    tr_cmd->add_flag("!--verbose", tr.opts.quiet, "Log every step");
    tr_cmd->add_option("--layers", tr.model.layers, "Encoder layers")->capture_default_str();
    tr_cmd->add_option("--heads", tr.model.heads, "Attention heads")->capture_default_str();
    tr_cmd->add_option("--hidden", tr.model.hidden, "Encoder width")->capture_default_str();
    tr_cmd->add_option("--seq-len", tr.model.seq_len, "Tokens per encoded row or column")->capture_default_str();
    tr_cmd->add_option("--rows-per-bundle", tr.model.rows_per_bundle, "Rows or columns per bundle")->capture_default_str();
    tr_cmd->add_option("--decoder-hidden", tr.model.decoder_hidden, "LSTM width")->capture_default_str();
    tr_cmd->add_option("--dropout", tr.model.dropout, "Dropout rate")->capture_default_str();
    tr_cmd->add_option("--beam", tr.model.beam, "Default beam size stored in the checkpoint")->capture_default_str();
    tr_cmd->add_flag("--no-context", tr.no_context, "Decoder only, without encoder input");
    tr_cmd->add_flag("--single-stage", tr.single_stage, "One joint output head instead of sketch/range heads");
    tr_cmd->add_flag("--rows-only", tr.rows_only, "Encode rows only");
    tr_cmd->add_flag("--cols-only", tr.cols_only, "Encode columns only");
    tr_cmd->add_flag("--shared-encoder", tr.shared_encoder, "Share one encoder between rows and columns");

    EvalArgs ev;
    auto* ev_cmd = app.add_subcommand("eval", "Score a checkpoint on a split");
    ev_cmd->add_option("--data", ev.data, "Directory written by preprocess")->required()->check(CLI::ExistingDirectory);
    ev_cmd->add_option("--checkpoint", ev.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    ev_cmd->add_option("--split", ev.split, "train, valid or test")->capture_default_str()->check(CLI::IsMember({"train", "valid", "test"}));
    ev_cmd->add_option("--beam", ev.beam, "Beam size (default: checkpoint setting)")->check(CLI::NonNegativeNumber);
    ev_cmd->add_option("--k", ev.ks, "Top-k cutoffs")->delimiter(',')->capture_default_str();
    ev_cmd->add_option("--visible-rows", ev.visible_rows, "Keep only the target row and the rows above it (0: all)");
    ev_cmd->add_flag("--no-header", ev.no_header, "Blank the header row before encoding");
    ev_cmd->add_option("--report", ev.report, "Write the report as JSON");
    ev_cmd->add_option("--limit", ev.limit, "Evaluate at most this many examples (0: all)");

    PredictArgs pr;
    auto* pr_cmd = app.add_subcommand("predict", "Rank formulas for one target cell");
    pr_cmd->add_option("--grid", pr.grid, "A .grid.json document")->required()->check(CLI::ExistingFile);
    pr_cmd->add_option("--checkpoint", pr.checkpoint, "Model checkpoint")->required()->check(CLI::ExistingFile);
    pr_cmd->add_option("--sheet", pr.sheet, "Sheet name (default: first sheet)");
    pr_cmd->add_option("--target", pr.target, "Target cell in A1 notation")->required();
    pr_cmd->add_option("--top-k", pr.top_k, "Number of formulas to print")->capture_default_str()->check(CLI::PositiveNumber);
    pr_cmd->add_option("--beam", pr.beam, "Beam size (default: checkpoint setting)")->check(CLI::NonNegativeNumber);

    ServiceConfig sv;
    std::string bind;
    auto* sv_cmd = app.add_subcommand("serve", "Serve predictions over HTTP");
    sv_cmd->add_option("--checkpoint", sv.checkpoint, "Model checkpoint (env SHEETCODER_CHECKPOINT)");
    sv_cmd->add_option("--bind", bind, "host:port (env SHEETCODER_BIND)")->default_str("127.0.0.1:8080");
    sv_cmd->add_option("--beam", sv.beam, "Beam size")->capture_default_str()->check(CLI::PositiveNumber);
    sv_cmd->add_option("--top-k", sv.top_k, "Default suggestions per request")->capture_default_str()->check(CLI::PositiveNumber);
    sv_cmd->add_option("--max-body", sv.max_body_bytes, "Request size limit in bytes")->capture_default_str();
    sv_cmd->add_option("--max-in-flight", sv.max_in_flight, "Concurrent requests before 503")->capture_default_str();
    sv_cmd->add_option("--threads", sv.threads, "Worker threads")->capture_default_str();

    std::vector<const char*> argv;
    std::vector<std::string> storage = args.empty() ? std::vector<std::string>{"sheetcoder"} : args;
    for (const auto& a : storage) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        CLI::App* scope = &app;
        if (!app.get_subcommands().empty()) scope = app.get_subcommands().back();
        // Unknown arguments are more useful to report than a missing required option.
        auto extras = scope->remaining();
        if (!extras.empty()) {
            err << "error: unrecognised arguments:";
            for (const auto& x : extras) err << ' ' << x;
            err << "\n\n" << scope->help();
            return 2;
        }
        err << "error: " << e.what() << "\n\n" << scope->help();
        return 2;
    }

    try {
        if (*pre_cmd) return run_preprocess_cmd(pre, out);
        if (*tr_cmd) return run_train_cmd(tr, *tr_cmd, out, err);
        if (*ev_cmd) return run_eval_cmd(ev, out);
        if (*pr_cmd) return run_predict_cmd(pr, out, err);
        if (*sv_cmd) {
            if (!bind.empty()) std::tie(sv.host, sv.port) = parse_bind_address(bind);
            return run_server(sv, out);
        }
    } catch (const std::exception& e) {
        err << "error: " << e.what() << "\n";
        return 1;
    }
    return 2;
}

}  // namespace sheetcoder
