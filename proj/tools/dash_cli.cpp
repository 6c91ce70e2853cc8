// Experiment driver for the halting prefill engine.
//
// Subcommands:
//   gen-weights   write a seeded DASHW1 weight file
//   prefill       vanilla + halting prefill (and optional greedy decode)
//   flops-table   theoretical prefill cost sweep
//   ablate        direction / signal / schedule ablations over a prompt set
//   correlate     delta-signal vs full-attention ranking fidelity
//
// Every run writes manifest.json plus a report.csv (report.json with --json)
// into --out-dir (default $DASH_OUT_DIR, else the working directory).
// Config files are flat `key = value` lines; command-line flags win.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "dash/analysis.hpp"
#include "dash/flops.hpp"
#include "dash/policy.hpp"
#include "dash/weights_io.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace dash;

namespace {

// ---------------------------------------------------------------------------
// shared plumbing
// ---------------------------------------------------------------------------

struct CommonOpts {
    std::string config_path;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool emit_json = false;
    bool emit_csv = true;
};

void add_common(CLI::App* cmd, CommonOpts& c) {
    cmd->set_config("--config", "", "flat key = value config file; flags override it");
    c.config_path.clear();
    cmd->add_option("--out-dir", c.out_dir, "report directory (default $DASH_OUT_DIR or .)");
    cmd->add_option("--seed", c.seed, "seed for anything randomized");
    cmd->add_flag("--json", c.emit_json, "also write report.json");
    cmd->add_flag("--csv", c.emit_csv, "write report.csv (default)");
}

fs::path resolve_out_dir(const CommonOpts& c) {
    std::string dir = c.out_dir;
    if (dir.empty()) {
        if (const char* env = std::getenv("DASH_OUT_DIR")) dir = env;
        if (dir.empty()) dir = ".";
    }
    fs::path p(dir);
    fs::create_directories(p);
    return p;
}

std::string hex64(std::uint64_t v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

// content hash of the effective settings, stable across runs
std::string config_hash(const std::map<std::string, std::string>& effective) {
    std::string canon;
    for (const auto& [k, v] : effective) canon += k + "=" + v + "\n";
    return hex64(fnv1a64(canon.data(), canon.size()));
}

struct Timings {
    double prefill_ms = 0.0;
    double decode_ms = 0.0;
};

class PhaseTimer {
  public:
    explicit PhaseTimer(double& slot) : slot_(slot), t0_(std::chrono::steady_clock::now()) {}
    ~PhaseTimer() {
        slot_ += std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0_)
                     .count();
    }

  private:
    double& slot_;
    std::chrono::steady_clock::time_point t0_;
};

void write_manifest(const fs::path& out_dir, const std::string& command, const CommonOpts& c,
                    const Timings& timing, const std::map<std::string, std::string>& effective) {
    json m;
    m["command"] = command;
    m["config_path"] = c.config_path;
    m["seed"] = c.seed;
    m["output_dir"] = out_dir.string();
    m["timing_ms"] = {{"prefill", timing.prefill_ms}, {"decode", timing.decode_ms}};
    m["config_hash"] = config_hash(effective);
    std::ofstream os(out_dir / "manifest.json");
    if (!os) throw IoError("cannot write manifest in " + out_dir.string());
    os << m.dump(2) << "\n";
}

void write_text_file(const fs::path& path, const std::string& text) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path.string());
    os << text;
}

std::vector<TokenId> parse_token_ids(std::istream& is, const std::string& what) {
    std::vector<TokenId> out;
    long long v = 0;
    while (is >> v) {
        if (v < 0) throw InputError(what + ": negative token id");
        out.push_back(static_cast<TokenId>(v));
    }
    if (!is.eof() && is.fail()) throw InputError(what + ": non-integer token id");
    return out;
}

// one prompt per non-empty, non-comment line
std::vector<std::vector<TokenId>> parse_prompts_file(const std::string& path) {
    std::unique_ptr<std::ifstream> owned;
    std::istream* in = &std::cin;
    if (path != "-") {
        owned = std::make_unique<std::ifstream>(path);
        if (!*owned) throw IoError("cannot open prompts file: " + path);
        in = owned.get();
    }
    std::vector<std::vector<TokenId>> prompts;
    std::string line;
    while (std::getline(*in, line)) {
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') continue;
        std::istringstream ls(line);
        auto ids = parse_token_ids(ls, path);
        if (!ids.empty()) prompts.push_back(std::move(ids));
    }
    if (prompts.empty()) throw InputError("no prompts found in " + path);
    return prompts;
}

template <typename T>
std::string join(const std::vector<T>& v, const char* sep = ";") {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) {
        if (i) out += sep;
        out += std::to_string(v[i]);
    }
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

// ---------------------------------------------------------------------------
// halting flags shared by prefill and ablate
// ---------------------------------------------------------------------------

struct HaltingFlags {
    double ratio = 0.0;
    std::size_t start_layer = 0;
    std::string signal = "delta-attn";
    std::string direction = "keep-high";
    std::string mode = "pure-topk";
    std::size_t shots = 1;
    std::size_t keep_first = 0;
    std::size_t keep_last = 0;
};

void add_halting(CLI::App* cmd, HaltingFlags& h) {
    cmd->add_option("--rho,--c", h.ratio, "pruning ratio (pure-topk) / drop fraction (protected)")
        ->check(CLI::Range(0.0, 0.999999));
    cmd->add_option("--start-layer", h.start_layer, "decision block index");
    cmd->add_option("--signal", h.signal, "delta-attn | delta-block")
        ->check(CLI::IsMember({"delta-attn", "delta-block"}));
    cmd->add_option("--direction", h.direction, "keep-high | keep-low | random")
        ->check(CLI::IsMember({"keep-high", "keep-low", "random"}));
    cmd->add_option("--mode", h.mode, "pure-topk | protected")
        ->check(CLI::IsMember({"pure-topk", "protected"}));
    cmd->add_option("--shots", h.shots, "selection events (1 = single shot)");
    cmd->add_option("--keep-first", h.keep_first, "protected prefix length");
    cmd->add_option("--keep-last", h.keep_last, "protected suffix length");
}

HaltingConfig to_halting_config(const HaltingFlags& h, std::uint64_t seed) {
    HaltingConfig cfg;
    cfg.start_layer = h.start_layer;
    cfg.pruning_ratio = h.ratio;
    cfg.signal = h.signal == "delta-block" ? DeltaSignal::delta_block : DeltaSignal::delta_attn;
    cfg.direction = h.direction == "keep-low"    ? Direction::keep_low
                    : h.direction == "random"    ? Direction::random_uniform
                                                 : Direction::keep_high;
    cfg.mode =
        h.mode == "protected" ? SelectionMode::protected_ends : SelectionMode::pure_topk;
    cfg.shots = h.shots;
    cfg.keep_first_n = h.keep_first;
    cfg.keep_last_n = h.keep_last;
    cfg.rng_seed = seed;
    return cfg;
}

std::map<std::string, std::string> halting_settings(const HaltingFlags& h) {
    return {{"rho", fmt_double(h.ratio)},
            {"start_layer", std::to_string(h.start_layer)},
            {"signal", h.signal},
            {"direction", h.direction},
            {"mode", h.mode},
            {"shots", std::to_string(h.shots)},
            {"keep_first", std::to_string(h.keep_first)},
            {"keep_last", std::to_string(h.keep_last)}};
}

// realized prefill cost: sum of the per-layer proxy over the actual lengths
uint128 realized_flops(const std::vector<std::size_t>& lengths, const ModelConfig& cfg) {
    uint128 total = 0;
    for (std::size_t len : lengths)
        total = checked_add(total, per_layer_flops(len, cfg.hidden_dim, cfg.ffn_dim));
    return total;
}

// ---------------------------------------------------------------------------
// gen-weights
// ---------------------------------------------------------------------------

struct GenWeightsOpts {
    CommonOpts common;
    std::uint32_t num_layers = 6, hidden_dim = 32, num_heads = 4, ffn_dim = 64;
    std::uint32_t vocab_size = 97, max_seq_len = 512;
    float norm_eps = 1e-5f, rope_base = 10000.0f;
    std::string out_path;
};

void add_model_dims(CLI::App* cmd, GenWeightsOpts& o) {
    cmd->add_option("--num-layers", o.num_layers, "transformer blocks");
    cmd->add_option("--hidden-dim", o.hidden_dim, "model width d");
    cmd->add_option("--num-heads", o.num_heads, "attention heads");
    cmd->add_option("--ffn-dim", o.ffn_dim, "FFN intermediate width m");
    cmd->add_option("--vocab-size", o.vocab_size, "vocabulary size");
    cmd->add_option("--max-seq-len", o.max_seq_len, "maximum sequence length");
    cmd->add_option("--norm-eps", o.norm_eps, "rms normalization epsilon");
    cmd->add_option("--rope-base", o.rope_base, "rotary embedding base");
}

ModelConfig to_model_config(const GenWeightsOpts& o) {
    if (o.num_heads == 0 || o.hidden_dim % o.num_heads != 0)
        throw UsageError("hidden-dim must be divisible by num-heads");
    ModelConfig cfg{o.num_layers,       o.hidden_dim, o.num_heads, o.hidden_dim / o.num_heads,
                    o.ffn_dim,          o.vocab_size, o.max_seq_len,
                    o.norm_eps,         o.rope_base};
    cfg.validate();
    return cfg;
}

int run_gen_weights(const GenWeightsOpts& o) {
    const ModelConfig cfg = to_model_config(o);
    const ModelWeights weights = init_weights(cfg, o.common.seed);
    save_weights(o.out_path, cfg, weights);

    std::ifstream is(o.out_path, std::ios::binary);
    const std::string bytes((std::istreambuf_iterator<char>(is)),
                            std::istreambuf_iterator<char>());
    const std::string checksum = hex64(fnv1a64(bytes.data(), bytes.size()));
    std::printf("wrote %s (%zu bytes), checksum %s\n", o.out_path.c_str(), bytes.size(),
                checksum.c_str());

    const fs::path out_dir = resolve_out_dir(o.common);
    std::map<std::string, std::string> eff = {
        {"out", o.out_path},
        {"seed", std::to_string(o.common.seed)},
        {"num_layers", std::to_string(cfg.num_layers)},
        {"hidden_dim", std::to_string(cfg.hidden_dim)},
        {"num_heads", std::to_string(cfg.num_heads)},
        {"ffn_dim", std::to_string(cfg.ffn_dim)},
        {"vocab_size", std::to_string(cfg.vocab_size)},
        {"max_seq_len", std::to_string(cfg.max_seq_len)}};
    if (o.common.emit_csv) {
        std::string csv = "out_path,seed,num_layers,hidden_dim,num_heads,ffn_dim,vocab_size,"
                          "max_seq_len,checksum\n";
        csv += o.out_path + "," + std::to_string(o.common.seed) + "," +
               std::to_string(cfg.num_layers) + "," + std::to_string(cfg.hidden_dim) + "," +
               std::to_string(cfg.num_heads) + "," + std::to_string(cfg.ffn_dim) + "," +
               std::to_string(cfg.vocab_size) + "," + std::to_string(cfg.max_seq_len) + "," +
               checksum + "\n";
        write_text_file(out_dir / "report.csv", csv);
    }
    if (o.common.emit_json) {
        json rep = {{"out_path", o.out_path}, {"checksum", checksum},
                    {"seed", o.common.seed},  {"num_layers", cfg.num_layers},
                    {"hidden_dim", cfg.hidden_dim}, {"num_heads", cfg.num_heads},
                    {"ffn_dim", cfg.ffn_dim}, {"vocab_size", cfg.vocab_size},
                    {"max_seq_len", cfg.max_seq_len}};
        write_text_file(out_dir / "report.json", rep.dump(2) + "\n");
    }
    write_manifest(out_dir, "gen-weights", o.common, Timings{}, eff);
    return 0;
}

// ---------------------------------------------------------------------------
// prefill
// ---------------------------------------------------------------------------

struct PrefillOpts {
    CommonOpts common;
    HaltingFlags halting;
    std::string weights_path;
    std::string prompt_inline;
    std::string prompt_file;
    std::size_t decode_steps = 0;
    std::uint64_t synthetic_t = 0;  // > 0: FLOPs-only dry run, no model execution
    bool emit_histogram = false;
    // dry-run model dims (paper-scale defaults)
    std::uint64_t dry_num_layers = 28, dry_hidden_dim = 3584, dry_ffn_dim = 18944;
    std::uint64_t dry_full_layers = 11;
};

std::vector<TokenId> prefill_prompt(const PrefillOpts& o) {
    if (!o.prompt_inline.empty()) {
        std::istringstream is(o.prompt_inline);
        auto ids = parse_token_ids(is, "--prompt");
        if (ids.empty()) throw InputError("--prompt contained no token ids");
        return ids;
    }
    if (!o.prompt_file.empty()) return parse_prompts_file(o.prompt_file).front();
    throw UsageError("prefill needs --prompt or --prompt-file (or --synthetic-T for a dry run)");
}

void emit_histograms(const fs::path& out_dir, const FullPrefillResult& pre,
                     const ModelConfig& cfg) {
    std::string raw = "layer,bin_lo,bin_hi,count\n";
    std::string rel = "layer,bin_lo,bin_hi,count\n";
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
        const DeltaScores scores = delta_attn_scores(pre.traces[l]);
        DeltaScores relative{l, std::vector<float>(scores.scores.size(), 0.0f)};
        const auto h_norms = l2_norm_rows(pre.traces[l].h_in);
        for (std::size_t i = 0; i < scores.scores.size(); ++i)
            relative.scores[i] = h_norms[i] > 0 ? scores.scores[i] / h_norms[i] : 0.0f;
        for (const auto& [hist, sink] :
             {std::pair{delta_histogram(scores, 16), &raw},
              std::pair{delta_histogram(relative, 16), &rel}}) {
            for (std::size_t b = 0; b < hist.counts.size(); ++b)
                *sink += std::to_string(l) + "," + fmt_double(hist.bin_edges[b]) + "," +
                         fmt_double(hist.bin_edges[b + 1]) + "," +
                         std::to_string(hist.counts[b]) + "\n";
        }
    }
    write_text_file(out_dir / "hist_raw.csv", raw);
    write_text_file(out_dir / "hist_relative.csv", rel);
}

int run_prefill_dry(const PrefillOpts& o) {
    const fs::path out_dir = resolve_out_dir(o.common);
    FlopsModelParams params;
    params.num_layers = o.dry_num_layers;
    params.hidden_dim = o.dry_hidden_dim;
    params.ffn_dim = o.dry_ffn_dim;
    params.full_layers = o.dry_full_layers;
    params.compression_ratio = o.halting.ratio;
    params.keep_first_n = o.halting.keep_first;
    params.keep_last_n = o.halting.keep_last;
    if (o.halting.mode != "protected")
        throw UsageError("--synthetic-T dry runs use the protected cost model; pass "
                         "--mode protected with --keep-first/--keep-last");
    const FlopsReport rep = speedup_report(o.synthetic_t, params);

    std::string csv =
        "T,mode,ratio,start_layer,signal,direction,shots,n_kept,logit_delta_vs_vanilla,"
        "logits_digest,flops_full,flops_dash,flops_r_pct,flops_s,per_layer_lengths,"
        "kept_indices,decoded_tokens\n";
    csv += std::to_string(rep.n) + "," + o.halting.mode + "," + fmt_double(o.halting.ratio) +
           "," + std::to_string(params.full_layers) + "," + o.halting.signal + "," +
           o.halting.direction + "," + std::to_string(o.halting.shots) + "," +
           std::to_string(rep.n_kept) + ",,," + u128_str(rep.c_full) + "," +
           u128_str(rep.c_ours) + "," + format_2dec(rep.r_flops * 100.0) + "," +
           format_2dec(rep.s_flops) + ",,,\n";
    if (o.common.emit_csv) write_text_file(out_dir / "report.csv", csv);
    if (o.common.emit_json) {
        json j = {{"T", rep.n},
                  {"mode", o.halting.mode},
                  {"ratio", o.halting.ratio},
                  {"full_layers", params.full_layers},
                  {"n_kept", rep.n_kept},
                  {"flops_full", u128_str(rep.c_full)},
                  {"flops_dash", u128_str(rep.c_ours)},
                  {"flops_r_pct", rep.r_flops * 100.0},
                  {"flops_s", rep.s_flops},
                  {"dry_run", true}};
        write_text_file(out_dir / "report.json", j.dump(2) + "\n");
    }
    auto eff = halting_settings(o.halting);
    eff["synthetic_T"] = std::to_string(o.synthetic_t);
    write_manifest(out_dir, "prefill", o.common, Timings{}, eff);
    std::printf("dry run: T=%llu n_kept=%llu r=%s%% s=%sx\n",
                static_cast<unsigned long long>(rep.n),
                static_cast<unsigned long long>(rep.n_kept),
                format_2dec(rep.r_flops * 100.0).c_str(), format_2dec(rep.s_flops).c_str());
    return 0;
}

int run_prefill(const PrefillOpts& o) {
    if (o.synthetic_t > 0) return run_prefill_dry(o);

    const fs::path out_dir = resolve_out_dir(o.common);
    if (o.weights_path.empty()) throw UsageError("prefill needs --weights");
    const LoadedModel lm = load_weights(o.weights_path);
    const std::vector<TokenId> prompt = prefill_prompt(o);
    const HaltingConfig hcfg = to_halting_config(o.halting, o.common.seed);

    Timings timing;
    FullPrefillResult vanilla;
    PrefillResult halted;
    {
        PhaseTimer t(timing.prefill_ms);
        vanilla = prefill_full(prompt, lm.weights, lm.config);
        halted = hcfg.shots > 1 ? multi_shot_prefill(prompt, lm.weights, lm.config, hcfg)
                                : dash_prefill(prompt, lm.weights, lm.config, hcfg);
    }
    if (o.emit_histogram) emit_histograms(out_dir, vanilla, lm.config);

    double logit_delta = 0;
    for (std::size_t i = 0; i < halted.logits.data.size(); ++i)
        logit_delta = std::max(logit_delta, std::abs(static_cast<double>(halted.logits.data[i]) -
                                                     vanilla.logits.data[i]));

    DecodeResult decoded;
    if (o.decode_steps > 0) {
        PhaseTimer t(timing.decode_ms);
        decoded = decode_greedy(halted.kv, halted.logits, o.decode_steps, lm.weights, lm.config);
    }

    const uint128 flops_full = checked_mul(
        lm.config.num_layers, per_layer_flops(prompt.size(), lm.config.hidden_dim,
                                              lm.config.ffn_dim));
    const uint128 flops_dash = realized_flops(halted.per_layer_lengths, lm.config);
    const long double ratio =
        static_cast<long double>(flops_dash) / static_cast<long double>(flops_full);
    const std::string digest =
        hex64(fnv1a64(halted.logits.data.data(), halted.logits.data.size() * sizeof(float)));

    std::string csv =
        "T,mode,ratio,start_layer,signal,direction,shots,n_kept,logit_delta_vs_vanilla,"
        "logits_digest,flops_full,flops_dash,flops_r_pct,flops_s,per_layer_lengths,"
        "kept_indices,decoded_tokens\n";
    csv += std::to_string(prompt.size()) + "," + o.halting.mode + "," +
           fmt_double(o.halting.ratio) + "," + std::to_string(o.halting.start_layer) + "," +
           o.halting.signal + "," + o.halting.direction + "," + std::to_string(o.halting.shots) +
           "," + std::to_string(halted.active_set.kept_indices.size()) + "," +
           fmt_double(logit_delta) + "," + digest + "," + u128_str(flops_full) + "," +
           u128_str(flops_dash) + "," +
           format_2dec(static_cast<double>(1.0L - ratio) * 100.0) + "," +
           format_2dec(static_cast<double>(1.0L / ratio)) + "," +
           join(halted.per_layer_lengths) + "," + join(halted.active_set.kept_indices) + "," +
           join(decoded.tokens) + "\n";
    if (o.common.emit_csv) write_text_file(out_dir / "report.csv", csv);

    if (o.common.emit_json) {
        json j = {{"T", prompt.size()},
                  {"mode", o.halting.mode},
                  {"ratio", o.halting.ratio},
                  {"start_layer", o.halting.start_layer},
                  {"signal", o.halting.signal},
                  {"direction", o.halting.direction},
                  {"shots", o.halting.shots},
                  {"n_kept", halted.active_set.kept_indices.size()},
                  {"kept_indices", halted.active_set.kept_indices},
                  {"halted_indices", halted.active_set.halted_indices},
                  {"per_layer_lengths", halted.per_layer_lengths},
                  {"kv_lengths", halted.kv.lengths()},
                  {"logit_delta_vs_vanilla", logit_delta},
                  {"logits_digest", digest},
                  {"flops_full", u128_str(flops_full)},
                  {"flops_dash", u128_str(flops_dash)},
                  {"flops_r_pct", static_cast<double>(1.0L - ratio) * 100.0},
                  {"flops_s", static_cast<double>(1.0L / ratio)},
                  {"decoded_tokens", decoded.tokens}};
        write_text_file(out_dir / "report.json", j.dump(2) + "\n");
    }

    auto eff = halting_settings(o.halting);
    eff["weights"] = o.weights_path;
    eff["T"] = std::to_string(prompt.size());
    eff["decode_steps"] = std::to_string(o.decode_steps);
    eff["seed"] = std::to_string(o.common.seed);
    write_manifest(out_dir, "prefill", o.common, timing, eff);

    std::printf("T=%zu kept=%zu logit_delta=%.3g digest=%s\n", prompt.size(),
                halted.active_set.kept_indices.size(), logit_delta, digest.c_str());
    return 0;
}

// ---------------------------------------------------------------------------
// flops-table
// ---------------------------------------------------------------------------

struct FlopsTableOpts {
    CommonOpts common;
    bool paper_defaults = false;
    std::vector<std::uint64_t> lengths;
    FlopsModelParams params;
};

int run_flops_table(const FlopsTableOpts& o) {
    const fs::path out_dir = resolve_out_dir(o.common);
    std::vector<FlopsReport> rows;
    if (o.paper_defaults) {
        rows = emit_table7();
    } else {
        const auto lengths = o.lengths.empty() ? table7_lengths() : o.lengths;
        for (std::uint64_t n : lengths) rows.push_back(speedup_report(n, o.params));
    }
    const std::string csv = flops_table_csv(rows);
    std::fputs(flops_table_text(rows).c_str(), stdout);
    if (o.common.emit_csv) write_text_file(out_dir / "report.csv", csv);
    if (o.common.emit_json) {
        json arr = json::array();
        for (const auto& r : rows)
            arr.push_back({{"n", r.n},
                           {"n_kept", r.n_kept},
                           {"a_n", u128_str(r.a_n)},
                           {"c_full", u128_str(r.c_full)},
                           {"c_ours", u128_str(r.c_ours)},
                           {"r_flops_pct", r.r_flops * 100.0},
                           {"s_flops", r.s_flops}});
        write_text_file(out_dir / "report.json", arr.dump(2) + "\n");
    }
    std::map<std::string, std::string> eff = {
        {"paper_defaults", o.paper_defaults ? "1" : "0"},
        {"num_layers", std::to_string(o.params.num_layers)},
        {"hidden_dim", std::to_string(o.params.hidden_dim)},
        {"ffn_dim", std::to_string(o.params.ffn_dim)},
        {"full_layers", std::to_string(o.params.full_layers)},
        {"c", fmt_double(o.params.compression_ratio)},
        {"keep_first", std::to_string(o.params.keep_first_n)},
        {"keep_last", std::to_string(o.params.keep_last_n)},
        {"n", join(o.lengths)}};
    write_manifest(out_dir, "flops-table", o.common, Timings{}, eff);
    return 0;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateOpts {
    CommonOpts common;
    HaltingFlags halting;
    std::string weights_path;
    std::string prompts_path;
    std::string which = "direction";
    std::vector<std::size_t> shots_list{1, 2, 3, 4};
    bool parallel = false;
};

struct VariantStat {
    std::string label;
    double kept_count = 0;
    double logit_l2_delta = 0;
};

int run_ablate(const AblateOpts& o) {
    const fs::path out_dir = resolve_out_dir(o.common);
    if (o.weights_path.empty()) throw UsageError("ablate needs --weights");
    const LoadedModel lm = load_weights(o.weights_path);
    const auto prompts = parse_prompts_file(o.prompts_path);
    const HaltingConfig base = to_halting_config(o.halting, o.common.seed);

    struct Variant {
        std::string label;
        HaltingConfig cfg;
    };
    std::vector<Variant> variants;
    std::string label_column;
    if (o.which == "direction") {
        label_column = "direction";
        for (auto [label, dir] :
             {std::pair{"keep_high", Direction::keep_high},
              std::pair{"keep_low", Direction::keep_low},
              std::pair{"random", Direction::random_uniform}}) {
            HaltingConfig c = base;
            c.direction = dir;
            variants.push_back({label, c});
        }
    } else if (o.which == "signal") {
        label_column = "signal";
        for (auto [label, sig] : {std::pair{"delta_attn", DeltaSignal::delta_attn},
                                  std::pair{"delta_block", DeltaSignal::delta_block}}) {
            HaltingConfig c = base;
            c.signal = sig;
            variants.push_back({label, c});
        }
    } else if (o.which == "schedule") {
        label_column = "shots";
        for (std::size_t k : o.shots_list) {
            HaltingConfig c = base;
            c.shots = k;
            variants.push_back({"k" + std::to_string(k), c});
        }
    } else {
        throw UsageError("unknown ablation '" + o.which +
                         "' (expected direction, signal or schedule)");
    }

    Timings timing;
    // per prompt: vanilla logits once, then every variant against it
    auto eval_prompt = [&](const std::vector<TokenId>& prompt) {
        std::vector<std::pair<double, double>> stats;  // kept, logit delta per variant
        const FullPrefillResult vanilla = prefill_full(prompt, lm.weights, lm.config);
        for (const auto& variant : variants) {
            const PrefillResult pr =
                variant.cfg.shots > 1
                    ? multi_shot_prefill(prompt, lm.weights, lm.config, variant.cfg)
                    : dash_prefill(prompt, lm.weights, lm.config, variant.cfg);
            stats.emplace_back(static_cast<double>(pr.active_set.kept_indices.size()),
                               logit_l2_delta(pr.logits, vanilla.logits));
        }
        return stats;
    };

    std::vector<std::vector<std::pair<double, double>>> per_prompt(prompts.size());
    {
        PhaseTimer t(timing.prefill_ms);
        if (o.parallel) {
            std::vector<std::future<std::vector<std::pair<double, double>>>> futures;
            futures.reserve(prompts.size());
            for (const auto& p : prompts)
                futures.push_back(std::async(std::launch::async, eval_prompt, p));
            for (std::size_t i = 0; i < prompts.size(); ++i) per_prompt[i] = futures[i].get();
        } else {
            for (std::size_t i = 0; i < prompts.size(); ++i) per_prompt[i] = eval_prompt(prompts[i]);
        }
    }

    std::vector<VariantStat> rows(variants.size());
    for (std::size_t v = 0; v < variants.size(); ++v) {
        rows[v].label = variants[v].label;
        for (const auto& stats : per_prompt) {
            rows[v].kept_count += stats[v].first;
            rows[v].logit_l2_delta += stats[v].second;
        }
        rows[v].kept_count /= static_cast<double>(prompts.size());
        rows[v].logit_l2_delta /= static_cast<double>(prompts.size());
    }

    std::string csv = label_column + ",kept_count,logit_l2_delta_vs_vanilla\n";
    for (const auto& r : rows)
        csv += r.label + "," + fmt_double(r.kept_count) + "," + fmt_double(r.logit_l2_delta) +
               "\n";
    if (o.common.emit_csv) write_text_file(out_dir / "report.csv", csv);
    if (o.common.emit_json) {
        json arr = json::array();
        for (const auto& r : rows)
            arr.push_back({{label_column, r.label},
                           {"kept_count", r.kept_count},
                           {"logit_l2_delta_vs_vanilla", r.logit_l2_delta}});
        write_text_file(out_dir / "report.json", arr.dump(2) + "\n");
    }

    auto eff = halting_settings(o.halting);
    eff["which"] = o.which;
    eff["weights"] = o.weights_path;
    eff["prompts"] = o.prompts_path;
    eff["num_prompts"] = std::to_string(prompts.size());
    write_manifest(out_dir, "ablate", o.common, timing, eff);
    std::fputs(csv.c_str(), stdout);
    return 0;
}

// ---------------------------------------------------------------------------
// correlate
// ---------------------------------------------------------------------------

struct CorrelateOpts {
    CommonOpts common;
    std::string weights_path;
    std::string prompts_path;
    std::vector<std::size_t> layers;
    double fraction = 0.3;
    bool self_check = false;
    bool parallel = false;
};

int run_correlate(const CorrelateOpts& o) {
    const fs::path out_dir = resolve_out_dir(o.common);
    if (o.weights_path.empty()) throw UsageError("correlate needs --weights");
    const LoadedModel lm = load_weights(o.weights_path);
    const auto prompts = parse_prompts_file(o.prompts_path);

    std::vector<std::size_t> layers = o.layers;
    if (layers.empty())
        for (std::size_t l = 0; l < lm.config.num_layers; ++l) layers.push_back(l);
    for (std::size_t l : layers)
        if (l >= lm.config.num_layers)
            throw UsageError("layer " + std::to_string(l) + " out of range (model has " +
                             std::to_string(lm.config.num_layers) + " layers)");

    Timings timing;
    auto eval_prompt = [&](const std::vector<TokenId>& prompt) {
        std::vector<RankFidelity> out;
        const FullPrefillResult pre =
            prefill_full(prompt, lm.weights, lm.config, /*record_attention=*/true);
        for (std::size_t l : layers) {
            const DeltaScores delta = delta_attn_scores(pre.traces[l]);
            const std::vector<double> d(delta.scores.begin(), delta.scores.end());
            const std::vector<double> ref =
                o.self_check ? d : importance_scores_full_attention(pre.attention, l);
            out.push_back(rank_fidelity(d, ref, o.fraction));
        }
        return out;
    };

    std::vector<std::vector<RankFidelity>> per_prompt(prompts.size());
    {
        PhaseTimer t(timing.prefill_ms);
        if (o.parallel) {
            std::vector<std::future<std::vector<RankFidelity>>> futures;
            futures.reserve(prompts.size());
            for (const auto& p : prompts)
                futures.push_back(std::async(std::launch::async, eval_prompt, p));
            for (std::size_t i = 0; i < prompts.size(); ++i) per_prompt[i] = futures[i].get();
        } else {
            for (std::size_t i = 0; i < prompts.size(); ++i) per_prompt[i] = eval_prompt(prompts[i]);
        }
    }

    std::string csv = "layer,spearman,iou\n";
    json arr = json::array();
    for (std::size_t li = 0; li < layers.size(); ++li) {
        double rho = 0, iou = 0;
        for (const auto& stats : per_prompt) {
            rho += stats[li].spearman_rho;
            iou += stats[li].topk_iou;
        }
        rho /= static_cast<double>(prompts.size());
        iou /= static_cast<double>(prompts.size());
        csv += std::to_string(layers[li]) + "," + fmt_double(rho) + "," + fmt_double(iou) + "\n";
        arr.push_back({{"layer", layers[li]}, {"spearman", rho}, {"iou", iou}});
    }
    if (o.common.emit_csv) write_text_file(out_dir / "report.csv", csv);
    if (o.common.emit_json) write_text_file(out_dir / "report.json", arr.dump(2) + "\n");

    std::map<std::string, std::string> eff = {{"weights", o.weights_path},
                                              {"prompts", o.prompts_path},
                                              {"layers", join(layers)},
                                              {"fraction", fmt_double(o.fraction)},
                                              {"self_check", o.self_check ? "1" : "0"}};
    write_manifest(out_dir, "correlate", o.common, timing, eff);
    std::fputs(csv.c_str(), stdout);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"delta-guided token halting: prefill engine and analysis harness"};
    app.require_subcommand(1);

    GenWeightsOpts gw;
    CLI::App* gw_cmd = app.add_subcommand("gen-weights", "write a seeded DASHW1 weight file");
    add_common(gw_cmd, gw.common);
    add_model_dims(gw_cmd, gw);
    gw_cmd->add_option("--out", gw.out_path, "output weight file")->required();

    PrefillOpts pf;
    CLI::App* pf_cmd =
        app.add_subcommand("prefill", "run vanilla + halting prefill on one prompt");
    add_common(pf_cmd, pf.common);
    add_halting(pf_cmd, pf.halting);
    pf_cmd->add_option("--weights", pf.weights_path, "DASHW1 weight file");
    pf_cmd->add_option("--prompt", pf.prompt_inline, "inline whitespace-separated token ids");
    pf_cmd->add_option("--prompt-file", pf.prompt_file, "token-id file, '-' for stdin");
    pf_cmd->add_option("--decode-steps", pf.decode_steps, "greedy decode steps after prefill");
    pf_cmd->add_option("--synthetic-T", pf.synthetic_t,
                       "FLOPs-only dry run at this prompt length (no model execution)");
    pf_cmd->add_option("--dry-num-layers", pf.dry_num_layers, "dry-run model depth");
    pf_cmd->add_option("--dry-hidden-dim", pf.dry_hidden_dim, "dry-run hidden size");
    pf_cmd->add_option("--dry-ffn-dim", pf.dry_ffn_dim, "dry-run FFN size");
    pf_cmd->add_option("--dry-full-layers", pf.dry_full_layers,
                       "dry-run count of full-length layers");
    pf_cmd->add_flag("--histogram", pf.emit_histogram,
                     "emit per-layer delta histograms (raw + relative)");

    FlopsTableOpts ft;
    CLI::App* ft_cmd = app.add_subcommand("flops-table", "theoretical prefill cost sweep");
    add_common(ft_cmd, ft.common);
    ft_cmd->add_flag("--paper-defaults", ft.paper_defaults,
                     "emit the published five-row sweep exactly");
    ft_cmd->add_option("--n", ft.lengths, "prefill lengths to sweep");
    ft_cmd->add_option("--num-layers", ft.params.num_layers, "model depth L");
    ft_cmd->add_option("--hidden-dim", ft.params.hidden_dim, "hidden size d");
    ft_cmd->add_option("--ffn-dim", ft.params.ffn_dim, "FFN size m");
    ft_cmd->add_option("--full-layers", ft.params.full_layers,
                       "layers processing the full sequence");
    ft_cmd->add_option("--c", ft.params.compression_ratio, "middle-region drop fraction")
        ->check(CLI::Range(0.0, 0.999999));
    ft_cmd->add_option("--keep-first", ft.params.keep_first_n, "protected prefix");
    ft_cmd->add_option("--keep-last", ft.params.keep_last_n, "protected suffix");

    AblateOpts ab;
    CLI::App* ab_cmd = app.add_subcommand("ablate", "direction / signal / schedule ablations");
    add_common(ab_cmd, ab.common);
    add_halting(ab_cmd, ab.halting);
    ab_cmd->add_option("--weights", ab.weights_path, "DASHW1 weight file");
    ab_cmd->add_option("--prompts", ab.prompts_path, "prompts file, one per line")->required();
    ab_cmd->add_option("--which", ab.which, "direction | signal | schedule")
        ->check(CLI::IsMember({"direction", "signal", "schedule"}));
    ab_cmd->add_option("--shots-list", ab.shots_list, "shot counts for the schedule ablation");
    ab_cmd->add_flag("--parallel", ab.parallel, "evaluate prompts concurrently");

    CorrelateOpts co;
    CLI::App* co_cmd =
        app.add_subcommand("correlate", "delta vs full-attention ranking fidelity");
    add_common(co_cmd, co.common);
    co_cmd->add_option("--weights", co.weights_path, "DASHW1 weight file");
    co_cmd->add_option("--prompts", co.prompts_path, "prompts file, one per line")->required();
    co_cmd->add_option("--layers", co.layers, "layers to evaluate (default: all)");
    co_cmd->add_option("--fraction", co.fraction, "top-k fraction for the IoU")
        ->check(CLI::Range(1e-9, 1.0));
    co_cmd->add_flag("--self-check", co.self_check,
                     "correlate the delta signal with itself (sanity mode)");
    co_cmd->add_flag("--parallel", co.parallel, "evaluate prompts concurrently");

    try {
        app.parse(argc, argv);
        for (auto& [cmd, common] :
             std::initializer_list<std::pair<CLI::App*, CommonOpts*>>{{gw_cmd, &gw.common},
                                                                      {pf_cmd, &pf.common},
                                                                      {ft_cmd, &ft.common},
                                                                      {ab_cmd, &ab.common},
                                                                      {co_cmd, &co.common}})
            if (cmd->parsed()) common->config_path = cmd->get_config_ptr()->as<std::string>();

        if (gw_cmd->parsed()) return run_gen_weights(gw);
        if (pf_cmd->parsed()) return run_prefill(pf);
        if (ft_cmd->parsed()) return run_flops_table(ft);
        if (ab_cmd->parsed()) return run_ablate(ab);
        if (co_cmd->parsed()) return run_correlate(co);
        return 1;
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 1;
    } catch (const UsageError& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return 1;
    } catch (const InputError& e) {
        std::cerr << "input error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "contract error: " << e.what() << "\n";
        return 2;
    } catch (const CapacityError& e) {
        std::cerr << "capacity error: " << e.what() << "\n";
        return 2;
    } catch (const IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "internal error: " << e.what() << "\n";
        return 3;
    }
}
