#include "conceptsplit/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "conceptsplit/adapters.hpp"
#include "conceptsplit/analysis.hpp"
#include "conceptsplit/config.hpp"
#include "conceptsplit/container.hpp"
#include "conceptsplit/loda.hpp"
#include "conceptsplit/threading.hpp"
#include "conceptsplit/train.hpp"
#include "conceptsplit/vocab.hpp"

namespace csplit {

namespace {

using json = nlohmann::ordered_json;
namespace fs = std::filesystem;

void set_mode(const std::string& numeric) {
    set_numeric_mode(numeric == "verify" ? NumericMode::verify : NumericMode::fast);
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create directory '" + dir + "': " + ec.message());
}

void write_text(const std::string& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw IoError("cannot open '" + path + "' for writing");
    os << text;
    if (!os) throw IoError("write to '" + path + "' failed");
}

std::string mask_to_hex(const BinaryMask& m) {
    static const char* digits = "0123456789abcdef";
    std::string out;
    int nibble = 0, bits = 0;
    for (size_t i = 0; i < m.cells.size(); ++i) {
        nibble = (nibble << 1) | (m.cells[i] ? 1 : 0);
        if (++bits == 4) {
            out += digits[nibble];
            nibble = 0;
            bits = 0;
        }
    }
    if (bits > 0) out += digits[nibble << (4 - bits)];
    return out;
}

BinaryMask mask_from_hex(const std::string& hex, int h, int w) {
    BinaryMask m;
    m.h = h;
    m.w = w;
    m.cells.assign(static_cast<size_t>(h) * w, 0);
    for (size_t i = 0; i < m.cells.size(); ++i) {
        const size_t d = i / 4;
        if (d >= hex.size()) throw IoError("mask hex string too short");
        const char c = hex[d];
        const int v = c >= 'a' ? c - 'a' + 10 : c - '0';
        m.cells[i] = (v >> (3 - i % 4)) & 1;
    }
    return m;
}

// full-precision decimal text (shortest round-trip form)
std::string num_str(double v) { return nlohmann::json(v).dump(); }

std::string token_label(const PromptEncoding& enc, int position) {
    return enc.words[static_cast<size_t>(position)] + "@" + std::to_string(position);
}

// ---- infer machinery --------------------------------------------------------

struct InferSetup {
    DenoiserModel model;
    std::vector<ConceptAdapter> adapters;  // owned
    PromptEncoding prompt;
    std::vector<int> tokens;  // S
    std::vector<std::string> labels;
    Hooks hooks;
    InferenceConfig inference;
};

void validate_prompt_words(const std::vector<std::string>& words) {
    for (const std::string& w : words) {
        bool known = false;
        for (const std::string& v : builtin_vocabulary()) known = known || v == w;
        if (!known)
            throw ConfigError("prompt word '" + w + "' is not in the vocabulary");
    }
}

InferSetup prepare_inference(const RunConfig& cfg, const std::string& model_path,
                             const std::string& db_path,
                             const std::string& adapter_csv, bool no_adapters,
                             const std::string& prompt_text,
                             const std::string& focus_csv) {
    InferSetup s;
    s.model = load_model(model_path);

    const std::vector<std::string> words = split_words(prompt_text);
    if (words.empty()) throw ConfigError("prompt is empty");
    validate_prompt_words(words);
    s.prompt = s.model.embedder.encode(words);

    if (!adapter_csv.empty() && db_path.empty())
        throw ConfigError("--adapters requires --db");
    if (!no_adapters && !db_path.empty()) {
        std::vector<ConceptAdapter> all = load_adapter_db(db_path, s.model.cfg);
        if (adapter_csv.empty()) {
            // attach every value adapter whose bound word occurs in the prompt;
            // ablation variants must be selected explicitly
            for (ConceptAdapter& ad : all)
                if (ad.variant == ConceptAdapter::Variant::value &&
                    std::find(words.begin(), words.end(), ad.bound_word) !=
                        words.end())
                    s.adapters.push_back(std::move(ad));
        } else {
            for (const std::string& name : split_words(
                     [&] {
                         std::string t = adapter_csv;
                         std::replace(t.begin(), t.end(), ',', ' ');
                         return t;
                     }())) {
                bool found = false;
                for (ConceptAdapter& ad : all)
                    if (ad.name == name) {
                        s.adapters.push_back(ad);
                        found = true;
                        break;
                    }
                if (!found)
                    throw ConfigError("adapter '" + name + "' not found in '" +
                                      db_path + "'");
            }
        }
    }

    std::vector<const ConceptAdapter*> refs;
    for (const ConceptAdapter& ad : s.adapters) refs.push_back(&ad);
    AdapterSet set = refs.empty() ? AdapterSet{} : bind_adapters(refs, s.prompt);

    for (const AdapterBinding& e : set.entries) s.tokens.push_back(e.position);
    if (!focus_csv.empty()) {
        std::string t = focus_csv;
        std::replace(t.begin(), t.end(), ',', ' ');
        for (const std::string& word : split_words(t)) {
            int pos = -1;
            for (int i = 0; i < s.prompt.num_words; ++i)
                if (s.prompt.words[static_cast<size_t>(i)] == word) pos = i;
            if (pos < 0)
                throw ConfigError("focus word '" + word + "' is not in the prompt");
            if (std::find(s.tokens.begin(), s.tokens.end(), pos) == s.tokens.end())
                s.tokens.push_back(pos);
        }
    }
    std::sort(s.tokens.begin(), s.tokens.end());
    for (int p : s.tokens) s.labels.push_back(token_label(s.prompt, p));

    if (!set.entries.empty())
        s.hooks = cfg.apply_mode == "merged" ? merged_hooks(set) : token_wise_hooks(set);
    s.inference = cfg.resolved_inference(s.tokens.size());
    return s;
}

json step_record(const StepDiagnostics& d, const std::vector<std::string>& labels) {
    json rec;
    rec["type"] = "step";
    rec["step"] = d.step;
    rec["t"] = d.t;
    rec["stage1"] = d.stage1_active;
    rec["stage1_updated"] = d.stage1_updated;
    rec["afg"] = d.afg_active;
    rec["kl_h"] = d.kl_h;
    rec["l_kl"] = d.loss;
    rec["eta"] = d.eta;
    json entropy = json::object(), counts = json::object(), masks = json::object();
    for (size_t k = 0; k < labels.size(); ++k) {
        entropy[labels[k]] = d.entropy[k];
        counts[labels[k]] = d.mask_counts[k];
        masks[labels[k]] = mask_to_hex(d.masks[k]);
    }
    rec["entropy"] = entropy;
    rec["mask_counts"] = counts;
    rec["masks"] = masks;
    return rec;
}

void write_diagnostics(const std::string& path, const json& header,
                       const LodaResult& result,
                       const std::vector<std::string>& labels) {
    std::string out = header.dump() + "\n";
    for (const StepDiagnostics& d : result.steps)
        out += step_record(d, labels).dump() + "\n";
    write_text(path, out);
}

double run_pairwise_iou(const StepDiagnostics& final_step) {
    const size_t k = final_step.masks.size();
    if (k < 2) return 0.0;
    std::vector<double> ious;
    for (size_t i = 0; i < k; ++i)
        for (size_t j = i + 1; j < k; ++j)
            ious.push_back(mask_iou(final_step.masks[i], final_step.masks[j]));
    double total = 0.0;
    for (double v : ious) total += v;
    return total / static_cast<double>(ious.size());
}

double median(std::vector<double> v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- commands ---------------------------------------------------------------

struct CommonFlags {
    std::string config_path;
    std::string numeric;
    int threads = -1;

    void attach(CLI::App* cmd) {
        cmd->add_option("--config", config_path, "JSON run configuration");
        cmd->add_option("--numeric", numeric, "numeric mode: fast or verify");
        cmd->add_option("--threads", threads, "worker thread count (0 = auto)");
    }

    RunConfig load() const {
        RunConfig cfg =
            config_path.empty() ? RunConfig{} : load_run_config(config_path);
        if (!numeric.empty()) cfg.numeric = numeric;
        if (threads >= 0) cfg.threads = threads;
        cfg.validate();
        set_mode(cfg.numeric);
        return cfg;
    }
};

int cmd_train_base(const CommonFlags& common, const std::string& out_path,
                   bool resume, long long steps_override, double lr_override,
                   long long seed_override, const std::string& export_dir,
                   int export_count) {
    RunConfig cfg = common.load();
    if (steps_override >= 0) cfg.train.steps = steps_override;
    if (lr_override > 0) cfg.train.lr = lr_override;
    if (seed_override >= 0) cfg.train.seed = static_cast<uint64_t>(seed_override);
    cfg.validate();

    const std::string path = resolve_output_path(out_path);
    DenoiserModel model = resume ? load_model(path)
                                 : DenoiserModel::init(cfg.model, cfg.train.seed);
    if (resume) {
        cfg.model = model.cfg;
        std::cout << "resuming from step " << model.train_steps_done << "\n";
    }

    DatasetConfig data{cfg.model.latent_h, cfg.model.latent_w, cfg.model.latent_c};
    if (!export_dir.empty()) {
        std::vector<std::pair<uint64_t, Scene>> scenes;
        Rng base(cfg.train.seed);
        for (int i = 0; i < export_count; ++i) {
            Rng r = base.fork(static_cast<uint64_t>(i));
            const int count = 1 + static_cast<int>(r.below(3));
            const uint64_t scene_seed = r.next_u64();
            scenes.emplace_back(scene_seed, gen_scene(data, scene_seed, count));
        }
        export_dataset(resolve_output_path(export_dir), scenes);
        std::cout << "exported " << export_count << " scenes to " << export_dir
                  << "\n";
    }
    TrainBaseOptions opts;
    opts.steps = cfg.train.steps;
    opts.batch = cfg.train.batch;
    opts.lr = cfg.train.lr;
    opts.seed = cfg.train.seed;
    opts.cond_drop = cfg.train.cond_drop;
    opts.holdout_size = cfg.train.holdout;
    opts.threads = cfg.threads;
    json curve = json::array();
    opts.on_log = [&](long long step, double loss) {
        curve.push_back({{"step", step}, {"loss", loss}});
        std::cout << "step " << step << "  loss " << loss << "\n";
    };

    TrainStats stats = train_base(model, data, opts);
    save_model(model, path);

    json log;
    log["schema_version"] = 1;
    log["config"] = config_to_json(cfg);
    log["initial_holdout_loss"] = stats.initial_holdout_loss;
    log["final_holdout_loss"] = stats.final_holdout_loss;
    log["steps_done"] = model.train_steps_done;
    log["curve"] = curve;
    write_text(path + ".train.json", log.dump(2) + "\n");

    std::cout << "holdout loss " << stats.initial_holdout_loss << " -> "
              << stats.final_holdout_loss << "\ncheckpoint written to " << path
              << "\n";
    return 0;
}

int cmd_train_adapter(const CommonFlags& common, const std::string& model_path,
                      const std::string& db_path, const std::string& name,
                      const std::string& word, const std::string& variant_name_s,
                      bool ablation, int rank_override, int iters_override,
                      double lr_override, int color, const std::string& texture,
                      const std::string& shape, bool overwrite, bool list_only) {
    RunConfig cfg = common.load();

    const std::string db = resolve_output_path(db_path);
    if (list_only) {
        Container c = read_container(db);
        for (const auto& [cname, meta] : c.config.at("concepts").items())
            std::cout << cname << "  word=" << meta.at("word").get<std::string>()
                      << "  variant=" << meta.at("variant").get<std::string>()
                      << "  rank=" << meta.at("rank").get<int>() << "\n";
        return 0;
    }

    DenoiserModel model = load_model(model_path);
    cfg.model = model.cfg;
    if (rank_override > 0) cfg.adapter.rank = rank_override;
    if (iters_override >= 0) cfg.adapter.iters = iters_override;
    if (lr_override > 0) cfg.adapter.lr = lr_override;

    ConceptSpec spec;
    spec.name = name;
    spec.bound_word = word;
    spec.color_id = color;
    if (texture == "checker") spec.texture = 0;
    else if (texture == "stripes") spec.texture = 1;
    else if (texture == "dots") spec.texture = 2;
    else throw ConfigError("unknown concept texture '" + texture + "'");
    if (shape == "square") spec.kind = ShapeKind::square;
    else if (shape == "circle") spec.kind = ShapeKind::circle;
    else if (shape == "triangle") spec.kind = ShapeKind::triangle;
    else throw ConfigError("unknown concept shape '" + shape + "'");

    DatasetConfig data{model.cfg.latent_h, model.cfg.latent_w, model.cfg.latent_c};
    std::vector<Scene> images =
        gen_concept_set(data, spec, cfg.adapter.images, cfg.adapter.image_seed);

    ConceptAdapter adapter =
        ConceptAdapter::init(name, word, model.cfg, cfg.adapter.rank,
                             parse_variant(variant_name_s), cfg.adapter.seed);
    AdapterTrainOptions opts;
    opts.iters = cfg.adapter.iters;
    opts.lr = cfg.adapter.lr;
    opts.seed = cfg.adapter.seed;
    opts.threads = cfg.threads;
    opts.allow_ablation = ablation;
    opts.on_log = [](int iter, double loss) {
        std::cout << "iter " << iter << "  loss " << loss << "\n";
    };
    AdapterTrainStats stats = train_adapter(model, adapter, images, opts);

    std::vector<ConceptAdapter> all;
    if (fs::exists(db)) all = load_adapter_db(db, model.cfg);
    for (auto it = all.begin(); it != all.end();) {
        if (it->name == name) {
            if (!overwrite)
                throw ConfigError("adapter '" + name + "' already exists in '" + db +
                                  "' (use --overwrite to replace it)");
            it = all.erase(it);
        } else {
            ++it;
        }
    }
    all.push_back(std::move(adapter));
    save_adapter_db(db, all);

    std::cout << "concept loss " << stats.initial_loss << " -> " << stats.final_loss
              << "\nadapter db now holds:\n";
    for (const ConceptAdapter& ad : all)
        std::cout << "  " << ad.name << "  word=" << ad.bound_word
                  << "  variant=" << variant_name(ad.variant) << "  rank=" << ad.rank
                  << "\n";
    return 0;
}

int cmd_infer(const CommonFlags& common, const std::string& model_path,
              const std::string& db_path, const std::string& adapters_csv,
              bool no_adapters, const std::string& prompt_text,
              const std::string& focus_csv, const std::string& out_dir,
              long long seed_override, int steps_override, double guidance_override,
              double gamma_override, double amplify_override,
              double suppress_override, double tau_override, int n_override,
              int stage1_flag, int afg_flag, bool no_loda, bool stage1_only,
              bool merged, bool dump_maps) {
    RunConfig cfg = common.load();
    if (merged) cfg.apply_mode = "merged";
    if (seed_override >= 0) cfg.inference.seed = static_cast<uint64_t>(seed_override);
    if (steps_override > 0) cfg.inference.steps = steps_override;
    if (guidance_override >= 0) cfg.inference.guidance = guidance_override;
    if (gamma_override > 0) cfg.inference.gamma = gamma_override;
    if (!std::isnan(amplify_override)) cfg.inference.amplify = amplify_override;
    if (!std::isnan(suppress_override)) cfg.inference.suppress = suppress_override;
    if (!std::isnan(tau_override)) cfg.inference.tau = tau_override;
    if (n_override >= 0) cfg.inference.stage1_steps = n_override;
    if (stage1_flag == 0) cfg.stage1 = false;
    if (stage1_flag == 1) cfg.stage1 = true;
    if (afg_flag == 0) cfg.afg = false;
    if (afg_flag == 1) cfg.afg = true;
    if (no_loda) {
        cfg.stage1 = false;
        cfg.afg = false;
    }
    if (stage1_only) {
        cfg.stage1 = true;
        cfg.afg = false;
    }
    if (dump_maps) cfg.dump_maps = true;
    cfg.validate();

    const std::string out = resolve_output_path(out_dir);
    ensure_dir(out);

    InferSetup s = prepare_inference(cfg, model_path, db_path, adapters_csv,
                                     no_adapters, prompt_text, focus_csv);
    cfg.model = s.model.cfg;

    json header;
    header["type"] = "config";
    header["schema_version"] = 1;
    json run;
    run["prompt"] = prompt_text;
    json adapter_names = json::array();
    for (const ConceptAdapter& ad : s.adapters) adapter_names.push_back(ad.name);
    run["adapters"] = adapter_names;
    json token_map = json::object();
    for (size_t i = 0; i < s.tokens.size(); ++i)
        token_map[s.labels[i]] = s.tokens[i];
    run["tokens"] = token_map;
    run["apply_mode"] = cfg.apply_mode;
    run["stage1"] = s.inference.stage1;
    run["afg"] = s.inference.afg;
    header["run"] = run;
    header["config"] = config_to_json(cfg);

    Tensor final_latent;
    if (s.tokens.empty()) {
        SamplerOptions opts;
        opts.steps = s.inference.steps;
        opts.guidance = s.inference.guidance;
        opts.seed = s.inference.seed;
        opts.cond_hooks = s.hooks;
        final_latent = sample(s.model, s.prompt, opts).latent;
        write_text(out + "/diagnostics.jsonl", header.dump() + "\n");
    } else {
        LodaResult result = loda_sample(s.model, s.prompt, s.tokens, s.inference,
                                        s.hooks);
        final_latent = result.latent;
        write_diagnostics(out + "/diagnostics.jsonl", header, result, s.labels);
        if (cfg.dump_maps) {
            ensure_dir(out + "/maps");
            for (const StepDiagnostics& d : result.steps)
                for (size_t k = 0; k < s.labels.size(); ++k) {
                    char buf[64];
                    std::snprintf(buf, sizeof(buf), "step%03d_%s_mask.pgm", d.step,
                                  s.labels[k].c_str());
                    export_map(export_mask(d.masks[k]), out + "/maps/" + buf);
                    std::snprintf(buf, sizeof(buf), "step%03d_%s_map.pgm", d.step,
                                  s.labels[k].c_str());
                    export_map(d.maps[k], out + "/maps/" + buf);
                }
        }
    }

    write_text(out + "/resolved.json", header.dump(2) + "\n");
    Tensor image = final_latent.clone();
    for (int64_t i = 0; i < image.size(); ++i) {
        const double v = (image.at(i) + 1.0) / 2.0;
        image.data()[i] = std::min(1.0, std::max(0.0, v));
    }
    write_container(out + "/final.bin",
                    {{"kind", "sample"},
                     {"prompt", prompt_text},
                     {"seed", s.inference.seed}},
                    {{"latent", final_latent}, {"image", image}});
    export_ppm(image, out + "/preview.ppm");

    std::cout << "sample written to " << out << "\n";
    return 0;
}

struct AblateRun {
    std::string value;
    uint64_t seed;
    double iou = 0.0;
    double delta_h = 0.0;
    double final_kl_h = 0.0;
    bool masks_nonempty = false;
};

int cmd_ablate(const CommonFlags& common, const std::string& model_path,
               const std::string& db_path, const std::string& adapters_csv,
               const std::string& prompt_text, const std::string& axis,
               const std::string& values_csv, int seeds, long long base_seed,
               const std::string& out_dir) {
    RunConfig cfg = common.load();
    if (axis != "gamma" && axis != "p" && axis != "m" && axis != "N" &&
        axis != "variant")
        throw ConfigError("ablation axis must be one of gamma, p, m, N, variant");
    std::vector<std::string> values;
    {
        std::string t = values_csv;
        std::replace(t.begin(), t.end(), ',', ' ');
        values = split_words(t);
    }
    if (values.empty()) throw ConfigError("no ablation values given");
    if (seeds < 1) throw ConfigError("--seeds must be >= 1");

    const std::string out = resolve_output_path(out_dir);
    ensure_dir(out);

    std::vector<AblateRun> runs;
    for (const std::string& value : values)
        for (int i = 0; i < seeds; ++i)
            runs.push_back({value, static_cast<uint64_t>(base_seed) +
                                       static_cast<uint64_t>(i)});

    parallel_for(
        static_cast<int>(runs.size()),
        [&](int idx) {
            AblateRun& run = runs[static_cast<size_t>(idx)];
            RunConfig rc = cfg;
            std::string adapters = adapters_csv;
            if (axis == "gamma") rc.inference.gamma = std::stod(run.value);
            else if (axis == "p") rc.inference.amplify = std::stod(run.value);
            else if (axis == "m") rc.inference.suppress = std::stod(run.value);
            else if (axis == "N") rc.inference.stage1_steps = std::stoi(run.value);
            else if (axis == "variant" && run.value != "value") {
                // ablation variants live under suffixed names: <name>.key / <name>.kv
                const std::string suffix =
                    run.value == "key" ? ".key" : ".kv";
                std::string renamed;
                std::string t = adapters;
                std::replace(t.begin(), t.end(), ',', ' ');
                for (const std::string& n : split_words(t)) {
                    if (!renamed.empty()) renamed += ",";
                    renamed += n + suffix;
                }
                adapters = renamed;
            }
            rc.inference.seed = run.seed;
            rc.validate();
            InferSetup s = prepare_inference(rc, model_path, db_path, adapters,
                                             false, prompt_text, "");
            LodaResult result =
                loda_sample(s.model, s.prompt, s.tokens, s.inference, s.hooks);
            const StepDiagnostics& last = result.steps.back();
            run.iou = run_pairwise_iou(last);
            run.final_kl_h = last.kl_h;
            run.masks_nonempty = true;
            for (const BinaryMask& m : last.masks)
                run.masks_nonempty = run.masks_nonempty && m.count() > 0;
            double dh = 0.0;
            for (size_t k = 0; k < s.tokens.size(); ++k) {
                std::vector<double> series;
                for (const StepDiagnostics& d : result.steps)
                    series.push_back(d.entropy[k]);
                dh += entropy_delta(series);
            }
            run.delta_h = dh / static_cast<double>(s.tokens.size());
        },
        cfg.threads);

    std::string csv = "axis,value,seed,iou,delta_h,final_kl_h,masks_nonempty\n";
    for (const AblateRun& r : runs)
        csv += axis + "," + r.value + "," + std::to_string(r.seed) + "," +
               num_str(r.iou) + "," + num_str(r.delta_h) + "," +
               num_str(r.final_kl_h) + "," + (r.masks_nonempty ? "1" : "0") + "\n";
    write_text(out + "/runs.csv", csv);

    json report;
    report["schema_version"] = 1;
    report["axis"] = axis;
    report["config"] = config_to_json(cfg);
    json rows = json::array();
    for (const std::string& value : values) {
        std::vector<double> ious, dhs, kls;
        int nonempty = 0, total = 0;
        for (const AblateRun& r : runs)
            if (r.value == value) {
                ious.push_back(r.iou);
                dhs.push_back(r.delta_h);
                kls.push_back(r.final_kl_h);
                nonempty += r.masks_nonempty;
                ++total;
            }
        double dh_mean = 0.0, kl_mean = 0.0;
        for (double v : dhs) dh_mean += v;
        for (double v : kls) kl_mean += v;
        rows.push_back({{"value", value},
                        {"median_iou", median(ious)},
                        {"mean_delta_h", dh_mean / dhs.size()},
                        {"mean_final_kl_h", kl_mean / kls.size()},
                        {"nonempty_mask_rate",
                         static_cast<double>(nonempty) / total}});
    }
    report["rows"] = rows;
    write_text(out + "/report.json", report.dump(2) + "\n");
    std::cout << "ablation report written to " << out << "\n";
    return 0;
}

int cmd_analyze(const std::string& diagnostics_path, const std::string& out_dir) {
    std::ifstream is(diagnostics_path);
    if (!is) throw IoError("cannot open '" + diagnostics_path + "'");

    json config_rec;
    std::vector<json> steps;
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        json rec;
        try {
            rec = json::parse(line);
        } catch (const json::exception& e) {
            throw IoError(diagnostics_path + ":" + std::to_string(line_no) +
                          ": malformed JSONL record: " + e.what());
        }
        const std::string type = rec.value("type", "");
        if (type == "config") {
            const int version = rec.value("schema_version", 1);
            if (version > 1)
                throw IoError(diagnostics_path + ": diagnostics schema version " +
                              std::to_string(version) +
                              " is newer than supported version 1");
            config_rec = rec;
        }
        else if (type == "step") steps.push_back(rec);
        else
            throw IoError(diagnostics_path + ":" + std::to_string(line_no) +
                          ": unknown record type '" + type + "'");
    }
    if (line_no == 0) throw IoError(diagnostics_path + ": file is empty");
    if (steps.empty())
        throw IoError(diagnostics_path + ": no step records to analyze");

    const std::string out = resolve_output_path(out_dir);
    ensure_dir(out);

    std::vector<std::string> tokens;
    for (const auto& [label, value] : steps.front().at("entropy").items()) {
        (void)value;
        tokens.push_back(label);
    }

    json report;
    report["schema_version"] = 1;
    report["run_id"] = config_rec.is_null()
                           ? fs::path(diagnostics_path).stem().string()
                           : config_rec.at("run").value("prompt", "run");
    report["steps"] = steps.size();
    report["tokens"] = tokens;

    json series = json::object(), deltas = json::object();
    std::string csv = "token,delta_entropy\n";
    for (const std::string& tok : tokens) {
        json pts = json::array();
        std::vector<double> values;
        for (const json& s : steps) {
            pts.push_back({s.at("t").get<int>(), s.at("entropy").at(tok).get<double>()});
            values.push_back(s.at("entropy").at(tok).get<double>());
        }
        series[tok] = pts;
        const double dh = entropy_delta(values);
        deltas[tok] = dh;
        csv += tok + "," + num_str(dh) + "\n";
    }
    report["entropy_series"] = series;
    report["entropy_delta"] = deltas;

    // masks of the last step drive the IoU matrix and the exported grids
    const json& last = steps.back();
    int h = 0, w = 0;
    if (!config_rec.is_null()) {
        h = config_rec.at("config").at("model").value("latent_h", 0);
        w = config_rec.at("config").at("model").value("latent_w", 0);
    }
    if (h == 0) {
        // infer a square resolution from the hex length (4 cells per digit)
        const std::string hex = last.at("masks").at(tokens.front());
        const int cells = static_cast<int>(hex.size()) * 4;
        h = w = static_cast<int>(std::lround(std::sqrt(cells)));
    }

    std::vector<BinaryMask> masks;
    for (const std::string& tok : tokens)
        masks.push_back(mask_from_hex(last.at("masks").at(tok), h, w));

    json iou_matrix = json::array();
    for (size_t i = 0; i < masks.size(); ++i) {
        json row = json::array();
        for (size_t j = 0; j < masks.size(); ++j)
            row.push_back(i == j ? 1.0 : mask_iou(masks[i], masks[j]));
        iou_matrix.push_back(row);
    }
    report["iou_matrix"] = iou_matrix;
    json final_counts = json::object();
    for (size_t i = 0; i < tokens.size(); ++i)
        final_counts[tokens[i]] = masks[i].count();
    report["final_mask_counts"] = final_counts;

    write_text(out + "/report.json", report.dump(2) + "\n");
    write_text(out + "/entropy.csv", csv);
    std::vector<Tensor> mask_maps;
    for (const BinaryMask& m : masks) mask_maps.push_back(export_mask(m));
    export_map_grid(mask_maps, out + "/final_masks.pgm");

    std::cout << "analysis report written to " << out << "\n";
    return 0;
}

}  // namespace

int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"toy-scale token-wise value adaptation and two-stage "
                 "attention-disentangling inference"};
    app.require_subcommand(1);

    // train-base
    CommonFlags tb_common;
    std::string tb_out = "model.ckpt";
    bool tb_resume = false;
    long long tb_steps = -1, tb_seed = -1;
    double tb_lr = -1;
    CLI::App* tb = app.add_subcommand("train-base", "train the base diffusion model");
    tb_common.attach(tb);
    tb->add_option("--out", tb_out, "checkpoint output path");
    tb->add_flag("--resume", tb_resume, "continue from an existing checkpoint");
    tb->add_option("--steps", tb_steps, "training steps");
    tb->add_option("--lr", tb_lr, "learning rate");
    tb->add_option("--seed", tb_seed, "training seed");
    std::string tb_export;
    int tb_export_count = 16;
    tb->add_option("--export-dataset", tb_export,
                   "also write sample scenes + manifest to this directory");
    tb->add_option("--export-count", tb_export_count, "scenes to export");

    // train-adapter
    CommonFlags ta_common;
    std::string ta_model, ta_db = "adapters.db", ta_name, ta_word;
    std::string ta_variant = "value", ta_texture = "checker", ta_shape = "square";
    bool ta_ablation = false, ta_overwrite = false, ta_list = false;
    int ta_rank = -1, ta_iters = -1, ta_color = 0;
    double ta_lr = -1;
    CLI::App* ta = app.add_subcommand("train-adapter",
                                      "train a concept adapter against a frozen base");
    ta_common.attach(ta);
    ta->add_option("--model", ta_model, "base checkpoint");
    ta->add_option("--db", ta_db, "adapter database path");
    ta->add_option("--name", ta_name, "concept name");
    ta->add_option("--word", ta_word, "bound vocabulary word");
    ta->add_option("--variant", ta_variant, "value, key or key+value");
    ta->add_flag("--ablation", ta_ablation,
                 "allow the key / key+value disruption variants");
    ta->add_option("--rank", ta_rank, "adapter rank");
    ta->add_option("--iters", ta_iters, "training iterations");
    ta->add_option("--lr", ta_lr, "learning rate");
    ta->add_option("--concept-color", ta_color, "signature palette index");
    ta->add_option("--concept-texture", ta_texture, "checker, stripes or dots");
    ta->add_option("--concept-shape", ta_shape, "square, circle or triangle");
    ta->add_flag("--overwrite", ta_overwrite, "replace an existing entry");
    ta->add_flag("--list", ta_list, "list database entries and exit");

    // infer
    CommonFlags in_common;
    std::string in_model, in_db, in_adapters, in_prompt, in_focus, in_out = "out";
    long long in_seed = -1;
    int in_steps = -1, in_n = -1;
    double in_guidance = -1, in_gamma = -1;
    double in_amplify = std::nan(""), in_suppress = std::nan(""), in_tau = std::nan("");
    bool in_no_adapters = false, in_no_loda = false, in_stage1_only = false;
    bool in_merged = false, in_dump = false;
    bool in_stage1_on = false, in_stage1_off = false;
    bool in_afg_on = false, in_afg_off = false;
    CLI::App* in = app.add_subcommand("infer", "sample with adapters and LODA");
    in_common.attach(in);
    in->add_option("--model", in_model, "base checkpoint")->required();
    in->add_option("--db", in_db, "adapter database");
    in->add_option("--adapters", in_adapters,
                   "comma-separated adapter names (default: all bound in prompt)");
    in->add_flag("--no-adapters", in_no_adapters, "sample without adapters");
    in->add_option("--prompt", in_prompt, "prompt words")->required();
    in->add_option("--focus", in_focus,
                   "extra target words for attention control, comma-separated");
    in->add_option("--out", in_out, "output directory");
    in->add_option("--seed", in_seed, "sampling seed");
    in->add_option("--steps", in_steps, "DDIM steps");
    in->add_option("--guidance", in_guidance, "CFG weight");
    in->add_option("--gamma", in_gamma, "AFG percentile");
    in->add_option("--amplify", in_amplify, "AFG p");
    in->add_option("--suppress", in_suppress, "AFG m");
    in->add_option("--tau", in_tau, "stage-1 ReLU threshold");
    in->add_option("--stage1-steps", in_n, "stage-1 budget N");
    in->add_flag("--stage1", in_stage1_on, "force stage 1 on");
    in->add_flag("--no-stage1", in_stage1_off, "force stage 1 off");
    in->add_flag("--afg", in_afg_on, "force AFG on");
    in->add_flag("--no-afg", in_afg_off, "force AFG off");
    in->add_flag("--no-loda", in_no_loda, "disable both LODA stages");
    in->add_flag("--stage1-only", in_stage1_only, "stage 1 without AFG");
    in->add_flag("--merged", in_merged, "merged-adapter baseline application");
    in->add_flag("--dump-maps", in_dump, "write per-step mask graymaps");

    // ablate
    CommonFlags ab_common;
    std::string ab_model, ab_db, ab_adapters, ab_prompt, ab_axis, ab_values;
    std::string ab_out = "ablation";
    int ab_seeds = 8;
    long long ab_seed = 0;
    CLI::App* ab = app.add_subcommand("ablate", "sweep a hyperparameter axis");
    ab_common.attach(ab);
    ab->add_option("--model", ab_model, "base checkpoint")->required();
    ab->add_option("--db", ab_db, "adapter database")->required();
    ab->add_option("--adapters", ab_adapters, "comma-separated adapter names");
    ab->add_option("--prompt", ab_prompt, "prompt words")->required();
    ab->add_option("--axis", ab_axis, "gamma, p, m, N or variant")->required();
    ab->add_option("--values", ab_values, "comma-separated axis values")->required();
    ab->add_option("--seeds", ab_seeds, "seeds per value");
    ab->add_option("--seed", ab_seed, "base seed");
    ab->add_option("--out", ab_out, "output directory");

    // analyze
    std::string an_diag, an_out = "analysis";
    CLI::App* an = app.add_subcommand("analyze", "summarize a diagnostics file");
    an->add_option("--diagnostics", an_diag, "diagnostics JSONL path")->required();
    an->add_option("--out", an_out, "output directory");

    std::vector<std::string> argv_storage = args;
    std::vector<const char*> argv = {"csplit"};
    for (const std::string& a : argv_storage) argv.push_back(a.c_str());

    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (tb->parsed())
            return cmd_train_base(tb_common, tb_out, tb_resume, tb_steps, tb_lr,
                                  tb_seed, tb_export, tb_export_count);
        if (ta->parsed()) {
            if (!ta_list && (ta_model.empty() || ta_name.empty() || ta_word.empty()))
                throw ConfigError(
                    "train-adapter needs --model, --name and --word");
            return cmd_train_adapter(ta_common, ta_model, ta_db, ta_name, ta_word,
                                     ta_variant, ta_ablation, ta_rank, ta_iters,
                                     ta_lr, ta_color, ta_texture, ta_shape,
                                     ta_overwrite, ta_list);
        }
        if (in->parsed())
            return cmd_infer(in_common, in_model, in_db, in_adapters, in_no_adapters,
                             in_prompt, in_focus, in_out, in_seed, in_steps,
                             in_guidance, in_gamma, in_amplify, in_suppress, in_tau,
                             in_n, in_stage1_on ? 1 : (in_stage1_off ? 0 : -1),
                             in_afg_on ? 1 : (in_afg_off ? 0 : -1), in_no_loda,
                             in_stage1_only, in_merged, in_dump);
        if (ab->parsed())
            return cmd_ablate(ab_common, ab_model, ab_db, ab_adapters, ab_prompt,
                              ab_axis, ab_values, ab_seeds, ab_seed, ab_out);
        if (an->parsed()) return cmd_analyze(an_diag, an_out);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ContractError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

}  // namespace csplit
