#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "conceptsplit/adapters.hpp"
#include "conceptsplit/analysis.hpp"
#include "conceptsplit/cli.hpp"
#include "conceptsplit/dataset.hpp"
#include "conceptsplit/loda.hpp"
#include "conceptsplit/model.hpp"
#include "conceptsplit/train.hpp"
#include "conceptsplit/vocab.hpp"

namespace py = pybind11;
using namespace csplit;

namespace {

Tensor tensor_from_array(const py::array_t<double, py::array::c_style |
                                                       py::array::forcecast>& a) {
    Shape shape;
    for (py::ssize_t i = 0; i < a.ndim(); ++i)
        shape.push_back(static_cast<int>(a.shape(i)));
    std::vector<double> data(a.data(), a.data() + a.size());
    return Tensor::from_data(shape, std::move(data));
}

py::array_t<double> array_from_tensor(const Tensor& t) {
    std::vector<py::ssize_t> shape;
    for (int d : t.shape()) shape.push_back(d);
    py::array_t<double> out(shape);
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

BinaryMask mask_from_array(const py::array_t<double, py::array::c_style |
                                                         py::array::forcecast>& a) {
    if (a.ndim() != 2) throw ContractError("mask must be 2-d");
    BinaryMask m;
    m.h = static_cast<int>(a.shape(0));
    m.w = static_cast<int>(a.shape(1));
    m.cells.resize(static_cast<size_t>(a.size()));
    for (py::ssize_t i = 0; i < a.size(); ++i)
        m.cells[static_cast<size_t>(i)] = a.data()[i] != 0.0 ? 1 : 0;
    return m;
}

TokenDistribution dist_from_array(const py::array_t<double, py::array::c_style |
                                                               py::array::forcecast>& a) {
    if (a.ndim() != 2) throw ContractError("distribution must be 2-d");
    TokenDistribution d;
    d.p = tensor_from_array(a);
    d.h = static_cast<int>(a.shape(0));
    d.w = static_cast<int>(a.shape(1));
    return d;
}

InferenceConfig inference_from_kwargs(int steps, double guidance, int stage1_steps,
                                      double tau, double gamma, double amplify,
                                      double suppress, uint64_t seed, bool stage1,
                                      bool afg) {
    InferenceConfig cfg;
    cfg.steps = steps;
    cfg.guidance = guidance;
    cfg.stage1_steps = stage1_steps;
    cfg.tau = tau;
    cfg.gamma = gamma;
    cfg.amplify = amplify;
    cfg.suppress = suppress;
    cfg.seed = seed;
    cfg.stage1 = stage1;
    cfg.afg = afg;
    return cfg;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "token-wise value adaptation and attention-disentangling inference "
              "on a toy latent diffusion model";

    py::register_exception<ConfigError>(m, "ConfigError");
    py::register_exception<ContractError>(m, "ContractError");
    py::register_exception<NumericError>(m, "NumericFailure");

    m.def("set_numeric_mode", [](const std::string& mode) {
        if (mode == "verify") set_numeric_mode(NumericMode::verify);
        else if (mode == "fast") set_numeric_mode(NumericMode::fast);
        else throw ConfigError("numeric mode must be 'fast' or 'verify'");
    });
    m.def("vocabulary", [] { return builtin_vocabulary(); });

    // ---- math operations ----
    m.def("pairwise_kl", [](const py::array_t<double>& p, const py::array_t<double>& q) {
        return pairwise_kl_value(dist_from_array(p), dist_from_array(q));
    });
    m.def("harmonic_mean",
          [](const std::vector<double>& v) { return harmonic_mean(v); });
    m.def("kl_loss", [](double klh, double tau) { return kl_loss(klh, tau); });
    m.def("eta_schedule", &eta_schedule, py::arg("t"), py::arg("total_steps"),
          py::arg("base") = 40.0, py::arg("slope") = 20.0);
    m.def("attention_entropy", [](const py::array_t<double>& a) {
        return attention_entropy(tensor_from_array(a));
    });
    m.def("mask_iou", [](const py::array_t<double>& a, const py::array_t<double>& b) {
        return mask_iou(mask_from_array(a), mask_from_array(b));
    });
    m.def(
        "gaussian_blur",
        [](const py::array_t<double>& a, int ksize, double sigma) {
            return array_from_tensor(gaussian_blur_2d(tensor_from_array(a), ksize, sigma));
        },
        py::arg("map"), py::arg("ksize") = 3, py::arg("sigma") = 1.0);
    m.def("smooth_and_normalize", [](const py::array_t<double>& a) {
        return array_from_tensor(smooth_and_normalize(tensor_from_array(a)).p);
    });
    m.def(
        "percentile_mask",
        [](const py::array_t<double>& map, double gamma) {
            AttentionAggregate agg;
            const int h = static_cast<int>(map.shape(0));
            const int w = static_cast<int>(map.shape(1));
            agg.map = tensor_from_array(map).reshaped_view({h * w, 1});
            agg.h = h;
            agg.w = w;
            agg.token_indices = {0};
            AfgMaskSet ms = compute_afg_masks(agg, gamma);
            return py::make_tuple(ms.thresholds[0],
                                  array_from_tensor(export_mask(ms.masks[0])));
        },
        py::arg("map"), py::arg("gamma"));
    m.def(
        "apply_afg",
        [](const py::array_t<double>& logits, const std::vector<py::array_t<double>>& masks,
           const std::vector<int>& token_indices, double p, double m_) {
            AfgMaskSet ms;
            ms.token_indices = token_indices;
            for (const auto& a : masks) {
                ms.masks.push_back(mask_from_array(a));
                ms.thresholds.push_back(0.0);
            }
            if (!ms.masks.empty()) {
                ms.h = ms.masks[0].h;
                ms.w = ms.masks[0].w;
            }
            return array_from_tensor(apply_afg(tensor_from_array(logits), ms, p, m_));
        },
        py::arg("logits"), py::arg("masks"), py::arg("token_indices"),
        py::arg("p") = 3.0, py::arg("m") = -1e8);

    // ---- dataset ----
    m.def(
        "gen_scene",
        [](uint64_t seed, int objects) {
            Scene s = gen_scene(DatasetConfig{}, seed, objects);
            return py::make_tuple(array_from_tensor(s.canvas), s.caption);
        },
        py::arg("seed"), py::arg("objects") = 2);

    // ---- model / adapters / inference ----
    py::class_<ModelConfig>(m, "ModelConfig")
        .def(py::init<>())
        .def_readwrite("latent_h", &ModelConfig::latent_h)
        .def_readwrite("latent_w", &ModelConfig::latent_w)
        .def_readwrite("latent_c", &ModelConfig::latent_c)
        .def_readwrite("model_dim", &ModelConfig::model_dim)
        .def_readwrite("blocks", &ModelConfig::blocks)
        .def_readwrite("heads", &ModelConfig::heads)
        .def_readwrite("text_dim", &ModelConfig::text_dim)
        .def_readwrite("max_tokens", &ModelConfig::max_tokens)
        .def_readwrite("ffn_dim", &ModelConfig::ffn_dim)
        .def_readwrite("train_timesteps", &ModelConfig::train_timesteps);

    py::class_<ConceptAdapter>(m, "ConceptAdapter")
        .def_readonly("name", &ConceptAdapter::name)
        .def_readonly("bound_word", &ConceptAdapter::bound_word)
        .def_readonly("rank", &ConceptAdapter::rank);

    py::class_<DenoiserModel>(m, "Model")
        .def_static("init", &DenoiserModel::init, py::arg("config"), py::arg("seed"))
        .def_static("load", &load_model, py::arg("path"))
        .def("save", [](const DenoiserModel& mdl, const std::string& path) {
            save_model(mdl, path);
        })
        .def_property_readonly("steps_done",
                               [](const DenoiserModel& mdl) { return mdl.train_steps_done; })
        .def(
            "train",
            [](DenoiserModel& mdl, long long steps, int batch, double lr,
               uint64_t seed) {
                DatasetConfig data{mdl.cfg.latent_h, mdl.cfg.latent_w,
                                   mdl.cfg.latent_c};
                TrainBaseOptions opts;
                opts.steps = steps;
                opts.batch = batch;
                opts.lr = lr;
                opts.seed = seed;
                opts.holdout_size = 8;
                TrainStats st = train_base(mdl, data, opts);
                return py::make_tuple(st.initial_holdout_loss, st.final_holdout_loss);
            },
            py::arg("steps"), py::arg("batch") = 4, py::arg("lr") = 3e-4,
            py::arg("seed") = 1)
        .def(
            "train_adapter",
            [](DenoiserModel& mdl, const std::string& name, const std::string& word,
               int color, int texture, int rank, int iters, double lr,
               uint64_t seed) {
                DatasetConfig data{mdl.cfg.latent_h, mdl.cfg.latent_w,
                                   mdl.cfg.latent_c};
                ConceptSpec spec;
                spec.name = name;
                spec.bound_word = word;
                spec.color_id = color;
                spec.texture = texture;
                ConceptAdapter ad = ConceptAdapter::init(
                    name, word, mdl.cfg, rank, ConceptAdapter::Variant::value, seed);
                AdapterTrainOptions opts;
                opts.iters = iters;
                opts.lr = lr;
                opts.seed = seed;
                AdapterTrainStats st = train_adapter(
                    mdl, ad, gen_concept_set(data, spec, 4, seed ^ 0x5a5a), opts);
                return py::make_tuple(ad, st.initial_loss, st.final_loss);
            },
            py::arg("name"), py::arg("word"), py::arg("color") = 0,
            py::arg("texture") = 0, py::arg("rank") = 8, py::arg("iters") = 50,
            py::arg("lr") = 1e-3, py::arg("seed") = 7)
        .def(
            "sample",
            [](const DenoiserModel& mdl, const std::string& prompt, uint64_t seed,
               int steps, double guidance) {
                PromptEncoding enc = mdl.embedder.encode(split_words(prompt));
                SamplerOptions opts;
                opts.steps = steps;
                opts.guidance = guidance;
                opts.seed = seed;
                return array_from_tensor(sample(mdl, enc, opts).latent);
            },
            py::arg("prompt"), py::arg("seed") = 0, py::arg("steps") = 50,
            py::arg("guidance") = 7.5)
        .def(
            "loda_sample",
            [](const DenoiserModel& mdl, const std::string& prompt,
               const std::vector<ConceptAdapter>& adapters, int steps,
               double guidance, int stage1_steps, double tau, double gamma,
               double amplify, double suppress, uint64_t seed, bool stage1,
               bool afg) {
                PromptEncoding enc = mdl.embedder.encode(split_words(prompt));
                std::vector<const ConceptAdapter*> refs;
                for (const ConceptAdapter& ad : adapters) refs.push_back(&ad);
                AdapterSet set =
                    refs.empty() ? AdapterSet{} : bind_adapters(refs, enc);
                std::vector<int> S;
                for (const AdapterBinding& e : set.entries) S.push_back(e.position);
                std::sort(S.begin(), S.end());
                InferenceConfig cfg = inference_from_kwargs(
                    steps, guidance, stage1_steps, tau, gamma, amplify, suppress,
                    seed, stage1, afg);
                LodaResult r = loda_sample(mdl, enc, S, cfg,
                                           set.entries.empty() ? Hooks{}
                                                               : token_wise_hooks(set));
                py::list diag;
                for (const StepDiagnostics& d : r.steps) {
                    py::dict rec;
                    rec["step"] = d.step;
                    rec["t"] = d.t;
                    rec["kl_h"] = d.kl_h;
                    rec["l_kl"] = d.loss;
                    rec["eta"] = d.eta;
                    rec["stage1"] = d.stage1_active;
                    rec["afg"] = d.afg_active;
                    rec["entropy"] = d.entropy;
                    rec["mask_counts"] = d.mask_counts;
                    py::list masks;
                    for (const BinaryMask& bm : d.masks)
                        masks.append(array_from_tensor(export_mask(bm)));
                    rec["masks"] = masks;
                    diag.append(rec);
                }
                return py::make_tuple(array_from_tensor(r.latent), diag);
            },
            py::arg("prompt"), py::arg("adapters") = std::vector<ConceptAdapter>{},
            py::arg("steps") = 50, py::arg("guidance") = 7.5,
            py::arg("stage1_steps") = 10, py::arg("tau") = 1.0,
            py::arg("gamma") = 0.9, py::arg("amplify") = 3.0,
            py::arg("suppress") = -1e8, py::arg("seed") = 0,
            py::arg("stage1") = true, py::arg("afg") = true);

    m.def("save_adapter_db", &save_adapter_db, py::arg("path"), py::arg("adapters"));
    m.def(
        "load_adapter_db",
        [](const std::string& path, const DenoiserModel& mdl) {
            return load_adapter_db(path, mdl.cfg);
        },
        py::arg("path"), py::arg("model"));

    m.def("run_cli", &run_cli, py::arg("args"),
          "invoke the command-line interface in-process; returns the exit code");
}
