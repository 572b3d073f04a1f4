#include "eraser/commands.h"

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eraser/checkpoint.h"
#include "eraser/config.h"
#include "eraser/eval.h"
#include "eraser/gradcheck_suite.h"
#include "eraser/image_io.h"
#include "eraser/sampler.h"
#include "eraser/train.h"

namespace eraser {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

void require_cfg(bool ok, const std::string & msg) {
    if (!ok) throw config_error(msg);
}

struct Args {
    std::string command;
    std::map<std::string, std::string> local; // command-level flags
    std::vector<std::pair<std::string, std::string>> overrides; // dotted, in order
};

const char * kUsage =
    "usage: eraser <command> [--config file] [--section.key value] ...\n"
    "commands:\n"
    "  train       --out dir [--config file]\n"
    "  invert      --ckpt file --scene-seed N --out dir\n"
    "  erase       --ckpt file --bundle path --target \"red square\" --out dir\n"
    "  reconstruct --ckpt file --bundle path --out dir\n"
    "  gradcheck   [--trials N] [--seed N]\n"
    "  sweep       --ckpt file --values a,b,c [--param lambda] [--scenes N]\n"
    "              [--scene-seed base] --out dir\n"
    "flags with a dot (e.g. --guidance.lambda 0.5) override config fields;\n"
    "--lambda, --v, --N, --s are shorthands for the guidance fields.\n";

Args parse_args(int argc, char ** argv) {
    require_cfg(argc >= 2, std::string("missing command\n") + kUsage);
    Args a;
    a.command = argv[1];
    const std::map<std::string, std::string> alias = {
        {"lambda", "guidance.lambda"},
        {"v", "guidance.v"},
        {"N", "guidance.n_opt"},
        {"s", "guidance.s"},
    };
    const std::vector<std::string> local_names = {"config", "out",    "ckpt",   "bundle",
                                                  "target", "scene-seed", "trials", "seed",
                                                  "param",  "values", "scenes"};
    for (int i = 2; i < argc; ++i) {
        std::string flag = argv[i];
        require_cfg(flag.rfind("--", 0) == 0, "unexpected argument '" + flag + "'");
        flag = flag.substr(2);
        require_cfg(i + 1 < argc, "flag --" + flag + " needs a value");
        std::string value = argv[++i];
        auto al = alias.find(flag);
        if (al != alias.end()) {
            a.overrides.emplace_back(al->second, value);
        } else if (flag.find('.') != std::string::npos) {
            a.overrides.emplace_back(flag, value);
        } else if (std::find(local_names.begin(), local_names.end(), flag) != local_names.end()) {
            require_cfg(a.local.find(flag) == a.local.end(), "duplicate flag --" + flag);
            a.local[flag] = value;
        } else {
            throw config_error("unknown flag --" + flag + "\n" + kUsage);
        }
    }
    return a;
}

RunConfig build_config(const Args & a) {
    RunConfig cfg;
    auto it = a.local.find("config");
    if (it != a.local.end()) cfg = RunConfig::load_file(it->second);
    for (const auto & [path, value] : a.overrides) cfg.set_path(path, value);
    auto out = a.local.find("out");
    if (out != a.local.end()) cfg.io.out_dir = out->second;
    cfg.validate();
    return cfg;
}

const std::string & need(const Args & a, const std::string & flag) {
    auto it = a.local.find(flag);
    require_cfg(it != a.local.end(), "command '" + a.command + "' needs --" + flag);
    return it->second;
}

uint64_t parse_u64(const std::string & flag, const std::string & value) {
    try {
        size_t used = 0;
        uint64_t v = std::stoull(value, &used);
        require_cfg(used == value.size(), "--" + flag + ": trailing characters");
        return v;
    } catch (const std::logic_error &) {
        throw config_error("--" + flag + ": cannot parse '" + value + "'");
    }
}

void write_text(const std::string & path, const std::string & text) {
    std::ofstream out(path, std::ios::binary);
    if (!out.good()) throw contract_error("cannot open '" + path + "' for writing");
    out << text;
    if (!out.good()) throw contract_error("failed writing '" + path + "'");
}

std::string out_dir_ready(const RunConfig & cfg) {
    fs::create_directories(cfg.io.out_dir);
    write_text(cfg.io.out_dir + "/config.json", cfg.to_json().dump(2) + "\n");
    return cfg.io.out_dir;
}

std::string bundle_file(const std::string & path) {
    if (fs::is_directory(path)) return path + "/bundle.blob";
    return path;
}

// "red square" -> the matching scene object; returns its index and fills the
// guidance target word positions.
int resolve_target(const std::string & phrase, const InversionBundle & bundle,
                   GuidanceConfig & gcfg) {
    std::istringstream in(phrase);
    std::vector<int> words;
    std::string word;
    while (in >> word) words.push_back(token_id(word));
    require_cfg(words.size() == 2, "--target must be two words, e.g. \"red square\"");
    for (size_t i = 0; i < bundle.scene_objects.size(); ++i) {
        const SceneObject & o = bundle.scene_objects[i];
        if (o.color_token() == words[0] && o.shape_token() == words[1]) {
            gcfg.target_tokens = {{static_cast<int>(2 * i), static_cast<int>(2 * i + 1)}};
            return static_cast<int>(i);
        }
    }
    throw config_error("target '" + phrase + "' does not name an object in the bundle's scene");
}

json report_json(const EraseReport & rep) {
    json j;
    j["psnr_reconstruction"] = rep.psnr_reconstruction;
    j["attn_drop"] = rep.attn_drop;
    j["bg_mse"] = rep.bg_mse;
    j["obj_mse_vs_clean"] = rep.obj_mse_vs_clean;
    j["attn_step"] = rep.attn_step;
    return j;
}

void write_edit_outputs(const std::string & dir, const EditResult & result,
                        const EraseReport & rep) {
    write_ppm(dir + "/recon.ppm", result.recon);
    write_ppm(dir + "/edit.ppm", result.edit);
    write_text(dir + "/report.json", report_json(rep).dump(2) + "\n");
    std::string lines;
    for (const StepLog & log : result.logs) {
        json j;
        j["t"] = log.t_from;
        j["t_to"] = log.t_to;
        j["energy"] = log.energy;
        j["perturb_l1"] = log.perturb_l1;
        j["repeats"] = log.repeats;
        j["repeat_energies"] = log.repeat_energies;
        lines += j.dump() + "\n";
    }
    write_text(dir + "/logs.jsonl", lines);
}

int cmd_train(const Args & a) {
    RunConfig cfg = build_config(a);
    std::string dir = out_dir_ready(cfg);
    NoiseSchedule sched = cfg.make_schedule();
    Rng init_rng(cfg.model.seed, Stream::init);
    DenoiserWeights w = DenoiserWeights::init(init_rng);
    AdamState opt = AdamState::init_like(w);
    TrainConfig tc = cfg.make_train();
    Rng data_rng(cfg.train.seed, Stream::data_gen);
    Rng noise_rng(cfg.train.seed, Stream::train_noise);

    std::ofstream log(dir + "/train_log.jsonl", std::ios::binary);
    require_cfg(log.good(), "cannot open training log in '" + dir + "'");
    for (int step = 1; step <= cfg.train.steps; ++step) {
        std::vector<TrainSample> batch = draw_batch(data_rng, tc.batch_size);
        double loss = train_step(w, opt, batch, noise_rng, sched, tc);
        if (step % cfg.train.log_every == 0 || step == 1 || step == cfg.train.steps) {
            json j;
            j["step"] = step;
            j["loss"] = loss;
            log << j.dump() << "\n";
        }
        if (step % cfg.train.ckpt_every == 0) {
            char name[64];
            std::snprintf(name, sizeof(name), "/ckpt_step%06d.blob", step);
            save_checkpoint(dir + name, w, sched, cfg.model.image_size);
        }
    }
    log.flush();
    save_checkpoint(dir + "/ckpt.blob", w, sched, cfg.model.image_size);
    std::cout << "checkpoint written to " << dir << "/ckpt.blob\n";
    return 0;
}

int cmd_invert(const Args & a) {
    RunConfig cfg = build_config(a);
    Checkpoint ck = load_checkpoint(need(a, "ckpt"));
    uint64_t scene_seed = parse_u64("scene-seed", need(a, "scene-seed"));
    std::string dir = out_dir_ready(cfg);

    Rng scene_rng(scene_seed, Stream::data_gen);
    Scene scene = gen_scene(scene_rng);
    InversionBundle bundle =
        invert_scene(scene, scene_seed, ck.weights, ck.sched, cfg.inversion.steps, cfg.make_nullopt());
    save_bundle(dir + "/bundle.blob", bundle, ck.weights, ck.sched);
    write_ppm(dir + "/scene.ppm", scene.image);
    std::string lines;
    for (size_t j = 0; j < bundle.loss_log.size(); ++j) {
        json rec;
        rec["step"] = j;
        rec["t"] = bundle.grid[bundle.grid.size() - 1 - j];
        rec["initial"] = bundle.loss_log[j].first;
        rec["final"] = bundle.loss_log[j].second;
        lines += rec.dump() + "\n";
    }
    write_text(dir + "/invert_log.jsonl", lines);
    std::cout << "bundle written to " << dir << "/bundle.blob\n";
    return 0;
}

int run_edit_command(const Args & a, bool null_edit) {
    RunConfig cfg = build_config(a);
    Checkpoint ck = load_checkpoint(need(a, "ckpt"));
    InversionBundle bundle = load_bundle(bundle_file(need(a, "bundle")), ck.sched, ck.weights);
    GuidanceConfig gcfg = cfg.make_guidance();

    int target_index = 0;
    if (null_edit) {
        gcfg.v = 0.0;
        gcfg.n_opt = 0;
        // the guided path never runs; any in-prompt words satisfy the contract
        gcfg.target_tokens = {{0, 1}};
    } else {
        target_index = resolve_target(need(a, "target"), bundle, gcfg);
    }

    std::string dir = out_dir_ready(cfg);
    SamplerConfig scfg;
    scfg.inject_self_attention = cfg.sampler.inject_self_attention;
    EditResult result = sample_edit(bundle, ck.weights, ck.sched, gcfg, scfg);
    Scene scene = scene_from_objects(bundle.scene_objects);
    EraseReport rep = erase_report(result, scene, target_index, ck.weights, ck.sched);
    write_edit_outputs(dir, result, rep);
    std::cout << "report: " << report_json(rep).dump() << "\n";
    return 0;
}

int cmd_gradcheck(const Args & a) {
    int trials = 100;
    uint64_t seed = 1;
    auto it = a.local.find("trials");
    if (it != a.local.end()) trials = static_cast<int>(parse_u64("trials", it->second));
    it = a.local.find("seed");
    if (it != a.local.end()) seed = parse_u64("seed", it->second);

    GradCheckReport rep = run_gradcheck(trials, seed);
    for (const auto & c : rep.cases) {
        std::printf("%-22s worst %.3e  tol %.0e  %s\n", c.name.c_str(), c.worst, c.tol,
                    c.pass ? "ok" : "FAIL");
    }
    std::printf("%zu cases, %d trials each, %.1f s: %s\n", rep.cases.size(), trials, rep.seconds,
                rep.all_pass ? "all ok" : "FAILURES");
    return rep.all_pass ? 0 : 1;
}

int cmd_sweep(const Args & a) {
    RunConfig cfg = build_config(a);
    Checkpoint ck = load_checkpoint(need(a, "ckpt"));
    std::string param = "lambda";
    auto it = a.local.find("param");
    if (it != a.local.end()) param = it->second;
    std::string dotted = param.find('.') == std::string::npos ? "guidance." + param : param;

    std::vector<std::string> values;
    {
        std::istringstream in(need(a, "values"));
        std::string item;
        while (std::getline(in, item, ',')) {
            require_cfg(!item.empty(), "--values has an empty entry");
            values.push_back(item);
        }
        require_cfg(!values.empty(), "--values must list at least one value");
    }
    int scenes = 16;
    it = a.local.find("scenes");
    if (it != a.local.end()) scenes = static_cast<int>(parse_u64("scenes", it->second));
    require_cfg(scenes >= 1, "--scenes must be >= 1");
    uint64_t base_seed = 1000;
    it = a.local.find("scene-seed");
    if (it != a.local.end()) base_seed = parse_u64("scene-seed", it->second);

    std::string dir = out_dir_ready(cfg);

    // One inversion per scene, reused across every parameter value.
    std::vector<InversionBundle> bundles;
    std::vector<Scene> scene_list;
    for (int i = 0; i < scenes; ++i) {
        uint64_t seed = base_seed + static_cast<uint64_t>(i);
        Rng rng(seed, Stream::data_gen);
        scene_list.push_back(gen_scene(rng));
        bundles.push_back(invert_scene(scene_list.back(), seed, ck.weights, ck.sched,
                                       cfg.inversion.steps, cfg.make_nullopt()));
    }

    std::string csv = "param,value,scene_seed,psnr_reconstruction,attn_drop,bg_mse,obj_mse_vs_clean\n";
    for (const std::string & value : values) {
        RunConfig run = cfg;
        run.set_path(dotted, value);
        run.validate();
        SamplerConfig scfg;
        scfg.inject_self_attention = run.sampler.inject_self_attention;
        for (int i = 0; i < scenes; ++i) {
            GuidanceConfig gcfg = run.make_guidance();
            gcfg.target_tokens = {{0, 1}}; // erase the scene's first object
            EditResult result = sample_edit(bundles[static_cast<size_t>(i)], ck.weights, ck.sched,
                                            gcfg, scfg);
            EraseReport rep =
                erase_report(result, scene_list[static_cast<size_t>(i)], 0, ck.weights, ck.sched);
            csv += param + "," + value + "," + std::to_string(base_seed + static_cast<uint64_t>(i)) +
                   "," + json(rep.psnr_reconstruction).dump() + "," + json(rep.attn_drop).dump() +
                   "," + json(rep.bg_mse).dump() + "," + json(rep.obj_mse_vs_clean).dump() + "\n";
        }
    }
    write_text(dir + "/sweep.csv", csv);
    std::cout << "sweep written to " << dir << "/sweep.csv\n";
    return 0;
}

} // namespace

int run_cli(int argc, char ** argv) {
    try {
        Args a = parse_args(argc, argv);
        if (a.command == "train") return cmd_train(a);
        if (a.command == "invert") return cmd_invert(a);
        if (a.command == "erase") return run_edit_command(a, false);
        if (a.command == "reconstruct") return run_edit_command(a, true);
        if (a.command == "gradcheck") return cmd_gradcheck(a);
        if (a.command == "sweep") return cmd_sweep(a);
        throw config_error("unknown command '" + a.command + "'\n" + kUsage);
    } catch (const config_error & e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const contract_error & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception & e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}

} // namespace eraser
