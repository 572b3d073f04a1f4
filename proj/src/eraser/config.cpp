#include "eraser/config.h"

#include <cstdint>
#include <fstream>
#include <vector>

#include "eraser/image_io.h"

namespace eraser {

namespace {

void require_cfg(bool ok, const std::string & msg) {
    if (!ok) throw config_error(msg);
}

enum class FKind { i32, u64, f64, boolean, str };

struct FieldRef {
    const char * section;
    const char * key;
    FKind kind;
    void * ptr;
};

std::vector<FieldRef> field_table(RunConfig & c) {
    return {
        {"schedule", "T", FKind::i32, &c.schedule.T},
        {"schedule", "beta_start", FKind::f64, &c.schedule.beta_start},
        {"schedule", "beta_end", FKind::f64, &c.schedule.beta_end},
        {"model", "image_size", FKind::i32, &c.model.image_size},
        {"model", "seed", FKind::u64, &c.model.seed},
        {"train", "steps", FKind::i32, &c.train.steps},
        {"train", "batch_size", FKind::i32, &c.train.batch_size},
        {"train", "lr", FKind::f64, &c.train.lr},
        {"train", "uncond_prob", FKind::f64, &c.train.uncond_prob},
        {"train", "seed", FKind::u64, &c.train.seed},
        {"train", "ckpt_every", FKind::i32, &c.train.ckpt_every},
        {"train", "log_every", FKind::i32, &c.train.log_every},
        {"inversion", "steps", FKind::i32, &c.inversion.steps},
        {"inversion", "inner_steps", FKind::i32, &c.inversion.inner_steps},
        {"inversion", "lr", FKind::f64, &c.inversion.lr},
        {"inversion", "stop_tol", FKind::f64, &c.inversion.stop_tol},
        {"inversion", "s", FKind::f64, &c.inversion.s},
        {"guidance", "s", FKind::f64, &c.guidance.s},
        {"guidance", "v", FKind::f64, &c.guidance.v},
        {"guidance", "lambda", FKind::f64, &c.guidance.lambda},
        {"guidance", "t_attn_lo", FKind::f64, &c.guidance.t_attn_lo},
        {"guidance", "t_attn_hi", FKind::f64, &c.guidance.t_attn_hi},
        {"guidance", "t_opt_lo", FKind::f64, &c.guidance.t_opt_lo},
        {"guidance", "t_opt_hi", FKind::f64, &c.guidance.t_opt_hi},
        {"guidance", "n_opt", FKind::i32, &c.guidance.n_opt},
        {"guidance", "target_mode", FKind::str, &c.guidance.target_mode},
        {"guidance", "mask_mode", FKind::str, &c.guidance.mask_mode},
        {"guidance", "mask_path", FKind::str, &c.guidance.mask_path},
        {"sampler", "inject_self_attention", FKind::boolean, &c.sampler.inject_self_attention},
        {"io", "out_dir", FKind::str, &c.io.out_dir},
    };
}

void assign_from_json(const FieldRef & f, const nlohmann::json & v) {
    std::string where = std::string(f.section) + "." + f.key;
    switch (f.kind) {
        case FKind::i32:
            require_cfg(v.is_number_integer(), where + " must be an integer");
            *static_cast<int *>(f.ptr) = v.get<int>();
            break;
        case FKind::u64:
            require_cfg(v.is_number_integer() && !v.is_number_float(), where + " must be an integer");
            *static_cast<uint64_t *>(f.ptr) = v.get<uint64_t>();
            break;
        case FKind::f64:
            require_cfg(v.is_number(), where + " must be a number");
            *static_cast<double *>(f.ptr) = v.get<double>();
            break;
        case FKind::boolean:
            require_cfg(v.is_boolean(), where + " must be a boolean");
            *static_cast<bool *>(f.ptr) = v.get<bool>();
            break;
        case FKind::str:
            require_cfg(v.is_string(), where + " must be a string");
            *static_cast<std::string *>(f.ptr) = v.get<std::string>();
            break;
    }
}

void assign_from_string(const FieldRef & f, const std::string & value) {
    std::string where = std::string(f.section) + "." + f.key;
    try {
        size_t used = 0;
        switch (f.kind) {
            case FKind::i32:
                *static_cast<int *>(f.ptr) = std::stoi(value, &used);
                require_cfg(used == value.size(), where + ": trailing characters");
                break;
            case FKind::u64:
                *static_cast<uint64_t *>(f.ptr) = std::stoull(value, &used);
                require_cfg(used == value.size(), where + ": trailing characters");
                break;
            case FKind::f64:
                *static_cast<double *>(f.ptr) = std::stod(value, &used);
                require_cfg(used == value.size(), where + ": trailing characters");
                break;
            case FKind::boolean:
                if (value == "true" || value == "1") {
                    *static_cast<bool *>(f.ptr) = true;
                } else if (value == "false" || value == "0") {
                    *static_cast<bool *>(f.ptr) = false;
                } else {
                    throw config_error(where + ": expected true/false");
                }
                break;
            case FKind::str:
                *static_cast<std::string *>(f.ptr) = value;
                break;
        }
    } catch (const std::invalid_argument &) {
        throw config_error(where + ": cannot parse '" + value + "'");
    } catch (const std::out_of_range &) {
        throw config_error(where + ": value out of range '" + value + "'");
    }
}

} // namespace

RunConfig RunConfig::from_json(const nlohmann::json & j) {
    RunConfig c;
    require_cfg(j.is_object(), "config root must be a JSON object");
    auto fields = field_table(c);
    for (auto it = j.begin(); it != j.end(); ++it) {
        require_cfg(it.value().is_object(), "config section '" + it.key() + "' must be an object");
        bool known_section = false;
        for (const auto & f : fields) known_section = known_section || it.key() == f.section;
        require_cfg(known_section, "unknown config section '" + it.key() + "'");
        for (auto kv = it.value().begin(); kv != it.value().end(); ++kv) {
            const FieldRef * match = nullptr;
            for (const auto & f : fields)
                if (it.key() == f.section && kv.key() == f.key) match = &f;
            require_cfg(match != nullptr,
                        "unknown config key '" + it.key() + "." + kv.key() + "'");
            assign_from_json(*match, kv.value());
        }
    }
    return c;
}

RunConfig RunConfig::load_file(const std::string & path) {
    std::ifstream in(path);
    require_cfg(in.good(), "cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception & e) {
        throw config_error("config '" + path + "': " + e.what());
    }
    return from_json(j);
}

void RunConfig::set_path(const std::string & dotted, const std::string & value) {
    size_t dot = dotted.find('.');
    require_cfg(dot != std::string::npos && dot > 0 && dot + 1 < dotted.size(),
                "override '" + dotted + "' is not of the form section.key");
    std::string section = dotted.substr(0, dot);
    std::string key = dotted.substr(dot + 1);
    auto fields = field_table(*this);
    for (const auto & f : fields) {
        if (section == f.section && key == f.key) {
            assign_from_string(f, value);
            return;
        }
    }
    throw config_error("unknown config key '" + dotted + "'");
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j = nlohmann::json::object();
    auto fields = field_table(const_cast<RunConfig &>(*this));
    for (const auto & f : fields) {
        nlohmann::json & slot = j[f.section][f.key];
        switch (f.kind) {
            case FKind::i32: slot = *static_cast<const int *>(f.ptr); break;
            case FKind::u64: slot = *static_cast<const uint64_t *>(f.ptr); break;
            case FKind::f64: slot = *static_cast<const double *>(f.ptr); break;
            case FKind::boolean: slot = *static_cast<const bool *>(f.ptr); break;
            case FKind::str: slot = *static_cast<const std::string *>(f.ptr); break;
        }
    }
    return j;
}

void RunConfig::validate() const {
    require_cfg(schedule.T >= 1, "schedule.T must be >= 1");
    require_cfg(schedule.beta_start > 0.0 && schedule.beta_start <= schedule.beta_end &&
                    schedule.beta_end < 1.0,
                "schedule betas must satisfy 0 < beta_start <= beta_end < 1");
    require_cfg(model.image_size == 16, "model.image_size must be 16 (the scene generator is fixed-size)");
    require_cfg(train.steps >= 0, "train.steps must be >= 0");
    require_cfg(train.batch_size >= 1, "train.batch_size must be >= 1");
    require_cfg(train.lr > 0.0, "train.lr must be positive");
    require_cfg(train.uncond_prob >= 0.0 && train.uncond_prob <= 1.0,
                "train.uncond_prob must lie in [0,1]");
    require_cfg(train.ckpt_every >= 1, "train.ckpt_every must be >= 1");
    require_cfg(train.log_every >= 1, "train.log_every must be >= 1");
    require_cfg(inversion.steps >= 1, "inversion.steps must be >= 1");
    require_cfg(schedule.T % inversion.steps == 0,
                "inversion.steps must divide schedule.T");
    require_cfg(inversion.inner_steps >= 0, "inversion.inner_steps must be >= 0");
    require_cfg(inversion.lr > 0.0, "inversion.lr must be positive");
    require_cfg(inversion.stop_tol >= 0.0, "inversion.stop_tol must be >= 0");
    require_cfg(std::isfinite(inversion.s) && inversion.s >= 0.0,
                "inversion.s must be finite and >= 0");
    require_cfg(guidance.mask_mode == "off" || !guidance.mask_path.empty(),
                "guidance.mask_mode requires guidance.mask_path");
    // Guidance field ranges (the built GuidanceConfig re-validates, but catch
    // bad values at config time with config_error).
    try {
        make_guidance().validate(model.image_size);
    } catch (const config_error &) {
        throw;
    } catch (const contract_error & e) {
        throw config_error(e.what());
    }
    require_cfg(!io.out_dir.empty(), "io.out_dir must not be empty");
}

NoiseSchedule RunConfig::make_schedule() const {
    return NoiseSchedule::linear(schedule.T, schedule.beta_start, schedule.beta_end);
}

TrainConfig RunConfig::make_train() const {
    TrainConfig t;
    t.batch_size = train.batch_size;
    t.lr = train.lr;
    t.uncond_prob = train.uncond_prob;
    return t;
}

NullOptConfig RunConfig::make_nullopt() const {
    NullOptConfig n;
    n.inner_steps = inversion.inner_steps;
    n.lr = inversion.lr;
    n.stop_tol = inversion.stop_tol;
    n.s = inversion.s;
    return n;
}

GuidanceConfig RunConfig::make_guidance() const {
    GuidanceConfig g;
    g.s = guidance.s;
    g.v = guidance.v;
    g.lambda = guidance.lambda;
    g.t_attn_lo = guidance.t_attn_lo;
    g.t_attn_hi = guidance.t_attn_hi;
    g.t_opt_lo = guidance.t_opt_lo;
    g.t_opt_hi = guidance.t_opt_hi;
    g.n_opt = guidance.n_opt;
    g.target_mode = target_mode_from(guidance.target_mode);
    g.mask_mode = mask_mode_from(guidance.mask_mode);
    if (g.mask_mode != MaskMode::off) {
        require_cfg(!guidance.mask_path.empty(), "guidance.mask_mode requires guidance.mask_path");
        g.mask = read_pgm_mask(guidance.mask_path);
    }
    return g;
}

} // namespace eraser
