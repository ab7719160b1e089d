#include "lcmae/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <sstream>

#include "lcmae/errors.hpp"

namespace lcmae {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

template <typename T>
T parse_unsigned(const std::string& key, const std::string& text) {
    T v{};
    const auto* end = text.data() + text.size();
    const auto [ptr, ec] = std::from_chars(text.data(), end, v);
    if (ec != std::errc() || ptr != end) throw ConfigError(key + ": expected a non-negative integer, got '" + text + "'");
    return v;
}

double parse_double(const std::string& key, const std::string& text) {
    char* end = nullptr;
    const double v = std::strtod(text.c_str(), &end);
    if (text.empty() || end != text.c_str() + text.size() || !std::isfinite(v)) {
        throw ConfigError(key + ": expected a finite number, got '" + text + "'");
    }
    return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
    if (text == "true" || text == "1") return true;
    if (text == "false" || text == "0") return false;
    throw ConfigError(key + ": expected true or false, got '" + text + "'");
}

struct Field {
    std::string name;
    std::function<std::string(const TrainConfig&)> get;
    std::function<void(TrainConfig&, const std::string&)> set;
};

template <typename Access>
Field size_field(std::string name, Access access) {
    return {name, [access](const TrainConfig& c) { return std::to_string(access(const_cast<TrainConfig&>(c))); },
            [access, name](TrainConfig& c, const std::string& v) { access(c) = parse_unsigned<std::size_t>(name, v); }};
}

template <typename Access>
Field u64_field(std::string name, Access access) {
    return {name, [access](const TrainConfig& c) { return std::to_string(access(const_cast<TrainConfig&>(c))); },
            [access, name](TrainConfig& c, const std::string& v) { access(c) = parse_unsigned<std::uint64_t>(name, v); }};
}

template <typename Access>
Field double_field(std::string name, Access access) {
    return {name, [access](const TrainConfig& c) { return fmt_double(access(const_cast<TrainConfig&>(c))); },
            [access, name](TrainConfig& c, const std::string& v) { access(c) = parse_double(name, v); }};
}

template <typename Access>
Field bool_field(std::string name, Access access) {
    return {name, [access](const TrainConfig& c) { return access(const_cast<TrainConfig&>(c)) ? "true" : "false"; },
            [access, name](TrainConfig& c, const std::string& v) { access(c) = parse_bool(name, v); }};
}

template <typename Access, typename Parse>
Field enum_field(std::string name, Access access, Parse parse) {
    return {name, [access](const TrainConfig& c) { return to_string(access(const_cast<TrainConfig&>(c))); },
            [access, parse](TrainConfig& c, const std::string& v) { access(c) = parse(v); }};
}

#define LCMAE_REF(expr) [](TrainConfig& c) -> auto& { return expr; }

const std::vector<Field>& fields() {
    static const std::vector<Field> table = {
        size_field("epochs", LCMAE_REF(c.epochs)),
        size_field("warmup_epochs", LCMAE_REF(c.warmup_epochs)),
        double_field("base_lr", LCMAE_REF(c.base_lr)),
        double_field("min_lr", LCMAE_REF(c.min_lr)),
        size_field("batch_size", LCMAE_REF(c.batch_size)),
        double_field("weight_decay", LCMAE_REF(c.weight_decay)),
        double_field("beta1", LCMAE_REF(c.beta1)),
        double_field("beta2", LCMAE_REF(c.beta2)),
        double_field("adam_eps", LCMAE_REF(c.adam_eps)),
        double_field("layer_decay", LCMAE_REF(c.layer_decay)),
        bool_field("scale_lr_by_batch", LCMAE_REF(c.scale_lr_by_batch)),
        u64_field("seed", LCMAE_REF(c.seed)),
        size_field("log_every", LCMAE_REF(c.log_every)),
        size_field("checkpoint_every", LCMAE_REF(c.checkpoint_every)),
        double_field("mask_ratio", LCMAE_REF(c.model.mask_ratio)),
        enum_field("mim_mode", LCMAE_REF(c.model.mim_mode), parse_mim_mode),
        size_field("vit.image_size", LCMAE_REF(c.model.vit.image_size)),
        size_field("vit.patch_size", LCMAE_REF(c.model.vit.patch_size)),
        size_field("vit.channels", LCMAE_REF(c.model.vit.channels)),
        size_field("vit.dim", LCMAE_REF(c.model.vit.dim)),
        size_field("vit.depth", LCMAE_REF(c.model.vit.depth)),
        size_field("vit.heads", LCMAE_REF(c.model.vit.heads)),
        double_field("vit.mlp_ratio", LCMAE_REF(c.model.vit.mlp_ratio)),
        size_field("vit.decoder_dim", LCMAE_REF(c.model.vit.decoder_dim)),
        size_field("vit.decoder_depth", LCMAE_REF(c.model.vit.decoder_depth)),
        size_field("vit.decoder_heads", LCMAE_REF(c.model.vit.decoder_heads)),
        bool_field("vit.use_cls", LCMAE_REF(c.model.vit.use_cls)),
        double_field("guidance.alpha", LCMAE_REF(c.model.guidance.alpha)),
        enum_field("guidance.distance", LCMAE_REF(c.model.guidance.distance), parse_distance),
        enum_field("guidance.guidance_type", LCMAE_REF(c.model.guidance.guidance_type), parse_guidance_type),
        enum_field("guidance.guidance_source", LCMAE_REF(c.model.guidance.guidance_source), parse_guidance_source),
        enum_field("guidance.guided_tokens", LCMAE_REF(c.model.guidance.guided_tokens), parse_guided_tokens),
        double_field("guidance.target_mask_ratio", LCMAE_REF(c.model.guidance.target_mask_ratio)),
        double_field("guidance.tau", LCMAE_REF(c.model.guidance.tau)),
        bool_field("guidance.norm_pix_targets", LCMAE_REF(c.model.guidance.norm_pix_targets)),
        size_field("guidance.head_hidden", LCMAE_REF(c.model.guidance.head_hidden)),
        size_field("guidance.head_out", LCMAE_REF(c.model.guidance.head_out)),
        double_field("guidance.infonce_temperature", LCMAE_REF(c.model.guidance.infonce_temperature)),
        enum_field("augment.crop_mode", LCMAE_REF(c.augment.crop_mode), parse_crop_mode),
        size_field("augment.out_size", LCMAE_REF(c.augment.out_size)),
        double_field("augment.rrc_scale_low", LCMAE_REF(c.augment.rrc_scale_low)),
        double_field("augment.rrc_scale_high", LCMAE_REF(c.augment.rrc_scale_high)),
        double_field("augment.brightness", LCMAE_REF(c.augment.brightness)),
        double_field("augment.contrast", LCMAE_REF(c.augment.contrast)),
        double_field("augment.saturation", LCMAE_REF(c.augment.saturation)),
        bool_field("augment.three_augment", LCMAE_REF(c.augment.three_augment)),
        double_field("augment.blur_sigma_low", LCMAE_REF(c.augment.blur_sigma_low)),
        double_field("augment.blur_sigma_high", LCMAE_REF(c.augment.blur_sigma_high)),
        double_field("augment.solarize_threshold", LCMAE_REF(c.augment.solarize_threshold)),
        double_field("augment.hflip_prob", LCMAE_REF(c.augment.hflip_prob)),
        bool_field("augment.photometric", LCMAE_REF(c.augment.photometric)),
        bool_field("augment.independent_crops", LCMAE_REF(c.augment.independent_crops)),
        size_field("probe.epochs", LCMAE_REF(c.probe.epochs)),
        size_field("probe.batch_size", LCMAE_REF(c.probe.batch_size)),
        double_field("probe.lr", LCMAE_REF(c.probe.lr)),
        double_field("probe.weight_decay", LCMAE_REF(c.probe.weight_decay)),
        double_field("probe.holdout", LCMAE_REF(c.probe.holdout)),
        u64_field("probe.seed", LCMAE_REF(c.probe.seed)),
    };
    return table;
}

#undef LCMAE_REF

const Field& find_field(const std::string& key) {
    for (const auto& f : fields()) {
        if (f.name == key) return f;
    }
    throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

std::vector<std::string> config_keys() {
    std::vector<std::string> out;
    for (const auto& f : fields()) out.push_back(f.name);
    return out;
}

std::string get_config_value(const TrainConfig& config, const std::string& key) { return find_field(key).get(config); }

void set_config_value(TrainConfig& config, const std::string& key, const std::string& value) {
    find_field(key).set(config, value);
}

void apply_override(TrainConfig& config, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + assignment + "' is not of the form key=value");
    set_config_value(config, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

std::string dump_config(const TrainConfig& config) {
    std::string out;
    for (const auto& f : fields()) out += f.name + " = " + f.get(config) + "\n";
    return out;
}

TrainConfig parse_config(const std::string& text, TrainConfig base) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key = value");
        }
        try {
            set_config_value(base, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
        } catch (const ConfigError& e) {
            throw ConfigError("config line " + std::to_string(lineno) + ": " + e.what());
        }
    }
    return base;
}

TrainConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_config(ss.str());
}

}  // namespace lcmae
