#include "cgfr/config.hpp"

#include <cstdlib>
#include <fstream>
#include <utility>

namespace cgfr {

namespace {

// Single source of truth for the config surface. Unknown keys are rejected.
const std::pair<const char*, const char*> kDefaults[] = {
    {"train.batch_size", "16"},
    {"train.phase1_epochs", "4"},
    {"train.phase2_epochs", "24"},
    {"train.adamw_wd", "0.02"},
    {"train.proj_lr", "0.001"},
    {"train.adam_beta1", "0.5"},
    {"train.adam_beta2", "0.99"},
    {"train.adam_eps", "1e-8"},
    {"train.phase2_lr_scale", "0.1"},
    {"train.identity_loss_weight", "1.0"},
    {"train.identity_scale", "16"},
    {"sched.lr_init", "1e-5"},
    {"sched.lr_peak", "1e-4"},
    {"sched.lr_final", "1e-5"},
    {"sched.warmup_iters", "2000"},
    {"tfrm.lambda1", "1.0"},
    {"tfrm.lambda2", "0.5"},
    {"tfrm.use_cls_caption", "false"},
    {"damsm.gamma1", "5.0"},
    {"damsm.gamma2", "5.0"},
    {"damsm.gamma3", "10.0"},
    {"cfam.variant", "full"},
    {"cfam.scale", "0.5"},
    {"cfam.heads", "4"},
    {"text.dim", "768"},
    {"text.layers", "2"},
    {"text.heads", "4"},
    {"text.ffn_mult", "4"},
    {"image.base_width", "16"},
    {"norm.bn_momentum", "0.1"},
    {"norm.bn_eps", "1e-5"},
    {"norm.ln_eps", "1e-5"},
    {"act.leaky_slope", "0.2"},
    {"data.n_identities", "200"},
    {"data.images_per_identity", "10"},
    {"data.captions_per_image", "10"},
    {"data.min_caption_attributes", "3"},
    {"data.max_caption_attributes", "8"},
    {"data.gallery_per_identity", "1"},
    {"data.probe_per_identity", "2"},
    {"data.split", "shared"},
    {"data.holdout_identities", "0"},
    {"degrade.preset", "none"},
    {"degrade.subsample_min", "1.0"},
    {"degrade.subsample_max", "1.0"},
    {"degrade.rotation_deg", "0.0"},
    {"degrade.flip_prob", "0.0"},
    {"degrade.noise_sigma", "0.0"},
    {"degrade.brightness", "0.0"},
    {"degrade.contrast", "0.0"},
    {"degrade.saturation", "0.0"},
    {"eval.n_genuine", "500"},
    {"eval.n_impostor", "5000"},
    {"eval.caption_index", "0"},
};

}  // namespace

RunConfig RunConfig::defaults() {
    RunConfig cfg;
    for (const auto& [k, v] : kDefaults) cfg.values_[k] = v;
    return cfg;
}

void RunConfig::load_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config file " + path);
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos) continue;
        if (line[start] == '#') continue;
        set_line(line.substr(start));
    }
}

void RunConfig::set_line(const std::string& line) {
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("config line without '=': " + line);
    std::string key = line.substr(0, eq);
    std::string value = line.substr(eq + 1);
    while (!key.empty() && (key.back() == ' ' || key.back() == '\t')) key.pop_back();
    std::size_t vs = value.find_first_not_of(" \t");
    value = vs == std::string::npos ? "" : value.substr(vs);
    set(key, value);
}

void RunConfig::set(const std::string& key, const std::string& value) {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    it->second = value;
}

const std::string& RunConfig::get_s(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
    return it->second;
}

double RunConfig::get_f(const std::string& key) const {
    const std::string& s = get_s(key);
    char* end = nullptr;
    double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str() || *end != '\0') {
        throw ConfigError("config key '" + key + "' is not a number: '" + s + "'");
    }
    return v;
}

int RunConfig::get_i(const std::string& key) const {
    return static_cast<int>(get_i64(key));
}

std::int64_t RunConfig::get_i64(const std::string& key) const {
    const std::string& s = get_s(key);
    char* end = nullptr;
    long long v = std::strtoll(s.c_str(), &end, 10);
    if (end == s.c_str() || *end != '\0') {
        throw ConfigError("config key '" + key + "' is not an integer: '" + s + "'");
    }
    return v;
}

bool RunConfig::get_b(const std::string& key) const {
    const std::string& s = get_s(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError("config key '" + key + "' is not a boolean: '" + s + "'");
}

}  // namespace cgfr
