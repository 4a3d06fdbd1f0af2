#include "xsep/config.hpp"

#include <charconv>
#include <fstream>
#include <sstream>

#include "xsep/errors.hpp"

namespace xsep {

namespace {

std::string trim(const std::string& s) {
    const auto begin = s.find_first_not_of(" \t");
    if (begin == std::string::npos) return "";
    const auto end = s.find_last_not_of(" \t");
    return s.substr(begin, end - begin + 1);
}

long long to_int(const std::string& value, const std::string& key) {
    long long v = 0;
    const auto res = std::from_chars(value.data(), value.data() + value.size(), v);
    if (res.ec != std::errc() || res.ptr != value.data() + value.size())
        throw ConfigError("config: bad integer '" + value + "' for " + key);
    return v;
}

double to_double(const std::string& value, const std::string& key) {
    try {
        std::size_t used = 0;
        const double v = std::stod(value, &used);
        if (used != value.size()) throw std::invalid_argument(value);
        return v;
    } catch (const std::exception&) {
        throw ConfigError("config: bad number '" + value + "' for " + key);
    }
}

bool to_bool(const std::string& value, const std::string& key) {
    if (value == "on" || value == "true" || value == "1") return true;
    if (value == "off" || value == "false" || value == "0") return false;
    throw ConfigError("config: bad flag '" + value + "' for " + key + " (use on/off)");
}

std::vector<int> to_int_list(const std::string& value, const std::string& key) {
    std::vector<int> out;
    if (value.empty()) return out;
    std::string cur;
    std::istringstream in(value);
    while (std::getline(in, cur, ','))
        out.push_back(static_cast<int>(to_int(trim(cur), key)));
    return out;
}

}  // namespace

void TrainConfig::check() const {
    optim.check();
    if (batch_size < 1) throw ConfigError("config: batch_size must be >= 1");
    if (threads < 1) throw ConfigError("config: threads must be >= 1");
    if (eval_every < 1) throw ConfigError("config: eval_every must be >= 1");
    if (classes < 1) throw ConfigError("config: classes must be >= 1");
    if (source != "synth" && source != "files")
        throw ConfigError("config: source must be synth or files");
    if (source == "synth" && (n_train < 1 || n_val < 1 || hw < 1))
        throw ConfigError("config: synth sizes must be >= 1");
    if (source == "files" &&
        (train_images.empty() || train_labels.empty() || val_images.empty() ||
         val_labels.empty()))
        throw ConfigError("config: file source needs all four data paths");
}

TrainConfig parse_config(const std::string& text) {
    TrainConfig config;
    bool decay_samples_set = false;

    std::istringstream in(text);
    std::string line, section;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        if (line.front() == '[') {
            if (line.back() != ']')
                throw ConfigError("config: malformed section at line " + std::to_string(lineno));
            section = line.substr(1, line.size() - 2);
            if (section != "arch" && section != "optim" && section != "data" &&
                section != "run")
                throw ConfigError("config: unknown section [" + section + "]");
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("config: expected key = value at line " + std::to_string(lineno));
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        const std::string qualified = section + "." + key;

        if (section == "arch") {
            if (key == "preset") {
                if (value != "xception" && value != "xception-toy" && value != "sepconv-vgg" &&
                    value != "file")
                    throw ConfigError("config: unknown preset '" + value + "'");
                config.preset = value;
            } else if (key == "arch_file") {
                config.arch_file = value;
            } else if (key == "classes") {
                config.classes = static_cast<int>(to_int(value, qualified));
            } else if (key == "input") {
                const auto dims = to_int_list(value, qualified);
                if (dims.size() != 3) throw ConfigError("config: input needs c,h,w");
                config.input = Shape3{dims[0], dims[1], dims[2]};
            } else if (key == "width_divisor") {
                config.width_divisor = static_cast<int>(to_int(value, qualified));
            } else if (key == "middle_repeats") {
                config.middle_repeats = static_cast<int>(to_int(value, qualified));
            } else if (key == "residuals") {
                config.residuals = to_bool(value, qualified);
            } else if (key == "intermediate_activation") {
                if (value == "none")
                    config.intermediate = Activation::None;
                else if (value == "relu")
                    config.intermediate = Activation::ReLU;
                else if (value == "elu")
                    config.intermediate = Activation::ELU;
                else
                    throw ConfigError("config: bad activation '" + value + "'");
            } else if (key == "fc") {
                config.fc = to_int_list(value, qualified);
            } else if (key == "task") {
                if (value == "single")
                    config.task = TaskKind::SingleLabel;
                else if (value == "multi")
                    config.task = TaskKind::MultiLabel;
                else
                    throw ConfigError("config: bad task '" + value + "'");
            } else if (key == "vgg_widths") {
                config.vgg_widths = to_int_list(value, qualified);
            } else {
                throw ConfigError("config: unknown key '" + qualified + "'");
            }
        } else if (section == "optim") {
            if (key == "optimizer") {
                if (value == "sgd")
                    config.optim.kind = OptimKind::Sgd;
                else if (value == "rmsprop")
                    config.optim.kind = OptimKind::Rmsprop;
                else
                    throw ConfigError("config: bad optimizer '" + value + "'");
            } else if (key == "momentum") {
                config.optim.momentum = to_double(value, qualified);
            } else if (key == "learning_rate") {
                config.optim.lr0 = to_double(value, qualified);
            } else if (key == "decay_factor") {
                config.optim.decay_factor = to_double(value, qualified);
            } else if (key == "decay_every_epochs") {
                config.optim.schedule = ScheduleKind::StepEveryEpochs;
                config.optim.decay_every = static_cast<std::uint64_t>(to_int(value, qualified));
            } else if (key == "decay_every_samples") {
                config.optim.schedule = ScheduleKind::StepEverySamples;
                config.optim.decay_every = static_cast<std::uint64_t>(to_int(value, qualified));
                decay_samples_set = true;
            } else if (key == "weight_decay") {
                config.optim.weight_decay = to_double(value, qualified);
            } else if (key == "polyak") {
                config.optim.polyak = to_bool(value, qualified);
            } else if (key == "polyak_decay") {
                config.optim.polyak_decay = to_double(value, qualified);
            } else if (key == "rmsprop_rho") {
                config.optim.rms_rho = to_double(value, qualified);
            } else if (key == "rmsprop_epsilon") {
                config.optim.rms_epsilon = to_double(value, qualified);
            } else {
                throw ConfigError("config: unknown key '" + qualified + "'");
            }
        } else if (section == "data") {
            if (key == "source") {
                config.source = value;
            } else if (key == "n_train") {
                config.n_train = static_cast<int>(to_int(value, qualified));
            } else if (key == "n_val") {
                config.n_val = static_cast<int>(to_int(value, qualified));
            } else if (key == "hw") {
                config.hw = static_cast<int>(to_int(value, qualified));
            } else if (key == "data_seed") {
                config.data_seed = static_cast<std::uint64_t>(to_int(value, qualified));
            } else if (key == "train_images") {
                config.train_images = value;
            } else if (key == "train_labels") {
                config.train_labels = value;
            } else if (key == "val_images") {
                config.val_images = value;
            } else if (key == "val_labels") {
                config.val_labels = value;
            } else if (key == "class_weights") {
                config.class_weights_file = value;
            } else {
                throw ConfigError("config: unknown key '" + qualified + "'");
            }
        } else if (section == "run") {
            if (key == "steps") {
                config.steps = static_cast<std::uint64_t>(to_int(value, qualified));
            } else if (key == "batch_size") {
                config.batch_size = static_cast<int>(to_int(value, qualified));
            } else if (key == "eval_every") {
                config.eval_every = static_cast<std::uint64_t>(to_int(value, qualified));
            } else if (key == "seed") {
                config.seed = static_cast<std::uint64_t>(to_int(value, qualified));
            } else if (key == "threads") {
                config.threads = static_cast<int>(to_int(value, qualified));
            } else if (key == "profile_csv") {
                config.profile_csv = value;
            } else if (key == "checkpoint") {
                config.checkpoint = value;
            } else if (key == "resume") {
                config.resume = value;
            } else {
                throw ConfigError("config: unknown key '" + qualified + "'");
            }
        } else {
            throw ConfigError("config: key outside any section at line " +
                              std::to_string(lineno));
        }
    }
    (void)decay_samples_set;
    config.check();
    return config;
}

TrainConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config: cannot open " + path);
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config(buf.str());
}

ArchSpec build_arch_from_config(const TrainConfig& config) {
    if (config.preset == "file") {
        if (config.arch_file.empty())
            throw ConfigError("config: preset file needs arch_file");
        return load_arch_file(config.arch_file);
    }
    if (config.preset == "sepconv-vgg") {
        if (config.vgg_widths.empty())
            throw ConfigError("config: sepconv-vgg needs vgg_widths");
        return build_sepconv_vgg(config.vgg_widths, config.input, config.classes);
    }
    XceptionOptions options;
    options.input = config.input;
    options.num_classes = config.classes;
    options.residuals = config.residuals;
    options.intermediate = config.intermediate;
    options.fc_widths = config.fc;
    options.task = config.task;
    if (config.preset == "xception-toy") {
        options.width_divisor = config.width_divisor;
        options.middle_repeats = config.middle_repeats;
    } else {
        options.width_divisor = 1;
        options.middle_repeats = 8;
    }
    return build_xception(options);
}

}  // namespace xsep
