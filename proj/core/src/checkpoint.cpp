#include "safepde/checkpoint.hpp"

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "safepde/errors.hpp"

namespace safepde {

namespace {

void put_double(std::string& out, double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out += buf;
}

std::vector<std::string> split_ws(const std::string& line) {
    std::vector<std::string> parts;
    std::istringstream ss(line);
    std::string p;
    while (ss >> p) parts.push_back(p);
    return parts;
}

double parse_double(const std::string& s, std::size_t line) {
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end != s.c_str() + s.size() || s.empty()) throw ParseError(line, "bad number '" + s + "'");
    return v;
}

int parse_int(const std::string& s, std::size_t line) {
    char* end = nullptr;
    const long v = std::strtol(s.c_str(), &end, 10);
    if (end != s.c_str() + s.size() || s.empty() || v < 0) throw ParseError(line, "bad count '" + s + "'");
    return static_cast<int>(v);
}

std::string join_acts(const Mlp& mlp) {
    std::string s;
    for (auto a : mlp.activations()) {
        if (!s.empty()) s += ',';
        s += activation_name(a);
    }
    return s;
}

}  // namespace

const Tensor& Checkpoint::tensor(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return t;
    throw FormatError("checkpoint: missing tensor " + name);
}

const std::string& Checkpoint::meta_value(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw FormatError("checkpoint: missing meta key " + key);
    return it->second;
}

std::string format_checkpoint(const Checkpoint& ckpt) {
    std::string out = "CKPT v1 kind=" + ckpt.kind + "\nmeta";
    for (const auto& [k, v] : ckpt.meta) out += " " + k + "=" + v;
    out += "\n";
    for (const auto& t : ckpt.tensors) {
        out += t.name + " " + std::to_string(t.rows) + " " + std::to_string(t.cols) + "\n";
        for (int r = 0; r < t.rows; ++r) {
            for (int c = 0; c < t.cols; ++c) {
                if (c) out += ' ';
                put_double(out, t.values[static_cast<std::size_t>(r * t.cols + c)]);
            }
            out += '\n';
        }
    }
    return out;
}

Checkpoint parse_checkpoint(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    std::size_t lineno = 0;
    auto next = [&]() -> bool {
        if (!std::getline(in, line)) return false;
        ++lineno;
        return true;
    };
    Checkpoint ckpt;
    if (!next() || line.rfind("CKPT v1 kind=", 0) != 0) throw ParseError(1, "missing 'CKPT v1 kind=' header");
    ckpt.kind = line.substr(13);
    if (!next() || line.rfind("meta", 0) != 0) throw ParseError(lineno, "missing meta line");
    auto parts = split_ws(line);
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const auto eq = parts[i].find('=');
        if (eq == std::string::npos) throw ParseError(lineno, "meta entry without '='");
        ckpt.meta[parts[i].substr(0, eq)] = parts[i].substr(eq + 1);
    }
    while (next()) {
        if (line.empty()) continue;
        parts = split_ws(line);
        if (parts.size() != 3) throw ParseError(lineno, "expected 'name rows cols'");
        Tensor t;
        t.name = parts[0];
        t.rows = parse_int(parts[1], lineno);
        t.cols = parse_int(parts[2], lineno);
        t.values.reserve(static_cast<std::size_t>(t.rows * t.cols));
        for (int r = 0; r < t.rows; ++r) {
            if (!next()) throw ParseError(lineno, "truncated tensor " + t.name);
            auto row = split_ws(line);
            if (static_cast<int>(row.size()) != t.cols) throw ParseError(lineno, "row width mismatch in " + t.name);
            for (const auto& s : row) t.values.push_back(parse_double(s, lineno));
        }
        ckpt.tensors.push_back(std::move(t));
    }
    return ckpt;
}

void atomic_write_text(const std::string& path, const std::string& text) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw Error("cannot open " + tmp + " for writing");
        out << text;
        out.flush();
        if (!out) throw Error("write failed: " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw Error("rename " + tmp + " -> " + path + ": " + ec.message());
}

void write_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    atomic_write_text(path, format_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error("cannot open checkpoint " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_checkpoint(ss.str());
}

Tensor matrix_tensor(const std::string& name, const Eigen::MatrixXd& m) {
    Tensor t{name, static_cast<int>(m.rows()), static_cast<int>(m.cols()), {}};
    t.values.reserve(static_cast<std::size_t>(m.size()));
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) t.values.push_back(m(r, c));
    return t;
}

Eigen::MatrixXd tensor_matrix(const Tensor& t) {
    Eigen::MatrixXd m(t.rows, t.cols);
    for (int r = 0; r < t.rows; ++r)
        for (int c = 0; c < t.cols; ++c) m(r, c) = t.values[static_cast<std::size_t>(r * t.cols + c)];
    return m;
}

void append_mlp(Checkpoint& ckpt, const std::string& prefix, const Mlp& mlp) {
    ckpt.meta["acts." + prefix] = join_acts(mlp);
    for (std::size_t k = 0; k < mlp.layers.size(); ++k) {
        ckpt.tensors.push_back(matrix_tensor(prefix + "W" + std::to_string(k), mlp.layers[k].W));
        ckpt.tensors.push_back(matrix_tensor(prefix + "b" + std::to_string(k), mlp.layers[k].b));
    }
}

Mlp extract_mlp(const Checkpoint& ckpt, const std::string& prefix) {
    std::vector<Activation> acts;
    std::istringstream ss(ckpt.meta_value("acts." + prefix));
    std::string a;
    while (std::getline(ss, a, ',')) acts.push_back(parse_activation(a));
    if (acts.empty()) throw FormatError("checkpoint: empty activation list for " + prefix);
    Mlp mlp;
    for (std::size_t k = 0; k < acts.size(); ++k) {
        DenseLayer L;
        L.W = tensor_matrix(ckpt.tensor(prefix + "W" + std::to_string(k)));
        const Tensor& b = ckpt.tensor(prefix + "b" + std::to_string(k));
        if (b.cols != 1 || b.rows != L.W.rows()) throw FormatError("checkpoint: bias shape mismatch in " + prefix);
        L.b = tensor_matrix(b).col(0);
        L.act = acts[k];
        if (k > 0 && L.W.cols() != mlp.layers.back().W.rows())
            throw FormatError("checkpoint: inconsistent layer widths in " + prefix);
        mlp.layers.push_back(std::move(L));
    }
    return mlp;
}

}  // namespace safepde
