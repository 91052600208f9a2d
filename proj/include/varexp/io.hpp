#pragma once

// Run-directory plumbing: point files, JSON-lines metrics, lock files and
// content-hashed manifests.

#include <nlohmann/json.hpp>

#include <fcntl.h>
#include <unistd.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "varexp/mixture.hpp"
#include "varexp/rng.hpp"
#include "varexp/tokenizer.hpp"

namespace varexp {

namespace fs = std::filesystem;

inline std::string read_file(const fs::path& p) {
    std::ifstream is(p, std::ios::binary);
    if (!is) throw std::runtime_error("cannot read " + p.string());
    return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

inline void write_file(const fs::path& p, const std::string& content) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + p.string());
    os << content;
    if (!os) throw std::runtime_error("short write on " + p.string());
}

/// `x y` per line, 17 significant digits.
inline std::string format_points(const Eigen::MatrixXd& pts) {
    std::string out;
    out.reserve(static_cast<std::size_t>(pts.cols()) * 48);
    char buf[96];
    for (Eigen::Index j = 0; j < pts.cols(); ++j) {
        for (Eigen::Index i = 0; i < pts.rows(); ++i) {
            std::snprintf(buf, sizeof buf, i + 1 < pts.rows() ? "%.17g " : "%.17g\n", pts(i, j));
            out += buf;
        }
    }
    return out;
}

inline void save_points(const fs::path& p, const Eigen::MatrixXd& pts) { write_file(p, format_points(pts)); }

inline Points load_points(const fs::path& p) {
    std::istringstream is(read_file(p));
    std::vector<double> v;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        double x, y;
        if (!(ls >> x >> y)) throw std::runtime_error(p.string() + ":" + std::to_string(lineno) + ": expected 'x y'");
        v.push_back(x);
        v.push_back(y);
    }
    Points out(2, static_cast<Eigen::Index>(v.size() / 2));
    for (std::size_t k = 0; k < v.size(); ++k) out.data()[k] = v[k];
    return out;
}

inline std::string content_hash(const std::string& bytes) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(detail::fnv1a64(bytes)));
    return buf;
}

inline std::string file_hash(const fs::path& p) { return content_hash(read_file(p)); }

/// Append-only JSON-lines writer. Each record gets the config hash and the
/// seconds elapsed since the writer was opened.
class MetricsWriter {
public:
    MetricsWriter(const fs::path& path, std::string config_hash, bool append)
        : os_(path, append ? std::ios::app : std::ios::trunc), hash_(std::move(config_hash)),
          start_(std::chrono::steady_clock::now()) {
        if (!os_) throw std::runtime_error("cannot open metrics file " + path.string());
    }

    void write(nlohmann::json record) {
        record["config_hash"] = hash_;
        record["wall_s"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
        os_ << record.dump() << '\n';
        os_.flush();
    }

private:
    std::ofstream os_;
    std::string hash_;
    std::chrono::steady_clock::time_point start_;
};

inline nlohmann::json stats_json(const LatentBatchStats& s) {
    return {{"iter", s.iter},
            {"loss_total", s.loss_total},
            {"loss_rec", s.loss_rec},
            {"loss_var", s.loss_var},
            {"loss_reg", s.loss_reg},
            {"loss_kl", s.loss_kl},
            {"mean_var", {s.mean_var[0], s.mean_var[1]}},
            {"mean_abs_z", s.mean_abs_z}};
}

/// Exclusive lock on a run directory for the lifetime of the object.
class RunLock {
public:
    explicit RunLock(const fs::path& dir) : path_(dir / ".lock") {
        fs::create_directories(dir);
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0)
            throw std::runtime_error("run directory " + dir.string() + " is locked by another process (remove " +
                                     path_.string() + " if stale)");
        const std::string pid = std::to_string(::getpid()) + "\n";
        [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
    }
    RunLock(const RunLock&) = delete;
    RunLock& operator=(const RunLock&) = delete;
    ~RunLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            std::error_code ec;
            fs::remove(path_, ec);
        }
    }

private:
    fs::path path_;
    int fd_ = -1;
};

/// manifest.json: every artifact of a run with its content hash.
class Manifest {
public:
    explicit Manifest(fs::path dir) : dir_(std::move(dir)) {
        const auto p = dir_ / "manifest.json";
        if (fs::exists(p)) doc_ = nlohmann::json::parse(read_file(p));
        if (!doc_.contains("files")) doc_["files"] = nlohmann::json::object();
        doc_["schema_version"] = 1;
    }

    void add(const fs::path& file) {
        const auto rel = fs::relative(file, dir_).generic_string();
        doc_["files"][rel] = file_hash(file);
    }

    void set(const std::string& key, nlohmann::json value) { doc_[key] = std::move(value); }

    void save() const { write_file(dir_ / "manifest.json", doc_.dump(2) + "\n"); }

    const nlohmann::json& json() const { return doc_; }

    /// Names of listed files that are missing or whose content changed.
    std::vector<std::string> verify() const {
        std::vector<std::string> bad;
        for (const auto& [rel, hash] : doc_["files"].items()) {
            const auto p = dir_ / rel;
            if (!fs::exists(p) || file_hash(p) != hash.get<std::string>()) bad.push_back(rel);
        }
        return bad;
    }

private:
    fs::path dir_;
    nlohmann::json doc_;
};

/// Output root: $VAREXP_OUTPUT_ROOT if set, otherwise the working directory.
inline fs::path output_root() {
    if (const char* r = std::getenv("VAREXP_OUTPUT_ROOT"); r && *r) return r;
    return fs::current_path();
}

inline fs::path resolve_output(const std::string& dir) {
    const fs::path p(dir);
    return p.is_absolute() ? p : output_root() / p;
}

}  // namespace varexp
