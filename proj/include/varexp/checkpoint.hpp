#pragma once

// Checkpoint container.
//
// Layout: 8-byte magic "VXCKPT01", little-endian u64 header length, a JSON
// header, then every parameter and Adam moment as raw little-endian doubles
// in the order the header lists them. The header is self-describing: network
// shapes, optimizer hyperparameters and step counts, RNG stream counters, the
// full config text and its hash.

#include <nlohmann/json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "varexp/adam.hpp"
#include "varexp/config.hpp"
#include "varexp/flow.hpp"
#include "varexp/mlp.hpp"
#include "varexp/rng.hpp"
#include "varexp/tokenizer.hpp"

namespace varexp {

inline constexpr char kCheckpointMagic[8] = {'V', 'X', 'C', 'K', 'P', 'T', '0', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

enum class CheckpointKind { kTokenizer, kFlow };

struct Checkpoint {
    nlohmann::json header;
    std::vector<double> payload;
};

namespace detail {

inline nlohmann::json shape_json(const MlpShape& s) {
    return {{"input_dim", s.input_dim}, {"output_dim", s.output_dim}, {"hidden_dim", s.hidden_dim}, {"depth", s.depth}};
}

inline MlpShape shape_from_json(const nlohmann::json& j) {
    return {j.at("input_dim").get<int>(), j.at("output_dim").get<int>(), j.at("hidden_dim").get<int>(),
            j.at("depth").get<int>()};
}

inline void append(std::vector<double>& out, const ParamSet& p) {
    for (const auto& l : p) {
        out.insert(out.end(), l.weight.data(), l.weight.data() + l.weight.size());
        out.insert(out.end(), l.bias.data(), l.bias.data() + l.bias.size());
    }
}

inline void extract(const std::vector<double>& in, std::size_t& pos, ParamSet& p) {
    for (auto& l : p) {
        const auto nw = static_cast<std::size_t>(l.weight.size()), nb = static_cast<std::size_t>(l.bias.size());
        if (pos + nw + nb > in.size()) throw std::runtime_error("checkpoint payload is truncated");
        std::memcpy(l.weight.data(), in.data() + pos, nw * sizeof(double));
        pos += nw;
        std::memcpy(l.bias.data(), in.data() + pos, nb * sizeof(double));
        pos += nb;
    }
}

inline nlohmann::json adam_json(const AdamState& a) {
    return {{"step", a.step},
            {"total_steps", a.total_steps},
            {"beta1", a.hyper.beta1},
            {"beta2", a.hyper.beta2},
            {"eps", a.hyper.eps},
            {"lr", a.schedule.base_lr},
            {"lr_schedule", to_string(a.schedule.mode)},
            {"warmup_fraction", a.schedule.warmup_fraction},
            {"decay_ref_fraction", a.schedule.decay_ref_fraction}};
}

inline AdamState adam_from_json(const nlohmann::json& j, const ParamSet& like) {
    AdamHyper h{j.at("beta1").get<double>(), j.at("beta2").get<double>(), j.at("eps").get<double>()};
    LrSchedule s{parse_lr_mode(j.at("lr_schedule").get<std::string>()), j.at("lr").get<double>(),
                 j.at("warmup_fraction").get<double>(), j.at("decay_ref_fraction").get<double>()};
    AdamState a(like, h, s, j.at("total_steps").get<std::int64_t>());
    a.step = j.at("step").get<std::int64_t>();
    return a;
}

inline nlohmann::json rng_json(const RngStream& r, const char* name) {
    return {{"name", name}, {"seed", r.seed()}, {"counter", r.counter()}};
}

inline RngStream rng_from_json(const nlohmann::json& j) {
    return RngStream(j.at("seed").get<std::uint64_t>(), j.at("name").get<std::string>(),
                     j.at("counter").get<std::uint64_t>());
}

}  // namespace detail

inline void write_checkpoint(const std::string& path, const Checkpoint& ck) {
    const std::string header = ck.header.dump();
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) throw std::runtime_error("cannot write checkpoint " + tmp);
        os.write(kCheckpointMagic, sizeof kCheckpointMagic);
        const std::uint64_t len = header.size();
        os.write(reinterpret_cast<const char*>(&len), sizeof len);
        os.write(header.data(), static_cast<std::streamsize>(header.size()));
        os.write(reinterpret_cast<const char*>(ck.payload.data()),
                 static_cast<std::streamsize>(ck.payload.size() * sizeof(double)));
        if (!os) throw std::runtime_error("short write on checkpoint " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot move checkpoint into " + path);
}

inline nlohmann::json read_checkpoint_header(std::istream& is, const std::string& path) {
    char magic[8];
    if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error(path + " is not a varexp checkpoint");
    std::uint64_t len = 0;
    if (!is.read(reinterpret_cast<char*>(&len), sizeof len) || len > (std::uint64_t{1} << 32))
        throw std::runtime_error(path + ": corrupt checkpoint header");
    std::string header(len, '\0');
    if (!is.read(header.data(), static_cast<std::streamsize>(len)))
        throw std::runtime_error(path + ": truncated checkpoint header");
    return nlohmann::json::parse(header);
}

inline Checkpoint read_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    Checkpoint ck;
    ck.header = read_checkpoint_header(is, path);
    const auto n = ck.header.at("payload_doubles").get<std::size_t>();
    ck.payload.resize(n);
    if (!is.read(reinterpret_cast<char*>(ck.payload.data()), static_cast<std::streamsize>(n * sizeof(double))))
        throw std::runtime_error(path + ": truncated checkpoint payload");
    return ck;
}

/// Header only; used by `describe-checkpoint`.
inline nlohmann::json describe_checkpoint(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open checkpoint " + path);
    return read_checkpoint_header(is, path);
}

inline Checkpoint make_checkpoint(const TokenizerTrainState& s, const TrainingConfig& cfg) {
    Checkpoint ck;
    auto& h = ck.header;
    h["format"] = "varexp-checkpoint";
    h["version"] = 1;
    h["kind"] = "tokenizer";
    h["config_hash"] = config_hash(cfg);
    h["config"] = serialize_config(cfg, false);
    h["loss_mode"] = cfg.loss.name();
    h["iteration"] = s.iteration;
    h["networks"] = nlohmann::json::array({{{"name", "encoder"}, {"shape", detail::shape_json(s.model.encoder.shape())}},
                                           {{"name", "decoder"}, {"shape", detail::shape_json(s.model.decoder.shape())}}});
    h["adam"] = {{"encoder", detail::adam_json(s.encoder_opt)}, {"decoder", detail::adam_json(s.decoder_opt)}};
    h["rng"] = nlohmann::json::array({detail::rng_json(s.data_rng, "data"), detail::rng_json(s.reparam_rng, "reparam")});
    h["payload_order"] = {"encoder", "decoder", "encoder.m", "encoder.v", "decoder.m", "decoder.v"};
    detail::append(ck.payload, s.model.encoder.params());
    detail::append(ck.payload, s.model.decoder.params());
    detail::append(ck.payload, s.encoder_opt.m);
    detail::append(ck.payload, s.encoder_opt.v);
    detail::append(ck.payload, s.decoder_opt.m);
    detail::append(ck.payload, s.decoder_opt.v);
    h["payload_doubles"] = ck.payload.size();
    return ck;
}

inline Checkpoint make_checkpoint(const FlowTrainState& s, const TrainingConfig& cfg,
                                  const std::string& tokenizer_hash) {
    Checkpoint ck;
    auto& h = ck.header;
    h["format"] = "varexp-checkpoint";
    h["version"] = 1;
    h["kind"] = "flow";
    h["config_hash"] = config_hash(cfg);
    h["config"] = serialize_config(cfg, false);
    h["tokenizer_hash"] = tokenizer_hash;
    h["iteration"] = s.iteration;
    h["networks"] = nlohmann::json::array({{{"name", "flow"}, {"shape", detail::shape_json(s.flow.net.shape())}}});
    h["adam"] = {{"flow", detail::adam_json(s.opt)}};
    h["rng"] = nlohmann::json::array({detail::rng_json(s.data_rng, "data"), detail::rng_json(s.reparam_rng, "reparam"),
                                      detail::rng_json(s.base_rng, "flow-base"),
                                      detail::rng_json(s.time_rng, "flow-time")});
    h["payload_order"] = {"flow", "flow.m", "flow.v"};
    detail::append(ck.payload, s.flow.net.params());
    detail::append(ck.payload, s.opt.m);
    detail::append(ck.payload, s.opt.v);
    h["payload_doubles"] = ck.payload.size();
    return ck;
}

namespace detail {

inline void expect_kind(const Checkpoint& ck, const char* kind) {
    if (ck.header.value("kind", "") != kind)
        throw std::runtime_error(std::string("checkpoint is not a ") + kind + " checkpoint");
}

inline RngStream find_rng(const nlohmann::json& list, const std::string& name) {
    for (const auto& r : list)
        if (r.at("name").get<std::string>() == name) return rng_from_json(r);
    throw std::runtime_error("checkpoint lacks rng stream '" + name + "'");
}

}  // namespace detail

inline TokenizerTrainState restore_tokenizer(const Checkpoint& ck) {
    detail::expect_kind(ck, "tokenizer");
    const auto& nets = ck.header.at("networks");
    TokenizerTrainState s;
    s.model.encoder = Mlp(detail::shape_from_json(nets.at(0).at("shape")));
    s.model.decoder = Mlp(detail::shape_from_json(nets.at(1).at("shape")));
    std::size_t pos = 0;
    detail::extract(ck.payload, pos, s.model.encoder.mutable_params());
    detail::extract(ck.payload, pos, s.model.decoder.mutable_params());
    s.encoder_opt = detail::adam_from_json(ck.header.at("adam").at("encoder"), s.model.encoder.params());
    s.decoder_opt = detail::adam_from_json(ck.header.at("adam").at("decoder"), s.model.decoder.params());
    detail::extract(ck.payload, pos, s.encoder_opt.m);
    detail::extract(ck.payload, pos, s.encoder_opt.v);
    detail::extract(ck.payload, pos, s.decoder_opt.m);
    detail::extract(ck.payload, pos, s.decoder_opt.v);
    s.data_rng = detail::find_rng(ck.header.at("rng"), "data");
    s.reparam_rng = detail::find_rng(ck.header.at("rng"), "reparam");
    s.iteration = ck.header.at("iteration").get<std::int64_t>();
    return s;
}

inline FlowTrainState restore_flow(const Checkpoint& ck) {
    detail::expect_kind(ck, "flow");
    FlowTrainState s;
    s.flow.net = Mlp(detail::shape_from_json(ck.header.at("networks").at(0).at("shape")));
    std::size_t pos = 0;
    detail::extract(ck.payload, pos, s.flow.net.mutable_params());
    s.opt = detail::adam_from_json(ck.header.at("adam").at("flow"), s.flow.net.params());
    detail::extract(ck.payload, pos, s.opt.m);
    detail::extract(ck.payload, pos, s.opt.v);
    const auto& rng = ck.header.at("rng");
    s.data_rng = detail::find_rng(rng, "data");
    s.reparam_rng = detail::find_rng(rng, "reparam");
    s.base_rng = detail::find_rng(rng, "flow-base");
    s.time_rng = detail::find_rng(rng, "flow-time");
    s.iteration = ck.header.at("iteration").get<std::int64_t>();
    return s;
}

inline TrainingConfig checkpoint_config(const Checkpoint& ck) {
    return parse_config(ck.header.at("config").get<std::string>());
}

}  // namespace varexp
