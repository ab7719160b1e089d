#include "lcmae/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <map>

#include "lcmae/config.hpp"
#include "lcmae/errors.hpp"

namespace lcmae {

static_assert(std::endian::native == std::endian::little, "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[6] = {'L', 'C', 'M', 'A', 'E', '1'};

enum class Kind : std::uint8_t { tensor = 0, text = 1, u64 = 2 };

std::uint32_t crc(const std::uint8_t* p, std::size_t n) {
    return static_cast<std::uint32_t>(crc32(0L, p, static_cast<uInt>(n)));
}

class Writer {
public:
    template <typename T>
    void put(T v) {
        const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
        bytes.insert(bytes.end(), p, p + sizeof(T));
    }

    void begin(const std::string& name, Kind kind) {
        start_ = bytes.size();
        put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
        bytes.insert(bytes.end(), name.begin(), name.end());
        put<std::uint8_t>(static_cast<std::uint8_t>(kind));
        ++count;
    }

    void end() { put<std::uint32_t>(crc(bytes.data() + start_, bytes.size() - start_)); }

    void tensor(const std::string& name, const Shape& shape, const std::vector<double>& values) {
        begin(name, Kind::tensor);
        put<std::uint8_t>(static_cast<std::uint8_t>(shape.size()));
        for (auto e : shape) put<std::uint64_t>(e);
        const auto* p = reinterpret_cast<const std::uint8_t*>(values.data());
        bytes.insert(bytes.end(), p, p + values.size() * sizeof(double));
        end();
    }

    void text(const std::string& name, const std::string& value) {
        begin(name, Kind::text);
        put<std::uint64_t>(value.size());
        bytes.insert(bytes.end(), value.begin(), value.end());
        end();
    }

    void u64(const std::string& name, std::uint64_t value) {
        begin(name, Kind::u64);
        put<std::uint64_t>(value);
        end();
    }

    std::vector<std::uint8_t> bytes;
    std::uint32_t count = 0;

private:
    std::size_t start_ = 0;
};

struct Record {
    Kind kind = Kind::u64;
    Shape shape;
    std::vector<double> values;
    std::string text;
    std::uint64_t u64 = 0;
};

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& b) : b_(b) {}

    template <typename T>
    T get(const std::string& where) {
        need(sizeof(T), where);
        T v;
        std::memcpy(&v, b_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    void need(std::size_t n, const std::string& where) const {
        if (n > b_.size() - pos_) throw ParseError("checkpoint truncated in " + where);
    }

    const std::uint8_t* here() const { return b_.data() + pos_; }
    std::size_t pos() const { return pos_; }
    void skip(std::size_t n) { pos_ += n; }
    std::size_t remaining() const { return b_.size() - pos_; }

private:
    const std::vector<std::uint8_t>& b_;
    std::size_t pos_ = 0;
};

void assign(Tensor t, const Record& r, const std::string& name) {
    if (r.kind != Kind::tensor || r.shape != t.shape()) {
        throw ParseError("checkpoint record '" + name + "' has shape " + shape_str(r.shape) + ", expected " +
                         shape_str(t.shape()));
    }
    auto d = t.mutable_data();
    std::copy(r.values.begin(), r.values.end(), d.begin());
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const TrainConfig& config, std::uint64_t epoch, ModelState& state,
                                            const AdamW& optimizer) {
    Writer w;
    w.text("config", dump_config(config));
    w.u64("meta.epoch", epoch);
    for (const auto& p : state.online_params()) {
        w.tensor("param/" + p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()});
    }
    for (const auto& p : state.target_params()) {
        w.tensor("param/" + p.name, p.tensor.shape(), {p.tensor.data().begin(), p.tensor.data().end()});
    }
    for (const auto& b : state.buffers()) w.tensor("buffer/" + b.name, {b.values->size()}, *b.values);
    w.u64("adam.step", optimizer.step_count());
    for (std::size_t i = 0; i < optimizer.params().size(); ++i) {
        const auto& p = optimizer.params()[i];
        w.tensor("adam.m/" + p.name, p.tensor.shape(), optimizer.first_moment(i));
        w.tensor("adam.v/" + p.name, p.tensor.shape(), optimizer.second_moment(i));
    }

    std::vector<std::uint8_t> out(kMagic, kMagic + 6);
    out.push_back(kCheckpointVersion);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(w.count >> (8 * i)));
    out.insert(out.end(), w.bytes.begin(), w.bytes.end());
    const std::uint32_t total = crc(out.data(), out.size());
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(total >> (8 * i)));
    return out;
}

Checkpoint decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    r.need(6, "header");
    if (std::memcmp(r.here(), kMagic, 6) != 0) throw ParseError("checkpoint: bad magic (expected LCMAE1)");
    r.skip(6);
    const auto version = r.get<std::uint8_t>("header");
    if (version != kCheckpointVersion) {
        throw VersionError("checkpoint: unsupported format version " + std::to_string(version));
    }
    const auto count = r.get<std::uint32_t>("header");

    std::map<std::string, Record> records;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string where = "record " + std::to_string(i);
        const std::size_t start = r.pos();
        const auto name_len = r.get<std::uint16_t>(where);
        r.need(name_len, where);
        std::string name(reinterpret_cast<const char*>(r.here()), name_len);
        r.skip(name_len);
        const std::string label = where + " '" + name + "'";
        Record rec;
        rec.kind = static_cast<Kind>(r.get<std::uint8_t>(label));
        switch (rec.kind) {
            case Kind::tensor: {
                const auto rank = r.get<std::uint8_t>(label);
                std::size_t n = 1;
                for (std::uint8_t k = 0; k < rank; ++k) {
                    const auto e = r.get<std::uint64_t>(label);
                    if (e > bytes.size()) throw ParseError("checkpoint: implausible extent in " + label);
                    rec.shape.push_back(e);
                    n *= e;
                }
                if (n > r.remaining() / sizeof(double)) throw ParseError("checkpoint truncated in " + label);
                rec.values.resize(n);
                std::memcpy(rec.values.data(), r.here(), n * sizeof(double));
                r.skip(n * sizeof(double));
                break;
            }
            case Kind::text: {
                const auto len = r.get<std::uint64_t>(label);
                if (len > r.remaining()) throw ParseError("checkpoint truncated in " + label);
                rec.text.assign(reinterpret_cast<const char*>(r.here()), len);
                r.skip(len);
                break;
            }
            case Kind::u64:
                rec.u64 = r.get<std::uint64_t>(label);
                break;
            default:
                throw ParseError("checkpoint: unknown record kind in " + label);
        }
        const std::uint32_t expected = crc(bytes.data() + start, r.pos() - start);
        if (r.get<std::uint32_t>(label) != expected) throw ParseError("checkpoint: checksum mismatch in " + label);
        if (!records.emplace(name, std::move(rec)).second) throw ParseError("checkpoint: duplicate " + label);
    }
    const std::size_t body = r.pos();
    const auto total = r.get<std::uint32_t>("file checksum");
    if (r.remaining() != 0) throw ParseError("checkpoint: trailing bytes after file checksum");
    if (total != crc(bytes.data(), body)) throw ParseError("checkpoint: file checksum mismatch");

    auto take = [&](const std::string& name, Kind kind) -> Record& {
        auto it = records.find(name);
        if (it == records.end()) throw ParseError("checkpoint: missing record '" + name + "'");
        if (it->second.kind != kind) throw ParseError("checkpoint: record '" + name + "' has the wrong kind");
        return it->second;
    };

    Checkpoint ck;
    try {
        ck.config = parse_config(take("config", Kind::text).text);
        ck.config.validate();
    } catch (const ConfigError& e) {
        throw ParseError(std::string("checkpoint: record 'config': ") + e.what());
    }
    ck.epoch = take("meta.epoch", Kind::u64).u64;
    ck.state = ModelState::create(ck.config.model, 0);
    std::size_t used = 2;
    for (const auto& list : {ck.state.online_params(), ck.state.target_params()}) {
        for (const auto& p : list) {
            assign(p.tensor, take("param/" + p.name, Kind::tensor), "param/" + p.name);
            ++used;
        }
    }
    for (const auto& b : ck.state.buffers()) {
        const auto& rec = take("buffer/" + b.name, Kind::tensor);
        if (rec.values.size() != b.values->size()) throw ParseError("checkpoint: buffer '" + b.name + "' size mismatch");
        *b.values = rec.values;
        ++used;
    }
    ck.optimizer = make_optimizer(ck.state, ck.config);
    ck.optimizer.set_step_count(take("adam.step", Kind::u64).u64);
    ++used;
    for (std::size_t i = 0; i < ck.optimizer.params().size(); ++i) {
        const auto& p = ck.optimizer.params()[i];
        for (auto [prefix, dst] : {std::pair{"adam.m/", &ck.optimizer.first_moment(i)},
                                   std::pair{"adam.v/", &ck.optimizer.second_moment(i)}}) {
            const auto& rec = take(prefix + p.name, Kind::tensor);
            if (rec.shape != p.tensor.shape()) throw ParseError("checkpoint: moment '" + p.name + "' shape mismatch");
            *dst = rec.values;
            ++used;
        }
    }
    if (used != records.size()) throw ParseError("checkpoint: unexpected extra records");
    return ck;
}

void save_checkpoint(const std::string& path, const TrainConfig& config, std::uint64_t epoch, ModelState& state,
                     const AdamW& optimizer) {
    const auto bytes = encode_checkpoint(config, epoch, state, optimizer);
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open '" + path + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write to '" + path + "' failed");
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open checkpoint '" + path + "'");
    const std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    try {
        return decode_checkpoint(bytes);
    } catch (const VersionError& e) {
        throw VersionError(path + ": " + e.what());
    } catch (const ParseError& e) {
        throw ParseError(path + ": " + e.what());
    }
}

}  // namespace lcmae
