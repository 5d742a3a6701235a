#pragma once

// Trace dataset storage.
//
// Binary format (SDTR, little-endian throughout):
//   bytes 0..3   magic "SDTR"
//   u32          version (currently 1)
//   u32          max token count over all records
//   u64          record count
//   per record:  u32 id byte length, id (UTF-8),
//                u32 token count, tokens as u16 ids
//
// A JSONL mirror ({"puzzle_id": ..., "tokens": [integer ids]}) serves
// diffing and external tooling; the binary file is the training input.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "mechlab/trace.hpp"

namespace mechlab {

struct TraceRecord {
    std::string puzzle_id;
    std::vector<TokenId> tokens;
};

inline constexpr char kSdtrMagic[4] = {'S', 'D', 'T', 'R'};
inline constexpr std::uint32_t kSdtrVersion = 1;

namespace detail {

template <class T>
void write_le(std::ostream& out, T value) {
    unsigned char buf[sizeof(T)];
    for (std::size_t i = 0; i < sizeof(T); ++i)
        buf[i] = static_cast<unsigned char>((static_cast<std::uint64_t>(value) >> (8 * i)) & 0xff);
    out.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <class T>
T read_le(std::istream& in) {
    unsigned char buf[sizeof(T)];
    in.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!in) throw std::runtime_error("unexpected end of SDTR stream");
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
    return static_cast<T>(v);
}

}  // namespace detail

class SdtrWriter {
public:
    // trim_len > 0 truncates longer sequences on write (they are kept, not
    // dropped); 0 stores traces untouched.
    explicit SdtrWriter(const std::string& path, std::uint32_t trim_len = 0)
        : path_(path), out_(path, std::ios::binary), trim_len_(trim_len) {
        if (!out_) throw std::runtime_error("cannot write dataset: " + path);
        out_.write(kSdtrMagic, 4);
        detail::write_le<std::uint32_t>(out_, kSdtrVersion);
        detail::write_le<std::uint32_t>(out_, 0);  // max_len, patched in finish()
        detail::write_le<std::uint64_t>(out_, 0);  // record count, patched in finish()
    }

    void add(const TraceRecord& rec) {
        std::size_t n = rec.tokens.size();
        if (trim_len_ != 0 && n > trim_len_) n = trim_len_;
        detail::write_le<std::uint32_t>(out_, static_cast<std::uint32_t>(rec.puzzle_id.size()));
        out_.write(rec.puzzle_id.data(), static_cast<std::streamsize>(rec.puzzle_id.size()));
        detail::write_le<std::uint32_t>(out_, static_cast<std::uint32_t>(n));
        for (std::size_t i = 0; i < n; ++i) detail::write_le<std::uint16_t>(out_, rec.tokens[i]);
        if (n > max_len_) max_len_ = static_cast<std::uint32_t>(n);
        ++count_;
        if (!out_) throw std::runtime_error("short write to dataset: " + path_);
    }

    void finish() {
        out_.seekp(8);
        detail::write_le<std::uint32_t>(out_, max_len_);
        detail::write_le<std::uint64_t>(out_, count_);
        out_.flush();
        if (!out_) throw std::runtime_error("failed to finalize dataset: " + path_);
        out_.close();
    }

    std::uint64_t count() const { return count_; }
    std::uint32_t max_len() const { return max_len_; }

private:
    std::string path_;
    std::ofstream out_;
    std::uint32_t trim_len_ = 0;
    std::uint32_t max_len_ = 0;
    std::uint64_t count_ = 0;
};

struct SdtrHeader {
    std::uint32_t version = 0;
    std::uint32_t max_len = 0;
    std::uint64_t count = 0;
};

inline std::vector<TraceRecord> read_sdtr(const std::string& path, SdtrHeader* header_out = nullptr,
                                          std::uint64_t max_records = 0) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open dataset: " + path);
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kSdtrMagic, 4) != 0)
        throw std::runtime_error("not an SDTR file: " + path);
    SdtrHeader h;
    h.version = detail::read_le<std::uint32_t>(in);
    if (h.version != kSdtrVersion)
        throw std::runtime_error("unsupported SDTR version " + std::to_string(h.version));
    h.max_len = detail::read_le<std::uint32_t>(in);
    h.count = detail::read_le<std::uint64_t>(in);
    if (header_out) *header_out = h;

    std::uint64_t want = h.count;
    if (max_records != 0 && max_records < want) want = max_records;
    std::vector<TraceRecord> records;
    records.reserve(static_cast<std::size_t>(want));
    for (std::uint64_t i = 0; i < want; ++i) {
        TraceRecord rec;
        const auto id_len = detail::read_le<std::uint32_t>(in);
        rec.puzzle_id.resize(id_len);
        in.read(rec.puzzle_id.data(), static_cast<std::streamsize>(id_len));
        const auto n_tok = detail::read_le<std::uint32_t>(in);
        rec.tokens.resize(n_tok);
        for (std::uint32_t k = 0; k < n_tok; ++k) rec.tokens[k] = detail::read_le<std::uint16_t>(in);
        if (!in) throw std::runtime_error("truncated SDTR record in " + path);
        records.push_back(std::move(rec));
    }
    return records;
}

inline void write_jsonl_mirror(const std::string& path, const std::vector<TraceRecord>& records) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write jsonl mirror: " + path);
    for (const auto& rec : records) {
        nlohmann::json j;
        j["puzzle_id"] = rec.puzzle_id;
        j["tokens"] = rec.tokens;
        out << j.dump() << '\n';
    }
    if (!out) throw std::runtime_error("short write to jsonl mirror: " + path);
}

inline std::vector<TraceRecord> read_jsonl_mirror(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open jsonl mirror: " + path);
    std::vector<TraceRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        TraceRecord rec;
        rec.puzzle_id = j.at("puzzle_id").get<std::string>();
        for (const auto& v : j.at("tokens")) {
            const auto id = v.get<std::uint32_t>();
            if (id >= static_cast<std::uint32_t>(kVocabSize))
                throw std::runtime_error("token id out of range in " + path);
            rec.tokens.push_back(static_cast<TokenId>(id));
        }
        records.push_back(std::move(rec));
    }
    return records;
}

}  // namespace mechlab
