#pragma once

#include <array>
#include <bit>
#include <cctype>
#include <cstdint>
#include <cstring>
#include <istream>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace nagsel {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Raised on malformed binary or text inputs. Carries the byte offset (binary)
// or line number (text) where parsing failed.
class FormatError : public std::runtime_error {
public:
    FormatError(std::string what, std::uint64_t position, bool is_line = false)
        : std::runtime_error(what + (is_line ? " (line " : " (byte offset ") + std::to_string(position) + ")"),
          detail_(std::move(what)),
          position_(position),
          is_line_(is_line) {}

    // Same error, prefixed with the file it came from.
    FormatError in_file(const std::string& path) const { return FormatError(path + ": " + detail_, position_, is_line_); }

    std::uint64_t position() const noexcept { return position_; }
    bool          is_line() const noexcept { return is_line_; }

private:
    std::string   detail_;
    std::uint64_t position_;
    bool          is_line_;
};

enum class ProjType : std::uint8_t { Q = 0, K = 1, V = 2, UP = 3, DOWN = 4 };

inline constexpr std::array<ProjType, 5> kAllProjTypes{ProjType::Q, ProjType::K, ProjType::V, ProjType::UP,
                                                       ProjType::DOWN};

inline std::string_view to_string(ProjType p) {
    switch (p) {
        case ProjType::Q: return "Q";
        case ProjType::K: return "K";
        case ProjType::V: return "V";
        case ProjType::UP: return "UP";
        case ProjType::DOWN: return "DOWN";
    }
    return "?";
}

inline ProjType parse_proj_type(std::string_view s) {
    std::string upper(s);
    for (auto& ch : upper) ch = static_cast<char>(std::toupper(static_cast<unsigned char>(ch)));
    if (upper == "Q" || upper == "Q_PROJ") return ProjType::Q;
    if (upper == "K" || upper == "K_PROJ") return ProjType::K;
    if (upper == "V" || upper == "V_PROJ") return ProjType::V;
    if (upper == "UP" || upper == "UP_PROJ") return ProjType::UP;
    if (upper == "DOWN" || upper == "DOWN_PROJ") return ProjType::DOWN;
    throw ConfigError("unsupported projection type '" + std::string(s) + "' (expected Q, K, V, UP or DOWN)");
}

inline ProjType proj_type_from_byte(std::uint8_t b, std::uint64_t offset) {
    if (b > static_cast<std::uint8_t>(ProjType::DOWN)) {
        throw FormatError("invalid projection type code " + std::to_string(b), offset);
    }
    return static_cast<ProjType>(b);
}

struct ProjectionRef {
    std::uint32_t layer = 0;  // 0-based
    ProjType      proj  = ProjType::UP;

    friend bool operator==(const ProjectionRef&, const ProjectionRef&)  = default;
    friend auto operator<=>(const ProjectionRef&, const ProjectionRef&) = default;
};

namespace io {

// Little-endian writer that tracks how many bytes it emitted.
class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    template <typename T>
    void put(T value) {
        static_assert(std::is_trivially_copyable_v<T>);
        out_.write(reinterpret_cast<const char*>(&value), sizeof(T));
        written_ += sizeof(T);
    }

    void put_bytes(std::string_view bytes) {
        out_.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
        written_ += bytes.size();
    }

    template <typename T>
    void put_array(const T* data, std::size_t n) {
        out_.write(reinterpret_cast<const char*>(data), static_cast<std::streamsize>(n * sizeof(T)));
        written_ += n * sizeof(T);
    }

    void check() const {
        if (!out_) throw std::runtime_error("write failed after " + std::to_string(written_) + " bytes");
    }

    std::uint64_t written() const noexcept { return written_; }

private:
    std::ostream& out_;
    std::uint64_t written_ = 0;
};

// Little-endian reader; every short read raises FormatError at the failing offset.
class Reader {
public:
    explicit Reader(std::istream& in, std::uint64_t start_offset = 0) : in_(in), offset_(start_offset) {}

    template <typename T>
    T get(std::string_view what) {
        T value{};
        read_raw(reinterpret_cast<char*>(&value), sizeof(T), what);
        return value;
    }

    template <typename T>
    void get_array(T* data, std::size_t n, std::string_view what) {
        read_raw(reinterpret_cast<char*>(data), n * sizeof(T), what);
    }

    void expect_magic(std::string_view magic) {
        std::string got(magic.size(), '\0');
        read_raw(got.data(), got.size(), "magic");
        if (got != magic) {
            throw FormatError("bad magic: expected '" + std::string(magic) + "'", offset_ - magic.size());
        }
    }

    // True when the stream is exhausted exactly at a record boundary.
    bool at_eof() {
        return in_.peek() == std::char_traits<char>::eof();
    }

    std::uint64_t offset() const noexcept { return offset_; }

    // After an external seek on the underlying stream.
    void set_offset(std::uint64_t offset) noexcept { offset_ = offset; }

private:
    void read_raw(char* dst, std::size_t n, std::string_view what) {
        in_.read(dst, static_cast<std::streamsize>(n));
        auto got = static_cast<std::size_t>(in_.gcount());
        if (got != n) {
            throw FormatError("truncated input while reading " + std::string(what) + ": wanted " +
                                  std::to_string(n) + " bytes, got " + std::to_string(got),
                              offset_ + got);
        }
        offset_ += n;
    }

    std::istream& in_;
    std::uint64_t offset_;
};

}  // namespace io

}  // namespace nagsel
