#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "rfd/ndcore/error.hpp"

namespace rfd::io {

/// Shortest decimal form that parses back to the same double.
inline std::string format_double(double v) {
    char buf[32];
    auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
    require(ec == std::errc(), ErrorCode::internal, "format_double failed");
    return std::string(buf, end);
}

inline double parse_double(std::string_view s, std::string_view where) {
    double v = 0.0;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    require(ec == std::errc() && ptr == s.data() + s.size(), ErrorCode::format,
            "bad number '" + std::string(s) + "' in " + std::string(where));
    return v;
}

/// Row-oriented CSV writer. Values are written as they come; no quoting is
/// needed because no field ever contains a comma.
class CsvWriter {
public:
    explicit CsvWriter(std::vector<std::string> header) : header_(std::move(header)) {}

    CsvWriter& row(const std::vector<std::string>& fields) {
        require(fields.size() == header_.size(), ErrorCode::shape_mismatch,
                "csv row has " + std::to_string(fields.size()) + " fields, header has " +
                    std::to_string(header_.size()));
        rows_.push_back(fields);
        return *this;
    }

    std::string str() const {
        std::ostringstream out;
        emit(out, header_);
        for (const auto& r : rows_) emit(out, r);
        return out.str();
    }

    void save(const std::filesystem::path& path) const {
        std::ofstream out(path, std::ios::binary | std::ios::trunc);
        require(static_cast<bool>(out), ErrorCode::io, "cannot write " + path.string());
        out << str();
        require(static_cast<bool>(out), ErrorCode::io, "write failed for " + path.string());
    }

    std::size_t size() const noexcept { return rows_.size(); }

private:
    static void emit(std::ostream& out, const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) out << (i ? "," : "") << fields[i];
        out << '\n';
    }

    std::vector<std::string> header_;
    std::vector<std::vector<std::string>> rows_;
};

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(std::string_view name) const {
        for (std::size_t i = 0; i < header.size(); ++i)
            if (header[i] == name) return i;
        throw Error(ErrorCode::format, "csv has no column '" + std::string(name) + "'");
    }
};

inline CsvTable read_csv(const std::filesystem::path& path) {
    std::ifstream in(path);
    require(static_cast<bool>(in), ErrorCode::io, "cannot open " + path.string());
    auto split = [](const std::string& line) {
        std::vector<std::string> out;
        std::string cur;
        std::istringstream ls(line);
        while (std::getline(ls, cur, ',')) out.push_back(cur);
        if (!line.empty() && line.back() == ',') out.emplace_back();
        return out;
    };
    CsvTable t;
    std::string line;
    require(static_cast<bool>(std::getline(in, line)), ErrorCode::format, path.string() + " is empty");
    t.header = split(line);
    std::size_t lineno = 1;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        auto fields = split(line);
        require(fields.size() == t.header.size(), ErrorCode::format,
                path.string() + ":" + std::to_string(lineno) + ": expected " + std::to_string(t.header.size()) +
                    " fields");
        t.rows.push_back(std::move(fields));
    }
    return t;
}

} // namespace rfd::io
