#include "ofq/csv.hpp"

#include <cstdio>

#include "ofq/errors.hpp"

namespace ofq {

CsvWriter::CsvWriter(const std::filesystem::path& path, std::vector<std::string> header)
    : path_(path), columns_(header.size()) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    out_.open(path);
    if (!out_) throw IoError("cannot open " + path.string() + " for writing");
    for (std::size_t i = 0; i < header.size(); ++i) out_ << (i ? "," : "") << header[i];
    out_ << '\n';
}

void CsvWriter::sep() {
    if (current_ >= columns_) throw ContractError(path_.string() + ": too many columns in row");
    if (current_++) out_ << ',';
}

CsvWriter& CsvWriter::operator<<(double v) {
    sep();
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    out_ << buf;
    return *this;
}

CsvWriter& CsvWriter::operator<<(long long v) {
    sep();
    out_ << v;
    return *this;
}

CsvWriter& CsvWriter::operator<<(unsigned long long v) {
    sep();
    out_ << v;
    return *this;
}

CsvWriter& CsvWriter::operator<<(const std::string& v) {
    sep();
    if (v.find_first_of(",\"\n") != std::string::npos) {
        out_ << '"';
        for (char c : v) out_ << (c == '"' ? "\"\"" : std::string(1, c));
        out_ << '"';
    } else {
        out_ << v;
    }
    return *this;
}

void CsvWriter::end_row() {
    if (current_ != columns_) {
        throw ContractError(path_.string() + ": row has " + std::to_string(current_) + " columns, header has " +
                            std::to_string(columns_));
    }
    out_ << '\n';
    current_ = 0;
    if (!out_) throw IoError("write failed: " + path_.string());
}

void CsvWriter::flush() { out_.flush(); }

}  // namespace ofq
