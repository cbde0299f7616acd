#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

namespace ofq {

/// Comma-separated writer with a fixed header. Doubles are written with
/// enough digits to round-trip.
class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, std::vector<std::string> header);

    CsvWriter& operator<<(double v);
    CsvWriter& operator<<(long long v);
    CsvWriter& operator<<(unsigned long long v);
    CsvWriter& operator<<(unsigned long v) { return *this << static_cast<unsigned long long>(v); }
    CsvWriter& operator<<(int v) { return *this << static_cast<long long>(v); }
    CsvWriter& operator<<(const std::string& v);
    CsvWriter& operator<<(const char* v) { return *this << std::string(v); }
    /// Ends the row; throws if the column count does not match the header.
    void end_row();
    void flush();

    const std::filesystem::path& path() const { return path_; }

private:
    void sep();

    std::filesystem::path path_;
    std::ofstream out_;
    std::size_t columns_;
    std::size_t current_ = 0;
};

}  // namespace ofq
