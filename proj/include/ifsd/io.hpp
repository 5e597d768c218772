#pragma once

#include "ifsd/core.hpp"

#include <filesystem>
#include <string>

// Line-delimited text format for scenes, splits and task sequences.
// One JSON record per line, fields in fixed order, reals printed with
// 9 significant digits. Emission is hand-rolled so byte output is a pure
// function of the data; parsing goes through nlohmann::json.

namespace ifsd {

// printf %.9g / %.17g formatting.
std::string format_g9(double x);
std::string format_g17(double x);

// The canonical double obtained by printing with %.9g and parsing back.
// The world generator quantizes every emitted real through this so that
// serialized datasets are exactly the values downstream code sees.
double quantize9(double x);

std::string scene_to_line(const Scene& scene);
Scene scene_from_line(const std::string& line);

std::string split_to_text(const DatasetSplit& split);
DatasetSplit split_from_text(const std::string& text);

std::string sequence_to_text(const TaskSequence& seq);
TaskSequence sequence_from_text(const std::string& text);

void write_file(const std::filesystem::path& path, const std::string& content);
std::string read_file(const std::filesystem::path& path);

void save_split(const std::filesystem::path& path, const DatasetSplit& split);
DatasetSplit load_split(const std::filesystem::path& path);

void save_sequence(const std::filesystem::path& path, const TaskSequence& seq);
TaskSequence load_sequence(const std::filesystem::path& path);

} // namespace ifsd
